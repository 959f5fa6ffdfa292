//! Loading a directory of `.s` programs with optional `.inputs.json`
//! companions.

use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::isa::{parse_asm, AsmProgram, ParseError};
use crate::specsim::RunInputs;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}:{source}")]
    Parse { path: PathBuf, source: ParseError },
    #[error("{path}: {source}")]
    Inputs { path: PathBuf, source: serde_json::Error },
}

#[derive(Debug, Clone)]
pub struct CorpusProgram {
    pub name: String,
    pub path: PathBuf,
    pub program: AsmProgram,
    pub inputs: RunInputs,
}

/// Read `<stem>.inputs.json` next to `path`, or default inputs if absent.
pub fn load_inputs_for(path: &Path) -> Result<RunInputs, CorpusError> {
    let p = path.with_extension("inputs.json");
    match std::fs::read_to_string(&p) {
        Ok(text) => serde_json::from_str(&text).map_err(|source| CorpusError::Inputs { path: p, source }),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(RunInputs::default()),
        Err(source) => Err(CorpusError::Io { path: p, source }),
    }
}

pub fn load_program(path: &Path) -> Result<CorpusProgram, CorpusError> {
    let text = std::fs::read_to_string(path).map_err(|source| CorpusError::Io { path: path.into(), source })?;
    let program = parse_asm(&text).map_err(|source| CorpusError::Parse { path: path.into(), source })?;
    Ok(CorpusProgram {
        name: path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(),
        path: path.into(),
        program,
        inputs: load_inputs_for(path)?,
    })
}

/// Every `.s` file in `dir`, sorted by name.
pub fn load_corpus(dir: &Path) -> Result<Vec<CorpusProgram>, CorpusError> {
    let entries = std::fs::read_dir(dir).map_err(|source| CorpusError::Io { path: dir.into(), source })?;
    let mut paths = Vec::new();
    for e in entries {
        let p = e.map_err(|source| CorpusError::Io { path: dir.into(), source })?.path();
        if p.extension().is_some_and(|x| x == "s") {
            paths.push(p);
        }
    }
    paths.sort();
    paths.iter().map(|p| load_program(p)).collect()
}
