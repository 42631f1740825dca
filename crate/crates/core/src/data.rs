//! JSON-lines datasets and label files.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dialogue::{detokenize, tokenize, DialogueExample, ExampleError, Token, TokenizationMode};
use crate::edit::EditMatrix;
use crate::supervision::Coverage;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: {source}")]
    Invalid {
        line: usize,
        #[source]
        source: ExampleError,
    },
    #[error("line {line}: missing \"rewrite\"")]
    MissingRewrite { line: usize },
}

impl DataError {
    /// 1-based line of the offending record, if any.
    pub fn line(&self) -> Option<usize> {
        match self {
            DataError::Io { .. } => None,
            DataError::Parse { line, .. } | DataError::Invalid { line, .. } | DataError::MissingRewrite { line } => {
                Some(*line)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawExample {
    pub context: Vec<String>,
    pub current: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rewrite: Option<String>,
}

impl RawExample {
    pub fn from_example(ex: &DialogueExample, mode: TokenizationMode) -> Self {
        RawExample {
            context: ex.context_utterances().iter().map(|u| detokenize(u, mode)).collect(),
            current: detokenize(ex.incomplete(), mode),
            rewrite: ex.gold_rewrite().map(|r| detokenize(r, mode)),
        }
    }

    /// Tokenizes every field. Empty context utterances are dropped.
    pub fn to_example(&self, mode: TokenizationMode) -> Result<DialogueExample, ExampleError> {
        let context: Vec<Vec<Token>> =
            self.context.iter().map(|u| tokenize(u, mode)).filter(|u| !u.is_empty()).collect();
        DialogueExample::new(context, tokenize(&self.current, mode), self.rewrite.as_deref().map(|r| tokenize(r, mode)))
    }
}

/// Parses JSON-lines text. Blank lines are skipped; `\r\n` endings are accepted.
pub fn parse_dataset(
    text: &str,
    mode: TokenizationMode,
    require_rewrite: bool,
) -> Result<Vec<DialogueExample>, DataError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let raw: RawExample =
            serde_json::from_str(line).map_err(|e| DataError::Parse { line: line_no, message: e.to_string() })?;
        if require_rewrite && raw.rewrite.is_none() {
            return Err(DataError::MissingRewrite { line: line_no });
        }
        out.push(raw.to_example(mode).map_err(|source| DataError::Invalid { line: line_no, source })?);
    }
    Ok(out)
}

pub fn load_dataset(
    path: &Path,
    mode: TokenizationMode,
    require_rewrite: bool,
) -> Result<Vec<DialogueExample>, DataError> {
    let text = read_text(path)?;
    parse_dataset(&text, mode, require_rewrite)
}

pub fn read_text(path: &Path) -> Result<String, DataError> {
    std::fs::read_to_string(path).map_err(|source| DataError::Io { path: path.to_path_buf(), source })
}

pub fn write_text(path: &Path, text: &str) -> Result<(), DataError> {
    std::fs::write(path, text).map_err(|source| DataError::Io { path: path.to_path_buf(), source })
}

pub fn dataset_to_jsonl(examples: &[DialogueExample], mode: TokenizationMode) -> String {
    examples
        .iter()
        .map(|ex| serde_json::to_string(&RawExample::from_example(ex, mode)).expect("plain strings serialize") + "\n")
        .collect()
}

/// One line of a labels file: a gold edit matrix in row-major order
/// (0 = None, 1 = Substitute, 2 = Insert).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelRecord {
    pub rows: usize,
    pub cols: usize,
    pub cells: Vec<u8>,
    pub coverage: Coverage,
}

impl LabelRecord {
    pub fn new(y: &EditMatrix, coverage: Coverage) -> Self {
        LabelRecord { rows: y.rows(), cols: y.cols(), cells: y.to_indices(), coverage }
    }

    pub fn matrix(&self) -> Option<EditMatrix> {
        EditMatrix::from_indices(self.rows, self.cols, &self.cells)
    }
}
