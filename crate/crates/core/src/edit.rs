//! Word-level edit matrix shared by supervision, the model and generation.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EditType {
    #[default]
    None,
    Substitute,
    Insert,
}

impl EditType {
    pub const ALL: [EditType; 3] = [EditType::None, EditType::Substitute, EditType::Insert];

    /// Class index used by the model and label files (0/1/2).
    pub fn index(self) -> usize {
        match self {
            EditType::None => 0,
            EditType::Substitute => 1,
            EditType::Insert => 2,
        }
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }
}

/// `rows × cols` grid of edit labels; rows index the joined context, columns
/// the prepared incomplete utterance (including `[E]`).
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct EditMatrix {
    rows: usize,
    cols: usize,
    cells: Vec<EditType>,
}

impl EditMatrix {
    pub fn new(rows: usize, cols: usize) -> Self {
        EditMatrix { rows, cols, cells: vec![EditType::None; rows * cols] }
    }

    /// Builds a matrix from row-major cells. Returns `None` on a size mismatch.
    pub fn from_cells(rows: usize, cols: usize, cells: Vec<EditType>) -> Option<Self> {
        (cells.len() == rows * cols).then_some(EditMatrix { rows, cols, cells })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn cells(&self) -> &[EditType] {
        &self.cells
    }

    pub fn get(&self, row: usize, col: usize) -> EditType {
        assert!(row < self.rows && col < self.cols, "cell ({row}, {col}) out of bounds");
        self.cells[row * self.cols + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: EditType) {
        assert!(row < self.rows && col < self.cols, "cell ({row}, {col}) out of bounds");
        self.cells[row * self.cols + col] = value;
    }

    /// Labels every cell of `rows × cols` with `value`.
    pub fn fill(&mut self, rows: std::ops::Range<usize>, cols: std::ops::Range<usize>, value: EditType) {
        for r in rows {
            for c in cols.clone() {
                self.set(r, c, value);
            }
        }
    }

    pub fn is_all_none(&self) -> bool {
        self.cells.iter().all(|&c| c == EditType::None)
    }

    pub fn count(&self, value: EditType) -> usize {
        self.cells.iter().filter(|&&c| c == value).count()
    }

    /// Row-major class indices, as written to label files.
    pub fn to_indices(&self) -> Vec<u8> {
        self.cells.iter().map(|c| c.index() as u8).collect()
    }

    pub fn from_indices(rows: usize, cols: usize, indices: &[u8]) -> Option<Self> {
        let cells = indices.iter().map(|&i| EditType::from_index(i as usize)).collect::<Option<Vec<_>>>()?;
        Self::from_cells(rows, cols, cells)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn index_roundtrip() {
        for t in EditType::ALL {
            assert_eq!(EditType::from_index(t.index()), Some(t));
        }
        assert_eq!(EditType::from_index(3), None);
    }

    #[test]
    fn fill_and_indices() {
        let mut m = EditMatrix::new(2, 3);
        m.fill(0..2, 1..2, EditType::Insert);
        assert_eq!(m.to_indices(), vec![0, 2, 0, 0, 2, 0]);
        assert_eq!(EditMatrix::from_indices(2, 3, &m.to_indices()), Some(m.clone()));
        assert_eq!(EditMatrix::from_indices(2, 2, &m.to_indices()), None);
        assert_eq!(m.count(EditType::Insert), 2);
    }
}
