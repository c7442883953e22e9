use nalgebra::{DMatrix, DMatrixView, RowDVector};

use crate::{Error, Result};

/// The token set at one layer: an `N x d` matrix plus, per row, how many of the
/// original patch-embedding rows it aggregates.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenMatrix {
    tokens: DMatrix<f64>,
    layer_index: usize,
    source_counts: Vec<u32>,
}

impl TokenMatrix {
    pub fn new(tokens: DMatrix<f64>, layer_index: usize, source_counts: Vec<u32>) -> Result<Self> {
        if tokens.nrows() == 0 {
            return Err(Error::Shape("token matrix must have at least one row".into()));
        }
        if source_counts.len() != tokens.nrows() {
            return Err(Error::Shape(format!(
                "{} source counts for {} tokens",
                source_counts.len(),
                tokens.nrows()
            )));
        }
        if source_counts.contains(&0) {
            return Err(Error::Shape("source counts must be positive".into()));
        }
        Ok(Self {
            tokens,
            layer_index,
            source_counts,
        })
    }

    /// Fresh tokens where every row stands for exactly one original token.
    pub fn unit(tokens: DMatrix<f64>, layer_index: usize) -> Result<Self> {
        let n = tokens.nrows();
        Self::new(tokens, layer_index, vec![1; n])
    }

    pub fn n_tokens(&self) -> usize {
        self.tokens.nrows()
    }

    pub fn dim(&self) -> usize {
        self.tokens.ncols()
    }

    pub fn layer_index(&self) -> usize {
        self.layer_index
    }

    pub fn tokens(&self) -> &DMatrix<f64> {
        &self.tokens
    }

    pub fn source_counts(&self) -> &[u32] {
        &self.source_counts
    }

    pub fn total_count(&self) -> u64 {
        self.source_counts.iter().map(|&c| u64::from(c)).sum()
    }

    pub fn row(&self, i: usize) -> RowDVector<f64> {
        self.tokens.row(i).into_owned()
    }

    pub fn view(&self) -> DMatrixView<'_, f64> {
        self.tokens.as_view()
    }

    pub fn with_layer_index(mut self, layer_index: usize) -> Self {
        self.layer_index = layer_index;
        self
    }

    /// Replaces the rows, keeping counts and layer. Used after the MLP half of a
    /// block, which transforms tokens without changing their bookkeeping.
    pub fn with_tokens(mut self, tokens: DMatrix<f64>) -> Result<Self> {
        if tokens.nrows() != self.n_tokens() {
            return Err(Error::Shape(format!(
                "replacement has {} rows, expected {}",
                tokens.nrows(),
                self.n_tokens()
            )));
        }
        self.tokens = tokens;
        Ok(self)
    }

    pub fn with_source_counts(mut self, source_counts: Vec<u32>) -> Result<Self> {
        if source_counts.len() != self.n_tokens() || source_counts.contains(&0) {
            return Err(Error::Shape("source counts do not match token rows".into()));
        }
        self.source_counts = source_counts;
        Ok(self)
    }

    /// Keeps the listed rows in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Shape("cannot select zero rows".into()));
        }
        let tokens = self.tokens.select_rows(rows.iter());
        let counts = rows.iter().map(|&r| self.source_counts[r]).collect();
        Self::new(tokens, self.layer_index, counts)
    }

    pub fn into_parts(self) -> (DMatrix<f64>, usize, Vec<u32>) {
        (self.tokens, self.layer_index, self.source_counts)
    }
}
