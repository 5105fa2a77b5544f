use crate::error::{Error, Result};

/// Row-major `rows x cols` matrix of samples by attributes.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

/// Binary ground truth or predictions, one row per sample.
pub type LabelMatrix = Matrix<u8>;
/// Per-attribute scores (probabilities), one row per sample.
pub type ScoreMatrix = Matrix<f32>;

impl<T: Copy> Matrix<T> {
    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::shape(format!(
                "{rows} x {cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("ragged rows"));
        }
        Matrix::from_vec(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<T> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    pub fn same_shape<U>(&self, other: &Matrix<U>) -> Result<()> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::shape(format!(
                "{}x{} vs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        Ok(())
    }

    /// Stacks `other` below `self`.
    pub fn append(&mut self, other: &Matrix<T>) -> Result<()> {
        if self.rows > 0 && self.cols != other.cols {
            return Err(Error::shape("column count mismatch on append"));
        }
        self.cols = other.cols;
        self.rows += other.rows;
        self.data.extend_from_slice(&other.data);
        Ok(())
    }

    pub fn empty(cols: usize) -> Self {
        Matrix { rows: 0, cols, data: Vec::new() }
    }
}

impl LabelMatrix {
    /// Builds a label matrix, rejecting anything other than 0/1.
    pub fn binary(rows: usize, cols: usize, data: Vec<u8>) -> Result<Self> {
        if let Some(v) = data.iter().find(|&&v| v > 1) {
            return Err(Error::data(format!("label value {v} is not 0 or 1")));
        }
        Matrix::from_vec(rows, cols, data)
    }

    /// Labels from floats, which must be exactly 0.0 or 1.0.
    pub fn from_f32(rows: usize, cols: usize, data: &[f32]) -> Result<Self> {
        let mut out = Vec::with_capacity(data.len());
        for &v in data {
            out.push(match v {
                0.0 => 0,
                1.0 => 1,
                _ => return Err(Error::data(format!("label value {v} is not 0 or 1"))),
            });
        }
        Matrix::from_vec(rows, cols, out)
    }

    pub fn to_f32(&self) -> Vec<f32> {
        self.data.iter().map(|&v| v as f32).collect()
    }

    pub fn positives_in_column(&self, c: usize) -> usize {
        (0..self.rows).filter(|&r| self.get(r, c) == 1).count()
    }
}
