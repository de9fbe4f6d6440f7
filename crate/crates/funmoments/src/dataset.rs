//! Functional dataset container and cell-level preprocessing.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// N curves observed on a common grid, paired with scalar covariates.
#[derive(Debug, Clone)]
pub struct FunctionalDataset {
    /// N x T response matrix; row i is the curve of subject i.
    pub y: DMatrix<f64>,
    /// N x P covariate matrix (include an intercept column explicitly).
    pub x: DMatrix<f64>,
    /// T-point domain grid shared by all curves.
    pub grid: Vec<f64>,
    /// Covariate column names, used in file headers and messages.
    pub x_names: Vec<String>,
}

impl FunctionalDataset {
    pub fn new(
        y: DMatrix<f64>,
        x: DMatrix<f64>,
        grid: Vec<f64>,
        x_names: Vec<String>,
    ) -> Result<Self> {
        if y.nrows() != x.nrows() {
            return Err(Error::data(format!(
                "Y has {} rows but X has {} rows",
                y.nrows(),
                x.nrows()
            )));
        }
        if y.ncols() != grid.len() {
            return Err(Error::data(format!(
                "Y has {} columns but the grid has {} points",
                y.ncols(),
                grid.len()
            )));
        }
        if x_names.len() != x.ncols() {
            return Err(Error::data("covariate name count does not match X columns"));
        }
        for r in 0..y.nrows() {
            for c in 0..y.ncols() {
                if !y[(r, c)].is_finite() {
                    return Err(Error::data(format!(
                        "non-finite response at row {} column {}",
                        r + 1,
                        c + 1
                    )));
                }
            }
        }
        for r in 0..x.nrows() {
            for c in 0..x.ncols() {
                if !x[(r, c)].is_finite() {
                    return Err(Error::data(format!(
                        "non-finite covariate at row {} column {}",
                        r + 1,
                        c + 1
                    )));
                }
            }
        }
        Ok(FunctionalDataset { y, x, grid, x_names })
    }

    pub fn n_subjects(&self) -> usize {
        self.y.nrows()
    }

    pub fn n_points(&self) -> usize {
        self.y.ncols()
    }

    pub fn n_covariates(&self) -> usize {
        self.x.ncols()
    }

    /// Apply log(1 + y) cell-wise; cells at or below -1 are data errors.
    pub fn log1p_transform(&mut self) -> Result<()> {
        for r in 0..self.y.nrows() {
            for c in 0..self.y.ncols() {
                let v = self.y[(r, c)];
                if v <= -1.0 {
                    return Err(Error::data(format!(
                        "log1p transform undefined for value {v} at row {} column {}",
                        r + 1,
                        c + 1
                    )));
                }
                self.y[(r, c)] = v.ln_1p();
            }
        }
        Ok(())
    }

    /// Center the named covariate columns in place; returns (name, mean)
    /// pairs for the manifest.
    pub fn center_covariates(&mut self, names: &[String]) -> Result<Vec<(String, f64)>> {
        let mut centered = Vec::with_capacity(names.len());
        for name in names {
            let col = self
                .x_names
                .iter()
                .position(|n| n == name)
                .ok_or_else(|| Error::config(format!("unknown covariate to center: {name}")))?;
            let mean = self.x.column(col).mean();
            for r in 0..self.x.nrows() {
                self.x[(r, col)] -= mean;
            }
            centered.push((name.clone(), mean));
        }
        Ok(centered)
    }

    /// Subject-level resample: rows of Y and X taken jointly.
    pub fn resample(&self, indices: &[usize]) -> FunctionalDataset {
        let y = DMatrix::from_fn(indices.len(), self.y.ncols(), |r, c| self.y[(indices[r], c)]);
        let x = DMatrix::from_fn(indices.len(), self.x.ncols(), |r, c| self.x[(indices[r], c)]);
        FunctionalDataset {
            y,
            x,
            grid: self.grid.clone(),
            x_names: self.x_names.clone(),
        }
    }
}
