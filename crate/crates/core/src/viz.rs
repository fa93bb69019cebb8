//! Two-dimensional PCA of phonetic features and scatter CSV output.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::math::{Matrix, Vector};

#[derive(Debug, Error)]
pub enum VizError {
    #[error("degenerate data")]
    Degenerate,
    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("feature dimension {dim} is smaller than {k} components")]
    TooFewDims { dim: usize, k: usize },
    #[error("feature {index} has dimension {got}, expected {expected}")]
    DimMismatch { index: usize, expected: usize, got: usize },
    #[error("{points} points but {labels} labels")]
    LengthMismatch { points: usize, labels: usize },
    #[error("non-finite feature value")]
    NonFinite,
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed scatter csv: {0}")]
    Csv(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaBasis {
    pub mean: Vector,
    /// One unit-norm principal direction per row.
    pub components: Matrix,
    pub explained_variance: Vector,
}

impl PcaBasis {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Fits the top `k` principal components of `features`.
///
/// Each component is flipped so its first nonzero coordinate is positive.
pub fn pca_fit(features: &[Vector], k: usize) -> Result<PcaBasis, VizError> {
    if features.len() < k + 1 {
        return Err(VizError::TooFewSamples {
            needed: k + 1,
            got: features.len(),
        });
    }
    let dim = features[0].len();
    if dim < k {
        return Err(VizError::TooFewDims { dim, k });
    }
    for (index, f) in features.iter().enumerate() {
        if f.len() != dim {
            return Err(VizError::DimMismatch {
                index,
                expected: dim,
                got: f.len(),
            });
        }
        if f.iter().any(|v| !v.is_finite()) {
            return Err(VizError::NonFinite);
        }
    }
    let n = features.len() as f64;
    let mut mean = vec![0.0; dim];
    for f in features {
        for (m, v) in mean.iter_mut().zip(f) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);

    let mut cov = DMatrix::<f64>::zeros(dim, dim);
    let mut centered = vec![0.0; dim];
    for f in features {
        for ((c, v), m) in centered.iter_mut().zip(f).zip(&mean) {
            *c = v - m;
        }
        for a in 0..dim {
            let ca = centered[a];
            if ca == 0.0 {
                continue;
            }
            for b in a..dim {
                cov[(a, b)] += ca * centered[b];
            }
        }
    }
    for a in 0..dim {
        for b in a..dim {
            let v = cov[(a, b)] / (n - 1.0);
            cov[(a, b)] = v;
            cov[(b, a)] = v;
        }
    }
    if cov.diagonal().iter().all(|&v| v == 0.0) {
        return Err(VizError::Degenerate);
    }

    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));

    let mut components = Matrix::zeros(k, dim);
    let mut explained = Vec::with_capacity(k);
    for (row, &idx) in order.iter().take(k).enumerate() {
        let col = eig.eigenvectors.column(idx);
        let norm = col.norm();
        let flip = match col.iter().find(|v| **v != 0.0) {
            Some(v) if *v < 0.0 => -1.0,
            _ => 1.0,
        };
        for (j, v) in col.iter().enumerate() {
            components.set(row, j, flip * v / norm);
        }
        explained.push(eig.eigenvalues[idx].max(0.0));
    }
    Ok(PcaBasis {
        mean,
        components,
        explained_variance: explained,
    })
}

/// `(f - mean) · componentsᵀ` for every feature.
pub fn pca_project(basis: &PcaBasis, features: &[Vector]) -> Result<Vec<Vector>, VizError> {
    let dim = basis.dim();
    features
        .iter()
        .enumerate()
        .map(|(index, f)| {
            if f.len() != dim {
                return Err(VizError::DimMismatch {
                    index,
                    expected: dim,
                    got: f.len(),
                });
            }
            let centered: Vector = f.iter().zip(&basis.mean).map(|(v, m)| v - m).collect();
            Ok(basis.components.matvec(&centered))
        })
        .collect()
}

pub const SCATTER_HEADER: &str = "x,y,language";

pub fn scatter_csv(points: &[Vector], languages: &[String]) -> Result<String, VizError> {
    if points.len() != languages.len() {
        return Err(VizError::LengthMismatch {
            points: points.len(),
            labels: languages.len(),
        });
    }
    let mut s = String::from(SCATTER_HEADER);
    s.push('\n');
    for (p, l) in points.iter().zip(languages) {
        s.push_str(&format!("{},{},{}\n", p[0], p[1], l));
    }
    Ok(s)
}

pub fn emit_scatter(points: &[Vector], languages: &[String], path: impl AsRef<Path>) -> Result<(), VizError> {
    fs::write(path, scatter_csv(points, languages)?)?;
    Ok(())
}

pub fn parse_scatter(text: &str) -> Result<Vec<(f64, f64, String)>, VizError> {
    let mut lines = text.lines();
    if lines.next() != Some(SCATTER_HEADER) {
        return Err(VizError::Csv("missing header".into()));
    }
    lines
        .map(|l| {
            let mut it = l.splitn(3, ',');
            let mut num = || -> Result<f64, VizError> {
                it.next()
                    .ok_or_else(|| VizError::Csv(l.to_string()))?
                    .parse()
                    .map_err(|_| VizError::Csv(l.to_string()))
            };
            let x = num()?;
            let y = num()?;
            let lang = it.next().ok_or_else(|| VizError::Csv(l.to_string()))?;
            Ok((x, y, lang.to_string()))
        })
        .collect()
}
