//! Buffer coverage, accuracy matrices and seed-level confidence intervals.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::buffering::{Buffer, CoverageLevel};
use crate::error::{Error, Result};
use crate::hierarchy::LabelHierarchy;
use crate::types::SceneId;

/// `a[i][j]`: accuracy on the scene of task `i` after finishing task `j`.
/// Indices are 0-based task positions; only `j >= i` is ever defined.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    n: usize,
    a: Vec<Vec<Option<f64>>>,
}

impl AccuracyMatrix {
    pub fn new(n_scenes: usize) -> Self {
        AccuracyMatrix {
            n: n_scenes,
            a: vec![vec![None; n_scenes]; n_scenes],
        }
    }

    pub fn from_rows(rows: &[Vec<Option<f64>>]) -> Result<Self> {
        let mut m = AccuracyMatrix::new(rows.len());
        for (i, row) in rows.iter().enumerate() {
            if row.len() != rows.len() {
                return Err(Error::ShapeMismatch(format!("row {i} has {} columns", row.len())));
            }
            for (j, v) in row.iter().enumerate() {
                if let Some(v) = v {
                    m.set(i, j, *v)?;
                }
            }
        }
        Ok(m)
    }

    pub fn n_scenes(&self) -> usize {
        self.n
    }

    pub fn set(&mut self, i: usize, j: usize, acc: f64) -> Result<()> {
        if i >= self.n || j >= self.n || j < i {
            return Err(Error::ShapeMismatch(format!(
                "entry ({i}, {j}) is outside the usable triangle of a {}x{} matrix",
                self.n, self.n
            )));
        }
        if !(0.0..=1.0).contains(&acc) {
            return Err(Error::ShapeMismatch(format!("accuracy {acc} outside [0, 1]")));
        }
        self.a[i][j] = Some(acc);
        Ok(())
    }

    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        self.a.get(i)?.get(j).copied().flatten()
    }

    /// Defined entries as `(i, j, accuracy)` in row-major order.
    pub fn entries(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.n).flat_map(move |i| (i..self.n).filter_map(move |j| self.a[i][j].map(|v| (i, j, v))))
    }

    /// Accuracy on each scene after the last task.
    pub fn final_accuracies(&self) -> Result<Vec<f64>> {
        let last = self.n.saturating_sub(1);
        (0..self.n)
            .map(|i| self.get(i, last).ok_or(Error::IncompleteMatrix { row: i, col: last }))
            .collect()
    }
}

/// Mean of row `i` over stages `j = i..n`.
pub fn average_accuracy(m: &AccuracyMatrix, i: usize) -> Result<f64> {
    if i >= m.n_scenes() {
        return Err(Error::IncompleteMatrix { row: i, col: i });
    }
    let mut sum = 0.0;
    for j in i..m.n_scenes() {
        sum += m.get(i, j).ok_or(Error::IncompleteMatrix { row: i, col: j })?;
    }
    Ok(sum / (m.n_scenes() - i) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub per_scene: BTreeMap<SceneId, f64>,
    pub average: f64,
}

/// Per-scene fraction of labels at `level` held by the union of that scene's
/// buffer entries, and its mean over every scene in `hierarchies`.
pub fn buffer_coverage(
    buf: &Buffer,
    hierarchies: &BTreeMap<SceneId, &LabelHierarchy>,
    level: CoverageLevel,
) -> Result<CoverageReport> {
    if let Some(e) = buf
        .entries()
        .iter()
        .find(|e| !hierarchies.contains_key(&e.instance.scene))
    {
        return Err(Error::NoHierarchy(e.instance.scene));
    }
    let mut per_scene = BTreeMap::new();
    for (&scene, h) in hierarchies {
        let denom = match level {
            CoverageLevel::Cluster(l) => h.cardinality_checked(l)?,
            CoverageLevel::Exact3D => h.point_count(),
        };
        let covered = buf.class_union(h, level)?.len();
        per_scene.insert(scene, covered as f64 / denom as f64);
    }
    let average = if per_scene.is_empty() {
        0.0
    } else {
        per_scene.values().sum::<f64>() / per_scene.len() as f64
    };
    Ok(CoverageReport { per_scene, average })
}

/// Mean and the half-width `t_{0.975, n-1} * s / sqrt(n)` of a 95% Student-t
/// interval.
pub fn confidence_interval_95(values: &[f64]) -> Result<(f64, f64)> {
    let n = values.len();
    if n < 2 {
        return Err(Error::InsufficientSamples(n));
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let t = StudentsT::new(0.0, 1.0, (n - 1) as f64)
        .expect("positive degrees of freedom")
        .inverse_cdf(0.975);
    Ok((mean, t * var.sqrt() / (n as f64).sqrt()))
}

/// Stored entries per scene, including zeros for scenes that were offered
/// but currently hold nothing.
pub fn class_distribution(buf: &Buffer) -> BTreeMap<SceneId, usize> {
    let mut out: BTreeMap<SceneId, usize> = buf.observed_counts().keys().map(|&s| (s, 0)).collect();
    for e in buf.entries() {
        *out.entry(e.instance.scene).or_insert(0) += 1;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row_matrix(row: &[f64]) -> AccuracyMatrix {
        let n = row.len();
        let mut m = AccuracyMatrix::new(n);
        for (j, &v) in row.iter().enumerate() {
            m.set(0, j, v).unwrap();
        }
        for i in 1..n {
            for j in i..n {
                m.set(i, j, 0.5).unwrap();
            }
        }
        m
    }

    #[test]
    fn average_accuracy_examples() {
        let m = row_matrix(&[0.9, 0.6, 0.3]);
        assert!((average_accuracy(&m, 0).unwrap() - 0.6).abs() < 1e-15);
        assert_eq!(average_accuracy(&m, 2).unwrap(), m.get(2, 2).unwrap());
        let single = row_matrix(&[0.75]);
        assert_eq!(average_accuracy(&single, 0).unwrap(), 0.75);
    }

    #[test]
    fn incomplete_row_is_an_error() {
        let mut m = AccuracyMatrix::new(3);
        m.set(0, 0, 1.0).unwrap();
        m.set(0, 2, 1.0).unwrap();
        assert!(matches!(
            average_accuracy(&m, 0),
            Err(Error::IncompleteMatrix { row: 0, col: 1 })
        ));
        assert!(m.set(1, 0, 0.5).is_err());
        assert!(m.set(0, 1, 1.5).is_err());
    }

    #[test]
    fn ci_examples() {
        let (mean, hw) = confidence_interval_95(&[0.4; 5]).unwrap();
        assert!((mean - 0.4).abs() < 1e-15);
        assert_eq!(hw, 0.0);
        let (mean, hw) = confidence_interval_95(&[0.0, 1.0]).unwrap();
        assert_eq!(mean, 0.5);
        // t_{0.975,1} = 12.7062; s = 0.7071; sqrt(2) = 1.4142
        assert!((hw - 6.353).abs() < 1e-3, "{hw}");
        assert!(matches!(
            confidence_interval_95(&[1.0]),
            Err(Error::InsufficientSamples(1))
        ));
    }

    #[test]
    fn ci_monte_carlo_coverage() {
        let mut rng = crate::rng::RngHandle::new(2024, "ci");
        let (mu, sd) = (3.0, 2.0);
        let trials = 10_000;
        let mut covered = 0;
        for _ in 0..trials {
            let xs: Vec<f64> = (0..5).map(|_| mu + sd * rng.normal()).collect();
            let (m, hw) = confidence_interval_95(&xs).unwrap();
            if (m - mu).abs() <= hw {
                covered += 1;
            }
        }
        let rate = covered as f64 / trials as f64;
        assert!((0.94..=0.96).contains(&rate), "coverage {rate}");
    }
}
