//! Average accuracy and forgetting over a lower-triangular accuracy matrix.
//!
//! Indices are 0-based: row `t` holds the accuracies on tasks `0..=t`
//! measured right after training task `t`.

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    rows: Vec<Vec<f64>>,
}

impl AccuracyMatrix {
    pub fn new() -> Self {
        Self::default()
    }

    /// Builds a matrix from complete rows; row `t` must have `t + 1` entries in `[0, 1]`.
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let mut m = Self::new();
        for r in rows {
            m.push_row(r)?;
        }
        Ok(m)
    }

    pub fn push_row(&mut self, row: Vec<f64>) -> Result<()> {
        let t = self.rows.len();
        if row.len() != t + 1 {
            return Err(LabError::invalid(format!(
                "accuracy row {t} needs {} entries, got {}",
                t + 1,
                row.len()
            )));
        }
        if let Some(v) = row.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(LabError::invalid(format!("accuracy {v} outside [0, 1]")));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn num_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    /// `E[t][task]`, absent when `task > t` or row `t` has not been recorded.
    pub fn get(&self, t: usize, task: usize) -> Option<f64> {
        self.rows.get(t).and_then(|r| r.get(task)).copied()
    }

    fn row(&self, t: usize) -> Result<&[f64]> {
        self.rows
            .get(t)
            .map(Vec::as_slice)
            .ok_or_else(|| LabError::invalid(format!("accuracy row {t} has not been recorded")))
    }
}

/// `A_t`: mean of row `t`.
pub fn average_accuracy(e: &AccuracyMatrix, t: usize) -> Result<f64> {
    let row = e.row(t)?;
    Ok(row.iter().sum::<f64>() / (t + 1) as f64)
}

/// `F_t`: mean over earlier tasks of (best earlier accuracy − accuracy now).
/// `None` for `t = 0`.
pub fn forgetting(e: &AccuracyMatrix, t: usize) -> Result<Option<f64>> {
    let now = e.row(t)?;
    if t == 0 {
        return Ok(None);
    }
    let mut total = 0.0;
    for (task, &current) in now.iter().enumerate().take(t) {
        let mut best = f64::NEG_INFINITY;
        for earlier in task..t {
            best = best.max(e.row(earlier)?[task]);
        }
        total += best - current;
    }
    Ok(Some(total / t as f64))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn average_examples() {
        let e = AccuracyMatrix::from_rows(vec![vec![0.9], vec![0.80, 0.85]]).unwrap();
        assert!((average_accuracy(&e, 1).unwrap() - 0.825).abs() < 1e-15);
        assert_eq!(average_accuracy(&e, 0).unwrap(), 0.9);
        let ones = AccuracyMatrix::from_rows(vec![vec![1.0], vec![1.0, 1.0]]).unwrap();
        assert_eq!(average_accuracy(&ones, 1).unwrap(), 1.0);
    }

    #[test]
    fn forgetting_examples() {
        let e = AccuracyMatrix::from_rows(vec![vec![0.90], vec![0.80, 0.7]]).unwrap();
        assert_eq!(forgetting(&e, 0).unwrap(), None);
        assert!((forgetting(&e, 1).unwrap().unwrap() - 0.10).abs() < 1e-15);
        let e = AccuracyMatrix::from_rows(vec![vec![0.9], vec![0.7, 0.8], vec![0.6, 0.6, 0.9]]).unwrap();
        assert!((forgetting(&e, 2).unwrap().unwrap() - 0.25).abs() < 1e-15);
        let flat = AccuracyMatrix::from_rows(vec![vec![0.5], vec![0.5, 0.4], vec![0.5, 0.4, 0.9]]).unwrap();
        assert_eq!(forgetting(&flat, 2).unwrap(), Some(0.0));
        // later gains count as negative forgetting
        let rising = AccuracyMatrix::from_rows(vec![vec![0.5], vec![0.6, 0.4], vec![0.7, 0.4, 0.9]]).unwrap();
        assert!(forgetting(&rising, 2).unwrap().unwrap() <= 0.0);
    }

    #[test]
    fn incomplete_inputs_are_errors() {
        let e = AccuracyMatrix::from_rows(vec![vec![0.5]]).unwrap();
        assert!(average_accuracy(&e, 1).is_err());
        assert!(forgetting(&e, 1).is_err());
        let mut e = AccuracyMatrix::new();
        assert!(e.push_row(vec![0.5, 0.5]).is_err());
        assert!(e.push_row(vec![1.5]).is_err());
        assert_eq!(e.get(0, 0), None);
    }
}
