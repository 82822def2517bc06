//! Per-coordinate affine standardization for model inputs.
//!
//! Densities reported to callers are always in raw data space; the
//! log-Jacobian of the standardization (sum of log scales over the involved
//! coordinates) is added back wherever a model evaluates a density on
//! standardized values.

use crate::error::Result;
use crate::params::ParameterStore;
use crate::tensor::Tensor;

const SCALE_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    pub fn identity(d: usize) -> Self {
        Standardizer { mean: vec![0.0; d], scale: vec![1.0; d] }
    }

    pub fn new(mean: Vec<f64>, scale: Vec<f64>) -> Self {
        let scale = scale.into_iter().map(|s| s.max(SCALE_FLOOR)).collect();
        Standardizer { mean, scale }
    }

    /// Column means and standard deviations of an (n x d) matrix.
    pub fn from_columns(m: &Tensor) -> Self {
        let (n, d) = (m.rows(), m.cols());
        let mut mean = vec![0.0; d];
        for i in 0..n {
            for (j, v) in m.row(i).iter().enumerate() {
                mean[j] += v;
            }
        }
        mean.iter_mut().for_each(|v| *v /= n as f64);
        let mut var = vec![0.0; d];
        for i in 0..n {
            for (j, v) in m.row(i).iter().enumerate() {
                var[j] += (v - mean[j]) * (v - mean[j]);
            }
        }
        let scale = var
            .into_iter()
            .map(|v| (v / (n.max(2) - 1) as f64).sqrt().max(SCALE_FLOOR))
            .collect();
        Standardizer { mean, scale }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn apply_at(&self, v: f64, i: usize) -> f64 {
        (v - self.mean[i]) / self.scale[i]
    }

    pub fn invert_at(&self, v: f64, i: usize) -> f64 {
        v * self.scale[i] + self.mean[i]
    }

    pub fn apply_vec(&self, x: &[f64]) -> Vec<f64> {
        x.iter().enumerate().map(|(i, &v)| self.apply_at(v, i)).collect()
    }

    pub fn invert_vec(&self, x: &[f64]) -> Vec<f64> {
        x.iter().enumerate().map(|(i, &v)| self.invert_at(v, i)).collect()
    }

    /// Standardize selected coordinates (values paired with their indices).
    pub fn apply_subset(&self, values: &[f64], idx: &[usize]) -> Vec<f64> {
        values
            .iter()
            .zip(idx)
            .map(|(&v, &i)| self.apply_at(v, i))
            .collect()
    }

    /// Sum of log scales over a coordinate subset: the standardization
    /// log-Jacobian for densities over those coordinates.
    pub fn log_scale_sum_subset(&self, idx: &[usize]) -> f64 {
        idx.iter().map(|&i| self.scale[i].ln()).sum()
    }

    pub fn log_scale_sum(&self) -> f64 {
        self.scale.iter().map(|s| s.ln()).sum()
    }

    pub fn save_into(&self, store: &mut ParameterStore, prefix: &str) {
        store.insert_frozen(format!("{prefix}.mean"), Tensor::vector(self.mean.clone()));
        store.insert_frozen(format!("{prefix}.scale"), Tensor::vector(self.scale.clone()));
    }

    pub fn from_store(store: &ParameterStore, prefix: &str) -> Result<Self> {
        let mean = store.value(&format!("{prefix}.mean"))?.data().to_vec();
        let scale = store.value(&format!("{prefix}.scale"))?.data().to_vec();
        Ok(Standardizer { mean, scale })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn round_trips() {
        let s = Standardizer::new(vec![1.0, -2.0], vec![2.0, 0.5]);
        let x = [3.0, -1.0];
        let z = s.apply_vec(&x);
        assert_relative_eq!(z[0], 1.0);
        assert_relative_eq!(z[1], 2.0);
        let back = s.invert_vec(&z);
        assert_relative_eq!(back[0], x[0]);
        assert_relative_eq!(back[1], x[1]);
    }

    #[test]
    fn column_moments() {
        let m = Tensor::matrix(4, 2, vec![0.0, 10.0, 2.0, 10.0, 4.0, 10.0, 6.0, 10.0]);
        let s = Standardizer::from_columns(&m);
        assert_relative_eq!(s.mean[0], 3.0);
        assert_relative_eq!(s.mean[1], 10.0);
        // constant column gets the floor, not a zero division
        assert!(s.scale[1] > 0.0);
    }
}
