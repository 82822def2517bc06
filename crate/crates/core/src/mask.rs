//! Missingness mechanisms: mask generation under MCAR/MAR/MNAR, splitting a
//! data vector into observed/missing parts with normalized coordinate
//! locations, and empirical missingness measurement.

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::sigmoid;
use crate::rng::RunRng;
use crate::sim::TaskSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mechanism {
    Mcar,
    Mar,
    Mnar,
}

impl Mechanism {
    pub fn as_str(&self) -> &'static str {
        match self {
            Mechanism::Mcar => "mcar",
            Mechanism::Mar => "mar",
            Mechanism::Mnar => "mnar",
        }
    }

    pub fn parse(s: &str) -> Result<Mechanism> {
        match s {
            "mcar" => Ok(Mechanism::Mcar),
            "mar" => Ok(Mechanism::Mar),
            "mnar" => Ok(Mechanism::Mnar),
            other => Err(Error::invalid(format!("unknown mechanism `{other}`"))),
        }
    }
}

/// MAR construction: a designated always-observed driver coordinate steers
/// the missingness of every other coordinate through a logistic.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MarSpec {
    pub driver: usize,
    pub slope: f64,
    /// Per-task constant; calibrate with [`calibrate_mar_median`] so the
    /// average missing fraction lands near eps.
    pub driver_median: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MissingnessSpec {
    pub mechanism: Mechanism,
    pub eps: f64,
    pub mar: Option<MarSpec>,
}

impl MissingnessSpec {
    pub fn new(mechanism: Mechanism, eps: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&eps) {
            return Err(Error::invalid(format!("eps must be in [0,1], got {eps}")));
        }
        Ok(MissingnessSpec { mechanism, eps, mar: None })
    }

    pub fn mcar(eps: f64) -> Result<Self> {
        Self::new(Mechanism::Mcar, eps)
    }

    pub fn mnar(eps: f64) -> Result<Self> {
        Self::new(Mechanism::Mnar, eps)
    }

    pub fn mar(eps: f64, driver: usize, slope: f64, driver_median: f64) -> Result<Self> {
        let mut s = Self::new(Mechanism::Mar, eps)?;
        s.mar = Some(MarSpec { driver, slope, driver_median });
        Ok(s)
    }

    /// Generate a mask for `x` under this spec.
    pub fn gen_mask(&self, x: &[f64], rng: &mut ChaCha12Rng) -> Result<Mask> {
        match self.mechanism {
            Mechanism::Mcar => gen_mask_mcar(x.len(), self.eps, rng),
            Mechanism::Mnar => gen_mask_mnar(x, self.eps, rng),
            Mechanism::Mar => {
                let mar = self
                    .mar
                    .ok_or_else(|| Error::invalid("MAR spec missing driver configuration"))?;
                gen_mask_mar(x, self.eps, &mar, rng)
            }
        }
    }

    /// Same spec at a different missingness level (used by the meta regime).
    pub fn with_eps(&self, eps: f64) -> Result<Self> {
        let mut s = self.clone();
        if !(0.0..=1.0).contains(&eps) {
            return Err(Error::invalid(format!("eps must be in [0,1], got {eps}")));
        }
        s.eps = eps;
        Ok(s)
    }
}

/// Binary mask; 1 = observed, 0 = missing.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask(pub Vec<u8>);

impl Mask {
    pub fn all_observed(d: usize) -> Self {
        Mask(vec![1; d])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn observed(&self, i: usize) -> bool {
        self.0[i] == 1
    }

    pub fn n_missing(&self) -> usize {
        self.0.iter().filter(|&&s| s == 0).count()
    }

    pub fn missing_fraction(&self) -> f64 {
        self.n_missing() as f64 / self.0.len() as f64
    }

    /// Dataset serialization: one 0/1 byte per coordinate.
    pub fn to_packed_bytes(&self) -> Vec<u8> {
        self.0.clone()
    }

    pub fn from_packed_bytes(bytes: &[u8]) -> Result<Mask> {
        if bytes.iter().any(|&b| b > 1) {
            return Err(Error::invalid("mask bytes must be 0 or 1"));
        }
        Ok(Mask(bytes.to_vec()))
    }
}

/// A data vector split into observed and missing parts.
///
/// `x` keeps the full simulated vector (training only; at inference the
/// missing entries are whatever placeholder the caller scattered in).
/// Locations are normalized to [0,1] as i/(d-1).
#[derive(Debug, Clone)]
pub struct MaskedSample {
    pub x: Vec<f64>,
    pub mask: Mask,
    pub x_obs: Vec<f64>,
    pub x_mis: Vec<f64>,
    pub c_obs: Vec<f64>,
    pub c_mis: Vec<f64>,
    pub idx_obs: Vec<usize>,
    pub idx_mis: Vec<usize>,
}

impl MaskedSample {
    pub fn dim(&self) -> usize {
        self.x.len()
    }

    pub fn n_missing(&self) -> usize {
        self.x_mis.len()
    }
}

pub fn location(i: usize, d: usize) -> f64 {
    if d > 1 {
        i as f64 / (d - 1) as f64
    } else {
        0.0
    }
}

/// Exact-count MCAR: round(eps * d) coordinates are masked, chosen uniformly
/// without replacement.
pub fn gen_mask_mcar(d: usize, eps: f64, rng: &mut ChaCha12Rng) -> Result<Mask> {
    if !(0.0..=1.0).contains(&eps) {
        return Err(Error::invalid(format!("eps must be in [0,1], got {eps}")));
    }
    let k = ((eps * d as f64).round() as usize).min(d);
    let mut mask = vec![1u8; d];
    let chosen = rand::seq::index::sample(rng, d, k);
    for i in chosen {
        mask[i] = 0;
    }
    Ok(Mask(mask))
}

/// Per-coordinate self-censoring probabilities for MNAR, range-normalized so
/// negative-valued data is handled: p_i = eps * (x_i - min) / (max - min).
/// Returns None for a constant vector.
pub fn mnar_missing_probs(x: &[f64], eps: f64) -> Option<Vec<f64>> {
    let min = x.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max <= min {
        return None;
    }
    Some(x.iter().map(|&v| eps * (v - min) / (max - min)).collect())
}

/// Self-censoring MNAR: larger values are more likely to go missing. A
/// constant vector falls back to MCAR at rate eps/2 (the mean of the
/// normalized range).
pub fn gen_mask_mnar(x: &[f64], eps: f64, rng: &mut ChaCha12Rng) -> Result<Mask> {
    if !(0.0..=1.0).contains(&eps) {
        return Err(Error::invalid(format!("eps must be in [0,1], got {eps}")));
    }
    match mnar_missing_probs(x, eps) {
        Some(probs) => {
            let mask = probs
                .iter()
                .map(|&p| if rng.gen::<f64>() < p { 0u8 } else { 1u8 })
                .collect();
            Ok(Mask(mask))
        }
        None => gen_mask_mcar(x.len(), eps / 2.0, rng),
    }
}

/// Per-coordinate missing probability under the MAR construction, for every
/// non-driver coordinate: clamp(sigmoid(slope * (x_driver - median)) * 2 eps, 0, 1).
pub fn mar_missing_prob(x_driver: f64, eps: f64, mar: &MarSpec) -> f64 {
    (sigmoid(mar.slope * (x_driver - mar.driver_median)) * 2.0 * eps).clamp(0.0, 1.0)
}

/// MAR: mask depends on the always-observed driver coordinate only.
pub fn gen_mask_mar(x: &[f64], eps: f64, mar: &MarSpec, rng: &mut ChaCha12Rng) -> Result<Mask> {
    if mar.driver >= x.len() {
        return Err(Error::invalid(format!(
            "MAR driver index {} out of range for d={}",
            mar.driver,
            x.len()
        )));
    }
    let p = mar_missing_prob(x[mar.driver], eps, mar);
    let mask = (0..x.len())
        .map(|i| {
            if i == mar.driver {
                1u8
            } else if rng.gen::<f64>() < p {
                0u8
            } else {
                1u8
            }
        })
        .collect();
    Ok(Mask(mask))
}

/// Median of the driver coordinate over prior-predictive simulations, drawn
/// from a fixed calibration stream.
pub fn calibrate_mar_median(task: &TaskSpec, driver: usize, n: usize) -> Result<f64> {
    let mut rng = RunRng::new(0x4d41_5243).stream("mar-calibration");
    let batch = crate::sim::simulate_batch(task, n, &mut rng, 0)?;
    let mut vals: Vec<f64> = (0..n).map(|i| batch.xs.at(i, driver)).collect();
    vals.sort_by(f64::total_cmp);
    Ok(vals[n / 2])
}

/// Split `x` by the mask into a [`MaskedSample`].
pub fn apply_mask(x: &[f64], mask: &Mask) -> Result<MaskedSample> {
    if x.len() != mask.len() {
        return Err(Error::ShapeMismatch {
            op: "apply_mask",
            lhs: vec![x.len()],
            rhs: vec![mask.len()],
        });
    }
    let d = x.len();
    let mut s = MaskedSample {
        x: x.to_vec(),
        mask: mask.clone(),
        x_obs: Vec::new(),
        x_mis: Vec::new(),
        c_obs: Vec::new(),
        c_mis: Vec::new(),
        idx_obs: Vec::new(),
        idx_mis: Vec::new(),
    };
    for (i, &v) in x.iter().enumerate() {
        if mask.observed(i) {
            s.x_obs.push(v);
            s.c_obs.push(location(i, d));
            s.idx_obs.push(i);
        } else {
            s.x_mis.push(v);
            s.c_mis.push(location(i, d));
            s.idx_mis.push(i);
        }
    }
    Ok(s)
}

/// Inverse of [`apply_mask`]: reassemble the full vector from partitions.
pub fn scatter(x_obs: &[f64], x_mis: &[f64], mask: &Mask) -> Result<Vec<f64>> {
    if x_obs.len() + x_mis.len() != mask.len() {
        return Err(Error::ShapeMismatch {
            op: "scatter",
            lhs: vec![x_obs.len() + x_mis.len()],
            rhs: vec![mask.len()],
        });
    }
    let mut out = Vec::with_capacity(mask.len());
    let (mut io, mut im) = (0, 0);
    for i in 0..mask.len() {
        if mask.observed(i) {
            out.push(x_obs[io]);
            io += 1;
        } else {
            out.push(x_mis[im]);
            im += 1;
        }
    }
    Ok(out)
}

/// Mean missing fraction across masks.
pub fn empirical_missing_fraction(masks: &[Mask]) -> Result<f64> {
    if masks.is_empty() {
        return Err(Error::EmptyInput("empirical_missing_fraction"));
    }
    Ok(masks.iter().map(|m| m.missing_fraction()).sum::<f64>() / masks.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{TaskId, TaskSpec};
    use proptest::prelude::*;

    fn rng(seed: u64) -> ChaCha12Rng {
        RunRng::new(seed).stream("mask-test")
    }

    #[test]
    fn mcar_boundary_cases() {
        let m0 = gen_mask_mcar(10, 0.0, &mut rng(1)).unwrap();
        assert_eq!(m0.0, vec![1; 10]);
        let m1 = gen_mask_mcar(10, 1.0, &mut rng(1)).unwrap();
        assert_eq!(m1.0, vec![0; 10]);
    }

    #[test]
    fn mcar_exact_count_and_uniform_positions() {
        let (d, eps, draws) = (100usize, 0.25, 10_000usize);
        let mut r = rng(2);
        let mut counts = vec![0f64; d];
        for _ in 0..draws {
            let m = gen_mask_mcar(d, eps, &mut r).unwrap();
            assert_eq!(m.n_missing(), 25);
            for (i, &s) in m.0.iter().enumerate() {
                if s == 0 {
                    counts[i] += 1.0;
                }
            }
        }
        // chi-squared against uniform cell expectation; crit value for
        // df=99 at the 1% level
        let expected = draws as f64 * eps;
        let chi2: f64 = counts.iter().map(|&c| (c - expected).powi(2) / expected).sum();
        assert!(chi2 < 134.642, "chi2 = {chi2}");
    }

    #[test]
    fn mnar_probs_match_range_normalization() {
        let p = mnar_missing_probs(&[0.0, 2.0, 4.0], 0.5).unwrap();
        assert_eq!(p, vec![0.0, 0.25, 0.5]);
    }

    #[test]
    fn mnar_eps_zero_observes_everything() {
        let m = gen_mask_mnar(&[1.0, -3.0, 2.0], 0.0, &mut rng(3)).unwrap();
        assert_eq!(m.0, vec![1, 1, 1]);
    }

    #[test]
    fn mnar_fraction_stays_below_eps() {
        let x: Vec<f64> = (0..50).map(|i| (i as f64 * 0.7).sin() * 3.0).collect();
        let eps = 0.4;
        let mut r = rng(4);
        let masks: Vec<Mask> = (0..10_000)
            .map(|_| gen_mask_mnar(&x, eps, &mut r).unwrap())
            .collect();
        let frac = empirical_missing_fraction(&masks).unwrap();
        assert!(frac <= eps + 0.01, "fraction {frac} vs eps {eps}");
    }

    #[test]
    fn mnar_constant_vector_falls_back_to_half_rate_mcar() {
        let m = gen_mask_mnar(&[2.0; 10], 0.6, &mut rng(5)).unwrap();
        // eps/2 = 0.3 -> exactly 3 missing under the fixed-count fallback
        assert_eq!(m.n_missing(), 3);
    }

    #[test]
    fn mar_driver_always_observed_and_zero_slope_is_exact() {
        let mar = MarSpec { driver: 2, slope: 0.0, driver_median: 0.0 };
        let eps = 0.3;
        // sigmoid(0) * 2 eps = eps exactly
        assert_eq!(mar_missing_prob(5.0, eps, &mar), eps);
        let mut r = rng(6);
        for _ in 0..200 {
            let m = gen_mask_mar(&[1.0, -2.0, 0.5, 3.0], eps, &mar, &mut r).unwrap();
            assert!(m.observed(2));
        }
    }

    #[test]
    fn mar_calibrated_fraction_close_to_eps() {
        let task = TaskSpec::new(TaskId::Glu);
        let driver = 0;
        let median = calibrate_mar_median(&task, driver, 1000).unwrap();
        let spec = MissingnessSpec::mar(0.25, driver, 2.0, median).unwrap();
        let mut r = rng(7);
        let batch = crate::sim::simulate_batch(&task, 500, &mut r, 7).unwrap();
        let mut masks = Vec::new();
        for rep in 0..20 {
            for i in 0..batch.len() {
                let _ = rep;
                masks.push(spec.gen_mask(batch.xs.row(i), &mut r).unwrap());
            }
        }
        let frac = empirical_missing_fraction(&masks).unwrap();
        assert!((frac - 0.25).abs() < 0.03, "fraction {frac}");
    }

    #[test]
    fn apply_mask_partition_example() {
        let x = [0.1, 1.2, 0.7, 0.9];
        let mask = Mask(vec![1, 1, 0, 1]);
        let s = apply_mask(&x, &mask).unwrap();
        assert_eq!(s.x_obs, vec![0.1, 1.2, 0.9]);
        assert_eq!(s.x_mis, vec![0.7]);
        assert_eq!(s.c_mis, vec![2.0 / 3.0]);
        assert_eq!(s.idx_mis, vec![2]);
    }

    #[test]
    fn apply_mask_all_observed() {
        let s = apply_mask(&[1.0, 2.0], &Mask(vec![1, 1])).unwrap();
        assert!(s.x_mis.is_empty());
        assert!(s.c_mis.is_empty());
    }

    #[test]
    fn apply_mask_length_mismatch_errors() {
        assert!(apply_mask(&[1.0], &Mask(vec![1, 1])).is_err());
    }

    #[test]
    fn empirical_fraction_boundaries() {
        let ones = vec![Mask(vec![1; 8]); 5];
        assert_eq!(empirical_missing_fraction(&ones).unwrap(), 0.0);
        let zeros = vec![Mask(vec![0; 8]); 5];
        assert_eq!(empirical_missing_fraction(&zeros).unwrap(), 1.0);
        assert!(empirical_missing_fraction(&[]).is_err());
    }

    #[test]
    fn packed_bytes_round_trip() {
        let m = Mask(vec![1, 0, 1, 1, 0]);
        assert_eq!(Mask::from_packed_bytes(&m.to_packed_bytes()).unwrap(), m);
        assert!(Mask::from_packed_bytes(&[2]).is_err());
    }

    proptest! {
        #[test]
        fn scatter_inverts_apply_mask(
            x in proptest::collection::vec(-10.0f64..10.0, 1..30),
            seed in 0u64..1000
        ) {
            let mut r = rng(seed);
            let eps = (seed % 11) as f64 / 10.0;
            let mask = gen_mask_mcar(x.len(), eps, &mut r).unwrap();
            let s = apply_mask(&x, &mask).unwrap();
            let back = scatter(&s.x_obs, &s.x_mis, &mask).unwrap();
            prop_assert_eq!(back, x);
        }
    }
}
