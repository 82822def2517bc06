//! Benchmark simulator tasks: Ricker, Ornstein-Uhlenbeck (OUP), a Bernoulli
//! GLM, and the Gaussian linear model with uniform prior (GLU).
//!
//! Each simulator is a pure function of (theta, rng state). The GLM uses a
//! design matrix drawn once from a fixed seed and frozen for the lifetime of
//! the task, and exposes the 10-dimensional sufficient statistic
//! x = (1/T) sum_t y_t v_t as its data vector.

use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::sigmoid;
use crate::rng::RunRng;
use crate::tensor::Tensor;

pub const RICKER_T: usize = 100;
pub const RICKER_NOISE_SD: f64 = 0.3; // sigma_e^2 = 0.09
pub const OUP_T: usize = 25;
pub const OUP_DT: f64 = 0.2;
pub const OUP_X0: f64 = 10.0;
pub const GLU_NOISE_VAR: f64 = 0.1;
pub const GLM_TRIALS: usize = 100;
pub const GLM_DESIGN_SEED: u64 = 20240101;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskId {
    Ricker,
    Oup,
    Glm,
    Glu,
}

impl TaskId {
    pub fn as_str(&self) -> &'static str {
        match self {
            TaskId::Ricker => "ricker",
            TaskId::Oup => "oup",
            TaskId::Glm => "glm",
            TaskId::Glu => "glu",
        }
    }

    pub fn parse(s: &str) -> Result<TaskId> {
        match s {
            "ricker" => Ok(TaskId::Ricker),
            "oup" => Ok(TaskId::Oup),
            "glm" => Ok(TaskId::Glm),
            "glu" => Ok(TaskId::Glu),
            other => Err(Error::invalid(format!("unknown task `{other}`"))),
        }
    }
}

/// Which summary network the inference model should use for a task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SummaryKind {
    /// Pass the data vector straight to the flow (GLM, GLU).
    Identity,
    /// Small 1-d convolution stack producing a 4-dim statistic (Ricker, OUP).
    Conv,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum PriorSpec {
    UniformBox { lower: Vec<f64>, upper: Vec<f64> },
    MultivariateNormal { mean: Vec<f64>, precision: Vec<Vec<f64>> },
}

impl PriorSpec {
    pub fn uniform(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.len() != upper.len() || lower.is_empty() {
            return Err(Error::invalid("uniform prior: dimension mismatch"));
        }
        if lower.iter().zip(&upper).any(|(l, u)| l >= u) {
            return Err(Error::invalid(
                "uniform prior: lower must be < upper elementwise",
            ));
        }
        Ok(PriorSpec::UniformBox { lower, upper })
    }

    pub fn dim(&self) -> usize {
        match self {
            PriorSpec::UniformBox { lower, .. } => lower.len(),
            PriorSpec::MultivariateNormal { mean, .. } => mean.len(),
        }
    }

    pub fn contains(&self, theta: &[f64]) -> bool {
        match self {
            PriorSpec::UniformBox { lower, upper } => theta
                .iter()
                .zip(lower.iter().zip(upper))
                .all(|(t, (l, u))| t >= l && t <= u),
            PriorSpec::MultivariateNormal { .. } => true,
        }
    }

    /// Prior mean and per-coordinate standard deviation, used to standardize
    /// flow inputs.
    pub fn moments(&self) -> Result<(Vec<f64>, Vec<f64>)> {
        match self {
            PriorSpec::UniformBox { lower, upper } => {
                let mean = lower.iter().zip(upper).map(|(l, u)| (l + u) / 2.0).collect();
                let sd = lower
                    .iter()
                    .zip(upper)
                    .map(|(l, u)| (u - l) / 12f64.sqrt())
                    .collect();
                Ok((mean, sd))
            }
            PriorSpec::MultivariateNormal { mean, precision } => {
                let p = mean.len();
                let prec = precision_matrix(precision, p)?;
                let cov = prec
                    .clone()
                    .try_inverse()
                    .ok_or_else(|| Error::invalid("precision matrix is singular"))?;
                let sd = (0..p).map(|i| cov[(i, i)].sqrt()).collect();
                Ok((mean.clone(), sd))
            }
        }
    }
}

fn precision_matrix(rows: &[Vec<f64>], p: usize) -> Result<DMatrix<f64>> {
    if rows.len() != p || rows.iter().any(|r| r.len() != p) {
        return Err(Error::invalid("precision matrix must be square"));
    }
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Ok(DMatrix::from_row_slice(p, p, &flat))
}

/// A benchmark task: simulator id, dimensions, prior, summary choice.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskSpec {
    pub id: TaskId,
    pub data_dim: usize,
    pub param_dim: usize,
    pub prior: PriorSpec,
    pub summary: SummaryKind,
}

impl TaskSpec {
    pub fn new(id: TaskId) -> TaskSpec {
        match id {
            TaskId::Ricker => TaskSpec {
                id,
                data_dim: RICKER_T,
                param_dim: 2,
                prior: PriorSpec::uniform(vec![2.0, 0.0], vec![8.0, 20.0]).unwrap(),
                summary: SummaryKind::Conv,
            },
            TaskId::Oup => TaskSpec {
                id,
                data_dim: OUP_T,
                param_dim: 2,
                prior: PriorSpec::uniform(vec![0.0, -2.0], vec![2.0, 2.0]).unwrap(),
                summary: SummaryKind::Conv,
            },
            TaskId::Glm => TaskSpec {
                id,
                data_dim: 10,
                param_dim: 10,
                prior: glm_prior(),
                summary: SummaryKind::Identity,
            },
            TaskId::Glu => TaskSpec {
                id,
                data_dim: 10,
                param_dim: 10,
                prior: PriorSpec::uniform(vec![-1.0; 10], vec![1.0; 10]).unwrap(),
                summary: SummaryKind::Identity,
            },
        }
    }

    pub fn simulate(&self, theta: &[f64], rng: &mut ChaCha12Rng) -> Result<Vec<f64>> {
        match self.id {
            TaskId::Ricker => simulate_ricker(theta, rng),
            TaskId::Oup => Ok(simulate_oup(theta, rng)),
            TaskId::Glm => Ok(simulate_glm(theta, rng)),
            TaskId::Glu => Ok(simulate_glu(theta, rng)),
        }
    }
}

/// A batch of n iid (theta, x) pairs.
#[derive(Debug, Clone)]
pub struct SimBatch {
    pub task: TaskId,
    pub thetas: Tensor,
    pub xs: Tensor,
    pub seed: u64,
}

impl SimBatch {
    pub fn len(&self) -> usize {
        self.thetas.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn save(&self, stem: &std::path::Path) -> Result<()> {
        let meta = serde_json::json!({
            "task": self.task.as_str(),
            "n": self.len(),
            "p": self.thetas.cols(),
            "d": self.xs.cols(),
            "seed": self.seed,
        });
        crate::checkpoint::write_entries(
            stem,
            &[
                ("thetas".into(), self.thetas.shape().to_vec(), self.thetas.data().to_vec()),
                ("xs".into(), self.xs.shape().to_vec(), self.xs.data().to_vec()),
            ],
            meta,
        )
    }

    pub fn load(stem: &std::path::Path) -> Result<SimBatch> {
        let (entries, meta) = crate::checkpoint::read_entries(stem)?;
        let mut thetas = None;
        let mut xs = None;
        for (name, shape, data) in entries {
            match name.as_str() {
                "thetas" => thetas = Some(Tensor::new(shape, data)),
                "xs" => xs = Some(Tensor::new(shape, data)),
                _ => {}
            }
        }
        let task = TaskId::parse(
            meta.get("task")
                .and_then(|v| v.as_str())
                .ok_or_else(|| Error::Checkpoint("dataset missing task id".into()))?,
        )?;
        Ok(SimBatch {
            task,
            thetas: thetas.ok_or_else(|| Error::Checkpoint("dataset missing thetas".into()))?,
            xs: xs.ok_or_else(|| Error::Checkpoint("dataset missing xs".into()))?,
            seed: meta.get("seed").and_then(|v| v.as_u64()).unwrap_or(0),
        })
    }
}

/// Draw n iid prior samples as an (n x p) matrix.
pub fn sample_prior(prior: &PriorSpec, n: usize, rng: &mut ChaCha12Rng) -> Result<Tensor> {
    if n == 0 {
        return Err(Error::invalid("sample_prior requires n >= 1"));
    }
    let p = prior.dim();
    let mut data = Vec::with_capacity(n * p);
    match prior {
        PriorSpec::UniformBox { lower, upper } => {
            for _ in 0..n {
                for j in 0..p {
                    data.push(rng.gen_range(lower[j]..upper[j]));
                }
            }
        }
        PriorSpec::MultivariateNormal { mean, precision } => {
            let prec = precision_matrix(precision, p)?;
            let chol = prec
                .clone()
                .cholesky()
                .ok_or_else(|| Error::invalid("precision matrix is not SPD"))?;
            // theta = mean + L^{-T} z has covariance (L L^T)^{-1} = P^{-1}
            let lt = chol.l().transpose();
            for _ in 0..n {
                let z =
                    DVector::from_iterator(p, (0..p).map(|_| rng.sample::<f64, _>(StandardNormal)));
                let x = lt
                    .solve_upper_triangular(&z)
                    .ok_or_else(|| Error::invalid("triangular solve failed"))?;
                for j in 0..p {
                    data.push(mean[j] + x[j]);
                }
            }
        }
    }
    Ok(Tensor::matrix(n, p, data))
}

/// The 9x9 banded matrix F from the GLM prior; F^T F is its precision.
pub fn build_glm_f() -> DMatrix<f64> {
    let mut f = DMatrix::zeros(9, 9);
    for i in 1..=9usize {
        // 1-based indexing in the defining formula
        f[(i - 1, i - 1)] = 1.0 + (((i - 1) as f64) / 9.0).sqrt();
        if i >= 2 {
            f[(i - 1, i - 2)] = -2.0;
        }
        if i >= 3 {
            f[(i - 1, i - 3)] = 1.0;
        }
    }
    f
}

/// F^T F for the GLM smoothness prior on the 9 filter weights.
pub fn build_glm_precision() -> DMatrix<f64> {
    let f = build_glm_f();
    f.transpose() * f
}

/// Full 10-dim GLM prior: standard normal bias plus N(0, (F^T F)^{-1}) on
/// the remaining 9 coordinates.
pub fn glm_prior() -> PriorSpec {
    let ftf = build_glm_precision();
    let mut precision = vec![vec![0.0; 10]; 10];
    precision[0][0] = 1.0;
    for i in 0..9 {
        for j in 0..9 {
            precision[i + 1][j + 1] = ftf[(i, j)];
        }
    }
    PriorSpec::MultivariateNormal { mean: vec![0.0; 10], precision }
}

/// Frozen GLM design: 100 rows (1, z_1..z_9), z iid standard normal drawn
/// once from the fixed design seed.
pub fn glm_design() -> &'static Vec<f64> {
    static DESIGN: OnceLock<Vec<f64>> = OnceLock::new();
    DESIGN.get_or_init(|| {
        let mut rng = RunRng::new(GLM_DESIGN_SEED).stream("glm-design");
        let mut v = Vec::with_capacity(GLM_TRIALS * 10);
        for _ in 0..GLM_TRIALS {
            v.push(1.0);
            for _ in 0..9 {
                v.push(rng.sample::<f64, _>(StandardNormal));
            }
        }
        v
    })
}

/// One step of the Ricker population recursion (Wood 2010 form).
pub fn ricker_step(n: f64, theta1: f64, e: f64) -> f64 {
    n * (theta1 - n + e).exp()
}

/// Ricker with the Gaussian log-noise supplied by the caller; returns the
/// Poisson observations and the latent population trajectory.
pub fn simulate_ricker_with_noise(
    theta: &[f64],
    noise: &[f64],
    rng: &mut ChaCha12Rng,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let (theta1, theta2) = (theta[0], theta[1]);
    if theta2 < 0.0 {
        return Err(Error::invalid(format!(
            "ricker requires theta2 >= 0 (Poisson rate), got {theta2}"
        )));
    }
    let mut n = 1.0; // N0
    let mut traj = Vec::with_capacity(noise.len());
    let mut xs = Vec::with_capacity(noise.len());
    for &e in noise {
        n = ricker_step(n, theta1, e);
        traj.push(n);
        let rate = theta2 * n;
        let x = if rate > 0.0 {
            Poisson::new(rate)
                .map_err(|_| Error::invalid(format!("invalid Poisson rate {rate}")))?
                .sample(rng)
        } else {
            0.0
        };
        xs.push(x);
    }
    Ok((xs, traj))
}

/// Ricker observations over T=100 steps.
pub fn simulate_ricker(theta: &[f64], rng: &mut ChaCha12Rng) -> Result<Vec<f64>> {
    let noise: Vec<f64> = (0..RICKER_T)
        .map(|_| RICKER_NOISE_SD * rng.sample::<f64, _>(StandardNormal))
        .collect();
    simulate_ricker_with_noise(theta, &noise, rng).map(|(xs, _)| xs)
}

/// One Euler step of the OU process.
pub fn oup_step(x: f64, theta1: f64, theta2: f64, w: f64) -> f64 {
    x + theta1 * (theta2.exp() - x) * OUP_DT + 0.5 * w
}

pub fn simulate_oup_series(theta: &[f64], steps: usize, rng: &mut ChaCha12Rng) -> Vec<f64> {
    let mut x = OUP_X0;
    let sd = OUP_DT.sqrt();
    (0..steps)
        .map(|_| {
            let w = sd * rng.sample::<f64, _>(StandardNormal);
            x = oup_step(x, theta[0], theta[1], w);
            x
        })
        .collect()
}

/// OU trajectory of T=25 steps (x0 itself is not part of the data vector).
pub fn simulate_oup(theta: &[f64], rng: &mut ChaCha12Rng) -> Vec<f64> {
    simulate_oup_series(theta, OUP_T, rng)
}

/// GLU draw: x ~ N(theta, 0.1 I).
pub fn simulate_glu(theta: &[f64], rng: &mut ChaCha12Rng) -> Vec<f64> {
    let sd = GLU_NOISE_VAR.sqrt();
    theta
        .iter()
        .map(|&t| t + sd * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

/// GLM draw: 100 Bernoulli trials on the frozen design, reduced to the
/// 10-dim sufficient statistic (1/T) sum_t y_t v_t.
pub fn simulate_glm(theta: &[f64], rng: &mut ChaCha12Rng) -> Vec<f64> {
    let design = glm_design();
    let mut stat = vec![0.0; 10];
    for t in 0..GLM_TRIALS {
        let row = &design[t * 10..(t + 1) * 10];
        let logit: f64 = row.iter().zip(theta).map(|(v, t)| v * t).sum();
        let y = if rng.gen::<f64>() < sigmoid(logit) { 1.0 } else { 0.0 };
        if y == 1.0 {
            for (s, v) in stat.iter_mut().zip(row) {
                *s += v;
            }
        }
    }
    for s in stat.iter_mut() {
        *s /= GLM_TRIALS as f64;
    }
    stat
}

/// Simulate n iid (theta, x) pairs from the joint prior-simulator
/// distribution.
pub fn simulate_batch(
    task: &TaskSpec,
    n: usize,
    rng: &mut ChaCha12Rng,
    seed: u64,
) -> Result<SimBatch> {
    if n == 0 {
        return Err(Error::invalid("simulate_batch requires n >= 1"));
    }
    let thetas = sample_prior(&task.prior, n, rng)?;
    let mut xs = Vec::with_capacity(n * task.data_dim);
    for i in 0..n {
        let x = task.simulate(thetas.row(i), rng)?;
        debug_assert_eq!(x.len(), task.data_dim);
        xs.extend_from_slice(&x);
    }
    Ok(SimBatch {
        task: task.id,
        thetas,
        xs: Tensor::matrix(n, task.data_dim, xs),
        seed,
    })
}

/// Sample the analytic GLU posterior N(x, 0.1 I) truncated to [-1,1]^10.
/// Coordinates are independent, so rejection runs per coordinate.
pub fn glu_posterior_sample(x: &[f64], n: usize, rng: &mut ChaCha12Rng) -> Tensor {
    let sd = GLU_NOISE_VAR.sqrt();
    let p = x.len();
    let mut data = Vec::with_capacity(n * p);
    for _ in 0..n {
        for &xi in x {
            loop {
                let draw = xi + sd * rng.sample::<f64, _>(StandardNormal);
                if (-1.0..=1.0).contains(&draw) {
                    data.push(draw);
                    break;
                }
            }
        }
    }
    Tensor::matrix(n, p, data)
}

/// Unnormalized log density of the analytic GLU posterior.
pub fn glu_posterior_logpdf_unnorm(theta: &[f64], x: &[f64]) -> f64 {
    if theta.iter().any(|t| !(-1.0..=1.0).contains(t)) {
        return f64::NEG_INFINITY;
    }
    let inv2v = 1.0 / (2.0 * GLU_NOISE_VAR);
    -theta
        .iter()
        .zip(x)
        .map(|(t, xi)| (t - xi) * (t - xi))
        .sum::<f64>()
        * inv2v
}
