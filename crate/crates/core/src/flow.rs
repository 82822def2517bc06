//! Conditional masked autoregressive flow.
//!
//! A stack of affine MADE blocks with fixed degrees and alternating-reversal
//! permutations between blocks, conditioned on a context vector that enters
//! both the masked hidden layer and the output heads directly. The base
//! distribution is a standard normal. Output heads are zero-initialized so a
//! fresh flow is exactly the identity transform.
//!
//! Density evaluation runs the stack in the inverse direction with a
//! tractable log-determinant (the negated log-scales); sampling runs the
//! forward direction one coordinate at a time. Log-scales are soft-clamped
//! to (-7, 7) for stability.

use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId, LN_2PI};
use crate::params::{init_linear, AttachedParams, ParameterStore};
use crate::sim::SummaryKind;
use crate::tensor::Tensor;

pub const LOG_SCALE_CLAMP: f64 = 7.0;

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct MAFConfig {
    pub param_dim: usize,
    pub context_dim: usize,
    pub n_transforms: usize,
    pub hidden: usize,
}

impl MAFConfig {
    pub fn new(param_dim: usize, context_dim: usize) -> Self {
        MAFConfig { param_dim, context_dim, n_transforms: 5, hidden: 20 }
    }
}

/// Autoregressive masks for one MADE block with a single hidden layer.
/// Input degrees are 1..p; hidden degrees cycle over 1..p-1 (all zero when
/// p = 1, leaving outputs driven by context and bias alone).
pub fn made_masks(p: usize, hidden: usize) -> (Tensor, Tensor) {
    let h_deg: Vec<usize> = (0..hidden)
        .map(|j| if p >= 2 { 1 + (j % (p - 1)) } else { 0 })
        .collect();
    let mut in_mask = vec![0.0; p * hidden];
    for i in 0..p {
        let deg_in = i + 1;
        for (j, &hj) in h_deg.iter().enumerate() {
            if hj >= deg_in {
                in_mask[i * hidden + j] = 1.0;
            }
        }
    }
    let mut out_mask = vec![0.0; hidden * p];
    for (j, &hj) in h_deg.iter().enumerate() {
        for i in 0..p {
            let deg_out = i + 1;
            if hj < deg_out {
                out_mask[j * p + i] = 1.0;
            }
        }
    }
    (
        Tensor::matrix(p, hidden, in_mask),
        Tensor::matrix(hidden, p, out_mask),
    )
}

fn block_perm(i: usize, p: usize) -> Vec<usize> {
    if i % 2 == 1 {
        (0..p).rev().collect()
    } else {
        (0..p).collect()
    }
}

fn invert_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (j, &p) in perm.iter().enumerate() {
        inv[p] = j;
    }
    inv
}

/// Insert flow parameters under `flow.*`. Permutations are fixed at
/// construction and stored (frozen) so checkpoints are self-contained.
pub fn flow_init(store: &mut ParameterStore, cfg: &MAFConfig, rng: &mut ChaCha12Rng) {
    let (p, c, h) = (cfg.param_dim, cfg.context_dim, cfg.hidden);
    for i in 0..cfg.n_transforms {
        init_linear(store, &format!("flow.made{i}.in"), p, h, rng);
        init_linear(store, &format!("flow.made{i}.ctx"), c, h, rng);
        // zero output heads: identity transform at init
        store.insert(format!("flow.made{i}.mu.w"), Tensor::zeros(&[h, p]));
        store.insert(format!("flow.made{i}.mu.b"), Tensor::zeros(&[p]));
        store.insert(format!("flow.made{i}.mu.cw"), Tensor::zeros(&[c, p]));
        store.insert(format!("flow.made{i}.al.w"), Tensor::zeros(&[h, p]));
        store.insert(format!("flow.made{i}.al.b"), Tensor::zeros(&[p]));
        store.insert(format!("flow.made{i}.al.cw"), Tensor::zeros(&[c, p]));
        let perm: Vec<f64> = block_perm(i, p).iter().map(|&v| v as f64).collect();
        store.insert_frozen(format!("flow.perm{i}"), Tensor::vector(perm));
    }
}

/// Read a block's permutation back from the store.
pub fn stored_perm(store: &ParameterStore, i: usize) -> Result<Vec<usize>> {
    Ok(store
        .value(&format!("flow.perm{i}"))?
        .data()
        .iter()
        .map(|&v| v as usize)
        .collect())
}

/// One MADE conditioner evaluation: (mu, clamped log-scale), each (n x p),
/// autoregressive in `x` and fully connected to `ctx`.
fn conditioner(
    g: &mut Graph,
    at: &AttachedParams,
    cfg: &MAFConfig,
    block: usize,
    x: NodeId,
    ctx: NodeId,
) -> Result<(NodeId, NodeId)> {
    let (in_mask, out_mask) = made_masks(cfg.param_dim, cfg.hidden);
    let in_mask = g.leaf(in_mask);
    let out_mask = g.leaf(out_mask);

    let in_w = at.id(&format!("flow.made{block}.in.w"))?;
    let in_b = at.id(&format!("flow.made{block}.in.b"))?;
    let ctx_w = at.id(&format!("flow.made{block}.ctx.w"))?;
    let masked_in = g.mul(in_w, in_mask)?;
    let xm = g.matmul(x, masked_in)?;
    let cm = g.matmul(ctx, ctx_w)?;
    let pre = g.add(xm, cm)?;
    let pre = g.add_row(pre, in_b)?;
    let hidden = g.tanh(pre);

    let mut head = |g: &mut Graph, name: &str| -> Result<NodeId> {
        let w = at.id(&format!("flow.made{block}.{name}.w"))?;
        let b = at.id(&format!("flow.made{block}.{name}.b"))?;
        let cw = at.id(&format!("flow.made{block}.{name}.cw"))?;
        let masked = g.mul(w, out_mask)?;
        let hm = g.matmul(hidden, masked)?;
        let cc = g.matmul(ctx, cw)?;
        let s = g.add(hm, cc)?;
        g.add_row(s, b)
    };
    let mu = head(g, "mu")?;
    let alpha_raw = head(g, "al")?;
    let alpha = g.soft_clamp(alpha_raw, LOG_SCALE_CLAMP);
    Ok((mu, alpha))
}

/// Data -> base direction: returns (u, per-row log|det du/dtheta|).
pub fn transform_inverse(
    g: &mut Graph,
    at: &AttachedParams,
    cfg: &MAFConfig,
    theta: NodeId,
    ctx: NodeId,
) -> Result<(NodeId, NodeId)> {
    check_dims(g, cfg, theta, ctx)?;
    let mut u = theta;
    let mut logdet: Option<NodeId> = None;
    for i in 0..cfg.n_transforms {
        let perm = block_perm(i, cfg.param_dim);
        let up = g.permute_cols(u, &perm)?;
        let (mu, alpha) = conditioner(g, at, cfg, i, up, ctx)?;
        let neg_alpha = g.scale(alpha, -1.0);
        let scale = g.exp(neg_alpha);
        let centered = g.sub(up, mu)?;
        u = g.mul(centered, scale)?;
        let block_logdet = g.sum_axis1(neg_alpha)?;
        logdet = Some(match logdet {
            Some(acc) => g.add(acc, block_logdet)?,
            None => block_logdet,
        });
    }
    Ok((u, logdet.expect("n_transforms >= 1")))
}

/// Base -> data direction, one coordinate at a time per block.
pub fn transform_forward(
    g: &mut Graph,
    at: &AttachedParams,
    cfg: &MAFConfig,
    u: NodeId,
    ctx: NodeId,
) -> Result<NodeId> {
    check_dims(g, cfg, u, ctx)?;
    let (n, p) = (g.value(u).rows(), cfg.param_dim);
    let mut v = u;
    for i in (0..cfg.n_transforms).rev() {
        let perm = block_perm(i, p);
        let mut cur = g.leaf(Tensor::zeros(&[n, p]));
        for j in 0..p {
            let (mu, alpha) = conditioner(g, at, cfg, i, cur, ctx)?;
            let mu_j = g.slice_cols(mu, j, j + 1)?;
            let al_j = g.slice_cols(alpha, j, j + 1)?;
            let u_j = g.slice_cols(v, j, j + 1)?;
            let scale = g.exp(al_j);
            let scaled = g.mul(u_j, scale)?;
            let col = g.add(scaled, mu_j)?;
            cur = set_col(g, cur, j, col, p)?;
        }
        v = g.permute_cols(cur, &invert_perm(&perm))?;
    }
    Ok(v)
}

fn set_col(g: &mut Graph, m: NodeId, j: usize, col: NodeId, p: usize) -> Result<NodeId> {
    let mut parts: Vec<NodeId> = Vec::with_capacity(3);
    if j > 0 {
        parts.push(g.slice_cols(m, 0, j)?);
    }
    parts.push(col);
    if j + 1 < p {
        parts.push(g.slice_cols(m, j + 1, p)?);
    }
    let mut acc = parts[0];
    for &part in &parts[1..] {
        acc = g.concat_cols(acc, part)?;
    }
    Ok(acc)
}

fn check_dims(g: &Graph, cfg: &MAFConfig, theta: NodeId, ctx: NodeId) -> Result<()> {
    let ts = g.value(theta).shape().to_vec();
    let cs = g.value(ctx).shape().to_vec();
    if ts.len() != 2
        || cs.len() != 2
        || ts[1] != cfg.param_dim
        || cs[1] != cfg.context_dim
        || ts[0] != cs[0]
    {
        return Err(Error::ShapeMismatch { op: "flow", lhs: ts, rhs: cs });
    }
    Ok(())
}

/// Per-row log q(theta | ctx) in standardized space: (n,) vector node.
pub fn flow_log_prob(
    g: &mut Graph,
    at: &AttachedParams,
    cfg: &MAFConfig,
    theta: NodeId,
    ctx: NodeId,
) -> Result<NodeId> {
    let (u, logdet) = transform_inverse(g, at, cfg, theta, ctx)?;
    let n = g.value(u).rows();
    let zeros = g.leaf(Tensor::zeros(&[n, cfg.param_dim]));
    let ones = g.leaf(Tensor::full(&[n, cfg.param_dim], 1.0));
    let base = g.gaussian_log_pdf(u, zeros, ones)?;
    let base_rows = g.sum_axis1(base)?;
    g.add(base_rows, logdet)
}

/// Draw samples (standardized space), one per context row.
pub fn flow_sample(
    g: &mut Graph,
    at: &AttachedParams,
    cfg: &MAFConfig,
    ctx: NodeId,
    rng: &mut ChaCha12Rng,
) -> Result<Tensor> {
    let n = g.value(ctx).rows();
    if n == 0 {
        return Err(Error::EmptyInput("flow_sample"));
    }
    let u = g.leaf(Tensor::matrix(
        n,
        cfg.param_dim,
        crate::rng::normal_vec(rng, n * cfg.param_dim),
    ));
    let theta = transform_forward(g, at, cfg, u, ctx)?;
    Ok(g.value(theta).clone())
}

// ---- summary networks ----------------------------------------------------

pub const CONV_SUMMARY_DIM: usize = 4;
const CONV_CH: usize = 6;
const CONV_K0: usize = 9;
const CONV_K1: usize = 5;

/// Output length of the two stride-2 convolutions for a series of length d.
fn conv_time_dims(d: usize) -> (usize, usize) {
    let t1 = (d + 2 * (CONV_K0 / 2) - CONV_K0) / 2 + 1;
    let t2 = (t1 + 2 * (CONV_K1 / 2) - CONV_K1) / 2 + 1;
    (t1, t2)
}

pub fn summary_out_dim(kind: SummaryKind, d: usize) -> usize {
    match kind {
        SummaryKind::Identity => d,
        SummaryKind::Conv => CONV_SUMMARY_DIM,
    }
}

/// Insert summary-network parameters under `summary.*` (no-op for the
/// identity summary).
pub fn summary_init(
    store: &mut ParameterStore,
    kind: SummaryKind,
    d: usize,
    rng: &mut ChaCha12Rng,
) {
    if kind != SummaryKind::Conv {
        return;
    }
    use rand::Rng;
    let mut conv = |name: &str, c_out: usize, c_in: usize, k: usize, rng: &mut ChaCha12Rng| {
        let bound = (6.0 / ((c_in * k + c_out * k) as f64)).sqrt();
        let data = (0..c_out * c_in * k)
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        store.insert(name.to_string(), Tensor::new(vec![c_out, c_in, k], data));
    };
    conv("summary.conv0.k", CONV_CH, 1, CONV_K0, rng);
    conv("summary.conv1.k", CONV_CH, CONV_CH, CONV_K1, rng);
    let (_, t2) = conv_time_dims(d);
    init_linear(store, "summary.out", CONV_CH * t2, CONV_SUMMARY_DIM, rng);
}

/// Map a standardized completed data row (1 x d) to the statistic row the
/// flow conditions on. Identity mode passes the row through untouched.
pub fn summary_forward(
    g: &mut Graph,
    at: &AttachedParams,
    kind: SummaryKind,
    d: usize,
    x_row: NodeId,
) -> Result<NodeId> {
    match kind {
        SummaryKind::Identity => Ok(x_row),
        SummaryKind::Conv => {
            let k0 = at.id("summary.conv0.k")?;
            let k1 = at.id("summary.conv1.k")?;
            let c0 = g.conv1d(x_row, k0, 2, CONV_K0 / 2)?;
            let h0 = g.relu(c0);
            let c1 = g.conv1d(h0, k1, 2, CONV_K1 / 2)?;
            let h1 = g.relu(c1);
            let (_, t2) = conv_time_dims(d);
            let flat = g.reshape(h1, &[1, CONV_CH * t2])?;
            let w = at.id("summary.out.w")?;
            let b = at.id("summary.out.b")?;
            g.linear(flat, w, b)
        }
    }
}
