//! Latent neural-process imputation model.
//!
//! The model factorizes p(x_mis | c_mis, C) through a Gaussian latent:
//! a permutation-invariant encoder embeds the observed context set
//! {(x_i, c_i)} by a shared per-point MLP and mean pooling, a head maps the
//! pooled code (with the mask appended under MAR/MNAR) to the latent mean
//! and scale, and a decoder maps (latent, location) to an independent
//! Gaussian per missing location. Training estimates the log-likelihood
//! with m reparameterized Monte Carlo draws of the latent and a
//! log-mean-exp over the per-draw products of marginals.
//!
//! Under MNAR a self-masking head models the probability of each coordinate
//! going missing as a logistic of its (reconstructed) value, matching the
//! self-censoring generator.

use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::mask::{location, MaskedSample, Mechanism};
use crate::params::{init_linear, AttachedParams, ParameterStore};
use crate::rng::normal_vec;
use crate::standardize::Standardizer;
use crate::tensor::Tensor;

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct NPConfig {
    pub data_dim: usize,
    /// Per-point embedding widths; the last entry is the pooled code size.
    pub embed_hidden: Vec<usize>,
    pub latent_dim: usize,
    /// Widths of the latent head between pooled code and (mu_z, sigma_z).
    pub head_hidden: Vec<usize>,
    /// Decoder widths between (z, c) and the per-location (mu, sigma).
    pub decoder_hidden: Vec<usize>,
    pub sigma_floor: f64,
    pub mechanism: Mechanism,
}

impl NPConfig {
    pub fn new(data_dim: usize, mechanism: Mechanism) -> Self {
        NPConfig {
            data_dim,
            embed_hidden: vec![32, 64],
            latent_dim: 16,
            head_hidden: vec![32, 32],
            decoder_hidden: vec![32, 32],
            sigma_floor: 1e-3,
            mechanism,
        }
    }

    /// Desk-scale defaults; long series get a slimmer decoder.
    pub fn for_dim(data_dim: usize, mechanism: Mechanism) -> Self {
        let mut cfg = Self::new(data_dim, mechanism);
        if data_dim > 16 {
            cfg.decoder_hidden = vec![32];
            cfg.latent_dim = 8;
        }
        cfg
    }

    fn head_in_dim(&self) -> usize {
        let embed = *self.embed_hidden.last().unwrap();
        match self.mechanism {
            Mechanism::Mcar => embed,
            _ => embed + self.data_dim,
        }
    }
}

/// Gaussian over the latent code.
pub struct LatentDist {
    pub mean: NodeId,
    pub sigma: NodeId,
}

/// Independent Gaussian per decoded location; `mask_prob` is present in
/// MNAR mode.
pub struct PredictiveDist {
    pub mean: NodeId,
    pub sigma: NodeId,
    pub mask_prob: Option<NodeId>,
}

/// Insert all imputation-model parameters under `np.*`.
pub fn np_init(store: &mut ParameterStore, cfg: &NPConfig, rng: &mut ChaCha12Rng) {
    let mut dims = vec![2];
    dims.extend(&cfg.embed_hidden);
    for (i, w) in dims.windows(2).enumerate() {
        init_linear(store, &format!("np.embed.l{i}"), w[0], w[1], rng);
    }

    let mut dims = vec![cfg.head_in_dim()];
    dims.extend(&cfg.head_hidden);
    dims.push(2 * cfg.latent_dim);
    for (i, w) in dims.windows(2).enumerate() {
        init_linear(store, &format!("np.head.l{i}"), w[0], w[1], rng);
    }

    let mut dims = vec![cfg.latent_dim + 1];
    dims.extend(&cfg.decoder_hidden);
    dims.push(2);
    for (i, w) in dims.windows(2).enumerate() {
        init_linear(store, &format!("np.dec.l{i}"), w[0], w[1], rng);
    }

    if cfg.mechanism == Mechanism::Mnar {
        store.insert("np.maskhead.a", Tensor::vector(vec![1.0]));
        store.insert("np.maskhead.b", Tensor::vector(vec![0.0]));
    }
}

/// MLP with relu on hidden layers and a linear output.
fn mlp(
    g: &mut Graph,
    at: &AttachedParams,
    prefix: &str,
    n_layers: usize,
    input: NodeId,
) -> Result<NodeId> {
    let mut h = input;
    for i in 0..n_layers {
        let w = at.id(&format!("{prefix}.l{i}.w"))?;
        let b = at.id(&format!("{prefix}.l{i}.b"))?;
        h = g.linear(h, w, b)?;
        if i + 1 < n_layers {
            h = g.relu(h);
        }
    }
    Ok(h)
}

/// Encode the observed context into a latent Gaussian. The empty context
/// pools to a zero vector, giving a learned prior embedding.
pub fn encode(
    g: &mut Graph,
    at: &AttachedParams,
    cfg: &NPConfig,
    std: &Standardizer,
    sample: &MaskedSample,
) -> Result<LatentDist> {
    let n_obs = sample.x_obs.len();
    let mut ctx = Vec::with_capacity(n_obs * 2);
    for (v, (&c, &i)) in sample
        .x_obs
        .iter()
        .zip(sample.c_obs.iter().zip(&sample.idx_obs))
    {
        ctx.push(std.apply_at(*v, i));
        ctx.push(c);
    }
    let ctx = g.leaf(Tensor::matrix(n_obs, 2, ctx));
    let embedded = mlp(g, at, "np.embed", cfg.embed_hidden.len(), ctx)?;
    let pooled = g.mean_axis0(embedded)?;
    let embed_dim = *cfg.embed_hidden.last().unwrap();
    let mut head_in = g.reshape(pooled, &[1, embed_dim])?;
    if cfg.mechanism != Mechanism::Mcar {
        let mask_row = g.leaf(Tensor::matrix(
            1,
            cfg.data_dim,
            sample.mask.0.iter().map(|&s| s as f64).collect(),
        ));
        head_in = g.concat_cols(head_in, mask_row)?;
    }
    let out = mlp(g, at, "np.head", cfg.head_hidden.len() + 1, head_in)?;
    let mean = g.slice_cols(out, 0, cfg.latent_dim)?;
    let raw = g.slice_cols(out, cfg.latent_dim, 2 * cfg.latent_dim)?;
    let sp = g.softplus(raw);
    let sigma = g.add_scalar(sp, cfg.sigma_floor);
    Ok(LatentDist { mean, sigma })
}

/// Decode a latent draw at the given locations.
pub fn decode(
    g: &mut Graph,
    at: &AttachedParams,
    cfg: &NPConfig,
    z: NodeId,
    locs: &[f64],
) -> Result<PredictiveDist> {
    let k = locs.len();
    if k == 0 {
        return Err(Error::EmptyInput("decode"));
    }
    let zk = g.repeat_row(z, k)?;
    let c = g.leaf(Tensor::matrix(k, 1, locs.to_vec()));
    let input = g.concat_cols(zk, c)?;
    let out = mlp(g, at, "np.dec", cfg.decoder_hidden.len() + 1, input)?;
    let mean = g.slice_cols(out, 0, 1)?;
    let raw = g.slice_cols(out, 1, 2)?;
    let sp = g.softplus(raw);
    let sigma = g.add_scalar(sp, cfg.sigma_floor);
    let mask_prob = if cfg.mechanism == Mechanism::Mnar {
        let logits = mask_head_logits(g, at, mean, k)?;
        Some(g.sigmoid(logits))
    } else {
        None
    };
    Ok(PredictiveDist { mean, sigma, mask_prob })
}

/// a * v + b with the scalar head parameters broadcast over k rows.
fn mask_head_logits(g: &mut Graph, at: &AttachedParams, v: NodeId, k: usize) -> Result<NodeId> {
    let a = at.id("np.maskhead.a")?;
    let b = at.id("np.maskhead.b")?;
    let ak = g.repeat_row(a, k)?;
    let bk = g.repeat_row(b, k)?;
    let av = g.mul(ak, v)?;
    g.add(av, bk)
}

/// Monte Carlo estimate of log p(x_mis | c_mis, C) with explicit latent
/// noise, so the same draws can be replayed for gradient checks.
pub fn np_log_likelihood_with_etas(
    g: &mut Graph,
    at: &AttachedParams,
    cfg: &NPConfig,
    std: &Standardizer,
    sample: &MaskedSample,
    etas: &[Vec<f64>],
) -> Result<NodeId> {
    if etas.is_empty() {
        return Err(Error::invalid("np_log_likelihood requires m >= 1"));
    }
    if sample.n_missing() == 0 {
        // empty product: exactly zero, and no parameter receives gradient
        return Ok(g.scalar(0.0));
    }
    let enc = encode(g, at, cfg, std, sample)?;
    let k = sample.n_missing();
    let x_mis = g.leaf(Tensor::matrix(
        k,
        1,
        std.apply_subset(&sample.x_mis, &sample.idx_mis),
    ));

    let mut per_draw = Vec::with_capacity(etas.len());
    for eta in etas {
        let eta = g.leaf(Tensor::matrix(1, cfg.latent_dim, eta.clone()));
        let noise = g.mul(enc.sigma, eta)?;
        let z = g.add(enc.mean, noise)?;
        let pred = decode(g, at, cfg, z, &sample.c_mis)?;
        let lp = g.gaussian_log_pdf(x_mis, pred.mean, pred.sigma)?;
        per_draw.push(g.sum(lp));
    }
    let stacked = g.stack(&per_draw)?;
    let lme = g.log_mean_exp(stacked)?;
    // back to raw-space density
    let mut total = g.add_scalar(lme, -std.log_scale_sum_subset(&sample.idx_mis));

    if cfg.mechanism == Mechanism::Mnar {
        let mask_term = mask_head_log_likelihood(g, at, cfg, std, sample, &enc)?;
        total = g.add(total, mask_term)?;
    }
    Ok(total)
}

/// Bernoulli log-likelihood of the mask under the self-masking head,
/// summed over all coordinates. Observed coordinates use their true
/// (standardized) values; missing ones use the decoder reconstruction at
/// the mean latent, so the term stays independent of the Monte Carlo draws.
fn mask_head_log_likelihood(
    g: &mut Graph,
    at: &AttachedParams,
    cfg: &NPConfig,
    std: &Standardizer,
    sample: &MaskedSample,
    enc: &LatentDist,
) -> Result<NodeId> {
    let d = cfg.data_dim;
    let all_locs: Vec<f64> = (0..d).map(|i| location(i, d)).collect();
    let recon = decode(g, at, cfg, enc.mean, &all_locs)?;

    let mut mis_ind = vec![0.0; d];
    let mut obs_vals = vec![0.0; d];
    let mut obs_ind = vec![0.0; d];
    for i in 0..d {
        if sample.mask.observed(i) {
            obs_ind[i] = 1.0;
            obs_vals[i] = std.apply_at(sample.x[i], i);
        } else {
            mis_ind[i] = 1.0;
        }
    }
    let mis_ind = g.leaf(Tensor::matrix(d, 1, mis_ind));
    let obs_ind = g.leaf(Tensor::matrix(d, 1, obs_ind));
    let obs_vals = g.leaf(Tensor::matrix(d, 1, obs_vals));

    let blended = {
        let from_recon = g.mul(recon.mean, mis_ind)?;
        g.add(from_recon, obs_vals)?
    };
    let logits = mask_head_logits(g, at, blended, d)?;
    // log P(missing) = -softplus(-l), log P(observed) = -softplus(l)
    let neg_logits = g.scale(logits, -1.0);
    let sp_neg = g.softplus(neg_logits);
    let sp_pos = g.softplus(logits);
    let mis_term = {
        let m = g.mul(mis_ind, sp_neg)?;
        g.scale(m, -1.0)
    };
    let obs_term = {
        let o = g.mul(obs_ind, sp_pos)?;
        g.scale(o, -1.0)
    };
    let both = g.add(mis_term, obs_term)?;
    Ok(g.sum(both))
}

/// Eq.-9-style Monte Carlo log-likelihood with fresh latent noise.
pub fn np_log_likelihood(
    g: &mut Graph,
    at: &AttachedParams,
    cfg: &NPConfig,
    std: &Standardizer,
    sample: &MaskedSample,
    m: usize,
    rng: &mut ChaCha12Rng,
) -> Result<NodeId> {
    if m == 0 {
        return Err(Error::invalid("np_log_likelihood requires m >= 1"));
    }
    let etas: Vec<Vec<f64>> = (0..m).map(|_| normal_vec(rng, cfg.latent_dim)).collect();
    np_log_likelihood_with_etas(g, at, cfg, std, sample, &etas)
}

/// Draw k completed vectors: latent from the encoder, missing values from
/// the decoder Gaussians, observed entries copied verbatim.
pub fn sample_imputations(
    store: &ParameterStore,
    cfg: &NPConfig,
    std: &Standardizer,
    sample: &MaskedSample,
    k: usize,
    rng: &mut ChaCha12Rng,
) -> Result<Vec<Vec<f64>>> {
    if k == 0 {
        return Err(Error::invalid("sample_imputations requires k >= 1"));
    }
    let n_mis = sample.n_missing();
    if n_mis == 0 {
        let full = crate::mask::scatter(&sample.x_obs, &[], &sample.mask)?;
        return Ok(vec![full; k]);
    }
    let mut g = Graph::new();
    let at = store.attach(&mut g);
    let enc = encode(&mut g, &at, cfg, std, sample)?;
    let mut out = Vec::with_capacity(k);
    for _ in 0..k {
        let eta = g.leaf(Tensor::matrix(1, cfg.latent_dim, normal_vec(rng, cfg.latent_dim)));
        let noise = g.mul(enc.sigma, eta)?;
        let z = g.add(enc.mean, noise)?;
        let pred = decode(&mut g, &at, cfg, z, &sample.c_mis)?;
        let mu = g.value(pred.mean).data().to_vec();
        let sig = g.value(pred.sigma).data().to_vec();
        let obs_noise = normal_vec(rng, n_mis);
        let draws: Vec<f64> = (0..n_mis)
            .map(|i| std.invert_at(mu[i] + sig[i] * obs_noise[i], sample.idx_mis[i]))
            .collect();
        out.push(crate::mask::scatter(&sample.x_obs, &draws, &sample.mask)?);
    }
    Ok(out)
}

/// RMSE of a full imputed vector against the true missing values, over all
/// missing coordinates of a batch.
pub fn rmse_against_truth(imputed_full: &[Vec<f64>], samples: &[MaskedSample]) -> Result<f64> {
    let mut sq = 0.0;
    let mut count = 0usize;
    for (imp, s) in imputed_full.iter().zip(samples) {
        for (&i, &truth) in s.idx_mis.iter().zip(&s.x_mis) {
            let e = imp[i] - truth;
            sq += e * e;
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::invalid(
            "imputation RMSE undefined: no missing coordinates in batch",
        ));
    }
    Ok((sq / count as f64).sqrt())
}

/// Fig.-3-style imputation RMSE: mean of k model imputations vs truth.
pub fn imputation_rmse(
    store: &ParameterStore,
    cfg: &NPConfig,
    std: &Standardizer,
    samples: &[MaskedSample],
    k: usize,
    rng: &mut ChaCha12Rng,
) -> Result<f64> {
    let mut means = Vec::with_capacity(samples.len());
    for s in samples {
        let imps = sample_imputations(store, cfg, std, s, k, rng)?;
        let d = s.dim();
        let mut mean = vec![0.0; d];
        for imp in &imps {
            for (m, v) in mean.iter_mut().zip(imp) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= k as f64);
        means.push(mean);
    }
    rmse_against_truth(&means, samples)
}

/// RMSE of a constant imputer (zero imputation, training-mean imputation).
pub fn constant_imputation_rmse(samples: &[MaskedSample], constants: &[f64]) -> Result<f64> {
    let imputed: Vec<Vec<f64>> = samples.iter().map(|_| constants.to_vec()).collect();
    rmse_against_truth(&imputed, samples)
}
