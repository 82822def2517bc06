//! Joint imputation-and-inference training.
//!
//! The joint loss is the sum of the imputation log-likelihood and the flow
//! log-density of the parameters given the completed data; during training
//! the completion uses the true simulated missing values, which the
//! simulator provides for free. Inference-time posteriors substitute model
//! imputations, producing an ensemble over completions.
//!
//! Methods:
//! - `rise`: joint training of the neural-process imputer and the flow;
//! - `rise-meta`: same, with the missingness level drawn per iteration;
//! - `rise-sep`: imputer first, then the flow on imputer completions;
//! - `npe-nn`: a feed-forward single-imputation network trained jointly
//!   with the flow (squared-error on the missing coordinates);
//! - `npe-mask-zero` / `npe-mask-mean`: constant fill plus a mask channel
//!   concatenated to the flow context.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::adam::{adam_step, AdamState};
use crate::error::{Error, Result};
use crate::flow::{
    flow_init, flow_log_prob, flow_sample, summary_forward, summary_init, summary_out_dim,
    MAFConfig,
};
use crate::graph::{Graph, NodeId};
use crate::mask::{apply_mask, MaskedSample, Mechanism, MissingnessSpec};
use crate::np::{np_init, np_log_likelihood, sample_imputations, NPConfig};
use crate::params::{init_linear, AttachedParams, ParameterStore};
use crate::rng::RunRng;
use crate::sim::{simulate_batch, SimBatch, SummaryKind, TaskId, TaskSpec};
use crate::standardize::Standardizer;
use crate::tensor::{log_mean_exp, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "rise")]
    Rise,
    #[serde(rename = "rise-meta")]
    RiseMeta,
    #[serde(rename = "rise-sep")]
    RiseSep,
    #[serde(rename = "npe-nn")]
    NpeNn,
    #[serde(rename = "npe-mask-zero")]
    NpeMaskZero,
    #[serde(rename = "npe-mask-mean")]
    NpeMaskMean,
}

impl Method {
    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Rise => "rise",
            Method::RiseMeta => "rise-meta",
            Method::RiseSep => "rise-sep",
            Method::NpeNn => "npe-nn",
            Method::NpeMaskZero => "npe-mask-zero",
            Method::NpeMaskMean => "npe-mask-mean",
        }
    }

    pub fn parse(s: &str) -> Result<Method> {
        match s {
            "rise" => Ok(Method::Rise),
            "rise-meta" => Ok(Method::RiseMeta),
            "rise-sep" => Ok(Method::RiseSep),
            "npe-nn" => Ok(Method::NpeNn),
            "npe-mask-zero" => Ok(Method::NpeMaskZero),
            "npe-mask-mean" => Ok(Method::NpeMaskMean),
            other => Err(Error::invalid(format!("unknown method `{other}`"))),
        }
    }

    pub fn uses_np(&self) -> bool {
        matches!(self, Method::Rise | Method::RiseMeta | Method::RiseSep)
    }

    fn mask_in_context(&self) -> bool {
        matches!(self, Method::NpeMaskZero | Method::NpeMaskMean)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch: usize,
    pub lr: f64,
    pub n_iter: usize,
    /// Monte Carlo draws for the imputation likelihood during training.
    pub m: usize,
    /// Imputations per observation at inference time.
    pub k: usize,
    pub missing: MissingnessSpec,
    /// Equiprobable support of p(eps) for `rise-meta`.
    pub eps_set: Option<Vec<f64>>,
    pub seed: u64,
    /// Some(n): pre-simulate n pairs and cycle them; None: fresh simulations
    /// every iteration.
    pub budget: Option<usize>,
}

impl TrainConfig {
    pub fn new(missing: MissingnessSpec, seed: u64) -> Self {
        TrainConfig {
            batch: 50,
            lr: 5e-4,
            n_iter: 2000,
            m: 8,
            k: 16,
            missing,
            eps_set: None,
            seed,
            budget: Some(1000),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::invalid("batch size must be >= 1"));
        }
        if self.lr <= 0.0 {
            return Err(Error::invalid("learning rate must be positive"));
        }
        if self.m == 0 || self.k == 0 {
            return Err(Error::invalid("m and k must be >= 1"));
        }
        Ok(())
    }
}

/// Architecture description derived from (task, method, config).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelSpec {
    pub method: Method,
    pub summary: SummaryKind,
    pub data_dim: usize,
    pub param_dim: usize,
    pub np_cfg: Option<NPConfig>,
    pub maf_cfg: MAFConfig,
}

impl ModelSpec {
    pub fn build(task: &TaskSpec, method: Method, cfg: &TrainConfig) -> ModelSpec {
        let d = task.data_dim;
        let has_missing = cfg.missing.eps > 0.0
            || (method == Method::RiseMeta
                && cfg
                    .eps_set
                    .as_ref()
                    .map(|s| s.iter().any(|&e| e > 0.0))
                    .unwrap_or(false));
        let np_cfg = if method.uses_np() && has_missing {
            Some(NPConfig::for_dim(d, cfg.missing.mechanism))
        } else {
            None
        };
        let mut context_dim = summary_out_dim(task.summary, d);
        if method.mask_in_context() {
            context_dim += d;
        }
        ModelSpec {
            method,
            summary: task.summary,
            data_dim: d,
            param_dim: task.param_dim,
            np_cfg,
            maf_cfg: MAFConfig::new(task.param_dim, context_dim),
        }
    }
}

/// Everything a run produces: parameters, the config echo, and the loss
/// trace. Round-trips bit-exactly through the shared checkpoint format.
#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub task: TaskSpec,
    pub spec: ModelSpec,
    pub config: TrainConfig,
    pub store: ParameterStore,
    pub theta_std: Standardizer,
    pub data_std: Standardizer,
    pub loss_trace: Vec<f64>,
}

impl TrainedModel {
    pub fn save(&self, stem: &std::path::Path) -> Result<()> {
        let meta = serde_json::json!({
            "task": self.task,
            "spec": self.spec,
            "config": self.config,
            "loss_trace": self.loss_trace,
        });
        crate::checkpoint::save_store(stem, &self.store, meta)
    }

    pub fn load(stem: &std::path::Path) -> Result<TrainedModel> {
        let (store, meta) = crate::checkpoint::load_store(stem)?;
        let task: TaskSpec = serde_json::from_value(
            meta.get("task").cloned().ok_or_else(|| Error::Checkpoint("missing task".into()))?,
        )?;
        let spec: ModelSpec = serde_json::from_value(
            meta.get("spec").cloned().ok_or_else(|| Error::Checkpoint("missing spec".into()))?,
        )?;
        let config: TrainConfig = serde_json::from_value(
            meta.get("config")
                .cloned()
                .ok_or_else(|| Error::Checkpoint("missing config".into()))?,
        )?;
        let loss_trace = meta
            .get("loss_trace")
            .and_then(|v| serde_json::from_value(v.clone()).ok())
            .unwrap_or_default();
        let theta_std = Standardizer::from_store(&store, "theta.std")?;
        let data_std = Standardizer::from_store(&store, "data.std")?;
        Ok(TrainedModel { task, spec, config, store, theta_std, data_std, loss_trace })
    }
}

enum LossPhase {
    Joint,
    NpOnly,
    FlowOnImputed,
}

/// The joint loss on one minibatch: mean over samples of
/// -(imputation log-likelihood + flow log-density given the completed
/// vector). The flow conditions on the true completion during training.
#[allow(clippy::too_many_arguments)]
pub fn rise_loss(
    g: &mut Graph,
    at: &AttachedParams,
    spec: &ModelSpec,
    theta_std: &Standardizer,
    data_std: &Standardizer,
    batch: &[(Vec<f64>, MaskedSample)],
    m: usize,
    rng: &mut ChaCha12Rng,
) -> Result<NodeId> {
    batch_loss(g, at, spec, theta_std, data_std, batch, m, rng, &LossPhase::Joint)
}

#[allow(clippy::too_many_arguments)]
fn batch_loss(
    g: &mut Graph,
    at: &AttachedParams,
    spec: &ModelSpec,
    theta_std: &Standardizer,
    data_std: &Standardizer,
    batch: &[(Vec<f64>, MaskedSample)],
    m: usize,
    rng: &mut ChaCha12Rng,
    phase: &LossPhase,
) -> Result<NodeId> {
    if batch.is_empty() {
        return Err(Error::EmptyInput("rise_loss"));
    }
    let n = batch.len();
    let d = spec.data_dim;

    // imputation term
    let np_term = match (phase, &spec.np_cfg) {
        (LossPhase::FlowOnImputed, _) | (_, None) => None,
        (_, Some(np_cfg)) => {
            let mut lls = Vec::with_capacity(n);
            for (_, sample) in batch {
                lls.push(np_log_likelihood(g, at, np_cfg, data_std, sample, m, rng)?);
            }
            let stacked = g.stack(&lls)?;
            let mean_ll = g.mean(stacked)?;
            Some(g.scale(mean_ll, -1.0))
        }
    };
    if matches!(phase, LossPhase::NpOnly) {
        return np_term.ok_or_else(|| Error::invalid("rise-sep phase 1 requires an imputer"));
    }

    // flow term: context per sample, batched log-prob
    let mut ctx_rows = Vec::with_capacity(n);
    let mut mse_num: Option<NodeId> = None;
    let mut mse_den = 0usize;
    for (_, sample) in batch {
        let (ctx, mse) = context_row(g, at, spec, data_std, sample, CompletionMode::Train, rng)?;
        ctx_rows.push(ctx);
        if let Some((num, count)) = mse {
            mse_den += count;
            mse_num = Some(match mse_num {
                Some(acc) => g.add(acc, num)?,
                None => num,
            });
        }
    }
    let ctx = g.stack_rows(&ctx_rows)?;
    let thetas = g.leaf(Tensor::matrix(
        n,
        spec.param_dim,
        batch
            .iter()
            .flat_map(|(t, _)| theta_std.apply_vec(t))
            .collect(),
    ));
    let lp = flow_log_prob(g, at, &spec.maf_cfg, thetas, ctx)?;
    // report the raw-space density value (constant shift)
    let lp = g.add_scalar(lp, -theta_std.log_scale_sum());
    let mean_lp = g.mean(lp)?;
    let mut loss = g.scale(mean_lp, -1.0);

    if let Some(np) = np_term {
        loss = g.add(loss, np)?;
    }
    if let (Some(num), true) = (mse_num, mse_den > 0) {
        let mse = g.scale(num, 1.0 / mse_den as f64);
        loss = g.add(loss, mse)?;
    }
    let _ = d;
    Ok(loss)
}

enum CompletionMode {
    /// Complete with the true simulated missing values (training).
    Train,
    /// Complete with model imputations (rise-sep phase 2 and inference).
    Imputed,
}

/// Build one flow-context row (1 x context_dim) for a sample. For `npe-nn`
/// also returns the squared-error accumulator over the missing coordinates.
#[allow(clippy::too_many_arguments)]
fn context_row(
    g: &mut Graph,
    at: &AttachedParams,
    spec: &ModelSpec,
    data_std: &Standardizer,
    sample: &MaskedSample,
    mode: CompletionMode,
    rng: &mut ChaCha12Rng,
) -> Result<(NodeId, Option<(NodeId, usize)>)> {
    let d = spec.data_dim;
    let mask_f: Vec<f64> = sample.mask.0.iter().map(|&s| s as f64).collect();

    match spec.method {
        Method::Rise | Method::RiseMeta | Method::RiseSep => {
            let completed = match (mode, &spec.np_cfg) {
                (CompletionMode::Train, _) | (_, None) => {
                    g.leaf(Tensor::matrix(1, d, data_std.apply_vec(&sample.x)))
                }
                (CompletionMode::Imputed, Some(np_cfg)) => {
                    // one NP completion per sample; values enter as constants
                    // because the flow phase does not differentiate the imputer
                    let store = attached_snapshot(g, at, np_cfg)?;
                    let imp = sample_imputations(&store, np_cfg, data_std, sample, 1, rng)?;
                    g.leaf(Tensor::matrix(1, d, data_std.apply_vec(&imp[0])))
                }
            };
            let ctx = summary_forward(g, at, spec.summary, d, completed)?;
            Ok((ctx, None))
        }
        Method::NpeNn => {
            let filled_raw: Vec<f64> = sample
                .x
                .iter()
                .enumerate()
                .map(|(i, &v)| if sample.mask.observed(i) { v } else { 0.0 })
                .collect();
            let filled_std = data_std.apply_vec(&filled_raw);
            let mut input = filled_std.clone();
            input.extend_from_slice(&mask_f);
            let input = g.leaf(Tensor::matrix(1, 2 * d, input));
            let imputed = imputer_forward(g, at, input)?;

            let mis_ind: Vec<f64> = mask_f.iter().map(|&s| 1.0 - s).collect();
            let mis_ind = g.leaf(Tensor::matrix(1, d, mis_ind));
            let obs_part = g.leaf(Tensor::matrix(
                1,
                d,
                sample
                    .x
                    .iter()
                    .enumerate()
                    .map(|(i, &v)| if sample.mask.observed(i) { data_std.apply_at(v, i) } else { 0.0 })
                    .collect(),
            ));
            let imputed_mis = g.mul(imputed, mis_ind)?;
            let completed = g.add(obs_part, imputed_mis)?;
            let ctx = summary_forward(g, at, spec.summary, d, completed)?;

            let mse = if sample.n_missing() > 0 && matches!(mode, CompletionMode::Train) {
                let truth = g.leaf(Tensor::matrix(1, d, data_std.apply_vec(&sample.x)));
                let diff = g.sub(imputed, truth)?;
                let masked = g.mul(diff, mis_ind)?;
                let sq = g.mul(masked, masked)?;
                Some((g.sum(sq), sample.n_missing()))
            } else {
                None
            };
            Ok((ctx, mse))
        }
        Method::NpeMaskZero | Method::NpeMaskMean => {
            let filled_raw: Vec<f64> = sample
                .x
                .iter()
                .enumerate()
                .map(|(i, &v)| {
                    if sample.mask.observed(i) {
                        v
                    } else if spec.method == Method::NpeMaskZero {
                        0.0
                    } else {
                        data_std.mean[i]
                    }
                })
                .collect();
            let filled = g.leaf(Tensor::matrix(1, d, data_std.apply_vec(&filled_raw)));
            let summarized = summary_forward(g, at, spec.summary, d, filled)?;
            let mask_row = g.leaf(Tensor::matrix(1, d, mask_f));
            let ctx = g.concat_cols(summarized, mask_row)?;
            Ok((ctx, None))
        }
    }
}

/// Rebuild a value-only store for the NP parameters currently attached, so
/// inference helpers can run on mid-training values.
fn attached_snapshot(g: &Graph, at: &AttachedParams, np_cfg: &NPConfig) -> Result<ParameterStore> {
    let mut store = ParameterStore::new();
    let mut names = vec![];
    let mut dims = vec![2];
    dims.extend(&np_cfg.embed_hidden);
    for i in 0..dims.len() - 1 {
        names.push(format!("np.embed.l{i}.w"));
        names.push(format!("np.embed.l{i}.b"));
    }
    let n_head = np_cfg.head_hidden.len() + 1;
    for i in 0..n_head {
        names.push(format!("np.head.l{i}.w"));
        names.push(format!("np.head.l{i}.b"));
    }
    let n_dec = np_cfg.decoder_hidden.len() + 1;
    for i in 0..n_dec {
        names.push(format!("np.dec.l{i}.w"));
        names.push(format!("np.dec.l{i}.b"));
    }
    if np_cfg.mechanism == Mechanism::Mnar {
        names.push("np.maskhead.a".into());
        names.push("np.maskhead.b".into());
    }
    for name in names {
        store.insert(name.clone(), g.value(at.id(&name)?).clone());
    }
    Ok(store)
}

fn imputer_forward(g: &mut Graph, at: &AttachedParams, input: NodeId) -> Result<NodeId> {
    let mut h = input;
    for i in 0..3 {
        let w = at.id(&format!("nn.imputer.l{i}.w"))?;
        let b = at.id(&format!("nn.imputer.l{i}.b"))?;
        h = g.linear(h, w, b)?;
        if i < 2 {
            h = g.relu(h);
        }
    }
    Ok(h)
}

fn init_params(
    task: &TaskSpec,
    spec: &ModelSpec,
    theta_std: &Standardizer,
    data_std: &Standardizer,
    rng: &mut ChaCha12Rng,
) -> ParameterStore {
    let mut store = ParameterStore::new();
    if let Some(np_cfg) = &spec.np_cfg {
        np_init(&mut store, np_cfg, rng);
    }
    if spec.method == Method::NpeNn {
        let d = task.data_dim;
        init_linear(&mut store, "nn.imputer.l0", 2 * d, 64, rng);
        init_linear(&mut store, "nn.imputer.l1", 64, 64, rng);
        init_linear(&mut store, "nn.imputer.l2", 64, d, rng);
    }
    summary_init(&mut store, spec.summary, task.data_dim, rng);
    flow_init(&mut store, &spec.maf_cfg, rng);
    theta_std.save_into(&mut store, "theta.std");
    data_std.save_into(&mut store, "data.std");
    store
}

enum BatchProvider {
    Budget { data: SimBatch, order: Vec<usize>, pos: usize, shuffle: ChaCha12Rng },
    Fresh { task: TaskSpec, rng: ChaCha12Rng },
}

impl BatchProvider {
    fn next(&mut self, n: usize) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
        match self {
            BatchProvider::Budget { data, order, pos, shuffle } => {
                let mut out = Vec::with_capacity(n);
                for _ in 0..n {
                    if *pos >= order.len() {
                        order.shuffle(shuffle);
                        *pos = 0;
                    }
                    let i = order[*pos];
                    *pos += 1;
                    out.push((data.thetas.row(i).to_vec(), data.xs.row(i).to_vec()));
                }
                Ok(out)
            }
            BatchProvider::Fresh { task, rng } => {
                let batch = simulate_batch(task, n, rng, 0)?;
                Ok((0..n)
                    .map(|i| (batch.thetas.row(i).to_vec(), batch.xs.row(i).to_vec()))
                    .collect())
            }
        }
    }
}

/// The eps draws a meta run makes, one per iteration.
pub fn meta_eps_sequence(seed: u64, eps_set: &[f64], n_iter: usize) -> Vec<f64> {
    let mut rng = RunRng::new(seed).stream("eps");
    (0..n_iter)
        .map(|_| eps_set[rng.gen_range(0..eps_set.len())])
        .collect()
}

struct LoopStreams {
    mask: ChaCha12Rng,
    loss: ChaCha12Rng,
    impute: ChaCha12Rng,
}

#[allow(clippy::too_many_arguments)]
fn optimize(
    spec: &ModelSpec,
    store: &mut ParameterStore,
    adam: &mut AdamState,
    cfg: &TrainConfig,
    provider: &mut BatchProvider,
    phase: LossPhase,
    n_iter: usize,
    eps_per_iter: Option<&[f64]>,
    streams: &mut LoopStreams,
    theta_std: &Standardizer,
    data_std: &Standardizer,
    trace: &mut Vec<f64>,
) -> Result<()> {
    for iter in 0..n_iter {
        let mut step = || -> Result<f64> {
            let raw = provider.next(cfg.batch)?;
            let missing = match eps_per_iter {
                Some(eps) => cfg.missing.with_eps(eps[iter])?,
                None => cfg.missing.clone(),
            };
            let mut batch = Vec::with_capacity(raw.len());
            for (theta, x) in raw {
                let mask = missing.gen_mask(&x, &mut streams.mask)?;
                batch.push((theta, apply_mask(&x, &mask)?));
            }
            let mut g = Graph::new();
            let at = store.attach(&mut g);
            let rng = match phase {
                LossPhase::FlowOnImputed => &mut streams.impute,
                _ => &mut streams.loss,
            };
            let loss = batch_loss(&mut g, &at, spec, theta_std, data_std, &batch, cfg.m, rng, &phase)?;
            let value = g.value(loss).item();
            g.backward(loss)?;
            store.accumulate_grads(&g, &at);
            // parameters untouched by this minibatch (e.g. the imputer on a
            // fully observed batch) take a zero-gradient Adam step
            store.ensure_grads();
            adam_step(store, adam)?;
            Ok(value)
        };
        match step() {
            Ok(v) => trace.push(v),
            Err(e) => {
                return Err(Error::TrainIteration { iter, source: Box::new(e) });
            }
        }
    }
    Ok(())
}

fn make_provider(task: &TaskSpec, cfg: &TrainConfig, root: &RunRng) -> Result<(BatchProvider, Standardizer)> {
    match cfg.budget {
        Some(n) => {
            let data = simulate_batch(task, n, &mut root.stream("sim"), cfg.seed)?;
            let data_std = Standardizer::from_columns(&data.xs);
            let order: Vec<usize> = (0..data.len()).collect();
            Ok((
                BatchProvider::Budget { data, order, pos: usize::MAX, shuffle: root.stream("shuffle") },
                data_std,
            ))
        }
        None => {
            let stats = simulate_batch(task, 1000, &mut root.stream("stats"), cfg.seed)?;
            let data_std = Standardizer::from_columns(&stats.xs);
            Ok((
                BatchProvider::Fresh { task: task.clone(), rng: root.stream("sim") },
                data_std,
            ))
        }
    }
}

/// Train one model (Algorithm-1-style loop), dispatching on the method.
pub fn train(task: &TaskSpec, method: Method, cfg: &TrainConfig) -> Result<TrainedModel> {
    match method {
        Method::RiseMeta => train_meta(task, cfg),
        Method::RiseSep => train_separate(task, cfg),
        _ => train_plain(task, method, cfg, None),
    }
}

fn train_plain(
    task: &TaskSpec,
    method: Method,
    cfg: &TrainConfig,
    eps_per_iter: Option<Vec<f64>>,
) -> Result<TrainedModel> {
    cfg.validate()?;
    let root = RunRng::new(cfg.seed);
    let (mut provider, data_std) = make_provider(task, cfg, &root)?;
    let (theta_mean, theta_scale) = task.prior.moments()?;
    let theta_std = Standardizer::new(theta_mean, theta_scale);
    let spec = ModelSpec::build(task, method, cfg);
    let mut store = init_params(task, &spec, &theta_std, &data_std, &mut root.stream("init"));
    let mut adam = AdamState::new(cfg.lr);
    let mut streams = LoopStreams {
        mask: root.stream("mask"),
        loss: root.stream("loss"),
        impute: root.stream("impute"),
    };
    let mut trace = Vec::with_capacity(cfg.n_iter);
    optimize(
        &spec,
        &mut store,
        &mut adam,
        cfg,
        &mut provider,
        LossPhase::Joint,
        cfg.n_iter,
        eps_per_iter.as_deref(),
        &mut streams,
        &theta_std,
        &data_std,
        &mut trace,
    )?;
    Ok(TrainedModel {
        task: task.clone(),
        spec,
        config: cfg.clone(),
        store,
        theta_std,
        data_std,
        loss_trace: trace,
    })
}

/// RISE-Meta: draw the missingness level from the configured equiprobable
/// set before masking, each iteration; otherwise identical to `train`.
pub fn train_meta(task: &TaskSpec, cfg: &TrainConfig) -> Result<TrainedModel> {
    let eps_set = cfg
        .eps_set
        .clone()
        .ok_or_else(|| Error::invalid("rise-meta requires eps_set"))?;
    if eps_set.is_empty() {
        return Err(Error::invalid("eps_set must be non-empty"));
    }
    let eps = meta_eps_sequence(cfg.seed, &eps_set, cfg.n_iter);
    train_plain(task, Method::RiseMeta, cfg, Some(eps))
}

/// RISE-Sep: phase 1 trains the imputer alone on the imputation term;
/// phase 2 freezes it and trains the flow on imputer-completed data.
pub fn train_separate(task: &TaskSpec, cfg: &TrainConfig) -> Result<TrainedModel> {
    cfg.validate()?;
    let root = RunRng::new(cfg.seed);
    let (mut provider, data_std) = make_provider(task, cfg, &root)?;
    let (theta_mean, theta_scale) = task.prior.moments()?;
    let theta_std = Standardizer::new(theta_mean, theta_scale);
    let spec = ModelSpec::build(task, Method::RiseSep, cfg);
    if spec.np_cfg.is_none() {
        return Err(Error::invalid("rise-sep requires eps > 0"));
    }
    let mut store = init_params(task, &spec, &theta_std, &data_std, &mut root.stream("init"));
    let mut streams = LoopStreams {
        mask: root.stream("mask"),
        loss: root.stream("loss"),
        impute: root.stream("impute"),
    };
    let mut trace = Vec::with_capacity(2 * cfg.n_iter);

    // phase 1: imputer only
    store.set_trainable("flow.", false);
    store.set_trainable("summary.", false);
    let mut adam = AdamState::new(cfg.lr);
    optimize(
        &spec,
        &mut store,
        &mut adam,
        cfg,
        &mut provider,
        LossPhase::NpOnly,
        cfg.n_iter,
        None,
        &mut streams,
        &theta_std,
        &data_std,
        &mut trace,
    )?;

    // phase 2: freeze the imputer, train the flow on its completions
    store.set_trainable("flow.", true);
    store.set_trainable("summary.", true);
    store.set_trainable("np.", false);
    store.set_trainable("flow.perm", false);
    let mut adam2 = AdamState::new(cfg.lr);
    optimize(
        &spec,
        &mut store,
        &mut adam2,
        cfg,
        &mut provider,
        LossPhase::FlowOnImputed,
        cfg.n_iter,
        None,
        &mut streams,
        &theta_std,
        &data_std,
        &mut trace,
    )?;

    Ok(TrainedModel {
        task: task.clone(),
        spec,
        config: cfg.clone(),
        store,
        theta_std,
        data_std,
        loss_trace: trace,
    })
}

// ---- inference-time posterior -------------------------------------------

impl TrainedModel {
    /// Standardized flow-context rows for one observation: k imputation
    /// completions for the imputer-based methods, a single row otherwise.
    pub fn ensemble_contexts(
        &self,
        sample: &MaskedSample,
        k: usize,
        rng: &mut ChaCha12Rng,
    ) -> Result<Vec<Vec<f64>>> {
        if k == 0 {
            return Err(Error::invalid("ensemble requires k >= 1"));
        }
        let mut g = Graph::new();
        let at = self.store.attach(&mut g);
        match (&self.spec.np_cfg, self.spec.method) {
            (Some(np_cfg), Method::Rise | Method::RiseMeta | Method::RiseSep) => {
                let imps = if sample.n_missing() == 0 {
                    vec![sample.x.clone(); k]
                } else {
                    sample_imputations(&self.store, np_cfg, &self.data_std, sample, k, rng)?
                };
                let mut rows = Vec::with_capacity(k);
                for imp in imps {
                    let row = g.leaf(Tensor::matrix(
                        1,
                        self.spec.data_dim,
                        self.data_std.apply_vec(&imp),
                    ));
                    let ctx = summary_forward(&mut g, &at, self.spec.summary, self.spec.data_dim, row)?;
                    rows.push(g.value(ctx).data().to_vec());
                }
                Ok(rows)
            }
            _ => {
                let (ctx, _) = context_row(
                    &mut g,
                    &at,
                    &self.spec,
                    &self.data_std,
                    sample,
                    CompletionMode::Imputed,
                    rng,
                )?;
                Ok(vec![g.value(ctx).data().to_vec()])
            }
        }
    }

    /// Draw n_per posterior samples per ensemble context; (k * n_per) x p in
    /// raw parameter space.
    pub fn posterior_sample_with_contexts(
        &self,
        contexts: &[Vec<f64>],
        n_per: usize,
        rng: &mut ChaCha12Rng,
    ) -> Result<Tensor> {
        if n_per == 0 {
            return Err(Error::invalid("n_per must be >= 1"));
        }
        let p = self.spec.param_dim;
        let mut data = Vec::with_capacity(contexts.len() * n_per * p);
        for ctx_row in contexts {
            let mut g = Graph::new();
            let at = self.store.attach(&mut g);
            let mut ctx_data = Vec::with_capacity(n_per * ctx_row.len());
            for _ in 0..n_per {
                ctx_data.extend_from_slice(ctx_row);
            }
            let ctx = g.leaf(Tensor::matrix(n_per, ctx_row.len(), ctx_data));
            let samples = flow_sample(&mut g, &at, &self.spec.maf_cfg, ctx, rng)?;
            for i in 0..n_per {
                data.extend(self.theta_std.invert_vec(samples.row(i)));
            }
        }
        Ok(Tensor::matrix(contexts.len() * n_per, p, data))
    }

    /// Multiple-imputation posterior: k completions, n_per draws each.
    pub fn posterior_sample(
        &self,
        sample: &MaskedSample,
        k: usize,
        n_per: usize,
        rng: &mut ChaCha12Rng,
    ) -> Result<Tensor> {
        let contexts = self.ensemble_contexts(sample, k, rng)?;
        self.posterior_sample_with_contexts(&contexts, n_per, rng)
    }

    /// Raw-space ensemble log-density of each theta row: log-mean-exp over
    /// the per-context flow densities.
    pub fn log_prob_with_contexts(&self, contexts: &[Vec<f64>], thetas: &Tensor) -> Result<Vec<f64>> {
        let n = thetas.rows();
        let p = self.spec.param_dim;
        let theta_std_data: Vec<f64> = (0..n)
            .flat_map(|i| self.theta_std.apply_vec(thetas.row(i)))
            .collect();
        let correction = -self.theta_std.log_scale_sum();
        let mut per_ctx: Vec<Vec<f64>> = Vec::with_capacity(contexts.len());
        for ctx_row in contexts {
            let mut g = Graph::new();
            let at = self.store.attach(&mut g);
            let t = g.leaf(Tensor::matrix(n, p, theta_std_data.clone()));
            let mut ctx_data = Vec::with_capacity(n * ctx_row.len());
            for _ in 0..n {
                ctx_data.extend_from_slice(ctx_row);
            }
            let ctx = g.leaf(Tensor::matrix(n, ctx_row.len(), ctx_data));
            let lp = flow_log_prob(&mut g, &at, &self.spec.maf_cfg, t, ctx)?;
            per_ctx.push(g.value(lp).data().iter().map(|v| v + correction).collect());
        }
        (0..n)
            .map(|i| {
                let vals: Vec<f64> = per_ctx.iter().map(|c| c[i]).collect();
                log_mean_exp(&vals)
            })
            .collect()
    }

    /// Nominal log posterior probability of the true parameters: the
    /// ensemble density evaluated at theta*.
    pub fn nlpp(
        &self,
        theta_star: &[f64],
        sample: &MaskedSample,
        m_eval: usize,
        rng: &mut ChaCha12Rng,
    ) -> Result<f64> {
        let contexts = self.ensemble_contexts(sample, m_eval, rng)?;
        let t = Tensor::matrix(1, theta_star.len(), theta_star.to_vec());
        Ok(self.log_prob_with_contexts(&contexts, &t)?[0])
    }

    /// Mean of the ensemble posterior samples.
    pub fn posterior_mean(
        &self,
        sample: &MaskedSample,
        k: usize,
        n_per: usize,
        rng: &mut ChaCha12Rng,
    ) -> Result<Vec<f64>> {
        let samples = self.posterior_sample(sample, k, n_per, rng)?;
        let (n, p) = (samples.rows(), samples.cols());
        let mut mean = vec![0.0; p];
        for i in 0..n {
            for (j, v) in samples.row(i).iter().enumerate() {
                mean[j] += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        Ok(mean)
    }

    /// Fig-3-style imputation RMSE on a test batch (imputer methods only).
    pub fn imputation_rmse_on(
        &self,
        samples: &[MaskedSample],
        k: usize,
        rng: &mut ChaCha12Rng,
    ) -> Result<f64> {
        let np_cfg = self
            .spec
            .np_cfg
            .as_ref()
            .ok_or_else(|| Error::invalid("model has no imputation network"))?;
        crate::np::imputation_rmse(&self.store, np_cfg, &self.data_std, samples, k, rng)
    }
}

/// Reference posterior configuration: the same flow trained on fully
/// observed data (the joint loss reduces to the plain flow loss at eps = 0).
pub fn reference_config(seed: u64, budget: Option<usize>, n_iter: usize) -> TrainConfig {
    let mut cfg = TrainConfig::new(MissingnessSpec::mcar(0.0).unwrap(), seed);
    cfg.budget = budget;
    cfg.n_iter = n_iter;
    cfg
}

/// Train the no-missing-data reference posterior for a task.
pub fn train_reference(task: &TaskSpec, seed: u64, budget: Option<usize>, n_iter: usize) -> Result<TrainedModel> {
    train(task, Method::Rise, &reference_config(seed, budget, n_iter))
}

pub fn default_task(id: TaskId) -> TaskSpec {
    TaskSpec::new(id)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::LN_2PI;
    use crate::mask::{gen_mask_mcar, Mask};
    use approx::assert_relative_eq;

    fn small_cfg(eps: f64, seed: u64) -> TrainConfig {
        let mut cfg = TrainConfig::new(MissingnessSpec::mcar(eps).unwrap(), seed);
        cfg.n_iter = 12;
        cfg.batch = 8;
        cfg.budget = Some(64);
        cfg.m = 2;
        cfg
    }

    fn glu_batch(n: usize, eps: f64, seed: u64) -> Vec<(Vec<f64>, MaskedSample)> {
        let task = TaskSpec::new(TaskId::Glu);
        let root = RunRng::new(seed);
        let data = simulate_batch(&task, n, &mut root.stream("sim"), seed).unwrap();
        let mut mask_rng = root.stream("mask");
        (0..n)
            .map(|i| {
                let mask = gen_mask_mcar(task.data_dim, eps, &mut mask_rng).unwrap();
                (
                    data.thetas.row(i).to_vec(),
                    apply_mask(data.xs.row(i), &mask).unwrap(),
                )
            })
            .collect()
    }

    #[test]
    fn rise_loss_equals_npe_loss_when_fully_observed() {
        let task = TaskSpec::new(TaskId::Glu);
        let cfg = small_cfg(0.25, 3);
        let spec = ModelSpec::build(&task, Method::Rise, &cfg);
        assert!(spec.np_cfg.is_some());
        let theta_std = Standardizer::identity(10);
        let data_std = Standardizer::identity(10);
        let store = init_params(&task, &spec, &theta_std, &data_std, &mut RunRng::new(4).stream("init"));

        let batch = glu_batch(6, 0.0, 5); // fully observed
        let eval = |with_np: bool| -> f64 {
            let mut spec2 = spec.clone();
            if !with_np {
                spec2.np_cfg = None;
            }
            let mut g = Graph::new();
            let at = store.attach(&mut g);
            let loss = rise_loss(
                &mut g, &at, &spec2, &theta_std, &data_std, &batch, 4,
                &mut RunRng::new(6).stream("loss"),
            )
            .unwrap();
            g.value(loss).item()
        };
        let with_np = eval(true);
        let plain_npe = eval(false);
        assert!((with_np - plain_npe).abs() < 1e-12, "{with_np} vs {plain_npe}");
    }

    #[test]
    fn rise_loss_closed_form_with_pinned_components() {
        // single sample, identity summary, zero-init flow, pinned decoder:
        // loss = (p/2) ln 2pi  +  (|mis|/2) ln 2pi
        let task = TaskSpec::new(TaskId::Glu);
        let cfg = small_cfg(0.25, 7);
        let spec = ModelSpec::build(&task, Method::Rise, &cfg);
        let theta_std = Standardizer::identity(10);
        let data_std = Standardizer::identity(10);
        let mut store = init_params(&task, &spec, &theta_std, &data_std, &mut RunRng::new(8).stream("init"));

        let np_cfg = spec.np_cfg.as_ref().unwrap();
        // zero the flow context/hidden entry weights so the flow is exactly
        // standard normal regardless of context; they are already zero-headed
        // pin the decoder so mu = x_mis, sigma = 1
        let x: Vec<f64> = vec![0.0; 10];
        let mask = Mask(vec![1, 1, 1, 0, 0, 1, 1, 1, 1, 1]);
        let sample = apply_mask(&x, &mask).unwrap();
        let n_dec = np_cfg.decoder_hidden.len();
        store.value_mut(&format!("np.dec.l{n_dec}.w")).unwrap().fill(0.0);
        let raw = ((1.0f64 - np_cfg.sigma_floor).exp() - 1.0).ln();
        let b = store.value_mut(&format!("np.dec.l{n_dec}.b")).unwrap();
        b.data_mut()[0] = 0.0; // mu pinned at x_mis = 0
        b.data_mut()[1] = raw; // sigma pinned at 1

        let batch = vec![(vec![0.0; 10], sample)];
        let mut g = Graph::new();
        let at = store.attach(&mut g);
        let loss = rise_loss(
            &mut g, &at, &spec, &theta_std, &data_std, &batch, 3,
            &mut RunRng::new(9).stream("loss"),
        )
        .unwrap();
        let want = 10.0 / 2.0 * LN_2PI + 2.0 / 2.0 * LN_2PI;
        assert_relative_eq!(g.value(loss).item(), want, epsilon = 1e-9);
    }

    #[test]
    fn rise_loss_rejects_empty_batch() {
        let task = TaskSpec::new(TaskId::Glu);
        let cfg = small_cfg(0.25, 10);
        let spec = ModelSpec::build(&task, Method::Rise, &cfg);
        let std = Standardizer::identity(10);
        let store = init_params(&task, &spec, &std, &std, &mut RunRng::new(11).stream("init"));
        let mut g = Graph::new();
        let at = store.attach(&mut g);
        assert!(rise_loss(
            &mut g, &at, &spec, &std, &std, &[], 2,
            &mut RunRng::new(12).stream("loss")
        )
        .is_err());
    }

    #[test]
    fn overfit_smoke_loss_decreases_on_frozen_batch() {
        let task = TaskSpec::new(TaskId::Glu);
        let cfg = small_cfg(0.25, 13);
        let spec = ModelSpec::build(&task, Method::Rise, &cfg);
        let (tm, ts) = task.prior.moments().unwrap();
        let theta_std = Standardizer::new(tm, ts);
        let data_std = Standardizer::identity(10);
        let mut store = init_params(&task, &spec, &theta_std, &data_std, &mut RunRng::new(14).stream("init"));
        let batch = glu_batch(64, 0.25, 15);
        let mut adam = AdamState::new(1e-3);
        let mut trace = Vec::new();
        let mut rng = RunRng::new(16).stream("loss");
        for _ in 0..200 {
            let mut g = Graph::new();
            let at = store.attach(&mut g);
            let loss = rise_loss(&mut g, &at, &spec, &theta_std, &data_std, &batch, 2, &mut rng).unwrap();
            trace.push(g.value(loss).item());
            g.backward(loss).unwrap();
            store.accumulate_grads(&g, &at);
            store.ensure_grads();
            adam_step(&mut store, &mut adam).unwrap();
        }
        let start: f64 = trace[..10].iter().sum::<f64>() / 10.0;
        let end: f64 = trace[190..].iter().sum::<f64>() / 10.0;
        assert!(end < start - 0.5, "start {start} end {end}");
        // 5-step moving average non-increasing after step 50 (smoke bound)
        let ma: Vec<f64> = (0..trace.len() - 4)
            .map(|i| trace[i..i + 5].iter().sum::<f64>() / 5.0)
            .collect();
        for i in 50..ma.len() - 1 {
            assert!(
                ma[i + 1] <= ma[i] + 0.05 * ma[i].abs().max(0.1),
                "moving average rose sharply at {i}: {} -> {}",
                ma[i],
                ma[i + 1]
            );
        }
    }

    #[test]
    fn training_is_deterministic_per_seed() {
        let task = TaskSpec::new(TaskId::Glu);
        let cfg = small_cfg(0.25, 17);
        let a = train(&task, Method::Rise, &cfg).unwrap();
        let b = train(&task, Method::Rise, &cfg).unwrap();
        assert_eq!(a.store.to_bytes(), b.store.to_bytes());
        assert_eq!(a.loss_trace, b.loss_trace);
        let mut cfg2 = cfg.clone();
        cfg2.seed = 18;
        let c = train(&task, Method::Rise, &cfg2).unwrap();
        assert_ne!(a.store.to_bytes(), c.store.to_bytes());
    }

    #[test]
    fn mask_zero_method_concatenates_mask_after_summary() {
        let task = TaskSpec::new(TaskId::Glu);
        let cfg = small_cfg(0.25, 19);
        let spec = ModelSpec::build(&task, Method::NpeMaskZero, &cfg);
        assert_eq!(spec.maf_cfg.context_dim, 20);
        let data_std = Standardizer::new(vec![0.5; 10], vec![2.0; 10]);
        let store = init_params(&task, &spec, &Standardizer::identity(10), &data_std, &mut RunRng::new(20).stream("init"));
        let x: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let mask = Mask(vec![1, 0, 1, 1, 1, 0, 1, 1, 1, 1]);
        let sample = apply_mask(&x, &mask).unwrap();
        let mut g = Graph::new();
        let at = store.attach(&mut g);
        let (ctx, _) = context_row(
            &mut g, &at, &spec, &data_std, &sample, CompletionMode::Train,
            &mut RunRng::new(21).stream("r"),
        )
        .unwrap();
        let row = g.value(ctx).data();
        // first 10 entries: standardized zero-filled data
        for i in 0..10 {
            let want = if mask.observed(i) { (x[i] - 0.5) / 2.0 } else { (0.0 - 0.5) / 2.0 };
            assert_relative_eq!(row[i], want, epsilon = 1e-12);
        }
        // last 10: the mask bits
        for i in 0..10 {
            assert_eq!(row[10 + i], mask.0[i] as f64);
        }
    }

    #[test]
    fn npe_nn_loss_depends_on_missing_truth_through_mse() {
        let task = TaskSpec::new(TaskId::Glu);
        let cfg = small_cfg(0.25, 22);
        let spec = ModelSpec::build(&task, Method::NpeNn, &cfg);
        let std10 = Standardizer::identity(10);
        let store = init_params(&task, &spec, &std10, &std10, &mut RunRng::new(23).stream("init"));
        let theta = vec![0.1; 10];
        let mut x: Vec<f64> = (0..10).map(|i| (i as f64) / 10.0).collect();
        let mask = Mask(vec![1, 0, 1, 1, 1, 1, 1, 1, 1, 1]);
        let loss_for = |x: &[f64]| -> f64 {
            let sample = apply_mask(x, &mask).unwrap();
            let batch = vec![(theta.clone(), sample)];
            let mut g = Graph::new();
            let at = store.attach(&mut g);
            let loss = batch_loss(
                &mut g, &at, &spec, &std10, &std10, &batch, 2,
                &mut RunRng::new(24).stream("loss"), &LossPhase::Joint,
            )
            .unwrap();
            g.value(loss).item()
        };
        let a = loss_for(&x);
        x[1] = 5.0; // only the missing coordinate's truth changes
        let b = loss_for(&x);
        assert!((a - b).abs() > 1e-6, "mse term missing: {a} vs {b}");
    }

    #[test]
    fn meta_with_point_mass_matches_plain_training_bit_for_bit() {
        let task = TaskSpec::new(TaskId::Glu);
        let mut cfg = small_cfg(0.25, 25);
        let plain = train(&task, Method::Rise, &cfg).unwrap();
        cfg.eps_set = Some(vec![0.25]);
        let meta = train(&task, Method::RiseMeta, &cfg).unwrap();
        assert_eq!(plain.store.to_bytes(), meta.store.to_bytes());
    }

    #[test]
    fn meta_eps_draws_hit_atoms_uniformly() {
        let eps_set = [0.1, 0.25, 0.6];
        let n = 3000;
        let draws = meta_eps_sequence(26, &eps_set, n);
        for &e in &eps_set {
            let count = draws.iter().filter(|&&d| d == e).count() as f64;
            let want = n as f64 / 3.0;
            let sd = (n as f64 * (1.0 / 3.0) * (2.0 / 3.0)).sqrt();
            assert!((count - want).abs() < 3.0 * sd, "atom {e}: {count}");
        }
    }

    #[test]
    fn separate_training_freezes_np_in_phase_two() {
        let task = TaskSpec::new(TaskId::Glu);
        let mut cfg = small_cfg(0.25, 27);
        cfg.n_iter = 6;
        let model = train(&task, Method::RiseSep, &cfg).unwrap();

        // re-run phase 1 alone and compare np parameters: phase 2 must not
        // have touched them
        let root = RunRng::new(cfg.seed);
        let (mut provider, data_std) = make_provider(&task, &cfg, &root).unwrap();
        let (tm, ts) = task.prior.moments().unwrap();
        let theta_std = Standardizer::new(tm, ts);
        let spec = ModelSpec::build(&task, Method::RiseSep, &cfg);
        let mut store = init_params(&task, &spec, &theta_std, &data_std, &mut root.stream("init"));
        store.set_trainable("flow.", false);
        store.set_trainable("summary.", false);
        let mut adam = AdamState::new(cfg.lr);
        let mut streams = LoopStreams {
            mask: root.stream("mask"),
            loss: root.stream("loss"),
            impute: root.stream("impute"),
        };
        let mut trace = Vec::new();
        optimize(
            &spec, &mut store, &mut adam, &cfg, &mut provider, LossPhase::NpOnly,
            cfg.n_iter, None, &mut streams, &theta_std, &data_std, &mut trace,
        )
        .unwrap();
        for (name, p) in store.iter() {
            if name.starts_with("np.") {
                assert_eq!(
                    p.value.data(),
                    model.store.value(name).unwrap().data(),
                    "np parameter {name} changed in phase 2"
                );
            }
        }
        // and the flow did move in phase 2
        let moved = model
            .store
            .iter()
            .filter(|(n, _)| n.starts_with("flow.made"))
            .any(|(n, p)| p.value.data() != store.value(n).unwrap().data());
        assert!(moved, "flow parameters did not train in phase 2");
    }

    #[test]
    fn nlpp_without_missing_equals_single_flow_density() {
        let task = TaskSpec::new(TaskId::Glu);
        let cfg = small_cfg(0.25, 28);
        let model = train(&task, Method::Rise, &cfg).unwrap();
        let x: Vec<f64> = vec![0.2; 10];
        let sample = apply_mask(&x, &Mask(vec![1; 10])).unwrap();
        let theta = vec![0.1; 10];
        let v1 = model
            .nlpp(&theta, &sample, 1, &mut RunRng::new(29).stream("e"))
            .unwrap();
        let v16 = model
            .nlpp(&theta, &sample, 16, &mut RunRng::new(30).stream("e"))
            .unwrap();
        assert_eq!(v1, v16);
        assert!(v1.is_finite());
    }

    #[test]
    fn posterior_ensemble_shapes_and_determinism() {
        let task = TaskSpec::new(TaskId::Glu);
        let cfg = small_cfg(0.25, 31);
        let model = train(&task, Method::Rise, &cfg).unwrap();
        let x: Vec<f64> = vec![0.1; 10];
        let mask = gen_mask_mcar(10, 0.25, &mut RunRng::new(32).stream("m")).unwrap();
        let sample = apply_mask(&x, &mask).unwrap();
        let s1 = model
            .posterior_sample(&sample, 4, 8, &mut RunRng::new(33).stream("p"))
            .unwrap();
        let s2 = model
            .posterior_sample(&sample, 4, 8, &mut RunRng::new(33).stream("p"))
            .unwrap();
        assert_eq!(s1.shape(), &[32, 10]);
        assert_eq!(s1.data(), s2.data());
    }

    #[test]
    fn checkpoint_round_trip_preserves_model() {
        let task = TaskSpec::new(TaskId::Oup);
        let mut cfg = small_cfg(0.25, 34);
        cfg.n_iter = 4;
        let model = train(&task, Method::Rise, &cfg).unwrap();
        let dir = std::env::temp_dir().join(format!("trained-{}", std::process::id()));
        let stem = dir.join("model");
        model.save(&stem).unwrap();
        let loaded = TrainedModel::load(&stem).unwrap();
        assert_eq!(model.store.to_bytes(), loaded.store.to_bytes());
        assert_eq!(model.loss_trace, loaded.loss_trace);
        assert_eq!(loaded.spec.method, Method::Rise);
        assert_eq!(loaded.task.id, TaskId::Oup);
        std::fs::remove_dir_all(dir).ok();
    }
}
