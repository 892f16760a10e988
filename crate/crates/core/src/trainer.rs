//! Mini-batch training: Adam updates, perplexity-driven learning-rate
//! decay, dropout scheduling and throughput metrics.

use crate::autograd::GradientSet;
use crate::corpus::ParallelCorpus;
use crate::error::{Error, Result};
use crate::model::graph::{build_train_graph, Batch, StepCtx};
use crate::model::{ModelConfig, ModelParams, Variant};
use crate::parallel::plan::{build_placement, PlacementPlan, Strategy};
use crate::parallel::run_strategy;
use crate::rng::Rng;
use crate::sim::BatchCaps;
use crate::tensor::{Scalar, Tensor};
use serde::Serialize;
use std::collections::BTreeMap;
use std::time::Instant;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-8;
pub const LR_DECAY_FACTOR: f64 = 0.7;

/// Adam moments and step counter.
#[derive(Debug, Clone)]
pub struct OptimizerState<S: Scalar = f32> {
    m: BTreeMap<String, Tensor<S>>,
    v: BTreeMap<String, Tensor<S>>,
    pub step: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl<S: Scalar> OptimizerState<S> {
    pub fn new(learning_rate: f64) -> Self {
        OptimizerState {
            m: BTreeMap::new(),
            v: BTreeMap::new(),
            step: 0,
            learning_rate,
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            epsilon: ADAM_EPSILON,
        }
    }
}

/// One bias-corrected Adam update over every parameter, in canonical
/// tensor order.
pub fn adam_step<S: Scalar>(
    params: &mut ModelParams<S>,
    grads: &GradientSet<S>,
    opt: &mut OptimizerState<S>,
) -> Result<()> {
    opt.step += 1;
    let t = opt.step;
    let b1 = S::from_f64(opt.beta1);
    let b2 = S::from_f64(opt.beta2);
    let one = S::one();
    let corr1 = S::from_f64(1.0 - opt.beta1.powi(t as i32));
    let corr2 = S::from_f64(1.0 - opt.beta2.powi(t as i32));
    let lr = S::from_f64(opt.learning_rate);
    let eps = S::from_f64(opt.epsilon);
    let m_map = &mut opt.m;
    let v_map = &mut opt.v;
    params.visit_mut(|name, p| {
        let g = grads
            .get(name)
            .ok_or_else(|| Error::GradientMismatch(format!("missing gradient for {name}")))?;
        if g.shape() != p.shape() {
            return Err(Error::GradientMismatch(format!("shape of {name}")));
        }
        let m = m_map
            .entry(name.to_string())
            .or_insert_with(|| Tensor::zeros(p.shape()));
        let v = v_map
            .entry(name.to_string())
            .or_insert_with(|| Tensor::zeros(p.shape()));
        for ((pv, &gv), (mv, vv)) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut().iter_mut().zip(v.data_mut()))
        {
            *mv = b1 * *mv + (one - b1) * gv;
            *vv = b2 * *vv + (one - b2) * gv * gv;
            let m_hat = *mv / corr1;
            let v_hat = *vv / corr2;
            *pv = *pv - lr * m_hat / (v_hat.sqrt() + eps);
        }
        Ok(())
    })
}

/// Scales all gradients so the global L2 norm is at most `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_global_norm<S: Scalar>(grads: &mut GradientSet<S>, max_norm: f64) -> f64 {
    let mut sq = 0.0f64;
    for (_, g) in grads.iter() {
        for &x in g.data() {
            sq += x.as_f64() * x.as_f64();
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        grads.scale_in_place(S::from_f64(max_norm / norm));
    }
    norm
}

/// Training progress and the development-perplexity history.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub epoch: usize,
    pub batches_seen: u64,
    pub dev_ppl_history: Vec<f64>,
    pub lr_decay_interval: u64,
    pub tokens_processed: u64,
    pub wall_seconds: f64,
}

impl TrainState {
    pub fn new(lr_decay_interval: u64) -> Self {
        TrainState {
            epoch: 0,
            batches_seen: 0,
            dev_ppl_history: Vec::new(),
            lr_decay_interval,
            tokens_processed: 0,
            wall_seconds: 0.0,
        }
    }
}

/// Learning-rate decay rule: at each evaluation interval, if the
/// development perplexity increased against the previous recorded value,
/// multiply the learning rate by 0.7. The history is append-only.
pub fn maybe_decay_lr<S: Scalar>(
    state: &mut TrainState,
    opt: &mut OptimizerState<S>,
    new_dev_ppl: f64,
) {
    if let Some(&prev) = state.dev_ppl_history.last() {
        if new_dev_ppl > prev {
            opt.learning_rate *= LR_DECAY_FACTOR;
        }
    }
    state.dev_ppl_history.push(new_dev_ppl);
}

const EVAL_BATCH: usize = 64;

/// Corpus perplexity: exp of total NLL over non-PAD target tokens, with
/// dropout disabled.
pub fn perplexity<S: Scalar>(
    params: &ModelParams<S>,
    dataset: &ParallelCorpus,
    cfg: &ModelConfig,
) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::Empty("perplexity dataset".into()));
    }
    let mut total_nll = 0.0f64;
    let mut total_tokens = 0usize;
    let ctx = StepCtx::eval(0);
    let mut start = 0;
    while start < dataset.len() {
        let end = (start + EVAL_BATCH).min(dataset.len());
        let batch = Batch::new(
            dataset.src[start..end].to_vec(),
            dataset.tgt[start..end].to_vec(),
        )?;
        let graph = build_train_graph(params, &batch, cfg, &ctx)?;
        total_nll += graph.tape.value(graph.loss_sum).item().as_f64();
        total_tokens += graph.token_count;
        start = end;
    }
    Ok((total_nll / total_tokens as f64).exp())
}

/// Trainer knobs beyond the model itself.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    pub seed: u64,
    pub learning_rate: f64,
    /// Batches between dev evaluations (and decay-rule applications).
    pub eval_interval: u64,
    /// Global-norm gradient clipping; off by default.
    pub clip_norm: Option<f64>,
    /// Stop early once dev perplexity reaches this.
    pub target_dev_ppl: Option<f64>,
    /// Reference rate for the metrics scaling factor; a one-worker serial
    /// run reports 1.0 by construction when unset.
    pub baseline_tokens_per_sec: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            max_epochs: 30,
            seed: 1,
            learning_rate: 0.001,
            eval_interval: 50,
            clip_norm: None,
            target_dev_ppl: None,
            baseline_tokens_per_sec: None,
        }
    }
}

/// One metrics-stream record; `src_tokens_per_sec` is wall-clock derived
/// and excluded from determinism comparisons.
#[derive(Debug, Clone, Serialize)]
pub struct MetricsRecord {
    pub batches: u64,
    pub epoch: usize,
    pub loss: f64,
    pub dev_ppl: f64,
    pub lr: f64,
    pub src_tokens_per_sec: f64,
    pub scaling_factor: f64,
}

/// Metric fields derived from wall-clock time; excluded when comparing
/// runs for determinism.
pub const WALL_CLOCK_FIELDS: &[&str] = &["src_tokens_per_sec", "scaling_factor"];

impl MetricsRecord {
    /// One JSON line, numeric fields fixed to 4 decimal places.
    pub fn to_json_line(&self) -> String {
        format!(
            "{{\"batches\":{},\"epoch\":{},\"loss\":{:.4},\"dev_ppl\":{:.4},\"lr\":{:.6},\"src_tokens_per_sec\":{:.4},\"scaling_factor\":{:.4}}}",
            self.batches,
            self.epoch,
            self.loss,
            self.dev_ppl,
            self.lr,
            self.src_tokens_per_sec,
            self.scaling_factor
        )
    }
}

pub struct TrainOutcome<S: Scalar> {
    pub params: ModelParams<S>,
    pub state: TrainState,
    pub opt: OptimizerState<S>,
    pub reached_target: bool,
}

/// Sentence order for one epoch: bucket by source length (boundaries
/// every 4 tokens) to limit padding, shuffling within buckets and the
/// batch order itself, all from the epoch-derived stream.
fn epoch_batches(corpus: &ParallelCorpus, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut rng = Rng::for_site(seed, &[0xBA7C, epoch as u64]);
    let mut buckets: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, s) in corpus.src.iter().enumerate() {
        buckets.entry(s.len() / 4).or_default().push(i);
    }
    let mut order = Vec::with_capacity(corpus.len());
    for bucket in buckets.values_mut() {
        rng.shuffle(bucket);
        order.extend_from_slice(bucket);
    }
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size).map(|c| c.to_vec()).collect();
    rng.shuffle(&mut batches);
    batches
}

/// Runs the training loop: epochs of `run_strategy` + Adam, with periodic
/// dev evaluation, the decay rule, and a metrics record per interval.
pub fn train<S: Scalar>(
    cfg: &ModelConfig,
    tcfg: &TrainConfig,
    plan: &PlacementPlan,
    train_corpus: &ParallelCorpus,
    dev_corpus: &ParallelCorpus,
    mut on_metrics: impl FnMut(&MetricsRecord),
) -> Result<TrainOutcome<S>> {
    cfg.validate()?;
    if train_corpus.is_empty() {
        return Err(Error::Empty("training corpus".into()));
    }
    let mut params = ModelParams::<S>::init(cfg, &mut Rng::new(tcfg.seed))?;
    let mut opt = OptimizerState::<S>::new(tcfg.learning_rate);
    let mut state = TrainState::new(tcfg.eval_interval);
    let mut reached = false;
    let mut interval_tokens = 0u64;
    let mut interval_secs = 0.0f64;
    #[allow(unused_assignments)]
    let mut last_loss = 0.0f64;

    'epochs: for epoch in 0..tcfg.max_epochs {
        state.epoch = epoch;
        for idx in epoch_batches(train_corpus, tcfg.batch_size, tcfg.seed, epoch) {
            let batch = Batch::new(
                idx.iter().map(|&i| train_corpus.src[i].clone()).collect(),
                idx.iter().map(|&i| train_corpus.tgt[i].clone()).collect(),
            )?;
            let ctx = StepCtx::train(tcfg.seed, state.batches_seen);
            let started = Instant::now();
            let mut out = run_strategy(plan, &params, &batch, cfg, &ctx)?;
            if !out.loss_mean.is_finite() {
                return Err(Error::Divergence(format!(
                    "loss became non-finite at batch {}",
                    state.batches_seen
                )));
            }
            if let Some(limit) = tcfg.clip_norm {
                clip_global_norm(&mut out.grads, limit);
            }
            adam_step(&mut params, &out.grads, &mut opt)?;
            let secs = started.elapsed().as_secs_f64();
            state.batches_seen += 1;
            state.tokens_processed += batch.src_tokens as u64;
            state.wall_seconds += secs;
            interval_tokens += batch.src_tokens as u64;
            interval_secs += secs;
            last_loss = out.loss_mean;

            if state.batches_seen % tcfg.eval_interval == 0 {
                let ppl = perplexity(&params, dev_corpus, cfg)?;
                maybe_decay_lr(&mut state, &mut opt, ppl);
                let rate = interval_tokens as f64 / interval_secs.max(1e-9);
                let scaling = match tcfg.baseline_tokens_per_sec {
                    Some(base) => rate / base,
                    None => 1.0,
                };
                on_metrics(&MetricsRecord {
                    batches: state.batches_seen,
                    epoch,
                    loss: last_loss,
                    dev_ppl: ppl,
                    lr: opt.learning_rate,
                    src_tokens_per_sec: rate,
                    scaling_factor: scaling,
                });
                interval_tokens = 0;
                interval_secs = 0.0;
                if tcfg.target_dev_ppl.is_some_and(|t| ppl < t) {
                    reached = true;
                    break 'epochs;
                }
            }
        }
    }
    // Closing evaluation if the loop ended off-interval.
    if !reached && state.batches_seen % tcfg.eval_interval != 0 {
        let ppl = perplexity(&params, dev_corpus, cfg)?;
        maybe_decay_lr(&mut state, &mut opt, ppl);
        if tcfg.target_dev_ppl.is_some_and(|t| ppl < t) {
            reached = true;
        }
    }
    Ok(TrainOutcome {
        params,
        state,
        opt,
        reached_target: reached,
    })
}

// ── Throughput benchmarking ──────────────────────────────────────────

#[derive(Debug, Clone, Serialize)]
pub struct BenchRow {
    pub strategy: Strategy,
    pub src_tokens_per_sec: f64,
    pub scaling_factor: f64,
    pub batch_size: usize,
}

/// Decoder variant each strategy naturally runs: the hybrid needs
/// input-feeding gone; everything else benchmarks the baseline model.
pub fn bench_variant(strategy: Strategy) -> Variant {
    match strategy {
        Strategy::Hybrid => Variant::NoInputFeeding,
        _ => Variant::InputFeeding,
    }
}

fn bench_batch(corpus: &ParallelCorpus, size: usize) -> Result<Batch> {
    let take = |v: &[Vec<usize>]| -> Vec<Vec<usize>> {
        (0..size).map(|i| v[i % v.len()].clone()).collect()
    };
    Batch::new(take(&corpus.src), take(&corpus.tgt))
}

/// Measures wall-clock training throughput per strategy at its batch cap,
/// scaled against the one-worker serial baseline measured in the same
/// call. Strategy batch sizes follow the memory caps.
pub fn bench(
    base_cfg: &ModelConfig,
    strategies: &[Strategy],
    corpus: &ParallelCorpus,
    caps: &BatchCaps,
    seed: u64,
    batches: usize,
) -> Result<Vec<BenchRow>> {
    let measure = |strategy: Strategy| -> Result<(f64, usize)> {
        let mut cfg = base_cfg.clone();
        cfg.variant = bench_variant(strategy);
        let n_dev = if strategy == Strategy::Serial { 1 } else { 4 };
        let plan = build_placement(strategy, n_dev, &cfg)?;
        let batch_size = caps.cap(strategy);
        let batch = bench_batch(corpus, batch_size)?;
        let mut params = ModelParams::<f32>::init(&cfg, &mut Rng::new(seed))?;
        let mut opt = OptimizerState::<f32>::new(0.001);
        // Warmup pass outside the timed window.
        let warm = run_strategy(&plan, &params, &batch, &cfg, &StepCtx::train(seed, 0))?;
        adam_step(&mut params, &warm.grads, &mut opt)?;
        let started = Instant::now();
        let mut tokens = 0u64;
        for b in 0..batches {
            let ctx = StepCtx::train(seed, b as u64 + 1);
            let out = run_strategy(&plan, &params, &batch, &cfg, &ctx)?;
            adam_step(&mut params, &out.grads, &mut opt)?;
            tokens += batch.src_tokens as u64;
        }
        let secs = started.elapsed().as_secs_f64().max(1e-9);
        Ok((tokens as f64 / secs, batch_size))
    };

    let (baseline_rate, _) = measure(Strategy::Serial)?;
    let mut rows = Vec::with_capacity(strategies.len());
    for &s in strategies {
        let (rate, batch_size) = if s == Strategy::Serial {
            (baseline_rate, caps.serial)
        } else {
            measure(s)?
        };
        rows.push(BenchRow {
            strategy: s,
            src_tokens_per_sec: rate,
            scaling_factor: rate / baseline_rate,
            batch_size,
        });
    }
    Ok(rows)
}
