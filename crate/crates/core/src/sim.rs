//! Discrete-event cost simulator: makespan and scaling-factor prediction
//! for any placement/schedule under an abstract cost model.
//!
//! Ticks are abstract; only ratios between strategies are meaningful.
//! Compute cost of a task defaults to the parameter count of its layer
//! times the sentences it processes, transfers cost per byte, and
//! synchronization costs per parameter, charged once per mini-batch at
//! the reduction root.

use crate::error::{Error, Result};
use crate::model::graph::Side;
use crate::model::{param_count, tensor_layout, ModelConfig, Part, Variant};
use crate::parallel::plan::{build_placement, split_ranges, PlacementPlan, Strategy};
use crate::parallel::schedule::{wavefront_order, TaskKind, WavefrontSchedule};
use serde::Serialize;

/// Largest mini-batch each strategy fits in device memory.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BatchCaps {
    pub serial: usize,
    pub data_parallel: usize,
    pub model_parallel: usize,
}

impl Default for BatchCaps {
    fn default() -> Self {
        BatchCaps {
            serial: 64,
            data_parallel: 256,
            model_parallel: 224,
        }
    }
}

impl BatchCaps {
    pub fn cap(&self, strategy: Strategy) -> usize {
        match strategy {
            Strategy::Serial => self.serial,
            Strategy::DataParallel => self.data_parallel,
            _ => self.model_parallel,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CostModel {
    /// Ticks per (parameter x sentence) of compute.
    pub compute_per_unit: f64,
    /// Ticks per byte moved between devices.
    pub transfer_per_byte: f64,
    /// Ticks per parameter synchronized at the root.
    pub sync_per_param: f64,
    /// Compute cost of a task grows as rows^batch_exponent. Device
    /// throughput improves with larger batches, which is what makes
    /// multi-device scaling factors above the device count possible at
    /// all; 1.0 means strictly linear cost.
    pub batch_exponent: f64,
    pub caps: BatchCaps,
}

impl Default for CostModel {
    fn default() -> Self {
        CostModel {
            compute_per_unit: 1.0,
            transfer_per_byte: 0.0,
            sync_per_param: 0.0,
            batch_exponent: 0.35,
            caps: BatchCaps::default(),
        }
    }
}

impl CostModel {
    pub fn validate(&self) -> Result<()> {
        if self.compute_per_unit < 0.0 || self.transfer_per_byte < 0.0 || self.sync_per_param < 0.0
        {
            return Err(Error::Config("cost model entries must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.batch_exponent) {
            return Err(Error::Config(format!(
                "batch_exponent {} outside [0, 1]",
                self.batch_exponent
            )));
        }
        Ok(())
    }

    /// Compute ticks for a task of `units` parameters over `rows` sentences.
    fn compute_ticks(&self, units: f64, rows: f64) -> f64 {
        if rows == 0.0 {
            return 0.0;
        }
        units * rows.powf(self.batch_exponent) * self.compute_per_unit
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SimReport {
    pub strategy: Strategy,
    pub batch_size: usize,
    pub makespan: f64,
    pub per_device_busy_fraction: Vec<f64>,
    pub tokens_per_tick: f64,
    pub scaling_factor: f64,
}

/// Ratio of a configuration's token throughput to the one-device baseline.
pub fn scaling_factor(tokens_per_sec: f64, baseline_tokens_per_sec: f64) -> Result<f64> {
    if baseline_tokens_per_sec <= 0.0 {
        return Err(Error::Config("zero baseline throughput".into()));
    }
    Ok(tokens_per_sec / baseline_tokens_per_sec)
}

// ── Task DAG ─────────────────────────────────────────────────────────

/// One simulated task; `deps` carry the tick delay of the incoming edge
/// (transfer bytes already priced in).
#[derive(Debug, Clone)]
pub(crate) struct SimTask {
    pub device: usize,
    pub cost: f64,
    pub deps: Vec<(usize, f64)>,
}

/// Deterministic list scheduler: tasks execute per device in topological
/// id order. Start times are max/+ compositions of costs and delays, so
/// the makespan is monotone in every cost model entry.
pub(crate) fn run_des(tasks: &[SimTask], n_devices: usize) -> Result<(f64, Vec<f64>)> {
    let n = tasks.len();
    // Kahn topological order with min-id tie-break.
    let mut indegree = vec![0usize; n];
    let mut dependents: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (i, t) in tasks.iter().enumerate() {
        indegree[i] = t.deps.len();
        for &(d, _) in &t.deps {
            dependents[d].push(i);
        }
    }
    let mut heap: std::collections::BinaryHeap<std::cmp::Reverse<usize>> = (0..n)
        .filter(|&i| indegree[i] == 0)
        .map(std::cmp::Reverse)
        .collect();
    let mut topo = Vec::with_capacity(n);
    while let Some(std::cmp::Reverse(i)) = heap.pop() {
        topo.push(i);
        for &j in &dependents[i] {
            indegree[j] -= 1;
            if indegree[j] == 0 {
                heap.push(std::cmp::Reverse(j));
            }
        }
    }
    if topo.len() != n {
        return Err(Error::Scheduling("dependency cycle in simulated DAG".into()));
    }
    let mut end = vec![0.0f64; n];
    let mut device_free = vec![0.0f64; n_devices];
    let mut busy = vec![0.0f64; n_devices];
    let mut makespan = 0.0f64;
    for &i in &topo {
        let task = &tasks[i];
        let mut ready = device_free[task.device];
        for &(d, delay) in &task.deps {
            ready = ready.max(end[d] + delay);
        }
        let finish = ready + task.cost;
        end[i] = finish;
        device_free[task.device] = finish;
        busy[task.device] += task.cost;
        makespan = makespan.max(finish);
    }
    Ok((makespan, busy))
}

/// Parameter count of one stack layer (work-unit proxy for its step cost).
fn layer_units(cfg: &ModelConfig, side: Side, layer: usize) -> f64 {
    let name = format!("{}.l{layer}.", side.label());
    tensor_layout(cfg)
        .iter()
        .filter(|(n, _, _)| n.starts_with(&name))
        .map(|(_, _, shape)| shape.iter().product::<usize>() as f64)
        .sum()
}

fn attn_units(cfg: &ModelConfig) -> f64 {
    param_count(cfg).attn_softmax as f64
}

fn part_params(cfg: &ModelConfig, part: Part) -> f64 {
    let c = param_count(cfg);
    match part {
        Part::Embedding => c.embedding as f64,
        Part::LstmStack => c.lstm_stack as f64,
        Part::AttnSoftmax => c.attn_softmax as f64,
    }
}

const BACKWARD_FACTOR: f64 = 2.0;
const BYTES_PER_SCALAR: f64 = 4.0;

/// Builds the forward+backward+sync task DAG for one training step.
fn build_training_dag(
    plan: &PlacementPlan,
    schedule: &WavefrontSchedule,
    cfg: &ModelConfig,
    cost: &CostModel,
    batch: usize,
) -> Vec<SimTask> {
    let tau = cost.transfer_per_byte;
    let h = cfg.hidden_size as f64;
    let b = batch as f64;

    match plan.strategy {
        Strategy::Serial | Strategy::DataParallel => {
            // Replica chains: the full per-step work on a batch shard,
            // one device each, then one sync at the root (serial: none).
            let replicas = plan.n_devices;
            let shard = b / replicas as f64;
            let stack_units: f64 = (0..cfg.depth)
                .map(|l| layer_units(cfg, Side::Enc, l) + layer_units(cfg, Side::Dec, l))
                .sum();
            let fwd_units = (schedule.m + schedule.n_dec) as f64 / 2.0 * stack_units
                + schedule.n_dec as f64 * attn_units(cfg);
            let mut tasks = Vec::new();
            let mut last_ids = Vec::new();
            for d in 0..replicas {
                tasks.push(SimTask {
                    device: d,
                    cost: cost.compute_ticks(fwd_units, shard),
                    deps: vec![],
                });
                let fwd_id = tasks.len() - 1;
                tasks.push(SimTask {
                    device: d,
                    cost: cost.compute_ticks(fwd_units, shard) * BACKWARD_FACTOR,
                    deps: vec![(fwd_id, 0.0)],
                });
                last_ids.push(tasks.len() - 1);
            }
            if plan.strategy == Strategy::DataParallel {
                let total_params = param_count(cfg).total as f64;
                tasks.push(SimTask {
                    device: plan.root_device,
                    cost: cost.sync_per_param * total_params,
                    deps: last_ids.into_iter().map(|i| (i, 0.0)).collect(),
                });
            }
            tasks
        }
        Strategy::ModelParallel | Strategy::Hybrid | Strategy::HybridIF => {
            let n_attn = plan.attn_devices.len();
            let shards = split_ranges(batch, n_attn);
            // Forward stack tasks follow the schedule grid; attention
            // anchors (zero cost, on the state device) keep the schedule
            // edges simple and are expanded per worker below.
            let mut tasks: Vec<SimTask> = Vec::new();
            for task in schedule.tasks.iter() {
                let (device, cost_ticks) = match &task.kind {
                    TaskKind::Stack { side, layer, .. } => (
                        plan.device_of_layer(*layer),
                        cost.compute_ticks(layer_units(cfg, *side, *layer), b),
                    ),
                    TaskKind::Attn { .. } => (plan.state_device, 0.0),
                };
                let deps = task
                    .deps
                    .iter()
                    .map(|&d| {
                        let from_dev = match &schedule.tasks[d].kind {
                            TaskKind::Stack { layer, .. } => plan.device_of_layer(*layer),
                            TaskKind::Attn { .. } => plan.state_device,
                        };
                        let bytes = if from_dev == device {
                            0.0
                        } else {
                            b * h * BYTES_PER_SCALAR
                        };
                        (d, bytes * tau)
                    })
                    .collect();
                tasks.push(SimTask {
                    device,
                    cost: cost_ticks,
                    deps,
                });
            }
            let au = attn_units(cfg);
            let bulk = cfg.variant == Variant::NoInputFeeding;
            for (i, task) in schedule.tasks.clone().iter().enumerate() {
                let TaskKind::Attn { t } = task.kind else {
                    continue;
                };
                if bulk && t != 0 {
                    // One bulk phase-2 task per worker covers all steps.
                    continue;
                }
                let steps_covered = if bulk { schedule.n_dec as f64 } else { 1.0 };
                let anchor_deps: Vec<usize> = if bulk {
                    vec![
                        schedule
                            .task_index(&TaskKind::Stack {
                                side: Side::Dec,
                                t: schedule.n_dec - 1,
                                layer: schedule.depth - 1,
                            })
                            .unwrap(),
                        schedule
                            .task_index(&TaskKind::Stack {
                                side: Side::Enc,
                                t: schedule.m - 1,
                                layer: schedule.depth - 1,
                            })
                            .unwrap(),
                    ]
                } else {
                    schedule.tasks[i].deps.clone()
                };
                let mut worker_ids = Vec::new();
                for (w, range) in shards.iter().enumerate() {
                    let shard_b = range.len() as f64;
                    let dev = plan.attn_devices[w];
                    let deps = anchor_deps
                        .iter()
                        .map(|&d| {
                            let hop_bytes = if dev == plan.state_device {
                                0.0
                            } else {
                                shard_b * h * BYTES_PER_SCALAR * steps_covered
                            };
                            (d, hop_bytes * tau)
                        })
                        .collect();
                    tasks.push(SimTask {
                        device: dev,
                        cost: cost.compute_ticks(au * steps_covered, shard_b),
                        deps,
                    });
                    worker_ids.push(tasks.len() - 1);
                }
                // The anchor completes when every worker's rows are back.
                tasks[i].deps = worker_ids
                    .iter()
                    .map(|&wid| {
                        let wdev = tasks[wid].device;
                        let bytes = if wdev == plan.state_device {
                            0.0
                        } else {
                            b / n_attn as f64 * h * BYTES_PER_SCALAR
                        };
                        (wid, bytes * tau)
                    })
                    .collect();
            }
            // Backward mirror: a twin per task, reversed edges, 2x cost.
            let fwd_count = tasks.len();
            for i in 0..fwd_count {
                let t = tasks[i].clone();
                tasks.push(SimTask {
                    device: t.device,
                    cost: t.cost * BACKWARD_FACTOR,
                    deps: vec![(i, 0.0)],
                });
            }
            let mut reverse_edges = Vec::new();
            for i in 0..fwd_count {
                for &(d, delay) in &tasks[i].deps.clone() {
                    reverse_edges.push((fwd_count + d, fwd_count + i, delay));
                }
            }
            for (to, from, delay) in reverse_edges {
                tasks[to].deps.push((from, delay));
            }
            // Attention-softmax gradient reduction at the root (hybrid
            // family): part of the alternation dataflow, priced as byte
            // transfers of each worker's gradient shard. The per-param
            // sync rate models the full-model replica synchronization of
            // data parallelism and does not apply here.
            if n_attn > 1 {
                let attn_bytes = part_params(cfg, Part::AttnSoftmax) * BYTES_PER_SCALAR;
                let deps = (fwd_count..tasks.len())
                    .filter(|&i| {
                        tasks[i].cost > 0.0 && plan.attn_devices.contains(&tasks[i].device)
                    })
                    .map(|i| {
                        let bytes = if tasks[i].device == plan.root_device {
                            0.0
                        } else {
                            attn_bytes
                        };
                        (i, bytes * tau)
                    })
                    .collect();
                tasks.push(SimTask {
                    device: plan.root_device,
                    cost: 0.0,
                    deps,
                });
            }
            tasks
        }
    }
}

/// Event-queue simulation of one training step; honors all dependencies
/// and per-device seriality.
pub fn simulate(
    plan: &PlacementPlan,
    schedule: &WavefrontSchedule,
    cfg: &ModelConfig,
    cost: &CostModel,
    batch: usize,
    baseline_tokens_per_tick: Option<f64>,
) -> Result<SimReport> {
    cost.validate()?;
    let cap = cost.caps.cap(plan.strategy);
    if batch > cap {
        return Err(Error::Config(format!(
            "batch {batch} exceeds the {} memory cap {cap}",
            plan.strategy.as_str()
        )));
    }
    let tasks = build_training_dag(plan, schedule, cfg, cost, batch);
    let (makespan, busy) = run_des(&tasks, plan.n_devices)?;
    let tokens_per_tick = (batch * schedule.m) as f64 / makespan;
    let scaling = match baseline_tokens_per_tick {
        Some(base) => scaling_factor(tokens_per_tick, base)?,
        None => 1.0,
    };
    Ok(SimReport {
        strategy: plan.strategy,
        batch_size: batch,
        makespan,
        per_device_busy_fraction: busy.iter().map(|&x| x / makespan).collect(),
        tokens_per_tick,
        scaling_factor: scaling,
    })
}

/// Unit-cost encoder pipeline: M steps of a depth-L stack, one device per
/// layer, zero transfer cost. Returns (pipelined makespan, serial
/// makespan); the ratio is the classic M*L / (M+L-1) pipeline speedup.
pub fn encoder_pipeline_makespan(m: usize, depth: usize) -> Result<(f64, f64)> {
    if m == 0 || depth == 0 {
        return Err(Error::Config("pipeline needs m, depth >= 1".into()));
    }
    let mut tasks = Vec::with_capacity(m * depth);
    for t in 0..m {
        for layer in 0..depth {
            let mut deps = Vec::new();
            if t > 0 {
                deps.push(((t - 1) * depth + layer, 0.0));
            }
            if layer > 0 {
                deps.push((t * depth + layer - 1, 0.0));
            }
            tasks.push(SimTask {
                device: layer,
                cost: 1.0,
                deps,
            });
        }
    }
    let (makespan, _) = run_des(&tasks, depth)?;
    Ok((makespan, (m * depth) as f64))
}

/// Simulation scenario: model sizes and sequence lengths.
#[derive(Debug, Clone)]
pub struct SimScenario {
    pub cfg: ModelConfig,
    pub m: usize,
    pub n: usize,
}

impl SimScenario {
    /// Full-scale sizes (vocabulary 32K, embedding 512, hidden 1024,
    /// depth 4) with moderate sequence lengths.
    pub fn full_scale() -> Self {
        SimScenario {
            cfg: ModelConfig {
                vocab_size: 32000,
                embedding_size: 512,
                hidden_size: 1024,
                depth: 4,
                variant: Variant::InputFeeding,
                dropout: 0.0,
                precision: crate::model::Precision::F32,
            },
            m: 12,
            n: 12,
        }
    }

    fn cfg_for(&self, strategy: Strategy) -> ModelConfig {
        let mut cfg = self.cfg.clone();
        cfg.variant = match strategy {
            Strategy::Hybrid => Variant::NoInputFeeding,
            _ => Variant::InputFeeding,
        };
        cfg
    }
}

fn devices_for(strategy: Strategy) -> usize {
    match strategy {
        Strategy::Serial => 1,
        _ => 4,
    }
}

/// Simulates a strategy at its batch cap, scaled against the one-device
/// serial baseline under the same cost model.
pub fn strategy_sim(strategy: Strategy, scen: &SimScenario, cost: &CostModel) -> Result<SimReport> {
    let serial_cfg = scen.cfg_for(Strategy::Serial);
    let serial_plan = build_placement(Strategy::Serial, 1, &serial_cfg)?;
    let serial_sched = wavefront_order(scen.m, scen.n + 1, serial_cfg.depth, serial_cfg.variant);
    let base = simulate(
        &serial_plan,
        &serial_sched,
        &serial_cfg,
        cost,
        cost.caps.serial,
        None,
    )?;
    if strategy == Strategy::Serial {
        return Ok(base);
    }
    let cfg = scen.cfg_for(strategy);
    let plan = build_placement(strategy, devices_for(strategy), &cfg)?;
    let sched = wavefront_order(scen.m, scen.n + 1, cfg.depth, cfg.variant);
    simulate(
        &plan,
        &sched,
        &cfg,
        cost,
        cost.caps.cap(strategy),
        Some(base.tokens_per_tick),
    )
}

// ── Calibration ──────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CostParam {
    Compute,
    Transfer,
    Sync,
}

impl CostParam {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "compute" => Ok(CostParam::Compute),
            "transfer" => Ok(CostParam::Transfer),
            "sync" => Ok(CostParam::Sync),
            _ => Err(Error::Config(format!("unknown cost parameter `{s}`"))),
        }
    }
}

fn with_params(base: &CostModel, free: &[CostParam], values: &[f64]) -> CostModel {
    let mut m = *base;
    for (p, &v) in free.iter().zip(values) {
        match p {
            CostParam::Compute => m.compute_per_unit = v,
            CostParam::Transfer => m.transfer_per_byte = v,
            CostParam::Sync => m.sync_per_param = v,
        }
    }
    m
}

fn residual_of(model: &CostModel, targets: &[(Strategy, f64)], scen: &SimScenario) -> Result<f64> {
    let mut total = 0.0;
    for &(strategy, want) in targets {
        let got = strategy_sim(strategy, scen, model)?.scaling_factor;
        total += (got - want) * (got - want);
    }
    Ok(total)
}

/// Least-squares fit of the chosen cost scalars against measured scaling
/// factors, by iterated log-space grid refinement. Returns the fitted
/// model and the squared-error residual.
///
/// Scaling factors are ratios of makespans, and every makespan is
/// homogeneous of degree one in (compute, transfer, sync), so fitting all
/// three at once is singular; fix at least one (compute is the
/// conventional unit).
pub fn calibrate(
    base: &CostModel,
    free: &[CostParam],
    targets: &[(Strategy, f64)],
    scen: &SimScenario,
) -> Result<(CostModel, f64)> {
    if free.is_empty() {
        let r = residual_of(base, targets, scen)?;
        return Ok((*base, r));
    }
    if targets.len() < free.len() {
        return Err(Error::Calibration(format!(
            "{} free parameters but only {} targets (singular system)",
            free.len(),
            targets.len()
        )));
    }
    if free.len() >= 3 {
        return Err(Error::Calibration(
            "compute, transfer and sync cannot all be free: scaling factors are \
             invariant under jointly scaling them (singular system)"
                .into(),
        ));
    }
    let dims = free.len();
    // Log-space grid, refined around the incumbent each round.
    let mut lo = vec![-9.0f64; dims];
    let mut hi = vec![6.0f64; dims];
    let points = 13usize;
    let mut best_vals = vec![0.0f64; dims];
    let mut best_res = f64::INFINITY;
    for _round in 0..14 {
        let axis: Vec<Vec<f64>> = (0..dims)
            .map(|k| {
                (0..points)
                    .map(|i| lo[k] + (hi[k] - lo[k]) * i as f64 / (points - 1) as f64)
                    .collect()
            })
            .collect();
        let mut best_idx = vec![0usize; dims];
        let mut round_best = f64::INFINITY;
        let mut idx = vec![0usize; dims];
        loop {
            let vals: Vec<f64> = (0..dims).map(|k| 10f64.powf(axis[k][idx[k]])).collect();
            let model = with_params(base, free, &vals);
            let r = residual_of(&model, targets, scen)?;
            if r < round_best {
                round_best = r;
                best_idx = idx.clone();
            }
            // Odometer increment over the grid.
            let mut k = 0;
            loop {
                if k == dims {
                    break;
                }
                idx[k] += 1;
                if idx[k] < points {
                    break;
                }
                idx[k] = 0;
                k += 1;
            }
            if k == dims {
                break;
            }
        }
        if round_best < best_res {
            best_res = round_best;
            best_vals = (0..dims)
                .map(|k| 10f64.powf(axis[k][best_idx[k]]))
                .collect();
        }
        for k in 0..dims {
            let step = (hi[k] - lo[k]) / (points - 1) as f64;
            let center = axis[k][best_idx[k]];
            lo[k] = center - step;
            hi[k] = center + step;
        }
    }
    let model = with_params(base, free, &best_vals);
    Ok((model, best_res))
}
