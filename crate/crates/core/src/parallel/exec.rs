//! Strategy execution: serial, data-parallel replication, and the
//! model-parallel / hybrid wavefront family.

use super::device::{make_mesh, Event, ExecTrace, Payload};
use super::plan::{scatter_batch, PlacementPlan, Strategy};
use super::wavefront;
use crate::autograd::GradientSet;
use crate::error::{Error, Result};
use crate::model::graph::{build_train_graph, Batch, StepCtx};
use crate::model::{ModelConfig, ModelParams};
use crate::tensor::Scalar;
use std::time::Duration;

/// Result of one forward-backward pass under any strategy.
pub struct StrategyOutput<S: Scalar> {
    /// Token-mean negative log-likelihood.
    pub loss_mean: f64,
    /// Non-PAD target tokens in the batch.
    pub token_count: usize,
    /// Token-mean gradients over the full parameter set.
    pub grads: GradientSet<S>,
    pub trace: ExecTrace,
}

/// Elementwise sum of gradient shards in fixed shard-index order.
pub fn allreduce_grads<S: Scalar>(shards: &[GradientSet<S>]) -> Result<GradientSet<S>> {
    let mut iter = shards.iter();
    let first = iter
        .next()
        .ok_or_else(|| Error::Empty("allreduce of zero shards".into()))?;
    let mut total = first.clone();
    for shard in iter {
        total.add_assign(shard)?;
    }
    Ok(total)
}

pub(crate) struct DeviceOut<S: Scalar> {
    pub events: Vec<Event>,
    pub result: Option<(f64, usize, GradientSet<S>)>,
}

pub(crate) fn merge_outputs<S: Scalar>(
    outs: Vec<DeviceOut<S>>,
    params: &ModelParams<S>,
) -> Result<StrategyOutput<S>> {
    let mut events = Vec::new();
    let mut result = None;
    for out in outs {
        events.extend(out.events);
        if out.result.is_some() {
            result = out.result;
        }
    }
    events.sort_by_key(|e| (e.device, e.start));
    let (loss_mean, token_count, grads) =
        result.ok_or_else(|| Error::Scheduling("no device produced a result".into()))?;
    let expected = params.visit().count();
    if grads.len() != expected {
        return Err(Error::GradientMismatch(format!(
            "gathered {} gradient tensors, model has {expected}",
            grads.len()
        )));
    }
    Ok(StrategyOutput {
        loss_mean,
        token_count,
        grads,
        trace: ExecTrace { events },
    })
}

/// Runs one forward-backward pass of `batch` under the plan's strategy.
///
/// Whatever the strategy, the returned loss and gradients match the serial
/// execution of the same (params, batch, seed) within floating-point
/// reordering tolerance.
pub fn run_strategy<S: Scalar>(
    plan: &PlacementPlan,
    params: &ModelParams<S>,
    batch: &Batch,
    cfg: &ModelConfig,
    ctx: &StepCtx,
) -> Result<StrategyOutput<S>> {
    plan.validate_for(cfg)?;
    batch.validate_ids(cfg.vocab_size)?;
    match plan.strategy {
        Strategy::Serial => run_serial(plan, params, batch, cfg, ctx),
        Strategy::DataParallel => run_data_parallel(plan, params, batch, cfg, ctx),
        Strategy::ModelParallel | Strategy::Hybrid | Strategy::HybridIF => {
            wavefront::run(plan, params, batch, cfg, ctx)
        }
    }
}

fn run_serial<S: Scalar>(
    plan: &PlacementPlan,
    params: &ModelParams<S>,
    batch: &Batch,
    cfg: &ModelConfig,
    ctx: &StepCtx,
) -> Result<StrategyOutput<S>> {
    let mut mesh = make_mesh::<S>(1, Duration::from_millis(plan.timeout_ms));
    let mut dev = mesh.pop().expect("one device");
    let mut graph = dev.compute("fwd", || build_train_graph(params, batch, cfg, ctx))?;
    let loss_mean = graph.tape.value(graph.loss_mean).item().as_f64();
    let mut grads = dev.compute("bwd", || graph.tape.backward(graph.loss_sum))?;
    grads.scale_in_place(S::from_f64(1.0 / graph.token_count as f64));
    merge_outputs(
        vec![DeviceOut {
            events: dev.events,
            result: Some((loss_mean, graph.token_count, grads)),
        }],
        params,
    )
}

fn run_data_parallel<S: Scalar>(
    plan: &PlacementPlan,
    params: &ModelParams<S>,
    batch: &Batch,
    cfg: &ModelConfig,
    ctx: &StepCtx,
) -> Result<StrategyOutput<S>> {
    let shards = scatter_batch(batch, plan.n_devices)?;
    let mesh = make_mesh::<S>(plan.n_devices, Duration::from_millis(plan.timeout_ms));
    let root = plan.root_device;
    let n = plan.n_devices;

    let outs: Vec<Result<DeviceOut<S>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = mesh
            .into_iter()
            .zip(&shards)
            .map(|(mut dev, (offset, shard))| {
                let ctx = ctx.with_row_offset(*offset);
                scope.spawn(move || -> Result<DeviceOut<S>> {
                    let d = dev.id;
                    let mut graph = dev.compute(&format!("fwd:replica{d}"), || {
                        build_train_graph(params, shard, cfg, &ctx)
                    })?;
                    let local = dev.compute(&format!("bwd:replica{d}"), || {
                        graph.tape.backward(graph.loss_sum)
                    })?;
                    let loss_sum = graph.tape.value(graph.loss_sum).item().as_f64();
                    let tokens = graph.token_count;
                    if d != root {
                        dev.send(root, &format!("grads:replica{d}"), Payload::Grads(local))?;
                        dev.send(
                            root,
                            &format!("loss:replica{d}"),
                            Payload::Scalars(vec![loss_sum, tokens as f64]),
                        )?;
                        // Synchronized replicas receive the reduced set.
                        let _ = dev.recv("grads:mean")?.into_grads()?;
                        return Ok(DeviceOut {
                            events: std::mem::take(&mut dev.events),
                            result: None,
                        });
                    }
                    // Root gathers in fixed replica order and reduces.
                    let mut shard_grads: Vec<GradientSet<S>> = Vec::with_capacity(n);
                    let mut loss_total = 0.0;
                    let mut token_total = 0usize;
                    for peer in 0..n {
                        if peer == d {
                            shard_grads.push(local.clone());
                            loss_total += loss_sum;
                            token_total += tokens;
                        } else {
                            shard_grads
                                .push(dev.recv(&format!("grads:replica{peer}"))?.into_grads()?);
                            let s = dev.recv(&format!("loss:replica{peer}"))?.into_scalars()?;
                            loss_total += s[0];
                            token_total += s[1] as usize;
                        }
                    }
                    let t0 = dev.tick();
                    let mut total = allreduce_grads(&shard_grads)?;
                    total.scale_in_place(S::from_f64(1.0 / token_total as f64));
                    let bytes: u64 = total.iter().map(|(_, t)| t.bytes()).sum();
                    dev.log_sync("sync:grads", t0, bytes);
                    for peer in 0..n {
                        if peer != d {
                            dev.send(peer, "grads:mean", Payload::Grads(total.clone()))?;
                        }
                    }
                    Ok(DeviceOut {
                        events: std::mem::take(&mut dev.events),
                        result: Some((loss_total / token_total as f64, token_total, total)),
                    })
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("device thread panicked"))
            .collect()
    });

    let outs: Vec<DeviceOut<S>> = outs.into_iter().collect::<Result<_>>()?;
    merge_outputs(outs, params)
}
