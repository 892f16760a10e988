//! The wavefront strategy family: model-parallel (attention on the state
//! device) and hybrid (attention data-parallel over all devices), each with
//! or without input-feeding.
//!
//! No central scheduler: the wavefront emerges from dataflow. Each device
//! loops over steps, blocking on the activation from the layer below; with
//! no input-feeding both encoder and decoder pipeline diagonally, while
//! input-feeding routes each decoder step through attention before the
//! next step's first layer, which serializes the decoder exactly as the
//! extra schedule edge says it must.
//!
//! Backward runs the same dataflow mirrored. Every device sweeps its tape
//! one task segment at a time, so gradients accumulate in exactly the
//! order a single-tape backward would produce.

use super::device::{make_mesh, Device, Payload};
use super::exec::{allreduce_grads, merge_outputs, DeviceOut, StrategyOutput};
use super::plan::{split_ranges, PlacementPlan};
use crate::autograd::{GradientSet, NodeId, Tape};
use crate::error::{Error, Result};
use crate::model::graph::{
    apply_dropout, attention_sentence_loss, attention_step, carry_mask_leaves, register_attn,
    register_embedding, register_layers, stack_step, AttnNodes, Batch, LayerNodes, Side, StepCtx,
};
use crate::model::{ModelConfig, ModelParams, Variant};
use crate::tensor::{Scalar, Tensor};
use crate::vocab::EOS;
use std::collections::BTreeMap;
use std::ops::Range;
use std::time::Duration;

pub(crate) fn run<S: Scalar>(
    plan: &PlacementPlan,
    params: &ModelParams<S>,
    batch: &Batch,
    cfg: &ModelConfig,
    ctx: &StepCtx,
) -> Result<StrategyOutput<S>> {
    let mesh = make_mesh::<S>(plan.n_devices, Duration::from_millis(plan.timeout_ms));
    let outs: Vec<Result<DeviceOut<S>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = mesh
            .into_iter()
            .map(|dev| {
                scope.spawn(move || -> Result<DeviceOut<S>> {
                    let mut worker = Worker::new(dev, plan, params, batch, cfg, ctx);
                    worker.run()?;
                    Ok(worker.finish())
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

#[derive(Debug, Clone, Copy)]
struct TaskRec {
    seg: (usize, usize),
    out_h: NodeId,
    x_leaf: Option<NodeId>,
}

/// Attention-worker tape state (one shard of sentences).
struct AttnState<S: Scalar> {
    tape: Tape<S>,
    nodes: AttnNodes,
    /// Per local sentence: the S leaf.
    s_leaves: Vec<NodeId>,
    /// Bulk mode: per local sentence H leaf. Stepwise mode: per step h leaf.
    h_leaves: Vec<NodeId>,
    /// Stepwise mode: per step attentional-hidden-state node.
    hc_nodes: Vec<NodeId>,
    /// Per sentence (bulk) or per step (stepwise) loss node.
    loss_nodes: Vec<NodeId>,
    /// Stepwise mode: per step tape segment.
    segs: Vec<(usize, usize)>,
}

struct Worker<'a, S: Scalar> {
    dev: Device<S>,
    plan: &'a PlacementPlan,
    params: &'a ModelParams<S>,
    batch: &'a Batch,
    cfg: &'a ModelConfig,
    ctx: &'a StepCtx,
    owned: Vec<usize>,
    /// (worker index among attention devices, sentence rows) if this
    /// device shares the attention-softmax work.
    attn_role: Option<(usize, Range<usize>)>,
    shard_ranges: Vec<Range<usize>>,

    tape: Tape<S>,
    src_emb: Option<NodeId>,
    tgt_emb: Option<NodeId>,
    enc_layers: Vec<LayerNodes>,
    dec_layers: Vec<LayerNodes>,
    enc_state: Vec<(NodeId, NodeId)>,
    dec_state: Vec<(NodeId, NodeId)>,
    tasks: BTreeMap<(u64, usize, usize), TaskRec>,
    /// Input-feeding, embedding device: per decoder step, the leaf holding
    /// the previous step's attentional hidden state.
    hc_leaves: Vec<Option<NodeId>>,

    attn: Option<AttnState<S>>,
    enc_tops: Vec<Tensor<S>>,
    dec_tops: Vec<Tensor<S>>,

    out: Option<(f64, usize, GradientSet<S>)>,
}

fn sentence_targets(batch: &Batch, b: usize) -> Vec<usize> {
    let n = batch.tgt_lens[b];
    (0..n + 1)
        .map(|t| if t < n { batch.tgt[b][t] } else { EOS })
        .collect()
}

impl<'a, S: Scalar> Worker<'a, S> {
    fn new(
        dev: Device<S>,
        plan: &'a PlacementPlan,
        params: &'a ModelParams<S>,
        batch: &'a Batch,
        cfg: &'a ModelConfig,
        ctx: &'a StepCtx,
    ) -> Self {
        let owned = plan.layers_of(dev.id);
        let shard_ranges = split_ranges(batch.len(), plan.attn_devices.len());
        let attn_role = plan.attn_devices.iter().position(|&d| d == dev.id).map(|w| {
            let rows = shard_ranges.get(w).cloned().unwrap_or(0..0);
            (w, rows)
        });
        let mut tape = Tape::new();
        let (src_emb, tgt_emb) = if !owned.is_empty() && owned[0] == 0 {
            (
                Some(register_embedding(&mut tape, params, Side::Enc)),
                Some(register_embedding(&mut tape, params, Side::Dec)),
            )
        } else {
            (None, None)
        };
        let enc_layers = owned
            .iter()
            .flat_map(|&l| register_layers(&mut tape, params, cfg, Side::Enc, l..l + 1))
            .collect();
        let dec_layers = owned
            .iter()
            .flat_map(|&l| register_layers(&mut tape, params, cfg, Side::Dec, l..l + 1))
            .collect();
        let hc_leaves = vec![None; batch.dec_steps];
        Worker {
            dev,
            plan,
            params,
            batch,
            cfg,
            ctx,
            owned,
            attn_role,
            shard_ranges,
            tape,
            src_emb,
            tgt_emb,
            enc_layers,
            dec_layers,
            enc_state: Vec::new(),
            dec_state: Vec::new(),
            tasks: BTreeMap::new(),
            hc_leaves,
            attn: None,
            enc_tops: Vec::new(),
            dec_tops: Vec::new(),
            out: None,
        }
    }

    fn is_state(&self) -> bool {
        self.dev.id == self.plan.state_device
    }

    fn is_root(&self) -> bool {
        self.dev.id == self.plan.root_device
    }

    fn steps(&self, side: Side) -> usize {
        match side {
            Side::Enc => self.batch.src_steps,
            Side::Dec => self.batch.dec_steps,
        }
    }

    fn run(&mut self) -> Result<()> {
        for t in 0..self.steps(Side::Enc) {
            self.forward_stack_step(Side::Enc, t)?;
        }
        self.state_collect(Side::Enc)?;

        match self.cfg.variant {
            Variant::NoInputFeeding => {
                for t in 0..self.steps(Side::Dec) {
                    self.forward_stack_step(Side::Dec, t)?;
                }
                self.state_collect(Side::Dec)?;
                self.state_scatter_bulk()?;
                self.attn_bulk()?;
                self.state_stream_dtop_bulk()?;
                for t in (0..self.steps(Side::Dec)).rev() {
                    self.backward_stack_step(Side::Dec, t)?;
                }
            }
            Variant::InputFeeding => {
                self.state_scatter_s()?;
                self.attn_prepare_stepwise()?;
                for t in 0..self.steps(Side::Dec) {
                    self.forward_stack_step(Side::Dec, t)?;
                    self.state_route_h(t)?;
                    self.attn_forward_step(t)?;
                }
                for t in (0..self.steps(Side::Dec)).rev() {
                    self.attn_backward_step(t)?;
                    self.state_route_dh(t)?;
                    self.backward_stack_step(Side::Dec, t)?;
                }
                self.attn_finish_stepwise()?;
                self.state_stream_denc_stepwise()?;
            }
        }
        for t in (0..self.steps(Side::Enc)).rev() {
            self.backward_stack_step(Side::Enc, t)?;
        }
        self.send_stack_grads()?;
        self.root_reduce()
    }

    fn finish(mut self) -> DeviceOut<S> {
        DeviceOut {
            events: std::mem::take(&mut self.dev.events),
            result: self.out.take(),
        }
    }

    // ── Stack role ───────────────────────────────────────────────────

    fn forward_stack_step(&mut self, side: Side, t: usize) -> Result<()> {
        if self.owned.is_empty() {
            return Ok(());
        }
        let depth = self.cfg.depth;
        let b = self.batch.len();
        let lo = self.owned[0];
        if side == Side::Enc && t == 0 {
            let zero = self.tape.leaf(Tensor::zeros(&[b, self.cfg.hidden_size]));
            self.enc_state = self.owned.iter().map(|_| (zero, zero)).collect();
        }
        if side == Side::Dec && t == 0 {
            // Decoder initial state: the final encoder state per layer.
            self.dec_state = self.enc_state.clone();
        }

        // Input construction (embedding gather, dropout, input-feeding
        // concat, received-activation leaf) belongs to the first owned
        // layer's backward segment.
        let input_start = self.tape.len();
        let mut x_leaf = None;
        let mut x = if lo == 0 {
            let (emb_node, ids) = match side {
                Side::Enc => (self.src_emb.unwrap(), self.batch.src_ids_at(t)),
                Side::Dec => (self.tgt_emb.unwrap(), self.batch.dec_in_at(t)),
            };
            let g = self.tape.gather_rows(emb_node, &ids)?;
            let g = apply_dropout(&mut self.tape, self.ctx, self.cfg, side, t, 0, g)?;
            if side == Side::Dec && self.cfg.variant == Variant::InputFeeding {
                let hc_tensor = if t == 0 {
                    Tensor::zeros(&[b, self.cfg.hidden_size])
                } else {
                    // Assemble the previous step's attentional hidden
                    // state from the workers' shard rows.
                    let mut parts = Vec::with_capacity(self.shard_ranges.len());
                    for w in 0..self.shard_ranges.len() {
                        parts.push(self.dev.recv(&format!("hc:{w}:{}", t - 1))?.into_tensor()?);
                    }
                    let refs: Vec<&Tensor<S>> = parts.iter().collect();
                    Tensor::concat(&refs, 0)?
                };
                let hc_leaf = self.tape.leaf(hc_tensor);
                self.hc_leaves[t] = Some(hc_leaf);
                self.tape.concat(&[g, hc_leaf], 1)?
            } else {
                g
            }
        } else {
            let tensor = self
                .dev
                .recv(&format!("x:{}:{t}:{lo}", side.label()))?
                .into_tensor()?;
            let leaf = self.tape.leaf(tensor);
            x_leaf = Some(leaf);
            leaf
        };

        let carry = if side == Side::Enc {
            let (keep, drop) = carry_mask_leaves::<S>(&mut self.tape, &self.batch.src_keep_at(t));
            Some((keep, drop))
        } else {
            None
        };
        let layer_nodes = match side {
            Side::Enc => self.enc_layers.clone(),
            Side::Dec => self.dec_layers.clone(),
        };
        for (k, &gl) in self.owned.clone().iter().enumerate() {
            let seg_start = if k == 0 { input_start } else { self.tape.len() };
            let state = match side {
                Side::Enc => &mut self.enc_state,
                Side::Dec => &mut self.dec_state,
            };
            let mut slot = [state[k]];
            let tape = &mut self.tape;
            let cfg = self.cfg;
            let ctx = self.ctx;
            let ln = layer_nodes[k];
            let out = self
                .dev
                .compute(&format!("fwd:{}:t{t}:l{gl}", side.label()), || {
                    stack_step(tape, cfg, ctx, side, t, gl, &[ln], &mut slot, x, carry)
                })?;
            let state = match side {
                Side::Enc => &mut self.enc_state,
                Side::Dec => &mut self.dec_state,
            };
            state[k] = slot[0];
            let seg_end = self.tape.len();
            self.tasks.insert(
                (side.tag(), t, gl),
                TaskRec {
                    seg: (seg_start, seg_end),
                    out_h: out,
                    x_leaf: if k == 0 { x_leaf } else { None },
                },
            );
            x = out;
        }

        let hi = *self.owned.last().unwrap();
        let out_val = self.tape.value(x).clone();
        if hi == depth - 1 {
            self.dev.send(
                self.plan.state_device,
                &format!("top:{}:{t}", side.label()),
                Payload::Tensor(out_val),
            )?;
        } else {
            self.dev.send(
                self.plan.device_of_layer(hi + 1),
                &format!("x:{}:{t}:{}", side.label(), hi + 1),
                Payload::Tensor(out_val),
            )?;
        }
        Ok(())
    }

    fn backward_stack_step(&mut self, side: Side, t: usize) -> Result<()> {
        if self.owned.is_empty() {
            return Ok(());
        }
        let depth = self.cfg.depth;
        let lo = self.owned[0];
        let hi = *self.owned.last().unwrap();
        for &gl in self.owned.clone().iter().rev() {
            let rec = self.tasks[&(side.tag(), t, gl)];
            if gl == hi {
                let tag = if gl == depth - 1 {
                    format!("dtop:{}:{t}", side.label())
                } else {
                    format!("dx:{}:{t}:{gl}", side.label())
                };
                let g = self.dev.recv(&tag)?.into_tensor()?;
                self.tape.seed_grad(rec.out_h, g)?;
            }
            let tape = &mut self.tape;
            self.dev
                .compute(&format!("bwd:{}:t{t}:l{gl}", side.label()), || {
                    tape.sweep_range(rec.seg.0, rec.seg.1)
                })?;
        }
        let rec_lo = self.tasks[&(side.tag(), t, lo)];
        if lo > 0 {
            let dx = self
                .tape
                .grad_or_zeros(rec_lo.x_leaf.expect("received input leaf"));
            self.dev.send(
                self.plan.device_of_layer(lo - 1),
                &format!("dx:{}:{t}:{}", side.label(), lo - 1),
                Payload::Tensor(dx),
            )?;
        } else if side == Side::Dec && self.cfg.variant == Variant::InputFeeding && t > 0 {
            // Gradient of the previous step's attentional hidden state,
            // scattered back to the attention workers by shard rows.
            let dhc = self
                .tape
                .grad_or_zeros(self.hc_leaves[t].expect("hc leaf"));
            for (w, r) in self.shard_ranges.clone().iter().enumerate() {
                let slice = dhc.slice_rows(r.start, r.end)?;
                self.dev.send(
                    self.plan.attn_devices[w],
                    &format!("dhc:{w}:{}", t - 1),
                    Payload::Tensor(slice),
                )?;
            }
        }
        Ok(())
    }

    fn send_stack_grads(&mut self) -> Result<()> {
        if self.owned.is_empty() || self.is_root() {
            return Ok(());
        }
        let grads = self.tape.param_grads();
        self.dev.send(
            self.plan.root_device,
            &format!("grads:stack:{}", self.dev.id),
            Payload::Grads(grads),
        )
    }

    // ── State-owner role ─────────────────────────────────────────────

    fn state_collect(&mut self, side: Side) -> Result<()> {
        if !self.is_state() {
            return Ok(());
        }
        for t in 0..self.steps(side) {
            let top = self
                .dev
                .recv(&format!("top:{}:{t}", side.label()))?
                .into_tensor()?;
            match side {
                Side::Enc => self.enc_tops.push(top),
                Side::Dec => self.dec_tops.push(top),
            }
        }
        Ok(())
    }

    fn sentence_matrix(tops: &[Tensor<S>], b: usize, rows: usize, hdim: usize) -> Result<Tensor<S>> {
        let mut data = Vec::with_capacity(rows * hdim);
        for top in tops.iter().take(rows) {
            data.extend_from_slice(top.row(b));
        }
        Tensor::from_flat(&[rows, hdim], data)
    }

    /// Hybrid phase boundary: ship each worker its sentences' S and H.
    fn state_scatter_bulk(&mut self) -> Result<()> {
        if !self.is_state() {
            return Ok(());
        }
        let hdim = self.cfg.hidden_size;
        for (w, r) in self.shard_ranges.clone().iter().enumerate() {
            let mut payload = Vec::with_capacity(2 * r.len());
            for b in r.clone() {
                payload.push(Self::sentence_matrix(
                    &self.enc_tops,
                    b,
                    self.batch.src_lens[b],
                    hdim,
                )?);
            }
            for b in r.clone() {
                payload.push(Self::sentence_matrix(
                    &self.dec_tops,
                    b,
                    self.batch.tgt_lens[b] + 1,
                    hdim,
                )?);
            }
            self.dev.send(
                self.plan.attn_devices[w],
                &format!("attn:shard:{w}"),
                Payload::TensorList(payload),
            )?;
        }
        Ok(())
    }

    fn state_scatter_s(&mut self) -> Result<()> {
        if !self.is_state() {
            return Ok(());
        }
        let hdim = self.cfg.hidden_size;
        for (w, r) in self.shard_ranges.clone().iter().enumerate() {
            let mut payload = Vec::with_capacity(r.len());
            for b in r.clone() {
                payload.push(Self::sentence_matrix(
                    &self.enc_tops,
                    b,
                    self.batch.src_lens[b],
                    hdim,
                )?);
            }
            self.dev.send(
                self.plan.attn_devices[w],
                &format!("attn:s:{w}"),
                Payload::TensorList(payload),
            )?;
        }
        Ok(())
    }

    fn state_route_h(&mut self, t: usize) -> Result<()> {
        if !self.is_state() {
            return Ok(());
        }
        let top = self.dev.recv(&format!("top:dec:{t}"))?.into_tensor()?;
        for (w, r) in self.shard_ranges.clone().iter().enumerate() {
            let slice = top.slice_rows(r.start, r.end)?;
            self.dev.send(
                self.plan.attn_devices[w],
                &format!("attn:h:{w}:{t}"),
                Payload::Tensor(slice),
            )?;
        }
        self.dec_tops.push(top);
        Ok(())
    }

    fn state_route_dh(&mut self, t: usize) -> Result<()> {
        if !self.is_state() {
            return Ok(());
        }
        let mut parts = Vec::with_capacity(self.shard_ranges.len());
        for w in 0..self.shard_ranges.len() {
            parts.push(self.dev.recv(&format!("dh:{w}:{t}"))?.into_tensor()?);
        }
        let refs: Vec<&Tensor<S>> = parts.iter().collect();
        let dh = Tensor::concat(&refs, 0)?;
        self.dev.send(
            self.plan.device_of_layer(self.cfg.depth - 1),
            &format!("dtop:dec:{t}"),
            Payload::Tensor(dh),
        )?;
        Ok(())
    }

    /// Zero-padded per-step gradient matrix from per-sentence gradients.
    fn assemble_step(
        per_sentence: &BTreeMap<usize, Tensor<S>>,
        rows_of: impl Fn(usize) -> usize,
        t: usize,
        b_total: usize,
        hdim: usize,
    ) -> Result<Tensor<S>> {
        let mut data = vec![S::zero(); b_total * hdim];
        for (b, g) in per_sentence {
            if t < rows_of(*b) {
                data[b * hdim..(b + 1) * hdim].copy_from_slice(&g.row(t)[..hdim]);
            }
        }
        Tensor::from_flat(&[b_total, hdim], data)
    }

    fn state_stream_dtop_bulk(&mut self) -> Result<()> {
        if !self.is_state() {
            return Ok(());
        }
        let hdim = self.cfg.hidden_size;
        let b_total = self.batch.len();
        let mut ds: BTreeMap<usize, Tensor<S>> = BTreeMap::new();
        let mut dh: BTreeMap<usize, Tensor<S>> = BTreeMap::new();
        for (w, r) in self.shard_ranges.clone().iter().enumerate() {
            let list = self
                .dev
                .recv(&format!("attn:dstate:{w}"))?
                .into_tensor_list()?;
            let k = r.len();
            for (i, b) in r.clone().enumerate() {
                ds.insert(b, list[i].clone());
                dh.insert(b, list[k + i].clone());
            }
        }
        let top_dev = self.plan.device_of_layer(self.cfg.depth - 1);
        let tgt_lens = self.batch.tgt_lens.clone();
        for t in (0..self.steps(Side::Dec)).rev() {
            let g = Self::assemble_step(&dh, |b| tgt_lens[b] + 1, t, b_total, hdim)?;
            self.dev
                .send(top_dev, &format!("dtop:dec:{t}"), Payload::Tensor(g))?;
        }
        let src_lens = self.batch.src_lens.clone();
        for t in (0..self.steps(Side::Enc)).rev() {
            let g = Self::assemble_step(&ds, |b| src_lens[b], t, b_total, hdim)?;
            self.dev
                .send(top_dev, &format!("dtop:enc:{t}"), Payload::Tensor(g))?;
        }
        Ok(())
    }

    fn state_stream_denc_stepwise(&mut self) -> Result<()> {
        if !self.is_state() {
            return Ok(());
        }
        let hdim = self.cfg.hidden_size;
        let b_total = self.batch.len();
        let mut ds: BTreeMap<usize, Tensor<S>> = BTreeMap::new();
        for (w, r) in self.shard_ranges.clone().iter().enumerate() {
            let list = self.dev.recv(&format!("attn:ds:{w}"))?.into_tensor_list()?;
            for (i, b) in r.clone().enumerate() {
                ds.insert(b, list[i].clone());
            }
        }
        let top_dev = self.plan.device_of_layer(self.cfg.depth - 1);
        let src_lens = self.batch.src_lens.clone();
        for t in (0..self.steps(Side::Enc)).rev() {
            let g = Self::assemble_step(&ds, |b| src_lens[b], t, b_total, hdim)?;
            self.dev
                .send(top_dev, &format!("dtop:enc:{t}"), Payload::Tensor(g))?;
        }
        Ok(())
    }

    // ── Attention-worker role ────────────────────────────────────────

    fn zero_attn_grads(&self) -> GradientSet<S> {
        let mut gs = GradientSet::new();
        gs.insert("attn.w_alpha", Tensor::zeros(self.params.w_alpha.shape()));
        gs.insert("attn.w_c", Tensor::zeros(self.params.w_c.shape()));
        gs.insert("attn.out_w", Tensor::zeros(self.params.out_w.shape()));
        gs.insert("attn.out_b", Tensor::zeros(self.params.out_b.shape()));
        gs
    }

    /// Hybrid phase 2 without input-feeding: all steps' attention-softmax
    /// for this worker's sentences, forward and backward, in one go.
    fn attn_bulk(&mut self) -> Result<()> {
        let Some((w, rows)) = self.attn_role.clone() else {
            return Ok(());
        };
        let list = self
            .dev
            .recv(&format!("attn:shard:{w}"))?
            .into_tensor_list()?;
        let k = rows.len();
        let root = self.plan.root_device;
        let state_dev = self.plan.state_device;
        let mut loss_sum = 0.0f64;
        let mut tokens = 0usize;
        let (grads, dstate) = if k == 0 {
            (self.zero_attn_grads(), Vec::new())
        } else {
            let mut tape = Tape::new();
            let nodes = register_attn(&mut tape, self.params);
            let mut s_leaves = Vec::with_capacity(k);
            let mut h_leaves = Vec::with_capacity(k);
            let mut loss_nodes = Vec::with_capacity(k);
            let batch = self.batch;
            {
                let tape = &mut tape;
                let s_leaves = &mut s_leaves;
                let h_leaves = &mut h_leaves;
                let loss_nodes = &mut loss_nodes;
                let list = &list;
                let rows = rows.clone();
                self.dev.compute(&format!("attn:fwd:shard{w}"), move || {
                    for (i, b) in rows.enumerate() {
                        let s = tape.leaf(list[i].clone());
                        let h = tape.leaf(list[k + i].clone());
                        let tgt_out = sentence_targets(batch, b);
                        let loss = attention_sentence_loss(tape, &nodes, s, h, &tgt_out)?;
                        s_leaves.push(s);
                        h_leaves.push(h);
                        loss_nodes.push(loss);
                    }
                    Ok(())
                })?;
            }
            for (&loss, b) in loss_nodes.iter().zip(rows.clone()) {
                loss_sum += tape.value(loss).item().as_f64();
                tokens += self.batch.tgt_lens[b] + 1;
            }
            {
                let tape = &mut tape;
                let loss_nodes = &loss_nodes;
                self.dev.compute(&format!("attn:bwd:shard{w}"), move || {
                    for &l in loss_nodes {
                        let one = Tensor::from_flat(&[1, 1], vec![S::one()])?;
                        tape.seed_grad(l, one)?;
                    }
                    tape.sweep_range(0, tape.len())
                })?;
            }
            let mut dstate = Vec::with_capacity(2 * k);
            for &s in &s_leaves {
                dstate.push(tape.grad_or_zeros(s));
            }
            for &h in &h_leaves {
                dstate.push(tape.grad_or_zeros(h));
            }
            (tape.param_grads(), dstate)
        };
        self.dev
            .send(root, &format!("attn:grads:{w}"), Payload::Grads(grads))?;
        self.dev.send(
            root,
            &format!("attn:loss:{w}"),
            Payload::Scalars(vec![loss_sum, tokens as f64]),
        )?;
        self.dev.send(
            state_dev,
            &format!("attn:dstate:{w}"),
            Payload::TensorList(dstate),
        )?;
        Ok(())
    }

    /// Input-feeding: receive this worker's S shard and set up its tape.
    fn attn_prepare_stepwise(&mut self) -> Result<()> {
        let Some((w, rows)) = self.attn_role.clone() else {
            return Ok(());
        };
        let list = self.dev.recv(&format!("attn:s:{w}"))?.into_tensor_list()?;
        let mut tape = Tape::new();
        let nodes = register_attn(&mut tape, self.params);
        let s_leaves = list.into_iter().map(|t| tape.leaf(t)).collect();
        let _ = rows;
        self.attn = Some(AttnState {
            tape,
            nodes,
            s_leaves,
            h_leaves: Vec::new(),
            hc_nodes: Vec::new(),
            loss_nodes: Vec::new(),
            segs: Vec::new(),
        });
        Ok(())
    }

    /// Input-feeding: one decoder step's attention over this worker's rows.
    fn attn_forward_step(&mut self, t: usize) -> Result<()> {
        let Some((w, rows)) = self.attn_role.clone() else {
            return Ok(());
        };
        let h_shard = self
            .dev
            .recv(&format!("attn:h:{w}:{t}"))?
            .into_tensor()?;
        let emb_dev = self.plan.embedding_device();
        let hdim = self.cfg.hidden_size;
        let attn = self.attn.as_mut().expect("prepared");
        if rows.is_empty() {
            self.dev.send(
                emb_dev,
                &format!("hc:{w}:{t}"),
                Payload::Tensor(Tensor::zeros(&[0, hdim])),
            )?;
            return Ok(());
        }
        let tgt_all = self.batch.dec_out_at(t);
        let keep_all = self.batch.dec_keep_at(t);
        let tgt: Vec<usize> = rows.clone().map(|b| tgt_all[b]).collect();
        let keep: Vec<bool> = rows.clone().map(|b| keep_all[b]).collect();
        let seg_start = attn.tape.len();
        let (hc_node, loss_node) = {
            let tape = &mut attn.tape;
            let nodes = attn.nodes;
            let s_leaves = &attn.s_leaves;
            self.dev
                .compute(&format!("attn:fwd:t{t}:shard{w}"), move || {
                    let h_leaf = tape.leaf(h_shard);
                    let (hc, loss) = attention_step(tape, &nodes, s_leaves, h_leaf, &tgt, &keep)?;
                    Ok((h_leaf, hc, loss))
                })
                .map(|(h_leaf, hc, loss)| {
                    attn.h_leaves.push(h_leaf);
                    (hc, loss)
                })?
        };
        let seg_end = attn.tape.len();
        attn.hc_nodes.push(hc_node);
        attn.loss_nodes.push(loss_node);
        attn.segs.push((seg_start, seg_end));
        let hc_val = attn.tape.value(hc_node).clone();
        self.dev
            .send(emb_dev, &format!("hc:{w}:{t}"), Payload::Tensor(hc_val))?;
        Ok(())
    }

    fn attn_backward_step(&mut self, t: usize) -> Result<()> {
        let Some((w, rows)) = self.attn_role.clone() else {
            return Ok(());
        };
        let state_dev = self.plan.state_device;
        let hdim = self.cfg.hidden_size;
        // The last step's attentional state feeds nothing, so it has no
        // incoming gradient message.
        let dhc = if t + 1 < self.steps(Side::Dec) {
            Some(self.dev.recv(&format!("dhc:{w}:{t}"))?.into_tensor()?)
        } else {
            None
        };
        if rows.is_empty() {
            self.dev.send(
                state_dev,
                &format!("dh:{w}:{t}"),
                Payload::Tensor(Tensor::zeros(&[0, hdim])),
            )?;
            return Ok(());
        }
        let attn = self.attn.as_mut().expect("prepared");
        let seg = attn.segs[t];
        let h_leaf = attn.h_leaves[t];
        let hc_node = attn.hc_nodes[t];
        let loss_node = attn.loss_nodes[t];
        {
            let tape = &mut attn.tape;
            self.dev
                .compute(&format!("attn:bwd:t{t}:shard{w}"), move || {
                    let one = Tensor::from_flat(&[1, 1], vec![S::one()])?;
                    tape.seed_grad(loss_node, one)?;
                    if let Some(g) = dhc {
                        tape.seed_grad(hc_node, g)?;
                    }
                    tape.sweep_range(seg.0, seg.1)
                })?;
        }
        let dh = attn.tape.grad_or_zeros(h_leaf);
        self.dev
            .send(state_dev, &format!("dh:{w}:{t}"), Payload::Tensor(dh))?;
        Ok(())
    }

    fn attn_finish_stepwise(&mut self) -> Result<()> {
        let Some((w, rows)) = self.attn_role.clone() else {
            return Ok(());
        };
        let root = self.plan.root_device;
        let state_dev = self.plan.state_device;
        let (grads, ds, loss_sum, tokens) = match &self.attn {
            Some(attn) if !rows.is_empty() => {
                let ds: Vec<Tensor<S>> = attn
                    .s_leaves
                    .iter()
                    .map(|&s| attn.tape.grad_or_zeros(s))
                    .collect();
                let loss_sum: f64 = attn
                    .loss_nodes
                    .iter()
                    .map(|&l| attn.tape.value(l).item().as_f64())
                    .sum();
                let tokens: usize = rows.clone().map(|b| self.batch.tgt_lens[b] + 1).sum();
                (attn.tape.param_grads(), ds, loss_sum, tokens)
            }
            _ => (self.zero_attn_grads(), Vec::new(), 0.0, 0),
        };
        self.dev
            .send(state_dev, &format!("attn:ds:{w}"), Payload::TensorList(ds))?;
        self.dev
            .send(root, &format!("attn:grads:{w}"), Payload::Grads(grads))?;
        self.dev.send(
            root,
            &format!("attn:loss:{w}"),
            Payload::Scalars(vec![loss_sum, tokens as f64]),
        )?;
        Ok(())
    }

    // ── Root role ────────────────────────────────────────────────────

    fn root_reduce(&mut self) -> Result<()> {
        if !self.is_root() {
            return Ok(());
        }
        let n_workers = self.plan.attn_devices.len();
        let mut shard_grads = Vec::with_capacity(n_workers);
        let mut loss_total = 0.0f64;
        let mut token_total = 0usize;
        for w in 0..n_workers {
            shard_grads.push(self.dev.recv(&format!("attn:grads:{w}"))?.into_grads()?);
            let s = self.dev.recv(&format!("attn:loss:{w}"))?.into_scalars()?;
            loss_total += s[0];
            token_total += s[1] as usize;
        }
        let t0 = self.dev.tick();
        let attn_total = allreduce_grads(&shard_grads)?;
        let bytes: u64 = attn_total.iter().map(|(_, t)| t.bytes()).sum();
        self.dev.log_sync("sync:attn", t0, bytes);

        let mut stack_devices: Vec<usize> = self.plan.layer_to_device.clone();
        stack_devices.sort_unstable();
        stack_devices.dedup();
        let mut merged = GradientSet::new();
        for d in stack_devices {
            let g = if d == self.dev.id {
                self.tape.param_grads()
            } else {
                self.dev
                    .recv(&format!("grads:stack:{d}"))?
                    .into_grads()?
            };
            merged.merge_disjoint(g)?;
        }
        merged.merge_disjoint(attn_total)?;
        if token_total == 0 {
            return Err(Error::Empty("no target tokens in batch".into()));
        }
        merged.scale_in_place(S::from_f64(1.0 / token_total as f64));
        self.out = Some((loss_total / token_total as f64, token_total, merged));
        Ok(())
    }
}
