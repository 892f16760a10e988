//! Differentiable training graph: tape compositions of the encoder-decoder
//! stack, global attention and the token-level loss.
//!
//! The builders here are deliberately fine-grained — one LSTM step of one
//! layer span, one sentence's attention block — because the distributed
//! strategies replay exactly these pieces on per-device tapes. The serial
//! graph in [`build_train_graph`] is the composition of the same pieces on
//! a single tape, which is what makes cross-strategy gradient equivalence
//! an achievable invariant rather than a hope.

use super::config::{ModelConfig, Variant};
use super::params::ModelParams;
use crate::autograd::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};
use crate::vocab::{BOS, PAD};

/// Encoder or decoder side; also keys dropout sites.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Side {
    Enc,
    Dec,
}

impl Side {
    pub fn tag(self) -> u64 {
        match self {
            Side::Enc => 0x45,
            Side::Dec => 0x44,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Side::Enc => "enc",
            Side::Dec => "dec",
        }
    }
}

/// Per-step context: where the dropout masks come from.
#[derive(Debug, Clone)]
pub struct StepCtx {
    pub seed: u64,
    /// Training batch counter; masks change every step.
    pub step: u64,
    /// Dropout only applies in training mode.
    pub train: bool,
    /// Global index of this batch's row 0 (nonzero on data-parallel
    /// shards), so per-row masks are identical however the batch is split.
    pub row_offset: usize,
}

impl StepCtx {
    pub fn eval(seed: u64) -> Self {
        StepCtx {
            seed,
            step: 0,
            train: false,
            row_offset: 0,
        }
    }

    pub fn train(seed: u64, step: u64) -> Self {
        StepCtx {
            seed,
            step,
            train: true,
            row_offset: 0,
        }
    }

    pub fn with_row_offset(&self, row_offset: usize) -> Self {
        StepCtx {
            row_offset,
            ..self.clone()
        }
    }
}

/// One mini-batch of id sequences plus its derived step/padding views.
#[derive(Debug, Clone)]
pub struct Batch {
    pub src: Vec<Vec<usize>>,
    pub tgt: Vec<Vec<usize>>,
    pub src_lens: Vec<usize>,
    pub tgt_lens: Vec<usize>,
    /// Max source length (encoder steps).
    pub src_steps: usize,
    /// Max target length + 1 (decoder steps, BOS-shifted, EOS-terminated).
    pub dec_steps: usize,
    /// Total non-PAD target prediction slots: sum of (N_b + 1).
    pub target_tokens: usize,
    /// Total non-PAD source tokens.
    pub src_tokens: usize,
}

impl Batch {
    pub fn new(src: Vec<Vec<usize>>, tgt: Vec<Vec<usize>>) -> Result<Batch> {
        if src.len() != tgt.len() {
            return Err(Error::Config(format!(
                "batch sides differ: {} vs {} sentences",
                src.len(),
                tgt.len()
            )));
        }
        if src.is_empty() {
            return Err(Error::Empty("batch".into()));
        }
        if src.iter().any(|s| s.is_empty()) {
            return Err(Error::Empty(
                "source sentence with zero tokens in batch".into(),
            ));
        }
        let src_lens: Vec<usize> = src.iter().map(|s| s.len()).collect();
        let tgt_lens: Vec<usize> = tgt.iter().map(|s| s.len()).collect();
        let src_steps = *src_lens.iter().max().unwrap();
        let dec_steps = *tgt_lens.iter().max().unwrap() + 1;
        let target_tokens = tgt_lens.iter().map(|&n| n + 1).sum();
        let src_tokens = src_lens.iter().sum();
        Ok(Batch {
            src,
            tgt,
            src_lens,
            tgt_lens,
            src_steps,
            dec_steps,
            target_tokens,
            src_tokens,
        })
    }

    pub fn len(&self) -> usize {
        self.src.len()
    }

    pub fn is_empty(&self) -> bool {
        self.src.is_empty()
    }

    /// Sub-batch over sentence rows `[from, to)`.
    pub fn slice(&self, from: usize, to: usize) -> Result<Batch> {
        Batch::new(self.src[from..to].to_vec(), self.tgt[from..to].to_vec())
    }

    pub fn src_ids_at(&self, t: usize) -> Vec<usize> {
        self.src
            .iter()
            .map(|s| if t < s.len() { s[t] } else { PAD })
            .collect()
    }

    /// Decoder input ids at step `t`: BOS at step 0, then target tokens.
    pub fn dec_in_at(&self, t: usize) -> Vec<usize> {
        self.tgt
            .iter()
            .map(|s| {
                if t == 0 {
                    BOS
                } else if t - 1 < s.len() {
                    s[t - 1]
                } else {
                    PAD
                }
            })
            .collect()
    }

    /// Decoder target ids at step `t`: target tokens, then EOS, then PAD.
    pub fn dec_out_at(&self, t: usize) -> Vec<usize> {
        self.tgt
            .iter()
            .map(|s| {
                if t < s.len() {
                    s[t]
                } else if t == s.len() {
                    crate::vocab::EOS
                } else {
                    PAD
                }
            })
            .collect()
    }

    /// True where decoder step `t` is a real prediction slot.
    pub fn dec_keep_at(&self, t: usize) -> Vec<bool> {
        self.tgt_lens.iter().map(|&n| t < n + 1).collect()
    }

    /// True where encoder step `t` is a real source token.
    pub fn src_keep_at(&self, t: usize) -> Vec<bool> {
        self.src_lens.iter().map(|&m| t < m).collect()
    }

    pub fn validate_ids(&self, vocab: usize) -> Result<()> {
        for s in self.src.iter().chain(&self.tgt) {
            for &id in s {
                if id >= vocab {
                    return Err(Error::TokenOutOfRange { id, vocab });
                }
            }
        }
        Ok(())
    }
}

/// Tape node ids of one LSTM layer's parameters.
#[derive(Debug, Clone, Copy)]
pub struct LayerNodes {
    pub wx: NodeId,
    pub wh: NodeId,
    pub bias: NodeId,
    pub hidden: usize,
}

/// Tape node ids of the attention-softmax parameters.
#[derive(Debug, Clone, Copy)]
pub struct AttnNodes {
    pub w_alpha: NodeId,
    pub w_c: NodeId,
    pub out_w: NodeId,
    pub out_b: NodeId,
}

/// Registers one side's embedding on a tape under its canonical name.
pub fn register_embedding<S: Scalar>(
    tape: &mut Tape<S>,
    params: &ModelParams<S>,
    side: Side,
) -> NodeId {
    match side {
        Side::Enc => tape.param("emb.src", params.src_embedding.clone()),
        Side::Dec => tape.param("emb.tgt", params.tgt_embedding.clone()),
    }
}

/// Registers a contiguous span of one side's LSTM layers.
pub fn register_layers<S: Scalar>(
    tape: &mut Tape<S>,
    params: &ModelParams<S>,
    cfg: &ModelConfig,
    side: Side,
    layer_range: std::ops::Range<usize>,
) -> Vec<LayerNodes> {
    let stack = match side {
        Side::Enc => &params.encoder,
        Side::Dec => &params.decoder,
    };
    layer_range
        .map(|l| {
            let p = &stack[l];
            LayerNodes {
                wx: tape.param(format!("{}.l{l}.wx", side.label()), p.wx.clone()),
                wh: tape.param(format!("{}.l{l}.wh", side.label()), p.wh.clone()),
                bias: tape.param(format!("{}.l{l}.b", side.label()), p.bias.clone()),
                hidden: cfg.hidden_size,
            }
        })
        .collect()
}

pub fn register_attn<S: Scalar>(tape: &mut Tape<S>, params: &ModelParams<S>) -> AttnNodes {
    AttnNodes {
        w_alpha: tape.param("attn.w_alpha", params.w_alpha.clone()),
        w_c: tape.param("attn.w_c", params.w_c.clone()),
        out_w: tape.param("attn.out_w", params.out_w.clone()),
        out_b: tape.param("attn.out_b", params.out_b.clone()),
    }
}

/// One LSTM step on the tape; returns (h, c) nodes.
pub fn lstm_step<S: Scalar>(
    tape: &mut Tape<S>,
    layer: &LayerNodes,
    x: NodeId,
    h_prev: NodeId,
    c_prev: NodeId,
) -> Result<(NodeId, NodeId)> {
    let h = layer.hidden;
    let xg = tape.matmul(x, layer.wx)?;
    let hg = tape.matmul(h_prev, layer.wh)?;
    let pre = tape.add(xg, hg)?;
    let gates = tape.add_row(pre, layer.bias)?;
    let i_pre = tape.slice_cols(gates, 0, h)?;
    let f_pre = tape.slice_cols(gates, h, 2 * h)?;
    let g_pre = tape.slice_cols(gates, 2 * h, 3 * h)?;
    let o_pre = tape.slice_cols(gates, 3 * h, 4 * h)?;
    let i = tape.sigmoid(i_pre)?;
    let f = tape.sigmoid(f_pre)?;
    let g = tape.tanh(g_pre)?;
    let o = tape.sigmoid(o_pre)?;
    let fc = tape.mul(f, c_prev)?;
    let ig = tape.mul(i, g)?;
    let c = tape.add(fc, ig)?;
    let ct = tape.tanh(c)?;
    let h_out = tape.mul(o, ct)?;
    Ok((h_out, c))
}

/// Inverted-dropout mask for `rows x width`, seeded purely by
/// (seed, step, side, t, layer, global row index).
pub fn dropout_mask<S: Scalar>(
    ctx: &StepCtx,
    side: Side,
    t: usize,
    layer: usize,
    rows: usize,
    width: usize,
    rate: f64,
) -> Tensor<S> {
    let keep_scale = S::from_f64(1.0 / (1.0 - rate));
    let mut data = Vec::with_capacity(rows * width);
    for r in 0..rows {
        let mut rng = Rng::for_site(
            ctx.seed,
            &[
                0xD0,
                ctx.step,
                side.tag(),
                t as u64,
                layer as u64,
                (ctx.row_offset + r) as u64,
            ],
        );
        for _ in 0..width {
            if rng.next_f64() < rate {
                data.push(S::zero());
            } else {
                data.push(keep_scale);
            }
        }
    }
    Tensor::from_flat(&[rows, width], data).expect("mask shape")
}

/// Applies dropout to a node if the context calls for it.
pub fn apply_dropout<S: Scalar>(
    tape: &mut Tape<S>,
    ctx: &StepCtx,
    cfg: &ModelConfig,
    side: Side,
    t: usize,
    layer: usize,
    x: NodeId,
) -> Result<NodeId> {
    if !ctx.train || cfg.dropout == 0.0 {
        return Ok(x);
    }
    let shape = tape.value(x).shape().to_vec();
    let mask = dropout_mask::<S>(ctx, side, t, layer, shape[0], shape[1], cfg.dropout);
    let m = tape.leaf(mask);
    tape.mul(x, m)
}

/// Carry gate: keeps `new` rows where the step is real, `old` rows where it
/// is padding, so encoder states of short sentences ignore PAD steps.
pub fn carry_rows<S: Scalar>(
    tape: &mut Tape<S>,
    new: NodeId,
    old: NodeId,
    keep: NodeId,
    drop: NodeId,
) -> Result<NodeId> {
    let kept = tape.mul_col(new, keep)?;
    let dropped = tape.mul_col(old, drop)?;
    tape.add(kept, dropped)
}

/// Keep/drop column leaves for an encoder step.
pub fn carry_mask_leaves<S: Scalar>(
    tape: &mut Tape<S>,
    keep_rows: &[bool],
) -> (NodeId, NodeId) {
    let b = keep_rows.len();
    let keep: Vec<S> = keep_rows
        .iter()
        .map(|&k| if k { S::one() } else { S::zero() })
        .collect();
    let drop: Vec<S> = keep_rows
        .iter()
        .map(|&k| if k { S::zero() } else { S::one() })
        .collect();
    let keep = tape.leaf(Tensor::from_flat(&[b, 1], keep).expect("mask"));
    let drop = tape.leaf(Tensor::from_flat(&[b, 1], drop).expect("mask"));
    (keep, drop)
}

/// One wavefront task: step `t` through a contiguous span of layers.
///
/// `state` holds (h, c) per owned layer and is updated in place;
/// `global_layer0` is the stack-global index of `layers[0]` (dropout sites
/// and layer-input widths depend on it). Returns the top owned layer's
/// output node. `carry` must be set for encoder steps.
#[allow(clippy::too_many_arguments)]
pub fn stack_step<S: Scalar>(
    tape: &mut Tape<S>,
    cfg: &ModelConfig,
    ctx: &StepCtx,
    side: Side,
    t: usize,
    global_layer0: usize,
    layers: &[LayerNodes],
    state: &mut [(NodeId, NodeId)],
    x_in: NodeId,
    carry: Option<(NodeId, NodeId)>,
) -> Result<NodeId> {
    debug_assert_eq!(layers.len(), state.len());
    let mut x = x_in;
    for (k, layer) in layers.iter().enumerate() {
        let gl = global_layer0 + k;
        if gl > 0 {
            // Inter-layer dropout: input of every non-bottom layer.
            x = apply_dropout(tape, ctx, cfg, side, t, gl, x)?;
        }
        let (h_prev, c_prev) = state[k];
        let (mut h, mut c) = lstm_step(tape, layer, x, h_prev, c_prev)?;
        if let Some((keep, drop)) = carry {
            h = carry_rows(tape, h, h_prev, keep, drop)?;
            c = carry_rows(tape, c, c_prev, keep, drop)?;
        }
        state[k] = (h, c);
        x = h;
    }
    Ok(x)
}

/// Bulk attention and token-summed loss for one sentence (all decoder
/// steps at once; the no-input-feeding path and hybrid phase 2).
pub fn attention_sentence_loss<S: Scalar>(
    tape: &mut Tape<S>,
    attn: &AttnNodes,
    s_b: NodeId,
    h_b: NodeId,
    tgt_out: &[usize],
) -> Result<NodeId> {
    let hw = tape.matmul(h_b, attn.w_alpha)?;
    let st = tape.transpose(s_b)?;
    let scores = tape.matmul(hw, st)?;
    let alpha = tape.softmax_rows(scores)?;
    let ctx = tape.matmul(alpha, s_b)?;
    let hc_in = tape.concat(&[h_b, ctx], 1)?;
    let hc_pre = tape.matmul(hc_in, attn.w_c)?;
    let hc = tape.tanh(hc_pre)?;
    let logits_pre = tape.matmul(hc, attn.out_w)?;
    let logits = tape.add_row(logits_pre, attn.out_b)?;
    let ce = tape.cross_entropy_rows(logits, tgt_out)?;
    tape.sum_all(ce)
}

/// Stepwise attention for input-feeding: one decoder step over the whole
/// batch. Returns the attentional hidden state `H_c` (fed to the next
/// step's first layer) and the step's masked token-summed loss.
pub fn attention_step<S: Scalar>(
    tape: &mut Tape<S>,
    attn: &AttnNodes,
    s_sent: &[NodeId],
    h_t: NodeId,
    tgt_out_t: &[usize],
    keep_t: &[bool],
) -> Result<(NodeId, NodeId)> {
    let b = s_sent.len();
    let mut hc_rows = Vec::with_capacity(b);
    for (bi, &s_b) in s_sent.iter().enumerate() {
        let h_row = tape.gather_rows(h_t, &[bi])?;
        let hw = tape.matmul(h_row, attn.w_alpha)?;
        let st = tape.transpose(s_b)?;
        let scores = tape.matmul(hw, st)?;
        let alpha = tape.softmax_rows(scores)?;
        let ctx = tape.matmul(alpha, s_b)?;
        let hc_in = tape.concat(&[h_row, ctx], 1)?;
        let hc_pre = tape.matmul(hc_in, attn.w_c)?;
        hc_rows.push(tape.tanh(hc_pre)?);
    }
    let hc_t = tape.concat(&hc_rows, 0)?;
    let logits_pre = tape.matmul(hc_t, attn.out_w)?;
    let logits = tape.add_row(logits_pre, attn.out_b)?;
    let ce = tape.cross_entropy_rows(logits, tgt_out_t)?;
    let (keep, _) = carry_mask_leaves::<S>(tape, keep_t);
    let masked = tape.mul_col(ce, keep)?;
    let loss = tape.sum_all(masked)?;
    Ok((hc_t, loss))
}

/// A fully-built serial training graph.
pub struct TrainGraph<S: Scalar> {
    pub tape: Tape<S>,
    /// Token-summed NLL over the whole batch.
    pub loss_sum: NodeId,
    /// Token-mean NLL (the training criterion).
    pub loss_mean: NodeId,
    pub token_count: usize,
    /// Per-step top-layer encoder outputs (B x H each).
    pub enc_top: Vec<NodeId>,
    /// Per-step top-layer decoder outputs (B x H each).
    pub dec_top: Vec<NodeId>,
    /// Per-sentence encoder state matrices (M_b x H).
    pub s_sent: Vec<NodeId>,
    /// Per-sentence decoder state matrices, no-input-feeding only.
    pub h_sent: Vec<NodeId>,
}

/// Builds the whole forward graph for one batch on a single tape.
pub fn build_train_graph<S: Scalar>(
    params: &ModelParams<S>,
    batch: &Batch,
    cfg: &ModelConfig,
    ctx: &StepCtx,
) -> Result<TrainGraph<S>> {
    cfg.validate()?;
    batch.validate_ids(cfg.vocab_size)?;
    let mut tape = Tape::new();
    let b = batch.len();
    let hdim = cfg.hidden_size;

    // ── Encoder ──────────────────────────────────────────────────────
    let src_emb = register_embedding(&mut tape, params, Side::Enc);
    let enc_layers = register_layers(&mut tape, params, cfg, Side::Enc, 0..cfg.depth);
    let zero_state = tape.leaf(Tensor::zeros(&[b, hdim]));
    let mut enc_state: Vec<(NodeId, NodeId)> =
        (0..cfg.depth).map(|_| (zero_state, zero_state)).collect();
    let mut enc_top = Vec::with_capacity(batch.src_steps);
    for t in 0..batch.src_steps {
        let ids = batch.src_ids_at(t);
        let x = tape.gather_rows(src_emb, &ids)?;
        let x = apply_dropout(&mut tape, ctx, cfg, Side::Enc, t, 0, x)?;
        let (keep, drop) = carry_mask_leaves::<S>(&mut tape, &batch.src_keep_at(t));
        let top = stack_step(
            &mut tape,
            cfg,
            ctx,
            Side::Enc,
            t,
            0,
            &enc_layers,
            &mut enc_state,
            x,
            Some((keep, drop)),
        )?;
        enc_top.push(top);
    }

    // Per-sentence S matrices from the stacked step outputs.
    let stacked_enc = tape.concat(&enc_top, 0)?;
    let mut s_sent = Vec::with_capacity(b);
    for (bi, &len) in batch.src_lens.iter().enumerate() {
        let idx: Vec<usize> = (0..len).map(|t| t * b + bi).collect();
        s_sent.push(tape.gather_rows(stacked_enc, &idx)?);
    }

    // ── Decoder ──────────────────────────────────────────────────────
    let tgt_emb = register_embedding(&mut tape, params, Side::Dec);
    let dec_layers = register_layers(&mut tape, params, cfg, Side::Dec, 0..cfg.depth);
    let attn = register_attn(&mut tape, params);
    let mut dec_state: Vec<(NodeId, NodeId)> = enc_state.clone(); // bridge
    let mut dec_top = Vec::with_capacity(batch.dec_steps);

    let mut step_losses: Vec<NodeId> = Vec::new();
    let mut hc_prev: Option<NodeId> = None;
    for t in 0..batch.dec_steps {
        let ids = batch.dec_in_at(t);
        let emb = tape.gather_rows(tgt_emb, &ids)?;
        let emb = apply_dropout(&mut tape, ctx, cfg, Side::Dec, t, 0, emb)?;
        let x = match cfg.variant {
            Variant::NoInputFeeding => emb,
            Variant::InputFeeding => {
                let hc = match hc_prev {
                    Some(n) => n,
                    None => tape.leaf(Tensor::zeros(&[b, hdim])),
                };
                tape.concat(&[emb, hc], 1)?
            }
        };
        let top = stack_step(
            &mut tape,
            cfg,
            ctx,
            Side::Dec,
            t,
            0,
            &dec_layers,
            &mut dec_state,
            x,
            None,
        )?;
        dec_top.push(top);
        if cfg.variant == Variant::InputFeeding {
            let (hc_t, loss_t) = attention_step(
                &mut tape,
                &attn,
                &s_sent,
                top,
                &batch.dec_out_at(t),
                &batch.dec_keep_at(t),
            )?;
            hc_prev = Some(hc_t);
            step_losses.push(loss_t);
        }
    }

    // ── Attention + loss ─────────────────────────────────────────────
    let mut h_sent = Vec::new();
    let mut sent_losses: Vec<NodeId> = Vec::new();
    if cfg.variant == Variant::NoInputFeeding {
        let stacked_dec = tape.concat(&dec_top, 0)?;
        for (bi, &n) in batch.tgt_lens.iter().enumerate() {
            let idx: Vec<usize> = (0..n + 1).map(|t| t * b + bi).collect();
            let h_b = tape.gather_rows(stacked_dec, &idx)?;
            h_sent.push(h_b);
            let tgt_out: Vec<usize> = (0..n + 1)
                .map(|t| {
                    if t < n {
                        batch.tgt[bi][t]
                    } else {
                        crate::vocab::EOS
                    }
                })
                .collect();
            let loss_b =
                attention_sentence_loss(&mut tape, &attn, s_sent[bi], h_b, &tgt_out)?;
            sent_losses.push(loss_b);
        }
    } else {
        sent_losses = step_losses;
    }

    let mut loss_sum = sent_losses[0];
    for &l in &sent_losses[1..] {
        loss_sum = tape.add(loss_sum, l)?;
    }
    let loss_mean = tape.scale(loss_sum, S::from_f64(1.0 / batch.target_tokens as f64))?;

    Ok(TrainGraph {
        tape,
        loss_sum,
        loss_mean,
        token_count: batch.target_tokens,
        enc_top,
        dec_top,
        s_sent,
        h_sent,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::grad_check;
    use crate::model::config::Precision;
    use crate::model::ops;

    fn toy_cfg(variant: Variant) -> ModelConfig {
        ModelConfig {
            vocab_size: 12,
            embedding_size: 6,
            hidden_size: 8,
            depth: 2,
            variant,
            dropout: 0.0,
            precision: Precision::F64,
        }
    }

    fn toy_batch() -> Batch {
        Batch::new(
            vec![vec![4, 5, 6, 7], vec![8, 9], vec![10, 11, 4]],
            vec![vec![5, 6, 7], vec![8, 9, 10, 11], vec![4]],
        )
        .unwrap()
    }

    #[test]
    fn graph_forward_matches_tensor_ops_route() {
        // The tape composition and the tensor-level ops are two
        // implementations of the same math; their values must agree.
        for variant in [Variant::NoInputFeeding, Variant::InputFeeding] {
            let cfg = toy_cfg(variant);
            let params = ModelParams::<f64>::init(&cfg, &mut Rng::new(11)).unwrap();
            let batch = toy_batch();
            let g =
                build_train_graph(&params, &batch, &cfg, &StepCtx::eval(0)).unwrap();

            let enc = ops::encode(&batch.src, &params, &cfg).unwrap();
            for (bi, s_node) in g.s_sent.iter().enumerate() {
                let diff = g.tape.value(*s_node).sub(&enc.s[bi]).unwrap().max_abs();
                assert!(diff < 1e-12, "sentence {bi}: {diff}");
            }
            let h = ops::decode_hidden(&batch.tgt, Some(&enc), &params, &cfg).unwrap();
            if variant == Variant::NoInputFeeding {
                for (bi, h_node) in g.h_sent.iter().enumerate() {
                    let diff = g.tape.value(*h_node).sub(&h[bi]).unwrap().max_abs();
                    assert!(diff < 1e-12, "sentence {bi}: {diff}");
                }
            }

            // Loss via the ops route: per sentence, probs then nll.
            let mut total = 0.0;
            for bi in 0..batch.len() {
                let alpha =
                    ops::attention_scores(&h[bi], &enc.s[bi], &params.w_alpha, None).unwrap();
                let c = ops::context_vectors(&alpha, &enc.s[bi]).unwrap();
                let hc = ops::context_decoded(&h[bi], &c, &params.w_c).unwrap();
                let p = ops::output_probs(&hc, &params.out_w, &params.out_b).unwrap();
                let n = batch.tgt_lens[bi];
                let tgt_out: Vec<usize> = (0..n + 1)
                    .map(|t| {
                        if t < n {
                            batch.tgt[bi][t]
                        } else {
                            crate::vocab::EOS
                        }
                    })
                    .collect();
                let (mean, count) =
                    ops::nll_loss(&p, &tgt_out, &vec![true; n + 1]).unwrap();
                total += mean * count as f64;
            }
            let got = g.tape.value(g.loss_sum).item();
            assert!(
                (got - total).abs() < 1e-9,
                "{variant:?}: {got} vs {total}"
            );
        }
    }

    #[test]
    fn full_model_gradients_match_finite_differences() {
        for variant in [Variant::NoInputFeeding, Variant::InputFeeding] {
            let cfg = toy_cfg(variant);
            let params = ModelParams::<f64>::init(&cfg, &mut Rng::new(12)).unwrap();
            let batch = toy_batch();
            let mut g =
                build_train_graph(&params, &batch, &cfg, &StepCtx::eval(0)).unwrap();
            let loss = g.loss_mean;
            let err = grad_check(&mut g.tape, loss, 1e-5).unwrap();
            assert!(err < 1e-4, "{variant:?}: max rel err {err}");
        }
    }

    #[test]
    fn dropout_masks_are_row_keyed_and_deterministic() {
        let ctx = StepCtx::train(7, 3);
        let full: Tensor<f32> = dropout_mask(&ctx, Side::Enc, 2, 1, 6, 10, 0.4);
        let shard = dropout_mask(&ctx.with_row_offset(4), Side::Enc, 2, 1, 2, 10, 0.4);
        // Rows 4..6 of the full mask equal rows 0..2 of the offset shard.
        assert_eq!(full.row(4), shard.row(0));
        assert_eq!(full.row(5), shard.row(1));
        let again: Tensor<f32> = dropout_mask(&ctx, Side::Enc, 2, 1, 6, 10, 0.4);
        assert_eq!(full, again);
        // Different step => different mask.
        let other: Tensor<f32> =
            dropout_mask(&StepCtx::train(7, 4), Side::Enc, 2, 1, 6, 10, 0.4);
        assert_ne!(full, other);
    }

    #[test]
    fn gradients_with_dropout_still_check_out() {
        // Masks are leaves, so finite differences see the same network.
        let mut cfg = toy_cfg(Variant::NoInputFeeding);
        cfg.dropout = 0.3;
        let params = ModelParams::<f64>::init(&cfg, &mut Rng::new(13)).unwrap();
        let batch = Batch::new(vec![vec![4, 5]], vec![vec![6, 7]]).unwrap();
        let mut g =
            build_train_graph(&params, &batch, &cfg, &StepCtx::train(9, 0)).unwrap();
        let loss = g.loss_mean;
        let err = grad_check(&mut g.tape, loss, 1e-5).unwrap();
        assert!(err < 1e-4, "max rel err {err}");
    }

    #[test]
    fn batch_step_views() {
        let b = toy_batch();
        assert_eq!(b.src_steps, 4);
        assert_eq!(b.dec_steps, 5);
        assert_eq!(b.target_tokens, 3 + 1 + 4 + 1 + 1 + 1);
        assert_eq!(b.src_tokens, 9);
        assert_eq!(b.src_ids_at(2), vec![6, PAD, 4]);
        assert_eq!(b.dec_in_at(0), vec![BOS, BOS, BOS]);
        assert_eq!(b.dec_in_at(1), vec![5, 8, 4]);
        assert_eq!(b.dec_out_at(1), vec![6, 9, crate::vocab::EOS]);
        assert_eq!(b.dec_keep_at(4), vec![false, true, false]);
    }

    #[test]
    fn empty_source_sentence_rejected() {
        assert!(Batch::new(vec![vec![]], vec![vec![4]]).is_err());
    }

    #[test]
    fn repeated_build_is_bit_identical() {
        let cfg = toy_cfg(Variant::NoInputFeeding);
        let params = ModelParams::<f64>::init(&cfg, &mut Rng::new(14)).unwrap();
        let batch = toy_batch();
        let a = build_train_graph(&params, &batch, &cfg, &StepCtx::eval(0)).unwrap();
        let b = build_train_graph(&params, &batch, &cfg, &StepCtx::eval(0)).unwrap();
        assert_eq!(
            a.tape.value(a.loss_mean).item(),
            b.tape.value(b.loss_mean).item()
        );
    }
}
