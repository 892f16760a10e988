//! Tensor-level model operations: the LSTM cell, encoder/decoder stepping,
//! global attention and the output distribution.
//!
//! These run without a tape and serve inference, evaluation and test
//! oracles; the differentiable training graph in [`super::graph`] composes
//! the same math from tape primitives and is cross-checked against this
//! module.

use super::config::{ModelConfig, Variant};
use super::params::{LstmLayerParams, ModelParams};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};
use crate::vocab::PAD;

/// Encoder/decoder activations for one batch.
///
/// `s[b]` holds the top-layer encoder states of sentence `b` (true length
/// rows, no padding); `h[b]` the decoder top-layer states; `enc_final` the
/// per-layer final encoder states (batch-stacked) that bridge into the
/// decoder's initial state.
#[derive(Debug, Clone)]
pub struct EncDecStates<S: Scalar = f32> {
    pub s: Vec<Tensor<S>>,
    pub h: Vec<Tensor<S>>,
    pub enc_final: Vec<(Tensor<S>, Tensor<S>)>,
    pub src_lens: Vec<usize>,
}

/// One LSTM step over a batch of rows.
///
/// Gates are sigmoid/tanh of the fused affine map in i|f|g|o blocks:
/// `c = f*c_prev + i*g`, `h = o*tanh(c)`.
pub fn lstm_cell<S: Scalar>(
    x: &Tensor<S>,
    h_prev: &Tensor<S>,
    c_prev: &Tensor<S>,
    layer: &LstmLayerParams<S>,
) -> Result<(Tensor<S>, Tensor<S>)> {
    let hidden = layer.wh.shape()[0];
    let gates = x
        .matmul(&layer.wx)?
        .add(&h_prev.matmul(&layer.wh)?)?
        .add_row(&layer.bias)?;
    let i = gates.slice_cols(0, hidden)?.sigmoid()?;
    let f = gates.slice_cols(hidden, 2 * hidden)?.sigmoid()?;
    let g = gates.slice_cols(2 * hidden, 3 * hidden)?.tanh()?;
    let o = gates.slice_cols(3 * hidden, 4 * hidden)?.sigmoid()?;
    let c = f.mul(c_prev)?.add(&i.mul(&g)?)?;
    let h = o.mul(&c.tanh()?)?;
    Ok((h, c))
}

/// Keeps rows of `new` where `keep` is 1, rows of `old` where it is 0.
/// PAD steps carry the previous state forward so a short sentence's final
/// state is unaffected by batch padding.
fn carry_rows<S: Scalar>(
    new: &Tensor<S>,
    old: &Tensor<S>,
    keep: &Tensor<S>,
    drop: &Tensor<S>,
) -> Result<Tensor<S>> {
    new.mul_col(keep)?.add(&old.mul_col(drop)?)
}

fn step_masks<S: Scalar>(lens: &[usize], t: usize) -> (Tensor<S>, Tensor<S>) {
    let keep: Vec<S> = lens
        .iter()
        .map(|&l| if t < l { S::one() } else { S::zero() })
        .collect();
    let drop: Vec<S> = keep
        .iter()
        .map(|&k| if k == S::one() { S::zero() } else { S::one() })
        .collect();
    let b = lens.len();
    (
        Tensor::from_flat(&[b, 1], keep).expect("mask shape"),
        Tensor::from_flat(&[b, 1], drop).expect("mask shape"),
    )
}

fn check_ids(sentences: &[Vec<usize>], vocab: usize) -> Result<()> {
    for s in sentences {
        for &id in s {
            if id >= vocab {
                return Err(Error::TokenOutOfRange { id, vocab });
            }
        }
    }
    Ok(())
}

/// Runs the stacked encoder over a batch of source sentences.
pub fn encode<S: Scalar>(
    src: &[Vec<usize>],
    params: &ModelParams<S>,
    cfg: &ModelConfig,
) -> Result<EncDecStates<S>> {
    check_ids(src, cfg.vocab_size)?;
    let b = src.len();
    let lens: Vec<usize> = src.iter().map(|s| s.len()).collect();
    let m = lens.iter().copied().max().unwrap_or(0);
    let hdim = cfg.hidden_size;

    let mut h: Vec<Tensor<S>> = (0..cfg.depth).map(|_| Tensor::zeros(&[b, hdim])).collect();
    let mut c = h.clone();
    let mut top_steps: Vec<Tensor<S>> = Vec::with_capacity(m);
    for t in 0..m {
        let ids: Vec<usize> = src
            .iter()
            .map(|s| if t < s.len() { s[t] } else { PAD })
            .collect();
        let (keep, drop) = step_masks::<S>(&lens, t);
        let mut x = params.src_embedding.gather_rows(&ids)?;
        for l in 0..cfg.depth {
            let (hn, cn) = lstm_cell(&x, &h[l], &c[l], &params.encoder[l])?;
            h[l] = carry_rows(&hn, &h[l], &keep, &drop)?;
            c[l] = carry_rows(&cn, &c[l], &keep, &drop)?;
            x = h[l].clone();
        }
        top_steps.push(h[cfg.depth - 1].clone());
    }

    let mut s = Vec::with_capacity(b);
    for (bi, &len) in lens.iter().enumerate() {
        let rows: Vec<Vec<S>> = (0..len).map(|t| top_steps[t].row(bi).to_vec()).collect();
        s.push(if rows.is_empty() {
            Tensor::zeros(&[0, hdim])
        } else {
            Tensor::from_rows(&rows)?
        });
    }
    Ok(EncDecStates {
        s,
        h: Vec::new(),
        enc_final: h.into_iter().zip(c).collect(),
        src_lens: lens,
    })
}

/// Runs the stacked decoder under teacher forcing (inputs `BOS, y1..yN`)
/// and returns per-sentence top-layer states, `N_b + 1` rows each.
///
/// Under `NoInputFeeding` only the target ids matter; under `InputFeeding`
/// each step's first-layer input is `[embedding; attentional hidden state
/// of the previous step]`, so `enc` must carry the encoder states.
pub fn decode_hidden<S: Scalar>(
    tgt: &[Vec<usize>],
    enc: Option<&EncDecStates<S>>,
    params: &ModelParams<S>,
    cfg: &ModelConfig,
) -> Result<Vec<Tensor<S>>> {
    check_ids(tgt, cfg.vocab_size)?;
    let b = tgt.len();
    let hdim = cfg.hidden_size;
    let steps = tgt.iter().map(|s| s.len()).max().unwrap_or(0) + 1;
    if cfg.variant == Variant::InputFeeding && enc.is_none() {
        return Err(Error::Config(
            "input-feeding decoding requires encoder states".into(),
        ));
    }

    let mut h: Vec<Tensor<S>>;
    let mut c: Vec<Tensor<S>>;
    match enc {
        Some(e) => {
            h = e.enc_final.iter().map(|(h, _)| h.clone()).collect();
            c = e.enc_final.iter().map(|(_, c)| c.clone()).collect();
        }
        None => {
            h = (0..cfg.depth).map(|_| Tensor::zeros(&[b, hdim])).collect();
            c = h.clone();
        }
    }

    let mut hc_prev = Tensor::zeros(&[b, hdim]);
    let mut top_steps: Vec<Tensor<S>> = Vec::with_capacity(steps);
    for t in 0..steps {
        let ids: Vec<usize> = tgt
            .iter()
            .map(|s| {
                if t == 0 {
                    crate::vocab::BOS
                } else if t - 1 < s.len() {
                    s[t - 1]
                } else {
                    PAD
                }
            })
            .collect();
        let emb = params.tgt_embedding.gather_rows(&ids)?;
        let mut x = match cfg.variant {
            Variant::NoInputFeeding => emb,
            Variant::InputFeeding => Tensor::concat(&[&emb, &hc_prev], 1)?,
        };
        for l in 0..cfg.depth {
            let (hn, cn) = lstm_cell(&x, &h[l], &c[l], &params.decoder[l])?;
            h[l] = hn;
            c[l] = cn;
            x = h[l].clone();
        }
        let top = h[cfg.depth - 1].clone();
        if cfg.variant == Variant::InputFeeding {
            let e = enc.expect("checked above");
            let mut rows: Vec<Vec<S>> = Vec::with_capacity(b);
            for bi in 0..b {
                let h_row = top.slice_rows(bi, bi + 1)?;
                let alpha = attention_scores(&h_row, &e.s[bi], &params.w_alpha, None)?;
                let ctx = context_vectors(&alpha, &e.s[bi])?;
                let hc = context_decoded(&h_row, &ctx, &params.w_c)?;
                rows.push(hc.row(0).to_vec());
            }
            hc_prev = Tensor::from_rows(&rows)?;
        }
        top_steps.push(top);
    }

    let mut out = Vec::with_capacity(b);
    for (bi, sent) in tgt.iter().enumerate() {
        let rows: Vec<Vec<S>> = (0..sent.len() + 1)
            .map(|t| top_steps[t].row(bi).to_vec())
            .collect();
        out.push(Tensor::from_rows(&rows)?);
    }
    Ok(out)
}

/// Global attention coefficients: `alpha[i][j] = softmax_j(H_i · W_alpha · S_j)`.
/// `src_mask[j] = false` drops source position `j` (a PAD slot).
pub fn attention_scores<S: Scalar>(
    h: &Tensor<S>,
    s: &Tensor<S>,
    w_alpha: &Tensor<S>,
    src_mask: Option<&[bool]>,
) -> Result<Tensor<S>> {
    let scores = h.matmul(w_alpha)?.matmul(&s.transpose()?)?;
    match src_mask {
        None => scores.softmax_rows(None),
        Some(mask) => {
            if mask.len() != s.shape()[0] {
                return Err(Error::shape("attention mask", &[mask.len()], s.shape()));
            }
            let (n, m) = (scores.rows(), scores.cols());
            let mut mk = Tensor::zeros(&[n, m]);
            for i in 0..n {
                for j in 0..m {
                    if mask[j] {
                        mk.set(i, j, S::one());
                    }
                }
            }
            scores.softmax_rows(Some(&mk))
        }
    }
}

/// Attention-weighted sum of encoder states: `C_i = sum_j alpha[i][j] S_j`.
pub fn context_vectors<S: Scalar>(alpha: &Tensor<S>, s: &Tensor<S>) -> Result<Tensor<S>> {
    alpha.matmul(s)
}

/// `H_c = tanh(W_c [H; C])`.
pub fn context_decoded<S: Scalar>(
    h: &Tensor<S>,
    ctx: &Tensor<S>,
    w_c: &Tensor<S>,
) -> Result<Tensor<S>> {
    Tensor::concat(&[h, ctx], 1)?.matmul(w_c)?.tanh()
}

/// Output distributions: `P = softmax(F_c(H_c))`, one row per target step.
pub fn output_probs<S: Scalar>(
    hc: &Tensor<S>,
    out_w: &Tensor<S>,
    out_b: &Tensor<S>,
) -> Result<Tensor<S>> {
    hc.matmul(out_w)?.add_row(out_b)?.softmax_rows(None)
}

/// Log-probability rows (stable log-softmax of the output logits).
pub fn output_logprobs<S: Scalar>(
    hc: &Tensor<S>,
    out_w: &Tensor<S>,
    out_b: &Tensor<S>,
) -> Result<Tensor<S>> {
    hc.matmul(out_w)?.add_row(out_b)?.log_softmax_rows()
}

/// Mean negative log-likelihood over unmasked target tokens, plus the
/// token count. `mask[i] = false` excludes row `i` (a PAD slot).
pub fn nll_loss<S: Scalar>(
    p: &Tensor<S>,
    targets: &[usize],
    mask: &[bool],
) -> Result<(S, usize)> {
    if targets.len() != p.rows() || mask.len() != targets.len() {
        return Err(Error::shape("nll_loss", p.shape(), &[targets.len()]));
    }
    let mut total = S::zero();
    let mut count = 0usize;
    for (i, (&t, &keep)) in targets.iter().zip(mask).enumerate() {
        if !keep {
            continue;
        }
        if t >= p.cols() {
            return Err(Error::TokenOutOfRange {
                id: t,
                vocab: p.cols(),
            });
        }
        total += -(p.at(i, t).ln());
        count += 1;
    }
    if count == 0 {
        return Err(Error::Empty("nll_loss over zero unmasked tokens".into()));
    }
    Ok((total / S::from_f64(count as f64), count))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::config::Precision;
    use crate::rng::Rng;

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

    fn rand_t(rng: &mut Rng, shape: &[usize]) -> Tensor<f64> {
        Tensor::from_flat(
            shape,
            (0..shape.iter().product())
                .map(|_| rng.uniform(-0.5, 0.5))
                .collect(),
        )
        .unwrap()
    }

    fn zero_layer(input: usize, hidden: usize) -> LstmLayerParams<f64> {
        LstmLayerParams {
            wx: Tensor::zeros(&[input, 4 * hidden]),
            wh: Tensor::zeros(&[hidden, 4 * hidden]),
            bias: Tensor::zeros(&[1, 4 * hidden]),
        }
    }

    /// Independent scalar-loop LSTM, indexing raw arrays directly.
    fn lstm_scalar_oracle(
        x: &[f64],
        h_prev: &[f64],
        c_prev: &[f64],
        layer: &LstmLayerParams<f64>,
        input: usize,
        hidden: usize,
    ) -> (Vec<f64>, Vec<f64>) {
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let mut h = vec![0.0; hidden];
        let mut c = vec![0.0; hidden];
        for j in 0..hidden {
            let mut pre = [0.0f64; 4];
            for (g, p) in pre.iter_mut().enumerate() {
                let col = g * hidden + j;
                let mut acc = layer.bias.data()[col];
                for k in 0..input {
                    acc += x[k] * layer.wx.data()[k * 4 * hidden + col];
                }
                for k in 0..hidden {
                    acc += h_prev[k] * layer.wh.data()[k * 4 * hidden + col];
                }
                *p = acc;
            }
            let (i, f, g, o) = (sig(pre[0]), sig(pre[1]), pre[2].tanh(), sig(pre[3]));
            c[j] = f * c_prev[j] + i * g;
            h[j] = o * c[j].tanh();
        }
        (h, c)
    }

    #[test]
    fn lstm_all_zero_gives_zero_state() {
        let layer = zero_layer(3, 4);
        let x = Tensor::zeros(&[2, 3]);
        let h0 = Tensor::zeros(&[2, 4]);
        let c0 = Tensor::zeros(&[2, 4]);
        let (h, c) = lstm_cell(&x, &h0, &c0, &layer).unwrap();
        assert_eq!(h, Tensor::zeros(&[2, 4]));
        assert_eq!(c, Tensor::zeros(&[2, 4]));
    }

    #[test]
    fn lstm_zero_weights_halve_previous_cell() {
        // With all weights/biases zero: f = 0.5, i*g = 0, so c = 0.5*v and
        // h = 0.5*tanh(0.5*v).
        let layer = zero_layer(3, 4);
        let x = Tensor::zeros(&[1, 3]);
        let h0 = Tensor::zeros(&[1, 4]);
        let v = Tensor::from_flat(&[1, 4], vec![0.4, -1.0, 2.0, 0.0]).unwrap();
        let (h, c) = lstm_cell(&x, &h0, &v, &layer).unwrap();
        for j in 0..4 {
            let cv = 0.5 * v.data()[j];
            assert!((c.at(0, j) - cv).abs() < 1e-12);
            assert!((h.at(0, j) - 0.5 * cv.tanh()).abs() < 1e-12);
        }
    }

    #[test]
    fn lstm_matches_scalar_oracle() {
        let mut rng = Rng::new(21);
        let (input, hidden) = (5, 7);
        let layer = LstmLayerParams {
            wx: rand_t(&mut rng, &[input, 4 * hidden]),
            wh: rand_t(&mut rng, &[hidden, 4 * hidden]),
            bias: rand_t(&mut rng, &[1, 4 * hidden]),
        };
        let x = rand_t(&mut rng, &[3, input]);
        let h0 = rand_t(&mut rng, &[3, hidden]);
        let c0 = rand_t(&mut rng, &[3, hidden]);
        let (h, c) = lstm_cell(&x, &h0, &c0, &layer).unwrap();
        for b in 0..3 {
            let (oh, oc) =
                lstm_scalar_oracle(x.row(b), h0.row(b), c0.row(b), &layer, input, hidden);
            for j in 0..hidden {
                assert!((h.at(b, j) - oh[j]).abs() < 1e-12);
                assert!((c.at(b, j) - oc[j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn lstm_width_mismatch_errors() {
        let layer = zero_layer(3, 4);
        let x = Tensor::<f64>::zeros(&[2, 5]);
        let h0 = Tensor::zeros(&[2, 4]);
        assert!(lstm_cell(&x, &h0, &h0, &layer).is_err());
    }

    #[test]
    fn encode_empty_batch() {
        let cfg = toy_cfg(Variant::NoInputFeeding);
        let params = ModelParams::<f64>::init(&cfg, &mut Rng::new(1)).unwrap();
        let enc = encode::<f64>(&[], &params, &cfg).unwrap();
        assert!(enc.s.is_empty());
    }

    #[test]
    fn encode_single_token_depth_one_equals_cell() {
        let mut cfg = toy_cfg(Variant::NoInputFeeding);
        cfg.depth = 1;
        let params = ModelParams::<f64>::init(&cfg, &mut Rng::new(2)).unwrap();
        let enc = encode(&[vec![5]], &params, &cfg).unwrap();
        let x = params.src_embedding.gather_rows(&[5]).unwrap();
        let z = Tensor::zeros(&[1, cfg.hidden_size]);
        let (h, _) = lstm_cell(&x, &z, &z, &params.encoder[0]).unwrap();
        assert_eq!(enc.s[0], h);
    }

    #[test]
    fn encode_unpadded_positions_independent_of_batch_packing() {
        let cfg = toy_cfg(Variant::NoInputFeeding);
        let params = ModelParams::<f64>::init(&cfg, &mut Rng::new(3)).unwrap();
        let a = vec![4, 5, 6, 7, 8];
        let b = vec![9, 10];
        let batched = encode(&[a.clone(), b.clone()], &params, &cfg).unwrap();
        let alone_a = encode(&[a], &params, &cfg).unwrap();
        let alone_b = encode(&[b], &params, &cfg).unwrap();
        assert_eq!(batched.s[0], alone_a.s[0]);
        assert_eq!(batched.s[1], alone_b.s[1 - 1]);
        // The bridge state of the short sentence must also be unaffected.
        for l in 0..cfg.depth {
            assert_eq!(
                batched.enc_final[l].0.row(1),
                alone_b.enc_final[l].0.row(0)
            );
            assert_eq!(
                batched.enc_final[l].1.row(1),
                alone_b.enc_final[l].1.row(0)
            );
        }
    }

    #[test]
    fn encode_rejects_out_of_range_ids() {
        let cfg = toy_cfg(Variant::NoInputFeeding);
        let params = ModelParams::<f64>::init(&cfg, &mut Rng::new(1)).unwrap();
        assert!(matches!(
            encode(&[vec![99]], &params, &cfg),
            Err(Error::TokenOutOfRange { id: 99, .. })
        ));
    }

    #[test]
    fn decoder_no_input_feeding_is_causal() {
        let cfg = toy_cfg(Variant::NoInputFeeding);
        let params = ModelParams::<f64>::init(&cfg, &mut Rng::new(4)).unwrap();
        let enc = encode(&[vec![4, 5, 6]], &params, &cfg).unwrap();
        let h1 = decode_hidden(&[vec![7, 8, 9, 10]], Some(&enc), &params, &cfg).unwrap();
        let h2 = decode_hidden(&[vec![7, 8, 11, 10]], Some(&enc), &params, &cfg).unwrap();
        // Changing the token at step 3 leaves steps 1..=2 bit-identical
        // (rows 0..=2 of H: the BOS step and the steps fed y1, y2).
        for t in 0..3 {
            assert_eq!(h1[0].row(t), h2[0].row(t), "step {t}");
        }
        assert_ne!(h1[0].row(3), h2[0].row(3));
    }

    #[test]
    fn decoder_input_feeding_breaks_causality_via_attention() {
        // Witness for why the input-feeding decoder cannot wavefront: the
        // layer-1 input at step k+1 depends on step k's attention output.
        let cfg = toy_cfg(Variant::InputFeeding);
        let params = ModelParams::<f64>::init(&cfg, &mut Rng::new(5)).unwrap();
        let enc = encode(&[vec![4, 5, 6]], &params, &cfg).unwrap();
        let h1 = decode_hidden(&[vec![7, 8, 9]], Some(&enc), &params, &cfg).unwrap();
        let h2 = decode_hidden(&[vec![7, 11, 9]], Some(&enc), &params, &cfg).unwrap();
        // With NoInputFeeding, H row 2 depends only on BOS, y1; here the
        // changed y2 at step k=2 feeds back through attention into row 2's
        // successor. Rows up to the changed step still match:
        assert_eq!(h1[0].row(0), h2[0].row(0));
        assert_eq!(h1[0].row(1), h2[0].row(1));
        assert_ne!(h1[0].row(2), h2[0].row(2));
    }

    #[test]
    fn decoder_single_step_depth_one_zero_params_is_zero() {
        let mut cfg = toy_cfg(Variant::NoInputFeeding);
        cfg.depth = 1;
        let mut params = ModelParams::<f64>::init(&cfg, &mut Rng::new(6)).unwrap();
        params.decoder[0] = zero_layer(cfg.embedding_size, cfg.hidden_size);
        let h = decode_hidden(&[vec![]], None, &params, &cfg).unwrap();
        assert_eq!(h[0], Tensor::zeros(&[1, cfg.hidden_size]));
    }

    #[test]
    fn input_feeding_with_zero_context_equals_zero_padded_unroll() {
        // Forcing the attentional hidden state to zero (w_c = 0 makes
        // H_c = tanh(0) = 0) must reduce input-feeding to plain stepping
        // with the layer-1 input zero-padded.
        let cfg = toy_cfg(Variant::InputFeeding);
        let mut params = ModelParams::<f64>::init(&cfg, &mut Rng::new(7)).unwrap();
        params.w_c = Tensor::zeros(&[2 * cfg.hidden_size, cfg.hidden_size]);
        let enc = encode(&[vec![4, 5]], &params, &cfg).unwrap();
        let tgt = vec![vec![6, 7, 8]];
        let got = decode_hidden(&tgt, Some(&enc), &params, &cfg).unwrap();

        // Manual unroll with input [emb; 0].
        let zeros = Tensor::zeros(&[1, cfg.hidden_size]);
        let mut h: Vec<Tensor<f64>> = enc.enc_final.iter().map(|(h, _)| h.clone()).collect();
        let mut c: Vec<Tensor<f64>> = enc.enc_final.iter().map(|(_, c)| c.clone()).collect();
        let inputs = [crate::vocab::BOS, 6, 7, 8];
        let mut rows = Vec::new();
        for &id in &inputs {
            let emb = params.tgt_embedding.gather_rows(&[id]).unwrap();
            let mut x = Tensor::concat(&[&emb, &zeros], 1).unwrap();
            for l in 0..cfg.depth {
                let (hn, cn) = lstm_cell(&x, &h[l], &c[l], &params.decoder[l]).unwrap();
                h[l] = hn;
                c[l] = cn;
                x = h[l].clone();
            }
            rows.push(h[cfg.depth - 1].row(0).to_vec());
        }
        let manual = Tensor::from_rows(&rows).unwrap();
        assert_eq!(got[0], manual);
    }

    #[test]
    fn attention_single_source_position_is_all_ones() {
        let mut rng = Rng::new(8);
        let h = rand_t(&mut rng, &[4, 6]);
        let s = rand_t(&mut rng, &[1, 6]);
        let w = rand_t(&mut rng, &[6, 6]);
        let alpha = attention_scores(&h, &s, &w, None).unwrap();
        for i in 0..4 {
            assert!((alpha.at(i, 0) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_zero_weight_is_uniform() {
        let mut rng = Rng::new(9);
        let h = rand_t(&mut rng, &[3, 6]);
        let s = rand_t(&mut rng, &[5, 6]);
        let w = Tensor::zeros(&[6, 6]);
        let alpha = attention_scores(&h, &s, &w, None).unwrap();
        for i in 0..3 {
            for j in 0..5 {
                assert!((alpha.at(i, j) - 0.2).abs() < 1e-12);
            }
        }
        // Masked: uniform over unmasked positions only, masked exactly 0.
        let alpha = attention_scores(&h, &s, &w, Some(&[true, false, true, true, false])).unwrap();
        for i in 0..3 {
            assert_eq!(alpha.at(i, 1), 0.0);
            assert_eq!(alpha.at(i, 4), 0.0);
            assert!((alpha.at(i, 0) - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_matches_scalar_double_loop_oracle() {
        let mut rng = Rng::new(10);
        let (n, m, d) = (3, 4, 5);
        let h = rand_t(&mut rng, &[n, d]);
        let s = rand_t(&mut rng, &[m, d]);
        let w = rand_t(&mut rng, &[d, d]);
        let alpha = attention_scores(&h, &s, &w, None).unwrap();
        for i in 0..n {
            // score[i][j] = sum_{a,b} H[i][a] W[a][b] S[j][b]
            let mut scores = vec![0.0f64; m];
            for (j, sc) in scores.iter_mut().enumerate() {
                for a in 0..d {
                    for b in 0..d {
                        *sc += h.at(i, a) * w.at(a, b) * s.at(j, b);
                    }
                }
            }
            let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|&v| (v - mx).exp()).collect();
            let denom: f64 = exps.iter().sum();
            for j in 0..m {
                assert!((alpha.at(i, j) - exps[j] / denom).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn context_one_hot_picks_the_row_uniform_takes_mean() {
        let mut rng = Rng::new(11);
        let s = rand_t(&mut rng, &[4, 3]);
        let one_hot = Tensor::from_rows(&[vec![0.0, 0.0, 1.0, 0.0]]).unwrap();
        let c = context_vectors(&one_hot, &s).unwrap();
        assert_eq!(c.row(0), s.row(2));
        let uniform = Tensor::filled(&[1, 4], 0.25);
        let c = context_vectors(&uniform, &s).unwrap();
        for j in 0..3 {
            let mean = (0..4).map(|i| s.at(i, j)).sum::<f64>() / 4.0;
            assert!((c.at(0, j) - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn context_decoded_zero_weight_is_zero_and_scalar_case_closed_form() {
        let h = Tensor::from_rows(&[vec![0.7]]).unwrap();
        let c = Tensor::from_rows(&[vec![-0.2]]).unwrap();
        let w0 = Tensor::zeros(&[2, 1]);
        assert_eq!(context_decoded(&h, &c, &w0).unwrap().item(), 0.0);
        let w = Tensor::from_rows(&[vec![0.5], vec![2.0]]).unwrap();
        let hc = context_decoded(&h, &c, &w).unwrap();
        let want = (0.7 * 0.5 + (-0.2) * 2.0f64).tanh();
        assert!((hc.item() - want).abs() < 1e-12);
    }

    #[test]
    fn context_decoded_equals_primitive_composition() {
        let mut rng = Rng::new(12);
        let h = rand_t(&mut rng, &[3, 4]);
        let c = rand_t(&mut rng, &[3, 4]);
        let w = rand_t(&mut rng, &[8, 4]);
        let fused = context_decoded(&h, &c, &w).unwrap();
        let manual = Tensor::concat(&[&h, &c], 1)
            .unwrap()
            .matmul(&w)
            .unwrap()
            .tanh()
            .unwrap();
        assert_eq!(fused, manual);
    }

    #[test]
    fn output_probs_zero_projection_is_uniform() {
        let mut rng = Rng::new(13);
        let hc = rand_t(&mut rng, &[3, 4]);
        let w = Tensor::zeros(&[4, 10]);
        let b = Tensor::zeros(&[1, 10]);
        let p = output_probs(&hc, &w, &b).unwrap();
        for i in 0..3 {
            for j in 0..10 {
                assert!((p.at(i, j) - 0.1).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn output_probs_rows_sum_to_one_and_argmax_matches_logits() {
        let mut rng = Rng::new(14);
        let hc = rand_t(&mut rng, &[5, 6]);
        let w = rand_t(&mut rng, &[6, 9]);
        let b = rand_t(&mut rng, &[1, 9]);
        let p = output_probs(&hc, &w, &b).unwrap();
        let logits = hc.matmul(&w).unwrap().add_row(&b).unwrap();
        for i in 0..5 {
            let sum: f64 = p.row(i).iter().sum();
            assert!((sum - 1.0).abs() < 1e-6);
            let argmax_p = (0..9).max_by(|&a, &bb| p.at(i, a).total_cmp(&p.at(i, bb)));
            let argmax_l = (0..9).max_by(|&a, &bb| logits.at(i, a).total_cmp(&logits.at(i, bb)));
            assert_eq!(argmax_p, argmax_l);
        }
    }

    #[test]
    fn nll_loss_cases() {
        // Exact one-hot on targets: loss 0.
        let p = Tensor::from_rows(&[vec![0.0, 1.0, 0.0], vec![1.0, 0.0, 0.0]]).unwrap();
        let (loss, count) = nll_loss(&p, &[1, 0], &[true, true]).unwrap();
        assert_eq!(loss, 0.0);
        assert_eq!(count, 2);
        // Uniform: loss = ln V.
        let v = 8usize;
        let p = Tensor::filled(&[3, v], 1.0 / v as f64);
        let (loss, _) = nll_loss(&p, &[0, 3, 7], &[true, true, true]).unwrap();
        assert!((loss - (v as f64).ln()).abs() < 1e-12);
        // Masked rows are excluded.
        let (loss, count) = nll_loss(&p, &[0, 3, 7], &[true, false, true]).unwrap();
        assert_eq!(count, 2);
        assert!((loss - (v as f64).ln()).abs() < 1e-12);
        // All masked: error.
        assert!(nll_loss(&p, &[0, 3, 7], &[false, false, false]).is_err());
    }

    #[test]
    fn perplexity_is_exp_of_nll() {
        let mut rng = Rng::new(15);
        let logits = rand_t(&mut rng, &[4, 6]);
        let p = logits.softmax_rows(None).unwrap();
        let (loss, _) = nll_loss(&p, &[1, 2, 0, 5], &[true; 4]).unwrap();
        let ppl = loss.exp();
        // By definition; checked against a direct product computation.
        let direct: f64 = [(0usize, 1usize), (1, 2), (2, 0), (3, 5)]
            .iter()
            .map(|&(i, t)| p.at(i, t).ln())
            .sum::<f64>()
            / 4.0;
        assert!((ppl - (-direct).exp()).abs() < 1e-9);
    }
}
