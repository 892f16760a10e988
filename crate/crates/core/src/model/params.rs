//! Learnable weights, partitioned by model part.

use super::config::{part_of, tensor_layout, ModelConfig, Part};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};
use std::collections::BTreeMap;

/// One stacked-LSTM layer: fused gate weights in i|f|g|o column blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmLayerParams<S: Scalar = f32> {
    /// input width x 4H
    pub wx: Tensor<S>,
    /// H x 4H
    pub wh: Tensor<S>,
    /// 1 x 4H
    pub bias: Tensor<S>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<S: Scalar = f32> {
    pub src_embedding: Tensor<S>,
    pub tgt_embedding: Tensor<S>,
    pub encoder: Vec<LstmLayerParams<S>>,
    pub decoder: Vec<LstmLayerParams<S>>,
    /// H x H attention bilinear form.
    pub w_alpha: Tensor<S>,
    /// 2H x H projection of [H; C].
    pub w_c: Tensor<S>,
    /// H x V output projection.
    pub out_w: Tensor<S>,
    /// 1 x V output bias.
    pub out_b: Tensor<S>,
}

impl<S: Scalar> ModelParams<S> {
    /// Fresh weights: uniform(-0.1, 0.1), forget-gate bias 1.0, sampled in
    /// canonical tensor order so a seed fully determines the model.
    pub fn init(cfg: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let mut by_name: BTreeMap<String, Tensor<S>> = BTreeMap::new();
        let h = cfg.hidden_size;
        for (name, _, shape) in tensor_layout(cfg) {
            let n: usize = shape.iter().product();
            let t = if name.ends_with(".b") || name == "attn.out_b" {
                let mut t = Tensor::zeros(&shape);
                if name.ends_with(".b") {
                    // forget gate block gets bias 1.0
                    for j in h..2 * h {
                        t.data_mut()[j] = S::one();
                    }
                }
                t
            } else {
                let data = (0..n)
                    .map(|_| S::from_f64(rng.uniform(-0.1, 0.1)))
                    .collect();
                Tensor::from_flat(&shape, data)?
            };
            by_name.insert(name, t);
        }
        Self::from_named(cfg, |name| {
            by_name
                .remove(name)
                .ok_or_else(|| Error::Config(format!("missing tensor {name}")))
        })
    }

    /// Assembles params by pulling each canonical tensor from `fetch`.
    pub fn from_named(
        cfg: &ModelConfig,
        mut fetch: impl FnMut(&str) -> Result<Tensor<S>>,
    ) -> Result<Self> {
        let src_embedding = fetch("emb.src")?;
        let tgt_embedding = fetch("emb.tgt")?;
        let mut stacks = Vec::new();
        for side in ["enc", "dec"] {
            let mut layers = Vec::with_capacity(cfg.depth);
            for l in 0..cfg.depth {
                layers.push(LstmLayerParams {
                    wx: fetch(&format!("{side}.l{l}.wx"))?,
                    wh: fetch(&format!("{side}.l{l}.wh"))?,
                    bias: fetch(&format!("{side}.l{l}.b"))?,
                });
            }
            stacks.push(layers);
        }
        let decoder = stacks.pop().expect("dec stack");
        let encoder = stacks.pop().expect("enc stack");
        Ok(ModelParams {
            src_embedding,
            tgt_embedding,
            encoder,
            decoder,
            w_alpha: fetch("attn.w_alpha")?,
            w_c: fetch("attn.w_c")?,
            out_w: fetch("attn.out_w")?,
            out_b: fetch("attn.out_b")?,
        })
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor<S>> {
        self.visit().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Tensors in canonical enumeration order.
    pub fn visit(&self) -> impl Iterator<Item = (String, &Tensor<S>)> {
        let mut items: Vec<(String, &Tensor<S>)> = Vec::new();
        items.push(("emb.src".into(), &self.src_embedding));
        items.push(("emb.tgt".into(), &self.tgt_embedding));
        for (side, layers) in [("enc", &self.encoder), ("dec", &self.decoder)] {
            for (l, lp) in layers.iter().enumerate() {
                items.push((format!("{side}.l{l}.wx"), &lp.wx));
                items.push((format!("{side}.l{l}.wh"), &lp.wh));
                items.push((format!("{side}.l{l}.b"), &lp.bias));
            }
        }
        items.push(("attn.w_alpha".into(), &self.w_alpha));
        items.push(("attn.w_c".into(), &self.w_c));
        items.push(("attn.out_w".into(), &self.out_w));
        items.push(("attn.out_b".into(), &self.out_b));
        items.into_iter()
    }

    /// Mutable visit in the same canonical order (optimizer updates).
    pub fn visit_mut(&mut self, mut f: impl FnMut(&str, &mut Tensor<S>) -> Result<()>) -> Result<()> {
        f("emb.src", &mut self.src_embedding)?;
        f("emb.tgt", &mut self.tgt_embedding)?;
        for (side, layers) in [("enc", &mut self.encoder), ("dec", &mut self.decoder)] {
            for (l, lp) in layers.iter_mut().enumerate() {
                f(&format!("{side}.l{l}.wx"), &mut lp.wx)?;
                f(&format!("{side}.l{l}.wh"), &mut lp.wh)?;
                f(&format!("{side}.l{l}.b"), &mut lp.bias)?;
            }
        }
        f("attn.w_alpha", &mut self.w_alpha)?;
        f("attn.w_c", &mut self.w_c)?;
        f("attn.out_w", &mut self.out_w)?;
        f("attn.out_b", &mut self.out_b)?;
        Ok(())
    }

    /// Names of tensors belonging to `part`.
    pub fn names_of_part(&self, part: Part) -> Vec<String> {
        self.visit()
            .map(|(n, _)| n)
            .filter(|n| part_of(n) == part)
            .collect()
    }

    pub fn total_params(&self) -> usize {
        self.visit().map(|(_, t)| t.numel()).sum()
    }

    pub fn cast<T: Scalar>(&self) -> ModelParams<T> {
        let conv = |l: &LstmLayerParams<S>| LstmLayerParams {
            wx: l.wx.cast(),
            wh: l.wh.cast(),
            bias: l.bias.cast(),
        };
        ModelParams {
            src_embedding: self.src_embedding.cast(),
            tgt_embedding: self.tgt_embedding.cast(),
            encoder: self.encoder.iter().map(conv).collect(),
            decoder: self.decoder.iter().map(conv).collect(),
            w_alpha: self.w_alpha.cast(),
            w_c: self.w_c.cast(),
            out_w: self.out_w.cast(),
            out_b: self.out_b.cast(),
        }
    }
}
