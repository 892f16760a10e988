//! Model hyperparameters and parameter accounting.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Decoder wiring variant.
///
/// `InputFeeding` concatenates the previous step's attentional hidden state
/// with the target word embedding at the first decoder layer, which chains
/// every decoder step to the previous step's attention output.
/// `NoInputFeeding` drops that edge, so all decoder hidden states can be
/// computed before any attention.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    InputFeeding,
    NoInputFeeding,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::InputFeeding => "input-feeding",
            Variant::NoInputFeeding => "no-input-feeding",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "input-feeding" => Ok(Variant::InputFeeding),
            "no-input-feeding" => Ok(Variant::NoInputFeeding),
            _ => Err(Error::Config(format!("unknown variant `{s}`"))),
        }
    }
}

/// Numeric precision of a run; f32 for training, f64 for gradient checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Vocabulary size including the four reserved ids.
    pub vocab_size: usize,
    pub embedding_size: usize,
    pub hidden_size: usize,
    /// Stacked LSTM layers per side.
    pub depth: usize,
    pub variant: Variant,
    pub dropout: f64,
    pub precision: Precision,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 4 {
            return Err(Error::Config(format!(
                "vocab_size {} < 4 (PAD/BOS/EOS/UNK required)",
                self.vocab_size
            )));
        }
        if self.depth < 1 {
            return Err(Error::Config("depth must be >= 1".into()));
        }
        if self.embedding_size == 0 || self.hidden_size == 0 {
            return Err(Error::Config("embedding/hidden size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }

    /// Input width of a decoder LSTM layer.
    pub fn decoder_input_width(&self, layer: usize) -> usize {
        if layer == 0 {
            match self.variant {
                Variant::InputFeeding => self.embedding_size + self.hidden_size,
                Variant::NoInputFeeding => self.embedding_size,
            }
        } else {
            self.hidden_size
        }
    }

    /// Input width of an encoder LSTM layer.
    pub fn encoder_input_width(&self, layer: usize) -> usize {
        if layer == 0 {
            self.embedding_size
        } else {
            self.hidden_size
        }
    }
}

/// Model part a parameter belongs to; drives placement and accounting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Part {
    Embedding,
    LstmStack,
    AttnSoftmax,
}

/// Parameter part a canonical tensor name belongs to.
pub fn part_of(name: &str) -> Part {
    if name.starts_with("emb.") {
        Part::Embedding
    } else if name.starts_with("attn.") {
        Part::AttnSoftmax
    } else {
        Part::LstmStack
    }
}

/// Canonical tensor enumeration: (name, part, shape), in the fixed order
/// used for initialization, checkpoints and gradient reduction.
pub fn tensor_layout(cfg: &ModelConfig) -> Vec<(String, Part, Vec<usize>)> {
    let (v, e, h, l) = (
        cfg.vocab_size,
        cfg.embedding_size,
        cfg.hidden_size,
        cfg.depth,
    );
    let mut out = Vec::new();
    out.push(("emb.src".into(), Part::Embedding, vec![v, e]));
    out.push(("emb.tgt".into(), Part::Embedding, vec![v, e]));
    for side in ["enc", "dec"] {
        for layer in 0..l {
            let input = if side == "enc" {
                cfg.encoder_input_width(layer)
            } else {
                cfg.decoder_input_width(layer)
            };
            out.push((
                format!("{side}.l{layer}.wx"),
                Part::LstmStack,
                vec![input, 4 * h],
            ));
            out.push((
                format!("{side}.l{layer}.wh"),
                Part::LstmStack,
                vec![h, 4 * h],
            ));
            out.push((format!("{side}.l{layer}.b"), Part::LstmStack, vec![1, 4 * h]));
        }
    }
    out.push(("attn.w_alpha".into(), Part::AttnSoftmax, vec![h, h]));
    out.push(("attn.w_c".into(), Part::AttnSoftmax, vec![2 * h, h]));
    out.push(("attn.out_w".into(), Part::AttnSoftmax, vec![h, v]));
    out.push(("attn.out_b".into(), Part::AttnSoftmax, vec![1, v]));
    out
}

/// Exact parameter counts by part, from enumerating every tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartCounts {
    pub embedding: usize,
    pub lstm_stack: usize,
    pub attn_softmax: usize,
    pub total: usize,
}

pub fn param_count(cfg: &ModelConfig) -> PartCounts {
    let mut counts = PartCounts {
        embedding: 0,
        lstm_stack: 0,
        attn_softmax: 0,
        total: 0,
    };
    for (_, part, shape) in tensor_layout(cfg) {
        let n: usize = shape.iter().product();
        counts.total += n;
        match part {
            Part::Embedding => counts.embedding += n,
            Part::LstmStack => counts.lstm_stack += n,
            Part::AttnSoftmax => counts.attn_softmax += n,
        }
    }
    counts
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(variant: Variant) -> ModelConfig {
        ModelConfig {
            vocab_size: 32000,
            embedding_size: 512,
            hidden_size: 1024,
            depth: 4,
            variant,
            dropout: 0.3,
            precision: Precision::F32,
        }
    }

    #[test]
    fn input_feeding_delta_is_four_hidden_squared() {
        let with_if = param_count(&cfg(Variant::InputFeeding));
        let without = param_count(&cfg(Variant::NoInputFeeding));
        let h = 1024usize;
        assert_eq!(with_if.total - without.total, 4 * h * h);
        assert_eq!(with_if.total - without.total, 4_194_304);
        // Only the LSTM stack changes (decoder layer-1 input width).
        assert_eq!(with_if.embedding, without.embedding);
        assert_eq!(with_if.attn_softmax, without.attn_softmax);
    }

    #[test]
    fn toy_count_matches_brute_force_enumeration() {
        let c = ModelConfig {
            vocab_size: 10,
            embedding_size: 4,
            hidden_size: 8,
            depth: 2,
            variant: Variant::NoInputFeeding,
            dropout: 0.0,
            precision: Precision::F64,
        };
        // Independent enumeration of every tensor size.
        let (v, e, h) = (10usize, 4usize, 8usize);
        let emb = 2 * v * e;
        let enc_l0 = e * 4 * h + h * 4 * h + 4 * h;
        let enc_l1 = h * 4 * h + h * 4 * h + 4 * h;
        let dec_l0 = e * 4 * h + h * 4 * h + 4 * h; // no input feeding
        let dec_l1 = enc_l1;
        let attn = h * h + 2 * h * h + h * v + v;
        let want = emb + enc_l0 + enc_l1 + dec_l0 + dec_l1 + attn;
        let got = param_count(&c);
        assert_eq!(got.total, want);
        assert_eq!(got.embedding, emb);
        assert_eq!(got.lstm_stack, enc_l0 + enc_l1 + dec_l0 + dec_l1);
        assert_eq!(got.attn_softmax, attn);
    }

    #[test]
    fn attn_part_is_sum_of_its_tensors() {
        let c = cfg(Variant::NoInputFeeding);
        let got = param_count(&c);
        let (v, h) = (32000usize, 1024usize);
        assert_eq!(got.attn_softmax, h * h + 2 * h * h + h * v + v);
    }

    #[test]
    fn validation_rejects_bad_configs() {
        let mut c = cfg(Variant::InputFeeding);
        c.vocab_size = 3;
        assert!(c.validate().is_err());
        let mut c = cfg(Variant::InputFeeding);
        c.dropout = 1.0;
        assert!(c.validate().is_err());
        let mut c = cfg(Variant::InputFeeding);
        c.depth = 0;
        assert!(c.validate().is_err());
    }
}
