//! Execution strategies and the assignment of model parts to devices.

use crate::error::{Error, Result};
use crate::model::graph::Batch;
use crate::model::{ModelConfig, Variant};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Strategy {
    Serial,
    DataParallel,
    ModelParallel,
    Hybrid,
    HybridIF,
}

impl Strategy {
    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Serial => "serial",
            Strategy::DataParallel => "data-parallel",
            Strategy::ModelParallel => "model-parallel",
            Strategy::Hybrid => "hybrid",
            Strategy::HybridIF => "hybrid-if",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "serial" => Ok(Strategy::Serial),
            "data-parallel" => Ok(Strategy::DataParallel),
            "model-parallel" => Ok(Strategy::ModelParallel),
            "hybrid" => Ok(Strategy::Hybrid),
            "hybrid-if" => Ok(Strategy::HybridIF),
            _ => Err(Error::Config(format!("unknown strategy `{s}`"))),
        }
    }

    pub const ALL: [Strategy; 5] = [
        Strategy::Serial,
        Strategy::DataParallel,
        Strategy::ModelParallel,
        Strategy::Hybrid,
        Strategy::HybridIF,
    ];

    /// The decoder variant this strategy's schedule assumes, if it forces
    /// one: the hybrid wavefront needs the input-feeding edge gone, and
    /// the hybrid-with-input-feeding comparison point needs it present.
    pub fn required_variant(self) -> Option<Variant> {
        match self {
            Strategy::Hybrid => Some(Variant::NoInputFeeding),
            Strategy::HybridIF => Some(Variant::InputFeeding),
            _ => None,
        }
    }
}

/// Assignment of layers and roles to virtual devices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlacementPlan {
    pub strategy: Strategy,
    pub n_devices: usize,
    /// Device owning each stack layer (same depth layer on the same device
    /// for encoder and decoder); embeddings live with layer 0.
    pub layer_to_device: Vec<usize>,
    /// Device storing the hidden states of all steps.
    pub state_device: usize,
    /// Devices sharing the attention-softmax work (replicas).
    pub attn_devices: Vec<usize>,
    /// Reduction root for gradients.
    pub root_device: usize,
    /// Bounded wait before a stalled receive is reported as a scheduling
    /// error instead of hanging.
    pub timeout_ms: u64,
}

impl PlacementPlan {
    pub fn device_of_layer(&self, layer: usize) -> usize {
        self.layer_to_device[layer]
    }

    pub fn embedding_device(&self) -> usize {
        self.layer_to_device[0]
    }

    pub fn top_device(&self) -> usize {
        *self.layer_to_device.last().unwrap()
    }

    /// Layers owned by device `d`, in ascending order.
    pub fn layers_of(&self, d: usize) -> Vec<usize> {
        self.layer_to_device
            .iter()
            .enumerate()
            .filter(|(_, &dev)| dev == d)
            .map(|(l, _)| l)
            .collect()
    }

    pub fn validate_for(&self, cfg: &ModelConfig) -> Result<()> {
        if self.layer_to_device.len() != cfg.depth {
            return Err(Error::Placement(format!(
                "plan covers {} layers, model has {}",
                self.layer_to_device.len(),
                cfg.depth
            )));
        }
        if let Some(required) = self.strategy.required_variant() {
            if cfg.variant != required {
                return Err(Error::Placement(format!(
                    "strategy {} requires the {} variant",
                    self.strategy.as_str(),
                    required.as_str()
                )));
            }
        }
        // Contiguous bottom-up spans per device keep activation flow linear.
        for w in self.layer_to_device.windows(2) {
            if w[1] < w[0] {
                return Err(Error::Placement(
                    "layer-to-device map must be non-decreasing".into(),
                ));
            }
        }
        if self.layer_to_device.iter().any(|&d| d >= self.n_devices)
            || self.state_device >= self.n_devices
            || self.root_device >= self.n_devices
            || self.attn_devices.iter().any(|&d| d >= self.n_devices)
        {
            return Err(Error::Placement("device id out of range".into()));
        }
        Ok(())
    }
}

/// Fixed split of `depth` layers over the three stack devices of the
/// four-device layouts: layer 1 with the embeddings on device 0, extra
/// layers stacked onto the later devices ({emb+1 | 2 | 3,4} at depth 4).
fn default_layer_split(depth: usize) -> Vec<usize> {
    match depth {
        1 => vec![0],
        2 => vec![0, 1],
        3 => vec![0, 1, 2],
        _ => {
            let base = depth / 3;
            let rem = depth % 3;
            let sizes = [base, base + usize::from(rem > 1), base + usize::from(rem > 0)];
            let mut out = Vec::with_capacity(depth);
            for (dev, &n) in sizes.iter().enumerate() {
                out.extend(std::iter::repeat(dev).take(n));
            }
            out
        }
    }
}

pub fn build_placement(
    strategy: Strategy,
    n_devices: usize,
    cfg: &ModelConfig,
) -> Result<PlacementPlan> {
    let plan = match strategy {
        Strategy::Serial => {
            if n_devices != 1 {
                return Err(Error::Placement(format!(
                    "serial runs on 1 device, got {n_devices}"
                )));
            }
            PlacementPlan {
                strategy,
                n_devices: 1,
                layer_to_device: vec![0; cfg.depth],
                state_device: 0,
                attn_devices: vec![0],
                root_device: 0,
                timeout_ms: 60_000,
            }
        }
        Strategy::DataParallel => {
            if !(2..=64).contains(&n_devices) {
                return Err(Error::Placement(format!(
                    "data-parallel needs 2..=64 devices, got {n_devices}"
                )));
            }
            PlacementPlan {
                strategy,
                n_devices,
                layer_to_device: vec![0; cfg.depth],
                state_device: 0,
                attn_devices: (0..n_devices).collect(),
                root_device: 0,
                timeout_ms: 60_000,
            }
        }
        Strategy::ModelParallel | Strategy::Hybrid | Strategy::HybridIF => {
            if n_devices != 4 {
                return Err(Error::Placement(format!(
                    "{} needs exactly 4 devices, got {n_devices}",
                    strategy.as_str()
                )));
            }
            let attn_devices = if strategy == Strategy::ModelParallel {
                vec![3]
            } else {
                vec![0, 1, 2, 3]
            };
            PlacementPlan {
                strategy,
                n_devices: 4,
                layer_to_device: default_layer_split(cfg.depth),
                state_device: 3,
                attn_devices,
                root_device: 0,
                timeout_ms: 60_000,
            }
        }
    };
    plan.validate_for(cfg)?;
    Ok(plan)
}

/// Splits `total` rows into at most `n` contiguous shards whose sizes
/// differ by at most one; shards never come out empty.
pub fn split_ranges(total: usize, n: usize) -> Vec<std::ops::Range<usize>> {
    let k = n.min(total);
    if k == 0 {
        return Vec::new();
    }
    let base = total / k;
    let rem = total % k;
    let mut out = Vec::with_capacity(k);
    let mut start = 0;
    for i in 0..k {
        let size = base + usize::from(i < rem);
        out.push(start..start + size);
        start += size;
    }
    out
}

/// Splits a batch into `n_shards` sub-batches (sizes differ by at most 1,
/// concatenation in shard order reproduces the batch) with each shard's
/// global row offset.
pub fn scatter_batch(batch: &Batch, n_shards: usize) -> Result<Vec<(usize, Batch)>> {
    if n_shards == 0 {
        return Err(Error::Placement("zero shards".into()));
    }
    if batch.len() < n_shards {
        return Err(Error::Placement(format!(
            "batch of {} sentences cannot fill {} shards",
            batch.len(),
            n_shards
        )));
    }
    split_ranges(batch.len(), n_shards)
        .into_iter()
        .map(|r| Ok((r.start, batch.slice(r.start, r.end)?)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Precision;

    fn cfg(depth: usize) -> ModelConfig {
        ModelConfig {
            vocab_size: 16,
            embedding_size: 4,
            hidden_size: 8,
            depth,
            variant: Variant::NoInputFeeding,
            dropout: 0.0,
            precision: Precision::F32,
        }
    }

    #[test]
    fn serial_maps_everything_to_device_zero() {
        let p = build_placement(Strategy::Serial, 1, &cfg(4)).unwrap();
        assert!(p.layer_to_device.iter().all(|&d| d == 0));
        assert_eq!(p.state_device, 0);
        assert!(build_placement(Strategy::Serial, 2, &cfg(4)).is_err());
    }

    #[test]
    fn hybrid_reproduces_the_four_device_layout() {
        let p = build_placement(Strategy::Hybrid, 4, &cfg(4)).unwrap();
        assert_eq!(p.layer_to_device, vec![0, 1, 2, 2]);
        assert_eq!(p.state_device, 3);
        assert_eq!(p.attn_devices, vec![0, 1, 2, 3]);
        assert_eq!(p.root_device, 0);
        assert_eq!(p.embedding_device(), 0);
    }

    #[test]
    fn data_parallel_replicates_with_root_zero() {
        let mut c = cfg(4);
        c.variant = Variant::InputFeeding;
        let p = build_placement(Strategy::DataParallel, 4, &c).unwrap();
        assert_eq!(p.n_devices, 4);
        assert_eq!(p.root_device, 0);
        assert_eq!(p.attn_devices.len(), 4);
    }

    #[test]
    fn model_parallel_puts_attention_on_the_state_device() {
        let p = build_placement(Strategy::ModelParallel, 4, &cfg(4)).unwrap();
        assert_eq!(p.attn_devices, vec![3]);
        assert!(build_placement(Strategy::ModelParallel, 3, &cfg(4)).is_err());
    }

    #[test]
    fn layer_split_handles_small_and_large_depths() {
        assert_eq!(default_layer_split(1), vec![0]);
        assert_eq!(default_layer_split(2), vec![0, 1]);
        assert_eq!(default_layer_split(3), vec![0, 1, 2]);
        assert_eq!(default_layer_split(4), vec![0, 1, 2, 2]);
        assert_eq!(default_layer_split(5), vec![0, 1, 1, 2, 2]);
        assert_eq!(default_layer_split(6), vec![0, 0, 1, 1, 2, 2]);
    }

    #[test]
    fn strategy_variant_requirements() {
        let p = build_placement(Strategy::Hybrid, 4, &cfg(4)).unwrap();
        let mut if_cfg = cfg(4);
        if_cfg.variant = Variant::InputFeeding;
        assert!(p.validate_for(&if_cfg).is_err());
        assert!(build_placement(Strategy::HybridIF, 4, &cfg(4)).is_err());
    }

    fn batch_of(n: usize) -> Batch {
        Batch::new(vec![vec![4, 5]; n], vec![vec![6]; n]).unwrap()
    }

    #[test]
    fn scatter_even_and_uneven() {
        let shards = scatter_batch(&batch_of(8), 4).unwrap();
        assert_eq!(shards.iter().map(|(_, b)| b.len()).collect::<Vec<_>>(), [2, 2, 2, 2]);
        let shards = scatter_batch(&batch_of(9), 4).unwrap();
        assert_eq!(shards.iter().map(|(_, b)| b.len()).collect::<Vec<_>>(), [3, 2, 2, 2]);
        let shards = scatter_batch(&batch_of(4), 4).unwrap();
        assert_eq!(shards.iter().map(|(_, b)| b.len()).collect::<Vec<_>>(), [1, 1, 1, 1]);
        assert_eq!(
            shards.iter().map(|(o, _)| *o).collect::<Vec<_>>(),
            [0, 1, 2, 3]
        );
        assert!(scatter_batch(&batch_of(3), 4).is_err());
    }

    #[test]
    fn scatter_concatenation_reproduces_batch() {
        let b = Batch::new(
            (0..7).map(|i| vec![4 + i]).collect(),
            (0..7).map(|i| vec![5 + i]).collect(),
        )
        .unwrap();
        let shards = scatter_batch(&b, 3).unwrap();
        let mut rebuilt: Vec<Vec<usize>> = Vec::new();
        for (_, s) in &shards {
            rebuilt.extend(s.src.clone());
        }
        assert_eq!(rebuilt, b.src);
    }

    #[test]
    fn split_ranges_never_empty() {
        assert_eq!(split_ranges(2, 4), vec![0..1, 1..2]);
        assert_eq!(split_ranges(0, 4), Vec::<std::ops::Range<usize>>::new());
        assert_eq!(split_ranges(5, 2), vec![0..3, 3..5]);
    }
}
