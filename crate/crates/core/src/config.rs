//! Run configuration: a flat `key = value` text file with `#` comments.
//!
//! Every key has a default; unknown keys are rejected so typos fail fast.
//! `parse(serialize(config)) == config` holds for any valid config.

use crate::error::{Error, Result};
use crate::model::{ModelConfig, Precision, Variant};
use crate::parallel::Strategy;
use crate::sim::{BatchCaps, CostModel};
use crate::trainer::TrainConfig;
use std::fmt::Write as _;
use std::path::Path;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    // Model.
    pub vocab_size: usize,
    pub embedding_size: usize,
    pub hidden_size: usize,
    pub depth: usize,
    pub variant: Variant,
    pub dropout: f64,
    pub precision: Precision,
    // Run.
    pub strategy: Strategy,
    pub n_devices: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub max_epochs: usize,
    pub learning_rate: f64,
    pub lr_decay_interval: u64,
    pub clip_norm: Option<f64>,
    pub target_dev_ppl: Option<f64>,
    // Paths.
    pub train_src: Option<String>,
    pub train_tgt: Option<String>,
    pub dev_src: Option<String>,
    pub dev_tgt: Option<String>,
    pub vocab_path: Option<String>,
    pub checkpoint_path: Option<String>,
    pub metrics_path: Option<String>,
    // Simulator cost model.
    pub sim_compute: f64,
    pub sim_transfer: f64,
    pub sim_sync: f64,
    pub sim_batch_exponent: f64,
    pub cap_serial: usize,
    pub cap_data_parallel: usize,
    pub cap_model_parallel: usize,
    pub sim_m: usize,
    pub sim_n: usize,
    // Bench.
    pub bench_batches: usize,
    pub bench_max_len: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let caps = BatchCaps::default();
        RunConfig {
            vocab_size: 1000,
            embedding_size: 32,
            hidden_size: 64,
            depth: 2,
            variant: Variant::NoInputFeeding,
            dropout: 0.0,
            precision: Precision::F32,
            strategy: Strategy::Serial,
            n_devices: 1,
            batch_size: 32,
            seed: 1,
            max_epochs: 30,
            learning_rate: 0.001,
            lr_decay_interval: 50,
            clip_norm: None,
            target_dev_ppl: None,
            train_src: None,
            train_tgt: None,
            dev_src: None,
            dev_tgt: None,
            vocab_path: None,
            checkpoint_path: None,
            metrics_path: None,
            sim_compute: 1.0,
            sim_transfer: 0.0,
            sim_sync: 0.0,
            sim_batch_exponent: 0.35,
            cap_serial: caps.serial,
            cap_data_parallel: caps.data_parallel,
            cap_model_parallel: caps.model_parallel,
            sim_m: 12,
            sim_n: 12,
            bench_batches: 3,
            bench_max_len: 12,
        }
    }
}

impl RunConfig {
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            vocab_size: self.vocab_size,
            embedding_size: self.embedding_size,
            hidden_size: self.hidden_size,
            depth: self.depth,
            variant: self.variant,
            dropout: self.dropout,
            precision: self.precision,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch_size,
            max_epochs: self.max_epochs,
            seed: self.seed,
            learning_rate: self.learning_rate,
            eval_interval: self.lr_decay_interval,
            clip_norm: self.clip_norm,
            target_dev_ppl: self.target_dev_ppl,
            baseline_tokens_per_sec: None,
        }
    }

    pub fn cost_model(&self) -> CostModel {
        CostModel {
            compute_per_unit: self.sim_compute,
            transfer_per_byte: self.sim_transfer,
            sync_per_param: self.sim_sync,
            batch_exponent: self.sim_batch_exponent,
            caps: BatchCaps {
                serial: self.cap_serial,
                data_parallel: self.cap_data_parallel,
                model_parallel: self.cap_model_parallel,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        self.cost_model().validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.n_devices == 0 {
            return Err(Error::Config("n_devices must be >= 1".into()));
        }
        if self.lr_decay_interval == 0 {
            return Err(Error::Config("lr_decay_interval must be >= 1".into()));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::Config("learning_rate must be > 0".into()));
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "line {}: expected `key = value`, got `{raw}`",
                    lineno + 1
                )));
            };
            let key = key.trim();
            let value = value.trim();
            cfg.set(key, value).map_err(|e| {
                Error::Config(format!("line {}: {e}", lineno + 1))
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::Config(format!("bad value `{v}` for {key}")))
        }
        match key {
            "vocab_size" => self.vocab_size = num(key, value)?,
            "embedding_size" => self.embedding_size = num(key, value)?,
            "hidden_size" => self.hidden_size = num(key, value)?,
            "depth" => self.depth = num(key, value)?,
            "variant" => self.variant = Variant::parse(value)?,
            "dropout" => self.dropout = num(key, value)?,
            "precision" => {
                self.precision = match value {
                    "f32" => Precision::F32,
                    "f64" => Precision::F64,
                    _ => return Err(Error::Config(format!("bad precision `{value}`"))),
                }
            }
            "strategy" => self.strategy = Strategy::parse(value)?,
            "n_devices" => self.n_devices = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "max_epochs" => self.max_epochs = num(key, value)?,
            "learning_rate" => self.learning_rate = num(key, value)?,
            "lr_decay_interval" => self.lr_decay_interval = num(key, value)?,
            "clip_norm" => self.clip_norm = Some(num(key, value)?),
            "target_dev_ppl" => self.target_dev_ppl = Some(num(key, value)?),
            "train_src" => self.train_src = Some(value.to_string()),
            "train_tgt" => self.train_tgt = Some(value.to_string()),
            "dev_src" => self.dev_src = Some(value.to_string()),
            "dev_tgt" => self.dev_tgt = Some(value.to_string()),
            "vocab_path" => self.vocab_path = Some(value.to_string()),
            "checkpoint_path" => self.checkpoint_path = Some(value.to_string()),
            "metrics_path" => self.metrics_path = Some(value.to_string()),
            "sim_compute" => self.sim_compute = num(key, value)?,
            "sim_transfer" => self.sim_transfer = num(key, value)?,
            "sim_sync" => self.sim_sync = num(key, value)?,
            "sim_batch_exponent" => self.sim_batch_exponent = num(key, value)?,
            "cap_serial" => self.cap_serial = num(key, value)?,
            "cap_data_parallel" => self.cap_data_parallel = num(key, value)?,
            "cap_model_parallel" => self.cap_model_parallel = num(key, value)?,
            "sim_m" => self.sim_m = num(key, value)?,
            "sim_n" => self.sim_n = num(key, value)?,
            "bench_batches" => self.bench_batches = num(key, value)?,
            "bench_max_len" => self.bench_max_len = num(key, value)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn serialize(&self) -> String {
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        kv("vocab_size", self.vocab_size.to_string());
        kv("embedding_size", self.embedding_size.to_string());
        kv("hidden_size", self.hidden_size.to_string());
        kv("depth", self.depth.to_string());
        kv("variant", self.variant.as_str().to_string());
        kv("dropout", self.dropout.to_string());
        kv(
            "precision",
            match self.precision {
                Precision::F32 => "f32".to_string(),
                Precision::F64 => "f64".to_string(),
            },
        );
        kv("strategy", self.strategy.as_str().to_string());
        kv("n_devices", self.n_devices.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("seed", self.seed.to_string());
        kv("max_epochs", self.max_epochs.to_string());
        kv("learning_rate", self.learning_rate.to_string());
        kv("lr_decay_interval", self.lr_decay_interval.to_string());
        if let Some(v) = self.clip_norm {
            kv("clip_norm", v.to_string());
        }
        if let Some(v) = self.target_dev_ppl {
            kv("target_dev_ppl", v.to_string());
        }
        for (k, v) in [
            ("train_src", &self.train_src),
            ("train_tgt", &self.train_tgt),
            ("dev_src", &self.dev_src),
            ("dev_tgt", &self.dev_tgt),
            ("vocab_path", &self.vocab_path),
            ("checkpoint_path", &self.checkpoint_path),
            ("metrics_path", &self.metrics_path),
        ] {
            if let Some(v) = v {
                kv(k, v.clone());
            }
        }
        kv("sim_compute", self.sim_compute.to_string());
        kv("sim_transfer", self.sim_transfer.to_string());
        kv("sim_sync", self.sim_sync.to_string());
        kv("sim_batch_exponent", self.sim_batch_exponent.to_string());
        kv("cap_serial", self.cap_serial.to_string());
        kv("cap_data_parallel", self.cap_data_parallel.to_string());
        kv("cap_model_parallel", self.cap_model_parallel.to_string());
        kv("sim_m", self.sim_m.to_string());
        kv("sim_n", self.sim_n.to_string());
        kv("bench_batches", self.bench_batches.to_string());
        kv("bench_max_len", self.bench_max_len.to_string());
        out
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)?;
        RunConfig::parse(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(std::fs::write(path, self.serialize())?)
    }
}
