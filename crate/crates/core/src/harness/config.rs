use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::fusion::FusionConfig;
use crate::model::ModelConfig;
use crate::tasks::MaskingConfig;
use crate::tensor::AdamWConfig;
use crate::vision::{CnnConfig, RegionConfig, NUM_STAGES};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    GenData,
    PretrainCnn,
    Pretrain,
    Finetune,
    Eval,
    Bench,
}

impl Mode {
    pub fn parse(s: &str) -> Result<Self> {
        serde_json::from_value(Value::String(s.to_string()))
            .map_err(|_| Error::Config(format!("unknown mode {s:?}")))
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::GenData => "gen-data",
            Self::PretrainCnn => "pretrain-cnn",
            Self::Pretrain => "pretrain",
            Self::Finetune => "finetune",
            Self::Eval => "eval",
            Self::Bench => "bench",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GridSampling {
    /// On while pre-training, off otherwise.
    Auto,
    On,
    Off,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FinetuneInit {
    Pretrained,
    Random,
}

/// Every tunable of every subcommand, as flat `key = value` pairs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub mode: Mode,
    pub seed: u64,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    /// Input checkpoint for finetune/eval; empty means the run's own default.
    pub checkpoint: String,
    pub split: String,

    pub image_height: usize,
    pub image_width: usize,
    pub resize_shorter: usize,
    pub resize_longer: usize,
    pub train_size: usize,
    pub eval_size: usize,

    pub cnn_channels: String,
    pub cnn_depth: usize,
    pub cnn_head_hidden: usize,
    pub cnn_train_images: usize,
    pub cnn_eval_images: usize,
    pub cnn_epochs: usize,
    pub cnn_batch_size: usize,
    pub cnn_lr: f64,

    pub layers: usize,
    pub width: usize,
    pub heads: usize,
    pub ffn_width: usize,
    pub max_text_len: usize,
    pub max_vocab: usize,
    pub grid_sample_k: usize,
    pub grid_sampling: GridSampling,
    pub grid_position: bool,
    pub dropout: f64,
    pub ln_eps: f64,
    pub tie_mlm_weights: bool,

    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub steps: usize,
    /// Linear warmup to `lr`, then linear decay to zero when `lr_decay`.
    pub warmup_steps: usize,
    pub lr_decay: bool,
    pub mask_prob: f64,
    pub mask_token_prob: f64,
    pub random_token_prob: f64,
    pub corrupt_prob: f64,

    pub finetune_init: FinetuneInit,
    pub finetune_lr: f64,
    pub finetune_steps: usize,
    pub finetune_eval_every: usize,
    pub qa_target: f64,
    pub eval_batch_size: usize,

    pub bench_sizes: String,
    pub bench_forward_sizes: String,
    pub bench_depths: String,
    pub bench_warmup: usize,
    pub bench_reps: usize,
    pub region_keep: usize,
    pub nms_iou: f64,
    pub region_head_hidden: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Pretrain,
            seed: 0,
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("runs"),
            checkpoint: String::new(),
            split: "eval".into(),
            image_height: 64,
            image_width: 96,
            resize_shorter: 64,
            resize_longer: 96,
            train_size: 4000,
            eval_size: 400,
            cnn_channels: "16,32,64,96,128".into(),
            cnn_depth: 1,
            cnn_head_hidden: 128,
            cnn_train_images: 2000,
            cnn_eval_images: 200,
            cnn_epochs: 6,
            cnn_batch_size: 32,
            cnn_lr: 2e-3,
            layers: 2,
            width: 64,
            heads: 4,
            ffn_width: 256,
            max_text_len: 20,
            max_vocab: 1000,
            grid_sample_k: 16,
            grid_sampling: GridSampling::Auto,
            grid_position: false,
            dropout: 0.1,
            ln_eps: 1e-12,
            tie_mlm_weights: true,
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.01,
            batch_size: 32,
            steps: 3000,
            warmup_steps: 0,
            lr_decay: false,
            mask_prob: 0.15,
            mask_token_prob: 0.8,
            random_token_prob: 0.1,
            corrupt_prob: 0.5,
            finetune_init: FinetuneInit::Pretrained,
            finetune_lr: 1e-4,
            finetune_steps: 3000,
            finetune_eval_every: 25,
            qa_target: 0.8,
            eval_batch_size: 64,
            bench_sizes: "64x96,96x160,160x256".into(),
            bench_forward_sizes: "64x64,96x160".into(),
            bench_depths: "1,2".into(),
            bench_warmup: 3,
            bench_reps: 20,
            region_keep: 100,
            nms_iou: 0.7,
            region_head_hidden: 1024,
        }
    }
}

/// Largest batch addressable by the per-sample random streams.
pub const MAX_BATCH: usize = 1000;

fn set_value(map: &mut Map<String, Value>, key: &str, raw: &str, origin: &str) -> Result<()> {
    let slot = map
        .get_mut(key)
        .ok_or_else(|| Error::Config(format!("unknown key {key:?} ({origin})")))?;
    let bad = |what: &str| Error::Config(format!("{key} = {raw:?} is not a valid {what} ({origin})"));
    *slot = match slot {
        Value::Bool(_) => Value::Bool(raw.parse().map_err(|_| bad("boolean"))?),
        Value::Number(n) if n.is_u64() => Value::from(raw.parse::<u64>().map_err(|_| bad("non-negative integer"))?),
        Value::Number(_) => {
            let v: f64 = raw.parse().map_err(|_| bad("number"))?;
            Value::Number(serde_json::Number::from_f64(v).ok_or_else(|| bad("finite number"))?)
        }
        _ => Value::String(raw.to_string()),
    };
    Ok(())
}

/// Splits `key = value` lines; `#` starts a comment.
pub fn parse_config_text(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
        out.push((k.trim().replace('-', "_"), v.trim().to_string()));
    }
    Ok(out)
}

/// Splits `--key value` / `--key=value` arguments.
pub fn parse_cli_overrides(args: &[String]) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    let mut it = args.iter();
    while let Some(arg) = it.next() {
        let key = arg
            .strip_prefix("--")
            .ok_or_else(|| Error::Config(format!("expected --key, found {arg:?}")))?;
        let (k, v) = match key.split_once('=') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None => {
                let v = it
                    .next()
                    .ok_or_else(|| Error::Config(format!("missing value for --{key}")))?;
                (key.to_string(), v.clone())
            }
        };
        out.push((k.replace('-', "_"), v));
    }
    Ok(out)
}

impl RunConfig {
    /// Defaults, then `file` pairs, then `cli` pairs; the result is validated.
    pub fn resolve(file: &[(String, String)], cli: &[(String, String)]) -> Result<Self> {
        let mut map = match serde_json::to_value(RunConfig::default()) {
            Ok(Value::Object(m)) => m,
            _ => unreachable!("RunConfig serializes to an object"),
        };
        for (k, v) in file {
            set_value(&mut map, k, v, "config file")?;
        }
        for (k, v) in cli {
            set_value(&mut map, k, v, "command line")?;
        }
        let cfg: RunConfig =
            serde_json::from_value(Value::Object(map)).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `--config FILE` (if present) and applies the remaining
    /// `--key value` overrides on top.
    pub fn from_args(args: &[String]) -> Result<Self> {
        let mut pairs = parse_cli_overrides(args)?;
        let mut file = Vec::new();
        if let Some(pos) = pairs.iter().position(|(k, _)| k == "config") {
            let (_, path) = pairs.remove(pos);
            let text = std::fs::read_to_string(&path).map_err(|e| Error::io(Path::new(&path), e))?;
            file = parse_config_text(&text)?;
        }
        Self::resolve(&file, &pairs)
    }

    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let Ok(Value::Object(map)) = serde_json::to_value(self) else {
            unreachable!("RunConfig serializes to an object")
        };
        map.into_iter()
            .map(|(k, v)| {
                let s = match v {
                    Value::String(s) => s,
                    other => other.to_string(),
                };
                (k, s)
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        for (name, v) in [
            ("image_height", self.image_height),
            ("image_width", self.image_width),
            ("resize_shorter", self.resize_shorter),
            ("resize_longer", self.resize_longer),
        ] {
            if v < 32 {
                return fail(format!("{name} must be at least 32, got {v}"));
            }
        }
        if !self.image_height.is_multiple_of(32) || !self.image_width.is_multiple_of(32) {
            return fail("generated images must be multiples of 32 on each side".into());
        }
        if self.resize_shorter > self.resize_longer {
            return fail("resize_shorter must not exceed resize_longer".into());
        }
        if self.train_size < 2 || self.eval_size < 2 {
            return fail("train_size and eval_size must be at least 2".into());
        }
        if self.cnn_train_images == 0 || self.cnn_train_images > self.train_size {
            return fail(format!("cnn_train_images must lie in 1..={}", self.train_size));
        }
        if self.cnn_eval_images == 0 || self.cnn_eval_images > self.eval_size {
            return fail(format!("cnn_eval_images must lie in 1..={}", self.eval_size));
        }
        if self.batch_size < 2 || self.batch_size > MAX_BATCH || self.cnn_batch_size == 0 || self.eval_batch_size == 0 {
            return fail(format!("batch sizes must lie in 2..={MAX_BATCH}"));
        }
        for (name, lr) in [("lr", self.lr), ("cnn_lr", self.cnn_lr), ("finetune_lr", self.finetune_lr)] {
            if !(lr > 0.0 && lr.is_finite()) {
                return fail(format!("{name} must be positive"));
            }
        }
        if !(0.0..=1.0).contains(&self.corrupt_prob) || !(0.0..=1.0).contains(&self.qa_target) {
            return fail("probabilities must lie in [0, 1]".into());
        }
        if self.finetune_eval_every == 0 || self.bench_reps < 20 || self.bench_warmup < 3 {
            return fail("finetune_eval_every must be positive; bench needs ≥3 warmup and ≥20 reps".into());
        }
        if !(self.nms_iou > 0.0 && self.nms_iou <= 1.0) {
            return fail("nms_iou must lie in (0, 1]".into());
        }
        if self.split.is_empty() || self.split.contains(['/', '\\']) {
            return fail(format!("invalid split name {:?}", self.split));
        }
        if self.mode == Mode::Finetune && self.grid_sampling == GridSampling::On {
            return fail("fine-tuning uses every grid; grid_sampling = on is not allowed".into());
        }
        if self.mode == Mode::Eval && self.grid_sampling == GridSampling::On {
            return fail("evaluation uses every grid; grid_sampling = on is not allowed".into());
        }
        self.cnn_config()?;
        self.masking().validate()?;
        self.fusion_config().validate()?;
        self.optimizer(self.lr)
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        self.bench_size_list()?;
        self.bench_forward_size_list()?;
        self.bench_depth_list()?;
        Ok(())
    }

    /// Whether grid sampling is active in the current mode.
    pub fn sampling_active(&self) -> bool {
        match self.grid_sampling {
            GridSampling::Auto => self.mode == Mode::Pretrain,
            GridSampling::On => true,
            GridSampling::Off => false,
        }
    }

    pub fn cnn_config(&self) -> Result<CnnConfig> {
        let parts: Vec<usize> = parse_list(&self.cnn_channels, "cnn_channels", |s| s.parse().ok())?;
        let channels: [usize; NUM_STAGES] = parts
            .try_into()
            .map_err(|_| Error::Config(format!("cnn_channels needs {NUM_STAGES} entries")))?;
        let cfg = CnnConfig {
            channels,
            depth: self.cnn_depth,
            head_hidden: self.cnn_head_hidden,
            ..CnnConfig::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn fusion_config(&self) -> FusionConfig {
        FusionConfig {
            layers: self.layers,
            width: self.width,
            heads: self.heads,
            ffn_width: self.ffn_width,
            max_text_len: self.max_text_len,
            grid_sample_k: self.grid_sample_k,
            dropout: self.dropout,
            ln_eps: self.ln_eps,
        }
    }

    pub fn model_config(&self, vocab_size: usize, visual_channels: usize) -> ModelConfig {
        ModelConfig {
            tie_mlm_weights: self.tie_mlm_weights,
            grid_position: self.grid_position,
            ..ModelConfig::new(self.fusion_config(), vocab_size, visual_channels)
        }
    }

    pub fn masking(&self) -> MaskingConfig {
        MaskingConfig {
            mask_prob: self.mask_prob,
            mask_token_prob: self.mask_token_prob,
            random_token_prob: self.random_token_prob,
        }
    }

    pub fn optimizer(&self, lr: f64) -> AdamWConfig {
        AdamWConfig {
            lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn region_config(&self) -> RegionConfig {
        RegionConfig {
            num_keep: self.region_keep,
            nms_iou: self.nms_iou as f32,
            head_hidden: self.region_head_hidden,
        }
    }

    /// Pre-training learning rate at `step`.
    pub fn lr_at(&self, step: usize) -> f64 {
        let warm = if self.warmup_steps > 0 {
            ((step + 1) as f64 / self.warmup_steps as f64).min(1.0)
        } else {
            1.0
        };
        let decay = if self.lr_decay && step >= self.warmup_steps {
            let span = self.steps.saturating_sub(self.warmup_steps).max(1) as f64;
            (1.0 - (step - self.warmup_steps) as f64 / span).max(0.0)
        } else {
            1.0
        };
        self.lr * warm * decay
    }

    pub fn bench_size_list(&self) -> Result<Vec<(usize, usize)>> {
        parse_sizes(&self.bench_sizes, "bench_sizes")
    }

    pub fn bench_forward_size_list(&self) -> Result<Vec<(usize, usize)>> {
        parse_sizes(&self.bench_forward_sizes, "bench_forward_sizes")
    }

    pub fn bench_depth_list(&self) -> Result<Vec<usize>> {
        parse_list(&self.bench_depths, "bench_depths", |s| s.parse().ok().filter(|d: &usize| *d > 0))
    }

    pub fn cnn_checkpoint_path(&self) -> PathBuf {
        self.out_dir.join("cnn.ckpt")
    }

    pub fn vocab_path(&self) -> PathBuf {
        self.out_dir.join("vocab.tsv")
    }

    pub fn pretrain_checkpoint_path(&self) -> PathBuf {
        self.out_dir.join("pretrain.ckpt")
    }

    /// Checkpoint read by finetune/eval.
    pub fn input_checkpoint(&self, fallback: PathBuf) -> PathBuf {
        if self.checkpoint.is_empty() {
            fallback
        } else {
            PathBuf::from(&self.checkpoint)
        }
    }
}

fn parse_list<T>(text: &str, key: &str, f: impl Fn(&str) -> Option<T>) -> Result<Vec<T>> {
    let items: Vec<T> = text
        .split(',')
        .map(|s| f(s.trim()).ok_or_else(|| Error::Config(format!("bad entry {s:?} in {key}"))))
        .collect::<Result<_>>()?;
    if items.is_empty() {
        return Err(Error::Config(format!("{key} is empty")));
    }
    Ok(items)
}

fn parse_sizes(text: &str, key: &str) -> Result<Vec<(usize, usize)>> {
    parse_list(text, key, |s| {
        let (h, w) = s.split_once('x')?;
        let (h, w): (usize, usize) = (h.trim().parse().ok()?, w.trim().parse().ok()?);
        (h >= 32 && w >= 32).then_some((h, w))
    })
}
