//! End-to-end runs through the harness in a scratch directory.

use std::fs;
use std::path::Path;

use grid_vlp::harness::train::{self, read_log, FinetuneSummary};
use grid_vlp::harness::{Checkpoint, FinetuneInit, GridSampling, Mode, RunConfig};
use grid_vlp::vision::{pad_to_stride, resized_dims, GRID_STRIDE};

use super::Measure;

pub type Outcome<T> = Result<T, Box<dyn std::error::Error>>;

/// Desk defaults rooted at `root`.
pub fn desk_config(root: &Path, seed: u64) -> RunConfig {
    RunConfig {
        seed,
        data_dir: root.join("data"),
        out_dir: root.join("runs"),
        ..RunConfig::default()
    }
}

/// A configuration small enough for the regular test run.
pub fn small_config(root: &Path, seed: u64) -> RunConfig {
    RunConfig {
        train_size: 96,
        eval_size: 45,
        cnn_channels: "4,8,8,16,16".into(),
        cnn_head_hidden: 16,
        cnn_train_images: 48,
        cnn_eval_images: 16,
        cnn_epochs: 1,
        cnn_batch_size: 16,
        layers: 1,
        width: 16,
        heads: 2,
        ffn_width: 32,
        grid_sample_k: 4,
        batch_size: 8,
        steps: 4,
        finetune_lr: 1e-3,
        finetune_steps: 60,
        finetune_eval_every: 30,
        qa_target: 1.1,
        eval_batch_size: 16,
        ..desk_config(root, seed)
    }
}

pub fn with_mode(cfg: &RunConfig, mode: Mode) -> RunConfig {
    RunConfig {
        mode,
        grid_sampling: GridSampling::Auto,
        ..cfg.clone()
    }
}

/// Renders the data and trains the grid encoder.
pub fn prepare(cfg: &RunConfig) -> Outcome<train::CnnSummary> {
    train::gen_data(&with_mode(cfg, Mode::GenData))?;
    Ok(train::pretrain_cnn(&with_mode(cfg, Mode::PretrainCnn))?)
}

pub fn finetune(cfg: &RunConfig, init: FinetuneInit) -> Outcome<FinetuneSummary> {
    let cfg = RunConfig {
        finetune_init: init,
        ..with_mode(cfg, Mode::Finetune)
    };
    Ok(train::finetune(&cfg)?)
}

/// Grid cells per image after the configured resize.
pub fn full_grid_tokens(cfg: &RunConfig) -> usize {
    let (h, w) = resized_dims(cfg.image_height, cfg.image_width, cfg.resize_shorter, cfg.resize_longer).unwrap();
    (pad_to_stride(h) / GRID_STRIDE) * (pad_to_stride(w) / GRID_STRIDE)
}

/// Two pre-training runs from the same seed into separate directories,
/// compared byte for byte.
pub fn pretrain_determinism(cfg: &RunConfig, steps: usize) -> Outcome<Measure> {
    let mut logs = Vec::new();
    for run in ["det_a", "det_b"] {
        let out = cfg.out_dir.join(run);
        fs::create_dir_all(&out)?;
        fs::copy(cfg.cnn_checkpoint_path(), out.join("cnn.ckpt"))?;
        let run_cfg = RunConfig {
            out_dir: out,
            steps,
            ..with_mode(cfg, Mode::Pretrain)
        };
        let summary = train::pretrain(&run_cfg)?;
        logs.push(fs::read(&summary.log)?);
    }
    let lines = logs[0].iter().filter(|&&b| b == b'\n').count();
    let mut m = Measure::exact("pre-training loss logs identical", usize::from(logs[0] != logs[1]));
    m.detail = format!("{lines} logged steps, {}", m.detail);
    Ok(m)
}

/// Reloads a checkpoint file and re-serializes it.
pub fn checkpoint_round_trip(path: &Path) -> Outcome<Measure> {
    let bytes = fs::read(path)?;
    let ck = Checkpoint::load(path)?;
    let again = ck.to_bytes();
    let tensors_equal = Checkpoint::from_bytes(&again)? == ck;
    let mismatches = usize::from(again != bytes) + usize::from(!tensors_equal);
    let mut m = Measure::exact("checkpoint round trip bitwise", mismatches);
    m.detail = format!("{} tensors, {} bytes, {}", ck.tensors.len(), bytes.len(), m.detail);
    Ok(m)
}

/// Every logged fine-tuning step fed every cell of every image.
pub fn finetune_full_grids(cfg: &RunConfig, summary: &FinetuneSummary) -> Outcome<Measure> {
    let expected = full_grid_tokens(cfg);
    let log = read_log(&summary.log)?;
    let bad = log
        .iter()
        .flat_map(|s| &s.grid_tokens)
        .filter(|&&n| n != expected)
        .count();
    let empty = usize::from(log.is_empty() || !summary.full_grids);
    let mut m = Measure::exact("fine-tuning uses full grids", bad + empty);
    m.detail = format!("{} steps at {expected} tokens, {}", log.len(), m.detail);
    Ok(m)
}
