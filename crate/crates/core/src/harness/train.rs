use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::checkpoint::Checkpoint;
use super::config::{FinetuneInit, Mode, RunConfig};
use crate::data::{answer_id, generate_split, read_dataset, write_dataset, Record, RecordKind, Sample};
use crate::error::{Error, Result};
use crate::fusion::sample_grid_indices;
use crate::model::{GridVlpModel, ModelConfig, ModelInput, VisualInput};
use crate::tasks::{apply_mlm_masking, argmax_rows, itm_corrupt, ItmSlot, TaskLabels, IGNORE};
use crate::tensor::{AdamW, Tape};
use crate::text::{tokenize, TokenSequence, Vocabulary, RESERVED_TOKENS};
use crate::vision::{bind_constant, resize_image, CellAccuracy, CnnEncoder, CnnPretrainReport, CnnTrainOptions, Image};

pub const TRAIN_SPLIT: &str = "train";
pub const EVAL_SPLIT: &str = "eval";

/// Independent random streams, keyed by purpose, step and sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Sample = 0,
    Batch = 1,
    Dropout = 2,
    Shuffle = 3,
    EvalMask = 4,
    Init = 5,
    FinetuneInit = 6,
}

pub fn stream_rng(seed: u64, purpose: Stream, step: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((purpose as u64) << 56) | (step << 10) | (index & 0x3ff));
    rng
}

fn split_seed(seed: u64, split: &str) -> u64 {
    match split {
        TRAIN_SPLIT => seed.wrapping_mul(2),
        _ => seed.wrapping_mul(2).wrapping_add(1),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataSummary {
    pub train: usize,
    pub eval: usize,
    pub root: PathBuf,
}

pub fn gen_data(cfg: &RunConfig) -> Result<DataSummary> {
    for (split, count) in [(TRAIN_SPLIT, cfg.train_size), (EVAL_SPLIT, cfg.eval_size)] {
        let samples = generate_split(split_seed(cfg.seed, split), count, cfg.image_height, cfg.image_width)?;
        write_dataset(&cfg.data_dir, split, &samples)?;
    }
    Ok(DataSummary {
        train: cfg.train_size,
        eval: cfg.eval_size,
        root: cfg.data_dir.clone(),
    })
}

fn load_split(cfg: &RunConfig, split: &str) -> Result<Vec<Sample>> {
    let dir = cfg.data_dir.join(split);
    if !dir.join(crate::data::MANIFEST).exists() {
        return Err(Error::Invalid(format!(
            "split {split:?} not found under {}; run gen-data first",
            cfg.data_dir.display()
        )));
    }
    read_dataset(&cfg.data_dir, split)
}

fn ensure_out_dir(cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::format("json", e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Resized, stride-padded copy of an image.
pub fn prepare_image(cfg: &RunConfig, img: &Image) -> Result<Image> {
    Ok(resize_image(img, cfg.resize_shorter, cfg.resize_longer)?.image)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CnnSummary {
    pub report: CnnPretrainReport,
    pub heldout: CellAccuracy,
    pub checkpoint: PathBuf,
}

/// Trains the grid encoder as a per-cell classifier and stores it frozen.
pub fn pretrain_cnn(cfg: &RunConfig) -> Result<CnnSummary> {
    ensure_out_dir(cfg)?;
    let train = load_split(cfg, TRAIN_SPLIT)?;
    let eval = load_split(cfg, EVAL_SPLIT)?;
    let prepare = |s: &[Sample]| -> Result<Vec<Sample>> {
        s.iter()
            .map(|s| {
                let image = prepare_image(cfg, &s.image)?;
                Ok(Sample {
                    record: s.record.clone(),
                    image,
                })
            })
            .collect()
    };
    let train = prepare(&train[..cfg.cnn_train_images.min(train.len())])?;
    let eval = prepare(&eval[..cfg.cnn_eval_images.min(eval.len())])?;
    let mut rng = stream_rng(cfg.seed, Stream::Init, 0, 1);
    let mut cnn = CnnEncoder::<f32>::new(cfg.cnn_config()?, &mut rng)?;
    let opts = CnnTrainOptions {
        epochs: cfg.cnn_epochs,
        batch_size: cfg.cnn_batch_size,
        optimizer: cfg.optimizer(cfg.cnn_lr),
        seed: cfg.seed,
    };
    let report = cnn.pretrain_classifier(&train, &opts)?;
    let heldout = cnn.cell_accuracy(&eval)?;
    let path = cfg.cnn_checkpoint_path();
    let meta = json!({ "cnn": cnn.config, "run": cfg });
    Checkpoint::from_store(meta, report.steps as u64, &rng, &cnn.store, None).save(&path)?;
    Ok(CnnSummary {
        report,
        heldout,
        checkpoint: path,
    })
}

/// Loads the frozen grid encoder.
pub fn load_cnn(path: &Path) -> Result<CnnEncoder<f32>> {
    if !path.exists() {
        return Err(Error::Invalid(format!(
            "CNN checkpoint {} not found; run pretrain-cnn first",
            path.display()
        )));
    }
    let ck = Checkpoint::load(path)?;
    let config = serde_json::from_value(ck.config.get("cnn").cloned().unwrap_or(Value::Null))
        .map_err(|e| Error::Checkpoint(format!("CNN config: {e}")))?;
    let mut cnn = CnnEncoder::from_store(config, ck.to_store()?)?;
    cnn.set_frozen(true);
    Ok(cnn)
}

/// Full grid features of every sample.
pub fn encode_visuals(cfg: &RunConfig, cnn: &CnnEncoder<f32>, samples: &[Sample]) -> Result<Vec<VisualInput<f32>>> {
    samples
        .iter()
        .map(|s| {
            let img = prepare_image(cfg, &s.image)?;
            VisualInput::from_grid(&cnn.encode_grid(&img)?)
        })
        .collect()
}

pub fn build_vocabulary(cfg: &RunConfig, records: &[Record]) -> Result<Vocabulary> {
    let texts: Vec<&str> = records.iter().map(|r| r.text.as_str()).collect();
    Vocabulary::build(&texts, cfg.max_vocab)
}

/// Objects a caption lists, as a sorted multiset of cell classes. Grid
/// tokens carry no position by default, so object order is not part of it.
pub fn caption_content(record: &Record) -> Vec<u8> {
    let mut objects: Vec<u8> = record.cell_labels.iter().flatten().copied().filter(|c| *c != 0).collect();
    objects.sort_unstable();
    objects
}

/// One JSON line of a training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub loss_total: f64,
    pub loss_mlm: f64,
    pub loss_itm: f64,
    pub loss_qa: f64,
    pub grid_tokens: Vec<usize>,
}

struct LogWriter {
    path: PathBuf,
    out: std::io::BufWriter<fs::File>,
}

impl LogWriter {
    fn create(path: PathBuf) -> Result<Self> {
        let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        Ok(Self {
            out: std::io::BufWriter::new(file),
            path,
        })
    }

    fn write(&mut self, entry: &StepLog) -> Result<()> {
        let line = serde_json::to_string(entry).map_err(|e| Error::format("log", e.to_string()))?;
        writeln!(self.out, "{line}").map_err(|e| Error::io(&self.path, e))
    }

    fn finish(mut self) -> Result<()> {
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}

pub fn read_log(path: &Path) -> Result<Vec<StepLog>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::format("log", e.to_string())))
        .collect()
}

/// Model, vocabulary and run settings stored in a fusion checkpoint.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelMeta {
    pub model: ModelConfig,
    pub vocab: Vec<String>,
    pub run: RunConfig,
}

pub fn save_model(path: &Path, meta: &ModelMeta, step: u64, rng: &ChaCha8Rng, model: &GridVlpModel<f32>, opt: Option<&AdamW<f32>>) -> Result<()> {
    let config = serde_json::to_value(meta).map_err(|e| Error::format("checkpoint config", e.to_string()))?;
    Checkpoint::from_store(config, step, rng, &model.store, opt.map(|o| &o.state)).save(path)
}

pub fn load_model(path: &Path) -> Result<(ModelMeta, GridVlpModel<f32>, Checkpoint)> {
    if !path.exists() {
        return Err(Error::Invalid(format!("checkpoint {} not found", path.display())));
    }
    let ck = Checkpoint::load(path)?;
    let meta: ModelMeta = serde_json::from_value(ck.config.clone())
        .map_err(|e| Error::Checkpoint(format!("model config: {e}")))?;
    let model = GridVlpModel::from_store(meta.model.clone(), &ck.to_store()?)?;
    Ok((meta, model, ck))
}

/// Rebuilds a vocabulary from its non-reserved words in id order.
fn vocab_from_words(words: &[String]) -> Result<Vocabulary> {
    let tsv: String = RESERVED_TOKENS
        .iter()
        .copied()
        .chain(words.iter().map(String::as_str))
        .enumerate()
        .map(|(i, w)| format!("{w}\t{i}\n"))
        .collect();
    Vocabulary::from_tsv(&tsv)
}

/// Training data with cached grid features.
pub struct PreparedSplit {
    pub records: Vec<Record>,
    pub visuals: Vec<VisualInput<f32>>,
}

pub fn prepare_split(cfg: &RunConfig, cnn: &CnnEncoder<f32>, split: &str) -> Result<PreparedSplit> {
    let samples = load_split(cfg, split)?;
    let visuals = encode_visuals(cfg, cnn, &samples)?;
    Ok(PreparedSplit {
        records: samples.into_iter().map(|s| s.record).collect(),
        visuals,
    })
}

struct Batch {
    tokens: Vec<TokenSequence>,
    visuals: Vec<VisualInput<f32>>,
    labels: TaskLabels,
}

impl Batch {
    fn inputs(&self) -> Vec<ModelInput<'_, f32>> {
        self.tokens
            .iter()
            .zip(&self.visuals)
            .map(|(tokens, visual)| ModelInput { tokens, visual })
            .collect()
    }
}

fn qa_label(record: &Record) -> Result<i64> {
    match (&record.kind, &record.answer) {
        (RecordKind::Qa, Some(a)) => answer_id(a)
            .map(|i| i as i64)
            .ok_or_else(|| Error::Invalid(format!("unknown answer {a:?}"))),
        _ => Ok(IGNORE),
    }
}

/// Grid sampling, caption swapping and masking for one pre-training batch.
fn pretrain_batch(
    cfg: &RunConfig,
    data: &PreparedSplit,
    vocab: &Vocabulary,
    indices: &[usize],
    step: usize,
) -> Result<Batch> {
    let contents: Vec<Vec<u8>> = indices.iter().map(|&i| caption_content(&data.records[i])).collect();
    let slots: Vec<ItmSlot> = indices
        .iter()
        .zip(&contents)
        .map(|(&i, c)| ItmSlot {
            eligible: data.records[i].kind == RecordKind::Caption,
            content: c,
        })
        .collect();
    let mut batch_rng = stream_rng(cfg.seed, Stream::Batch, step as u64, 0);
    let draws = itm_corrupt(&slots, cfg.corrupt_prob, &mut batch_rng)?;
    let masking = cfg.masking();
    let sampling = cfg.sampling_active();
    let mut batch = Batch {
        tokens: Vec::with_capacity(indices.len()),
        visuals: Vec::with_capacity(indices.len()),
        labels: TaskLabels::default(),
    };
    for (b, &i) in indices.iter().enumerate() {
        let mut rng = stream_rng(cfg.seed, Stream::Sample, step as u64, b as u64);
        let visual = &data.visuals[i];
        let visual = if sampling {
            visual.select(&sample_grid_indices(visual.len(), cfg.grid_sample_k, &mut rng)?)?
        } else {
            visual.clone()
        };
        let draw = draws[b];
        let text_record = &data.records[indices[draw.text_from]];
        let tokens = tokenize(&text_record.text, vocab, cfg.max_text_len);
        // masked either way, so [MASK] says nothing about alignment
        let (tokens, mut mlm, _) = apply_mlm_masking(&tokens, vocab.len(), &masking, &mut rng);
        if draw.label == 0 {
            mlm.fill(IGNORE);
        }
        batch.tokens.push(tokens);
        batch.visuals.push(visual);
        batch.labels.mlm.extend(mlm);
        batch.labels.itm.push(draw.label);
        batch.labels.qa.push(qa_label(&data.records[i])?);
    }
    Ok(batch)
}

/// Sample order for `epoch`, reshuffled deterministically every epoch.
fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream_rng(seed, Stream::Shuffle, epoch as u64, 0));
    order
}

fn batch_indices(seed: u64, step: usize, batch_size: usize, n: usize) -> Vec<usize> {
    let per_epoch = (n / batch_size).max(1);
    let (epoch, k) = (step / per_epoch, step % per_epoch);
    let order = epoch_order(seed, epoch, n);
    order.into_iter().skip(k * batch_size).take(batch_size).collect()
}

struct StepOutcome {
    log: StepLog,
}

fn train_step(
    model: &mut GridVlpModel<f32>,
    opt: &mut AdamW<f32>,
    batch: &Batch,
    dropout_rng: &mut ChaCha8Rng,
    step: usize,
) -> Result<StepOutcome> {
    let diverged = |e: Error| match e {
        Error::Tensor(source) => Error::Diverged { step, source },
        other => other,
    };
    let mut tape = Tape::new();
    let params = model.store.bind(&mut tape);
    let inputs = batch.inputs();
    let encoded = model
        .forward(&mut tape, &params, &inputs, Some(dropout_rng))
        .map_err(diverged)?;
    let out = model.losses(&mut tape, &params, &encoded, &batch.labels).map_err(diverged)?;
    tape.backward(out.total).map_err(|source| Error::Diverged { step, source })?;
    opt.step_store(&mut model.store, &tape, &params)
        .map_err(|source| Error::Diverged { step, source })?;
    let v = |var| tape.value(var).item() as f64;
    Ok(StepOutcome {
        log: StepLog {
            step,
            loss_total: v(out.total),
            loss_mlm: v(out.mlm),
            loss_itm: v(out.itm),
            loss_qa: v(out.qa),
            grid_tokens: encoded.grid_counts.clone(),
        },
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainSummary {
    pub steps: usize,
    pub first: Option<StepLog>,
    pub last: Option<StepLog>,
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub vocab_size: usize,
}

/// Multi-task pre-training of the fusion model over frozen grid features.
pub fn pretrain(cfg: &RunConfig) -> Result<PretrainSummary> {
    if cfg.mode != Mode::Pretrain {
        return Err(Error::Config(format!("pretrain called in mode {:?}", cfg.mode)));
    }
    ensure_out_dir(cfg)?;
    let cnn = load_cnn(&cfg.cnn_checkpoint_path())?;
    let data = prepare_split(cfg, &cnn, TRAIN_SPLIT)?;
    let vocab = build_vocabulary(cfg, &data.records)?;
    vocab.save(&cfg.vocab_path())?;
    let model_cfg = cfg.model_config(vocab.len(), cnn.config.out_channels());
    let mut init_rng = stream_rng(cfg.seed, Stream::Init, 0, 0);
    let mut model = GridVlpModel::<f32>::new(model_cfg.clone(), &mut init_rng)?;
    let mut opt = AdamW::new(cfg.optimizer(cfg.lr), &model.store)?;
    let log_path = cfg.out_dir.join("pretrain_log.jsonl");
    let mut log = LogWriter::create(log_path.clone())?;
    let (mut first, mut last) = (None, None);
    let n = data.records.len();
    let batch_size = cfg.batch_size.min(n);
    for step in 0..cfg.steps {
        let indices = batch_indices(cfg.seed, step, batch_size, n);
        let batch = pretrain_batch(cfg, &data, &vocab, &indices, step)?;
        let mut dropout_rng = stream_rng(cfg.seed, Stream::Dropout, step as u64, 0);
        opt.config.lr = cfg.lr_at(step);
        let out = train_step(&mut model, &mut opt, &batch, &mut dropout_rng, step)?;
        log.write(&out.log)?;
        if first.is_none() {
            first = Some(out.log.clone());
        }
        last = Some(out.log);
    }
    log.finish()?;
    let meta = ModelMeta {
        model: model_cfg,
        vocab: vocab.words().to_vec(),
        run: cfg.clone(),
    };
    let path = cfg.pretrain_checkpoint_path();
    let end_rng = stream_rng(cfg.seed, Stream::Batch, cfg.steps as u64, 0);
    save_model(&path, &meta, cfg.steps as u64, &end_rng, &model, Some(&opt))?;
    Ok(PretrainSummary {
        steps: cfg.steps,
        first,
        last,
        checkpoint: path,
        log: log_path,
        vocab_size: vocab.len(),
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub itm_accuracy: f64,
    pub itm_pairs: usize,
    pub qa_accuracy: f64,
    pub qa_questions: usize,
    pub mlm_accuracy: f64,
    pub mlm_tokens: usize,
}

/// Fraction of positions where `predicted` equals `expected`.
pub fn accuracy(predicted: &[usize], expected: &[usize]) -> f64 {
    if predicted.is_empty() {
        return 0.0;
    }
    let hits = predicted.iter().zip(expected).filter(|(p, e)| p == e).count();
    hits as f64 / predicted.len() as f64
}

/// Index of the next caption record after `i` (cyclically) describing
/// different content.
fn negative_caption(records: &[Record], i: usize) -> Option<usize> {
    let own = caption_content(&records[i]);
    (1..records.len())
        .map(|d| (i + d) % records.len())
        .find(|&j| records[j].kind == RecordKind::Caption && caption_content(&records[j]) != own)
}

struct EvalItem {
    tokens: TokenSequence,
    visual: usize,
    itm: i64,
    qa: i64,
    mlm: Vec<i64>,
}

/// Deterministic full-grid evaluation of ITM, QA and masked-token accuracy.
pub fn evaluate_model(
    cfg: &RunConfig,
    model: &GridVlpModel<f32>,
    vocab: &Vocabulary,
    data: &PreparedSplit,
) -> Result<EvalMetrics> {
    let masking = cfg.masking();
    let mut items = Vec::new();
    for (i, r) in data.records.iter().enumerate() {
        let tokens = tokenize(&r.text, vocab, cfg.max_text_len);
        let mut rng = stream_rng(cfg.seed, Stream::EvalMask, 0, 0);
        rng.set_word_pos(0);
        rng.set_stream(((Stream::EvalMask as u64) << 56) | i as u64);
        let (masked, mlm, _) = apply_mlm_masking(&tokens, vocab.len(), &masking, &mut rng);
        let n = tokens.len();
        // unmasked pass for ITM and QA
        items.push(EvalItem {
            tokens: tokens.clone(),
            visual: i,
            itm: if r.kind == RecordKind::Caption { 1 } else { IGNORE },
            qa: qa_label(r)?,
            mlm: vec![IGNORE; n],
        });
        items.push(EvalItem {
            tokens: masked,
            visual: i,
            itm: IGNORE,
            qa: IGNORE,
            mlm,
        });
        if r.kind == RecordKind::Caption {
            if let Some(j) = negative_caption(&data.records, i) {
                items.push(EvalItem {
                    tokens: tokenize(&data.records[j].text, vocab, cfg.max_text_len),
                    visual: i,
                    itm: 0,
                    qa: IGNORE,
                    mlm: vec![IGNORE; n],
                });
            }
        }
    }
    let (mut itm_p, mut itm_e, mut qa_p, mut qa_e, mut mlm_p, mut mlm_e) =
        (Vec::new(), Vec::new(), Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for chunk in items.chunks(cfg.eval_batch_size) {
        let mut tape = Tape::new();
        let params = bind_constant(&model.store, &mut tape);
        let inputs: Vec<ModelInput<f32>> = chunk
            .iter()
            .map(|it| ModelInput {
                tokens: &it.tokens,
                visual: &data.visuals[it.visual],
            })
            .collect();
        let labels = TaskLabels {
            mlm: chunk.iter().flat_map(|it| it.mlm.iter().copied()).collect(),
            itm: chunk.iter().map(|it| it.itm).collect(),
            qa: chunk.iter().map(|it| it.qa).collect(),
        };
        let encoded = model.forward::<ChaCha8Rng>(&mut tape, &params, &inputs, None)?;
        let out = model.losses(&mut tape, &params, &encoded, &labels)?;
        let itm_pred = argmax_rows(tape.value(out.itm_logits));
        let qa_pred = argmax_rows(tape.value(out.qa_logits));
        for (k, it) in chunk.iter().enumerate() {
            if it.itm != IGNORE {
                itm_p.push(itm_pred[k]);
                itm_e.push(it.itm as usize);
            }
            if it.qa != IGNORE {
                qa_p.push(qa_pred[k]);
                qa_e.push(it.qa as usize);
            }
        }
        if let Some(logits) = out.mlm_logits {
            mlm_p.extend(argmax_rows(tape.value(logits)));
            mlm_e.extend(out.mlm_targets.iter().map(|t| *t as usize));
        }
    }
    Ok(EvalMetrics {
        itm_accuracy: accuracy(&itm_p, &itm_e),
        itm_pairs: itm_p.len(),
        qa_accuracy: accuracy(&qa_p, &qa_e),
        qa_questions: qa_p.len(),
        mlm_accuracy: accuracy(&mlm_p, &mlm_e),
        mlm_tokens: mlm_p.len(),
    })
}

/// Evaluates a fusion checkpoint on `cfg.split` and writes the metrics.
pub fn run_eval(cfg: &RunConfig) -> Result<EvalMetrics> {
    ensure_out_dir(cfg)?;
    let (meta, model, _) = load_model(&cfg.input_checkpoint(cfg.pretrain_checkpoint_path()))?;
    let vocab = vocab_from_words(&meta.vocab)?;
    let cnn = load_cnn(&cfg.cnn_checkpoint_path())?;
    let data = prepare_split(cfg, &cnn, &cfg.split)?;
    let metrics = evaluate_model(cfg, &model, &vocab, &data)?;
    write_json(&cfg.out_dir.join(format!("eval_{}.json", cfg.split)), &metrics)?;
    Ok(metrics)
}

fn qa_subset(data: &PreparedSplit) -> PreparedSplit {
    let keep: Vec<usize> = (0..data.records.len())
        .filter(|&i| data.records[i].kind == RecordKind::Qa)
        .collect();
    PreparedSplit {
        records: keep.iter().map(|&i| data.records[i].clone()).collect(),
        visuals: keep.iter().map(|&i| data.visuals[i].clone()).collect(),
    }
}

fn qa_accuracy(cfg: &RunConfig, model: &GridVlpModel<f32>, vocab: &Vocabulary, data: &PreparedSplit) -> Result<f64> {
    let mut predicted = Vec::new();
    let mut expected = Vec::new();
    for start in (0..data.records.len()).step_by(cfg.eval_batch_size) {
        let end = (start + cfg.eval_batch_size).min(data.records.len());
        let tokens: Vec<TokenSequence> = data.records[start..end]
            .iter()
            .map(|r| tokenize(&r.text, vocab, cfg.max_text_len))
            .collect();
        let inputs: Vec<ModelInput<f32>> = tokens
            .iter()
            .zip(&data.visuals[start..end])
            .map(|(tokens, visual)| ModelInput { tokens, visual })
            .collect();
        let mut tape = Tape::new();
        let params = bind_constant(&model.store, &mut tape);
        let encoded = model.forward::<ChaCha8Rng>(&mut tape, &params, &inputs, None)?;
        let cls = tape.gather_rows(encoded.states, &encoded.cls_rows())?;
        let logits = model.heads.qa_logits(&mut tape, &params, cls)?;
        predicted.extend(argmax_rows(tape.value(logits)));
        for r in &data.records[start..end] {
            expected.push(qa_label(r)? as usize);
        }
    }
    Ok(accuracy(&predicted, &expected))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneSummary {
    pub init: FinetuneInit,
    pub steps_run: usize,
    /// First evaluated step count at which QA accuracy reached the target.
    pub steps_to_target: Option<usize>,
    pub curve: Vec<(usize, f64)>,
    pub losses: Vec<f64>,
    /// Whether every logged step used all grid tokens of every image.
    pub full_grids: bool,
    pub checkpoint: PathBuf,
    pub log: PathBuf,
}

/// QA fine-tuning with full grids, from the pre-trained checkpoint or from
/// scratch. Stops once held-out QA accuracy reaches `qa_target`.
pub fn finetune(cfg: &RunConfig) -> Result<FinetuneSummary> {
    if cfg.mode != Mode::Finetune || cfg.sampling_active() {
        return Err(Error::Config("fine-tuning requires mode finetune with grid sampling off".into()));
    }
    ensure_out_dir(cfg)?;
    let cnn = load_cnn(&cfg.cnn_checkpoint_path())?;
    let train_all = prepare_split(cfg, &cnn, TRAIN_SPLIT)?;
    let eval_all = prepare_split(cfg, &cnn, EVAL_SPLIT)?;
    let mut init_rng = stream_rng(cfg.seed, Stream::FinetuneInit, 0, 0);
    let (meta, mut model) = match cfg.finetune_init {
        FinetuneInit::Pretrained => {
            let (meta, mut model, _) = load_model(&cfg.input_checkpoint(cfg.pretrain_checkpoint_path()))?;
            model.reinit_qa_head(&mut init_rng)?;
            (meta, model)
        }
        FinetuneInit::Random => {
            let vocab = build_vocabulary(cfg, &train_all.records)?;
            let model_cfg = cfg.model_config(vocab.len(), cnn.config.out_channels());
            let model = GridVlpModel::new(model_cfg.clone(), &mut init_rng)?;
            let meta = ModelMeta {
                model: model_cfg,
                vocab: vocab.words().to_vec(),
                run: cfg.clone(),
            };
            (meta, model)
        }
    };
    let vocab = vocab_from_words(&meta.vocab)?;
    let train = qa_subset(&train_all);
    let eval = qa_subset(&eval_all);
    if train.records.is_empty() || eval.records.is_empty() {
        return Err(Error::Invalid("no question records to fine-tune on".into()));
    }
    let mut opt = AdamW::new(cfg.optimizer(cfg.finetune_lr), &model.store)?;
    let tag = match cfg.finetune_init {
        FinetuneInit::Pretrained => "pretrained",
        FinetuneInit::Random => "random",
    };
    let log_path = cfg.out_dir.join(format!("finetune_{tag}_log.jsonl"));
    let mut log = LogWriter::create(log_path.clone())?;
    let n = train.records.len();
    let batch_size = cfg.batch_size.min(n);
    let mut curve = Vec::new();
    let mut losses = Vec::new();
    let mut full_grids = true;
    let mut steps_to_target = None;
    let mut steps_run = 0;
    let initial = qa_accuracy(cfg, &model, &vocab, &eval)?;
    curve.push((0, initial));
    if initial >= cfg.qa_target {
        steps_to_target = Some(0);
    }
    while steps_to_target.is_none() && steps_run < cfg.finetune_steps {
        let step = steps_run;
        let indices = batch_indices(cfg.seed, step, batch_size, n);
        let batch = Batch {
            tokens: indices
                .iter()
                .map(|&i| tokenize(&train.records[i].text, &vocab, cfg.max_text_len))
                .collect(),
            visuals: indices.iter().map(|&i| train.visuals[i].clone()).collect(),
            labels: TaskLabels {
                mlm: vec![IGNORE; indices.len() * cfg.fusion_config().text_positions()],
                itm: vec![IGNORE; indices.len()],
                qa: indices
                    .iter()
                    .map(|&i| qa_label(&train.records[i]))
                    .collect::<Result<_>>()?,
            },
        };
        let mut dropout_rng = stream_rng(cfg.seed, Stream::Dropout, step as u64, 1);
        let out = train_step(&mut model, &mut opt, &batch, &mut dropout_rng, step)?;
        full_grids &= indices
            .iter()
            .zip(&out.log.grid_tokens)
            .all(|(&i, &g)| g == train.visuals[i].len());
        losses.push(out.log.loss_qa);
        log.write(&out.log)?;
        steps_run += 1;
        if steps_run % cfg.finetune_eval_every == 0 || steps_run == cfg.finetune_steps {
            let acc = qa_accuracy(cfg, &model, &vocab, &eval)?;
            curve.push((steps_run, acc));
            if acc >= cfg.qa_target {
                steps_to_target = Some(steps_run);
            }
        }
    }
    log.finish()?;
    let path = cfg.out_dir.join(format!("finetune_{tag}.ckpt"));
    save_model(&path, &meta, steps_run as u64, &init_rng, &model, Some(&opt))?;
    Ok(FinetuneSummary {
        init: cfg.finetune_init,
        steps_run,
        steps_to_target,
        curve,
        losses,
        full_grids,
        checkpoint: path,
        log: log_path,
    })
}
