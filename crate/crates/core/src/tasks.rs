//! Masked language modelling, image-text matching and question answering.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{FusedSequence, LayerNormParams, Linear};
use crate::tensor::{Bindings, ParamId, ParamStore, Real, Tape, Tensor, Var};
use crate::text::{TokenSequence, MASK, NUM_RESERVED};

/// Label value excluded from every loss.
pub const IGNORE: i64 = -1;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskingConfig {
    pub mask_prob: f64,
    /// Share of selected tokens replaced by `[MASK]`.
    pub mask_token_prob: f64,
    /// Share of selected tokens replaced by a random word.
    pub random_token_prob: f64,
}

impl Default for MaskingConfig {
    fn default() -> Self {
        Self {
            mask_prob: 0.15,
            mask_token_prob: 0.8,
            random_token_prob: 0.1,
        }
    }
}

impl MaskingConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |p: f64| (0.0..=1.0).contains(&p);
        if !unit(self.mask_prob)
            || !unit(self.mask_token_prob)
            || !unit(self.random_token_prob)
            || self.mask_token_prob + self.random_token_prob > 1.0
        {
            return Err(Error::Config(format!("invalid masking probabilities {self:?}")));
        }
        Ok(())
    }
}

/// Which replacement a selected token received.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskBranch {
    Mask,
    Random,
    Keep,
}

/// Masks word positions (never CLS, SEP or padding). Labels hold the
/// original id at selected positions and [`IGNORE`] elsewhere.
pub fn apply_mlm_masking<R: Rng + ?Sized>(
    tokens: &TokenSequence,
    vocab_size: usize,
    config: &MaskingConfig,
    rng: &mut R,
) -> (TokenSequence, Vec<i64>, Vec<Option<MaskBranch>>) {
    let mut out = tokens.clone();
    let mut labels = vec![IGNORE; tokens.len()];
    let mut branches = vec![None; tokens.len()];
    for pos in tokens.word_positions() {
        if !tokens.valid[pos] || rng.gen::<f64>() >= config.mask_prob {
            continue;
        }
        labels[pos] = tokens.ids[pos] as i64;
        let u = rng.gen::<f64>();
        let branch = if u < config.mask_token_prob {
            out.ids[pos] = MASK;
            MaskBranch::Mask
        } else if u < config.mask_token_prob + config.random_token_prob && vocab_size > NUM_RESERVED {
            out.ids[pos] = rng.gen_range(NUM_RESERVED..vocab_size);
            MaskBranch::Random
        } else {
            MaskBranch::Keep
        };
        branches[pos] = Some(branch);
    }
    (out, labels, branches)
}

/// ITM outcome for one sample: whose text it is paired with, and its label.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ItmDraw {
    pub text_from: usize,
    pub label: i64,
}

/// One batch member as seen by the corruption step. `content` identifies
/// what the caption describes; captions with equal content are never used
/// as negatives for each other.
#[derive(Clone, Debug)]
pub struct ItmSlot<'a> {
    pub eligible: bool,
    pub content: &'a [u8],
}

/// In-batch caption swap. Each eligible sample is corrupted with
/// probability `corrupt_prob` by taking the caption of a uniformly chosen
/// other eligible sample that describes different content; ineligible
/// samples get [`IGNORE`].
pub fn itm_corrupt<R: Rng + ?Sized>(slots: &[ItmSlot<'_>], corrupt_prob: f64, rng: &mut R) -> Result<Vec<ItmDraw>> {
    if !(0.0..=1.0).contains(&corrupt_prob) {
        return Err(Error::Config(format!("corrupt probability {corrupt_prob} outside [0, 1]")));
    }
    if slots.len() < 2 && corrupt_prob > 0.0 {
        return Err(Error::Invalid("caption swapping needs a batch of at least two".into()));
    }
    let mut draws = Vec::with_capacity(slots.len());
    for (i, slot) in slots.iter().enumerate() {
        if !slot.eligible {
            draws.push(ItmDraw {
                text_from: i,
                label: IGNORE,
            });
            continue;
        }
        if !rng.gen_bool(corrupt_prob) {
            draws.push(ItmDraw { text_from: i, label: 1 });
            continue;
        }
        let others: Vec<usize> = (0..slots.len())
            .filter(|&j| j != i && slots[j].eligible && slots[j].content != slot.content)
            .collect();
        draws.push(if others.is_empty() {
            ItmDraw { text_from: i, label: 1 }
        } else {
            ItmDraw {
                text_from: others[rng.gen_range(0..others.len())],
                label: 0,
            }
        });
    }
    Ok(draws)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadsConfig {
    pub vocab_size: usize,
    pub num_answers: usize,
    pub tie_mlm_weights: bool,
}

/// MLM transform + decoder, ITM classifier and QA MLP.
#[derive(Clone, Debug)]
pub struct TaskHeads {
    pub config: HeadsConfig,
    mlm_dense: Linear,
    mlm_norm: LayerNormParams,
    /// Separate decoder when weights are not tied to the token table.
    mlm_decoder: Option<ParamId>,
    mlm_bias: ParamId,
    itm: Linear,
    qa_hidden: Linear,
    qa_out: Linear,
}

impl TaskHeads {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        config: HeadsConfig,
        width: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if config.vocab_size <= NUM_RESERVED || config.num_answers < 2 {
            return Err(Error::Config(format!("invalid head sizes {config:?}")));
        }
        let v = config.vocab_size;
        Ok(Self {
            mlm_dense: Linear::new(store, "heads.mlm.dense", width, width, rng)?,
            mlm_norm: LayerNormParams::new(store, "heads.mlm.norm", width)?,
            mlm_decoder: if config.tie_mlm_weights {
                None
            } else {
                Some(store.add_normal("heads.mlm.decoder", &[width, v], 0.02, rng)?)
            },
            mlm_bias: store.add_full("heads.mlm.bias", &[v], 0.0)?,
            itm: Linear::new(store, "heads.itm", width, 2, rng)?,
            qa_hidden: Linear::new(store, "heads.qa.hidden", width, width, rng)?,
            qa_out: Linear::new(store, "heads.qa.out", width, config.num_answers, rng)?,
            config,
        })
    }

    /// Parameters of the QA head.
    pub fn qa_param_ids(&self) -> [ParamId; 4] {
        [self.qa_hidden.w, self.qa_hidden.b, self.qa_out.w, self.qa_out.b]
    }

    /// Vocabulary logits for the given rows of `states`.
    pub fn mlm_logits<T: Real>(
        &self,
        tape: &mut Tape<T>,
        params: &Bindings,
        states: Var,
        rows: &[usize],
        token_table: ParamId,
        ln_eps: f64,
    ) -> Result<Var> {
        let h = tape.gather_rows(states, rows)?;
        let h = self.mlm_dense.apply(tape, params, h)?;
        let h = tape.gelu(h)?;
        let h = self.mlm_norm.apply(tape, params, h, ln_eps)?;
        let decoder = match self.mlm_decoder {
            Some(w) => params[w],
            None => tape.transpose(params[token_table])?,
        };
        let logits = tape.matmul(h, decoder)?;
        Ok(tape.add_row(logits, params[self.mlm_bias])?)
    }

    pub fn itm_logits<T: Real>(&self, tape: &mut Tape<T>, params: &Bindings, cls: Var) -> Result<Var> {
        self.itm.apply(tape, params, cls)
    }

    pub fn qa_logits<T: Real>(&self, tape: &mut Tape<T>, params: &Bindings, cls: Var) -> Result<Var> {
        let h = self.qa_hidden.apply(tape, params, cls)?;
        let h = tape.gelu(h)?;
        self.qa_out.apply(tape, params, h)
    }
}

/// Labels for a batch: MLM per text position (`batch × text_len`), ITM and
/// QA per sample.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TaskLabels {
    pub mlm: Vec<i64>,
    pub itm: Vec<i64>,
    pub qa: Vec<i64>,
}

#[derive(Clone, Debug)]
pub struct TaskOutputs {
    pub mlm_logits: Option<Var>,
    /// Packed rows and targets of the masked positions.
    pub mlm_rows: Vec<usize>,
    pub mlm_targets: Vec<i64>,
    pub itm_logits: Var,
    pub qa_logits: Var,
    pub mlm: Var,
    pub itm: Var,
    pub qa: Var,
    pub total: Var,
}

/// Computes the three losses and their unit-weight sum. A task with no
/// labelled position contributes exactly zero.
pub fn task_losses<T: Real>(
    tape: &mut Tape<T>,
    params: &Bindings,
    heads: &TaskHeads,
    encoded: &FusedSequence,
    labels: &TaskLabels,
    token_table: ParamId,
    ln_eps: f64,
) -> Result<TaskOutputs> {
    let (b, text_len) = (encoded.batch, encoded.boundary);
    if labels.mlm.len() != b * text_len || labels.itm.len() != b || labels.qa.len() != b {
        return Err(Error::Invalid(format!(
            "label sizes ({}, {}, {}) do not fit a batch of {b} with {text_len} text positions",
            labels.mlm.len(),
            labels.itm.len(),
            labels.qa.len()
        )));
    }
    let mut mlm_rows = Vec::new();
    let mut mlm_targets = Vec::new();
    for s in 0..b {
        for t in 0..text_len {
            let l = labels.mlm[s * text_len + t];
            if l != IGNORE {
                mlm_rows.push(encoded.row(s, t));
                mlm_targets.push(l);
            }
        }
    }
    let (mlm_logits, mlm) = if mlm_rows.is_empty() {
        (None, tape.constant(Tensor::scalar(T::zero())))
    } else {
        let logits = heads.mlm_logits(tape, params, encoded.states, &mlm_rows, token_table, ln_eps)?;
        let loss = tape.cross_entropy(logits, &mlm_targets, IGNORE)?;
        (Some(logits), loss)
    };
    let cls = tape.gather_rows(encoded.states, &encoded.cls_rows())?;
    let itm_logits = heads.itm_logits(tape, params, cls)?;
    let itm = tape.cross_entropy(itm_logits, &labels.itm, IGNORE)?;
    let qa_logits = heads.qa_logits(tape, params, cls)?;
    let qa = tape.cross_entropy(qa_logits, &labels.qa, IGNORE)?;
    let total = tape.add(mlm, itm)?;
    let total = tape.add(total, qa)?;
    Ok(TaskOutputs {
        mlm_logits,
        mlm_rows,
        mlm_targets,
        itm_logits,
        qa_logits,
        mlm,
        itm,
        qa,
        total,
    })
}

/// Row-wise argmax of a logits tensor.
pub fn argmax_rows<T: Real>(logits: &Tensor<T>) -> Vec<usize> {
    (0..logits.rows())
        .map(|r| {
            let row = logits.row(r);
            (0..row.len()).fold(0, |best, j| if row[j] > row[best] { j } else { best })
        })
        .collect()
}
