//! Single-stream Transformer over `[CLS, words…, SEP, grids…]`.

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Bindings, ParamId, ParamStore, Real, Tape, Tensor, Var};
use crate::text::SentenceEmbeddings;
use crate::vision::GridTokenSequence;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionConfig {
    pub layers: usize,
    pub width: usize,
    pub heads: usize,
    pub ffn_width: usize,
    pub max_text_len: usize,
    pub grid_sample_k: usize,
    pub dropout: f64,
    pub ln_eps: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            width: 64,
            heads: 4,
            ffn_width: 256,
            max_text_len: 20,
            grid_sample_k: 16,
            dropout: 0.1,
            ln_eps: 1e-12,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.heads == 0 || !self.width.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "width {} is not divisible by {} heads",
                self.width, self.heads
            )));
        }
        if self.grid_sample_k == 0 {
            return Err(Error::Config("grid_sample_k must be at least 1".into()));
        }
        if self.ffn_width == 0 || self.max_text_len == 0 {
            return Err(Error::Config("ffn_width and max_text_len must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) || !(self.ln_eps > 0.0) {
            return Err(Error::Config(format!(
                "dropout {} must lie in [0, 1) and ln_eps {} must be positive",
                self.dropout, self.ln_eps
            )));
        }
        Ok(())
    }

    /// Text positions per sequence, including CLS and SEP.
    pub fn text_positions(&self) -> usize {
        self.max_text_len + 2
    }
}

/// Sorted indices of a uniformly random `k`-subset of `0..n`; all of them
/// when `n <= k`.
pub fn sample_grid_indices<R: Rng + ?Sized>(n: usize, k: usize, rng: &mut R) -> Result<Vec<usize>> {
    if k == 0 {
        return Err(Error::Invalid("grid sample size must be at least 1".into()));
    }
    if n == 0 {
        return Err(Error::Invalid("cannot sample from an empty grid sequence".into()));
    }
    if n <= k {
        return Ok((0..n).collect());
    }
    let mut idx = index::sample(rng, n, k).into_vec();
    idx.sort_unstable();
    Ok(idx)
}

pub fn random_grid_sample<T: Real, R: Rng + ?Sized>(
    tape: &mut Tape<T>,
    grids: &GridTokenSequence,
    k: usize,
    rng: &mut R,
) -> Result<GridTokenSequence> {
    let idx = sample_grid_indices(grids.len(), k, rng)?;
    if idx.len() == grids.len() {
        return Ok(grids.clone());
    }
    Ok(GridTokenSequence {
        states: tape.gather_rows(grids.states, &idx)?,
        cells: idx.iter().map(|&i| grids.cells[i]).collect(),
    })
}

/// A batch of fused sequences packed as `[batch·seq_len, d]` rows.
#[derive(Clone, Debug)]
pub struct FusedSequence {
    pub states: Var,
    pub mask: Vec<bool>,
    pub batch: usize,
    pub seq_len: usize,
    /// Index of the first grid position (equal to the text length).
    pub boundary: usize,
    /// Real grid tokens per sample; the rest of the grid block is padding.
    pub grid_counts: Vec<usize>,
}

impl FusedSequence {
    pub fn row(&self, sample: usize, position: usize) -> usize {
        sample * self.seq_len + position
    }

    pub fn cls_rows(&self) -> Vec<usize> {
        (0..self.batch).map(|b| self.row(b, 0)).collect()
    }
}

pub fn build_input_sequence<T: Real>(
    tape: &mut Tape<T>,
    text: &SentenceEmbeddings,
    grids: &GridTokenSequence,
) -> Result<FusedSequence> {
    build_input_batch(tape, &[(text, grids)])
}

/// Concatenates text then grids for each sample; grid blocks are padded with
/// masked zero rows to the longest one in the batch.
pub fn build_input_batch<T: Real>(
    tape: &mut Tape<T>,
    items: &[(&SentenceEmbeddings, &GridTokenSequence)],
) -> Result<FusedSequence> {
    let first = items
        .first()
        .ok_or_else(|| Error::Invalid("empty fusion batch".into()))?;
    let boundary = first.0.valid.len();
    let width = tape.shape(first.0.states)[1];
    let max_grids = items.iter().map(|(_, g)| g.len()).max().unwrap_or(0);
    let mut parts = Vec::new();
    let mut mask = Vec::new();
    let mut grid_counts = Vec::new();
    for (text, grids) in items {
        let ts = tape.shape(text.states).to_vec();
        let gs = tape.shape(grids.states).to_vec();
        if ts[1] != width || gs[1] != width {
            return Err(Error::Invalid(format!(
                "width mismatch: text {ts:?}, grids {gs:?}, expected width {width}"
            )));
        }
        if text.valid.len() != boundary || ts[0] != boundary || gs[0] != grids.len() {
            return Err(Error::Invalid("text lengths differ within a batch".into()));
        }
        parts.push(text.states);
        parts.push(grids.states);
        mask.extend_from_slice(&text.valid);
        mask.extend(std::iter::repeat_n(true, grids.len()));
        let pad = max_grids - grids.len();
        if pad > 0 {
            parts.push(tape.constant(Tensor::zeros(&[pad, width])?));
            mask.extend(std::iter::repeat_n(false, pad));
        }
        grid_counts.push(grids.len());
    }
    let states = tape.concat_rows(&parts)?;
    Ok(FusedSequence {
        states,
        mask,
        batch: items.len(),
        seq_len: boundary + max_grids,
        boundary,
        grid_counts,
    })
}

#[derive(Clone, Debug)]
pub(crate) struct Linear {
    pub(crate) w: ParamId,
    pub(crate) b: ParamId,
}

impl Linear {
    pub(crate) fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            w: store.add_normal(format!("{name}.weight"), &[fan_in, fan_out], (1.0 / fan_in as f64).sqrt(), rng)?,
            b: store.add_full(format!("{name}.bias"), &[fan_out], 0.0)?,
        })
    }

    pub(crate) fn apply<T: Real>(&self, tape: &mut Tape<T>, params: &Bindings, x: Var) -> Result<Var> {
        let y = tape.matmul(x, params[self.w])?;
        Ok(tape.add_row(y, params[self.b])?)
    }
}

#[derive(Clone, Debug)]
pub(crate) struct LayerNormParams {
    pub(crate) gamma: ParamId,
    pub(crate) beta: ParamId,
}

impl LayerNormParams {
    pub(crate) fn new<T: Real>(store: &mut ParamStore<T>, name: &str, width: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.add_full(format!("{name}.gamma"), &[width], 1.0)?,
            beta: store.add_full(format!("{name}.beta"), &[width], 0.0)?,
        })
    }

    pub(crate) fn apply<T: Real>(&self, tape: &mut Tape<T>, params: &Bindings, x: Var, eps: f64) -> Result<Var> {
        Ok(tape.layer_norm(x, params[self.gamma], params[self.beta], T::from_f64_lossy(eps))?)
    }
}

#[derive(Clone, Debug)]
struct EncoderLayer {
    query: Linear,
    key: Linear,
    value: Linear,
    output: Linear,
    attn_norm: LayerNormParams,
    ffn_in: Linear,
    ffn_out: Linear,
    ffn_norm: LayerNormParams,
}

/// Stack of post-LN BERT blocks.
#[derive(Clone, Debug)]
pub struct FusionEncoder {
    pub config: FusionConfig,
    layers: Vec<EncoderLayer>,
}

impl FusionEncoder {
    pub fn new<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, config: FusionConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let (d, f) = (config.width, config.ffn_width);
        let layers = (0..config.layers)
            .map(|l| {
                let p = format!("fusion.layer{l}");
                Ok(EncoderLayer {
                    query: Linear::new(store, &format!("{p}.attn.query"), d, d, rng)?,
                    key: Linear::new(store, &format!("{p}.attn.key"), d, d, rng)?,
                    value: Linear::new(store, &format!("{p}.attn.value"), d, d, rng)?,
                    output: Linear::new(store, &format!("{p}.attn.output"), d, d, rng)?,
                    attn_norm: LayerNormParams::new(store, &format!("{p}.attn.norm"), d)?,
                    ffn_in: Linear::new(store, &format!("{p}.ffn.in"), d, f, rng)?,
                    ffn_out: Linear::new(store, &format!("{p}.ffn.out"), f, d, rng)?,
                    ffn_norm: LayerNormParams::new(store, &format!("{p}.ffn.norm"), d)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { config, layers })
    }

    /// Contextualises every position. Dropout is applied only when `rng` is
    /// given.
    pub fn encode<T: Real, R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<T>,
        params: &Bindings,
        seq: &FusedSequence,
        mut rng: Option<&mut R>,
    ) -> Result<FusedSequence> {
        let eps = self.config.ln_eps;
        let p = self.config.dropout;
        let mut x = seq.states;
        for layer in &self.layers {
            let q = layer.query.apply(tape, params, x)?;
            let k = layer.key.apply(tape, params, x)?;
            let v = layer.value.apply(tape, params, x)?;
            let a = tape.attention(q, k, v, seq.batch, self.config.heads, &seq.mask)?;
            let mut a = layer.output.apply(tape, params, a)?;
            if let Some(r) = rng.as_deref_mut() {
                a = tape.dropout(a, p, r)?;
            }
            let res = tape.add(x, a)?;
            x = layer.attn_norm.apply(tape, params, res, eps)?;

            let h = layer.ffn_in.apply(tape, params, x)?;
            let h = tape.gelu(h)?;
            let mut h = layer.ffn_out.apply(tape, params, h)?;
            if let Some(r) = rng.as_deref_mut() {
                h = tape.dropout(h, p, r)?;
            }
            let res = tape.add(x, h)?;
            x = layer.ffn_norm.apply(tape, params, res, eps)?;
        }
        Ok(FusedSequence {
            states: x,
            ..seq.clone()
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    type NoRng = ChaCha8Rng;

    fn tiny(layers: usize) -> FusionConfig {
        FusionConfig {
            layers,
            width: 8,
            heads: 2,
            ffn_width: 16,
            max_text_len: 3,
            grid_sample_k: 4,
            dropout: 0.0,
            ln_eps: 1e-12,
        }
    }

    fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn inputs(
        tape: &mut Tape<f64>,
        rng: &mut ChaCha8Rng,
        valid: Vec<bool>,
        n_grids: usize,
    ) -> (SentenceEmbeddings, GridTokenSequence) {
        let text = SentenceEmbeddings {
            states: tape.constant(random_tensor(rng, &[valid.len(), 8])),
            valid,
        };
        let grids = GridTokenSequence {
            states: tape.constant(random_tensor(rng, &[n_grids, 8])),
            cells: (0..n_grids).map(|i| (0, i)).collect(),
        };
        (text, grids)
    }

    #[test]
    fn sampling_cardinality() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(sample_grid_indices(6, 100, &mut rng).unwrap(), (0..6).collect::<Vec<_>>());
        for _ in 0..100 {
            let idx = sample_grid_indices(6, 4, &mut rng).unwrap();
            assert_eq!(idx.len(), 4);
            assert!(idx.windows(2).all(|w| w[0] < w[1]));
        }
        assert!(sample_grid_indices(0, 4, &mut rng).is_err());
        assert!(sample_grid_indices(4, 0, &mut rng).is_err());
    }

    #[test]
    fn sampling_is_reproducible() {
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..20)
                .map(|_| sample_grid_indices(30, 16, &mut rng).unwrap())
                .collect::<Vec<_>>()
        };
        assert_eq!(draw(5), draw(5));
        assert_ne!(draw(5), draw(6));
    }

    #[test]
    fn sampled_tokens_keep_their_cells() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut tape = Tape::new();
        let (_, grids) = inputs(&mut tape, &mut rng, vec![true], 6);
        let sub = random_grid_sample(&mut tape, &grids, 3, &mut rng).unwrap();
        assert_eq!(sub.len(), 3);
        for (j, cell) in sub.cells.iter().enumerate() {
            let src = cell.1;
            assert_eq!(tape.value(sub.states).row(j), tape.value(grids.states).row(src));
        }
    }

    #[test]
    fn sequence_layout() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut tape = Tape::new();
        let mut valid = vec![true; 5];
        valid.extend([false; 17]);
        let (text, grids) = inputs(&mut tape, &mut rng, valid, 6);
        let seq = build_input_sequence(&mut tape, &text, &grids).unwrap();
        assert_eq!((seq.seq_len, seq.boundary), (28, 22));
        assert_eq!(tape.shape(seq.states), &[28, 8]);
        assert!(seq.mask[22..].iter().all(|m| *m));
        assert!(seq.mask[5..22].iter().all(|m| !*m));
        assert_eq!(tape.value(seq.states).row(22), tape.value(grids.states).row(0));

        let (text, grids) = inputs(&mut tape, &mut rng, vec![true, true], 6);
        let seq = build_input_sequence(&mut tape, &text, &grids).unwrap();
        assert_eq!(seq.seq_len, 8);
    }

    #[test]
    fn ragged_grid_blocks_are_padded_and_masked() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut tape = Tape::new();
        let a = inputs(&mut tape, &mut rng, vec![true; 3], 2);
        let b = inputs(&mut tape, &mut rng, vec![true; 3], 4);
        let seq = build_input_batch(&mut tape, &[(&a.0, &a.1), (&b.0, &b.1)]).unwrap();
        assert_eq!((seq.batch, seq.seq_len), (2, 7));
        assert_eq!(seq.grid_counts, vec![2, 4]);
        assert_eq!(&seq.mask[..7], &[true, true, true, true, true, false, false]);
        assert!(seq.mask[7..].iter().all(|m| *m));
    }

    #[test]
    fn width_mismatch_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut tape = Tape::new();
        let (text, _) = inputs(&mut tape, &mut rng, vec![true; 3], 2);
        let grids = GridTokenSequence {
            states: tape.constant(random_tensor(&mut rng, &[2, 6])),
            cells: vec![(0, 0), (0, 1)],
        };
        assert!(build_input_sequence(&mut tape, &text, &grids).is_err());
    }

    #[test]
    fn zero_layers_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::<f64>::new();
        let enc = FusionEncoder::new(&mut store, tiny(0), &mut rng).unwrap();
        let mut tape = Tape::new();
        let params = store.bind(&mut tape);
        let (text, grids) = inputs(&mut tape, &mut rng, vec![true; 3], 2);
        let seq = build_input_sequence(&mut tape, &text, &grids).unwrap();
        let out = enc.encode::<_, NoRng>(&mut tape, &params, &seq, None).unwrap();
        assert_eq!(tape.value(out.states), tape.value(seq.states));
    }

    #[test]
    fn pad_inputs_do_not_affect_valid_outputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut store = ParamStore::<f64>::new();
        let enc = FusionEncoder::new(&mut store, tiny(2), &mut rng).unwrap();
        let valid = vec![true, true, false, false, true];
        let mut tape = Tape::new();
        let params = store.bind(&mut tape);
        let (text, grids) = inputs(&mut tape, &mut rng, valid.clone(), 3);
        let mut altered = tape.value(text.states).clone();
        for v in altered.data_mut()[2 * 8..4 * 8].iter_mut() {
            *v = *v * 7.0 + 3.0;
        }
        let text2 = SentenceEmbeddings {
            states: tape.constant(altered),
            valid,
        };
        let a = build_input_sequence(&mut tape, &text, &grids).unwrap();
        let b = build_input_sequence(&mut tape, &text2, &grids).unwrap();
        let oa = enc.encode::<_, NoRng>(&mut tape, &params, &a, None).unwrap();
        let ob = enc.encode::<_, NoRng>(&mut tape, &params, &b, None).unwrap();
        for pos in (0..a.seq_len).filter(|p| a.mask[*p]) {
            assert_eq!(tape.value(oa.states).row(pos), tape.value(ob.states).row(pos));
        }
    }

    #[test]
    fn dropout_is_training_only_and_seeded() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = ParamStore::<f64>::new();
        let enc = FusionEncoder::new(
            &mut store,
            FusionConfig {
                dropout: 0.5,
                ..tiny(1)
            },
            &mut rng,
        )
        .unwrap();
        let mut tape = Tape::new();
        let params = store.bind(&mut tape);
        let (text, grids) = inputs(&mut tape, &mut rng, vec![true; 3], 2);
        let seq = build_input_sequence(&mut tape, &text, &grids).unwrap();
        let eval1 = enc.encode::<_, NoRng>(&mut tape, &params, &seq, None).unwrap();
        let eval2 = enc.encode::<_, NoRng>(&mut tape, &params, &seq, None).unwrap();
        assert_eq!(tape.value(eval1.states), tape.value(eval2.states));
        let mut r1 = ChaCha8Rng::seed_from_u64(9);
        let mut r2 = ChaCha8Rng::seed_from_u64(9);
        let t1 = enc.encode(&mut tape, &params, &seq, Some(&mut r1)).unwrap();
        let t2 = enc.encode(&mut tape, &params, &seq, Some(&mut r2)).unwrap();
        assert_eq!(tape.value(t1.states), tape.value(t2.states));
        assert_ne!(tape.value(t1.states), tape.value(eval1.states));
    }

    #[test]
    fn config_validation() {
        assert!(FusionConfig::default().validate().is_ok());
        for bad in [
            FusionConfig { heads: 3, ..FusionConfig::default() },
            FusionConfig { grid_sample_k: 0, ..FusionConfig::default() },
            FusionConfig { dropout: 1.0, ..FusionConfig::default() },
        ] {
            assert!(bad.validate().is_err());
        }
    }
}
