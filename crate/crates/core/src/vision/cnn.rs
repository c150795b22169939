use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Image, GRID_STRIDE};
use crate::data::{Sample, NUM_CELL_CLASSES};
use crate::error::{Error, Result};
use crate::tensor::{AdamW, AdamWConfig, Bindings, ParamId, ParamStore, Real, Tape, Tensor, Var};

/// Number of stride-2 stages; 2^5 = 32.
pub const NUM_STAGES: usize = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CnnConfig {
    /// Output channels of each of the five stages.
    pub channels: [usize; NUM_STAGES],
    /// Convolutions per stage: one stride-2 conv plus `depth - 1` stride-1 convs.
    pub depth: usize,
    pub head_hidden: usize,
    pub num_classes: usize,
}

impl Default for CnnConfig {
    fn default() -> Self {
        Self {
            channels: [16, 32, 64, 96, 128],
            depth: 1,
            head_hidden: 128,
            num_classes: NUM_CELL_CLASSES,
        }
    }
}

impl CnnConfig {
    pub fn out_channels(&self) -> usize {
        self.channels[NUM_STAGES - 1]
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.channels.contains(&0) || self.head_hidden == 0 || self.num_classes < 2 {
            return Err(Error::Config(format!("invalid CNN configuration {self:?}")));
        }
        Ok(())
    }
}

/// `C×H×W` activation map of the final stage.
#[derive(Clone, Debug, PartialEq)]
pub struct GridFeatureMap<T> {
    pub features: Tensor<T>,
}

impl<T: Real> GridFeatureMap<T> {
    pub fn new(features: Tensor<T>) -> Result<Self> {
        if features.rank() != 3 {
            return Err(Error::Invalid(format!(
                "feature map must be C×H×W, got {:?}",
                features.shape()
            )));
        }
        Ok(Self { features })
    }

    pub fn channels(&self) -> usize {
        self.features.shape()[0]
    }

    pub fn rows(&self) -> usize {
        self.features.shape()[1]
    }

    pub fn cols(&self) -> usize {
        self.features.shape()[2]
    }

    pub fn num_cells(&self) -> usize {
        self.rows() * self.cols()
    }

    /// Feature vector of one cell.
    pub fn cell(&self, row: usize, col: usize) -> Vec<T> {
        let plane = self.num_cells();
        let i = row * self.cols() + col;
        (0..self.channels())
            .map(|c| self.features.data()[c * plane + i])
            .collect()
    }
}

#[derive(Clone, Debug)]
struct ConvLayer {
    kernels: ParamId,
    bias: ParamId,
    stride: usize,
}

/// Two fully-connected layers applied to each 1×1-pooled cell.
#[derive(Clone, Debug)]
pub struct CellClassifierHead {
    pub fc1_w: ParamId,
    pub fc1_b: ParamId,
    pub fc2_w: ParamId,
    pub fc2_b: ParamId,
}

/// Stride-32 convolutional grid encoder with its pre-training head.
#[derive(Clone, Debug)]
pub struct CnnEncoder<T> {
    pub config: CnnConfig,
    pub store: ParamStore<T>,
    convs: Vec<ConvLayer>,
    pub head: CellClassifierHead,
}

impl<T: Real> CnnEncoder<T> {
    pub fn new<R: Rng + ?Sized>(config: CnnConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut convs = Vec::new();
        let mut cin = 3;
        for (s, &cout) in config.channels.iter().enumerate() {
            for b in 0..config.depth {
                let fan_in = (cin * 9) as f64;
                let kernels = store.add_normal(
                    format!("cnn.stage{s}.conv{b}.weight"),
                    &[cout, cin, 3, 3],
                    (2.0 / fan_in).sqrt(),
                    rng,
                )?;
                let bias = store.add_full(format!("cnn.stage{s}.conv{b}.bias"), &[cout], 0.0)?;
                convs.push(ConvLayer {
                    kernels,
                    bias,
                    stride: if b == 0 { 2 } else { 1 },
                });
                cin = cout;
            }
        }
        let c = config.out_channels();
        let head = CellClassifierHead {
            fc1_w: store.add_normal("cnn.head.fc1.weight", &[c, config.head_hidden], (2.0 / c as f64).sqrt(), rng)?,
            fc1_b: store.add_full("cnn.head.fc1.bias", &[config.head_hidden], 0.0)?,
            fc2_w: store.add_normal(
                "cnn.head.fc2.weight",
                &[config.head_hidden, config.num_classes],
                (1.0 / config.head_hidden as f64).sqrt(),
                rng,
            )?,
            fc2_b: store.add_full("cnn.head.fc2.bias", &[config.num_classes], 0.0)?,
        };
        Ok(Self {
            config,
            store,
            convs,
            head,
        })
    }

    /// Rebuilds the module structure around an existing parameter store.
    pub fn from_store(config: CnnConfig, store: ParamStore<T>) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut fresh = Self::new(config, &mut rng)?;
        fresh
            .store
            .load_from(&store)
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        Ok(fresh)
    }

    pub fn num_convs(&self) -> usize {
        self.convs.len()
    }

    /// Freezes (or unfreezes) every parameter.
    pub fn set_frozen(&mut self, frozen: bool) {
        for id in self.store.ids().collect::<Vec<_>>() {
            self.store.set_frozen(id, frozen);
        }
    }

    pub fn is_frozen(&self) -> bool {
        self.store.ids().all(|id| self.store.is_frozen(id))
    }

    /// Conv stack on `[3,H,W]` or `[N,3,H,W]` input.
    pub fn forward(&self, tape: &mut Tape<T>, params: &Bindings, input: Var) -> Result<Var> {
        let mut x = input;
        for layer in &self.convs {
            x = tape.conv2d(x, params[layer.kernels], Some(params[layer.bias]), layer.stride, 1)?;
            x = tape.relu(x)?;
        }
        Ok(x)
    }

    /// Per-cell class logits `[N·h·w, classes]` from a `[N,C,h,w]` (or
    /// `[C,h,w]`) map. A 1×1 RoIPool over a single cell is that cell's
    /// vector, so cells feed the two FC layers directly.
    pub fn classify_cells(&self, tape: &mut Tape<T>, params: &Bindings, fmap: Var) -> Result<Var> {
        let rows = cells_as_rows(tape, fmap)?;
        let h = tape.matmul(rows, params[self.head.fc1_w])?;
        let h = tape.add_row(h, params[self.head.fc1_b])?;
        let h = tape.relu(h)?;
        let logits = tape.matmul(h, params[self.head.fc2_w])?;
        Ok(tape.add_row(logits, params[self.head.fc2_b])?)
    }

    /// Grid features of one image whose sides are multiples of 32.
    pub fn encode_grid(&self, img: &Image) -> Result<GridFeatureMap<T>> {
        let (rows, cols) = img.grid_dims().ok_or_else(|| {
            Error::Invalid(format!(
                "image {}x{} is not a multiple of {GRID_STRIDE}",
                img.height(),
                img.width()
            ))
        })?;
        let mut tape = Tape::new();
        let params = bind_constant(&self.store, &mut tape);
        let input = tape.constant(image_tensor(img)?);
        let out = self.forward(&mut tape, &params, input)?;
        let fmap = GridFeatureMap::new(tape.value(out).clone())?;
        debug_assert_eq!((fmap.rows(), fmap.cols()), (rows, cols));
        Ok(fmap)
    }
}

/// Binds every parameter as a constant leaf.
pub(crate) fn bind_constant<T: Real>(store: &ParamStore<T>, tape: &mut Tape<T>) -> Bindings {
    Bindings::from_vars(store.ids().map(|id| tape.constant(store.get(id).clone())).collect())
}

pub fn image_tensor<T: Real>(img: &Image) -> Result<Tensor<T>> {
    Ok(Tensor::new(
        vec![3, img.height(), img.width()],
        img.data().iter().map(|v| T::from_f64_lossy(*v as f64)).collect(),
    )?)
}

fn batch_tensor<T: Real>(images: &[&Image]) -> Result<Tensor<T>> {
    let (h, w) = (images[0].height(), images[0].width());
    let mut data = Vec::with_capacity(images.len() * 3 * h * w);
    for img in images {
        if (img.height(), img.width()) != (h, w) {
            return Err(Error::Invalid("images in a batch must share a size".into()));
        }
        data.extend(img.data().iter().map(|v| T::from_f64_lossy(*v as f64)));
    }
    Ok(Tensor::new(vec![images.len(), 3, h, w], data)?)
}

/// `[N,C,h,w]` → `[N·h·w, C]`, cells in row-major order within each image.
fn cells_as_rows<T: Real>(tape: &mut Tape<T>, fmap: Var) -> Result<Var> {
    let shape = tape.shape(fmap).to_vec();
    let (n, c, hw) = match shape.as_slice() {
        [c, h, w] => (1, *c, h * w),
        [n, c, h, w] => (*n, *c, h * w),
        _ => return Err(Error::Invalid(format!("feature map rank {}", shape.len()))),
    };
    let flat = tape.reshape(fmap, vec![n * c, hw])?;
    let t = tape.transpose(flat)?; // [hw, n*c]
    if n == 1 {
        return Ok(t);
    }
    // pick column block n for every cell: rows of the [hw*n, c] view
    let view = tape.reshape(t, vec![hw * n, c])?;
    let idx: Vec<usize> = (0..n).flat_map(|b| (0..hw).map(move |p| p * n + b)).collect();
    Ok(tape.gather_rows(view, &idx)?)
}

fn flat_labels(samples: &[&Sample]) -> Vec<i64> {
    samples
        .iter()
        .flat_map(|s| s.record.cell_labels.iter().flatten().map(|l| *l as i64))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CnnPretrainReport {
    pub epochs: usize,
    pub steps: usize,
    pub final_loss: f64,
    pub train_accuracy: CellAccuracy,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellAccuracy {
    /// Fraction of cells classified correctly.
    pub overall: f64,
    /// Mean per-class recall over classes present in the labels.
    pub balanced: f64,
}

#[derive(Clone, Debug)]
pub struct CnnTrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    pub seed: u64,
}

impl<T: Real> CnnEncoder<T> {
    /// Trains the encoder and its per-cell head on cell labels, then freezes
    /// the encoder.
    pub fn pretrain_classifier(&mut self, samples: &[Sample], opts: &CnnTrainOptions) -> Result<CnnPretrainReport> {
        if samples.is_empty() || opts.batch_size == 0 {
            return Err(Error::Invalid("CNN pre-training needs samples and a positive batch size".into()));
        }
        for s in samples {
            let dims = s.image.grid_dims();
            let labels = (s.record.cell_labels.len(), s.record.cell_labels.first().map_or(0, Vec::len));
            if dims != Some(labels) {
                return Err(Error::Invalid(format!(
                    "label grid {labels:?} of {} does not match feature map {dims:?}",
                    s.record.id
                )));
            }
        }
        self.set_frozen(false);
        let mut opt = AdamW::new(opts.optimizer, &self.store)?;
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let mut order: Vec<usize> = (0..samples.len()).collect();
        let mut steps = 0;
        let mut last_loss = f64::NAN;
        for _ in 0..opts.epochs {
            order.shuffle(&mut rng);
            for chunk in order.chunks(opts.batch_size) {
                let batch: Vec<&Sample> = chunk.iter().map(|&i| &samples[i]).collect();
                let images: Vec<&Image> = batch.iter().map(|s| &s.image).collect();
                let mut tape = Tape::new();
                let params = self.store.bind(&mut tape);
                let input = tape.constant(batch_tensor(&images)?);
                let fmap = self.forward(&mut tape, &params, input)?;
                let logits = self.classify_cells(&mut tape, &params, fmap)?;
                let loss = tape
                    .cross_entropy(logits, &flat_labels(&batch), -1)
                    .map_err(|source| Error::Diverged { step: steps, source })?;
                tape.backward(loss)?;
                opt.step_store(&mut self.store, &tape, &params)?;
                last_loss = tape.value(loss).item().to_f64_lossy();
                steps += 1;
            }
        }
        self.set_frozen(true);
        let train_accuracy = self.cell_accuracy(samples)?;
        Ok(CnnPretrainReport {
            epochs: opts.epochs,
            steps,
            final_loss: last_loss,
            train_accuracy,
        })
    }

    pub fn cell_accuracy(&self, samples: &[Sample]) -> Result<CellAccuracy> {
        let k = self.config.num_classes;
        let mut hits = vec![0usize; k];
        let mut seen = vec![0usize; k];
        for chunk in samples.chunks(32) {
            let batch: Vec<&Sample> = chunk.iter().collect();
            let images: Vec<&Image> = batch.iter().map(|s| &s.image).collect();
            let mut tape = Tape::new();
            let params = bind_constant(&self.store, &mut tape);
            let input = tape.constant(batch_tensor(&images)?);
            let fmap = self.forward(&mut tape, &params, input)?;
            let logits = self.classify_cells(&mut tape, &params, fmap)?;
            let lv = tape.value(logits);
            for (r, label) in flat_labels(&batch).iter().enumerate() {
                let row = lv.row(r);
                let pred = (0..row.len())
                    .max_by(|a, b| row[*a].partial_cmp(&row[*b]).expect("finite logits"))
                    .expect("non-empty row");
                let label = *label as usize;
                if label >= k {
                    return Err(Error::Invalid(format!("cell label {label} outside {k} classes")));
                }
                hits[label] += (pred == label) as usize;
                seen[label] += 1;
            }
        }
        let total: usize = seen.iter().sum();
        let present: Vec<usize> = (0..k).filter(|&c| seen[c] > 0).collect();
        Ok(CellAccuracy {
            overall: hits.iter().sum::<usize>() as f64 / total.max(1) as f64,
            balanced: present
                .iter()
                .map(|&c| hits[c] as f64 / seen[c] as f64)
                .sum::<f64>()
                / present.len().max(1) as f64,
        })
    }
}
