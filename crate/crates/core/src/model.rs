//! Text embeddings, grid projection, fusion encoder and task heads under one
//! parameter store.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::ANSWERS;
use crate::error::{Error, Result};
use crate::fusion::{build_input_batch, FusedSequence, FusionConfig, FusionEncoder};
use crate::tasks::{task_losses, HeadsConfig, TaskHeads, TaskLabels, TaskOutputs};
use crate::tensor::{Bindings, ParamId, ParamStore, Real, Tape, Tensor};
use crate::text::{TextEmbeddingTables, TokenSequence};
use crate::vision::{flatten_grid, GridFeatureMap, GridProjection, GridTokenSequence};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub fusion: FusionConfig,
    pub vocab_size: usize,
    pub visual_channels: usize,
    pub num_answers: usize,
    pub tie_mlm_weights: bool,
    pub grid_position: bool,
}

impl ModelConfig {
    pub fn new(fusion: FusionConfig, vocab_size: usize, visual_channels: usize) -> Self {
        Self {
            fusion,
            vocab_size,
            visual_channels,
            num_answers: ANSWERS.len(),
            tie_mlm_weights: true,
            grid_position: false,
        }
    }
}

/// Visual features of one image as rows `[n, C]` with their source cells.
#[derive(Clone, Debug, PartialEq)]
pub struct VisualInput<T> {
    pub features: Tensor<T>,
    pub cells: Vec<(usize, usize)>,
}

impl<T: Real> VisualInput<T> {
    pub fn from_grid(fmap: &GridFeatureMap<T>) -> Result<Self> {
        let (features, cells) = flatten_grid(fmap)?;
        Ok(Self { features, cells })
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    /// Keeps the rows at `idx`, in that order.
    pub fn select(&self, idx: &[usize]) -> Result<Self> {
        let c = self.features.last_dim();
        let mut data = Vec::with_capacity(idx.len() * c);
        let mut cells = Vec::with_capacity(idx.len());
        for &i in idx {
            if i >= self.len() {
                return Err(Error::Invalid(format!("grid index {i} out of {}", self.len())));
            }
            data.extend_from_slice(self.features.row(i));
            cells.push(self.cells[i]);
        }
        Ok(Self {
            features: Tensor::new(vec![idx.len(), c], data)?,
            cells,
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ModelInput<'a, T> {
    pub tokens: &'a TokenSequence,
    pub visual: &'a VisualInput<T>,
}

#[derive(Clone, Debug)]
pub struct GridVlpModel<T> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    pub text: TextEmbeddingTables,
    pub grid: GridProjection,
    pub encoder: FusionEncoder,
    pub heads: TaskHeads,
}

impl<T: Real> GridVlpModel<T> {
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.fusion.validate()?;
        if config.visual_channels == 0 {
            return Err(Error::Config("visual_channels must be positive".into()));
        }
        let d = config.fusion.width;
        let mut store = ParamStore::new();
        let text = TextEmbeddingTables::new(&mut store, config.vocab_size, config.fusion.text_positions(), d, rng)?;
        let grid = GridProjection::new(&mut store, config.visual_channels, d, config.grid_position, rng)?;
        let encoder = FusionEncoder::new(&mut store, config.fusion.clone(), rng)?;
        let heads = TaskHeads::new(
            &mut store,
            HeadsConfig {
                vocab_size: config.vocab_size,
                num_answers: config.num_answers,
                tie_mlm_weights: config.tie_mlm_weights,
            },
            d,
            rng,
        )?;
        Ok(Self {
            config,
            store,
            text,
            grid,
            encoder,
            heads,
        })
    }

    /// Rebuilds a model for `config` and fills it from `store`.
    pub fn from_store(config: ModelConfig, store: &ParamStore<T>) -> Result<Self> {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut model = Self::new(config, &mut rng)?;
        model
            .store
            .load_from(store)
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        Ok(model)
    }

    pub fn token_table(&self) -> ParamId {
        self.text.token
    }

    /// Draws fresh QA head parameters.
    pub fn reinit_qa_head<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<()> {
        let mut scratch = ParamStore::<T>::new();
        let fresh = TaskHeads::new(&mut scratch, self.heads.config.clone(), self.config.fusion.width, rng)?;
        for (dst, src) in self.heads.qa_param_ids().iter().zip(fresh.qa_param_ids()) {
            self.store.replace(*dst, scratch.get(src).clone())?;
        }
        Ok(())
    }

    /// Embeds, projects and fuses a batch. Dropout runs only with `rng`.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<T>,
        params: &Bindings,
        batch: &[ModelInput<'_, T>],
        rng: Option<&mut R>,
    ) -> Result<FusedSequence> {
        let eps = self.config.fusion.ln_eps;
        let mut texts = Vec::with_capacity(batch.len());
        let mut grids: Vec<GridTokenSequence> = Vec::with_capacity(batch.len());
        for item in batch {
            if item.visual.is_empty() {
                return Err(Error::Invalid("sample without visual tokens".into()));
            }
            texts.push(self.text.embed(tape, params, item.tokens, eps)?);
            let features = tape.constant(item.visual.features.clone());
            grids.push(self.grid.project(tape, params, features, &item.visual.cells)?);
        }
        let pairs: Vec<_> = texts.iter().zip(&grids).collect();
        let seq = build_input_batch(tape, &pairs)?;
        self.encoder.encode(tape, params, &seq, rng)
    }

    pub fn losses(
        &self,
        tape: &mut Tape<T>,
        params: &Bindings,
        encoded: &FusedSequence,
        labels: &TaskLabels,
    ) -> Result<TaskOutputs> {
        task_losses(
            tape,
            params,
            &self.heads,
            encoded,
            labels,
            self.token_table(),
            self.config.fusion.ln_eps,
        )
    }
}
