use rand::Rng;

use super::GridFeatureMap;
use crate::error::{Error, Result};
use crate::tensor::{Bindings, ParamId, ParamStore, Real, Tape, Tensor, Var};

/// Largest grid side addressable by the optional position table.
pub const MAX_GRID_SIDE: usize = 32;

/// Row-major `[H·W, C]` matrix of a `C×H×W` map; row `r·W + c` is cell `(r, c)`.
pub fn flatten_grid<T: Real>(fmap: &GridFeatureMap<T>) -> Result<(Tensor<T>, Vec<(usize, usize)>)> {
    let (c, rows, cols) = (fmap.channels(), fmap.rows(), fmap.cols());
    let plane = rows * cols;
    let src = fmap.features.data();
    let mut out = vec![T::zero(); plane * c];
    for p in 0..plane {
        for ch in 0..c {
            out[p * c + ch] = src[ch * plane + p];
        }
    }
    let cells = (0..rows).flat_map(|r| (0..cols).map(move |q| (r, q))).collect();
    Ok((Tensor::new(vec![plane, c], out)?, cells))
}

/// Projected grid tokens with the cell each one came from.
#[derive(Clone, Debug)]
pub struct GridTokenSequence {
    pub states: Var,
    pub cells: Vec<(usize, usize)>,
}

impl GridTokenSequence {
    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }
}

/// `g = s·W + b + e_visual`, plus a learned cell-position row when enabled.
#[derive(Clone, Debug)]
pub struct GridProjection {
    pub weight: ParamId,
    pub bias: ParamId,
    pub modal: ParamId,
    pub position: Option<ParamId>,
    pub channels: usize,
    pub width: usize,
}

impl GridProjection {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        channels: usize,
        width: usize,
        with_position: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = store.add_normal(
            "grid.proj.weight",
            &[channels, width],
            (1.0 / channels as f64).sqrt(),
            rng,
        )?;
        let bias = store.add_full("grid.proj.bias", &[width], 0.0)?;
        let modal = store.add_normal("grid.modal", &[width], 0.02, rng)?;
        let position = if with_position {
            Some(store.add_normal("grid.position", &[MAX_GRID_SIDE * MAX_GRID_SIDE, width], 0.02, rng)?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            modal,
            position,
            channels,
            width,
        })
    }

    /// Projects selected cell rows `[n, C]` located at `cells`.
    pub fn project<T: Real>(
        &self,
        tape: &mut Tape<T>,
        params: &Bindings,
        features: Var,
        cells: &[(usize, usize)],
    ) -> Result<GridTokenSequence> {
        let shape = tape.shape(features);
        if shape.len() != 2 || shape[1] != self.channels || shape[0] != cells.len() {
            return Err(Error::Invalid(format!(
                "grid features {shape:?} do not match {} cells of {} channels",
                cells.len(),
                self.channels
            )));
        }
        let x = tape.matmul(features, params[self.weight])?;
        let x = tape.add_row(x, params[self.bias])?;
        let mut x = tape.add_row(x, params[self.modal])?;
        if let Some(pos) = self.position {
            let idx = cells
                .iter()
                .map(|&(r, c)| {
                    if r < MAX_GRID_SIDE && c < MAX_GRID_SIDE {
                        Ok(r * MAX_GRID_SIDE + c)
                    } else {
                        Err(Error::Invalid(format!("cell ({r}, {c}) outside the position table")))
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            let p = tape.gather_rows(params[pos], &idx)?;
            x = tape.add(x, p)?;
        }
        Ok(GridTokenSequence {
            states: x,
            cells: cells.to_vec(),
        })
    }

    pub fn flatten_and_project<T: Real>(
        &self,
        tape: &mut Tape<T>,
        params: &Bindings,
        fmap: &GridFeatureMap<T>,
    ) -> Result<GridTokenSequence> {
        let (flat, cells) = flatten_grid(fmap)?;
        let features = tape.constant(flat);
        self.project(tape, params, features, &cells)
    }
}
