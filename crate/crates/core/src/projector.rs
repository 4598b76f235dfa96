//! Vision-to-decoder bridge: 2x2 pixel-shuffle spatial compression (4x
//! channel expansion) followed by a two-layer GELU MLP into the decoder's
//! embedding dimension.

use crate::nn::{init_linear, linear, ParamVals, Params};
use crate::tensor::{pixel_shuffle_backward, pixel_shuffle_forward, Tape, Tensor, Val};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct ProjectorCfg {
    pub d_v: usize,
    pub d_hidden: usize,
    pub d_llm: usize,
}

pub fn init_projector<R: rand::Rng>(params: &mut Params, cfg: ProjectorCfg, rng: &mut R) {
    init_linear(params, "proj.w1", 4 * cfg.d_v, cfg.d_hidden, rng);
    init_linear(params, "proj.w2", cfg.d_hidden, cfg.d_llm, rng);
}

/// Merges each 2x2 block of the `(rows, cols)` feature grid into one token
/// (top-left, top-right, bottom-left, bottom-right concatenation). Returns
/// the shuffled features and the halved grid.
pub fn pixel_shuffle(features: &Tensor, grid: (usize, usize)) -> Result<(Tensor, (usize, usize))> {
    let (rows, cols) = grid;
    if features.shape().len() != 2 || features.shape()[0] != rows * cols {
        return Err(Error::Shape(format!(
            "pixel_shuffle: features {:?} vs grid {grid:?}",
            features.shape()
        )));
    }
    if rows % 2 != 0 || cols % 2 != 0 {
        return Err(Error::Invalid(format!("pixel_shuffle: odd grid {grid:?}")));
    }
    let d = features.shape()[1];
    let data = pixel_shuffle_forward(features.data(), rows, cols, d);
    Ok((Tensor::new(vec![rows * cols / 4, 4 * d], data)?, (rows / 2, cols / 2)))
}

/// Exact inverse of [`pixel_shuffle`] (the op is a permutation of values).
pub fn pixel_unshuffle(shuffled: &Tensor, grid: (usize, usize)) -> Result<Tensor> {
    let (rows, cols) = grid;
    if shuffled.shape().len() != 2
        || shuffled.shape()[0] != rows * cols / 4
        || shuffled.shape()[1] % 4 != 0
    {
        return Err(Error::Shape(format!(
            "pixel_unshuffle: {:?} vs grid {grid:?}",
            shuffled.shape()
        )));
    }
    let d = shuffled.shape()[1] / 4;
    let data = pixel_shuffle_backward(shuffled.data(), rows, cols, d);
    Tensor::new(vec![rows * cols, d], data)
}

/// Graph-side projection of already-shuffled features: w2(gelu(w1(x))).
pub fn project_graph(tape: &mut Tape, pv: &ParamVals, shuffled: Val) -> Result<Val> {
    let h = linear(tape, pv, "proj.w1", shuffled)?;
    let h = tape.gelu(h)?;
    linear(tape, pv, "proj.w2", h)
}

/// Projects shuffled features `[n, 4*d_v] -> [n, d_llm]` without recording
/// gradients.
pub fn project(params: &Params, shuffled: &Tensor) -> Result<Tensor> {
    let expect = params.get("proj.w1.w")?.shape()[0];
    if shuffled.shape().len() != 2 || shuffled.shape()[1] != expect {
        return Err(Error::Shape(format!(
            "project: input {:?}, expected [_, {expect}]",
            shuffled.shape()
        )));
    }
    let mut tape = Tape::new();
    let pv = params.load_into(&mut tape);
    let x = tape.constant(shuffled.clone());
    let y = project_graph(&mut tape, &pv, x)?;
    Ok(tape.value(y).clone())
}
