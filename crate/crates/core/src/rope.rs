//! Hybrid position encoding: interpolated absolute embedding grids plus
//! rotary embeddings — 1D with a configurable base for the decoder, 2D over
//! (row, col) grid indices for image patches. The context-extension switch
//! is simply a larger rope base.

use std::rc::Rc;

use crate::tensor::Tensor;
use crate::{Error, Result};

/// Position metadata for one packed stream of tokens.
#[derive(Debug, Clone, PartialEq)]
pub enum PosSpec {
    /// Per-token linear index.
    Linear { indices: Vec<usize>, rope_base: f32 },
    /// Per-token (row, col) grid index.
    Grid { indices: Vec<(usize, usize)>, rope_base: f32 },
}

impl PosSpec {
    pub fn len(&self) -> usize {
        match self {
            PosSpec::Linear { indices, .. } => indices.len(),
            PosSpec::Grid { indices, .. } => indices.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn rope_base(&self) -> f32 {
        match self {
            PosSpec::Linear { rope_base, .. } | PosSpec::Grid { rope_base, .. } => *rope_base,
        }
    }
}

/// Learnable fixed-size absolute position grid, bilinearly interpolated to
/// each image's patch grid.
#[derive(Debug, Clone)]
pub struct AbsPosGrid {
    pub rows: usize,
    pub cols: usize,
    pub dim: usize,
    /// `[rows * cols, dim]` row-major.
    pub grid: Tensor,
}

impl AbsPosGrid {
    pub fn new(rows: usize, cols: usize, grid: Tensor) -> Result<Self> {
        if rows < 2 || cols < 2 {
            return Err(Error::Invalid("AbsPosGrid needs rows, cols >= 2".into()));
        }
        if grid.shape().len() != 2 || grid.shape()[0] != rows * cols {
            return Err(Error::Shape(format!(
                "AbsPosGrid: grid {:?} vs ({rows}, {cols})",
                grid.shape()
            )));
        }
        let dim = grid.shape()[1];
        Ok(AbsPosGrid { rows, cols, dim, grid })
    }
}

/// Inverse frequencies θ_i = base^(−2i / rot_dim), i = 0 .. rot_dim/2 − 1.
pub fn inv_freqs(base: f32, rot_dim: usize) -> Result<Vec<f32>> {
    if rot_dim < 2 || rot_dim % 2 != 0 {
        return Err(Error::Invalid(format!("inv_freqs: rot_dim {rot_dim} must be even, >= 2")));
    }
    if base <= 1.0 {
        return Err(Error::Invalid(format!("inv_freqs: base {base} must be > 1")));
    }
    Ok((0..rot_dim / 2)
        .map(|i| (base as f64).powf(-2.0 * i as f64 / rot_dim as f64) as f32)
        .collect())
}

/// Bilinear interpolation weights from a `(rows_src, cols_src)` grid to a
/// `(rows_dst, cols_dst)` grid with corner alignment, as a sparse-ish dense
/// matrix `[rows_dst*cols_dst, rows_src*cols_src]`. Interpolation is linear
/// in the source values, so applying it is one matmul (and differentiable
/// through the source grid for free).
pub fn bilinear_weights(
    rows_src: usize,
    cols_src: usize,
    rows_dst: usize,
    cols_dst: usize,
) -> Result<Tensor> {
    if rows_dst == 0 || cols_dst == 0 {
        return Err(Error::Invalid("bilinear_weights: zero destination dims".into()));
    }
    if rows_src < 2 || cols_src < 2 {
        return Err(Error::Invalid("bilinear_weights: source dims must be >= 2".into()));
    }
    let nsrc = rows_src * cols_src;
    let mut w = vec![0.0f32; rows_dst * cols_dst * nsrc];
    let coord = |d: usize, nd: usize, ns: usize| -> f64 {
        if nd == 1 {
            // Single destination line maps to the source center.
            (ns as f64 - 1.0) / 2.0
        } else {
            d as f64 * (ns as f64 - 1.0) / (nd as f64 - 1.0)
        }
    };
    for dr in 0..rows_dst {
        let r = coord(dr, rows_dst, rows_src);
        let r0 = (r.floor() as usize).min(rows_src - 2);
        let fr = r - r0 as f64;
        for dc in 0..cols_dst {
            let c = coord(dc, cols_dst, cols_src);
            let c0 = (c.floor() as usize).min(cols_src - 2);
            let fc = c - c0 as f64;
            let row = (dr * cols_dst + dc) * nsrc;
            w[row + r0 * cols_src + c0] = ((1.0 - fr) * (1.0 - fc)) as f32;
            w[row + r0 * cols_src + c0 + 1] = ((1.0 - fr) * fc) as f32;
            w[row + (r0 + 1) * cols_src + c0] = (fr * (1.0 - fc)) as f32;
            w[row + (r0 + 1) * cols_src + c0 + 1] = (fr * fc) as f32;
        }
    }
    Tensor::new(vec![rows_dst * cols_dst, nsrc], w)
}

/// Bilinear interpolation of a learnable position grid to a destination
/// grid, corner-aligned. Identity when the destination matches the source.
pub fn interpolate_pos_grid(src: &AbsPosGrid, rows_dst: usize, cols_dst: usize) -> Result<Tensor> {
    if rows_dst == src.rows && cols_dst == src.cols {
        return Ok(src.grid.clone());
    }
    let w = bilinear_weights(src.rows, src.cols, rows_dst, cols_dst)?;
    crate::tensor::matmul(&w, &src.grid)
}

/// Per-token, per-pair rotation angles for 1D RoPE: angle(i, j) = p_i * θ_j
/// over the full head_dim.
pub fn rope_angles_1d(positions: &[usize], head_dim: usize, base: f32) -> Result<Vec<f32>> {
    if head_dim % 2 != 0 {
        return Err(Error::Invalid(format!("rope_angles_1d: head_dim {head_dim} must be even")));
    }
    let freqs = inv_freqs(base, head_dim)?;
    let mut angles = Vec::with_capacity(positions.len() * freqs.len());
    for &p in positions {
        for &f in &freqs {
            angles.push(p as f32 * f);
        }
    }
    Ok(angles)
}

/// 2D RoPE angles: the first half of each head's rotary pairs is rotated by
/// the row index, the second half by the column index, each half using
/// inv_freqs over rot_dim = head_dim / 2 (contiguous-block layout).
pub fn rope_angles_2d(grid_pos: &[(usize, usize)], head_dim: usize, base: f32) -> Result<Vec<f32>> {
    if head_dim % 4 != 0 {
        return Err(Error::Invalid(format!(
            "rope_angles_2d: head_dim {head_dim} must be divisible by 4"
        )));
    }
    let freqs = inv_freqs(base, head_dim / 2)?;
    let hp = head_dim / 2;
    let half = hp / 2;
    let mut angles = Vec::with_capacity(grid_pos.len() * hp);
    for &(r, c) in grid_pos {
        for &f in &freqs[..half] {
            angles.push(r as f32 * f);
        }
        for &f in &freqs[..half] {
            angles.push(c as f32 * f);
        }
    }
    Ok(angles)
}

fn apply_rope(x: &Tensor, angles: Vec<f32>, heads: usize, head_dim: usize) -> Result<Tensor> {
    let flat = x.reshaped(vec![x.shape()[0], heads * head_dim])?;
    let out_shape = x.shape().to_vec();
    let mut tape = crate::tensor::Tape::new();
    let v = tape.constant(flat);
    let r = tape.rope(v, heads, head_dim, Rc::new(angles))?;
    tape.value(r).reshaped(out_shape)
}

/// Rotates adjacent channel pairs of `x: [n, heads, head_dim]` by
/// `position * θ_i` (1D RoPE). Norm-preserving per pair.
pub fn apply_rope_1d(x: &Tensor, positions: &[usize], base: f32) -> Result<Tensor> {
    let (heads, head_dim) = split_heads(x, positions.len(), 2)?;
    let angles = rope_angles_1d(positions, head_dim, base)?;
    apply_rope(x, angles, heads, head_dim)
}

/// 2D RoPE over grid positions; `head_dim` must be divisible by 4.
pub fn apply_rope_2d(x: &Tensor, grid_pos: &[(usize, usize)], base: f32) -> Result<Tensor> {
    let (heads, head_dim) = split_heads(x, grid_pos.len(), 4)?;
    let angles = rope_angles_2d(grid_pos, head_dim, base)?;
    apply_rope(x, angles, heads, head_dim)
}

fn split_heads(x: &Tensor, n_tokens: usize, div: usize) -> Result<(usize, usize)> {
    if x.shape().len() != 3 {
        return Err(Error::Shape(format!(
            "rope expects [n, heads, head_dim], got {:?}",
            x.shape()
        )));
    }
    if x.shape()[0] != n_tokens {
        return Err(Error::Shape("rope: token count vs position count".into()));
    }
    let (heads, head_dim) = (x.shape()[1], x.shape()[2]);
    if head_dim % div != 0 {
        return Err(Error::Invalid(format!(
            "rope: head_dim {head_dim} must be divisible by {div}"
        )));
    }
    Ok((heads, head_dim))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn inv_freqs_basics() {
        let f = inv_freqs(50_000.0, 8).unwrap();
        assert_eq!(f[0], 1.0);
        // base^(−2/8) = base^(−1/4)
        assert!((f[1] as f64 - 50_000f64.powf(-0.25)).abs() < 1e-7);
        let g = inv_freqs(800_000.0, 8).unwrap();
        assert!((g[1] as f64 - 800_000f64.powf(-0.25)).abs() < 1e-7);
        assert!((f[1] - 0.066874).abs() < 1e-5);
        assert!((g[1] - 0.033437).abs() < 1e-5);
        // strictly decreasing
        for w in f.windows(2) {
            assert!(w[1] < w[0]);
        }
        // larger base weakly decreases every theta_i for i >= 1
        for i in 1..4 {
            assert!(g[i] <= f[i]);
        }
        assert!(inv_freqs(50_000.0, 7).is_err());
        assert!(inv_freqs(0.5, 8).is_err());
    }

    #[test]
    fn interpolation_identity_and_constant() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = AbsPosGrid::new(3, 4, Tensor::randn(&[12, 5], &mut rng)).unwrap();
        let same = interpolate_pos_grid(&g, 3, 4).unwrap();
        assert_eq!(same.data(), g.grid.data());

        let c = AbsPosGrid::new(2, 2, Tensor::full(&[4, 3], 7.5)).unwrap();
        let out = interpolate_pos_grid(&c, 5, 6).unwrap();
        for &v in out.data() {
            assert!((v - 7.5).abs() < 1e-5);
        }
    }

    #[test]
    fn interpolation_2x2_to_3x3_center_is_mean_of_corners() {
        let corners = Tensor::new(vec![4, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let g = AbsPosGrid::new(2, 2, corners).unwrap();
        let out = interpolate_pos_grid(&g, 3, 3).unwrap();
        // center of the 3x3 is index (1,1) -> row 4
        assert!((out.data()[4] - 2.5).abs() < 1e-6);
        // corners are preserved exactly (corner alignment)
        assert_eq!(out.data()[0], 1.0);
        assert_eq!(out.data()[2], 2.0);
        assert_eq!(out.data()[6], 3.0);
        assert_eq!(out.data()[8], 4.0);
    }

    #[test]
    fn interpolation_rejects_zero_dims() {
        let g = AbsPosGrid::new(2, 2, Tensor::zeros(&[4, 2])).unwrap();
        assert!(interpolate_pos_grid(&g, 0, 3).is_err());
    }

    #[test]
    fn rope_1d_position_zero_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::randn(&[3, 2, 8], &mut rng);
        let y = apply_rope_1d(&x, &[0, 0, 0], 50_000.0).unwrap();
        assert_eq!(x.data(), y.data());
    }

    #[test]
    fn rope_1d_preserves_row_norms() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::randn(&[4, 2, 8], &mut rng);
        let y = apply_rope_1d(&x, &[0, 3, 7, 100], 50_000.0).unwrap();
        for i in 0..4 {
            let xs = &x.data()[i * 16..(i + 1) * 16];
            let ys = &y.data()[i * 16..(i + 1) * 16];
            let nx: f32 = xs.iter().map(|v| v * v).sum::<f32>().sqrt();
            let ny: f32 = ys.iter().map(|v| v * v).sum::<f32>().sqrt();
            assert!((nx - ny).abs() < 1e-5);
        }
    }

    #[test]
    fn rope_1d_rejects_odd_head_dim() {
        let x = Tensor::zeros(&[1, 1, 7]);
        assert!(apply_rope_1d(&x, &[0], 50_000.0).is_err());
    }

    #[test]
    fn rope_1d_dot_depends_only_on_delta() {
        // DERIVED oracle: exhaustive over positions 0..16.
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let q = Tensor::randn(&[1, 1, 8], &mut rng);
        let k = Tensor::randn(&[1, 1, 8], &mut rng);
        let dot_at = |p1: usize, p2: usize| -> f32 {
            let rq = apply_rope_1d(&q, &[p1], 100.0).unwrap();
            let rk = apply_rope_1d(&k, &[p2], 100.0).unwrap();
            rq.data().iter().zip(rk.data()).map(|(a, b)| a * b).sum()
        };
        for d in 0..8usize {
            let base_dot = dot_at(d, 0);
            for p2 in 0..(16 - d) {
                assert!(
                    (dot_at(p2 + d, p2) - base_dot).abs() < 1e-5,
                    "delta {d} at offset {p2}"
                );
            }
        }
    }

    #[test]
    fn rope_2d_origin_identity_and_col_only_affects_second_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::randn(&[1, 1, 8], &mut rng);
        let y = apply_rope_2d(&x, &[(0, 0)], 100.0).unwrap();
        assert_eq!(x.data(), y.data());

        let a = apply_rope_2d(&x, &[(2, 0)], 100.0).unwrap();
        let b = apply_rope_2d(&x, &[(2, 5)], 100.0).unwrap();
        // First half (row-rotated channels) identical when only col differs.
        assert_eq!(&a.data()[..4], &b.data()[..4]);
        assert_ne!(&a.data()[4..], &b.data()[4..]);
    }

    #[test]
    fn rope_2d_rejects_head_dim_not_div_4() {
        let x = Tensor::zeros(&[1, 1, 6]);
        assert!(apply_rope_2d(&x, &[(0, 0)], 100.0).is_err());
    }

    #[test]
    fn rope_2d_dot_depends_only_on_grid_delta() {
        // DERIVED oracle: exhaustive over a 4x4 grid.
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let q = Tensor::randn(&[1, 1, 8], &mut rng);
        let k = Tensor::randn(&[1, 1, 8], &mut rng);
        let dot_at = |p1: (usize, usize), p2: (usize, usize)| -> f32 {
            let rq = apply_rope_2d(&q, &[p1], 100.0).unwrap();
            let rk = apply_rope_2d(&k, &[p2], 100.0).unwrap();
            rq.data().iter().zip(rk.data()).map(|(a, b)| a * b).sum()
        };
        for dr in 0..4usize {
            for dc in 0..4usize {
                let reference = dot_at((dr, dc), (0, 0));
                for r in 0..(4 - dr) {
                    for c in 0..(4 - dc) {
                        let d = dot_at((r + dr, c + dc), (r, c));
                        assert!((d - reference).abs() < 1e-5, "delta ({dr},{dc}) at ({r},{c})");
                    }
                }
            }
        }
    }
}
