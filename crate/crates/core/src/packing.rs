//! Native-resolution preprocessing: patchify images of arbitrary size,
//! flatten in row-major patch order, and concatenate variable-length
//! sequences into one packed buffer. Attention over a packed buffer is
//! block-diagonal — realized here as a segment-id mask, which at desk scale
//! is the whole contract.

use std::rc::Rc;

use crate::rope::PosSpec;
use crate::tensor::{Tape, Tensor, Val};
use crate::{Error, Result};

pub const DEFAULT_ROPE_BASE: f32 = 10_000.0;

/// One image, patchified and flattened.
#[derive(Debug, Clone)]
pub struct PatchSeq {
    /// `[n_patches, patch_dim]`, patch_dim = patch_size^2 * channels.
    pub patches: Tensor,
    /// (rows, cols) of the patch grid.
    pub grid: (usize, usize),
    pub source_id: usize,
}

/// Concatenated variable-length sequences with boundary offsets.
#[derive(Debug, Clone)]
pub struct PackedBatch {
    /// `[total_len, dim]`.
    pub tokens: Tensor,
    /// `n_seqs + 1` offsets, first 0, last total_len, strictly increasing.
    pub boundaries: Vec<usize>,
    pub loss_mask: Option<Vec<bool>>,
    pub pos: PosSpec,
}

impl PackedBatch {
    pub fn n_seqs(&self) -> usize {
        self.boundaries.len() - 1
    }

    pub fn total_len(&self) -> usize {
        *self.boundaries.last().unwrap()
    }

    pub fn segment(&self, i: usize) -> Result<Tensor> {
        let (a, b) = (self.boundaries[i], self.boundaries[i + 1]);
        let dim = self.tokens.shape()[1];
        let data = self.tokens.data()[a * dim..b * dim].to_vec();
        Tensor::new(vec![b - a, dim], data)
    }

    pub fn validate(&self) -> Result<()> {
        validate_boundaries(&self.boundaries, self.tokens.shape()[0])?;
        if let Some(m) = &self.loss_mask {
            if m.len() != self.total_len() {
                return Err(Error::Shape("loss_mask length != total_len".into()));
            }
        }
        Ok(())
    }
}

pub fn validate_boundaries(boundaries: &[usize], total_len: usize) -> Result<()> {
    if boundaries.len() < 2 || boundaries[0] != 0 {
        return Err(Error::Invalid(format!("bad boundaries {boundaries:?}")));
    }
    if *boundaries.last().unwrap() != total_len {
        return Err(Error::Invalid(format!(
            "boundaries end {} != total_len {total_len}",
            boundaries.last().unwrap()
        )));
    }
    if boundaries.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Invalid(format!("boundaries not strictly increasing: {boundaries:?}")));
    }
    Ok(())
}

/// Splits `[H, W, C]` into non-overlapping patches in row-major order; each
/// patch is flattened row-major over (row, col, channel).
pub fn patchify(image: &Tensor, patch_size: usize) -> Result<PatchSeq> {
    if image.shape().len() != 3 {
        return Err(Error::Shape(format!("patchify expects [H, W, C], got {:?}", image.shape())));
    }
    let (h, w, c) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    if patch_size == 0 || h < patch_size || w < patch_size {
        return Err(Error::Invalid(format!(
            "patchify: image {h}x{w} smaller than patch {patch_size}"
        )));
    }
    if h % patch_size != 0 || w % patch_size != 0 {
        return Err(Error::Invalid(format!(
            "patchify: {h}x{w} not divisible by patch {patch_size}; \
             pre-resize with image::resize_to_patch_multiple"
        )));
    }
    let (rows, cols) = (h / patch_size, w / patch_size);
    let dim = patch_size * patch_size * c;
    let mut data = Vec::with_capacity(rows * cols * dim);
    for pr in 0..rows {
        for pc in 0..cols {
            for dy in 0..patch_size {
                let y = pr * patch_size + dy;
                let x0 = pc * patch_size;
                let start = (y * w + x0) * c;
                data.extend_from_slice(&image.data()[start..start + patch_size * c]);
            }
        }
    }
    Ok(PatchSeq {
        patches: Tensor::new(vec![rows * cols, dim], data)?,
        grid: (rows, cols),
        source_id: 0,
    })
}

/// Concatenates sequences (each `[len_i, dim]`) in order; boundaries are the
/// cumulative lengths. Linear positions restart at 0 per segment.
pub fn pack_sequences(seqs: &[Tensor]) -> Result<PackedBatch> {
    if seqs.is_empty() {
        return Err(Error::Invalid("pack_sequences: empty list".into()));
    }
    let dim = seqs[0].shape().get(1).copied().unwrap_or(0);
    let mut boundaries = vec![0usize];
    let mut data = Vec::new();
    let mut positions = Vec::new();
    for (i, s) in seqs.iter().enumerate() {
        if s.shape().len() != 2 || s.shape()[1] != dim {
            return Err(Error::Shape(format!(
                "pack_sequences: seq {i} shape {:?}, expected [_, {dim}]",
                s.shape()
            )));
        }
        let len = s.shape()[0];
        if len == 0 {
            return Err(Error::Invalid(format!("pack_sequences: seq {i} is empty")));
        }
        positions.extend(0..len);
        data.extend_from_slice(s.data());
        boundaries.push(boundaries.last().unwrap() + len);
    }
    let total = *boundaries.last().unwrap();
    Ok(PackedBatch {
        tokens: Tensor::new(vec![total, dim], data)?,
        boundaries,
        loss_mask: None,
        pos: PosSpec::Linear { indices: positions, rope_base: DEFAULT_ROPE_BASE },
    })
}

/// Inverse of [`pack_sequences`].
pub fn unpack(batch: &PackedBatch) -> Result<Vec<Tensor>> {
    batch.validate()?;
    (0..batch.n_seqs()).map(|i| batch.segment(i)).collect()
}

/// Block-diagonal attention mask for a packed buffer: query `i` may attend
/// to key `j` iff both fall in the same segment (and `j <= i` when causal).
pub fn segment_mask(boundaries: &[usize], causal: bool) -> Vec<bool> {
    let n = *boundaries.last().unwrap();
    let mut seg_of = vec![0usize; n];
    for (s, w) in boundaries.windows(2).enumerate() {
        for t in w[0]..w[1] {
            seg_of[t] = s;
        }
    }
    let mut mask = vec![false; n * n];
    for i in 0..n {
        for j in 0..n {
            mask[i * n + j] = seg_of[i] == seg_of[j] && (!causal || j <= i);
        }
    }
    mask
}

/// Graph-side multi-head attention over a packed buffer. `q`, `k`, `v` are
/// `[total_len, heads*head_dim]` tape values; output has the same shape.
pub fn attention_graph(
    tape: &mut Tape,
    q: Val,
    k: Val,
    v: Val,
    heads: usize,
    head_dim: usize,
    mask: Rc<Vec<bool>>,
) -> Result<Val> {
    let n = tape.value(q).shape()[0];
    if mask.len() != n * n {
        return Err(Error::Shape("attention_graph: mask size".into()));
    }
    let scale = 1.0 / (head_dim as f32).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (a, b) = (h * head_dim, (h + 1) * head_dim);
        let qh = tape.slice_cols(q, a, b)?;
        let kh = tape.slice_cols(k, a, b)?;
        let vh = tape.slice_cols(v, a, b)?;
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scaled = tape.scale(scores, scale)?;
        let probs = tape.masked_softmax(scaled, Rc::clone(&mask))?;
        outs.push(tape.matmul(probs, vh)?);
    }
    if heads == 1 {
        Ok(outs[0])
    } else {
        tape.concat_cols(&outs)
    }
}

/// Variable-length attention over `[total_len, n_heads, head_dim]` inputs.
/// Each segment's output equals standalone attention on that segment.
pub fn varlen_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    boundaries: &[usize],
    causal: bool,
) -> Result<Tensor> {
    for (name, t) in [("q", q), ("k", k), ("v", v)] {
        if t.shape().len() != 3 {
            return Err(Error::Shape(format!("varlen_attention: {name} must be 3D")));
        }
        if t.shape() != q.shape() {
            return Err(Error::Shape("varlen_attention: q/k/v shape mismatch".into()));
        }
    }
    let (n, heads, head_dim) = (q.shape()[0], q.shape()[1], q.shape()[2]);
    validate_boundaries(boundaries, n)?;
    let mask = Rc::new(segment_mask(boundaries, causal));
    let mut tape = Tape::new();
    let qv = tape.constant(q.reshaped(vec![n, heads * head_dim])?);
    let kv = tape.constant(k.reshaped(vec![n, heads * head_dim])?);
    let vv = tape.constant(v.reshaped(vec![n, heads * head_dim])?);
    let out = attention_graph(&mut tape, qv, kv, vv, heads, head_dim, mask)?;
    tape.value(out).reshaped(vec![n, heads, head_dim])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn patchify_shapes_and_grid() {
        let img = Tensor::zeros(&[8, 8, 3]);
        let ps = patchify(&img, 4).unwrap();
        assert_eq!(ps.patches.shape(), &[4, 48]);
        assert_eq!(ps.grid, (2, 2));
    }

    #[test]
    fn patchify_constant_image() {
        let img = Tensor::full(&[4, 4, 1], 0.7);
        let ps = patchify(&img, 4).unwrap();
        assert_eq!(ps.patches.shape(), &[1, 16]);
        for &v in ps.patches.data() {
            assert_eq!(v, 0.7);
        }
    }

    #[test]
    fn patchify_rejects_non_divisible() {
        let img = Tensor::zeros(&[6, 8, 3]);
        assert!(patchify(&img, 4).is_err());
    }

    #[test]
    fn patchify_row_major_patch_order() {
        // 4x4x1 image with distinct values; patch 2 -> 4 patches.
        let data: Vec<f32> = (0..16).map(|v| v as f32).collect();
        let img = Tensor::new(vec![4, 4, 1], data).unwrap();
        let ps = patchify(&img, 2).unwrap();
        // first patch = rows 0-1, cols 0-1 -> [0, 1, 4, 5]
        assert_eq!(&ps.patches.data()[..4], &[0.0, 1.0, 4.0, 5.0]);
        // second patch = rows 0-1, cols 2-3
        assert_eq!(&ps.patches.data()[4..8], &[2.0, 3.0, 6.0, 7.0]);
    }

    #[test]
    fn pack_boundaries_are_prefix_sums() {
        let seqs: Vec<Tensor> =
            [4usize, 1, 9].iter().map(|&l| Tensor::zeros(&[l, 2])).collect();
        let b = pack_sequences(&seqs).unwrap();
        assert_eq!(b.total_len(), 14);
        assert_eq!(b.boundaries, vec![0, 4, 5, 14]);

        let single = pack_sequences(&[Tensor::zeros(&[5, 3])]).unwrap();
        assert_eq!(single.boundaries, vec![0, 5]);
    }

    #[test]
    fn pack_rejects_empty() {
        assert!(pack_sequences(&[]).is_err());
        let with_empty = vec![Tensor::zeros(&[2, 2]), Tensor::zeros(&[1, 2])];
        assert!(pack_sequences(&with_empty).is_ok());
    }

    #[test]
    fn pack_unpack_round_trip_200_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        use rand::Rng;
        let seqs: Vec<Tensor> = (0..200)
            .map(|_| {
                let l = rng.gen_range(1..12);
                Tensor::randn(&[l, 3], &mut rng)
            })
            .collect();
        let packed = pack_sequences(&seqs).unwrap();
        let back = unpack(&packed).unwrap();
        assert_eq!(back.len(), seqs.len());
        for (a, b) in seqs.iter().zip(&back) {
            assert_eq!(a.shape(), b.shape());
            assert_eq!(a.data(), b.data());
        }
    }

    fn dense_attention(q: &Tensor, k: &Tensor, v: &Tensor, causal: bool) -> Tensor {
        // Per-segment oracle: plain dense attention on one standalone segment.
        let n = q.shape()[0];
        varlen_attention(q, k, v, &[0, n], causal).unwrap()
    }

    #[test]
    fn packed_equals_per_segment_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (ha, hd) = (2, 4);
        let a_len = 5;
        let b_len = 3;
        let qa = Tensor::randn(&[a_len, ha, hd], &mut rng);
        let ka = Tensor::randn(&[a_len, ha, hd], &mut rng);
        let va = Tensor::randn(&[a_len, ha, hd], &mut rng);
        let qb = Tensor::randn(&[b_len, ha, hd], &mut rng);
        let kb = Tensor::randn(&[b_len, ha, hd], &mut rng);
        let vb = Tensor::randn(&[b_len, ha, hd], &mut rng);
        let cat = |x: &Tensor, y: &Tensor| {
            let mut d = x.data().to_vec();
            d.extend_from_slice(y.data());
            Tensor::new(vec![a_len + b_len, ha, hd], d).unwrap()
        };
        let packed = varlen_attention(
            &cat(&qa, &qb),
            &cat(&ka, &kb),
            &cat(&va, &vb),
            &[0, a_len, a_len + b_len],
            false,
        )
        .unwrap();
        let oa = dense_attention(&qa, &ka, &va, false);
        let ob = dense_attention(&qb, &kb, &vb, false);
        for (i, &v) in oa.data().iter().enumerate() {
            assert!((packed.data()[i] - v).abs() < 1e-5);
        }
        let off = a_len * ha * hd;
        for (i, &v) in ob.data().iter().enumerate() {
            assert!((packed.data()[off + i] - v).abs() < 1e-5);
        }
    }

    #[test]
    fn causal_single_token_returns_v() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let q = Tensor::randn(&[1, 2, 4], &mut rng);
        let k = Tensor::randn(&[1, 2, 4], &mut rng);
        let v = Tensor::randn(&[1, 2, 4], &mut rng);
        let out = varlen_attention(&q, &k, &v, &[0, 1], true).unwrap();
        assert_eq!(out.data(), v.data());
    }

    #[test]
    fn uniform_scores_average_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 4;
        let q = Tensor::zeros(&[n, 1, 2]);
        let k = Tensor::zeros(&[n, 1, 2]);
        let v = Tensor::randn(&[n, 1, 2], &mut rng);
        let out = varlen_attention(&q, &k, &v, &[0, n], false).unwrap();
        for j in 0..2 {
            let mean: f32 = (0..n).map(|i| v.data()[i * 2 + j]).sum::<f32>() / n as f32;
            for i in 0..n {
                assert!((out.data()[i * 2 + j] - mean).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn cross_segment_independence_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let n = 6;
        let mk = |rng: &mut ChaCha8Rng| Tensor::randn(&[n, 1, 4], rng);
        let (q, k, v) = (mk(&mut rng), mk(&mut rng), mk(&mut rng));
        let boundaries = [0, 3, 6];
        let base = varlen_attention(&q, &k, &v, &boundaries, false).unwrap();
        // Perturb segment 1 arbitrarily; segment 0 outputs must be bit-identical.
        let mut k2 = k.clone();
        for i in 3 * 4..6 * 4 {
            k2.data_mut()[i] += 100.0;
        }
        let out = varlen_attention(&q, &k2, &v, &boundaries, false).unwrap();
        for i in 0..3 * 4 {
            assert_eq!(base.data()[i].to_bits(), out.data()[i].to_bits());
        }
    }

    #[test]
    fn causal_future_tokens_do_not_affect_past() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 5;
        let mk = |rng: &mut ChaCha8Rng| Tensor::randn(&[n, 1, 4], rng);
        let (q, k, v) = (mk(&mut rng), mk(&mut rng), mk(&mut rng));
        let base = varlen_attention(&q, &k, &v, &[0, n], true).unwrap();
        let mut kz = k.clone();
        let mut vz = v.clone();
        for i in 4 * 4..5 * 4 {
            kz.data_mut()[i] = 0.0;
            vz.data_mut()[i] = 0.0;
        }
        let out = varlen_attention(&q, &kz, &vz, &[0, n], true).unwrap();
        for i in 0..4 * 4 {
            assert_eq!(base.data()[i].to_bits(), out.data()[i].to_bits());
        }
    }

    #[test]
    fn boundary_mismatch_is_error() {
        let q = Tensor::zeros(&[4, 1, 2]);
        assert!(varlen_attention(&q, &q, &q, &[0, 3], false).is_err());
        assert!(varlen_attention(&q, &q, &q, &[0, 2, 2, 4], false).is_err());
    }
}
