//! Native-resolution vision encoder plus its contrastive + captioning
//! pre-training objective. Images of different resolutions share one packed
//! forward pass; per-image outputs are independent of co-packed neighbours
//! (block-diagonal attention).

use std::rc::Rc;

use rand::Rng;

use crate::datapipe::{BOS, V_BYTES};
use crate::nn::{
    block_forward, init_block, init_layer_norm, init_linear, layer_norm, linear, BlockCfg,
    ParamVals, Params,
};
use crate::packing::{segment_mask, PackedBatch, PatchSeq};
use crate::rope::{bilinear_weights, rope_angles_1d, rope_angles_2d, PosSpec};
use crate::tensor::{Tape, Tensor, Val};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct VitCfg {
    pub patch_size: usize,
    pub d_v: usize,
    pub heads: usize,
    pub blocks: usize,
    pub mlp_hidden: usize,
    /// Source grid of the learnable absolute position embeddings.
    pub abs_rows: usize,
    pub abs_cols: usize,
    pub rope_base: f32,
    pub max_pixels: usize,
    /// Embedding dim of the contrastive heads.
    pub d_embed: usize,
    /// Caption decoder depth (tiny decoder-only head).
    pub cap_blocks: usize,
}

impl Default for VitCfg {
    fn default() -> Self {
        // Toy scale: d_v=64, 4 heads, 4 blocks. The 3.2M pixel cap matches
        // the encoder's production limit; desk tests stay far below it.
        VitCfg {
            patch_size: 4,
            d_v: 64,
            heads: 4,
            blocks: 4,
            mlp_hidden: 256,
            abs_rows: 8,
            abs_cols: 8,
            rope_base: 10_000.0,
            max_pixels: 3_200_000,
            d_embed: 64,
            cap_blocks: 2,
        }
    }
}

impl VitCfg {
    pub fn block_cfg(&self) -> BlockCfg {
        BlockCfg { dim: self.d_v, heads: self.heads, mlp_hidden: self.mlp_hidden }
    }

    pub fn patch_dim(&self, channels: usize) -> usize {
        self.patch_size * self.patch_size * channels
    }
}

pub const CAP_VOCAB: usize = V_BYTES + 2; // bytes + BOS reuse + pad slot

/// Initializes all encoder parameters under the `vit.` prefix (plus the
/// contrastive text tower and caption decoder used only in pre-training).
pub fn init_vit<R: Rng>(params: &mut Params, cfg: VitCfg, channels: usize, rng: &mut R) {
    let head_dim = cfg.d_v / cfg.heads;
    assert!(head_dim % 4 == 0, "head_dim must be divisible by 4 for 2D RoPE");
    init_linear(params, "vit.patch_embed", cfg.patch_dim(channels), cfg.d_v, rng);
    params.insert(
        "vit.abs_pos",
        Tensor::randn_scaled(&[cfg.abs_rows * cfg.abs_cols, cfg.d_v], 0.02, rng),
    );
    for i in 0..cfg.blocks {
        init_block(params, &format!("vit.blocks.{i}"), cfg.block_cfg(), rng);
    }
    init_layer_norm(params, "vit.final_norm", cfg.d_v);

    // Contrastive heads.
    init_linear(params, "vit.img_proj", cfg.d_v, cfg.d_embed, rng);
    init_linear(params, "vit.txt_proj", cfg.d_v, cfg.d_embed, rng);
    params.insert("vit.txtenc.tok_embed", Tensor::randn_scaled(&[CAP_VOCAB, cfg.d_v], 0.02, rng));
    init_block(params, "vit.txtenc.block", cfg.block_cfg(), rng);
    init_layer_norm(params, "vit.txtenc.final_norm", cfg.d_v);

    // Tiny caption decoder conditioned by prefixing image features.
    params.insert("vit.capdec.tok_embed", Tensor::randn_scaled(&[CAP_VOCAB, cfg.d_v], 0.02, rng));
    for i in 0..cfg.cap_blocks {
        init_block(params, &format!("vit.capdec.blocks.{i}"), cfg.block_cfg(), rng);
    }
    init_layer_norm(params, "vit.capdec.final_norm", cfg.d_v);
    init_linear(params, "vit.capdec.lm_head", cfg.d_v, CAP_VOCAB, rng);
}

/// Graph-side packed encoding. Returns the `[total_patches, d_v]` feature
/// value plus boundaries and per-token grid positions.
pub fn encode_images_graph(
    tape: &mut Tape,
    pv: &ParamVals,
    cfg: VitCfg,
    batch: &[PatchSeq],
) -> Result<(Val, Vec<usize>, Vec<(usize, usize)>)> {
    if batch.is_empty() {
        return Err(Error::Invalid("encode_images: empty batch".into()));
    }
    let mut parts = Vec::with_capacity(batch.len());
    let mut boundaries = vec![0usize];
    let mut grid_pos = Vec::new();
    for seq in batch {
        let (rows, cols) = seq.grid;
        let n = rows * cols;
        if seq.patches.shape()[0] != n {
            return Err(Error::Shape("PatchSeq: patches vs grid".into()));
        }
        if n * cfg.patch_size * cfg.patch_size > cfg.max_pixels {
            return Err(Error::Invalid(format!(
                "image exceeds max_pixels cap {}",
                cfg.max_pixels
            )));
        }
        let x = tape.constant(seq.patches.clone());
        let emb = linear(tape, pv, "vit.patch_embed", x)?;
        // Interpolated absolute positions: linear in the learnable grid, so
        // one matmul with precomputed bilinear weights keeps it trainable.
        let w = tape.constant(bilinear_weights(cfg.abs_rows, cfg.abs_cols, rows, cols)?);
        let abs = pv.get("vit.abs_pos")?;
        let pos = tape.matmul(w, abs)?;
        parts.push(tape.add(emb, pos)?);
        boundaries.push(boundaries.last().unwrap() + n);
        for r in 0..rows {
            for c in 0..cols {
                grid_pos.push((r, c));
            }
        }
    }
    let mut x = if parts.len() == 1 { parts[0] } else { tape.concat_rows(&parts)? };
    let head_dim = cfg.d_v / cfg.heads;
    let angles = Rc::new(rope_angles_2d(&grid_pos, head_dim, cfg.rope_base)?);
    let mask = Rc::new(segment_mask(&boundaries, false));
    for i in 0..cfg.blocks {
        x = block_forward(tape, pv, &format!("vit.blocks.{i}"), cfg.block_cfg(), x, &angles, &mask)?;
    }
    let x = layer_norm(tape, pv, "vit.final_norm", x)?;
    Ok((x, boundaries, grid_pos))
}

/// Packed encoding without gradient recording.
pub fn encode_images(params: &Params, cfg: VitCfg, batch: &[PatchSeq]) -> Result<PackedBatch> {
    let mut tape = Tape::new();
    let pv = params.load_into(&mut tape);
    let (out, boundaries, grid_pos) = encode_images_graph(&mut tape, &pv, cfg, batch)?;
    Ok(PackedBatch {
        tokens: tape.value(out).clone(),
        boundaries,
        loss_mask: None,
        pos: PosSpec::Grid { indices: grid_pos, rope_base: cfg.rope_base },
    })
}

#[derive(Debug, Clone, Copy)]
pub struct DualLossConfig {
    pub lambda: f32,
    pub temperature: f32,
    pub bias: f32,
}

impl Default for DualLossConfig {
    fn default() -> Self {
        DualLossConfig { lambda: 2.0, temperature: 10.0, bias: -2.0 }
    }
}

/// Pairwise sigmoid contrastive loss over already-projected embeddings:
/// mean over all n^2 pairs of softplus(-z_ij (t * cos_ij + b)), z diagonal
/// +1, off-diagonal -1. Rows are L2-normalized here; zero rows error.
pub fn siglip_loss_graph(
    tape: &mut Tape,
    img_emb: Val,
    txt_emb: Val,
    cfg: DualLossConfig,
) -> Result<Val> {
    let n = tape.value(img_emb).shape()[0];
    if tape.value(txt_emb).shape() != tape.value(img_emb).shape() {
        return Err(Error::Shape("siglip_loss: embedding shape mismatch".into()));
    }
    if cfg.temperature <= 0.0 {
        return Err(Error::Invalid("siglip_loss: temperature must be > 0".into()));
    }
    let img = tape.l2_normalize_rows(img_emb)?;
    let txt = tape.l2_normalize_rows(txt_emb)?;
    let txt_t = tape.transpose(txt)?;
    let sims = tape.matmul(img, txt_t)?;
    let logits = tape.scale(sims, cfg.temperature)?;
    let bias = tape.constant(Tensor::full(&[n, n], cfg.bias));
    let logits = tape.add(logits, bias)?;
    let mut z = vec![-1.0f32; n * n];
    for i in 0..n {
        z[i * n + i] = 1.0;
    }
    let z = tape.constant(Tensor::new(vec![n, n], z)?);
    let signed = tape.mul(logits, z)?;
    let neg = tape.scale(signed, -1.0)?;
    let losses = tape.softplus(neg)?;
    tape.mean(losses)
}

pub fn siglip_loss(img_emb: &Tensor, txt_emb: &Tensor, cfg: DualLossConfig) -> Result<f32> {
    let mut tape = Tape::new();
    let i = tape.constant(img_emb.clone());
    let t = tape.constant(txt_emb.clone());
    let l = siglip_loss_graph(&mut tape, i, t, cfg)?;
    Ok(tape.value(l).item())
}

/// Mean cross-entropy over unmasked positions only.
pub fn caption_loss_graph(
    tape: &mut Tape,
    logits: Val,
    targets: &[usize],
    mask: &[bool],
) -> Result<Val> {
    let n = tape.value(logits).shape()[0];
    if targets.len() != n || mask.len() != n {
        return Err(Error::Shape("caption_loss: targets/mask length".into()));
    }
    let picked: Vec<(usize, usize)> = (0..n).filter(|&i| mask[i]).map(|i| (i, targets[i])).collect();
    if picked.is_empty() {
        return Err(Error::Invalid("caption_loss: all positions masked".into()));
    }
    let logp = tape.log_softmax(logits)?;
    let sel = tape.gather_elems(logp, picked)?;
    let m = tape.mean(sel)?;
    tape.scale(m, -1.0)
}

pub fn caption_loss(logits: &Tensor, targets: &[usize], mask: &[bool]) -> Result<f32> {
    let mut tape = Tape::new();
    let l = tape.constant(logits.clone());
    let loss = caption_loss_graph(&mut tape, l, targets, mask)?;
    Ok(tape.value(loss).item())
}

/// One captioned image at toy scale.
#[derive(Debug, Clone)]
pub struct CaptionedImage {
    pub patches: PatchSeq,
    /// Byte-level caption tokens (< 256).
    pub caption: Vec<usize>,
}

/// Constant row-pooling matrix averaging each boundary span.
fn pool_matrix(boundaries: &[usize]) -> Tensor {
    let n_seqs = boundaries.len() - 1;
    let total = *boundaries.last().unwrap();
    let mut w = vec![0.0f32; n_seqs * total];
    for (s, win) in boundaries.windows(2).enumerate() {
        let len = (win[1] - win[0]) as f32;
        for t in win[0]..win[1] {
            w[s * total + t] = 1.0 / len;
        }
    }
    Tensor::new(vec![n_seqs, total], w).expect("shape consistent")
}

/// Full dual-objective pre-training loss: L_siglip + lambda * L_caption.
pub fn vit_pretrain_loss_graph(
    tape: &mut Tape,
    pv: &ParamVals,
    cfg: VitCfg,
    batch: &[CaptionedImage],
    dual: DualLossConfig,
) -> Result<Val> {
    if batch.is_empty() {
        return Err(Error::Invalid("vit_pretrain_loss: empty batch".into()));
    }
    for c in batch {
        if c.caption.is_empty() {
            return Err(Error::Invalid("vit_pretrain_loss: empty caption".into()));
        }
        if c.caption.iter().any(|&t| t >= V_BYTES) {
            return Err(Error::Invalid("caption tokens must be bytes".into()));
        }
    }
    let patch_seqs: Vec<PatchSeq> = batch.iter().map(|c| c.patches.clone()).collect();
    let (features, boundaries, _) = encode_images_graph(tape, pv, cfg, &patch_seqs)?;

    // Contrastive side: mean-pooled image features vs encoded captions.
    let img_pool = tape.constant(pool_matrix(&boundaries));
    let img_pooled = tape.matmul(img_pool, features)?;
    let img_emb = linear(tape, pv, "vit.img_proj", img_pooled)?;

    let tok_embed = pv.get("vit.txtenc.tok_embed")?;
    let mut txt_boundaries = vec![0usize];
    let mut txt_ids = Vec::new();
    let mut txt_positions = Vec::new();
    for c in batch {
        txt_ids.extend(c.caption.iter().copied());
        txt_positions.extend(0..c.caption.len());
        txt_boundaries.push(txt_boundaries.last().unwrap() + c.caption.len());
    }
    let txt_x = tape.gather_rows(tok_embed, txt_ids)?;
    let head_dim = cfg.d_v / cfg.heads;
    let txt_angles = Rc::new(rope_angles_1d(&txt_positions, head_dim, cfg.rope_base)?);
    let txt_mask = Rc::new(segment_mask(&txt_boundaries, false));
    let txt_x =
        block_forward(tape, pv, "vit.txtenc.block", cfg.block_cfg(), txt_x, &txt_angles, &txt_mask)?;
    let txt_x = layer_norm(tape, pv, "vit.txtenc.final_norm", txt_x)?;
    let txt_pool = tape.constant(pool_matrix(&txt_boundaries));
    let txt_pooled = tape.matmul(txt_pool, txt_x)?;
    let txt_emb = linear(tape, pv, "vit.txt_proj", txt_pooled)?;

    let l_siglip = siglip_loss_graph(tape, img_emb, txt_emb, dual)?;

    // Captioning side: image features prefix the caption token stream of a
    // tiny causal decoder; NTP supervision on caption positions only.
    let cap_embed = pv.get("vit.capdec.tok_embed")?;
    let mut parts = Vec::new();
    let mut cap_boundaries = vec![0usize];
    let mut cap_positions = Vec::new();
    let mut targets = Vec::new();
    let mut sup_mask = Vec::new();
    for (i, c) in batch.iter().enumerate() {
        let (a, b) = (boundaries[i], boundaries[i + 1]);
        let prefix = tape.slice_rows(features, a, b)?;
        let mut ids = vec![BOS];
        ids.extend(c.caption[..c.caption.len() - 1].iter().copied());
        let toks = tape.gather_rows(cap_embed, ids)?;
        parts.push(tape.concat_rows(&[prefix, toks])?);
        let seg_len = (b - a) + c.caption.len();
        cap_positions.extend(0..seg_len);
        cap_boundaries.push(cap_boundaries.last().unwrap() + seg_len);
        for t in 0..seg_len {
            if t < b - a {
                targets.push(0);
                sup_mask.push(false);
            } else {
                targets.push(c.caption[t - (b - a)]);
                sup_mask.push(true);
            }
        }
    }
    let mut cap_x = if parts.len() == 1 { parts[0] } else { tape.concat_rows(&parts)? };
    let cap_angles = Rc::new(rope_angles_1d(&cap_positions, head_dim, cfg.rope_base)?);
    let cap_mask = Rc::new(segment_mask(&cap_boundaries, true));
    for i in 0..cfg.cap_blocks {
        cap_x = block_forward(
            tape,
            pv,
            &format!("vit.capdec.blocks.{i}"),
            cfg.block_cfg(),
            cap_x,
            &cap_angles,
            &cap_mask,
        )?;
    }
    let cap_x = layer_norm(tape, pv, "vit.capdec.final_norm", cap_x)?;
    let logits = linear(tape, pv, "vit.capdec.lm_head", cap_x)?;
    let l_caption = caption_loss_graph(tape, logits, &targets, &sup_mask)?;

    let scaled = tape.scale(l_caption, dual.lambda)?;
    tape.add(l_siglip, scaled)
}

/// Progressive resolution sampling: the max image side doubles every
/// `double_every` steps, capped at `max_side`.
#[derive(Debug, Clone, Copy)]
pub struct ResolutionSchedule {
    pub base_side: usize,
    pub double_every: usize,
    pub max_side: usize,
}

impl ResolutionSchedule {
    pub fn side_at(&self, step: usize) -> usize {
        let doublings = step / self.double_every.max(1);
        self.base_side
            .saturating_mul(1usize << doublings.min(24))
            .min(self.max_side)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::packing::patchify;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_cfg() -> VitCfg {
        VitCfg {
            patch_size: 4,
            d_v: 16,
            heads: 2,
            blocks: 2,
            mlp_hidden: 32,
            abs_rows: 4,
            abs_cols: 4,
            d_embed: 8,
            cap_blocks: 1,
            ..VitCfg::default()
        }
    }

    fn rand_image(h: usize, w: usize, rng: &mut ChaCha8Rng) -> PatchSeq {
        patchify(&Tensor::randn(&[h, w, 1], rng), 4).unwrap()
    }

    #[test]
    fn encode_shapes_and_boundaries() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = small_cfg();
        let mut params = Params::new();
        init_vit(&mut params, cfg, 1, &mut rng);
        let a = rand_image(8, 8, &mut rng); // 2x2 grid
        let out = encode_images(&params, cfg, &[a]).unwrap();
        assert_eq!(out.tokens.shape(), &[4, 16]);
        assert_eq!(out.boundaries, vec![0, 4]);

        let b = rand_image(8, 8, &mut rng);
        let c = rand_image(16, 8, &mut rng); // 4x2 grid
        let both = encode_images(&params, cfg, &[b, c]).unwrap();
        assert_eq!(both.boundaries, vec![0, 4, 12]);
    }

    #[test]
    fn encode_empty_batch_is_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cfg = small_cfg();
        let mut params = Params::new();
        init_vit(&mut params, cfg, 1, &mut rng);
        assert!(encode_images(&params, cfg, &[]).is_err());
    }

    #[test]
    fn packed_encoding_matches_per_image() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = small_cfg();
        let mut params = Params::new();
        init_vit(&mut params, cfg, 1, &mut rng);
        let a = rand_image(8, 8, &mut rng);
        let b = rand_image(16, 8, &mut rng);
        let packed = encode_images(&params, cfg, &[a.clone(), b.clone()]).unwrap();
        let ea = encode_images(&params, cfg, &[a]).unwrap();
        let eb = encode_images(&params, cfg, &[b]).unwrap();
        for (i, &v) in ea.tokens.data().iter().enumerate() {
            assert!((packed.tokens.data()[i] - v).abs() < 1e-5);
        }
        let off = ea.tokens.numel();
        for (i, &v) in eb.tokens.data().iter().enumerate() {
            assert!((packed.tokens.data()[off + i] - v).abs() < 1e-5);
        }
    }

    #[test]
    fn siglip_loss_values() {
        // Mutually orthogonal rows: every logit is t*0 + 0 = 0, so each pair
        // contributes softplus(0) = log 2 regardless of sign.
        let img = Tensor::new(vec![2, 4], vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
        let txt = Tensor::new(vec![2, 4], vec![0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        let cfg = DualLossConfig { lambda: 2.0, temperature: 1.0, bias: 0.0 };
        let l = siglip_loss(&img, &txt, cfg).unwrap();
        assert!((l - std::f32::consts::LN_2).abs() < 1e-5);

        // n=1, identical pair, t=10, b=0 -> log(1 + e^-10) ~ 4.54e-5.
        let one = Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap();
        let cfg = DualLossConfig { lambda: 2.0, temperature: 10.0, bias: 0.0 };
        let l = siglip_loss(&one, &one, cfg).unwrap();
        assert!((l - 4.54e-5).abs() < 1e-6, "{l}");
    }

    #[test]
    fn siglip_zero_row_is_error() {
        let img = Tensor::zeros(&[2, 3]);
        let txt = Tensor::full(&[2, 3], 1.0);
        assert!(siglip_loss(&img, &txt, DualLossConfig::default()).is_err());
    }

    #[test]
    fn siglip_decreases_when_matched_similarity_rises() {
        let cfg = DualLossConfig { lambda: 2.0, temperature: 4.0, bias: 0.0 };
        let txt = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let worse = Tensor::new(vec![2, 2], vec![0.6, 0.8, 0.0, 1.0]).unwrap();
        let better = Tensor::new(vec![2, 2], vec![0.9, (1.0f32 - 0.81).sqrt(), 0.0, 1.0]).unwrap();
        let lw = siglip_loss(&worse, &txt, cfg).unwrap();
        let lb = siglip_loss(&better, &txt, cfg).unwrap();
        assert!(lb < lw);
    }

    #[test]
    fn siglip_symmetric_under_joint_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let img = Tensor::randn(&[3, 4], &mut rng);
        let txt = Tensor::randn(&[3, 4], &mut rng);
        let perm = [2usize, 0, 1];
        let permute = |t: &Tensor| {
            let mut d = Vec::new();
            for &p in &perm {
                d.extend_from_slice(&t.data()[p * 4..(p + 1) * 4]);
            }
            Tensor::new(vec![3, 4], d).unwrap()
        };
        let cfg = DualLossConfig::default();
        let a = siglip_loss(&img, &txt, cfg).unwrap();
        let b = siglip_loss(&permute(&img), &permute(&txt), cfg).unwrap();
        assert!((a - b).abs() < 1e-6);
    }

    #[test]
    fn caption_loss_uniform_and_one_hot() {
        let n = 4;
        let v = 10;
        let logits = Tensor::zeros(&[n, v]);
        let targets = vec![3usize; n];
        let mask = vec![true; n];
        let l = caption_loss(&logits, &targets, &mask).unwrap();
        assert!((l - (v as f32).ln()).abs() < 1e-5);

        let mut hot = Tensor::zeros(&[n, v]);
        for i in 0..n {
            hot.set2(i, 3, 50.0);
        }
        let l = caption_loss(&hot, &targets, &mask).unwrap();
        assert!(l < 1e-6);
    }

    #[test]
    fn caption_loss_masked_mean_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 6;
        let v = 7;
        let logits = Tensor::randn(&[n, v], &mut rng);
        let targets: Vec<usize> = (0..n).map(|i| i % v).collect();
        let mask: Vec<bool> = (0..n).map(|i| i % 2 == 0).collect();
        let l = caption_loss(&logits, &targets, &mask).unwrap();
        // Loop oracle: explicit per-position CE averaged over unmasked.
        let mut total = 0.0f64;
        let mut count = 0usize;
        for i in 0..n {
            if !mask[i] {
                continue;
            }
            let row: Vec<f64> = (0..v).map(|j| logits.get2(i, j) as f64).collect();
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|x| (x - mx).exp()).sum();
            total += -(row[targets[i]] - mx - z.ln());
            count += 1;
        }
        assert!((l as f64 - total / count as f64).abs() < 1e-5);
    }

    #[test]
    fn caption_loss_all_masked_is_error() {
        let logits = Tensor::zeros(&[3, 5]);
        assert!(caption_loss(&logits, &[0, 0, 0], &[false, false, false]).is_err());
    }

    #[test]
    fn pretrain_loss_lambda_weighting() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let cfg = small_cfg();
        let mut params = Params::new();
        init_vit(&mut params, cfg, 1, &mut rng);
        let batch = vec![
            CaptionedImage { patches: rand_image(8, 8, &mut rng), caption: vec![10, 20, 30] },
            CaptionedImage { patches: rand_image(8, 8, &mut rng), caption: vec![40, 50] },
        ];
        let loss_at = |lambda: f32| -> f32 {
            let mut tape = Tape::new();
            let pv = params.load_into(&mut tape);
            let dual = DualLossConfig { lambda, temperature: 10.0, bias: -2.0 };
            let l = vit_pretrain_loss_graph(&mut tape, &pv, cfg, &batch, dual).unwrap();
            tape.value(l).item()
        };
        let l0 = loss_at(0.0);
        let l1 = loss_at(1.0);
        let l2 = loss_at(2.0);
        // lambda=0 equals siglip alone; lambda=2 adds 2x the caption term.
        let caption = l1 - l0;
        assert!(caption > 0.0);
        assert!((l2 - (l0 + 2.0 * caption)).abs() < 1e-4);
    }

    #[test]
    fn pretrain_loss_grad_check_through_patch_embed() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let cfg = small_cfg();
        let mut params = Params::new();
        init_vit(&mut params, cfg, 1, &mut rng);
        let batch = vec![
            CaptionedImage { patches: rand_image(8, 8, &mut rng), caption: vec![5, 6] },
            CaptionedImage { patches: rand_image(16, 8, &mut rng), caption: vec![9] },
        ];
        // Check d(loss)/d(patch_embed.w): it feeds both loss terms through
        // the whole encoder, both pooling heads, and the caption prefix.
        let x = params.get("vit.patch_embed.w").unwrap().clone();
        let p = params.clone();
        let f = move |tape: &mut Tape, v: crate::tensor::Val| {
            let mut pv = p.load_into(tape);
            pv.set("vit.patch_embed.w", v);
            vit_pretrain_loss_graph(tape, &pv, cfg, &batch, DualLossConfig::default())
        };
        let e = crate::tensor::grad_check(&f, &x, 1e-3).unwrap();
        assert!(e < 1e-3, "max_rel_error {e}");
    }

    #[test]
    fn resolution_schedule_doubles() {
        let s = ResolutionSchedule { base_side: 8, double_every: 100, max_side: 64 };
        assert_eq!(s.side_at(0), 8);
        assert_eq!(s.side_at(99), 8);
        assert_eq!(s.side_at(100), 16);
        assert_eq!(s.side_at(250), 32);
        assert_eq!(s.side_at(10_000), 64);
    }
}
