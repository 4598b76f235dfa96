//! Synthetic task generators: a captioned-shapes corpus for vision
//! pre-training and a key-retrieval corpus for long-context training and
//! needle-in-a-haystack evaluation. Everything is seeded and deterministic.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::decoder::{greedy_decode, MoeCfg};
use crate::niah::{HaystackSpec, Modality};
use crate::nn::Params;
use crate::packing::{patchify, PatchSeq};
use crate::tensor::Tensor;
use crate::training::{LabeledSeq, Role};
use crate::vit::CaptionedImage;
use crate::{Error, Result};

// ---------------------------------------------------------------------------
// Captioned shapes.

const SHAPES: [&str; 4] = ["square", "cross", "vbar", "hbar"];

fn draw_shape(img: &mut Tensor, shape: usize, cell_r: usize, cell_c: usize, cell: usize) {
    let w = img.shape()[1];
    let (r0, c0) = (cell_r * cell, cell_c * cell);
    let mut put = |r: usize, c: usize| {
        let idx = (r0 + r) * w + (c0 + c);
        img.data_mut()[idx] = 1.0;
    };
    match shape {
        0 => {
            for r in 0..cell {
                for c in 0..cell {
                    put(r, c);
                }
            }
        }
        1 => {
            let m = cell / 2;
            for i in 0..cell {
                put(m, i);
                put(i, m);
            }
        }
        2 => {
            let m = cell / 2;
            for r in 0..cell {
                put(r, m);
            }
        }
        _ => {
            let m = cell / 2;
            for c in 0..cell {
                put(m, c);
            }
        }
    }
}

/// Deterministic corpus of small single-channel images, each showing one
/// shape in one grid cell, captioned with its name and cell coordinates.
/// The first 64 examples (4 shapes x 4x4 cells at `side = 16`) are all
/// distinct, which SigLIP's in-batch negatives require.
pub fn captioned_shapes(n: usize, side: usize, patch_size: usize) -> Result<Vec<CaptionedImage>> {
    if side % patch_size != 0 || side < 2 * patch_size {
        return Err(Error::Invalid(format!(
            "captioned_shapes: side {side} not a usable multiple of patch {patch_size}"
        )));
    }
    let cells = 4.min(side / patch_size);
    let cell = side / cells;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let shape = i % SHAPES.len();
        let pos = (i / SHAPES.len()) % (cells * cells);
        let (cr, cc) = (pos / cells, pos % cells);
        let mut img = Tensor::zeros(&[side, side, 1]);
        draw_shape(&mut img, shape, cr, cc, cell);
        let caption = format!("{} at {cr} {cc}", SHAPES[shape]);
        out.push(CaptionedImage {
            patches: patchify(&img, patch_size)?,
            caption: caption.bytes().map(|b| b as usize).collect(),
        });
    }
    Ok(out)
}

/// Convenience wrapper returning only the patch sequences.
pub fn shape_patches(n: usize, side: usize, patch_size: usize) -> Result<Vec<PatchSeq>> {
    Ok(captioned_shapes(n, side, patch_size)?.into_iter().map(|c| c.patches).collect())
}

// ---------------------------------------------------------------------------
// Key retrieval.

/// Keys and values are single tokens from alphabets disjoint from the
/// lowercase filler, so retrieval is unambiguous.
pub const KEY_ALPHABET: &[u8] = b"ABCDEFGH";
pub const VALUE_ALPHABET: &[u8] = b"01234567";

/// A haystack spec with a random key/value pair and uniform needle position.
pub fn retrieval_spec<R: Rng>(total_len: usize, rng: &mut R) -> HaystackSpec {
    let key = KEY_ALPHABET[rng.gen_range(0..KEY_ALPHABET.len())] as usize;
    let value = VALUE_ALPHABET[rng.gen_range(0..VALUE_ALPHABET.len())] as usize;
    HaystackSpec {
        modality: Modality::Text,
        total_len,
        needle_key: vec![key],
        needle_value: vec![value],
        needle_pos: rng.gen(),
    }
}

/// A supervised training sequence of exactly `len` tokens:
/// haystack ++ query ++ answer, with only the answer token labeled for loss.
pub fn retrieval_seq<R: Rng>(len: usize, rng: &mut R) -> Result<LabeledSeq> {
    // query "?K=" is 3 tokens, the answer 1.
    if len < 12 {
        return Err(Error::Invalid(format!("retrieval_seq: len {len} too short")));
    }
    let spec = retrieval_spec(len - 4, rng);
    let hay = crate::niah::build_haystack(&spec, rng)?;
    let mut ids = hay.tokens;
    ids.extend_from_slice(&hay.query);
    ids.extend_from_slice(&hay.answer);
    let mut roles = vec![Role::System; ids.len()];
    *roles.last_mut().unwrap() = Role::Assistant;
    Ok(LabeledSeq { ids, roles })
}

/// Corpus with lengths drawn uniformly per bucket of `lens` entries
/// (`count` sequences of each requested length band `(lo, hi]`).
pub fn retrieval_corpus(bands: &[(usize, usize)], count: usize, seed: u64) -> Result<Vec<LabeledSeq>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(bands.len() * count);
    for &(lo, hi) in bands {
        for _ in 0..count {
            let len = rng.gen_range(lo.max(12) + 1..=hi.max(lo.max(12) + 1));
            out.push(retrieval_seq(len, &mut rng)?);
        }
    }
    Ok(out)
}

/// A denser training variant of [`retrieval_seq`]: one needle "K=V;" in
/// lowercase filler, then the query "?K=" followed by the answer, repeated
/// `reps` times. Every answer token is supervised, so each sequence carries
/// `reps` learning signals instead of one. The first repetition is exactly
/// the evaluation prompt format; later repetitions only densify training.
pub fn single_retrieval_seq<R: Rng>(len: usize, reps: usize, rng: &mut R) -> Result<LabeledSeq> {
    let reps = reps.max(1);
    let qa = 4 * reps; // "?K=V" per repetition
    if len < qa + 8 {
        return Err(Error::Invalid(format!(
            "single_retrieval_seq: len {len} too short for {reps} repetitions"
        )));
    }
    let hay = len - qa;
    let key = KEY_ALPHABET[rng.gen_range(0..KEY_ALPHABET.len())] as usize;
    let val = VALUE_ALPHABET[rng.gen_range(0..VALUE_ALPHABET.len())] as usize;
    let filler = crate::niah::TEXT_FILLER;
    let mut ids: Vec<usize> =
        (0..hay).map(|_| filler[rng.gen_range(0..filler.len())] as usize).collect();
    let off = rng.gen_range(0..=hay - 4);
    ids[off] = key;
    ids[off + 1] = b'=' as usize;
    ids[off + 2] = val;
    ids[off + 3] = b';' as usize;
    let mut roles = vec![Role::System; hay];
    for _ in 0..reps {
        ids.extend([b'?' as usize, key, b'=' as usize, val]);
        roles.extend([Role::System, Role::System, Role::System, Role::Assistant]);
    }
    Ok(LabeledSeq { ids, roles })
}

/// Corpus of [`single_retrieval_seq`] sequences, `count` per `(lo, hi]`
/// length band.
pub fn single_retrieval_corpus(
    bands: &[(usize, usize)],
    count: usize,
    reps: usize,
    seed: u64,
) -> Result<Vec<LabeledSeq>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(bands.len() * count);
    for &(lo, hi) in bands {
        let min = lo.max(4 * reps.max(1) + 8);
        for _ in 0..count {
            let len = rng.gen_range(min + 1..=hi.max(min + 1));
            out.push(single_retrieval_seq(len, reps, &mut rng)?);
        }
    }
    Ok(out)
}

/// Wraps a decoder as the model closure [`crate::niah::evaluate_recall`]
/// expects: greedy continuation of the prompt for the answer length.
pub fn decoder_niah_model<'a>(
    params: &'a Params,
    cfg: MoeCfg,
) -> impl FnMut(&[usize], usize) -> Vec<usize> + 'a {
    move |prompt: &[usize], answer_len: usize| {
        greedy_decode(params, cfg, prompt, answer_len, None).unwrap_or_default()
    }
}

/// Reference retriever: scans the prompt for `key=` and echoes the value.
/// Used as a harness oracle and as the CLI's model-free baseline.
pub fn scan_model(prompt: &[usize], answer_len: usize) -> Vec<usize> {
    // The query is the suffix "?K="; find the earlier "K=" occurrence.
    let q = b'?' as usize;
    let Some(qpos) = prompt.iter().rposition(|&t| t == q) else {
        return Vec::new();
    };
    let key = &prompt[qpos + 1..prompt.len() - 1];
    for i in 0..qpos.saturating_sub(key.len()) {
        if &prompt[i..i + key.len()] == key && prompt[i + key.len()] == b'=' as usize {
            let start = i + key.len() + 1;
            return prompt[start..(start + answer_len).min(prompt.len())].to_vec();
        }
    }
    Vec::new()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::niah::{desk_buckets, evaluate_recall};

    #[test]
    fn shapes_are_distinct_and_patch_shaped() {
        let corpus = captioned_shapes(64, 16, 4).unwrap();
        assert_eq!(corpus.len(), 64);
        let mut captions: Vec<_> = corpus.iter().map(|c| c.caption.clone()).collect();
        captions.sort();
        captions.dedup();
        assert_eq!(captions.len(), 64, "captions must be pairwise distinct");
        for c in &corpus {
            assert_eq!(c.patches.grid, (4, 4));
            assert_eq!(c.patches.patches.shape(), &[16, 16]);
            let sum: f32 = c.patches.patches.data().iter().sum();
            assert!(sum > 0.0, "shape must be drawn");
        }
        assert!(captioned_shapes(4, 15, 4).is_err());
    }

    #[test]
    fn retrieval_seq_supervises_only_answer() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..20 {
            let seq = retrieval_seq(64, &mut rng).unwrap();
            assert_eq!(seq.ids.len(), 64);
            let sup: Vec<usize> =
                (0..64).filter(|&i| seq.roles[i] == Role::Assistant).collect();
            assert_eq!(sup, vec![63]);
            // The answer equals the value stored at the needle.
            assert_eq!(seq.ids[62], b'=' as usize);
            assert!(VALUE_ALPHABET.contains(&(seq.ids[63] as u8)));
        }
        assert!(retrieval_seq(8, &mut rng).is_err());
    }

    #[test]
    fn retrieval_corpus_lengths_in_bands() {
        let corpus = retrieval_corpus(&[(32, 64), (64, 128)], 10, 1).unwrap();
        assert_eq!(corpus.len(), 20);
        for s in &corpus[..10] {
            assert!(s.ids.len() > 32 && s.ids.len() <= 64);
        }
        for s in &corpus[10..] {
            assert!(s.ids.len() > 64 && s.ids.len() <= 128);
        }
    }

    #[test]
    fn scan_model_gets_full_recall() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let specs: Vec<HaystackSpec> =
            (0..120).map(|i| retrieval_spec(16 + (i * 33) % 4000, &mut rng)).collect();
        let report = evaluate_recall(&specs, &desk_buckets(), 1 << 20, &mut rng, |p, n| {
            scan_model(p, n)
        })
        .unwrap();
        for b in &report.buckets {
            assert_eq!(b.successes, b.trials, "bucket ({}, {}]", b.lo, b.hi);
        }
    }
}
