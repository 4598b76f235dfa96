//! Needle-in-a-haystack evaluation: deterministic haystack construction for
//! text and synthetic video-frame modalities, greedy-decode exact-match
//! scoring, and length-bucketed recall reports.

use rand::Rng;
use serde::Serialize;

use crate::datapipe::{IM_END, IM_START};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Modality {
    Text,
    VideoFrames,
}

#[derive(Debug, Clone)]
pub struct HaystackSpec {
    pub modality: Modality,
    pub total_len: usize,
    pub needle_key: Vec<usize>,
    pub needle_value: Vec<usize>,
    /// Fractional position in [0, 1]; the needle starts at
    /// round(pos * (total_len - needle_len)).
    pub needle_pos: f32,
}

/// A built haystack: the token sequence containing the needle, the retrieval
/// query to append, and the exact answer tokens expected back.
#[derive(Debug, Clone)]
pub struct Haystack {
    pub tokens: Vec<usize>,
    pub query: Vec<usize>,
    pub answer: Vec<usize>,
    pub needle_offset: usize,
}

/// Lowercase prose-ish filler; spaces keep it tokenizable text. Shared with
/// the synthetic retrieval training corpus so train and eval distributions
/// match.
pub const TEXT_FILLER: &[u8] = b"abcdefghijklmnopqrstuvwxyz    ";

fn needle_tokens(key: &[usize], value: &[usize]) -> Vec<usize> {
    let mut n = Vec::with_capacity(key.len() + value.len() + 2);
    n.extend_from_slice(key);
    n.push(b'=' as usize);
    n.extend_from_slice(value);
    n.push(b';' as usize);
    n
}

pub fn needle_offset(pos: f32, total_len: usize, needle_len: usize) -> usize {
    (pos as f64 * (total_len - needle_len) as f64).round() as usize
}

/// Builds the haystack deterministically from the supplied RNG: distractor
/// filler (prose-like bytes for text, frame-token blocks for video) with the
/// key=value needle spliced in at the fractional position.
pub fn build_haystack<R: Rng>(spec: &HaystackSpec, rng: &mut R) -> Result<Haystack> {
    if !(0.0..=1.0).contains(&spec.needle_pos) {
        return Err(Error::Invalid("build_haystack: pos outside [0,1]".into()));
    }
    let needle = needle_tokens(&spec.needle_key, &spec.needle_value);
    if needle.len() > spec.total_len {
        return Err(Error::Invalid(format!(
            "build_haystack: needle ({}) longer than haystack ({})",
            needle.len(),
            spec.total_len
        )));
    }
    let mut tokens = Vec::with_capacity(spec.total_len);
    match spec.modality {
        Modality::Text => {
            for _ in 0..spec.total_len {
                tokens.push(TEXT_FILLER[rng.gen_range(0..TEXT_FILLER.len())] as usize);
            }
        }
        Modality::VideoFrames => {
            // Fixed-size synthetic frames: IM_START, frame-id bytes, IM_END.
            const FRAME: usize = 16;
            while tokens.len() < spec.total_len {
                tokens.push(IM_START);
                for _ in 0..FRAME - 2 {
                    tokens.push(rng.gen_range(0..256));
                }
                tokens.push(IM_END);
            }
            tokens.truncate(spec.total_len);
        }
    }
    let offset = needle_offset(spec.needle_pos, spec.total_len, needle.len());
    tokens[offset..offset + needle.len()].copy_from_slice(&needle);
    let mut query = vec![b'?' as usize];
    query.extend_from_slice(&spec.needle_key);
    query.push(b'=' as usize);
    Ok(Haystack { tokens, query, answer: spec.needle_value.clone(), needle_offset: offset })
}

#[derive(Debug, Clone, Serialize)]
pub struct BucketStat {
    pub lo: usize,
    pub hi: usize,
    pub trials: usize,
    pub successes: usize,
}

impl BucketStat {
    pub fn recall(&self) -> f32 {
        if self.trials == 0 {
            0.0
        } else {
            self.successes as f32 / self.trials as f32
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct BucketReport {
    pub buckets: Vec<BucketStat>,
}

impl BucketReport {
    pub fn table(&self) -> String {
        let mut out = String::from("bucket            trials  recall\n");
        for b in &self.buckets {
            out.push_str(&format!(
                "({:>6}, {:>6}]  {:>6}  {:.3}\n",
                b.lo,
                b.hi,
                b.trials,
                b.recall()
            ));
        }
        out
    }
}

/// Desk-scale geometric buckets: (0,128] ... (2048,4096].
pub fn desk_buckets() -> Vec<(usize, usize)> {
    vec![(0, 128), (128, 256), (256, 512), (512, 1024), (1024, 2048), (2048, 4096)]
}

/// Full-scale buckets matching the published table, up to 131,072.
pub fn paper_buckets() -> Vec<(usize, usize)> {
    vec![
        (0, 2048),
        (2048, 4096),
        (4096, 8192),
        (8192, 16384),
        (16384, 32768),
        (32768, 65536),
        (65536, 131072),
    ]
}

/// Runs every spec through the model and buckets exact-match recall by
/// haystack length. `model` receives the full prompt (haystack + query) and
/// the expected answer length, and returns its greedy continuation. Specs
/// longer than `model_ctx` are recorded as failures, never errors.
pub fn evaluate_recall<F>(
    specs: &[HaystackSpec],
    buckets: &[(usize, usize)],
    model_ctx: usize,
    rng: &mut impl Rng,
    mut model: F,
) -> Result<BucketReport>
where
    F: FnMut(&[usize], usize) -> Vec<usize>,
{
    let mut stats: Vec<BucketStat> = buckets
        .iter()
        .map(|&(lo, hi)| BucketStat { lo, hi, trials: 0, successes: 0 })
        .collect();
    for spec in specs {
        let Some(stat) = stats
            .iter_mut()
            .find(|b| spec.total_len > b.lo && spec.total_len <= b.hi)
        else {
            return Err(Error::Invalid(format!(
                "evaluate_recall: length {} matches no bucket",
                spec.total_len
            )));
        };
        let hay = build_haystack(spec, rng)?;
        stat.trials += 1;
        let mut prompt = hay.tokens.clone();
        prompt.extend_from_slice(&hay.query);
        if prompt.len() + hay.answer.len() > model_ctx {
            continue; // over-context: counted as a failed trial
        }
        let got = model(&prompt, hay.answer.len());
        if got == hay.answer {
            stat.successes += 1;
        }
    }
    Ok(BucketReport { buckets: stats })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn spec(len: usize, pos: f32) -> HaystackSpec {
        HaystackSpec {
            modality: Modality::Text,
            total_len: len,
            needle_key: b"kq".iter().map(|&b| b as usize).collect(),
            needle_value: vec![b'7' as usize],
            needle_pos: pos,
        }
    }

    #[test]
    fn offsets_at_extremes_and_midpoint() {
        // needle = key(2) + '=' + value(1) + ';' = 5 tokens
        let s = spec(100, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let h = build_haystack(&s, &mut rng).unwrap();
        assert_eq!(h.needle_offset, 0);

        let s = spec(100, 1.0);
        let h = build_haystack(&s, &mut rng).unwrap();
        assert_eq!(h.needle_offset + 5, 100);

        // len 1000, 10-token needle, pos 0.5 -> 495.
        assert_eq!(needle_offset(0.5, 1000, 10), 495);
    }

    #[test]
    fn needle_longer_than_haystack_is_error() {
        let mut s = spec(4, 0.5);
        s.needle_key = vec![b'x' as usize; 10];
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        assert!(build_haystack(&s, &mut rng).is_err());
    }

    #[test]
    fn deterministic_given_seed() {
        let s = spec(300, 0.37);
        let a = build_haystack(&s, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = build_haystack(&s, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a.tokens, b.tokens);
        assert_eq!(a.query, b.query);
    }

    #[test]
    fn needle_content_present() {
        let s = spec(200, 0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let h = build_haystack(&s, &mut rng).unwrap();
        let at = h.needle_offset;
        assert_eq!(&h.tokens[at..at + 2], &[b'k' as usize, b'q' as usize]);
        assert_eq!(h.tokens[at + 2], b'=' as usize);
        assert_eq!(h.tokens[at + 3], b'7' as usize);
    }

    #[test]
    fn video_modality_has_frame_markers() {
        let s = HaystackSpec { modality: Modality::VideoFrames, ..spec(160, 0.9) };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let h = build_haystack(&s, &mut rng).unwrap();
        assert!(h.tokens.contains(&IM_START));
        assert!(h.tokens.contains(&IM_END));
    }

    /// Oracle retriever: scans the prompt for "key=" after '?' and echoes
    /// the bytes that followed the same pattern inside the haystack.
    fn echo_oracle(prompt: &[usize], answer_len: usize) -> Vec<usize> {
        let q = b'?' as usize;
        let qpos = prompt.iter().rposition(|&t| t == q).unwrap();
        let key = &prompt[qpos + 1..prompt.len() - 1];
        for start in 0..qpos {
            if prompt[start..].starts_with(key)
                && prompt.get(start + key.len()) == Some(&(b'=' as usize))
            {
                let v = start + key.len() + 1;
                return prompt[v..v + answer_len].to_vec();
            }
        }
        vec![]
    }

    #[test]
    fn echo_oracle_gets_full_recall() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut specs = Vec::new();
        for &(lo, hi) in &desk_buckets() {
            for i in 0..5 {
                let len = lo + (hi - lo) / 2 + i;
                specs.push(spec(len, i as f32 / 4.0));
            }
        }
        let report =
            evaluate_recall(&specs, &desk_buckets(), 1 << 20, &mut rng, echo_oracle).unwrap();
        for b in &report.buckets {
            assert_eq!(b.trials, 5);
            assert_eq!(b.recall(), 1.0, "bucket ({}, {}]", b.lo, b.hi);
        }
    }

    #[test]
    fn random_model_recall_near_chance() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let specs: Vec<HaystackSpec> = (0..2000)
            .map(|i| {
                let mut s = spec(100 + (i % 20), (i % 11) as f32 / 10.0);
                s.needle_value = vec![(i * 37) % 256];
                s
            })
            .collect();
        let mut model_rng = ChaCha8Rng::seed_from_u64(7);
        let report = evaluate_recall(
            &specs,
            &[(0, 4096)],
            1 << 20,
            &mut rng,
            |_prompt, n| (0..n).map(|_| model_rng.gen_range(0..256)).collect(),
        )
        .unwrap();
        let b = &report.buckets[0];
        assert_eq!(b.trials, 2000);
        // Binomial(2000, 1/256): mean ~7.8, generous bounds.
        assert!(b.successes < 30, "successes {}", b.successes);
    }

    #[test]
    fn over_context_is_failure_not_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let specs = vec![spec(100, 0.5)];
        let report = evaluate_recall(&specs, &[(0, 4096)], 50, &mut rng, echo_oracle).unwrap();
        assert_eq!(report.buckets[0].trials, 1);
        assert_eq!(report.buckets[0].successes, 0);
    }

    #[test]
    fn positions_uniform_chi_square() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 10_000;
        let len = 1000;
        let needle_len = 5;
        let mut counts = [0usize; 10];
        for _ in 0..n {
            let pos: f32 = rng.gen();
            let off = needle_offset(pos, len, needle_len);
            let decile = ((off * 10) / (len - needle_len + 1)).min(9);
            counts[decile] += 1;
        }
        let e = n as f64 / 10.0;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - e).powi(2) / e).sum();
        // 9 dof, p = 0.01 critical value.
        assert!(chi2 < 21.666, "chi2 {chi2}, counts {counts:?}");
    }

    #[test]
    fn report_table_renders() {
        let report = BucketReport {
            buckets: vec![BucketStat { lo: 0, hi: 128, trials: 10, successes: 9 }],
        };
        let t = report.table();
        assert!(t.contains("0.900"));
    }
}
