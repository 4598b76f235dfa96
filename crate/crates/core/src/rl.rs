//! Online policy mirror descent with a binary verifier reward, KL
//! regularization toward the iteration-start reference policy, length-based
//! reward shaping, and curriculum / prioritized prompt sampling. Includes an
//! enumerable two-step toy task with a tabular softmax policy used by the
//! verification suites.

use rand::Rng;

use crate::{Error, Result};

/// One sampled response with per-token log-probs under the current policy
/// and the frozen reference.
#[derive(Debug, Clone)]
pub struct RlSample {
    /// Index of the prompt this response answers (baseline grouping).
    pub prompt: usize,
    pub logp_cur: Vec<f32>,
    pub logp_ref: Vec<f32>,
    /// Binary verifier outcome.
    pub reward: f32,
    pub length: usize,
}

#[derive(Debug, Clone, Default)]
pub struct RlBatch {
    pub samples: Vec<RlSample>,
}

#[derive(Debug, Clone, Copy)]
pub struct LengthPenalty {
    pub min_len: usize,
    pub max_len: usize,
    pub weight: f32,
}

#[derive(Debug, Clone, Copy)]
pub struct MirrorConfig {
    pub tau: f32,
    pub length_penalty: LengthPenalty,
}

impl Default for MirrorConfig {
    fn default() -> Self {
        MirrorConfig {
            tau: 0.1,
            length_penalty: LengthPenalty { min_len: 64, max_len: 512, weight: 0.5 },
        }
    }
}

/// Sampled-trajectory estimate of KL(cur || ref): sum of per-token log-prob
/// differences. Negative per sample is fine; non-negative in expectation.
pub fn seq_kl(logp_cur: &[f32], logp_ref: &[f32]) -> Result<f32> {
    if logp_cur.len() != logp_ref.len() {
        return Err(Error::Shape(format!(
            "seq_kl: length mismatch {} vs {}",
            logp_cur.len(),
            logp_ref.len()
        )));
    }
    Ok(logp_cur.iter().zip(logp_ref).map(|(c, r)| c - r).sum())
}

/// Linear length penalty: no penalty up to `min_len`, ramping to `weight`
/// at `max_len`, clipped beyond. Never turns a failure into a positive
/// reward (it only subtracts).
pub fn length_shaped_reward(r: f32, length: usize, p: LengthPenalty) -> f32 {
    debug_assert!(length >= 1);
    let span = p.max_len.saturating_sub(p.min_len);
    let frac = if span == 0 {
        if length > p.min_len { 1.0 } else { 0.0 }
    } else {
        ((length as f32 - p.min_len as f32) / span as f32).clamp(0.0, 1.0)
    };
    r - p.weight * frac
}

/// Mirror-descent objective and per-response score-function signal:
/// objective = mean(shaped reward) - tau * mean(seq_kl); signal_i =
/// shaped_i - tau * kl_i, centered by its per-prompt mean (baseline).
pub fn mirror_objective(batch: &RlBatch, cfg: &MirrorConfig) -> Result<(f32, Vec<f32>)> {
    if cfg.tau <= 0.0 {
        return Err(Error::Invalid("mirror_objective: tau must be > 0".into()));
    }
    if batch.samples.is_empty() {
        return Err(Error::Invalid("mirror_objective: empty batch".into()));
    }
    let mut raw = Vec::with_capacity(batch.samples.len());
    let mut total = 0.0f64;
    for s in &batch.samples {
        let shaped = length_shaped_reward(s.reward, s.length, cfg.length_penalty);
        let kl = seq_kl(&s.logp_cur, &s.logp_ref)?;
        if !kl.is_finite() {
            return Err(Error::Invalid("mirror_objective: non-finite log-probs".into()));
        }
        let v = shaped - cfg.tau * kl;
        raw.push(v);
        total += v as f64;
    }
    let objective = (total / raw.len() as f64) as f32;
    // Per-prompt mean baseline.
    let max_prompt = batch.samples.iter().map(|s| s.prompt).max().unwrap();
    let mut sums = vec![0.0f32; max_prompt + 1];
    let mut counts = vec![0usize; max_prompt + 1];
    for (s, &v) in batch.samples.iter().zip(&raw) {
        sums[s.prompt] += v;
        counts[s.prompt] += 1;
    }
    let signals = batch
        .samples
        .iter()
        .zip(&raw)
        .map(|(s, &v)| v - sums[s.prompt] / counts[s.prompt] as f32)
        .collect();
    Ok((objective, signals))
}

/// Prompt-pool entry for batch selection.
#[derive(Debug, Clone, Copy)]
pub struct PoolItem {
    /// 0 = easiest, 1 = hardest.
    pub difficulty: f32,
    /// Running per-instance success rate in [0, 1].
    pub success_rate: f32,
}

#[derive(Debug, Clone, Copy)]
pub enum SamplingStrategy {
    /// Easy-first, shifting toward hard as `progress` goes 0 -> 1.
    Curriculum { progress: f32 },
    /// Weights proportional to (1 - success_rate).
    Prioritized,
}

/// Normalized sampling weights over the pool.
pub fn sampling_weights(pool: &[PoolItem], strategy: SamplingStrategy) -> Result<Vec<f32>> {
    if pool.is_empty() {
        return Err(Error::Invalid("sampling_weights: empty pool".into()));
    }
    for it in pool {
        if !(0.0..=1.0).contains(&it.success_rate) || !(0.0..=1.0).contains(&it.difficulty) {
            return Err(Error::Invalid("sampling_weights: labels out of [0,1]".into()));
        }
    }
    let mut w: Vec<f32> = match strategy {
        SamplingStrategy::Prioritized => pool.iter().map(|it| 1.0 - it.success_rate).collect(),
        SamplingStrategy::Curriculum { progress } => {
            let p = progress.clamp(0.0, 1.0);
            pool.iter()
                .map(|it| (1.0 - p) * (1.0 - it.difficulty) + p * it.difficulty)
                .collect()
        }
    };
    let sum: f32 = w.iter().sum();
    if sum <= 0.0 {
        // Everything solved (or degenerate labels): fall back to uniform.
        w = vec![1.0 / pool.len() as f32; pool.len()];
    } else {
        for v in &mut w {
            *v /= sum;
        }
    }
    Ok(w)
}

/// Draws `n` prompt indices (with replacement) by the strategy's weights.
pub fn sample_training_batch<R: Rng>(
    pool: &[PoolItem],
    strategy: SamplingStrategy,
    n: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    let w = sampling_weights(pool, strategy)?;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let mut u: f32 = rng.gen();
        let mut pick = pool.len() - 1;
        for (i, &wi) in w.iter().enumerate() {
            if u < wi {
                pick = i;
                break;
            }
            u -= wi;
        }
        out.push(pick);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Enumerable two-step toy task + tabular softmax policy.

/// Pick two actions in sequence; reward 1 iff both match the target pair.
#[derive(Debug, Clone, Copy)]
pub struct TwoStepTask {
    pub n_actions: usize,
    pub target: (usize, usize),
}

impl TwoStepTask {
    pub fn reward(&self, a: (usize, usize)) -> f32 {
        (a == self.target) as u8 as f32
    }

    pub fn chance_reward(&self) -> f32 {
        1.0 / (self.n_actions * self.n_actions) as f32
    }
}

fn softmax(z: &[f32]) -> Vec<f32> {
    let mx = z.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let e: Vec<f32> = z.iter().map(|v| (v - mx).exp()).collect();
    let s: f32 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Tabular softmax policy over the two-step task: independent logits for
/// the first action and per-first-action logits for the second.
#[derive(Debug, Clone)]
pub struct TabularPolicy {
    pub n: usize,
    pub logits1: Vec<f32>,
    pub logits2: Vec<Vec<f32>>,
}

impl TabularPolicy {
    pub fn new<R: Rng>(n: usize, init_scale: f32, rng: &mut R) -> Self {
        let mut g = || {
            let u1: f32 = rng.gen::<f32>().max(1e-7);
            let u2: f32 = rng.gen();
            (-2.0 * u1.ln()).sqrt() * (2.0 * std::f32::consts::PI * u2).cos() * init_scale
        };
        TabularPolicy {
            n,
            logits1: (0..n).map(|_| g()).collect(),
            logits2: (0..n).map(|_| (0..n).map(|_| g()).collect()).collect(),
        }
    }

    pub fn prob(&self, a: (usize, usize)) -> f32 {
        softmax(&self.logits1)[a.0] * softmax(&self.logits2[a.0])[a.1]
    }

    pub fn logp_tokens(&self, a: (usize, usize)) -> Vec<f32> {
        vec![
            softmax(&self.logits1)[a.0].ln(),
            softmax(&self.logits2[a.0])[a.1].ln(),
        ]
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> (usize, usize) {
        let draw = |p: &[f32], rng: &mut R| -> usize {
            let mut u: f32 = rng.gen();
            for (i, &pi) in p.iter().enumerate() {
                if u < pi {
                    return i;
                }
                u -= pi;
            }
            p.len() - 1
        };
        let a1 = draw(&softmax(&self.logits1), rng);
        let a2 = draw(&softmax(&self.logits2[a1]), rng);
        (a1, a2)
    }

    pub fn expected_reward(&self, task: &TwoStepTask) -> f32 {
        let mut total = 0.0;
        for a1 in 0..self.n {
            for a2 in 0..self.n {
                total += self.prob((a1, a2)) * task.reward((a1, a2));
            }
        }
        total
    }

    /// Exact KL(self || other) over the full joint distribution.
    pub fn kl_to(&self, other: &TabularPolicy) -> f32 {
        let mut total = 0.0;
        for a1 in 0..self.n {
            for a2 in 0..self.n {
                let p = self.prob((a1, a2));
                if p > 0.0 {
                    total += p * (p.ln() - other.prob((a1, a2)).ln());
                }
            }
        }
        total
    }
}

/// Mirror-descent trainer enforcing the iteration protocol: the reference
/// is frozen at iteration start and replaced by the optimized policy at
/// iteration end.
pub struct MirrorTrainer {
    pub task: TwoStepTask,
    pub policy: TabularPolicy,
    reference: Option<TabularPolicy>,
    pub cfg: MirrorConfig,
    /// Base step size; the effective inner step is lr / (1 + tau), the
    /// classic scaling for a tau-strongly-convex regularized subproblem.
    pub lr: f32,
    pub inner_steps: usize,
}

impl MirrorTrainer {
    pub fn new(task: TwoStepTask, policy: TabularPolicy, cfg: MirrorConfig, lr: f32) -> Result<Self> {
        if cfg.tau <= 0.0 {
            return Err(Error::Invalid("MirrorTrainer: tau must be > 0".into()));
        }
        Ok(MirrorTrainer { task, policy, reference: None, cfg, lr, inner_steps: 10 })
    }

    pub fn begin_iteration(&mut self) {
        assert!(self.reference.is_none(), "iteration already in progress");
        self.reference = Some(self.policy.clone());
    }

    pub fn end_iteration(&mut self) {
        // The optimized policy "assumes the role of reference" implicitly:
        // dropping the frozen copy means the next begin_iteration re-freezes
        // the current (optimized) policy.
        assert!(self.reference.take().is_some(), "no iteration in progress");
    }

    pub fn reference(&self) -> Option<&TabularPolicy> {
        self.reference.as_ref()
    }

    /// One exact gradient-ascent step on the regularized objective
    /// J = E_pi[r - tau (log pi - log ref)], using full enumeration (the
    /// task is enumerable). dJ/dz_b = pi(b) (g_b - E[g]) with
    /// g = r - tau(log pi - log ref).
    fn exact_inner_step(&mut self) {
        let reference = self.reference.as_ref().expect("begin_iteration first");
        let n = self.policy.n;
        let tau = self.cfg.tau;
        let eta = self.lr / (1.0 + tau);
        let p1 = softmax(&self.policy.logits1);
        // g over the joint, plus marginals needed for each logit table.
        let mut g = vec![vec![0.0f32; n]; n];
        for a1 in 0..n {
            for a2 in 0..n {
                let pi = self.policy.prob((a1, a2));
                let rf = reference.prob((a1, a2));
                g[a1][a2] = self.task.reward((a1, a2)) - tau * (pi.ln() - rf.ln());
            }
        }
        let p2: Vec<Vec<f32>> = (0..n).map(|a1| softmax(&self.policy.logits2[a1])).collect();
        // E[g | a1] and E[g].
        let cond: Vec<f32> = (0..n)
            .map(|a1| (0..n).map(|a2| p2[a1][a2] * g[a1][a2]).sum())
            .collect();
        let mean: f32 = (0..n).map(|a1| p1[a1] * cond[a1]).sum();
        let mut new1 = self.policy.logits1.clone();
        for b in 0..n {
            new1[b] += eta * p1[b] * (cond[b] - mean);
        }
        let mut new2 = self.policy.logits2.clone();
        for a1 in 0..n {
            for b in 0..n {
                new2[a1][b] += eta * p1[a1] * p2[a1][b] * (g[a1][b] - cond[a1]);
            }
        }
        self.policy.logits1 = new1;
        self.policy.logits2 = new2;
    }

    /// One full mirror-descent iteration: freeze reference, approximately
    /// solve the regularized subproblem, promote the result.
    pub fn iteration(&mut self) {
        self.begin_iteration();
        for _ in 0..self.inner_steps {
            self.exact_inner_step();
        }
        self.end_iteration();
    }

    /// Samples a rollout batch under the current policy against the frozen
    /// reference (for objective reporting through [`mirror_objective`]).
    pub fn sample_batch<R: Rng>(&self, group: usize, rng: &mut R) -> RlBatch {
        let reference = self.reference.as_ref().unwrap_or(&self.policy);
        let samples = (0..group)
            .map(|_| {
                let a = self.policy.sample(rng);
                RlSample {
                    prompt: 0,
                    logp_cur: self.policy.logp_tokens(a),
                    logp_ref: reference.logp_tokens(a),
                    reward: self.task.reward(a),
                    length: 2,
                }
            })
            .collect();
        RlBatch { samples }
    }
}

/// Closed-form single mirror-descent solution for an enumerable bandit:
/// pi'(a) proportional to pi(a) * exp(r(a) / tau).
pub fn closed_form_mirror_update(probs: &[f32], rewards: &[f32], tau: f32) -> Result<Vec<f32>> {
    if probs.len() != rewards.len() {
        return Err(Error::Shape("closed_form: length mismatch".into()));
    }
    if tau <= 0.0 {
        return Err(Error::Invalid("closed_form: tau must be > 0".into()));
    }
    let mx = rewards.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let unnorm: Vec<f32> = probs
        .iter()
        .zip(rewards)
        .map(|(&p, &r)| p * ((r - mx) / tau).exp())
        .collect();
    let s: f32 = unnorm.iter().sum();
    Ok(unnorm.into_iter().map(|v| v / s).collect())
}
