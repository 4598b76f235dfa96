//! Supervised fine-tuning machinery: loss masking by chat role, the
//! two-stage learning-rate schedule with re-warmup, and the two-sub-stage
//! long-context extension loop (4x context per sub-stage, 25% long / 75%
//! replay mixing, RoPE base reset).

use std::fs::File;
use std::io::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::{assemble_multimodal_sequence, decoder_forward_graph, MoeCfg};
use crate::muon::{muon_step, MuonConfig, MuonState};
use crate::nn::Params;
use crate::tensor::{Tape, Tensor, Val};
use crate::{Error, Result};

/// Per-token supervision label. Only assistant content and structural
/// special tokens (turn-end markers) receive loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Role {
    System,
    User,
    Assistant,
    Special,
}

impl Role {
    pub fn supervised(self) -> bool {
        matches!(self, Role::Assistant | Role::Special)
    }
}

/// Mean cross-entropy over supervised positions only. Targets at masked
/// positions are free to hold anything; they cannot influence the loss.
pub fn sft_loss_masked_graph(
    tape: &mut Tape,
    logits: Val,
    targets: &[usize],
    roles: &[Role],
) -> Result<Val> {
    let n = tape.value(logits).shape()[0];
    if targets.len() != n || roles.len() != n {
        return Err(Error::Shape("sft_loss_masked: targets/roles length".into()));
    }
    let picked: Vec<(usize, usize)> = (0..n)
        .filter(|&i| roles[i].supervised())
        .map(|i| (i, targets[i]))
        .collect();
    if picked.is_empty() {
        return Err(Error::Invalid("sft_loss_masked: no supervised tokens".into()));
    }
    let logp = tape.log_softmax(logits)?;
    let sel = tape.gather_elems(logp, picked)?;
    let m = tape.mean(sel)?;
    tape.scale(m, -1.0)
}

pub fn sft_loss_masked(logits: &Tensor, targets: &[usize], roles: &[Role]) -> Result<f32> {
    let mut tape = Tape::new();
    let l = tape.constant(logits.clone());
    let loss = sft_loss_masked_graph(&mut tape, l, targets, roles)?;
    Ok(tape.value(loss).item())
}

/// Shifts a labeled token sequence into next-token supervision: position t
/// predicts token t+1 and inherits that token's role. The final position has
/// nothing to predict and is left unsupervised.
pub fn next_token_supervision(ids: &[usize], roles: &[Role]) -> (Vec<usize>, Vec<Role>) {
    debug_assert_eq!(ids.len(), roles.len());
    let n = ids.len();
    let mut targets = vec![0usize; n];
    let mut target_roles = vec![Role::System; n];
    for t in 0..n.saturating_sub(1) {
        targets[t] = ids[t + 1];
        target_roles[t] = roles[t + 1];
    }
    (targets, target_roles)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecayShape {
    Linear,
    Cosine,
}

#[derive(Debug, Clone, Copy)]
pub struct StageSpec {
    pub seq_len: usize,
    pub steps: usize,
    pub lr_start: f32,
    pub lr_end: f32,
}

/// Two-stage SFT schedule: stage 1 decays 2e-5 -> 2e-6, then stage 2 (at 4x
/// sequence length) re-warms instantaneously to 1e-5 and decays to 1e-6.
#[derive(Debug, Clone, Copy)]
pub struct SftSchedule {
    pub stage1: StageSpec,
    pub stage2: StageSpec,
    pub decay: DecayShape,
}

impl SftSchedule {
    pub fn paper_defaults(seq_len: usize, stage1_steps: usize, stage2_steps: usize) -> Self {
        SftSchedule {
            stage1: StageSpec { seq_len, steps: stage1_steps, lr_start: 2e-5, lr_end: 2e-6 },
            stage2: StageSpec {
                seq_len: seq_len * 4,
                steps: stage2_steps,
                lr_start: 1e-5,
                lr_end: 1e-6,
            },
            decay: DecayShape::Linear,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, s) in [("stage1", &self.stage1), ("stage2", &self.stage2)] {
            if !(s.lr_start > s.lr_end && s.lr_end > 0.0) {
                return Err(Error::Config(format!("{name}: need lr_start > lr_end > 0")));
            }
            if s.steps < 2 {
                return Err(Error::Config(format!("{name}: need at least 2 steps")));
            }
        }
        Ok(())
    }

    pub fn total_steps(&self) -> usize {
        self.stage1.steps + self.stage2.steps
    }
}

fn interp(start: f32, end: f32, t: f32, shape: DecayShape) -> f32 {
    // Exact endpoints regardless of rounding in the interpolation.
    if t == 0.0 {
        return start;
    }
    if t == 1.0 {
        return end;
    }
    match shape {
        DecayShape::Linear => start + (end - start) * t,
        DecayShape::Cosine => end + (start - end) * 0.5 * (1.0 + (std::f32::consts::PI * t).cos()),
    }
}

/// Learning rate at `step`. Stage 1 occupies steps [0, s1); stage 2 occupies
/// [s1, s1+s2). Endpoints are exact: step 0 -> lr_start1, step s1-1 ->
/// lr_end1, step s1 -> lr_start2 (the re-warmup jump), last step -> lr_end2.
pub fn lr_at(step: usize, total_steps: usize, schedule: &SftSchedule) -> Result<f32> {
    schedule.validate()?;
    if total_steps != schedule.total_steps() {
        return Err(Error::Config(format!(
            "lr_at: total_steps {total_steps} != schedule total {}",
            schedule.total_steps()
        )));
    }
    if step >= total_steps {
        return Err(Error::Invalid(format!("lr_at: step {step} out of range")));
    }
    let s1 = schedule.stage1.steps;
    let (stage, local, span) = if step < s1 {
        (&schedule.stage1, step, s1 - 1)
    } else {
        (&schedule.stage2, step - s1, schedule.stage2.steps - 1)
    };
    let t = if span == 0 { 1.0 } else { local as f32 / span as f32 };
    Ok(interp(stage.lr_start, stage.lr_end, t, schedule.decay))
}

/// One long-context sub-stage: multiply context by `ctx_multiplier`, switch
/// the decoder's RoPE base, and train on `long_fraction` long examples mixed
/// with `replay_fraction` replay of shorter ones.
#[derive(Debug, Clone, Copy)]
pub struct SubStage {
    pub ctx_multiplier: usize,
    pub rope_base: f32,
    pub long_fraction: f32,
    pub replay_fraction: f32,
}

#[derive(Debug, Clone)]
pub struct ContextExtensionPlan {
    pub base_ctx: usize,
    pub sub_stages: Vec<SubStage>,
}

impl ContextExtensionPlan {
    /// Desk-scale default: 256 -> 1024 -> 4096, RoPE base reset from the
    /// short-context 50,000 to 800,000 for both extension sub-stages.
    pub fn desk(base_ctx: usize) -> Self {
        let stage = SubStage {
            ctx_multiplier: 4,
            rope_base: 800_000.0,
            long_fraction: 0.25,
            replay_fraction: 0.75,
        };
        ContextExtensionPlan { base_ctx, sub_stages: vec![stage, stage] }
    }

    pub fn validate(&self) -> Result<()> {
        if self.sub_stages.is_empty() {
            return Err(Error::Config("extension plan: no sub-stages".into()));
        }
        for s in &self.sub_stages {
            if (s.long_fraction + s.replay_fraction - 1.0).abs() > 1e-6 {
                return Err(Error::Config("extension plan: fractions must sum to 1".into()));
            }
            if s.ctx_multiplier != 4 {
                return Err(Error::Config("extension plan: each sub-stage multiplies by 4".into()));
            }
        }
        Ok(())
    }

    /// Context capacity after each sub-stage.
    pub fn ctx_progression(&self) -> Vec<usize> {
        let mut out = vec![self.base_ctx];
        for s in &self.sub_stages {
            out.push(out.last().unwrap() * s.ctx_multiplier);
        }
        out
    }
}

/// One labeled text sequence for SFT-style training.
#[derive(Debug, Clone)]
pub struct LabeledSeq {
    pub ids: Vec<usize>,
    pub roles: Vec<Role>,
}

/// One gradient step of masked-NLL training on a single sequence.
pub fn sft_step(
    params: &mut Params,
    cfg: MoeCfg,
    seq: &LabeledSeq,
    state: &mut MuonState,
    muon: MuonConfig,
) -> Result<f32> {
    let (g, nll) = sft_grads(params, cfg, seq)?;
    muon_step(params, &g, state, muon)?;
    Ok(nll)
}

/// Gradients (and masked NLL) of the full SFT objective for one sequence,
/// without touching the parameters. Building block for gradient
/// accumulation and simulated data parallelism.
pub fn sft_grads(params: &Params, cfg: MoeCfg, seq: &LabeledSeq) -> Result<(Params, f32)> {
    let mut tape = Tape::new();
    let pv = params.load_into(&mut tape);
    let emb = assemble_multimodal_sequence(&mut tape, &pv, &seq.ids, None)?;
    let positions: Vec<usize> = (0..seq.ids.len()).collect();
    let out = decoder_forward_graph(&mut tape, &pv, cfg, emb, &[0, seq.ids.len()], &positions)?;
    let (targets, target_roles) = next_token_supervision(&seq.ids, &seq.roles);
    let nll = sft_loss_masked_graph(&mut tape, out.logits, &targets, &target_roles)?;
    let loss = tape.add(nll, out.aux_loss)?;
    let grads = tape.backward(loss)?;
    Ok((pv.grads(params, &grads), tape.value(nll).item()))
}

/// One optimizer update from gradients averaged over a minibatch.
pub fn sft_step_batch(
    params: &mut Params,
    cfg: MoeCfg,
    seqs: &[&LabeledSeq],
    state: &mut MuonState,
    muon: MuonConfig,
) -> Result<f32> {
    if seqs.is_empty() {
        return Err(Error::Invalid("sft_step_batch: empty minibatch".into()));
    }
    let mut grads = Vec::with_capacity(seqs.len());
    let mut total = 0.0f32;
    for seq in seqs {
        let (g, nll) = sft_grads(params, cfg, seq)?;
        grads.push(g);
        total += nll;
    }
    let avg = crate::muon::average_grads(&grads)?;
    muon_step(params, &avg, state, muon)?;
    Ok(total / seqs.len() as f32)
}

pub struct ExtendOpts {
    pub steps_per_stage: usize,
    /// Sequences per optimizer update (gradient accumulation); min 1.
    pub batch: usize,
    pub muon: MuonConfig,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct StageReport {
    pub ctx: usize,
    pub rope_base: f32,
    pub mean_loss: f32,
    pub long_share: f32,
}

/// Runs the extension plan: per sub-stage, grow the context 4x, reset the
/// RoPE base, and train on a 25/75 long/replay mix. "Long" means longer
/// than the previous stage's context (and within the new one). The decoder
/// config is updated in place so the caller keeps the extended rope base.
pub fn extend_context(
    params: &mut Params,
    cfg: &mut MoeCfg,
    plan: &ContextExtensionPlan,
    corpus: &[LabeledSeq],
    opts: &ExtendOpts,
) -> Result<Vec<StageReport>> {
    plan.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut state = MuonState::new();
    let mut prev_ctx = plan.base_ctx;
    let mut reports = Vec::new();
    for stage in &plan.sub_stages {
        let ctx = prev_ctx * stage.ctx_multiplier;
        cfg.rope_base = stage.rope_base;
        let long: Vec<&LabeledSeq> = corpus
            .iter()
            .filter(|s| s.ids.len() > prev_ctx && s.ids.len() <= ctx)
            .collect();
        let replay: Vec<&LabeledSeq> =
            corpus.iter().filter(|s| s.ids.len() <= prev_ctx).collect();
        if long.is_empty() {
            return Err(Error::Invalid(format!(
                "extend_context: corpus has no examples in ({prev_ctx}, {ctx}]"
            )));
        }
        if replay.is_empty() {
            return Err(Error::Invalid("extend_context: corpus has no replay examples".into()));
        }
        let batch = opts.batch.max(1);
        let mut total = 0.0f32;
        let mut n_long = 0usize;
        for _ in 0..opts.steps_per_stage {
            let draws: Vec<&LabeledSeq> = (0..batch)
                .map(|_| {
                    let take_long = rng.gen::<f32>() < stage.long_fraction;
                    let pool = if take_long { &long } else { &replay };
                    n_long += take_long as usize;
                    pool[rng.gen_range(0..pool.len())]
                })
                .collect();
            total += sft_step_batch(params, *cfg, &draws, &mut state, opts.muon)?;
        }
        reports.push(StageReport {
            ctx,
            rope_base: stage.rope_base,
            mean_loss: total / opts.steps_per_stage.max(1) as f32,
            long_share: n_long as f32 / (opts.steps_per_stage * batch).max(1) as f32,
        });
        prev_ctx = ctx;
    }
    Ok(reports)
}

/// Append-only JSON-lines metrics log. Timestamps can be suppressed so two
/// runs with the same seed produce byte-identical files.
pub struct MetricsLog {
    file: Option<File>,
    timestamps: bool,
}

impl MetricsLog {
    pub fn create<P: AsRef<Path>>(path: P, timestamps: bool) -> Result<Self> {
        Ok(MetricsLog { file: Some(File::create(path)?), timestamps })
    }

    pub fn disabled() -> Self {
        MetricsLog { file: None, timestamps: false }
    }

    pub fn log(&mut self, mut obj: serde_json::Value) -> Result<()> {
        let Some(f) = self.file.as_mut() else { return Ok(()) };
        if self.timestamps {
            if let Some(map) = obj.as_object_mut() {
                let t = std::time::SystemTime::now()
                    .duration_since(std::time::UNIX_EPOCH)
                    .map(|d| d.as_secs())
                    .unwrap_or(0);
                map.insert("t".into(), serde_json::json!(t));
            }
        }
        writeln!(f, "{obj}")?;
        Ok(())
    }
}
