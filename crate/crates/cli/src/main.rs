//! `deskvlm` — desk-scale vision-language training toolkit CLI.
//!
//! Every subcommand reads an optional line-oriented `key = value` config,
//! applies flag overrides, runs a seeded experiment, and writes
//! `metrics.jsonl` plus `summary.txt` under the output directory. The exit
//! code is 0 iff the run's internal assertions pass. With
//! `--no-timestamps`, reruns with the same config and seed produce
//! byte-identical metrics files.

use std::path::PathBuf;
use std::rc::Rc;

use anyhow::{bail, Context as _};
use clap::{Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use deskvlm_core::config::Config;
use deskvlm_core::datapipe::{
    pack_examples, render_chat, unpack_examples, ChatExample, MixSpec, Segment, Stream,
    StreamState, TokenExample, Turn, DEFAULT_SHUFFLE_BUFFER,
};
use deskvlm_core::decoder::{
    assemble_multimodal_sequence, decoder_forward_graph, init_decoder, MoeCfg,
};
use deskvlm_core::muon::{
    average_grads, muon_step, newton_schulz_orthogonalize, zero1_sharded_step, MuonConfig,
    MuonState, ShardPlan,
};
use deskvlm_core::niah::{desk_buckets, evaluate_recall, paper_buckets, HaystackSpec};
use deskvlm_core::nn::Params;
use deskvlm_core::projector::{init_projector, pixel_shuffle, project_graph, ProjectorCfg};
use deskvlm_core::rl::{MirrorConfig, MirrorTrainer, TabularPolicy, TwoStepTask};
use deskvlm_core::rope::rope_angles_1d;
use deskvlm_core::synth::{
    captioned_shapes, decoder_niah_model, retrieval_spec, scan_model, single_retrieval_corpus,
};
use deskvlm_core::tensor::{grad_check, Tape, Tensor, Val};
use deskvlm_core::training::{
    extend_context, lr_at, next_token_supervision, sft_loss_masked_graph, sft_step_batch,
    ContextExtensionPlan, ExtendOpts, LabeledSeq, MetricsLog, Role, SftSchedule,
};
use deskvlm_core::vit::{encode_images, init_vit, vit_pretrain_loss_graph, DualLossConfig, VitCfg};

#[derive(Parser)]
#[command(name = "deskvlm", version, about = "Desk-scale vision-language training toolkit")]
struct Cli {
    /// Line-oriented `key = value` config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// RNG seed (overrides the config's `seed`).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory for metrics.jsonl, summary.txt and checkpoints.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Scale preset (overrides the config's `preset`).
    #[arg(long, global = true, value_enum)]
    preset: Option<Preset>,
    /// Omit wall-clock timestamps so metrics files are byte-reproducible.
    #[arg(long, global = true)]
    no_timestamps: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Preset {
    Desk,
    Paper,
}

#[derive(Subcommand)]
enum Cmd {
    /// Finite-difference validation of the autodiff engine.
    Gradcheck,
    /// Dual-objective (contrastive + caption) vision encoder training.
    TrainVit,
    /// Supervised fine-tuning of projector + decoder on captioned images.
    TrainVlm,
    /// Two-stage long-context extension with RoPE base reset.
    ExtendCtx,
    /// Needle-in-a-haystack retrieval evaluation.
    Niah,
    /// Policy mirror-descent RL on an enumerable toy task.
    Rl,
    /// Orthogonalization quality and sharded-optimizer equivalence bench.
    MuonBench,
    /// Data pipeline determinism and packing checks.
    PipeVerify,
}

/// Shared run context: merged config, output dir, metrics log.
struct Ctx {
    cfg: Config,
    out: PathBuf,
    seed: u64,
    preset: Preset,
    metrics: MetricsLog,
    summary: Vec<String>,
    pass: bool,
}

impl Ctx {
    fn new(cli: &Cli) -> anyhow::Result<Self> {
        let mut cfg = match &cli.config {
            Some(p) => Config::from_file(p)?,
            None => Config::default(),
        };
        // Flags mirror config keys one-to-one and win over file values.
        if let Some(s) = cli.seed {
            cfg.set("seed", &s.to_string());
        }
        if let Some(p) = cli.preset {
            cfg.set("preset", if p == Preset::Paper { "paper" } else { "desk" });
        }
        let seed = cfg.u64_or("seed", 0)?;
        let preset = match cfg.get_str("preset").unwrap_or("desk") {
            "desk" => Preset::Desk,
            "paper" => Preset::Paper,
            other => bail!("config error: unknown preset {other:?}"),
        };
        let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("out"));
        std::fs::create_dir_all(&out)
            .with_context(|| format!("cannot create output dir {}", out.display()))?;
        let metrics = MetricsLog::create(out.join("metrics.jsonl"), !cli.no_timestamps)?;
        Ok(Ctx { cfg, out, seed, preset, metrics, summary: Vec::new(), pass: true })
    }

    fn check_keys(&self, extra: &[&str]) -> anyhow::Result<()> {
        let mut allowed = vec!["seed", "preset"];
        allowed.extend_from_slice(extra);
        Ok(self.cfg.validate_keys(&allowed)?)
    }

    fn note(&mut self, line: impl Into<String>) {
        self.summary.push(line.into());
    }

    fn assert(&mut self, ok: bool, what: &str) {
        self.note(format!("[{}] {what}", if ok { "ok" } else { "FAIL" }));
        self.pass &= ok;
    }

    fn finish(mut self) -> anyhow::Result<i32> {
        self.summary.push(format!("result: {}", if self.pass { "PASS" } else { "FAIL" }));
        let text = self.summary.join("\n") + "\n";
        std::fs::write(self.out.join("summary.txt"), &text)?;
        print!("{text}");
        Ok(if self.pass { 0 } else { 1 })
    }
}

fn main() {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => std::process::exit(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            std::process::exit(2);
        }
    }
}

fn run(cli: &Cli) -> anyhow::Result<i32> {
    let ctx = Ctx::new(cli)?;
    match cli.cmd {
        Cmd::Gradcheck => cmd_gradcheck(ctx),
        Cmd::TrainVit => cmd_train_vit(ctx),
        Cmd::TrainVlm => cmd_train_vlm(ctx),
        Cmd::ExtendCtx => cmd_extend_ctx(ctx),
        Cmd::Niah => cmd_niah(ctx),
        Cmd::Rl => cmd_rl(ctx),
        Cmd::MuonBench => cmd_muon_bench(ctx),
        Cmd::PipeVerify => cmd_pipe_verify(ctx),
    }
}

// ---------------------------------------------------------------------------
// gradcheck

fn cmd_gradcheck(mut ctx: Ctx) -> anyhow::Result<i32> {
    ctx.check_keys(&["seeds", "eps", "tol"])?;
    let seeds = ctx.cfg.usize_or("seeds", 10)?;
    let eps = ctx.cfg.f32_or("eps", 1e-3)? as f64;
    let tol = ctx.cfg.f32_or("tol", 1e-3)? as f64;

    type OpFn = fn(&mut Tape, Val) -> deskvlm_core::Result<Val>;
    let ops: Vec<(&str, Vec<usize>, OpFn)> = vec![
        ("gelu_sum", vec![4, 6], |t, x| {
            let g = t.gelu(x)?;
            t.sum(g)
        }),
        ("softmax_mean", vec![5, 7], |t, x| {
            let s = t.softmax(x)?;
            let s = t.mul(s, s)?;
            t.mean(s)
        }),
        ("log_softmax_pick", vec![4, 9], |t, x| {
            let ls = t.log_softmax(x)?;
            let picked = t.gather_elems(ls, vec![(0, 1), (1, 4), (3, 0)])?;
            let m = t.mean(picked)?;
            t.scale(m, -1.0)
        }),
        ("layer_norm_sum", vec![3, 8], |t, x| {
            let g = t.constant(Tensor::full(&[8], 1.0));
            let b = t.constant(Tensor::full(&[8], 0.1));
            let y = t.layer_norm(x, g, b, 1e-5)?;
            let y2 = t.mul(y, y)?;
            t.sum(y2)
        }),
        ("rope_quadratic", vec![6, 8], |t, x| {
            let angles = Rc::new(rope_angles_1d(&[0, 1, 2, 3, 4, 5], 4, 10_000.0)?);
            let r = t.rope(x, 2, 4, angles)?;
            let r2 = t.mul(r, r)?;
            t.sum(r2)
        }),
        ("masked_softmax_mean", vec![3, 3], |t, x| {
            let mask = Rc::new(vec![
                true, true, false, true, true, true, false, true, true,
            ]);
            let s = t.masked_softmax(x, mask)?;
            let s2 = t.mul(s, s)?;
            t.mean(s2)
        }),
        ("topk_mix", vec![5, 4], |t, x| {
            let w = t.topk_softmax(x, 2)?;
            let w2 = t.mul(w, w)?;
            t.sum(w2)
        }),
        ("matmul_softplus", vec![4, 4], |t, x| {
            let y = t.matmul(x, x)?;
            let y = t.softplus(y)?;
            t.mean(y)
        }),
    ];

    let mut worst: f64 = 0.0;
    let started = std::time::Instant::now();
    for (name, shape, f) in &ops {
        let mut op_worst: f64 = 0.0;
        for s in 0..seeds {
            let mut rng = ChaCha8Rng::seed_from_u64(ctx.seed + s as u64);
            let x = Tensor::randn(&shape.clone(), &mut rng);
            let err = grad_check(f, &x, eps)?;
            op_worst = op_worst.max(err);
        }
        ctx.metrics.log(json!({"op": name, "max_rel_err": op_worst}))?;
        ctx.note(format!("{name}: max rel err {op_worst:.3e}"));
        worst = worst.max(op_worst);
    }
    ctx.note(format!("elapsed: {:.2}s", started.elapsed().as_secs_f32()));
    ctx.assert(worst < tol, &format!("max rel err {worst:.3e} < {tol:.0e}"));
    ctx.finish()
}

// ---------------------------------------------------------------------------
// train-vit

fn cmd_train_vit(mut ctx: Ctx) -> anyhow::Result<i32> {
    ctx.check_keys(&["steps", "batch", "corpus", "side", "lr", "target_ratio"])?;
    let paper = ctx.preset == Preset::Paper;
    let steps = ctx.cfg.usize_or("steps", if paper { 500 } else { 60 })?;
    let batch = ctx.cfg.usize_or("batch", 8)?;
    let n = ctx.cfg.usize_or("corpus", 64)?;
    let side = ctx.cfg.usize_or("side", 16)?;
    let lr = ctx.cfg.f32_or("lr", 0.02)?;
    let target_ratio = ctx.cfg.f32_or("target_ratio", if paper { 0.2 } else { 0.9 })?;

    let vit_cfg = VitCfg::default();
    let corpus = captioned_shapes(n, side, vit_cfg.patch_size)?;
    let mut rng = ChaCha8Rng::seed_from_u64(ctx.seed);
    let mut params = Params::new();
    init_vit(&mut params, vit_cfg, 1, &mut rng);
    let muon = MuonConfig { lr, ..MuonConfig::default() };
    let mut state = MuonState::new();

    let mut initial = None;
    let mut last = 0.0f32;
    for step in 0..steps {
        let mb: Vec<_> =
            (0..batch).map(|i| corpus[(step * batch + i) % corpus.len()].clone()).collect();
        let mut tape = Tape::new();
        let pv = params.load_into(&mut tape);
        let loss = vit_pretrain_loss_graph(&mut tape, &pv, vit_cfg, &mb, DualLossConfig::default())?;
        let lv = tape.value(loss).item();
        let grads = tape.backward(loss)?;
        let g = pv.grads(&params, &grads);
        muon_step(&mut params, &g, &mut state, muon)?;
        initial.get_or_insert(lv);
        last = lv;
        ctx.metrics.log(json!({"step": step, "loss": lv}))?;
    }
    let initial = initial.unwrap_or(f32::NAN);
    params.save(ctx.out.join("vit.ckpt"))?;
    ctx.note(format!("loss {initial:.4} -> {last:.4} over {steps} steps"));
    ctx.assert(
        last.is_finite() && last < target_ratio * initial,
        &format!("final loss < {target_ratio} * initial"),
    );
    ctx.finish()
}

// ---------------------------------------------------------------------------
// train-vlm

fn cmd_train_vlm(mut ctx: Ctx) -> anyhow::Result<i32> {
    ctx.check_keys(&["steps", "corpus", "side", "lr"])?;
    let steps = ctx.cfg.usize_or("steps", 40)?;
    let n = ctx.cfg.usize_or("corpus", 16)?;
    let side = ctx.cfg.usize_or("side", 16)?;
    let lr = ctx.cfg.f32_or("lr", 0.02)?;

    let vit_cfg = VitCfg::default();
    let moe_cfg = MoeCfg::default();
    let corpus = captioned_shapes(n, side, vit_cfg.patch_size)?;
    let mut rng = ChaCha8Rng::seed_from_u64(ctx.seed);

    // Vision tower is frozen here; the projector and decoder train.
    let mut vit_params = Params::new();
    init_vit(&mut vit_params, vit_cfg, 1, &mut rng);
    let mut params = Params::new();
    init_projector(
        &mut params,
        ProjectorCfg { d_v: vit_cfg.d_v, d_hidden: 128, d_llm: moe_cfg.d },
        &mut rng,
    );
    init_decoder(&mut params, moe_cfg, &mut rng);

    // Precompute frozen, shuffled image features and the chat rendering.
    let mut items = Vec::new();
    for ex in &corpus {
        let enc = encode_images(&vit_params, vit_cfg, std::slice::from_ref(&ex.patches))?;
        let (shuf, _) = pixel_shuffle(&enc.tokens, ex.patches.grid)?;
        let caption = String::from_utf8_lossy(
            &ex.caption.iter().map(|&t| t as u8).collect::<Vec<_>>(),
        )
        .into_owned();
        let chat = ChatExample {
            turns: vec![
                Turn {
                    role: "user".into(),
                    segments: vec![
                        Segment::Image { id: "img".into(), tokens: shuf.shape()[0] },
                        Segment::Text("describe".into()),
                    ],
                },
                Turn::text("assistant", &caption),
            ],
        };
        let (ids, roles) = render_chat(&chat)?;
        items.push((shuf, ids, roles));
    }

    let muon = MuonConfig { lr, ..MuonConfig::default() };
    let mut state = MuonState::new();
    let mut initial = None;
    let mut last = 0.0f32;
    for step in 0..steps {
        let (shuf, ids, roles) = &items[step % items.len()];
        let mut tape = Tape::new();
        let pv = params.load_into(&mut tape);
        let feats = tape.constant(shuf.clone());
        let proj = project_graph(&mut tape, &pv, feats)?;
        let emb = assemble_multimodal_sequence(&mut tape, &pv, ids, Some(proj))?;
        let positions: Vec<usize> = (0..ids.len()).collect();
        let out = decoder_forward_graph(&mut tape, &pv, moe_cfg, emb, &[0, ids.len()], &positions)?;
        let (targets, target_roles) = next_token_supervision(ids, roles);
        let nll = sft_loss_masked_graph(&mut tape, out.logits, &targets, &target_roles)?;
        let loss = tape.add(nll, out.aux_loss)?;
        let lv = tape.value(nll).item();
        let grads = tape.backward(loss)?;
        let g = pv.grads(&params, &grads);
        muon_step(&mut params, &g, &mut state, muon)?;
        initial.get_or_insert(lv);
        last = lv;
        ctx.metrics.log(json!({"step": step, "nll": lv}))?;
    }
    let initial = initial.unwrap_or(f32::NAN);
    params.save(ctx.out.join("vlm.ckpt"))?;
    ctx.note(format!("masked nll {initial:.4} -> {last:.4} over {steps} steps"));
    ctx.assert(last.is_finite() && last < initial, "final nll below initial");
    ctx.finish()
}

// ---------------------------------------------------------------------------
// extend-ctx

fn cmd_extend_ctx(mut ctx: Ctx) -> anyhow::Result<i32> {
    ctx.check_keys(&[
        "base_ctx", "pretrain_steps", "steps_per_stage", "per_band", "lr", "trials", "batch",
        "reps",
    ])?;
    let paper = ctx.preset == Preset::Paper;
    let base_ctx = ctx.cfg.usize_or("base_ctx", if paper { 256 } else { 32 })?;
    let pretrain_steps = ctx.cfg.usize_or("pretrain_steps", if paper { 150 } else { 30 })?;
    let steps_per_stage = ctx.cfg.usize_or("steps_per_stage", if paper { 70 } else { 20 })?;
    let per_band = ctx.cfg.usize_or("per_band", 40)?;
    let lr = ctx.cfg.f32_or("lr", 0.01)?;
    let trials = ctx.cfg.usize_or("trials", 4)?;
    let batch = ctx.cfg.usize_or("batch", if paper { 8 } else { 4 })?;
    let reps = ctx.cfg.usize_or("reps", 3)?;

    let mut cfg = MoeCfg::default();
    let mut rng = ChaCha8Rng::seed_from_u64(ctx.seed);
    let mut params = Params::new();
    init_decoder(&mut params, cfg, &mut rng);

    let bands =
        [(12usize, base_ctx), (base_ctx, 4 * base_ctx), (4 * base_ctx, 16 * base_ctx)];
    let corpus = single_retrieval_corpus(&bands, per_band, reps, ctx.seed ^ 1)?;

    // Base-context training on the short band first (gradient accumulation).
    let muon = MuonConfig { lr, ..MuonConfig::default() };
    let mut state = MuonState::new();
    let short: Vec<&LabeledSeq> =
        corpus.iter().filter(|s| s.ids.len() <= base_ctx).collect();
    for step in 0..pretrain_steps {
        let mb: Vec<&LabeledSeq> =
            (0..batch).map(|i| short[(step * batch + i) % short.len()]).collect();
        let nll = sft_step_batch(&mut params, cfg, &mb, &mut state, muon)?;
        ctx.metrics.log(json!({"phase": "base", "step": step, "nll": nll}))?;
    }

    let plan = ContextExtensionPlan::desk(base_ctx);
    let opts = ExtendOpts { steps_per_stage, batch, muon, seed: ctx.seed ^ 2 };
    let reports = extend_context(&mut params, &mut cfg, &plan, &corpus, &opts)?;
    for r in &reports {
        ctx.metrics.log(json!({
            "phase": "extend", "ctx": r.ctx, "rope_base": r.rope_base,
            "mean_loss": r.mean_loss, "long_share": r.long_share,
        }))?;
        ctx.note(format!(
            "stage ctx {} rope_base {} mean loss {:.4} long share {:.2}",
            r.ctx, r.rope_base, r.mean_loss, r.long_share
        ));
    }

    // Quick retrieval report over geometric buckets up to the final context.
    let final_ctx = base_ctx * 16;
    let mut buckets = Vec::new();
    let mut hi = base_ctx.max(16);
    let mut lo = 0;
    while hi <= final_ctx {
        buckets.push((lo, hi));
        lo = hi;
        hi *= 2;
    }
    let mut eval_rng = ChaCha8Rng::seed_from_u64(ctx.seed ^ 3);
    let mut specs = Vec::new();
    for &(lo, hi) in &buckets {
        for _ in 0..trials {
            let len = eval_rng.gen_range(lo.max(12) + 1..=hi);
            specs.push(retrieval_spec(len, &mut eval_rng));
        }
    }
    let report = evaluate_recall(
        &specs,
        &buckets,
        final_ctx + 16,
        &mut eval_rng,
        decoder_niah_model(&params, cfg),
    )?;
    ctx.note(report.table());
    params.save(ctx.out.join("extended.ckpt"))?;

    ctx.assert(
        (cfg.rope_base - 800_000.0).abs() < 1.0,
        "rope base reset to 800,000 after extension",
    );
    ctx.assert(reports.iter().all(|r| r.mean_loss.is_finite()), "stage losses finite");
    ctx.finish()
}

// ---------------------------------------------------------------------------
// niah

fn cmd_niah(mut ctx: Ctx) -> anyhow::Result<i32> {
    ctx.check_keys(&["trials_per_bucket", "model", "model_ctx", "checkpoint"])?;
    let trials = ctx.cfg.usize_or("trials_per_bucket", 20)?;
    let model_name = ctx.cfg.get_str("model").unwrap_or("scan").to_string();
    let buckets = match ctx.preset {
        Preset::Desk => desk_buckets(),
        Preset::Paper => paper_buckets(),
    };
    let model_ctx = ctx.cfg.usize_or("model_ctx", buckets.last().unwrap().1 + 16)?;

    let mut rng = ChaCha8Rng::seed_from_u64(ctx.seed);
    let mut specs: Vec<HaystackSpec> = Vec::new();
    for &(lo, hi) in &buckets {
        for _ in 0..trials {
            let len = rng.gen_range(lo.max(12) + 1..=hi);
            specs.push(retrieval_spec(len, &mut rng));
        }
    }

    let loaded: Option<(Params, MoeCfg)> = match ctx.cfg.get_str("checkpoint") {
        Some(path) => Some((Params::load(path)?, MoeCfg::default())),
        None => None,
    };
    let report = match (model_name.as_str(), &loaded) {
        ("scan", _) => evaluate_recall(&specs, &buckets, model_ctx, &mut rng, scan_model)?,
        ("random", _) => {
            let mut mrng = ChaCha8Rng::seed_from_u64(ctx.seed ^ 7);
            evaluate_recall(&specs, &buckets, model_ctx, &mut rng, |_p, n| {
                (0..n).map(|_| mrng.gen_range(0..256)).collect()
            })?
        }
        ("checkpoint", Some((params, cfg))) => {
            evaluate_recall(&specs, &buckets, model_ctx, &mut rng, decoder_niah_model(params, *cfg))?
        }
        (other, _) => bail!("config error: model must be scan|random|checkpoint, got {other:?}"),
    };

    for b in &report.buckets {
        ctx.metrics.log(json!({
            "lo": b.lo, "hi": b.hi, "trials": b.trials, "recall": b.recall(),
        }))?;
    }
    std::fs::write(
        ctx.out.join("niah.json"),
        serde_json::to_string_pretty(&report.buckets)?,
    )?;
    ctx.note(report.table());
    if model_name == "scan" {
        ctx.assert(
            report.buckets.iter().all(|b| b.successes == b.trials),
            "scan baseline reaches full recall in every bucket",
        );
    } else {
        ctx.assert(true, "report written");
    }
    ctx.finish()
}

// ---------------------------------------------------------------------------
// rl

fn cmd_rl(mut ctx: Ctx) -> anyhow::Result<i32> {
    ctx.check_keys(&["tau", "iterations", "lr", "n_actions", "group", "target"])?;
    let tau = ctx.cfg.f32_or("tau", 0.1)?;
    let iterations = ctx.cfg.usize_or("iterations", 100)?;
    let lr = ctx.cfg.f32_or("lr", 1.0)?;
    let n_actions = ctx.cfg.usize_or("n_actions", 3)?;
    let group = ctx.cfg.usize_or("group", 16)?;
    let target = ctx.cfg.f32_or("target", 0.9)?;

    let mut rng = ChaCha8Rng::seed_from_u64(ctx.seed);
    let task = TwoStepTask { n_actions, target: (1 % n_actions, n_actions - 1) };
    let policy = TabularPolicy::new(n_actions, 0.2, &mut rng);
    let cfg = MirrorConfig { tau, ..MirrorConfig::default() };
    let mut trainer = MirrorTrainer::new(task, policy, cfg, lr)?;

    let chance = task.chance_reward();
    let initial = trainer.policy.expected_reward(&task);
    for it in 0..iterations {
        trainer.iteration();
        let reward = trainer.policy.expected_reward(&task);
        if it % 10 == 0 || it + 1 == iterations {
            let batch = trainer.sample_batch(group, &mut rng);
            let mean_sampled: f32 =
                batch.samples.iter().map(|s| s.reward).sum::<f32>() / group as f32;
            ctx.metrics.log(json!({
                "iteration": it, "expected_reward": reward, "sampled_reward": mean_sampled,
            }))?;
        }
    }
    let final_reward = trainer.policy.expected_reward(&task);
    ctx.note(format!(
        "expected reward: chance {chance:.3}, init {initial:.3}, final {final_reward:.3} (tau {tau})"
    ));
    if tau >= 1e5 {
        // Degenerate-regularization control: the policy must stay put.
        ctx.assert(
            (final_reward - initial).abs() < 0.05,
            "huge tau keeps reward at the reference",
        );
    } else {
        ctx.assert(final_reward >= target, &format!("final reward >= {target}"));
    }
    ctx.finish()
}

// ---------------------------------------------------------------------------
// muon-bench

/// Power-iteration estimates of the largest/smallest singular values.
fn singular_band(m: &Tensor) -> (f32, f32) {
    let (r, mut c) = (m.shape()[0], m.shape()[1]);
    // Form the Gram matrix on the smaller side so it is full rank: the
    // nonzero singular values of M and M^T coincide.
    let a: Vec<f32> = if r < c {
        let mut t = vec![0.0f32; r * c];
        for i in 0..r {
            for j in 0..c {
                t[j * r + i] = m.data()[i * c + j];
            }
        }
        c = r;
        t
    } else {
        m.data().to_vec()
    };
    let r = a.len() / c;
    let mut gram = vec![0.0f64; c * c];
    for i in 0..c {
        for j in 0..c {
            let mut s = 0.0f64;
            for k in 0..r {
                s += a[k * c + i] as f64 * a[k * c + j] as f64;
            }
            gram[i * c + j] = s;
        }
    }
    let power = |mat: &[f64]| -> f64 {
        let mut v = vec![1.0f64; c];
        let mut lam = 0.0;
        for _ in 0..200 {
            let mut nv = vec![0.0f64; c];
            for i in 0..c {
                for j in 0..c {
                    nv[i] += mat[i * c + j] * v[j];
                }
            }
            lam = nv.iter().map(|x| x * x).sum::<f64>().sqrt();
            if lam == 0.0 {
                return 0.0;
            }
            v = nv.into_iter().map(|x| x / lam).collect();
        }
        lam
    };
    let lam_max = power(&gram);
    // Smallest eigenvalue via the shifted complement lam_max*I - G.
    let shifted: Vec<f64> = (0..c * c)
        .map(|i| {
            let d = if i / c == i % c { lam_max } else { 0.0 };
            d - gram[i]
        })
        .collect();
    let lam_min = lam_max - power(&shifted);
    ((lam_max.sqrt()) as f32, (lam_min.max(0.0).sqrt()) as f32)
}

fn cmd_muon_bench(mut ctx: Ctx) -> anyhow::Result<i32> {
    ctx.check_keys(&["trials", "max_side", "steps", "lr", "mu", "wd", "ns_steps", "shard_workers"])?;
    let trials = ctx.cfg.usize_or("trials", 100)?;
    let max_side = ctx.cfg.usize_or("max_side", 64)?;
    let steps = ctx.cfg.usize_or("steps", 50)?;
    let muon = MuonConfig {
        lr: ctx.cfg.f32_or("lr", 0.02)?,
        momentum: ctx.cfg.f32_or("mu", 0.95)?,
        weight_decay: ctx.cfg.f32_or("wd", 0.0)?,
        ns_steps: ctx.cfg.usize_or("ns_steps", 5)?,
    };

    // Orthogonalization quality over random rectangular matrices.
    let mut rng = ChaCha8Rng::seed_from_u64(ctx.seed);
    let mut band = (f32::INFINITY, 0.0f32);
    let started = std::time::Instant::now();
    for _ in 0..trials {
        let r = rng.gen_range(2..=max_side);
        let c = rng.gen_range(2..=max_side);
        let g = Tensor::randn(&[r, c], &mut rng);
        let o = newton_schulz_orthogonalize(&g, muon.ns_steps)?;
        let (hi, lo) = singular_band(&o);
        band.0 = band.0.min(lo);
        band.1 = band.1.max(hi);
    }
    let ns_elapsed = started.elapsed().as_secs_f32();
    ctx.metrics.log(json!({
        "trials": trials, "sigma_min": band.0, "sigma_max": band.1, "seconds": ns_elapsed,
    }))?;
    ctx.note(format!(
        "singular band over {trials} matrices: [{:.4}, {:.4}] in {ns_elapsed:.2}s",
        band.0, band.1
    ));
    ctx.assert(band.0 >= 0.7 && band.1 <= 1.3, "singular values within [0.7, 1.3]");

    // ZeRO-1 style sharding: sharded == unsharded bit-for-bit.
    let workers_list: Vec<usize> = match ctx.cfg.get_str("shard_workers") {
        Some(s) => vec![s.parse().map_err(|_| {
            anyhow::anyhow!("config error: shard_workers must be an integer")
        })?],
        None => vec![1, 2, 4],
    };
    let mut init = Params::new();
    let mut prng = ChaCha8Rng::seed_from_u64(ctx.seed ^ 5);
    for (i, shape) in [[8usize, 12], [12, 8], [16, 16], [4, 4]].iter().enumerate() {
        init.insert(format!("p{i}"), Tensor::randn(shape, &mut prng));
    }
    init.insert("bias", Tensor::randn(&[16], &mut prng));
    let mut all_ok = true;
    for &w in &workers_list {
        let mut reference = init.clone();
        let mut sharded = init.clone();
        let mut ref_state = MuonState::new();
        let mut shard_states: Vec<MuonState> = (0..w).map(|_| MuonState::new()).collect();
        let plan = ShardPlan::build(&reference, w)?;
        let mut grng = ChaCha8Rng::seed_from_u64(ctx.seed ^ 6);
        for _ in 0..steps {
            let worker_grads: Vec<Params> = (0..w)
                .map(|_| {
                    let mut g = Params::new();
                    for (name, t) in reference.iter() {
                        g.insert(name.clone(), Tensor::randn(t.shape(), &mut grng));
                    }
                    g
                })
                .collect();
            let avg = average_grads(&worker_grads)?;
            muon_step(&mut reference, &avg, &mut ref_state, muon)?;
            zero1_sharded_step(&mut sharded, &worker_grads, &mut shard_states, &plan, muon)?;
        }
        let identical = reference.iter().all(|(name, t)| {
            sharded.get(name).map(|s| s.data() == t.data()).unwrap_or(false)
        });
        ctx.metrics.log(json!({"workers": w, "bit_exact": identical}))?;
        all_ok &= identical;
    }
    ctx.assert(all_ok, &format!("sharded == unsharded bit-for-bit over {steps} steps"));
    ctx.finish()
}

// ---------------------------------------------------------------------------
// pipe-verify

fn cmd_pipe_verify(mut ctx: Ctx) -> anyhow::Result<i32> {
    ctx.check_keys(&["stream_len", "mix_trials", "seq_len"])?;
    let stream_len = ctx.cfg.usize_or("stream_len", 10_000)?;
    let mix_trials = ctx.cfg.usize_or("mix_trials", 100_000)?;
    let seq_len = ctx.cfg.usize_or("seq_len", 64)?;

    let mix = MixSpec {
        sources: vec![("alpha".into(), 0.7), ("beta".into(), 0.3)],
    };
    let lens = [5000usize, 2000];

    // Determinism + resume equivalence at random cut points.
    let mut full = Stream::new(&mix, &lens, ctx.seed, DEFAULT_SHUFFLE_BUFFER)?;
    let want: Vec<_> = (0..stream_len).map(|_| full.next_item()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(ctx.seed ^ 9);
    let mut resume_ok = true;
    for _ in 0..20 {
        let cut = rng.gen_range(0..stream_len);
        let mut head = Stream::new(&mix, &lens, ctx.seed, DEFAULT_SHUFFLE_BUFFER)?;
        let mut got: Vec<_> = (0..cut).map(|_| head.next_item()).collect();
        let state = StreamState::from_bytes(&head.checkpoint().to_bytes()?)?;
        let mut tail = Stream::resume(state)?;
        got.extend((cut..stream_len).map(|_| tail.next_item()));
        resume_ok &= got == want;
    }
    ctx.assert(resume_ok, "resumed stream identical to uninterrupted at 20 cut points");

    // Mixing frequency.
    let mut s = Stream::new(&mix, &lens, ctx.seed ^ 1, DEFAULT_SHUFFLE_BUFFER)?;
    let mut count0 = 0usize;
    for _ in 0..mix_trials {
        count0 += (s.next_item().0 == 0) as usize;
    }
    let f0 = count0 as f64 / mix_trials as f64;
    ctx.metrics.log(json!({"source0_frequency": f0}))?;
    ctx.assert((f0 - 0.7).abs() < 0.01, &format!("mix frequency {f0:.4} within 1% of 0.7"));

    // Chat render + packing round trip.
    let mut examples = Vec::new();
    for i in 0..500 {
        let chat = ChatExample {
            turns: vec![
                Turn::text("user", &format!("q{i}")),
                Turn::text("assistant", &format!("answer {}", i % 17)),
            ],
        };
        let (ids, roles) = render_chat(&chat)?;
        examples.push(TokenExample { ids, roles });
    }
    let seqs = pack_examples(&examples, seq_len, false)?;
    let mut got = unpack_examples(&seqs);
    let mut want = examples.clone();
    got.sort_by(|a, b| a.ids.cmp(&b.ids));
    want.sort_by(|a, b| a.ids.cmp(&b.ids));
    ctx.metrics.log(json!({"packed_seqs": seqs.len(), "examples": examples.len()}))?;
    ctx.assert(got == want, "pack/unpack multiset round trip");

    // Boundary sanity: supervision never leaks into padding.
    let pad_ok = seqs
        .iter()
        .all(|s| s.roles[s.pad_from..].iter().all(|r| !r.supervised()));
    ctx.assert(pad_ok, "padding is never supervised");

    // Schedule endpoints, since the pipeline feeds the trainer directly.
    let sched = SftSchedule::paper_defaults(seq_len, 100, 50);
    let endpoints = [
        lr_at(0, 150, &sched)?,
        lr_at(99, 150, &sched)?,
        lr_at(100, 150, &sched)?,
        lr_at(149, 150, &sched)?,
    ];
    ctx.assert(
        endpoints == [2e-5, 2e-6, 1e-5, 1e-6],
        "two-stage LR schedule hits exact endpoints",
    );
    let _ = Role::System;
    ctx.finish()
}
