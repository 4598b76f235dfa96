//! Muon optimizer: SGD-momentum whose 2D updates are orthogonalized with a
//! quintic Newton-Schulz iteration, plus a single-process simulation of
//! ZeRO-1 optimizer-state sharding that must match the unsharded step
//! bit-for-bit.

use std::collections::BTreeMap;

use crate::nn::Params;
use crate::tensor::{matmul, Tensor};
use crate::{Error, Result};

/// Quintic iteration coefficients; tuned so the scalar map has a stable
/// fixed region around 1 rather than converging singular values exactly.
pub const NS_COEFFS: (f32, f32, f32) = (3.4445, -4.7750, 2.0315);
pub const NS_STEPS: usize = 5;
/// The quintic's limit cycle sits at roughly [0.682, 1.202]; this constant
/// rescale centers it so output singular values stay within [0.7, 1.3].
pub const NS_POST_SCALE: f32 = 1.05;

/// Approximately orthogonalizes a 2D gradient: returns roughly U V^T for
/// G = U S V^T. The input is Frobenius-normalized; a zero matrix is an
/// error. Tall matrices are handled by the transpose convention (iterate on
/// G^T, transpose back), so ns(G^T) == ns(G)^T exactly.
pub fn newton_schulz_orthogonalize(g: &Tensor, steps: usize) -> Result<Tensor> {
    if g.shape().len() != 2 {
        return Err(Error::Shape(format!(
            "newton_schulz: expected 2D, got {:?}",
            g.shape()
        )));
    }
    let norm = g.frob_norm();
    if norm == 0.0 {
        return Err(Error::Invalid("newton_schulz: zero matrix".into()));
    }
    let (rows, cols) = (g.shape()[0], g.shape()[1]);
    let tall = rows > cols;
    let mut x = if tall { g.transposed()? } else { g.clone() };
    for v in x.data_mut() {
        *v /= norm;
    }
    let (a, b, c) = NS_COEFFS;
    for _ in 0..steps {
        let xt = x.transposed()?;
        let aa = matmul(&x, &xt)?; // [m, m], m = min(rows, cols) side
        let aa2 = matmul(&aa, &aa)?;
        // B = b*A + c*A^2
        let mut bmat = aa2;
        for (v, &w) in bmat.data_mut().iter_mut().zip(aa.data()) {
            *v = c * *v + b * w;
        }
        let bx = matmul(&bmat, &x)?;
        for (v, &w) in x.data_mut().iter_mut().zip(bx.data()) {
            *v = a * *v + w;
        }
    }
    for v in x.data_mut() {
        *v *= NS_POST_SCALE;
    }
    if tall {
        x.transposed()
    } else {
        Ok(x)
    }
}

/// Per-parameter update scale: 0.2 * sqrt(max(fan_out, fan_in)). Isolated
/// here so the RMS-matching convention is a single point of change.
pub fn muon_scale(shape: &[usize]) -> f32 {
    debug_assert_eq!(shape.len(), 2);
    0.2 * (shape[0].max(shape[1]) as f32).sqrt()
}

#[derive(Debug, Clone, Copy)]
pub struct MuonConfig {
    pub lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    pub ns_steps: usize,
}

impl Default for MuonConfig {
    fn default() -> Self {
        MuonConfig { lr: 0.02, momentum: 0.95, weight_decay: 0.0, ns_steps: NS_STEPS }
    }
}

/// Momentum buffers, lazily created per parameter on first step.
#[derive(Debug, Clone, Default)]
pub struct MuonState {
    pub momentum: BTreeMap<String, Tensor>,
}

impl MuonState {
    pub fn new() -> Self {
        Self::default()
    }
}

/// One Muon step over every parameter, in name order. 2D parameters get the
/// orthogonalized update; everything else falls back to decoupled-weight-
/// decay momentum SGD.
pub fn muon_step(
    params: &mut Params,
    grads: &Params,
    state: &mut MuonState,
    cfg: MuonConfig,
) -> Result<()> {
    let names: Vec<String> = params.names().cloned().collect();
    for name in names {
        let g = grads.get(&name)?;
        let p = params.get(&name)?;
        if g.shape() != p.shape() {
            return Err(Error::Shape(format!("muon_step: grad shape mismatch for {name}")));
        }
        let m = state
            .momentum
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(g.shape()));
        for (mv, &gv) in m.data_mut().iter_mut().zip(g.data()) {
            *mv = cfg.momentum * *mv + gv;
        }
        let is_matrix = p.shape().len() == 2;
        let update: Tensor = if is_matrix && m.frob_norm() != 0.0 {
            let mut o = newton_schulz_orthogonalize(m, cfg.ns_steps)?;
            let s = muon_scale(p.shape());
            for v in o.data_mut() {
                *v *= s;
            }
            o
        } else {
            // Zero momentum short-circuits NS (which rejects zero input);
            // the update is exactly zero either way.
            m.clone()
        };
        let p = params.get_mut(&name)?;
        let decay = 1.0 - cfg.lr * cfg.weight_decay;
        for (pv, &uv) in p.data_mut().iter_mut().zip(update.data()) {
            *pv = *pv * decay - cfg.lr * uv;
        }
    }
    Ok(())
}

/// Assignment of each parameter to the worker that owns its optimizer state
/// and computes its update.
#[derive(Debug, Clone)]
pub struct ShardPlan {
    pub n_workers: usize,
    pub owner: BTreeMap<String, usize>,
}

impl ShardPlan {
    /// Greedy balanced partition: parameters in descending size order, each
    /// assigned to the currently lightest worker (ties -> lowest rank).
    pub fn build(params: &Params, n_workers: usize) -> Result<Self> {
        if n_workers == 0 {
            return Err(Error::Invalid("ShardPlan: zero workers".into()));
        }
        let mut sized: Vec<(&String, usize)> =
            params.iter().map(|(n, t)| (n, t.numel())).collect();
        sized.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        let mut load = vec![0usize; n_workers];
        let mut owner = BTreeMap::new();
        for (name, numel) in sized {
            let w = (0..n_workers).min_by_key(|&w| (load[w], w)).unwrap();
            load[w] += numel;
            owner.insert(name.clone(), w);
        }
        Ok(ShardPlan { n_workers, owner })
    }
}

/// Deterministic gradient averaging across workers: sum in rank order, then
/// divide. Both the sharded and unsharded paths use this same reduction so
/// their inputs are bitwise identical.
pub fn average_grads(worker_grads: &[Params]) -> Result<Params> {
    if worker_grads.is_empty() {
        return Err(Error::Invalid("average_grads: no workers".into()));
    }
    let mut out = worker_grads[0].clone();
    for g in &worker_grads[1..] {
        for (name, t) in out.iter_mut() {
            let other = g.get(name)?;
            for (a, &b) in t.data_mut().iter_mut().zip(other.data()) {
                *a += b;
            }
        }
    }
    let inv = 1.0 / worker_grads.len() as f32;
    for (_, t) in out.iter_mut() {
        for v in t.data_mut() {
            *v *= inv;
        }
    }
    Ok(out)
}

/// ZeRO-1 sharded step, simulated in-process: gradients are averaged
/// globally, each parameter's update is computed only by its owning worker
/// (which alone holds that parameter's momentum), and updated parameters
/// are broadcast back into the shared copy. Arithmetic per parameter is
/// identical to [`muon_step`], so results are bit-exact.
pub fn zero1_sharded_step(
    params: &mut Params,
    worker_grads: &[Params],
    shard_states: &mut [MuonState],
    plan: &ShardPlan,
    cfg: MuonConfig,
) -> Result<()> {
    if shard_states.len() != plan.n_workers || worker_grads.len() != plan.n_workers {
        return Err(Error::Invalid("zero1: worker count mismatch".into()));
    }
    let avg = average_grads(worker_grads)?;
    let names: Vec<String> = params.names().cloned().collect();
    for name in names {
        let w = *plan
            .owner
            .get(&name)
            .ok_or_else(|| Error::Invalid(format!("zero1: {name} missing from plan")))?;
        // Owner-local step on just this parameter.
        let mut solo = Params::new();
        solo.insert(name.clone(), params.get(&name)?.clone());
        let mut solo_g = Params::new();
        solo_g.insert(name.clone(), avg.get(&name)?.clone());
        muon_step(&mut solo, &solo_g, &mut shard_states[w], cfg)?;
        // "All-gather": publish the owner's result.
        *params.get_mut(&name)? = solo.get(&name)?.clone();
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn singular_values(t: &Tensor) -> Vec<f32> {
        let (r, c) = (t.shape()[0], t.shape()[1]);
        let m = nalgebra::DMatrix::from_row_slice(
            r,
            c,
            &t.data().iter().map(|&v| v as f64).collect::<Vec<_>>(),
        );
        m.svd(false, false)
            .singular_values
            .iter()
            .map(|&v| v as f32)
            .collect()
    }

    #[test]
    fn ns_singular_values_near_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for trial in 0..20 {
            let (r, c) = ([(4, 7), (7, 4), (8, 8), (3, 16)])[trial % 4];
            let g = Tensor::randn(&[r, c], &mut rng);
            let o = newton_schulz_orthogonalize(&g, NS_STEPS).unwrap();
            for s in singular_values(&o) {
                assert!(
                    (0.7..=1.3).contains(&s),
                    "trial {trial}: singular value {s} out of band"
                );
            }
        }
    }

    #[test]
    fn ns_preserves_singular_directions() {
        // Every iterate is a polynomial in G, so it shares G's singular
        // vectors: ns(G) v_i must be parallel to u_i (SVD oracle).
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let g = Tensor::randn(&[5, 5], &mut rng);
        let m = nalgebra::DMatrix::from_row_slice(
            5,
            5,
            &g.data().iter().map(|&v| v as f64).collect::<Vec<_>>(),
        );
        let svd = m.svd(true, true);
        let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
        let o = newton_schulz_orthogonalize(&g, NS_STEPS).unwrap();
        let om = nalgebra::DMatrix::from_row_slice(
            5,
            5,
            &o.data().iter().map(|&v| v as f64).collect::<Vec<_>>(),
        );
        for i in 0..5 {
            let v_i = vt.row(i).transpose();
            let u_i = u.column(i);
            let mapped = &om * v_i;
            let cos = mapped.dot(&u_i) / mapped.norm();
            assert!(cos.abs() > 0.99, "direction {i} drifted: cos {cos}");
        }
    }

    #[test]
    fn ns_transpose_convention_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = Tensor::randn(&[9, 4], &mut rng);
        let o_tall = newton_schulz_orthogonalize(&g, NS_STEPS).unwrap();
        let o_wide =
            newton_schulz_orthogonalize(&g.transposed().unwrap(), NS_STEPS).unwrap();
        assert_eq!(o_tall.transposed().unwrap().data(), o_wide.data());
    }

    #[test]
    fn ns_rejects_zero_and_non_2d() {
        assert!(newton_schulz_orthogonalize(&Tensor::zeros(&[3, 3]), 5).is_err());
        assert!(newton_schulz_orthogonalize(&Tensor::full(&[4], 1.0), 5).is_err());
    }

    #[test]
    fn scale_uses_larger_fan() {
        assert_eq!(muon_scale(&[16, 4]), 0.2 * 4.0);
        assert_eq!(muon_scale(&[4, 16]), 0.2 * 4.0);
    }

    #[test]
    fn momentum_accumulates_and_vectors_use_sgd() {
        let mut params = Params::new();
        params.insert("v", Tensor::full(&[3], 1.0));
        let mut grads = Params::new();
        grads.insert("v", Tensor::full(&[3], 0.5));
        let mut state = MuonState::new();
        let cfg = MuonConfig { lr: 0.1, momentum: 0.9, weight_decay: 0.0, ns_steps: 5 };
        muon_step(&mut params, &grads, &mut state, cfg).unwrap();
        // p = 1 - 0.1 * 0.5
        assert!((params.get("v").unwrap().data()[0] - 0.95).abs() < 1e-7);
        muon_step(&mut params, &grads, &mut state, cfg).unwrap();
        // m = 0.9*0.5 + 0.5 = 0.95; p = 0.95 - 0.1*0.95
        assert!((params.get("v").unwrap().data()[0] - (0.95 - 0.095)).abs() < 1e-6);
    }

    #[test]
    fn zero_gradient_short_circuits() {
        let mut params = Params::new();
        params.insert("w", Tensor::full(&[2, 2], 3.0));
        let mut grads = Params::new();
        grads.insert("w", Tensor::zeros(&[2, 2]));
        let mut state = MuonState::new();
        muon_step(&mut params, &grads, &mut state, MuonConfig::default()).unwrap();
        assert_eq!(params.get("w").unwrap().data(), &[3.0, 3.0, 3.0, 3.0]);
    }

    #[test]
    fn weight_decay_is_decoupled() {
        let mut params = Params::new();
        params.insert("w", Tensor::full(&[2, 2], 2.0));
        let mut grads = Params::new();
        grads.insert("w", Tensor::zeros(&[2, 2]));
        let mut state = MuonState::new();
        let cfg = MuonConfig { lr: 0.1, weight_decay: 0.5, ..MuonConfig::default() };
        muon_step(&mut params, &grads, &mut state, cfg).unwrap();
        // Zero grad: only decay applies, p *= (1 - lr*wd).
        assert!((params.get("w").unwrap().data()[0] - 2.0 * 0.95).abs() < 1e-7);
    }

    #[test]
    fn quadratic_toy_converges() {
        // Minimize 0.5 || W - T ||_F^2; grad = W - T.
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let target = Tensor::randn(&[6, 6], &mut rng);
        let mut params = Params::new();
        params.insert("w", Tensor::zeros(&[6, 6]));
        let mut state = MuonState::new();
        let cfg = MuonConfig { lr: 0.05, momentum: 0.9, ..MuonConfig::default() };
        let loss = |p: &Params| -> f32 {
            p.get("w")
                .unwrap()
                .data()
                .iter()
                .zip(target.data())
                .map(|(a, b)| 0.5 * (a - b) * (a - b))
                .sum()
        };
        let initial = loss(&params);
        for _ in 0..200 {
            let mut grads = Params::new();
            let mut g = params.get("w").unwrap().clone();
            for (v, &t) in g.data_mut().iter_mut().zip(target.data()) {
                *v -= t;
            }
            grads.insert("w", g);
            muon_step(&mut params, &grads, &mut state, cfg).unwrap();
        }
        let fin = loss(&params);
        assert!(fin < 0.05 * initial, "initial {initial}, final {fin}");
    }

    fn toy_params(rng: &mut ChaCha8Rng) -> Params {
        let mut p = Params::new();
        p.insert("a", Tensor::randn(&[8, 3], rng));
        p.insert("b", Tensor::randn(&[3, 8], rng));
        p.insert("c", Tensor::randn(&[5], rng));
        p.insert("d", Tensor::randn(&[4, 4], rng));
        p
    }

    #[test]
    fn shard_plan_covers_all_params_once() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = toy_params(&mut rng);
        for n in [1, 2, 3, 4] {
            let plan = ShardPlan::build(&p, n).unwrap();
            assert_eq!(plan.owner.len(), p.len());
            assert!(plan.owner.values().all(|&w| w < n));
        }
        assert!(ShardPlan::build(&p, 0).is_err());
    }

    #[test]
    fn zero1_matches_unsharded_bit_for_bit() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let cfg = MuonConfig { lr: 0.03, momentum: 0.9, weight_decay: 0.1, ns_steps: 5 };
        for n_workers in [1, 2, 4] {
            let mut reference = toy_params(&mut rng);
            let mut sharded = reference.clone();
            let mut ref_state = MuonState::new();
            let plan = ShardPlan::build(&sharded, n_workers).unwrap();
            let mut shard_states: Vec<MuonState> =
                (0..n_workers).map(|_| MuonState::new()).collect();
            for _ in 0..10 {
                let worker_grads: Vec<Params> = (0..n_workers)
                    .map(|_| {
                        let mut g = Params::new();
                        for (name, t) in reference.iter() {
                            g.insert(name.clone(), Tensor::randn(t.shape(), &mut rng));
                        }
                        g
                    })
                    .collect();
                let avg = average_grads(&worker_grads).unwrap();
                muon_step(&mut reference, &avg, &mut ref_state, cfg).unwrap();
                zero1_sharded_step(&mut sharded, &worker_grads, &mut shard_states, &plan, cfg)
                    .unwrap();
                for (name, t) in reference.iter() {
                    assert_eq!(
                        t.data(),
                        sharded.get(name).unwrap().data(),
                        "divergence in {name} with {n_workers} workers"
                    );
                }
            }
        }
    }
}
