//! Named parameter sets and small graph-building helpers (linear layers,
//! layer norm, pre-norm transformer blocks) shared by the vision encoder,
//! projector, and decoder.

use std::collections::BTreeMap;
use std::path::Path;
use std::rc::Rc;

use rand::Rng;

use crate::packing::attention_graph;
use crate::tensor::{Grads, Tape, Tensor, Val};
use crate::{Error, Result};

/// Ordered name -> tensor map. Ordering is part of the contract: optimizers
/// and the sharded simulation iterate in name order.
#[derive(Debug, Clone, Default)]
pub struct Params {
    map: BTreeMap<String, Tensor>,
}

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.map.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.map
            .get(name)
            .ok_or_else(|| Error::Invalid(format!("unknown parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.map
            .get_mut(name)
            .ok_or_else(|| Error::Invalid(format!("unknown parameter {name}")))
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.map.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    /// Absorbs `other`, prefixing each name (e.g. `vit.`, `proj.`, `lm.`).
    pub fn absorb(&mut self, prefix: &str, other: Params) {
        for (k, v) in other.map {
            self.map.insert(format!("{prefix}{k}"), v);
        }
    }

    pub fn save<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        crate::checkpoint::save(path, &self.map)
    }

    pub fn load<P: AsRef<Path>>(path: P) -> Result<Self> {
        Ok(Params { map: crate::checkpoint::load(path)? })
    }

    pub fn to_map(&self) -> &BTreeMap<String, Tensor> {
        &self.map
    }

    /// Registers every parameter on the tape as a grad-requiring input.
    pub fn load_into(&self, tape: &mut Tape) -> ParamVals {
        let mut vals = BTreeMap::new();
        for (name, t) in &self.map {
            vals.insert(name.clone(), tape.input(t.clone()));
        }
        ParamVals { vals }
    }
}

/// Tape handles for a parameter set, keyed by name.
pub struct ParamVals {
    vals: BTreeMap<String, Val>,
}

impl ParamVals {
    /// Overrides one entry (used by gradient checks to route a specific
    /// parameter through an externally created input).
    pub fn set(&mut self, name: &str, val: Val) {
        self.vals.insert(name.to_string(), val);
    }

    pub fn get(&self, name: &str) -> Result<Val> {
        self.vals
            .get(name)
            .copied()
            .ok_or_else(|| Error::Invalid(format!("unknown parameter {name}")))
    }

    /// Collects gradients per parameter after a backward pass; parameters
    /// that did not influence the loss get zeros.
    pub fn grads(&self, params: &Params, grads: &Grads) -> Params {
        let mut out = Params::new();
        for (name, val) in &self.vals {
            let shape = params.get(name).map(|t| t.shape().to_vec()).unwrap_or_default();
            out.insert(name.clone(), grads.get_or_zeros(*val, &shape));
        }
        out
    }
}

pub fn init_linear<R: Rng>(params: &mut Params, name: &str, d_in: usize, d_out: usize, rng: &mut R) {
    let std = 1.0 / (d_in as f32).sqrt();
    params.insert(format!("{name}.w"), Tensor::randn_scaled(&[d_in, d_out], std, rng));
    params.insert(format!("{name}.b"), Tensor::zeros(&[d_out]));
}

pub fn linear(tape: &mut Tape, pv: &ParamVals, name: &str, x: Val) -> Result<Val> {
    let w = pv.get(&format!("{name}.w"))?;
    let b = pv.get(&format!("{name}.b"))?;
    let y = tape.matmul(x, w)?;
    tape.add_row_vec(y, b)
}

pub fn init_layer_norm(params: &mut Params, name: &str, dim: usize) {
    params.insert(format!("{name}.g"), Tensor::full(&[dim], 1.0));
    params.insert(format!("{name}.b"), Tensor::zeros(&[dim]));
}

pub fn layer_norm(tape: &mut Tape, pv: &ParamVals, name: &str, x: Val) -> Result<Val> {
    let g = pv.get(&format!("{name}.g"))?;
    let b = pv.get(&format!("{name}.b"))?;
    tape.layer_norm(x, g, b, 1e-5)
}

/// Shape of one pre-norm transformer block.
#[derive(Debug, Clone, Copy)]
pub struct BlockCfg {
    pub dim: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
}

impl BlockCfg {
    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }
}

pub fn init_attn<R: Rng>(params: &mut Params, prefix: &str, cfg: BlockCfg, rng: &mut R) {
    for proj in ["q", "k", "v", "o"] {
        init_linear(params, &format!("{prefix}.attn.{proj}"), cfg.dim, cfg.dim, rng);
    }
    init_layer_norm(params, &format!("{prefix}.ln1"), cfg.dim);
}

pub fn init_mlp<R: Rng>(params: &mut Params, prefix: &str, cfg: BlockCfg, rng: &mut R) {
    init_linear(params, &format!("{prefix}.mlp.w1"), cfg.dim, cfg.mlp_hidden, rng);
    init_linear(params, &format!("{prefix}.mlp.w2"), cfg.mlp_hidden, cfg.dim, rng);
    init_layer_norm(params, &format!("{prefix}.ln2"), cfg.dim);
}

pub fn init_block<R: Rng>(params: &mut Params, prefix: &str, cfg: BlockCfg, rng: &mut R) {
    init_attn(params, prefix, cfg, rng);
    init_mlp(params, prefix, cfg, rng);
}

/// Pre-norm attention sublayer with residual: x + attn(ln1(x)). RoPE angles
/// are applied to q and k only.
pub fn attn_forward(
    tape: &mut Tape,
    pv: &ParamVals,
    prefix: &str,
    cfg: BlockCfg,
    x: Val,
    angles: &Rc<Vec<f32>>,
    mask: &Rc<Vec<bool>>,
) -> Result<Val> {
    let normed = layer_norm(tape, pv, &format!("{prefix}.ln1"), x)?;
    let q = linear(tape, pv, &format!("{prefix}.attn.q"), normed)?;
    let k = linear(tape, pv, &format!("{prefix}.attn.k"), normed)?;
    let v = linear(tape, pv, &format!("{prefix}.attn.v"), normed)?;
    let hd = cfg.head_dim();
    let q = tape.rope(q, cfg.heads, hd, Rc::clone(angles))?;
    let k = tape.rope(k, cfg.heads, hd, Rc::clone(angles))?;
    let attn = attention_graph(tape, q, k, v, cfg.heads, hd, Rc::clone(mask))?;
    let proj = linear(tape, pv, &format!("{prefix}.attn.o"), attn)?;
    tape.add(x, proj)
}

/// Pre-norm GELU MLP sublayer with residual: x + w2(gelu(w1(ln2(x)))).
pub fn mlp_forward(
    tape: &mut Tape,
    pv: &ParamVals,
    prefix: &str,
    x: Val,
) -> Result<Val> {
    let normed = layer_norm(tape, pv, &format!("{prefix}.ln2"), x)?;
    let h = linear(tape, pv, &format!("{prefix}.mlp.w1"), normed)?;
    let h = tape.gelu(h)?;
    let h = linear(tape, pv, &format!("{prefix}.mlp.w2"), h)?;
    tape.add(x, h)
}

pub fn block_forward(
    tape: &mut Tape,
    pv: &ParamVals,
    prefix: &str,
    cfg: BlockCfg,
    x: Val,
    angles: &Rc<Vec<f32>>,
    mask: &Rc<Vec<bool>>,
) -> Result<Val> {
    let x = attn_forward(tape, pv, prefix, cfg, x, angles, mask)?;
    mlp_forward(tape, pv, prefix, x)
}
