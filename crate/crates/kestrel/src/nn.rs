//! Parameter storage and the shared neural building blocks: affine layers,
//! two-layer MLPs, layer norm, and multi-head attention.
//!
//! Parameters live in a [`ParamStore`] keyed by hierarchical names
//! (`lm.block0.attn.wq`). A forward pass binds the whole store onto a tape
//! as leaves, so modules address parameters by id and gradients come back
//! per parameter in store order.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Index of a parameter within its store.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> ParamStore {
        ParamStore::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        self.index.insert(name.clone(), self.tensors.len());
        self.names.push(name);
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    /// Centered-uniform fan-in initialization for an affine weight.
    pub fn insert_affine(
        &mut self,
        name: impl Into<String>,
        fan_in: usize,
        fan_out: usize,
        rng: &mut ChaCha8Rng,
    ) -> ParamId {
        let s = 1.0 / (fan_in as f64).sqrt();
        let data = (0..fan_in * fan_out).map(|_| rng.gen_range(-s..s)).collect();
        self.insert(name, Tensor::from_vec(fan_in, fan_out, data))
    }

    pub fn insert_zeros(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> ParamId {
        self.insert(name, Tensor::zeros(rows, cols))
    }

    pub fn insert_ones(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> ParamId {
        self.insert(name, Tensor::from_vec(rows, cols, vec![1.0; rows * cols]))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter())
    }

    /// Binds every parameter onto the tape as a leaf, in store order.
    pub fn bind(&self, tape: &mut Tape) -> Binding {
        let vars = self.tensors.iter().map(|t| tape.leaf(t.clone())).collect();
        Binding { vars }
    }

    /// Total number of scalar parameters.
    pub fn n_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }
}

/// Tape variables for every parameter of a store, produced by
/// [`ParamStore::bind`].
pub struct Binding {
    vars: Vec<Var>,
}

impl Binding {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Affine layer `y = x W + b`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut ChaCha8Rng,
    ) -> Linear {
        Linear {
            w: store.insert_affine(format!("{prefix}.w"), fan_in, fan_out, rng),
            b: store.insert_zeros(format!("{prefix}.b"), 1, fan_out),
        }
    }

    pub fn apply(&self, tape: &mut Tape, bind: &Binding, x: Var) -> Var {
        let xw = tape.matmul(x, bind.var(self.w));
        tape.add_row_broadcast(xw, bind.var(self.b))
    }
}

/// Two affine layers with a smooth gated unit between them.
#[derive(Debug, Clone, Copy)]
pub struct Mlp {
    pub l1: Linear,
    pub l2: Linear,
}

impl Mlp {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        fan_in: usize,
        hidden: usize,
        fan_out: usize,
        rng: &mut ChaCha8Rng,
    ) -> Mlp {
        Mlp {
            l1: Linear::new(store, &format!("{prefix}.l1"), fan_in, hidden, rng),
            l2: Linear::new(store, &format!("{prefix}.l2"), hidden, fan_out, rng),
        }
    }

    pub fn apply(&self, tape: &mut Tape, bind: &Binding, x: Var) -> Var {
        let h = self.l1.apply(tape, bind, x);
        let a = tape.silu(h);
        self.l2.apply(tape, bind, a)
    }
}

/// Learned per-column gain and bias over row-standardized activations.
#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

pub const LN_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn new(store: &mut ParamStore, prefix: &str, dim: usize) -> LayerNorm {
        LayerNorm {
            gain: store.insert_ones(format!("{prefix}.gain"), 1, dim),
            bias: store.insert_zeros(format!("{prefix}.bias"), 1, dim),
        }
    }

    pub fn apply(&self, tape: &mut Tape, bind: &Binding, x: Var) -> Var {
        tape.layer_norm_rows(x, bind.var(self.gain), bind.var(self.bias), LN_EPS)
    }
}

/// Additive attention bias value for masked-out key positions. Large enough
/// that its softmax weight underflows to exactly zero against any live key.
pub const MASKED_LOGIT: f64 = -1e30;

/// Multi-head attention. `q_input` provides queries; `kv_input` provides
/// keys and values; an optional additive bias (rows = queries, cols = keys)
/// carries causal or segmentation masks.
#[derive(Debug, Clone, Copy)]
pub struct Attention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub n_heads: usize,
    pub dim: usize,
}

impl Attention {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        dim: usize,
        n_heads: usize,
        rng: &mut ChaCha8Rng,
    ) -> Attention {
        assert_eq!(dim % n_heads, 0, "dim {dim} not divisible by heads {n_heads}");
        Attention {
            wq: Linear::new(store, &format!("{prefix}.wq"), dim, dim, rng),
            wk: Linear::new(store, &format!("{prefix}.wk"), dim, dim, rng),
            wv: Linear::new(store, &format!("{prefix}.wv"), dim, dim, rng),
            wo: Linear::new(store, &format!("{prefix}.wo"), dim, dim, rng),
            n_heads,
            dim,
        }
    }

    pub fn apply(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        q_input: Var,
        kv_input: Var,
        mask_bias: Option<&Tensor>,
    ) -> Var {
        let q = self.wq.apply(tape, bind, q_input);
        let k = self.wk.apply(tape, bind, kv_input);
        let v = self.wv.apply(tape, bind, kv_input);
        let dh = self.dim / self.n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(self.n_heads);
        for h in 0..self.n_heads {
            let (from, to) = (h * dh, (h + 1) * dh);
            let qh = tape.slice_cols(q, from, to);
            let kh = tape.slice_cols(k, from, to);
            let vh = tape.slice_cols(v, from, to);
            let kt = tape.transpose(kh);
            let scores = tape.matmul(qh, kt);
            let scaled = tape.scale(scores, scale);
            let biased = match mask_bias {
                Some(bias) => tape.add_const(scaled, bias),
                None => scaled,
            };
            let attn = tape.softmax_rows(biased);
            heads.push(tape.matmul(attn, vh));
        }
        let mut merged = heads[0];
        for &h in &heads[1..] {
            merged = tape.concat_cols(merged, h);
        }
        self.wo.apply(tape, bind, merged)
    }
}

/// Lower-triangular causal bias for a sequence of length `t`.
pub fn causal_bias(t: usize) -> Tensor {
    let mut m = Tensor::zeros(t, t);
    for r in 0..t {
        for c in (r + 1)..t {
            *m.at_mut(r, c) = MASKED_LOGIT;
        }
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::finite_difference_check;
    use rand::SeedableRng;

    #[test]
    fn attention_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let attn = Attention::new(&mut store, "a", 8, 2, &mut rng);
        let x = Tensor::from_vec(3, 8, (0..24).map(|i| ((i * 7 % 13) as f64 - 6.0) / 6.0).collect());
        let tensors: Vec<Tensor> = store.iter().map(|(_, t)| t.clone()).collect();
        let mut inputs = vec![x];
        inputs.extend(tensors);
        let max_rel = finite_difference_check(&inputs, |t, v| {
            let bind = Binding { vars: v[1..].to_vec() };
            let bias = causal_bias(3);
            let out = attn.apply(t, &bind, v[0], v[0], Some(&bias));
            let sq = t.mul(out, out);
            t.mean_all(sq)
        });
        assert!(max_rel < 1e-6, "max rel err {max_rel}");
    }

    #[test]
    fn masked_positions_get_zero_weight() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut store = ParamStore::new();
        let attn = Attention::new(&mut store, "a", 4, 1, &mut rng);
        // Key 1 is masked for every query; perturbing it must not change the
        // output.
        let bias = Tensor::from_vec(2, 2, vec![0.0, MASKED_LOGIT, 0.0, MASKED_LOGIT]);
        let mut kv = Tensor::from_vec(2, 4, vec![0.1, 0.2, 0.3, 0.4, 1.0, 1.0, 1.0, 1.0]);
        let q = Tensor::from_vec(2, 4, vec![0.5; 8]);

        let run = |kv: &Tensor| {
            let mut tape = Tape::new();
            let bind = store.bind(&mut tape);
            let qv = tape.leaf(q.clone());
            let kvv = tape.leaf(kv.clone());
            let out = attn.apply(&mut tape, &bind, qv, kvv, Some(&bias));
            tape.value(out).clone()
        };
        let before = run(&kv);
        kv.row_mut(1)[0] = -3.0;
        let after = run(&kv);
        assert_eq!(before.data, after.data);
    }
}
