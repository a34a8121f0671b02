//! Parameterized layers. Each registers its tensors in a [`ParamStore`]
//! under a name prefix and records its forward pass on a [`Tape`].

use rand::Rng;

use super::{ParamId, ParamStore, Tape, Tensor, Var};

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, input: usize, output: usize, rng: &mut R) -> Self {
        Self {
            w: store.add(format!("{name}.w"), Tensor::xavier(input, output, rng)),
            b: store.add(format!("{name}.b"), Tensor::zeros(1, output)),
            input,
            output,
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Var {
        let w = tape.param(self.w);
        let b = tape.param(self.b);
        let xw = tape.matmul(x, w);
        tape.add_row(xw, b)
    }
}

/// Linear layers with ReLU between them (none after the last).
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, sizes: &[usize], rng: &mut R) -> Self {
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.{i}"), w[0], w[1], rng))
            .collect();
        Self { layers }
    }

    pub fn forward(&self, tape: &mut Tape, mut x: Var) -> Var {
        for (i, l) in self.layers.iter().enumerate() {
            x = l.forward(tape, x);
            if i + 1 < self.layers.len() {
                x = tape.relu(x);
            }
        }
        x
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), Tensor::from_vec(1, dim, vec![1.0; dim])),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(1, dim)),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Var {
        let g = tape.param(self.gain);
        let b = tape.param(self.bias);
        tape.layer_norm(x, g, b)
    }
}

#[derive(Debug, Clone)]
pub struct Embedding {
    pub table: ParamId,
    pub dim: usize,
}

impl Embedding {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, count: usize, dim: usize, rng: &mut R) -> Self {
        Self {
            table: store.add(format!("{name}.table"), Tensor::xavier(count, dim, rng)),
            dim,
        }
    }

    pub fn forward(&self, tape: &mut Tape, ids: &[usize]) -> Var {
        let t = tape.param(self.table);
        tape.gather(t, ids)
    }
}

/// Multi-head scaled dot-product self-attention over the rows of `x`.
#[derive(Debug, Clone)]
pub struct SelfAttention {
    pub qkv: Linear,
    pub out: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl SelfAttention {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut R) -> Self {
        assert!(heads > 0 && dim % heads == 0, "dim must be divisible by heads");
        Self {
            qkv: Linear::new(store, &format!("{name}.qkv"), dim, 3 * dim, rng),
            out: Linear::new(store, &format!("{name}.out"), dim, dim, rng),
            heads,
            dim,
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Var {
        let qkv = self.qkv.forward(tape, x);
        let dh = self.dim / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let q = tape.cols(qkv, h * dh, dh);
            let k = tape.cols(qkv, self.dim + h * dh, dh);
            let v = tape.cols(qkv, 2 * self.dim + h * dh, dh);
            let s = tape.matmul_nt(q, k);
            let s = tape.scale(s, scale);
            let a = tape.softmax_rows(s);
            outs.push(tape.matmul(a, v));
        }
        let cat = if outs.len() == 1 { outs[0] } else { tape.hcat(&outs) };
        self.out.forward(tape, cat)
    }
}

/// Post-norm transformer block: attention and a GELU feed-forward, each
/// wrapped in a residual connection followed by layer normalization.
#[derive(Debug, Clone)]
pub struct TransformerBlock {
    pub attn: SelfAttention,
    pub ln1: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
    pub ln2: LayerNorm,
}

impl TransformerBlock {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        ff: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            attn: SelfAttention::new(store, &format!("{name}.attn"), dim, heads, rng),
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), dim),
            ff1: Linear::new(store, &format!("{name}.ff1"), dim, ff, rng),
            ff2: Linear::new(store, &format!("{name}.ff2"), ff, dim, rng),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), dim),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Var {
        let a = self.attn.forward(tape, x);
        let r = tape.add(x, a);
        let h = self.ln1.forward(tape, r);
        let f = self.ff1.forward(tape, h);
        let f = tape.gelu(f);
        let f = self.ff2.forward(tape, f);
        let r = tape.add(h, f);
        self.ln2.forward(tape, r)
    }
}

/// Gated recurrent unit: `r = σ(x·Wr + h·Ur)`, `z = σ(x·Wz + h·Uz)`,
/// `n = tanh(x·Wn + r ∘ (h·Un))`, `h' = (1 − z) ∘ n + z ∘ h`.
#[derive(Debug, Clone)]
pub struct GruCell {
    pub wx: Linear,
    pub wh: Linear,
    pub hidden: usize,
}

impl GruCell {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, input: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            wx: Linear::new(store, &format!("{name}.x"), input, 3 * hidden, rng),
            wh: Linear::new(store, &format!("{name}.h"), hidden, 3 * hidden, rng),
            hidden,
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var, h: Var) -> Var {
        let n = self.hidden;
        let gx = self.wx.forward(tape, x);
        let gh = self.wh.forward(tape, h);
        let (xr, xz, xn) = (tape.cols(gx, 0, n), tape.cols(gx, n, n), tape.cols(gx, 2 * n, n));
        let (hr, hz, hn) = (tape.cols(gh, 0, n), tape.cols(gh, n, n), tape.cols(gh, 2 * n, n));
        let r = tape.add(xr, hr);
        let r = tape.sigmoid(r);
        let z = tape.add(xz, hz);
        let z = tape.sigmoid(z);
        let rh = tape.mul(r, hn);
        let cand = tape.add(xn, rh);
        let cand = tape.tanh(cand);
        // h' = cand + z ∘ (h − cand)
        let diff = tape.sub(h, cand);
        let zd = tape.mul(z, diff);
        tape.add(cand, zd)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::grad_check_params;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    fn weighted_sum(tape: &mut Tape, y: Var, seed: u64) -> Var {
        let shape = tape.value(y).shape();
        let w = tape.leaf(Tensor::xavier(shape.0, shape.1, &mut ChaCha8Rng::seed_from_u64(seed)));
        let p = tape.mul(y, w);
        tape.sum(p)
    }

    fn check(store: &ParamStore, f: impl Fn(&mut Tape) -> Var) {
        let err = grad_check_params(store, f, 1e-5).unwrap();
        assert!(err <= 1e-4, "relative error {err}");
    }

    #[test]
    fn linear_and_mlp() {
        let mut r = rng();
        let mut s = ParamStore::new();
        let mlp = Mlp::new(&mut s, "m", &[3, 5, 2], &mut r);
        let x = Tensor::xavier(4, 3, &mut r);
        check(&s, |t| {
            let xv = t.leaf(x.clone());
            let y = mlp.forward(t, xv);
            weighted_sum(t, y, 1)
        });
    }

    #[test]
    fn embedding_and_layer_norm() {
        let mut r = rng();
        let mut s = ParamStore::new();
        let e = Embedding::new(&mut s, "e", 6, 4, &mut r);
        let ln = LayerNorm::new(&mut s, "ln", 4);
        check(&s, |t| {
            let x = e.forward(t, &[1, 4, 1]);
            let y = ln.forward(t, x);
            weighted_sum(t, y, 2)
        });
    }

    #[test]
    fn attention_block() {
        let mut r = rng();
        let mut s = ParamStore::new();
        let b = TransformerBlock::new(&mut s, "blk", 4, 2, 6, &mut r);
        let x = Tensor::xavier(3, 4, &mut r);
        check(&s, |t| {
            let xv = t.leaf(x.clone());
            let y = b.forward(t, xv);
            weighted_sum(t, y, 3)
        });
    }

    #[test]
    fn gru_cell_scalar_loss() {
        let mut r = rng();
        let mut s = ParamStore::new();
        let g = GruCell::new(&mut s, "gru", 3, 4, &mut r);
        let x = Tensor::xavier(2, 3, &mut r);
        let h = Tensor::xavier(2, 4, &mut r);
        check(&s, |t| {
            let xv = t.leaf(x.clone());
            let hv = t.leaf(h.clone());
            let y = g.forward(t, xv, hv);
            weighted_sum(t, y, 4)
        });
        // and with respect to the inputs
        let err = crate::nn::grad_check_input(
            &s,
            |t, hv| {
                let xv = t.leaf(x.clone());
                let y = g.forward(t, xv, hv);
                weighted_sum(t, y, 5)
            },
            &h,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-4, "{err}");
    }

    #[test]
    fn gru_interpolates_between_candidate_and_state() {
        let mut r = rng();
        let mut s = ParamStore::new();
        let g = GruCell::new(&mut s, "gru", 2, 3, &mut r);
        let mut t = Tape::with_params(&s);
        let x = t.leaf(Tensor::zeros(1, 2));
        let h = t.leaf(Tensor::zeros(1, 3));
        let y = g.forward(&mut t, x, h);
        // zero input and state with zero biases give tanh(0) = 0
        assert!(t.value(y).data.iter().all(|v| v.abs() < 1e-12));
    }
}
