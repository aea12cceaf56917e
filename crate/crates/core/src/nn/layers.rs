use serde::{Deserialize, Serialize};

use super::{ParamId, ParamSet, Tape, Var};
use crate::rng::SeededRng;

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new(params: &mut ParamSet, name: &str, input: usize, output: usize, rng: &mut SeededRng) -> Self {
        let weight = params.add(&format!("{name}.weight"), input, output, input, rng);
        let bias = params.add(&format!("{name}.bias"), 1, output, input, rng);
        Linear { weight, bias }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Var {
        let w = tape.param(self.weight);
        let b = tape.param(self.bias);
        let h = tape.matmul(x, w);
        tape.add_bias(h, b)
    }
}

/// Two linear maps with a ReLU in between.
#[derive(Debug, Clone, Copy)]
pub struct Mlp {
    pub hidden: Linear,
    pub output: Linear,
}

impl Mlp {
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        input: usize,
        hidden: usize,
        output: usize,
        rng: &mut SeededRng,
    ) -> Self {
        Mlp {
            hidden: Linear::new(params, &format!("{name}.0"), input, hidden, rng),
            output: Linear::new(params, &format!("{name}.1"), hidden, output, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Var {
        let h = self.hidden.forward(tape, x);
        let h = tape.relu(h);
        self.output.forward(tape, h)
    }
}

/// Shape of an attention stack.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub dim: usize,
    pub heads: usize,
    pub ff_dim: usize,
    /// Row normalization after each residual. Off by default.
    #[serde(default)]
    pub norm: bool,
    /// Scale scores by `1/sqrt(dim)` instead of `1/sqrt(dim / heads)`.
    #[serde(default)]
    pub full_dim_scale: bool,
}

impl AttentionConfig {
    pub fn new(dim: usize, heads: usize, ff_dim: usize) -> Self {
        AttentionConfig { dim, heads, ff_dim, norm: false, full_dim_scale: false }
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn validate(&self) -> crate::Result<()> {
        if self.dim == 0 || self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(crate::Error::Config(format!(
                "embedding dim {} must be a positive multiple of head count {}",
                self.dim, self.heads
            )));
        }
        Ok(())
    }
}

impl Default for AttentionConfig {
    fn default() -> Self {
        AttentionConfig::new(128, 8, 512)
    }
}

/// Multi-head self-attention with a residual, then a ReLU feed-forward
/// block with a residual. No output projection and no normalization
/// unless `norm` is set.
#[derive(Debug, Clone, Copy)]
pub struct AttentionLayer {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub ff: Mlp,
    pub cfg: AttentionConfig,
}

impl AttentionLayer {
    pub fn new(params: &mut ParamSet, name: &str, cfg: AttentionConfig, rng: &mut SeededRng) -> Self {
        let d = cfg.dim;
        AttentionLayer {
            wq: params.add(&format!("{name}.wq"), d, d, d, rng),
            wk: params.add(&format!("{name}.wk"), d, d, d, rng),
            wv: params.add(&format!("{name}.wv"), d, d, d, rng),
            ff: Mlp::new(params, &format!("{name}.ff"), d, cfg.ff_dim, d, rng),
            cfg,
        }
    }

    pub fn forward(&self, tape: &mut Tape, h: Var) -> Var {
        let (wq, wk, wv) = (tape.param(self.wq), tape.param(self.wk), tape.param(self.wv));
        let q = tape.matmul(h, wq);
        let k = tape.matmul(h, wk);
        let v = tape.matmul(h, wv);
        let dh = self.cfg.head_dim();
        let scale_dim = if self.cfg.full_dim_scale { self.cfg.dim } else { dh };
        let scale = 1.0 / (scale_dim as f64).sqrt();
        let mut heads = Vec::with_capacity(self.cfg.heads);
        for head in 0..self.cfg.heads {
            let (qh, kh, vh) = if self.cfg.heads == 1 {
                (q, k, v)
            } else {
                (tape.cols(q, head * dh, dh), tape.cols(k, head * dh, dh), tape.cols(v, head * dh, dh))
            };
            let scores = tape.matmul_bt(qh, kh);
            let scores = tape.scale(scores, scale);
            let attn = tape.softmax_rows(scores);
            heads.push(tape.matmul(attn, vh));
        }
        let mixed = if heads.len() == 1 { heads[0] } else { tape.concat_cols(&heads) };
        let mut hat = tape.add(h, mixed);
        if self.cfg.norm {
            hat = tape.row_norm(hat);
        }
        let ff = self.ff.forward(tape, hat);
        let mut out = tape.add(hat, ff);
        if self.cfg.norm {
            out = tape.row_norm(out);
        }
        out
    }
}

/// A stack of attention layers sharing one configuration.
#[derive(Debug, Clone)]
pub struct AttentionStack {
    pub layers: Vec<AttentionLayer>,
}

impl AttentionStack {
    pub fn new(params: &mut ParamSet, name: &str, depth: usize, cfg: AttentionConfig, rng: &mut SeededRng) -> Self {
        let layers = (0..depth).map(|i| AttentionLayer::new(params, &format!("{name}.{i}"), cfg, rng)).collect();
        AttentionStack { layers }
    }

    pub fn forward(&self, tape: &mut Tape, mut h: Var) -> Var {
        for layer in &self.layers {
            h = layer.forward(tape, h);
        }
        h
    }
}

/// `C · tanh(A Bᵀ / sqrt(d))`, the clipped compatibility heatmap.
pub fn clipped_heatmap(tape: &mut Tape, a: Var, b: Var, dim: usize, clip: f64) -> Var {
    let s = tape.matmul_bt(a, b);
    let s = tape.scale(s, 1.0 / (dim as f64).sqrt());
    let t = tape.tanh(s);
    tape.scale(t, clip)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{grad_check, DenseMatrix, GradCheckOptions};
    use crate::rng;

    fn random_input(rows: usize, cols: usize, seed: u64) -> DenseMatrix {
        let mut r = rng::rng(seed);
        DenseMatrix::from_vec(rows, cols, (0..rows * cols).map(|_| 2.0 * rng::unit(&mut r) - 1.0).collect())
    }

    fn weights(rows: usize, cols: usize, seed: u64) -> DenseMatrix {
        random_input(rows, cols, seed)
    }

    /// Scalar probe `sum(W ⊙ out)` with fixed random `W`.
    fn probe(out: &DenseMatrix, w: &DenseMatrix) -> f64 {
        out.data.iter().zip(&w.data).map(|(a, b)| a * b).sum()
    }

    fn layer(cfg: AttentionConfig, seed: u64) -> (ParamSet, AttentionLayer) {
        let mut params = ParamSet::new();
        let mut r = rng::rng(seed);
        let l = AttentionLayer::new(&mut params, "att", cfg, &mut r);
        (params, l)
    }

    #[test]
    fn zero_params_are_identity() {
        let (mut params, l) = layer(AttentionConfig::new(8, 2, 16), 1);
        params.zero_values();
        let x = random_input(5, 8, 2);
        let mut tape = Tape::new(&params);
        let h = tape.input(x.clone());
        let out = l.forward(&mut tape, h);
        assert_eq!(tape.value(out), &x);
    }

    #[test]
    fn row_permutation_equivariance() {
        let (params, l) = layer(AttentionConfig::new(8, 2, 16), 3);
        let x = random_input(5, 8, 4);
        let perm = [3, 0, 4, 1, 2];
        let xp = DenseMatrix::from_rows(&perm.iter().map(|&i| x.row(i).to_vec()).collect::<Vec<_>>());
        let mut tape = Tape::new(&params);
        let a = tape.input(x);
        let out = l.forward(&mut tape, a);
        let b = tape.input(xp);
        let outp = l.forward(&mut tape, b);
        for (i, &p) in perm.iter().enumerate() {
            for c in 0..8 {
                assert!((tape.value(outp).get(i, c) - tape.value(out).get(p, c)).abs() <= 1e-12);
            }
        }
    }

    fn check_layer(cfg: AttentionConfig) -> f64 {
        let (mut params, l) = layer(cfg, 5);
        let x = random_input(5, cfg.dim, 6);
        let w = weights(5, cfg.dim, 7);
        let f = |p: &ParamSet| {
            let mut tape = Tape::new(p);
            let h = tape.input(x.clone());
            let out = l.forward(&mut tape, h);
            probe(tape.value(out), &w)
        };
        let mut tape = Tape::new(&params);
        let h = tape.input(x.clone());
        let out = l.forward(&mut tape, h);
        let grads = tape.backward(&[(out, &w)]);
        params.zero_grad();
        params.accumulate(&grads.params);
        grad_check(f, &params, &GradCheckOptions::default())
    }

    #[test]
    fn attention_gradient_matches_finite_differences() {
        let err = check_layer(AttentionConfig::new(8, 2, 16));
        assert!(err < 1e-5, "max relative error {err}");
    }

    #[test]
    fn attention_with_norm_gradient() {
        let mut cfg = AttentionConfig::new(8, 4, 8);
        cfg.norm = true;
        let err = check_layer(cfg);
        assert!(err < 1e-5, "max relative error {err}");
    }

    #[test]
    fn linear_gradient() {
        let mut params = ParamSet::new();
        let lin = Linear::new(&mut params, "lin", 3, 4, &mut rng::rng(8));
        let x = random_input(6, 3, 9);
        let w = weights(6, 4, 10);
        let f = |p: &ParamSet| {
            let mut tape = Tape::new(p);
            let h = tape.input(x.clone());
            let out = lin.forward(&mut tape, h);
            probe(tape.value(out), &w)
        };
        let mut tape = Tape::new(&params);
        let h = tape.input(x.clone());
        let out = lin.forward(&mut tape, h);
        let g = tape.backward(&[(out, &w)]);
        params.accumulate(&g.params);
        let err = grad_check(f, &params, &GradCheckOptions::default());
        assert!(err < 1e-7, "max relative error {err}");
    }

    #[test]
    fn corrupted_backward_is_caught() {
        let mut params = ParamSet::new();
        let lin = Linear::new(&mut params, "lin", 3, 4, &mut rng::rng(8));
        let x = random_input(6, 3, 9);
        let w = weights(6, 4, 10);
        let f = |p: &ParamSet| {
            let mut tape = Tape::new(p);
            let h = tape.input(x.clone());
            let out = lin.forward(&mut tape, h);
            probe(tape.value(out), &w)
        };
        let mut tape = Tape::new(&params);
        let h = tape.input(x.clone());
        let out = lin.forward(&mut tape, h);
        let mut g = tape.backward(&[(out, &w)]);
        g.params.0[0].data[0] *= -1.5;
        params.accumulate(&g.params);
        let err = grad_check(f, &params, &GradCheckOptions::default());
        assert!(err > 1e-2, "corruption went unnoticed: {err}");
    }
}
