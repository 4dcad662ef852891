//! GRU policy network: one GRU cell plus policy and value heads, with
//! hand-written backward passes (backpropagation through time is driven by
//! the caller, step by step in reverse).

use rand_chacha::ChaCha8Rng;

use super::{matvec, matvec_t_acc, outer_acc, sigmoid, Net, Parameter};
use crate::scalar::Scalar;
use crate::sim::{ACTION_COUNT, OBS_DIM};
use crate::{Error, Result};
use rand::SeedableRng;

/// Default hidden width.
pub const HIDDEN_DIM: usize = 128;

#[derive(Debug, Clone, PartialEq)]
pub struct GruPolicy<S> {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub action_dim: usize,
    pub wz: Parameter<S>,
    pub uz: Parameter<S>,
    pub bz: Parameter<S>,
    pub wr: Parameter<S>,
    pub ur: Parameter<S>,
    pub br: Parameter<S>,
    pub wn: Parameter<S>,
    pub un: Parameter<S>,
    pub bn: Parameter<S>,
    pub w_pi: Parameter<S>,
    pub b_pi: Parameter<S>,
    pub w_v: Parameter<S>,
    pub b_v: Parameter<S>,
}

/// Forward activations of one GRU step, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct GruCache<S> {
    pub x: Vec<S>,
    pub h_prev: Vec<S>,
    pub z: Vec<S>,
    pub r: Vec<S>,
    pub n: Vec<S>,
    pub un_h: Vec<S>,
}

impl<S: Scalar> GruPolicy<S> {
    pub fn new(seed: u64) -> Self {
        Self::with_dims(OBS_DIM, HIDDEN_DIM, ACTION_COUNT, seed)
    }

    /// Arbitrary dimensions, used by tests with small nets.
    pub fn with_dims(input_dim: usize, hidden_dim: usize, action_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = |name: &str, rows: usize, cols: usize, rng: &mut ChaCha8Rng| {
            Parameter::uniform(name, rows, cols, cols, rng)
        };
        GruPolicy {
            input_dim,
            hidden_dim,
            action_dim,
            wz: w("gru.wz", hidden_dim, input_dim, &mut rng),
            uz: w("gru.uz", hidden_dim, hidden_dim, &mut rng),
            bz: Parameter::zeros("gru.bz", hidden_dim, 1),
            wr: w("gru.wr", hidden_dim, input_dim, &mut rng),
            ur: w("gru.ur", hidden_dim, hidden_dim, &mut rng),
            br: Parameter::zeros("gru.br", hidden_dim, 1),
            wn: w("gru.wn", hidden_dim, input_dim, &mut rng),
            un: w("gru.un", hidden_dim, hidden_dim, &mut rng),
            bn: Parameter::zeros("gru.bn", hidden_dim, 1),
            w_pi: w("head.w_pi", action_dim, hidden_dim, &mut rng),
            b_pi: Parameter::zeros("head.b_pi", action_dim, 1),
            w_v: w("head.w_v", 1, hidden_dim, &mut rng),
            b_v: Parameter::zeros("head.b_v", 1, 1),
        }
    }

    pub fn h0(&self) -> Vec<S> {
        vec![S::zero(); self.hidden_dim]
    }

    /// One GRU step with input validation; use [`Self::forward_step`] in hot
    /// loops where inputs are trusted.
    pub fn gru_step(&self, h: &[S], x: &[S]) -> Result<Vec<S>> {
        if h.iter().chain(x.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("gru_step input".into()));
        }
        if h.len() != self.hidden_dim {
            return Err(Error::DimensionMismatch {
                expected: self.hidden_dim,
                got: h.len(),
            });
        }
        if x.len() != self.input_dim {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim,
                got: x.len(),
            });
        }
        Ok(self.forward_step(h, x).0)
    }

    /// h' = (1 - z) * n + z * h with
    /// z = sigma(Wz x + Uz h + bz), r = sigma(Wr x + Ur h + br),
    /// n = tanh(Wn x + r * (Un h) + bn)
    pub fn forward_step(&self, h: &[S], x: &[S]) -> (Vec<S>, GruCache<S>) {
        let hd = self.hidden_dim;
        let mut z = vec![S::zero(); hd];
        let mut tmp = vec![S::zero(); hd];
        matvec(&self.wz, x, &mut z);
        matvec(&self.uz, h, &mut tmp);
        for i in 0..hd {
            z[i] = sigmoid(z[i] + tmp[i] + self.bz.values[i]);
        }
        let mut r = vec![S::zero(); hd];
        matvec(&self.wr, x, &mut r);
        matvec(&self.ur, h, &mut tmp);
        for i in 0..hd {
            r[i] = sigmoid(r[i] + tmp[i] + self.br.values[i]);
        }
        let mut un_h = vec![S::zero(); hd];
        matvec(&self.un, h, &mut un_h);
        let mut n = vec![S::zero(); hd];
        matvec(&self.wn, x, &mut n);
        for i in 0..hd {
            n[i] = (n[i] + r[i] * un_h[i] + self.bn.values[i]).tanh();
        }
        let mut h_new = vec![S::zero(); hd];
        for i in 0..hd {
            h_new[i] = (S::one() - z[i]) * n[i] + z[i] * h[i];
        }
        let cache = GruCache {
            x: x.to_vec(),
            h_prev: h.to_vec(),
            z,
            r,
            n,
            un_h,
        };
        (h_new, cache)
    }

    /// Accumulates parameter gradients for one step given dL/dh_new and
    /// returns (dL/dh_prev, dL/dx).
    pub fn backward_step(&mut self, cache: &GruCache<S>, d_h_new: &[S]) -> (Vec<S>, Vec<S>) {
        let hd = self.hidden_dim;
        let mut d_h_prev = vec![S::zero(); hd];
        let mut d_x = vec![S::zero(); self.input_dim];
        let mut d_zpre = vec![S::zero(); hd];
        let mut d_npre = vec![S::zero(); hd];
        let mut d_rpre = vec![S::zero(); hd];
        let mut d_unh = vec![S::zero(); hd];
        for i in 0..hd {
            let z = cache.z[i];
            let n = cache.n[i];
            let h = cache.h_prev[i];
            let d = d_h_new[i];
            // h' = (1-z) n + z h
            let dz = d * (h - n);
            let dn = d * (S::one() - z);
            d_h_prev[i] += d * z;
            d_zpre[i] = dz * z * (S::one() - z);
            d_npre[i] = dn * (S::one() - n * n);
            let dr = d_npre[i] * cache.un_h[i];
            d_unh[i] = d_npre[i] * cache.r[i];
            d_rpre[i] = dr * cache.r[i] * (S::one() - cache.r[i]);
        }
        // candidate branch
        outer_acc(&mut self.wn, &d_npre, &cache.x);
        for i in 0..hd {
            self.bn.grad[i] += d_npre[i];
        }
        outer_acc(&mut self.un, &d_unh, &cache.h_prev);
        matvec_t_acc(&self.un, &d_unh, &mut d_h_prev);
        matvec_t_acc(&self.wn, &d_npre, &mut d_x);
        // reset gate
        outer_acc(&mut self.wr, &d_rpre, &cache.x);
        outer_acc(&mut self.ur, &d_rpre, &cache.h_prev);
        for i in 0..hd {
            self.br.grad[i] += d_rpre[i];
        }
        matvec_t_acc(&self.ur, &d_rpre, &mut d_h_prev);
        matvec_t_acc(&self.wr, &d_rpre, &mut d_x);
        // update gate
        outer_acc(&mut self.wz, &d_zpre, &cache.x);
        outer_acc(&mut self.uz, &d_zpre, &cache.h_prev);
        for i in 0..hd {
            self.bz.grad[i] += d_zpre[i];
        }
        matvec_t_acc(&self.uz, &d_zpre, &mut d_h_prev);
        matvec_t_acc(&self.wz, &d_zpre, &mut d_x);
        (d_h_prev, d_x)
    }

    /// Policy logits and state value for a hidden state.
    pub fn heads(&self, h: &[S]) -> (Vec<S>, S) {
        let mut logits = vec![S::zero(); self.action_dim];
        matvec(&self.w_pi, h, &mut logits);
        for (l, b) in logits.iter_mut().zip(&self.b_pi.values) {
            *l += *b;
        }
        let mut v = vec![S::zero(); 1];
        matvec(&self.w_v, h, &mut v);
        (logits, v[0] + self.b_v.values[0])
    }

    /// Accumulates head gradients and adds the hidden-state gradient into
    /// `d_h`.
    pub fn heads_backward(&mut self, h: &[S], d_logits: &[S], d_value: S, d_h: &mut [S]) {
        outer_acc(&mut self.w_pi, d_logits, h);
        for (g, d) in self.b_pi.grad.iter_mut().zip(d_logits) {
            *g += *d;
        }
        matvec_t_acc(&self.w_pi, d_logits, d_h);
        let dv = [d_value];
        outer_acc(&mut self.w_v, &dv, h);
        self.b_v.grad[0] += d_value;
        matvec_t_acc(&self.w_v, &dv, d_h);
    }

    /// Greedy action index: argmax over logits.
    pub fn greedy_action(&self, h: &[S]) -> usize {
        let (logits, _) = self.heads(h);
        argmax(&logits)
    }
}

pub fn argmax<S: Scalar>(v: &[S]) -> usize {
    let mut best = 0;
    for i in 1..v.len() {
        if v[i] > v[best] {
            best = i;
        }
    }
    best
}

/// Numerically stable softmax.
pub fn softmax<S: Scalar>(logits: &[S]) -> Vec<S> {
    let max = logits.iter().fold(S::neg_infinity(), |a, &b| a.max(b));
    let exps: Vec<S> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: S = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

impl<S: Scalar> Net<S> for GruPolicy<S> {
    fn parameters(&self) -> Vec<&Parameter<S>> {
        vec![
            &self.wz, &self.uz, &self.bz, &self.wr, &self.ur, &self.br, &self.wn, &self.un,
            &self.bn, &self.w_pi, &self.b_pi, &self.w_v, &self.b_v,
        ]
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter<S>> {
        vec![
            &mut self.wz,
            &mut self.uz,
            &mut self.bz,
            &mut self.wr,
            &mut self.ur,
            &mut self.br,
            &mut self.wn,
            &mut self.un,
            &mut self.bn,
            &mut self.w_pi,
            &mut self.b_pi,
            &mut self.w_v,
            &mut self.b_v,
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::grad_check;
    use rand::Rng;

    fn small_policy(seed: u64) -> GruPolicy<f64> {
        GruPolicy::with_dims(5, 8, 4, seed)
    }

    #[test]
    fn zero_parameters_halve_hidden_state() {
        let mut p = small_policy(1);
        for param in p.parameters_mut() {
            param.values.iter_mut().for_each(|v| *v = 0.0);
        }
        let h: Vec<f64> = vec![0.6, -0.4, 0.2, 0.0, 0.8, -0.8, 0.1, -0.1];
        let x = vec![1.0; 5];
        let h_new = p.gru_step(&h, &x).unwrap();
        for (a, b) in h_new.iter().zip(&h) {
            assert!((a - b / 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn hidden_state_stays_in_open_unit_ball() {
        let p = GruPolicy::<f64>::new(3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut h = p.h0();
        for _ in 0..50 {
            let x: Vec<f64> = (0..p.input_dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            h = p.gru_step(&h, &x).unwrap();
            assert!(h.iter().all(|v| v.abs() < 1.0));
        }
    }

    #[test]
    fn gru_step_rejects_non_finite() {
        let p = small_policy(1);
        let mut x = vec![0.0; 5];
        x[2] = f64::NAN;
        assert!(p.gru_step(&p.h0(), &x).is_err());
    }

    #[test]
    fn zero_heads_give_uniform_distribution_and_zero_value() {
        let mut p = small_policy(2);
        p.w_pi.values.iter_mut().for_each(|v| *v = 0.0);
        p.b_pi.values.iter_mut().for_each(|v| *v = 0.0);
        p.w_v.values.iter_mut().for_each(|v| *v = 0.0);
        p.b_v.values.iter_mut().for_each(|v| *v = 0.0);
        let h: Vec<f64> = (0..8).map(|i| (i as f64) / 10.0).collect();
        let (logits, value) = p.heads(&h);
        let probs = softmax(&logits);
        for pr in &probs {
            assert!((pr - 0.25).abs() < 1e-12);
        }
        assert_eq!(value, 0.0);
    }

    #[test]
    fn softmax_sums_to_one() {
        let probs = softmax(&[1.0, -2.0, 0.3, 4.0, 0.0, -1.0, 2.0]);
        let s: f64 = probs.iter().sum();
        assert!((s - 1.0).abs() < 1e-9);
    }

    /// Two-step rollout loss: sum of h2 entries plus logit/value terms,
    /// checked against central finite differences.
    #[test]
    fn two_step_bptt_matches_finite_differences() {
        let mut p = small_policy(7);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x1: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x2: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
        let loss = move |net: &mut GruPolicy<f64>, with_grad: bool| {
            let h0 = net.h0();
            let (h1, c1) = net.forward_step(&h0, &x1);
            let (h2, c2) = net.forward_step(&h1, &x2);
            let (logits, value) = net.heads(&h2);
            let probs = softmax(&logits);
            // loss = -log p[1] + value^2 + sum(h2)
            let loss = -probs[1].ln() + value * value + h2.iter().sum::<f64>();
            if with_grad {
                net.zero_grads();
                let mut d_logits = probs.clone();
                d_logits[1] -= 1.0; // d(-log p_a)/dlogits = p - onehot
                let d_value = 2.0 * value;
                let mut d_h2 = vec![1.0; net.hidden_dim];
                net.heads_backward(&h2, &d_logits, d_value, &mut d_h2);
                let (d_h1, _) = net.backward_step(&c2, &d_h2);
                let _ = net.backward_step(&c1, &d_h1);
            }
            loss
        };
        let report = grad_check(&mut p, loss, 1e-5, 24, 99);
        assert!(report.max_rel_err < 1e-4, "{report:?}");
    }
}
