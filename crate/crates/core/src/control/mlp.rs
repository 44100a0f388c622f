//! Fully connected network with manual reverse mode.

use std::cell::RefCell;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    /// `x · sigmoid(x)`.
    #[default]
    Silu,
    Tanh,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> (f64, f64) {
        match self {
            Activation::Silu => {
                let s = 1.0 / (1.0 + (-z).exp());
                (z * s, s * (1.0 + z * (1.0 - s)))
            }
            Activation::Tanh => {
                let a = z.tanh();
                (a, 1.0 - a * a)
            }
        }
    }
}

/// Multilayer perceptron; every hidden layer is followed by the activation, the
/// output layer is affine. Weights are row-major `[out][in]` followed by the bias.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub widths: Vec<usize>,
    pub activation: Activation,
    pub params: Vec<f64>,
}

#[derive(Default)]
struct Tape {
    /// Post-activation values per layer, input first.
    acts: Vec<f64>,
    /// Activation derivatives per hidden layer.
    slopes: Vec<f64>,
    delta: Vec<f64>,
    next: Vec<f64>,
}

thread_local! {
    static TAPE: RefCell<Tape> = RefCell::new(Tape::default());
}

impl Mlp {
    pub fn num_params_for(widths: &[usize]) -> usize {
        widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    /// Uniform `±1/√fan_in` initialisation with a zero output layer.
    pub fn new(widths: Vec<usize>, activation: Activation, seed: u64) -> Self {
        assert!(widths.len() >= 2, "need at least input and output widths");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::with_capacity(Self::num_params_for(&widths));
        let last = widths.len() - 2;
        for (l, w) in widths.windows(2).enumerate() {
            let bound = 1.0 / (w[0] as f64).sqrt();
            for _ in 0..w[0] * w[1] + w[1] {
                params.push(if l == last { 0.0 } else { rng.random_range(-bound..bound) });
            }
        }
        Mlp { widths, activation, params }
    }

    /// Same as [`Mlp::new`] but the output layer is also random, scaled by `out_scale`.
    pub fn new_random(widths: Vec<usize>, activation: Activation, seed: u64, out_scale: f64) -> Self {
        let mut m = Self::new(widths, activation, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
        let n = m.widths.len();
        let (fan_in, fan_out) = (m.widths[n - 2], m.widths[n - 1]);
        let start = m.params.len() - (fan_in * fan_out + fan_out);
        let bound = out_scale / (fan_in as f64).sqrt();
        for p in &mut m.params[start..] {
            *p = rng.random_range(-bound..bound);
        }
        m
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    fn forward_tape(&self, input: &[f64], tape: &mut Tape, out: &mut [f64]) {
        let total: usize = self.widths.iter().sum();
        tape.acts.resize(total, 0.0);
        tape.slopes.resize(total, 0.0);
        tape.acts[..self.widths[0]].copy_from_slice(input);
        let mut off_p = 0;
        let mut off_a = 0;
        let nl = self.widths.len() - 1;
        for l in 0..nl {
            let (n_in, n_out) = (self.widths[l], self.widths[l + 1]);
            let w = &self.params[off_p..off_p + n_in * n_out];
            let b = &self.params[off_p + n_in * n_out..off_p + n_in * n_out + n_out];
            let (prev, rest) = tape.acts.split_at_mut(off_a + n_in);
            let x = &prev[off_a..];
            if l + 1 == nl {
                for j in 0..n_out {
                    out[j] = b[j] + crate::linalg::dot(&w[j * n_in..(j + 1) * n_in], x);
                }
            } else {
                let slopes = &mut tape.slopes[off_a + n_in..off_a + n_in + n_out];
                for j in 0..n_out {
                    let z = b[j] + crate::linalg::dot(&w[j * n_in..(j + 1) * n_in], x);
                    let (a, s) = self.activation.apply(z);
                    rest[j] = a;
                    slopes[j] = s;
                }
            }
            off_p += n_in * n_out + n_out;
            off_a += n_in;
        }
    }

    /// Reverse pass from the output cotangent stored in `tape.delta`.
    fn backward_tape(&self, tape: &mut Tape, mut param_grad: Option<&mut [f64]>, input_grad: Option<&mut [f64]>) {
        let nl = self.widths.len() - 1;
        let mut off_p = self.params.len();
        let mut off_a: usize = self.widths[..nl].iter().sum();
        for l in (0..nl).rev() {
            let (n_in, n_out) = (self.widths[l], self.widths[l + 1]);
            off_p -= n_in * n_out + n_out;
            off_a -= n_in;
            let w = &self.params[off_p..off_p + n_in * n_out];
            let x = &tape.acts[off_a..off_a + n_in];
            if let Some(g) = param_grad.as_deref_mut() {
                let (gw, gb) = g[off_p..off_p + n_in * n_out + n_out].split_at_mut(n_in * n_out);
                for j in 0..n_out {
                    let dj = tape.delta[j];
                    if dj != 0.0 {
                        crate::linalg::axpy(dj, x, &mut gw[j * n_in..(j + 1) * n_in]);
                        gb[j] += dj;
                    }
                }
            }
            if l == 0 && input_grad.is_none() {
                break;
            }
            tape.next.clear();
            tape.next.resize(n_in, 0.0);
            for j in 0..n_out {
                let dj = tape.delta[j];
                if dj != 0.0 {
                    crate::linalg::axpy(dj, &w[j * n_in..(j + 1) * n_in], &mut tape.next);
                }
            }
            if l > 0 {
                let s = &tape.slopes[off_a..off_a + n_in];
                for (n, &si) in tape.next.iter_mut().zip(s) {
                    *n *= si;
                }
            }
            std::mem::swap(&mut tape.delta, &mut tape.next);
        }
        if let Some(ig) = input_grad {
            ig.copy_from_slice(&tape.delta[..ig.len()]);
        }
    }

    pub fn forward(&self, input: &[f64], out: &mut [f64]) {
        TAPE.with(|t| self.forward_tape(input, &mut t.borrow_mut(), out));
    }

    /// Forward pass, then reverse pass with output cotangent `cot`. Parameter gradients are
    /// accumulated; the input gradient (first `input_grad.len()` inputs) is overwritten.
    pub fn backward(
        &self,
        input: &[f64],
        cot: &[f64],
        param_grad: Option<&mut [f64]>,
        input_grad: Option<&mut [f64]>,
    ) {
        TAPE.with(|t| {
            let tape = &mut *t.borrow_mut();
            let mut buf = std::mem::take(&mut tape.next);
            buf.resize(self.output_dim(), 0.0);
            self.forward_tape(input, tape, &mut buf);
            tape.next = buf;
            tape.delta.clear();
            tape.delta.extend_from_slice(cot);
            self.backward_tape(tape, param_grad, input_grad);
        })
    }

    /// Forward pass, output cotangent computed from the output by `cot_fn`, then reverse pass.
    pub fn forward_backward(
        &self,
        input: &[f64],
        out: &mut [f64],
        cot_fn: &mut dyn FnMut(&[f64], &mut [f64]),
        param_grad: Option<&mut [f64]>,
        input_grad: Option<&mut [f64]>,
    ) {
        TAPE.with(|t| {
            let tape = &mut *t.borrow_mut();
            self.forward_tape(input, tape, out);
            tape.delta.clear();
            tape.delta.resize(out.len(), 0.0);
            cot_fn(out, &mut tape.delta);
            self.backward_tape(tape, param_grad, input_grad);
        })
    }
}
