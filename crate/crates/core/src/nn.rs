//! Small dense networks with hand-written reverse mode, and Adam.
//!
//! Parameters of an [`Mlp`] live in one flat buffer so that the optimizer,
//! the checkpoint writer and the gradient checks can all treat a network as
//! a plain slice. Layer `l` stores its `out × in` weights row-major followed
//! by its `out` biases.

use rand::Rng;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
    Tanh,
    Linear,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Sigmoid => crate::geometry::sigmoid(x),
            Activation::Tanh => x.tanh(),
            Activation::Linear => x,
        }
    }

    /// Derivative expressed through the pre-activation `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Tanh => 1.0 - y * y,
            Activation::Linear => 1.0,
        }
    }

    pub fn tag(self) -> u8 {
        match self {
            Activation::Relu => 0,
            Activation::Sigmoid => 1,
            Activation::Tanh => 2,
            Activation::Linear => 3,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        Some(match tag {
            0 => Activation::Relu,
            1 => Activation::Sigmoid,
            2 => Activation::Tanh,
            3 => Activation::Linear,
            _ => return None,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerShape {
    pub input: usize,
    pub output: usize,
    pub activation: Activation,
}

impl LayerShape {
    fn param_len(&self) -> usize {
        self.input * self.output + self.output
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    layers: Vec<LayerShape>,
    offsets: Vec<usize>,
    params: Vec<f64>,
}

/// Activations recorded by [`Mlp::forward`].
#[derive(Clone, Debug)]
pub struct Tape {
    /// `inputs[l]` is the input of layer `l`; the last entry is the output.
    inputs: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
}

impl Tape {
    pub fn output(&self) -> &[f64] {
        self.inputs.last().expect("tape is never empty")
    }
}

impl Mlp {
    /// Zero-initialized network with the given layer stack.
    pub fn from_layers(layers: Vec<LayerShape>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("network needs at least one layer".into()));
        }
        for pair in layers.windows(2) {
            if pair[0].output != pair[1].input {
                return Err(Error::Config(format!(
                    "layer widths {} -> {} do not chain",
                    pair[0].output, pair[1].input
                )));
            }
        }
        let mut offsets = Vec::with_capacity(layers.len());
        let mut total = 0;
        for l in &layers {
            offsets.push(total);
            total += l.param_len();
        }
        Ok(Mlp {
            layers,
            offsets,
            params: vec![0.0; total],
        })
    }

    /// `widths = [in, h1, ..., out]`, `hidden` between every pair except the
    /// last, `head` on the output layer.
    pub fn zeros(widths: &[usize], hidden: Activation, head: Activation) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::Config("network needs an input and an output width".into()));
        }
        let n = widths.len() - 1;
        let layers = (0..n)
            .map(|i| LayerShape {
                input: widths[i],
                output: widths[i + 1],
                activation: if i + 1 == n { head } else { hidden },
            })
            .collect();
        Self::from_layers(layers)
    }

    /// Kaiming-uniform weights for ReLU layers, Xavier-uniform otherwise; zero biases.
    pub fn new(widths: &[usize], hidden: Activation, head: Activation, rng: &mut impl Rng) -> Result<Self> {
        let mut m = Self::zeros(widths, hidden, head)?;
        m.reinitialize(rng);
        Ok(m)
    }

    pub fn reinitialize(&mut self, rng: &mut impl Rng) {
        for (l, shape) in self.layers.iter().enumerate() {
            let bound = match shape.activation {
                Activation::Relu => (6.0 / shape.input as f64).sqrt(),
                _ => (6.0 / (shape.input + shape.output) as f64).sqrt(),
            };
            let start = self.offsets[l];
            let nw = shape.input * shape.output;
            for w in &mut self.params[start..start + nw] {
                *w = rng.random_range(-bound..bound);
            }
            for b in &mut self.params[start + nw..start + shape.param_len()] {
                *b = 0.0;
            }
        }
    }

    pub fn layers(&self) -> &[LayerShape] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().output
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn set_params(&mut self, params: Vec<f64>) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::Config(format!(
                "expected {} parameters, got {}",
                self.params.len(),
                params.len()
            )));
        }
        self.params = params;
        Ok(())
    }

    pub fn param_len(&self) -> usize {
        self.params.len()
    }

    /// Weight block of layer `l`, row-major `out × in`.
    pub fn weights_mut(&mut self, l: usize) -> &mut [f64] {
        let s = self.layers[l];
        let o = self.offsets[l];
        &mut self.params[o..o + s.input * s.output]
    }

    pub fn bias_mut(&mut self, l: usize) -> &mut [f64] {
        let s = self.layers[l];
        let o = self.offsets[l] + s.input * s.output;
        &mut self.params[o..o + s.output]
    }

    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, Tape)> {
        if x.len() != self.input_dim() {
            return Err(Error::Config(format!(
                "network expects {} inputs, got {}",
                self.input_dim(),
                x.len()
            )));
        }
        let mut inputs = Vec::with_capacity(self.layers.len() + 1);
        let mut pre = Vec::with_capacity(self.layers.len());
        inputs.push(x.to_vec());
        for (l, shape) in self.layers.iter().enumerate() {
            let o = self.offsets[l];
            let w = &self.params[o..o + shape.input * shape.output];
            let b = &self.params[o + shape.input * shape.output..o + shape.param_len()];
            let input = inputs.last().unwrap();
            let mut z = b.to_vec();
            for (r, zr) in z.iter_mut().enumerate() {
                let row = &w[r * shape.input..(r + 1) * shape.input];
                *zr += row.iter().zip(input).map(|(a, b)| a * b).sum::<f64>();
            }
            let y: Vec<f64> = z.iter().map(|&v| shape.activation.apply(v)).collect();
            pre.push(z);
            inputs.push(y);
        }
        let y = inputs.last().unwrap().clone();
        Ok((y, Tape { inputs, pre }))
    }

    /// Reverse pass: accumulates parameter gradients into `grads` (same
    /// layout as [`Mlp::params`]) and returns `dL/dx`.
    pub fn backward(&self, tape: &Tape, dy: &[f64], grads: &mut [f64]) -> Vec<f64> {
        assert_eq!(grads.len(), self.params.len());
        assert_eq!(dy.len(), self.output_dim());
        let mut delta = dy.to_vec();
        for l in (0..self.layers.len()).rev() {
            let shape = self.layers[l];
            let o = self.offsets[l];
            let nw = shape.input * shape.output;
            let input = &tape.inputs[l];
            let out = &tape.inputs[l + 1];
            let z = &tape.pre[l];
            for r in 0..shape.output {
                delta[r] *= shape.activation.derivative(z[r], out[r]);
            }
            let (gw, gb) = grads[o..o + shape.param_len()].split_at_mut(nw);
            let w = &self.params[o..o + nw];
            let mut dx = vec![0.0; shape.input];
            for r in 0..shape.output {
                let d = delta[r];
                if d == 0.0 {
                    continue;
                }
                gb[r] += d;
                let grow = &mut gw[r * shape.input..(r + 1) * shape.input];
                let wrow = &w[r * shape.input..(r + 1) * shape.input];
                for c in 0..shape.input {
                    grow[c] += d * input[c];
                    dx[c] += d * wrow[c];
                }
            }
            delta = dx;
        }
        delta
    }
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-15;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step_count: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState {
            first_moment: vec![0.0; len],
            second_moment: vec![0.0; len],
            step_count: 0,
        }
    }
}

/// One bias-corrected Adam update with a single learning rate.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, lr: f64) {
    assert_eq!(params.len(), grads.len());
    assert_eq!(params.len(), state.first_moment.len());
    state.step_count += 1;
    let (c1, c2) = bias_corrections(state.step_count);
    for i in 0..params.len() {
        adam_update(
            &mut params[i],
            grads[i],
            &mut state.first_moment[i],
            &mut state.second_moment[i],
            lr,
            c1,
            c2,
        );
    }
}

/// `(1 - β1^t, 1 - β2^t)`.
pub fn bias_corrections(step: u64) -> (f64, f64) {
    let t = step as i32;
    (1.0 - ADAM_BETA1.powi(t), 1.0 - ADAM_BETA2.powi(t))
}

/// Element-wise Adam kernel, for callers that carry per-element learning rates.
#[inline]
pub fn adam_update(p: &mut f64, g: f64, m: &mut f64, v: &mut f64, lr: f64, c1: f64, c2: f64) {
    *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
    *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
    let m_hat = *m / c1;
    let v_hat = *v / c2;
    *p -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_net(seed: u64) -> Mlp {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = Mlp::zeros(&[5, 7, 6, 3], Activation::Tanh, Activation::Sigmoid).unwrap();
        // Mixed activations exercise every derivative branch.
        m.layers[1].activation = Activation::Relu;
        m.reinitialize(&mut rng);
        for p in m.params_mut() {
            *p += rng.random_range(-0.1..0.1);
        }
        m
    }

    /// Straight-line evaluation that mirrors nothing from `forward` except the maths.
    fn reeval(m: &Mlp, x: &[f64]) -> Vec<f64> {
        let mut cur = x.to_vec();
        let mut off = 0;
        for s in m.layers() {
            let mut next = Vec::new();
            for r in 0..s.output {
                let mut acc = m.params()[off + s.input * s.output + r];
                for c in 0..s.input {
                    acc += m.params()[off + r * s.input + c] * cur[c];
                }
                next.push(match s.activation {
                    Activation::Relu => if acc > 0.0 { acc } else { 0.0 },
                    Activation::Sigmoid => 1.0 / (1.0 + (-acc).exp()),
                    Activation::Tanh => acc.tanh(),
                    Activation::Linear => acc,
                });
            }
            off += s.input * s.output + s.output;
            cur = next;
        }
        cur
    }

    #[test]
    fn zero_weights_return_bias() {
        let mut m = Mlp::zeros(&[3, 2], Activation::Relu, Activation::Linear).unwrap();
        m.bias_mut(0).copy_from_slice(&[0.25, -4.0]);
        assert_eq!(m.forward(&[1.0, 2.0, 3.0]).unwrap().0, vec![0.25, -4.0]);
    }

    #[test]
    fn identity_layer() {
        let mut m = Mlp::zeros(&[3, 3], Activation::Relu, Activation::Linear).unwrap();
        let w = m.weights_mut(0);
        w[0] = 1.0;
        w[4] = 1.0;
        w[8] = 1.0;
        assert_eq!(m.forward(&[1.0, -2.0, 3.5]).unwrap().0, vec![1.0, -2.0, 3.5]);
    }

    #[test]
    fn forward_matches_reevaluation() {
        let m = random_net(1);
        let x = [0.3, -0.7, 1.1, 0.0, -0.2];
        let (y, _) = m.forward(&x).unwrap();
        for (a, b) in y.iter().zip(reeval(&m, &x)) {
            assert!((a - b).abs() < 1e-7);
        }
    }

    #[test]
    fn dimension_mismatch_is_config_error() {
        let m = random_net(1);
        assert!(matches!(m.forward(&[1.0]), Err(Error::Config(_))));
        let bad = Mlp::from_layers(vec![
            LayerShape { input: 2, output: 3, activation: Activation::Relu },
            LayerShape { input: 4, output: 1, activation: Activation::Linear },
        ]);
        assert!(bad.is_err());
    }

    #[test]
    fn linear_backward_is_transpose() {
        let mut m = Mlp::zeros(&[3, 2], Activation::Relu, Activation::Linear).unwrap();
        m.weights_mut(0).copy_from_slice(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let (_, tape) = m.forward(&[0.1, 0.2, 0.3]).unwrap();
        let mut g = vec![0.0; m.param_len()];
        let dx = m.backward(&tape, &[1.0, -1.0], &mut g);
        assert_eq!(dx, vec![1.0 - 4.0, 2.0 - 5.0, 3.0 - 6.0]);
    }

    #[test]
    fn sigmoid_head_local_gradient() {
        let mut m = Mlp::zeros(&[1, 1], Activation::Relu, Activation::Sigmoid).unwrap();
        m.weights_mut(0)[0] = 1.0;
        let (y, tape) = m.forward(&[0.4]).unwrap();
        let mut g = vec![0.0; m.param_len()];
        let dx = m.backward(&tape, &[1.0], &mut g);
        assert!((dx[0] - y[0] * (1.0 - y[0])).abs() < 1e-15);
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        let m = random_net(7);
        let x = [0.3, -0.7, 1.1, 0.5, -0.2];
        let dy = [0.5, -1.0, 0.25];
        let loss = |m: &Mlp| -> f64 {
            m.forward(&x).unwrap().0.iter().zip(&dy).map(|(a, b)| a * b).sum()
        };
        let (_, tape) = m.forward(&x).unwrap();
        let mut g = vec![0.0; m.param_len()];
        m.backward(&tape, &dy, &mut g);
        let h = 1e-4;
        for i in 0..m.param_len() {
            let mut p = m.clone();
            p.params_mut()[i] += h;
            let mut q = m.clone();
            q.params_mut()[i] -= h;
            let fd = (loss(&p) - loss(&q)) / (2.0 * h);
            let err = (fd - g[i]).abs() / fd.abs().max(g[i].abs()).max(1e-6);
            assert!(err < 1e-4, "param {i}: {} vs {fd}", g[i]);
        }
    }

    #[test]
    fn directional_derivative_in_input() {
        let m = random_net(9);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..20 {
            let x: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
            let u: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
            let f = |x: &[f64]| m.forward(x).unwrap().0.iter().sum::<f64>();
            let (_, tape) = m.forward(&x).unwrap();
            let mut g = vec![0.0; m.param_len()];
            let dx = m.backward(&tape, &[1.0; 3], &mut g);
            let h = 1e-4;
            let xp: Vec<f64> = x.iter().zip(&u).map(|(a, b)| a + h * b).collect();
            let xm: Vec<f64> = x.iter().zip(&u).map(|(a, b)| a - h * b).collect();
            let fd = (f(&xp) - f(&xm)) / (2.0 * h);
            let an: f64 = dx.iter().zip(&u).map(|(a, b)| a * b).sum();
            assert!((fd - an).abs() / fd.abs().max(an.abs()).max(1e-6) < 1e-4);
        }
    }

    #[test]
    fn seeded_init_is_bit_identical() {
        let a = Mlp::new(&[4, 8, 2], Activation::Relu, Activation::Linear, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b = Mlp::new(&[4, 8, 2], Activation::Relu, Activation::Linear, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn adam_zero_gradient_is_noop() {
        let mut p = vec![1.0, -2.0];
        let mut s = AdamState::new(2);
        adam_step(&mut p, &[0.0, 0.0], &mut s, 0.1);
        assert_eq!(p, vec![1.0, -2.0]);
        assert_eq!(s.step_count, 1);
    }

    #[test]
    fn adam_first_step_is_signed_lr() {
        let mut p = vec![0.0, 0.0];
        let mut s = AdamState::new(2);
        adam_step(&mut p, &[3.0, -0.02], &mut s, 0.01);
        assert!((p[0] + 0.01).abs() < 1e-12);
        assert!((p[1] - 0.01).abs() < 1e-12);
    }

    #[test]
    fn adam_converges_on_quadratic() {
        let target = 1.5;
        let mut p = vec![0.0];
        let mut s = AdamState::new(1);
        for _ in 0..100 {
            let g = 2.0 * (p[0] - target);
            // Decaying step so the last iterates settle inside the tolerance.
            let lr = 0.5 * 0.96f64.powi(s.step_count as i32);
            adam_step(&mut p, &[g], &mut s, lr);
        }
        assert!((p[0] - target).abs() < 1e-3, "{}", p[0]);
    }
}
