//! Small fully connected regression networks trained by full-batch Adam.
//!
//! Used by the monotone calibration net (nonnegative weights, sigmoid
//! output) and by the MLP assist-count predictor (free weights, linear
//! output).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Softplus,
    Tanh,
    Relu,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            // Stable for large |z|.
            Activation::Softplus => z.max(0.0) + (-z.abs()).exp().ln_1p(),
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
        }
    }

    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Softplus => sigmoid(z),
            Activation::Tanh => 1.0 - z.tanh().powi(2),
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OutputTransform {
    Linear,
    Sigmoid,
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// One affine layer; `weights[o][i]` connects input `i` to output `o`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
}

impl Dense {
    fn zeros(inputs: usize, outputs: usize) -> Self {
        Dense {
            weights: vec![vec![0.0; inputs]; outputs],
            bias: vec![0.0; outputs],
        }
    }

    fn inputs(&self) -> usize {
        self.weights.first().map_or(0, Vec::len)
    }

    fn affine(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend(
            self.weights
                .iter()
                .zip(&self.bias)
                .map(|(row, b)| row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + b),
        );
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Dense>,
    pub activation: Activation,
    pub output: OutputTransform,
}

impl Mlp {
    /// Random initial weights. With `nonnegative`, weights start in
    /// `[0, 1/sqrt(fan_in)]`; otherwise Glorot-uniform.
    pub fn init<R: Rng>(
        inputs: usize,
        hidden: &[usize],
        activation: Activation,
        output: OutputTransform,
        nonnegative: bool,
        rng: &mut R,
    ) -> Self {
        let mut widths = vec![inputs];
        widths.extend_from_slice(hidden);
        widths.push(1);
        let layers = widths
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let mut layer = Dense::zeros(fan_in, fan_out);
                for row in &mut layer.weights {
                    for v in row.iter_mut() {
                        *v = if nonnegative {
                            rng.random::<f64>() / (fan_in as f64).sqrt()
                        } else {
                            let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
                            rng.random_range(-a..a)
                        };
                    }
                }
                layer
            })
            .collect();
        Mlp {
            layers,
            activation,
            output,
        }
    }

    pub fn inputs(&self) -> usize {
        self.layers.first().map_or(0, Dense::inputs)
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        let mut cur = x.to_vec();
        let mut next = Vec::new();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            layer.affine(&cur, &mut next);
            if i < last {
                for v in &mut next {
                    *v = self.activation.apply(*v);
                }
            }
            std::mem::swap(&mut cur, &mut next);
        }
        match self.output {
            OutputTransform::Linear => cur[0],
            OutputTransform::Sigmoid => sigmoid(cur[0]),
        }
    }

    pub fn min_weight(&self) -> f64 {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().flatten())
            .copied()
            .fold(f64::INFINITY, f64::min)
    }

    fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| {
            l.weights.iter().flatten().chain(&l.bias).all(|v| v.is_finite())
        })
    }

    fn project_nonnegative(&mut self) {
        for layer in &mut self.layers {
            for v in layer.weights.iter_mut().flatten() {
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
        }
    }

    /// Mean squared error over a batch.
    pub fn mse(&self, xs: &[Vec<f64>], ys: &[f64]) -> f64 {
        xs.iter()
            .zip(ys)
            .map(|(x, y)| (self.predict(x) - y).powi(2))
            .sum::<f64>()
            / xs.len() as f64
    }

    /// Accumulates d(loss)/d(params) for one sample into `grads`, returns
    /// the squared error.
    fn backprop(&self, x: &[f64], y: f64, scale: f64, grads: &mut [Dense]) -> f64 {
        let n = self.layers.len();
        let mut pre = Vec::with_capacity(n);
        let mut post: Vec<Vec<f64>> = Vec::with_capacity(n + 1);
        post.push(x.to_vec());
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = Vec::new();
            layer.affine(&post[i], &mut z);
            let a = if i + 1 < n {
                z.iter().map(|&v| self.activation.apply(v)).collect()
            } else {
                z.clone()
            };
            pre.push(z);
            post.push(a);
        }
        let g = post[n][0];
        let (out, dout_dg) = match self.output {
            OutputTransform::Linear => (g, 1.0),
            OutputTransform::Sigmoid => {
                let s = sigmoid(g);
                (s, s * (1.0 - s))
            }
        };
        let err = out - y;
        let mut delta = vec![2.0 * err * scale * dout_dg];
        for i in (0..n).rev() {
            let layer = &self.layers[i];
            let grad = &mut grads[i];
            for (o, d) in delta.iter().enumerate() {
                grad.bias[o] += d;
                for (gw, a) in grad.weights[o].iter_mut().zip(&post[i]) {
                    *gw += d * a;
                }
            }
            if i > 0 {
                let mut prev = vec![0.0; layer.inputs()];
                for (o, d) in delta.iter().enumerate() {
                    for (p, w) in prev.iter_mut().zip(&layer.weights[o]) {
                        *p += w * d;
                    }
                }
                for (p, z) in prev.iter_mut().zip(&pre[i - 1]) {
                    *p *= self.activation.derivative(*z);
                }
                delta = prev;
            }
        }
        err * err
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    /// Project every weight onto `[0, inf)` after each step.
    pub nonnegative: bool,
    /// L2 penalty on weights (not biases), added to the gradient.
    pub weight_decay: f64,
}

/// Full-batch Adam on mean squared error. Returns the final training MSE.
pub fn train(net: &mut Mlp, xs: &[Vec<f64>], ys: &[f64], cfg: &TrainConfig) -> Result<f64> {
    if xs.is_empty() || xs.len() != ys.len() {
        return Err(Error::data("training set is empty or misaligned"));
    }
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;
    let shape: Vec<Dense> = net
        .layers
        .iter()
        .map(|l| Dense::zeros(l.inputs(), l.bias.len()))
        .collect();
    let mut m = shape.clone();
    let mut v = shape.clone();
    let scale = 1.0 / xs.len() as f64;
    if cfg.nonnegative {
        net.project_nonnegative();
    }
    for epoch in 0..cfg.epochs {
        let mut grads = shape.clone();
        let mut loss = 0.0;
        for (x, &y) in xs.iter().zip(ys) {
            loss += net.backprop(x, y, scale, &mut grads);
        }
        loss *= scale;
        if cfg.weight_decay > 0.0 {
            for (g, l) in grads.iter_mut().zip(&net.layers) {
                for (gw, w) in g.weights.iter_mut().flatten().zip(l.weights.iter().flatten()) {
                    *gw += 2.0 * cfg.weight_decay * w;
                }
            }
        }
        if !loss.is_finite() {
            return Err(Error::Diverged { epoch });
        }
        let t = (epoch + 1) as i32;
        let c1 = 1.0 - B1.powi(t);
        let c2 = 1.0 - B2.powi(t);
        for ((layer, g), (ml, vl)) in net
            .layers
            .iter_mut()
            .zip(&grads)
            .zip(m.iter_mut().zip(v.iter_mut()))
        {
            let params = layer.weights.iter_mut().flatten().chain(layer.bias.iter_mut());
            let gs = g.weights.iter().flatten().chain(g.bias.iter());
            let ms = ml.weights.iter_mut().flatten().chain(ml.bias.iter_mut());
            let vs = vl.weights.iter_mut().flatten().chain(vl.bias.iter_mut());
            for (((p, g), m), v) in params.zip(gs).zip(ms).zip(vs) {
                *m = B1 * *m + (1.0 - B1) * g;
                *v = B2 * *v + (1.0 - B2) * g * g;
                *p -= cfg.learning_rate * (*m / c1) / ((*v / c2).sqrt() + EPS);
            }
        }
        if cfg.nonnegative {
            net.project_nonnegative();
        }
        if !net.is_finite() {
            return Err(Error::Diverged { epoch });
        }
    }
    let final_loss = net.mse(xs, ys);
    if !final_loss.is_finite() {
        return Err(Error::Diverged { epoch: cfg.epochs });
    }
    Ok(final_loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central-difference check of the analytic gradient.
    #[test]
    fn gradient_matches_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (act, out) in [
            (Activation::Softplus, OutputTransform::Sigmoid),
            (Activation::Tanh, OutputTransform::Linear),
        ] {
            let net = Mlp::init(3, &[4, 3], act, out, false, &mut rng);
            let x = vec![0.3, -0.7, 1.1];
            let y = 0.4;
            let mut grads: Vec<Dense> = net
                .layers
                .iter()
                .map(|l| Dense::zeros(l.inputs(), l.bias.len()))
                .collect();
            net.backprop(&x, y, 1.0, &mut grads);
            let h = 1e-6;
            for li in 0..net.layers.len() {
                for o in 0..net.layers[li].bias.len() {
                    for i in 0..net.layers[li].inputs() {
                        let mut plus = net.clone();
                        plus.layers[li].weights[o][i] += h;
                        let mut minus = net.clone();
                        minus.layers[li].weights[o][i] -= h;
                        let fd = ((plus.predict(&x) - y).powi(2) - (minus.predict(&x) - y).powi(2))
                            / (2.0 * h);
                        assert!((fd - grads[li].weights[o][i]).abs() < 1e-6);
                    }
                }
            }
        }
    }

    #[test]
    fn fits_a_line() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut net = Mlp::init(1, &[8], Activation::Tanh, OutputTransform::Linear, false, &mut rng);
        let xs: Vec<Vec<f64>> = (0..20).map(|i| vec![i as f64 / 20.0]).collect();
        let ys: Vec<f64> = xs.iter().map(|x| 2.0 * x[0] - 0.5).collect();
        let cfg = TrainConfig {
            epochs: 1500,
            learning_rate: 0.02,
            nonnegative: false,
            weight_decay: 0.0,
        };
        let loss = train(&mut net, &xs, &ys, &cfg).unwrap();
        assert!(loss < 1e-3, "{loss}");
    }
}
