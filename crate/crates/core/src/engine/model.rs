//! Small tanh MLP regression task used to exercise the training step.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{ensure, Result};

/// Layer widths of a dense network, input first. Hidden layers use `tanh`,
/// the output layer is linear. Parameters are laid out layer by layer as a
/// row-major `out x in` weight matrix followed by the bias.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelShape {
    dims: Vec<usize>,
}

#[derive(Debug, Clone, Copy)]
struct Layer {
    weights: usize,
    bias: usize,
    fan_in: usize,
    fan_out: usize,
}

impl ModelShape {
    pub fn new(dims: Vec<usize>) -> Result<Self> {
        ensure!(dims.len() >= 2, Config, "a model needs at least one layer");
        ensure!(dims.iter().all(|&d| d > 0), Config, "layer widths must be > 0");
        Ok(ModelShape { dims })
    }

    /// Four dense layers of width 64.
    pub fn toy() -> Self {
        ModelShape {
            dims: vec![16, 64, 64, 64, 4],
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn param_count(&self) -> usize {
        self.dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    fn layers(&self) -> Vec<Layer> {
        let mut off = 0;
        self.dims
            .windows(2)
            .map(|w| {
                let l = Layer {
                    weights: off,
                    bias: off + w[0] * w[1],
                    fan_in: w[0],
                    fan_out: w[1],
                };
                off += w[0] * w[1] + w[1];
                l
            })
            .collect()
    }

    /// Gaussian weights with variance `1 / fan_in`, zero biases.
    pub fn init(&self, rng: &mut impl Rng) -> Vec<f64> {
        let mut p = vec![0.0; self.param_count()];
        for l in self.layers() {
            let sd = (l.fan_in as f64).sqrt().recip();
            for w in &mut p[l.weights..l.bias] {
                *w = sd * rng.sample::<f64, _>(StandardNormal);
            }
        }
        p
    }

    /// Activations of every layer for `rows` inputs, input included.
    pub fn forward(&self, params: &[f64], x: &[f64], rows: usize) -> Vec<Vec<f64>> {
        let layers = self.layers();
        let mut acts = Vec::with_capacity(layers.len() + 1);
        acts.push(x.to_vec());
        for (i, l) in layers.iter().enumerate() {
            let input = &acts[i];
            let w = &params[l.weights..l.bias];
            let b = &params[l.bias..l.bias + l.fan_out];
            let mut out = vec![0.0; rows * l.fan_out];
            for r in 0..rows {
                let xi = &input[r * l.fan_in..(r + 1) * l.fan_in];
                for o in 0..l.fan_out {
                    let row = &w[o * l.fan_in..(o + 1) * l.fan_in];
                    let z = b[o] + row.iter().zip(xi).map(|(a, b)| a * b).sum::<f64>();
                    out[r * l.fan_out + o] = if i + 1 < layers.len() { z.tanh() } else { z };
                }
            }
            acts.push(out);
        }
        acts
    }

    /// Mean squared error over all outputs.
    pub fn loss(&self, params: &[f64], x: &[f64], y: &[f64], rows: usize) -> f64 {
        let acts = self.forward(params, x, rows);
        mse(acts.last().unwrap(), y)
    }

    /// Gradient of the mean squared error given forward activations. `params`
    /// are the weights used to propagate errors backwards, which may be a
    /// separately gathered copy of the forward weights.
    pub fn backward(&self, params: &[f64], acts: &[Vec<f64>], y: &[f64], rows: usize) -> Vec<f64> {
        let layers = self.layers();
        let mut grad = vec![0.0; self.param_count()];
        let pred = acts.last().unwrap();
        let n = pred.len() as f64;
        let mut delta: Vec<f64> = pred.iter().zip(y).map(|(p, t)| 2.0 * (p - t) / n).collect();
        for (i, l) in layers.iter().enumerate().rev() {
            let input = &acts[i];
            for r in 0..rows {
                let d = &delta[r * l.fan_out..(r + 1) * l.fan_out];
                let xi = &input[r * l.fan_in..(r + 1) * l.fan_in];
                for (o, &dv) in d.iter().enumerate() {
                    grad[l.bias + o] += dv;
                    let g = &mut grad[l.weights + o * l.fan_in..l.weights + (o + 1) * l.fan_in];
                    g.iter_mut().zip(xi).for_each(|(g, x)| *g += dv * x);
                }
            }
            if i == 0 {
                break;
            }
            let w = &params[l.weights..l.bias];
            let mut prev = vec![0.0; rows * l.fan_in];
            for r in 0..rows {
                let d = &delta[r * l.fan_out..(r + 1) * l.fan_out];
                let p = &mut prev[r * l.fan_in..(r + 1) * l.fan_in];
                for (o, &dv) in d.iter().enumerate() {
                    let row = &w[o * l.fan_in..(o + 1) * l.fan_in];
                    p.iter_mut().zip(row).for_each(|(p, w)| *p += dv * w);
                }
                // tanh' = 1 - tanh^2 on the hidden activation feeding this layer
                for (p, a) in p.iter_mut().zip(&input[r * l.fan_in..(r + 1) * l.fan_in]) {
                    *p *= 1.0 - a * a;
                }
            }
            delta = prev;
        }
        grad
    }

    pub fn loss_and_grad(&self, params: &[f64], x: &[f64], y: &[f64], rows: usize) -> (f64, Vec<f64>) {
        let acts = self.forward(params, x, rows);
        let loss = mse(acts.last().unwrap(), y);
        (loss, self.backward(params, &acts, y, rows))
    }
}

fn mse(pred: &[f64], y: &[f64]) -> f64 {
    pred.iter().zip(y).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / pred.len() as f64
}

/// Rows of inputs and targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub rows: usize,
}

/// Regression onto a randomly initialized teacher network of the same shape
/// plus Gaussian label noise, with a held-out validation split.
#[derive(Debug, Clone)]
pub struct SyntheticTask {
    pub train: Batch,
    pub validation: Batch,
}

impl SyntheticTask {
    pub fn generate(shape: &ModelShape, train_rows: usize, val_rows: usize, noise: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        let teacher = shape.init(&mut rng);
        let mut make = |rows: usize| {
            let x: Vec<f64> = (0..rows * shape.input_dim())
                .map(|_| rng.sample(StandardNormal))
                .collect();
            let clean = shape.forward(&teacher, &x, rows).pop().unwrap();
            let y = clean
                .into_iter()
                .map(|v| v + noise * rng.sample::<f64, _>(StandardNormal))
                .collect();
            Batch { x, y, rows }
        };
        let train = make(train_rows);
        let validation = make(val_rows);
        SyntheticTask { train, validation }
    }

    /// Training rows for `rank` at `step`, walking the training set
    /// cyclically so every step and rank sees a distinct window.
    pub fn batch(&self, step: usize, rank: usize, world: usize, rows: usize) -> Batch {
        let n = self.train.rows;
        let din = self.train.x.len() / n;
        let dout = self.train.y.len() / n;
        let start = (step * world + rank) * rows;
        let mut b = Batch {
            x: Vec::with_capacity(rows * din),
            y: Vec::with_capacity(rows * dout),
            rows,
        };
        for i in 0..rows {
            let r = (start + i) % n;
            b.x.extend_from_slice(&self.train.x[r * din..(r + 1) * din]);
            b.y.extend_from_slice(&self.train.y[r * dout..(r + 1) * dout]);
        }
        b
    }
}

/// Largest relative error between the analytic gradient and central finite
/// differences over `probes` sampled parameters.
pub fn gradient_check(shape: &ModelShape, probes: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = shape.init(&mut rng);
    let params: Vec<f64> = params
        .iter()
        .map(|p| p + 0.1 * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let task = SyntheticTask::generate(shape, 8, 1, 0.1, seed);
    let b = &task.train;
    let (_, grad) = shape.loss_and_grad(&params, &b.x, &b.y, b.rows);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for _ in 0..probes {
        let i = rng.gen_range(0..params.len());
        let mut p = params.clone();
        p[i] = params[i] + h;
        let up = shape.loss(&p, &b.x, &b.y, b.rows);
        p[i] = params[i] - h;
        let down = shape.loss(&p, &b.x, &b.y, b.rows);
        let numeric = (up - down) / (2.0 * h);
        let denom = grad[i].abs().max(numeric.abs()).max(1e-7);
        worst = worst.max((grad[i] - numeric).abs() / denom);
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_shape() {
        let s = ModelShape::toy();
        assert_eq!(s.param_count(), 16 * 64 + 64 + 2 * (64 * 64 + 64) + 64 * 4 + 4);
    }

    #[test]
    fn analytic_gradient_matches_finite_differences() {
        let s = ModelShape::new(vec![3, 5, 4, 2]).unwrap();
        assert!(gradient_check(&s, s.param_count(), 7) <= 1e-4);
        assert!(gradient_check(&ModelShape::toy(), 64, 3) <= 1e-4);
    }

    #[test]
    fn batches_wrap_and_differ_by_rank() {
        let s = ModelShape::new(vec![2, 3, 1]).unwrap();
        let t = SyntheticTask::generate(&s, 10, 4, 0.0, 1);
        let a = t.batch(0, 0, 2, 4);
        let b = t.batch(0, 1, 2, 4);
        assert_ne!(a.x, b.x);
        let wrap = t.batch(1, 0, 2, 4);
        assert_eq!(&wrap.x[4..], &t.train.x[..4]);
    }

    #[test]
    fn noiseless_teacher_has_zero_loss() {
        let s = ModelShape::new(vec![2, 3, 1]).unwrap();
        let t = SyntheticTask::generate(&s, 10, 4, 0.0, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        rng.set_stream(1);
        let teacher = s.init(&mut rng);
        assert!(s.loss(&teacher, &t.train.x, &t.train.y, 10) < 1e-30);
    }
}
