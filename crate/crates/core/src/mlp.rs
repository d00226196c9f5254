//! One-hidden-layer tanh network with a flat parameter vector, shared by the
//! emission scorer and the candidate ranker.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpShape {
    pub input: usize,
    pub hidden: usize,
    pub output: usize,
}

impl MlpShape {
    pub fn num_params(&self) -> usize {
        self.hidden * self.input + self.hidden + self.output * self.hidden + self.output
    }

    fn w1(&self) -> std::ops::Range<usize> {
        0..self.hidden * self.input
    }

    fn b1(&self) -> std::ops::Range<usize> {
        let s = self.hidden * self.input;
        s..s + self.hidden
    }

    fn w2(&self) -> std::ops::Range<usize> {
        let s = self.b1().end;
        s..s + self.output * self.hidden
    }

    fn b2(&self) -> std::ops::Range<usize> {
        let s = self.w2().end;
        s..s + self.output
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub shape: MlpShape,
    pub params: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct MlpCache {
    pub hidden: Vec<f64>,
    pub output: Vec<f64>,
}

impl Mlp {
    /// Glorot-uniform weights, zero biases.
    pub fn new(shape: MlpShape, rng: &mut ChaCha8Rng) -> Self {
        let mut params = vec![0.0; shape.num_params()];
        let a1 = (6.0 / (shape.input + shape.hidden) as f64).sqrt();
        for p in &mut params[shape.w1()] {
            *p = rng.gen_range(-a1..a1);
        }
        let a2 = (6.0 / (shape.hidden + shape.output) as f64).sqrt();
        for p in &mut params[shape.w2()] {
            *p = rng.gen_range(-a2..a2);
        }
        Mlp { shape, params }
    }

    pub fn forward(&self, x: &[f64]) -> MlpCache {
        let s = self.shape;
        debug_assert_eq!(x.len(), s.input);
        let w1 = &self.params[s.w1()];
        let b1 = &self.params[s.b1()];
        let w2 = &self.params[s.w2()];
        let b2 = &self.params[s.b2()];
        let hidden: Vec<f64> = (0..s.hidden)
            .map(|j| {
                let row = &w1[j * s.input..(j + 1) * s.input];
                (b1[j] + crate::math::dot(row, x)).tanh()
            })
            .collect();
        let output = (0..s.output)
            .map(|k| b2[k] + crate::math::dot(&w2[k * s.hidden..(k + 1) * s.hidden], &hidden))
            .collect();
        MlpCache { hidden, output }
    }

    /// Accumulates parameter gradients into `grad` and, when requested, the
    /// input gradient into `grad_x`.
    pub fn backward(
        &self,
        x: &[f64],
        cache: &MlpCache,
        grad_out: &[f64],
        grad: &mut [f64],
        mut grad_x: Option<&mut [f64]>,
    ) {
        let s = self.shape;
        let w1 = &self.params[s.w1()];
        let w2 = &self.params[s.w2()];
        let mut grad_h = vec![0.0; s.hidden];
        {
            let (g_w2, g_b2) = {
                let (head, tail) = grad.split_at_mut(s.b2().start);
                (&mut head[s.w2()], &mut tail[..s.output])
            };
            for k in 0..s.output {
                let g = grad_out[k];
                if g == 0.0 {
                    continue;
                }
                g_b2[k] += g;
                for j in 0..s.hidden {
                    g_w2[k * s.hidden + j] += g * cache.hidden[j];
                    grad_h[j] += g * w2[k * s.hidden + j];
                }
            }
        }
        let (g_w1, rest) = grad.split_at_mut(s.b1().start);
        let g_b1 = &mut rest[..s.hidden];
        for j in 0..s.hidden {
            let h = cache.hidden[j];
            let g = grad_h[j] * (1.0 - h * h);
            if g == 0.0 {
                continue;
            }
            g_b1[j] += g;
            let row = &mut g_w1[j * s.input..(j + 1) * s.input];
            for (r, xi) in row.iter_mut().zip(x) {
                *r += g * xi;
            }
            if let Some(gx) = grad_x.as_deref_mut() {
                for (i, gxi) in gx.iter_mut().enumerate() {
                    *gxi += g * w1[j * s.input + i];
                }
            }
        }
    }
}
