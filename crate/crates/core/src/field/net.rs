//! Time-conditioned MLP that maps a control point's rest position and a
//! normalized time to a rigid motion (3 translation + 4 rotation components).

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use std::f64::consts::PI;

pub const OUTPUT_DIM: usize = 7;

#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    /// `outputs × inputs`, row-major.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetShape {
    pub position_bands: usize,
    pub time_bands: usize,
    pub hidden_width: usize,
    pub hidden_layers: usize,
}

impl Default for NetShape {
    fn default() -> Self {
        Self {
            position_bands: 6,
            time_bands: 4,
            hidden_width: 64,
            hidden_layers: 3,
        }
    }
}

impl NetShape {
    pub fn input_dim(&self) -> usize {
        3 * (1 + 2 * self.position_bands) + 1 + 2 * self.time_bands
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DeformationNet {
    pub position_bands: usize,
    pub time_bands: usize,
    pub layers: Vec<Dense>,
}

/// Activations kept for the backward pass of one evaluation.
#[derive(Clone, Debug)]
pub struct NetTape {
    /// Input to each layer (`layers.len()` entries).
    inputs: Vec<Vec<f64>>,
    /// Pre-activation of each hidden layer.
    pre: Vec<Vec<f64>>,
}

#[inline]
fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

#[inline]
fn silu_grad(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}

impl DeformationNet {
    /// Glorot-uniform hidden layers and a zero output layer, so the untrained
    /// network emits exactly zero.
    pub fn new(shape: &NetShape, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut dims = vec![shape.input_dim()];
        dims.extend(std::iter::repeat(shape.hidden_width).take(shape.hidden_layers));
        dims.push(OUTPUT_DIM);
        let n_layers = dims.len() - 1;
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let (inputs, outputs) = (w[0], w[1]);
                let weights = if i + 1 == n_layers {
                    vec![0.0; inputs * outputs]
                } else {
                    let limit = (6.0 / (inputs + outputs) as f64).sqrt();
                    (0..inputs * outputs)
                        .map(|_| rng.gen_range(-limit..limit))
                        .collect()
                };
                Dense {
                    inputs,
                    outputs,
                    weights,
                    bias: vec![0.0; outputs],
                }
            })
            .collect();
        Self {
            position_bands: shape.position_bands,
            time_bands: shape.time_bands,
            layers,
        }
    }

    pub fn shape(&self) -> NetShape {
        NetShape {
            position_bands: self.position_bands,
            time_bands: self.time_bands,
            hidden_width: self.layers.first().map_or(0, |l| l.outputs),
            hidden_layers: self.layers.len().saturating_sub(1),
        }
    }

    pub fn encode(&self, position: [f64; 3], time: f64) -> Vec<f64> {
        let mut x = Vec::with_capacity(self.layers[0].inputs);
        x.extend_from_slice(&position);
        for l in 0..self.position_bands {
            let f = (1u64 << l) as f64 * PI;
            for p in position {
                x.push((f * p).sin());
                x.push((f * p).cos());
            }
        }
        x.push(time);
        for l in 0..self.time_bands {
            let f = (1u64 << l) as f64 * PI;
            x.push((f * time).sin());
            x.push((f * time).cos());
        }
        x
    }

    pub fn forward(&self, input: &[f64]) -> ([f64; OUTPUT_DIM], NetTape) {
        let mut tape = NetTape {
            inputs: Vec::with_capacity(self.layers.len()),
            pre: Vec::with_capacity(self.layers.len()),
        };
        let mut x = input.to_vec();
        let last = self.layers.len() - 1;
        for (li, layer) in self.layers.iter().enumerate() {
            let mut z = layer.bias.clone();
            for (o, zo) in z.iter_mut().enumerate() {
                let row = &layer.weights[o * layer.inputs..(o + 1) * layer.inputs];
                *zo += row.iter().zip(&x).map(|(w, v)| w * v).sum::<f64>();
            }
            tape.inputs.push(std::mem::take(&mut x));
            if li == last {
                x = z;
            } else {
                x = z.iter().map(|&v| silu(v)).collect();
                tape.pre.push(z);
            }
        }
        let mut out = [0.0; OUTPUT_DIM];
        out.copy_from_slice(&x);
        (out, tape)
    }

    /// Accumulates `dL/dθ` into `grads` (flat layout of [`Self::params`]).
    pub fn backward(&self, tape: &NetTape, grad_out: &[f64; OUTPUT_DIM], grads: &mut [f64]) {
        let mut offsets = Vec::with_capacity(self.layers.len());
        let mut off = 0;
        for l in &self.layers {
            offsets.push(off);
            off += l.param_count();
        }
        let mut g: Vec<f64> = grad_out.to_vec();
        for li in (0..self.layers.len()).rev() {
            let layer = &self.layers[li];
            if li + 1 < self.layers.len() {
                for (gi, &z) in g.iter_mut().zip(&tape.pre[li]) {
                    *gi *= silu_grad(z);
                }
            }
            let input = &tape.inputs[li];
            let base = offsets[li];
            let bias_base = base + layer.weights.len();
            for o in 0..layer.outputs {
                let go = g[o];
                if go == 0.0 {
                    continue;
                }
                let row = &mut grads[base + o * layer.inputs..base + (o + 1) * layer.inputs];
                for (r, v) in row.iter_mut().zip(input) {
                    *r += go * v;
                }
                grads[bias_base + o] += go;
            }
            if li > 0 {
                let mut gin = vec![0.0; layer.inputs];
                for o in 0..layer.outputs {
                    let go = g[o];
                    if go == 0.0 {
                        continue;
                    }
                    let row = &layer.weights[o * layer.inputs..(o + 1) * layer.inputs];
                    for (gi, w) in gin.iter_mut().zip(row) {
                        *gi += go * w;
                    }
                }
                g = gin;
            }
        }
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Dense::param_count).sum()
    }

    /// Flat parameter vector, layer by layer, weights before biases.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend_from_slice(&l.weights);
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn param_mut(&mut self, mut index: usize) -> &mut f64 {
        for l in &mut self.layers {
            if index < l.weights.len() {
                return &mut l.weights[index];
            }
            index -= l.weights.len();
            if index < l.bias.len() {
                return &mut l.bias[index];
            }
            index -= l.bias.len();
        }
        panic!("net parameter index out of range")
    }

    pub fn for_each_param_mut(&mut self, mut f: impl FnMut(usize, &mut f64)) {
        let mut i = 0;
        for l in &mut self.layers {
            for v in l.weights.iter_mut().chain(l.bias.iter_mut()) {
                f(i, v);
                i += 1;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fresh_network_is_silent() {
        let net = DeformationNet::new(&NetShape::default(), 3);
        let x = net.encode([0.2, -0.4, 0.1], 0.6);
        assert_eq!(x.len(), NetShape::default().input_dim());
        let (out, _) = net.forward(&x);
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_matches_finite_differences() {
        let shape = NetShape {
            position_bands: 2,
            time_bands: 2,
            hidden_width: 6,
            hidden_layers: 2,
        };
        let mut net = DeformationNet::new(&shape, 11);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        net.for_each_param_mut(|_, v| *v = rng.gen_range(-0.8..0.8));
        let x = net.encode([0.3, 0.1, -0.2], 0.25);
        let gout = [0.3, -0.2, 0.5, 0.1, -0.7, 0.4, 0.2];
        let loss = |n: &DeformationNet| {
            let (o, _) = n.forward(&x);
            o.iter().zip(&gout).map(|(a, b)| a * b).sum::<f64>()
        };
        let (_, tape) = net.forward(&x);
        let mut g = vec![0.0; net.param_count()];
        net.backward(&tape, &gout, &mut g);
        for i in 0..net.param_count() {
            let mut a = net.clone();
            *a.param_mut(i) += 1e-6;
            let mut b = net.clone();
            *b.param_mut(i) -= 1e-6;
            let fd = (loss(&a) - loss(&b)) / 2e-6;
            assert!((fd - g[i]).abs() < 1e-7, "param {i}: {fd} vs {}", g[i]);
        }
    }
}
