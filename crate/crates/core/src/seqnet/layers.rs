//! Building blocks with hand-written backward passes. Sequences of feature
//! vectors are stored as `Vec<Vec<f64>>`, indexed `[time][channel]`.

use rand::Rng;

use super::tensor::Tensor;

/// 1-D convolution over time with zero padding so the output keeps the input
/// length ("half" convolution), followed by ReLU.
///
/// Output position `t` sees inputs `t - w/2 ..= t - w/2 + w - 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv1d {
    pub width: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    /// `[out, in * width]`, column `i * width + j` is tap `j` of input channel `i`.
    pub weight: Tensor,
    pub bias: Tensor,
}

pub struct ConvTrace {
    input: Vec<Vec<f64>>,
    /// ReLU output; a zero entry marks an inactive unit.
    output: Vec<Vec<f64>>,
}

impl Conv1d {
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        width: usize,
        in_channels: usize,
        out_channels: usize,
        init: f64,
        rng: &mut R,
    ) -> Self {
        Self {
            width,
            in_channels,
            out_channels,
            weight: Tensor::uniform(
                format!("{name}.weight"),
                &[out_channels, in_channels * width],
                init,
                rng,
            ),
            bias: Tensor::uniform(format!("{name}.bias"), &[out_channels], init, rng),
        }
    }

    fn left_pad(&self) -> usize {
        self.width / 2
    }

    pub fn forward(&self, input: &[Vec<f64>]) -> (Vec<Vec<f64>>, ConvTrace) {
        let len = input.len();
        let left = self.left_pad() as isize;
        let mut output = vec![vec![0.0; self.out_channels]; len];
        for (t, out) in output.iter_mut().enumerate() {
            for (o, y) in out.iter_mut().enumerate() {
                let w = self.weight.row(o);
                let mut acc = self.bias.data[o];
                for j in 0..self.width {
                    let src = t as isize + j as isize - left;
                    if src < 0 || src >= len as isize {
                        continue;
                    }
                    let x = &input[src as usize];
                    for (i, xi) in x.iter().enumerate() {
                        acc += w[i * self.width + j] * xi;
                    }
                }
                *y = acc.max(0.0);
            }
        }
        let trace = ConvTrace {
            input: input.to_vec(),
            output: output.clone(),
        };
        (output, trace)
    }

    /// Accumulates parameter gradients into `grad` and returns the gradient
    /// with respect to the input.
    pub fn backward(
        &self,
        trace: &ConvTrace,
        d_out: &[Vec<f64>],
        grad: &mut Conv1d,
    ) -> Vec<Vec<f64>> {
        let len = trace.input.len();
        let left = self.left_pad() as isize;
        let mut d_in = vec![vec![0.0; self.in_channels]; len];
        for t in 0..len {
            for o in 0..self.out_channels {
                if trace.output[t][o] <= 0.0 {
                    continue;
                }
                let g = d_out[t][o];
                if g == 0.0 {
                    continue;
                }
                grad.bias.data[o] += g;
                let w = self.weight.row(o);
                let gw = grad.weight.row_mut(o);
                for j in 0..self.width {
                    let src = t as isize + j as isize - left;
                    if src < 0 || src >= len as isize {
                        continue;
                    }
                    let src = src as usize;
                    for i in 0..self.in_channels {
                        gw[i * self.width + j] += g * trace.input[src][i];
                        d_in[src][i] += g * w[i * self.width + j];
                    }
                }
            }
        }
        d_in
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            width: self.width,
            in_channels: self.in_channels,
            out_channels: self.out_channels,
            weight: self.weight.zeros_like(),
            bias: self.bias.zeros_like(),
        }
    }
}

/// Single LSTM layer, gate order `[input, forget, cell, output]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmLayer {
    pub input_size: usize,
    pub hidden: usize,
    /// `[4h, input]`
    pub w_input: Tensor,
    /// `[4h, h]`
    pub w_hidden: Tensor,
    /// `[4h]`
    pub bias: Tensor,
}

struct LstmStep {
    x: Vec<f64>,
    h_prev: Vec<f64>,
    c_prev: Vec<f64>,
    /// activated gates, `[i, f, g, o]` concatenated
    gates: Vec<f64>,
    tanh_c: Vec<f64>,
}

pub struct LstmTrace {
    steps: Vec<LstmStep>,
}

fn sigmoid(x: f64) -> f64 {
    crate::util::sigmoid(x)
}

impl LstmLayer {
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        input_size: usize,
        hidden: usize,
        init: f64,
        rng: &mut R,
    ) -> Self {
        Self {
            input_size,
            hidden,
            w_input: Tensor::uniform(
                format!("{name}.w_input"),
                &[4 * hidden, input_size],
                init,
                rng,
            ),
            w_hidden: Tensor::uniform(format!("{name}.w_hidden"), &[4 * hidden, hidden], init, rng),
            bias: Tensor::uniform(format!("{name}.bias"), &[4 * hidden], init, rng),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            input_size: self.input_size,
            hidden: self.hidden,
            w_input: self.w_input.zeros_like(),
            w_hidden: self.w_hidden.zeros_like(),
            bias: self.bias.zeros_like(),
        }
    }

    pub fn tensors(&self) -> [&Tensor; 3] {
        [&self.w_input, &self.w_hidden, &self.bias]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 3] {
        [&mut self.w_input, &mut self.w_hidden, &mut self.bias]
    }

    /// Runs the layer over `inputs` in the given order from a zero state.
    pub fn forward(&self, inputs: &[Vec<f64>]) -> (Vec<Vec<f64>>, LstmTrace) {
        let h = self.hidden;
        let mut h_prev = vec![0.0; h];
        let mut c_prev = vec![0.0; h];
        let mut outputs = Vec::with_capacity(inputs.len());
        let mut steps = Vec::with_capacity(inputs.len());
        for x in inputs {
            let mut z = self.bias.data.clone();
            self.w_input.matvec_acc(x, &mut z);
            self.w_hidden.matvec_acc(&h_prev, &mut z);
            let mut gates = z;
            for k in 0..h {
                gates[k] = sigmoid(gates[k]);
                gates[h + k] = sigmoid(gates[h + k]);
                gates[2 * h + k] = gates[2 * h + k].tanh();
                gates[3 * h + k] = sigmoid(gates[3 * h + k]);
            }
            let mut c = vec![0.0; h];
            let mut tanh_c = vec![0.0; h];
            let mut h_new = vec![0.0; h];
            for k in 0..h {
                c[k] = gates[h + k] * c_prev[k] + gates[k] * gates[2 * h + k];
                tanh_c[k] = c[k].tanh();
                h_new[k] = gates[3 * h + k] * tanh_c[k];
            }
            steps.push(LstmStep {
                x: x.clone(),
                h_prev: std::mem::replace(&mut h_prev, h_new.clone()),
                c_prev: std::mem::replace(&mut c_prev, c),
                gates,
                tanh_c,
            });
            outputs.push(h_new);
        }
        (outputs, LstmTrace { steps })
    }

    /// Backpropagation through time. `d_out[t]` is the gradient flowing into
    /// the hidden output of step `t` (same order as the forward inputs).
    pub fn backward(
        &self,
        trace: &LstmTrace,
        d_out: &[Vec<f64>],
        grad: &mut LstmLayer,
    ) -> Vec<Vec<f64>> {
        let h = self.hidden;
        let n = trace.steps.len();
        let mut d_in = vec![vec![0.0; self.input_size]; n];
        let mut dh_next = vec![0.0; h];
        let mut dc_next = vec![0.0; h];
        let mut dz = vec![0.0; 4 * h];
        for t in (0..n).rev() {
            let s = &trace.steps[t];
            let g = &s.gates;
            for k in 0..h {
                let dh = d_out[t][k] + dh_next[k];
                let (i, f, c_hat, o) = (g[k], g[h + k], g[2 * h + k], g[3 * h + k]);
                let tc = s.tanh_c[k];
                let d_o = dh * tc;
                let dc = dc_next[k] + dh * o * (1.0 - tc * tc);
                dz[k] = dc * c_hat * i * (1.0 - i);
                dz[h + k] = dc * s.c_prev[k] * f * (1.0 - f);
                dz[2 * h + k] = dc * i * (1.0 - c_hat * c_hat);
                dz[3 * h + k] = d_o * o * (1.0 - o);
                dc_next[k] = dc * f;
            }
            for (b, d) in grad.bias.data.iter_mut().zip(&dz) {
                *b += d;
            }
            grad.w_input.outer_acc(&dz, &s.x);
            grad.w_hidden.outer_acc(&dz, &s.h_prev);
            self.w_input.matvec_t_acc(&dz, &mut d_in[t]);
            dh_next.iter_mut().for_each(|x| *x = 0.0);
            self.w_hidden.matvec_t_acc(&dz, &mut dh_next);
        }
        d_in
    }
}

/// `log softmax` of `logits` restricted to entries where `allowed` is true.
pub fn masked_log_softmax(logits: &[f64], allowed: impl Fn(usize) -> bool) -> Vec<f64> {
    let max = logits
        .iter()
        .enumerate()
        .filter(|(i, _)| allowed(*i))
        .map(|(_, &v)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits
        .iter()
        .enumerate()
        .filter(|(i, _)| allowed(*i))
        .map(|(_, &v)| (v - max).exp())
        .sum();
    let lse = max + sum.ln();
    logits
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            if allowed(i) {
                v - lse
            } else {
                f64::NEG_INFINITY
            }
        })
        .collect()
}
