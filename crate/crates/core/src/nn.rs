//! Minimal dense/conv layers with hand-written backward passes.
//!
//! Everything is `f64`, single image at a time, CHW layout. Parameters live in
//! flat buffers so optimizer steps, momentum updates and checkpoints can treat
//! a network as one slice.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// One 3×3 convolution (padding 1) followed by ReLU.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvBlock {
    pub out_channels: usize,
    pub stride: usize,
}

/// Global pooling applied to the last feature map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pool {
    #[default]
    Avg,
    Max,
}

impl std::str::FromStr for Pool {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "avg" => Ok(Self::Avg),
            "max" => Ok(Self::Max),
            other => Err(format!("unknown pooling `{other}`")),
        }
    }
}

/// Convolutional backbone `f`: conv blocks then global pooling.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneArch {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub blocks: Vec<ConvBlock>,
    #[serde(default)]
    pub pool: Pool,
}

impl BackboneArch {
    /// Reference desk-scale net: five conv blocks whose channel counts scale with `width`.
    pub fn reference(in_channels: usize, height: usize, width_px: usize, width: usize) -> Self {
        let w = width.max(1);
        let blocks = [(w, 1), (w, 2), (2 * w, 2), (2 * w, 1), (4 * w, 2)]
            .into_iter()
            .map(|(out_channels, stride)| ConvBlock {
                out_channels,
                stride,
            })
            .collect();
        Self {
            in_channels,
            height,
            width: width_px,
            blocks,
            pool: Pool::Avg,
        }
    }

    pub fn with_pool(self, pool: Pool) -> Self {
        Self { pool, ..self }
    }

    pub fn feature_dim(&self) -> usize {
        self.blocks
            .last()
            .map_or(self.in_channels, |b| b.out_channels)
    }

    pub fn num_params(&self) -> usize {
        let mut c_in = self.in_channels;
        let mut total = 0;
        for b in &self.blocks {
            total += b.out_channels * c_in * 9 + b.out_channels;
            c_in = b.out_channels;
        }
        total
    }

    pub fn input_len(&self) -> usize {
        self.in_channels * self.height * self.width
    }

    pub fn id(&self) -> String {
        let chans: Vec<String> = self
            .blocks
            .iter()
            .map(|b| format!("{}s{}", b.out_channels, b.stride))
            .collect();
        let pool = match self.pool {
            Pool::Avg => "avg",
            Pool::Max => "max",
        };
        format!(
            "cnn{}-{}-{}x{}x{}-{pool}",
            self.blocks.len(),
            chans.join("."),
            self.in_channels,
            self.height,
            self.width
        )
    }

    pub fn init(&self, rng: &mut impl Rng) -> Vec<f64> {
        let mut params = Vec::with_capacity(self.num_params());
        let mut c_in = self.in_channels;
        for b in &self.blocks {
            let fan_in = (c_in * 9) as f64;
            let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("finite std");
            params.extend((0..b.out_channels * c_in * 9).map(|_| normal.sample(rng)));
            params.extend(std::iter::repeat_n(0.0, b.out_channels));
            c_in = b.out_channels;
        }
        params
    }

    /// Forward pass. When `trace` is given, every block's input is recorded
    /// (plus the final activation) for [`BackboneArch::backward`].
    pub fn forward(&self, params: &[f64], input: &[f64], trace: Option<&mut BackboneTrace>) -> Vec<f64> {
        debug_assert_eq!(input.len(), self.input_len());
        let mut acts = Vec::with_capacity(self.blocks.len() + 1);
        let mut shapes = Vec::with_capacity(self.blocks.len() + 1);
        let (mut c, mut h, mut w) = (self.in_channels, self.height, self.width);
        let mut cur = input.to_vec();
        let mut offset = 0;
        for b in &self.blocks {
            let nw = b.out_channels * c * 9;
            let weights = &params[offset..offset + nw];
            let bias = &params[offset + nw..offset + nw + b.out_channels];
            offset += nw + b.out_channels;
            let (mut out, ho, wo) = conv3x3(&cur, c, h, w, weights, bias, b.out_channels, b.stride);
            out.iter_mut().for_each(|v| *v = v.max(0.0));
            acts.push(std::mem::replace(&mut cur, out));
            shapes.push((c, h, w));
            (c, h, w) = (b.out_channels, ho, wo);
        }
        let hw = (h * w) as f64;
        let features = cur
            .chunks(h * w)
            .map(|ch| match self.pool {
                Pool::Avg => ch.iter().sum::<f64>() / hw,
                Pool::Max => ch.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            })
            .collect();
        if let Some(t) = trace {
            acts.push(cur);
            shapes.push((c, h, w));
            t.acts = acts;
            t.shapes = shapes;
        }
        features
    }

    /// Accumulates parameter gradients into `grad` given d(loss)/d(features).
    /// Returns d(loss)/d(input) when `want_input` is set.
    pub fn backward(
        &self,
        params: &[f64],
        trace: &BackboneTrace,
        d_features: &[f64],
        grad: &mut [f64],
        want_input: bool,
    ) -> Option<Vec<f64>> {
        let n = self.blocks.len();
        let (c, h, w) = trace.shapes[n];
        let hw = (h * w) as f64;
        let mut d_act: Vec<f64> = match self.pool {
            Pool::Avg => (0..c)
                .flat_map(|ch| std::iter::repeat_n(d_features[ch] / hw, h * w))
                .collect(),
            Pool::Max => {
                let mut d = vec![0.0; c * h * w];
                for (ch, plane) in trace.acts[n].chunks(h * w).enumerate() {
                    // First maximal position takes the gradient.
                    let arg = plane
                        .iter()
                        .enumerate()
                        .fold(0, |best, (i, &v)| if v > plane[best] { i } else { best });
                    d[ch * h * w + arg] = d_features[ch];
                }
                d
            }
        };

        let mut offsets = Vec::with_capacity(n);
        let mut off = 0;
        let mut c_in = self.in_channels;
        for b in &self.blocks {
            offsets.push(off);
            off += b.out_channels * c_in * 9 + b.out_channels;
            c_in = b.out_channels;
        }

        for (i, b) in self.blocks.iter().enumerate().rev() {
            // ReLU mask from this block's output.
            let out = &trace.acts[i + 1];
            for (d, &o) in d_act.iter_mut().zip(out) {
                if o <= 0.0 {
                    *d = 0.0;
                }
            }
            let (ci, hi, wi) = trace.shapes[i];
            let nw = b.out_channels * ci * 9;
            let o = offsets[i];
            let weights = &params[o..o + nw];
            let (gw, gb) = grad[o..o + nw + b.out_channels].split_at_mut(nw);
            let need_input = i > 0 || want_input;
            let d_in = conv3x3_backward(
                &trace.acts[i],
                ci,
                hi,
                wi,
                weights,
                b.out_channels,
                b.stride,
                &d_act,
                gw,
                gb,
                need_input,
            );
            match d_in {
                Some(d) => d_act = d,
                None => return None,
            }
        }
        Some(d_act)
    }
}

/// Activations recorded by a traced backbone forward pass.
#[derive(Debug, Clone, Default)]
pub struct BackboneTrace {
    acts: Vec<Vec<f64>>,
    shapes: Vec<(usize, usize, usize)>,
}

fn out_size(n: usize, stride: usize) -> usize {
    (n + 2 - 3) / stride + 1
}

#[allow(clippy::too_many_arguments)]
fn conv3x3(
    input: &[f64],
    c_in: usize,
    h: usize,
    w: usize,
    weights: &[f64],
    bias: &[f64],
    c_out: usize,
    stride: usize,
) -> (Vec<f64>, usize, usize) {
    let ho = out_size(h, stride);
    let wo = out_size(w, stride);
    let mut out = vec![0.0; c_out * ho * wo];
    for o in 0..c_out {
        let plane = &mut out[o * ho * wo..(o + 1) * ho * wo];
        plane.iter_mut().for_each(|v| *v = bias[o]);
        for i in 0..c_in {
            let src = &input[i * h * w..(i + 1) * h * w];
            let k = &weights[(o * c_in + i) * 9..(o * c_in + i) * 9 + 9];
            for y in 0..ho {
                for ky in 0..3 {
                    let iy = (y * stride + ky) as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let row = &src[iy as usize * w..(iy as usize + 1) * w];
                    let dst = &mut plane[y * wo..(y + 1) * wo];
                    for kx in 0..3 {
                        let kv = k[ky * 3 + kx];
                        for (x, d) in dst.iter_mut().enumerate() {
                            let ix = (x * stride + kx) as isize - 1;
                            if ix >= 0 && ix < w as isize {
                                *d += kv * row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    (out, ho, wo)
}

#[allow(clippy::too_many_arguments)]
fn conv3x3_backward(
    input: &[f64],
    c_in: usize,
    h: usize,
    w: usize,
    weights: &[f64],
    c_out: usize,
    stride: usize,
    d_out: &[f64],
    gw: &mut [f64],
    gb: &mut [f64],
    want_input: bool,
) -> Option<Vec<f64>> {
    let ho = out_size(h, stride);
    let wo = out_size(w, stride);
    let mut d_in = if want_input {
        vec![0.0; c_in * h * w]
    } else {
        Vec::new()
    };
    for o in 0..c_out {
        let dplane = &d_out[o * ho * wo..(o + 1) * ho * wo];
        gb[o] += dplane.iter().sum::<f64>();
        for i in 0..c_in {
            let src = &input[i * h * w..(i + 1) * h * w];
            let kidx = (o * c_in + i) * 9;
            for y in 0..ho {
                for ky in 0..3 {
                    let iy = (y * stride + ky) as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let iy = iy as usize;
                    for kx in 0..3 {
                        let kv = weights[kidx + ky * 3 + kx];
                        let mut acc = 0.0;
                        for x in 0..wo {
                            let ix = (x * stride + kx) as isize - 1;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let d = dplane[y * wo + x];
                            acc += d * src[iy * w + ix as usize];
                            if want_input {
                                d_in[i * h * w + iy * w + ix as usize] += d * kv;
                            }
                        }
                        gw[kidx + ky * 3 + kx] += acc;
                    }
                }
            }
        }
    }
    want_input.then_some(d_in)
}

/// Fully connected layer `y = W x + b`, parameters stored as `[W (out×in), b]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
}

impl Dense {
    pub fn num_params(&self) -> usize {
        self.outputs * self.inputs + self.outputs
    }

    pub fn init(&self, rng: &mut impl Rng, gain: f64) -> Vec<f64> {
        let normal = Normal::new(0.0, (gain / self.inputs as f64).sqrt()).expect("finite std");
        let mut p: Vec<f64> = (0..self.outputs * self.inputs)
            .map(|_| normal.sample(rng))
            .collect();
        p.extend(std::iter::repeat_n(0.0, self.outputs));
        p
    }

    pub fn forward(&self, params: &[f64], x: &[f64]) -> Vec<f64> {
        let (weights, bias) = params.split_at(self.outputs * self.inputs);
        weights
            .chunks(self.inputs)
            .zip(bias)
            .map(|(row, b)| b + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>())
            .collect()
    }

    /// Accumulates into `grad`; returns d(loss)/dx.
    pub fn backward(&self, params: &[f64], x: &[f64], dy: &[f64], grad: &mut [f64]) -> Vec<f64> {
        let nw = self.outputs * self.inputs;
        let (gw, gb) = grad.split_at_mut(nw);
        let weights = &params[..nw];
        let mut dx = vec![0.0; self.inputs];
        for (o, &d) in dy.iter().enumerate() {
            gb[o] += d;
            if d == 0.0 {
                continue;
            }
            let row = &weights[o * self.inputs..(o + 1) * self.inputs];
            let grow = &mut gw[o * self.inputs..(o + 1) * self.inputs];
            for j in 0..self.inputs {
                grow[j] += d * x[j];
                dx[j] += d * row[j];
            }
        }
        dx
    }
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};

    fn numeric_grad(f: impl Fn(&[f64]) -> f64, x: &[f64], eps: f64) -> Vec<f64> {
        let mut x = x.to_vec();
        (0..x.len())
            .map(|i| {
                let orig = x[i];
                x[i] = orig + eps;
                let up = f(&x);
                x[i] = orig - eps;
                let down = f(&x);
                x[i] = orig;
                (up - down) / (2.0 * eps)
            })
            .collect()
    }

    #[test]
    fn reference_backbone_shapes() {
        let arch = BackboneArch::reference(1, 16, 16, 4);
        assert_eq!(arch.feature_dim(), 16);
        let mut rng = stream(0, Stream::Init, 0);
        let p = arch.init(&mut rng);
        assert_eq!(p.len(), arch.num_params());
        let feats = arch.forward(&p, &vec![0.5; 256], None);
        assert_eq!(feats.len(), 16);
        assert!(feats.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn backbone_backward_matches_finite_differences() {
        check_backbone_gradients(Pool::Avg);
    }

    #[test]
    fn max_pool_backward_matches_finite_differences() {
        check_backbone_gradients(Pool::Max);
    }

    fn check_backbone_gradients(pool: Pool) {
        let arch = BackboneArch::reference(1, 8, 8, 2).with_pool(pool);
        let mut rng = stream(3, Stream::Init, 0);
        let mut params = arch.init(&mut rng);
        // Non-zero biases so ReLU kinks are unlikely to sit exactly on a probe.
        let normal = Normal::new(0.0, 0.1).unwrap();
        params.iter_mut().for_each(|p| *p += normal.sample(&mut rng));
        let input: Vec<f64> = (0..64).map(|i| ((i * 37) % 11) as f64 / 11.0).collect();
        let weights: Vec<f64> = (0..arch.feature_dim()).map(|i| 1.0 + i as f64 * 0.3).collect();
        let objective = |p: &[f64]| dot(&arch.forward(p, &input, None), &weights);

        let mut trace = BackboneTrace::default();
        arch.forward(&params, &input, Some(&mut trace));
        let mut grad = vec![0.0; params.len()];
        arch.backward(&params, &trace, &weights, &mut grad, false);
        let numeric = numeric_grad(objective, &params, 1e-6);
        for (a, n) in grad.iter().zip(&numeric) {
            assert!((a - n).abs() < 1e-5 * (1.0 + n.abs()), "{a} vs {n}");
        }
    }

    #[test]
    fn dense_backward_matches_finite_differences() {
        let layer = Dense {
            inputs: 5,
            outputs: 3,
        };
        let mut rng = stream(9, Stream::Init, 0);
        let params = layer.init(&mut rng, 2.0);
        let x = [0.3, -1.2, 0.7, 2.0, -0.1];
        let dy = [1.0, -2.0, 0.5];
        let mut grad = vec![0.0; params.len()];
        let dx = layer.backward(&params, &x, &dy, &mut grad);
        let numeric = numeric_grad(|p| dot(&layer.forward(p, &x), &dy), &params, 1e-6);
        for (a, n) in grad.iter().zip(&numeric) {
            assert!((a - n).abs() < 1e-7);
        }
        let numeric_x = numeric_grad(|x| dot(&layer.forward(&params, x), &dy), &x, 1e-6);
        for (a, n) in dx.iter().zip(&numeric_x) {
            assert!((a - n).abs() < 1e-7);
        }
    }
}
