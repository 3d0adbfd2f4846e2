//! Reference forward pass and output-error evaluation on synthetic models.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::engine::squant_tensor;
use crate::error::{Error, Result};
use crate::quant::{LayerKind, Mode, QuantConfig, QuantGrid, WeightTensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    #[default]
    Same,
    Valid,
}

/// Feature map in `(C, H, W)` order.
#[derive(Debug, Clone, PartialEq)]
pub struct Activation {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Activation {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Self {
            c,
            h,
            w,
            data: vec![0.0; c * h * w],
        }
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.h + y) * self.w + x]
    }
}

/// Direct convolution `Y[m,h,w] = sum W[m,n,i,j] X[n, h-i, w-j]`, stride 1.
///
/// `Valid` anchors output `(0, 0)` at input `(KH-1, KW-1)`; `Same` keeps the
/// input size and pads `(K-1)/2` before and the remainder after. Out-of-range
/// inputs read as zero.
pub fn conv2d_forward(
    input: &Activation,
    weights: &[f64],
    shape: [usize; 4],
    padding: Padding,
) -> Result<Activation> {
    let [m_out, n_in, kh, kw] = shape;
    if weights.len() != m_out * n_in * kh * kw {
        return Err(Error::Validation(format!(
            "{} weights for shape {shape:?}",
            weights.len()
        )));
    }
    if input.c != n_in {
        return Err(Error::Validation(format!(
            "input has {} channels, weights expect {n_in}",
            input.c
        )));
    }
    let (oh, ow, off_h, off_w) = match padding {
        Padding::Valid => {
            if input.h < kh || input.w < kw {
                return Err(Error::Validation(format!(
                    "{}x{} input smaller than {kh}x{kw} kernel",
                    input.h, input.w
                )));
            }
            (input.h - kh + 1, input.w - kw + 1, (kh - 1) as isize, (kw - 1) as isize)
        }
        Padding::Same => (
            input.h,
            input.w,
            ((kh - 1) / 2) as isize,
            ((kw - 1) / 2) as isize,
        ),
    };
    let mut out = Activation::zeros(m_out, oh, ow);
    for m in 0..m_out {
        for y in 0..oh {
            for x in 0..ow {
                let mut acc = 0.0;
                for n in 0..n_in {
                    for i in 0..kh {
                        let sy = y as isize + off_h - i as isize;
                        if sy < 0 || sy >= input.h as isize {
                            continue;
                        }
                        for j in 0..kw {
                            let sx = x as isize + off_w - j as isize;
                            if sx < 0 || sx >= input.w as isize {
                                continue;
                            }
                            acc += weights[((m * n_in + n) * kh + i) * kw + j]
                                * input.at(n, sy as usize, sx as usize);
                        }
                    }
                }
                out.data[(m * oh + y) * ow + x] = acc;
            }
        }
    }
    Ok(out)
}

/// Fully connected layer as a 1x1 convolution over a flattened input.
pub fn fc_forward(input: &[f64], weights: &[f64], m: usize, n: usize) -> Result<Vec<f64>> {
    let act = Activation {
        c: input.len(),
        h: 1,
        w: 1,
        data: input.to_vec(),
    };
    Ok(conv2d_forward(&act, weights, [m, n, 1, 1], Padding::Valid)?.data)
}

fn default_stride() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub m: usize,
    pub n: usize,
    pub kh: usize,
    pub kw: usize,
    #[serde(default = "default_stride")]
    pub stride: usize,
    #[serde(default)]
    pub padding: Padding,
    /// Standard deviation of the zero-mean normal weights.
    pub sigma: f64,
    /// Apply `max(0, ·)` to this layer's output.
    #[serde(default)]
    pub relu: bool,
}

/// Distribution of the evaluation inputs.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum InputDistribution {
    #[default]
    StandardNormal,
    /// `max(0, z)` for standard normal `z`, the shape of post-ReLU features.
    RectifiedNormal,
    /// Standard normal field summed over each pixel's 3x3 neighbourhood and
    /// rescaled to unit variance: spatially correlated like natural images.
    SmoothNormal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticModelSpec {
    pub seed: u64,
    /// Spatial size of the input feature map.
    pub input_hw: [usize; 2],
    pub layers: Vec<LayerSpec>,
    #[serde(default)]
    pub input: InputDistribution,
}

impl SyntheticModelSpec {
    /// Checks shapes chain and returns each layer's output size `(C, H, W)`.
    pub fn validate(&self) -> Result<Vec<[usize; 3]>> {
        if self.layers.is_empty() {
            return Err(Error::Validation("model has no layers".into()));
        }
        let [h0, w0] = self.input_hw;
        if h0 == 0 || w0 == 0 {
            return Err(Error::Validation("input_hw entries must be positive".into()));
        }
        let mut cur = [self.layers[0].n, h0, w0];
        if self.layers[0].kind == LayerKind::Fc {
            cur = [self.layers[0].n, 1, 1];
            if h0 * w0 != 1 {
                return Err(Error::Validation(
                    "a leading fc layer needs input_hw [1, 1]".into(),
                ));
            }
        }
        let mut dims = Vec::with_capacity(self.layers.len());
        for (idx, l) in self.layers.iter().enumerate() {
            let bad = |msg: String| Error::Validation(format!("layer {idx}: {msg}"));
            if l.m == 0 || l.n == 0 || l.kh == 0 || l.kw == 0 {
                return Err(bad("dimensions must be positive".into()));
            }
            if l.stride != 1 {
                return Err(bad(format!("stride {} unsupported, only 1", l.stride)));
            }
            if !(l.sigma.is_finite() && l.sigma >= 0.0) {
                return Err(bad(format!("sigma {} must be finite and non-negative", l.sigma)));
            }
            match l.kind {
                LayerKind::Conv => {
                    if l.n != cur[0] {
                        return Err(bad(format!("expects {} input channels, gets {}", l.n, cur[0])));
                    }
                    cur = match l.padding {
                        Padding::Same => [l.m, cur[1], cur[2]],
                        Padding::Valid => {
                            if cur[1] < l.kh || cur[2] < l.kw {
                                return Err(bad(format!(
                                    "{}x{} input smaller than {}x{} kernel",
                                    cur[1], cur[2], l.kh, l.kw
                                )));
                            }
                            [l.m, cur[1] - l.kh + 1, cur[2] - l.kw + 1]
                        }
                    };
                }
                LayerKind::Fc => {
                    if l.kh != 1 || l.kw != 1 {
                        return Err(bad("fc layers need kh = kw = 1".into()));
                    }
                    let flat = cur.iter().product::<usize>();
                    if l.n != flat {
                        return Err(bad(format!("expects {} inputs, gets {flat}", l.n)));
                    }
                    cur = [l.m, 1, 1];
                }
            }
            dims.push(cur);
        }
        Ok(dims)
    }
}

fn layer_name(idx: usize, kind: LayerKind) -> String {
    format!("layer{idx}.{kind}")
}

/// Weights for every layer, drawn from the spec's seed and rounded to `f32`.
pub fn build_model(spec: &SyntheticModelSpec) -> Result<Vec<WeightTensor>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    spec.layers
        .iter()
        .enumerate()
        .map(|(idx, l)| {
            let count = l.m * l.n * l.kh * l.kw;
            let data: Vec<f64> = if l.sigma == 0.0 {
                vec![0.0; count]
            } else {
                let normal = Normal::new(0.0, l.sigma).expect("validated sigma");
                (0..count)
                    .map(|_| f64::from(normal.sample(&mut rng) as f32))
                    .collect()
            };
            WeightTensor::new(layer_name(idx, l.kind), l.kind, [l.m, l.n, l.kh, l.kw], data)
        })
        .collect()
}

fn run_layer(spec: &LayerSpec, weights: &[f64], input: &Activation) -> Result<Activation> {
    let shape = [spec.m, spec.n, spec.kh, spec.kw];
    let mut out = match spec.kind {
        LayerKind::Conv => conv2d_forward(input, weights, shape, spec.padding)?,
        LayerKind::Fc => Activation {
            c: spec.m,
            h: 1,
            w: 1,
            data: fc_forward(&input.data, weights, spec.m, spec.n)?,
        },
    };
    if spec.relu {
        out.data.iter_mut().for_each(|v| *v = v.max(0.0));
    }
    Ok(out)
}

/// Outputs of every layer for one input, full precision activations.
pub fn forward(
    spec: &SyntheticModelSpec,
    layers: &[&[f64]],
    input: &Activation,
) -> Result<Vec<Activation>> {
    let mut outs: Vec<Activation> = Vec::with_capacity(layers.len());
    for (l, w) in spec.layers.iter().zip(layers) {
        let x = outs.last().unwrap_or(input);
        let y = run_layer(l, w, x)?;
        outs.push(y);
    }
    Ok(outs)
}

fn mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputDescription {
    pub count: usize,
    pub distribution: InputDistribution,
    pub shape: [usize; 3],
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeResult {
    pub mode: Mode,
    /// Per layer: that layer quantized, fed the full-precision input.
    pub layer_mse: Vec<f64>,
    /// Whole model quantized.
    pub output_mse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub bit_width: u32,
    pub inputs: InputDescription,
    pub modes: Vec<ModeResult>,
}

impl EvalResult {
    pub fn output_mse(&self, mode: Mode) -> Option<f64> {
        self.modes.iter().find(|r| r.mode == mode).map(|r| r.output_mse)
    }
}

/// Inputs are drawn from a stream derived from the spec seed, so every mode
/// sees the same batch.
pub fn sample_inputs(spec: &SyntheticModelSpec, count: usize) -> Vec<Activation> {
    let c = spec.layers[0].n;
    let [h, w] = spec.input_hw;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5eed1_u64.rotate_left(40));
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    (0..count)
        .map(|_| {
            let z: Vec<f64> = (0..c * h * w).map(|_| normal.sample(&mut rng)).collect();
            let data = match spec.input {
                InputDistribution::StandardNormal => z,
                InputDistribution::RectifiedNormal => z.into_iter().map(|v| v.max(0.0)).collect(),
                InputDistribution::SmoothNormal => smooth3x3(&z, c, h, w),
            };
            Activation { c, h, w, data }
        })
        .collect()
}

fn smooth3x3(z: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; z.len()];
    for ch in 0..c {
        let plane = &z[ch * h * w..(ch + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let (mut sum, mut count) = (0.0, 0usize);
                for yy in y.saturating_sub(1)..(y + 2).min(h) {
                    for xx in x.saturating_sub(1)..(x + 2).min(w) {
                        sum += plane[yy * w + xx];
                        count += 1;
                    }
                }
                out[ch * h * w + y * w + x] = sum / (count as f64).sqrt();
            }
        }
    }
    out
}

/// Quantize the spec's model under each mode and measure output MSE.
pub fn evaluate(
    spec: &SyntheticModelSpec,
    bits: u32,
    input_count: usize,
    modes: &[Mode],
) -> Result<EvalResult> {
    let grid = QuantGrid::new(bits)?;
    let model = build_model(spec)?;
    let inputs = sample_inputs(spec, input_count);
    let fp_weights: Vec<&[f64]> = model.iter().map(|t| t.data.as_slice()).collect();
    let reference: Vec<Vec<Activation>> = inputs
        .iter()
        .map(|x| forward(spec, &fp_weights, x))
        .collect::<Result<_>>()?;

    let mut results = Vec::with_capacity(modes.len());
    for &mode in modes {
        let config = QuantConfig::new(grid, mode);
        let quantized: Vec<Vec<f64>> = model
            .iter()
            .map(|t| squant_tensor(t, &config).map(|q| q.dequantize()))
            .collect::<Result<_>>()?;
        let q_weights: Vec<&[f64]> = quantized.iter().map(Vec::as_slice).collect();

        let mut layer_mse = vec![0.0; model.len()];
        let mut output_mse = 0.0;
        for (x, fp) in inputs.iter().zip(&reference) {
            for (idx, layer) in spec.layers.iter().enumerate() {
                let layer_in = if idx == 0 { x } else { &fp[idx - 1] };
                let y = run_layer(layer, q_weights[idx], layer_in)?;
                layer_mse[idx] += mse(&y.data, &fp[idx].data);
            }
            let q_out = forward(spec, &q_weights, x)?;
            let last = model.len() - 1;
            output_mse += mse(&q_out[last].data, &fp[last].data);
        }
        let denom = input_count.max(1) as f64;
        layer_mse.iter_mut().for_each(|v| *v /= denom);
        results.push(ModeResult {
            mode,
            layer_mse,
            output_mse: output_mse / denom,
        });
    }

    Ok(EvalResult {
        bit_width: bits,
        inputs: InputDescription {
            count: input_count,
            distribution: spec.input,
            shape: [spec.layers[0].n, spec.input_hw[0], spec.input_hw[1]],
            seed: spec.seed,
        },
        modes: results,
    })
}

/// A 21-layer stand-in with ResNet18's weight shapes.
pub fn resnet18_shapes() -> Vec<(String, LayerKind, [usize; 4])> {
    let mut layers = vec![("conv1".to_string(), LayerKind::Conv, [64, 3, 7, 7])];
    let stages = [(64, 64), (64, 128), (128, 256), (256, 512)];
    for (s, &(cin, cout)) in stages.iter().enumerate() {
        for block in 0..2 {
            let first_in = if block == 0 { cin } else { cout };
            let p = format!("layer{}.{block}", s + 1);
            layers.push((format!("{p}.conv1"), LayerKind::Conv, [cout, first_in, 3, 3]));
            layers.push((format!("{p}.conv2"), LayerKind::Conv, [cout, cout, 3, 3]));
            if block == 0 && s > 0 {
                layers.push((format!("{p}.downsample"), LayerKind::Conv, [cout, cin, 1, 1]));
            }
        }
    }
    layers.push(("fc".to_string(), LayerKind::Fc, [1000, 512, 1, 1]));
    layers
}

/// Random weights with ResNet18's layer shapes, He-scaled normal per layer.
pub fn resnet18_like(seed: u64) -> Vec<WeightTensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    resnet18_shapes()
        .into_iter()
        .map(|(name, kind, shape)| {
            let fan_in = (shape[1] * shape[2] * shape[3]) as f64;
            let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
            let count = shape.iter().product();
            let data = (0..count)
                .map(|_| f64::from(normal.sample(&mut rng) as f32))
                .collect();
            WeightTensor::new(name, kind, shape, data).expect("valid resnet shape")
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_by_one_conv_mixes_channels() {
        let x = Activation {
            c: 2,
            h: 1,
            w: 2,
            data: vec![1.0, 2.0, 3.0, 4.0],
        };
        // out0 = in0, out1 = in0 + 2 * in1
        let w = [1.0, 0.0, 1.0, 2.0];
        let y = conv2d_forward(&x, &w, [2, 2, 1, 1], Padding::Same).unwrap();
        assert_eq!(y.data, vec![1.0, 2.0, 7.0, 10.0]);
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let x = Activation::zeros(3, 5, 5);
        let w: Vec<f64> = (0..2 * 3 * 9).map(|i| i as f64 * 0.1).collect();
        let y = conv2d_forward(&x, &w, [2, 3, 3, 3], Padding::Same).unwrap();
        assert!(y.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn valid_output_size_and_kernel_flip() {
        let x = Activation {
            c: 1,
            h: 5,
            w: 5,
            data: (0..25).map(f64::from).collect(),
        };
        // a single 1 at kernel (0, 0) picks X[h, w] shifted by (KH-1, KW-1)
        let mut w = vec![0.0; 9];
        w[0] = 1.0;
        let y = conv2d_forward(&x, &w, [1, 1, 3, 3], Padding::Valid).unwrap();
        assert_eq!((y.h, y.w), (3, 3));
        assert_eq!(y.at(0, 0, 0), x.at(0, 2, 2));
        assert_eq!(y.at(0, 2, 1), x.at(0, 4, 3));
        // and (2, 2) picks the unshifted X[h, w]
        let mut w = vec![0.0; 9];
        w[8] = 1.0;
        let y = conv2d_forward(&x, &w, [1, 1, 3, 3], Padding::Valid).unwrap();
        assert_eq!(y.at(0, 1, 2), x.at(0, 1, 2));
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let x = Activation::zeros(2, 3, 3);
        assert!(conv2d_forward(&x, &[0.0; 9], [1, 1, 3, 3], Padding::Same).is_err());
        assert!(conv2d_forward(&x, &[0.0; 17], [1, 2, 3, 3], Padding::Same).is_err());
        let tiny = Activation::zeros(1, 2, 2);
        assert!(conv2d_forward(&tiny, &[0.0; 9], [1, 1, 3, 3], Padding::Valid).is_err());
    }

    fn two_layer(seed: u64) -> SyntheticModelSpec {
        SyntheticModelSpec {
            seed,
            input_hw: [6, 6],
            input: InputDistribution::StandardNormal,
            layers: vec![
                LayerSpec {
                    kind: LayerKind::Conv,
                    m: 4,
                    n: 2,
                    kh: 3,
                    kw: 3,
                    stride: 1,
                    padding: Padding::Same,
                    sigma: 0.5,
                    relu: false,
                },
                LayerSpec {
                    kind: LayerKind::Conv,
                    m: 3,
                    n: 4,
                    kh: 3,
                    kw: 3,
                    stride: 1,
                    padding: Padding::Valid,
                    sigma: 0.5,
                    relu: false,
                },
            ],
        }
    }

    #[test]
    fn spec_validation() {
        let s = two_layer(1);
        assert_eq!(s.validate().unwrap(), vec![[4, 6, 6], [3, 4, 4]]);
        let mut bad = s.clone();
        bad.layers[1].n = 5;
        assert!(bad.validate().is_err());
        let mut bad = s.clone();
        bad.layers[0].stride = 2;
        assert!(bad.validate().is_err());
        let mut fc = s.clone();
        fc.layers.push(LayerSpec {
            kind: LayerKind::Fc,
            m: 10,
            n: 3 * 4 * 4,
            kh: 1,
            kw: 1,
            stride: 1,
            padding: Padding::Valid,
            sigma: 0.1,
            relu: false,
        });
        assert_eq!(fc.validate().unwrap()[2], [10, 1, 1]);
    }

    #[test]
    fn same_mode_twice_gives_same_mse() {
        let r = evaluate(&two_layer(3), 4, 8, &[Mode::E, Mode::E]).unwrap();
        assert_eq!(r.modes[0], r.modes[1]);
    }

    #[test]
    fn zero_weights_have_zero_error() {
        let mut s = two_layer(4);
        for l in &mut s.layers {
            l.sigma = 0.0;
        }
        let r = evaluate(&s, 4, 4, &Mode::ALL).unwrap();
        for m in &r.modes {
            assert_eq!(m.output_mse, 0.0);
            assert!(m.layer_mse.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn resnet18_has_21_weight_layers() {
        let shapes = resnet18_shapes();
        assert_eq!(shapes.len(), 21);
        let total: usize = shapes.iter().map(|(_, _, s)| s.iter().product::<usize>()).sum();
        // 11.7M parameters overall, of which these are the weights
        assert!((11_000_000..11_700_000).contains(&total), "{total}");
    }
}
