//! Quantization grid, per-output-channel scale selection, rounding and
//! dequantization.
//!
//! Weights are held as `f64` internally. Codes are `i32` regardless of the
//! bit width; narrowing is left to whoever packs them for a target device.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKind {
    Conv,
    Fc,
}

impl fmt::Display for LayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerKind::Conv => f.pad("conv"),
            LayerKind::Fc => f.pad("fc"),
        }
    }
}

/// A layer's weights in `(M, N, KH, KW)` order, row-major.
///
/// Index `(m, n, i)` with `i < kh * kw` lives at `(m * n_in + n) * k + i`.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightTensor {
    pub name: String,
    pub kind: LayerKind,
    pub m: usize,
    pub n: usize,
    pub kh: usize,
    pub kw: usize,
    pub data: Vec<f64>,
}

impl WeightTensor {
    pub fn new(
        name: impl Into<String>,
        kind: LayerKind,
        shape: [usize; 4],
        data: Vec<f64>,
    ) -> Result<Self> {
        let [m, n, kh, kw] = shape;
        let name = name.into();
        if shape.contains(&0) {
            return Err(Error::Validation(format!(
                "tensor `{name}` has a zero dimension in shape {shape:?}"
            )));
        }
        if kind == LayerKind::Fc && (kh != 1 || kw != 1) {
            return Err(Error::Validation(format!(
                "fc tensor `{name}` must have KH = KW = 1, got {kh}x{kw}"
            )));
        }
        let expected = m * n * kh * kw;
        if data.len() != expected {
            return Err(Error::Validation(format!(
                "tensor `{name}` has {} values, shape {shape:?} needs {expected}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Validation(format!(
                "tensor `{name}` has a non-finite weight at flat index {pos}"
            )));
        }
        Ok(Self {
            name,
            kind,
            m,
            n,
            kh,
            kw,
            data,
        })
    }

    /// Elements per kernel.
    pub fn k(&self) -> usize {
        self.kh * self.kw
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.m, self.n, self.kh, self.kw]
    }

    pub fn channel_len(&self) -> usize {
        self.n * self.k()
    }

    pub fn channel(&self, m: usize) -> &[f64] {
        let len = self.channel_len();
        &self.data[m * len..(m + 1) * len]
    }

    pub fn channels(&self) -> std::slice::ChunksExact<'_, f64> {
        self.data.chunks_exact(self.channel_len())
    }

    /// Splits a flat index into `(m, n, i)`.
    pub fn unravel(&self, flat: usize) -> (usize, usize, usize) {
        let k = self.k();
        let i = flat % k;
        let n = (flat / k) % self.n;
        let m = flat / self.channel_len();
        (m, n, i)
    }
}

/// Symmetric signed integer grid `[-2^(b-1), 2^(b-1) - 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantGrid {
    bits: u32,
}

impl QuantGrid {
    pub const MIN_BITS: u32 = 2;
    pub const MAX_BITS: u32 = 8;

    pub fn new(bits: u32) -> Result<Self> {
        if !(Self::MIN_BITS..=Self::MAX_BITS).contains(&bits) {
            return Err(Error::Validation(format!(
                "bit width {bits} outside [{}, {}]",
                Self::MIN_BITS,
                Self::MAX_BITS
            )));
        }
        Ok(Self { bits })
    }

    pub fn bits(self) -> u32 {
        self.bits
    }

    pub fn min(self) -> i32 {
        -(1 << (self.bits - 1))
    }

    pub fn max(self) -> i32 {
        (1 << (self.bits - 1)) - 1
    }

    pub fn contains(self, code: i32) -> bool {
        (self.min()..=self.max()).contains(&code)
    }
}

/// Which progressive stages run after element-wise rounding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    E,
    Ek,
    Ec,
    Ekc,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::E, Mode::Ek, Mode::Ec, Mode::Ekc];

    pub fn kernel_stage(self) -> bool {
        matches!(self, Mode::Ek | Mode::Ekc)
    }

    pub fn channel_stage(self) -> bool {
        matches!(self, Mode::Ec | Mode::Ekc)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::E => "e",
            Mode::Ek => "ek",
            Mode::Ec => "ec",
            Mode::Ekc => "ekc",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('&', "").as_str() {
            "e" => Ok(Mode::E),
            "ek" => Ok(Mode::Ek),
            "ec" => Ok(Mode::Ec),
            "ekc" => Ok(Mode::Ekc),
            other => Err(Error::Validation(format!(
                "unknown mode `{other}` (expected e, ek, ec or ekc)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantConfig {
    pub grid: QuantGrid,
    pub mode: Mode,
    /// Largest element perturbation a flip may produce.
    pub r_e: f64,
    /// Largest kernel CASE a channel-stage flip may leave behind.
    pub r_k: f64,
    /// Channel CASE bound checked after the channel stage.
    pub r_c: f64,
    /// Maximum number of kernels flipped per channel in the channel stage.
    pub topk_cap_c: usize,
}

impl QuantConfig {
    pub const DEFAULT_R_E: f64 = 1.0;
    pub const DEFAULT_R_K: f64 = 1.0;
    pub const DEFAULT_R_C: f64 = 0.5;
    pub const DEFAULT_TOPK_CAP_C: usize = 32;

    pub fn new(grid: QuantGrid, mode: Mode) -> Self {
        Self {
            grid,
            mode,
            r_e: Self::DEFAULT_R_E,
            r_k: Self::DEFAULT_R_K,
            r_c: Self::DEFAULT_R_C,
            topk_cap_c: Self::DEFAULT_TOPK_CAP_C,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, r) in [("r_e", self.r_e), ("r_k", self.r_k), ("r_c", self.r_c)] {
            if !r.is_finite() || r < 0.5 {
                return Err(Error::Validation(format!(
                    "{name} = {r} must be finite and at least 0.5"
                )));
            }
        }
        if self.topk_cap_c == 0 {
            return Err(Error::Validation("topk_cap_c must be positive".into()));
        }
        Ok(())
    }
}

/// Symmetric max-abs scale for one output channel.
///
/// The result is rounded to the nearest `f32` so the value written to disk is
/// exactly the value the codes were computed against.
pub fn compute_scale(channel: &[f64], grid: QuantGrid) -> Result<f64> {
    if channel.is_empty() {
        return Err(Error::Validation("empty channel".into()));
    }
    let mut max_abs = 0.0f64;
    for &w in channel {
        if !w.is_finite() {
            return Err(Error::Validation(format!("non-finite weight {w}")));
        }
        max_abs = max_abs.max(w.abs());
    }
    if max_abs == 0.0 {
        return Ok(1.0);
    }
    let scale = (max_abs / f64::from(grid.max())) as f32;
    // f32 underflow on subnormal channels
    if scale > 0.0 && scale.is_finite() {
        Ok(f64::from(scale))
    } else {
        Ok(f64::from(f32::MIN_POSITIVE))
    }
}

/// Round half away from zero, then clip to the grid.
pub fn round_to_grid(scaled: f64, grid: QuantGrid) -> i32 {
    let r = scaled.round();
    if r <= f64::from(grid.min()) {
        grid.min()
    } else if r >= f64::from(grid.max()) {
        grid.max()
    } else {
        r as i32
    }
}

/// `w_hat[m, ..] = scales[m] * codes[m, ..]`.
pub fn dequantize(codes: &[i32], scales: &[f64]) -> Result<Vec<f64>> {
    if scales.is_empty() || !codes.len().is_multiple_of(scales.len()) {
        return Err(Error::Validation(format!(
            "{} codes cannot be split evenly over {} channel scales",
            codes.len(),
            scales.len()
        )));
    }
    let per_channel = codes.len() / scales.len();
    if per_channel == 0 {
        return Err(Error::Validation("no codes per channel".into()));
    }
    Ok(codes
        .chunks_exact(per_channel)
        .zip(scales)
        .flat_map(|(chunk, &s)| chunk.iter().map(move |&c| s * f64::from(c)))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid4() -> QuantGrid {
        QuantGrid::new(4).unwrap()
    }

    #[test]
    fn grid_bounds() {
        let g = grid4();
        assert_eq!((g.min(), g.max()), (-8, 7));
        let g2 = QuantGrid::new(2).unwrap();
        assert_eq!((g2.min(), g2.max()), (-2, 1));
        let g8 = QuantGrid::new(8).unwrap();
        assert_eq!((g8.min(), g8.max()), (-128, 127));
        assert!(QuantGrid::new(1).is_err());
        assert!(QuantGrid::new(9).is_err());
    }

    #[test]
    fn scale_examples() {
        let g = grid4();
        assert_eq!(compute_scale(&[1.0, -7.0, 2.0], g).unwrap(), 1.0);
        assert_eq!(compute_scale(&[0.0, 0.0, -0.0], g).unwrap(), 1.0);
        assert_eq!(compute_scale(&[3.5, 0.1], g).unwrap(), 0.5);
        assert!(compute_scale(&[1.0, f64::NAN], g).is_err());
        assert!(compute_scale(&[f64::INFINITY], g).is_err());
        assert!(compute_scale(&[], g).is_err());
    }

    #[test]
    fn scale_is_f32_exact() {
        let s = compute_scale(&[0.3, -1.1], grid4()).unwrap();
        assert_eq!(f64::from(s as f32), s);
        assert!(s > 0.0);
    }

    #[test]
    fn rounding_examples() {
        let g = grid4();
        assert_eq!(round_to_grid(0.5, g), 1);
        assert_eq!(round_to_grid(-0.5, g), -1);
        assert_eq!(round_to_grid(7.9, g), 7);
        assert_eq!(round_to_grid(-9.2, g), -8);
        assert_eq!(round_to_grid(0.49, g), 0);
        assert_eq!(round_to_grid(-2.5, g), -3);
    }

    #[test]
    fn dequantize_examples() {
        assert_eq!(dequantize(&[3], &[0.5]).unwrap(), vec![1.5]);
        assert_eq!(dequantize(&[0, 0], &[0.25, 9.0]).unwrap(), vec![0.0, 0.0]);
        assert_eq!(
            dequantize(&[1, 2, -1, -2], &[2.0, 0.5]).unwrap(),
            vec![2.0, 4.0, -0.5, -1.0]
        );
        assert!(dequantize(&[1, 2, 3], &[1.0, 1.0]).is_err());
        assert!(dequantize(&[1], &[]).is_err());
    }

    #[test]
    fn on_grid_weights_are_fixed_points() {
        let g = grid4();
        let s = 0.25;
        let w = [0.75, -2.0, 1.75, 0.0];
        let codes: Vec<i32> = w.iter().map(|&x| round_to_grid(x / s, g)).collect();
        assert_eq!(dequantize(&codes, &[s]).unwrap(), w.to_vec());
    }

    #[test]
    fn mode_parsing() {
        assert_eq!("EKC".parse::<Mode>().unwrap(), Mode::Ekc);
        assert_eq!("E&K".parse::<Mode>().unwrap(), Mode::Ek);
        assert_eq!("ec".parse::<Mode>().unwrap(), Mode::Ec);
        assert!("kc".parse::<Mode>().is_err());
        assert!(Mode::Ekc.kernel_stage() && Mode::Ekc.channel_stage());
        assert!(!Mode::Ec.kernel_stage() && Mode::Ec.channel_stage());
    }

    #[test]
    fn config_defaults_and_validation() {
        let c = QuantConfig::new(grid4(), Mode::Ekc);
        assert_eq!((c.r_e, c.r_k, c.r_c, c.topk_cap_c), (1.0, 1.0, 0.5, 32));
        assert!(c.validate().is_ok());
        let bad = QuantConfig { r_c: 0.2, ..c };
        assert!(bad.validate().is_err());
        let bad = QuantConfig { topk_cap_c: 0, ..c };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn weight_tensor_validation() {
        assert!(WeightTensor::new("w", LayerKind::Conv, [2, 1, 3, 3], vec![0.0; 18]).is_ok());
        assert!(WeightTensor::new("w", LayerKind::Conv, [2, 1, 3, 3], vec![0.0; 17]).is_err());
        assert!(WeightTensor::new("w", LayerKind::Fc, [2, 1, 3, 3], vec![0.0; 18]).is_err());
        assert!(WeightTensor::new("w", LayerKind::Conv, [0, 1, 1, 1], vec![]).is_err());
        assert!(WeightTensor::new("w", LayerKind::Fc, [1, 2, 1, 1], vec![0.0, f64::NAN]).is_err());
        let t = WeightTensor::new("w", LayerKind::Conv, [2, 3, 2, 2], vec![0.0; 24]).unwrap();
        assert_eq!(t.unravel(0), (0, 0, 0));
        assert_eq!(t.unravel(13), (1, 0, 1));
        assert_eq!(t.unravel(23), (1, 2, 3));
    }

    proptest::proptest! {
        #[test]
        fn codes_stay_on_grid(bits in 2u32..=8, w in proptest::collection::vec(-50.0f64..50.0, 1..40)) {
            let g = QuantGrid::new(bits).unwrap();
            let s = compute_scale(&w, g).unwrap();
            for &x in &w {
                let c = round_to_grid(x / s, g);
                proptest::prop_assert!(g.contains(c));
                // max-abs scaling never clips
                proptest::prop_assert!((f64::from(c) - x / s).abs() <= 0.5 + 1e-9);
            }
        }

        #[test]
        fn requantizing_dequantized_is_idempotent(bits in 2u32..=8, w in proptest::collection::vec(-5.0f64..5.0, 1..40)) {
            let g = QuantGrid::new(bits).unwrap();
            let s = compute_scale(&w, g).unwrap();
            let codes: Vec<i32> = w.iter().map(|&x| round_to_grid(x / s, g)).collect();
            let w_hat = dequantize(&codes, &[s]).unwrap();
            let again: Vec<i32> = w_hat.iter().map(|&x| round_to_grid(x / s, g)).collect();
            proptest::prop_assert_eq!(codes, again);
        }
    }
}
