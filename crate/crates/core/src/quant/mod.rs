//! Uniform and logarithmic quantizers, percentile calibration and
//! quantize-dequantize simulation.
//!
//! Rounding is half-away-from-zero throughout. A log√2 code `q` is executed
//! as the log2 pair `(k, parity) = (⌊q/2⌋, q mod 2)` against the two scales
//! `s` and `s/√2`, so inference needs only power-of-two shifts.

pub mod model;

use std::f64::consts::SQRT_2;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use model::{forward_quantized, LayerQuant, Provenance, QuantModel};

/// Scales never drop below this, so constant channels stay well defined.
pub const SCALE_FLOOR: f64 = 1e-12;

/// Widest supported code. Logarithmic quantizers at this width are treated
/// as full precision.
pub const MAX_BITS: u32 = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    Uniform,
    Log2,
    #[serde(rename = "logsqrt2")]
    LogSqrt2,
}

impl Scheme {
    pub fn is_log(self) -> bool {
        !matches!(self, Scheme::Uniform)
    }
}

/// Channel axis is always the last one.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Granularity {
    PerLayer,
    PerChannel,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantParams {
    pub scheme: Scheme,
    pub bits: u32,
    pub granularity: Granularity,
    /// One entry per layer, or one per channel.
    pub scale: Vec<f64>,
    /// Uniform scheme only; empty for logarithmic schemes.
    pub zero_point: Vec<i64>,
}

/// Integer codes with the shape of the tensor they came from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Codes {
    pub shape: Vec<usize>,
    pub data: Vec<i64>,
}

fn check_bits(bits: u32) -> Result<()> {
    if (1..=MAX_BITS).contains(&bits) {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "bit width {bits} outside [1, {MAX_BITS}]"
        )))
    }
}

pub fn qmax(bits: u32) -> i64 {
    (1i64 << bits) - 1
}

impl QuantParams {
    pub fn uniform(bits: u32, scale: f64, zero_point: i64) -> Result<Self> {
        let qp = Self {
            scheme: Scheme::Uniform,
            bits,
            granularity: Granularity::PerLayer,
            scale: vec![scale],
            zero_point: vec![zero_point],
        };
        qp.validate()?;
        Ok(qp)
    }

    pub fn uniform_per_channel(bits: u32, scale: Vec<f64>, zero_point: Vec<i64>) -> Result<Self> {
        let qp = Self {
            scheme: Scheme::Uniform,
            bits,
            granularity: Granularity::PerChannel,
            scale,
            zero_point,
        };
        qp.validate()?;
        Ok(qp)
    }

    pub fn log(scheme: Scheme, bits: u32, scale: f64) -> Result<Self> {
        if !scheme.is_log() {
            return Err(Error::Usage(
                "QuantParams::log needs a logarithmic scheme".into(),
            ));
        }
        let qp = Self {
            scheme,
            bits,
            granularity: Granularity::PerLayer,
            scale: vec![scale],
            zero_point: vec![],
        };
        qp.validate()?;
        Ok(qp)
    }

    pub fn validate(&self) -> Result<()> {
        check_bits(self.bits)?;
        if self.scale.is_empty() {
            return Err(Error::Config("quantizer has no scale".into()));
        }
        if let Some(s) = self.scale.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
            return Err(Error::Config(format!(
                "quantizer scale must be positive and finite, got {s}"
            )));
        }
        if self.granularity == Granularity::PerLayer && self.scale.len() != 1 {
            return Err(Error::Config(
                "per-layer quantizer needs exactly one scale".into(),
            ));
        }
        match self.scheme {
            Scheme::Uniform => {
                if self.zero_point.len() != self.scale.len() {
                    return Err(Error::Config(format!(
                        "{} scales but {} zero-points",
                        self.scale.len(),
                        self.zero_point.len()
                    )));
                }
                let top = qmax(self.bits);
                if let Some(z) = self.zero_point.iter().find(|&&z| z < 0 || z > top) {
                    return Err(Error::Config(format!("zero-point {z} outside [0, {top}]")));
                }
            }
            _ => {
                if self.granularity != Granularity::PerLayer || !self.zero_point.is_empty() {
                    return Err(Error::Config(
                        "logarithmic quantizers are per-layer without zero-point".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn qmax(&self) -> i64 {
        qmax(self.bits)
    }

    /// Logarithmic quantizers at [`MAX_BITS`] pass values through unchanged.
    pub fn is_identity(&self) -> bool {
        self.scheme.is_log() && self.bits >= MAX_BITS
    }

    /// Per-element `(scale, zero_point)` lookup for a tensor of this shape.
    fn channel_count(&self, x_shape: &[usize]) -> Result<usize> {
        match self.granularity {
            Granularity::PerLayer => Ok(1),
            Granularity::PerChannel => {
                let last = *x_shape.last().unwrap_or(&0);
                if last != self.scale.len() {
                    return Err(Error::shape(
                        "per-channel quantizer",
                        x_shape,
                        &[self.scale.len()],
                    ));
                }
                Ok(last)
            }
        }
    }

    fn expect_scheme(&self, log: bool, op: &str) -> Result<()> {
        if self.scheme.is_log() != log {
            return Err(Error::Usage(format!(
                "{op} called with a {:?} quantizer",
                self.scheme
            )));
        }
        Ok(())
    }
}

/// Linear-interpolated percentile of sorted values, `p` in `[0, 100]`.
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    let rank = (p / 100.0).clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = rank - lo as f64;
    if lo == hi {
        sorted[lo]
    } else {
        sorted[lo] + (sorted[hi] - sorted[lo]) * frac
    }
}

/// Two-sided percentile range `[P(100 − p), P(p)]`. At `p = 100` this is
/// exactly `[min, max]`.
pub fn percentile_range(mut values: Vec<f64>, p: f64) -> Result<(f64, f64)> {
    if values.is_empty() {
        return Err(Error::Calibration("no samples to calibrate on".into()));
    }
    check_percentile(p)?;
    values.sort_by(f64::total_cmp);
    Ok((percentile(&values, 100.0 - p), percentile(&values, p)))
}

fn check_percentile(p: f64) -> Result<()> {
    if p > 0.0 && p <= 100.0 {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "percentile must be in (0, 100], got {p}"
        )))
    }
}

/// Scale and zero-point for the range `[lo, hi]`, widened to contain zero.
pub fn uniform_from_range(lo: f64, hi: f64, bits: u32) -> Result<(f64, i64)> {
    check_bits(bits)?;
    let top = qmax(bits);
    let (lo, hi) = (lo.min(0.0), hi.max(0.0));
    let s = ((hi - lo) / top as f64).max(SCALE_FLOOR);
    let z = (-lo / s).round().clamp(0.0, top as f64) as i64;
    Ok((s, z))
}

/// Percentile calibration of a uniform quantizer over a batch of samples.
///
/// Per-channel granularity pools each last-axis channel across the batch
/// and all leading positions.
pub fn uniform_calibrate(
    samples: &[Tensor],
    bits: u32,
    p: f64,
    granularity: Granularity,
) -> Result<QuantParams> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Calibration("empty calibration batch".into()))?;
    check_bits(bits)?;
    check_percentile(p)?;
    match granularity {
        Granularity::PerLayer => {
            let pooled: Vec<f64> = samples
                .iter()
                .flat_map(|t| t.data().iter().copied())
                .collect();
            let (lo, hi) = percentile_range(pooled, p)?;
            let (s, z) = uniform_from_range(lo, hi, bits)?;
            QuantParams::uniform(bits, s, z)
        }
        Granularity::PerChannel => {
            let (lo, hi) = channel_ranges(samples, first.last_dim(), p)?;
            let mut scale = Vec::with_capacity(lo.len());
            let mut zero = Vec::with_capacity(lo.len());
            for (l, h) in lo.into_iter().zip(hi) {
                let (s, z) = uniform_from_range(l, h, bits)?;
                scale.push(s);
                zero.push(z);
            }
            QuantParams::uniform_per_channel(bits, scale, zero)
        }
    }
}

/// Per-channel percentile ranges along the last axis.
pub fn channel_ranges(samples: &[Tensor], channels: usize, p: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    if samples.is_empty() {
        return Err(Error::Calibration("empty calibration batch".into()));
    }
    let mut pools: Vec<Vec<f64>> = vec![Vec::new(); channels];
    for t in samples {
        if t.last_dim() != channels {
            return Err(Error::shape("channel calibration", t.shape(), &[channels]));
        }
        for (i, &v) in t.data().iter().enumerate() {
            pools[i % channels].push(v);
        }
    }
    let mut lo = Vec::with_capacity(channels);
    let mut hi = Vec::with_capacity(channels);
    for pool in pools {
        let (l, h) = percentile_range(pool, p)?;
        lo.push(l);
        hi.push(h);
    }
    Ok((lo, hi))
}

/// Logarithmic quantizer with scale at the `p`-th percentile of the samples.
pub fn log_calibrate(samples: &[Tensor], scheme: Scheme, bits: u32, p: f64) -> Result<QuantParams> {
    if samples.is_empty() {
        return Err(Error::Calibration("empty calibration batch".into()));
    }
    check_percentile(p)?;
    let mut pooled: Vec<f64> = samples
        .iter()
        .flat_map(|t| t.data().iter().copied())
        .collect();
    if let Some(neg) = pooled.iter().find(|&&v| v < 0.0) {
        return Err(Error::Domain(format!(
            "logarithmic quantizer given negative sample {neg}"
        )));
    }
    pooled.sort_by(f64::total_cmp);
    let s = percentile(&pooled, p).max(SCALE_FLOOR);
    QuantParams::log(scheme, bits, s)
}

/// `clip(round(x/s) + z, 0, 2^b − 1)`.
pub fn uniform_quant(x: &Tensor, qp: &QuantParams) -> Result<Codes> {
    qp.expect_scheme(false, "uniform_quant")?;
    let ch = qp.channel_count(x.shape())?;
    let top = qp.qmax() as f64;
    let data = x
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let c = i % ch;
            ((v / qp.scale[c]).round() + qp.zero_point[c] as f64).clamp(0.0, top) as i64
        })
        .collect();
    Ok(Codes {
        shape: x.shape().to_vec(),
        data,
    })
}

/// `s·(q − z)`; codes outside `[0, 2^b − 1]` are rejected.
pub fn uniform_dequant(q: &Codes, qp: &QuantParams) -> Result<Tensor> {
    qp.expect_scheme(false, "uniform_dequant")?;
    let ch = qp.channel_count(&q.shape)?;
    check_codes(q, qp)?;
    let data = q
        .data
        .iter()
        .enumerate()
        .map(|(i, &c)| qp.scale[i % ch] * (c - qp.zero_point[i % ch]) as f64)
        .collect();
    Tensor::new(q.shape.clone(), data)
}

fn check_codes(q: &Codes, qp: &QuantParams) -> Result<()> {
    let top = qp.qmax();
    match q.data.iter().find(|&&c| c < 0 || c > top) {
        Some(c) => Err(Error::Domain(format!("code {c} outside [0, {top}]"))),
        None => Ok(()),
    }
}

/// Codes per unit of `log2`: 1 for log2, 2 for log√2.
fn codes_per_octave(scheme: Scheme) -> f64 {
    match scheme {
        Scheme::LogSqrt2 => 2.0,
        _ => 1.0,
    }
}

/// `clip(round(−log_base(x/s)), 0, 2^b − 1)`; zero maps to the largest code.
pub fn log_quant(x: &Tensor, qp: &QuantParams) -> Result<Codes> {
    qp.expect_scheme(true, "log_quant")?;
    let top = qp.qmax();
    let s = qp.scale[0];
    let per = codes_per_octave(qp.scheme);
    let mut data = Vec::with_capacity(x.len());
    for &v in x.data() {
        if v < 0.0 {
            return Err(Error::Domain(format!(
                "logarithmic quantizer given negative value {v}"
            )));
        }
        let q = if v == 0.0 {
            top
        } else {
            (-(v / s).log2() * per).round().clamp(0.0, top as f64) as i64
        };
        data.push(q);
    }
    Ok(Codes {
        shape: x.shape().to_vec(),
        data,
    })
}

/// `s · base^(−q)`.
pub fn log_dequant(q: &Codes, qp: &QuantParams) -> Result<Tensor> {
    qp.expect_scheme(true, "log_dequant")?;
    check_codes(q, qp)?;
    let s = qp.scale[0];
    let per = codes_per_octave(qp.scheme);
    let data = q
        .data
        .iter()
        .map(|&c| s * (-(c as f64) / per).exp2())
        .collect();
    Tensor::new(q.shape.clone(), data)
}

/// log√2 codes as log2 shifts `k = ⌊q/2⌋` plus a scale selector `q mod 2`.
pub fn logsqrt2_to_log2(q: &Codes) -> (Vec<i64>, Vec<u8>) {
    q.data
        .iter()
        .map(|&c| (c.div_euclid(2), c.rem_euclid(2) as u8))
        .unzip()
}

/// `(parity = 0 ? s : s/√2) · 2^(−k)`.
pub fn two_scale_dequant(k: &[i64], parity: &[u8], s: f64) -> Vec<f64> {
    let scales = [s, s / SQRT_2];
    k.iter()
        .zip(parity)
        .map(|(&k, &p)| scales[p as usize] * (-(k as f64)).exp2())
        .collect()
}

/// Quantize then dequantize, dispatched on the scheme. log√2 goes through
/// the two-scale log2 form used at inference.
pub fn fake_quant(x: &Tensor, qp: &QuantParams) -> Result<Tensor> {
    if qp.is_identity() {
        if let Some(v) = x.data().iter().find(|&&v| v < 0.0) {
            return Err(Error::Domain(format!(
                "logarithmic quantizer given negative value {v}"
            )));
        }
        return Ok(x.clone());
    }
    match qp.scheme {
        Scheme::Uniform => uniform_dequant(&uniform_quant(x, qp)?, qp),
        Scheme::Log2 => log_dequant(&log_quant(x, qp)?, qp),
        Scheme::LogSqrt2 => {
            let q = log_quant(x, qp)?;
            let (k, parity) = logsqrt2_to_log2(&q);
            Tensor::new(q.shape, two_scale_dequant(&k, &parity, qp.scale[0]))
        }
    }
}

/// Mean squared quantize-dequantize error.
pub fn fake_quant_mse(x: &Tensor, qp: &QuantParams) -> Result<f64> {
    let y = fake_quant(x, qp)?;
    Ok(x.data()
        .iter()
        .zip(y.data())
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        / x.len() as f64)
}
