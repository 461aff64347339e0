//! Average power control, block Rician fading with AWGN, zero-forcing
//! equalization and the SNR-to-feature-budget mapping.
//!
//! Complex symbols are `Complex64` here. The differentiable versions used
//! during training live on the autodiff graph (see [`crate::link`]) and work
//! on interleaved `(re, im)` real pairs.

use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{rng_from, SimRng};

/// Fading magnitudes at or below this are treated as a deep fade.
pub const DEEP_FADE_FLOOR: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChannelConfig {
    pub snr_db: f64,
    /// Rician K-factor `r`: ratio of line-of-sight to scattered power.
    pub rician_factor: f64,
    pub avg_power: f64,
    /// Slot duration `T` in seconds.
    pub slot_duration: f64,
    /// Bandwidth in hertz.
    pub bandwidth: f64,
    pub bits_per_feature: u32,
}

impl Default for ChannelConfig {
    fn default() -> Self {
        ChannelConfig {
            snr_db: 0.0,
            rician_factor: 2.0,
            avg_power: 1.0,
            slot_duration: 1e-3,
            bandwidth: 6.4e6,
            bits_per_feature: 64,
        }
    }
}

impl ChannelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.avg_power > 0.0) {
            return Err(Error::config("channel.avg_power", "must be > 0"));
        }
        if !(self.rician_factor >= 0.0) {
            return Err(Error::config("channel.rician_factor", "must be >= 0"));
        }
        if !(self.slot_duration > 0.0) {
            return Err(Error::config("channel.slot_duration", "must be > 0"));
        }
        if !(self.bandwidth > 0.0) {
            return Err(Error::config("channel.bandwidth", "must be > 0"));
        }
        if self.bits_per_feature == 0 {
            return Err(Error::config(
                "channel.bits_per_feature",
                "must be positive",
            ));
        }
        if !self.snr_db.is_finite() {
            return Err(Error::config("channel.snr_db", "must be finite"));
        }
        Ok(())
    }

    pub fn with_snr(&self, snr_db: f64) -> Self {
        ChannelConfig {
            snr_db,
            ..self.clone()
        }
    }

    /// Time-bandwidth product `T·Wb`.
    pub fn time_bandwidth(&self) -> f64 {
        self.slot_duration * self.bandwidth
    }
}

/// One block-fading slot: a single coefficient for every transmitted symbol.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelRealization {
    pub h: Complex64,
    pub noise: Vec<Complex64>,
    pub seed: u64,
}

impl ChannelRealization {
    /// Draw `h` and `len` noise samples from a single seeded stream.
    pub fn draw(rician_factor: f64, sigma2: f64, len: usize, seed: u64) -> Self {
        let mut rng = rng_from(seed, &[]);
        let h = rician_from(&mut rng, rician_factor);
        let noise = noise_from(&mut rng, len, sigma2);
        ChannelRealization { h, noise, seed }
    }

    pub fn noiseless(h: Complex64, len: usize) -> Self {
        ChannelRealization {
            h,
            noise: vec![Complex64::new(0.0, 0.0); len],
            seed: 0,
        }
    }
}

/// `z = sqrt(P·B) · z̃ / ‖z̃‖₂`.
pub fn power_normalize(z_tilde: &[Complex64], avg_power: f64) -> Result<Vec<Complex64>> {
    if z_tilde.is_empty() {
        return Err(Error::contract("power_normalize needs at least one symbol"));
    }
    let norm = z_tilde.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(Error::DegenerateInput);
    }
    let scale = (avg_power * z_tilde.len() as f64).sqrt() / norm;
    Ok(z_tilde.iter().map(|z| z * scale).collect())
}

/// Rician coefficient `h ~ CN(sqrt(r/(r+1)), 1/(r+1))`.
pub fn rician_from(rng: &mut SimRng, rician_factor: f64) -> Complex64 {
    let los = (rician_factor / (rician_factor + 1.0)).sqrt();
    let sd = (0.5 / (rician_factor + 1.0)).sqrt();
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    Complex64::new(los + sd * re, sd * im)
}

pub fn sample_rician(rician_factor: f64, seed: u64) -> Complex64 {
    rician_from(&mut rng_from(seed, &[]), rician_factor)
}

/// `len` i.i.d. `CN(0, σ²)` samples.
pub fn noise_from(rng: &mut SimRng, len: usize, sigma2: f64) -> Vec<Complex64> {
    let sd = (sigma2 / 2.0).sqrt();
    (0..len)
        .map(|_| {
            let re: f64 = rng.sample(StandardNormal);
            let im: f64 = rng.sample(StandardNormal);
            Complex64::new(sd * re, sd * im)
        })
        .collect()
}

/// Total complex noise variance for a given SNR: `σ² = P / 10^(snr/10)`.
pub fn noise_sigma(snr_db: f64, avg_power: f64) -> f64 {
    avg_power / 10f64.powf(snr_db / 10.0)
}

/// `ẑ_i = h·z_i + n_i`.
pub fn transmit(z: &[Complex64], realization: &ChannelRealization) -> Result<Vec<Complex64>> {
    if z.len() != realization.noise.len() {
        return Err(Error::Shape {
            op: "transmit",
            lhs: vec![z.len()],
            rhs: vec![realization.noise.len()],
        });
    }
    Ok(z.iter()
        .zip(&realization.noise)
        .map(|(zi, ni)| realization.h * zi + ni)
        .collect())
}

/// Zero-forcing with perfect CSI: `ẑ / h`.
pub fn equalize(z_hat: &[Complex64], h: Complex64) -> Result<Vec<Complex64>> {
    check_fade(h)?;
    Ok(z_hat.iter().map(|z| z / h).collect())
}

pub fn check_fade(h: Complex64) -> Result<()> {
    if h.norm() <= DEEP_FADE_FLOOR {
        return Err(Error::DeepFade {
            magnitude: h.norm(),
        });
    }
    Ok(())
}

/// Bits that fit in one slot: `V = T·Wb·log2(1 + SNR)`.
pub fn slot_bits(cfg: &ChannelConfig) -> f64 {
    let snr_linear = 10f64.powf(cfg.snr_db / 10.0);
    cfg.time_bandwidth() * (1.0 + snr_linear).log2()
}

/// Unclamped number of features that fit in one slot.
pub fn raw_budget(cfg: &ChannelConfig) -> usize {
    (slot_bits(cfg) / f64::from(cfg.bits_per_feature)).floor() as usize
}

/// `B = min(floor(V / bits_per_feature), L)`.
pub fn feature_budget(cfg: &ChannelConfig, len: usize) -> usize {
    raw_budget(cfg).min(len)
}

/// Split one slot's budget across `parts` parallel pipelines (single-task
/// coding shares the channel), each clamped to its own length `len`.
pub fn split_budget(cfg: &ChannelConfig, len: usize, parts: usize) -> Vec<usize> {
    let raw = raw_budget(cfg);
    let (share, extra) = (raw / parts, raw % parts);
    (0..parts)
        .map(|k| (share + usize::from(k < extra)).min(len))
        .collect()
}
