//! Physical-layer model: the Gaussian multiple-access uplink, per-frame
//! power enforcement, the noiseless broadcast downlink, and the error-free
//! digital bit pipe.
//!
//! Noise variance is fixed at one; SNR is varied through the transmit
//! power `P` alone.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::compress::BitBudget;
use crate::{Error, Result};

/// Uplink channel parameters.
#[derive(Clone, Copy, Debug)]
pub struct ChannelConfig {
    /// Channel uses per round, `T`.
    pub channel_uses: usize,
    /// Linear transmit SNR, `P` (noise variance is one).
    pub snr: f64,
    pub noise_seed: u64,
    /// 1 normally; 0 disables noise for deterministic tests.
    pub noise_scale: f64,
}

/// One device's uplink signal for a round.
#[derive(Clone, Debug)]
pub struct ChannelFrame {
    pub samples: Vec<f64>,
}

impl ChannelFrame {
    pub fn new(samples: Vec<f64>) -> Self {
        ChannelFrame { samples }
    }

    /// Measured power `||x||^2 / T`.
    pub fn measured_power(&self) -> f64 {
        let t = self.samples.len().max(1);
        self.samples.iter().map(|&v| v * v).sum::<f64>() / t as f64
    }
}

/// Received superposition plus per-frame power bookkeeping.
#[derive(Clone, Debug)]
pub struct MacOutput {
    pub received: Vec<f64>,
    pub frame_powers: Vec<f64>,
}

/// The shared Gaussian MAC. Holds the seeded noise stream; one `transmit`
/// per round barrier.
pub struct GaussianMac {
    cfg: ChannelConfig,
    rng: ChaCha8Rng,
}

impl GaussianMac {
    pub fn new(cfg: ChannelConfig) -> Self {
        GaussianMac {
            rng: ChaCha8Rng::seed_from_u64(cfg.noise_seed),
            cfg,
        }
    }

    pub fn config(&self) -> &ChannelConfig {
        &self.cfg
    }

    /// `y = sum_k x^k + z`, rejecting frames that are mis-sized or exceed
    /// the power constraint.
    pub fn transmit(&mut self, frames: &[ChannelFrame]) -> Result<MacOutput> {
        let t = self.cfg.channel_uses;
        let mut frame_powers = Vec::with_capacity(frames.len());
        for (k, f) in frames.iter().enumerate() {
            if f.samples.len() != t {
                return Err(Error::LengthMismatch {
                    left: f.samples.len(),
                    right: t,
                });
            }
            let p = f.measured_power();
            if p > self.cfg.snr + 1e-9 {
                return Err(Error::PowerViolation {
                    device: k + 1,
                    measured: p,
                    limit: self.cfg.snr,
                });
            }
            frame_powers.push(p);
        }
        let mut y = vec![0.0; t];
        for f in frames {
            for (yi, &xi) in y.iter_mut().zip(&f.samples) {
                *yi += xi;
            }
        }
        if self.cfg.noise_scale != 0.0 {
            for yi in y.iter_mut() {
                let z: f64 = StandardNormal.sample(&mut self.rng);
                *yi += self.cfg.noise_scale * z;
            }
        }
        Ok(MacOutput {
            received: y,
            frame_powers,
        })
    }
}

/// Noiseless downlink: identical copies of the payload for each device.
pub fn broadcast_downlink<T: Clone>(payload: &T, devices: usize) -> Vec<T> {
    vec![payload.clone(); devices]
}

/// Error-free delivery iff the payload fits the per-device budget; going
/// over means the protocol mis-sized `q`, which is a bug worth surfacing.
pub fn digital_pipe(bit_count: f64, budget: &BitBudget) -> Result<()> {
    if bit_count <= budget.bits {
        Ok(())
    } else {
        Err(Error::BudgetViolation {
            bits: bit_count,
            budget: budget.bits,
        })
    }
}

// ---------------------------------------------------------------------------
// Tests
// ---------------------------------------------------------------------------
