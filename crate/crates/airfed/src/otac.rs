//! Analog over-the-air transport: random-projection compression with error
//! feedback for weight updates, AMP decoding of the superposed sparse sum,
//! and repetition-coded analog transmission for logit tables.
//!
//! The max-over-devices normalization scalars required by the analog
//! encoders are modelled as a zero-cost, noiseless control exchange before
//! each round and surface in the accounting as side information.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::channel::ChannelFrame;
use crate::compress::{error_feedback_update, thresh_q};
use crate::nn::LabelTable;
use crate::{Error, Result};

// ---------------------------------------------------------------------------
// Projection matrix
// ---------------------------------------------------------------------------

/// Dense `T x W` projection with i.i.d. `N(0, 1/T)` entries, regenerable
/// bitwise from its seed (shared between devices and the decoder).
pub struct ProjectionMatrix {
    rows: usize,
    cols: usize,
    seed: u64,
    data: Vec<f64>, // row-major
}

impl ProjectionMatrix {
    pub fn generate(rows: usize, cols: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std = (1.0 / rows as f64).sqrt();
        let data = (0..rows * cols)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                std * z
            })
            .collect();
        ProjectionMatrix {
            rows,
            cols,
            seed,
            data,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.data[t * self.cols..(t + 1) * self.cols]
    }

    /// `A x`.
    pub fn mul(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.cols);
        (0..self.rows).map(|t| dot8(self.row(t), x)).collect()
    }

    /// `A^T r`.
    pub fn mul_transpose(&self, r: &[f64]) -> Vec<f64> {
        assert_eq!(r.len(), self.rows);
        let mut out = vec![0.0; self.cols];
        for (t, &rt) in r.iter().enumerate() {
            if rt != 0.0 {
                for (o, &a) in out.iter_mut().zip(self.row(t)) {
                    *o += rt * a;
                }
            }
        }
        out
    }
}

/// Fixed 8-lane chunked dot (deterministic order, vectorizes under strict
/// FP).
fn dot8(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (xa, xb) in ca.zip(cb) {
        for k in 0..8 {
            acc[k] += xa[k] * xb[k];
        }
    }
    let mut tail = 0.0;
    for (&x, &y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    (((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]))) + tail
}

// ---------------------------------------------------------------------------
// AMP decoder
// ---------------------------------------------------------------------------

/// Soft-thresholding AMP parameters.
#[derive(Clone, Copy, Debug)]
pub struct AmpConfig {
    pub max_iters: usize,
    /// Stop when the relative residual change drops below this.
    pub tol: f64,
    /// Threshold multiplier: `tau_t = kappa * ||r||_2 / sqrt(T)`.
    pub kappa: f64,
}

impl Default for AmpConfig {
    fn default() -> Self {
        AmpConfig {
            max_iters: 50,
            tol: 1e-6,
            kappa: 1.5,
        }
    }
}

/// What the decoder did: iterations used and whether it bailed out to the
/// best earlier iterate after the residual blew up.
#[derive(Clone, Copy, Debug)]
pub struct AmpReport {
    pub iterations: usize,
    pub diverged: bool,
    pub final_residual_norm: f64,
}

fn soft(x: f64, tau: f64) -> f64 {
    if x > tau {
        x - tau
    } else if x < -tau {
        x + tau
    } else {
        0.0
    }
}

fn norm2(v: &[f64]) -> f64 {
    dot8(v, v).sqrt()
}

/// Estimate the sparse vector behind `y = A x + noise` by soft-thresholding
/// AMP with the Onsager correction
/// `r_t = y - A x_t + (W/T) * r_{t-1} * <eta'>`.
///
/// On divergence (residual norm growing 10x over its minimum) the best
/// iterate seen so far is returned and flagged.
pub fn amp_decode(y: &[f64], a: &ProjectionMatrix, cfg: &AmpConfig) -> (Vec<f64>, AmpReport) {
    let t = a.rows();
    let w = a.cols();
    assert_eq!(y.len(), t);
    let sqrt_t = (t as f64).sqrt();
    let y_norm = norm2(y);

    let mut x = vec![0.0; w];
    let mut r = y.to_vec();
    let mut r_norm = norm2(&r);
    let mut best_x = x.clone();
    let mut min_norm = r_norm;
    let mut report = AmpReport {
        iterations: 0,
        diverged: false,
        final_residual_norm: r_norm,
    };

    for it in 1..=cfg.max_iters {
        report.iterations = it;
        let tau = cfg.kappa * r_norm / sqrt_t;
        let mut pseudo = a.mul_transpose(&r);
        for (p, &xi) in pseudo.iter_mut().zip(&x) {
            *p += xi;
        }
        let mut live = 0usize;
        for (xi, &p) in x.iter_mut().zip(&pseudo) {
            *xi = soft(p, tau);
            if *xi != 0.0 {
                live += 1;
            }
        }
        let onsager = (w as f64 / t as f64) * (live as f64 / w as f64);
        let ax = a.mul(&x);
        let mut r_new = vec![0.0; t];
        let mut diff_sq = 0.0;
        for i in 0..t {
            r_new[i] = y[i] - ax[i] + onsager * r[i];
            let d = r_new[i] - r[i];
            diff_sq += d * d;
        }
        let new_norm = norm2(&r_new);
        report.final_residual_norm = new_norm;

        if new_norm < min_norm {
            min_norm = new_norm;
            best_x.copy_from_slice(&x);
        }
        if new_norm > 10.0 * min_norm {
            report.diverged = true;
            return (best_x, report);
        }
        let converged =
            diff_sq.sqrt() <= cfg.tol * r_norm.max(1e-300) || new_norm <= 1e-12 * y_norm.max(1e-300);
        r = r_new;
        r_norm = new_norm;
        if converged {
            break;
        }
    }
    (x, report)
}

// ---------------------------------------------------------------------------
// Analog FL encoding
// ---------------------------------------------------------------------------

/// A device's prepared analog weight-update transmission: the thresholded
/// vector it commits to (error feedback runs against `v`, since the device
/// never sees the AMP reconstruction) and its projection.
#[derive(Clone, Debug)]
pub struct AnalogFlEncoding {
    pub v: Vec<f64>,
    pub projected: Vec<f64>,
}

/// `v = thresh_q(update + residual, q)`, projected through `A`; the new
/// residual treats `v` itself as transmitted.
pub fn analog_fl_prepare(
    update: &[f64],
    residual: &[f64],
    a: &ProjectionMatrix,
    q: usize,
) -> Result<(AnalogFlEncoding, Vec<f64>)> {
    if update.len() != residual.len() {
        return Err(Error::LengthMismatch {
            left: update.len(),
            right: residual.len(),
        });
    }
    let carried: Vec<f64> = update.iter().zip(residual).map(|(&u, &r)| u + r).collect();
    let v = thresh_q(&carried, q)?;
    let residual = error_feedback_update(residual, update, &v)?;
    let projected = a.mul(&v);
    Ok((AnalogFlEncoding { v, projected }, residual))
}

/// Power scaling shared by all devices: largest gamma with
/// `gamma^2 * max_k ||A v^k||^2 / T <= P`, tight at the loudest device.
pub fn analog_fl_gamma(projected_norms_sq: &[f64], t: usize, p: f64) -> Result<f64> {
    let max = projected_norms_sq.iter().cloned().fold(0.0, f64::max);
    if max == 0.0 {
        // every device sends zero; any positive scaling works
        return Ok(1.0);
    }
    let gamma = (t as f64 * p / max).sqrt();
    if gamma <= 0.0 || !gamma.is_finite() {
        return Err(Error::BadScaling);
    }
    Ok(gamma)
}

pub fn analog_fl_frame(enc: &AnalogFlEncoding, gamma: f64) -> ChannelFrame {
    ChannelFrame::new(enc.projected.iter().map(|&v| gamma * v).collect())
}

// ---------------------------------------------------------------------------
// Analog FD encoding (repetition code)
// ---------------------------------------------------------------------------

/// Bandwidth expansion: `rho = floor(T / L^2)`, requiring `T >= L^2`.
pub fn choose_rho(t: usize, l: usize) -> Result<usize> {
    let l2 = l * l;
    if t < l2 {
        return Err(Error::RhoUnsupported { t, l2 });
    }
    Ok(t / l2)
}

/// `||R_rho s||^2 = rho * ||s||^2` for the flattened table.
pub fn repetition_norm_sq(table: &LabelTable, rho: usize) -> f64 {
    rho as f64 * dot8(table.data(), table.data())
}

/// Flatten label-major, repeat `rho` times, scale by
/// `sqrt(T P / shared_norm)`, zero-pad to `T` channel uses.
pub fn analog_fd_encode(
    table: &LabelTable,
    rho: usize,
    t: usize,
    p: f64,
    shared_norm: f64,
) -> Result<ChannelFrame> {
    let block = table.labels() * table.dim();
    if rho * block > t {
        return Err(Error::RhoUnsupported { t, l2: block });
    }
    let scale = analog_fd_scale(t, p, shared_norm);
    let mut samples = vec![0.0; t];
    for m in 0..rho {
        for (s, &v) in samples[m * block..(m + 1) * block].iter_mut().zip(table.data()) {
            *s = scale * v;
        }
    }
    Ok(ChannelFrame::new(samples))
}

/// `sqrt(T P / shared_norm)`; zero when every device's table is zero.
pub fn analog_fd_scale(t: usize, p: f64, shared_norm: f64) -> f64 {
    if shared_norm <= 0.0 {
        0.0
    } else {
        (t as f64 * p / shared_norm).sqrt()
    }
}

/// Average the `rho` repetitions per coordinate, then undo the encoder
/// scaling and the device count to estimate the device-average table.
pub fn analog_fd_decode(y: &[f64], rho: usize, devices: usize, scale: f64, labels: usize, dim: usize) -> LabelTable {
    let block = labels * dim;
    let mut table = LabelTable::zeros(labels, dim);
    if scale == 0.0 {
        return table;
    }
    let denom = scale * devices as f64;
    let data = table.data_mut();
    for (j, d) in data.iter_mut().enumerate() {
        let mut acc = 0.0;
        for m in 0..rho {
            acc += y[m * block + j];
        }
        *d = acc / rho as f64 / denom;
    }
    table
}

// ---------------------------------------------------------------------------
// Tests
// ---------------------------------------------------------------------------
