//! Digital-uplink source coding: sparsification operators, the uniform
//! quantizer, error-feedback accumulation, and exact bit-budget arithmetic.
//!
//! Bit counts are real numbers (index sets are accounted at `log2 C(n, q)`
//! bits, the combinatorial optimum); payloads keep plain index lists in
//! memory and only the accounting is exact.

use crate::nn::LabelTable;
use crate::{Error, Result};

// ---------------------------------------------------------------------------
// Types
// ---------------------------------------------------------------------------

/// Per-device accumulated compression error (error feedback).
#[derive(Clone, Debug)]
pub struct ErrorAccumulator {
    pub residual: Vec<f64>,
}

impl ErrorAccumulator {
    pub fn zeros(n: usize) -> Self {
        ErrorAccumulator {
            residual: vec![0.0; n],
        }
    }
}

/// Per-device, per-round digital bit budget over the shared uplink.
#[derive(Clone, Copy, Debug)]
pub struct BitBudget {
    pub channel_uses: usize,
    pub devices: usize,
    /// Linear transmit SNR (noise variance is one).
    pub snr: f64,
    pub quant_bits: u32,
    /// The budget `B_D` in bits.
    pub bits: f64,
}

impl BitBudget {
    pub fn new(channel_uses: usize, devices: usize, snr: f64, quant_bits: u32) -> Self {
        BitBudget {
            channel_uses,
            devices,
            snr,
            quant_bits,
            bits: budget_bd(channel_uses, devices, snr),
        }
    }
}

/// Dequantized values carried by a payload.
#[derive(Clone, Debug, PartialEq)]
pub enum PayloadValues {
    /// All support entries share one signed value (sign-mean sparsifier).
    Shared(f64),
    /// One value per support entry (threshold sparsifier).
    PerEntry(Vec<f64>),
}

/// Sparse digital payload: support indices, dequantized values, and the
/// exact bit accounting for its mode.
#[derive(Clone, Debug, PartialEq)]
pub struct SparsePayload {
    /// Strictly increasing indices, < `dim`.
    pub support: Vec<u32>,
    pub values: PayloadValues,
    pub dim: usize,
    pub bit_count: f64,
    /// Quantizer range, transmitted as side information outside the budget.
    pub range: f64,
}

impl SparsePayload {
    pub fn check(&self) -> Result<()> {
        if self.support.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::ShapeMismatch("payload support not increasing".into()));
        }
        if self.support.last().is_some_and(|&i| i as usize >= self.dim) {
            return Err(Error::ShapeMismatch("payload support out of range".into()));
        }
        if let PayloadValues::PerEntry(v) = &self.values {
            if v.len() != self.support.len() {
                return Err(Error::LengthMismatch {
                    left: v.len(),
                    right: self.support.len(),
                });
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Sparsifiers
// ---------------------------------------------------------------------------

/// Keep the `q` largest and `q` smallest entries by signed value, then
/// replace the winning sign group by its mean and zero the rest.
///
/// `mu_plus` is the mean of the kept strictly-positive entries, `mu_minus`
/// of the kept strictly-negative ones (zero when a group is empty); the
/// group with the larger magnitude survives, positive winning ties.
pub fn sparse_q(u: &[f64], q: usize) -> Result<Vec<f64>> {
    let n = u.len();
    if q == 0 || 2 * q > n {
        return Err(Error::QOutOfRange { q, n });
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| u[a].total_cmp(&u[b]).then(a.cmp(&b)));
    let kept: Vec<usize> = idx[..q].iter().chain(idx[n - q..].iter()).copied().collect();

    let (mut pos_sum, mut pos_n, mut neg_sum, mut neg_n) = (0.0, 0usize, 0.0, 0usize);
    for &i in &kept {
        if u[i] > 0.0 {
            pos_sum += u[i];
            pos_n += 1;
        } else if u[i] < 0.0 {
            neg_sum += u[i];
            neg_n += 1;
        }
    }
    let mu_plus = if pos_n > 0 { pos_sum / pos_n as f64 } else { 0.0 };
    let mu_minus = if neg_n > 0 { neg_sum / neg_n as f64 } else { 0.0 };

    let mut out = vec![0.0; n];
    if mu_plus >= mu_minus.abs() {
        for &i in &kept {
            if u[i] > 0.0 {
                out[i] = mu_plus;
            }
        }
    } else {
        for &i in &kept {
            if u[i] < 0.0 {
                out[i] = mu_minus;
            }
        }
    }
    Ok(out)
}

/// Zero everything except the `q` entries with the largest absolute value
/// (ties broken by lowest index); exactly `min(q, nnz(u))` nonzeros remain.
pub fn thresh_q(u: &[f64], q: usize) -> Result<Vec<f64>> {
    let n = u.len();
    if q == 0 || q > n {
        return Err(Error::QOutOfRange { q, n });
    }
    let mut idx: Vec<usize> = (0..n).filter(|&i| u[i] != 0.0).collect();
    idx.sort_by(|&a, &b| u[b].abs().total_cmp(&u[a].abs()).then(a.cmp(&b)));
    let mut out = vec![0.0; n];
    for &i in idx.iter().take(q) {
        out[i] = u[i];
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Uniform quantizer
// ---------------------------------------------------------------------------

/// Quantize each nonzero entry with a `b`-bit mid-rise uniform quantizer
/// over `[-m, m]` (zeros pass through untouched). Returns the level index
/// per nonzero, in index order, and the dequantized vector.
pub fn quantize_qb(v: &[f64], b: u32, m: f64) -> (Vec<u64>, Vec<f64>) {
    assert!(b >= 2, "quantizer needs at least 2 bits");
    assert!(m > 0.0, "quantizer range must be positive");
    let levels = 1u64 << b;
    let step = 2.0 * m / levels as f64;
    let mut indices = Vec::new();
    let mut out = vec![0.0; v.len()];
    for (o, &x) in out.iter_mut().zip(v) {
        if x == 0.0 {
            continue;
        }
        let raw = ((x + m) / step).floor();
        let idx = (raw.max(0.0) as u64).min(levels - 1);
        indices.push(idx);
        *o = -m + (idx as f64 + 0.5) * step;
    }
    (indices, out)
}

/// Dequantize a single level index.
pub fn dequantize_level(idx: u64, b: u32, m: f64) -> f64 {
    let step = 2.0 * m / (1u64 << b) as f64;
    -m + (idx as f64 + 0.5) * step
}

// ---------------------------------------------------------------------------
// Error feedback
// ---------------------------------------------------------------------------

/// `residual' = update + residual - transmitted` (mass conservation).
pub fn error_feedback_update(residual: &[f64], update: &[f64], transmitted: &[f64]) -> Result<Vec<f64>> {
    if residual.len() != update.len() || update.len() != transmitted.len() {
        return Err(Error::LengthMismatch {
            left: residual.len(),
            right: update.len().max(transmitted.len()),
        });
    }
    Ok(residual
        .iter()
        .zip(update)
        .zip(transmitted)
        .map(|((&r, &u), &t)| u + r - t)
        .collect())
}

// ---------------------------------------------------------------------------
// Bit budgets
// ---------------------------------------------------------------------------

/// Per-device bits per global iteration under equal sharing of the MAC
/// capacity: `B_D = (T / 2K) * log2(1 + K P)`.
pub fn budget_bd(t: usize, k: usize, p: f64) -> f64 {
    (t as f64 / (2.0 * k as f64)) * (1.0 + k as f64 * p).log2()
}

/// `log2 C(n, q)` by accumulated log2 of the multiplicative ratios.
pub fn log2_binomial(n: usize, q: usize) -> f64 {
    if q > n {
        return f64::NEG_INFINITY;
    }
    let q = q.min(n - q);
    let mut acc = 0.0;
    for i in 0..q {
        acc += ((n - i) as f64 / (i + 1) as f64).log2();
    }
    acc
}

/// `log2 C(n, q)` for every `q` in `0..=n`, accumulated incrementally over
/// the lower half and mirrored (`C(n, q) = C(n, n-q)`), so the symmetric
/// tail — in particular `q = n`, which must cost exactly zero — carries no
/// accumulation error.
#[allow(clippy::needless_range_loop)]
fn log2_binomial_table(n: usize) -> Vec<f64> {
    let mut lb = vec![0.0; n + 1];
    let mut acc = 0.0;
    for q in 1..=n / 2 {
        acc += ((n - q + 1) as f64 / q as f64).log2();
        lb[q] = acc;
    }
    for q in n / 2 + 1..=n {
        lb[q] = lb[n - q];
    }
    lb
}

/// Largest `q` with `b + log2 C(w, q) <= b_d`, scanning all `q <= w`
/// (the index cost is not monotone in `q`).
pub fn max_q_fl(w: usize, b: u32, b_d: f64) -> usize {
    max_q_fl_bounded(w, b, b_d, w)
}

/// [`max_q_fl`] restricted to `q <= q_max`. The transport bounds the scan
/// at `w / 2` because the sign-mean sparsifier keeps `q` top and `q`
/// bottom entries.
pub fn max_q_fl_bounded(w: usize, b: u32, b_d: f64, q_max: usize) -> usize {
    if f64::from(b) > b_d {
        return 0;
    }
    let lb = log2_binomial_table(w);
    let mut best = 0usize;
    for (q, &cost) in lb.iter().enumerate().take(q_max + 1) {
        if f64::from(b) + cost <= b_d {
            best = q;
        }
    }
    best
}

/// Largest `q` in `0..=l` with `l * (b q + log2 C(l, q)) <= b_d`.
pub fn max_q_fd(l: usize, b: u32, b_d: f64) -> usize {
    let lb = log2_binomial_table(l);
    let mut best = 0usize;
    for (q, &cost) in lb.iter().enumerate() {
        if l as f64 * (f64::from(b) * q as f64 + cost) <= b_d {
            best = q;
        }
    }
    best
}

// ---------------------------------------------------------------------------
// Digital encode / decode
// ---------------------------------------------------------------------------

/// Sparse binary compression with error accumulation for weight updates:
/// `v = sparse_q(update + residual, q)`, a single quantized group mean on
/// the support, and the residual advanced against the decoded vector.
///
/// `q = 0` (or an all-zero input) produces an empty payload and defers the
/// entire mass to the residual.
pub fn encode_fl_digital(
    update: &[f64],
    residual: &[f64],
    q: usize,
    b: u32,
) -> Result<(SparsePayload, Vec<f64>)> {
    if update.len() != residual.len() {
        return Err(Error::LengthMismatch {
            left: update.len(),
            right: residual.len(),
        });
    }
    let n = update.len();
    let carried: Vec<f64> = update.iter().zip(residual).map(|(&u, &r)| u + r).collect();
    let bit_count = f64::from(b) + log2_binomial(n, q);

    let v = if q == 0 {
        vec![0.0; n]
    } else {
        sparse_q(&carried, q)?
    };
    let support: Vec<u32> = (0..n).filter(|&i| v[i] != 0.0).map(|i| i as u32).collect();
    let mu = support.first().map_or(0.0, |&i| v[i as usize]);

    let (mu_hat, range) = if mu == 0.0 {
        (0.0, 0.0)
    } else {
        let m = mu.abs();
        let (_, deq) = quantize_qb(&[mu], b, m);
        (deq[0], m)
    };
    let payload = SparsePayload {
        support,
        values: PayloadValues::Shared(mu_hat),
        dim: n,
        bit_count,
        range,
    };
    let decoded = decode_fl_digital(&payload);
    let residual = error_feedback_update(residual, update, &decoded)?;
    Ok((payload, residual))
}

/// Reconstruct the dense vector from an FL payload.
pub fn decode_fl_digital(payload: &SparsePayload) -> Vec<f64> {
    let mut out = vec![0.0; payload.dim];
    match &payload.values {
        PayloadValues::Shared(mu) => {
            for &i in &payload.support {
                out[i as usize] = *mu;
            }
        }
        PayloadValues::PerEntry(vals) => {
            for (&i, &v) in payload.support.iter().zip(vals) {
                out[i as usize] = v;
            }
        }
    }
    out
}

/// Per-label threshold sparsification and per-entry quantization of a logit
/// table; one payload per label, each accounted at `b q + log2 C(L, q)`
/// bits. The quantizer range is shared across the table (one side-info
/// real).
pub fn encode_fd_digital(table: &LabelTable, q: usize, b: u32) -> Result<Vec<SparsePayload>> {
    let l = table.dim();
    let bits_per_label = f64::from(b) * q as f64 + log2_binomial(l, q);
    let mut sparse_rows = Vec::with_capacity(table.labels());
    let mut m = 0.0f64;
    for t in 1..=table.labels() {
        let row = if q == 0 {
            vec![0.0; l]
        } else {
            thresh_q(table.row(t), q)?
        };
        for &v in &row {
            m = m.max(v.abs());
        }
        sparse_rows.push(row);
    }
    let mut payloads = Vec::with_capacity(table.labels());
    for row in &sparse_rows {
        let support: Vec<u32> = (0..l).filter(|&i| row[i] != 0.0).map(|i| i as u32).collect();
        let values = if m > 0.0 {
            let (_, deq) = quantize_qb(row, b, m);
            support.iter().map(|&i| deq[i as usize]).collect()
        } else {
            Vec::new()
        };
        payloads.push(SparsePayload {
            support,
            values: PayloadValues::PerEntry(values),
            dim: l,
            bit_count: bits_per_label,
            range: m,
        });
    }
    Ok(payloads)
}

/// Reconstruct a logit table from per-label payloads.
pub fn decode_fd_digital(payloads: &[SparsePayload]) -> Result<LabelTable> {
    let labels = payloads.len();
    let dim = payloads.first().map_or(0, |p| p.dim);
    let mut table = LabelTable::zeros(labels, dim);
    for (t, p) in payloads.iter().enumerate() {
        if p.dim != dim {
            return Err(Error::ShapeMismatch("ragged payload dims".into()));
        }
        table.row_mut(t + 1).copy_from_slice(&decode_fl_digital(p));
    }
    Ok(table)
}

// ---------------------------------------------------------------------------
// Tests
// ---------------------------------------------------------------------------
