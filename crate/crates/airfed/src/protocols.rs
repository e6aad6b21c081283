//! The four training protocols — independent learning, federated learning,
//! federated distillation, and the hybrid scheme with an offline covariate
//! exchange — parameterized over an abstract uplink transport.
//!
//! Devices run their local phases independently (and in parallel); all
//! cross-device interaction goes through [`Transport`], whose ideal,
//! digital, and analog implementations plug in uniformly. Per-device RNG
//! streams keep results bitwise independent of scheduling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::channel::{broadcast_downlink, ChannelConfig, GaussianMac};
use crate::compress::{
    decode_fd_digital, decode_fl_digital, encode_fd_digital, encode_fl_digital, max_q_fd,
    max_q_fl_bounded, BitBudget, ErrorAccumulator,
};
use crate::data::{average_covariates, CovariateTable, LabeledDataset};
use crate::nn::{
    self, init_weights, loss_and_gradient_observed, sgd_step_in_place, LabelTable, LogitTable,
    LossSpec, ModelArch, Scratch,
};
use crate::otac::{
    amp_decode, analog_fd_decode, analog_fd_encode, analog_fd_scale, analog_fl_frame,
    analog_fl_gamma, analog_fl_prepare, choose_rho, repetition_norm_sq, AmpConfig,
    ProjectionMatrix,
};
use crate::{Error, Result};

// ---------------------------------------------------------------------------
// PS-side helpers
// ---------------------------------------------------------------------------

/// Arithmetic mean of equal-length vectors.
pub fn ps_average(vectors: &[impl AsRef<[f64]>]) -> Result<Vec<f64>> {
    let first = vectors
        .first()
        .ok_or(Error::LengthMismatch { left: 0, right: 1 })?
        .as_ref();
    let n = first.len();
    let mut out = vec![0.0; n];
    for v in vectors {
        let v = v.as_ref();
        if v.len() != n {
            return Err(Error::LengthMismatch {
                left: v.len(),
                right: n,
            });
        }
        for (o, &x) in out.iter_mut().zip(v) {
            *o += x;
        }
    }
    let inv = 1.0 / vectors.len() as f64;
    for o in out.iter_mut() {
        *o *= inv;
    }
    Ok(out)
}

fn ps_average_tables(tables: &[LabelTable]) -> Result<LabelTable> {
    let rows: Vec<&[f64]> = tables.iter().map(|t| t.data()).collect();
    let avg = ps_average(&rows)?;
    let mut out = LabelTable::zeros(tables[0].labels(), tables[0].dim());
    out.data_mut().copy_from_slice(&avg);
    Ok(out)
}

/// Leave-one-out average: `(K * avg - own) / (K - 1)`.
pub fn leave_one_out(avg: &[f64], own: &[f64], devices: usize) -> Result<Vec<f64>> {
    if devices < 2 {
        return Err(Error::LeaveOneOutSingleDevice);
    }
    if avg.len() != own.len() {
        return Err(Error::LengthMismatch {
            left: avg.len(),
            right: own.len(),
        });
    }
    let k = devices as f64;
    Ok(avg
        .iter()
        .zip(own)
        .map(|(&a, &o)| (k * a - o) / (k - 1.0))
        .collect())
}

/// Row-wise [`leave_one_out`] over per-label tables. With a single device
/// the average is the device's own table and passes through unchanged.
pub fn leave_one_out_table(avg: &LabelTable, own: &LabelTable, devices: usize) -> Result<LabelTable> {
    if devices == 1 {
        return Ok(avg.clone());
    }
    if !avg.same_shape(own) {
        return Err(Error::LengthMismatch {
            left: avg.data().len(),
            right: own.data().len(),
        });
    }
    let mut out = LabelTable::zeros(avg.labels(), avg.dim());
    out.data_mut()
        .copy_from_slice(&leave_one_out(avg.data(), own.data(), devices)?);
    Ok(out)
}

// ---------------------------------------------------------------------------
// Transport
// ---------------------------------------------------------------------------

/// Per-round channel-use, bit, and power bookkeeping reported by a
/// transport.
#[derive(Clone, Debug, Default)]
pub struct Accounting {
    /// Digital bits sent per device this round (0 for ideal/analog).
    pub bits_per_device: f64,
    /// Per-device Shannon budget `B_D` (0 when not applicable).
    pub bit_budget: f64,
    /// Sparsity level used by the compressor (0 when not applicable).
    pub q: usize,
    /// Channel uses consumed this round.
    pub channel_uses: usize,
    /// Measured power of each device's frame (analog only).
    pub frame_powers: Vec<f64>,
    /// Scalars agreed out of band (quantizer ranges, power scalings).
    pub side_info_reals: usize,
    /// Real symbols delivered out of band during the offline phase.
    pub offline_reals_per_device: usize,
    pub amp_iterations: usize,
    pub amp_diverged: bool,
    /// Repetition redundancy for analog logit uploads (0 otherwise).
    pub rho: usize,
}

/// An uplink result: the PS-side reconstruction of the device average plus
/// the accounting for the round.
#[derive(Clone, Debug)]
pub struct Delivered<T> {
    pub average: T,
    pub accounting: Accounting,
}

/// Carries one round's payloads from all devices to the PS and returns the
/// reconstructed device average.
pub trait Transport: Send {
    fn name(&self) -> &'static str;
    /// FL path: weight-update vectors.
    fn uplink_weight_deltas(&mut self, deltas: &[Vec<f64>]) -> Result<Delivered<Vec<f64>>>;
    /// FD/HFD path: per-label logit tables.
    fn uplink_logit_tables(&mut self, tables: &[LogitTable]) -> Result<Delivered<LogitTable>>;
    /// HFD offline path: per-label covariate tables.
    fn uplink_covariate_tables(&mut self, tables: &[CovariateTable]) -> Result<Delivered<CovariateTable>>;
}

/// Noiseless, lossless averaging.
pub struct IdealTransport;

impl Transport for IdealTransport {
    fn name(&self) -> &'static str {
        "ideal"
    }

    fn uplink_weight_deltas(&mut self, deltas: &[Vec<f64>]) -> Result<Delivered<Vec<f64>>> {
        Ok(Delivered {
            average: ps_average(deltas)?,
            accounting: Accounting::default(),
        })
    }

    fn uplink_logit_tables(&mut self, tables: &[LogitTable]) -> Result<Delivered<LogitTable>> {
        Ok(Delivered {
            average: ps_average_tables(tables)?,
            accounting: Accounting::default(),
        })
    }

    fn uplink_covariate_tables(&mut self, tables: &[CovariateTable]) -> Result<Delivered<CovariateTable>> {
        let average = ps_average_tables(tables)?;
        let offline = tables[0].labels() * tables[0].dim();
        Ok(Delivered {
            average,
            accounting: Accounting {
                offline_reals_per_device: offline,
                ..Accounting::default()
            },
        })
    }
}

/// Quantize-and-code uplink: every device gets `B_D` error-free bits per
/// round (capacity argument), spent on sparsified, quantized payloads with
/// error feedback on the FL path.
pub struct DigitalTransport {
    budget: BitBudget,
    residuals: Vec<ErrorAccumulator>,
    log_transmissions: bool,
    transmitted_log: Vec<Vec<Vec<f64>>>,
}

impl DigitalTransport {
    pub fn new(channel_uses: usize, devices: usize, snr: f64, quant_bits: u32) -> Self {
        DigitalTransport {
            budget: BitBudget::new(channel_uses, devices, snr, quant_bits),
            residuals: Vec::new(),
            log_transmissions: false,
            transmitted_log: Vec::new(),
        }
    }

    pub fn budget(&self) -> &BitBudget {
        &self.budget
    }

    /// Per-device error-feedback residuals (empty until the first FL round).
    pub fn residuals(&self) -> &[ErrorAccumulator] {
        &self.residuals
    }

    /// Record the per-device decoded vector of every FL round (conservation
    /// checks).
    pub fn enable_transmission_log(&mut self) {
        self.log_transmissions = true;
    }

    /// `transmitted_log()[round][device]` = decoded vector delivered to the
    /// PS that round.
    pub fn transmitted_log(&self) -> &[Vec<Vec<f64>>] {
        &self.transmitted_log
    }
}

impl Transport for DigitalTransport {
    fn name(&self) -> &'static str {
        "digital"
    }

    fn uplink_weight_deltas(&mut self, deltas: &[Vec<f64>]) -> Result<Delivered<Vec<f64>>> {
        let w = deltas[0].len();
        if self.residuals.is_empty() {
            self.residuals = vec![ErrorAccumulator::zeros(w); deltas.len()];
        }
        // sparse_q keeps q top and q bottom entries, so q <= W/2
        let q = max_q_fl_bounded(w, self.budget.quant_bits, self.budget.bits, w / 2);
        let mut decoded = Vec::with_capacity(deltas.len());
        let mut bits = 0.0f64;
        for (k, delta) in deltas.iter().enumerate() {
            let (payload, residual) =
                encode_fl_digital(delta, &self.residuals[k].residual, q, self.budget.quant_bits)?;
            crate::channel::digital_pipe(payload.bit_count, &self.budget)?;
            bits = payload.bit_count;
            self.residuals[k].residual = residual;
            decoded.push(decode_fl_digital(&payload));
        }
        if self.log_transmissions {
            self.transmitted_log.push(decoded.clone());
        }
        Ok(Delivered {
            average: ps_average(&decoded)?,
            accounting: Accounting {
                bits_per_device: bits,
                bit_budget: self.budget.bits,
                q,
                channel_uses: self.budget.channel_uses,
                side_info_reals: deltas.len(),
                ..Accounting::default()
            },
        })
    }

    fn uplink_logit_tables(&mut self, tables: &[LogitTable]) -> Result<Delivered<LogitTable>> {
        let l = tables[0].dim();
        let q = max_q_fd(l, self.budget.quant_bits, self.budget.bits);
        let mut decoded = Vec::with_capacity(tables.len());
        let mut bits = 0.0f64;
        for table in tables {
            let payloads = encode_fd_digital(table, q, self.budget.quant_bits)?;
            let total: f64 = payloads.iter().map(|p| p.bit_count).sum();
            crate::channel::digital_pipe(total, &self.budget)?;
            bits = total;
            decoded.push(decode_fd_digital(&payloads)?);
        }
        Ok(Delivered {
            average: ps_average_tables(&decoded)?,
            accounting: Accounting {
                bits_per_device: bits,
                bit_budget: self.budget.bits,
                q,
                channel_uses: self.budget.channel_uses,
                side_info_reals: tables.len(),
                ..Accounting::default()
            },
        })
    }

    fn uplink_covariate_tables(&mut self, tables: &[CovariateTable]) -> Result<Delivered<CovariateTable>> {
        // offline phase: delivered exactly, accounted as raw real symbols
        let average = ps_average_tables(tables)?;
        Ok(Delivered {
            average,
            accounting: Accounting {
                bit_budget: self.budget.bits,
                offline_reals_per_device: tables[0].labels() * tables[0].dim(),
                ..Accounting::default()
            },
        })
    }
}

/// Over-the-air computing uplink: all devices transmit simultaneously and
/// the PS decodes the superposed sum — AMP over a shared random projection
/// for weight updates, repetition averaging for logit tables.
pub struct AnalogTransport {
    mac: GaussianMac,
    projection_seed: u64,
    projection: Option<ProjectionMatrix>,
    residuals: Vec<ErrorAccumulator>,
    amp: AmpConfig,
    /// Threshold level for the FL sparsifier (defaults to `T / 20`).
    pub thresh_level: usize,
    log_transmissions: bool,
    transmitted_log: Vec<Vec<Vec<f64>>>,
}

impl AnalogTransport {
    pub fn new(cfg: ChannelConfig, amp: AmpConfig, thresh_level: Option<usize>) -> Self {
        // derive the projection seed from the noise seed so one seed tuple
        // pins the whole transport
        let projection_seed = cfg.noise_seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(1);
        AnalogTransport {
            mac: GaussianMac::new(cfg),
            projection_seed,
            projection: None,
            residuals: Vec::new(),
            amp,
            thresh_level: thresh_level.unwrap_or((cfg.channel_uses / 20).max(1)),
            log_transmissions: false,
            transmitted_log: Vec::new(),
        }
    }

    pub fn residuals(&self) -> &[ErrorAccumulator] {
        &self.residuals
    }

    /// Record each round's per-device thresholded vector `v` (the quantity
    /// the error feedback treats as transmitted).
    pub fn enable_transmission_log(&mut self) {
        self.log_transmissions = true;
    }

    pub fn transmitted_log(&self) -> &[Vec<Vec<f64>>] {
        &self.transmitted_log
    }
}

impl Transport for AnalogTransport {
    fn name(&self) -> &'static str {
        "analog"
    }

    fn uplink_weight_deltas(&mut self, deltas: &[Vec<f64>]) -> Result<Delivered<Vec<f64>>> {
        let w = deltas[0].len();
        let cfg = *self.mac.config();
        if self.residuals.is_empty() {
            self.residuals = vec![ErrorAccumulator::zeros(w); deltas.len()];
        }
        let a = self
            .projection
            .get_or_insert_with(|| ProjectionMatrix::generate(cfg.channel_uses, w, self.projection_seed));
        let q = self.thresh_level.min(w);

        let mut encodings = Vec::with_capacity(deltas.len());
        for (k, delta) in deltas.iter().enumerate() {
            let (enc, residual) = analog_fl_prepare(delta, &self.residuals[k].residual, a, q)?;
            self.residuals[k].residual = residual;
            encodings.push(enc);
        }
        if self.log_transmissions {
            self.transmitted_log
                .push(encodings.iter().map(|e| e.v.clone()).collect());
        }
        let norms: Vec<f64> = encodings
            .iter()
            .map(|e| e.projected.iter().map(|&v| v * v).sum())
            .collect();
        let gamma = analog_fl_gamma(&norms, cfg.channel_uses, cfg.snr)?;
        let frames: Vec<_> = encodings.iter().map(|e| analog_fl_frame(e, gamma)).collect();
        let out = self.mac.transmit(&frames)?;
        let (estimate, report) = amp_decode(&out.received, a, &self.amp);
        let scale = 1.0 / (gamma * deltas.len() as f64);
        let average: Vec<f64> = estimate.iter().map(|&v| v * scale).collect();
        Ok(Delivered {
            average,
            accounting: Accounting {
                q,
                channel_uses: cfg.channel_uses,
                frame_powers: out.frame_powers,
                side_info_reals: deltas.len() + 1,
                amp_iterations: report.iterations,
                amp_diverged: report.diverged,
                ..Accounting::default()
            },
        })
    }

    fn uplink_logit_tables(&mut self, tables: &[LogitTable]) -> Result<Delivered<LogitTable>> {
        let cfg = *self.mac.config();
        let (labels, dim) = (tables[0].labels(), tables[0].dim());
        let block = labels * dim;
        let rho = choose_rho(cfg.channel_uses, labels)?;
        debug_assert_eq!(block, labels * labels, "logit tables are LxL");
        let shared_norm = tables
            .iter()
            .map(|t| repetition_norm_sq(t, rho))
            .fold(0.0, f64::max);
        let scale = analog_fd_scale(cfg.channel_uses, cfg.snr, shared_norm);
        let frames = tables
            .iter()
            .map(|t| analog_fd_encode(t, rho, cfg.channel_uses, cfg.snr, shared_norm))
            .collect::<Result<Vec<_>>>()?;
        let out = self.mac.transmit(&frames)?;
        let average = analog_fd_decode(&out.received, rho, tables.len(), scale, labels, dim);
        Ok(Delivered {
            average,
            accounting: Accounting {
                channel_uses: cfg.channel_uses,
                frame_powers: out.frame_powers,
                side_info_reals: tables.len() + 1,
                rho,
                ..Accounting::default()
            },
        })
    }

    fn uplink_covariate_tables(&mut self, tables: &[CovariateTable]) -> Result<Delivered<CovariateTable>> {
        let average = ps_average_tables(tables)?;
        Ok(Delivered {
            average,
            accounting: Accounting {
                offline_reals_per_device: tables[0].labels() * tables[0].dim(),
                ..Accounting::default()
            },
        })
    }
}

// ---------------------------------------------------------------------------
// Devices
// ---------------------------------------------------------------------------

/// One edge device: model weights, its data shard, and a private RNG
/// stream.
pub struct Device {
    pub weights: Vec<f64>,
    pub data: LabeledDataset,
    rng: ChaCha8Rng,
    scratch: Scratch,
    grad: Vec<f64>,
}

impl Device {
    fn new(arch: &ModelArch, data: LabeledDataset, init: &[f64], sgd_seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(sgd_seed);
        rng.set_stream(stream);
        Device {
            weights: init.to_vec(),
            data,
            rng,
            scratch: Scratch::new(arch),
            grad: vec![0.0; arch.param_count()],
        }
    }

    /// One mini-batch SGD step on the local dataset (uniform draws with
    /// replacement), optionally observing each example's logits.
    fn local_step(
        &mut self,
        arch: &ModelArch,
        alpha: f64,
        batch: usize,
        spec: &LossSpec,
        mut observe: impl FnMut(usize, &[f64]),
    ) -> Result<()> {
        let n = self.data.len();
        let idx: Vec<usize> = (0..batch).map(|_| self.rng.random_range(0..n)).collect();
        let examples: Vec<&[f64]> = idx.iter().map(|&i| self.data.covariates(i)).collect();
        let labels: Vec<usize> = idx.iter().map(|&i| self.data.label(i)).collect();
        loss_and_gradient_observed(
            arch,
            &self.weights,
            &examples,
            &labels,
            spec,
            &mut self.scratch,
            &mut self.grad,
            &mut observe,
        )?;
        sgd_step_in_place(&mut self.weights, &self.grad, alpha);
        Ok(())
    }

    /// One distillation-phase step on synthetic per-label data points
    /// `(rows[t], t)` for uniformly random labels `t`.
    fn distill_step(
        &mut self,
        arch: &ModelArch,
        alpha: f64,
        batch: usize,
        rows: &CovariateTable,
        spec: &LossSpec,
    ) -> Result<()> {
        let l = rows.labels();
        let labels: Vec<usize> = (0..batch).map(|_| self.rng.random_range(1..=l)).collect();
        let examples: Vec<&[f64]> = labels.iter().map(|&t| rows.row(t)).collect();
        loss_and_gradient_observed(
            arch,
            &self.weights,
            &examples,
            &labels,
            spec,
            &mut self.scratch,
            &mut self.grad,
            |_, _| {},
        )?;
        sgd_step_in_place(&mut self.weights, &self.grad, alpha);
        Ok(())
    }

    /// Logits of the current model on each row of a covariate table.
    fn logits_of_rows(&mut self, arch: &ModelArch, rows: &CovariateTable) -> LogitTable {
        let l = arch.output_len();
        let mut out = LabelTable::zeros(rows.labels(), l);
        for t in 1..=rows.labels() {
            nn::forward_into(arch, &self.weights, rows.row(t), &mut self.scratch);
            out.row_mut(t).copy_from_slice(self.scratch.logits());
        }
        out
    }
}

fn make_devices(arch: &ModelArch, shards: Vec<LabeledDataset>, init_seed: u64, sgd_seed: u64) -> Vec<Device> {
    let init = init_weights(arch, init_seed);
    shards
        .into_iter()
        .enumerate()
        .map(|(k, data)| Device::new(arch, data, &init.values, sgd_seed, k as u64 + 1))
        .collect()
}

/// Per-round protocol outcome handed to the harness.
#[derive(Clone, Debug, Default)]
pub struct RoundOutcome {
    pub accounting: Accounting,
    /// Labels that hit the zero-counter upload guard this round.
    pub zero_counter_fallbacks: usize,
}

// ---------------------------------------------------------------------------
// Independent learning
// ---------------------------------------------------------------------------

/// Plain per-device SGD, no communication.
pub struct IlSession {
    pub arch: ModelArch,
    pub devices: Vec<Device>,
    alpha: f64,
    batch: usize,
}

impl IlSession {
    pub fn new(
        arch: ModelArch,
        shards: Vec<LabeledDataset>,
        init_seed: u64,
        sgd_seed: u64,
        alpha: f64,
        batch: usize,
    ) -> Self {
        let devices = make_devices(&arch, shards, init_seed, sgd_seed);
        IlSession {
            arch,
            devices,
            alpha,
            batch,
        }
    }

    /// Run `iters` local SGD iterations on every device.
    pub fn run_block(&mut self, iters: usize) -> Result<()> {
        let (arch, alpha, batch) = (&self.arch, self.alpha, self.batch);
        self.devices
            .par_iter_mut()
            .map(|dev| {
                for _ in 0..iters {
                    dev.local_step(arch, alpha, batch, &LossSpec::PlainCe, |_, _| {})?;
                }
                Ok(())
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(())
    }
}

/// Train each device independently for `total_iters` iterations.
pub fn run_il(
    arch: &ModelArch,
    shards: Vec<LabeledDataset>,
    alpha: f64,
    batch: usize,
    total_iters: usize,
    init_seed: u64,
    sgd_seed: u64,
) -> Result<Vec<Vec<f64>>> {
    let mut session = IlSession::new(arch.clone(), shards, init_seed, sgd_seed, alpha, batch);
    session.run_block(total_iters)?;
    Ok(session.devices.into_iter().map(|d| d.weights).collect())
}

// ---------------------------------------------------------------------------
// Federated learning
// ---------------------------------------------------------------------------

/// Federated averaging of weight updates with device-side re-basing.
pub struct FlSession {
    pub arch: ModelArch,
    pub devices: Vec<Device>,
    alpha: f64,
    batch: usize,
    last_deltas: Vec<Vec<f64>>,
    last_avg: Vec<f64>,
    pub round: usize,
}

impl FlSession {
    pub fn new(
        arch: ModelArch,
        shards: Vec<LabeledDataset>,
        init_seed: u64,
        sgd_seed: u64,
        alpha: f64,
        batch: usize,
    ) -> Self {
        let w = arch.param_count();
        let devices = make_devices(&arch, shards, init_seed, sgd_seed);
        let k = devices.len();
        FlSession {
            arch,
            devices,
            alpha,
            batch,
            last_deltas: vec![vec![0.0; w]; k],
            last_avg: vec![0.0; w],
            round: 0,
        }
    }

    /// One global iteration: re-base to the common reference, run the local
    /// SGD budget, upload the weight updates, download their average.
    pub fn round(&mut self, transport: &mut dyn Transport, local_iters: usize) -> Result<RoundOutcome> {
        self.round += 1;
        let (arch, alpha, batch) = (&self.arch, self.alpha, self.batch);
        let avg_copies = broadcast_downlink(&self.last_avg, self.devices.len());

        let deltas: Vec<Vec<f64>> = self
            .devices
            .par_iter_mut()
            .zip(self.last_deltas.par_iter())
            .zip(avg_copies.par_iter())
            .map(|((dev, own_delta), avg)| {
                // w_i^k = w_{i-1}^k + (avg - own); the correction is exactly
                // zero when the average equals the own update (K = 1)
                for ((w, &a), &o) in dev.weights.iter_mut().zip(avg.iter()).zip(own_delta.iter()) {
                    *w += a - o;
                }
                let start = dev.weights.clone();
                for _ in 0..local_iters {
                    dev.local_step(arch, alpha, batch, &LossSpec::PlainCe, |_, _| {})?;
                }
                let delta: Vec<f64> = dev
                    .weights
                    .iter()
                    .zip(&start)
                    .map(|(&w, &s)| w - s)
                    .collect();
                Ok(delta)
            })
            .collect::<Result<Vec<_>>>()?;

        let delivered = transport.uplink_weight_deltas(&deltas)?;
        self.last_deltas = deltas;
        self.last_avg = delivered.average;
        Ok(RoundOutcome {
            accounting: delivered.accounting,
            zero_counter_fallbacks: 0,
        })
    }

    /// Round-start weights after the most recent re-base would be applied;
    /// used by invariants and evaluation of the synchronized model.
    pub fn rebased_weights(&self, k: usize) -> Vec<f64> {
        self.devices[k]
            .weights
            .iter()
            .zip(&self.last_avg)
            .zip(&self.last_deltas[k])
            .map(|((&w, &a), &o)| w + (a - o))
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Federated distillation
// ---------------------------------------------------------------------------

/// Per-label logit exchange with a distillation-regularized local loss.
pub struct FdSession {
    pub arch: ModelArch,
    pub devices: Vec<Device>,
    alpha: f64,
    batch: usize,
    beta: f64,
    /// Global average logit table downloaded at the start of each round
    /// (zero before the first upload: a uniform teacher after softmax).
    pub global_table: LogitTable,
    prev_uploads: Vec<LogitTable>,
    pub round: usize,
}

impl FdSession {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        arch: ModelArch,
        shards: Vec<LabeledDataset>,
        init_seed: u64,
        sgd_seed: u64,
        alpha: f64,
        batch: usize,
        beta: f64,
    ) -> Self {
        let l = arch.output_len();
        let devices = make_devices(&arch, shards, init_seed, sgd_seed);
        let k = devices.len();
        FdSession {
            arch,
            devices,
            alpha,
            batch,
            beta,
            global_table: LabelTable::zeros(l, l),
            prev_uploads: vec![LabelTable::zeros(l, l); k],
            round: 0,
        }
    }

    /// One global iteration of local distillation training plus the
    /// counter-normalized logit-table upload.
    pub fn round(&mut self, transport: &mut dyn Transport, local_iters: usize) -> Result<RoundOutcome> {
        self.round += 1;
        let (arch, alpha, batch, beta) = (&self.arch, self.alpha, self.batch, self.beta);
        let l = arch.output_len();
        let k = self.devices.len();
        let global_copies = broadcast_downlink(&self.global_table, k);

        let results: Vec<(LogitTable, usize)> = self
            .devices
            .par_iter_mut()
            .zip(self.prev_uploads.par_iter())
            .zip(global_copies.par_iter())
            .map(|((dev, prev), global)| {
                let teacher = leave_one_out_table(global, prev, k)?;
                let spec = LossSpec::Distill {
                    beta,
                    teacher: &teacher,
                };
                let mut accum = LabelTable::zeros(l, l);
                let mut counters = vec![0u64; l];
                for _ in 0..local_iters {
                    let (acc, ctr) = (&mut accum, &mut counters);
                    dev.local_step(arch, alpha, batch, &spec, |t, logits| {
                        for (a, &s) in acc.row_mut(t).iter_mut().zip(logits) {
                            *a += s;
                        }
                        ctr[t - 1] += 1;
                    })?;
                }
                // counter-normalized upload, falling back to the previous
                // round's row for labels never visited
                let mut upload = LabelTable::zeros(l, l);
                let mut fallbacks = 0usize;
                for t in 1..=l {
                    if counters[t - 1] == 0 {
                        upload.row_mut(t).copy_from_slice(prev.row(t));
                        fallbacks += 1;
                    } else {
                        let inv = 1.0 / counters[t - 1] as f64;
                        for (u, &a) in upload.row_mut(t).iter_mut().zip(accum.row(t)) {
                            *u = a * inv;
                        }
                    }
                }
                Ok((upload, fallbacks))
            })
            .collect::<Result<Vec<_>>>()?;

        let uploads: Vec<LogitTable> = results.iter().map(|(u, _)| u.clone()).collect();
        let fallbacks = results.iter().map(|(_, f)| f).sum();
        let delivered = transport.uplink_logit_tables(&uploads)?;
        self.global_table = delivered.average;
        self.prev_uploads = uploads;
        Ok(RoundOutcome {
            accounting: delivered.accounting,
            zero_counter_fallbacks: fallbacks,
        })
    }
}

// ---------------------------------------------------------------------------
// Hybrid federated distillation
// ---------------------------------------------------------------------------

/// Offline phase: upload per-label average covariates, download the global
/// average, and hand every device its leave-one-out covariate table.
pub fn hfd_offline(
    shards: &[LabeledDataset],
    transport: &mut dyn Transport,
) -> Result<(Vec<CovariateTable>, Vec<CovariateTable>, Accounting)> {
    let own: Vec<CovariateTable> = shards
        .iter()
        .map(average_covariates)
        .collect::<Result<Vec<_>>>()?;
    let delivered = transport.uplink_covariate_tables(&own)?;
    let k = shards.len();
    let loo = own
        .iter()
        .map(|mine| leave_one_out_table(&delivered.average, mine, k))
        .collect::<Result<Vec<_>>>()?;
    Ok((own, loo, delivered.accounting))
}

/// FD augmented with the offline covariate exchange: each round runs a
/// distillation phase on leave-one-out average covariates, an IL phase on
/// local data, and uploads the logits of the device's own average
/// covariates.
pub struct HfdSession {
    pub arch: ModelArch,
    pub devices: Vec<Device>,
    alpha: f64,
    batch: usize,
    beta: f64,
    own_cov: Vec<CovariateTable>,
    loo_cov: Vec<CovariateTable>,
    pub global_table: LogitTable,
    prev_uploads: Vec<LogitTable>,
    pub round: usize,
    pub offline_accounting: Accounting,
}

impl HfdSession {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        arch: ModelArch,
        shards: Vec<LabeledDataset>,
        init_seed: u64,
        sgd_seed: u64,
        alpha: f64,
        batch: usize,
        beta: f64,
        transport: &mut dyn Transport,
    ) -> Result<Self> {
        let l = arch.output_len();
        let (own_cov, loo_cov, offline_accounting) = hfd_offline(&shards, transport)?;
        let devices = make_devices(&arch, shards, init_seed, sgd_seed);
        let k = devices.len();
        Ok(HfdSession {
            arch,
            devices,
            alpha,
            batch,
            beta,
            own_cov,
            loo_cov,
            global_table: LabelTable::zeros(l, l),
            prev_uploads: vec![LabelTable::zeros(l, l); k],
            round: 0,
            offline_accounting,
        })
    }

    pub fn round(
        &mut self,
        transport: &mut dyn Transport,
        distill_iters: usize,
        il_iters: usize,
    ) -> Result<RoundOutcome> {
        self.round += 1;
        let (arch, alpha, batch, beta) = (&self.arch, self.alpha, self.batch, self.beta);
        let k = self.devices.len();
        let global_copies = broadcast_downlink(&self.global_table, k);

        let uploads: Vec<LogitTable> = self
            .devices
            .par_iter_mut()
            .zip(self.prev_uploads.par_iter())
            .zip(self.loo_cov.par_iter().zip(self.own_cov.par_iter()))
            .zip(global_copies.par_iter())
            .map(|(((dev, prev), (loo, own)), global)| {
                let teacher = leave_one_out_table(global, prev, k)?;
                let spec = LossSpec::Distill {
                    beta,
                    teacher: &teacher,
                };
                for _ in 0..distill_iters {
                    dev.distill_step(arch, alpha, batch, loo, &spec)?;
                }
                for _ in 0..il_iters {
                    dev.local_step(arch, alpha, batch, &LossSpec::PlainCe, |_, _| {})?;
                }
                Ok(dev.logits_of_rows(arch, own))
            })
            .collect::<Result<Vec<_>>>()?;

        let delivered = transport.uplink_logit_tables(&uploads)?;
        self.global_table = delivered.average;
        self.prev_uploads = uploads;
        Ok(RoundOutcome {
            accounting: delivered.accounting,
            zero_counter_fallbacks: 0,
        })
    }
}

// ---------------------------------------------------------------------------
// Tests
// ---------------------------------------------------------------------------

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Shape;

    fn tiny_arch() -> ModelArch {
        ModelArch::new(
            Shape::Flat(6),
            vec![
                nn::Layer::Dense { inputs: 6, outputs: 8 },
                nn::Layer::Relu,
                nn::Layer::Dense { inputs: 8, outputs: 4 },
            ],
        )
        .unwrap()
    }

    fn tiny_shards(k: usize, n: usize, seed: u64) -> Vec<LabeledDataset> {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..k)
            .map(|_| {
                let covs: Vec<f64> = (0..n * 6).map(|_| rng.random_range(0.0..1.0)).collect();
                let labels: Vec<usize> = (0..n).map(|_| rng.random_range(1..=4)).collect();
                LabeledDataset::new(covs, labels, 6, 4).unwrap()
            })
            .collect()
    }

    #[test]
    fn ps_average_hand_values() {
        let avg = ps_average(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert_eq!(avg, vec![0.5, 0.5]);
        let same = ps_average(&[vec![2.0, 3.0]]).unwrap();
        assert_eq!(same, vec![2.0, 3.0]);
        assert!(ps_average(&[vec![1.0], vec![1.0, 2.0]]).is_err());
    }

    #[test]
    fn ps_average_matches_summation_oracle() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let vecs: Vec<Vec<f64>> = (0..5)
            .map(|_| (0..17).map(|_| rng.random_range(-3.0..3.0)).collect())
            .collect();
        let avg = ps_average(&vecs).unwrap();
        for j in 0..17 {
            let s: f64 = vecs.iter().map(|v| v[j]).sum();
            assert!((avg[j] - s / 5.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn leave_one_out_hand_values() {
        assert_eq!(
            leave_one_out(&[3.0, 3.0], &[0.0, 0.0], 3).unwrap(),
            vec![4.5, 4.5]
        );
        assert_eq!(
            leave_one_out(&[1.0, 2.0], &[0.0, 0.0], 2).unwrap(),
            vec![2.0, 4.0]
        );
        // own == avg is a fixed point
        assert_eq!(
            leave_one_out(&[1.5, -2.0], &[1.5, -2.0], 4).unwrap(),
            vec![1.5, -2.0]
        );
        assert!(matches!(
            leave_one_out(&[1.0], &[1.0], 1),
            Err(Error::LeaveOneOutSingleDevice)
        ));
    }

    #[test]
    fn leave_one_out_identity_property() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for k in 2..6usize {
            let avg: Vec<f64> = (0..9).map(|_| rng.random_range(-2.0..2.0)).collect();
            let own: Vec<f64> = (0..9).map(|_| rng.random_range(-2.0..2.0)).collect();
            let loo = leave_one_out(&avg, &own, k).unwrap();
            for j in 0..9 {
                let lhs = k as f64 * avg[j];
                let rhs = own[j] + (k as f64 - 1.0) * loo[j];
                assert!((lhs - rhs).abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn il_zero_iters_keeps_init() {
        let arch = tiny_arch();
        let shards = tiny_shards(2, 30, 1);
        let w = run_il(&arch, shards, 0.05, 4, 0, 11, 12).unwrap();
        let init = init_weights(&arch, 11);
        assert_eq!(w[0], init.values);
        assert_eq!(w[1], init.values);
    }

    #[test]
    fn il_identical_data_and_seeds_identical_weights() {
        let arch = tiny_arch();
        let shard = tiny_shards(1, 30, 5).remove(0);
        // same data, same stream seeds -> identical trajectories
        let w = run_il(&arch, vec![shard.clone(), shard], 0.05, 4, 40, 11, 12).unwrap();
        // devices use distinct rng streams, so identical data still gives
        // different draws; instead compare two separate runs of one device
        let w2 = run_il(
            &arch,
            vec![tiny_shards(1, 30, 5).remove(0)],
            0.05,
            4,
            40,
            11,
            12,
        )
        .unwrap();
        assert_eq!(w[0], w2[0]);
    }

    #[test]
    fn fl_k1_ideal_matches_il_bitwise() {
        let arch = tiny_arch();
        let shard = tiny_shards(1, 40, 7).remove(0);
        let il = run_il(&arch, vec![shard.clone()], 0.05, 4, 30, 1, 2).unwrap();

        let mut fl = FlSession::new(arch.clone(), vec![shard], 1, 2, 0.05, 4);
        let mut transport = IdealTransport;
        for _ in 0..3 {
            fl.round(&mut transport, 10).unwrap();
        }
        assert_eq!(fl.devices[0].weights, il[0]);
    }

    /// Round-start weights agree across devices up to the last ulp: the
    /// re-base is computed per device as `w + (avg - own)`, which is exact
    /// algebraically but rounds device-dependently, so the comparison uses
    /// a 1e-12 relative tolerance rather than bit equality.
    fn assert_rebased_equal(a: &[f64], b: &[f64]) {
        for (i, (&x, &y)) in a.iter().zip(b).enumerate() {
            let tol = 1e-12 * x.abs().max(y.abs()).max(1.0);
            assert!((x - y).abs() <= tol, "coord {i}: {x} vs {y}");
        }
    }

    #[test]
    fn fl_identical_uploads_advance_all_devices_equally() {
        let arch = tiny_arch();
        // two devices with identical data but distinct streams; the round
        // start must re-synchronize them
        let mut fl = FlSession::new(arch.clone(), tiny_shards(2, 30, 9), 3, 4, 0.05, 4);
        let mut transport = IdealTransport;
        fl.round(&mut transport, 5).unwrap();
        let start1 = fl.rebased_weights(0);
        let start2 = fl.rebased_weights(1);
        assert_rebased_equal(&start1, &start2);
    }

    #[test]
    fn fl_round_start_invariant_over_rounds() {
        let arch = tiny_arch();
        let mut fl = FlSession::new(arch.clone(), tiny_shards(3, 40, 13), 5, 6, 0.05, 4);
        let mut transport = IdealTransport;
        for _ in 0..4 {
            fl.round(&mut transport, 6).unwrap();
            let w0 = fl.rebased_weights(0);
            for k in 1..3 {
                let wk = fl.rebased_weights(k);
                assert_rebased_equal(&w0, &wk);
            }
        }
    }

    #[test]
    fn fd_beta_zero_matches_il_bitwise() {
        let arch = tiny_arch();
        let shards = tiny_shards(3, 30, 21);
        let il = run_il(&arch, shards.clone(), 0.05, 4, 30, 1, 2).unwrap();

        let mut fd = FdSession::new(arch.clone(), shards, 1, 2, 0.05, 4, 0.0);
        let mut transport = IdealTransport;
        for _ in 0..3 {
            fd.round(&mut transport, 10).unwrap();
        }
        for k in 0..3 {
            assert_eq!(fd.devices[k].weights, il[k]);
        }
    }

    #[test]
    fn fd_identical_devices_upload_identical_tables() {
        let arch = tiny_arch();
        let shard = tiny_shards(1, 25, 31).remove(0);
        // two devices, same data, same stream: force stream equality by
        // running two single-device sessions and comparing uploads
        let mut a = FdSession::new(arch.clone(), vec![shard.clone()], 1, 2, 0.05, 4, 0.01);
        let mut b = FdSession::new(arch.clone(), vec![shard], 1, 2, 0.05, 4, 0.01);
        let mut t = IdealTransport;
        a.round(&mut t, 8).unwrap();
        b.round(&mut t, 8).unwrap();
        assert_eq!(a.prev_uploads[0], b.prev_uploads[0]);
        // leave-one-out of identical tables is a fixed point
        let loo = leave_one_out_table(&a.global_table, &a.prev_uploads[0], 1).unwrap();
        assert_eq!(loo, a.global_table);
    }

    #[test]
    fn fd_counters_sum_to_examples_processed() {
        let arch = tiny_arch();
        let shards = tiny_shards(2, 30, 41);
        let mut fd = FdSession::new(arch.clone(), shards, 1, 2, 0.05, 4, 0.01);
        // re-run one round manually to inspect counters via the upload path:
        // counter consistency is observable through the accumulate callback
        let mut counted = 0u64;
        {
            let dev = &mut fd.devices[0];
            let teacher = LabelTable::zeros(4, 4);
            let spec = LossSpec::Distill { beta: 0.01, teacher: &teacher };
            for _ in 0..7 {
                dev.local_step(&fd.arch, 0.05, 4, &spec, |_, _| counted += 1).unwrap();
            }
        }
        assert_eq!(counted, 7 * 4);
    }

    #[test]
    fn hfd_offline_fixed_point_and_hand_case() {
        // all devices equal: leave-one-out equals the average
        let d = 2;
        let covs = vec![0.25, 0.75, 0.5, 0.5];
        let mk = || LabeledDataset::new(covs.clone(), vec![1, 2], d, 2).unwrap();
        let shards = vec![mk(), mk(), mk()];
        let mut t = IdealTransport;
        let (own, loo, acct) = hfd_offline(&shards, &mut t).unwrap();
        assert_eq!(acct.offline_reals_per_device, 2 * 2);
        for k in 0..3 {
            assert_eq!(loo[k].data(), own[k].data());
        }

        // hand case: rows [1,1], [0,0], [0,0] -> device-1 leave-one-out [0,0]
        let a = LabeledDataset::new(vec![1.0, 1.0, 0.3, 0.3], vec![1, 2], 2, 2).unwrap();
        let b = LabeledDataset::new(vec![0.0, 0.0, 0.3, 0.3], vec![1, 2], 2, 2).unwrap();
        let c = LabeledDataset::new(vec![0.0, 0.0, 0.3, 0.3], vec![1, 2], 2, 2).unwrap();
        let (_, loo, _) = hfd_offline(&[a, b, c], &mut t).unwrap();
        assert_eq!(loo[0].row(1), &[0.0, 0.0]);
    }

    #[test]
    fn hfd_zero_distill_is_il_segment_plus_upload() {
        let arch = tiny_arch();
        let shards = tiny_shards(2, 30, 51);
        let il = run_il(&arch, shards.clone(), 0.05, 4, 12, 1, 2).unwrap();
        let mut t = IdealTransport;
        let mut hfd = HfdSession::new(arch.clone(), shards, 1, 2, 0.05, 4, 0.3, &mut t).unwrap();
        hfd.round(&mut t, 0, 12).unwrap();
        for k in 0..2 {
            assert_eq!(hfd.devices[k].weights, il[k]);
        }
        // upload rows are logits of own average covariates
        let logits = hfd.devices[0].logits_of_rows(&arch, &hfd.own_cov[0].clone());
        assert_eq!(hfd.prev_uploads[0], logits);
    }

    #[test]
    fn transport_swap_changes_only_ps_average() {
        // force the digital transport to return the exact average: the
        // trajectories must match the ideal transport bitwise
        struct ExactOverride(DigitalTransport);
        impl Transport for ExactOverride {
            fn name(&self) -> &'static str {
                "digital-exact"
            }
            fn uplink_weight_deltas(&mut self, d: &[Vec<f64>]) -> Result<Delivered<Vec<f64>>> {
                let acct = self.0.uplink_weight_deltas(d)?.accounting;
                Ok(Delivered {
                    average: ps_average(d)?,
                    accounting: acct,
                })
            }
            fn uplink_logit_tables(&mut self, t: &[LogitTable]) -> Result<Delivered<LogitTable>> {
                let acct = self.0.uplink_logit_tables(t)?.accounting;
                Ok(Delivered {
                    average: ps_average_tables(t)?,
                    accounting: acct,
                })
            }
            fn uplink_covariate_tables(&mut self, t: &[CovariateTable]) -> Result<Delivered<CovariateTable>> {
                self.0.uplink_covariate_tables(t)
            }
        }

        let arch = tiny_arch();
        let shards = tiny_shards(3, 30, 61);

        let mut ideal_fd = FdSession::new(arch.clone(), shards.clone(), 1, 2, 0.05, 4, 0.2);
        let mut t1 = IdealTransport;
        for _ in 0..2 {
            ideal_fd.round(&mut t1, 6).unwrap();
        }

        let mut forced_fd = FdSession::new(arch.clone(), shards.clone(), 1, 2, 0.05, 4, 0.2);
        let mut t2 = ExactOverride(DigitalTransport::new(4000, 3, 1.0, 16));
        for _ in 0..2 {
            forced_fd.round(&mut t2, 6).unwrap();
        }
        for k in 0..3 {
            assert_eq!(ideal_fd.devices[k].weights, forced_fd.devices[k].weights);
        }

        let mut ideal_fl = FlSession::new(arch.clone(), shards.clone(), 1, 2, 0.05, 4);
        let mut t3 = IdealTransport;
        let mut forced_fl = FlSession::new(arch.clone(), shards, 1, 2, 0.05, 4);
        let mut t4 = ExactOverride(DigitalTransport::new(4000, 3, 1.0, 16));
        for _ in 0..2 {
            ideal_fl.round(&mut t3, 6).unwrap();
            forced_fl.round(&mut t4, 6).unwrap();
        }
        for k in 0..3 {
            assert_eq!(ideal_fl.devices[k].weights, forced_fl.devices[k].weights);
        }
    }

    #[test]
    fn digital_transport_stays_within_budget() {
        let arch = tiny_arch();
        let shards = tiny_shards(3, 30, 71);
        let mut fl = FlSession::new(arch.clone(), shards.clone(), 1, 2, 0.05, 4);
        let mut t = DigitalTransport::new(200, 3, 1.0, 16);
        let budget = t.budget().bits;
        for _ in 0..3 {
            let out = fl.round(&mut t, 5).unwrap();
            assert!(out.accounting.bits_per_device <= budget);
            assert!(out.accounting.q > 0);
        }
        let mut fd = FdSession::new(arch, shards, 1, 2, 0.05, 4, 0.1);
        let mut t = DigitalTransport::new(200, 3, 1.0, 16);
        for _ in 0..2 {
            let out = fd.round(&mut t, 5).unwrap();
            assert!(out.accounting.bits_per_device <= budget);
        }
    }

    #[test]
    fn analog_transport_round_trip_runs_and_reports() {
        let arch = tiny_arch();
        let shards = tiny_shards(3, 30, 81);
        let cfg = ChannelConfig {
            channel_uses: 64,
            snr: 10.0,
            noise_seed: 5,
            noise_scale: 1.0,
        };
        let mut fl = FlSession::new(arch.clone(), shards.clone(), 1, 2, 0.05, 4);
        let mut t = AnalogTransport::new(cfg, AmpConfig::default(), None);
        let out = fl.round(&mut t, 5).unwrap();
        assert_eq!(out.accounting.channel_uses, 64);
        assert_eq!(out.accounting.frame_powers.len(), 3);
        for &p in &out.accounting.frame_powers {
            assert!(p <= cfg.snr + 1e-9);
        }
        assert!(out.accounting.amp_iterations >= 1);

        let mut fd = FdSession::new(arch, shards, 1, 2, 0.05, 4, 0.1);
        let mut t = AnalogTransport::new(cfg, AmpConfig::default(), None);
        let out = fd.round(&mut t, 5).unwrap();
        assert_eq!(out.accounting.rho, 4); // floor(64 / 16)
    }

    #[test]
    fn analog_fd_noiseless_transport_is_exact_average() {
        let arch = tiny_arch();
        let shards = tiny_shards(3, 30, 91);
        let cfg = ChannelConfig {
            channel_uses: 64,
            snr: 1.0,
            noise_seed: 5,
            noise_scale: 0.0,
        };
        let mut ideal = FdSession::new(arch.clone(), shards.clone(), 1, 2, 0.05, 4, 0.2);
        let mut analog = FdSession::new(arch, shards, 1, 2, 0.05, 4, 0.2);
        let mut ti = IdealTransport;
        let mut ta = AnalogTransport::new(cfg, AmpConfig::default(), None);
        ideal.round(&mut ti, 5).unwrap();
        analog.round(&mut ta, 5).unwrap();
        for (a, b) in analog.global_table.data().iter().zip(ideal.global_table.data()) {
            assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
        }
    }
}
