//! Experiment orchestration: run configuration, seeding, the protocol x
//! transport matrix, evaluation, per-round metrics, and CSV emission.
//!
//! Every run is fully determined by its config (including the four seeds);
//! sweep cells reuse identical seeds so cells differ only in the swept
//! variable's effect.

use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channel::ChannelConfig;
use crate::data::{load_idx, partition_heterogeneous, LabeledDataset, Partition, PartitionSpec};
use crate::nn::{self, ModelArch, Scratch, Shape};
use crate::otac::AmpConfig;
use crate::protocols::{
    Accounting, AnalogTransport, DigitalTransport, FdSession, FlSession, HfdSession, IdealTransport,
    IlSession, RoundOutcome, Transport,
};
use crate::{Error, Result};

/// CSV schema version written into every row.
pub const CSV_SCHEMA_VERSION: u32 = 1;

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    Il,
    Fl,
    Fd,
    Hfd,
}

impl Protocol {
    pub fn as_str(&self) -> &'static str {
        match self {
            Protocol::Il => "il",
            Protocol::Fl => "fl",
            Protocol::Fd => "fd",
            Protocol::Hfd => "hfd",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "il" => Ok(Protocol::Il),
            "fl" => Ok(Protocol::Fl),
            "fd" => Ok(Protocol::Fd),
            "hfd" => Ok(Protocol::Hfd),
            _ => Err(Error::Config(format!("unknown protocol {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransportKind {
    Ideal,
    Digital,
    Analog,
}

impl TransportKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            TransportKind::Ideal => "ideal",
            TransportKind::Digital => "digital",
            TransportKind::Analog => "analog",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "ideal" => Ok(TransportKind::Ideal),
            "digital" => Ok(TransportKind::Digital),
            "analog" => Ok(TransportKind::Analog),
            _ => Err(Error::Config(format!("unknown transport {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Seeds {
    pub init: u64,
    pub data: u64,
    pub noise: u64,
    pub sgd: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Seeds {
            init: 1,
            data: 2,
            noise: 3,
            sgd: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    pub train_images: String,
    pub train_labels: String,
    pub test_images: String,
    pub test_labels: String,
    pub output: String,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            train_images: "data/mnist/train-images-idx3-ubyte".into(),
            train_labels: "data/mnist/train-labels-idx1-ubyte".into(),
            test_images: "data/mnist/t10k-images-idx3-ubyte".into(),
            test_labels: "data/mnist/t10k-labels-idx1-ubyte".into(),
            output: "runs.csv".into(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AmpSettings {
    pub kappa: f64,
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for AmpSettings {
    fn default() -> Self {
        AmpSettings {
            kappa: 1.5,
            max_iters: 50,
            tol: 1e-6,
        }
    }
}

/// Full experiment configuration; the defaults reproduce the reference
/// set-up (three devices, 1000 samples each with depleted target labels,
/// ten global iterations of 3520 local iterations at batch 64).
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub protocol: Protocol,
    pub transport: TransportKind,
    pub alpha: f64,
    pub beta: f64,
    pub global_iters: usize,
    pub devices: usize,
    pub labels: usize,
    pub quant_bits: u32,
    pub batch: usize,
    pub local_iters: usize,
    pub hfd_distill_iters: usize,
    pub hfd_il_iters: usize,
    pub il_total_iters: usize,
    pub per_device: usize,
    pub keep_per_target: usize,
    pub target_labels: Vec<Vec<usize>>,
    /// Channel uses per global iteration, `T`.
    pub channel_uses: usize,
    /// Transmit SNR in dB; linear `P = 10^(dB/10)`.
    pub snr_db: f64,
    /// Threshold level for analog FL; 0 selects the default `T / 20`.
    pub analog_fl_q: usize,
    pub arch: Vec<String>,
    pub seeds: Seeds,
    pub paths: Paths,
    pub amp: AmpSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            protocol: Protocol::Il,
            transport: TransportKind::Ideal,
            alpha: 0.001,
            beta: 0.01,
            global_iters: 10,
            devices: 3,
            labels: 10,
            quant_bits: 16,
            batch: 64,
            local_iters: 3520,
            hfd_distill_iters: 1408,
            hfd_il_iters: 2112,
            il_total_iters: 35_200,
            per_device: 1000,
            keep_per_target: 5,
            target_labels: vec![vec![3, 6, 9], vec![2, 5, 8], vec![1, 4, 7]],
            channel_uses: 3000,
            snr_db: 0.0,
            analog_fl_q: 0,
            arch: vec![
                "conv 3x3 1->8".into(),
                "relu".into(),
                "maxpool 2".into(),
                "conv 3x3 8->16".into(),
                "relu".into(),
                "maxpool 2".into(),
                "dense 784->32".into(),
                "relu".into(),
                "dense 32->10".into(),
            ],
            seeds: Seeds::default(),
            paths: Paths::default(),
            amp: AmpSettings::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_file(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Linear SNR `P = 10^(dB/10)`.
    pub fn snr_linear(&self) -> f64 {
        10f64.powf(self.snr_db / 10.0)
    }

    pub fn build_arch(&self) -> Result<ModelArch> {
        ModelArch::parse(Shape::Map { h: 28, w: 28, c: 1 }, &self.arch)
    }

    pub fn build_transport(&self) -> Box<dyn Transport> {
        match self.transport {
            TransportKind::Ideal => Box::new(IdealTransport),
            TransportKind::Digital => Box::new(DigitalTransport::new(
                self.channel_uses,
                self.devices,
                self.snr_linear(),
                self.quant_bits,
            )),
            TransportKind::Analog => Box::new(AnalogTransport::new(
                ChannelConfig {
                    channel_uses: self.channel_uses,
                    snr: self.snr_linear(),
                    noise_seed: self.seeds.noise,
                    noise_scale: 1.0,
                },
                AmpConfig {
                    kappa: self.amp.kappa,
                    max_iters: self.amp.max_iters,
                    tol: self.amp.tol,
                },
                (self.analog_fl_q > 0).then_some(self.analog_fl_q),
            )),
        }
    }

    pub fn partition_spec(&self) -> PartitionSpec {
        PartitionSpec {
            devices: self.devices,
            per_device: self.per_device,
            target_labels: self.target_labels.clone(),
            keep_per_target: self.keep_per_target,
            seed: self.seeds.data,
        }
    }

    /// Short identifier used in CSV rows.
    pub fn run_id(&self) -> String {
        format!(
            "{}-{}-T{}-P{}dB-s{}.{}.{}.{}",
            self.protocol.as_str(),
            self.transport.as_str(),
            self.channel_uses,
            self.snr_db,
            self.seeds.init,
            self.seeds.data,
            self.seeds.noise,
            self.seeds.sgd
        )
    }
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

/// Per-label accuracies of one model over a test set.
#[derive(Clone, Debug)]
pub struct EvalResult {
    /// `per_label[t-1]` = fraction of label-`t` examples predicted `t`.
    pub per_label: Vec<f64>,
}

impl EvalResult {
    /// Mean accuracy over a device's target labels.
    pub fn target_summary(&self, target_labels: &[usize]) -> f64 {
        let sum: f64 = target_labels.iter().map(|&t| self.per_label[t - 1]).sum();
        sum / target_labels.len() as f64
    }
}

/// Per-label test accuracy; argmax ties resolve to the lowest index.
pub fn evaluate(arch: &ModelArch, w: &[f64], test: &LabeledDataset) -> Result<EvalResult> {
    let l = arch.output_len();
    let mut correct = vec![0usize; l];
    let mut total = vec![0usize; l];
    let mut scratch = Scratch::new(arch);
    for i in 0..test.len() {
        let t = test.label(i);
        nn::forward_into(arch, w, test.covariates(i), &mut scratch);
        let logits = scratch.logits();
        let mut best = 0usize;
        for j in 1..l {
            if logits[j] > logits[best] {
                best = j;
            }
        }
        total[t - 1] += 1;
        if best + 1 == t {
            correct[t - 1] += 1;
        }
    }
    if let Some(t) = total.iter().position(|&n| n == 0) {
        return Err(Error::EmptyLabel { label: t + 1 });
    }
    Ok(EvalResult {
        per_label: correct
            .iter()
            .zip(&total)
            .map(|(&c, &n)| c as f64 / n as f64)
            .collect(),
    })
}

// ---------------------------------------------------------------------------
// Round metrics
// ---------------------------------------------------------------------------

/// Everything recorded about one global iteration of one run.
#[derive(Clone, Debug)]
pub struct RoundMetrics {
    pub round: usize,
    /// `per_device_per_label[k][t-1]`.
    pub per_device_per_label: Vec<Vec<f64>>,
    /// Mean accuracy over each device's own target labels.
    pub per_device_target: Vec<f64>,
    /// Mean of `per_device_target`.
    pub avg_target: f64,
    pub accounting: Accounting,
    pub zero_counter_fallbacks: usize,
}

/// A finished run: its config echo, the parameter count, and per-round
/// metrics (the last round doubles as the summary).
#[derive(Clone, Debug)]
pub struct RunResult {
    pub config: RunConfig,
    pub param_count: usize,
    pub rounds: Vec<RoundMetrics>,
}

impl RunResult {
    pub fn final_avg_target(&self) -> f64 {
        self.rounds.last().map_or(0.0, |r| r.avg_target)
    }

    pub fn final_per_device_target(&self) -> Vec<f64> {
        self.rounds
            .last()
            .map_or_else(Vec::new, |r| r.per_device_target.clone())
    }
}

// ---------------------------------------------------------------------------
// Experiment driver
// ---------------------------------------------------------------------------

/// Load the train/test corpora named by the config.
pub fn load_corpora(cfg: &RunConfig) -> Result<(LabeledDataset, LabeledDataset)> {
    let train = load_idx(&cfg.paths.train_images, &cfg.paths.train_labels)?;
    let test = load_idx(&cfg.paths.test_images, &cfg.paths.test_labels)?;
    Ok((train, test))
}

/// Run one experiment end to end, loading data from the configured paths.
pub fn run_experiment(cfg: &RunConfig) -> Result<RunResult> {
    let (train, test) = load_corpora(cfg)?;
    run_experiment_on(cfg, &train, &Arc::new(test))
}

/// Run one experiment against pre-loaded corpora (sweeps share the load).
pub fn run_experiment_on(
    cfg: &RunConfig,
    train: &LabeledDataset,
    test: &Arc<LabeledDataset>,
) -> Result<RunResult> {
    let arch = cfg.build_arch()?;
    if arch.output_len() != cfg.labels {
        return Err(Error::Config(format!(
            "architecture emits {} classes, config says {}",
            arch.output_len(),
            cfg.labels
        )));
    }
    let Partition { devices: shards, .. } = partition_heterogeneous(train, &cfg.partition_spec())?;
    let mut transport = cfg.build_transport();
    let param_count = arch.param_count();

    let mut rounds = Vec::with_capacity(cfg.global_iters);
    let eval_round = |round: usize,
                          weights: Vec<&[f64]>,
                          outcome: RoundOutcome|
     -> Result<RoundMetrics> {
        let evals: Vec<EvalResult> = weights
            .into_par_iter()
            .map(|w| evaluate(&arch, w, test))
            .collect::<Result<Vec<_>>>()?;
        let per_device_per_label: Vec<Vec<f64>> = evals.iter().map(|e| e.per_label.clone()).collect();
        let per_device_target: Vec<f64> = evals
            .iter()
            .zip(&cfg.target_labels)
            .map(|(e, targets)| e.target_summary(targets))
            .collect();
        let avg_target = per_device_target.iter().sum::<f64>() / per_device_target.len() as f64;
        Ok(RoundMetrics {
            round,
            per_device_per_label,
            per_device_target,
            avg_target,
            accounting: outcome.accounting,
            zero_counter_fallbacks: outcome.zero_counter_fallbacks,
        })
    };

    match cfg.protocol {
        Protocol::Il => {
            let mut session = IlSession::new(
                arch.clone(),
                shards,
                cfg.seeds.init,
                cfg.seeds.sgd,
                cfg.alpha,
                cfg.batch,
            );
            let block = cfg.il_total_iters / cfg.global_iters;
            let mut done = 0usize;
            for round in 1..=cfg.global_iters {
                let iters = if round == cfg.global_iters {
                    cfg.il_total_iters - done
                } else {
                    block
                };
                done += iters;
                session.run_block(iters).map_err(|e| e.in_round(round))?;
                let ws: Vec<&[f64]> = session.devices.iter().map(|d| d.weights.as_slice()).collect();
                rounds.push(eval_round(round, ws, RoundOutcome::default())?);
            }
        }
        Protocol::Fl => {
            let mut session = FlSession::new(
                arch.clone(),
                shards,
                cfg.seeds.init,
                cfg.seeds.sgd,
                cfg.alpha,
                cfg.batch,
            );
            for round in 1..=cfg.global_iters {
                let outcome = session
                    .round(transport.as_mut(), cfg.local_iters)
                    .map_err(|e| e.in_round(round))?;
                let ws: Vec<&[f64]> = session.devices.iter().map(|d| d.weights.as_slice()).collect();
                rounds.push(eval_round(round, ws, outcome)?);
            }
        }
        Protocol::Fd => {
            let mut session = FdSession::new(
                arch.clone(),
                shards,
                cfg.seeds.init,
                cfg.seeds.sgd,
                cfg.alpha,
                cfg.batch,
                cfg.beta,
            );
            for round in 1..=cfg.global_iters {
                let outcome = session
                    .round(transport.as_mut(), cfg.local_iters)
                    .map_err(|e| e.in_round(round))?;
                let ws: Vec<&[f64]> = session.devices.iter().map(|d| d.weights.as_slice()).collect();
                rounds.push(eval_round(round, ws, outcome)?);
            }
        }
        Protocol::Hfd => {
            let mut session = HfdSession::new(
                arch.clone(),
                shards,
                cfg.seeds.init,
                cfg.seeds.sgd,
                cfg.alpha,
                cfg.batch,
                cfg.beta,
                transport.as_mut(),
            )
            .map_err(|e| e.in_round(0))?;
            for round in 1..=cfg.global_iters {
                let mut outcome = session
                    .round(transport.as_mut(), cfg.hfd_distill_iters, cfg.hfd_il_iters)
                    .map_err(|e| e.in_round(round))?;
                if round == 1 {
                    outcome.accounting.offline_reals_per_device =
                        session.offline_accounting.offline_reals_per_device;
                }
                let ws: Vec<&[f64]> = session.devices.iter().map(|d| d.weights.as_slice()).collect();
                rounds.push(eval_round(round, ws, outcome)?);
            }
        }
    }

    Ok(RunResult {
        config: cfg.clone(),
        param_count,
        rounds,
    })
}

// ---------------------------------------------------------------------------
// CSV output
// ---------------------------------------------------------------------------

/// Fixed, versioned CSV header. One row per (run, round), plus a summary
/// row per run; the full config is echoed in the last column.
pub fn csv_header() -> Vec<&'static str> {
    vec![
        "schema_version",
        "timestamp_utc",
        "row_kind",
        "run_id",
        "status",
        "protocol",
        "transport",
        "round",
        "t_channel_uses",
        "p_db",
        "p_linear",
        "seed_init",
        "seed_data",
        "seed_noise",
        "seed_sgd",
        "w_params",
        "q",
        "b_d_bits",
        "bits_per_device",
        "rho",
        "side_info_reals",
        "offline_reals_per_device",
        "amp_iterations",
        "amp_diverged",
        "frame_power_max",
        "zero_counter_fallbacks",
        "per_device_target_acc",
        "avg_target_acc",
        "per_device_per_label_acc",
        "config_json",
    ]
}

fn join_f64(values: &[f64]) -> String {
    values
        .iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join("|")
}

fn metric_row(
    kind: &str,
    status: &str,
    cfg: &RunConfig,
    param_count: usize,
    m: &RoundMetrics,
    timestamp: &str,
) -> Vec<String> {
    let acct = &m.accounting;
    let frame_power_max = acct.frame_powers.iter().cloned().fold(0.0, f64::max);
    let per_label = m
        .per_device_per_label
        .iter()
        .map(|dev| join_f64(dev))
        .collect::<Vec<_>>()
        .join(";");
    vec![
        CSV_SCHEMA_VERSION.to_string(),
        timestamp.to_string(),
        kind.to_string(),
        cfg.run_id(),
        status.to_string(),
        cfg.protocol.as_str().to_string(),
        cfg.transport.as_str().to_string(),
        m.round.to_string(),
        cfg.channel_uses.to_string(),
        cfg.snr_db.to_string(),
        cfg.snr_linear().to_string(),
        cfg.seeds.init.to_string(),
        cfg.seeds.data.to_string(),
        cfg.seeds.noise.to_string(),
        cfg.seeds.sgd.to_string(),
        param_count.to_string(),
        acct.q.to_string(),
        acct.bit_budget.to_string(),
        acct.bits_per_device.to_string(),
        acct.rho.to_string(),
        acct.side_info_reals.to_string(),
        acct.offline_reals_per_device.to_string(),
        acct.amp_iterations.to_string(),
        acct.amp_diverged.to_string(),
        frame_power_max.to_string(),
        m.zero_counter_fallbacks.to_string(),
        join_f64(&m.per_device_target),
        m.avg_target.to_string(),
        per_label,
        serde_json::to_string(cfg).expect("config serializes"),
    ]
}

fn failed_row(cfg: &RunConfig, err: &Error, timestamp: &str) -> Vec<String> {
    let mut row = vec![String::new(); csv_header().len()];
    row[0] = CSV_SCHEMA_VERSION.to_string();
    row[1] = timestamp.to_string();
    row[2] = "summary".into();
    row[3] = cfg.run_id();
    row[4] = format!("failed: {err}");
    row[5] = cfg.protocol.as_str().into();
    row[6] = cfg.transport.as_str().into();
    row[8] = cfg.channel_uses.to_string();
    row[9] = cfg.snr_db.to_string();
    row[29] = serde_json::to_string(cfg).expect("config serializes");
    row
}

/// Append one run's rows (per-round plus a summary) to a CSV writer.
pub fn write_run_rows<W: std::io::Write>(
    writer: &mut csv::Writer<W>,
    result: &RunResult,
    timestamp: &str,
) -> Result<()> {
    for m in &result.rounds {
        writer.write_record(metric_row("round", "ok", &result.config, result.param_count, m, timestamp))?;
    }
    if let Some(last) = result.rounds.last() {
        writer.write_record(metric_row(
            "summary",
            "ok",
            &result.config,
            result.param_count,
            last,
            timestamp,
        ))?;
    }
    Ok(())
}

fn timestamp_now() -> String {
    let secs = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    secs.to_string()
}

/// Render a whole batch of results (in a fixed order) to CSV text.
pub fn results_to_csv(results: &[std::result::Result<RunResult, (RunConfig, Error)>]) -> Result<String> {
    let timestamp = timestamp_now();
    let mut writer = csv::Writer::from_writer(Vec::new());
    writer.write_record(csv_header())?;
    for r in results {
        match r {
            Ok(result) => write_run_rows(&mut writer, result, &timestamp)?,
            Err((cfg, err)) => writer.write_record(failed_row(cfg, err, &timestamp))?,
        }
    }
    let bytes = writer.into_inner().map_err(|e| Error::Config(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv is utf-8"))
}

// ---------------------------------------------------------------------------
// Sweeps
// ---------------------------------------------------------------------------

/// Which axis a sweep varies.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepAxis {
    ChannelUses,
    SnrDb,
}

/// One (protocol, transport) scheme in a sweep.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Scheme {
    pub protocol: Protocol,
    pub transport: TransportKind,
}

impl Scheme {
    pub fn parse(s: &str) -> Result<Self> {
        let (t, p) = match s.split_once('-') {
            Some((t, p)) => (TransportKind::parse(match t {
                "d" => "digital",
                "a" => "analog",
                other => other,
            })?, Protocol::parse(p)?),
            None => (TransportKind::Ideal, Protocol::parse(s)?),
        };
        Ok(Scheme {
            protocol: p,
            transport: t,
        })
    }
}

/// The Fig. 3 / Fig. 4 scheme set: an ideal IL baseline plus digital and
/// analog implementations of FL, FD, and HFD.
pub fn default_sweep_schemes() -> Vec<Scheme> {
    let mut out = vec![Scheme {
        protocol: Protocol::Il,
        transport: TransportKind::Ideal,
    }];
    for protocol in [Protocol::Fl, Protocol::Fd, Protocol::Hfd] {
        for transport in [TransportKind::Digital, TransportKind::Analog] {
            out.push(Scheme { protocol, transport });
        }
    }
    out
}

/// Build the configs of one sweep: every scheme at every axis value, all
/// sharing the template's seeds (paired comparison).
pub fn sweep_configs(template: &RunConfig, axis: SweepAxis, values: &[f64], schemes: &[Scheme]) -> Vec<RunConfig> {
    let mut cells = Vec::new();
    for &value in values {
        for scheme in schemes {
            let mut cfg = template.clone();
            cfg.protocol = scheme.protocol;
            cfg.transport = scheme.transport;
            match axis {
                SweepAxis::ChannelUses => cfg.channel_uses = value as usize,
                SweepAxis::SnrDb => cfg.snr_db = value,
            }
            cells.push(cfg);
        }
    }
    cells
}

/// Run sweep cells (in parallel) against shared corpora; failed cells are
/// marked and do not stop the sweep. Results keep the cell order.
#[allow(clippy::result_large_err)]
pub fn run_sweep(
    cells: Vec<RunConfig>,
    train: &LabeledDataset,
    test: &Arc<LabeledDataset>,
) -> Vec<std::result::Result<RunResult, (RunConfig, Error)>> {
    cells
        .into_par_iter()
        .map(|cfg| match run_experiment_on(&cfg, train, test) {
            Ok(r) => Ok(r),
            Err(e) => Err((cfg, e)),
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Self test
// ---------------------------------------------------------------------------

/// Quick property suites runnable without the MNIST corpus. Returns
/// (name, passed) pairs.
pub fn selftest() -> Vec<(String, bool)> {
    use crate::channel::{ChannelFrame, GaussianMac};
    use crate::compress;
    use crate::otac;

    let mut results: Vec<(String, bool)> = Vec::new();
    let mut check = |name: &str, ok: bool| results.push((name.to_string(), ok));

    // bit budgets
    check("budget: B_D(3000,3,0dB) = 1000", compress::budget_bd(3000, 3, 1.0) == 1000.0);
    check("budget: q_FD(L=10,b=16,B_D=1000) = 5", compress::max_q_fd(10, 16, 1000.0) == 5);
    {
        // the full scan tops out at q = W (index set cost is symmetric);
        // the transport-relevant ascending-branch maximum sits below W/2
        let w = 26_722;
        check("budget: q_FL full scan reaches the symmetric tail", compress::max_q_fl(w, 16, 1000.0) == w);
        let q = compress::max_q_fl_bounded(w, 16, 1000.0, w / 2);
        let cost = 16.0 + compress::log2_binomial(w, q);
        let next = 16.0 + compress::log2_binomial(w, q + 1);
        check("budget: bounded q_FL feasible and q+1 infeasible", cost <= 1000.0 && next > 1000.0);
    }

    // sparsifiers
    check(
        "sparse_q hand trace",
        compress::sparse_q(&[3.0, -1.0, 0.5, -4.0, 2.0], 1).unwrap() == vec![0.0, 0.0, 0.0, -4.0, 0.0],
    );
    check(
        "thresh_q hand trace",
        compress::thresh_q(&[3.0, -1.0, 0.5, -4.0, 2.0], 2).unwrap() == vec![3.0, 0.0, 0.0, -4.0, 0.0],
    );

    // quantizer
    {
        let (_, deq) = compress::quantize_qb(&[0.5], 16, 1.0);
        check("quantizer: 16-bit step bound", (deq[0] - 0.5).abs() <= 1.0 / 65536.0);
    }

    // error feedback conservation on a random triple
    {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let u: Vec<f64> = (0..50).map(|_| rng.random_range(-1.0..1.0)).collect();
        let r: Vec<f64> = (0..50).map(|_| rng.random_range(-1.0..1.0)).collect();
        let t: Vec<f64> = (0..50).map(|_| rng.random_range(-1.0..1.0)).collect();
        let r2 = compress::error_feedback_update(&r, &u, &t).unwrap();
        let ok = (0..50).all(|i| (r2[i] + t[i] - r[i] - u[i]).abs() <= 1e-12);
        check("error feedback conserves mass", ok);
    }

    // channel noise statistics
    {
        let t = 100_000;
        let mut mac = GaussianMac::new(ChannelConfig {
            channel_uses: t,
            snr: 1.0,
            noise_seed: 17,
            noise_scale: 1.0,
        });
        let y = mac.transmit(&[ChannelFrame::new(vec![0.0; t])]).unwrap().received;
        let mean = y.iter().sum::<f64>() / t as f64;
        let var = y.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / t as f64;
        check("channel noise mean within 0.01", mean.abs() <= 0.01);
        check("channel noise variance within [0.98, 1.02]", (0.98..=1.02).contains(&var));
    }

    // AMP on a small noiseless instance
    {
        use rand::{Rng, SeedableRng};
        let a = otac::ProjectionMatrix::generate(200, 800, 3);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let mut x0 = vec![0.0; 800];
        for _ in 0..10 {
            let i = rng.random_range(0..800);
            x0[i] = rng.random_range(0.5..2.0);
        }
        let y = a.mul(&x0);
        let (xh, report) = otac::amp_decode(&y, &a, &otac::AmpConfig::default());
        let num: f64 = xh.iter().zip(&x0).map(|(&a, &b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        let den: f64 = x0.iter().map(|&v| v * v).sum::<f64>().sqrt();
        check("AMP noiseless recovery", !report.diverged && num / den <= 1e-3);
    }

    // leave-one-out identity
    {
        let avg = [3.0, 3.0];
        let own = [0.0, 0.0];
        let loo = crate::protocols::leave_one_out(&avg, &own, 3).unwrap();
        check("leave-one-out hand value", loo == vec![4.5, 4.5]);
    }

    results
}

// ---------------------------------------------------------------------------
// Tests
// ---------------------------------------------------------------------------
