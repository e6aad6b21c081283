//! Command-line driver: single runs, the channel-use and SNR sweeps, the
//! ideal-channel comparison table, and the quick property self-test.

use std::sync::Arc;

use clap::{Args, Parser, Subcommand};

use airfed::harness::{
    self, default_sweep_schemes, results_to_csv, run_sweep, sweep_configs, Protocol, RunConfig,
    RunResult, Scheme, SweepAxis, TransportKind,
};
use airfed::{Error, Result};

#[derive(Parser)]
#[command(name = "airfed", version, about = "Cooperative edge learning over a shared Gaussian uplink")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a single experiment.
    Run(RunArgs),
    /// Sweep the number of channel uses T (SNR fixed).
    SweepT(SweepArgs),
    /// Sweep the SNR in dB (T fixed).
    SweepSnr(SweepArgs),
    /// Reproduce the ideal-channel comparison table over several seeds.
    IdealTable(IdealTableArgs),
    /// Run the property self-test suites (no dataset required).
    Selftest,
}

/// Config-file selection plus per-key overrides. Every config key maps to
/// the flag of the same name (nested keys use a prefix: `seeds.init` is
/// `--seed-init`, `paths.output` is `--output`, `amp.kappa` is
/// `--amp-kappa`).
#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// TOML config file; defaults are the reference parameters.
    #[arg(long)]
    config: Option<String>,

    #[arg(long)]
    protocol: Option<String>,
    #[arg(long)]
    transport: Option<String>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    global_iters: Option<usize>,
    #[arg(long)]
    devices: Option<usize>,
    #[arg(long)]
    labels: Option<usize>,
    #[arg(long)]
    quant_bits: Option<u32>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    local_iters: Option<usize>,
    #[arg(long)]
    hfd_distill_iters: Option<usize>,
    #[arg(long)]
    hfd_il_iters: Option<usize>,
    #[arg(long)]
    il_total_iters: Option<usize>,
    #[arg(long)]
    per_device: Option<usize>,
    #[arg(long)]
    keep_per_target: Option<usize>,
    /// Per-device target labels, e.g. "3,6,9;2,5,8;1,4,7".
    #[arg(long)]
    target_labels: Option<String>,
    #[arg(long)]
    channel_uses: Option<usize>,
    #[arg(long)]
    snr_db: Option<f64>,
    #[arg(long)]
    analog_fl_q: Option<usize>,
    /// Layer list, e.g. "conv 3x3 1->8,relu,maxpool 2,...".
    #[arg(long)]
    arch: Option<String>,
    #[arg(long)]
    seed_init: Option<u64>,
    #[arg(long)]
    seed_data: Option<u64>,
    #[arg(long)]
    seed_noise: Option<u64>,
    #[arg(long)]
    seed_sgd: Option<u64>,
    #[arg(long)]
    train_images: Option<String>,
    #[arg(long)]
    train_labels: Option<String>,
    #[arg(long)]
    test_images: Option<String>,
    #[arg(long)]
    test_labels: Option<String>,
    #[arg(long)]
    output: Option<String>,
    #[arg(long)]
    amp_kappa: Option<f64>,
    #[arg(long)]
    amp_max_iters: Option<usize>,
    #[arg(long)]
    amp_tol: Option<f64>,
}

impl ConfigArgs {
    fn build(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::from_toml_file(path)?,
            None => RunConfig::default(),
        };
        if let Some(v) = &self.protocol {
            cfg.protocol = Protocol::parse(v)?;
        }
        if let Some(v) = &self.transport {
            cfg.transport = TransportKind::parse(v)?;
        }
        macro_rules! over {
            ($($field:ident => $target:expr),* $(,)?) => {
                $(if let Some(v) = self.$field.clone() { $target = v; })*
            };
        }
        over! {
            alpha => cfg.alpha,
            beta => cfg.beta,
            global_iters => cfg.global_iters,
            devices => cfg.devices,
            labels => cfg.labels,
            quant_bits => cfg.quant_bits,
            batch => cfg.batch,
            local_iters => cfg.local_iters,
            hfd_distill_iters => cfg.hfd_distill_iters,
            hfd_il_iters => cfg.hfd_il_iters,
            il_total_iters => cfg.il_total_iters,
            per_device => cfg.per_device,
            keep_per_target => cfg.keep_per_target,
            channel_uses => cfg.channel_uses,
            snr_db => cfg.snr_db,
            analog_fl_q => cfg.analog_fl_q,
            seed_init => cfg.seeds.init,
            seed_data => cfg.seeds.data,
            seed_noise => cfg.seeds.noise,
            seed_sgd => cfg.seeds.sgd,
            train_images => cfg.paths.train_images,
            train_labels => cfg.paths.train_labels,
            test_images => cfg.paths.test_images,
            test_labels => cfg.paths.test_labels,
            output => cfg.paths.output,
            amp_kappa => cfg.amp.kappa,
            amp_max_iters => cfg.amp.max_iters,
            amp_tol => cfg.amp.tol,
        }
        if let Some(v) = &self.target_labels {
            cfg.target_labels = v
                .split(';')
                .map(|group| {
                    group
                        .split(',')
                        .map(|t| t.trim().parse::<usize>().map_err(|_| Error::Config(format!("bad label {t:?}"))))
                        .collect::<Result<Vec<_>>>()
                })
                .collect::<Result<Vec<_>>>()?;
        }
        if let Some(v) = &self.arch {
            cfg.arch = v.split(',').map(|s| s.trim().to_string()).collect();
        }
        Ok(cfg)
    }
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Axis values, comma separated (channel uses or dB).
    #[arg(long)]
    values: Option<String>,
    /// Schemes to run, comma separated ("il", "d-fl", "a-hfd", ...).
    #[arg(long)]
    schemes: Option<String>,
}

#[derive(Args)]
struct IdealTableArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Base seeds to average over, comma separated.
    #[arg(long, default_value = "1,2,3")]
    seeds: String,
}

fn parse_values(text: &str) -> Result<Vec<f64>> {
    text.split(',')
        .map(|v| {
            v.trim()
                .parse::<f64>()
                .map_err(|_| Error::Config(format!("bad value {v:?}")))
        })
        .collect()
}

fn print_summary(result: &RunResult) {
    let cfg = &result.config;
    println!(
        "{} W={} rounds={}",
        cfg.run_id(),
        result.param_count,
        result.rounds.len()
    );
    for m in &result.rounds {
        println!(
            "  round {:>2}: avg target acc {:.4}  per-device [{}]",
            m.round,
            m.avg_target,
            m.per_device_target
                .iter()
                .map(|a| format!("{a:.4}"))
                .collect::<Vec<_>>()
                .join(", ")
        );
    }
}

fn write_csv(path: &str, csv: &str) -> Result<()> {
    std::fs::write(path, csv)?;
    println!("wrote {path}");
    Ok(())
}

fn cmd_run(args: RunArgs) -> Result<()> {
    let cfg = args.config.build()?;
    let result = harness::run_experiment(&cfg)?;
    print_summary(&result);
    let csv = results_to_csv(&[Ok(result)])?;
    write_csv(&cfg.paths.output, &csv)
}

fn cmd_sweep(args: SweepArgs, axis: SweepAxis) -> Result<()> {
    let template = args.config.build()?;
    let values = match &args.values {
        Some(v) => parse_values(v)?,
        None => match axis {
            SweepAxis::ChannelUses => vec![1000.0, 3000.0, 5000.0, 7000.0, 9000.0],
            SweepAxis::SnrDb => vec![-10.0, -5.0, 0.0, 5.0, 10.0, 15.0, 20.0],
        },
    };
    let schemes: Vec<Scheme> = match &args.schemes {
        Some(s) => s
            .split(',')
            .map(|p| Scheme::parse(p.trim()))
            .collect::<Result<Vec<_>>>()?,
        None => default_sweep_schemes(),
    };
    let (train, test) = harness::load_corpora(&template)?;
    let test = Arc::new(test);
    let cells = sweep_configs(&template, axis, &values, &schemes);
    eprintln!("sweep: {} cells", cells.len());
    let results = run_sweep(cells, &train, &test);
    for r in &results {
        match r {
            Ok(res) => println!(
                "{}  final avg target acc {:.4}",
                res.config.run_id(),
                res.final_avg_target()
            ),
            Err((cfg, e)) => println!("{}  FAILED: {e}", cfg.run_id()),
        }
    }
    let csv = results_to_csv(&results)?;
    write_csv(&template.paths.output, &csv)
}

fn cmd_ideal_table(args: IdealTableArgs) -> Result<()> {
    let template = args.config.build()?;
    let seeds: Vec<u64> = args
        .seeds
        .split(',')
        .map(|v| {
            v.trim()
                .parse::<u64>()
                .map_err(|_| Error::Config(format!("bad seed {v:?}")))
        })
        .collect::<std::result::Result<_, _>>()?;
    let (train, test) = harness::load_corpora(&template)?;
    let test = Arc::new(test);

    let mut cells = Vec::new();
    for &seed in &seeds {
        for protocol in [Protocol::Il, Protocol::Fd, Protocol::Hfd, Protocol::Fl] {
            let mut cfg = template.clone();
            cfg.protocol = protocol;
            cfg.transport = TransportKind::Ideal;
            cfg.seeds.init = seed;
            cfg.seeds.data = seed.wrapping_add(1000);
            cfg.seeds.noise = seed.wrapping_add(2000);
            cfg.seeds.sgd = seed.wrapping_add(3000);
            cells.push(cfg);
        }
    }
    let results = run_sweep(cells, &train, &test);

    println!("\nAccuracy for target labels (ideal links, {} seed(s)):", seeds.len());
    println!("{:<6} {:>10} {:>10} {:>10} {:>10}", "", "device 1", "device 2", "device 3", "average");
    for protocol in [Protocol::Il, Protocol::Fd, Protocol::Hfd, Protocol::Fl] {
        let mut per_dev = vec![0.0; template.devices];
        let mut avg = 0.0;
        let mut n = 0usize;
        for r in results.iter().flatten() {
            if r.config.protocol == protocol {
                for (acc, v) in per_dev.iter_mut().zip(r.final_per_device_target()) {
                    *acc += v;
                }
                avg += r.final_avg_target();
                n += 1;
            }
        }
        if n == 0 {
            continue;
        }
        let cols = per_dev
            .iter()
            .map(|a| format!("{:>10.4}", a / n as f64))
            .collect::<Vec<_>>()
            .join(" ");
        println!("{:<6} {} {:>10.4}", protocol.as_str().to_uppercase(), cols, avg / n as f64);
    }

    let csv = results_to_csv(&results)?;
    write_csv(&template.paths.output, &csv)
}

fn cmd_selftest() -> Result<()> {
    let results = harness::selftest();
    let mut failed = 0;
    for (name, ok) in &results {
        println!("[{}] {}", if *ok { "PASS" } else { "FAIL" }, name);
        if !*ok {
            failed += 1;
        }
    }
    println!("{} checks, {} failed", results.len(), failed);
    if failed > 0 {
        std::process::exit(1);
    }
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(args) => cmd_run(args),
        Command::SweepT(args) => cmd_sweep(args, SweepAxis::ChannelUses),
        Command::SweepSnr(args) => cmd_sweep(args, SweepAxis::SnrDb),
        Command::IdealTable(args) => cmd_ideal_table(args),
        Command::Selftest => cmd_selftest(),
    };
    if let Err(e) = result {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
