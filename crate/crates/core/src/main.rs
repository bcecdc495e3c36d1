//! Command-line front end: simulate, fit and analyze, with every output
//! stamped with the config hash.
//!
//! Exit status: 0 success, 1 invalid input or configuration, 2 a fit did not
//! converge.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;
use serde::Serialize;

use tlsfluct::circlefit::fit_resonance;
use tlsfluct::config::RunConfig;
use tlsfluct::io::{self, Provenance};
use tlsfluct::spectral::{
    band_mean, coherence, default_segment_length, fit_one_over_f, lowest_decade_mean, normalize_series,
    resample_uniform, welch_psd, SpectrumEstimate,
};
use tlsfluct::stats::{
    averaging_time_scan, fit_lognormal, histogram, sample_skewness, skewness_z, windowed_convergence,
};
use tlsfluct::synth::{
    default_grid, simulate_interleaved_run, simulate_timetrace, synth_sweep, FrequencySweep, QiTimeSeries,
};
use tlsfluct::tls::{extract_loss_tangent, fit_power_dependence, fit_sigma_vs_q};
use tlsfluct::Error;

#[derive(Parser)]
#[command(name = "tlsfluct", version, about = "Simulate and analyze TLS-driven Q_i fluctuations")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Run configuration (JSON); defaults are used for absent fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the config output directory.
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
    /// Worker threads for batch fits (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic data.
    #[command(subcommand)]
    Simulate(Simulate),
    /// Fit measured or simulated data.
    #[command(subcommand)]
    Fit(Fit),
    /// Statistical and spectral analyses.
    #[command(subcommand)]
    Analyze(Analyze),
    /// Summary statistics of an interleaved run directory.
    Report {
        /// Directory holding lp.csv, mp.csv and hp.csv (default: output dir).
        #[arg(long)]
        input_dir: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum Simulate {
    /// One S21 sweep of the configured resonator.
    Sweep {
        /// Per-quadrature noise; default is the LP sweep noise.
        #[arg(long)]
        noise_sd: Option<f64>,
    },
    /// Single-power Q_i time trace.
    Timetrace {
        #[arg(long)]
        power_dbm: Option<f64>,
        /// Noise level: 0 (LP), 1 (MP) or 2 (HP).
        #[arg(long)]
        channel: Option<usize>,
        #[arg(long)]
        point_duration: Option<f64>,
        #[arg(long)]
        total_duration: Option<f64>,
        /// Write every raw sweep (full mode only) into `sweeps/`.
        #[arg(long)]
        keep_sweeps: bool,
    },
    /// Interleaved LP/MP/HP run plus the loss-tangent series.
    Interleaved,
}

#[derive(Subcommand)]
enum Fit {
    /// Circle fit of one sweep file.
    Sweep {
        #[arg(long)]
        input: PathBuf,
    },
    /// Saturation-model fit of Q_i versus photon number.
    PowerCurve {
        #[arg(long)]
        input: PathBuf,
    },
}

#[derive(Subcommand)]
enum Analyze {
    /// Welch PSD of a time series, relative to its mean.
    Spectrum {
        #[arg(long)]
        input: PathBuf,
        /// Column to analyze (default: q_i or f_delta_tls).
        #[arg(long)]
        column: Option<String>,
    },
    /// Magnitude-squared coherence of two time series.
    Coherence {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        other: PathBuf,
        #[arg(long)]
        column: Option<String>,
    },
    /// Log-normal fit, skewness test and histogram.
    Distribution {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        column: Option<String>,
    },
    /// Windowed convergence of the mean and sd of a loss-tangent series.
    Convergence {
        #[arg(long)]
        input: PathBuf,
    },
    /// Skewness versus averaging time over a directory of sweeps.
    Averaging {
        #[arg(long)]
        input: PathBuf,
        /// High-power Q_i subtracted in the loss-tangent estimate (default: config Q_PI).
        #[arg(long)]
        q_hp: Option<f64>,
    },
    /// Through-origin slope of sd(Q_i) against mean(Q_i) over several series.
    SigmaQ {
        #[arg(long, num_args = 1.., required = true)]
        input: Vec<PathBuf>,
    },
}

/// Failure with its exit status.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Degenerate(_) | Error::IllPosed(_) => 2,
            _ => 1,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

type CliResult<T = ()> = std::result::Result<T, Failure>;

fn not_converged(message: impl Into<String>) -> Failure {
    Failure {
        code: 2,
        message: message.into(),
    }
}

struct Ctx {
    cfg: RunConfig,
    prov: Provenance,
    out: PathBuf,
}

impl Ctx {
    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn done(&self, path: &Path) {
        info!("wrote {}", path.display());
    }
}

fn load_config(g: &Global) -> CliResult<RunConfig> {
    let mut cfg = match &g.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    if let Some(d) = &g.output_dir {
        cfg.output_dir = d.clone();
    }
    cfg.sync_seed();
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> CliResult {
    if let Some(n) = cli.global.threads {
        if n == 0 {
            return Err(Failure {
                code: 1,
                message: "--threads must be >= 1".into(),
            });
        }
        // fails only if the pool already exists, as when run in-process twice
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("thread pool: {e}");
        }
    }
    let cfg = load_config(&cli.global)?;
    let ctx = Ctx {
        prov: cfg.provenance(),
        out: cfg.output_dir.clone(),
        cfg,
    };
    let cfg_path = ctx.path("config.json");
    io::write_json(&cfg_path, &ctx.cfg, &ctx.prov)?;
    match cli.command {
        Command::Simulate(s) => simulate(&ctx, s),
        Command::Fit(f) => fit(&ctx, f),
        Command::Analyze(a) => analyze(&ctx, a),
        Command::Report { input_dir } => report(&ctx, input_dir.as_deref().unwrap_or(&ctx.out)),
    }
}

fn simulate(ctx: &Ctx, cmd: Simulate) -> CliResult {
    let cfg = &ctx.cfg;
    match cmd {
        Simulate::Sweep { noise_sd } => {
            let p = &cfg.resonator;
            let grid = default_grid(p, cfg.simulation.span_linewidths, cfg.simulation.sweep_points);
            let sd = noise_sd.unwrap_or(cfg.simulation.sweep_noise_sd[0]);
            let mut s = synth_sweep(p, &grid, sd, cfg.seed)?;
            s.meta.temperature_k = cfg.simulation.temperature_k;
            let path = ctx.path("sweep.csv");
            io::write_sweep(&path, &s, &ctx.prov)?;
            ctx.done(&path);
            let truth = ctx.path("sweep_truth.json");
            io::write_json(&truth, p, &ctx.prov)?;
            ctx.done(&truth);
        }
        Simulate::Timetrace {
            power_dbm,
            channel,
            point_duration,
            total_duration,
            keep_sweeps,
        } => {
            let mut trace = cfg.timetrace;
            trace.power_dbm = power_dbm.unwrap_or(trace.power_dbm);
            trace.noise_channel = channel.unwrap_or(trace.noise_channel);
            trace.point_duration = point_duration.unwrap_or(trace.point_duration);
            trace.total_duration = total_duration.unwrap_or(trace.total_duration);
            let run = simulate_timetrace(&cfg.tls, &cfg.resonator, &cfg.fluctuation, &trace, &cfg.simulation, keep_sweeps)?;
            let path = ctx.path("timetrace.csv");
            io::write_series(&path, &run.series, &ctx.prov)?;
            ctx.done(&path);
            let path = ctx.path("truth.csv");
            io::write_truth(&path, &run.truth, &ctx.prov)?;
            ctx.done(&path);
            if let Some(sweeps) = &run.sweeps {
                let dir = ctx.path("sweeps");
                io::write_sweep_dir(&dir, sweeps, &ctx.prov)?;
                ctx.done(&dir);
            }
        }
        Simulate::Interleaved => {
            let run = simulate_interleaved_run(&cfg.tls, &cfg.resonator, &cfg.fluctuation, &cfg.schedule, &cfg.simulation)?;
            for (name, s) in [("lp.csv", &run.lp), ("mp.csv", &run.mp), ("hp.csv", &run.hp)] {
                let path = ctx.path(name);
                io::write_series(&path, s, &ctx.prov)?;
                ctx.done(&path);
            }
            let path = ctx.path("truth.csv");
            io::write_truth(&path, &run.truth, &ctx.prov)?;
            ctx.done(&path);
            let ex = extract_loss_tangent(&run.lp, &run.hp)?;
            let path = ctx.path("fdtls.csv");
            io::write_loss_tangent(&path, &ex.series, &ctx.prov)?;
            ctx.done(&path);
            if ex.n_negative + ex.n_unconverged > 0 {
                eprintln!(
                    "note: {} negative and {} unconverged loss-tangent estimates excluded",
                    ex.n_negative, ex.n_unconverged
                );
            }
        }
    }
    Ok(())
}

fn fit(ctx: &Ctx, cmd: Fit) -> CliResult {
    match cmd {
        Fit::Sweep { input } => {
            let sweep = io::read_sweep(&input)?;
            let f = fit_resonance(&sweep)?;
            let path = ctx.path("fit.json");
            io::write_json(&path, &f, &ctx.prov)?;
            ctx.done(&path);
            if !f.converged {
                return Err(not_converged(format!(
                    "fit of {} did not converge: {}",
                    input.display(),
                    f.message.unwrap_or_default()
                )));
            }
            println!(
                "f_r = {:.6e} Hz, Q = {:.4e}, |Q_c| = {:.4e}, phi = {:.4}, Q_i = {:.4e} +- {:.2e}",
                f.params.resonance_freq, f.params.loaded_q, f.params.coupling_q_mag, f.params.phi, f.q_i, f.sigma68.internal_q
            );
        }
        Fit::PowerCurve { input } => {
            let fallback = (ctx.cfg.simulation.temperature_k, ctx.cfg.resonator.resonance_freq);
            let data = io::read_power_sweep(&input, fallback)?;
            let f = fit_power_dependence(&data)?;
            let path = ctx.path("power_fit.json");
            io::write_json(&path, &f, &ctx.prov)?;
            ctx.done(&path);
            println!(
                "F delta = {:.4e} +- {:.1e}, n_c = {:.3e}, beta = {:.3} +- {:.3}, Q_PI = {:.4e}",
                f.f_delta0, f.sigma_f_delta0, f.n_c, f.beta, f.sigma_beta, f.q_pi
            );
        }
    }
    Ok(())
}

/// Timestamps and values of one column of a series or loss-tangent file.
/// Series rows whose fit did not converge are dropped.
fn read_column(path: &Path, column: Option<&str>) -> CliResult<(Vec<f64>, Vec<f64>)> {
    let t = io::read_table(path)?;
    let name = match column {
        Some(c) => c.to_string(),
        None if t.column("q_i").is_ok() => "q_i".into(),
        None if t.column("f_delta_tls").is_ok() => "f_delta_tls".into(),
        None => {
            return Err(Failure {
                code: 1,
                message: format!("{}: no q_i or f_delta_tls column; pass --column", path.display()),
            })
        }
    };
    let times = t.floats("timestamp_s")?;
    let values = t.floats(&name)?;
    let keep: Vec<bool> = match t.column("converged") {
        Ok(j) => t.rows.iter().map(|r| r[j] == "1" || r[j] == "true").collect(),
        Err(_) => vec![true; values.len()],
    };
    let (times, values) = times
        .into_iter()
        .zip(values)
        .zip(keep)
        .filter(|(_, k)| *k)
        .map(|(p, _)| p)
        .unzip();
    Ok((times, values))
}

/// Uniformly resampled series relative to its mean.
fn relative_uniform(path: &Path, column: Option<&str>) -> CliResult<(f64, Vec<f64>)> {
    let (t, x) = read_column(path, column)?;
    let (dt, u) = resample_uniform(&t, &x)?;
    Ok((dt, normalize_series(&u)?))
}

fn segment(ctx: &Ctx, n: usize) -> usize {
    ctx.cfg.analysis.segment_length.unwrap_or_else(|| default_segment_length(n))
}

#[derive(Serialize)]
struct SpectrumSummary {
    input: PathBuf,
    dt_s: f64,
    n_samples: usize,
    n_segments: usize,
    one_over_f_amplitude: f64,
    one_over_f_exponent: f64,
    fit_band_hz: (f64, f64),
}

#[derive(Serialize)]
struct CoherenceSummary {
    input: PathBuf,
    other: PathBuf,
    n_segments: usize,
    lowest_decade_mean: f64,
}

#[derive(Serialize)]
struct DistributionSummary {
    #[serde(flatten)]
    fit: tlsfluct::stats::LogNormalFit<f64>,
    skewness: f64,
    skewness_z: Option<f64>,
}

#[derive(Serialize)]
struct SigmaQSummary {
    points: Vec<SigmaQPoint>,
    slope: f64,
}

#[derive(Serialize)]
struct SigmaQPoint {
    input: PathBuf,
    mean_q_i: f64,
    sd_q_i: f64,
}

fn mean_sd(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let v = x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
    (m, v.sqrt())
}

fn spectrum_band(s: &SpectrumEstimate<f64>, band: Option<(f64, f64)>) -> (f64, f64) {
    band.unwrap_or((s.freqs[0], s.freqs[s.freqs.len() - 1]))
}

fn analyze(ctx: &Ctx, cmd: Analyze) -> CliResult {
    let a = &ctx.cfg.analysis;
    match cmd {
        Analyze::Spectrum { input, column } => {
            let (dt, x) = relative_uniform(&input, column.as_deref())?;
            let s = welch_psd(&x, dt, segment(ctx, x.len()), a.overlap)?;
            let band = spectrum_band(&s, a.one_over_f_band);
            let (amp, alpha) = fit_one_over_f(&s, band)?;
            let path = ctx.path("spectrum.csv");
            io::write_spectrum(&path, &s, "psd", &ctx.prov)?;
            ctx.done(&path);
            let summary = SpectrumSummary {
                input,
                dt_s: dt,
                n_samples: x.len(),
                n_segments: s.n_segments,
                one_over_f_amplitude: amp,
                one_over_f_exponent: alpha,
                fit_band_hz: band,
            };
            let path = ctx.path("spectrum.json");
            io::write_json(&path, &summary, &ctx.prov)?;
            ctx.done(&path);
            println!("S(f) = {amp:.3e} / f^{alpha:.3} over {} segments", s.n_segments);
        }
        Analyze::Coherence { input, other, column } => {
            let (dt, x) = relative_uniform(&input, column.as_deref())?;
            let (dt2, y) = relative_uniform(&other, column.as_deref())?;
            if (dt - dt2).abs() > 1e-6 * dt {
                return Err(Failure {
                    code: 1,
                    message: format!("sampling intervals differ: {dt} s vs {dt2} s"),
                });
            }
            let n = x.len().min(y.len());
            let c = coherence(&x[..n], &y[..n], dt, segment(ctx, n), a.overlap)?;
            let path = ctx.path("coherence.csv");
            io::write_spectrum(&path, &c, "coherence", &ctx.prov)?;
            ctx.done(&path);
            let summary = CoherenceSummary {
                input,
                other,
                n_segments: c.n_segments,
                lowest_decade_mean: lowest_decade_mean(&c),
            };
            let path = ctx.path("coherence.json");
            io::write_json(&path, &summary, &ctx.prov)?;
            ctx.done(&path);
            println!("lowest-decade mean coherence {:.4}", summary.lowest_decade_mean);
        }
        Analyze::Distribution { input, column } => {
            let (_, x) = read_column(&input, column.as_deref())?;
            let fit = fit_lognormal(&x)?;
            let logs: Vec<f64> = x.iter().map(|v| v.ln()).collect();
            let summary = DistributionSummary {
                fit,
                skewness: sample_skewness(&x),
                skewness_z: skewness_z(&x).ok(),
            };
            let path = ctx.path("distribution.json");
            io::write_json(&path, &summary, &ctx.prov)?;
            ctx.done(&path);
            let (edges, counts) = histogram(&logs, a.histogram_bins)?;
            let rows: Vec<Vec<String>> = counts
                .iter()
                .enumerate()
                .map(|(k, c)| vec![format!("{:?}", edges[k].exp()), format!("{:?}", edges[k + 1].exp()), c.to_string()])
                .collect();
            let path = ctx.path("histogram.csv");
            io::write_table(&path, &["bin_lo", "bin_hi", "count"], &rows, &ctx.prov)?;
            ctx.done(&path);
            println!("log-normal mean {:.4e}, sd {:.4e}, n = {}", fit.mean, fit.sd, fit.n);
        }
        Analyze::Convergence { input } => {
            let s = io::read_loss_tangent(&input)?;
            let reference = a.reference_span_s.unwrap_or_else(|| s.span());
            let windows: Vec<f64> = a.window_sizes_s.iter().copied().filter(|&w| w <= reference).collect();
            let c = windowed_convergence(&s, &windows, reference)?;
            let path = ctx.path("convergence.csv");
            io::write_convergence(&path, &c, &ctx.prov)?;
            ctx.done(&path);
        }
        Analyze::Averaging { input, q_hp } => {
            let sweeps: Vec<FrequencySweep<f64>> = io::read_sweep_dir(&input)?;
            let q_hp = q_hp.unwrap_or(ctx.cfg.tls.q_pi);
            let scan = averaging_time_scan(&sweeps, q_hp, &a.k_values)?;
            let path = ctx.path("averaging.csv");
            io::write_averaging(&path, &scan, &ctx.prov)?;
            ctx.done(&path);
        }
        Analyze::SigmaQ { input } => {
            let mut points = Vec::new();
            for p in input {
                let s = io::read_series(&p)?.converged_only();
                if s.is_empty() {
                    return Err(not_converged(format!("{}: no converged points", p.display())));
                }
                let (m, sd) = mean_sd(&s.q_i);
                points.push(SigmaQPoint {
                    input: p,
                    mean_q_i: m,
                    sd_q_i: sd,
                });
            }
            let pairs: Vec<(f64, f64)> = points.iter().map(|p| (p.mean_q_i, p.sd_q_i)).collect();
            let slope = fit_sigma_vs_q(&pairs)?;
            let path = ctx.path("sigma_q.json");
            io::write_json(&path, &SigmaQSummary { points, slope }, &ctx.prov)?;
            ctx.done(&path);
            println!("sd(Q_i) = {slope:.5} Q_i");
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct Report {
    n_points: [usize; 3],
    relative_sd: [f64; 3],
    loss_tangent: tlsfluct::stats::LogNormalFit<f64>,
    loss_tangent_skewness_z: Option<f64>,
    n_negative: usize,
    n_unconverged: usize,
    coherence_lp_mp: f64,
    coherence_lp_hp: f64,
    psd_lp_over_hp_at_1mhz: f64,
    convergence: tlsfluct::stats::ConvergenceCurve<f64>,
}

fn report(ctx: &Ctx, dir: &Path) -> CliResult {
    let read = |name: &str| io::read_series(&dir.join(name)).map(|s| s.converged_only());
    let (lp, mp, hp): (QiTimeSeries<f64>, _, _) = (read("lp.csv")?, read("mp.csv")?, read("hp.csv")?);
    let ex = extract_loss_tangent(&lp, &hp)?;
    let a = &ctx.cfg.analysis;

    let rel = |s: &QiTimeSeries<f64>| -> CliResult<(f64, Vec<f64>)> {
        let (dt, u) = resample_uniform(&s.timestamps, &s.q_i)?;
        Ok((dt, normalize_series(&u)?))
    };
    let (dt, x_lp) = rel(&lp)?;
    let (_, x_mp) = rel(&mp)?;
    let (_, x_hp) = rel(&hp)?;
    let n = x_lp.len().min(x_mp.len()).min(x_hp.len());
    let seg = segment(ctx, n);
    let c_mp = coherence(&x_lp[..n], &x_mp[..n], dt, seg, a.overlap)?;
    let c_hp = coherence(&x_lp[..n], &x_hp[..n], dt, seg, a.overlap)?;
    let p_lp = welch_psd(&x_lp[..n], dt, seg, a.overlap)?;
    let p_hp = welch_psd(&x_hp[..n], dt, seg, a.overlap)?;
    let near = |s: &SpectrumEstimate<f64>| band_mean(s, 1e-3 / 1.5, 1e-3 * 1.5);

    let reference = a.reference_span_s.unwrap_or_else(|| ex.series.span());
    let windows: Vec<f64> = a.window_sizes_s.iter().copied().filter(|&w| w <= reference).collect();
    let rsd = |s: &QiTimeSeries<f64>| {
        let (m, sd) = mean_sd(&s.q_i);
        sd / m
    };
    let r = Report {
        n_points: [lp.len(), mp.len(), hp.len()],
        relative_sd: [rsd(&lp), rsd(&mp), rsd(&hp)],
        loss_tangent: fit_lognormal(&ex.series.f_delta_tls)?,
        loss_tangent_skewness_z: skewness_z(&ex.series.f_delta_tls).ok(),
        n_negative: ex.n_negative,
        n_unconverged: ex.n_unconverged,
        coherence_lp_mp: lowest_decade_mean(&c_mp),
        coherence_lp_hp: lowest_decade_mean(&c_hp),
        psd_lp_over_hp_at_1mhz: near(&p_lp) / near(&p_hp),
        convergence: windowed_convergence(&ex.series, &windows, reference)?,
    };
    let path = ctx.path("report.json");
    io::write_json(&path, &r, &ctx.prov)?;
    ctx.done(&path);
    println!(
        "F delta log-normal mean {:.3e}, sd {:.3e}; coherence LP-MP {:.3}, LP-HP {:.3}; S_LP/S_HP at 1 mHz {:.0}",
        r.loss_tangent.mean, r.loss_tangent.sd, r.coherence_lp_mp, r.coherence_lp_hp, r.psd_lp_over_hp_at_1mhz
    );
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Runs the CLI in-process with `--output-dir dir`; returns the exit code.
    fn cli(dir: &Path, args: &[&str]) -> u8 {
        let mut argv = vec!["tlsfluct", "--output-dir", dir.to_str().unwrap()];
        argv.extend_from_slice(args);
        let parsed = match Cli::try_parse_from(argv) {
            Ok(c) => c,
            Err(_) => return 1,
        };
        match run(parsed) {
            Ok(()) => 0,
            Err(f) => f.code,
        }
    }

    fn config(dir: &Path, body: &str) -> String {
        let p = dir.join("run.json");
        std::fs::write(&p, body).unwrap();
        p.to_str().unwrap().to_string()
    }

    fn file(dir: &Path, name: &str) -> String {
        dir.join(name).to_str().unwrap().to_string()
    }

    /// Four hours keeps the interleaved runs quick.
    const SHORT_RUN: &str = r#"{"seed": 11, "schedule": {"total_duration": 14400}}"#;

    #[test]
    fn interleaved_writes_series_truth_and_loss_tangent() {
        let dir = tempfile::tempdir().unwrap();
        let d = dir.path();
        let cfg = config(d, SHORT_RUN);
        assert_eq!(cli(d, &["--config", &cfg, "simulate", "interleaved"]), 0);
        for f in ["lp.csv", "mp.csv", "hp.csv", "truth.csv", "fdtls.csv", "config.json"] {
            assert!(d.join(f).exists(), "{f} missing");
        }
        let lp = io::read_series(&d.join("lp.csv")).unwrap();
        assert_eq!(lp.label, "LP");
        assert_eq!(lp.len(), (14400.0f64 / 60.5).floor() as usize);
        let truth = io::read_table(&d.join("truth.csv")).unwrap();
        assert_eq!(truth.rows.len(), 3 * lp.len());
        let materialized: RunConfig = io::read_json(&d.join("config.json")).unwrap();
        assert_eq!(materialized.fluctuation.seed, 11);
        assert_eq!(materialized.schedule.total_duration, 14400.0);
    }

    #[test]
    fn distribution_matches_offline_mle() {
        let dir = tempfile::tempdir().unwrap();
        let d = dir.path();
        let cfg = config(d, SHORT_RUN);
        assert_eq!(cli(d, &["--config", &cfg, "simulate", "interleaved"]), 0);
        let fdtls = file(d, "fdtls.csv");
        assert_eq!(cli(d, &["--config", &cfg, "analyze", "distribution", "--input", &fdtls]), 0);

        // oracle: log-normal MLE from the raw text with plain arithmetic
        let text = std::fs::read_to_string(&fdtls).unwrap();
        let logs: Vec<f64> = text
            .lines()
            .filter(|l| !l.starts_with('#'))
            .skip(1)
            .map(|l| l.split(',').nth(1).unwrap().parse::<f64>().unwrap().ln())
            .collect();
        let n = logs.len() as f64;
        let m = logs.iter().sum::<f64>() / n;
        let s2 = logs.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n;
        let mean = (m + s2 / 2.0).exp();
        let sd = mean * (s2.exp() - 1.0).sqrt();

        let v: serde_json::Value = io::read_json(&d.join("distribution.json")).unwrap();
        assert!((v["mean"].as_f64().unwrap() - mean).abs() <= 1e-12 * mean);
        assert!((v["sd"].as_f64().unwrap() - sd).abs() <= 1e-10 * sd);
        assert_eq!(v["n"].as_u64().unwrap() as usize, logs.len());
        assert_eq!(v["provenance"]["config_sha256"].as_str().unwrap().len(), 64);
        let h = io::read_table(&d.join("histogram.csv")).unwrap();
        let total: f64 = h.floats("count").unwrap().iter().sum();
        assert_eq!(total as usize, logs.len());
    }

    #[test]
    fn flat_trace_fit_exits_2() {
        let dir = tempfile::tempdir().unwrap();
        let d = dir.path();
        let path = d.join("bad.csv");
        let mut body = String::from("freq_hz,s21_re,s21_im\n");
        for k in 0..101 {
            body.push_str(&format!("{},0.7,0.1\n", 6e9 + k as f64 * 100.0));
        }
        std::fs::write(&path, body).unwrap();
        std::fs::write(
            io::sidecar_path(&path),
            r#"{"power_dbm": -75, "temperature_k": 0, "timestamp_s": 0, "resonator_id": "flat"}"#,
        )
        .unwrap();
        assert_eq!(cli(d, &["fit", "sweep", "--input", path.to_str().unwrap()]), 2);
        let v: serde_json::Value = io::read_json(&d.join("fit.json")).unwrap();
        assert_eq!(v["converged"], false);
        assert!(v["message"].as_str().is_some());
    }

    #[test]
    fn simulated_sweep_fits_back() {
        let dir = tempfile::tempdir().unwrap();
        let d = dir.path();
        assert_eq!(cli(d, &["simulate", "sweep", "--noise-sd", "0"]), 0);
        assert_eq!(cli(d, &["fit", "sweep", "--input", &file(d, "sweep.csv")]), 0);
        let fit: serde_json::Value = io::read_json(&d.join("fit.json")).unwrap();
        let truth: serde_json::Value = io::read_json(&d.join("sweep_truth.json")).unwrap();
        for key in ["loaded_q", "coupling_q_mag", "resonance_freq"] {
            let a = fit["params"][key].as_f64().unwrap();
            let b = truth[key].as_f64().unwrap();
            assert!((a - b).abs() < 1e-6 * b, "{key}: {a} vs {b}");
        }
    }

    #[test]
    fn validation_errors_exit_1() {
        let dir = tempfile::tempdir().unwrap();
        let d = dir.path();
        let cfg = config(d, r#"{"tls": {"beta": 1.5}}"#);
        assert_eq!(cli(d, &["--config", &cfg, "simulate", "sweep"]), 1);
        let cfg = config(d, "{not json");
        assert_eq!(cli(d, &["--config", &cfg, "simulate", "sweep"]), 1);
        assert_eq!(cli(d, &["fit", "sweep", "--input", &file(d, "nope.csv")]), 1);
        assert_eq!(cli(d, &["simulate", "timetrace", "--channel", "5"]), 1);
        assert_eq!(cli(d, &["--threads", "0", "simulate", "sweep"]), 1);
        assert_eq!(cli(d, &["simulate", "bogus"]), 1);
    }

    #[test]
    fn power_curve_fit_recovers_model() {
        use tlsfluct::model::{tls_inverse_q, Environment, TlsModel};
        use tlsfluct::tls::PowerSweepData;

        let dir = tempfile::tempdir().unwrap();
        let d = dir.path();
        let m = TlsModel::<f64>::default();
        let omega = 2.0 * std::f64::consts::PI * 6e9;
        let n: Vec<f64> = (0..15).map(|k| 10f64.powf(-1.0 + 0.5 * k as f64)).collect();
        let q: Vec<f64> = n
            .iter()
            .map(|&n| 1.0 / tls_inverse_q(&m, &Environment::new(omega, 0.0, n).unwrap()))
            .collect();
        let data = PowerSweepData {
            mean_photons: n,
            q_i_sigma: q.iter().map(|v| 0.01 * v).collect(),
            q_i: q,
            temperature_k: 0.0,
            resonance_freq: 6e9,
        };
        let path = d.join("ps.csv");
        io::write_power_sweep(&path, &data, &Provenance::new(String::new())).unwrap();
        assert_eq!(cli(d, &["fit", "power-curve", "--input", path.to_str().unwrap()]), 0);
        let v: serde_json::Value = io::read_json(&d.join("power_fit.json")).unwrap();
        assert!((v["f_delta0"].as_f64().unwrap() / 9e-7 - 1.0).abs() < 1e-6);
        assert!((v["beta"].as_f64().unwrap() - 0.5).abs() < 1e-6);

        // two decades of photon number is not enough
        let short = PowerSweepData {
            mean_photons: data.mean_photons[..5].to_vec(),
            q_i: data.q_i[..5].to_vec(),
            q_i_sigma: data.q_i_sigma[..5].to_vec(),
            ..data
        };
        io::write_power_sweep(&path, &short, &Provenance::new(String::new())).unwrap();
        assert_eq!(cli(d, &["fit", "power-curve", "--input", path.to_str().unwrap()]), 2);
    }

    #[test]
    fn full_mode_timetrace_and_averaging_scan() {
        let dir = tempfile::tempdir().unwrap();
        let d = dir.path();
        let cfg = config(
            d,
            r#"{"seed": 3,
                "simulation": {"mode": "full", "sweep_points": 101, "sweep_noise_sd": [0.001, 0.001, 0.001]},
                "timetrace": {"power_dbm": -75, "noise_channel": 0, "point_duration": 16, "total_duration": 1600},
                "analysis": {"k_values": [1, 2, 5]}}"#,
        );
        assert_eq!(cli(d, &["--config", &cfg, "simulate", "timetrace", "--keep-sweeps"]), 0);
        let sweeps = d.join("sweeps");
        assert_eq!(io::read_sweep_dir(&sweeps).unwrap().len(), 100);
        let series = io::read_series(&d.join("timetrace.csv")).unwrap();
        assert_eq!(series.len(), 100);
        assert!(series.converged.iter().all(|&c| c));
        assert_eq!(cli(d, &["--config", &cfg, "analyze", "averaging", "--input", sweeps.to_str().unwrap()]), 0);
        let t = io::read_table(&d.join("averaging.csv")).unwrap();
        assert_eq!(t.floats("delta_t_s").unwrap(), vec![16.0, 32.0, 80.0]);
        assert_eq!(t.floats("n_used").unwrap(), vec![100.0, 50.0, 20.0]);
    }

    #[test]
    fn report_and_spectral_commands() {
        let dir = tempfile::tempdir().unwrap();
        let d = dir.path();
        let cfg = config(d, SHORT_RUN);
        assert_eq!(cli(d, &["--config", &cfg, "simulate", "interleaved"]), 0);
        let (lp, mp, fd) = (file(d, "lp.csv"), file(d, "mp.csv"), file(d, "fdtls.csv"));
        let cmds: [&[&str]; 5] = [
            &["report"],
            &["analyze", "spectrum", "--input", &lp],
            &["analyze", "coherence", "--input", &lp, "--other", &mp],
            &["analyze", "convergence", "--input", &fd],
            &["analyze", "sigma-q", "--input", &lp, &mp],
        ];
        for c in cmds {
            let mut args = vec!["--config", cfg.as_str()];
            args.extend_from_slice(c);
            assert_eq!(cli(d, &args), 0, "{c:?}");
        }
        for f in ["report.json", "spectrum.csv", "spectrum.json", "coherence.csv", "convergence.csv", "sigma_q.json"] {
            assert!(d.join(f).exists(), "{f} missing");
        }
        let c: serde_json::Value = io::read_json(&d.join("coherence.json")).unwrap();
        assert!((0.0..=1.0).contains(&c["lowest_decade_mean"].as_f64().unwrap()));
        let r: serde_json::Value = io::read_json(&d.join("report.json")).unwrap();
        assert!(r["coherence_lp_mp"].as_f64().unwrap() > r["coherence_lp_hp"].as_f64().unwrap());
        let conv = io::read_table(&d.join("convergence.csv")).unwrap();
        // windows longer than the 4 h record are dropped
        assert!(conv.floats("window_s").unwrap().iter().all(|&w| w <= 14400.0));
    }
}
