//! `cqed`: simulate and analyse pulsed single-photon source click streams.

mod report;

use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use cqed_core::cavity::{tabulate_efficiency_with, CavityError, IntegratorConfig};
use cqed_core::click_stats::{
    background_correlation, estimator_extrema, g2_histogram, pulse_averaged_rate,
    summarize_rates, PulseAveragedRate, RateSummary, DEFAULT_PHASE_BIN_NS,
};
use cqed_core::clicks::{read_clicks, write_clicks, ClickStream, Detector, FormatError};
use cqed_core::conditioning::{
    bin_clicks_to_pulses, conditional_emission_probability, conditional_g2, select_triggered,
    ConditioningStats, DEFAULT_ETA,
};
use cqed_core::config::{parse_config, write_config, ConfigError};
use cqed_core::source::{
    calibrate_flux, run_experiment_with, CalibrationOptions, DetectorModel, SimConfig, SimError,
};
use cqed_core::svg::{Chart, Style};

use report::{svg_path, write_atomic, Csv, Manifest};

#[derive(Parser)]
#[command(name = "cqed", version, about = "Pulsed cavity-QED single-photon source: simulation and photon statistics")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a click stream and ground truth from a configuration.
    Simulate(SimulateArgs),
    /// Photon-statistics reports from a click stream.
    #[command(subcommand)]
    Analyze(AnalyzeCommand),
    /// Tabulate single-pulse emission probability against coupling.
    Efficiency(EfficiencyArgs),
    /// Find the atom rate that gives a target photon click rate.
    Calibrate(CalibrateArgs),
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    cycles: u32,
    #[arg(long)]
    out: PathBuf,
    /// Ground-truth rows: every pulse each atom spends in the mode, only
    /// pulses with an emission, or no truth file.
    #[arg(long, value_enum, default_value = "full")]
    truth: TruthRows,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum TruthRows {
    Full,
    Emitted,
    None,
}

#[derive(Args, Clone)]
struct InputArgs {
    /// Click-stream file.
    #[arg(long = "in")]
    input: PathBuf,
    /// Output directory.
    #[arg(long, default_value = ".")]
    out: PathBuf,
    /// Also write an SVG chart next to the CSV.
    #[arg(long)]
    svg: bool,
}

#[derive(Args, Clone)]
struct CorrectionArgs {
    /// Noise count rate per detector, 1/s.
    #[arg(long, default_value_t = DetectorModel::default().dark_rate)]
    inoise: f64,
    /// Overall detection efficiency.
    #[arg(long, default_value_t = DEFAULT_ETA)]
    eta: f64,
    /// Phase-bin width for the pulse-averaged rate, ns.
    #[arg(long, default_value_t = DEFAULT_PHASE_BIN_NS)]
    phase_bin_ns: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum DetectorChoice {
    Both,
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
}

#[derive(Subcommand)]
enum AnalyzeCommand {
    /// Cross-correlation g2(tau) histogram.
    G2 {
        #[command(flatten)]
        io: InputArgs,
        #[arg(long, default_value_t = 100)]
        bin_ns: u64,
        #[arg(long, default_value_t = 40)]
        range_us: u64,
    },
    /// Count rate folded onto one pump/recycle period.
    PulseAvg {
        #[command(flatten)]
        io: InputArgs,
        #[arg(long, default_value_t = DEFAULT_PHASE_BIN_NS)]
        bin_ns: u64,
        #[arg(long, value_enum, default_value = "both")]
        detector: DetectorChoice,
    },
    /// Correlation expected from the folded rates alone.
    Background {
        #[command(flatten)]
        io: InputArgs,
        #[arg(long, default_value_t = DEFAULT_PHASE_BIN_NS)]
        bin_ns: u64,
    },
    /// g2(delta_i) of the pulses following a click.
    Conditional {
        #[command(flatten)]
        io: InputArgs,
        #[command(flatten)]
        corr: CorrectionArgs,
        #[arg(long, default_value_t = 10)]
        delta_range: u32,
    },
    /// Corrected emission probability around each trigger pulse.
    Pdeltak {
        #[command(flatten)]
        io: InputArgs,
        #[command(flatten)]
        corr: CorrectionArgs,
        #[arg(long, default_value_t = 10)]
        delta_k_range: u32,
    },
    /// Analytic g2 extrema from mean and noise rates.
    Estimators {
        #[arg(long, required_unless_present = "input")]
        ibar: Option<f64>,
        #[arg(long, default_value_t = DetectorModel::default().dark_rate)]
        inoise: f64,
        /// Take the mean rate from a click stream instead of --ibar.
        #[arg(long = "in", conflicts_with = "ibar")]
        input: Option<PathBuf>,
    },
}

#[derive(Args)]
struct EfficiencyArgs {
    /// Physics configuration; defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 65)]
    grid: usize,
    #[arg(long)]
    out: PathBuf,
    /// Integrator step budget per solve.
    #[arg(long)]
    max_steps: Option<usize>,
    #[arg(long)]
    svg: bool,
}

#[derive(Args)]
struct CalibrateArgs {
    #[arg(long)]
    config: PathBuf,
    /// Target photon click rate per detector, 1/s.
    #[arg(long)]
    target_hz: f64,
    #[arg(long, default_value_t = CalibrationOptions::default().pilot_cycles)]
    pilot_cycles: u32,
    #[arg(long, default_value_t = CalibrationOptions::default().seed)]
    seed: u64,
    /// Write the configuration with the calibrated atom rate here.
    #[arg(long)]
    write: Option<PathBuf>,
}

/// A usage problem the user can fix by changing arguments or config.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn is_integrator_failure(e: &CavityError) -> bool {
    matches!(
        e,
        CavityError::Integrator(_)
            | CavityError::InvariantViolated { .. }
            | CavityError::TimeOutsidePulse { .. }
    )
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<UsageError>() || cause.is::<ConfigError>() {
            return 2;
        }
        if let Some(f) = cause.downcast_ref::<FormatError>() {
            return if matches!(f, FormatError::Io(_)) { 1 } else { 3 };
        }
        if let Some(c) = cause.downcast_ref::<CavityError>() {
            return if is_integrator_failure(c) { 4 } else { 2 };
        }
        if let Some(s) = cause.downcast_ref::<SimError>() {
            return match s {
                SimError::Cavity(c) if is_integrator_failure(c) => 4,
                _ => 2,
            };
        }
    }
    1
}

fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var("CQED_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| usage(format!("CQED_THREADS must be a positive integer, got {raw:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .context("configuring worker pool")?;
    Ok(())
}

fn load_config(path: &Path) -> Result<SimConfig> {
    let text = fs::read_to_string(path)
        .map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
    parse_config(&text).with_context(|| format!("config {}", path.display()))
}

fn load_stream(path: &Path) -> Result<ClickStream> {
    let file = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    read_clicks(BufReader::new(file)).with_context(|| format!("reading {}", path.display()))
}

fn cmd_simulate(args: &SimulateArgs) -> Result<()> {
    if args.cycles == 0 {
        return Err(usage("--cycles must be at least 1"));
    }
    let config = load_config(&args.config)?;
    let table = config.efficiency_table()?;
    let out = run_experiment_with(&config, &table, args.cycles, args.seed)?;
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;

    let mut clicks = Vec::with_capacity(out.stream.clicks.len() * 16);
    write_clicks(&mut clicks, &out.stream)?;
    write_atomic(&args.out.join("clicks.csv"), &clicks)?;

    if args.truth != TruthRows::None {
        let mut truth = Csv::new("cycle_id,pulse_index,atom_id,emitted");
        for (cycle, pulse, atom, generated) in out.truth_rows() {
            if args.truth == TruthRows::Emitted && generated == 0 {
                continue;
            }
            truth.row(&[
                cycle.to_string(),
                pulse.to_string(),
                atom.to_string(),
                u8::from(generated > 0).to_string(),
            ]);
        }
        write_atomic(&args.out.join("truth.csv"), truth.finish().as_bytes())?;
    }
    write_atomic(&args.out.join("config.cfg"), write_config(&config).as_bytes())?;

    Manifest::new("simulate")
        .set("config", args.config.display())
        .set("seed", args.seed)
        .set("cycles", args.cycles)
        .set("out", args.out.display())
        .set("truth", format!("{:?}", args.truth).to_lowercase())
        .set("resolved_config", "config.cfg")
        .write(&args.out.join("manifest.txt"))?;

    println!(
        "cycles={} clicks={} photon_rate_hz={:.1} out={}",
        args.cycles,
        out.stream.clicks.len(),
        out.true_photon_rate(),
        args.out.display()
    );
    Ok(())
}

fn write_chart(enabled: bool, csv: &Path, chart: impl FnOnce() -> Chart) -> Result<()> {
    if enabled {
        write_atomic(&svg_path(csv), chart().render().as_bytes())?;
    }
    Ok(())
}

fn analysis_manifest(io: &InputArgs, mode: &str) -> Manifest {
    Manifest::new(&format!("analyze {mode}"))
        .set("in", io.input.display())
        .set("out", io.out.display())
}

fn folded_rates(stream: &ClickStream, bin_ns: u64) -> Result<(PulseAveragedRate, PulseAveragedRate)> {
    Ok((
        pulse_averaged_rate(stream, Detector::One, bin_ns)?,
        pulse_averaged_rate(stream, Detector::Two, bin_ns)?,
    ))
}

fn cmd_g2(io: &InputArgs, bin_ns: u64, range_us: u64) -> Result<()> {
    let stream = load_stream(&io.input)?;
    let range_ns = range_us
        .checked_mul(1000)
        .ok_or_else(|| usage("--range-us too large"))?;
    if bin_ns == 0 || range_ns % bin_ns != 0 {
        return Err(usage("--range-us·1000 must be a positive multiple of --bin-ns"));
    }
    let hist = g2_histogram(&stream, bin_ns, range_ns)?;
    let mut csv = Csv::new("lag_ns,g2,raw_pairs,sigma");
    for b in 0..hist.n_bins() {
        csv.row(&[
            hist.lag_center(b).to_string(),
            format!("{:.6}", hist.g2(b)),
            hist.raw_pairs[b].to_string(),
            format!("{:.6}", hist.sigma(b)),
        ]);
    }
    let path = io.out.join("g2.csv");
    write_atomic(&path, csv.finish().as_bytes())?;
    write_chart(io.svg, &path, || {
        let data = (0..hist.n_bins())
            .map(|b| (hist.lag_lo(b) as f64 / 1000.0, hist.g2(b)))
            .collect();
        let mut chart = Chart::new("Intensity correlation", "lag (µs)", "g2").with("data", Style::Step, data);
        if let Ok((r1, r2)) = folded_rates(&stream, DEFAULT_PHASE_BIN_NS) {
            if let Ok(bg) = background_correlation(&r1, &r2) {
                let model = (0..hist.n_bins())
                    .map(|b| {
                        let lo = hist.lag_lo(b) as f64;
                        (hist.lag_center(b) / 1000.0, bg.mean_over(lo, lo + bin_ns as f64))
                    })
                    .collect();
                chart = chart.with("background", Style::Line, model);
            }
        }
        chart
    })?;
    analysis_manifest(io, "g2")
        .set("bin_ns", bin_ns)
        .set("range_us", range_us)
        .write(&io.out.join("manifest_g2.txt"))?;
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_pulse_avg(io: &InputArgs, bin_ns: u64, detector: DetectorChoice) -> Result<()> {
    let stream = load_stream(&io.input)?;
    let rate = match detector {
        DetectorChoice::One => pulse_averaged_rate(&stream, Detector::One, bin_ns)?,
        DetectorChoice::Two => pulse_averaged_rate(&stream, Detector::Two, bin_ns)?,
        DetectorChoice::Both => {
            let (a, b) = folded_rates(&stream, bin_ns)?;
            PulseAveragedRate::average(&a, &b)?
        }
    };
    let mut csv = Csv::new("phase_ns,rate_hz");
    for (i, r) in rate.rate.iter().enumerate() {
        csv.row(&[(i as u64 * bin_ns).to_string(), format!("{r:.3}")]);
    }
    let path = io.out.join("pulse_avg.csv");
    write_atomic(&path, csv.finish().as_bytes())?;
    write_chart(io.svg, &path, || {
        let pts = rate
            .rate
            .iter()
            .enumerate()
            .map(|(i, &r)| ((i as u64 * bin_ns) as f64 / 1000.0, r))
            .collect();
        Chart::new("Pulse-averaged count rate", "phase (µs)", "rate (1/s)").with("rate", Style::Step, pts)
    })?;
    analysis_manifest(io, "pulse-avg")
        .set("bin_ns", bin_ns)
        .write(&io.out.join("manifest_pulse_avg.txt"))?;
    println!("mean_rate_hz={:.3} periods={}", rate.mean_rate(), rate.n_periods);
    Ok(())
}

fn cmd_background(io: &InputArgs, bin_ns: u64) -> Result<()> {
    let stream = load_stream(&io.input)?;
    let (r1, r2) = folded_rates(&stream, bin_ns)?;
    let bg = background_correlation(&r1, &r2)?;
    let mut csv = Csv::new("tau_ns,g2_background");
    for (j, g) in bg.g2.iter().enumerate() {
        csv.row(&[(j as u64 * bg.step_ns).to_string(), format!("{g:.6}")]);
    }
    let path = io.out.join("background.csv");
    write_atomic(&path, csv.finish().as_bytes())?;
    write_chart(io.svg, &path, || {
        let pts = bg
            .g2
            .iter()
            .enumerate()
            .map(|(j, &g)| ((j as u64 * bg.step_ns) as f64 / 1000.0, g))
            .collect();
        Chart::new("Background correlation", "lag (µs)", "g2").with("background", Style::Line, pts)
    })?;
    analysis_manifest(io, "background")
        .set("bin_ns", bin_ns)
        .write(&io.out.join("manifest_background.txt"))?;
    println!("g2_c_min={:.3} g2_c_max={:.3}", bg.min, bg.max);
    Ok(())
}

fn conditioning_stats(stream: &ClickStream, corr: &CorrectionArgs) -> Result<ConditioningStats> {
    Ok(ConditioningStats::from_stream(
        stream,
        corr.inoise,
        corr.eta,
        corr.phase_bin_ns,
    )?)
}

fn cmd_conditional(io: &InputArgs, corr: &CorrectionArgs, delta_range: u32) -> Result<()> {
    let stream = load_stream(&io.input)?;
    let stats = conditioning_stats(&stream, corr)?;
    let series = select_triggered(&bin_clicks_to_pulses(&stream));
    let g = conditional_g2(&series, delta_range)?;
    let mut csv = Csv::new("delta_i,g2,n_events,sigma");
    for p in &g.points {
        csv.row(&[
            p.delta_i.to_string(),
            format!("{:.6}", p.g2),
            p.n_events.to_string(),
            p.sigma.map(|s| format!("{s:.6}")).unwrap_or_default(),
        ]);
    }
    let path = io.out.join("conditional_g2.csv");
    write_atomic(&path, csv.finish().as_bytes())?;

    let mut summary = format!(
        "n_bar_P = {:.6e}\nn_bar_N = {:.6e}\np_atom = {:.4}\nM = {}\nmean_m1 = {:.6e}\nmean_m2 = {:.6e}\n",
        stats.n_bar_p, stats.n_bar_n, stats.p_atom, g.m, g.mean_m1, g.mean_m2
    );
    if let Some(p0) = g.at(0) {
        summary.push_str(&format!(
            "g2_0 = {:.4}\ng2_0_sigma = {}\n",
            p0.g2,
            p0.sigma.map(|s| format!("{s:.4}")).unwrap_or_else(|| "undefined".into())
        ));
    }
    if let Some((mean, sigma)) = g.off_peak_mean() {
        summary.push_str(&format!("g2_off_peak_mean = {mean:.4}\ng2_off_peak_sigma = {sigma:.4}\n"));
    }
    write_atomic(&io.out.join("conditional_summary.txt"), summary.as_bytes())?;
    write_chart(io.svg, &path, || {
        let pts = g.points.iter().map(|p| (p.delta_i as f64, p.g2)).collect();
        Chart::new("Conditional correlation", "Δi", "g2").with("g2", Style::Points, pts)
    })?;
    analysis_manifest(io, "conditional")
        .set("delta_range", delta_range)
        .set("inoise", corr.inoise)
        .set("eta", corr.eta)
        .set("phase_bin_ns", corr.phase_bin_ns)
        .write(&io.out.join("manifest_conditional.txt"))?;
    print!("{summary}");
    Ok(())
}

fn cmd_pdeltak(io: &InputArgs, corr: &CorrectionArgs, delta_k_range: u32) -> Result<()> {
    let stream = load_stream(&io.input)?;
    let stats = conditioning_stats(&stream, corr)?;
    let pulses = bin_clicks_to_pulses(&stream);
    let series = select_triggered(&pulses);
    let points = conditional_emission_probability(&pulses, &series, &stats, delta_k_range)?;
    let mut csv = Csv::new("delta_k,p_bar");
    for p in &points {
        csv.row(&[p.delta_k.to_string(), format!("{:.6}", p.p_bar)]);
    }
    let path = io.out.join("pdeltak.csv");
    write_atomic(&path, csv.finish().as_bytes())?;
    write_chart(io.svg, &path, || {
        let pts = points.iter().map(|p| (p.delta_k as f64, p.p_bar)).collect();
        Chart::new("Emission probability around a trigger", "Δk", "p̄").with("p", Style::Points, pts)
    })?;
    analysis_manifest(io, "pdeltak")
        .set("delta_k_range", delta_k_range)
        .set("inoise", corr.inoise)
        .set("eta", corr.eta)
        .set("phase_bin_ns", corr.phase_bin_ns)
        .write(&io.out.join("manifest_pdeltak.txt"))?;
    println!(
        "M={} p_atom={:.4} wrote {}",
        series.m(),
        stats.p_atom,
        path.display()
    );
    Ok(())
}

fn cmd_estimators(ibar: Option<f64>, inoise: f64, input: Option<&Path>) -> Result<()> {
    let rates = match (ibar, input) {
        (Some(i), _) => RateSummary::new(i, inoise),
        (None, Some(path)) => summarize_rates(&load_stream(path)?, inoise)?,
        (None, None) => return Err(usage("give --ibar or --in")),
    };
    if !(rates.i_noise >= 0.0) {
        return Err(usage("--inoise must be >= 0"));
    }
    let (lo, hi) = estimator_extrema(&rates).map_err(|e| usage(e.to_string()))?;
    println!("g2_min={lo:.3} g2_max={hi:.3}");
    Ok(())
}

fn cmd_efficiency(args: &EfficiencyArgs) -> Result<()> {
    let config = match &args.config {
        Some(p) => load_config(p)?,
        None => SimConfig::default(),
    };
    if args.grid < 2 {
        return Err(usage("--grid must be at least 2"));
    }
    let mut integrator = IntegratorConfig::default();
    if let Some(n) = args.max_steps {
        integrator.tolerance.max_steps = n;
    }
    let table = tabulate_efficiency_with(&config.cavity, args.grid, &integrator)?;
    let tol = &table.tolerance;
    let escape = config.cavity.escape_fraction;
    let mut csv = Csv::new(&format!(
        "# integrator dopri5 abs_tol={:e} rel_tol={:e} max_steps={}",
        tol.abs, tol.rel, tol.max_steps
    ));
    csv.row(&["g_eff_hz".into(), "probability".into(), "escape_weighted".into()]);
    for (g, p) in table.g_grid.iter().zip(&table.probability) {
        csv.row(&[
            format!("{}", g / std::f64::consts::TAU),
            format!("{p:.12}"),
            format!("{:.12}", p * escape),
        ]);
    }
    write_atomic(&args.out, csv.finish().as_bytes())?;
    write_chart(args.svg, &args.out, || {
        let raw = table
            .g_grid
            .iter()
            .zip(&table.probability)
            .map(|(g, p)| (g / std::f64::consts::TAU / 1e6, *p))
            .collect();
        Chart::new("Single-photon emission probability", "g/2π (MHz)", "probability")
            .with("generated", Style::Line, raw)
    })?;
    let last = *table.probability.last().unwrap();
    println!(
        "g_max_probability={last:.6} escape_weighted={:.6} wrote {}",
        last * escape,
        args.out.display()
    );
    Ok(())
}

fn cmd_calibrate(args: &CalibrateArgs) -> Result<()> {
    let config = load_config(&args.config)?;
    if args.pilot_cycles == 0 {
        return Err(usage("--pilot-cycles must be at least 1"));
    }
    let table = config.efficiency_table()?;
    let options = CalibrationOptions {
        pilot_cycles: args.pilot_cycles,
        seed: args.seed,
        ..CalibrationOptions::default()
    };
    let cal = calibrate_flux(args.target_hz, &config, &table, &options)?;
    if let Some(path) = &args.write {
        let mut calibrated = config.clone();
        calibrated.flux.rate_lambda = cal.rate_lambda;
        write_atomic(path, write_config(&calibrated).as_bytes())?;
    }
    println!(
        "atom_rate_hz={} photon_rate_hz={:.2} iterations={}",
        cal.rate_lambda, cal.photon_rate, cal.iterations
    );
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    configure_threads()?;
    match &cli.command {
        Command::Simulate(a) => cmd_simulate(a),
        Command::Efficiency(a) => cmd_efficiency(a),
        Command::Calibrate(a) => cmd_calibrate(a),
        Command::Analyze(mode) => match mode {
            AnalyzeCommand::G2 { io, bin_ns, range_us } => cmd_g2(io, *bin_ns, *range_us),
            AnalyzeCommand::PulseAvg { io, bin_ns, detector } => cmd_pulse_avg(io, *bin_ns, *detector),
            AnalyzeCommand::Background { io, bin_ns } => cmd_background(io, *bin_ns),
            AnalyzeCommand::Conditional { io, corr, delta_range } => {
                cmd_conditional(io, corr, *delta_range)
            }
            AnalyzeCommand::Pdeltak { io, corr, delta_k_range } => {
                cmd_pdeltak(io, corr, *delta_k_range)
            }
            AnalyzeCommand::Estimators { ibar, inoise, input } => {
                cmd_estimators(*ibar, *inoise, input.as_deref())
            }
        },
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => {
            info!("done");
            ExitCode::SUCCESS
        }
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
