//! `lio`: simulate sequences, run the estimator, evaluate, audit and benchmark.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, CommandFactory, Parser, Subcommand};
use lio_core::evaluation::{evaluate, jacobian_audit};
use lio_core::io::{
    read_imu_csv, read_tum, scan_file_name, write_benchmark, write_cluster_dump, write_diagnostics, write_imu_csv,
    write_scan_csv, write_trajectory_errors, write_tum, ScanDirectory, ScanSource,
};
use lio_core::pipeline::{run_odometry, PipelineConfig};
use lio_core::simulator::Scenario;
use lio_core::{ImuSample, OdometryOutput};

#[derive(Debug, Parser)]
#[command(name = "lio", version, about = "Sliding-window plane-point LiDAR-inertial odometry")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a simulated sequence: imu.csv, scan_*.csv and gt.tum.
    Simulate(Common),
    /// Estimate a trajectory from a recorded or simulated sequence.
    Run(Sequence),
    /// Score an estimated TUM trajectory against a reference.
    Eval(Eval),
    /// Compare analytic measurement Jacobians with finite differences.
    AuditJacobians(Audit),
    /// Time data association and estimation with and without tracking.
    Bench(Sequence),
}

#[derive(Debug, Args)]
struct Common {
    /// Flat `key = value` config file; built-in defaults when omitted.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    #[arg(long, value_name = "U64", default_value_t = 1)]
    seed: u64,
    /// Directory receiving every output file.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Config override, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Debug, Args)]
struct Sequence {
    #[command(flatten)]
    common: Common,
    /// Directory with imu.csv and scan_*.csv; simulated from the config when omitted.
    #[arg(long, value_name = "DIR")]
    data: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct Eval {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_name = "PATH")]
    estimate: PathBuf,
    #[arg(long, value_name = "PATH")]
    reference: PathBuf,
    /// Skip the rigid alignment before scoring.
    #[arg(long)]
    no_align: bool,
}

#[derive(Debug, Args)]
struct Audit {
    #[command(flatten)]
    common: Common,
    #[arg(long, default_value_t = 100)]
    trials: usize,
}

enum Failure {
    Usage(String),
    Runtime(String),
}

fn runtime<E: std::fmt::Display>(e: E) -> Failure {
    Failure::Runtime(e.to_string())
}

fn load_config(common: &Common) -> Result<PipelineConfig, Failure> {
    let usage = |e: lio_core::pipeline::ConfigError| Failure::Usage(e.to_string());
    let mut config = PipelineConfig::default();
    if let Some(path) = &common.config {
        config.apply_file(path).map_err(usage)?;
    }
    for assignment in &common.set {
        config.apply_override(assignment).map_err(usage)?;
    }
    config.validate().map_err(usage)?;
    Ok(config)
}

fn prepare_out(dir: &Path) -> Result<(), Failure> {
    std::fs::create_dir_all(dir).map_err(|e| Failure::Runtime(format!("{}: {e}", dir.display())))
}

fn write_text(path: &Path, text: &str) -> Result<(), Failure> {
    std::fs::write(path, text).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))
}

fn simulate(common: &Common) -> Result<(), Failure> {
    let config = load_config(common)?;
    prepare_out(&common.out)?;
    let scenario = Scenario::new(&config.sim, common.seed);
    write_imu_csv(&common.out.join("imu.csv"), &scenario.imu()).map_err(runtime)?;
    for i in 0..scenario.scan_count() {
        write_scan_csv(&common.out.join(scan_file_name(i)), &scenario.scan(i)).map_err(runtime)?;
    }
    write_tum(&common.out.join("gt.tum"), &scenario.groundtruth(config.groundtruth_rate)).map_err(runtime)?;
    write_text(&common.out.join("config.cfg"), &config.render())?;
    println!("simulated {} scans into {}", scenario.scan_count(), common.out.display());
    Ok(())
}

/// Runs the estimator on `--data` files or on the simulated sequence.
fn estimate(config: &PipelineConfig, seq: &Sequence) -> Result<OdometryOutput, Failure> {
    // The config's rig keys describe the true extrinsic for the diagnostics column.
    let truth = Some(config.sim.extrinsic());
    match &seq.data {
        Some(dir) => {
            let imu: Vec<ImuSample> = read_imu_csv(&dir.join("imu.csv")).map_err(runtime)?;
            let scans = ScanDirectory::open(dir).map_err(runtime)?;
            if scans.is_empty() {
                return Err(Failure::Runtime(format!("{}: no scan_*.csv files", dir.display())));
            }
            run_odometry(config, &imu, &scans, truth).map_err(runtime)
        }
        None => {
            let scenario = Scenario::new(&config.sim, seq.common.seed);
            run_odometry(config, &scenario.imu(), &scenario, truth).map_err(runtime)
        }
    }
}

fn run(seq: &Sequence) -> Result<(), Failure> {
    let config = load_config(&seq.common)?;
    prepare_out(&seq.common.out)?;
    let out = estimate(&config, seq)?;
    let dir = &seq.common.out;
    write_tum(&dir.join("trajectory.tum"), &out.trajectory).map_err(runtime)?;
    write_diagnostics(&dir.join("diagnostics.csv"), &out.diagnostics).map_err(runtime)?;
    write_benchmark(&dir.join("benchmark.csv"), &out.benchmark).map_err(runtime)?;
    if !out.cluster_dumps.is_empty() {
        let clusters = dir.join("clusters");
        prepare_out(&clusters)?;
        for (kf, rows) in &out.cluster_dumps {
            write_cluster_dump(&clusters.join(format!("kf_{kf:06}.csv")), rows).map_err(runtime)?;
        }
    }
    write_text(&dir.join("config.cfg"), &config.render())?;
    let td = out.diagnostics.last().map_or(config.initial_time_delay, |d| d.t_d);
    println!(
        "processed {} scans, {} keyframes, final time delay {:.3} ms",
        out.scans_processed,
        out.trajectory.len(),
        td * 1e3
    );
    Ok(())
}

fn eval(args: &Eval) -> Result<(), Failure> {
    let config = load_config(&args.common)?;
    prepare_out(&args.common.out)?;
    let estimate = read_tum(&args.estimate).map_err(runtime)?;
    let reference = read_tum(&args.reference).map_err(runtime)?;
    let report = evaluate(&estimate, &reference, config.eval_max_dt, !args.no_align).map_err(runtime)?;
    let text = format!(
        "pairs = {}\nate_rmse = {}\nare_rmse_deg = {}\nare_raw_rmse_deg = {}\n",
        report.timestamps.len(),
        report.ate_rmse,
        report.are_rmse_deg,
        report.are_raw_rmse_deg
    );
    write_text(&args.common.out.join("eval.txt"), &text)?;
    write_trajectory_errors(&args.common.out.join("errors.csv"), &report).map_err(runtime)?;
    print!("{text}");
    Ok(())
}

fn audit(args: &Audit) -> Result<(), Failure> {
    load_config(&args.common)?;
    prepare_out(&args.common.out)?;
    let report = jacobian_audit(args.common.seed, args.trials);
    let mut text = String::from("block,entries,max_relative_error,max_absolute_error,violations\n");
    for b in &report.blocks {
        let _ = writeln!(
            text,
            "{},{},{},{},{}",
            b.block.name(),
            b.entries,
            b.max_relative_error,
            b.max_absolute_error,
            b.violations
        );
    }
    write_text(&args.common.out.join("jacobian_audit.csv"), &text)?;
    print!("{text}");
    if report.passed() {
        println!("audit passed: {} trials", report.trials);
        Ok(())
    } else {
        Err(Failure::Runtime(format!(
            "audit failed: {} rejected trials, {} violating entries",
            report.rejected_trials,
            report.blocks.iter().map(|b| b.violations).sum::<usize>()
        )))
    }
}

fn bench(seq: &Sequence) -> Result<(), Failure> {
    let config = load_config(&seq.common)?;
    prepare_out(&seq.common.out)?;
    let mut summary = String::from("mode,keyframes,mean_t_da_ms,mean_t_est_ms,total_t_da_ms,total_t_est_ms\n");
    let mut means = Vec::new();
    for (mode, tracking) in [("tracked", true), ("baseline", false)] {
        let mut c = config.clone();
        c.tracking_enabled = tracking;
        let out = estimate(&c, seq)?;
        write_benchmark(&seq.common.out.join(format!("benchmark_{mode}.csv")), &out.benchmark).map_err(runtime)?;
        let n = out.benchmark.len().max(1) as f64;
        let da: f64 = out.benchmark.iter().map(|b| b.t_da_ms).sum();
        let est: f64 = out.benchmark.iter().map(|b| b.t_est_ms).sum();
        let _ = writeln!(summary, "{mode},{},{},{},{da},{est}", out.benchmark.len(), da / n, est / n);
        means.push(da / n);
    }
    write_text(&seq.common.out.join("bench_summary.csv"), &summary)?;
    print!("{summary}");
    println!("baseline / tracked association time: {:.2}", means[1] / means[0]);
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.render().to_string();
            eprint!("{text}");
            if !text.contains("Usage:") {
                eprintln!("\n{}", Cli::command().render_usage());
            }
            return ExitCode::from(1);
        }
    };
    let result = match &cli.command {
        Command::Simulate(c) => simulate(c),
        Command::Run(s) => run(s),
        Command::Eval(e) => eval(e),
        Command::AuditJacobians(a) => audit(a),
        Command::Bench(s) => bench(s),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}\n\n{}", Cli::command().render_usage());
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
