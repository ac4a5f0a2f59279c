//! Command-line surface: scenario execution, snapshot queries, and the
//! Monte Carlo validation harness.
//!
//! Exit codes: 0 success, 1 input/schema error, 2 numerical failure during
//! a run, 3 validation bound violated.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use nalgebra::DMatrix;

use stochmap::map::{EntityKind, MapMode, StochasticMap};
use stochmap::propagate::confidence_ellipse;
use stochmap::scenario::{
    monte_carlo_validate, parse_scenario, run, McConfig, McReport, Scenario, Snapshot, Step,
};
use stochmap::transforms2d::Pose2;
use stochmap::Gaussian;

const EXIT_SCHEMA: u8 = 1;
const EXIT_NUMERICAL: u8 = 2;
const EXIT_BOUND: u8 = 3;

#[derive(Parser)]
#[command(
    name = "stochmap",
    about = "Uncertain spatial-relationship scenarios: run, query, validate"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario file and emit one snapshot per step as JSON Lines.
    Run {
        /// Scenario JSON file.
        scenario: PathBuf,
        /// Output path; omitted means stdout. Written atomically.
        #[arg(short, long)]
        out: Option<PathBuf>,
        /// Confidence level of the emitted ellipses.
        #[arg(long, default_value_t = 0.999)]
        confidence: f64,
        /// Interpret scenario angles (and their covariances) as degrees.
        #[arg(long)]
        degrees: bool,
    },
    /// Print the relation between two entities of a snapshot stream's
    /// final state.
    Query {
        /// Snapshot JSONL file produced by `run`.
        snapshot: PathBuf,
        /// Name of the frame entity.
        i: String,
        /// Name of the target entity.
        j: String,
    },
    /// Compare first-order propagation of a compounding chain against a
    /// Monte Carlo estimate. STOCHMAP_THREADS caps worker threads.
    Validate {
        /// Angular noise, in degrees, on every chain element.
        #[arg(long, default_value_t = 5.0)]
        sigma_deg: f64,
        /// Sample count (minimum 10000).
        #[arg(long, default_value_t = 1_000_000)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Largest tolerated relative error of any tracked component.
        #[arg(long, default_value_t = 0.01)]
        bound: f64,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if e.use_stderr() => {
            eprintln!("{e}");
            return ExitCode::from(EXIT_SCHEMA);
        }
        Err(e) => {
            // --help / --version
            print!("{e}");
            return ExitCode::SUCCESS;
        }
    };
    match cli.command {
        Command::Run {
            scenario,
            out,
            confidence,
            degrees,
        } => cmd_run(&scenario, out.as_deref(), confidence, degrees),
        Command::Query { snapshot, i, j } => cmd_query(&snapshot, &i, &j),
        Command::Validate {
            sigma_deg,
            samples,
            seed,
            bound,
        } => cmd_validate(sigma_deg, samples, seed, bound),
    }
}

fn cmd_run(path: &Path, out: Option<&Path>, confidence: f64, degrees: bool) -> ExitCode {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("error: cannot read {}: {e}", path.display());
            return ExitCode::from(EXIT_SCHEMA);
        }
    };
    let mut scenario = match parse_scenario(&text) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_SCHEMA);
        }
    };
    if degrees {
        if let Err(e) = convert_degrees(&mut scenario) {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_SCHEMA);
        }
    }
    let snapshots = match run(&scenario, confidence) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_NUMERICAL);
        }
    };
    let mut body = String::new();
    for snap in &snapshots {
        body.push_str(&serde_json::to_string(snap).expect("snapshots serialize"));
        body.push('\n');
    }
    match out {
        None => {
            print!("{body}");
            ExitCode::SUCCESS
        }
        Some(out_path) => match write_atomically(out_path, body.as_bytes()) {
            Ok(()) => ExitCode::SUCCESS,
            Err(e) => {
                eprintln!("error: cannot write {}: {e}", out_path.display());
                ExitCode::from(EXIT_SCHEMA)
            }
        },
    }
}

/// Write via a temporary file in the destination directory and rename, so
/// a failed run leaves no partial output behind.
fn write_atomically(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    let tmp = match dir {
        Some(d) => d.join(format!(
            ".{}.tmp",
            path.file_name().and_then(|n| n.to_str()).unwrap_or("out")
        )),
        None => PathBuf::from(format!(
            ".{}.tmp",
            path.file_name().and_then(|n| n.to_str()).unwrap_or("out")
        )),
    };
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)
}

/// In-place degree→radian conversion of every angle-valued mean component
/// and the matching covariance rows/columns.
fn convert_degrees(sc: &mut Scenario) -> stochmap::Result<()> {
    let c = std::f64::consts::PI / 180.0;
    let pose_dim = sc.mode.pose_kind().dim();
    let pose_angles: Vec<usize> = sc.mode.pose_kind().angle_offsets().to_vec();
    // Kinds as declared, for sense_known noise dimensions.
    let mut kinds = std::collections::HashMap::new();
    kinds.insert("robot".to_string(), sc.mode.pose_kind());
    let scale_cov = |cov: &mut [f64], dim: usize, angles: &[usize]| {
        for &k in angles {
            for i in 0..dim {
                cov[k * dim + i] *= c;
                cov[i * dim + k] *= c;
            }
        }
    };
    for step in &mut sc.steps {
        match step {
            Step::SenseNew {
                name,
                true_relation,
                noise_cov,
                ..
            } => {
                let kind = match (sc.mode, true_relation.len()) {
                    (MapMode::Planar, 2) => EntityKind::Point2,
                    (MapMode::Planar, 3) => EntityKind::Pose2,
                    (_, 6) => EntityKind::Pose3,
                    _ => EntityKind::Point2, // dimension errors reported by validate()
                };
                for &k in kind.angle_offsets() {
                    true_relation[k] *= c;
                }
                scale_cov(noise_cov, kind.dim(), kind.angle_offsets());
                kinds.insert(name.clone(), kind);
            }
            Step::Move {
                control_mean,
                noise_cov,
                ..
            } => {
                for &k in &pose_angles {
                    control_mean[k] *= c;
                }
                scale_cov(noise_cov, pose_dim, &pose_angles);
            }
            Step::SenseKnown {
                target, noise_cov, ..
            } => {
                let kind = kinds
                    .get(target)
                    .copied()
                    .unwrap_or(sc.mode.pose_kind());
                scale_cov(noise_cov, kind.dim(), kind.angle_offsets());
            }
            // Rectangle residuals are lengths; queries carry no values.
            Step::Constraint { .. } | Step::Query { .. } => {}
        }
    }
    sc.validate()
}

fn cmd_query(path: &Path, i: &str, j: &str) -> ExitCode {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("error: cannot read {}: {e}", path.display());
            return ExitCode::from(EXIT_SCHEMA);
        }
    };
    let last_line = match text.lines().filter(|l| !l.trim().is_empty()).last() {
        Some(l) => l,
        None => {
            eprintln!("error: {} holds no snapshots", path.display());
            return ExitCode::from(EXIT_SCHEMA);
        }
    };
    let snapshot: Snapshot = match serde_json::from_str(last_line) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("error: cannot parse snapshot: {e}");
            return ExitCode::from(EXIT_SCHEMA);
        }
    };
    let map = match StochasticMap::from_state(&snapshot.map) {
        Ok(m) => m,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_SCHEMA);
        }
    };
    let find = |name: &str| {
        snapshot
            .entities
            .iter()
            .position(|e| e.name == name)
            .and_then(|idx| map.entity_ids().nth(idx))
    };
    let (Some(id_i), Some(id_j)) = (find(i), find(j)) else {
        eprintln!("error: unknown entity ({i} or {j}) in the snapshot");
        return ExitCode::from(EXIT_SCHEMA);
    };
    let rel = match map.extract_relation(id_i, id_j) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_NUMERICAL);
        }
    };
    println!("relation {i} -> {j} (snapshot step {})", snapshot.step);
    println!(
        "mean: [{}]",
        rel.mean()
            .iter()
            .map(|v| format!("{v:.9}"))
            .collect::<Vec<_>>()
            .join(", ")
    );
    println!("covariance:");
    for r in 0..rel.dim() {
        let row: Vec<String> = (0..rel.dim())
            .map(|c| format!("{:>14.6e}", rel.cov()[(r, c)]))
            .collect();
        println!("  [{}]", row.join(", "));
    }
    if rel.dim() >= 2 {
        let xy = Gaussian::new(
            rel.mean().rows(0, 2).clone_owned(),
            rel.cov().view((0, 0), (2, 2)).clone_owned(),
        )
        .expect("2x2 marginal");
        match confidence_ellipse(&xy, 0.999) {
            Ok(e) => println!(
                "ellipse (99.9%): center ({:.6}, {:.6}), semi-axes ({:.6}, {:.6}), orientation {:.6} rad",
                e.center[0], e.center[1], e.semi_axes[0], e.semi_axes[1], e.orientation
            ),
            Err(_) => println!("ellipse (99.9%): degenerate (zero uncertainty)"),
        }
    }
    ExitCode::SUCCESS
}

fn cmd_validate(sigma_deg: f64, samples: usize, seed: u64, bound: f64) -> ExitCode {
    let sigma_phi = sigma_deg.to_radians();
    let sigma_t = 0.1;
    let noise = DMatrix::from_diagonal(&nalgebra::dvector![
        sigma_t * sigma_t,
        sigma_t * sigma_t,
        sigma_phi * sigma_phi
    ]);
    let threads = std::env::var("STOCHMAP_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .unwrap_or(0);
    let cfg = McConfig {
        chain: vec![
            (
                Pose2::new(1.0, 2.0, std::f64::consts::FRAC_PI_6).expect("finite"),
                noise.clone(),
            ),
            (
                Pose2::new(3.0, 1.0, std::f64::consts::FRAC_PI_4).expect("finite"),
                noise,
            ),
        ],
        n_samples: samples,
        seed,
        second_order: false,
        threads,
    };
    let report = match monte_carlo_validate(&cfg) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_SCHEMA);
        }
    };
    print_report(&report, sigma_deg, bound);
    if report.max_rel_err <= bound {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(EXIT_BOUND)
    }
}

fn print_report(report: &McReport, sigma_deg: f64, bound: f64) {
    println!(
        "first-order propagation vs {} Monte Carlo samples (angular sigma {sigma_deg} deg)",
        report.n_samples
    );
    println!(
        "{:<10} {:>15} {:>15} {:>12} {:>12}",
        "component", "analytic", "monte-carlo", "rel-err", "mc-std-err"
    );
    for row in report.mean.iter().chain(report.variance.iter()) {
        println!(
            "{:<10} {:>15.8} {:>15.8} {:>12.3e} {:>12.3e}",
            row.name, row.analytic, row.monte_carlo, row.rel_err, row.mc_std_err
        );
    }
    let verdict = if report.max_rel_err <= bound {
        "within"
    } else {
        "exceeds"
    };
    println!(
        "max relative error {:.4e} {verdict} bound {:.4e}",
        report.max_rel_err, bound
    );
}
