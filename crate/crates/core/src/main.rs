use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use coagscale::cli::{
    execute, CommandKind, ErrorReport, Overrides, RunManifest,
};

/// Self-similar profiles and dynamics for inverse power law coagulation.
#[derive(Parser)]
#[command(name = "coagscale", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CommonArgs {
    /// Manifest file (JSON); flags override its fields.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Kernel exponent alpha >= 0.
    #[arg(long)]
    alpha: Option<f64>,
    /// Self-similar speed constant w > 0.
    #[arg(long)]
    w: Option<f64>,
    /// Prescribed total mass rho > 0.
    #[arg(long)]
    rho: Option<f64>,
    /// Left end of the truncated size domain.
    #[arg(long = "x-min")]
    x_min: Option<f64>,
    /// Right end of the truncated size domain.
    #[arg(long = "x-max")]
    x_max: Option<f64>,
    /// Number of geometric cells.
    #[arg(long)]
    cells: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Compute a scaling profile and its report.
    Solve(CommonArgs),
    /// Check a stored profile against all identities.
    Validate {
        /// Profile CSV (its sidecar <name>.meta.json must exist).
        profile: Option<PathBuf>,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Solve from several initializations and compare.
    Uniqueness(CommonArgs),
    /// Constant-kernel analytic baseline and Bernstein diagnostics.
    Baseline(CommonArgs),
    /// Evolve the time-dependent equation and track rescaled distance.
    Simulate(CommonArgs),
    /// Merge prior outputs into a single summary.
    Report(CommonArgs),
}

fn resolve(common: &CommonArgs, kind: CommandKind, profile: Option<&PathBuf>) -> Result<RunManifest, coagscale::CoagError> {
    let mut manifest = match &common.manifest {
        Some(path) => RunManifest::from_file(path)?,
        None => RunManifest::default(),
    };
    if let Some(manifest_cmd) = manifest.command {
        if manifest_cmd != kind {
            return Err(coagscale::CoagError::Manifest(format!(
                "manifest command {manifest_cmd:?} does not match the subcommand"
            )));
        }
    }
    manifest.command = Some(kind);
    let overrides = Overrides {
        alpha: common.alpha,
        w: common.w,
        rho: common.rho,
        x_min: common.x_min,
        x_max: common.x_max,
        cells: common.cells,
        out: common.out.as_ref().map(|p| p.display().to_string()),
        profile: profile.map(|p| p.display().to_string()),
    };
    overrides.apply(&mut manifest);
    Ok(manifest)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let resolved = match &cli.command {
        Command::Solve(c) => resolve(c, CommandKind::Solve, None),
        Command::Validate { profile, common } => {
            resolve(common, CommandKind::Validate, profile.as_ref())
        }
        Command::Uniqueness(c) => resolve(c, CommandKind::Uniqueness, None),
        Command::Baseline(c) => resolve(c, CommandKind::Baseline, None),
        Command::Simulate(c) => resolve(c, CommandKind::Simulate, None),
        Command::Report(c) => resolve(c, CommandKind::Report, None),
    };
    let manifest = match resolved {
        Ok(m) => m,
        Err(e) => return fail(&e),
    };
    match execute(&manifest) {
        Ok(result) => {
            println!("{}", result.summary);
            for path in &result.written {
                eprintln!("wrote {}", path.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => fail(&e),
    }
}

fn fail(e: &coagscale::CoagError) -> ExitCode {
    let report = ErrorReport::of(e);
    eprintln!("{}", serde_json::to_string(&report).unwrap_or_else(|_| e.to_string()));
    ExitCode::FAILURE
}
