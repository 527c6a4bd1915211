//! Command-line front end: mask files in, surfaces, robust point matching,
//! warped masks and JSON reports out.
//!
//! Exit status: 0 on success, 2 for usage, format and input errors, 3 for an
//! empty mask, 4 when the solver fails.

mod commands;
pub mod report;

use std::path::PathBuf;

use anareg::{Error, FovShape, Point3};
use clap::{Args, Parser, Subcommand};

pub use commands::{register, run, RegisterArgs};
pub use report::RegistrationReport;

pub const DEFAULT_POINTS: usize = 1000;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Input(#[from] Error),
    #[error("registration failed: {0}")]
    Solver(#[source] Error),
}

pub fn exit_code(e: &CliError) -> u8 {
    match e {
        CliError::Input(Error::EmptyMask) | CliError::Solver(Error::EmptyMask) => 3,
        CliError::Solver(_) => 4,
        CliError::Input(Error::NoCorrespondence(_) | Error::SingularSystem | Error::InsufficientPoints { .. }) => 4,
        CliError::Input(_) => 2,
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "anareg",
    version,
    about = "Affine registration of organ masks by robust point matching"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a phantom pair with a known transform.
    Phantom(PhantomArgs),
    /// Keep only the foreground inside a field of view.
    CropFov(CropFovArgs),
    /// Write the (subsampled) surface points of a mask as CSV.
    Surface(SurfaceArgs),
    /// Register a moving mask onto a fixed mask.
    Register(RegisterArgs),
    /// Warp a mask by a transform.
    Apply(ApplyArgs),
    /// Score two masks, optionally after warping the second.
    Metrics(MetricsArgs),
    /// Evaluate a loss on 2D images and print its value.
    Losses(LossesArgs),
    /// Compare a loss's analytic gradient with finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Clone, Args)]
pub struct FovArgs {
    /// Field-of-view shape.
    #[arg(long, value_parser = parse_shape)]
    pub fov: Option<FovShape>,
    /// Field-of-view radius in mm.
    #[arg(long, default_value_t = anareg::volume::DEFAULT_FOV_RADIUS_MM)]
    pub radius: f64,
    /// Field-of-view centre `X,Y,Z` in mm; defaults to the grid centre.
    #[arg(long, value_parser = parse_point, allow_hyphen_values = true)]
    pub center: Option<Point3>,
}

#[derive(Debug, Args)]
pub struct PhantomArgs {
    /// Phantom spec (TOML).
    pub spec: PathBuf,
    /// Ground-truth parameters (JSON with fields s_x .. d_z); identity if omitted.
    #[arg(long)]
    pub gt: Option<PathBuf>,
    #[command(flatten)]
    pub fov: FovArgs,
    /// Place the cylinder so that this fraction of the warped surface falls
    /// outside it (overrides --center).
    #[arg(long)]
    pub truncate: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CropFovArgs {
    pub mask: PathBuf,
    #[command(flatten)]
    pub fov: FovArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SurfaceArgs {
    pub mask: PathBuf,
    #[arg(long, default_value_t = DEFAULT_POINTS)]
    pub points: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ApplyArgs {
    pub mask: PathBuf,
    pub transform: PathBuf,
    /// Mask whose grid receives the result; defaults to the input grid.
    #[arg(long)]
    pub reference: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct MetricsArgs {
    pub mask_a: PathBuf,
    pub mask_b: PathBuf,
    /// Warp `mask_b` onto the grid of `mask_a` with this transform first.
    #[arg(long)]
    pub transform: Option<PathBuf>,
    /// Ground-truth transform; adds parameter errors.
    #[arg(long, requires = "transform")]
    pub gt: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct LossesArgs {
    /// adv, cycle, seg-dice, idt, cc, mind or ap.
    pub loss: String,
    /// 2D images in argument order of the loss.
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
    /// TOML with optional `[mind]` and `[weights]` tables.
    #[arg(long)]
    pub params: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// cycle, idt, cc or seg-dice.
    pub loss: String,
    /// Image size `HxW`.
    #[arg(long, default_value = "8x8", value_parser = parse_dims)]
    pub dims: (usize, usize),
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Central-difference step.
    #[arg(long, default_value_t = 1e-5)]
    pub step: f64,
}

fn parse_shape(s: &str) -> Result<FovShape, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_point(s: &str) -> Result<Point3, String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|x| x.trim().parse::<f64>().map_err(|e| format!("`{x}`: {e}")))
        .collect::<Result<_, _>>()?;
    match v[..] {
        [x, y, z] if v.iter().all(|c| c.is_finite()) => Ok(Point3::new(x, y, z)),
        _ => Err(format!("expected three finite numbers X,Y,Z, got `{s}`")),
    }
}

fn parse_dims(s: &str) -> Result<(usize, usize), String> {
    let (h, w) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected HxW, got `{s}`"))?;
    let h: usize = h.parse().map_err(|e| format!("height `{h}`: {e}"))?;
    let w: usize = w.parse().map_err(|e| format!("width `{w}`: {e}"))?;
    if h == 0 || w == 0 {
        return Err("dimensions must be positive".into());
    }
    Ok((h, w))
}
