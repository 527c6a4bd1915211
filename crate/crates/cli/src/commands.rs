use std::path::{Path, PathBuf};

use anareg::losses::{ap_loss, grad_check, random_inputs, Image2D, LossId, LossWeights, MindParams};
use anareg::phantom::{make_test_case, truncating_cylinder, PhantomSpec};
use anareg::volume::{read_mask, write_mask, write_points_csv};
use anareg::{
    asd, crop_fov, decompose_affine, dsc, extract_surface, param_errors, resample_isotropic, rpm_solve,
    rpm_solve_in_fov, subsample_fps, visible_points, warp_mask, AffineParams, AffineTransform, Error, EvalReport,
    FovShape, FovSpec, Grid, MaskVolume, Point3, RpmConfig,
};
use clap::Args;
use serde::Deserialize;
use sha2::{Digest, Sha256};

use crate::report::{Provenance, RegistrationReport, RpmSummary};
use crate::{
    ApplyArgs, Cli, CliError, Command, CropFovArgs, FovArgs, GradcheckArgs, LossesArgs, MetricsArgs, PhantomArgs,
    SurfaceArgs, DEFAULT_POINTS,
};

type CliResult<T = ()> = Result<T, CliError>;

#[derive(Debug, Clone, Args)]
pub struct RegisterArgs {
    pub fixed: PathBuf,
    pub moving: PathBuf,
    /// Solver configuration (TOML); defaults apply to missing keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Seed of the surface subsampling.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Surface points per cloud.
    #[arg(long, default_value_t = DEFAULT_POINTS)]
    pub points: usize,
    /// The fixed mask was acquired inside this field of view.
    #[command(flatten)]
    pub fov: FovArgs,
    /// Ground-truth transform; adds parameter errors to the report.
    #[arg(long)]
    pub gt: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn run(cli: &Cli) -> CliResult {
    match &cli.command {
        Command::Phantom(a) => phantom(a),
        Command::CropFov(a) => crop(a),
        Command::Surface(a) => surface(a),
        Command::Register(a) => {
            let report = register(a)?;
            print_summary(&report, &a.out);
            Ok(())
        }
        Command::Apply(a) => apply(a),
        Command::Metrics(a) => metrics(a),
        Command::Losses(a) => losses(a),
        Command::Gradcheck(a) => gradcheck(a),
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.into(),
        source,
    }
}

fn write_text(path: &Path, text: &str) -> anareg::Result<()> {
    std::fs::write(path, text).map_err(io_err(path))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path, field: &str) -> anareg::Result<T> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| Error::Format {
        field: field.into(),
        message: e.to_string(),
    })
}

fn out_dir(dir: &Path) -> anareg::Result<()> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))
}

fn load_nonempty(path: &Path) -> CliResult<MaskVolume> {
    let mask = read_mask(path)?;
    if mask.is_empty_mask() {
        return Err(Error::EmptyMask.into());
    }
    Ok(mask)
}

fn grid_center(g: &Grid) -> Point3 {
    Point3::from(std::array::from_fn(|a| {
        g.origin[a] + 0.5 * (g.dims[a] as f64 - 1.0) * g.spacing[a]
    }))
}

fn fov_spec(a: &FovArgs, shape: Option<FovShape>, grid: &Grid) -> anareg::Result<Option<FovSpec>> {
    match a.fov.or(shape) {
        Some(shape) => FovSpec::new(shape, a.center.unwrap_or_else(|| grid_center(grid)), a.radius).map(Some),
        None => Ok(None),
    }
}

fn sha256_hex(text: &str) -> String {
    Sha256::digest(text.as_bytes())
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// DSC and ASD of `b` against `a`, with parameter errors when both transforms
/// are known.
fn evaluate(
    a: &MaskVolume,
    b: &MaskVolume,
    est: Option<&AffineParams>,
    gt: Option<&AffineTransform>,
) -> anareg::Result<EvalReport> {
    let param_abs_errors = match (est, gt) {
        (Some(e), Some(g)) => Some(param_errors(e, &decompose_affine(g)?)),
        _ => None,
    };
    Ok(EvalReport {
        dsc: dsc(a, b)?,
        asd_mm: asd(a, b)?,
        param_abs_errors,
    })
}

/// Runs the registration pipeline and writes `transform.json`,
/// `warped_moving.mha` and `report.json` into `args.out`.
pub fn register(args: &RegisterArgs) -> CliResult<RegistrationReport> {
    let cfg = match &args.config {
        Some(p) => RpmConfig::read(p)?,
        None => RpmConfig::default(),
    };
    let fixed = load_nonempty(&args.fixed)?;
    let moving = load_nonempty(&args.moving)?;
    let gt = args.gt.as_deref().map(AffineTransform::read).transpose()?;
    let fov = fov_spec(&args.fov, None, &fixed.grid)?;

    let mut fixed_surface = extract_surface(&resample_isotropic(&fixed, 1.0)?)?;
    if let Some(f) = &fov {
        fixed_surface = visible_points(&fixed_surface, f, cfg.fov_margin)?;
    }
    let fs = subsample_fps(&fixed_surface, args.points, args.seed)?;
    let ms = subsample_fps(
        &extract_surface(&resample_isotropic(&moving, 1.0)?)?,
        args.points,
        args.seed,
    )?;

    let res = match &fov {
        Some(f) => rpm_solve_in_fov(&ms, &fs, f, &cfg),
        None => rpm_solve(&ms, &fs, &cfg),
    }
    .map_err(CliError::Solver)?;
    let warped = warp_mask(&moving, &res.transform, &fixed.grid).map_err(CliError::Solver)?;
    let metrics = evaluate(&fixed, &warped, Some(&res.params), gt.as_ref()).map_err(|e| match e {
        Error::EmptyMask => CliError::Solver(e),
        e => e.into(),
    })?;

    let show = |p: &Path| p.display().to_string();
    let report = RegistrationReport {
        timestamp: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
        transform: res.transform,
        params: res.params,
        metrics,
        rpm: RpmSummary {
            final_cost: res.final_cost,
            temperatures_run: res.temperatures_run,
            iterations: res.iterations,
            inlier_fraction_moving: res.inlier_fraction_moving,
        },
        provenance: Provenance {
            fixed_path: show(&args.fixed),
            moving_path: show(&args.moving),
            config_path: args.config.as_deref().map(show),
            gt_path: args.gt.as_deref().map(show),
            config_hash: sha256_hex(&cfg.to_toml_string()),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            seed: args.seed,
            points_requested: args.points,
            fixed_points: fs.len(),
            moving_points: ms.len(),
            fov,
        },
    };

    out_dir(&args.out)?;
    res.transform.write(args.out.join("transform.json"))?;
    write_mask(&warped, args.out.join("warped_moving.mha"))?;
    report.write(args.out.join("report.json"))?;
    Ok(report)
}

fn print_summary(r: &RegistrationReport, out: &Path) {
    let p = &r.params;
    println!("scales        {:.5} {:.5} {:.5}", p.s_x, p.s_y, p.s_z);
    println!(
        "shears        {:.5} {:.5} {:.5} {:.5} {:.5} {:.5}",
        p.h_xy, p.h_xz, p.h_yx, p.h_yz, p.h_zx, p.h_zy
    );
    println!("translation   {:.3} {:.3} {:.3} mm", p.d_x, p.d_y, p.d_z);
    println!("DSC           {:.4}", r.metrics.dsc);
    println!("ASD           {:.3} mm", r.metrics.asd_mm);
    if let Some(e) = &r.metrics.param_abs_errors {
        println!(
            "max |error|   scale {:.4}  shear {:.4}  translation {:.3} mm",
            e.max_scale(),
            e.max_shear(),
            e.max_translation()
        );
    }
    println!(
        "rpm           {} temperatures, {} iterations, inlier fraction {:.3}",
        r.rpm.temperatures_run, r.rpm.iterations, r.rpm.inlier_fraction_moving
    );
    println!("wrote         {}", out.display());
}

fn phantom(a: &PhantomArgs) -> CliResult {
    let spec = PhantomSpec::read(&a.spec)?;
    let gt = match &a.gt {
        Some(p) => read_json::<AffineParams>(p, "gt params")?,
        None => AffineParams::identity(),
    };
    let case = make_test_case(&spec, &gt, None)?;
    let fov = match a.truncate {
        Some(frac) => {
            if a.fov.fov == Some(FovShape::Sphere) {
                return Err(Error::InvalidParameter("--truncate places a cylinder; drop --fov sphere".into()).into());
            }
            Some(truncating_cylinder(&case.fixed, a.fov.radius, frac, [1.0, 0.0])?)
        }
        None => fov_spec(&a.fov, None, &case.fixed.grid)?,
    };

    out_dir(&a.out)?;
    write_mask(&case.moving, a.out.join("moving.mha"))?;
    match &fov {
        Some(f) => {
            write_mask(&crop_fov(&case.fixed, f), a.out.join("fixed.mha"))?;
            write_mask(&case.fixed, a.out.join("fixed_full.mha"))?;
            write_text(
                &a.out.join("fov.json"),
                &(serde_json::to_string_pretty(f).expect("fov serializes") + "\n"),
            )?;
        }
        None => write_mask(&case.fixed, a.out.join("fixed.mha"))?,
    }
    case.gt_transform.write(a.out.join("gt_transform.json"))?;
    write_text(
        &a.out.join("gt_params.json"),
        &(serde_json::to_string_pretty(&gt).expect("params serialize") + "\n"),
    )?;
    println!("moving voxels {}", case.moving.count());
    println!("fixed voxels  {}", case.fixed.count());
    if let Some(f) = &fov {
        println!(
            "fov           {:?} radius {} centre ({:.2}, {:.2}, {:.2})",
            f.shape, f.radius, f.center.x, f.center.y, f.center.z
        );
    }
    println!("wrote         {}", a.out.display());
    Ok(())
}

fn crop(a: &CropFovArgs) -> CliResult {
    let mask = read_mask(&a.mask)?;
    let fov = fov_spec(&a.fov, Some(FovShape::CylinderZ), &mask.grid)?.expect("shape defaulted");
    let cropped = crop_fov(&mask, &fov);
    write_mask(&cropped, &a.out)?;
    println!("kept {} of {} voxels", cropped.count(), mask.count());
    Ok(())
}

fn surface(a: &SurfaceArgs) -> CliResult {
    let mask = load_nonempty(&a.mask)?;
    let all = extract_surface(&resample_isotropic(&mask, 1.0)?)?;
    let cloud = subsample_fps(&all, a.points, a.seed)?;
    write_points_csv(&cloud, &a.out)?;
    println!("{} of {} surface points", cloud.len(), all.len());
    Ok(())
}

fn apply(a: &ApplyArgs) -> CliResult {
    let mask = read_mask(&a.mask)?;
    let t = AffineTransform::read(&a.transform)?;
    let grid = match &a.reference {
        Some(r) => read_mask(r)?.grid,
        None => mask.grid,
    };
    let warped = warp_mask(&mask, &t, &grid)?;
    write_mask(&warped, &a.out)?;
    println!("{} foreground voxels", warped.count());
    Ok(())
}

fn metrics(a: &MetricsArgs) -> CliResult {
    let mask_a = read_mask(&a.mask_a)?;
    let mut mask_b = read_mask(&a.mask_b)?;
    let mut est = None;
    if let Some(p) = &a.transform {
        let t = AffineTransform::read(p)?;
        mask_b = warp_mask(&mask_b, &t, &mask_a.grid)?;
        est = Some(decompose_affine(&t)?);
    }
    let gt = a.gt.as_deref().map(AffineTransform::read).transpose()?;
    let report = evaluate(&mask_a, &mask_b, est.as_ref(), gt.as_ref())?;
    println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
    Ok(())
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct LossParams {
    mind: MindParams,
    weights: LossWeights,
}

fn losses(a: &LossesArgs) -> CliResult {
    let id: LossId = a.loss.parse()?;
    let params = match &a.params {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(io_err(p))?;
            toml::from_str::<LossParams>(&text).map_err(|e| Error::InvalidConfig(e.to_string()))?
        }
        None => LossParams::default(),
    };
    params.weights.validate()?;
    let images = a.inputs.iter().map(Image2D::read).collect::<anareg::Result<Vec<_>>>()?;
    let value = match id {
        LossId::Ap if images.len() == 2 => ap_loss(&[(&images[0], &images[1])], &params.mind, &params.weights)?,
        _ => id.evaluate(&images, &params.mind)?,
    };
    println!("{value}");
    Ok(())
}

fn gradcheck(a: &GradcheckArgs) -> CliResult {
    let id: LossId = a.loss.parse()?;
    let inputs = random_inputs(id, a.dims.0, a.dims.1, a.seed)?;
    println!("{:e}", grad_check(id, &inputs, a.step)?);
    Ok(())
}
