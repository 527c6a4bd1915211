//! Mask files through surfaces, registration and scoring, using only the
//! public API.

use anareg::phantom::{make_test_case, random_affine_params, truncating_cylinder, AffineRanges, PhantomSpec};
use anareg::volume::{read_mask, write_mask};
use anareg::{
    dsc, extract_surface, param_errors, resample_isotropic, rpm_solve, rpm_solve_in_fov, subsample_fps, visible_points,
    warp_mask, AffineTransform, RpmConfig,
};

const POINTS: usize = 1000;

#[test]
fn register_phantom_pair_from_files() {
    let spec = PhantomSpec::random(11);
    let gt = random_affine_params(11, &AffineRanges::default());
    let case = make_test_case(&spec, &gt, None).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let (fixed_path, moving_path) = (dir.path().join("fixed.mha"), dir.path().join("moving.mhd"));
    write_mask(&case.fixed, &fixed_path).unwrap();
    write_mask(&case.moving, &moving_path).unwrap();
    let fixed = resample_isotropic(&read_mask(&fixed_path).unwrap(), 1.0).unwrap();
    let moving = resample_isotropic(&read_mask(&moving_path).unwrap(), 1.0).unwrap();
    assert_eq!(fixed, case.fixed);

    let fs = subsample_fps(&extract_surface(&fixed).unwrap(), POINTS, 0).unwrap();
    let ms = subsample_fps(&extract_surface(&moving).unwrap(), POINTS, 0).unwrap();
    let res = rpm_solve(&ms, &fs, &RpmConfig::default()).unwrap();

    let err = param_errors(&res.params, &gt);
    assert!(err.max_scale() <= 0.02, "{err:?}");
    assert!(err.max_shear() <= 0.02, "{err:?}");
    assert!(err.max_translation() <= 2.0, "{err:?}");

    let before = dsc(&moving, &fixed).unwrap();
    let after = dsc(&warp_mask(&moving, &res.transform, &fixed.grid).unwrap(), &fixed).unwrap();
    assert!(after >= 0.95 && after > before, "{before} -> {after}");

    let t = dir.path().join("t.json");
    res.transform.write(&t).unwrap();
    assert_eq!(AffineTransform::read(&t).unwrap(), res.transform);
}

#[test]
fn register_against_truncated_fixed() {
    let spec = PhantomSpec::random(12);
    let gt = random_affine_params(12, &AffineRanges::default());
    let full = make_test_case(&spec, &gt, None).unwrap();
    let fov = truncating_cylinder(&full.fixed, 125.0, 0.3, [1.0, 0.5]).unwrap();
    let case = make_test_case(&spec, &gt, Some(&fov)).unwrap();
    let cfg = RpmConfig::default();

    let visible = visible_points(&extract_surface(&case.fixed).unwrap(), &fov, cfg.fov_margin).unwrap();
    let fs = subsample_fps(&visible, POINTS, 0).unwrap();
    let ms = subsample_fps(&extract_surface(&case.moving).unwrap(), POINTS, 0).unwrap();
    let res = rpm_solve_in_fov(&ms, &fs, &fov, &cfg).unwrap();

    assert!(param_errors(&res.params, &gt).max_translation() <= 5.0);
    let warped = warp_mask(&case.moving, &res.transform, &full.fixed.grid).unwrap();
    assert!(dsc(&warped, &full.fixed).unwrap() >= 0.90);
}
