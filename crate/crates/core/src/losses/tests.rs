use super::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Image2D {
    Image2D::new(h, w, (0..h * w).map(|_| rng.gen_range(-3.0..3.0)).collect()).unwrap()
}

/// Sum of a few random low-frequency waves.
fn smooth_image(seed: u64, h: usize, w: usize) -> Image2D {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let waves: Vec<[f64; 4]> = (0..4)
        .map(|_| {
            [
                rng.gen_range(0.2..0.9),
                rng.gen_range(0.2..0.9),
                rng.gen_range(0.0..6.3),
                rng.gen_range(0.5..2.0),
            ]
        })
        .collect();
    Image2D::from_fn(h, w, |r, c| {
        waves
            .iter()
            .map(|[fr, fc, ph, a]| a * (fr * r as f64 + fc * c as f64 + ph).sin())
            .sum()
    })
    .unwrap()
}

#[test]
fn image_construction_checks() {
    assert!(Image2D::new(2, 2, vec![0.0; 3]).is_err());
    assert!(Image2D::new(0, 2, vec![]).is_err());
    assert!(Image2D::new(1, 2, vec![0.0, f64::NAN]).is_err());
    assert!(ProbMap::new(1, 2, vec![0.0, 1.2]).is_err());
    let img = Image2D::from_fn(2, 3, |r, c| (10 * r + c) as f64).unwrap();
    assert_eq!(img.get(1, 2), 12.0);
    assert_eq!(img.values(), &[0.0, 1.0, 2.0, 10.0, 11.0, 12.0]);
}

#[test]
fn image_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let img = random_image(&mut rng, 5, 7);
    for name in ["i.mha", "i.mhd"] {
        let p = dir.path().join(name);
        img.write(&p).unwrap();
        let back = Image2D::read(&p).unwrap();
        assert_eq!(back.shape(), (5, 7));
        assert!(back
            .values()
            .iter()
            .zip(img.values())
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}

#[test]
fn adv_examples() {
    let eps = ADV_EPS;
    let best = adv_loss(
        &ProbMap::filled(3, 3, 1.0 - eps).unwrap(),
        &ProbMap::filled(3, 3, eps).unwrap(),
    );
    assert!(best.abs() < 1e-6, "{best}");
    let half = adv_loss(
        &ProbMap::filled(4, 2, 0.5).unwrap(),
        &ProbMap::filled(4, 2, 0.5).unwrap(),
    );
    assert!((half - 2.0 * 0.5f64.ln()).abs() < 1e-15);
    assert!((half + 1.3863).abs() < 1e-4);
    let one = adv_loss(
        &ProbMap::new(1, 1, vec![0.8]).unwrap(),
        &ProbMap::new(1, 1, vec![0.3]).unwrap(),
    );
    assert_eq!(one, 0.8f64.ln() + 0.7f64.ln());
    let clamped = adv_loss(
        &ProbMap::filled(1, 1, 0.0).unwrap(),
        &ProbMap::filled(1, 1, 1.0).unwrap(),
    );
    assert!(clamped.is_finite());
}

#[test]
fn cycle_and_idt_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (a, b) = (random_image(&mut rng, 6, 5), random_image(&mut rng, 4, 4));
    assert_eq!(cycle_loss(&a, &a, &b, &b).unwrap(), 0.0);
    assert_eq!(cycle_loss(&a, &a.affine(1.0, 1.0).unwrap(), &b, &b).unwrap(), 1.0);
    assert_eq!(idt_loss(&b, &b, &a, &a).unwrap(), 0.0);
    assert_eq!(idt_loss(&b.affine(1.0, 2.0).unwrap(), &b, &a, &a).unwrap(), 4.0);
    assert!(matches!(cycle_loss(&a, &b, &b, &b), Err(Error::Shape(_))));

    let (ar, br) = (random_image(&mut rng, 6, 5), random_image(&mut rng, 4, 4));
    let mut direct = 0.0;
    for (x, y) in [(&a, &ar), (&b, &br)] {
        let mut s = 0.0;
        for r in 0..x.height() {
            for c in 0..x.width() {
                s += (y.get(r, c) - x.get(r, c)).powi(2);
            }
        }
        direct += s / (x.height() * x.width()) as f64;
    }
    assert!((cycle_loss(&a, &ar, &b, &br).unwrap() - direct).abs() <= 1e-12);
    assert!((idt_loss(&ar, &a, &br, &b).unwrap() - direct).abs() <= 1e-12);
}

#[test]
fn dice_examples() {
    let gt = ProbMap::new(2, 3, vec![1.0, 1.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
    assert!(seg_dice_loss(&gt, &gt).unwrap() < 1e-6);
    assert!((seg_dice_loss(&ProbMap::filled(2, 3, 0.0).unwrap(), &gt).unwrap() - 1.0).abs() < 1e-6);
    let half = ProbMap::new(2, 3, gt.values().iter().map(|v| 0.5 * v).collect()).unwrap();
    assert!((seg_dice_loss(&half, &gt).unwrap() - 1.0 / 3.0).abs() < 1e-6);
    assert!(seg_dice_loss(&gt, &half).is_err());
    let both_empty = ProbMap::filled(2, 2, 0.0).unwrap();
    assert_eq!(seg_dice_loss(&both_empty, &both_empty).unwrap(), 0.0);
}

#[test]
fn cc_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random_image(&mut rng, 7, 6);
    assert!(cc_loss(&x, &x).unwrap().abs() < 1e-12);
    assert!((cc_loss(&x, &x.affine(-1.0, 0.0).unwrap()).unwrap() - 2.0).abs() < 1e-12);
    assert!(cc_loss(&x, &x.affine(3.0, 7.0).unwrap()).unwrap() <= 1e-9);
    let flat = Image2D::filled(7, 6, 4.0).unwrap();
    assert!(matches!(cc_loss(&x, &flat), Err(Error::ZeroVariance(_))));
    assert!(matches!(cc_loss(&flat, &x), Err(Error::ZeroVariance(_))));
}

#[test]
fn mind_constant_image_is_all_ones() {
    let p = MindParams::default();
    let f = mind_descriptor(&Image2D::filled(6, 6, 3.5).unwrap(), &p).unwrap();
    assert_eq!(f.channels, 8);
    assert!(f.values.iter().all(|&v| v == 1.0));
}

#[test]
fn mind_max_entry_is_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let img = random_image(&mut rng, 9, 8);
    let f = mind_descriptor(&img, &MindParams::default()).unwrap();
    for r in 0..9 {
        for c in 0..8 {
            let d = f.at(r, c);
            assert_eq!(d.iter().copied().fold(f64::MIN, f64::max), 1.0);
            assert!(d.iter().all(|&v| v > 0.0 && v <= 1.0));
        }
    }
}

/// Direct evaluation of one descriptor vector with explicit edge clamping.
fn mind_oracle(img: &Image2D, r: usize, c: usize, p: &MindParams) -> Vec<f64> {
    let (h, w) = img.shape();
    let px = |r: i64, c: i64| img.get(r.max(0).min(h as i64 - 1) as usize, c.max(0).min(w as i64 - 1) as usize);
    let rad = p.patch_radius as i64;
    let k: Vec<f64> = p
        .neighborhood
        .iter()
        .map(|&(dr, dc)| {
            let mut s = 0.0;
            for a in -rad..=rad {
                for b in -rad..=rad {
                    let (r0, c0) = (r as i64 + a, c as i64 + b);
                    s += (px(r0, c0) - px(r0 + dr as i64, c0 + dc as i64)).powi(2);
                }
            }
            s
        })
        .collect();
    let v = (k.iter().sum::<f64>() / k.len() as f64).max(p.eps);
    let raw: Vec<f64> = k.iter().map(|x| (-x / v).exp()).collect();
    let z = raw.iter().copied().fold(0.0, f64::max);
    raw.iter().map(|x| x / z).collect()
}

#[test]
fn mind_matches_direct_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let p = MindParams {
        patch_radius: 1,
        neighborhood: vec![(0, 2), (-1, 0), (2, -1)],
        eps: 1e-6,
    };
    let a = random_image(&mut rng, 8, 9);
    let b = random_image(&mut rng, 8, 9);
    let f = mind_descriptor(&a, &p).unwrap();
    let mut l1 = 0.0;
    for r in 0..8 {
        for c in 0..9 {
            let (da, db) = (mind_oracle(&a, r, c, &p), mind_oracle(&b, r, c, &p));
            for (x, y) in f.at(r, c).iter().zip(&da) {
                assert!((x - y).abs() <= 1e-12);
            }
            l1 += da.iter().zip(&db).map(|(x, y)| (x - y).abs()).sum::<f64>();
        }
    }
    let oracle = l1 / (8 * 9 * 3) as f64;
    assert!((mind_loss(&a, &b, &p).unwrap() - oracle).abs() <= 1e-12);
}

#[test]
fn mind_intensity_invariance() {
    let p = MindParams::default();
    for seed in 0..5 {
        let img = smooth_image(seed, 16, 16);
        let (fa, fb) = (
            mind_descriptor(&img, &p).unwrap(),
            mind_descriptor(&img.affine(2.0, 100.0).unwrap(), &p).unwrap(),
        );
        let worst = fa
            .values
            .iter()
            .zip(&fb.values)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        assert!(worst <= 1e-9, "{worst}");
        assert_eq!(mind_loss(&img, &img, &p).unwrap(), 0.0);
    }
}

#[test]
fn mind_rejects_small_images_and_bad_params() {
    let p = MindParams::default();
    assert!(matches!(
        mind_descriptor(&Image2D::filled(4, 9, 0.0).unwrap(), &p),
        Err(Error::ImageTooSmall(_))
    ));
    let bad = MindParams {
        neighborhood: vec![(0, 0)],
        ..MindParams::default()
    };
    assert!(mind_descriptor(&Image2D::filled(9, 9, 0.0).unwrap(), &bad).is_err());
    let empty = MindParams {
        neighborhood: vec![],
        ..MindParams::default()
    };
    assert!(empty.validate().is_err());
}

#[test]
fn ap_examples() {
    let p = MindParams::default();
    let x = smooth_image(7, 10, 10);
    let y = smooth_image(8, 10, 10);
    let w = LossWeights::default();
    assert!(ap_loss(&[(&x, &x)], &p, &w).unwrap().abs() < 1e-12);
    let only_md = LossWeights { lambda_cc: 0.0, ..w };
    assert_eq!(
        ap_loss(&[(&x, &y)], &p, &only_md).unwrap(),
        mind_loss(&x, &y, &p).unwrap()
    );
    let sum = cc_loss(&x, &y).unwrap() + mind_loss(&x, &y, &p).unwrap();
    assert!((ap_loss(&[(&x, &y)], &p, &w).unwrap() - sum).abs() <= 1e-12);
    assert!(ap_loss(&[], &p, &w).is_err());
}

#[test]
fn total_loss_with_published_weights() {
    let w = LossWeights::default();
    assert_eq!(total_loss(&LossComponents::default(), &w), 0.0);
    let cycle_only = LossComponents {
        cycle: 1.0,
        ..LossComponents::default()
    };
    assert_eq!(total_loss(&cycle_only, &w), 10.0);
    let ones = LossComponents {
        cycle: 1.0,
        adv: 1.0,
        seg: 1.0,
        idt: 1.0,
        ap: 1.0,
    };
    assert_eq!(total_loss(&ones, &w), 14.0);
    assert!(LossWeights { lambda3: -1.0, ..w }.validate().is_err());
}

#[test]
fn loss_ids_parse() {
    for id in LossId::ALL {
        assert_eq!(id.name().parse::<LossId>().unwrap(), id);
    }
    assert_eq!("seg_dice".parse::<LossId>().unwrap(), LossId::SegDice);
    assert!(matches!("nope".parse::<LossId>(), Err(Error::UnknownLoss(_))));
}

#[test]
fn evaluate_dispatches() {
    let p = MindParams::default();
    let x = smooth_image(9, 10, 10);
    assert_eq!(
        LossId::Cc.evaluate(&[x.clone(), x.clone()], &p).unwrap(),
        cc_loss(&x, &x).unwrap()
    );
    assert!(LossId::Cycle.evaluate(std::slice::from_ref(&x), &p).is_err());
    assert!(LossId::Adv.evaluate(&[x.clone(), x.clone()], &p).is_err());
}

#[test]
fn gradients_match_finite_differences() {
    for id in [LossId::Cycle, LossId::Idt, LossId::Cc, LossId::SegDice] {
        for seed in 0..10 {
            let inputs = random_inputs(id, 8, 8, seed).unwrap();
            let err = grad_check(id, &inputs, 1e-5).unwrap();
            assert!(err <= 1e-6, "{id} seed {seed}: {err}");
        }
    }
}

#[test]
fn grad_check_rejects_unsupported() {
    let x = Image2D::filled(8, 8, 0.0).unwrap();
    assert!(grad_check(LossId::Mind, &[x.clone(), x.clone()], 1e-5).is_err());
    assert!(random_inputs(LossId::Adv, 8, 8, 0).is_err());
    assert!(grad_check(LossId::Cc, std::slice::from_ref(&x), 1e-5).is_err());
}

#[test]
fn broken_gradient_is_detected() {
    let inputs = random_inputs(LossId::Cc, 8, 8, 3).unwrap();
    let shifted: Vec<Image2D> = inputs.iter().map(|i| i.affine(1.0, 0.0).unwrap()).collect();
    assert!(grad_check(LossId::Cc, &shifted, 1e-5).unwrap() <= 1e-5);
    assert!(grad_check(LossId::Cc, &inputs, 10.0).unwrap() > 1e-3);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn cc_bounds_and_affine_invariance(seed in 0u64..10_000, a in 0.01f64..100.0, b in -100.0f64..100.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (x, y) = (random_image(&mut rng, 6, 6), random_image(&mut rng, 6, 6));
        let l = cc_loss(&x, &y).unwrap();
        prop_assert!((0.0..=2.0).contains(&l));
        prop_assert!((cc_loss(&x, &y.affine(a, b).unwrap()).unwrap() - l).abs() <= 1e-9);
    }

    #[test]
    fn dice_in_unit_interval(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pred = ProbMap::new(5, 5, (0..25).map(|_| rng.gen_range(0.0..=1.0)).collect()).unwrap();
        let gt = ProbMap::new(5, 5, (0..25).map(|_| rng.gen_bool(0.5) as u8 as f64).collect()).unwrap();
        let l = seg_dice_loss(&pred, &gt).unwrap();
        prop_assert!((0.0..=1.0).contains(&l));
    }

    #[test]
    fn total_loss_is_linear(c in prop::array::uniform5(-10.0f64..10.0), k in -5.0f64..5.0, which in 0usize..5) {
        let w = LossWeights::default();
        let comps = LossComponents { cycle: c[0], adv: c[1], seg: c[2], idt: c[3], ap: c[4] };
        let mut bumped = comps;
        let lambdas = [w.lambda1, w.lambda2, w.lambda3, w.lambda4, w.lambda5];
        match which {
            0 => bumped.cycle += k,
            1 => bumped.adv += k,
            2 => bumped.seg += k,
            3 => bumped.idt += k,
            _ => bumped.ap += k,
        }
        let diff = total_loss(&bumped, &w) - total_loss(&comps, &w);
        prop_assert!((diff - lambdas[which] * k).abs() <= 1e-9);
    }
}
