//! Analytic gradients of the smooth losses and their finite-difference check.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

use super::{centred_moments, check_variance, dice_value, same_shape, Image2D, LossId, DICE_EPS};

/// Gradient entries smaller than this fraction of the largest analytic entry
/// are compared on that scale instead of their own.
pub const GRAD_REL_FLOOR: f64 = 1e-3;

fn check_arity(id: LossId, inputs: &[Image2D]) -> Result<()> {
    if !id.has_gradient() {
        return Err(Error::InvalidParameter(format!("{id} has no analytic gradient")));
    }
    if inputs.len() != id.arity() {
        return Err(Error::InvalidParameter(format!(
            "{id} takes {} images, got {}",
            id.arity(),
            inputs.len()
        )));
    }
    for pair in inputs.chunks(2) {
        same_shape(id.name(), pair[0].shape(), pair[1].shape())?;
    }
    Ok(())
}

/// Loss value on raw buffers, without the range checks of the public
/// functions so that finite differences may step outside `[0, 1]`.
fn value(id: LossId, v: &[Vec<f64>]) -> f64 {
    let msd = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64;
    match id {
        LossId::Cycle | LossId::Idt => msd(&v[1], &v[0]) + msd(&v[3], &v[2]),
        LossId::Cc => {
            let (sxy, sxx, syy) = centred_moments(&v[0], &v[1]);
            1.0 - sxy / (sxx.sqrt() * syy.sqrt())
        }
        LossId::SegDice => dice_value(&v[0], &v[1]),
        _ => unreachable!("no gradient"),
    }
}

/// Gradient of the loss with respect to each input, in input order. The
/// segmentation label of `seg-dice` gets a zero gradient.
pub fn gradient(id: LossId, inputs: &[Image2D]) -> Result<Vec<Vec<f64>>> {
    check_arity(id, inputs)?;
    let v: Vec<&[f64]> = inputs.iter().map(|i| i.values()).collect();
    Ok(match id {
        LossId::Cycle | LossId::Idt => {
            let mut out = Vec::with_capacity(4);
            for pair in v.chunks(2) {
                let n = pair[0].len() as f64;
                let d: Vec<f64> = pair[0].iter().zip(pair[1]).map(|(x, y)| 2.0 * (x - y) / n).collect();
                out.push(d.clone());
                out.push(d.iter().map(|g| -g).collect());
            }
            out
        }
        LossId::Cc => {
            let (x, y) = (v[0], v[1]);
            let (sxy, sxx, syy) = centred_moments(x, y);
            check_variance("cc_loss x", x, sxx)?;
            check_variance("cc_loss y", y, syy)?;
            let n = x.len() as f64;
            let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
            let norm = sxx.sqrt() * syy.sqrt();
            let c = sxy / norm;
            let gx = x
                .iter()
                .zip(y)
                .map(|(a, b)| -((b - my) / norm - c * (a - mx) / sxx))
                .collect();
            let gy = x
                .iter()
                .zip(y)
                .map(|(a, b)| -((a - mx) / norm - c * (b - my) / syy))
                .collect();
            vec![gx, gy]
        }
        LossId::SegDice => {
            let (p, s) = (v[0], v[1]);
            let inter: f64 = p.iter().zip(s).map(|(a, b)| a * b).sum();
            let den = p.iter().sum::<f64>() + s.iter().sum::<f64>() + DICE_EPS;
            let num = 2.0 * inter + DICE_EPS;
            let gp = s.iter().map(|si| -(2.0 * si * den - num) / (den * den)).collect();
            vec![gp, vec![0.0; s.len()]]
        }
        _ => unreachable!("checked above"),
    })
}

/// Largest relative difference between the analytic gradient and central
/// differences with step `h`, over every differentiable input entry.
///
/// Entry `i` contributes `|a_i − n_i| / max(|a_i|, |n_i|, GRAD_REL_FLOOR · max_j |a_j|)`.
pub fn grad_check(id: LossId, inputs: &[Image2D], h: f64) -> Result<f64> {
    if !(h.is_finite() && h > 0.0) {
        return Err(Error::InvalidParameter(format!("step must be positive, got {h}")));
    }
    let analytic = gradient(id, inputs)?;
    let scale = analytic.iter().flatten().fold(0.0f64, |m, g| m.max(g.abs()));
    let floor = (GRAD_REL_FLOOR * scale).max(f64::MIN_POSITIVE);
    let differentiable = if id == LossId::SegDice { 1 } else { inputs.len() };
    let mut bufs: Vec<Vec<f64>> = inputs.iter().map(|i| i.values().to_vec()).collect();
    let mut worst = 0.0f64;
    for (which, grads) in analytic.iter().enumerate().take(differentiable) {
        for (k, &a) in grads.iter().enumerate() {
            let x = bufs[which][k];
            bufs[which][k] = x + h;
            let up = value(id, &bufs);
            bufs[which][k] = x - h;
            let down = value(id, &bufs);
            bufs[which][k] = x;
            let numeric = (up - down) / (2.0 * h);
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

/// Seeded random operands for [`grad_check`]: images uniform in `[-2, 2]`,
/// and for `seg-dice` a soft prediction in `[0.05, 0.95]` with a binary label
/// covering at least one pixel.
pub fn random_inputs(id: LossId, height: usize, width: usize, seed: u64) -> Result<Vec<Image2D>> {
    if !id.has_gradient() {
        return Err(Error::InvalidParameter(format!("{id} has no analytic gradient")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = height * width;
    if id == LossId::SegDice {
        let pred = (0..n).map(|_| rng.gen_range(0.05..0.95)).collect();
        let mut label: Vec<f64> = (0..n).map(|_| rng.gen_bool(0.4) as u8 as f64).collect();
        if let Some(first) = label.first_mut() {
            *first = 1.0;
        }
        return Ok(vec![
            Image2D::new(height, width, pred)?,
            Image2D::new(height, width, label)?,
        ]);
    }
    (0..id.arity())
        .map(|_| Image2D::new(height, width, (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect()))
        .collect()
}
