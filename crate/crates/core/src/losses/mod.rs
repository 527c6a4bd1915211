//! Training losses of the domain-adaptation segmentation network, evaluated
//! on supplied 2D images and probability maps.
//!
//! Expectations are sample means over pixels. Generators, discriminators and
//! segmenters are not modelled: their outputs are the inputs here.

use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{read_raster, write_raster, ElementType, Raster};

mod grad;
mod mind;

pub use grad::{grad_check, gradient, random_inputs, GRAD_REL_FLOOR};
pub use mind::{mind_descriptor, mind_loss, MindField, MindParams};

/// Clamp applied to discriminator outputs before taking logs.
pub const ADV_EPS: f64 = 1e-7;
/// Smoothing in the soft Dice ratio.
pub const DICE_EPS: f64 = 1e-6;
/// An image whose standard deviation is at most this fraction of its largest
/// magnitude counts as constant.
pub const CC_REL_EPS: f64 = 1e-12;

/// Row-major real-valued image.
#[derive(Debug, Clone, PartialEq)]
pub struct Image2D {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl Image2D {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Shape(format!("image must be nonempty, got {height}x{width}")));
        }
        if values.len() != height * width {
            return Err(Error::Shape(format!(
                "{height}x{width} image needs {} values, got {}",
                height * width,
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("image values must be finite".into()));
        }
        Ok(Self { height, width, values })
    }

    pub fn from_fn(height: usize, width: usize, f: impl FnMut(usize, usize) -> f64) -> Result<Self> {
        let mut f = f;
        let values = (0..height * width)
            .map(|k| f(k / width.max(1), k % width.max(1)))
            .collect();
        Self::new(height, width, values)
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Result<Self> {
        Self::new(height, width, vec![value; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }

    /// `a · self + b` pixelwise.
    pub fn affine(&self, a: f64, b: f64) -> Result<Self> {
        Self::new(self.height, self.width, self.values.iter().map(|v| a * v + b).collect())
    }

    /// Reads a 2D MetaImage; x (columns) is the fastest axis.
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let r = read_raster(path)?;
        if r.dims.len() != 2 {
            return Err(Error::format(
                "NDims",
                format!("image must be 2D, found {}D", r.dims.len()),
            ));
        }
        Self::new(r.dims[1], r.dims[0], r.values)
    }

    /// Writes a 2D `MET_DOUBLE` MetaImage with unit spacing.
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        write_raster(
            &Raster {
                dims: vec![self.width, self.height],
                spacing: vec![1.0, 1.0],
                offset: vec![0.0, 0.0],
                element_type: ElementType::Double,
                values: self.values.clone(),
            },
            path,
        )
    }
}

/// An image with every value in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMap(Image2D);

impl ProbMap {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        Self::from_image(Image2D::new(height, width, values)?)
    }

    pub fn from_image(image: Image2D) -> Result<Self> {
        if let Some(v) = image.values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidParameter(format!(
                "probabilities must lie in [0, 1], found {v}"
            )));
        }
        Ok(Self(image))
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Result<Self> {
        Self::from_image(Image2D::filled(height, width, value)?)
    }

    pub fn image(&self) -> &Image2D {
        &self.0
    }

    pub fn values(&self) -> &[f64] {
        &self.0.values
    }

    pub fn shape(&self) -> (usize, usize) {
        self.0.shape()
    }
}

/// Weights of the overall objective and of the anatomy-preserving term.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub lambda4: f64,
    pub lambda5: f64,
    pub lambda_cc: f64,
    pub lambda_md: f64,
}

impl Default for LossWeights {
    /// The published weights: `λ1 = 10`, everything else 1.
    fn default() -> Self {
        Self {
            lambda1: 10.0,
            lambda2: 1.0,
            lambda3: 1.0,
            lambda4: 1.0,
            lambda5: 1.0,
            lambda_cc: 1.0,
            lambda_md: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
            ("lambda4", self.lambda4),
            ("lambda5", self.lambda5),
            ("lambda_cc", self.lambda_cc),
            ("lambda_md", self.lambda_md),
        ];
        match all.iter().find(|(_, v)| !(v.is_finite() && *v >= 0.0)) {
            Some((name, v)) => Err(Error::InvalidConfig(format!(
                "{name} must be finite and nonnegative, got {v}"
            ))),
            None => Ok(()),
        }
    }
}

/// Values of the five terms of the overall objective.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub cycle: f64,
    pub adv: f64,
    pub seg: f64,
    pub idt: f64,
    pub ap: f64,
}

fn same_shape(what: &str, a: (usize, usize), b: (usize, usize)) -> Result<()> {
    if a != b {
        return Err(Error::Shape(format!("{what}: {}x{} vs {}x{}", a.0, a.1, b.0, b.1)));
    }
    Ok(())
}

fn mean(xs: impl Iterator<Item = f64>, n: usize) -> f64 {
    xs.sum::<f64>() / n as f64
}

fn mse(a: &Image2D, b: &Image2D) -> f64 {
    mean(a.values.iter().zip(&b.values).map(|(x, y)| (x - y) * (x - y)), a.len())
}

/// `mean log d_real + mean log(1 − d_fake)` with both maps clamped into
/// `[ADV_EPS, 1 − ADV_EPS]`.
pub fn adv_loss(d_real: &ProbMap, d_fake: &ProbMap) -> f64 {
    let clamp = |v: f64| v.clamp(ADV_EPS, 1.0 - ADV_EPS);
    let real = mean(d_real.values().iter().map(|&v| clamp(v).ln()), d_real.values().len());
    let fake = mean(
        d_fake.values().iter().map(|&v| (1.0 - clamp(v)).ln()),
        d_fake.values().len(),
    );
    real + fake
}

/// Mean squared reconstruction error of each round trip, summed.
pub fn cycle_loss(a: &Image2D, a_rec: &Image2D, b: &Image2D, b_rec: &Image2D) -> Result<f64> {
    same_shape("cycle_loss a / a_rec", a.shape(), a_rec.shape())?;
    same_shape("cycle_loss b / b_rec", b.shape(), b_rec.shape())?;
    Ok(mse(a_rec, a) + mse(b_rec, b))
}

/// Mean squared change each generator makes to an image already in its
/// target domain, summed.
pub fn idt_loss(g_of_b: &Image2D, b: &Image2D, g_of_a: &Image2D, a: &Image2D) -> Result<f64> {
    same_shape("idt_loss g(b) / b", g_of_b.shape(), b.shape())?;
    same_shape("idt_loss g(a) / a", g_of_a.shape(), a.shape())?;
    Ok(mse(g_of_b, b) + mse(g_of_a, a))
}

/// Soft Dice loss `1 − (2 Σ p s + ε) / (Σ p + Σ s + ε)` against a binary label.
pub fn seg_dice_loss(pred: &ProbMap, gt: &ProbMap) -> Result<f64> {
    same_shape("seg_dice_loss", pred.shape(), gt.shape())?;
    if gt.values().iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::InvalidParameter("segmentation label must be binary".into()));
    }
    Ok(dice_value(pred.values(), gt.values()))
}

fn dice_value(p: &[f64], s: &[f64]) -> f64 {
    let inter: f64 = p.iter().zip(s).map(|(a, b)| a * b).sum();
    let (sp, ss): (f64, f64) = (p.iter().sum(), s.iter().sum());
    1.0 - (2.0 * inter + DICE_EPS) / (sp + ss + DICE_EPS)
}

/// Centred sums `(Σ dx dy, Σ dx², Σ dy²)` of a pair.
fn centred_moments(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    (sxy, sxx, syy)
}

fn check_variance(name: &str, v: &[f64], ss: f64) -> Result<()> {
    let scale = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let sd = (ss / v.len() as f64).sqrt();
    if !(sd > CC_REL_EPS * scale) {
        return Err(Error::ZeroVariance(format!("{name} is constant")));
    }
    Ok(())
}

/// `1 − Cov(x, y) / (σx σy)`: 0 for perfectly correlated images, 2 for
/// perfectly anticorrelated ones.
pub fn cc_loss(x: &Image2D, y: &Image2D) -> Result<f64> {
    same_shape("cc_loss", x.shape(), y.shape())?;
    let (sxy, sxx, syy) = centred_moments(&x.values, &y.values);
    check_variance("cc_loss x", &x.values, sxx)?;
    check_variance("cc_loss y", &y.values, syy)?;
    Ok(1.0 - (sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// `λ_cc · mean cc_loss + λ_md · mean mind_loss` over the pairs, each pair
/// being (adapted image, source image).
pub fn ap_loss(pairs: &[(&Image2D, &Image2D)], p: &MindParams, w: &LossWeights) -> Result<f64> {
    w.validate()?;
    if pairs.is_empty() {
        return Err(Error::InvalidParameter("ap_loss needs at least one image pair".into()));
    }
    let (mut cc, mut md) = (0.0, 0.0);
    for (x, y) in pairs {
        cc += cc_loss(x, y)?;
        md += mind_loss(x, y, p)?;
    }
    let n = pairs.len() as f64;
    Ok(w.lambda_cc * (cc / n) + w.lambda_md * (md / n))
}

/// `λ1 cycle + λ2 adv + λ3 seg + λ4 idt + λ5 ap`.
pub fn total_loss(c: &LossComponents, w: &LossWeights) -> f64 {
    w.lambda1 * c.cycle + w.lambda2 * c.adv + w.lambda3 * c.seg + w.lambda4 * c.idt + w.lambda5 * c.ap
}

/// Losses addressable by name from the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LossId {
    Adv,
    Cycle,
    SegDice,
    Idt,
    Cc,
    Mind,
    Ap,
}

impl LossId {
    pub const ALL: [LossId; 7] = [
        LossId::Adv,
        LossId::Cycle,
        LossId::SegDice,
        LossId::Idt,
        LossId::Cc,
        LossId::Mind,
        LossId::Ap,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossId::Adv => "adv",
            LossId::Cycle => "cycle",
            LossId::SegDice => "seg-dice",
            LossId::Idt => "idt",
            LossId::Cc => "cc",
            LossId::Mind => "mind",
            LossId::Ap => "ap",
        }
    }

    /// Number of image operands, in the order of the loss function's arguments.
    pub fn arity(self) -> usize {
        match self {
            LossId::Cycle | LossId::Idt => 4,
            _ => 2,
        }
    }

    pub fn has_gradient(self) -> bool {
        matches!(self, LossId::Cycle | LossId::Idt | LossId::Cc | LossId::SegDice)
    }

    /// Evaluates the loss on `inputs` (see [`LossId::arity`]); `ap` uses the
    /// default weights.
    pub fn evaluate(self, inputs: &[Image2D], p: &MindParams) -> Result<f64> {
        if inputs.len() != self.arity() {
            return Err(Error::InvalidParameter(format!(
                "{} takes {} images, got {}",
                self.name(),
                self.arity(),
                inputs.len()
            )));
        }
        let prob = |i: usize| ProbMap::from_image(inputs[i].clone());
        match self {
            LossId::Adv => Ok(adv_loss(&prob(0)?, &prob(1)?)),
            LossId::Cycle => cycle_loss(&inputs[0], &inputs[1], &inputs[2], &inputs[3]),
            LossId::SegDice => seg_dice_loss(&prob(0)?, &prob(1)?),
            LossId::Idt => idt_loss(&inputs[0], &inputs[1], &inputs[2], &inputs[3]),
            LossId::Cc => cc_loss(&inputs[0], &inputs[1]),
            LossId::Mind => mind_loss(&inputs[0], &inputs[1], p),
            LossId::Ap => ap_loss(&[(&inputs[0], &inputs[1])], p, &LossWeights::default()),
        }
    }
}

impl FromStr for LossId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.to_ascii_lowercase().replace('_', "-");
        Self::ALL
            .into_iter()
            .find(|id| id.name() == norm || (norm == "dice" && *id == LossId::SegDice))
            .ok_or_else(|| Error::UnknownLoss(s.to_string()))
    }
}

impl std::fmt::Display for LossId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[cfg(test)]
mod tests;
