//! Modality-independent neighbourhood descriptor.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::{same_shape, Image2D};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MindParams {
    /// Patches are `(2r + 1)²` squares.
    pub patch_radius: usize,
    /// `(drow, dcol)` offsets of the compared patches.
    pub neighborhood: Vec<(isize, isize)>,
    /// Floor on the local variance estimate.
    pub eps: f64,
}

impl Default for MindParams {
    /// 3×3 patches compared with the eight adjacent positions.
    fn default() -> Self {
        let neighborhood = (-1..=1)
            .flat_map(|r| (-1..=1).map(move |c| (r, c)))
            .filter(|&o| o != (0, 0))
            .collect();
        Self {
            patch_radius: 1,
            neighborhood,
            eps: 1e-6,
        }
    }
}

impl MindParams {
    pub fn validate(&self) -> Result<()> {
        if self.neighborhood.is_empty() {
            return Err(Error::InvalidConfig("MIND neighborhood must be nonempty".into()));
        }
        if self.neighborhood.contains(&(0, 0)) {
            return Err(Error::InvalidConfig("MIND neighborhood must not contain (0, 0)".into()));
        }
        if !(self.eps.is_finite() && self.eps > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "MIND eps must be positive, got {}",
                self.eps
            )));
        }
        Ok(())
    }

    /// Side length of the square touched around each pixel.
    pub fn extent(&self) -> usize {
        let reach = self
            .neighborhood
            .iter()
            .map(|&(r, c)| r.unsigned_abs().max(c.unsigned_abs()))
            .max()
            .unwrap_or(0);
        2 * (self.patch_radius + reach) + 1
    }
}

/// One descriptor vector per pixel, stored pixel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct MindField {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub values: Vec<f64>,
}

impl MindField {
    pub fn at(&self, row: usize, col: usize) -> &[f64] {
        let k = (row * self.width + col) * self.channels;
        &self.values[k..k + self.channels]
    }
}

/// For every pixel `x`: `K_x[o]` is the sum of squared differences between the
/// patch at `x` and the patch at `x + o`, `V_x = max(mean K_x, eps)`, and the
/// descriptor is `exp(−K_x / V_x)` scaled so that its largest entry is 1.
/// Pixels beyond the border replicate the nearest edge pixel.
pub fn mind_descriptor(img: &Image2D, p: &MindParams) -> Result<MindField> {
    p.validate()?;
    let (h, w) = img.shape();
    let ext = p.extent();
    if h < ext || w < ext {
        return Err(Error::ImageTooSmall(format!(
            "{h}x{w} image, patch plus neighborhood span {ext}x{ext}"
        )));
    }
    let at = |r: isize, c: isize| img.get(r.clamp(0, h as isize - 1) as usize, c.clamp(0, w as isize - 1) as usize);
    let pr = p.patch_radius as isize;
    let channels = p.neighborhood.len();
    let mut values = Vec::with_capacity(h * w * channels);
    let mut k = vec![0.0; channels];
    for r in 0..h as isize {
        for c in 0..w as isize {
            for (kv, &(dr, dc)) in k.iter_mut().zip(&p.neighborhood) {
                let mut ssd = 0.0;
                for qr in -pr..=pr {
                    for qc in -pr..=pr {
                        let d = at(r + qr, c + qc) - at(r + dr + qr, c + dc + qc);
                        ssd += d * d;
                    }
                }
                *kv = ssd;
            }
            let v = (k.iter().sum::<f64>() / channels as f64).max(p.eps);
            let k_min = k.iter().copied().fold(f64::INFINITY, f64::min);
            values.extend(k.iter().map(|kv| (-(kv - k_min) / v).exp()));
        }
    }
    Ok(MindField {
        height: h,
        width: w,
        channels,
        values,
    })
}

/// Mean absolute difference between the descriptor fields of `a` and `b`.
pub fn mind_loss(a: &Image2D, b: &Image2D, p: &MindParams) -> Result<f64> {
    same_shape("mind_loss", a.shape(), b.shape())?;
    let (fa, fb) = (mind_descriptor(a, p)?, mind_descriptor(b, p)?);
    let total: f64 = fa.values.iter().zip(&fb.values).map(|(x, y)| (x - y).abs()).sum();
    Ok(total / fa.values.len() as f64)
}
