//! Batch augmentations on `[B, H, W, C]` images with `[B, K]` soft labels.
//!
//! Each random operation is split into a sampling step and a deterministic
//! core, so the cores can be tested against exact expectations.

use rand::{Rng, RngCore};
use statrs::distribution::{Beta, ContinuousCDF};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// `λ ~ Beta(alpha, alpha)` by inverse transform of one uniform draw.
pub fn sample_beta(alpha: f64, rng: &mut dyn RngCore) -> Result<f64> {
    let dist = Beta::new(alpha, alpha).map_err(|e| Error::InvalidArgument(format!("beta({alpha}): {e}")))?;
    let u: f64 = rng.random();
    Ok(dist.inverse_cdf(u).clamp(0.0, 1.0))
}

fn check_pair<T: Scalar>(a: &Tensor<T>, la: &Tensor<T>, b: &Tensor<T>, lb: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() || la.shape() != lb.shape() || a.rank() != 4 || la.rank() != 2 || la.shape()[0] != a.shape()[0] {
        return Err(Error::ShapeMismatch {
            op: "mix",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn lerp<T: Scalar>(x: &Tensor<T>, y: &Tensor<T>, lambda: f64) -> Tensor<T> {
    if lambda == 1.0 {
        return x.clone();
    }
    let (l, r) = (T::from_f64(lambda), T::from_f64(1.0 - lambda));
    let data = x.data().iter().zip(y.data()).map(|(&p, &q)| l * p + r * q).collect();
    Tensor::new(x.shape().to_vec(), data).expect("same shape")
}

#[derive(Clone, Debug)]
pub struct Mixed<T: Scalar> {
    pub images: Tensor<T>,
    pub targets: Tensor<T>,
    /// Weight of the first batch in the label mix.
    pub lambda: f64,
}

/// `λ·a + (1−λ)·b` for images and labels alike.
pub fn mixup_with<T: Scalar>(a: &Tensor<T>, la: &Tensor<T>, b: &Tensor<T>, lb: &Tensor<T>, lambda: f64) -> Result<Mixed<T>> {
    check_pair(a, la, b, lb)?;
    Ok(Mixed {
        images: lerp(a, b, lambda),
        targets: lerp(la, lb, lambda),
        lambda,
    })
}

pub fn mixup<T: Scalar>(
    a: &Tensor<T>,
    la: &Tensor<T>,
    b: &Tensor<T>,
    lb: &Tensor<T>,
    alpha: f64,
    rng: &mut dyn RngCore,
) -> Result<Mixed<T>> {
    let lambda = sample_beta(alpha, rng)?;
    mixup_with(a, la, b, lb, lambda)
}

/// Half-open pixel rectangle `[top, top+height) × [left, left+width)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Region {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl Region {
    pub fn area(&self) -> usize {
        self.height * self.width
    }

    pub fn contains(&self, y: usize, x: usize) -> bool {
        (self.top..self.top + self.height).contains(&y) && (self.left..self.left + self.width).contains(&x)
    }

    /// Box of nominal size `box_h × box_w` centred at `(cy, cx)`, clipped to the image.
    pub fn centered(cy: usize, cx: usize, box_h: usize, box_w: usize, h: usize, w: usize) -> Self {
        let y0 = cy.saturating_sub(box_h / 2);
        let x0 = cx.saturating_sub(box_w / 2);
        let y1 = (cy + box_h - box_h / 2).min(h);
        let x1 = (cx + box_w - box_w / 2).min(w);
        Self {
            top: y0,
            left: x0,
            height: y1.saturating_sub(y0),
            width: x1.saturating_sub(x0),
        }
    }
}

/// Box of area ratio `1 − λ` with a uniformly drawn centre.
pub fn cutmix_region(h: usize, w: usize, lambda: f64, rng: &mut dyn RngCore) -> Region {
    let ratio = (1.0 - lambda).max(0.0).sqrt();
    let box_h = (h as f64 * ratio).round() as usize;
    let box_w = (w as f64 * ratio).round() as usize;
    let cy = rng.random_range(0..h);
    let cx = rng.random_range(0..w);
    Region::centered(cy, cx, box_h, box_w, h, w)
}

/// Pastes `region` of `b` into `a`. The label weight of `b` is the pasted
/// fraction of the image after clipping.
pub fn cutmix_with<T: Scalar>(a: &Tensor<T>, la: &Tensor<T>, b: &Tensor<T>, lb: &Tensor<T>, region: Region) -> Result<Mixed<T>> {
    check_pair(a, la, b, lb)?;
    let &[n, h, w, c] = a.shape() else { unreachable!() };
    if region.top + region.height > h || region.left + region.width > w {
        return Err(Error::InvalidArgument(format!("region {region:?} exceeds {h}x{w}")));
    }
    let mut images = a.clone();
    let dst = images.data_mut();
    for i in 0..n {
        for y in region.top..region.top + region.height {
            let start = ((i * h + y) * w + region.left) * c;
            let end = start + region.width * c;
            dst[start..end].copy_from_slice(&b.data()[start..end]);
        }
    }
    let lambda = 1.0 - region.area() as f64 / (h * w) as f64;
    Ok(Mixed {
        images,
        targets: lerp(la, lb, lambda),
        lambda,
    })
}

pub fn cutmix<T: Scalar>(
    a: &Tensor<T>,
    la: &Tensor<T>,
    b: &Tensor<T>,
    lb: &Tensor<T>,
    alpha: f64,
    rng: &mut dyn RngCore,
) -> Result<Mixed<T>> {
    let lambda = sample_beta(alpha, rng)?;
    let (h, w) = (a.shape()[1], a.shape()[2]);
    cutmix_with(a, la, b, lb, cutmix_region(h, w, lambda, rng))
}

/// Erases one region per image, with zeros or that image's mean value.
pub fn cutout_with<T: Scalar>(batch: &Tensor<T>, regions: &[Region], mean_fill: bool) -> Result<Tensor<T>> {
    let &[n, h, w, c] = batch.shape() else {
        return Err(Error::InvalidArgument(format!("cutout expects [B, H, W, C], got {:?}", batch.shape())));
    };
    if regions.len() != n {
        return Err(Error::InvalidArgument(format!("{} regions for {n} images", regions.len())));
    }
    let mut out = batch.clone();
    let per_image = h * w * c;
    for (i, (img, r)) in out.data_mut().chunks_mut(per_image).zip(regions).enumerate() {
        let fill = if mean_fill {
            let s: f64 = batch.data()[i * per_image..(i + 1) * per_image].iter().map(|v| v.to_f64()).sum();
            T::from_f64(s / per_image as f64)
        } else {
            T::ZERO
        };
        for y in r.top..(r.top + r.height).min(h) {
            let start = (y * w + r.left) * c;
            let end = (y * w + (r.left + r.width).min(w)) * c;
            img[start..end].fill(fill);
        }
    }
    Ok(out)
}

/// One `size × size` square per image at a uniform centre, clipped to bounds.
pub fn cutout<T: Scalar>(batch: &Tensor<T>, size: usize, mean_fill: bool, rng: &mut dyn RngCore) -> Result<Tensor<T>> {
    let &[n, h, w, _] = batch.shape() else {
        return Err(Error::InvalidArgument(format!("cutout expects [B, H, W, C], got {:?}", batch.shape())));
    };
    if size > h.min(w) {
        return Err(Error::InvalidArgument(format!("cutout size {size} exceeds image side {}", h.min(w))));
    }
    let regions: Vec<Region> = (0..n)
        .map(|_| {
            let cy = rng.random_range(0..h);
            let cx = rng.random_range(0..w);
            Region::centered(cy, cx, size, size, h, w)
        })
        .collect();
    cutout_with(batch, &regions, mean_fill)
}
