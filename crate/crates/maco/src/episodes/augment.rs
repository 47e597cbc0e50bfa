//! Image augmentation as a single inverse-mapped affine warp.
//!
//! Rotation, translation, zoom and horizontal flip compose into one affine
//! transform; each output pixel is bilinearly sampled from the source at
//! half-pixel centers, with zero fill outside. Composing first keeps one
//! resampling step, so repeated augmentation does not compound blur.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

use super::AugmentPolicy;

/// A concrete affine warp. `translate` is in pixels, `rotate_radians`
/// spins the sampling grid counterclockwise in index space, `zoom` > 1
/// magnifies content about the image center.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WarpParams {
    pub rotate_radians: f64,
    pub translate: (f64, f64),
    pub zoom: f64,
    pub hflip: bool,
}

impl WarpParams {
    pub fn identity() -> Self {
        WarpParams { rotate_radians: 0.0, translate: (0.0, 0.0), zoom: 1.0, hflip: false }
    }
}

/// Applies `params` to an [h, w, c] image with bilinear resampling and zero
/// fill. The output has the same extents.
pub fn warp_affine<F: Scalar>(img: &Tensor<F>, params: &WarpParams) -> Result<Tensor<F>> {
    let shape = img.shape();
    if shape.len() != 3 {
        return Err(Error::shape("warp_affine", "[h, w, c]", format!("{shape:?}")));
    }
    if !(params.zoom.is_finite() && params.zoom > 0.0) {
        return Err(Error::invalid("warp_affine", format!("zoom {} not positive", params.zoom)));
    }
    let (h, w, c) = (shape[0], shape[1], shape[2]);
    let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
    let (sin, cos) = params.rotate_radians.sin_cos();
    let src = img.data();
    let mut out = vec![F::zero(); src.len()];

    for yo in 0..h {
        let dy = yo as f64 + 0.5 - cy - params.translate.1;
        for xo in 0..w {
            let dx = xo as f64 + 0.5 - cx - params.translate.0;
            // Invert zoom-then-rotate about the center, then the flip.
            let xr = (cos * dx + sin * dy) / params.zoom;
            let yr = (-sin * dx + cos * dy) / params.zoom;
            let xs = if params.hflip { cx - xr } else { cx + xr };
            let ys = cy + yr;
            // Continuous pixel indices of the sample point.
            let u = xs - 0.5;
            let v = ys - 0.5;
            let x0 = u.floor();
            let y0 = v.floor();
            let fx = u - x0;
            let fy = v - y0;
            let (x0, y0) = (x0 as i64, y0 as i64);
            let corners = [
                (x0, y0, (1.0 - fx) * (1.0 - fy)),
                (x0 + 1, y0, fx * (1.0 - fy)),
                (x0, y0 + 1, (1.0 - fx) * fy),
                (x0 + 1, y0 + 1, fx * fy),
            ];
            let base = (yo * w + xo) * c;
            for (xi, yi, weight) in corners {
                if weight == 0.0 || xi < 0 || yi < 0 || xi >= w as i64 || yi >= h as i64 {
                    continue;
                }
                let from = (yi as usize * w + xi as usize) * c;
                let wf = F::from_f64(weight);
                for ch in 0..c {
                    out[base + ch] += wf * src[from + ch];
                }
            }
        }
    }
    Tensor::new(shape.to_vec(), out)
}

/// Draws warp parameters from `policy` and applies them; values are clamped
/// back to [0, 1]. A disabled policy is a bitwise identity and consumes no
/// randomness.
pub fn augment_image<F: Scalar>(
    img: &Tensor<F>,
    policy: &AugmentPolicy,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor<F>> {
    policy.validate()?;
    if !policy.enabled {
        return Ok(img.clone());
    }
    let shape = img.shape();
    if shape.len() != 3 {
        return Err(Error::shape("augment_image", "[h, w, c]", format!("{shape:?}")));
    }
    let (h, w) = (shape[0] as f64, shape[1] as f64);
    let rot_max = policy.rotation_max_degrees.to_radians();
    let t_max = policy.translate_max_fraction;
    // Inclusive ranges keep zero-width settings (e.g. rotation_max 0) legal.
    let params = WarpParams {
        rotate_radians: rng.gen_range(-rot_max..=rot_max),
        translate: (rng.gen_range(-t_max..=t_max) * w, rng.gen_range(-t_max..=t_max) * h),
        zoom: rng.gen_range(policy.zoom_range[0]..=policy.zoom_range[1]),
        hflip: rng.gen_range(0.0..1.0) < policy.hflip_probability,
    };
    let mut warped = warp_affine(img, &params)?;
    for v in warped.data_mut() {
        *v = v.max(F::zero()).min(F::one());
    }
    Ok(warped)
}
