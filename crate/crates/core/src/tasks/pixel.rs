//! Image-content tasks: geometric/intensity transforms and degradations
//! whose clean counterpart is the original scan.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransformVariant {
    Rot90,
    Rot270,
    Invert,
    Revert,
}

/// Returns `(input, output)` for a transformation task.
pub fn make_transform_pair(image: &Image, variant: TransformVariant) -> (Image, Image) {
    match variant {
        TransformVariant::Rot90 => (image.clone(), image.rotated90()),
        TransformVariant::Rot270 => (image.clone(), image.rotated270()),
        TransformVariant::Invert => (image.clone(), image.inverted()),
        TransformVariant::Revert => (image.inverted(), image.clone()),
    }
}

/// Degradation strengths. None of these values come with the task
/// definitions; they are tuned to be severe yet learnable.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DegradationParams {
    pub gauss_sigma: f64,
    pub superres_factor: usize,
    /// Inpainting patch side as a fraction of the image side.
    pub inpaint_fraction: f64,
    pub sp_density: f64,
    /// Outpainting frame width as a fraction of the image side.
    pub outpaint_fraction: f64,
    /// Side of each of the two inpainting patches, as a fraction of the side.
    pub inpaint2x_fraction: f64,
}

impl Default for DegradationParams {
    fn default() -> Self {
        Self {
            gauss_sigma: 0.3,
            superres_factor: 4,
            inpaint_fraction: 0.25,
            sp_density: 0.10,
            outpaint_fraction: 0.125,
            inpaint2x_fraction: 0.2,
        }
    }
}

impl DegradationParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.gauss_sigma >= 0.0 && self.gauss_sigma.is_finite()) {
            return Err(Error::Config(format!(
                "gauss_sigma {} must be >= 0",
                self.gauss_sigma
            )));
        }
        if ![1, 2, 4].contains(&self.superres_factor) {
            return Err(Error::Config(format!(
                "superres_factor {} must be 1, 2 or 4",
                self.superres_factor
            )));
        }
        for (name, v) in [
            ("inpaint_fraction", self.inpaint_fraction),
            ("outpaint_fraction", self.outpaint_fraction),
            ("inpaint2x_fraction", self.inpaint2x_fraction),
        ] {
            if !(v > 0.0 && v <= 0.5) {
                return Err(Error::Config(format!("{name} {v} outside (0, 0.5]")));
            }
        }
        if !(0.0..=1.0).contains(&self.sp_density) {
            return Err(Error::Config(format!(
                "sp_density {} outside [0, 1]",
                self.sp_density
            )));
        }
        Ok(())
    }
}

fn patch_side(image: &Image, fraction: f64) -> usize {
    let side = image.width().min(image.height());
    ((side as f64 * fraction).round() as usize).clamp(1, side)
}

fn zero_rect(image: &mut Image, x0: usize, y0: usize, w: usize, h: usize) {
    for y in y0..y0 + h {
        for x in x0..x0 + w {
            image.set_pixel(x, y, [0.0; 3]);
        }
    }
}

/// Per-pixel additive Gaussian noise, identical across channels, clipped.
pub fn gaussian_noise<R: Rng + ?Sized>(image: &Image, sigma: f64, rng: &mut R) -> Result<Image> {
    if sigma == 0.0 {
        return Ok(image.clone());
    }
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::Config(format!("gauss sigma: {e}")))?;
    let mut out = image.clone();
    let (w, h) = image.dims();
    for y in 0..h {
        for x in 0..w {
            let n = normal.sample(rng) as f32;
            out.set_pixel(x, y, image.pixel(x, y).map(|v| (v + n).clamp(0.0, 1.0)));
        }
    }
    Ok(out)
}

/// Area downscale by `factor` followed by nearest-neighbor upscale.
pub fn low_resolution(image: &Image, factor: usize) -> Result<Image> {
    if factor == 1 {
        return Ok(image.clone());
    }
    Ok(image.downscaled_area(factor)?.upscaled_nearest(factor))
}

/// Zeroes one random square patch of side `fraction * side`.
pub fn mask_patch<R: Rng + ?Sized>(image: &Image, fraction: f64, rng: &mut R) -> Image {
    let p = patch_side(image, fraction);
    let x0 = rng.random_range(0..=image.width() - p);
    let y0 = rng.random_range(0..=image.height() - p);
    let mut out = image.clone();
    zero_rect(&mut out, x0, y0, p, p);
    out
}

/// Zeroes two non-overlapping square patches.
pub fn mask_two_patches<R: Rng + ?Sized>(
    image: &Image,
    fraction: f64,
    rng: &mut R,
) -> Result<Image> {
    const RETRIES: usize = 100;
    let p = patch_side(image, fraction);
    let (w, h) = image.dims();
    let first = (rng.random_range(0..=w - p), rng.random_range(0..=h - p));
    for _ in 0..RETRIES {
        let second = (rng.random_range(0..=w - p), rng.random_range(0..=h - p));
        let overlap = first.0 < second.0 + p
            && second.0 < first.0 + p
            && first.1 < second.1 + p
            && second.1 < first.1 + p;
        if !overlap {
            let mut out = image.clone();
            zero_rect(&mut out, first.0, first.1, p, p);
            zero_rect(&mut out, second.0, second.1, p, p);
            return Ok(out);
        }
    }
    Err(Error::Placement(format!(
        "no overlap-free placement of two {p}x{p} patches in {w}x{h} after {RETRIES} tries"
    )))
}

/// Zeroes a border frame of width `fraction * side`.
pub fn mask_frame(image: &Image, fraction: f64) -> Image {
    let f = patch_side(image, fraction);
    let (w, h) = image.dims();
    let mut out = image.clone();
    for y in 0..h {
        for x in 0..w {
            if x < f || y < f || x + f >= w || y + f >= h {
                out.set_pixel(x, y, [0.0; 3]);
            }
        }
    }
    out
}

/// Sets each pixel with probability `density` to black or white (even odds).
pub fn salt_and_pepper<R: Rng + ?Sized>(image: &Image, density: f64, rng: &mut R) -> Image {
    let mut out = image.clone();
    if density <= 0.0 {
        return out;
    }
    let (w, h) = image.dims();
    for y in 0..h {
        for x in 0..w {
            if rng.random_bool(density) {
                let v = if rng.random_bool(0.5) { 1.0 } else { 0.0 };
                out.set_pixel(x, y, [v; 3]);
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GenerativeVariant {
    GaussDenoise,
    Superres,
    Inpaint,
}

/// Returns `(degraded input, clean output)`.
pub fn make_generative_pair<R: Rng + ?Sized>(
    image: &Image,
    variant: GenerativeVariant,
    params: &DegradationParams,
    rng: &mut R,
) -> Result<(Image, Image)> {
    params.validate()?;
    let input = match variant {
        GenerativeVariant::GaussDenoise => gaussian_noise(image, params.gauss_sigma, rng)?,
        GenerativeVariant::Superres => low_resolution(image, params.superres_factor)?,
        GenerativeVariant::Inpaint => mask_patch(image, params.inpaint_fraction, rng),
    };
    Ok((input, image.clone()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scan(side: usize) -> Image {
        let gray: Vec<f32> = (0..side * side)
            .map(|i| 0.2 + 0.6 * (((i * 7919) % 101) as f32 / 100.0))
            .collect();
        Image::from_gray(side, side, &gray)
    }

    fn zeroed(a: &Image, b: &Image) -> usize {
        let (w, h) = a.dims();
        (0..h)
            .flat_map(|y| (0..w).map(move |x| (x, y)))
            .filter(|&(x, y)| a.pixel(x, y) != b.pixel(x, y) && b.pixel(x, y) == [0.0; 3])
            .count()
    }

    #[test]
    fn invert_of_black_is_white() {
        let (_, out) = make_transform_pair(&Image::zeros(16, 16), TransformVariant::Invert);
        assert!(out.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn invert_matches_8bit_complement() {
        let img = scan(16).quantized();
        let (_, out) = make_transform_pair(&img, TransformVariant::Invert);
        for (a, b) in img.to_rgb8().iter().zip(out.to_rgb8()) {
            assert_eq!(b, 255 - a);
        }
    }

    #[test]
    fn revert_swaps_invert_pair() {
        let img = scan(16);
        let (i1, o1) = make_transform_pair(&img, TransformVariant::Invert);
        let (i2, o2) = make_transform_pair(&img, TransformVariant::Revert);
        assert_eq!((i2, o2), (o1, i1));
    }

    #[test]
    fn zero_sigma_and_unit_factor_are_identity() {
        let img = scan(16);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = DegradationParams {
            gauss_sigma: 0.0,
            superres_factor: 1,
            ..DegradationParams::default()
        };
        for v in [GenerativeVariant::GaussDenoise, GenerativeVariant::Superres] {
            let (i, o) = make_generative_pair(&img, v, &p, &mut rng).unwrap();
            assert_eq!(i, o);
        }
    }

    #[test]
    fn inpaint_quarter_patch_on_64_zeroes_256_pixels() {
        let img = scan(64);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (i, o) = make_generative_pair(
            &img,
            GenerativeVariant::Inpaint,
            &DegradationParams::default(),
            &mut rng,
        )
        .unwrap();
        assert_eq!(zeroed(&o, &i), 16 * 16);
    }

    #[test]
    fn superres_differs_only_within_blocks() {
        let img = scan(16);
        let lo = low_resolution(&img, 4).unwrap();
        // Each 4x4 block of the degraded image is constant and equals the block mean.
        for by in 0..4 {
            for bx in 0..4 {
                let mut mean = 0.0;
                for y in 0..4 {
                    for x in 0..4 {
                        mean += img.pixel(bx * 4 + x, by * 4 + y)[0];
                    }
                }
                mean /= 16.0;
                for y in 0..4 {
                    for x in 0..4 {
                        assert!((lo.pixel(bx * 4 + x, by * 4 + y)[0] - mean).abs() < 1e-6);
                    }
                }
            }
        }
    }

    #[test]
    fn outpaint_frame_count() {
        let img = scan(64);
        let out = mask_frame(&img, 0.125);
        let f = 8;
        assert_eq!(zeroed(&img, &out), 64 * 64 - (64 - 2 * f) * (64 - 2 * f));
    }

    #[test]
    fn two_patches_do_not_overlap() {
        let img = scan(64);
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let out = mask_two_patches(&img, 0.2, &mut rng).unwrap();
            assert_eq!(zeroed(&img, &out), 2 * 13 * 13);
        }
    }

    #[test]
    fn impossible_two_patch_placement_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let tight = Image::zeros(17, 17);
        // Two 9x9 patches cannot fit side by side in 17 pixels.
        let r = mask_two_patches(&tight, 0.5, &mut rng);
        assert!(matches!(r, Err(Error::Placement(_))));
    }

    #[test]
    fn zero_density_salt_and_pepper_is_identity() {
        let img = scan(16);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(salt_and_pepper(&img, 0.0, &mut rng), img);
        let noisy = salt_and_pepper(&img, 0.5, &mut rng);
        let changed: Vec<[f32; 3]> = noisy
            .pixels()
            .zip(img.pixels())
            .filter(|(a, b)| a != b)
            .map(|(a, _)| a)
            .collect();
        assert!(changed.iter().all(|p| *p == [0.0; 3] || *p == [1.0; 3]));
        assert!(changed.len() > 50);
    }

    #[test]
    fn gaussian_noise_is_deterministic_and_clipped() {
        let img = scan(16);
        let a = gaussian_noise(&img, 0.3, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let b = gaussian_noise(&img, 0.3, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_eq!(a, b);
        assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_ne!(a, img);
    }

    #[test]
    fn invalid_params_are_config_errors() {
        let img = scan(16);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for p in [
            DegradationParams {
                superres_factor: 3,
                ..Default::default()
            },
            DegradationParams {
                inpaint_fraction: 0.7,
                ..Default::default()
            },
            DegradationParams {
                gauss_sigma: -1.0,
                ..Default::default()
            },
        ] {
            assert!(matches!(
                make_generative_pair(&img, GenerativeVariant::Inpaint, &p, &mut rng),
                Err(Error::Config(_))
            ));
        }
    }
}
