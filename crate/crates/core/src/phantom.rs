//! Procedural OCT-like B-scans with layer and fluid annotations.
//!
//! A scan is a stack of seven retinal layer bands whose boundaries are
//! low-frequency cosine series, optionally carrying elliptical fluid pockets
//! clipped to the retina. The label map only depends on geometry; the
//! [`VendorStyle`] post-processing (speckle, gamma, blur, offset) touches the
//! image alone, so two styles with the same seed share their annotations.

use std::f64::consts::PI;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Image, LabelMap, MIN_SIDE};
use crate::manifest::{split_samples, DatasetManifest, SampleEntry, SplitRatios, Splits};
use crate::palette::{Palette, Rgb8};
use crate::rng::{derive_seed, fnv1a};

pub const LAYER_CLASSES: usize = 7;

/// Which annotated dataset a phantom stands in for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum DatasetRole {
    /// Seven retinal layer classes.
    Layers,
    /// One fluid class, heavy healthy share.
    Dme,
    /// One fluid class.
    Umn,
    /// Three fluid classes (IRF, SRF, PED).
    Retouch,
    /// Image-only scans with unlabeled pathology.
    Octdl,
}

impl DatasetRole {
    pub fn class_names(self) -> Vec<String> {
        let names: &[&str] = match self {
            DatasetRole::Layers => &[
                "background",
                "NFL",
                "GCL-IPL",
                "INL",
                "OPL",
                "ONL",
                "IS-OS",
                "RPE",
            ],
            DatasetRole::Dme | DatasetRole::Umn => &["background", "fluid"],
            DatasetRole::Retouch => &["background", "IRF", "SRF", "PED"],
            DatasetRole::Octdl => &["background"],
        };
        names.iter().map(|s| s.to_string()).collect()
    }

    pub fn default_palette(self) -> Palette {
        const COLORS: [Rgb8; 8] = [
            [0, 0, 0],
            [255, 0, 0],
            [0, 255, 0],
            [0, 0, 255],
            [255, 255, 0],
            [255, 0, 255],
            [0, 255, 255],
            [255, 255, 255],
        ];
        let n = self.class_names().len();
        Palette::from_colors(&COLORS[..n]).expect("static palette is valid")
    }

    pub fn is_labeled(self) -> bool {
        self != DatasetRole::Octdl
    }
}

impl FromStr for DatasetRole {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "LAYERS" => Ok(DatasetRole::Layers),
            "DME" => Ok(DatasetRole::Dme),
            "UMN" => Ok(DatasetRole::Umn),
            "RETOUCH" => Ok(DatasetRole::Retouch),
            "OCTDL" => Ok(DatasetRole::Octdl),
            other => Err(Error::Config(format!("unknown dataset profile `{other}`"))),
        }
    }
}

impl fmt::Display for DatasetRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            DatasetRole::Layers => "LAYERS",
            DatasetRole::Dme => "DME",
            DatasetRole::Umn => "UMN",
            DatasetRole::Retouch => "RETOUCH",
            DatasetRole::Octdl => "OCTDL",
        };
        f.write_str(s)
    }
}

/// Device-specific image pipeline applied after rendering.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VendorStyle {
    pub speckle_variance: f64,
    pub gamma: f64,
    pub blur_sigma: f64,
    pub intensity_offset: f64,
}

impl Default for VendorStyle {
    fn default() -> Self {
        Self {
            speckle_variance: 0.03,
            gamma: 1.0,
            blur_sigma: 0.7,
            intensity_offset: 0.0,
        }
    }
}

impl VendorStyle {
    pub fn validate(&self) -> Result<()> {
        if !(self.speckle_variance >= 0.0 && self.speckle_variance.is_finite()) {
            return Err(Error::Config(
                "speckle_variance must be finite and >= 0".into(),
            ));
        }
        if !(0.5..=2.0).contains(&self.gamma) {
            return Err(Error::Config(format!(
                "gamma {} outside [0.5, 2.0]",
                self.gamma
            )));
        }
        if !(self.blur_sigma >= 0.0 && self.blur_sigma.is_finite()) {
            return Err(Error::Config("blur_sigma must be finite and >= 0".into()));
        }
        if !self.intensity_offset.is_finite() {
            return Err(Error::Config("intensity_offset must be finite".into()));
        }
        Ok(())
    }

    /// Three visibly different device pipelines for the multi-vendor dataset.
    pub fn vendor_presets() -> [VendorStyle; 3] {
        [
            VendorStyle {
                speckle_variance: 0.02,
                gamma: 0.8,
                blur_sigma: 0.9,
                intensity_offset: 0.03,
            },
            VendorStyle {
                speckle_variance: 0.05,
                gamma: 1.0,
                blur_sigma: 0.5,
                intensity_offset: 0.0,
            },
            VendorStyle {
                speckle_variance: 0.03,
                gamma: 1.35,
                blur_sigma: 1.1,
                intensity_offset: -0.02,
            },
        ]
    }
}

/// Per-scan knobs that are not part of the vendor style.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScanSpec {
    pub size: usize,
    /// Probability that a fluid-bearing profile renders no fluid.
    pub healthy_fraction: f64,
}

impl ScanSpec {
    pub fn new(size: usize) -> Self {
        Self {
            size,
            healthy_fraction: 0.5,
        }
    }
}

/// Everything the renderer decided, kept for consistency checks.
#[derive(Debug, Clone)]
pub struct ScanGeometry {
    pub size: usize,
    /// Boundary `k` at column `x` is `boundaries[k][x]`; eight strictly
    /// increasing curves delimit the seven layers.
    pub boundaries: Vec<Vec<f64>>,
    /// Layer id (1..=7) per pixel, 0 outside the retina.
    pub layers: LabelMap,
}

impl ScanGeometry {
    pub fn retina_mask(&self) -> Vec<bool> {
        self.layers.foreground_mask()
    }
}

#[derive(Debug, Clone, Copy)]
struct Ellipse {
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
}

impl Ellipse {
    fn contains(&self, x: f64, y: f64) -> bool {
        let dx = (x - self.cx) / self.rx;
        let dy = (y - self.cy) / self.ry;
        dx * dx + dy * dy <= 1.0
    }
}

struct CosineCurve {
    base: f64,
    terms: Vec<(f64, f64, f64)>,
}

impl CosineCurve {
    fn random(rng: &mut ChaCha8Rng, base: f64, amplitude: f64, harmonics: usize) -> Self {
        let terms = (1..=harmonics)
            .map(|k| {
                let a = amplitude * rng.random_range(0.3..1.0) / k as f64;
                let phase = rng.random_range(0.0..2.0 * PI);
                (a, k as f64, phase)
            })
            .collect();
        Self { base, terms }
    }

    fn eval(&self, t: f64) -> f64 {
        self.base
            + self
                .terms
                .iter()
                .map(|&(a, k, p)| a * (PI * k * t + p).cos())
                .sum::<f64>()
    }
}

const LAYER_WEIGHTS: [f64; LAYER_CLASSES] = [0.12, 0.17, 0.12, 0.13, 0.18, 0.12, 0.16];
const LAYER_INTENSITY: [f64; LAYER_CLASSES] = [0.78, 0.48, 0.26, 0.52, 0.2, 0.68, 0.92];
const VITREOUS: f64 = 0.04;
const FLUID: f64 = 0.06;

fn layer_geometry(size: usize, rng: &mut ChaCha8Rng) -> ScanGeometry {
    let s = size as f64;
    let top_base = s * rng.random_range(0.24..0.32);
    let top = CosineCurve::random(rng, top_base, s * 0.05, 3);
    let thickness_base = s * rng.random_range(0.36..0.42);
    let thickness = CosineCurve::random(rng, thickness_base, s * 0.03, 2);
    let modulations: Vec<CosineCurve> = (0..LAYER_CLASSES)
        .map(|_| CosineCurve::random(rng, 1.0, 0.25, 2))
        .collect();
    // Each layer keeps at least this many pixels of height so every class is
    // visible in every column.
    let min_layer = 1.2;

    let mut boundaries = vec![vec![0.0; size]; LAYER_CLASSES + 1];
    for x in 0..size {
        let t = (x as f64 + 0.5) / s;
        let total = thickness
            .eval(t)
            .max(min_layer * LAYER_CLASSES as f64 + 1.0);
        let raw: Vec<f64> = (0..LAYER_CLASSES)
            .map(|k| LAYER_WEIGHTS[k] * modulations[k].eval(t).max(0.2))
            .collect();
        let norm: f64 = raw.iter().sum();
        let spare = total - min_layer * LAYER_CLASSES as f64;
        let mut y = top.eval(t).clamp(2.0, s * 0.45);
        boundaries[0][x] = y;
        for k in 0..LAYER_CLASSES {
            y += min_layer + spare * raw[k] / norm;
            boundaries[k + 1][x] = y;
        }
    }

    let mut layers = LabelMap::zeros(size, size);
    for x in 0..size {
        for y in 0..size {
            let yc = y as f64 + 0.5;
            for k in 0..LAYER_CLASSES {
                if yc >= boundaries[k][x] && yc < boundaries[k + 1][x] {
                    layers.set(x, y, (k + 1) as u8);
                    break;
                }
            }
        }
    }
    ScanGeometry {
        size,
        boundaries,
        layers,
    }
}

fn random_ellipse(
    geom: &ScanGeometry,
    rng: &mut ChaCha8Rng,
    depth: (usize, usize),
    rx: (f64, f64),
    ry: (f64, f64),
) -> Ellipse {
    let s = geom.size as f64;
    let col = rng.random_range(geom.size / 6..geom.size - geom.size / 6);
    let lo = geom.boundaries[depth.0][col];
    let hi = geom.boundaries[depth.1][col];
    let cy = if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    };
    Ellipse {
        cx: col as f64 + 0.5,
        cy,
        rx: s * rng.random_range(rx.0..rx.1),
        ry: s * rng.random_range(ry.0..ry.1),
    }
}

/// Fluid pockets by class id (1-based), painted in order.
fn fluid_pockets(
    role: DatasetRole,
    geom: &ScanGeometry,
    healthy_fraction: f64,
    rng: &mut ChaCha8Rng,
) -> Vec<(u8, Ellipse)> {
    let healthy = rng.random_bool(healthy_fraction.clamp(0.0, 1.0));
    let mut out = Vec::new();
    match role {
        DatasetRole::Layers => {}
        DatasetRole::Dme | DatasetRole::Umn => {
            if !healthy {
                for _ in 0..rng.random_range(1..=3) {
                    out.push((
                        1,
                        random_ellipse(geom, rng, (2, 5), (0.04, 0.11), (0.03, 0.07)),
                    ));
                }
            }
        }
        DatasetRole::Retouch => {
            if !healthy {
                // Among diseased scans: 60% one class, 30% two, 10% all three.
                let r: f64 = rng.random();
                let count = if r < 0.6 {
                    1
                } else if r < 0.9 {
                    2
                } else {
                    3
                };
                let mut classes = [1u8, 2, 3];
                for i in (1..3).rev() {
                    let j = rng.random_range(0..=i);
                    classes.swap(i, j);
                }
                let mut chosen = classes[..count].to_vec();
                chosen.sort_unstable();
                for class in chosen {
                    let e = match class {
                        1 => random_ellipse(geom, rng, (1, 5), (0.04, 0.10), (0.03, 0.07)),
                        2 => random_ellipse(geom, rng, (5, 6), (0.08, 0.16), (0.03, 0.05)),
                        _ => random_ellipse(geom, rng, (7, 7), (0.07, 0.14), (0.04, 0.08)),
                    };
                    out.push((class, e));
                }
            }
        }
        DatasetRole::Octdl => {
            if rng.random_bool(0.84) {
                for _ in 0..rng.random_range(1..=3) {
                    let depth = if rng.random_bool(0.5) { (1, 5) } else { (5, 7) };
                    out.push((
                        1,
                        random_ellipse(geom, rng, depth, (0.03, 0.12), (0.02, 0.07)),
                    ));
                }
            }
        }
    }
    out
}

fn gaussian_blur(plane: &mut [f64], size: usize, sigma: f64) {
    if sigma <= 0.0 {
        return;
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.into_iter().map(|k| k / norm).collect();
    let n = size as isize;
    let clamp = |v: isize| v.clamp(0, n - 1) as usize;
    let mut tmp = vec![0.0; plane.len()];
    for y in 0..size {
        for x in 0..size {
            tmp[y * size + x] = kernel
                .iter()
                .enumerate()
                .map(|(i, k)| k * plane[y * size + clamp(x as isize + i as isize - radius)])
                .sum();
        }
    }
    for y in 0..size {
        for x in 0..size {
            plane[y * size + x] = kernel
                .iter()
                .enumerate()
                .map(|(i, k)| k * tmp[clamp(y as isize + i as isize - radius) * size + x])
                .sum();
        }
    }
}

/// Renders one scan and returns its geometry alongside image and labels.
pub fn generate_phantom_scan_with_geometry(
    seed: u64,
    style: &VendorStyle,
    role: DatasetRole,
    spec: &ScanSpec,
) -> Result<(Image, LabelMap, ScanGeometry)> {
    style.validate()?;
    if spec.size < MIN_SIDE {
        return Err(Error::Config(format!(
            "image size {} below minimum {MIN_SIDE}",
            spec.size
        )));
    }
    let size = spec.size;
    let s = size as f64;
    let mut geo_rng = ChaCha8Rng::seed_from_u64(seed);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(seed);
    noise_rng.set_stream(1);

    let geom = layer_geometry(size, &mut geo_rng);
    let pockets = fluid_pockets(role, &geom, spec.healthy_fraction, &mut geo_rng);
    let texture_phase = geo_rng.random_range(0.0..2.0 * PI);

    let mut labels = LabelMap::zeros(size, size);
    let mut plane = vec![0.0f64; size * size];
    for y in 0..size {
        for x in 0..size {
            let (xc, yc) = (x as f64 + 0.5, y as f64 + 0.5);
            let layer = geom.layers.get(x, y);
            let mut v = if layer > 0 {
                let k = (layer - 1) as usize;
                LAYER_INTENSITY[k] * (1.0 + 0.06 * (xc / s * 9.0 + texture_phase + k as f64).sin())
            } else if yc < geom.boundaries[0][x] {
                VITREOUS
            } else {
                let depth = yc - geom.boundaries[LAYER_CLASSES][x];
                0.06 + 0.45 * (-depth / (0.12 * s)).exp()
            };
            if layer > 0 {
                for (class, e) in &pockets {
                    if e.contains(xc, yc) {
                        v = FLUID;
                        if role != DatasetRole::Octdl {
                            labels.set(x, y, *class);
                        }
                    }
                }
            }
            plane[y * size + x] = v;
        }
    }
    if role == DatasetRole::Layers {
        labels = geom.layers.clone();
    }

    let sd = style.speckle_variance.sqrt();
    for v in plane.iter_mut() {
        let n: f64 = StandardNormal.sample(&mut noise_rng);
        *v = (*v * (1.0 + sd * n)).max(0.0);
    }
    for v in plane.iter_mut() {
        *v = v.min(1.0).powf(style.gamma);
    }
    gaussian_blur(&mut plane, size, style.blur_sigma);
    let gray: Vec<f32> = plane
        .iter()
        .map(|v| (v + style.intensity_offset).clamp(0.0, 1.0) as f32)
        .collect();
    Ok((Image::from_gray(size, size, &gray), labels, geom))
}

pub fn generate_phantom_scan(
    seed: u64,
    style: &VendorStyle,
    role: DatasetRole,
    spec: &ScanSpec,
) -> Result<(Image, LabelMap)> {
    generate_phantom_scan_with_geometry(seed, style, role, spec).map(|(i, l, _)| (i, l))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomDatasetConfig {
    pub name: String,
    pub role: DatasetRole,
    pub count: usize,
    pub healthy_fraction: f64,
    pub vendor: String,
    pub style: VendorStyle,
}

/// Corpus layout: seven datasets mirroring the roles of the real ones.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomConfig {
    pub image_size: usize,
    pub split: SplitRatios,
    pub datasets: Vec<PhantomDatasetConfig>,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        let base = VendorStyle::default();
        let vendors = VendorStyle::vendor_presets();
        let ds =
            |name: &str, role, count, healthy_fraction, vendor: &str, style| PhantomDatasetConfig {
                name: name.to_string(),
                role,
                count,
                healthy_fraction,
                vendor: vendor.to_string(),
                style,
            };
        Self {
            image_size: 64,
            split: SplitRatios::default(),
            datasets: vec![
                ds("PD-LAYERS", DatasetRole::Layers, 40, 0.0, "phantom", base),
                ds("PD-DME", DatasetRole::Dme, 60, 0.5, "phantom", base),
                ds("PD-UMN", DatasetRole::Umn, 60, 0.56, "phantom", base),
                ds(
                    "PD-RETOUCH-A",
                    DatasetRole::Retouch,
                    40,
                    0.5,
                    "A",
                    vendors[0],
                ),
                ds(
                    "PD-RETOUCH-B",
                    DatasetRole::Retouch,
                    40,
                    0.5,
                    "B",
                    vendors[1],
                ),
                ds(
                    "PD-RETOUCH-C",
                    DatasetRole::Retouch,
                    40,
                    0.5,
                    "C",
                    vendors[2],
                ),
                ds("PD-OCTDL", DatasetRole::Octdl, 80, 0.16, "phantom", base),
            ],
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < MIN_SIDE {
            return Err(Error::Config(format!(
                "image_size {} below minimum {MIN_SIDE}",
                self.image_size
            )));
        }
        self.split.validate()?;
        for (i, d) in self.datasets.iter().enumerate() {
            d.style.validate()?;
            if self.datasets[..i].iter().any(|o| o.name == d.name) {
                return Err(Error::Config(format!(
                    "duplicate dataset name `{}`",
                    d.name
                )));
            }
            if !(0.0..=1.0).contains(&d.healthy_fraction) {
                return Err(Error::Config(format!(
                    "{}: healthy_fraction outside [0, 1]",
                    d.name
                )));
            }
        }
        Ok(())
    }
}

/// Seed of sample `index` in dataset `name`; independent of dataset order.
pub fn sample_seed(corpus_seed: u64, dataset: &str, index: usize) -> u64 {
    derive_seed(corpus_seed ^ fnv1a(dataset.as_bytes()), index as u64)
}

pub fn manifest_path(root: &Path, dataset: &str) -> PathBuf {
    root.join(dataset).join("manifest.json")
}

/// Writes every configured dataset below `root` and returns the manifests.
pub fn build_phantom_corpus(
    config: &PhantomConfig,
    root: &Path,
    seed: u64,
) -> Result<Vec<DatasetManifest>> {
    config.validate()?;
    let mut manifests = Vec::with_capacity(config.datasets.len());
    for ds in &config.datasets {
        let dir = root.join(&ds.name);
        for sub in ["images", "labels"] {
            std::fs::create_dir_all(dir.join(sub)).map_err(|e| Error::io(dir.join(sub), e))?;
        }
        let spec = ScanSpec {
            size: config.image_size,
            healthy_fraction: ds.healthy_fraction,
        };
        let scans: Vec<(Image, LabelMap)> = (0..ds.count)
            .into_par_iter()
            .map(|i| {
                generate_phantom_scan(sample_seed(seed, &ds.name, i), &ds.style, ds.role, &spec)
            })
            .collect::<Result<_>>()?;

        let palette = ds.role.default_palette();
        let lut = palette.lookup_table();
        let mut samples = Vec::with_capacity(ds.count);
        for (i, (img, labels)) in scans.iter().enumerate() {
            let id = format!("s{i:04}");
            let image_rel = format!("images/{id}.png");
            img.save_png(&dir.join(&image_rel))?;
            let labels_rel = if ds.role.is_labeled() {
                let rel = format!("labels/{id}.png");
                labels.save_png(&dir.join(&rel), &lut)?;
                Some(rel)
            } else {
                None
            };
            samples.push(SampleEntry {
                id,
                image: image_rel,
                labels: labels_rel,
                vendor: ds.vendor.clone(),
            });
        }
        let ids: Vec<String> = samples.iter().map(|s| s.id.clone()).collect();
        let (train, val, test) = split_samples(
            &ids,
            &config.split,
            derive_seed(seed ^ fnv1a(ds.name.as_bytes()), u64::MAX),
        )?;
        let manifest = DatasetManifest {
            name: ds.name.clone(),
            class_names: ds.role.class_names(),
            palette,
            samples,
            splits: Splits { train, val, test },
        };
        manifest.save(&manifest_path(root, &ds.name))?;
        manifests.push(manifest);
    }
    Ok(manifests)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> ScanSpec {
        ScanSpec::new(64)
    }

    #[test]
    fn layers_profile_contains_all_eight_classes() {
        let (_, labels) =
            generate_phantom_scan(7, &VendorStyle::default(), DatasetRole::Layers, &spec())
                .unwrap();
        assert_eq!(labels.unique_ids(), (0..=7).collect::<Vec<u8>>());
    }

    #[test]
    fn every_column_shows_every_layer() {
        for seed in 0..20 {
            let (_, labels) =
                generate_phantom_scan(seed, &VendorStyle::default(), DatasetRole::Layers, &spec())
                    .unwrap();
            for x in 0..64 {
                let mut col: Vec<u8> = (0..64).map(|y| labels.get(x, y)).collect();
                col.sort_unstable();
                col.dedup();
                assert_eq!(col, (0..=7).collect::<Vec<u8>>(), "seed {seed} column {x}");
            }
        }
    }

    #[test]
    fn boundaries_are_strictly_ordered() {
        let (_, _, geom) = generate_phantom_scan_with_geometry(
            3,
            &VendorStyle::default(),
            DatasetRole::Layers,
            &spec(),
        )
        .unwrap();
        for x in 0..64 {
            for k in 0..LAYER_CLASSES {
                assert!(geom.boundaries[k][x] < geom.boundaries[k + 1][x]);
            }
        }
    }

    #[test]
    fn octdl_labels_are_all_background() {
        for seed in 0..5 {
            let (_, labels) =
                generate_phantom_scan(seed, &VendorStyle::default(), DatasetRole::Octdl, &spec())
                    .unwrap();
            assert!(!labels.has_foreground());
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let style = VendorStyle::vendor_presets()[1];
        let a = generate_phantom_scan(11, &style, DatasetRole::Retouch, &spec()).unwrap();
        let b = generate_phantom_scan(11, &style, DatasetRole::Retouch, &spec()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn vendor_style_changes_image_not_labels() {
        let [a, b, _] = VendorStyle::vendor_presets();
        for seed in 0..6 {
            let (ia, la) = generate_phantom_scan(seed, &a, DatasetRole::Retouch, &spec()).unwrap();
            let (ib, lb) = generate_phantom_scan(seed, &b, DatasetRole::Retouch, &spec()).unwrap();
            assert_eq!(la, lb);
            let mae: f32 = ia
                .data()
                .iter()
                .zip(ib.data())
                .map(|(x, y)| (x - y).abs())
                .sum::<f32>()
                / ia.data().len() as f32;
            assert!(mae > 0.0);
        }
    }

    #[test]
    fn fluid_stays_inside_retina() {
        let s = ScanSpec {
            size: 64,
            healthy_fraction: 0.0,
        };
        for role in [DatasetRole::Dme, DatasetRole::Umn, DatasetRole::Retouch] {
            for seed in 0..15 {
                let (_, labels, geom) =
                    generate_phantom_scan_with_geometry(seed, &VendorStyle::default(), role, &s)
                        .unwrap();
                assert!(labels.has_foreground(), "{role} seed {seed} lacks fluid");
                let retina = geom.retina_mask();
                for (id, inside) in labels.ids().iter().zip(&retina) {
                    assert!(*id == 0 || *inside);
                }
                assert!(labels
                    .unique_ids()
                    .iter()
                    .all(|&id| (id as usize) < role.class_names().len()));
            }
        }
    }

    #[test]
    fn fully_healthy_fraction_renders_no_fluid() {
        let s = ScanSpec {
            size: 32,
            healthy_fraction: 1.0,
        };
        let (_, labels) =
            generate_phantom_scan(1, &VendorStyle::default(), DatasetRole::Dme, &s).unwrap();
        assert!(!labels.has_foreground());
    }

    #[test]
    fn invalid_inputs_are_config_errors() {
        assert!(matches!(
            "SPINE".parse::<DatasetRole>(),
            Err(Error::Config(_))
        ));
        let bad = VendorStyle {
            gamma: 3.0,
            ..VendorStyle::default()
        };
        assert!(matches!(
            generate_phantom_scan(0, &bad, DatasetRole::Layers, &spec()),
            Err(Error::Config(_))
        ));
        assert!(generate_phantom_scan(
            0,
            &VendorStyle::default(),
            DatasetRole::Layers,
            &ScanSpec::new(8)
        )
        .is_err());
    }

    #[test]
    fn default_palettes_are_separated() {
        for role in [
            DatasetRole::Layers,
            DatasetRole::Dme,
            DatasetRole::Retouch,
            DatasetRole::Octdl,
        ] {
            let p = role.default_palette();
            assert_eq!(p.len(), role.class_names().len());
            p.check_separation(crate::palette::DEFAULT_MIN_COLOR_DISTANCE)
                .unwrap();
        }
    }
}
