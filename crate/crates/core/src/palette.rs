//! Class/color encoding, nearest-color decoding of predictions and the
//! coherent random-recoloring augmentation.
//!
//! Distances are computed in 8-bit units (`255 * v`) with `f64` arithmetic.
//! On 8-bit-derived inputs this makes equal distances compare equal, so the
//! lowest-index tie rule is stable.

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::context::{ContextPair, ContextSet};
use crate::error::{Error, Result};
use crate::image::{quantize, Image, LabelMap};

/// Minimum pairwise class-color distance on the `[0, 1]` scale.
pub const DEFAULT_MIN_COLOR_DISTANCE: f64 = 80.0 / 255.0;
/// Upper bound on distinct colors accepted from a semantic context.
pub const DEFAULT_MAX_CLASSES: usize = 16;

pub type Rgb8 = [u8; 3];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PaletteEntry {
    pub id: u8,
    pub color: Rgb8,
}

/// Ordered `(class id, color)` entries with unique ids and distinct colors.
///
/// Serialized as a list of `[id, r, g, b]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<[u8; 4]>", into = "Vec<[u8; 4]>")]
pub struct Palette {
    entries: Vec<PaletteEntry>,
}

impl TryFrom<Vec<[u8; 4]>> for Palette {
    type Error = Error;

    fn try_from(raw: Vec<[u8; 4]>) -> Result<Self> {
        Palette::new(
            raw.into_iter()
                .map(|[id, r, g, b]| PaletteEntry {
                    id,
                    color: [r, g, b],
                })
                .collect(),
        )
    }
}

impl From<Palette> for Vec<[u8; 4]> {
    fn from(p: Palette) -> Self {
        p.entries
            .iter()
            .map(|e| [e.id, e.color[0], e.color[1], e.color[2]])
            .collect()
    }
}

impl Palette {
    pub fn new(entries: Vec<PaletteEntry>) -> Result<Self> {
        for (i, a) in entries.iter().enumerate() {
            for b in &entries[i + 1..] {
                if a.id == b.id {
                    return Err(Error::Codec(format!(
                        "duplicate class id {} in palette",
                        a.id
                    )));
                }
                if a.color == b.color {
                    return Err(Error::Codec(format!(
                        "classes {} and {} share color {:?}",
                        a.id, b.id, a.color
                    )));
                }
            }
        }
        Ok(Self { entries })
    }

    /// Entries get ids `0..n` in the given order.
    pub fn from_colors(colors: &[Rgb8]) -> Result<Self> {
        if colors.len() > 256 {
            return Err(Error::Codec("palette limited to 256 entries".into()));
        }
        Self::new(
            colors
                .iter()
                .enumerate()
                .map(|(i, &color)| PaletteEntry { id: i as u8, color })
                .collect(),
        )
    }

    pub fn entries(&self) -> &[PaletteEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn color_of(&self, id: u8) -> Option<Rgb8> {
        self.entries.iter().find(|e| e.id == id).map(|e| e.color)
    }

    pub fn id_of(&self, color: Rgb8) -> Option<u8> {
        self.entries.iter().find(|e| e.color == color).map(|e| e.id)
    }

    /// Colors indexed by class id, for PNG PLTE chunks. Missing ids map to black.
    pub fn lookup_table(&self) -> Vec<Rgb8> {
        let max = self.entries.iter().map(|e| e.id).max().unwrap_or(0) as usize;
        let mut table = vec![[0u8; 3]; max + 1];
        for e in &self.entries {
            table[e.id as usize] = e.color;
        }
        table
    }

    pub fn min_pairwise_distance(&self) -> f64 {
        let mut best = f64::INFINITY;
        for (i, a) in self.entries.iter().enumerate() {
            for b in &self.entries[i + 1..] {
                best = best.min(color_distance(a.color, b.color));
            }
        }
        best
    }

    pub fn check_separation(&self, min_distance: f64) -> Result<()> {
        let d = self.min_pairwise_distance();
        if d + 1e-12 < min_distance {
            return Err(Error::Codec(format!(
                "palette colors closer than the minimum distance ({d:.4} < {min_distance:.4})"
            )));
        }
        Ok(())
    }
}

/// Euclidean distance between two 8-bit colors on the `[0, 1]` scale.
pub fn color_distance(a: Rgb8, b: Rgb8) -> f64 {
    let s: f64 = (0..3)
        .map(|c| {
            let d = f64::from(a[c]) - f64::from(b[c]);
            d * d
        })
        .sum();
    s.sqrt() / 255.0
}

pub fn rgb8_to_f32(c: Rgb8) -> [f32; 3] {
    c.map(|v| f32::from(v) / 255.0)
}

fn quantize_pixel(p: [f32; 3]) -> Rgb8 {
    p.map(quantize)
}

/// Squared distance in 8-bit units between a float pixel and a palette color.
fn squared_distance_255(p: [f32; 3], c: Rgb8) -> f64 {
    let mut s = 0.0f64;
    for ch in 0..3 {
        let d = f64::from(p[ch]) * 255.0 - f64::from(c[ch]);
        s += d * d;
    }
    s
}

/// Collects the distinct 8-bit colors of all context outputs in first-occurrence
/// order (pair order, then row-major). Ids are assigned `0..k` in that order.
pub fn extract_context_colors(context: &ContextSet, max_classes: usize) -> Result<Palette> {
    let mut colors: Vec<Rgb8> = Vec::new();
    for out in context.outputs() {
        for p in out.pixels() {
            let q = quantize_pixel(p);
            if !colors.contains(&q) {
                colors.push(q);
                if colors.len() > max_classes {
                    return Err(Error::Context(format!(
                        "context outputs hold more than {max_classes} distinct colors; not a semantic context"
                    )));
                }
            }
        }
    }
    Palette::from_colors(&colors)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodedPrediction {
    pub labels: LabelMap,
    pub palette_used: Palette,
    /// Mean distance (`[0, 1]` scale) from each pixel to its assigned color.
    pub snap_distance_mean: f64,
}

/// Replaces each pixel by the id of its nearest palette color; ties go to the
/// lower palette index.
pub fn decode_to_classes(pred: &Image, palette: &Palette) -> Result<DecodedPrediction> {
    if palette.is_empty() {
        return Err(Error::Codec(
            "cannot decode against an empty palette".into(),
        ));
    }
    let (w, h) = pred.dims();
    let mut ids = Vec::with_capacity(w * h);
    let mut cache: HashMap<[u32; 3], (u8, f64)> = HashMap::new();
    let mut snap_sum = 0.0;
    for p in pred.pixels() {
        let key = p.map(f32::to_bits);
        let (id, d2) = *cache.entry(key).or_insert_with(|| {
            let mut best = (
                palette.entries[0].id,
                squared_distance_255(p, palette.entries[0].color),
            );
            for e in &palette.entries[1..] {
                let d2 = squared_distance_255(p, e.color);
                if d2 < best.1 {
                    best = (e.id, d2);
                }
            }
            best
        });
        ids.push(id);
        snap_sum += d2.sqrt() / 255.0;
    }
    let n = (w * h).max(1) as f64;
    Ok(DecodedPrediction {
        labels: LabelMap::from_vec(w, h, ids)?,
        palette_used: palette.clone(),
        snap_distance_mean: snap_sum / n,
    })
}

/// Pixelwise color substitution of class ids.
pub fn encode_labels(labels: &LabelMap, palette: &Palette) -> Result<Image> {
    let table = palette.lookup_table();
    let mut known = [false; 256];
    for e in palette.entries() {
        known[e.id as usize] = true;
    }
    let (w, h) = labels.dims();
    let mut data = Vec::with_capacity(w * h * 3);
    for &id in labels.ids() {
        if !known[id as usize] {
            return Err(Error::Codec(format!("class id {id} has no palette color")));
        }
        data.extend_from_slice(&rgb8_to_f32(table[id as usize]));
    }
    Image::from_vec(w, h, data)
}

/// Draws `count` colors uniformly from the 8-bit RGB cube such that every
/// pair, and every color against `fixed`, is at least `min_distance` apart.
pub fn draw_separated_colors<R: Rng + ?Sized>(
    count: usize,
    fixed: &[Rgb8],
    min_distance: f64,
    rng: &mut R,
) -> Result<Vec<Rgb8>> {
    const PER_COLOR_TRIES: usize = 500;
    const RESTARTS: usize = 50;
    'restart: for _ in 0..RESTARTS {
        let mut drawn: Vec<Rgb8> = Vec::with_capacity(count);
        for _ in 0..count {
            let mut placed = false;
            for _ in 0..PER_COLOR_TRIES {
                let c: Rgb8 = [rng.random(), rng.random(), rng.random()];
                let ok = drawn
                    .iter()
                    .chain(fixed.iter())
                    .all(|&o| color_distance(c, o) >= min_distance);
                if ok {
                    drawn.push(c);
                    placed = true;
                    break;
                }
            }
            if !placed {
                continue 'restart;
            }
        }
        return Ok(drawn);
    }
    Err(Error::Augmentation(format!(
        "could not place {count} colors at distance {min_distance:.3} (with {} fixed)",
        fixed.len()
    )))
}

fn substitute(img: &Image, mapping: &HashMap<Rgb8, Rgb8>) -> Image {
    let mut out = img.clone();
    let (w, h) = img.dims();
    for y in 0..h {
        for x in 0..w {
            let q = quantize_pixel(img.pixel(x, y));
            if let Some(&new) = mapping.get(&q) {
                out.set_pixel(x, y, rgb8_to_f32(new));
            }
        }
    }
    out
}

/// Draws one fresh color per class present in the context outputs or the
/// target and substitutes it coherently everywhere. Absent classes keep their
/// colors and constrain the draw.
pub fn random_recolor<R: Rng + ?Sized>(
    context: &ContextSet,
    target: &Image,
    palette: &Palette,
    min_distance: f64,
    rng: &mut R,
) -> Result<(ContextSet, Image, Palette)> {
    let mut present = vec![false; palette.len()];
    let index: HashMap<Rgb8, usize> = palette
        .entries()
        .iter()
        .enumerate()
        .map(|(i, e)| (e.color, i))
        .collect();
    for img in context.outputs().chain(std::iter::once(target)) {
        for p in img.pixels() {
            if let Some(&i) = index.get(&quantize_pixel(p)) {
                present[i] = true;
            }
        }
    }
    let count = present.iter().filter(|&&p| p).count();
    if count == 0 {
        return Ok((context.clone(), target.clone(), palette.clone()));
    }
    let fixed: Vec<Rgb8> = palette
        .entries()
        .iter()
        .zip(&present)
        .filter(|(_, &p)| !p)
        .map(|(e, _)| e.color)
        .collect();
    let fresh = draw_separated_colors(count, &fixed, min_distance, rng)?;

    let mut mapping = HashMap::new();
    let mut fresh_iter = fresh.into_iter();
    let mut entries = palette.entries().to_vec();
    for (e, &p) in entries.iter_mut().zip(&present) {
        if p {
            let new = fresh_iter.next().expect("one color per present class");
            mapping.insert(e.color, new);
            e.color = new;
        }
    }
    let pairs = context
        .pairs()
        .iter()
        .map(|p| ContextPair {
            input: p.input.clone(),
            output: substitute(&p.output, &mapping),
        })
        .collect();
    Ok((
        ContextSet::new(pairs)?,
        substitute(target, &mapping),
        Palette::new(entries)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const BLACK: Rgb8 = [0, 0, 0];
    const RED: Rgb8 = [255, 0, 0];
    const BLUE: Rgb8 = [0, 0, 255];

    fn label_map(w: usize, h: usize, f: impl Fn(usize, usize) -> u8) -> LabelMap {
        let ids = (0..h)
            .flat_map(|y| (0..w).map(move |x| (x, y)))
            .map(|(x, y)| f(x, y))
            .collect();
        LabelMap::from_vec(w, h, ids).unwrap()
    }

    fn brute_force_nearest(p: [f32; 3], palette: &Palette) -> u8 {
        let mut best_id = 0;
        let mut best = f64::INFINITY;
        for e in palette.entries() {
            let d = squared_distance_255(p, e.color).sqrt();
            if d < best {
                best = d;
                best_id = e.id;
            }
        }
        best_id
    }

    #[test]
    fn exact_palette_color_maps_to_itself() {
        let pal = Palette::from_colors(&[BLACK, RED, BLUE]).unwrap();
        let img = Image::filled(2, 2, rgb8_to_f32(BLUE));
        let dec = decode_to_classes(&img, &pal).unwrap();
        assert!(dec.labels.ids().iter().all(|&id| id == 2));
        assert_eq!(dec.snap_distance_mean, 0.0);
    }

    #[test]
    fn dark_red_snaps_to_red_not_blue() {
        let pal = Palette::from_colors(&[RED, BLUE]).unwrap();
        let p = [100.0 / 255.0, 0.0, 0.0];
        // d(red) = 155, d(blue) = sqrt(100^2 + 255^2) ~ 273.9
        assert_eq!(brute_force_nearest(p, &pal), 0);
        let dec = decode_to_classes(&Image::filled(1, 1, p), &pal).unwrap();
        assert_eq!(dec.labels.ids(), &[0]);
        assert!((dec.snap_distance_mean - 155.0 / 255.0).abs() < 1e-6);
    }

    #[test]
    fn ties_go_to_lower_index() {
        let pal = Palette::from_colors(&[RED, BLACK]).unwrap();
        let dec = decode_to_classes(&Image::filled(1, 1, [0.5, 0.0, 0.0]), &pal).unwrap();
        assert_eq!(dec.labels.ids(), &[0]);
        let pal = Palette::from_colors(&[BLACK, RED]).unwrap();
        let dec = decode_to_classes(&Image::filled(1, 1, [0.5, 0.0, 0.0]), &pal).unwrap();
        assert_eq!(dec.labels.ids(), &[0]);
    }

    #[test]
    fn extract_orders_by_first_occurrence() {
        let mut a = Image::zeros(4, 1);
        a.set_pixel(2, 0, rgb8_to_f32(RED));
        let mut b = Image::zeros(4, 1);
        b.set_pixel(0, 0, rgb8_to_f32(BLUE));
        let ctx = ContextSet::from_images(vec![(a.clone(), a), (b.clone(), b)]).unwrap();
        let pal = extract_context_colors(&ctx, 16).unwrap();
        let colors: Vec<Rgb8> = pal.entries().iter().map(|e| e.color).collect();
        assert_eq!(colors, vec![BLACK, RED, BLUE]);
    }

    #[test]
    fn all_black_context_gives_single_entry() {
        let img = Image::zeros(4, 4);
        let ctx = ContextSet::from_images(vec![(img.clone(), img)]).unwrap();
        let pal = extract_context_colors(&ctx, 16).unwrap();
        assert_eq!(pal.len(), 1);
        assert_eq!(pal.entries()[0].color, BLACK);
    }

    #[test]
    fn too_many_colors_is_context_error() {
        let gray: Vec<f32> = (0..32).map(|i| i as f32 / 31.0).collect();
        let img = Image::from_gray(32, 1, &gray);
        let ctx = ContextSet::from_images(vec![(img.clone(), img)]).unwrap();
        assert!(matches!(
            extract_context_colors(&ctx, 16),
            Err(Error::Context(_))
        ));
    }

    #[test]
    fn encode_decode_round_trip() {
        let pal = Palette::from_colors(&[BLACK, RED, BLUE]).unwrap();
        let map = label_map(7, 5, |x, y| ((x * 3 + y) % 3) as u8);
        let img = encode_labels(&map, &pal).unwrap();
        let uniq: std::collections::HashSet<Rgb8> = img.pixels().map(quantize_pixel).collect();
        assert_eq!(uniq.len(), 3);
        assert_eq!(decode_to_classes(&img, &pal).unwrap().labels, map);
    }

    #[test]
    fn encode_missing_id_is_codec_error() {
        let pal = Palette::from_colors(&[BLACK]).unwrap();
        let map = label_map(2, 2, |x, _| x as u8);
        assert!(matches!(encode_labels(&map, &pal), Err(Error::Codec(_))));
    }

    #[test]
    fn palette_rejects_duplicates() {
        assert!(Palette::from_colors(&[RED, RED]).is_err());
        let e = PaletteEntry { id: 1, color: RED };
        let f = PaletteEntry { id: 1, color: BLUE };
        assert!(Palette::new(vec![e, f]).is_err());
    }

    #[test]
    fn palette_serializes_as_id_rgb_lists() {
        let pal = Palette::from_colors(&[BLACK, RED]).unwrap();
        let json = serde_json::to_string(&pal).unwrap();
        assert_eq!(json, "[[0,0,0,0],[1,255,0,0]]");
        let back: Palette = serde_json::from_str(&json).unwrap();
        assert_eq!(back, pal);
        assert!(serde_json::from_str::<Palette>("[[0,1,1,1],[0,2,2,2]]").is_err());
    }

    fn semantic_context(pal: &Palette) -> (ContextSet, Image, LabelMap) {
        let maps: Vec<LabelMap> = (0..3)
            .map(|k| {
                label_map(8, 8, move |x, y| {
                    if x > k + 2 && y > 3 {
                        1 + (x % 2) as u8
                    } else {
                        0
                    }
                })
            })
            .collect();
        let pairs = maps
            .iter()
            .map(|m| (Image::zeros(8, 8), encode_labels(m, pal).unwrap()))
            .collect();
        let target_map = label_map(8, 8, |x, _| if x < 2 { 2 } else { 0 });
        let target = encode_labels(&target_map, pal).unwrap();
        (ContextSet::from_images(pairs).unwrap(), target, target_map)
    }

    #[test]
    fn recolor_preserves_label_structure() {
        let pal = Palette::from_colors(&[BLACK, RED, BLUE]).unwrap();
        let (ctx, target, target_map) = semantic_context(&pal);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (ctx2, target2, pal2) =
            random_recolor(&ctx, &target, &pal, DEFAULT_MIN_COLOR_DISTANCE, &mut rng).unwrap();
        assert_ne!(pal2, pal);
        pal2.check_separation(DEFAULT_MIN_COLOR_DISTANCE).unwrap();
        assert_eq!(
            decode_to_classes(&target2, &pal2).unwrap().labels,
            target_map
        );
        for (a, b) in ctx.outputs().zip(ctx2.outputs()) {
            assert_eq!(
                decode_to_classes(a, &pal).unwrap().labels,
                decode_to_classes(b, &pal2).unwrap().labels
            );
        }
        for (a, b) in ctx.pairs().iter().zip(ctx2.pairs()) {
            assert_eq!(a.input, b.input);
        }
    }

    #[test]
    fn recolor_with_different_rngs_differs_in_color_only() {
        let pal = Palette::from_colors(&[BLACK, RED, BLUE]).unwrap();
        let (ctx, target, _) = semantic_context(&pal);
        let (_, t1, p1) = random_recolor(
            &ctx,
            &target,
            &pal,
            DEFAULT_MIN_COLOR_DISTANCE,
            &mut ChaCha8Rng::seed_from_u64(1),
        )
        .unwrap();
        let (_, t2, p2) = random_recolor(
            &ctx,
            &target,
            &pal,
            DEFAULT_MIN_COLOR_DISTANCE,
            &mut ChaCha8Rng::seed_from_u64(2),
        )
        .unwrap();
        assert_ne!(p1, p2);
        assert_eq!(
            decode_to_classes(&t1, &p1).unwrap().labels,
            decode_to_classes(&t2, &p2).unwrap().labels
        );
    }

    #[test]
    fn recolor_without_present_classes_is_identity() {
        let pal = Palette::from_colors(&[RED, BLUE]).unwrap();
        let img = Image::filled(4, 4, [0.5, 0.5, 0.5]);
        let ctx = ContextSet::from_images(vec![(img.clone(), img.clone())]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (c2, t2, p2) = random_recolor(&ctx, &img, &pal, 0.3, &mut rng).unwrap();
        assert_eq!((c2, t2, p2), (ctx, img, pal));
    }

    #[test]
    fn unsatisfiable_separation_is_augmentation_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = draw_separated_colors(40, &[], 1.0, &mut rng).unwrap_err();
        assert!(matches!(err, Error::Augmentation(_)));
    }

    proptest::proptest! {
        #[test]
        fn encode_then_decode_recovers_labels(
            seed in 0u64..1000,
            k in 2usize..8,
            ids in proptest::collection::vec(0u8..8, 64),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let colors = draw_separated_colors(k, &[], DEFAULT_MIN_COLOR_DISTANCE, &mut rng).unwrap();
            let palette = Palette::from_colors(&colors).unwrap();
            let labels = LabelMap::from_vec(8, 8, ids.iter().map(|&i| i % k as u8).collect()).unwrap();
            let img = encode_labels(&labels, &palette).unwrap();
            proptest::prop_assert_eq!(decode_to_classes(&img, &palette).unwrap().labels, labels);
        }

        #[test]
        fn drawn_colors_keep_their_separation(seed in 0u64..1000, k in 1usize..10) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let colors = draw_separated_colors(k, &[[0, 0, 0]], DEFAULT_MIN_COLOR_DISTANCE, &mut rng).unwrap();
            proptest::prop_assert_eq!(colors.len(), k);
            for (i, a) in colors.iter().enumerate() {
                proptest::prop_assert!(color_distance(*a, [0, 0, 0]) >= DEFAULT_MIN_COLOR_DISTANCE);
                for b in &colors[i + 1..] {
                    proptest::prop_assert!(color_distance(*a, *b) >= DEFAULT_MIN_COLOR_DISTANCE);
                }
            }
        }
    }
}
