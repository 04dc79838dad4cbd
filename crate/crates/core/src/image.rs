//! Raster types shared by every stage of the pipeline.
//!
//! [`Image`] stores interleaved RGB intensities as `f32` in `[0, 1]`; the
//! 8-bit representation only exists at file and wire boundaries.
//! [`LabelMap`] stores one class id per pixel.

use std::io::Cursor;
use std::path::Path;

use crate::error::{Error, Result};

pub const CHANNELS: usize = 3;
pub const MIN_SIDE: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * CHANNELS);
        for _ in 0..width * height {
            data.extend_from_slice(&rgb);
        }
        Self {
            width,
            height,
            data,
        }
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self::filled(width, height, [0.0; 3])
    }

    /// Builds an image from interleaved RGB values, validating range and length.
    pub fn from_vec(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height * CHANNELS {
            return Err(Error::Shape(format!(
                "expected {} values for {width}x{height} RGB, got {}",
                width * height * CHANNELS,
                data.len()
            )));
        }
        if let Some(v) = data
            .iter()
            .find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0)
        {
            return Err(Error::Data(format!("image value {v} outside [0, 1]")));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    /// Replicates a single-channel intensity plane into all three channels.
    pub fn from_gray(width: usize, height: usize, gray: &[f32]) -> Self {
        assert_eq!(gray.len(), width * height);
        let mut data = Vec::with_capacity(gray.len() * CHANNELS);
        for &g in gray {
            let g = g.clamp(0.0, 1.0);
            data.extend_from_slice(&[g, g, g]);
        }
        Self {
            width,
            height,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let i = (y * self.width + x) * CHANNELS;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * CHANNELS;
        self.data[i..i + CHANNELS].copy_from_slice(&rgb);
    }

    pub fn pixels(&self) -> impl Iterator<Item = [f32; 3]> + '_ {
        self.data.chunks_exact(CHANNELS).map(|c| [c[0], c[1], c[2]])
    }

    /// Applies `f` to every value and clamps the result back into `[0, 1]`.
    pub fn map_values(&self, f: impl Fn(f32) -> f32) -> Self {
        Self {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| f(v).clamp(0.0, 1.0)).collect(),
        }
    }

    /// `255 - v` on the 8-bit grid. Float `1 - v` is not an exact
    /// involution, this is for every image read from PNG.
    pub fn inverted(&self) -> Self {
        self.map_values(|v| f32::from(255 - quantize(v)) / 255.0)
    }

    /// Rotates by 90 degrees clockwise.
    pub fn rotated90(&self) -> Self {
        let (w, h) = (self.width, self.height);
        let mut out = Image::zeros(h, w);
        for y in 0..h {
            for x in 0..w {
                out.set_pixel(h - 1 - y, x, self.pixel(x, y));
            }
        }
        out
    }

    /// Rotates by 270 degrees clockwise (90 counter-clockwise).
    pub fn rotated270(&self) -> Self {
        let (w, h) = (self.width, self.height);
        let mut out = Image::zeros(h, w);
        for y in 0..h {
            for x in 0..w {
                out.set_pixel(y, w - 1 - x, self.pixel(x, y));
            }
        }
        out
    }

    /// Nearest-integer 8-bit quantization.
    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data.iter().map(|&v| quantize(v)).collect()
    }

    pub fn from_rgb8(width: usize, height: usize, bytes: &[u8]) -> Result<Self> {
        if bytes.len() != width * height * CHANNELS {
            return Err(Error::Shape(format!(
                "expected {} bytes for {width}x{height} RGB, got {}",
                width * height * CHANNELS,
                bytes.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data: bytes.iter().map(|&b| f32::from(b) / 255.0).collect(),
        })
    }

    /// Round-trips through 8-bit, the lossy step every PNG boundary applies.
    pub fn quantized(&self) -> Self {
        self.map_values(|v| f32::from(quantize(v)) / 255.0)
    }

    pub fn encode_png(&self) -> Result<Vec<u8>> {
        let buf = image::RgbImage::from_raw(self.width as u32, self.height as u32, self.to_rgb8())
            .ok_or_else(|| Error::Shape("buffer does not match image size".into()))?;
        let mut out = Cursor::new(Vec::new());
        buf.write_to(&mut out, image::ImageFormat::Png)
            .map_err(|e| Error::Codec(format!("png encode: {e}")))?;
        Ok(out.into_inner())
    }

    pub fn decode_png(bytes: &[u8]) -> Result<Self> {
        let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)
            .map_err(|e| Error::Codec(format!("png decode: {e}")))?
            .to_rgb8();
        let (w, h) = img.dimensions();
        Self::from_rgb8(w as usize, h as usize, img.as_raw())
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let bytes = self.encode_png()?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode_png(&bytes)
    }

    /// Downscales by an integer factor using box averaging.
    pub fn downscaled_area(&self, factor: usize) -> Result<Self> {
        if factor == 0 || !self.width.is_multiple_of(factor) || !self.height.is_multiple_of(factor) {
            return Err(Error::Config(format!(
                "downscale factor {factor} does not divide {}x{}",
                self.width, self.height
            )));
        }
        let (w, h) = (self.width / factor, self.height / factor);
        let norm = 1.0 / (factor * factor) as f32;
        let mut out = Image::zeros(w, h);
        for y in 0..h {
            for x in 0..w {
                let mut acc = [0.0f32; 3];
                for dy in 0..factor {
                    for dx in 0..factor {
                        let p = self.pixel(x * factor + dx, y * factor + dy);
                        for c in 0..CHANNELS {
                            acc[c] += p[c];
                        }
                    }
                }
                out.set_pixel(x, y, acc.map(|v| (v * norm).clamp(0.0, 1.0)));
            }
        }
        Ok(out)
    }

    pub fn upscaled_nearest(&self, factor: usize) -> Self {
        let (w, h) = (self.width * factor, self.height * factor);
        let mut out = Image::zeros(w, h);
        for y in 0..h {
            for x in 0..w {
                out.set_pixel(x, y, self.pixel(x / factor, y / factor));
            }
        }
        out
    }
}

pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Per-pixel class ids; id 0 is background.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    width: usize,
    height: usize,
    ids: Vec<u8>,
}

impl LabelMap {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            ids: vec![0; width * height],
        }
    }

    pub fn from_vec(width: usize, height: usize, ids: Vec<u8>) -> Result<Self> {
        if ids.len() != width * height {
            return Err(Error::Shape(format!(
                "expected {} ids for {width}x{height}, got {}",
                width * height,
                ids.len()
            )));
        }
        Ok(Self { width, height, ids })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn ids(&self) -> &[u8] {
        &self.ids
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.ids[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, id: u8) {
        self.ids[y * self.width + x] = id;
    }

    /// Sorted distinct ids present in the map.
    pub fn unique_ids(&self) -> Vec<u8> {
        let mut seen = [false; 256];
        for &id in &self.ids {
            seen[id as usize] = true;
        }
        (0..=255u8).filter(|&i| seen[i as usize]).collect()
    }

    pub fn has_foreground(&self) -> bool {
        self.ids.iter().any(|&id| id != 0)
    }

    pub fn mask_of(&self, id: u8) -> Vec<bool> {
        self.ids.iter().map(|&v| v == id).collect()
    }

    pub fn foreground_mask(&self) -> Vec<bool> {
        self.ids.iter().map(|&v| v != 0).collect()
    }

    pub fn rotated90(&self) -> Self {
        let (w, h) = (self.width, self.height);
        let mut out = LabelMap::zeros(h, w);
        for y in 0..h {
            for x in 0..w {
                out.set(h - 1 - y, x, self.get(x, y));
            }
        }
        out
    }

    /// Writes a single-channel indexed PNG; `colors` supplies the PLTE chunk
    /// so the file is viewable, while the stored samples are the raw ids.
    pub fn encode_png(&self, colors: &[[u8; 3]]) -> Result<Vec<u8>> {
        let max_id = self.ids.iter().copied().max().unwrap_or(0) as usize;
        let mut plte: Vec<u8> = Vec::with_capacity(3 * (max_id + 1));
        for id in 0..=max_id {
            let c = colors.get(id).copied().unwrap_or([id as u8; 3]);
            plte.extend_from_slice(&c);
        }
        let mut out = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut out, self.width as u32, self.height as u32);
            enc.set_color(png::ColorType::Indexed);
            enc.set_depth(png::BitDepth::Eight);
            enc.set_palette(plte);
            let mut writer = enc
                .write_header()
                .map_err(|e| Error::Codec(format!("png encode: {e}")))?;
            writer
                .write_image_data(&self.ids)
                .map_err(|e| Error::Codec(format!("png encode: {e}")))?;
        }
        Ok(out)
    }

    /// Reads raw sample values from an 8-bit indexed or grayscale PNG.
    pub fn decode_png(bytes: &[u8]) -> Result<Self> {
        let mut decoder = png::Decoder::new(Cursor::new(bytes));
        decoder.set_transformations(png::Transformations::IDENTITY);
        let mut reader = decoder
            .read_info()
            .map_err(|e| Error::Codec(format!("png decode: {e}")))?;
        let info = reader.info();
        let (w, h) = (info.width as usize, info.height as usize);
        match (info.color_type, info.bit_depth) {
            (png::ColorType::Indexed | png::ColorType::Grayscale, png::BitDepth::Eight) => {}
            (ct, bd) => {
                return Err(Error::Codec(format!(
                    "label map must be 8-bit single-channel, got {ct:?}/{bd:?}"
                )))
            }
        }
        let size = reader
            .output_buffer_size()
            .ok_or_else(|| Error::Codec("png decode: image too large".into()))?;
        let mut buf = vec![0u8; size];
        let frame = reader
            .next_frame(&mut buf)
            .map_err(|e| Error::Codec(format!("png decode: {e}")))?;
        buf.truncate(frame.buffer_size());
        Self::from_vec(w, h, buf)
    }

    pub fn save_png(&self, path: &Path, colors: &[[u8; 3]]) -> Result<()> {
        let bytes = self.encode_png(colors)?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode_png(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(w: usize, h: usize) -> Image {
        let gray: Vec<f32> = (0..w * h).map(|i| i as f32 / (w * h) as f32).collect();
        Image::from_gray(w, h, &gray)
    }

    #[test]
    fn rotations_compose_to_identity() {
        let img = ramp(5, 3);
        assert_eq!(img.rotated90().rotated270(), img);
        let four = img.rotated90().rotated90().rotated90().rotated90();
        assert_eq!(four, img);
        assert_eq!(img.rotated90().dims(), (3, 5));
    }

    #[test]
    fn rotate90_moves_top_left_to_top_right() {
        let mut img = Image::zeros(4, 4);
        img.set_pixel(0, 0, [1.0, 1.0, 1.0]);
        let r = img.rotated90();
        assert_eq!(r.pixel(3, 0), [1.0; 3]);
    }

    #[test]
    fn png_round_trip_is_exact_after_quantization() {
        let img = ramp(16, 16).quantized();
        let back = Image::decode_png(&img.encode_png().unwrap()).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn label_png_round_trip() {
        let ids: Vec<u8> = (0..256).map(|i| (i % 4) as u8).collect();
        let map = LabelMap::from_vec(16, 16, ids).unwrap();
        let bytes = map.encode_png(&[[0, 0, 0], [255, 0, 0]]).unwrap();
        assert_eq!(LabelMap::decode_png(&bytes).unwrap(), map);
    }

    #[test]
    fn from_vec_rejects_out_of_range() {
        assert!(Image::from_vec(1, 1, vec![0.0, 1.5, 0.0]).is_err());
        assert!(Image::from_vec(1, 1, vec![0.0, 0.0]).is_err());
    }

    #[test]
    fn area_downscale_then_nearest_upscale() {
        let img = Image::filled(8, 8, [0.25, 0.5, 0.75]);
        let down = img.downscaled_area(4).unwrap();
        assert_eq!(down.dims(), (2, 2));
        assert_eq!(down.upscaled_nearest(4), img);
        assert!(img.downscaled_area(3).is_err());
    }

    fn any_image() -> impl proptest::strategy::Strategy<Value = Image> {
        use proptest::prelude::*;
        (16usize..24, 16usize..24).prop_flat_map(|(w, h)| {
            proptest::collection::vec(0.0f32..=1.0, w * h * CHANNELS)
                .prop_map(move |d| Image::from_vec(w, h, d).unwrap())
        })
    }

    proptest::proptest! {
        #[test]
        fn inversion_is_an_involution_on_the_8bit_grid(img in any_image()) {
            proptest::prop_assert_eq!(img.inverted().inverted(), img.quantized());
        }

        #[test]
        fn four_quarter_turns_are_identity(img in any_image()) {
            proptest::prop_assert_eq!(img.rotated90().rotated90().rotated90().rotated90(), img.clone());
            proptest::prop_assert_eq!(img.rotated90().rotated270(), img);
        }

        #[test]
        fn png_round_trip_is_quantization(img in any_image()) {
            let back = Image::decode_png(&img.encode_png().unwrap()).unwrap();
            proptest::prop_assert_eq!(back, img.quantized());
        }
    }
}
