//! Grayscale images and slice pre-processing: 8-bit rescaling, bilinear
//! resize, horizontal flip, and dark-pixel based large-lung slice selection.

use std::path::Path;

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum ImagingError {
    #[error("invalid image: {0}")]
    Invalid(String),
    #[error("input error: {0}")]
    Input(String),
    #[error("pgm error on {path}: {message}")]
    Pgm { path: String, message: String },
}

/// Row-major grid of intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    height: usize,
    width: usize,
    pixels: Vec<f32>,
}

impl GrayImage {
    /// Values are clamped into `[0, 1]`; NaN is rejected.
    pub fn new(height: usize, width: usize, pixels: Vec<f32>) -> Result<Self, ImagingError> {
        if height == 0 || width == 0 {
            return Err(ImagingError::Invalid(format!("{height}x{width} image")));
        }
        if pixels.len() != height * width {
            return Err(ImagingError::Invalid(format!(
                "{height}x{width} image needs {} pixels, got {}",
                height * width,
                pixels.len()
            )));
        }
        if pixels.iter().any(|p| p.is_nan()) {
            return Err(ImagingError::Invalid("NaN pixel".into()));
        }
        let pixels = pixels.into_iter().map(|p| p.clamp(0.0, 1.0)).collect();
        Ok(Self {
            height,
            width,
            pixels,
        })
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        Self::new(height, width, vec![value; height * width]).expect("nonzero dims")
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.pixels[y * self.width + x]
    }

    /// Bitwise pixel equality.
    pub fn bit_eq(&self, other: &GrayImage) -> bool {
        self.height == other.height
            && self.width == other.width
            && self
                .pixels
                .iter()
                .zip(&other.pixels)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    /// `round(pixel * 255)` per pixel.
    pub fn to_u8(&self) -> Vec<u8> {
        self.pixels
            .iter()
            .map(|&p| (p * 255.0).round() as u8)
            .collect()
    }
}

/// `pixel = byte / 255`.
pub fn rescale_u8(height: usize, width: usize, raw: &[u8]) -> Result<GrayImage, ImagingError> {
    if raw.len() != height * width {
        return Err(ImagingError::Invalid(format!(
            "{} bytes for a {height}x{width} image",
            raw.len()
        )));
    }
    GrayImage::new(
        height,
        width,
        raw.iter().map(|&b| f32::from(b) / 255.0).collect(),
    )
}

/// Bilinear resize to `side x side`.
///
/// Output pixel `(y, x)` samples the source at
/// `((y + 0.5) * H / side - 0.5, (x + 0.5) * W / side - 0.5)`, with the
/// coordinate clamped to the valid pixel range; the four neighbours are
/// blended by the fractional offsets.
pub fn resize(img: &GrayImage, side: usize) -> GrayImage {
    assert!(side >= 1, "resize side must be >= 1");
    if img.height == side && img.width == side {
        return img.clone();
    }
    let map = |o: usize, src_len: usize| -> (usize, usize, f32) {
        let s = ((o as f64 + 0.5) * src_len as f64 / side as f64 - 0.5)
            .clamp(0.0, (src_len - 1) as f64);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(src_len - 1);
        (i0, i1, (s - i0 as f64) as f32)
    };
    let cols: Vec<_> = (0..side).map(|x| map(x, img.width)).collect();
    let mut out = Vec::with_capacity(side * side);
    for y in 0..side {
        let (y0, y1, ty) = map(y, img.height);
        for &(x0, x1, tx) in &cols {
            let top = img.get(y0, x0) * (1.0 - tx) + img.get(y0, x1) * tx;
            let bottom = img.get(y1, x0) * (1.0 - tx) + img.get(y1, x1) * tx;
            out.push((top * (1.0 - ty) + bottom * ty).clamp(0.0, 1.0));
        }
    }
    GrayImage {
        height: side,
        width: side,
        pixels: out,
    }
}

/// Column `j` moves to column `width - 1 - j`.
pub fn hflip(img: &GrayImage) -> GrayImage {
    let mut pixels = Vec::with_capacity(img.pixels.len());
    for row in img.pixels.chunks(img.width) {
        pixels.extend(row.iter().rev());
    }
    GrayImage {
        height: img.height,
        width: img.width,
        pixels,
    }
}

/// Centered inner area and darkness cutoff used to find lung-rich slices.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SelectionParams {
    /// Side fraction of the centered rectangle, per dimension, in `(0, 1]`.
    pub inner_fraction: f32,
    /// Pixels strictly below this intensity count as dark.
    pub dark_threshold: f32,
}

impl Default for SelectionParams {
    fn default() -> Self {
        Self {
            inner_fraction: 0.6,
            dark_threshold: 0.3,
        }
    }
}

impl SelectionParams {
    pub fn validate(&self) -> Result<(), ImagingError> {
        if !(self.inner_fraction > 0.0 && self.inner_fraction <= 1.0) {
            return Err(ImagingError::Input(format!(
                "inner_fraction {} outside (0, 1]",
                self.inner_fraction
            )));
        }
        if !(0.0..=1.0).contains(&self.dark_threshold) {
            return Err(ImagingError::Input(format!(
                "dark_threshold {} outside [0, 1]",
                self.dark_threshold
            )));
        }
        Ok(())
    }
}

/// Start and length of the centered span covering `round(fraction * n)` pixels.
/// When `n - len` is odd the extra pixel of margin goes after the span.
fn centered_span(n: usize, fraction: f32) -> (usize, usize) {
    let len = ((fraction as f64 * n as f64).round() as usize).min(n);
    ((n - len) / 2, len)
}

/// Number of pixels strictly darker than `p.dark_threshold` inside the
/// centered `round(f*H) x round(f*W)` rectangle.
pub fn dark_pixel_count(img: &GrayImage, p: &SelectionParams) -> usize {
    let (y0, h) = centered_span(img.height, p.inner_fraction);
    let (x0, w) = centered_span(img.width, p.inner_fraction);
    (y0..y0 + h)
        .map(|y| {
            img.pixels[y * img.width + x0..y * img.width + x0 + w]
                .iter()
                .filter(|&&v| v < p.dark_threshold)
                .count()
        })
        .sum()
}

/// Indices of slices whose dark-pixel count is at least the patient's mean
/// count, in original order. Never empty for nonempty input.
pub fn select_large_lung_slices(
    slices: &[GrayImage],
    p: &SelectionParams,
) -> Result<Vec<usize>, ImagingError> {
    if slices.is_empty() {
        return Err(ImagingError::Input("patient has no slices".into()));
    }
    let counts: Vec<usize> = slices.iter().map(|s| dark_pixel_count(s, p)).collect();
    Ok(keep_at_least_mean(&counts))
}

/// `count >= mean` evaluated exactly as `count * n >= sum`.
pub fn keep_at_least_mean(counts: &[usize]) -> Vec<usize> {
    let n = counts.len() as u128;
    let sum: u128 = counts.iter().map(|&c| c as u128).sum();
    counts
        .iter()
        .enumerate()
        .filter(|(_, &c)| c as u128 * n >= sum)
        .map(|(i, _)| i)
        .collect()
}

/// Read an 8-bit binary PGM (P5) file.
pub fn read_pgm(path: &Path) -> Result<GrayImage, ImagingError> {
    let err = |message: String| ImagingError::Pgm {
        path: path.display().to_string(),
        message,
    };
    let bytes = std::fs::read(path).map_err(|e| err(e.to_string()))?;
    if !bytes.starts_with(b"P5") {
        return Err(err("not a binary (P5) PGM".into()));
    }
    let decoded = image::load_from_memory_with_format(&bytes, image::ImageFormat::Pnm)
        .map_err(|e| err(e.to_string()))?;
    let gray = match decoded {
        image::DynamicImage::ImageLuma8(g) => g,
        other => return Err(err(format!("unsupported pixel format {:?}", other.color()))),
    };
    let (w, h) = gray.dimensions();
    rescale_u8(h as usize, w as usize, gray.as_raw()).map_err(|e| err(e.to_string()))
}

/// Write an 8-bit binary PGM (P5) file.
pub fn write_pgm(img: &GrayImage, path: &Path) -> Result<(), ImagingError> {
    use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
    use image::ImageEncoder;
    let err = |message: String| ImagingError::Pgm {
        path: path.display().to_string(),
        message,
    };
    let mut buf = Vec::new();
    PnmEncoder::new(&mut buf)
        .with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary))
        .write_image(
            &img.to_u8(),
            img.width as u32,
            img.height as u32,
            image::ExtendedColorType::L8,
        )
        .map_err(|e| err(e.to_string()))?;
    std::fs::write(path, buf).map_err(|e| err(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn img(h: usize, w: usize, px: &[f32]) -> GrayImage {
        GrayImage::new(h, w, px.to_vec()).unwrap()
    }

    #[test]
    fn rescale_endpoints_and_midpoint() {
        let g = rescale_u8(1, 3, &[0, 255, 128]).unwrap();
        assert_eq!(g.pixels()[0], 0.0);
        assert_eq!(g.pixels()[1], 1.0);
        assert!((g.pixels()[2] - 0.50196).abs() < 1e-5);
    }

    #[test]
    fn u8_round_trip_is_identity_on_all_values() {
        let raw: Vec<u8> = (0..=255).collect();
        let g = rescale_u8(16, 16, &raw).unwrap();
        assert_eq!(g.to_u8(), raw);
    }

    #[test]
    fn rescale_rejects_wrong_length() {
        assert!(rescale_u8(2, 2, &[0, 1, 2]).is_err());
    }

    #[test]
    fn resize_constant_image() {
        let g = GrayImage::filled(5, 7, 0.37);
        for side in [1, 3, 8, 13] {
            assert!(resize(&g, side)
                .pixels()
                .iter()
                .all(|&p| (p - 0.37).abs() < 1e-6));
        }
    }

    #[test]
    fn resize_same_side_is_identity() {
        let g = img(3, 3, &[0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9]);
        let r = resize(&g, 3);
        for (a, b) in r.pixels().iter().zip(g.pixels()) {
            assert!((a - b).abs() <= 1e-6);
        }
    }

    #[test]
    fn resize_checkerboard_keeps_corners() {
        // Corner outputs sample at source coordinate -0.25, clamped to 0.
        let g = img(2, 2, &[0.0, 1.0, 1.0, 0.0]);
        let r = resize(&g, 4);
        assert_eq!(r.get(0, 0), 0.0);
        assert_eq!(r.get(0, 3), 1.0);
        assert_eq!(r.get(3, 0), 1.0);
        assert_eq!(r.get(3, 3), 0.0);
        // (0, 1) samples x = 0.25 on the top row: 0.75 * 0 + 0.25 * 1
        assert!((r.get(0, 1) - 0.25).abs() < 1e-6);
        // (1, 1) samples (0.25, 0.25): 0.5625*0 + 0.1875*1 + 0.1875*1 + 0.0625*0
        assert!((r.get(1, 1) - 0.375).abs() < 1e-6);
    }

    #[test]
    fn hflip_definition_and_symmetry() {
        let g = img(1, 3, &[0.1, 0.2, 0.3]);
        assert_eq!(hflip(&g).pixels(), &[0.3, 0.2, 0.1]);
        let sym = img(2, 3, &[0.1, 0.5, 0.1, 0.9, 0.2, 0.9]);
        assert!(hflip(&sym).bit_eq(&sym));
    }

    #[test]
    fn dark_counts_by_hand() {
        let white = GrayImage::filled(10, 10, 1.0);
        let p = SelectionParams {
            inner_fraction: 0.6,
            dark_threshold: 0.3,
        };
        assert_eq!(dark_pixel_count(&white, &p), 0);
        let black = GrayImage::filled(10, 10, 0.0);
        assert_eq!(dark_pixel_count(&black, &p), 36);
        let mut px = vec![1.0; 100];
        for (y, x) in [(4, 4), (4, 5), (5, 4), (5, 5)] {
            px[y * 10 + x] = 0.0;
        }
        assert_eq!(dark_pixel_count(&img(10, 10, &px), &p), 4);
    }

    #[test]
    fn dark_threshold_is_strict() {
        let g = GrayImage::filled(4, 4, 0.3);
        let p = SelectionParams {
            inner_fraction: 1.0,
            dark_threshold: 0.3,
        };
        assert_eq!(dark_pixel_count(&g, &p), 0);
    }

    #[test]
    fn selection_keeps_at_least_mean() {
        assert_eq!(keep_at_least_mean(&[100, 100, 0, 0]), vec![0, 1]);
        assert_eq!(keep_at_least_mean(&[7, 7, 7]), vec![0, 1, 2]);
        assert_eq!(keep_at_least_mean(&[1, 2]), vec![1]);
    }

    #[test]
    fn selection_rejects_empty_patient() {
        assert!(matches!(
            select_large_lung_slices(&[], &SelectionParams::default()),
            Err(ImagingError::Input(_))
        ));
    }

    #[test]
    fn pgm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.pgm");
        let raw: Vec<u8> = (0..12).map(|i| (i * 20) as u8).collect();
        let g = rescale_u8(3, 4, &raw).unwrap();
        write_pgm(&g, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert!(bytes.starts_with(b"P5"));
        let back = read_pgm(&path).unwrap();
        assert!(back.bit_eq(&g));
    }

    #[test]
    fn read_pgm_rejects_other_formats() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.pgm");
        std::fs::write(&path, b"P2\n1 1\n255\n0\n").unwrap();
        assert!(read_pgm(&path).is_err());
    }

    fn arb_image() -> impl Strategy<Value = GrayImage> {
        (1usize..12, 1usize..12).prop_flat_map(|(h, w)| {
            proptest::collection::vec(0.0f32..=1.0, h * w)
                .prop_map(move |px| GrayImage::new(h, w, px).unwrap())
        })
    }

    proptest! {
        #[test]
        fn hflip_is_involution(g in arb_image()) {
            prop_assert!(hflip(&hflip(&g)).bit_eq(&g));
        }

        #[test]
        fn ops_preserve_unit_range(g in arb_image(), side in 1usize..20) {
            let r = resize(&g, side);
            prop_assert_eq!(r.pixels().len(), side * side);
            prop_assert!(r.pixels().iter().all(|&p| (0.0..=1.0).contains(&p)));
        }

        #[test]
        fn dark_count_is_flip_invariant_for_even_spans(
            half_h in 1usize..6, half_w in 1usize..6, seed in 0u64..1000
        ) {
            // Even width and even inner span keep the rectangle mirror-symmetric.
            use rand::{Rng, SeedableRng};
            let (h, w) = (2 * half_h, 2 * half_w + 4);
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let px = (0..h * w).map(|_| rng.random::<f32>()).collect();
            let g = GrayImage::new(h, w, px).unwrap();
            let frac = 2.0 * half_w as f32 / w as f32;
            let p = SelectionParams { inner_fraction: frac, dark_threshold: 0.4 };
            prop_assert_eq!(dark_pixel_count(&hflip(&g), &p), dark_pixel_count(&g, &p));
        }

        #[test]
        fn selection_nonempty_and_permutation_consistent(
            counts in proptest::collection::vec(0usize..500, 1..20), rot in 0usize..20
        ) {
            let kept = keep_at_least_mean(&counts);
            prop_assert!(!kept.is_empty());
            let r = rot % counts.len();
            let mut rotated = counts.clone();
            rotated.rotate_left(r);
            let kept_rot = keep_at_least_mean(&rotated);
            for (i, _) in counts.iter().enumerate() {
                let new_pos = (i + counts.len() - r) % counts.len();
                prop_assert_eq!(kept.contains(&i), kept_rot.contains(&new_pos));
            }
        }
    }
}
