//! Procedural CT-like patients for desk-scale experiments.
//!
//! Every slice is a bright body field. Lung-bearing slices carry two dark
//! lung ellipses plus a mid-gray heart ellipse offset to one side (so that
//! horizontal flips are detectable). COVID slices add small ground-glass
//! blobs near the lung periphery, CAP slices one larger bright consolidation.
//! A fixed number of lungless slices per patient sit at the ends of the
//! stack. Domain shift (blur, brightness, streak artifact, noise) is applied
//! last and the result is quantized to 8 bits, so in-memory slices equal
//! their PGM round trip.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::imaging::GrayImage;
use crate::pipeline::{Patient, PatientClass, SliceLabel};

// Geometry in units of the image side; intensities on [0, 1].
const BODY_INTENSITY: f32 = 0.72;
const LUNG_INTENSITY: f32 = 0.12;
const LUNG_CENTERS: [(f32, f32); 2] = [(0.32, 0.50), (0.68, 0.50)];
const LUNG_SEMI_AXES: (f32, f32) = (0.13, 0.25);
const HEART_CENTER: (f32, f32) = (0.60, 0.64);
const HEART_SEMI_AXES: (f32, f32) = (0.10, 0.08);
const HEART_INTENSITY: f32 = 0.55;
const GGO_INTENSITY: f32 = 0.42;
const GGO_SIGMA: (f32, f32) = (0.040, 0.055);
const GGO_COUNT: (usize, usize) = (2, 5);
const GGO_RADIAL: (f32, f32) = (0.50, 0.80);
const CONSOLIDATION_INTENSITY: f32 = 0.70;
const CONSOLIDATION_SIGMA: (f32, f32) = (0.070, 0.090);
const CONSOLIDATION_RADIAL: (f32, f32) = (0.0, 0.45);
/// Patient-level and per-slice scale jitter of the lung/heart geometry.
const PATIENT_JITTER: f32 = 0.04;
const SLICE_JITTER: f32 = 0.02;
const INFECTED_SLICE_PROB: f64 = 0.75;
const TEXTURE_SIGMA: f32 = 0.02;
const STREAK_INTENSITY: f32 = 0.95;
const MARKER_INTENSITY: f32 = 0.98;
const MARKER_BOX: (f32, f32, f32, f32) = (0.04, 0.14, 0.42, 0.58);

/// Acquisition-shift knobs applied after anatomy is drawn.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ShiftParams {
    /// Gaussian pixel noise (low-dose analog).
    pub noise_sigma: f32,
    /// Box-blur radius in pixels (slice-thickness analog).
    pub blur_radius: usize,
    pub brightness_delta: f32,
    /// Per-patient severity: noise sigma and brightness delta are scaled by
    /// a factor drawn uniformly from `[1 - severity_spread, 1 + severity_spread]`.
    pub severity_spread: f32,
    /// Bright streak overlay (unrelated-disease analog).
    pub artifact: bool,
}

impl ShiftParams {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(format!("noise_sigma {} must be >= 0", self.noise_sigma));
        }
        if !(0.0..=1.0).contains(&self.severity_spread) {
            return Err(format!(
                "severity_spread {} outside [0, 1]",
                self.severity_spread
            ));
        }
        if !self.brightness_delta.is_finite() {
            return Err("brightness_delta must be finite".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SliceRange {
    pub min: usize,
    pub max: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenConfig {
    pub image_side: usize,
    pub patients_per_class: BTreeMap<PatientClass, usize>,
    /// Total slices per patient, lungless ones included.
    pub slices_per_patient: SliceRange,
    pub lungless_slices_per_patient: usize,
    pub seed: u64,
    pub shift: ShiftParams,
    pub classes_present: Vec<PatientClass>,
    /// Paint a bright marker near the left edge of every slice.
    #[serde(default)]
    pub lateral_marker: bool,
}

impl GenConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.image_side < 8 {
            return Err(format!("image_side {} must be >= 8", self.image_side));
        }
        if self.classes_present.is_empty() {
            return Err("at least one class must be present".into());
        }
        if self.slices_per_patient.min > self.slices_per_patient.max {
            return Err("slices_per_patient.min > max".into());
        }
        if self.slices_per_patient.min <= self.lungless_slices_per_patient {
            return Err("every patient needs at least one lung-bearing slice".into());
        }
        for (class, &n) in &self.patients_per_class {
            if n > 0 && !self.classes_present.contains(class) {
                return Err(format!(
                    "{class:?} has patients but is not in classes_present"
                ));
            }
        }
        self.shift.validate()
    }
}

/// SplitMix64 finalizer over `base ^ tag`, for independent sub-seeds.
pub fn derive_seed(base: u64, tag: u64) -> u64 {
    let mut z = base ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

struct Canvas {
    side: usize,
    px: Vec<f32>,
}

impl Canvas {
    fn new(side: usize, value: f32) -> Self {
        Self {
            side,
            px: vec![value; side * side],
        }
    }

    /// Normalized coordinate of pixel center `i`.
    fn coord(&self, i: usize) -> f32 {
        (i as f32 + 0.5) / self.side as f32
    }

    fn fill_ellipse(&mut self, center: (f32, f32), axes: (f32, f32), value: f32) {
        for y in 0..self.side {
            for x in 0..self.side {
                let dx = (self.coord(x) - center.0) / axes.0;
                let dy = (self.coord(y) - center.1) / axes.1;
                if dx * dx + dy * dy <= 1.0 {
                    self.px[y * self.side + x] = value;
                }
            }
        }
    }

    /// Gaussian blend toward `value`, restricted to `mask`.
    fn blob(&mut self, center: (f32, f32), sigma: f32, value: f32, mask: &[bool]) {
        for y in 0..self.side {
            for x in 0..self.side {
                let i = y * self.side + x;
                if !mask[i] {
                    continue;
                }
                let dx = self.coord(x) - center.0;
                let dy = self.coord(y) - center.1;
                let w = (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
                self.px[i] += (value - self.px[i]) * w;
            }
        }
    }

    fn add_noise(&mut self, sigma: f32, rng: &mut ChaCha8Rng) {
        if sigma <= 0.0 {
            return;
        }
        let normal = Normal::new(0.0f32, sigma).expect("finite sigma");
        for p in &mut self.px {
            *p += normal.sample(rng);
        }
    }

    fn box_blur(&mut self, radius: usize) {
        if radius == 0 {
            return;
        }
        let n = self.side as isize;
        let r = radius as isize;
        let src = self.px.clone();
        for y in 0..n {
            for x in 0..n {
                let mut sum = 0.0;
                let mut count = 0.0;
                for yy in (y - r).max(0)..=(y + r).min(n - 1) {
                    for xx in (x - r).max(0)..=(x + r).min(n - 1) {
                        sum += src[(yy * n + xx) as usize];
                        count += 1.0;
                    }
                }
                self.px[(y * n + x) as usize] = sum / count;
            }
        }
    }

    /// One-pixel-wide bright line through `point` at `angle`.
    fn streak(&mut self, point: (f32, f32), angle: f32) {
        let (s, c) = angle.sin_cos();
        let half_width = 0.6 / self.side as f32;
        for y in 0..self.side {
            for x in 0..self.side {
                let dx = self.coord(x) - point.0;
                let dy = self.coord(y) - point.1;
                if (dx * s - dy * c).abs() <= half_width {
                    self.px[y * self.side + x] = STREAK_INTENSITY;
                }
            }
        }
    }

    fn fill_box(&mut self, bx: (f32, f32, f32, f32), value: f32) {
        for y in 0..self.side {
            for x in 0..self.side {
                let (u, v) = (self.coord(x), self.coord(y));
                if u >= bx.0 && u <= bx.1 && v >= bx.2 && v <= bx.3 {
                    self.px[y * self.side + x] = value;
                }
            }
        }
    }

    fn finish(self) -> GrayImage {
        let px = self
            .px
            .into_iter()
            .map(|p| (p.clamp(0.0, 1.0) * 255.0).round() / 255.0)
            .collect();
        GrayImage::new(self.side, self.side, px).expect("square canvas")
    }
}

fn uniform(rng: &mut ChaCha8Rng, range: (f32, f32)) -> f32 {
    if range.0 == range.1 {
        range.0
    } else {
        rng.random_range(range.0..range.1)
    }
}

fn lung_mask(side: usize, centers: &[(f32, f32); 2], axes: (f32, f32)) -> [Vec<bool>; 2] {
    let coord = |i: usize| (i as f32 + 0.5) / side as f32;
    let one = |c: (f32, f32)| -> Vec<bool> {
        (0..side * side)
            .map(|i| {
                let dx = (coord(i % side) - c.0) / axes.0;
                let dy = (coord(i / side) - c.1) / axes.1;
                dx * dx + dy * dy <= 1.0
            })
            .collect()
    };
    [one(centers[0]), one(centers[1])]
}

/// Point at `radial` fraction of the ellipse radius in direction `angle`.
fn ellipse_point(center: (f32, f32), axes: (f32, f32), radial: f32, angle: f32) -> (f32, f32) {
    (
        center.0 + radial * axes.0 * angle.cos(),
        center.1 + radial * axes.1 * angle.sin(),
    )
}

fn apply_shift(canvas: &mut Canvas, shift: &ShiftParams, rng: &mut ChaCha8Rng) {
    canvas.box_blur(shift.blur_radius);
    if shift.brightness_delta != 0.0 {
        for p in &mut canvas.px {
            *p += shift.brightness_delta;
        }
    }
    if shift.artifact {
        let point = (rng.random_range(0.3f32..0.7), rng.random_range(0.3f32..0.7));
        let angle = rng.random_range(0.0f32..std::f32::consts::PI);
        canvas.streak(point, angle);
    }
    canvas.add_noise(shift.noise_sigma, rng);
}

/// Generate one patient of `class`. Deterministic in the state of `rng`.
pub fn gen_patient(
    class: PatientClass,
    id: &str,
    cfg: &GenConfig,
    rng: &mut ChaCha8Rng,
) -> Patient {
    let side = cfg.image_side;
    let n_slices = rng.random_range(cfg.slices_per_patient.min..=cfg.slices_per_patient.max);
    let lungless = cfg.lungless_slices_per_patient;
    let head_lungless = lungless.div_ceil(2);
    let patient_scale = 1.0 + uniform(rng, (-PATIENT_JITTER, PATIENT_JITTER));
    let cap_lung = rng.random_range(0..2usize);
    let mut shift = cfg.shift;
    if shift.severity_spread > 0.0 {
        let spread = shift.severity_spread;
        let f = uniform(rng, (1.0 - spread, 1.0 + spread));
        shift.noise_sigma *= f;
        shift.brightness_delta *= f;
    }

    let n_lung = n_slices - lungless;
    let mut infected = vec![false; n_lung];
    if class != PatientClass::Healthy {
        for f in infected.iter_mut() {
            *f = rng.random_bool(INFECTED_SLICE_PROB);
        }
        if !infected.iter().any(|&f| f) {
            let k = rng.random_range(0..n_lung);
            infected[k] = true;
        }
    }

    let mut slices = Vec::with_capacity(n_slices);
    let mut slice_labels = Vec::with_capacity(n_slices);
    for s in 0..n_slices {
        let mut canvas = Canvas::new(side, BODY_INTENSITY);
        let lung_index = s.checked_sub(head_lungless).filter(|&k| k < n_lung);
        let mut positive = false;
        if let Some(k) = lung_index {
            let scale = patient_scale * (1.0 + uniform(rng, (-SLICE_JITTER, SLICE_JITTER)));
            let axes = (LUNG_SEMI_AXES.0 * scale, LUNG_SEMI_AXES.1 * scale);
            for &c in &LUNG_CENTERS {
                canvas.fill_ellipse(c, axes, LUNG_INTENSITY);
            }
            let masks = lung_mask(side, &LUNG_CENTERS, axes);
            canvas.fill_ellipse(
                HEART_CENTER,
                (HEART_SEMI_AXES.0 * scale, HEART_SEMI_AXES.1 * scale),
                HEART_INTENSITY,
            );
            if infected[k] {
                positive = true;
                match class {
                    PatientClass::Covid => {
                        let count = rng.random_range(GGO_COUNT.0..=GGO_COUNT.1);
                        for _ in 0..count {
                            let lung = rng.random_range(0..2usize);
                            let angle = rng.random_range(0.0f32..std::f32::consts::TAU);
                            let radial = uniform(rng, GGO_RADIAL);
                            let sigma = uniform(rng, GGO_SIGMA);
                            let at = ellipse_point(LUNG_CENTERS[lung], axes, radial, angle);
                            canvas.blob(at, sigma, GGO_INTENSITY, &masks[lung]);
                        }
                    }
                    PatientClass::Cap => {
                        let angle = rng.random_range(0.0f32..std::f32::consts::TAU);
                        let radial = uniform(rng, CONSOLIDATION_RADIAL);
                        let sigma = uniform(rng, CONSOLIDATION_SIGMA);
                        let at = ellipse_point(LUNG_CENTERS[cap_lung], axes, radial, angle);
                        canvas.blob(at, sigma, CONSOLIDATION_INTENSITY, &masks[cap_lung]);
                    }
                    PatientClass::Healthy => unreachable!("healthy slices are never infected"),
                }
            }
        }
        if cfg.lateral_marker {
            canvas.fill_box(MARKER_BOX, MARKER_INTENSITY);
        }
        canvas.add_noise(TEXTURE_SIGMA, rng);
        apply_shift(&mut canvas, &shift, rng);
        slices.push(canvas.finish());
        slice_labels.push(if positive {
            SliceLabel::InfectionPositive
        } else {
            SliceLabel::InfectionNegative
        });
    }
    Patient {
        id: id.to_string(),
        slices,
        label: Some(class),
        slice_labels: (class != PatientClass::Healthy).then_some(slice_labels),
    }
}

/// Generate every patient requested by `cfg`, in a seeded arrival order.
/// Patient `i` draws from its own generator derived from `cfg.seed` and `i`.
pub fn gen_set(cfg: &GenConfig, id_prefix: &str) -> Result<Vec<Patient>, String> {
    cfg.validate()?;
    let mut classes = Vec::new();
    for (&class, &n) in &cfg.patients_per_class {
        classes.extend(std::iter::repeat_n(class, n));
    }
    let mut order_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0xA11));
    classes.shuffle(&mut order_rng);
    Ok(classes
        .into_iter()
        .enumerate()
        .map(|(i, class)| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 1 + i as u64));
            gen_patient(class, &format!("{id_prefix}-{i:03}"), cfg, &mut rng)
        })
        .collect())
}

/// Composition of the five synthetic datasets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SuiteConfig {
    pub image_side: usize,
    pub slices_per_patient: SliceRange,
    pub lungless_slices_per_patient: usize,
    pub train_counts: BTreeMap<PatientClass, usize>,
    pub val_counts: BTreeMap<PatientClass, usize>,
    pub test1_counts: BTreeMap<PatientClass, usize>,
    pub test2_counts: BTreeMap<PatientClass, usize>,
    pub test3_counts: BTreeMap<PatientClass, usize>,
    pub test2_shift: ShiftParams,
    pub test3_shift: ShiftParams,
}

fn counts(h: usize, c: usize, p: usize) -> BTreeMap<PatientClass, usize> {
    BTreeMap::from([
        (PatientClass::Healthy, h),
        (PatientClass::Covid, c),
        (PatientClass::Cap, p),
    ])
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            image_side: 32,
            slices_per_patient: SliceRange { min: 6, max: 8 },
            lungless_slices_per_patient: 2,
            train_counts: counts(15, 34, 12),
            val_counts: counts(5, 11, 4),
            test1_counts: counts(10, 12, 8),
            test2_counts: counts(15, 15, 0),
            test3_counts: counts(10, 12, 8),
            test2_shift: ShiftParams {
                noise_sigma: 0.10,
                ..ShiftParams::default()
            },
            test3_shift: ShiftParams {
                noise_sigma: 0.08,
                blur_radius: 1,
                artifact: true,
                ..ShiftParams::default()
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SuiteSplit {
    Train,
    Val,
    Test1,
    Test2,
    Test3,
}

impl SuiteSplit {
    pub const ALL: [SuiteSplit; 5] = [
        SuiteSplit::Train,
        SuiteSplit::Val,
        SuiteSplit::Test1,
        SuiteSplit::Test2,
        SuiteSplit::Test3,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SuiteSplit::Train => "train",
            SuiteSplit::Val => "val",
            SuiteSplit::Test1 => "test1",
            SuiteSplit::Test2 => "test2",
            SuiteSplit::Test3 => "test3",
        }
    }
}

#[derive(Debug, Clone)]
pub struct Suite {
    pub train: Vec<Patient>,
    pub val: Vec<Patient>,
    pub test1: Vec<Patient>,
    pub test2: Vec<Patient>,
    pub test3: Vec<Patient>,
}

impl Suite {
    pub fn split(&self, split: SuiteSplit) -> &[Patient] {
        match split {
            SuiteSplit::Train => &self.train,
            SuiteSplit::Val => &self.val,
            SuiteSplit::Test1 => &self.test1,
            SuiteSplit::Test2 => &self.test2,
            SuiteSplit::Test3 => &self.test3,
        }
    }
}

impl SuiteConfig {
    pub fn gen_config(&self, split: SuiteSplit, seed: u64) -> GenConfig {
        use PatientClass::*;
        let (patients_per_class, shift) = match split {
            SuiteSplit::Train => (self.train_counts.clone(), ShiftParams::default()),
            SuiteSplit::Val => (self.val_counts.clone(), ShiftParams::default()),
            SuiteSplit::Test1 => (self.test1_counts.clone(), ShiftParams::default()),
            SuiteSplit::Test2 => (self.test2_counts.clone(), self.test2_shift),
            SuiteSplit::Test3 => (self.test3_counts.clone(), self.test3_shift),
        };
        let classes_present = if split == SuiteSplit::Test2 {
            vec![Healthy, Covid]
        } else {
            vec![Healthy, Covid, Cap]
        };
        GenConfig {
            image_side: self.image_side,
            patients_per_class,
            slices_per_patient: self.slices_per_patient,
            lungless_slices_per_patient: self.lungless_slices_per_patient,
            seed: derive_seed(seed, 0x5E7 + split as u64),
            shift,
            classes_present,
            lateral_marker: false,
        }
    }
}

/// Default suite for `seed`.
pub fn gen_suite(seed: u64) -> Suite {
    gen_suite_with(&SuiteConfig::default(), seed).expect("default suite config is valid")
}

pub fn gen_suite_with(cfg: &SuiteConfig, seed: u64) -> Result<Suite, String> {
    let set = |split: SuiteSplit| gen_set(&cfg.gen_config(split, seed), split.name());
    Ok(Suite {
        train: set(SuiteSplit::Train)?,
        val: set(SuiteSplit::Val)?,
        test1: set(SuiteSplit::Test1)?,
        test2: set(SuiteSplit::Test2)?,
        test3: set(SuiteSplit::Test3)?,
    })
}

/// Fresh generator for ad-hoc use (e.g. tests).
pub fn rng_from(seed: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.next_u64();
    r
}
