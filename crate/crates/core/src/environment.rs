//! Synthetic diagnostic cases.
//!
//! Images are zero-mean Gaussian noise. Positive cases additionally carry
//! `n_peaks` rectangles of constant amplitude. Every random quantity is drawn
//! from a stream keyed by `(seed, case index, purpose)`, so any case can be
//! regenerated on its own.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::belief::{apply_calibration, CalibrationParams};
use crate::error::{Error, Result};
use crate::rng::{Stream, StreamKey};

const PLACEMENT_ATTEMPTS: usize = 100;

/// Axis-aligned rectangle in pixel coordinates, top-left origin.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Roi {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl Roi {
    pub fn new(x: usize, y: usize, w: usize, h: usize) -> Self {
        Self { x, y, w, h }
    }

    pub fn fits(&self, width: usize, height: usize) -> bool {
        self.w >= 1 && self.h >= 1 && self.x + self.w <= width && self.y + self.h <= height
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x && x < self.x + self.w && y >= self.y && y < self.y + self.h
    }

    pub fn intersects(&self, other: &Roi) -> bool {
        self.x < other.x + other.w
            && other.x < self.x + self.w
            && self.y < other.y + other.h
            && other.y < self.y + self.h
    }

    /// True when the two rectangles are at least `gap` pixels apart on some axis.
    pub fn separated_by(&self, other: &Roi, gap: usize) -> bool {
        self.x + self.w + gap <= other.x
            || other.x + other.w + gap <= self.x
            || self.y + self.h + gap <= other.y
            || other.y + other.h + gap <= self.y
    }
}

/// Row-major grid of intensities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f64>,
}

impl Image {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self { width, height, pixels: vec![0.0; width * height] }
    }

    pub fn from_pixels(width: usize, height: usize, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(Error::Contract(format!(
                "image {width}x{height} needs {} pixels, got {}",
                width * height,
                pixels.len()
            )));
        }
        Ok(Self { width, height, pixels })
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.pixels[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.pixels[y * self.width + x] = v;
    }

    pub fn full_roi(&self) -> Roi {
        Roi::new(0, 0, self.width, self.height)
    }
}

/// One synthetic diagnostic instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Case {
    pub id: String,
    pub concept: String,
    pub label: u8,
    #[serde(flatten)]
    pub image: Image,
    pub gt_roi: Option<Roi>,
    pub prior_score: Option<f64>,
    pub domain_tag: String,
}

impl Case {
    pub fn is_positive(&self) -> bool {
        self.label == 1
    }

    fn validate(&self) -> Result<()> {
        if self.label > 1 {
            return Err(Error::Contract(format!("case {}: label must be 0 or 1", self.id)));
        }
        if self.image.pixels.len() != self.image.width * self.image.height {
            return Err(Error::Contract(format!("case {}: pixel count mismatch", self.id)));
        }
        if let Some(roi) = self.gt_roi {
            if !roi.fits(self.image.width, self.image.height) {
                return Err(Error::Bounds(format!("case {}: gt_roi outside image", self.id)));
            }
        }
        if let Some(p) = self.prior_score {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Contract(format!("case {}: prior_score {p} outside [0, 1]", self.id)));
            }
        }
        Ok(())
    }
}

/// Parameters of the synthetic generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenSpec {
    pub width: usize,
    pub height: usize,
    pub noise_sigma: f64,
    pub signal_amplitude: f64,
    pub roi_size: usize,
    pub positive_rate: f64,
    pub n_peaks: usize,
    pub prior_informativeness: f64,
    /// Multiplier on the prior-score logit; values other than 1 model a score-scale shift.
    #[serde(default = "unit_scale")]
    pub score_scale: f64,
    pub concepts: Vec<String>,
    pub domain_tag: String,
    pub seed: u64,
}

fn unit_scale() -> f64 {
    1.0
}

impl Default for GenSpec {
    fn default() -> Self {
        Self {
            width: 32,
            height: 32,
            noise_sigma: 1.0,
            signal_amplitude: 0.8,
            roi_size: 6,
            positive_rate: 0.5,
            n_peaks: 1,
            prior_informativeness: 3.0,
            score_scale: 1.0,
            concepts: vec!["effusion".to_string()],
            domain_tag: "source".to_string(),
            seed: 0,
        }
    }
}

impl GenSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.roi_size == 0 {
            return fail("gen.roi_size must be >= 1".into());
        }
        if self.width < self.roi_size || self.height < self.roi_size {
            return fail(format!(
                "gen.width/height ({}x{}) must be >= gen.roi_size ({})",
                self.width, self.height, self.roi_size
            ));
        }
        if !(0.0..=1.0).contains(&self.positive_rate) {
            return fail(format!("gen.pos_rate must be in [0, 1], got {}", self.positive_rate));
        }
        if self.n_peaks == 0 {
            return fail("gen.peaks must be >= 1".into());
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return fail(format!("gen.noise must be finite and >= 0, got {}", self.noise_sigma));
        }
        if !self.signal_amplitude.is_finite() {
            return fail("gen.amplitude must be finite".into());
        }
        if !(self.prior_informativeness >= 0.0) {
            return fail(format!("gen.prior_info must be >= 0, got {}", self.prior_informativeness));
        }
        if !(self.score_scale > 0.0) || !self.score_scale.is_finite() {
            return fail(format!("gen.score_scale must be positive and finite, got {}", self.score_scale));
        }
        if self.concepts.is_empty() {
            return fail("gen.concepts must name at least one concept".into());
        }
        Ok(())
    }
}

fn case_key(spec: &GenSpec, index: u64, purpose: &str) -> StreamKey {
    StreamKey::new(spec.seed, "gen").text(purpose).num(index)
}

/// Places `n` rectangles of side `s`, each pair separated by at least `s`
/// pixels so no `s`-sized window can touch two of them.
fn place_peaks(spec: &GenSpec, rng: &mut Stream) -> Result<Vec<Roi>> {
    let s = spec.roi_size;
    let mut placed: Vec<Roi> = Vec::with_capacity(spec.n_peaks);
    for k in 0..spec.n_peaks {
        let mut ok = None;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let roi = random_roi(spec.width, spec.height, s, s, rng);
            if placed.iter().all(|r| r.separated_by(&roi, s)) {
                ok = Some(roi);
                break;
            }
        }
        match ok {
            Some(roi) => placed.push(roi),
            None => {
                return Err(Error::Generation(format!(
                    "could not place peak {} of {} ({s}x{s}) in a {}x{} image after {PLACEMENT_ATTEMPTS} attempts",
                    k + 1,
                    spec.n_peaks,
                    spec.width,
                    spec.height
                )))
            }
        }
    }
    Ok(placed)
}

/// Generates case `index` of the dataset described by `spec`.
pub fn generate_case(spec: &GenSpec, index: u64) -> Result<Case> {
    spec.validate()?;
    let mut label_rng = case_key(spec, index, "label").stream();
    let label = u8::from(label_rng.gen::<f64>() < spec.positive_rate);

    let mut image = Image::zeros(spec.width, spec.height);
    if spec.noise_sigma > 0.0 {
        let mut noise_rng = case_key(spec, index, "noise").stream();
        for px in image.pixels.iter_mut() {
            let z: f64 = noise_rng.sample(StandardNormal);
            *px = spec.noise_sigma * z;
        }
    }

    let mut gt_roi = None;
    if label == 1 {
        let mut place_rng = case_key(spec, index, "place").stream();
        let peaks = place_peaks(spec, &mut place_rng)?;
        for roi in &peaks {
            for y in roi.y..roi.y + roi.h {
                for x in roi.x..roi.x + roi.w {
                    let v = image.get(x, y) + spec.signal_amplitude;
                    image.set(x, y, v);
                }
            }
        }
        gt_roi = peaks.first().copied();
    }

    let mut prior_rng = case_key(spec, index, "prior").stream();
    let z: f64 = prior_rng.sample(StandardNormal);
    let sign = if label == 1 { 1.0 } else { -1.0 };
    let prior_score = apply_calibration(
        spec.score_scale * (spec.prior_informativeness * sign + z),
        &CalibrationParams::identity(""),
    )?;

    let concept = spec.concepts[(index % spec.concepts.len() as u64) as usize].clone();
    Ok(Case {
        id: format!("{}-{index:06}", spec.domain_tag),
        concept,
        label,
        image,
        gt_roi,
        prior_score: Some(prior_score),
        domain_tag: spec.domain_tag.clone(),
    })
}

/// Generates cases `0..n`.
pub fn generate_dataset(spec: &GenSpec, n: usize) -> Result<Vec<Case>> {
    (0..n as u64).map(|i| generate_case(spec, i)).collect()
}

/// Copy of `image` with every pixel in `roi` set to `fill`.
pub fn mask_roi(image: &Image, roi: &Roi, fill: f64) -> Result<Image> {
    if !roi.fits(image.width, image.height) {
        return Err(Error::Bounds(format!(
            "roi {roi:?} outside {}x{} image",
            image.width, image.height
        )));
    }
    let mut out = image.clone();
    for y in roi.y..roi.y + roi.h {
        let row = y * out.width;
        out.pixels[row + roi.x..row + roi.x + roi.w].fill(fill);
    }
    Ok(out)
}

/// Uniformly placed `w`x`h` rectangle inside a `width`x`height` image.
pub fn random_roi(width: usize, height: usize, w: usize, h: usize, rng: &mut Stream) -> Roi {
    debug_assert!(w <= width && h <= height);
    let x = rng.gen_range(0..=width - w);
    let y = rng.gen_range(0..=height - h);
    Roi::new(x, y, w, h)
}

/// Writes one JSON object per line.
pub fn save_dataset(cases: &[Case], path: &Path) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for case in cases {
        serde_json::to_writer(&mut out, case)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Vec<Case>> {
    let reader = BufReader::new(File::open(path)?);
    let mut cases = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let case: Case = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        case.validate().map_err(|e| Error::Parse { line: i + 1, message: e.to_string() })?;
        cases.push(case);
    }
    Ok(cases)
}
