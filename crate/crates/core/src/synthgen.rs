//! Procedural ordinal images: two bright horizontal bands separated by a
//! dark gap that narrows with grade, with bright blobs on the band margins
//! that multiply with grade.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Image, ImageSample};

pub const BACKGROUND: f32 = 0.25;
pub const BAND: f32 = 0.6;
pub const GAP: f32 = 0.1;
pub const BLOB: f32 = 1.0;
/// Noise level at which adjacent grades start to blur together.
pub const AMBIGUOUS_NOISE: f32 = 0.15;

/// Stream reserved for the label shuffle; samples use stream = index.
const LABEL_STREAM: u64 = u64::MAX;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub height: usize,
    pub width: usize,
    pub num_grades: usize,
    /// Gap width at grade 0, in pixels.
    pub gap_base: usize,
    /// Gap narrowing per grade, in pixels.
    pub gap_step: usize,
    pub band_thickness: usize,
    pub blob_count_per_grade: usize,
    pub noise_sigma: f32,
    pub class_proportions: Vec<f64>,
    pub n_samples: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            height: 32,
            width: 32,
            num_grades: 5,
            gap_base: 14,
            gap_step: 3,
            band_thickness: 6,
            blob_count_per_grade: 1,
            noise_sigma: 0.0,
            class_proportions: uniform_preset(5),
            n_samples: 1000,
            seed: 42,
        }
    }
}

impl SynthConfig {
    pub fn gap_width(&self, grade: usize) -> usize {
        self.gap_base - grade * self.gap_step
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.num_grades;
        if k < 2 {
            return Err(Error::Config(format!("need K >= 2 grades, got {k}")));
        }
        if self.gap_base < (k - 1) * self.gap_step + 1 {
            return Err(Error::Config(format!(
                "gap_base {} - (K-1)*gap_step {} leaves no gap at grade {}",
                self.gap_base,
                (k - 1) * self.gap_step,
                k - 1
            )));
        }
        if self.gap_step == 0 {
            return Err(Error::Config("gap_step must be positive".into()));
        }
        if self.band_thickness < 2 || self.gap_base + 2 * self.band_thickness + 2 > self.height {
            return Err(Error::Config(format!(
                "bands of {} px around a {} px gap do not fit a height of {}",
                self.band_thickness, self.gap_base, self.height
            )));
        }
        if self.width < 8 {
            return Err(Error::Config(format!("width {} is too small", self.width)));
        }
        if self.class_proportions.len() != k {
            return Err(Error::Config(format!(
                "{} class proportions for K={k}",
                self.class_proportions.len()
            )));
        }
        let sum: f64 = self.class_proportions.iter().sum();
        if self.class_proportions.iter().any(|&p| !(p >= 0.0)) || (sum - 1.0).abs() > 1e-6 {
            return Err(Error::Config(format!(
                "class proportions must be non-negative and sum to 1, got sum {sum}"
            )));
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return Err(Error::Config(format!("bad noise sigma {}", self.noise_sigma)));
        }
        Ok(())
    }

    /// First gap row; bands sit directly above and below the gap.
    fn gap_top(&self, width: usize) -> usize {
        self.height / 2 - width / 2
    }
}

/// `[0.38, 0.18, 0.26, 0.13, 0.05]`: grade 0 and 2 dominant, grade 4 rare.
pub fn imbalanced_preset() -> Vec<f64> {
    vec![0.38, 0.18, 0.26, 0.13, 0.05]
}

pub fn uniform_preset(k: usize) -> Vec<f64> {
    vec![1.0 / k as f64; k]
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Blob {
    pub row: f64,
    pub col: f64,
    pub radius_y: f64,
    pub radius_x: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleParams {
    pub gap_width: usize,
    pub gap_top: usize,
    pub blobs: Vec<Blob>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthDataset {
    pub samples: Vec<ImageSample>,
    pub params: Vec<SampleParams>,
    pub config: SynthConfig,
}

impl SynthDataset {
    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }
}

/// Per-class counts by largest remainder; ties go to the lower grade.
pub fn class_counts(n: usize, proportions: &[f64]) -> Vec<usize> {
    let exact: Vec<f64> = proportions.iter().map(|p| p * n as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..proportions.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &c in order.iter().take(n.saturating_sub(assigned)) {
        counts[c] += 1;
    }
    counts
}

pub fn generate(config: &SynthConfig) -> Result<SynthDataset> {
    config.validate()?;
    let counts = class_counts(config.n_samples, &config.class_proportions);
    let mut labels: Vec<usize> = counts
        .iter()
        .enumerate()
        .flat_map(|(g, &c)| std::iter::repeat_n(g, c))
        .collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed);
    shuffle_rng.set_stream(LABEL_STREAM);
    labels.shuffle(&mut shuffle_rng);

    let (samples, params) = labels
        .iter()
        .enumerate()
        .map(|(i, &g)| {
            let (image, params) = render(config, g, i as u64);
            (
                ImageSample {
                    image,
                    label: g,
                    id: format!("{g}_{i:05}"),
                },
                params,
            )
        })
        .unzip();
    Ok(SynthDataset {
        samples,
        params,
        config: config.clone(),
    })
}

/// One image from its own counter-indexed stream, so generation order
/// never matters.
fn render(config: &SynthConfig, grade: usize, index: u64) -> (Image, SampleParams) {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(index);
    let (h, w) = (config.height, config.width);
    let gap_width = config.gap_width(grade);
    let gap_top = config.gap_top(gap_width);
    let band = config.band_thickness;
    let upper = (gap_top - band, gap_top);
    let lower = (gap_top + gap_width, gap_top + gap_width + band);

    let mut image = Image::filled(h, w, BACKGROUND);
    for r in upper.0..lower.1 {
        let v = if r < upper.1 || r >= lower.0 { BAND } else { GAP };
        for c in 0..w {
            image.set(r, c, v);
        }
    }

    // Blobs hug the band edge next to the gap and stay inside the band.
    let mut blobs = Vec::with_capacity(grade * config.blob_count_per_grade);
    for _ in 0..grade * config.blob_count_per_grade {
        let on_upper = rng.random_bool(0.5);
        let radius_y = rng.random_range(1.0..=(band as f64 / 2.0).max(1.0));
        let radius_x = rng.random_range(1.5..=3.0);
        let col = rng.random_range(radius_x..=(w as f64 - 1.0 - radius_x));
        let (lo, hi) = if on_upper { upper } else { lower };
        let edge = if on_upper { hi as f64 - 1.0 } else { lo as f64 };
        let jitter = rng.random_range(0.0..=1.0);
        let row = if on_upper { edge - jitter } else { edge + jitter };
        let blob = Blob {
            row,
            col,
            radius_y,
            radius_x,
        };
        for r in lo..hi {
            for c in 0..w {
                let dy = (r as f64 - row) / radius_y;
                let dx = (c as f64 - col) / radius_x;
                if dy * dy + dx * dx <= 1.0 {
                    image.set(r, c, BLOB);
                }
            }
        }
        blobs.push(blob);
    }

    if config.noise_sigma > 0.0 {
        let noise = Normal::new(0.0f32, config.noise_sigma).expect("validated sigma");
        for p in image.pixels_mut() {
            *p = (*p + noise.sample(&mut rng)).clamp(0.0, 1.0);
        }
    }
    (
        image,
        SampleParams {
            gap_width,
            gap_top,
            blobs,
        },
    )
}

/// Length of the run of dark rows through the image centre.
pub fn measure_gap_width(image: &Image) -> usize {
    let threshold = f64::from(GAP + BACKGROUND) / 2.0;
    let dark = |r: usize| {
        let row = &image.pixels()[r * image.width()..(r + 1) * image.width()];
        row.iter().map(|&v| f64::from(v)).sum::<f64>() / row.len() as f64 <= threshold
    };
    let centre = image.height() / 2;
    if !dark(centre) && !dark(centre.saturating_sub(1)) {
        return 0;
    }
    let seed = if dark(centre) { centre } else { centre - 1 };
    let mut top = seed;
    while top > 0 && dark(top - 1) {
        top -= 1;
    }
    let mut bottom = seed;
    while bottom + 1 < image.height() && dark(bottom + 1) {
        bottom += 1;
    }
    bottom - top + 1
}

/// Grade whose nominal gap width is nearest the measured one.
pub fn rule_classify(image: &Image, config: &SynthConfig) -> usize {
    let w = measure_gap_width(image) as i64;
    (0..config.num_grades)
        .min_by_key(|&g| (config.gap_width(g) as i64 - w).abs())
        .unwrap_or(0)
}

/// Writes `<id>.pgm` files and a `labels.csv` manifest (`id,label,gap_width`).
pub fn save_dataset(dataset: &SynthDataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = String::from("id,label,gap_width\n");
    for (s, p) in dataset.samples.iter().zip(&dataset.params) {
        let path = dir.join(format!("{}.pgm", s.id));
        std::fs::write(&path, s.image.to_pgm()).map_err(|e| Error::io(&path, e))?;
        writeln!(manifest, "{},{},{}", s.id, s.label, p.gap_width).expect("string write");
    }
    let path = dir.join("labels.csv");
    std::fs::write(&path, manifest).map_err(|e| Error::io(&path, e))
}

/// Reads a directory written by [`save_dataset`] (or any `id,label,...`
/// manifest with matching `<id>.pgm` files), in manifest order.
pub fn load_dataset(dir: &Path) -> Result<Vec<ImageSample>> {
    let path = dir.join("labels.csv");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Format(format!("{}: empty manifest", path.display())))?;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    if cols.len() < 2 || cols[0] != "id" || cols[1] != "label" {
        return Err(Error::Format(format!(
            "{}: header must start with `id,label`, got `{header}`",
            path.display()
        )));
    }
    let mut samples = Vec::new();
    for (n, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let (id, label) = match fields.as_slice() {
            [id, label, ..] => (*id, *label),
            _ => {
                return Err(Error::Format(format!(
                    "{} line {}: `{line}`",
                    path.display(),
                    n + 2
                )))
            }
        };
        let label = label.parse::<usize>().map_err(|_| {
            Error::Format(format!("{} line {}: bad label `{label}`", path.display(), n + 2))
        })?;
        let img_path = dir.join(format!("{id}.pgm"));
        let bytes = std::fs::read(&img_path).map_err(|e| Error::io(&img_path, e))?;
        let image = Image::from_pgm(&bytes)
            .map_err(|e| Error::Format(format!("{}: {e}", img_path.display())))?;
        samples.push(ImageSample {
            image,
            label,
            id: id.to_string(),
        });
    }
    if samples.is_empty() {
        return Err(Error::Input(format!("{}: no samples", path.display())));
    }
    Ok(samples)
}
