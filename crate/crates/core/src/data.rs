//! Procedural dataset with controllable class cues and domain confounds,
//! plus a labeled-image-folder loader and stratified splitting.
//!
//! Each class is a distinct glyph shape drawn in a class-conditional region;
//! each domain is a background style (base color plus low-frequency shading)
//! that perturbs global color statistics but never touches the glyph. Class
//! and domain are assigned independently, so the background is a pure
//! confound for the classifier and a clean target for domain suppression.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::NormStats;
use crate::error::{CdiraError, Result};
use crate::imageio::{self, RgbImage};
use crate::rng::{stream_rng, Stream};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn tag(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn from_tag(tag: &str) -> Result<Split> {
        match tag {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(CdiraError::Data(format!("unknown split tag {other:?}"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Sample {
    pub id: u32,
    /// Interleaved RGB, 8-bit, row-major.
    pub pixels: Vec<u8>,
    pub label: usize,
    pub true_domain: Option<usize>,
    /// Glyph bounding box (x0, y0, x1, y1), half-open, pixel coords.
    pub glyph_box: Option<(u16, u16, u16, u16)>,
    pub split: Split,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub n_classes: usize,
    pub image_size: usize,
}

impl Dataset {
    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        self.samples
            .iter()
            .enumerate()
            .filter(|(_, s)| s.split == split)
            .map(|(i, _)| i)
            .collect()
    }

    /// [3, H, W] float image in [0, 1].
    pub fn image_tensor(&self, idx: usize) -> Tensor {
        pixels_to_tensor(&self.samples[idx].pixels, self.image_size)
    }

    /// Clone the selected samples into a new dataset (ids and splits kept).
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
            n_classes: self.n_classes,
            image_size: self.image_size,
        }
    }
}

/// Convert interleaved 8-bit RGB to a [3, H, W] float tensor in [0, 1].
pub fn pixels_to_tensor(pixels: &[u8], size: usize) -> Tensor {
    let hw = size * size;
    let mut data = vec![0.0f32; 3 * hw];
    for (i, px) in pixels.chunks_exact(3).enumerate() {
        data[i] = px[0] as f32 / 255.0;
        data[hw + i] = px[1] as f32 / 255.0;
        data[2 * hw + i] = px[2] as f32 / 255.0;
    }
    Tensor::from_vec(&[3, size, size], data).expect("sized")
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub n_classes: usize,
    pub n_domains: usize,
    /// Images per (class, domain) pair.
    pub per_class_domain: usize,
    pub image_size: usize,
    pub glyph_min: usize,
    pub glyph_max: usize,
    pub jitter: usize,
    pub seed: u64,
}

impl SynthSpec {
    /// Geometry defaults scale with the image edge.
    pub fn with_size(image_size: usize) -> SynthSpec {
        SynthSpec {
            n_classes: 10,
            n_domains: 8,
            per_class_domain: 125,
            image_size,
            glyph_min: image_size * 3 / 16,
            glyph_max: image_size * 5 / 16,
            jitter: image_size / 16,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 || self.n_domains < 2 {
            return Err(CdiraError::Config(
                "need at least 2 classes and 2 domains".into(),
            ));
        }
        if self.glyph_min < 4 || self.glyph_min > self.glyph_max {
            return Err(CdiraError::Config("bad glyph size range".into()));
        }
        // region radius + half glyph + jitter must stay inside the frame
        let half = self.image_size as f32 / 2.0;
        let reach = self.image_size as f32 / 4.0
            + self.glyph_max as f32 / 2.0
            + self.jitter as f32;
        if reach > half - 1.0 {
            return Err(CdiraError::Config(format!(
                "glyph cannot fit: reach {reach} exceeds half-frame {half}"
            )));
        }
        Ok(())
    }
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec::with_size(64)
    }
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> [f32; 3] {
    let h = (h.fract() + 1.0).fract() * 6.0;
    let i = h.floor() as i32 % 6;
    let f = h - h.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - f * s);
    let t = v * (1.0 - (1.0 - f) * s);
    match i {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Background style of one domain: base hue plus directed shading. Styles
/// shift color statistics at moderate amplitude: strong enough for a linear
/// probe on raw pixels or embeddings, cheap enough for the feature extractor
/// to unlearn under adversarial pressure.
fn domain_style(d: usize, n_domains: usize) -> ([f32; 3], f32, f32) {
    let hue = d as f32 / n_domains as f32;
    let base = hsv_to_rgb(hue, 0.5, 0.45);
    let angle = std::f32::consts::PI * d as f32 / n_domains as f32;
    let cycles = 1.5 + (d % 3) as f32;
    (base, angle, cycles)
}

fn glyph_mask(shape: usize, p: f32, q: f32) -> bool {
    let dc = ((p - 0.5) * (p - 0.5) + (q - 0.5) * (q - 0.5)).sqrt();
    match shape % 10 {
        0 => dc <= 0.48,                                     // circle
        1 => (p - 0.5).abs() <= 0.16 || (q - 0.5).abs() <= 0.16, // cross
        2 => (q - 0.5).abs() <= 0.18,                        // bar
        3 => p <= 0.33 || q >= 0.67,                         // L
        4 => q <= 0.33 || (p - 0.5).abs() <= 0.16,           // T
        5 => {
            let dl = ((p - 0.25) * (p - 0.25) + (q - 0.5) * (q - 0.5)).sqrt();
            let dr = ((p - 0.75) * (p - 0.75) + (q - 0.5) * (q - 0.5)).sqrt();
            dl <= 0.22 || dr <= 0.22                         // dot pair
        }
        6 => (0.26..=0.48).contains(&dc),                    // ring
        7 => (p - 0.5).abs() <= 0.5 * q,                     // wedge
        8 => ((p - 0.5).abs() - 0.5 * q).abs() <= 0.14 && q <= 0.92, // chevron
        _ => {
            let m = (p - 0.5).abs().max((q - 0.5).abs());
            (0.30..=0.48).contains(&m)                       // square frame
        }
    }
}

fn render_sample(
    spec: &SynthSpec,
    class: usize,
    domain: usize,
    rng: &mut ChaCha8Rng,
) -> (Vec<u8>, (u16, u16, u16, u16)) {
    let size = spec.image_size;
    let (base, angle, cycles) = domain_style(domain, spec.n_domains);
    let phase: f32 = rng.random_range(0.0..std::f32::consts::TAU);
    let glyph_size = rng.random_range(spec.glyph_min..=spec.glyph_max);
    let jx: i32 = rng.random_range(-(spec.jitter as i32)..=spec.jitter as i32);
    let jy: i32 = rng.random_range(-(spec.jitter as i32)..=spec.jitter as i32);
    let brightness: f32 = rng.random_range(0.88..=1.0);

    let theta = std::f32::consts::TAU * class as f32 / spec.n_classes as f32;
    let radius = size as f32 / 4.0;
    let center = size as f32 / 2.0;
    let cx = center + radius * theta.cos() + jx as f32;
    let cy = center + radius * theta.sin() + jy as f32;
    let x0 = (cx - glyph_size as f32 / 2.0).round() as i32;
    let y0 = (cy - glyph_size as f32 / 2.0).round() as i32;
    let x1 = x0 + glyph_size as i32;
    let y1 = y0 + glyph_size as i32;

    let freq = cycles * std::f32::consts::TAU / size as f32;
    let (ca, sa) = (angle.cos(), angle.sin());
    let mut canvas = vec![0.0f32; size * size * 3];
    for y in 0..size {
        for x in 0..size {
            let shade = 0.05 * (freq * (x as f32 * ca + y as f32 * sa) + phase).sin();
            let noise: f32 = rng.random_range(-0.015..=0.015);
            let off = (y * size + x) * 3;
            for c in 0..3 {
                canvas[off + c] = (base[c] + shade + noise).clamp(0.0, 1.0);
            }
        }
    }
    // glyph overwrites the background
    for y in y0.max(0)..y1.min(size as i32) {
        for x in x0.max(0)..x1.min(size as i32) {
            let p = (x - x0) as f32 / glyph_size as f32 + 0.5 / glyph_size as f32;
            let q = (y - y0) as f32 / glyph_size as f32 + 0.5 / glyph_size as f32;
            if glyph_mask(class, p, q) {
                let off = (y as usize * size + x as usize) * 3;
                for c in 0..3 {
                    canvas[off + c] = brightness;
                }
            }
        }
    }
    let pixels: Vec<u8> = canvas
        .iter()
        .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect();
    (pixels, (x0 as u16, y0 as u16, x1 as u16, y1 as u16))
}

/// Generate the full dataset; deterministic given `spec.seed`, with one RNG
/// stream per sample so generation order (or threading) cannot matter.
pub fn generate_dataset(spec: &SynthSpec) -> Result<Dataset> {
    spec.validate()?;
    let total = spec.n_classes * spec.n_domains * spec.per_class_domain;
    let mut samples = Vec::with_capacity(total);
    let mut id = 0u32;
    for class in 0..spec.n_classes {
        for domain in 0..spec.n_domains {
            for _rep in 0..spec.per_class_domain {
                let mut rng = stream_rng(spec.seed, Stream::DataGen, id as u64);
                let (pixels, bbox) = render_sample(spec, class, domain, &mut rng);
                samples.push(Sample {
                    id,
                    pixels,
                    label: class,
                    true_domain: Some(domain),
                    glyph_box: Some(bbox),
                    split: Split::Train,
                });
                id += 1;
            }
        }
    }
    Ok(Dataset {
        samples,
        n_classes: spec.n_classes,
        image_size: spec.image_size,
    })
}

/// Tag each sample with train/val/test via per-class largest-remainder
/// allocation and a seeded shuffle within each class.
pub fn stratified_split(
    dataset: &mut Dataset,
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<()> {
    let total_frac = fractions.0 + fractions.1 + fractions.2;
    if (total_frac - 1.0).abs() > 1e-9 {
        return Err(CdiraError::Data(format!(
            "split fractions must sum to 1, got {total_frac}"
        )));
    }
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, s) in dataset.samples.iter().enumerate() {
        by_class.entry(s.label).or_default().push(i);
    }
    for (class, indices) in by_class.iter_mut() {
        let n = indices.len();
        if n < 10 {
            return Err(CdiraError::Data(format!(
                "class {class} has only {n} samples; need >= 10 to split"
            )));
        }
        let mut rng = stream_rng(seed, Stream::Split, *class as u64);
        for i in (1..indices.len()).rev() {
            let j = rng.random_range(0..=i);
            indices.swap(i, j);
        }
        let quotas = [
            fractions.0 * n as f64,
            fractions.1 * n as f64,
            fractions.2 * n as f64,
        ];
        let mut counts = [
            quotas[0].floor() as usize,
            quotas[1].floor() as usize,
            quotas[2].floor() as usize,
        ];
        let mut leftover = n - counts.iter().sum::<usize>();
        // largest remainder first; ties favor train, then val, then test
        let mut order: Vec<usize> = (0..3).collect();
        order.sort_by(|&a, &b| {
            (quotas[b] - quotas[b].floor())
                .partial_cmp(&(quotas[a] - quotas[a].floor()))
                .unwrap()
                .then(a.cmp(&b))
        });
        for &slot in &order {
            if leftover == 0 {
                break;
            }
            counts[slot] += 1;
            leftover -= 1;
        }
        let mut cursor = 0usize;
        for (slot, split) in [Split::Train, Split::Val, Split::Test].iter().enumerate() {
            for &idx in indices[cursor..cursor + counts[slot]].iter() {
                dataset.samples[idx].split = *split;
            }
            cursor += counts[slot];
        }
    }
    Ok(())
}

/// Per-channel mean and std over the training split.
pub fn compute_norm_stats(dataset: &Dataset) -> Result<NormStats> {
    let train = dataset.split_indices(Split::Train);
    if train.is_empty() {
        return Err(CdiraError::Data("no training samples".into()));
    }
    let mut sum = [0.0f64; 3];
    let mut sum_sq = [0.0f64; 3];
    let mut count = 0u64;
    for &i in &train {
        for px in dataset.samples[i].pixels.chunks_exact(3) {
            for c in 0..3 {
                let v = px[c] as f64 / 255.0;
                sum[c] += v;
                sum_sq[c] += v * v;
            }
            count += 1;
        }
    }
    let mut mean = [0.0f32; 3];
    let mut std = [0.0f32; 3];
    for c in 0..3 {
        let m = sum[c] / count as f64;
        let var = (sum_sq[c] / count as f64 - m * m).max(0.0);
        mean[c] = m as f32;
        std[c] = (var.sqrt() as f32).max(1e-4);
    }
    Ok(NormStats { mean, std })
}

/// Write manifest.csv plus one PPM per sample.
pub fn export_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    let images = dir.join("images");
    fs::create_dir_all(&images)?;
    let mut manifest = std::io::BufWriter::new(fs::File::create(dir.join("manifest.csv"))?);
    writeln!(manifest, "sample_id,class,domain,split,box")?;
    for s in &dataset.samples {
        let domain = s.true_domain.map(|d| d.to_string()).unwrap_or_default();
        let boxs = s
            .glyph_box
            .map(|(a, b, c, d)| format!("{a};{b};{c};{d}"))
            .unwrap_or_default();
        writeln!(
            manifest,
            "{},{},{},{},{}",
            s.id,
            s.label,
            domain,
            s.split.tag(),
            boxs
        )?;
        let img = RgbImage {
            w: dataset.image_size,
            h: dataset.image_size,
            data: s.pixels.clone(),
        };
        imageio::write_ppm(&images.join(format!("sample_{:06}.ppm", s.id)), &img)?;
    }
    Ok(())
}

/// Read a dataset previously written by `export_dataset`.
pub fn import_dataset(dir: &Path) -> Result<Dataset> {
    let manifest = fs::File::open(dir.join("manifest.csv"))?;
    let reader = BufReader::new(manifest);
    let mut samples = Vec::new();
    let mut n_classes = 0usize;
    let mut image_size = 0usize;
    for (ln, line) in reader.lines().enumerate() {
        let line = line?;
        if ln == 0 || line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 {
            return Err(CdiraError::Data(format!("manifest line {ln}: bad field count")));
        }
        let id: u32 = fields[0]
            .parse()
            .map_err(|_| CdiraError::Data(format!("manifest line {ln}: bad id")))?;
        let label: usize = fields[1]
            .parse()
            .map_err(|_| CdiraError::Data(format!("manifest line {ln}: bad class")))?;
        let true_domain = if fields[2].is_empty() {
            None
        } else {
            Some(
                fields[2]
                    .parse()
                    .map_err(|_| CdiraError::Data(format!("manifest line {ln}: bad domain")))?,
            )
        };
        let split = Split::from_tag(fields[3])?;
        let glyph_box = if fields[4].is_empty() {
            None
        } else {
            let parts: Vec<u16> = fields[4]
                .split(';')
                .map(|p| p.parse::<u16>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| CdiraError::Data(format!("manifest line {ln}: bad box")))?;
            if parts.len() != 4 {
                return Err(CdiraError::Data(format!("manifest line {ln}: bad box")));
            }
            Some((parts[0], parts[1], parts[2], parts[3]))
        };
        let img = imageio::read_ppm(&dir.join("images").join(format!("sample_{id:06}.ppm")))?;
        if image_size == 0 {
            image_size = img.w;
        }
        if img.w != image_size || img.h != image_size {
            return Err(CdiraError::Data(format!("sample {id}: inconsistent image size")));
        }
        n_classes = n_classes.max(label + 1);
        samples.push(Sample {
            id,
            pixels: img.data,
            label,
            true_domain,
            glyph_box,
            split,
        });
    }
    if samples.is_empty() {
        return Err(CdiraError::Data("empty manifest".into()));
    }
    Ok(Dataset {
        samples,
        n_classes,
        image_size,
    })
}

/// Load root/<class_name>/<image files> with lexicographic class indexing.
/// Unreadable files are skipped with a warning; an empty class is an error.
pub fn load_image_folder(root: &Path, image_size: usize) -> Result<Dataset> {
    let mut class_dirs: Vec<_> = fs::read_dir(root)?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .map(|e| e.path())
        .collect();
    class_dirs.sort();
    if class_dirs.is_empty() {
        return Err(CdiraError::Data(format!("no class directories under {root:?}")));
    }
    let mut samples = Vec::new();
    let mut id = 0u32;
    for (label, dir) in class_dirs.iter().enumerate() {
        let mut files: Vec<_> = fs::read_dir(dir)?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.is_file())
            .collect();
        files.sort();
        let mut loaded = 0usize;
        for file in files {
            match imageio::read_image(&file) {
                Ok(img) => {
                    let resized = imageio::resize_bilinear(&img, image_size, image_size);
                    samples.push(Sample {
                        id,
                        pixels: resized.data,
                        label,
                        true_domain: None,
                        glyph_box: None,
                        split: Split::Train,
                    });
                    id += 1;
                    loaded += 1;
                }
                Err(e) => {
                    eprintln!("warning: skipping {file:?}: {e}");
                }
            }
        }
        if loaded == 0 {
            return Err(CdiraError::Data(format!("class directory {dir:?} has no readable images")));
        }
    }
    Ok(Dataset {
        samples,
        n_classes: class_dirs.len(),
        image_size,
    })
}
