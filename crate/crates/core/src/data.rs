//! Synthetic vessel-style segmentation data, raster IO, and augmentation.
//!
//! Each generated sample is a dark circular fundus-like background with
//! low-frequency color noise plus a random branching tree of anti-aliased
//! quadratic curves whose width decays with depth. The mask is the curve
//! coverage thresholded at 0.5. Generation is deterministic per
//! (seed, index): every sample owns an independent RNG stream.
//!
//! On disk a dataset is `<root>/<split>/<id>.ppm` (P6 image) +
//! `<root>/<split>/<id>.mask.pgm` (P5 mask) + `manifest.tsv` with
//! (id, split, prevalence) rows.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::rng::Rng;
use crate::tensor::{read_rten, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("format: {0}")]
    Format(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, DataError>;

fn format_err(detail: impl Into<String>) -> DataError {
    DataError::Format(detail.into())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Split> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(format_err(format!("unknown split {other:?}"))),
        }
    }
}

/// One image/mask pair. `image` is 3×H×W in [0,1]; `mask` is H×W binary.
#[derive(Debug, Clone)]
pub struct Sample {
    pub image: Tensor,
    pub mask: Tensor,
    pub id: String,
    pub split: Split,
}

impl Sample {
    pub fn hw(&self) -> (usize, usize) {
        (self.image.shape()[1], self.image.shape()[2])
    }

    pub fn prevalence(&self) -> f64 {
        let pos = self.mask.data().iter().filter(|&&v| v > 0.5).count();
        pos as f64 / self.mask.numel() as f64
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> Vec<Sample> {
        self.samples.iter().filter(|s| s.split == split).cloned().collect()
    }
}

// ---------------------------------------------------------------------------
// Generator
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct GenParams {
    /// Branching depth range, inclusive.
    pub levels: (usize, usize),
    /// Trunk count range, inclusive.
    pub trunks: (usize, usize),
    /// Trunk width as a fraction of min(h, w).
    pub base_width_frac: f32,
    /// Trunk length as a fraction of min(h, w).
    pub base_len_frac: f32,
    /// Per-level width decay.
    pub width_decay: f32,
    /// Per-level length decay.
    pub len_decay: f32,
}

impl Default for GenParams {
    fn default() -> Self {
        GenParams {
            levels: (3, 6),
            trunks: (4, 5),
            base_width_frac: 0.028,
            base_len_frac: 0.33,
            width_decay: 0.74,
            len_decay: 0.80,
        }
    }
}

struct Canvas {
    h: usize,
    w: usize,
    cov: Vec<f32>,
}

impl Canvas {
    fn stamp_disc(&mut self, cx: f32, cy: f32, radius: f32) {
        let r = radius + 1.0;
        let x0 = (cx - r).floor().max(0.0) as usize;
        let x1 = ((cx + r).ceil() as usize).min(self.w.saturating_sub(1));
        let y0 = (cy - r).floor().max(0.0) as usize;
        let y1 = ((cy + r).ceil() as usize).min(self.h.saturating_sub(1));
        for y in y0..=y1 {
            for x in x0..=x1 {
                let dx = x as f32 - cx;
                let dy = y as f32 - cy;
                let d = (dx * dx + dy * dy).sqrt();
                let c = (radius + 0.5 - d).clamp(0.0, 1.0);
                let cell = &mut self.cov[y * self.w + x];
                if c > *cell {
                    *cell = c;
                }
            }
        }
    }

    /// Anti-aliased quadratic Bézier with linearly tapering width.
    fn stroke_quad(&mut self, p0: (f32, f32), p1: (f32, f32), p2: (f32, f32), w0: f32, w1: f32) {
        let approx_len = ((p2.0 - p0.0).hypot(p2.1 - p0.1)
            + (p1.0 - p0.0).hypot(p1.1 - p0.1)
            + (p2.0 - p1.0).hypot(p2.1 - p1.1))
            * 0.5;
        let steps = (approx_len * 2.0).ceil().max(2.0) as usize;
        for i in 0..=steps {
            let t = i as f32 / steps as f32;
            let mt = 1.0 - t;
            let x = mt * mt * p0.0 + 2.0 * mt * t * p1.0 + t * t * p2.0;
            let y = mt * mt * p0.1 + 2.0 * mt * t * p1.1 + t * t * p2.1;
            let w = w0 + (w1 - w0) * t;
            self.stamp_disc(x, y, (w * 0.5).max(0.35));
        }
    }
}

struct Branch {
    pos: (f32, f32),
    angle: f32,
    len: f32,
    width: f32,
    level: usize,
}

/// Generate one synthetic fundus-style sample. Deterministic per
/// (seed, index).
pub fn generate_sample(seed: u64, index: u64, hw: (usize, usize), params: &GenParams) -> Sample {
    let (h, w) = hw;
    let mut rng = Rng::new(seed, index);
    let side = h.min(w) as f32;

    // Background: dark disc with a radial falloff and low-frequency noise.
    let cx = w as f32 * (0.5 + (rng.next_f32() - 0.5) * 0.06);
    let cy = h as f32 * (0.5 + (rng.next_f32() - 0.5) * 0.06);
    let disc_r = side * 0.52 * (1.0 + (rng.next_f32() - 0.5) * 0.08);
    let base = [
        0.55 + rng.next_f32() * 0.18,
        0.22 + rng.next_f32() * 0.12,
        0.10 + rng.next_f32() * 0.08,
    ];
    // Coarse noise grid, bilinearly upsampled.
    let gh = 5;
    let gw = 5;
    let grid: Vec<f32> = (0..gh * gw).map(|_| rng.normal_f32() * 0.07).collect();
    let noise = crate::tensor::no_grad(|| {
        Tensor::new(grid, vec![gh, gw]).bilinear_resize(h, w).expect("resize noise grid")
    });

    // Vessel tree.
    let mut canvas = Canvas {
        h,
        w,
        cov: vec![0.0; h * w],
    };
    let levels = rng.range_inclusive(params.levels.0, params.levels.1);
    let trunks = rng.range_inclusive(params.trunks.0, params.trunks.1);
    let root = (
        cx + (rng.next_f32() - 0.5) * side * 0.2,
        cy + (rng.next_f32() - 0.5) * side * 0.2,
    );
    let angle0 = rng.next_f32() * std::f32::consts::TAU;
    let mut stack: Vec<Branch> = Vec::new();
    for t in 0..trunks {
        let spread = std::f32::consts::TAU * t as f32 / trunks as f32;
        stack.push(Branch {
            pos: root,
            angle: angle0 + spread + (rng.next_f32() - 0.5) * 0.5,
            len: side * params.base_len_frac * (0.85 + rng.next_f32() * 0.3),
            width: (side * params.base_width_frac).max(1.1) * (0.85 + rng.next_f32() * 0.3),
            level: 0,
        });
    }
    while let Some(b) = stack.pop() {
        let bend = (rng.next_f32() - 0.5) * 1.0;
        let end_angle = b.angle + bend * 0.5;
        let p0 = b.pos;
        let p2 = (
            p0.0 + end_angle.cos() * b.len,
            p0.1 + end_angle.sin() * b.len,
        );
        let mid = ((p0.0 + p2.0) * 0.5, (p0.1 + p2.1) * 0.5);
        let perp = (-(p2.1 - p0.1), p2.0 - p0.0);
        let c = (rng.next_f32() - 0.5) * 0.5;
        let p1 = (mid.0 + perp.0 * c, mid.1 + perp.1 * c);
        let w_end = b.width * params.width_decay;
        canvas.stroke_quad(p0, p1, p2, b.width, w_end);
        if b.level + 1 < levels {
            let n_children = if rng.next_f32() < 0.75 { 2 } else { 1 };
            for k in 0..n_children {
                let side_sign = if n_children == 2 {
                    if k == 0 {
                        1.0
                    } else {
                        -1.0
                    }
                } else if rng.bernoulli(0.5) {
                    1.0
                } else {
                    -1.0
                };
                stack.push(Branch {
                    pos: p2,
                    angle: end_angle + side_sign * (0.25 + rng.next_f32() * 0.55),
                    len: b.len * params.len_decay * (0.8 + rng.next_f32() * 0.4),
                    width: w_end,
                    level: b.level + 1,
                });
            }
        }
    }

    // Compose image channels.
    let vessel = [
        0.30 + rng.next_f32() * 0.08,
        0.07 + rng.next_f32() * 0.05,
        0.05 + rng.next_f32() * 0.04,
    ];
    let mut image = vec![0.0f32; 3 * h * w];
    let mut mask = vec![0.0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let dx = x as f32 - cx;
            let dy = y as f32 - cy;
            let d = (dx * dx + dy * dy).sqrt();
            let inside = d <= disc_r;
            let vign = if inside {
                1.0 - 0.45 * (d / disc_r) * (d / disc_r)
            } else {
                0.12
            };
            let nz = noise.data()[i];
            let cov = canvas.cov[i];
            if cov >= 0.5 {
                mask[i] = 1.0;
            }
            for ch in 0..3 {
                let bg = (base[ch] * vign + nz).clamp(0.0, 1.0);
                let v = vessel[ch];
                image[ch * h * w + i] = (bg * (1.0 - cov * 0.9) + v * cov * 0.9).clamp(0.0, 1.0);
            }
        }
    }
    Sample {
        image: Tensor::new(image, vec![3, h, w]),
        mask: Tensor::new(mask, vec![h, w]),
        id: format!("s{index:05}"),
        split: Split::Train,
    }
}

/// 70:20:10 split by count: val = round(0.2n), test = round(0.1n), train
/// takes the rounding remainder.
pub fn assign_splits(samples: &mut [Sample]) {
    let n = samples.len();
    let n_val = (0.2 * n as f64).round() as usize;
    let n_test = (0.1 * n as f64).round() as usize;
    let n_train = n - n_val - n_test;
    for (i, s) in samples.iter_mut().enumerate() {
        s.split = if i < n_train {
            Split::Train
        } else if i < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }
}

/// Generate `n_base` images at `base_hw`, cut each into 4 quadrants, and
/// assign splits. The standard desk-scale dataset is
/// `generate_dataset(seed, 64, (128, 128))` -> 256 samples at 64×64.
pub fn generate_dataset(seed: u64, n_base: usize, base_hw: (usize, usize)) -> Result<Dataset> {
    let params = GenParams::default();
    let mut samples = Vec::with_capacity(n_base * 4);
    for i in 0..n_base {
        let s = generate_sample(seed, i as u64, base_hw, &params);
        samples.extend(quadrant_split(&s)?);
    }
    assign_splits(&mut samples);
    Ok(Dataset { samples })
}

/// Cut a 2H×2W sample into 4 non-overlapping H×W quadrants in raster order
/// (TL, TR, BL, BR).
pub fn quadrant_split(sample: &Sample) -> Result<Vec<Sample>> {
    let (h2, w2) = sample.hw();
    if h2 % 2 != 0 || w2 % 2 != 0 {
        return Err(format_err(format!("quadrant_split needs even dims, got {h2}x{w2}")));
    }
    let (h, w) = (h2 / 2, w2 / 2);
    let img = sample.image.data();
    let msk = sample.mask.data();
    let mut out = Vec::with_capacity(4);
    for q in 0..4 {
        let oy = (q / 2) * h;
        let ox = (q % 2) * w;
        let mut qi = vec![0.0f32; 3 * h * w];
        let mut qm = vec![0.0f32; h * w];
        for y in 0..h {
            for x in 0..w {
                qm[y * w + x] = msk[(oy + y) * w2 + (ox + x)];
                for ch in 0..3 {
                    qi[ch * h * w + y * w + x] = img[ch * h2 * w2 + (oy + y) * w2 + (ox + x)];
                }
            }
        }
        out.push(Sample {
            image: Tensor::new(qi, vec![3, h, w]),
            mask: Tensor::new(qm, vec![h, w]),
            id: format!("{}_q{q}", sample.id),
            split: sample.split,
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Augmentation
// ---------------------------------------------------------------------------

fn flip_pixels(data: &[f32], h: usize, w: usize, channels: usize, horizontal: bool) -> Vec<f32> {
    let mut out = vec![0.0; data.len()];
    for c in 0..channels {
        for y in 0..h {
            for x in 0..w {
                let (sy, sx) = if horizontal { (y, w - 1 - x) } else { (h - 1 - y, x) };
                out[c * h * w + y * w + x] = data[c * h * w + sy * w + sx];
            }
        }
    }
    out
}

fn rot90_pixels(data: &[f32], h: usize, w: usize, channels: usize) -> Vec<f32> {
    // 90° clockwise: out[y][x] = in[h-1-x][y]; output is w×h.
    let mut out = vec![0.0; data.len()];
    for c in 0..channels {
        for y in 0..w {
            for x in 0..h {
                out[c * h * w + y * h + x] = data[c * h * w + (h - 1 - x) * w + y];
            }
        }
    }
    out
}

pub fn flip_h(sample: &Sample) -> Sample {
    let (h, w) = sample.hw();
    Sample {
        image: Tensor::new(flip_pixels(sample.image.data(), h, w, 3, true), vec![3, h, w]),
        mask: Tensor::new(flip_pixels(sample.mask.data(), h, w, 1, true), vec![h, w]),
        id: sample.id.clone(),
        split: sample.split,
    }
}

pub fn flip_v(sample: &Sample) -> Sample {
    let (h, w) = sample.hw();
    Sample {
        image: Tensor::new(flip_pixels(sample.image.data(), h, w, 3, false), vec![3, h, w]),
        mask: Tensor::new(flip_pixels(sample.mask.data(), h, w, 1, false), vec![h, w]),
        id: sample.id.clone(),
        split: sample.split,
    }
}

/// One clockwise quarter turn. Output dims are (w, h).
pub fn rot90(sample: &Sample) -> Sample {
    let (h, w) = sample.hw();
    Sample {
        image: Tensor::new(rot90_pixels(sample.image.data(), h, w, 3), vec![3, w, h]),
        mask: Tensor::new(rot90_pixels(sample.mask.data(), h, w, 1), vec![w, h]),
        id: sample.id.clone(),
        split: sample.split,
    }
}

/// Training augmentation: h/v flips (p = 0.5 each), quarter-turn rotations
/// (p = 0.75, then k ∈ {1,2,3} uniformly), brightness/contrast jitter up to
/// ±0.4 clamped to [0,1]. Geometric transforms apply to the mask too;
/// jitter does not.
pub fn augment(sample: &Sample, rng: &mut Rng) -> Sample {
    let mut s = sample.clone();
    if rng.bernoulli(0.5) {
        s = flip_h(&s);
    }
    if rng.bernoulli(0.5) {
        s = flip_v(&s);
    }
    if rng.bernoulli(0.75) {
        let k = 1 + rng.below(3);
        for _ in 0..k {
            s = rot90(&s);
        }
    }
    let brightness = 1.0 + (rng.next_f32() - 0.5) * 0.8;
    let contrast = 1.0 + (rng.next_f32() - 0.5) * 0.8;
    let image: Vec<f32> = s
        .image
        .data()
        .iter()
        .map(|&v| (((v - 0.5) * contrast + 0.5) * brightness).clamp(0.0, 1.0))
        .collect();
    Sample {
        image: Tensor::new(image, s.image.shape().to_vec()),
        ..s
    }
}

// ---------------------------------------------------------------------------
// Normalization
// ---------------------------------------------------------------------------

pub const IMAGENET_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f32; 3] = [0.229, 0.224, 0.225];

/// Per-channel (x − μ)/σ with ImageNet statistics.
pub fn normalize(image: &Tensor) -> Tensor {
    let hw = image.numel() / 3;
    let mut out = Vec::with_capacity(image.numel());
    for (c, chunk) in image.data().chunks(hw).enumerate() {
        out.extend(chunk.iter().map(|&v| (v - IMAGENET_MEAN[c]) / IMAGENET_STD[c]));
    }
    Tensor::new(out, image.shape().to_vec())
}

pub fn denormalize(image: &Tensor) -> Tensor {
    let hw = image.numel() / 3;
    let mut out = Vec::with_capacity(image.numel());
    for (c, chunk) in image.data().chunks(hw).enumerate() {
        out.extend(chunk.iter().map(|&v| v * IMAGENET_STD[c] + IMAGENET_MEAN[c]));
    }
    Tensor::new(out, image.shape().to_vec())
}

// ---------------------------------------------------------------------------
// Raster IO
// ---------------------------------------------------------------------------

fn read_pnm_header(r: &mut impl BufRead, want_magic: &str) -> Result<(usize, usize)> {
    let mut magic = [0u8; 2];
    r.read_exact(&mut magic)?;
    if magic != want_magic.as_bytes() {
        return Err(format_err(format!(
            "bad magic {:?}, expected {want_magic}",
            String::from_utf8_lossy(&magic)
        )));
    }
    let mut fields = Vec::with_capacity(3);
    let mut token = String::new();
    let mut in_comment = false;
    while fields.len() < 3 {
        let mut byte = [0u8; 1];
        if r.read(&mut byte)? == 0 {
            return Err(format_err("truncated header"));
        }
        let ch = byte[0] as char;
        if in_comment {
            if ch == '\n' {
                in_comment = false;
            }
            continue;
        }
        if ch == '#' {
            in_comment = true;
            continue;
        }
        if ch.is_ascii_whitespace() {
            if !token.is_empty() {
                fields.push(token.clone());
                token.clear();
            }
            continue;
        }
        token.push(ch);
    }
    let w: usize = fields[0].parse().map_err(|_| format_err("bad width"))?;
    let h: usize = fields[1].parse().map_err(|_| format_err("bad height"))?;
    let maxval: usize = fields[2].parse().map_err(|_| format_err("bad maxval"))?;
    if maxval != 255 {
        return Err(format_err(format!("maxval {maxval} unsupported, expected 255")));
    }
    if w == 0 || h == 0 {
        return Err(format_err("zero dimension"));
    }
    Ok((h, w))
}

/// Write a 3×H×W [0,1] image as binary PPM (P6).
pub fn save_ppm(path: &Path, image: &Tensor) -> Result<()> {
    let shape = image.shape();
    if shape.len() != 3 || shape[0] != 3 {
        return Err(format_err(format!("save_ppm expects [3,H,W], got {shape:?}")));
    }
    let (h, w) = (shape[1], shape[2]);
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(f, "P6\n{w} {h}\n255\n")?;
    let hw = h * w;
    let d = image.data();
    let mut row = Vec::with_capacity(3 * w);
    for i in 0..hw {
        for c in 0..3 {
            row.push((d[c * hw + i].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
        if row.len() == 3 * w {
            f.write_all(&row)?;
            row.clear();
        }
    }
    f.flush()?;
    Ok(())
}

/// Read a binary PPM (P6) into a 3×H×W tensor scaled to [0,1].
pub fn load_ppm(path: &Path) -> Result<Tensor> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    let (h, w) = read_pnm_header(&mut r, "P6")?;
    let mut payload = vec![0u8; 3 * h * w];
    r.read_exact(&mut payload).map_err(|_| format_err("truncated payload"))?;
    let hw = h * w;
    let mut data = vec![0.0f32; 3 * hw];
    for i in 0..hw {
        for c in 0..3 {
            data[c * hw + i] = payload[3 * i + c] as f32 / 255.0;
        }
    }
    Ok(Tensor::new(data, vec![3, h, w]))
}

/// Write an H×W binary mask as binary PGM (P5), 0/255.
pub fn save_pgm(path: &Path, mask: &Tensor) -> Result<()> {
    let shape = mask.shape();
    if shape.len() != 2 {
        return Err(format_err(format!("save_pgm expects [H,W], got {shape:?}")));
    }
    let (h, w) = (shape[0], shape[1]);
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(f, "P5\n{w} {h}\n255\n")?;
    let bytes: Vec<u8> = mask
        .data()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    f.write_all(&bytes)?;
    f.flush()?;
    Ok(())
}

/// Read a binary PGM (P5) mask, binarized at >= 128.
pub fn load_pgm(path: &Path) -> Result<Tensor> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    let (h, w) = read_pnm_header(&mut r, "P5")?;
    let mut payload = vec![0u8; h * w];
    r.read_exact(&mut payload).map_err(|_| format_err("truncated payload"))?;
    let data: Vec<f32> = payload.iter().map(|&b| if b >= 128 { 1.0 } else { 0.0 }).collect();
    Ok(Tensor::new(data, vec![h, w]))
}

/// Load any supported raster: P6 -> [3,H,W] image, P5 -> binarized [H,W]
/// mask, RTEN -> tensor as stored.
pub fn load_raster(path: &Path) -> Result<Tensor> {
    let mut f = std::fs::File::open(path)?;
    let mut magic = [0u8; 4];
    let got = f.read(&mut magic)?;
    drop(f);
    if got >= 4 && &magic == b"RTEN" {
        return Ok(read_rten(path)?);
    }
    match &magic[..2] {
        b"P6" => load_ppm(path),
        b"P5" => load_pgm(path),
        other => Err(format_err(format!(
            "unrecognized raster magic {:?}",
            String::from_utf8_lossy(other)
        ))),
    }
}

// ---------------------------------------------------------------------------
// Dataset directory layout
// ---------------------------------------------------------------------------

pub fn write_dataset(root: &Path, dataset: &Dataset) -> Result<()> {
    for split in [Split::Train, Split::Val, Split::Test] {
        std::fs::create_dir_all(root.join(split.as_str()))?;
    }
    let mut manifest = String::from("id\tsplit\tprevalence\n");
    for s in &dataset.samples {
        let dir = root.join(s.split.as_str());
        save_ppm(&dir.join(format!("{}.ppm", s.id)), &s.image)?;
        save_pgm(&dir.join(format!("{}.mask.pgm", s.id)), &s.mask)?;
        manifest.push_str(&format!("{}\t{}\t{:.6}\n", s.id, s.split.as_str(), s.prevalence()));
    }
    std::fs::write(root.join("manifest.tsv"), manifest)?;
    Ok(())
}

pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let manifest = std::fs::read_to_string(root.join("manifest.tsv"))?;
    let mut samples = Vec::new();
    for (ln, line) in manifest.lines().enumerate() {
        if ln == 0 || line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() < 2 {
            return Err(format_err(format!("manifest line {ln}: expected id\\tsplit")));
        }
        let id = cols[0].to_string();
        let split = Split::parse(cols[1])?;
        let dir = root.join(split.as_str());
        let image = load_ppm(&dir.join(format!("{id}.ppm")))?;
        let mask = load_pgm(&dir.join(format!("{id}.mask.pgm")))?;
        samples.push(Sample {
            image,
            mask,
            id,
            split,
        });
    }
    Ok(Dataset { samples })
}
