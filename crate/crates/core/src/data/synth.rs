//! Synthetic misalignment benchmark with ground-truth warps.
//!
//! Each identity is a procedural figure (head, striped upper garment, lower
//! garment) drawn from a shared palette, so identities differ by layout and
//! colour pairing rather than by a unique colour. Samples are corrupted by
//! one of two warps whose inverses are stored:
//!
//! * excess background: the figure is shrunk into a cluttered scene
//!   (`theta = scale(1/s)`, inverse `scale(s)`, a crop);
//! * partial loss: the figure is translated partly out of frame with zero
//!   fill (`theta = translate(d)`, inverse `translate(-d)`).
//!
//! Two simulated cameras scale brightness by 0.85 and 1.15.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::image;
use super::market::{format_market_name, MarketName, Split};
use crate::affine::{self, target_coord, AffineParams};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CAMERA_GAIN: [f64; 2] = [0.85, 1.15];

const PALETTE: [[f64; 3]; 8] = [
    [0.75, 0.15, 0.15],
    [0.15, 0.55, 0.20],
    [0.15, 0.25, 0.70],
    [0.80, 0.70, 0.15],
    [0.55, 0.20, 0.60],
    [0.20, 0.60, 0.70],
    [0.75, 0.45, 0.15],
    [0.30, 0.30, 0.30],
];
const SKIN: [f64; 3] = [0.80, 0.62, 0.50];
const BACKDROP: [f64; 3] = [0.45, 0.45, 0.45];
const STRIPE_CYCLES: [f64; 3] = [0.0, 2.0, 3.5];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Corruption {
    None,
    BackgroundExcess,
    PartialLoss,
    /// Each sample draws excess background or partial loss with equal odds.
    Mixed,
}

impl FromStr for Corruption {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "none" => Corruption::None,
            "background_excess" => Corruption::BackgroundExcess,
            "partial_loss" => Corruption::PartialLoss,
            "mixed" => Corruption::Mixed,
            other => {
                return Err(Error::config(
                    "corruption",
                    format!("unknown corruption `{other}`"),
                ))
            }
        })
    }
}

impl fmt::Display for Corruption {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Corruption::None => "none",
            Corruption::BackgroundExcess => "background_excess",
            Corruption::PartialLoss => "partial_loss",
            Corruption::Mixed => "mixed",
        })
    }
}

/// Corruption actually applied to one sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorruptionKind {
    None,
    BackgroundExcess,
    PartialLoss,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub num_ids: usize,
    pub per_id: usize,
    pub height: usize,
    pub width: usize,
    pub corruption: Corruption,
    /// Figure scale for excess background.
    pub scale_range: (f64, f64),
    /// Normalized translation magnitude for partial loss.
    pub shift_range: (f64, f64),
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            num_ids: 10,
            per_id: 40,
            height: 64,
            width: 64,
            corruption: Corruption::Mixed,
            scale_range: (0.5, 0.95),
            shift_range: (0.1, 0.4),
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_ids < 2 {
            return Err(Error::config("num_ids", "need at least 2 identities"));
        }
        if self.per_id < 2 {
            return Err(Error::config("per_id", "need at least 2 samples per identity"));
        }
        if self.height < 2 || self.width < 2 {
            return Err(Error::config("height", "canvas must be at least 2x2"));
        }
        let (a, b) = self.scale_range;
        if !(0.0 < a && a <= b && b <= 1.0) {
            return Err(Error::config("scale_min", "need 0 < scale_min <= scale_max <= 1"));
        }
        let (a, b) = self.shift_range;
        if !(0.0 <= a && a <= b && b < 2.0) {
            return Err(Error::config("shift_min", "need 0 <= shift_min <= shift_max < 2"));
        }
        Ok(())
    }

    /// Parses a `key = value` spec file; absent keys keep their defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut spec = SynthSpec::default();
        for line in text.lines() {
            let line = line.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(line, "expected key = value"))?;
            let (k, v) = (k.trim(), v.trim());
            let num = |v: &str| -> Result<f64> {
                v.parse().map_err(|_| Error::config(k, "expected a number"))
            };
            let int = |v: &str| -> Result<usize> {
                v.parse().map_err(|_| Error::config(k, "expected an integer"))
            };
            match k {
                "num_ids" => spec.num_ids = int(v)?,
                "per_id" => spec.per_id = int(v)?,
                "height" => spec.height = int(v)?,
                "width" => spec.width = int(v)?,
                "corruption" => spec.corruption = v.parse()?,
                "scale_min" => spec.scale_range.0 = num(v)?,
                "scale_max" => spec.scale_range.1 = num(v)?,
                "shift_min" => spec.shift_range.0 = num(v)?,
                "shift_max" => spec.shift_range.1 = num(v)?,
                "seed" => {
                    spec.seed = v.parse().map_err(|_| Error::config(k, "expected a u64"))?
                }
                other => return Err(Error::config(other, "unknown synth spec key")),
            }
        }
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Debug, Clone)]
pub struct SynthSample {
    pub image: Tensor,
    /// Zero-based identity index.
    pub pid: usize,
    /// Market-style camera id, 1 or 2.
    pub camid: u32,
    pub split: Split,
    pub kind: CorruptionKind,
    /// Warp that produced the sample from the canonical figure.
    pub theta: AffineParams,
    /// Warp that maps the sample back onto the canonical figure.
    pub inverse: AffineParams,
    pub file_name: String,
}

impl SynthSample {
    pub fn gain(&self) -> f64 {
        CAMERA_GAIN[(self.camid - 1) as usize]
    }
}

#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub spec: SynthSpec,
    pub canonicals: Vec<Tensor>,
    pub samples: Vec<SynthSample>,
}

impl SynthDataset {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &SynthSample> {
        self.samples.iter().filter(move |s| s.split == split)
    }

    /// Writes the Market1501 layout plus `thetas.csv`.
    pub fn write(&self, root: &Path) -> Result<()> {
        for split in [Split::Train, Split::Query, Split::Gallery] {
            let dir = root.join(split.dir_name());
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        let csv_path = root.join("thetas.csv");
        let mut csv = std::fs::File::create(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
        let mut text = String::from(
            "filename,theta1,theta2,theta3,theta4,theta5,theta6,inv1,inv2,inv3,inv4,inv5,inv6\n",
        );
        for s in &self.samples {
            image::write_image(&root.join(s.split.dir_name()).join(&s.file_name), &s.image)?;
            text.push_str(&s.file_name);
            for v in s.theta.as_array().iter().chain(s.inverse.as_array().iter()) {
                text.push_str(&format!(",{v:.17e}"));
            }
            text.push('\n');
        }
        csv.write_all(text.as_bytes())
            .map_err(|e| Error::io(&csv_path, e))
    }
}

/// Reads `thetas.csv` into `(filename, theta, inverse)` rows.
pub fn read_thetas(path: &Path) -> Result<Vec<(String, AffineParams, AffineParams)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    let mut offset = 0;
    for (i, line) in text.lines().enumerate() {
        let line_start = offset;
        offset += line.len() + 1;
        if i == 0 || line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        let bad = |m: &str| Error::Format {
            path: path.to_path_buf(),
            offset: line_start,
            message: m.to_string(),
        };
        if cols.len() != 13 {
            return Err(bad("expected 13 columns"));
        }
        let vals: Vec<f64> = cols[1..]
            .iter()
            .map(|c| c.trim().parse().map_err(|_| bad("bad number")))
            .collect::<Result<_>>()?;
        rows.push((
            cols[0].to_string(),
            AffineParams::from_slice(&vals[..6])?,
            AffineParams::from_slice(&vals[6..])?,
        ));
    }
    Ok(rows)
}

fn smoothstep(edge0: f64, edge1: f64, x: f64) -> f64 {
    let t = ((x - edge0) / (edge1 - edge0)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Smooth indicator of `lo <= x <= hi` with transition width `soft`.
fn band(x: f64, lo: f64, hi: f64, soft: f64) -> f64 {
    smoothstep(lo - soft, lo + soft, x) * (1.0 - smoothstep(hi - soft, hi + soft, x))
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Appearance {
    upper: [f64; 3],
    lower: [f64; 3],
    stripes: f64,
}

fn appearances(num_ids: usize, seed: u64) -> Vec<Appearance> {
    let mut combos = Vec::new();
    for u in 0..PALETTE.len() {
        for l in 0..PALETTE.len() {
            if u == l {
                continue;
            }
            for &s in &STRIPE_CYCLES {
                combos.push(Appearance {
                    upper: PALETTE[u],
                    lower: PALETTE[l],
                    stripes: s,
                });
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_1d5);
    combos.shuffle(&mut rng);
    combos.into_iter().cycle().take(num_ids).collect()
}

fn render_figure(app: &Appearance, h: usize, w: usize) -> Tensor {
    let soft = 3.0 / (w.max(h) - 1) as f64;
    let mut out = Tensor::zeros(&[3, h, w]);
    let plane = h * w;
    let d = out.data_mut();
    for i in 0..h {
        let y = target_coord(i, h);
        for j in 0..w {
            let x = target_coord(j, w);
            let head = 1.0 - smoothstep(0.2 - soft, 0.2 + soft, (x * x + (y + 0.72) * (y + 0.72)).sqrt());
            let torso = band(x, -0.52, 0.52, soft) * band(y, -0.52, 0.15, soft);
            let legs = band(x, -0.42, 0.42, soft) * band(y, 0.15, 1.2, soft);
            let stripe = if app.stripes > 0.0 {
                1.0 - 0.35 * (0.5 + 0.5 * (std::f64::consts::PI * app.stripes * (y + 0.52)).sin())
            } else {
                1.0
            };
            for c in 0..3 {
                let mut v = BACKDROP[c];
                v = v * (1.0 - head) + SKIN[c] * head;
                v = v * (1.0 - torso) + app.upper[c] * stripe * torso;
                v = v * (1.0 - legs) + app.lower[c] * legs;
                d[c * plane + i * w + j] = v.min(0.85);
            }
        }
    }
    out
}

/// The canonical (aligned, uncorrupted, unit-gain) image of every identity.
pub fn canonical_people(num_ids: usize, h: usize, w: usize, seed: u64) -> Vec<Tensor> {
    appearances(num_ids, seed)
        .iter()
        .map(|a| render_figure(a, h, w))
        .collect()
}

/// Smooth random blobs in palette colours over the backdrop.
pub fn clutter<R: Rng + ?Sized>(h: usize, w: usize, rng: &mut R) -> Tensor {
    let blobs: Vec<(f64, f64, f64, [f64; 3])> = (0..8)
        .map(|_| {
            (
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(0.15..0.4),
                PALETTE[rng.random_range(0..PALETTE.len())],
            )
        })
        .collect();
    let plane = h * w;
    let mut out = Tensor::zeros(&[3, h, w]);
    let d = out.data_mut();
    for i in 0..h {
        let y = target_coord(i, h);
        for j in 0..w {
            let x = target_coord(j, w);
            let mut v = BACKDROP;
            for &(bx, by, sigma, color) in &blobs {
                let a = 0.9 * (-((x - bx).powi(2) + (y - by).powi(2)) / (2.0 * sigma * sigma)).exp();
                for c in 0..3 {
                    v[c] = v[c] * (1.0 - a) + color[c] * a;
                }
            }
            for c in 0..3 {
                d[c * plane + i * w + j] = v[c].min(0.85);
            }
        }
    }
    out
}

fn scale_image(img: &Tensor, gain: f64) -> Tensor {
    let mut out = img.clone();
    out.data_mut().iter_mut().for_each(|v| *v *= gain);
    out
}

fn corrupt<R: Rng + ?Sized>(
    canonical: &Tensor,
    kind: CorruptionKind,
    spec: &SynthSpec,
    rng: &mut R,
) -> Result<(Tensor, AffineParams, AffineParams)> {
    let (h, w) = (spec.height, spec.width);
    match kind {
        CorruptionKind::None => Ok((
            canonical.clone(),
            AffineParams::identity(),
            AffineParams::identity(),
        )),
        CorruptionKind::BackgroundExcess => {
            let s = rng.random_range(spec.scale_range.0..=spec.scale_range.1);
            let theta = AffineParams::scale(1.0 / s);
            let figure = affine::warp(canonical, &theta, h, w)?;
            let mask = affine::warp(&Tensor::full(&[1, h, w], 1.0), &theta, h, w)?;
            let scene = clutter(h, w, rng);
            let plane = h * w;
            let mut out = figure;
            let (od, sd, md) = (out.data_mut(), scene.data(), mask.data());
            for c in 0..3 {
                for p in 0..plane {
                    let m = md[p];
                    od[c * plane + p] += (1.0 - m) * sd[c * plane + p];
                }
            }
            Ok((out, theta, AffineParams::scale(s)))
        }
        CorruptionKind::PartialLoss => {
            let mag = rng.random_range(spec.shift_range.0..=spec.shift_range.1);
            let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            let (dx, dy) = if rng.random_bool(0.5) {
                (sign * mag, 0.0)
            } else {
                (0.0, sign * mag)
            };
            let theta = AffineParams::translation(dx, dy);
            let out = affine::warp(canonical, &theta, h, w)?;
            Ok((out, theta, AffineParams::translation(-dx, -dy)))
        }
    }
}

/// Generates the dataset. Per identity, the first half of the samples is
/// training data; of the second half the first sample from each camera is a
/// query and the rest gallery. Even sample indices come from camera 1.
pub fn generate_synthetic(spec: &SynthSpec) -> Result<SynthDataset> {
    spec.validate()?;
    let canonicals = canonical_people(spec.num_ids, spec.height, spec.width, spec.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let train_per_id = spec.per_id / 2;
    let mut samples = Vec::with_capacity(spec.num_ids * spec.per_id);
    for (pid, canonical) in canonicals.iter().enumerate() {
        let mut queried = [false; 2];
        for k in 0..spec.per_id {
            let camid = (k % 2) as u32 + 1;
            let kind = match spec.corruption {
                Corruption::None => CorruptionKind::None,
                Corruption::BackgroundExcess => CorruptionKind::BackgroundExcess,
                Corruption::PartialLoss => CorruptionKind::PartialLoss,
                Corruption::Mixed => {
                    if rng.random_bool(0.5) {
                        CorruptionKind::BackgroundExcess
                    } else {
                        CorruptionKind::PartialLoss
                    }
                }
            };
            let (img, theta, inverse) = corrupt(canonical, kind, spec, &mut rng)?;
            let image = scale_image(&img, CAMERA_GAIN[(camid - 1) as usize]);
            let split = if k < train_per_id {
                Split::Train
            } else if !queried[(camid - 1) as usize] {
                queried[(camid - 1) as usize] = true;
                Split::Query
            } else {
                Split::Gallery
            };
            let name = MarketName {
                pid: pid as i64 + 1,
                camid,
                seq: 1,
                frame: (pid * spec.per_id + k) as u32,
                bbox: 0,
            };
            samples.push(SynthSample {
                image,
                pid,
                camid,
                split,
                kind,
                theta,
                inverse,
                file_name: format_market_name(&name, "ppm"),
            });
        }
    }
    Ok(SynthDataset {
        spec: spec.clone(),
        canonicals,
        samples,
    })
}

/// Mean absolute difference between the inverse-warped sample and its
/// gain-adjusted canonical figure, over pixels whose content survived the
/// corruption (partial loss removes part of the figure for good).
pub fn recovery_error(sample: &SynthSample, canonical: &Tensor) -> Result<f64> {
    let &[_, h, w] = canonical.shape() else {
        return Err(Error::dim("canonical must be [3, H, W]"));
    };
    let recovered = affine::warp(&sample.image, &sample.inverse, h, w)?;
    let ones = Tensor::full(&[1, h, w], 1.0);
    let valid = affine::warp(
        &affine::warp(&ones, &sample.theta, h, w)?,
        &sample.inverse,
        h,
        w,
    )?;
    let gain = sample.gain();
    let plane = h * w;
    let (mut total, mut count) = (0.0, 0usize);
    for p in 0..plane {
        if valid.data()[p] < 1.0 - 1e-9 {
            continue;
        }
        for c in 0..3 {
            total += (recovered.data()[c * plane + p] - gain * canonical.data()[c * plane + p]).abs();
            count += 1;
        }
    }
    Ok(if count == 0 { 0.0 } else { total / count as f64 })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(corruption: Corruption, seed: u64) -> SynthSpec {
        SynthSpec {
            num_ids: 4,
            per_id: 6,
            corruption,
            seed,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn uncorrupted_samples_differ_only_by_gain() {
        let ds = generate_synthetic(&small(Corruption::None, 1)).unwrap();
        for s in &ds.samples {
            let expect = scale_image(&ds.canonicals[s.pid], s.gain());
            assert!(s.image.max_abs_diff(&expect) < 1e-15);
        }
    }

    #[test]
    fn stored_inverse_recovers_canonical() {
        let ds = generate_synthetic(&small(Corruption::Mixed, 2)).unwrap();
        for s in &ds.samples {
            let err = recovery_error(s, &ds.canonicals[s.pid]).unwrap();
            assert!(err < 0.02, "{:?}: {err}", s.kind);
            let round = AffineParams::compose(&s.theta, &s.inverse);
            assert!(round.mean_abs_diff(&AffineParams::identity()) < 1e-12);
        }
    }

    #[test]
    fn split_layout() {
        let ds = generate_synthetic(&small(Corruption::Mixed, 3)).unwrap();
        assert_eq!(ds.split(Split::Train).count(), 12);
        assert_eq!(ds.split(Split::Query).count(), 8);
        assert_eq!(ds.split(Split::Gallery).count(), 4);
        assert!(ds.samples.iter().all(|s| s.image.data().iter().all(|&v| (0.0..=1.0).contains(&v))));
    }

    #[test]
    fn identities_are_separable() {
        for seed in 0..10 {
            let spec = SynthSpec {
                num_ids: 10,
                per_id: 4,
                corruption: Corruption::None,
                seed,
                ..SynthSpec::default()
            };
            let ds = generate_synthetic(&spec).unwrap();
            let dist = |a: &Tensor, b: &Tensor| {
                a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
            };
            let mut between = (0.0, 0);
            for i in 0..10 {
                for j in i + 1..10 {
                    between.0 += dist(&ds.canonicals[i], &ds.canonicals[j]);
                    between.1 += 1;
                }
            }
            let mut within = (0.0, 0);
            for a in &ds.samples {
                for b in &ds.samples {
                    if a.pid == b.pid && a.file_name < b.file_name {
                        within.0 += dist(&a.image, &b.image);
                        within.1 += 1;
                    }
                }
            }
            assert!(between.0 / between.1 as f64 > within.0 / within.1 as f64, "seed {seed}");
        }
    }

    #[test]
    fn spec_parsing() {
        let s = SynthSpec::parse("num_ids = 5\ncorruption = partial_loss # comment\nseed=9\n").unwrap();
        assert_eq!(s.num_ids, 5);
        assert_eq!(s.corruption, Corruption::PartialLoss);
        assert_eq!(s.seed, 9);
        assert!(SynthSpec::parse("bogus = 1").is_err());
        assert!(SynthSpec::parse("num_ids = 1").is_err());
    }

    #[test]
    fn deterministic_per_seed() {
        let a = generate_synthetic(&small(Corruption::Mixed, 5)).unwrap();
        let b = generate_synthetic(&small(Corruption::Mixed, 5)).unwrap();
        for (x, y) in a.samples.iter().zip(&b.samples) {
            assert_eq!(x.image, y.image);
            assert_eq!(x.theta, y.theta);
        }
    }
}
