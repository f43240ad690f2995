//! Training-time augmentation: horizontal flip, pad-then-crop, random erasing.

use rand::Rng;

use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct AugConfig {
    pub flip_p: f64,
    /// Zero padding added on every side before the random crop; 0 disables the stage.
    pub crop_pad: usize,
    pub erase_p: f64,
    /// Erased area as a fraction of the image.
    pub erase_area: (f64, f64),
    pub erase_aspect: (f64, f64),
    /// Per-channel fill value, normally the dataset mean.
    pub erase_fill: [f64; 3],
}

impl Default for AugConfig {
    fn default() -> Self {
        AugConfig {
            flip_p: 0.5,
            crop_pad: 10,
            erase_p: 0.5,
            erase_area: (0.02, 0.2),
            erase_aspect: (0.3, 3.3),
            erase_fill: [0.485, 0.456, 0.406],
        }
    }
}

impl AugConfig {
    pub fn disabled() -> Self {
        AugConfig {
            flip_p: 0.0,
            crop_pad: 0,
            erase_p: 0.0,
            ..AugConfig::default()
        }
    }

    pub fn is_identity(&self) -> bool {
        self.flip_p == 0.0 && self.crop_pad == 0 && self.erase_p == 0.0
    }
}

/// Erased rectangle `(top, left, height, width)`.
pub type Rect = (usize, usize, usize, usize);

fn dims(img: &Tensor) -> (usize, usize, usize) {
    let &[c, h, w] = img.shape() else {
        panic!("augmentation expects a [C, H, W] image, got {:?}", img.shape())
    };
    (c, h, w)
}

pub fn hflip(img: &Tensor) -> Tensor {
    let (_, _, w) = dims(img);
    let mut out = img.clone();
    for row in out.data_mut().chunks_mut(w) {
        row.reverse();
    }
    out
}

/// Zero-pads by `pad` on every side, then crops back to the original size at `(top, left)`.
pub fn pad_crop(img: &Tensor, pad: usize, top: usize, left: usize) -> Tensor {
    let (c, h, w) = dims(img);
    let src = img.data();
    Tensor::from_fn(&[c, h, w], |idx| {
        let ch = idx / (h * w);
        let i = (idx / w) % h;
        let j = idx % w;
        let (si, sj) = ((i + top) as isize - pad as isize, (j + left) as isize - pad as isize);
        if si < 0 || sj < 0 || si as usize >= h || sj as usize >= w {
            0.0
        } else {
            src[(ch * h + si as usize) * w + sj as usize]
        }
    })
}

pub fn erase(img: &Tensor, rect: Rect, fill: &[f64; 3]) -> Tensor {
    let (c, h, w) = dims(img);
    let (top, left, eh, ew) = rect;
    let mut out = img.clone();
    let d = out.data_mut();
    for ch in 0..c {
        for i in top..(top + eh).min(h) {
            for j in left..(left + ew).min(w) {
                d[(ch * h + i) * w + j] = fill[ch.min(2)];
            }
        }
    }
    out
}

/// Samples an erasing rectangle with area in `cfg.erase_area`; `None` if no
/// candidate fits within 100 attempts.
pub fn sample_erase_rect<R: Rng + ?Sized>(h: usize, w: usize, cfg: &AugConfig, rng: &mut R) -> Option<Rect> {
    let area = (h * w) as f64;
    for _ in 0..100 {
        let target = area * rng.random_range(cfg.erase_area.0..=cfg.erase_area.1);
        let aspect = rng.random_range(cfg.erase_aspect.0..=cfg.erase_aspect.1);
        let eh = (target * aspect).sqrt().round() as usize;
        let ew = (target / aspect).sqrt().round() as usize;
        if eh >= 1 && ew >= 1 && eh < h && ew < w {
            let top = rng.random_range(0..=h - eh);
            let left = rng.random_range(0..=w - ew);
            return Some((top, left, eh, ew));
        }
    }
    None
}

/// Applies the enabled stages in order flip, crop, erase.
pub fn augment<R: Rng + ?Sized>(img: &Tensor, cfg: &AugConfig, rng: &mut R) -> Tensor {
    let (_, h, w) = dims(img);
    let mut out = img.clone();
    if cfg.flip_p > 0.0 && rng.random_bool(cfg.flip_p.min(1.0)) {
        out = hflip(&out);
    }
    if cfg.crop_pad > 0 {
        let top = rng.random_range(0..=2 * cfg.crop_pad);
        let left = rng.random_range(0..=2 * cfg.crop_pad);
        out = pad_crop(&out, cfg.crop_pad, top, left);
    }
    if cfg.erase_p > 0.0 && rng.random_bool(cfg.erase_p.min(1.0)) {
        if let Some(rect) = sample_erase_rect(h, w, cfg, rng) {
            out = erase(&out, rect, &cfg.erase_fill);
        }
    }
    out
}
