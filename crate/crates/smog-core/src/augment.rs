//! Asymmetric alternating multi-crop augmentation. Each image yields two
//! large views and M small views per iteration; the two Siamese streams swap
//! augmentation schemes every iteration, and every random draw derives from
//! (run seed, iteration, image index, view), so the pipeline is a pure
//! function of its inputs.

use alloc::vec::Vec;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{CoreError, Result};
use crate::image::ImageBuf;
use crate::rng::{derive, Stream};

/// One augmentation scheme (BYOL-style constants by default).
#[derive(Debug, Clone)]
pub struct AugScheme {
    pub flip_p: f64,
    /// brightness / contrast / saturation strengths
    pub jitter: (f64, f64, f64),
    pub blur_p: f64,
    pub blur_sigma: (f64, f64),
    pub solarize_p: f64,
}

impl AugScheme {
    /// Blur-heavy scheme.
    pub fn scheme_a() -> Self {
        AugScheme {
            flip_p: 0.5,
            jitter: (0.4, 0.4, 0.2),
            blur_p: 1.0,
            blur_sigma: (0.1, 0.5),
            solarize_p: 0.0,
        }
    }

    /// Solarize-heavy scheme.
    pub fn scheme_b() -> Self {
        AugScheme {
            flip_p: 0.5,
            jitter: (0.4, 0.4, 0.2),
            blur_p: 0.1,
            blur_sigma: (0.1, 0.5),
            solarize_p: 0.2,
        }
    }

    /// No-op scheme, for tests.
    pub fn identity() -> Self {
        AugScheme {
            flip_p: 0.0,
            jitter: (0.0, 0.0, 0.0),
            blur_p: 0.0,
            blur_sigma: (0.1, 0.1),
            solarize_p: 0.0,
        }
    }
}

/// View-generation configuration.
#[derive(Debug, Clone)]
pub struct AugConfig {
    pub large_size: usize,
    pub small_size: usize,
    pub n_small: usize,
    pub large_scale: (f64, f64),
    pub small_scale: (f64, f64),
    pub scheme_a: AugScheme,
    pub scheme_b: AugScheme,
}

impl AugConfig {
    pub fn desk_default() -> Self {
        AugConfig {
            large_size: 32,
            small_size: 12,
            n_small: 4,
            large_scale: (0.5, 1.0),
            small_scale: (0.15, 0.5),
            scheme_a: AugScheme::scheme_a(),
            scheme_b: AugScheme::scheme_b(),
        }
    }
}

/// Augmented crops of one image for one iteration.
#[derive(Debug, Clone)]
pub struct ViewBatch {
    pub large: [ImageBuf; 2],
    pub small: Vec<ImageBuf>,
    /// Which scheme stream 0 received this iteration (flips with parity).
    pub parity: bool,
}

/// Scheme for a Siamese stream under the iteration's parity: stream 0 gets
/// scheme A on even iterations and scheme B on odd ones, stream 1 the
/// opposite.
pub fn stream_uses_scheme_a(iteration: u64, stream: usize) -> bool {
    (iteration % 2 == 0) == (stream % 2 == 0)
}

fn scheme_of<'a>(cfg: &'a AugConfig, iteration: u64, stream: usize) -> &'a AugScheme {
    if stream_uses_scheme_a(iteration, stream) {
        &cfg.scheme_a
    } else {
        &cfg.scheme_b
    }
}

/// Integer crop box with the area fraction guaranteed inside `scale`.
/// The height is drawn from the feasible row range, then the width from the
/// range keeping ch·cw within the target area band.
pub fn sample_crop_box(
    h: usize,
    w: usize,
    scale: (f64, f64),
    rng: &mut ChaCha8Rng,
) -> (usize, usize, usize, usize) {
    let area = (h * w) as f64;
    let ch_lo = libm::ceil(h as f64 * libm::sqrt(scale.0)).max(1.0) as usize;
    let ch_hi = (libm::floor(h as f64 * libm::sqrt(scale.1)) as usize).min(h);
    let ch = if ch_lo >= ch_hi {
        ch_lo.min(h)
    } else {
        rng.random_range(ch_lo..=ch_hi)
    };
    let cw_lo = (libm::ceil(scale.0 * area / ch as f64).max(1.0) as usize).min(w);
    let cw_hi = (libm::floor(scale.1 * area / ch as f64) as usize).clamp(cw_lo, w);
    let cw = if cw_lo >= cw_hi {
        cw_lo
    } else {
        rng.random_range(cw_lo..=cw_hi)
    };
    let top = rng.random_range(0..=h - ch);
    let left = rng.random_range(0..=w - cw);
    (top, left, ch, cw)
}

/// Photometric pipeline: flip → jitter → blur → solarize, clamped to [0,1]
/// after every stage.
pub fn apply_scheme(view: &ImageBuf, scheme: &AugScheme, rng: &mut ChaCha8Rng) -> ImageBuf {
    let mut img = if scheme.flip_p > 0.0 && rng.random_range(0.0..1.0) < scheme.flip_p {
        view.flip_horizontal()
    } else {
        view.clone()
    };
    img.clamp01();

    let (bs, cs, ss) = scheme.jitter;
    if bs > 0.0 {
        let f = rng.random_range(1.0 - bs..1.0 + bs);
        for v in img.data.iter_mut() {
            *v *= f;
        }
        img.clamp01();
    }
    if cs > 0.0 {
        let f = rng.random_range(1.0 - cs..1.0 + cs);
        let mean = img.data.iter().sum::<f64>() / img.data.len() as f64;
        for v in img.data.iter_mut() {
            *v = mean + (*v - mean) * f;
        }
        img.clamp01();
    }
    if ss > 0.0 && img.channels >= 2 {
        let f = rng.random_range(1.0 - ss..1.0 + ss);
        let px = img.height * img.width;
        for p in 0..px {
            let mut gray = 0.0;
            for c in 0..img.channels {
                gray += img.data[c * px + p];
            }
            gray /= img.channels as f64;
            for c in 0..img.channels {
                let v = &mut img.data[c * px + p];
                *v = gray + (*v - gray) * f;
            }
        }
        img.clamp01();
    }

    if scheme.blur_p > 0.0 && rng.random_range(0.0..1.0) < scheme.blur_p {
        let sigma = rng.random_range(scheme.blur_sigma.0..=scheme.blur_sigma.1);
        img = gaussian_blur(&img, sigma);
        img.clamp01();
    }

    if scheme.solarize_p > 0.0 && rng.random_range(0.0..1.0) < scheme.solarize_p {
        for v in img.data.iter_mut() {
            if *v > 0.5 {
                *v = 1.0 - *v;
            }
        }
        img.clamp01();
    }
    img
}

/// Normalized separable Gaussian kernel for the given sigma.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = libm::ceil(2.5 * sigma).max(1.0) as usize;
    let mut k: Vec<f64> = (0..=2 * radius)
        .map(|i| {
            let x = i as f64 - radius as f64;
            libm::exp(-x * x / (2.0 * sigma * sigma))
        })
        .collect();
    let sum: f64 = k.iter().sum();
    for v in k.iter_mut() {
        *v /= sum;
    }
    k
}

fn gaussian_blur(img: &ImageBuf, sigma: f64) -> ImageBuf {
    let k = gaussian_kernel(sigma);
    let radius = k.len() / 2;
    let (h, w) = (img.height as isize, img.width as isize);
    let mut tmp = img.clone();
    // horizontal
    for c in 0..img.channels {
        for y in 0..img.height {
            for x in 0..img.width {
                let mut acc = 0.0;
                for (i, &kv) in k.iter().enumerate() {
                    let sx = (x as isize + i as isize - radius as isize).clamp(0, w - 1);
                    acc += kv * img.get(c, y, sx as usize);
                }
                tmp.set(c, y, x, acc);
            }
        }
    }
    // vertical
    let mut out = tmp.clone();
    for c in 0..img.channels {
        for y in 0..img.height {
            for x in 0..img.width {
                let mut acc = 0.0;
                for (i, &kv) in k.iter().enumerate() {
                    let sy = (y as isize + i as isize - radius as isize).clamp(0, h - 1);
                    acc += kv * tmp.get(c, sy as usize, x);
                }
                out.set(c, y, x, acc);
            }
        }
    }
    out
}

/// Produce this iteration's views of one image. Fully determined by
/// (seed, iteration, image_index).
pub fn make_views(
    image: &ImageBuf,
    image_index: u64,
    iteration: u64,
    seed: u64,
    cfg: &AugConfig,
) -> Result<ViewBatch> {
    let min = cfg.small_size.min(cfg.large_size);
    if image.height < min || image.width < min {
        return Err(CoreError::ImageTooSmall {
            h: image.height,
            w: image.width,
            min,
        });
    }
    let make = |view_id: u64, out_size: usize, scale: (f64, f64), stream: usize| {
        let mut rng = derive(seed, Stream::Augment, &[iteration, image_index, view_id]);
        let (top, left, ch, cw) = sample_crop_box(image.height, image.width, scale, &mut rng);
        let crop = image.crop_resize(top, left, ch, cw, out_size);
        apply_scheme(&crop, scheme_of(cfg, iteration, stream), &mut rng)
    };
    let large = [
        make(0, cfg.large_size, cfg.large_scale, 0),
        make(1, cfg.large_size, cfg.large_scale, 1),
    ];
    let small = (0..cfg.n_small)
        .map(|i| make(2 + i as u64, cfg.small_size, cfg.small_scale, i % 2))
        .collect();
    Ok(ViewBatch {
        large,
        small,
        parity: iteration % 2 == 1,
    })
}
