//! Synthetic dataset generation and the single-file binary dataset format.
//!
//! Label separation: the training path only ever sees `Dataset::images()`;
//! labels are reachable solely through `eval_labels()`, which the pretraining
//! loop never calls.

use std::fs;
use std::path::Path;

use smog_core::image::ImageBuf;
use smog_core::rng::{derive, Stream};

use rand::Rng;

const MAGIC: &[u8; 4] = b"SMG1";
const CHANNELS: usize = 3;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic at byte 0: not an SMG1 dataset")]
    BadMagic,
    #[error("truncated file: needed {needed} more bytes at byte {offset}")]
    Truncated { offset: usize, needed: usize },
    #[error("label {label} out of range (classes={classes}) at index {index}")]
    LabelRange {
        label: u16,
        classes: u16,
        index: usize,
    },
    #[error("invalid dataset parameters: {0}")]
    Config(String),
}

/// In-memory dataset. Images are f64 in [0,1]; the file stores f32.
pub struct Dataset {
    images: Vec<ImageBuf>,
    labels: Vec<u16>,
    class_count: u16,
}

impl Dataset {
    pub fn new(images: Vec<ImageBuf>, labels: Vec<u16>, class_count: u16) -> Result<Self, DataError> {
        if images.len() != labels.len() {
            return Err(DataError::Config(format!(
                "{} images but {} labels",
                images.len(),
                labels.len()
            )));
        }
        for (index, &label) in labels.iter().enumerate() {
            if label >= class_count {
                return Err(DataError::LabelRange {
                    label,
                    classes: class_count,
                    index,
                });
            }
        }
        Ok(Dataset {
            images,
            labels,
            class_count,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// The only view the pretraining loop consumes.
    pub fn images(&self) -> &[ImageBuf] {
        &self.images
    }

    /// Evaluation-side label access; never used while pretraining.
    pub fn eval_labels(&self) -> &[u16] {
        &self.labels
    }

    pub fn class_count(&self) -> u16 {
        self.class_count
    }
}

// ---------------------------------------------------------------------------
// synthetic generation

/// Render one image of class `class`.
///
/// Each class is the union of two visually distinct modes, so every class is
/// a two-mode mixture over (texture family, spatial-frequency band): class 0
/// pairs coarse stripes with a fine checkerboard, class 1 the reverse, and
/// classes 2/3 pair ring patterns with blob fields the same way. Both
/// family identity and frequency band are therefore shared across classes,
/// so no linear function of generic low-level statistics separates the
/// classes; only representing the modes themselves does. Each mode is a
/// tight cluster (fixed phase, near-fixed layouts, narrow jitter), so
/// grouping methods can isolate the modes cleanly. The sinusoidal families
/// (stripes, rings) use a wider band split than the checkerboard because
/// contrast inversion of a bright sinusoid doubles its apparent frequency,
/// which would otherwise bridge the bands.
fn render(class: u16, size: usize, noise: f64, rng: &mut impl Rng) -> ImageBuf {
    let mode = rng.random_range(0..2u8);
    let mut img = ImageBuf::zeros(CHANNELS, size, size);
    let s = size as f64;

    let coarse = 3.0 + rng.random_range(-0.05..0.05);
    let fine = 9.0 + rng.random_range(-0.1..0.1);
    let (family, freq) = match (class % 4, mode) {
        (0, 0) => (0u8, coarse), // stripes, coarse
        (0, _) => (1u8, fine),   // checker, fine
        (1, 0) => (0u8, fine),   // stripes, fine
        (1, _) => (1u8, coarse), // checker, coarse
        (2, 0) => (3u8, coarse), // rings, coarse
        (2, _) => (2u8, fine),   // blobs, small + many
        (3, 0) => (3u8, fine),   // rings, fine
        (_, _) => (2u8, coarse), // blobs, large + few
    };

    let phase = 0.7;
    let (cx, cy) = (
        s * rng.random_range(0.48..0.52),
        s * rng.random_range(0.48..0.52),
    );
    // blob fields: small+many vs large+few, near-fixed layouts
    let (layout, sigma): (&[(f64, f64)], f64) = if freq > 6.0 {
        (
            &[(0.25, 0.25), (0.70, 0.30), (0.30, 0.70), (0.65, 0.72), (0.48, 0.48)],
            0.07,
        )
    } else {
        (&[(0.32, 0.38), (0.66, 0.62)], 0.16)
    };
    let blobs: Vec<(f64, f64, f64)> = layout
        .iter()
        .map(|&(bx, by)| {
            (
                s * (bx + rng.random_range(-0.02..0.02)),
                s * (by + rng.random_range(-0.02..0.02)),
                s * sigma * rng.random_range(0.95..1.05),
            )
        })
        .collect();
    let angle = std::f64::consts::FRAC_PI_4;
    let (ca, sa) = (angle.cos(), angle.sin());
    // mild photometric jitter, well inside the reach of train-time
    // augmentation so it cannot serve as a stable instance signature
    let amp = rng.random_range(0.40..0.45);
    let base = rng.random_range(0.46..0.50);
    let gains: Vec<f64> = (0..CHANNELS).map(|_| rng.random_range(0.92..1.0)).collect();
    let tau = std::f64::consts::TAU;

    for y in 0..size {
        for x in 0..size {
            let (xf, yf) = (x as f64, y as f64);
            let v = match family {
                0 => {
                    // square-wave stripes
                    let w = ((xf * ca + yf * sa) * freq * tau / s + phase).sin();
                    if w >= 0.0 {
                        base + amp
                    } else {
                        base - amp
                    }
                }
                1 => {
                    // checkerboard
                    let cell = s / (2.0 * freq);
                    let ix = ((xf + phase) / cell).floor() as i64;
                    let iy = ((yf + phase * 0.7) / cell).floor() as i64;
                    if (ix + iy) % 2 == 0 {
                        base - amp
                    } else {
                        base + amp
                    }
                }
                2 => {
                    // gaussian blob field
                    let mut acc: f64 = base - amp * 0.6;
                    for &(bx, by, sg) in &blobs {
                        let d2 = (xf - bx).powi(2) + (yf - by).powi(2);
                        acc += 1.6 * amp * (-d2 / (2.0 * sg * sg)).exp();
                    }
                    acc.min(1.0)
                }
                _ => {
                    // concentric rings (square-wave annuli)
                    let r = ((xf - cx).powi(2) + (yf - cy).powi(2)).sqrt();
                    if (r * freq * tau / s + phase).sin() >= 0.0 {
                        base + amp
                    } else {
                        base - amp
                    }
                }
            };
            for c in 0..CHANNELS {
                img.set(c, y, x, gains[c] * v);
            }
        }
    }
    if noise > 0.0 {
        for v in img.data.iter_mut() {
            *v += rng.random_range(-noise..noise);
        }
    }
    img.clamp01();
    img
}

/// Balanced, deterministic synthetic dataset.
pub fn gen_synthetic(
    classes: u16,
    per_class: usize,
    size: usize,
    noise: f64,
    seed: u64,
) -> Result<Dataset, DataError> {
    if classes < 2 {
        return Err(DataError::Config(format!("need >= 2 classes, got {classes}")));
    }
    if size < 16 {
        return Err(DataError::Config(format!("image size {size} < 16")));
    }
    let workers = worker_count();
    let total = classes as usize * per_class;
    let mut images: Vec<Option<ImageBuf>> = vec![None; total];
    // each image is derived independently, so splitting by index across
    // worker threads cannot change the result
    std::thread::scope(|scope| {
        for (w, chunk) in images.chunks_mut(total.div_ceil(workers).max(1)).enumerate() {
            let base = w * total.div_ceil(workers).max(1);
            scope.spawn(move || {
                for (off, slot) in chunk.iter_mut().enumerate() {
                    let i = base + off;
                    let class = (i / per_class.max(1)) as u16;
                    let idx = (i % per_class.max(1)) as u64;
                    let mut rng = derive(seed, Stream::Synthesis, &[class as u64, idx]);
                    *slot = Some(render(class, size, noise, &mut rng));
                }
            });
        }
    });
    let images: Vec<ImageBuf> = images.into_iter().map(|i| i.unwrap()).collect();
    let labels: Vec<u16> = (0..total).map(|i| (i / per_class.max(1)) as u16).collect();
    Dataset::new(images, labels, classes)
}

/// Worker pool size: SMOG_THREADS if set, else available parallelism.
pub fn worker_count() -> usize {
    std::env::var("SMOG_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or_else(|| {
            std::thread::available_parallelism()
                .map(|n| n.get())
                .unwrap_or(1)
        })
}

// ---------------------------------------------------------------------------
// binary format

pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<(), DataError> {
    let (c, h, w) = ds
        .images
        .first()
        .map(|i| (i.channels, i.height, i.width))
        .unwrap_or((CHANNELS, 0, 0));
    let mut buf = Vec::with_capacity(24 + ds.len() * c * h * w * 4 + ds.len() * 2);
    buf.extend_from_slice(MAGIC);
    for v in [ds.len() as u32, c as u32, h as u32, w as u32, ds.class_count as u32] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for img in &ds.images {
        for &v in &img.data {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    for &l in &ds.labels {
        buf.extend_from_slice(&l.to_le_bytes());
    }
    fs::write(path, buf)?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    offset: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], DataError> {
        if self.offset + n > self.buf.len() {
            return Err(DataError::Truncated {
                offset: self.buf.len(),
                needed: self.offset + n - self.buf.len(),
            });
        }
        let out = &self.buf[self.offset..self.offset + n];
        self.offset += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32, DataError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn load_dataset(path: &Path) -> Result<Dataset, DataError> {
    let buf = fs::read(path)?;
    let mut r = Reader { buf: &buf, offset: 0 };
    if r.take(4)? != MAGIC {
        return Err(DataError::BadMagic);
    }
    let n = r.u32()? as usize;
    let c = r.u32()? as usize;
    let h = r.u32()? as usize;
    let w = r.u32()? as usize;
    let classes = r.u32()? as u16;
    let per_image = c * h * w;
    let mut images = Vec::with_capacity(n);
    for _ in 0..n {
        let bytes = r.take(per_image * 4)?;
        let mut img = ImageBuf::zeros(c, h, w);
        for (v, chunk) in img.data.iter_mut().zip(bytes.chunks_exact(4)) {
            *v = f32::from_le_bytes(chunk.try_into().unwrap()) as f64;
        }
        images.push(img);
    }
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let bytes = r.take(2)?;
        labels.push(u16::from_le_bytes(bytes.try_into().unwrap()));
    }
    Dataset::new(images, labels, classes)
}
