//! Synthetic ultrasound-like segmentation data, PGM I/O and resizing.
//!
//! Every sample draws from its own ChaCha8 stream: the generator is keyed by
//! the dataset seed and the stream number is the sample index, so samples can
//! be produced in any order or in parallel with identical results.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::parse;
use crate::tensor::{resize_bilinear, Scalar, Tensor};

/// Caps the worker count of [`generate`] when set.
pub const THREADS_ENV: &str = "AXIALSEG_THREADS";

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    /// `[1, 1, I, I]`, values on the 8-bit grid `k / 255`.
    pub image: Tensor<f32>,
    /// `[1, 1, I, I]`, values in `{0, 1}`.
    pub mask: Tensor<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub n_samples: usize,
    pub img_size: usize,
    pub seed: u64,
    /// Inclusive range of ellipses per image.
    pub blob_count_range: (usize, usize),
    /// Inclusive range of ellipse semi-axes as a fraction of the image side.
    pub blob_axes_range: (f64, f64),
    pub speckle_sigma: f64,
    /// Side in pixels of one background texture cell.
    pub background_texture_scale: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_samples: 32,
            img_size: 64,
            seed: 0,
            blob_count_range: (1, 3),
            blob_axes_range: (0.1, 0.3),
            speckle_sigma: 0.15,
            background_texture_scale: 8,
        }
    }
}

const BACKGROUND: (f64, f64) = (0.05, 0.3);
const FOREGROUND: (f64, f64) = (0.6, 0.9);

impl SynthSpec {
    pub const KEYS: [&'static str; 6] = [
        "n_samples",
        "blob_count_range",
        "blob_axes_range",
        "speckle_sigma",
        "background_texture_scale",
        "data_seed",
    ];

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: &str| Err(Error::Config(msg.to_string()));
        let (c0, c1) = self.blob_count_range;
        let (a0, a1) = self.blob_axes_range;
        if self.img_size == 0 {
            return fail("img_size must be positive");
        }
        if c0 > c1 {
            return fail("blob_count_range must satisfy min <= max");
        }
        if !(a0 > 0.0 && a0 <= a1 && a1 <= 0.5) {
            return fail("blob_axes_range must satisfy 0 < min <= max <= 0.5");
        }
        if !(self.speckle_sigma >= 0.0 && self.speckle_sigma.is_finite()) {
            return fail("speckle_sigma must be finite and non-negative");
        }
        if self.background_texture_scale == 0 {
            return fail("background_texture_scale must be positive");
        }
        Ok(())
    }

    /// Apply one `key=value` setting. `img_size` is owned by the model config
    /// and copied in by the caller. Returns `Ok(false)` for foreign keys.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "n_samples" => self.n_samples = parse(key, value)?,
            "blob_count_range" => self.blob_count_range = parse_pair(key, value)?,
            "blob_axes_range" => self.blob_axes_range = parse_pair(key, value)?,
            "speckle_sigma" => self.speckle_sigma = parse(key, value)?,
            "background_texture_scale" => self.background_texture_scale = parse(key, value)?,
            "data_seed" => self.seed = parse(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let (c0, c1) = self.blob_count_range;
        let (a0, a1) = self.blob_axes_range;
        vec![
            ("n_samples", self.n_samples.to_string()),
            ("blob_count_range", format!("{c0},{c1}")),
            ("blob_axes_range", format!("{a0},{a1}")),
            ("speckle_sigma", self.speckle_sigma.to_string()),
            ("background_texture_scale", self.background_texture_scale.to_string()),
            ("data_seed", self.seed.to_string()),
        ]
    }
}

fn parse_pair<V: std::str::FromStr>(key: &str, value: &str) -> Result<(V, V)> {
    let (a, b) = value
        .split_once(',')
        .ok_or_else(|| Error::Config(format!("{key} expects two comma-separated values, got {value:?}")))?;
    Ok((parse(key, a)?, parse(key, b)?))
}

/// A filled ellipse in pixel coordinates (pixel `(r, c)` has center `(r + .5, c + .5)`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ellipse {
    pub cy: f64,
    pub cx: f64,
    pub a: f64,
    pub b: f64,
    /// Rotation of the `a` axis from the x axis, radians.
    pub theta: f64,
}

impl Ellipse {
    pub fn contains(&self, y: f64, x: f64) -> bool {
        let (s, c) = self.theta.sin_cos();
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        (u / self.a).powi(2) + (v / self.b).powi(2) <= 1.0
    }

    /// Row-major `size x size` mask of pixels whose center lies inside.
    pub fn rasterize(&self, size: usize) -> Vec<bool> {
        (0..size * size)
            .map(|i| self.contains((i / size) as f64 + 0.5, (i % size) as f64 + 0.5))
            .collect()
    }
}

/// Nearest 8-bit level, `round(clamp(v) * 255)`.
pub fn quantize_level(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn quantize<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| T::from_f64(quantize_level(v.as_f64()) as f64 / 255.0))
}

/// The stream generator for sample `index`.
fn sample_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

pub fn sample_id(index: usize) -> String {
    format!("s{index:05}")
}

/// Generates sample `index` of `spec`.
pub fn generate_one(spec: &SynthSpec, index: usize) -> Result<Sample> {
    spec.validate()?;
    let n = spec.img_size;
    let mut rng = sample_rng(spec.seed, index);

    let cells = (n / spec.background_texture_scale).max(1) + 1;
    let coarse = Tensor::from_fn(vec![1, 1, cells, cells], |_| rng.random_range(BACKGROUND.0..BACKGROUND.1))?;
    let texture = resize_bilinear(&coarse, n, n)?;

    let blobs = rng.random_range(spec.blob_count_range.0..=spec.blob_count_range.1);
    let side = n as f64;
    let (a0, a1) = spec.blob_axes_range;
    let mut clean = texture.into_data();
    let mut mask = vec![0f32; n * n];
    for _ in 0..blobs {
        let e = Ellipse {
            cy: rng.random_range(0.2..0.8) * side,
            cx: rng.random_range(0.2..0.8) * side,
            a: rng.random_range(a0..=a1) * side,
            b: rng.random_range(a0..=a1) * side,
            theta: rng.random_range(0.0..PI),
        };
        let level = rng.random_range(FOREGROUND.0..FOREGROUND.1);
        for (i, inside) in e.rasterize(n).into_iter().enumerate() {
            if inside {
                clean[i] = level;
                mask[i] = 1.0;
            }
        }
    }

    let speckle = Normal::new(1.0, spec.speckle_sigma).map_err(|e| Error::Config(e.to_string()))?;
    let image: Vec<f32> = clean
        .into_iter()
        .map(|v| quantize_level(v * speckle.sample(&mut rng)) as f32 / 255.0)
        .collect();
    Ok(Sample {
        id: sample_id(index),
        image: Tensor::new(vec![1, 1, n, n], image)?,
        mask: Tensor::new(vec![1, 1, n, n], mask)?,
    })
}

/// Worker count from [`THREADS_ENV`], if set to a positive integer.
pub fn thread_cap() -> Option<usize> {
    std::env::var(THREADS_ENV).ok()?.trim().parse().ok().filter(|&n| n > 0)
}

/// All samples of `spec`, generated in parallel.
pub fn generate(spec: &SynthSpec) -> Result<Vec<Sample>> {
    spec.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(thread_cap().unwrap_or(0))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(|| (0..spec.n_samples).into_par_iter().map(|i| generate_one(spec, i)).collect())
}

/// Binary 8-bit PGM of a single-channel map (`[H, W]` or `[1, 1, H, W]`).
pub fn encode_pgm<T: Scalar>(img: &Tensor<T>) -> Result<Vec<u8>> {
    let (h, w) = match *img.shape() {
        [h, w] | [1, 1, h, w] => (h, w),
        _ => {
            return Err(Error::InvalidShape {
                shape: img.shape().to_vec(),
                reason: "PGM output needs a single-channel 2-D map".into(),
            })
        }
    };
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(img.data().iter().map(|v| quantize_level(v.as_f64())));
    Ok(out)
}

/// Parses a binary PGM with maxval 255 into `[1, 1, H, W]`.
pub fn decode_pgm<T: Scalar>(bytes: &[u8]) -> Result<Tensor<T>> {
    let bad = |msg: &str| Error::Pgm(msg.to_string());
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        // Whitespace and `#` comments may separate header fields.
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("non-ASCII header"))?);
    }
    if fields[0] != "P5" {
        return Err(bad(&format!("expected magic P5, found {:?}", fields[0])));
    }
    let num = |s: &str, what: &str| -> Result<usize> {
        s.parse()
            .map_err(|_| Error::Pgm(format!("{what} {s:?} is not a non-negative integer")))
    };
    let (w, h, maxval) = (num(fields[1], "width")?, num(fields[2], "height")?, num(fields[3], "maxval")?);
    if maxval != 255 {
        return Err(Error::Pgm(format!("maxval {maxval} is not supported (need 255)")));
    }
    if w == 0 || h == 0 {
        return Err(bad("zero image dimension"));
    }
    if pos >= bytes.len() {
        return Err(bad("missing pixel data"));
    }
    let body = &bytes[pos + 1..];
    if body.len() != w * h {
        return Err(Error::Pgm(format!("expected {} pixel bytes, found {}", w * h, body.len())));
    }
    Tensor::new(
        vec![1, 1, h, w],
        body.iter().map(|&b| T::from_f64(b as f64 / 255.0)).collect(),
    )
}

pub fn save_pgm<T: Scalar>(img: &Tensor<T>, path: &Path) -> Result<()> {
    fs::write(path, encode_pgm(img)?).map_err(|e| Error::io(path, e))
}

pub fn load_pgm<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    decode_pgm(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

/// Bilinear resampling of an image to `target x target`.
pub fn resize<T: Scalar>(img: &Tensor<T>, target: usize) -> Result<Tensor<T>> {
    let (_, _, h, w) = img.dims4()?;
    if (h, w) == (target, target) {
        return Ok(img.clone());
    }
    resize_bilinear(img, target, target)
}

/// Nearest-neighbour resampling of a mask, re-binarized at 0.5.
pub fn resize_mask<T: Scalar>(mask: &Tensor<T>, target: usize) -> Result<Tensor<T>> {
    let (n, c, h, w) = mask.dims4()?;
    if target == 0 {
        return Err(Error::invalid("resize", "target size must be positive"));
    }
    let src = |o: usize, len: usize| ((o * len) as f64 / target as f64 + len as f64 / (2.0 * target as f64)) as usize;
    let md = mask.data();
    let half = T::from_f64(0.5);
    let mut out = Vec::with_capacity(n * c * target * target);
    for p in 0..n * c {
        for r in 0..target {
            let sr = src(r, h).min(h - 1);
            for col in 0..target {
                let v = md[p * h * w + sr * w + src(col, w).min(w - 1)];
                out.push(if v >= half { T::one() } else { T::zero() });
            }
        }
    }
    Tensor::new(vec![n, c, target, target], out)
}

/// Seeded shuffle then prefix split into `(train, test)`.
pub fn split<S: Clone>(samples: &[S], train_fraction: f64, seed: u64) -> Result<(Vec<S>, Vec<S>)> {
    if samples.len() < 2 {
        return Err(Error::invalid("split", format!("need at least 2 samples, got {}", samples.len())));
    }
    let n_train = (samples.len() as f64 * train_fraction).round() as usize;
    if n_train == 0 || n_train >= samples.len() {
        return Err(Error::invalid(
            "split",
            format!("fraction {train_fraction} of {} samples leaves one side empty", samples.len()),
        ));
    }
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let pick = |idx: &[usize]| idx.iter().map(|&i| samples[i].clone()).collect();
    Ok((pick(&order[..n_train]), pick(&order[n_train..])))
}

pub const MANIFEST: &str = "manifest.txt";

/// Writes `<root>/images/<id>.pgm`, `<root>/masks/<id>.pgm` and the manifest.
pub fn write_corpus(root: &Path, samples: &[Sample]) -> Result<()> {
    for sub in ["images", "masks"] {
        let dir = root.join(sub);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let mut manifest = String::new();
    for s in samples {
        save_pgm(&s.image, &root.join("images").join(format!("{}.pgm", s.id)))?;
        save_pgm(&s.mask, &root.join("masks").join(format!("{}.pgm", s.id)))?;
        manifest.push_str(&s.id);
        manifest.push('\n');
    }
    let path = root.join(MANIFEST);
    fs::write(&path, manifest).map_err(|e| Error::io(&path, e))
}

/// Loads every sample listed in `<root>/manifest.txt`, in manifest order.
pub fn read_corpus(root: &Path) -> Result<Vec<Sample>> {
    let path = root.join(MANIFEST);
    let manifest = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    manifest
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(|id| {
            let image = load_pgm(&root.join("images").join(format!("{id}.pgm")))?;
            let mask: Tensor<f32> = load_pgm(&root.join("masks").join(format!("{id}.pgm")))?;
            if image.shape() != mask.shape() {
                return Err(Error::mismatch("read_corpus", image.shape(), mask.shape()));
            }
            Ok(Sample {
                id: id.to_string(),
                image,
                mask: mask.map(|v| if v >= 0.5 { 1.0 } else { 0.0 }),
            })
        })
        .collect()
}
