//! Synthetic paired video-caption data.
//!
//! Each of 64 concepts is a (color, shape, motion) triple. A sample renders the
//! concept's shape sliding across a textured background for `T` frames, with
//! a faint copy at the previous position so that the direction of motion is
//! visible inside every frame. The caption is `[BOS, color, shape, motion,
//! EOS, PAD…]`. The nuisance seed controls start position, background
//! texture and pixel noise only.
//!
//! File format (all integers little-endian):
//!
//! ```text
//! "RLDS" | version u32 | samples u64 | frames u64 | channels u64 | height u64 | width u64
//! per sample: concept_id u32 | caption_len u32 | caption_len × token u32 | T·C·H·W × f32
//! ```

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::encoders::{TextBatch, VideoBatch};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const NUM_CONCEPTS: usize = 64;
pub const DATASET_MAGIC: &[u8; 4] = b"RLDS";
pub const DATASET_VERSION: u32 = 1;

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
const COLOR_BASE: u32 = 3;
const SHAPE_BASE: u32 = 7;
const MOTION_BASE: u32 = 11;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Shape {
    Square,
    Circle,
    Triangle,
    Cross,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Motion {
    Left,
    Right,
    Up,
    Down,
}

impl Color {
    pub const ALL: [Color; 4] = [Color::Red, Color::Green, Color::Blue, Color::Yellow];

    fn rgb(self) -> [f32; 3] {
        match self {
            Color::Red => [0.92, 0.12, 0.10],
            Color::Green => [0.10, 0.78, 0.15],
            Color::Blue => [0.12, 0.22, 0.95],
            Color::Yellow => [0.95, 0.85, 0.08],
        }
    }
}

impl Shape {
    pub const ALL: [Shape; 4] = [Shape::Square, Shape::Circle, Shape::Triangle, Shape::Cross];

    /// Whether local cell `(u, v)` of an `s×s` sprite is covered.
    fn covers(self, u: usize, v: usize, s: usize) -> bool {
        let (x, y) = (u as f32 + 0.5, v as f32 + 0.5);
        let c = s as f32 / 2.0;
        match self {
            Shape::Square => true,
            Shape::Circle => (x - c).powi(2) + (y - c).powi(2) <= c * c,
            Shape::Triangle => (x - c).abs() <= y / 2.0 * (2.0 * c / s as f32),
            Shape::Cross => (x - c).abs() <= s as f32 / 6.0 || (y - c).abs() <= s as f32 / 6.0,
        }
    }
}

impl Motion {
    pub const ALL: [Motion; 4] = [Motion::Left, Motion::Right, Motion::Up, Motion::Down];

    /// Unit step `(dx, dy)` in pixel coordinates (y grows downward).
    pub fn step(self) -> (i64, i64) {
        match self {
            Motion::Left => (-1, 0),
            Motion::Right => (1, 0),
            Motion::Up => (0, -1),
            Motion::Down => (0, 1),
        }
    }
}

/// A (color, shape, motion) triple; `id = 16·color + 4·shape + motion`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Concept {
    pub color: Color,
    pub shape: Shape,
    pub motion: Motion,
}

impl Concept {
    pub fn from_id(id: usize) -> Result<Self> {
        if id >= NUM_CONCEPTS {
            return Err(Error::invalid(format!("concept id {id} outside [0, {NUM_CONCEPTS})")));
        }
        Ok(Self { color: Color::ALL[id / 16], shape: Shape::ALL[(id / 4) % 4], motion: Motion::ALL[id % 4] })
    }

    pub fn id(self) -> usize {
        16 * position(&Color::ALL, self.color) + 4 * position(&Shape::ALL, self.shape) + position(&Motion::ALL, self.motion)
    }

    /// Attribute tokens without padding.
    pub fn tokens(self) -> [u32; 5] {
        let id = self.id() as u32;
        [BOS, COLOR_BASE + id / 16, SHAPE_BASE + (id / 4) % 4, MOTION_BASE + id % 4, EOS]
    }

    /// Inverse of [`Concept::tokens`], ignoring padding.
    pub fn from_caption(caption: &[u32]) -> Result<Self> {
        let words: Vec<u32> = caption.iter().copied().filter(|&t| t != PAD).collect();
        let bad = || Error::invalid(format!("caption {caption:?} is not BOS color shape motion EOS"));
        if words.len() != 5 || words[0] != BOS || words[4] != EOS {
            return Err(bad());
        }
        let field = |tok: u32, base: u32| tok.checked_sub(base).filter(|&v| v < 4).ok_or_else(bad);
        let id = 16 * field(words[1], COLOR_BASE)? + 4 * field(words[2], SHAPE_BASE)? + field(words[3], MOTION_BASE)?;
        Self::from_id(id as usize)
    }
}

fn position<T: PartialEq + Copy>(all: &[T], x: T) -> usize {
    all.iter().position(|&a| a == x).expect("every variant is listed")
}

/// Rendering parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub frames: usize,
    pub frame_size: usize,
    pub object_size: usize,
    /// Pixels moved per frame.
    pub speed: usize,
    /// Number of faded copies drawn at earlier positions.
    pub trail_len: usize,
    /// Opacity of the nearest copy; each further copy multiplies it again.
    pub trail_alpha: f32,
    /// Start coordinates are drawn from multiples of this many pixels.
    pub position_step: usize,
    pub noise_std: f32,
    /// Largest amplitude of each background sinusoid.
    pub texture: f32,
    pub caption_len: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            frames: 4,
            frame_size: 32,
            object_size: 15,
            speed: 4,
            trail_len: 3,
            trail_alpha: 0.6,
            position_step: 4,
            noise_std: 0.02,
            texture: 0.04,
            caption_len: 8,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        let travel = self.speed * self.frames.saturating_sub(1);
        if self.frames == 0 || self.object_size == 0 || self.object_size + travel > self.frame_size {
            return Err(Error::Config(format!(
                "object of size {} moving {} px does not fit a {} px frame",
                self.object_size, travel, self.frame_size
            )));
        }
        if self.position_step == 0 {
            return Err(Error::Config("position_step must be ≥ 1".into()));
        }
        if self.caption_len < 5 {
            return Err(Error::Config("caption length must be ≥ 5".into()));
        }
        Ok(())
    }
}

/// Inclusive-exclusive pixel box `[x0, x1) × [y0, y1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl BBox {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x0 as f64 && x < self.x1 as f64 && y >= self.y0 as f64 && y < self.y1 as f64
    }
}

/// One video-caption pair as stored on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplePair {
    /// `T×3×H×W`, values in `[0, 1]`, exactly representable in `f32`.
    pub video: Tensor,
    pub caption: Vec<u32>,
    pub concept_id: usize,
    pub seed: u64,
}

/// A sample together with its per-frame ground truth.
#[derive(Clone, Debug)]
pub struct RenderedSample {
    pub pair: SamplePair,
    pub boxes: Vec<BBox>,
    /// Per frame, row-major `H×W` object coverage.
    pub object_masks: Vec<Vec<bool>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

/// Nuisance seed of sample `index` in `split`. Train and val seeds differ in
/// bit 31, so the two sets are disjoint for `index < 2³¹`.
pub fn nuisance_seed(seed: u64, split: Split, index: usize) -> u64 {
    assert!(index < 1 << 31, "sample index too large");
    let split_bit = match split {
        Split::Train => 0,
        Split::Val => 1u64 << 31,
    };
    ((seed & 0xffff_ffff) << 32) | split_bit | index as u64
}

pub fn render(concept: Concept, seed: u64, cfg: &DataConfig) -> Result<RenderedSample> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (t_len, size, obj) = (cfg.frames, cfg.frame_size, cfg.object_size);

    // background: gray base, two oriented sinusoids, small per-channel tint
    let base: f32 = rng.random_range(0.35..0.6);
    let waves: Vec<(f32, f32, f32, f32)> = (0..2)
        .map(|_| {
            let angle: f32 = rng.random_range(0.0..std::f32::consts::PI);
            let freq: f32 = rng.random_range(0.3..0.9);
            let phase: f32 = rng.random_range(0.0..std::f32::consts::TAU);
            let amp: f32 = rng.random_range(0.4..=1.0) * cfg.texture;
            (freq * angle.cos(), freq * angle.sin(), phase, amp)
        })
        .collect();
    let tint: [f32; 3] = [rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05)];

    let travel = (cfg.speed * (t_len - 1)) as i64;
    let free = (size - obj) as i64;
    let (dx, dy) = concept.motion.step();
    let step = cfg.position_step as i64;
    let on_lattice = |lo: i64, hi: i64, rng: &mut ChaCha8Rng| -> i64 {
        let (a, b) = ((lo + step - 1).div_euclid(step), hi.div_euclid(step));
        if a > b {
            lo
        } else {
            rng.random_range(a..=b) * step
        }
    };
    let along_start = |dir: i64, rng: &mut ChaCha8Rng| -> i64 {
        if dir > 0 {
            on_lattice(0, free - travel, rng)
        } else {
            on_lattice(travel, free, rng)
        }
    };
    let (x_start, y_start) = if dx != 0 {
        (along_start(dx, &mut rng), on_lattice(0, free, &mut rng))
    } else {
        (on_lattice(0, free, &mut rng), along_start(dy, &mut rng))
    };

    let sprite: Vec<bool> = (0..obj * obj).map(|i| concept.shape.covers(i % obj, i / obj, obj)).collect();
    let color = concept.color.rgb();
    let noise = Normal::new(0.0f32, cfg.noise_std.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;

    let mut video = vec![0.0f64; t_len * 3 * size * size];
    let mut boxes = Vec::with_capacity(t_len);
    let mut object_masks = Vec::with_capacity(t_len);
    let speed = cfg.speed as i64;
    for t in 0..t_len {
        let ox = x_start + dx * speed * t as i64;
        let oy = y_start + dy * speed * t as i64;
        let mut frame = vec![[0.0f32; 3]; size * size];
        for y in 0..size {
            for x in 0..size {
                let mut v = base;
                for &(fx, fy, ph, amp) in &waves {
                    v += amp * (fx * x as f32 + fy * y as f32 + ph).sin();
                }
                frame[y * size + x] = [v + tint[0], v + tint[1], v + tint[2]];
            }
        }
        // faint copies at earlier positions, farthest first
        for k in (1..=cfg.trail_len as i64).rev() {
            let (gx, gy) = (ox - dx * speed * k, oy - dy * speed * k);
            stamp(&mut frame, size, &sprite, obj, gx, gy, color, cfg.trail_alpha.powi(k as i32));
        }
        let mask = stamp(&mut frame, size, &sprite, obj, ox, oy, color, 1.0);

        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
        for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
            let (x, y) = (i % size, i / size);
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x + 1);
            y1 = y1.max(y + 1);
        }
        boxes.push(BBox { x0, y0, x1, y1 });
        object_masks.push(mask);

        for c in 0..3 {
            for i in 0..size * size {
                let v = (frame[i][c] + noise.sample(&mut rng)).clamp(0.0, 1.0);
                video[(t * 3 + c) * size * size + i] = f64::from(v);
            }
        }
    }

    let mut caption = concept.tokens().to_vec();
    caption.resize(cfg.caption_len, PAD);
    Ok(RenderedSample {
        pair: SamplePair {
            video: Tensor::new(&[t_len, 3, size, size], video)?,
            caption,
            concept_id: concept.id(),
            seed,
        },
        boxes,
        object_masks,
    })
}

#[allow(clippy::too_many_arguments)]
fn stamp(
    frame: &mut [[f32; 3]],
    size: usize,
    sprite: &[bool],
    obj: usize,
    ox: i64,
    oy: i64,
    color: [f32; 3],
    alpha: f32,
) -> Vec<bool> {
    let mut mask = vec![false; size * size];
    for v in 0..obj {
        for u in 0..obj {
            if !sprite[v * obj + u] {
                continue;
            }
            let (x, y) = (ox + u as i64, oy + v as i64);
            if x < 0 || y < 0 || x >= size as i64 || y >= size as i64 {
                continue;
            }
            let i = y as usize * size + x as usize;
            for c in 0..3 {
                frame[i][c] = (1.0 - alpha) * frame[i][c] + alpha * color[c];
            }
            mask[i] = true;
        }
    }
    mask
}

/// Renders one split with concepts assigned round-robin.
pub fn generate_split(seed: u64, split: Split, n: usize, cfg: &DataConfig) -> Result<Vec<RenderedSample>> {
    (0..n)
        .into_par_iter()
        .map(|i| render(Concept::from_id(i % NUM_CONCEPTS)?, nuisance_seed(seed, split, i), cfg))
        .collect()
}

/// In-memory dataset of one split.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub samples: Vec<SamplePair>,
}

impl Dataset {
    pub fn from_rendered(samples: &[RenderedSample]) -> Result<Self> {
        let first = samples.first().ok_or_else(|| Error::invalid("empty dataset"))?;
        let s = first.pair.video.shape();
        Ok(Self { frames: s[0], height: s[2], width: s[3], samples: samples.iter().map(|r| r.pair.clone()).collect() })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(DATASET_MAGIC)?;
        w.write_all(&DATASET_VERSION.to_le_bytes())?;
        for v in [self.samples.len(), self.frames, 3, self.height, self.width] {
            w.write_all(&(v as u64).to_le_bytes())?;
        }
        for s in &self.samples {
            w.write_all(&(s.concept_id as u32).to_le_bytes())?;
            w.write_all(&(s.caption.len() as u32).to_le_bytes())?;
            for tok in &s.caption {
                w.write_all(&tok.to_le_bytes())?;
            }
            for &v in s.video.values() {
                w.write_all(&(v as f32).to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic)?;
        if &magic != DATASET_MAGIC {
            return Err(Error::Corrupt(format!("{} is not a dataset file", path.display())));
        }
        let version = read_u32(&mut r)?;
        if version != DATASET_VERSION {
            return Err(Error::Version { found: version, expected: DATASET_VERSION });
        }
        let n = read_u64(&mut r)? as usize;
        let frames = read_u64(&mut r)? as usize;
        let channels = read_u64(&mut r)? as usize;
        let height = read_u64(&mut r)? as usize;
        let width = read_u64(&mut r)? as usize;
        if channels != 3 || frames == 0 || height == 0 || width == 0 {
            return Err(Error::Corrupt(format!("bad geometry {frames}×{channels}×{height}×{width}")));
        }
        let per_video = frames * 3 * height * width;
        let mut samples = Vec::with_capacity(n.min(1 << 16));
        let mut buf = vec![0u8; per_video * 4];
        for _ in 0..n {
            let concept_id = read_u32(&mut r)? as usize;
            let len = read_u32(&mut r)? as usize;
            if len > 1 << 16 {
                return Err(Error::Corrupt(format!("caption length {len}")));
            }
            let caption = (0..len).map(|_| read_u32(&mut r)).collect::<Result<Vec<_>>>()?;
            read_exact(&mut r, &mut buf)?;
            let values = buf.chunks_exact(4).map(|b| f64::from(f32::from_le_bytes([b[0], b[1], b[2], b[3]]))).collect();
            samples.push(SamplePair {
                video: Tensor::new(&[frames, 3, height, width], values)?,
                caption,
                concept_id,
                seed: 0,
            });
        }
        Ok(Self { frames, height, width, samples })
    }

    pub fn video_batch(&self, indices: &[usize]) -> Result<VideoBatch> {
        let per = self.frames * 3 * self.height * self.width;
        let mut values = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            values.extend_from_slice(self.samples[i].video.values());
        }
        VideoBatch::new(Tensor::new(&[indices.len(), self.frames, 3, self.height, self.width], values)?)
    }

    pub fn text_batch(&self, indices: &[usize], len: usize) -> Result<TextBatch> {
        let mut ids = Vec::with_capacity(indices.len() * len);
        let mut pad = Vec::with_capacity(indices.len() * len);
        for &i in indices {
            let cap = &self.samples[i].caption;
            for j in 0..len {
                let tok = cap.get(j).copied().unwrap_or(PAD);
                ids.push(tok as usize);
                pad.push(tok == PAD);
            }
        }
        TextBatch::new(ids, pad, indices.len(), len)
    }
}

fn read_exact(r: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Corrupt("truncated file".into()),
        _ => Error::Io(e),
    })
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

/// Paths written by [`generate`].
#[derive(Clone, Debug)]
pub struct GeneratedPaths {
    pub train: PathBuf,
    pub val: PathBuf,
}

pub const TRAIN_FILE: &str = "train.rlds";
pub const VAL_FILE: &str = "val.rlds";

/// Writes `train.rlds` and `val.rlds` into `out_dir`.
pub fn generate(seed: u64, n_train: usize, n_val: usize, cfg: &DataConfig, out_dir: &Path) -> Result<GeneratedPaths> {
    if n_train == 0 || n_val == 0 {
        return Err(Error::invalid("n_train and n_val must be ≥ 1"));
    }
    if n_val < NUM_CONCEPTS {
        log::warn!("n_val = {n_val} < {NUM_CONCEPTS}: some concepts are missing from the validation split");
    }
    fs::create_dir_all(out_dir)?;
    let paths = GeneratedPaths { train: out_dir.join(TRAIN_FILE), val: out_dir.join(VAL_FILE) };
    Dataset::from_rendered(&generate_split(seed, Split::Train, n_train, cfg)?)?.write(&paths.train)?;
    Dataset::from_rendered(&generate_split(seed, Split::Val, n_val, cfg)?)?.write(&paths.val)?;
    Ok(paths)
}
