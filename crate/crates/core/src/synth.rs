//! Referred moving-shapes videos: rendered frame pairs, expressions and masks.
//!
//! Each scene holds two to four coloured shapes, each with its own motion.
//! The expression names the referred object as `<color> <shape> <motion>`.
//! One distractor always repeats the referred object with either the motion
//! or the colour changed, so neither appearance nor motion alone identifies it.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::encoders::{reference_index, Vocabulary};
use crate::error::{Error, Result};
use crate::tensor::{io, Tensor};

pub const BACKGROUND: f32 = 0.5;
pub const NOISE_STD: f64 = 0.02;
pub const COLOR_JITTER: f64 = 0.05;
/// Pixels per frame for the four translating motions.
pub const SPEED: f64 = 1.5;
pub const JUMP_HEIGHT: f64 = 8.0;
pub const JUMP_PERIOD: f64 = 10.0;
pub const MIN_SIZE: usize = 12;
pub const MAX_SIZE: usize = 18;
/// The last sixth of a dataset is held out (600 samples → 500 train, 100 val).
pub const VAL_DIVISOR: usize = 6;

macro_rules! word_enum {
    ($name:ident { $($var:ident => $word:literal),+ $(,)? }) => {
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
        pub enum $name { $($var),+ }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$var),+];

            pub fn word(self) -> &'static str {
                match self { $($name::$var => $word),+ }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.word())
            }
        }

        impl FromStr for $name {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($word => Ok($name::$var),)+
                    _ => Err(Error::Format(format!(concat!("unknown ", stringify!($name), " {:?}"), s))),
                }
            }
        }
    };
}

word_enum!(Color {
    Red => "red",
    Green => "green",
    Blue => "blue",
    Yellow => "yellow",
    Brown => "brown",
    White => "white",
});

word_enum!(ShapeKind {
    Square => "square",
    Circle => "circle",
    Triangle => "triangle",
});

word_enum!(Motion {
    Left => "moving-left",
    Right => "moving-right",
    Up => "moving-up",
    Down => "moving-down",
    Jumping => "jumping",
    Standing => "standing",
});

impl Color {
    pub fn rgb(self) -> [f64; 3] {
        match self {
            Color::Red => [0.9, 0.1, 0.1],
            Color::Green => [0.1, 0.75, 0.15],
            Color::Blue => [0.1, 0.2, 0.9],
            Color::Yellow => [0.9, 0.85, 0.1],
            Color::Brown => [0.55, 0.3, 0.1],
            Color::White => [0.95, 0.95, 0.95],
        }
    }
}

impl Motion {
    pub fn moves(self) -> bool {
        self != Motion::Standing
    }

    /// Offset from the start position at `frame`, as (dy, dx).
    pub fn offset(self, frame: usize, phase: f64) -> (f64, f64) {
        let f = frame as f64;
        match self {
            Motion::Left => (0.0, -SPEED * f),
            Motion::Right => (0.0, SPEED * f),
            Motion::Up => (-SPEED * f, 0.0),
            Motion::Down => (SPEED * f, 0.0),
            Motion::Jumping => {
                let a = std::f64::consts::PI * (f + phase) / JUMP_PERIOD;
                (-JUMP_HEIGHT * a.sin().abs(), 0.0)
            }
            Motion::Standing => (0.0, 0.0),
        }
    }
}

/// Every word an expression can contain.
pub fn vocabulary() -> Vocabulary {
    let words = Color::ALL
        .iter()
        .map(|c| c.word())
        .chain(ShapeKind::ALL.iter().map(|s| s.word()))
        .chain(Motion::ALL.iter().map(|m| m.word()));
    Vocabulary::new(words)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ObjectSpec {
    pub shape: ShapeKind,
    pub color: Color,
    /// Side length of the bounding box in pixels.
    pub size: usize,
    /// Top-left corner at frame 0, (y, x).
    pub start: (f64, f64),
    pub motion: Motion,
    /// Jump phase in frames; unused by other motions.
    pub phase: f64,
    /// Per-object RGB jitter.
    pub rgb: [f64; 3],
}

impl ObjectSpec {
    pub fn key(&self) -> (Color, ShapeKind, Motion) {
        (self.color, self.shape, self.motion)
    }

    /// Integer top-left corner at `frame`.
    pub fn corner(&self, frame: usize) -> (i64, i64) {
        let (dy, dx) = self.motion.offset(frame, self.phase);
        (
            (self.start.0 + dy).round() as i64,
            (self.start.1 + dx).round() as i64,
        )
    }

    /// Whether local pixel `(r, c)` of the bounding box is covered.
    pub fn covers(&self, r: usize, c: usize) -> bool {
        let s = self.size as f64;
        let (y, x) = (r as f64 + 0.5, c as f64 + 0.5);
        match self.shape {
            ShapeKind::Square => true,
            ShapeKind::Circle => {
                let h = s / 2.0;
                (y - h).powi(2) + (x - h).powi(2) <= h * h
            }
            ShapeKind::Triangle => (x - s / 2.0).abs() <= y / 2.0,
        }
    }

    /// Canvas pixels covered at `frame`.
    pub fn footprint(&self, frame: usize, height: usize, width: usize) -> Vec<(usize, usize)> {
        let (y0, x0) = self.corner(frame);
        let mut out = Vec::new();
        for r in 0..self.size {
            for c in 0..self.size {
                let (y, x) = (y0 + r as i64, x0 + c as i64);
                if y >= 0 && x >= 0 && (y as usize) < height && (x as usize) < width && self.covers(r, c) {
                    out.push((y as usize, x as usize));
                }
            }
        }
        out
    }

    pub fn expression(&self) -> String {
        format!("{} {} {}", self.color, self.shape, self.motion)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    /// Drawn in order; the referred object is drawn last.
    pub objects: Vec<ObjectSpec>,
    pub referred: usize,
    pub frames: usize,
    pub target: usize,
    pub delta: usize,
}

impl SceneSpec {
    pub fn referred_object(&self) -> &ObjectSpec {
        &self.objects[self.referred]
    }

    pub fn reference(&self) -> usize {
        reference_index(self.target, self.delta)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub target: Tensor<f32>,
    pub reference: Tensor<f32>,
    pub tokens: Vec<String>,
    /// Referred footprint in the target frame, 1×H×W.
    pub mask: Tensor<f32>,
    /// Referred footprint in the reference frame, 1×H×W.
    pub prev_mask: Tensor<f32>,
}

impl Sample {
    pub fn expression(&self) -> String {
        self.tokens.join(" ")
    }
}

fn footprint_tensor(obj: &ObjectSpec, frame: usize, h: usize, w: usize) -> Tensor<f32> {
    let mut data = vec![0.0f32; h * w];
    for (y, x) in obj.footprint(frame, h, w) {
        data[y * w + x] = 1.0;
    }
    Tensor::new(&[1, h, w], data).expect("mask shape")
}

fn render(spec: &SceneSpec, frame: usize, rng: &mut ChaCha8Rng) -> Tensor<f32> {
    let (h, w) = (spec.height, spec.width);
    let noise = Normal::new(0.0, NOISE_STD).expect("noise std");
    let mut data: Vec<f32> = (0..3 * h * w)
        .map(|_| (BACKGROUND as f64 + noise.sample(rng)).clamp(0.0, 1.0) as f32)
        .collect();
    let order = (0..spec.objects.len())
        .filter(|&i| i != spec.referred)
        .chain([spec.referred]);
    for i in order {
        let obj = &spec.objects[i];
        for (y, x) in obj.footprint(frame, h, w) {
            for (c, v) in obj.rgb.iter().enumerate() {
                data[(c * h + y) * w + x] = *v as f32;
            }
        }
    }
    Tensor::new(&[3, h, w], data).expect("frame shape")
}

/// Renders both frames and masks of a scene; the seed fixes the background noise.
pub fn generate(spec: &SceneSpec) -> Result<Sample> {
    if spec.objects.is_empty() {
        return Err(Error::invalid("scene has no objects"));
    }
    if spec.referred >= spec.objects.len() || spec.delta == 0 || spec.target >= spec.frames {
        return Err(Error::invalid("scene references an object or frame out of range"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let reference_frame = spec.reference();
    let reference = render(spec, reference_frame, &mut rng);
    let target = render(spec, spec.target, &mut rng);
    let obj = spec.referred_object();
    Ok(Sample {
        target,
        reference,
        tokens: obj.expression().split(' ').map(str::to_string).collect(),
        mask: footprint_tensor(obj, spec.target, spec.height, spec.width),
        prev_mask: footprint_tensor(obj, reference_frame, spec.height, spec.width),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub height: usize,
    pub width: usize,
    pub delta: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            delta: 6,
        }
    }
}

/// Deterministic generator for sample `index` of a dataset seeded with `seed`.
fn sample_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng
}

fn jitter(color: Color, rng: &mut ChaCha8Rng) -> [f64; 3] {
    color
        .rgb()
        .map(|v| (v + rng.gen_range(-COLOR_JITTER..=COLOR_JITTER)).clamp(0.0, 1.0))
}

/// Start position range keeping the whole trajectory on the canvas.
fn start_range(motion: Motion, size: usize, extent: usize, frames: usize, vertical: bool) -> (f64, f64) {
    let (mut lo, mut hi) = (0.0f64, 0.0f64);
    for f in 0..frames {
        let (dy, dx) = motion.offset(f, 0.0);
        let d = if vertical { dy } else { dx };
        lo = lo.min(d);
        hi = hi.max(d);
    }
    if motion == Motion::Jumping && vertical {
        lo = -JUMP_HEIGHT;
    }
    let max = (extent - size) as f64;
    (-lo + 0.5, max - hi - 0.5)
}

fn boxes_overlap(a: &ObjectSpec, b: &ObjectSpec, frame: usize) -> bool {
    let (ay, ax) = a.corner(frame);
    let (by, bx) = b.corner(frame);
    let (sa, sb) = (a.size as i64, b.size as i64);
    ay < by + sb && by < ay + sa && ax < bx + sb && bx < ax + sa
}

fn place(
    rng: &mut ChaCha8Rng,
    color: Color,
    shape: ShapeKind,
    motion: Motion,
    cfg: &SynthConfig,
    frames: usize,
    target: usize,
    placed: &[ObjectSpec],
) -> ObjectSpec {
    let size = rng.gen_range(MIN_SIZE..=MAX_SIZE);
    let rgb = jitter(color, rng);
    let mut phase = rng.gen_range(0..JUMP_PERIOD as usize) as f64;
    if motion == Motion::Jumping {
        // keep the jump visible between the two frames
        let reference = reference_index(target, cfg.delta);
        let visible = |ph: f64| {
            (motion.offset(target, ph).0.round() - motion.offset(reference, ph).0.round()).abs() >= 2.0
        };
        for _ in 0..JUMP_PERIOD as usize {
            if visible(phase) {
                break;
            }
            phase += 1.0;
        }
    }
    let (ylo, yhi) = start_range(motion, size, cfg.height, frames, true);
    let (xlo, xhi) = start_range(motion, size, cfg.width, frames, false);
    let mut obj = ObjectSpec {
        shape,
        color,
        size,
        start: (0.0, 0.0),
        motion,
        phase,
        rgb,
    };
    for _ in 0..64 {
        obj.start = (rng.gen_range(ylo..=yhi).floor(), rng.gen_range(xlo..=xhi).floor());
        if placed.iter().all(|p| !boxes_overlap(p, &obj, target)) {
            break;
        }
    }
    obj
}

/// Random scene for sample `index`.
pub fn scene_spec(seed: u64, index: usize, cfg: &SynthConfig) -> SceneSpec {
    let mut rng = sample_rng(seed, index);
    let frames = cfg.delta + 2;
    let target = rng.gen_range(cfg.delta..frames);
    let count = rng.gen_range(2..=4);

    let color = *Color::ALL.choose(&mut rng).unwrap();
    let shape = *ShapeKind::ALL.choose(&mut rng).unwrap();
    let motion = *Motion::ALL.choose(&mut rng).unwrap();
    let mut keys = vec![(color, shape, motion)];
    // the confusable distractor: same shape, and either the colour or the motion
    let confusable = if rng.gen_bool(0.5) {
        let m = *Motion::ALL.iter().filter(|&&m| m != motion).collect::<Vec<_>>().choose(&mut rng).unwrap();
        (color, shape, *m)
    } else {
        let c = *Color::ALL.iter().filter(|&&c| c != color).collect::<Vec<_>>().choose(&mut rng).unwrap();
        (*c, shape, motion)
    };
    keys.push(confusable);
    while keys.len() < count {
        let k = (
            *Color::ALL.choose(&mut rng).unwrap(),
            *ShapeKind::ALL.choose(&mut rng).unwrap(),
            *Motion::ALL.choose(&mut rng).unwrap(),
        );
        if !keys.contains(&k) {
            keys.push(k);
        }
    }

    let mut objects: Vec<ObjectSpec> = Vec::with_capacity(count);
    for &(c, s, m) in &keys {
        let obj = place(&mut rng, c, s, m, cfg, frames, target, &objects);
        objects.push(obj);
    }
    // the referred object sits at a random index in the list but is drawn last
    let referred = rng.gen_range(0..count);
    objects.swap(0, referred);
    SceneSpec {
        seed: rng.gen(),
        height: cfg.height,
        width: cfg.width,
        objects,
        referred,
        frames,
        target,
        delta: cfg.delta,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

/// Index range of a split within `count` samples; validation is the last
/// `ceil(count / 6)`, and empty only for a single sample.
pub fn split_range(split: Split, count: usize) -> std::ops::Range<usize> {
    let held_out = if count < 2 { 0 } else { count.div_ceil(VAL_DIVISOR) };
    let cut = count - held_out;
    match split {
        Split::Train => 0..cut,
        Split::Val => cut..count,
    }
}

pub const MANIFEST: &str = "manifest.tsv";
pub const VOCAB: &str = "vocab.txt";
pub const META: &str = "dataset.txt";

pub fn stem(index: usize) -> String {
    format!("{index:05}")
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub stem: String,
    pub expression: String,
    pub color: Color,
    pub shape: ShapeKind,
    pub motion: Motion,
    pub referred: usize,
}

impl ManifestEntry {
    pub fn line(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}",
            self.stem, self.expression, self.color, self.shape, self.motion, self.referred
        )
    }

    pub fn parse(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 6 {
            return Err(Error::Format(format!("manifest line needs 6 fields: {line:?}")));
        }
        Ok(Self {
            stem: f[0].to_string(),
            expression: f[1].to_string(),
            color: f[2].parse()?,
            shape: f[3].parse()?,
            motion: f[4].parse()?,
            referred: f[5]
                .parse()
                .map_err(|_| Error::Format(format!("bad object id {:?}", f[5])))?,
        })
    }
}

/// Paths of the tensors stored for one sample.
pub fn sample_paths(dir: &Path, stem: &str) -> [PathBuf; 4] {
    ["target", "reference", "mask", "prev_mask"].map(|k| dir.join(format!("{stem}_{k}.lbdt")))
}

/// Writes `count` samples plus manifest, vocabulary and metadata into `dir`.
pub fn build_split(count: usize, seed: u64, cfg: &SynthConfig, dir: &Path) -> Result<Vec<ManifestEntry>> {
    if count == 0 {
        return Err(Error::invalid("dataset needs at least one sample"));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(count);
    let mut manifest = String::new();
    for i in 0..count {
        let spec = scene_spec(seed, i, cfg);
        let sample = generate(&spec)?;
        let obj = spec.referred_object();
        let entry = ManifestEntry {
            stem: stem(i),
            expression: sample.expression(),
            color: obj.color,
            shape: obj.shape,
            motion: obj.motion,
            referred: spec.referred,
        };
        let [t, r, m, p] = sample_paths(dir, &entry.stem);
        io::write(t, &sample.target)?;
        io::write(r, &sample.reference)?;
        io::write(m, &sample.mask)?;
        io::write(p, &sample.prev_mask)?;
        manifest.push_str(&entry.line());
        manifest.push('\n');
        entries.push(entry);
    }
    let path = dir.join(MANIFEST);
    fs::write(&path, manifest).map_err(|e| Error::io(&path, e))?;
    vocabulary().save(dir.join(VOCAB))?;
    let meta = format!(
        "count = {count}\nseed = {seed}\nheight = {}\nwidth = {}\ndelta = {}\n",
        cfg.height, cfg.width, cfg.delta
    );
    let path = dir.join(META);
    fs::write(&path, meta).map_err(|e| Error::io(&path, e))?;
    Ok(entries)
}

/// One sample as loaded from disk.
#[derive(Clone, Debug)]
pub struct LoadedSample {
    pub entry: ManifestEntry,
    pub sample: Sample,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub dir: PathBuf,
    pub config: SynthConfig,
    pub seed: u64,
    pub vocab: Vocabulary,
    pub samples: Vec<LoadedSample>,
}

fn meta_value(text: &str, key: &str) -> Result<u64> {
    text.lines()
        .filter_map(|l| l.split_once('='))
        .find(|(k, _)| k.trim() == key)
        .and_then(|(_, v)| v.trim().parse().ok())
        .ok_or_else(|| Error::Format(format!("dataset metadata lacks {key}")))
}

impl Dataset {
    pub fn load(dir: &Path) -> Result<Self> {
        let read = |name: &str| {
            let p = dir.join(name);
            fs::read_to_string(&p).map_err(|e| Error::io(&p, e))
        };
        let meta = read(META)?;
        let config = SynthConfig {
            height: meta_value(&meta, "height")? as usize,
            width: meta_value(&meta, "width")? as usize,
            delta: meta_value(&meta, "delta")? as usize,
        };
        let seed = meta_value(&meta, "seed")?;
        let vocab = Vocabulary::load(dir.join(VOCAB))?;
        let mut samples = Vec::new();
        for line in read(MANIFEST)?.lines().filter(|l| !l.is_empty()) {
            let entry = ManifestEntry::parse(line)?;
            let [t, r, m, p] = sample_paths(dir, &entry.stem);
            let sample = Sample {
                target: io::read(t)?,
                reference: io::read(r)?,
                tokens: entry.expression.split(' ').map(str::to_string).collect(),
                mask: io::read(m)?,
                prev_mask: io::read(p)?,
            };
            samples.push(LoadedSample { entry, sample });
        }
        Ok(Self {
            dir: dir.to_path_buf(),
            config,
            seed,
            vocab,
            samples,
        })
    }

    pub fn split(&self, split: Split) -> &[LoadedSample] {
        &self.samples[split_range(split, self.samples.len())]
    }
}
