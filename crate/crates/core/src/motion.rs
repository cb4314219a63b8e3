//! Motion sequences, normalization, dataset splits and the synthetic motion
//! family used for desk-scale training.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng::{self, Rng};

/// `frames x dim` pose trajectory, row-major by frame.
#[derive(Clone, Debug, PartialEq)]
pub struct MotionSequence {
    frames: usize,
    dim: usize,
    fps: f32,
    data: Vec<f32>,
    normalized: bool,
}

impl MotionSequence {
    pub fn new(frames: usize, dim: usize, fps: f32, data: Vec<f32>) -> Result<Self> {
        if frames == 0 || dim == 0 {
            return Err(Error::invalid(format!(
                "motion needs at least one frame and channel, got {frames}x{dim}"
            )));
        }
        if data.len() != frames * dim {
            return Err(Error::shape(
                "MotionSequence::new",
                &[frames, dim],
                &[data.len()],
            ));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!(
                "non-finite value at frame {}, channel {}",
                i / dim,
                i % dim
            )));
        }
        Ok(Self {
            frames,
            dim,
            fps,
            data,
            normalized: false,
        })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn fps(&self) -> f32 {
        self.fps
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn frame(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    /// Marks values as already living in normalized space.
    pub fn assume_normalized(mut self) -> Self {
        self.normalized = true;
        self
    }

    /// Frames `start..start+len` as a new sequence with the same flags.
    pub fn window(&self, start: usize, len: usize) -> Result<Self> {
        if len == 0 || start + len > self.frames {
            return Err(Error::OutOfRange {
                what: "motion window end",
                index: start + len,
                size: self.frames,
            });
        }
        Ok(Self {
            frames: len,
            dim: self.dim,
            fps: self.fps,
            data: self.data[start * self.dim..(start + len) * self.dim].to_vec(),
            normalized: self.normalized,
        })
    }

    /// Channel-major copy, `[dim, frames]`, as consumed by the convolutions.
    pub fn channels_first(&self) -> Vec<f32> {
        let mut out = vec![0f32; self.data.len()];
        crate::tape::transpose_into(&self.data, &mut out, self.frames, self.dim);
        out
    }

    pub fn from_channels_first(dim: usize, frames: usize, fps: f32, cf: &[f32]) -> Result<Self> {
        let mut data = vec![0f32; cf.len()];
        crate::tape::transpose_into(cf, &mut data, dim, frames);
        Self::new(frames, dim, fps, data)
    }
}

/// Per-channel z-score statistics. Channels with std below `MIN_STD` get std 1.
#[derive(Clone, Debug, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

pub const MIN_STD: f32 = 1e-6;

impl NormStats {
    pub fn new(mean: Vec<f32>, std: Vec<f32>) -> Result<Self> {
        if mean.len() != std.len() || mean.is_empty() {
            return Err(Error::shape("NormStats::new", &[mean.len()], &[std.len()]));
        }
        if std.iter().any(|&s| !(s > 0.0) || !s.is_finite()) || mean.iter().any(|m| !m.is_finite())
        {
            return Err(Error::invalid(
                "norm stats need finite means and positive stds",
            ));
        }
        Ok(Self { mean, std })
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    /// Population mean/std pooled over every frame of `seqs`.
    pub fn from_sequences<'a>(seqs: impl IntoIterator<Item = &'a MotionSequence>) -> Result<Self> {
        let mut sum: Vec<f64> = Vec::new();
        let mut sq: Vec<f64> = Vec::new();
        let mut count = 0usize;
        for s in seqs {
            if sum.is_empty() {
                sum = vec![0.0; s.dim];
                sq = vec![0.0; s.dim];
            }
            if s.dim != sum.len() {
                return Err(Error::shape(
                    "NormStats::from_sequences",
                    &[sum.len()],
                    &[s.dim],
                ));
            }
            for f in s.data.chunks(s.dim) {
                for (c, &v) in f.iter().enumerate() {
                    sum[c] += v as f64;
                    sq[c] += (v as f64) * (v as f64);
                }
            }
            count += s.frames;
        }
        if count == 0 {
            return Err(Error::invalid("no frames to compute statistics from"));
        }
        let n = count as f64;
        let mean: Vec<f32> = sum.iter().map(|s| (s / n) as f32).collect();
        let std = sum
            .iter()
            .zip(&sq)
            .map(|(s, q)| {
                let m = s / n;
                let sd = libm::sqrt((q / n - m * m).max(0.0)) as f32;
                if sd < MIN_STD {
                    1.0
                } else {
                    sd
                }
            })
            .collect();
        Ok(Self { mean, std })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn normalize(&self, seq: &MotionSequence) -> Result<MotionSequence> {
        self.check(seq)?;
        if seq.normalized {
            return Err(Error::invalid("sequence is already normalized"));
        }
        let data = self.map(seq, |v, m, s| (v - m) / s);
        Ok(MotionSequence {
            data,
            normalized: true,
            ..seq.clone()
        })
    }

    pub fn denormalize(&self, seq: &MotionSequence) -> Result<MotionSequence> {
        self.check(seq)?;
        let data = self.map(seq, |v, m, s| v * s + m);
        Ok(MotionSequence {
            data,
            normalized: false,
            ..seq.clone()
        })
    }

    fn check(&self, seq: &MotionSequence) -> Result<()> {
        if seq.dim != self.dim() {
            return Err(Error::shape("normalize", &[seq.dim], &[self.dim()]));
        }
        Ok(())
    }

    fn map(&self, seq: &MotionSequence, f: impl Fn(f32, f32, f32) -> f32) -> Vec<f32> {
        let mut out = seq.data.clone();
        for row in out.chunks_mut(seq.dim) {
            for (c, v) in row.iter_mut().enumerate() {
                *v = f(*v, self.mean[c], self.std[c]);
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
    Val,
}

/// `(train, test, val)` sizes: test and val are floored, train keeps the rest.
pub fn split_counts(n: usize) -> (usize, usize, usize) {
    let test = n * 15 / 100;
    let val = n * 5 / 100;
    (n - test - val, test, val)
}

pub const MIN_ITEMS: usize = 20;

/// Seeded shuffle of `0..n` cut into `(train, test, val)` index lists.
pub fn split_indices(n: usize, seed: u64) -> Result<(Vec<usize>, Vec<usize>, Vec<usize>)> {
    if n < MIN_ITEMS {
        return Err(Error::invalid(format!(
            "need at least {MIN_ITEMS} items to split, got {n}"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng::fork(seed, 0x5b17));
    let (tr, te, _) = split_counts(n);
    let val = idx.split_off(tr + te);
    let test = idx.split_off(tr);
    Ok((idx, test, val))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Item {
    pub id: String,
    pub motion: MotionSequence,
    pub captions: Vec<String>,
    pub params: Option<SynthParams>,
}

/// Items plus split membership and train-split statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub items: Vec<Item>,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub val: Vec<usize>,
    pub stats: NormStats,
}

impl Dataset {
    pub fn new(items: Vec<Item>, seed: u64) -> Result<Self> {
        if let Some(it) = items.iter().find(|it| it.captions.is_empty()) {
            return Err(Error::invalid(format!("item {} has no caption", it.id)));
        }
        let (train, test, val) = split_indices(items.len(), seed)?;
        let stats = NormStats::from_sequences(train.iter().map(|&i| &items[i].motion))?;
        Ok(Self {
            items,
            train,
            test,
            val,
            stats,
        })
    }

    pub fn indices(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.train,
            Split::Test => &self.test,
            Split::Val => &self.val,
        }
    }

    pub fn split_of(&self, idx: usize) -> Option<Split> {
        [Split::Train, Split::Test, Split::Val]
            .into_iter()
            .find(|&s| self.indices(s).contains(&idx))
    }

    pub fn normalized(&self, idx: usize) -> Result<MotionSequence> {
        self.stats.normalize(&self.items[idx].motion)
    }
}

// ---- synthetic family ----------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Action {
    Sways,
    Waves,
    Bounces,
    Twists,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Left,
    Right,
    Forward,
    Backward,
}

pub const ACTIONS: [Action; 4] = [
    Action::Sways,
    Action::Waves,
    Action::Bounces,
    Action::Twists,
];
pub const DIRECTIONS: [Direction; 4] = [
    Direction::Left,
    Direction::Right,
    Direction::Forward,
    Direction::Backward,
];

impl Action {
    pub fn word(self) -> &'static str {
        match self {
            Action::Sways => "sways",
            Action::Waves => "waves",
            Action::Bounces => "bounces",
            Action::Twists => "twists",
        }
    }

    fn group(self) -> usize {
        self as usize
    }
}

impl Direction {
    pub fn word(self) -> &'static str {
        match self {
            Direction::Left => "left",
            Direction::Right => "right",
            Direction::Forward => "forward",
            Direction::Backward => "backward",
        }
    }

    fn vector(self) -> (f32, f32) {
        match self {
            Direction::Left => (-1.0, 0.0),
            Direction::Right => (1.0, 0.0),
            Direction::Forward => (0.0, 1.0),
            Direction::Backward => (0.0, -1.0),
        }
    }
}

pub const FREQ_RANGE: (f32, f32) = (0.5, 2.0);
pub const AMP_RANGE: (f32, f32) = (0.4, 1.2);
/// Median of the uniform frequency range; "fast" lies strictly above it.
pub const FREQ_MEDIAN: f32 = 1.25;
pub const AMP_MEDIAN: f32 = 0.8;
const OFF_GROUP_WEIGHT: f32 = 0.35;
const NOISE: f32 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SynthParams {
    pub action: Action,
    pub direction: Direction,
    /// Oscillation frequency in Hz.
    pub freq: f32,
    pub amp: f32,
    pub phase: f32,
}

impl SynthParams {
    pub fn is_fast(&self) -> bool {
        self.freq > FREQ_MEDIAN
    }

    pub fn is_wide(&self) -> bool {
        self.amp > AMP_MEDIAN
    }

    /// Coarse family label: (action, direction, fast, wide).
    pub fn family(&self) -> (Action, Direction, bool, bool) {
        (self.action, self.direction, self.is_fast(), self.is_wide())
    }

    pub fn captions(&self) -> Vec<String> {
        let act = self.action.word();
        let dir = self.direction.word();
        let width = if self.is_wide() { "wide" } else { "gentle" };
        let (speed, speed2) = if self.is_fast() {
            ("fast", "quickly")
        } else {
            ("slowly", "slowly")
        };
        vec![
            format!("a figure {act} {speed} with {width} movements and drifts {dir}"),
            format!("the figure drifts {dir} while it {act} {speed2} with {width} motion"),
        ]
    }

    fn sample(rng: &mut Rng) -> Self {
        Self {
            action: ACTIONS[rng.random_range(0..4)],
            direction: DIRECTIONS[rng.random_range(0..4)],
            freq: rng::uniform(rng, FREQ_RANGE.0, FREQ_RANGE.1),
            amp: rng::uniform(rng, AMP_RANGE.0, AMP_RANGE.1),
            phase: rng::uniform(rng, 0.0, core::f32::consts::TAU),
        }
    }

    /// Renders `frames` frames of `dim` channels at `fps`; `rng` drives the noise.
    pub fn render(
        &self,
        frames: usize,
        dim: usize,
        fps: f32,
        rng: &mut Rng,
    ) -> Result<MotionSequence> {
        if dim < 4 {
            return Err(Error::invalid(format!(
                "synthetic motion needs d >= 4, got {dim}"
            )));
        }
        let (dx, dy) = self.direction.vector();
        let w = core::f32::consts::TAU * self.freq;
        let mut data = Vec::with_capacity(frames * dim);
        for t in 0..frames {
            let s = t as f32 / fps;
            let osc = |offset: f32| libm::sinf(w * s + self.phase + offset);
            let speed = 0.3 + 0.1 * osc(0.0);
            data.push(dx * speed + NOISE * rng::normal(rng));
            data.push(dy * speed + NOISE * rng::normal(rng));
            let bounce = if self.action == Action::Bounces {
                1.0
            } else {
                OFF_GROUP_WEIGHT
            };
            data.push(bounce * self.amp * (libm::fabsf(osc(0.0)) - 0.5) + NOISE * rng::normal(rng));
            for k in 3..dim {
                let weight = if (k - 3) % 4 == self.action.group() {
                    1.0
                } else {
                    OFF_GROUP_WEIGHT
                };
                let v = match self.action {
                    Action::Twists if (k - 3) % 4 == 3 => {
                        osc(0.7 * k as f32) * libm::cosf(0.5 * w * s)
                    }
                    _ => osc(0.7 * k as f32),
                };
                data.push(weight * self.amp * v + NOISE * rng::normal(rng));
            }
        }
        MotionSequence::new(frames, dim, fps, data)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SynthConfig {
    pub seed: u64,
    pub count: usize,
    pub min_frames: usize,
    pub max_frames: usize,
    pub dim: usize,
    pub fps: f32,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            count: 200,
            min_frames: 40,
            max_frames: 196,
            dim: 16,
            fps: 20.0,
        }
    }
}

pub fn make_synthetic_dataset(cfg: &SynthConfig) -> Result<Dataset> {
    if cfg.count < MIN_ITEMS {
        return Err(Error::invalid(format!(
            "synthetic dataset needs count >= {MIN_ITEMS}"
        )));
    }
    if cfg.dim < 4 || cfg.min_frames == 0 || cfg.min_frames > cfg.max_frames || !(cfg.fps > 0.0) {
        return Err(Error::invalid("bad synthetic dataset configuration"));
    }
    let mut rng = rng::fork(cfg.seed, 1);
    let mut items = Vec::with_capacity(cfg.count);
    for i in 0..cfg.count {
        let params = SynthParams::sample(&mut rng);
        let frames = rng.random_range(cfg.min_frames..=cfg.max_frames);
        let motion = params.render(frames, cfg.dim, cfg.fps, &mut rng)?;
        items.push(Item {
            id: format!("synth_{i:05}"),
            motion,
            captions: params.captions(),
            params: Some(params),
        });
    }
    Dataset::new(items, cfg.seed)
}
