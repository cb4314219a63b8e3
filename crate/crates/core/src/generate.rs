//! Length-restricted streaming generation and token sampling.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::hct::HctModel;
use crate::motion::{MotionSequence, NormStats};
use crate::rng::{self, Rng};
use crate::rvq::{RvqVae, TokenGrid};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Policy {
    Greedy,
    TopK { k: usize, temperature: f32 },
}

impl Policy {
    pub fn is_stochastic(&self) -> bool {
        matches!(self, Policy::TopK { k, .. } if *k > 1)
    }
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Draws a token id. Top-k keeps the `k` largest logits (clamped to the
/// vocabulary, ties by lower index) and samples from their softmax at the
/// given temperature.
pub fn sample_token(logits: &[f32], policy: Policy, rng: &mut Rng) -> Result<u32> {
    if logits.is_empty() {
        return Err(Error::invalid("no logits to sample from"));
    }
    match policy {
        Policy::Greedy => Ok(argmax(logits) as u32),
        Policy::TopK { k, temperature } => {
            if !(temperature > 0.0) || !temperature.is_finite() {
                return Err(Error::invalid(format!(
                    "temperature must be positive and finite, got {temperature}"
                )));
            }
            let k = k.clamp(1, logits.len());
            if k == 1 {
                return Ok(argmax(logits) as u32);
            }
            let mut idx: Vec<usize> = (0..logits.len()).collect();
            idx.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
            idx.truncate(k);
            let top = logits[idx[0]] as f64;
            let w: Vec<f64> = idx
                .iter()
                .map(|&i| libm::exp((logits[i] as f64 - top) / temperature as f64))
                .collect();
            let total: f64 = w.iter().sum();
            let mut u = rng.random::<f64>() * total;
            for (&i, &wi) in idx.iter().zip(&w) {
                if u < wi {
                    return Ok(i as u32);
                }
                u -= wi;
            }
            Ok(*idx.last().expect("k >= 1") as u32)
        }
    }
}

/// Monotonic time source in seconds.
pub trait Clock {
    fn now(&self) -> f64;
}

/// Clock that never advances; timings come out as zeros.
pub struct NoClock;

impl Clock for NoClock {
    fn now(&self) -> f64 {
        0.0
    }
}

/// One streamed position.
pub struct Frame<'a> {
    pub position: usize,
    pub tokens: &'a [u32],
    /// Denormalized pose for this position.
    pub pose: &'a [f32],
}

pub type FrameCallback<'c> = dyn FnMut(Frame<'_>) -> core::result::Result<(), String> + 'c;

#[derive(Clone, Debug, PartialEq)]
pub struct GenRequest {
    pub text: String,
    pub target_frames: usize,
    pub policy: Policy,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenResult {
    pub tokens: TokenGrid,
    /// Denormalized motion, one frame per position.
    pub motion: MotionSequence,
    /// Cumulative seconds after each (position, layer) token, row-major.
    pub timings: Vec<f64>,
    pub warnings: Vec<String>,
}

/// Frozen tokenizer plus transformer.
pub struct Generator<'a> {
    pub hct: &'a HctModel,
    pub rvq: &'a RvqVae,
    pub stats: &'a NormStats,
    pub fps: f32,
}

impl<'a> Generator<'a> {
    pub fn new(hct: &'a HctModel, rvq: &'a RvqVae, stats: &'a NormStats, fps: f32) -> Result<Self> {
        if hct.cfg.codebook_size != rvq.cfg.codebook_size
            || hct.cfg.num_layers != rvq.cfg.num_layers
        {
            return Err(Error::invalid(format!(
                "transformer expects {} layers of {} codes, tokenizer has {} layers of {}",
                hct.cfg.num_layers,
                hct.cfg.codebook_size,
                rvq.cfg.num_layers,
                rvq.cfg.codebook_size
            )));
        }
        if stats.dim() != rvq.cfg.input_dim {
            return Err(Error::shape(
                "norm stats",
                &[stats.dim()],
                &[rvq.cfg.input_dim],
            ));
        }
        Ok(Self {
            hct,
            rvq,
            stats,
            fps,
        })
    }

    /// Token grid only, without decoding.
    pub fn tokens(
        &self,
        req: &GenRequest,
        clock: &dyn Clock,
    ) -> Result<(TokenGrid, Vec<f64>, Vec<String>)> {
        let mut sink = |_: usize, _: &[u32]| Ok(());
        self.token_loop(req, clock, &mut sink)
    }

    fn token_loop(
        &self,
        req: &GenRequest,
        clock: &dyn Clock,
        on_position: &mut dyn FnMut(usize, &[u32]) -> Result<()>,
    ) -> Result<(TokenGrid, Vec<f64>, Vec<String>)> {
        if req.target_frames == 0 {
            return Err(Error::invalid("target_frames must be >= 1"));
        }
        let mut warnings = Vec::new();
        let span = req.target_frames + self.hct.cfg.prefix_len() - 1;
        if span > self.hct.cfg.max_rel {
            warnings.push(format!(
                "{} frames exceed the relative distance table ({}); longer distances are clamped",
                req.target_frames, self.hct.cfg.max_rel
            ));
        }
        let text = self.hct.embed_text(&req.text)?;
        let mut stream = self.hct.stream(&text)?;
        let mut rng = rng::fork(req.seed, 0x67656e);
        let layers = self.hct.num_layers();
        let mut ids = Vec::with_capacity(req.target_frames * layers);
        let mut timings = Vec::with_capacity(req.target_frames * layers);
        let t0 = clock.now();
        for j in 0..req.target_frames {
            let prev = if j == 0 {
                None
            } else {
                Some(&ids[(j - 1) * layers..j * layers])
            };
            let logits = stream.next_logits(prev)?;
            for row in &logits {
                ids.push(sample_token(row, req.policy, &mut rng)?);
                let t = (clock.now() - t0).max(timings.last().copied().unwrap_or(0.0));
                timings.push(t);
            }
            on_position(j, &ids[j * layers..(j + 1) * layers])?;
        }
        Ok((
            TokenGrid::new(req.target_frames, layers, ids)?,
            timings,
            warnings,
        ))
    }

    /// Generates `req.target_frames` positions. When `on_frame` is given, each
    /// position is decoded (full prefix through the decoder) and handed to
    /// the callback before the next position is computed; a callback error
    /// aborts generation.
    pub fn generate(
        &self,
        req: &GenRequest,
        clock: &dyn Clock,
        mut on_frame: Option<&mut FrameCallback<'_>>,
    ) -> Result<GenResult> {
        let layers = self.hct.num_layers();
        let mut prefix: Vec<u32> = Vec::new();
        let mut emit = |j: usize, toks: &[u32]| -> Result<()> {
            prefix.extend_from_slice(toks);
            let Some(cb) = on_frame.as_deref_mut() else {
                return Ok(());
            };
            let grid = TokenGrid::new(j + 1, layers, prefix.clone())?;
            let pose = self.decode_grid(&grid)?;
            cb(Frame {
                position: j,
                tokens: toks,
                pose: pose.frame(j),
            })
            .map_err(Error::Aborted)
        };
        let (tokens, timings, warnings) = self.token_loop(req, clock, &mut emit)?;
        let motion = self.decode_grid(&tokens)?;
        Ok(GenResult {
            tokens,
            motion,
            timings,
            warnings,
        })
    }

    /// Dequantize all layers, decode and denormalize.
    pub fn decode_grid(&self, grid: &TokenGrid) -> Result<MotionSequence> {
        let lat = self.rvq.codebook.dequantize(grid, grid.layers - 1)?;
        let m = self.rvq.decode(&lat, self.fps)?;
        self.stats.denormalize(&m)
    }
}

/// Reference decoder: recomputes every position from scratch with a full
/// tape forward over the prefix generated so far.
pub fn greedy_by_recomputation(hct: &HctModel, text: &str, frames: usize) -> Result<TokenGrid> {
    let raw = hct.embed_text(text)?;
    let layers = hct.num_layers();
    let mut grid = TokenGrid {
        n: 0,
        layers,
        ids: Vec::new(),
    };
    for j in 0..frames {
        let lg = hct.logits(&raw, &grid)?;
        for t in &lg {
            let k = t.shape()[1];
            grid.ids.push(argmax(&t.data()[j * k..(j + 1) * k]) as u32);
        }
        grid.n += 1;
    }
    Ok(grid)
}
