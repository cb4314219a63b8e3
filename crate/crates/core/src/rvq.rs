//! Residual VQ-VAE motion tokenizer.
//!
//! A stride-1 convolutional encoder maps `N x D` normalized motion to `N x d`
//! latents, a stack of `V+1` codebooks quantizes the latents residually, and a
//! mirrored decoder reconstructs the motion. Residuals are carried in f64 so
//! that the per-layer codes plus the final residual add back to the latent
//! exactly.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::motion::MotionSequence;
use crate::optim::AdamW;
use crate::rng::{self, Rng};
use crate::tape::{ConvSpec, Tape, Var};
use crate::tensor::{ParamId, ParamStore, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct RvqConfig {
    /// Pose feature dimension D.
    pub input_dim: usize,
    /// V+1.
    pub num_layers: usize,
    pub codebook_size: usize,
    pub code_dim: usize,
    pub hidden: usize,
    pub kernel: usize,
    pub res_blocks: usize,
    pub dropout: f32,
    /// Commitment weight.
    pub beta: f32,
    pub ema_decay: f32,
    /// A code idle for this many consecutive training batches is reset.
    pub reset_after: u32,
    /// Left-only padding in the decoder, so a prefix decodes identically to
    /// the same frames of a longer sequence.
    pub decoder_causal: bool,
    pub seed: u64,
}

impl RvqConfig {
    pub fn desk(input_dim: usize) -> Self {
        Self {
            input_dim,
            num_layers: 3,
            codebook_size: 256,
            code_dim: 32,
            hidden: 32,
            kernel: 3,
            res_blocks: 2,
            dropout: 0.2,
            beta: 0.02,
            ema_decay: 0.99,
            reset_after: 256,
            decoder_causal: true,
            seed: 0,
        }
    }

    pub fn paper(input_dim: usize) -> Self {
        Self {
            num_layers: 6,
            codebook_size: 8192,
            code_dim: 128,
            hidden: 128,
            ..Self::desk(input_dim)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::invalid(format!("rvq config: {m}")));
        if self.num_layers == 0 {
            return bad("num_layers must be >= 1");
        }
        if self.codebook_size < 2 {
            return bad("codebook_size must be >= 2");
        }
        if self.code_dim == 0 || self.hidden == 0 || self.input_dim == 0 {
            return bad("dimensions must be positive");
        }
        if self.kernel == 0 || self.kernel % 2 == 0 {
            return bad("kernel must be odd");
        }
        if !(self.ema_decay > 0.0 && self.ema_decay < 1.0) {
            return bad("ema_decay must lie in (0, 1)");
        }
        if !(self.beta > 0.0) {
            return bad("beta must be > 0");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        Ok(())
    }
}

/// `n x d` latent rows.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentSequence {
    pub n: usize,
    pub d: usize,
    pub values: Vec<f32>,
}

impl LatentSequence {
    pub fn new(n: usize, d: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != n * d {
            return Err(Error::shape(
                "LatentSequence::new",
                &[n, d],
                &[values.len()],
            ));
        }
        Ok(Self { n, d, values })
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.values[i * self.d..(i + 1) * self.d]
    }
}

/// Token ids, one row of `layers` ids per position.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenGrid {
    pub n: usize,
    pub layers: usize,
    pub ids: Vec<u32>,
}

impl TokenGrid {
    pub fn new(n: usize, layers: usize, ids: Vec<u32>) -> Result<Self> {
        if ids.len() != n * layers || layers == 0 {
            return Err(Error::shape("TokenGrid::new", &[n, layers], &[ids.len()]));
        }
        Ok(Self { n, layers, ids })
    }

    pub fn get(&self, pos: usize, layer: usize) -> u32 {
        self.ids[pos * self.layers + layer]
    }

    pub fn position(&self, pos: usize) -> &[u32] {
        &self.ids[pos * self.layers..(pos + 1) * self.layers]
    }

    pub fn prefix(&self, len: usize) -> TokenGrid {
        let len = len.min(self.n);
        TokenGrid {
            n: len,
            layers: self.layers,
            ids: self.ids[..len * self.layers].to_vec(),
        }
    }

    pub fn check_range(&self, k: usize) -> Result<()> {
        match self.ids.iter().find(|&&t| t as usize >= k) {
            Some(&t) => Err(Error::OutOfRange {
                what: "token id",
                index: t as usize,
                size: k,
            }),
            None => Ok(()),
        }
    }
}

/// Per-layer quantized vectors `b^v` and residuals `r^0..=r^{V+1}`, in f64.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualStack {
    pub n: usize,
    pub d: usize,
    pub quantized: Vec<Vec<f64>>,
    pub residuals: Vec<Vec<f64>>,
}

impl ResidualStack {
    /// `r^{V+1}`
    pub fn final_residual(&self) -> &[f64] {
        self.residuals.last().expect("stack has r^0")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CodebookLayer {
    pub codes: Vec<f32>,
    pub ema_size: Vec<f32>,
    pub ema_sum: Vec<f32>,
    /// Consecutive training batches without an assignment.
    pub idle: Vec<u32>,
    /// Lifetime assignment counts.
    pub usage: Vec<u64>,
}

pub const EMA_EPS: f32 = 1e-5;

impl CodebookLayer {
    fn zeros(k: usize, d: usize) -> Self {
        Self {
            codes: vec![0.0; k * d],
            ema_size: vec![0.0; k],
            ema_sum: vec![0.0; k * d],
            idle: vec![0; k],
            usage: vec![0; k],
        }
    }

    fn set_code(&mut self, j: usize, d: usize, v: &[f32]) {
        self.codes[j * d..(j + 1) * d].copy_from_slice(v);
        self.ema_sum[j * d..(j + 1) * d].copy_from_slice(v);
        self.ema_size[j] = 1.0;
        self.idle[j] = 0;
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    pub k: usize,
    pub d: usize,
    pub layers: Vec<CodebookLayer>,
    pub initialized: bool,
}

impl Codebook {
    pub fn new(num_layers: usize, k: usize, d: usize) -> Self {
        Self {
            k,
            d,
            layers: (0..num_layers)
                .map(|_| CodebookLayer::zeros(k, d))
                .collect(),
            initialized: false,
        }
    }

    /// Builds a codebook from explicit per-layer code tables.
    pub fn from_codes(k: usize, d: usize, tables: Vec<Vec<f32>>) -> Result<Self> {
        let mut cb = Self::new(tables.len(), k, d);
        for (layer, t) in cb.layers.iter_mut().zip(tables) {
            if t.len() != k * d {
                return Err(Error::shape("Codebook::from_codes", &[k, d], &[t.len()]));
            }
            layer.ema_sum.copy_from_slice(&t);
            layer.codes = t;
            layer.ema_size.fill(1.0);
        }
        cb.initialized = true;
        Ok(cb)
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn code(&self, layer: usize, j: usize) -> &[f32] {
        &self.layers[layer].codes[j * self.d..(j + 1) * self.d]
    }

    /// Index of the code closest to `r` (squared Euclidean, f64), lowest index on ties.
    pub fn nearest(&self, layer: usize, r: &[f64]) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for j in 0..self.k {
            let c = self.code(layer, j);
            let mut dist = 0f64;
            for (a, &b) in r.iter().zip(c) {
                let t = a - b as f64;
                dist += t * t;
            }
            if dist < best_d {
                best_d = dist;
                best = j;
            }
        }
        best
    }

    /// Residual quantization of every latent row through all layers.
    pub fn residual_quantize(&self, latent: &LatentSequence) -> Result<(TokenGrid, ResidualStack)> {
        if latent.d != self.d {
            return Err(Error::shape(
                "residual_quantize",
                &[latent.n, latent.d],
                &[self.k, self.d],
            ));
        }
        let (n, d, layers) = (latent.n, self.d, self.num_layers());
        let mut ids = vec![0u32; n * layers];
        let mut r: Vec<f64> = latent.values.iter().map(|&v| v as f64).collect();
        let mut residuals = Vec::with_capacity(layers + 1);
        let mut quantized = Vec::with_capacity(layers);
        for v in 0..layers {
            let mut b = vec![0f64; n * d];
            let mut next = r.clone();
            for i in 0..n {
                let j = self.nearest(v, &r[i * d..(i + 1) * d]);
                ids[i * layers + v] = j as u32;
                let code = self.code(v, j);
                for e in 0..d {
                    b[i * d + e] = code[e] as f64;
                    next[i * d + e] = r[i * d + e] - code[e] as f64;
                }
            }
            residuals.push(r);
            quantized.push(b);
            r = next;
        }
        residuals.push(r);
        Ok((
            TokenGrid { n, layers, ids },
            ResidualStack {
                n,
                d,
                quantized,
                residuals,
            },
        ))
    }

    /// Sum of the selected codes of layers `0..=up_to_layer` at each position.
    pub fn dequantize(&self, tokens: &TokenGrid, up_to_layer: usize) -> Result<LatentSequence> {
        if tokens.layers != self.num_layers() {
            return Err(Error::shape(
                "dequantize",
                &[tokens.n, tokens.layers],
                &[self.num_layers()],
            ));
        }
        if up_to_layer >= self.num_layers() {
            return Err(Error::OutOfRange {
                what: "up_to_layer",
                index: up_to_layer,
                size: self.num_layers(),
            });
        }
        tokens.check_range(self.k)?;
        let d = self.d;
        let mut values = vec![0f32; tokens.n * d];
        let mut acc = vec![0f64; d];
        for i in 0..tokens.n {
            acc.fill(0.0);
            for v in 0..=up_to_layer {
                let code = self.code(v, tokens.get(i, v) as usize);
                for e in 0..d {
                    acc[e] += code[e] as f64;
                }
            }
            for e in 0..d {
                values[i * d + e] = acc[e] as f32;
            }
        }
        LatentSequence::new(tokens.n, d, values)
    }

    /// Initializes every layer from `rows` (`n x d` latents): layer `v`
    /// samples its codes from the residuals left by layers `< v`.
    pub fn init_from(&mut self, rows: &[f32], rng: &mut Rng) -> Result<()> {
        let d = self.d;
        let n = rows.len() / d;
        if n == 0 {
            return Err(Error::invalid(
                "cannot initialize a codebook from no latents",
            ));
        }
        let mut r: Vec<f32> = rows.to_vec();
        for v in 0..self.num_layers() {
            for j in 0..self.k {
                let src = rng.random_range(0..n);
                let row = r[src * d..(src + 1) * d].to_vec();
                self.layers[v].set_code(j, d, &row);
            }
            for i in 0..n {
                let row: Vec<f64> = r[i * d..(i + 1) * d].iter().map(|&x| x as f64).collect();
                let j = self.nearest(v, &row);
                for e in 0..d {
                    r[i * d + e] -= self.layers[v].codes[j * d + e];
                }
            }
        }
        self.initialized = true;
        Ok(())
    }

    /// EMA update of one layer from its residual inputs (`n x d`) and their
    /// assigned codes. Codes without assignments keep their value.
    pub fn ema_update(&mut self, layer: usize, inputs: &[f64], assign: &[u32], decay: f32) {
        let (k, d) = (self.k, self.d);
        let mut count = vec![0u64; k];
        let mut sum = vec![0f64; k * d];
        for (i, &j) in assign.iter().enumerate() {
            let j = j as usize;
            count[j] += 1;
            for e in 0..d {
                sum[j * d + e] += inputs[i * d + e];
            }
        }
        let cl = &mut self.layers[layer];
        for j in 0..k {
            cl.ema_size[j] = decay * cl.ema_size[j] + (1.0 - decay) * count[j] as f32;
            for e in 0..d {
                let s = &mut cl.ema_sum[j * d + e];
                *s = decay * *s + (1.0 - decay) * sum[j * d + e] as f32;
            }
            if count[j] > 0 {
                let size = cl.ema_size[j].max(EMA_EPS);
                for e in 0..d {
                    cl.codes[j * d + e] = cl.ema_sum[j * d + e] / size;
                }
                cl.idle[j] = 0;
                cl.usage[j] += count[j];
            } else {
                cl.idle[j] = cl.idle[j].saturating_add(1);
            }
        }
    }

    /// Replaces codes idle for at least `threshold` batches with uniformly
    /// sampled rows of `recent` (`n x d`). Returns how many were reset.
    pub fn reset_dead_codes(
        &mut self,
        layer: usize,
        threshold: u32,
        recent: &[f64],
        rng: &mut Rng,
    ) -> usize {
        let d = self.d;
        let n = recent.len() / d;
        if n == 0 {
            return 0;
        }
        let mut resets = 0;
        for j in 0..self.k {
            if self.layers[layer].idle[j] >= threshold {
                let src = rng.random_range(0..n);
                let row: Vec<f32> = recent[src * d..(src + 1) * d]
                    .iter()
                    .map(|&x| x as f32)
                    .collect();
                self.layers[layer].set_code(j, d, &row);
                resets += 1;
            }
        }
        resets
    }

    /// Fraction of codes in `layer` idle for at least `threshold` batches.
    pub fn dead_fraction(&self, layer: usize, threshold: u32) -> f32 {
        let idle = &self.layers[layer].idle;
        idle.iter().filter(|&&c| c >= threshold).count() as f32 / idle.len() as f32
    }
}

// ---- networks ------------------------------------------------------------

#[derive(Clone, Copy, Debug)]
struct Conv {
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Debug)]
struct Coder {
    conv_in: Conv,
    blocks: Vec<(Conv, Conv)>,
    conv_out: Conv,
    causal: bool,
}

fn add_conv(
    ps: &mut ParamStore,
    name: &str,
    cout: usize,
    cin: usize,
    k: usize,
    rng: &mut Rng,
) -> Conv {
    let bound = 1.0 / libm::sqrtf((cin * k) as f32);
    let w: Vec<f32> = (0..cout * cin * k)
        .map(|_| rng::uniform(rng, -bound, bound))
        .collect();
    let w = ps.add(
        format!("{name}.w"),
        Tensor::new(&[cout, cin, k], w).expect("sized"),
    );
    let b = ps.add(format!("{name}.b"), Tensor::zeros(&[cout]));
    Conv { w, b }
}

impl Coder {
    fn build(
        ps: &mut ParamStore,
        prefix: &str,
        cin: usize,
        hidden: usize,
        cout: usize,
        cfg: &RvqConfig,
        causal: bool,
        rng: &mut Rng,
    ) -> Self {
        let k = cfg.kernel;
        let conv_in = add_conv(ps, &format!("{prefix}.in"), hidden, cin, k, rng);
        let blocks = (0..cfg.res_blocks)
            .map(|i| {
                (
                    add_conv(ps, &format!("{prefix}.res{i}.c1"), hidden, hidden, k, rng),
                    add_conv(ps, &format!("{prefix}.res{i}.c2"), hidden, hidden, 1, rng),
                )
            })
            .collect();
        let conv_out = add_conv(ps, &format!("{prefix}.out"), cout, hidden, k, rng);
        Self {
            conv_in,
            blocks,
            conv_out,
            causal,
        }
    }

    fn forward(
        &self,
        tape: &mut Tape,
        x: Var,
        kernel: usize,
        dropout: f32,
        mut rng: Option<&mut Rng>,
    ) -> Result<Var> {
        let spec = if self.causal {
            ConvSpec::causal(kernel)
        } else {
            ConvSpec::same(kernel)
        };
        let conv = |tape: &mut Tape, x: Var, c: Conv, s: ConvSpec| {
            let (w, b) = (tape.param(c.w), tape.param(c.b));
            tape.conv1d(x, w, b, s)
        };
        let mut h = conv(tape, x, self.conv_in, spec)?;
        h = tape.gelu(h)?;
        for &(c1, c2) in &self.blocks {
            let mut a = tape.gelu(h)?;
            a = conv(tape, a, c1, spec)?;
            a = tape.gelu(a)?;
            if let Some(r) = rng.as_deref_mut() {
                a = tape.dropout(a, dropout, r)?;
            }
            a = conv(tape, a, c2, ConvSpec::same(1))?;
            h = tape.add(h, a)?;
        }
        conv(tape, h, self.conv_out, spec)
    }
}

/// Parts of one tokenizer loss evaluation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RvqLossParts {
    pub total: f32,
    pub recon_l1: f32,
    pub commit: f32,
}

/// Intermediate state of a tokenizer forward pass on a tape.
pub struct RvqForward {
    pub loss: Var,
    pub latent: Var,
    pub recon: Var,
    pub parts: RvqLossParts,
    /// Token ids in `(batch, position)` row order.
    pub tokens: TokenGrid,
    pub stack: ResidualStack,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QuantizerPath {
    /// Nearest-code quantization with the straight-through estimator.
    Codebook,
    /// Decoder reads the latent directly. Used by gradient checks.
    Bypass,
}

#[derive(Clone, Debug)]
pub struct RvqVae {
    pub cfg: RvqConfig,
    pub params: ParamStore,
    pub codebook: Codebook,
    encoder: Coder,
    decoder: Coder,
}

impl RvqVae {
    pub fn new(cfg: RvqConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = rng::fork(cfg.seed, 0x7271);
        let mut params = ParamStore::new();
        let encoder = Coder::build(
            &mut params,
            "enc",
            cfg.input_dim,
            cfg.hidden,
            cfg.code_dim,
            &cfg,
            false,
            &mut rng,
        );
        let decoder = Coder::build(
            &mut params,
            "dec",
            cfg.code_dim,
            cfg.hidden,
            cfg.input_dim,
            &cfg,
            cfg.decoder_causal,
            &mut rng,
        );
        let codebook = Codebook::new(cfg.num_layers, cfg.codebook_size, cfg.code_dim);
        Ok(Self {
            cfg,
            params,
            codebook,
            encoder,
            decoder,
        })
    }

    /// Encoder on a tape: `[B, D, L]` or `[D, L]` -> `[.., d, L]`.
    pub fn encode_on(&self, tape: &mut Tape, x: Var, train: Option<&mut Rng>) -> Result<Var> {
        self.encoder
            .forward(tape, x, self.cfg.kernel, self.cfg.dropout, train)
    }

    pub fn decode_on(&self, tape: &mut Tape, z: Var, train: Option<&mut Rng>) -> Result<Var> {
        self.decoder
            .forward(tape, z, self.cfg.kernel, self.cfg.dropout, train)
    }

    fn check_input(&self, seq: &MotionSequence) -> Result<()> {
        if !seq.is_normalized() {
            return Err(Error::NotNormalized);
        }
        if seq.dim() != self.cfg.input_dim {
            return Err(Error::shape(
                "encode",
                &[seq.frames(), seq.dim()],
                &[self.cfg.input_dim],
            ));
        }
        Ok(())
    }

    /// Eval-mode encoding of one normalized sequence.
    pub fn encode(&self, seq: &MotionSequence) -> Result<LatentSequence> {
        self.encode_with(seq, None)
    }

    /// Encoding with dropout active when `train` is given.
    pub fn encode_with(
        &self,
        seq: &MotionSequence,
        train: Option<&mut Rng>,
    ) -> Result<LatentSequence> {
        self.check_input(seq)?;
        let mut tape = Tape::with_params(&self.params);
        let x = tape.constant(Tensor::new(
            &[seq.dim(), seq.frames()],
            seq.channels_first(),
        )?);
        let z = self.encode_on(&mut tape, x, train)?;
        let mut rows = vec![0f32; seq.frames() * self.cfg.code_dim];
        crate::tape::transpose_into(tape.value(z), &mut rows, self.cfg.code_dim, seq.frames());
        LatentSequence::new(seq.frames(), self.cfg.code_dim, rows)
    }

    /// Eval-mode decoding to normalized motion.
    pub fn decode(&self, latent: &LatentSequence, fps: f32) -> Result<MotionSequence> {
        if latent.d != self.cfg.code_dim {
            return Err(Error::shape(
                "decode",
                &[latent.n, latent.d],
                &[self.cfg.code_dim],
            ));
        }
        crate::tensor::check_finite(&latent.values, "decode input")?;
        let mut cf = vec![0f32; latent.values.len()];
        crate::tape::transpose_into(&latent.values, &mut cf, latent.n, latent.d);
        let mut tape = Tape::with_params(&self.params);
        let z = tape.constant(Tensor::new(&[latent.d, latent.n], cf)?);
        let y = self.decode_on(&mut tape, z, None)?;
        Ok(
            MotionSequence::from_channels_first(self.cfg.input_dim, latent.n, fps, tape.value(y))?
                .assume_normalized(),
        )
    }

    pub fn tokenize(&self, seq: &MotionSequence) -> Result<TokenGrid> {
        Ok(self.codebook.residual_quantize(&self.encode(seq)?)?.0)
    }

    /// encode -> quantize -> dequantize(up_to_layer) -> decode.
    pub fn reconstruct(&self, seq: &MotionSequence, up_to_layer: usize) -> Result<MotionSequence> {
        let grid = self.tokenize(seq)?;
        let lat = self.codebook.dequantize(&grid, up_to_layer)?;
        self.decode(&lat, seq.fps())
    }

    /// Full tokenizer loss on a channels-first batch `x` of shape `[B, D, L]`:
    /// L1 reconstruction plus `beta` times the commitment terms of layers
    /// `1..=V`. Gradients reach the encoder through the straight-through
    /// estimator.
    pub fn forward_loss(
        &self,
        tape: &mut Tape,
        x: Var,
        path: QuantizerPath,
        mut train: Option<&mut Rng>,
    ) -> Result<RvqForward> {
        let (d, v_layers) = (self.cfg.code_dim, self.cfg.num_layers);
        let z = self.encode_on(tape, x, train.as_deref_mut())?;
        let shape = tape.shape(z).to_vec();
        let (b, l) = match shape[..] {
            [b, _, l] => (b, l),
            [_, l] => (1, l),
            _ => return Err(Error::invalid("latent must be rank 2 or 3")),
        };
        // [B, d, L] -> rows [(b, t), d]
        let mut rows = vec![0f32; b * l * d];
        for bi in 0..b {
            crate::tape::transpose_into(
                &tape.value(z)[bi * d * l..(bi + 1) * d * l],
                &mut rows[bi * l * d..(bi + 1) * l * d],
                d,
                l,
            );
        }
        let latent = LatentSequence::new(b * l, d, rows)?;
        let (tokens, stack) = self.codebook.residual_quantize(&latent)?;
        let to_cf = |rows_f64: &dyn Fn(usize) -> f32| {
            let mut out = vec![0f32; b * d * l];
            for bi in 0..b {
                for t in 0..l {
                    for e in 0..d {
                        out[(bi * d + e) * l + t] = rows_f64(((bi * l) + t) * d + e);
                    }
                }
            }
            out
        };
        let dec_in = match path {
            QuantizerPath::Bypass => z,
            QuantizerPath::Codebook => {
                let fin = stack.final_residual();
                // q - z == -(r^{V+1})
                let delta = to_cf(&|i| -(fin[i] as f32));
                let c = tape.constant(Tensor::new(&shape, delta)?);
                tape.add(z, c)?
            }
        };
        let recon = self.decode_on(tape, dec_in, train)?;
        let recon_l1 = tape.l1_mean(recon, x)?;
        let mut loss = recon_l1;
        let mut commit_total = 0f32;
        if path == QuantizerPath::Codebook {
            for v in 1..v_layers {
                // ||r^v - sg[b^v]||^2 with r^v = z - const, i.e. target z - r^{v+1}
                let next = &stack.residuals[v + 1];
                let zv = tape.value(z).to_vec();
                let target = to_cf(&|i| {
                    let (bi, rem) = (i / (l * d), i % (l * d));
                    let (t, e) = (rem / d, rem % d);
                    zv[(bi * d + e) * l + t] - next[i] as f32
                });
                let tv = tape.constant(Tensor::new(&shape, target)?);
                let c = tape.mse_mean(z, tv)?;
                commit_total += tape.scalar_value(c)?;
                let scaled = tape.scale(c, self.cfg.beta)?;
                loss = tape.add(loss, scaled)?;
            }
        }
        let parts = RvqLossParts {
            total: tape.scalar_value(loss)?,
            recon_l1: tape.scalar_value(recon_l1)?,
            commit: commit_total,
        };
        Ok(RvqForward {
            loss,
            latent: z,
            recon,
            parts,
            tokens,
            stack,
        })
    }

    /// One optimization step on a channels-first batch `[B, D, L]`, followed
    /// by the EMA codebook update and dead-code reset.
    pub fn train_step(
        &mut self,
        batch: Tensor,
        opt: &mut AdamW,
        lr: f32,
        clip: f32,
        rng: &mut Rng,
    ) -> Result<RvqStep> {
        if batch.rank() != 3 || batch.shape()[1] != self.cfg.input_dim {
            return Err(Error::shape(
                "train_step",
                batch.shape(),
                &[0, self.cfg.input_dim, 0],
            ));
        }
        if !self.codebook.initialized {
            let mut tape = Tape::with_params(&self.params);
            let x = tape.constant(batch.clone());
            let z = self.encode_on(&mut tape, x, None)?;
            let [b, d, l] = tape.shape(z)[..] else {
                unreachable!()
            };
            let mut rows = vec![0f32; b * l * d];
            for bi in 0..b {
                crate::tape::transpose_into(
                    &tape.value(z)[bi * d * l..(bi + 1) * d * l],
                    &mut rows[bi * l * d..(bi + 1) * l * d],
                    d,
                    l,
                );
            }
            self.codebook.init_from(&rows, rng)?;
        }
        self.params.zero_grad();
        let (parts, tokens, stack, grads) = {
            let mut tape = Tape::with_params(&self.params);
            let x = tape.constant(batch);
            let fwd = self.forward_loss(&mut tape, x, QuantizerPath::Codebook, Some(rng))?;
            let grads = tape.backward(fwd.loss)?;
            (fwd.parts, fwd.tokens, fwd.stack, grads)
        };
        self.params.accumulate(&grads)?;
        let grad_norm = self.params.clip_grad_norm(clip);
        opt.step(&mut self.params, lr)?;
        let layers = self.cfg.num_layers;
        let mut resets = 0;
        for v in 0..layers {
            let assign: Vec<u32> = (0..tokens.n).map(|i| tokens.get(i, v)).collect();
            self.codebook
                .ema_update(v, &stack.residuals[v], &assign, self.cfg.ema_decay);
            resets +=
                self.codebook
                    .reset_dead_codes(v, self.cfg.reset_after, &stack.residuals[v], rng);
        }
        Ok(RvqStep {
            parts,
            grad_norm,
            resets,
        })
    }

    /// Named tensors for checkpointing: network parameters then codebook state.
    pub fn to_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out: Vec<(String, Tensor)> = self
            .params
            .iter()
            .map(|(n, t)| {
                (
                    String::from(n),
                    Tensor::new(t.shape(), t.data().to_vec()).expect("valid"),
                )
            })
            .collect();
        let (k, d) = (self.codebook.k, self.codebook.d);
        for (v, l) in self.codebook.layers.iter().enumerate() {
            let f = |x: &[u32]| x.iter().map(|&c| c as f32).collect::<Vec<f32>>();
            out.push((
                format!("cb.{v}.codes"),
                Tensor::new(&[k, d], l.codes.clone()).expect("sized"),
            ));
            out.push((
                format!("cb.{v}.ema_size"),
                Tensor::new(&[k], l.ema_size.clone()).expect("sized"),
            ));
            out.push((
                format!("cb.{v}.ema_sum"),
                Tensor::new(&[k, d], l.ema_sum.clone()).expect("sized"),
            ));
            out.push((
                format!("cb.{v}.idle"),
                Tensor::new(&[k], f(&l.idle)).expect("sized"),
            ));
            let usage = l.usage.iter().map(|&c| c as f32).collect();
            out.push((
                format!("cb.{v}.usage"),
                Tensor::new(&[k], usage).expect("sized"),
            ));
        }
        out
    }

    pub fn from_tensors(cfg: RvqConfig, tensors: &[(String, Tensor)]) -> Result<Self> {
        let mut m = Self::new(cfg)?;
        let find = |name: &str| {
            tensors
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t)
                .ok_or_else(|| Error::invalid(format!("checkpoint is missing tensor {name}")))
        };
        let names: Vec<String> = m.params.iter().map(|(n, _)| String::from(n)).collect();
        for name in names {
            let t = find(&name)?;
            m.params.set_data(&name, t.shape(), t.data().to_vec())?;
        }
        let (k, d) = (m.codebook.k, m.codebook.d);
        for v in 0..m.codebook.num_layers() {
            let get = |suffix: &str, shape: &[usize]| -> Result<Vec<f32>> {
                let t = find(&format!("cb.{v}.{suffix}"))?;
                if t.shape() != shape {
                    return Err(Error::shape("checkpoint codebook", t.shape(), shape));
                }
                Ok(t.data().to_vec())
            };
            let l = &mut m.codebook.layers[v];
            l.codes = get("codes", &[k, d])?;
            l.ema_size = get("ema_size", &[k])?;
            l.ema_sum = get("ema_sum", &[k, d])?;
            l.idle = get("idle", &[k])?.iter().map(|&c| c as u32).collect();
            l.usage = get("usage", &[k])?.iter().map(|&c| c as u64).collect();
        }
        m.codebook.initialized = true;
        Ok(m)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RvqStep {
    pub parts: RvqLossParts,
    pub grad_norm: f32,
    pub resets: usize,
}
