//! Hierarchical causal transformer over residual token grids.
//!
//! One independent decoder stack per quantization layer. Stack `v` reads a
//! condition prefix (text projection plus layer embedding) followed by the
//! cumulative token embeddings of layers `0..=v` at earlier positions, and
//! predicts the layer-`v` token of the next position. Attention uses
//! Transformer-XL style relative positions: a fixed sinusoidal distance
//! table, a learned key projection for it, and global content/position biases.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::kernels::{self, gemm_nn};
use crate::optim::AdamW;
use crate::rng::{self, Rng};
use crate::rvq::TokenGrid;
use crate::tape::{Tape, Var};
use crate::tensor::{ParamId, ParamStore, Tensor};
use crate::text::TextEncoder;

#[derive(Clone, Debug, PartialEq)]
pub struct HctConfig {
    pub d_model: usize,
    /// V+1.
    pub num_layers: usize,
    pub heads: Vec<usize>,
    pub depths: Vec<usize>,
    pub codebook_size: usize,
    pub max_rel: usize,
    pub dropout: f32,
    /// Teacher-input corruption probability.
    pub tau: f32,
    pub text_dim: usize,
    pub text_seed: u64,
    /// Single combined prefix `p + q_emb(v)`; when false the prefix is the
    /// two positions `[p, q_emb(v)]`.
    pub pnq: bool,
    pub ffn_mult: usize,
    pub seed: u64,
}

impl HctConfig {
    pub fn desk() -> Self {
        Self {
            d_model: 64,
            num_layers: 3,
            heads: vec![4, 2, 2],
            depths: vec![4, 2, 2],
            codebook_size: 256,
            max_rel: 512,
            dropout: 0.0,
            tau: 0.5,
            text_dim: 64,
            text_seed: 0x7e47,
            pnq: true,
            ffn_mult: 4,
            seed: 0,
        }
    }

    pub fn paper() -> Self {
        Self {
            d_model: 1024,
            num_layers: 6,
            heads: vec![16, 12, 6, 2, 2, 2],
            depths: vec![18, 16, 8, 4, 2, 2],
            codebook_size: 8192,
            dropout: 0.1,
            text_dim: 512,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::invalid(format!("hct config: {m}")));
        if self.num_layers == 0 {
            return bad("num_layers must be >= 1".into());
        }
        if self.heads.len() != self.num_layers || self.depths.len() != self.num_layers {
            return bad(format!(
                "heads ({}) and depths ({}) must list one entry per layer ({})",
                self.heads.len(),
                self.depths.len(),
                self.num_layers
            ));
        }
        if let Some(h) = self.heads.iter().find(|&&h| h == 0 || h > self.d_model) {
            return bad(format!("{h} heads do not fit d_model {}", self.d_model));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return bad(format!("tau {} outside [0, 1]", self.tau));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.codebook_size < 2 || self.d_model == 0 || self.text_dim == 0 || self.ffn_mult == 0 {
            return bad("sizes must be positive (codebook_size >= 2)".into());
        }
        Ok(())
    }

    /// Attention width for `heads` heads: `heads * floor(d_model / heads)`.
    /// Equals `d_model` when the heads divide it.
    pub fn attn_width(&self, heads: usize) -> usize {
        heads * (self.d_model / heads)
    }

    pub fn prefix_len(&self) -> usize {
        if self.pnq {
            1
        } else {
            2
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct BlockIds {
    ln1_g: ParamId,
    ln1_b: ParamId,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wkr: ParamId,
    u: ParamId,
    vb: ParamId,
    wo: ParamId,
    bo: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Clone, Debug)]
struct StackIds {
    heads: usize,
    blocks: Vec<BlockIds>,
    lnf_g: ParamId,
    lnf_b: ParamId,
    head_w: ParamId,
    head_b: ParamId,
}

#[derive(Clone, Debug)]
struct Ids {
    tok_emb: ParamId,
    layer_emb: ParamId,
    text_w: ParamId,
    text_b: ParamId,
    stacks: Vec<StackIds>,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Init {
    Zero,
    One,
    Normal,
}

/// Declares every parameter through `add(name, shape, init)`.
fn declare(cfg: &HctConfig, add: &mut dyn FnMut(String, &[usize], Init) -> ParamId) -> Ids {
    let (dm, k) = (cfg.d_model, cfg.codebook_size);
    let ff = dm * cfg.ffn_mult;
    let tok_emb = add("tok_emb".into(), &[k, dm], Init::Normal);
    let layer_emb = add("layer_emb".into(), &[cfg.num_layers, dm], Init::Normal);
    let text_w = add("text.w".into(), &[cfg.text_dim, dm], Init::Normal);
    let text_b = add("text.b".into(), &[dm], Init::Zero);
    let stacks = (0..cfg.num_layers)
        .map(|v| {
            let heads = cfg.heads[v];
            let hd = dm / heads;
            let aw = heads * hd;
            let blocks = (0..cfg.depths[v])
                .map(|i| {
                    let mut p = |n: &str, s: &[usize], init| add(format!("l{v}.b{i}.{n}"), s, init);
                    BlockIds {
                        ln1_g: p("ln1.g", &[dm], Init::One),
                        ln1_b: p("ln1.b", &[dm], Init::Zero),
                        wq: p("wq", &[dm, aw], Init::Normal),
                        wk: p("wk", &[dm, aw], Init::Normal),
                        wv: p("wv", &[dm, aw], Init::Normal),
                        wkr: p("wkr", &[dm, aw], Init::Normal),
                        u: p("u", &[heads, hd], Init::Zero),
                        vb: p("vb", &[heads, hd], Init::Zero),
                        wo: p("wo", &[aw, dm], Init::Normal),
                        bo: p("bo", &[dm], Init::Zero),
                        ln2_g: p("ln2.g", &[dm], Init::One),
                        ln2_b: p("ln2.b", &[dm], Init::Zero),
                        w1: p("ff1.w", &[dm, ff], Init::Normal),
                        b1: p("ff1.b", &[ff], Init::Zero),
                        w2: p("ff2.w", &[ff, dm], Init::Normal),
                        b2: p("ff2.b", &[dm], Init::Zero),
                    }
                })
                .collect();
            StackIds {
                heads,
                blocks,
                lnf_g: add(format!("l{v}.lnf.g"), &[dm], Init::One),
                lnf_b: add(format!("l{v}.lnf.b"), &[dm], Init::Zero),
                head_w: add(format!("l{v}.head.w"), &[dm, k], Init::Normal),
                head_b: add(format!("l{v}.head.b"), &[k], Init::Zero),
            }
        })
        .collect();
    Ids {
        tok_emb,
        layer_emb,
        text_w,
        text_b,
        stacks,
    }
}

/// Parameter names and shapes without allocating any weights.
#[derive(Clone, Debug, PartialEq)]
pub struct HctLayout {
    pub params: Vec<(String, Vec<usize>)>,
    pub depths: Vec<usize>,
    pub heads: Vec<usize>,
}

impl HctLayout {
    pub fn num_scalars(&self) -> usize {
        self.params
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }

    /// Number of attention blocks declared for quantization layer `v`.
    pub fn depth_of(&self, v: usize) -> usize {
        let prefix = format!("l{v}.b");
        let mut blocks: Vec<&str> = self
            .params
            .iter()
            .filter_map(|(n, _)| n.strip_prefix(&prefix))
            .filter_map(|rest| rest.split('.').next())
            .collect();
        blocks.sort_unstable();
        blocks.dedup();
        blocks.len()
    }
}

pub fn layout(cfg: &HctConfig) -> Result<HctLayout> {
    cfg.validate()?;
    let mut params = Vec::new();
    declare(cfg, &mut |name, shape, _| {
        params.push((name, shape.to_vec()));
        ParamId(params.len() - 1)
    });
    Ok(HctLayout {
        params,
        depths: cfg.depths.clone(),
        heads: cfg.heads.clone(),
    })
}

/// Fixed sinusoidal embeddings for distances `0..=max_rel`, `[max_rel+1, dm]`.
pub fn relative_table(max_rel: usize, dm: usize) -> Vec<f32> {
    let mut t = vec![0f32; (max_rel + 1) * dm];
    for dist in 0..=max_rel {
        for i in 0..dm / 2 {
            let freq = libm::pow(10000.0, -(2.0 * i as f64) / dm as f64);
            let a = dist as f64 * freq;
            t[dist * dm + 2 * i] = libm::sin(a) as f32;
            t[dist * dm + 2 * i + 1] = libm::cos(a) as f32;
        }
    }
    t
}

/// Replaces each token independently with a uniform random id with
/// probability `tau`. Returns the new grid and the replacement mask.
pub fn corrupt_tokens(
    grid: &TokenGrid,
    tau: f32,
    k: usize,
    rng: &mut Rng,
) -> (TokenGrid, Vec<bool>) {
    let mut out = grid.clone();
    let mut mask = vec![false; grid.ids.len()];
    for (id, m) in out.ids.iter_mut().zip(mask.iter_mut()) {
        if rng.random::<f32>() < tau {
            *id = rng.random_range(0..k as u32);
            *m = true;
        }
    }
    (out, mask)
}

/// Sum over samples and layers of the token cross-entropy at positions below
/// each sample's length, divided by the batch size. `logits[i][v]` is
/// `[rows, K]` with `rows >= lengths[i]`; rows past the length are masked.
pub fn hct_loss(
    tape: &mut Tape,
    logits: &[Vec<Var>],
    targets: &[TokenGrid],
    lengths: &[usize],
) -> Result<Var> {
    if logits.len() != targets.len() || logits.len() != lengths.len() || logits.is_empty() {
        return Err(Error::invalid(
            "hct_loss needs one logits set, target grid and length per sample",
        ));
    }
    let mut total: Option<Var> = None;
    for ((per_layer, grid), &len) in logits.iter().zip(targets).zip(lengths) {
        if per_layer.len() != grid.layers {
            return Err(Error::shape("hct_loss", &[per_layer.len()], &[grid.layers]));
        }
        for (v, &lg) in per_layer.iter().enumerate() {
            let rows = tape.shape(lg)[0];
            if len > rows || len > grid.n {
                return Err(Error::OutOfRange {
                    what: "sample length",
                    index: len,
                    size: rows.min(grid.n),
                });
            }
            let tg: Vec<u32> = (0..rows)
                .map(|j| if j < len { grid.get(j, v) } else { 0 })
                .collect();
            let w: Vec<f32> = (0..rows).map(|j| if j < len { 1.0 } else { 0.0 }).collect();
            let ce = tape.cross_entropy(lg, &tg, &w)?;
            total = Some(match total {
                Some(t) => tape.add(t, ce)?,
                None => ce,
            });
        }
    }
    tape.scale(total.expect("non-empty"), 1.0 / logits.len() as f32)
}

/// One training example: target grid and its caption.
#[derive(Clone, Debug, PartialEq)]
pub struct HctExample {
    pub grid: TokenGrid,
    pub caption: String,
}

#[derive(Clone, Debug)]
pub struct HctModel {
    pub cfg: HctConfig,
    pub params: ParamStore,
    pub text: TextEncoder,
    ids: Ids,
    rtab: Vec<f32>,
}

impl HctModel {
    pub fn new(cfg: HctConfig) -> Result<Self> {
        cfg.validate()?;
        let mut r = rng::fork(cfg.seed, 0x4854);
        let mut params = ParamStore::new();
        let ids = declare(&cfg, &mut |name, shape, init| {
            let n: usize = shape.iter().product();
            let data = match init {
                Init::Zero => vec![0.0; n],
                Init::One => vec![1.0; n],
                Init::Normal => (0..n).map(|_| 0.02 * rng::normal(&mut r)).collect(),
            };
            params.add(name, Tensor::new(shape, data).expect("sized"))
        });
        let rtab = relative_table(cfg.max_rel, cfg.d_model);
        let text = TextEncoder::new(cfg.text_seed, cfg.text_dim);
        Ok(Self {
            cfg,
            params,
            text,
            ids,
            rtab,
        })
    }

    pub fn num_layers(&self) -> usize {
        self.cfg.num_layers
    }

    pub fn depth(&self, v: usize) -> usize {
        self.ids.stacks[v].blocks.len()
    }

    pub fn embed_text(&self, caption: &str) -> Result<Vec<f32>> {
        self.text.embed(caption)
    }

    /// Layer-`v` input sequence: the condition prefix followed by the
    /// cumulative embeddings of `inputs` (positions `0..inputs.n`).
    pub fn layer_input(
        &self,
        tape: &mut Tape,
        text_raw: &[f32],
        v: usize,
        inputs: &TokenGrid,
    ) -> Result<Var> {
        let cums = self.cumulative_inputs(tape, inputs, v + 1)?;
        let p = self.text_condition(tape, text_raw)?;
        self.prefixed(tape, p, v, cums.get(v).copied())
    }

    fn text_condition(&self, tape: &mut Tape, text_raw: &[f32]) -> Result<Var> {
        if text_raw.len() != self.cfg.text_dim {
            return Err(Error::shape(
                "text condition",
                &[text_raw.len()],
                &[self.cfg.text_dim],
            ));
        }
        let raw = tape.constant(Tensor::new(&[1, self.cfg.text_dim], text_raw.to_vec())?);
        let (w, b) = (tape.param(self.ids.text_w), tape.param(self.ids.text_b));
        tape.linear(raw, w, Some(b))
    }

    /// Cumulative embeddings for layers `0..layers`, `[n, dm]` each.
    fn cumulative_inputs(
        &self,
        tape: &mut Tape,
        inputs: &TokenGrid,
        layers: usize,
    ) -> Result<Vec<Var>> {
        if inputs.n == 0 {
            return Ok(Vec::new());
        }
        if inputs.layers < layers {
            return Err(Error::invalid(format!(
                "token inputs cover {} layers, {} needed",
                inputs.layers, layers
            )));
        }
        inputs.check_range(self.cfg.codebook_size)?;
        let table = tape.param(self.ids.tok_emb);
        let mut out = Vec::with_capacity(layers);
        for u in 0..layers {
            let ids: Vec<u32> = (0..inputs.n).map(|j| inputs.get(j, u)).collect();
            let e = tape.embedding(table, &ids)?;
            let next = match out.last() {
                Some(&prev) => tape.add(prev, e)?,
                None => e,
            };
            out.push(next);
        }
        Ok(out)
    }

    fn prefixed(&self, tape: &mut Tape, p: Var, v: usize, cum: Option<Var>) -> Result<Var> {
        let le = tape.param(self.ids.layer_emb);
        let q = tape.embedding(le, &[v as u32])?;
        let mut parts = if self.cfg.pnq {
            vec![tape.add(p, q)?]
        } else {
            vec![p, q]
        };
        parts.extend(cum);
        tape.concat_rows(&parts)
    }

    /// Per-layer logits `[inputs.n + 1, K]`; row `j` predicts position `j`
    /// from the prefix and inputs at positions `< j`.
    pub fn logits_on(
        &self,
        tape: &mut Tape,
        text_raw: &[f32],
        inputs: &TokenGrid,
        mut train: Option<&mut Rng>,
    ) -> Result<Vec<Var>> {
        let layers = self.cfg.num_layers;
        let cums = self.cumulative_inputs(tape, inputs, layers)?;
        let p = self.text_condition(tape, text_raw)?;
        let pre = self.cfg.prefix_len();
        let len = pre + inputs.n;
        let rel = self.rel_constant(tape, len)?;
        let mut out = Vec::with_capacity(layers);
        for v in 0..layers {
            let mut x = self.prefixed(tape, p, v, cums.get(v).copied())?;
            let st = &self.ids.stacks[v];
            for blk in &st.blocks {
                x = self.block_on(tape, x, rel, st.heads, blk, train.as_deref_mut())?;
            }
            let h = tape.slice_rows(x, pre - 1, inputs.n + 1)?;
            let (g, b) = (tape.param(st.lnf_g), tape.param(st.lnf_b));
            let h = tape.layer_norm(h, g, b)?;
            let (w, b) = (tape.param(st.head_w), tape.param(st.head_b));
            out.push(tape.linear(h, w, Some(b))?);
        }
        Ok(out)
    }

    /// Relative-position attention scores `[heads, L, L]` before masking
    /// and scaling: content-content plus content-position terms, with the
    /// global biases folded into the queries.
    pub fn attention_scores(
        &self,
        tape: &mut Tape,
        h: Var,
        rel: Var,
        heads: usize,
        blk_index: (usize, usize),
    ) -> Result<(Var, Var)> {
        let blk = self.ids.stacks[blk_index.0].blocks[blk_index.1];
        self.scores_on(tape, h, rel, heads, &blk)
    }

    fn scores_on(
        &self,
        tape: &mut Tape,
        h: Var,
        rel: Var,
        heads: usize,
        blk: &BlockIds,
    ) -> Result<(Var, Var)> {
        let len = tape.shape(h)[0];
        let aw = self.cfg.attn_width(heads);
        let (wq, wk, wv, wkr) = (
            tape.param(blk.wq),
            tape.param(blk.wk),
            tape.param(blk.wv),
            tape.param(blk.wkr),
        );
        let q = tape.matmul(h, wq)?;
        let k = tape.matmul(h, wk)?;
        let val = tape.matmul(h, wv)?;
        let rk = tape.matmul(rel, wkr)?;
        let u = tape.param(blk.u);
        let u = tape.reshape(u, &[aw])?;
        let vb = tape.param(blk.vb);
        let vb = tape.reshape(vb, &[aw])?;
        let qu = tape.add_row(q, u)?;
        let qv = tape.add_row(q, vb)?;
        let qu = tape.split_heads(qu, heads)?;
        let qv = tape.split_heads(qv, heads)?;
        let k = tape.split_heads(k, heads)?;
        let rk = tape.split_heads(rk, heads)?;
        let ac = tape.matmul_nt(qu, k)?;
        let bd = tape.matmul_nt(qv, rk)?;
        let bd = tape.rel_shift(bd, 0, len)?;
        let scores = tape.add(ac, bd)?;
        let val = tape.split_heads(val, heads)?;
        Ok((scores, val))
    }

    /// Masked-softmax relative attention on `h` (`[L, dm]`), output before
    /// the output projection, `[L, dm]`.
    pub fn rel_attention(
        &self,
        tape: &mut Tape,
        h: Var,
        rel: Var,
        v: usize,
        block: usize,
    ) -> Result<Var> {
        let st = &self.ids.stacks[v];
        let blk = st.blocks[block];
        self.attend(tape, h, rel, st.heads, &blk)
    }

    fn attend(
        &self,
        tape: &mut Tape,
        h: Var,
        rel: Var,
        heads: usize,
        blk: &BlockIds,
    ) -> Result<Var> {
        let hd = self.cfg.d_model / heads;
        let (scores, val) = self.scores_on(tape, h, rel, heads, blk)?;
        let scaled = tape.scale(scores, 1.0 / libm::sqrtf(hd as f32))?;
        let probs = tape.softmax(scaled, Some(0))?;
        let o = tape.matmul(probs, val)?;
        tape.merge_heads(o)
    }

    fn block_on(
        &self,
        tape: &mut Tape,
        x: Var,
        rel: Var,
        heads: usize,
        blk: &BlockIds,
        mut train: Option<&mut Rng>,
    ) -> Result<Var> {
        let (g, b) = (tape.param(blk.ln1_g), tape.param(blk.ln1_b));
        let h = tape.layer_norm(x, g, b)?;
        let o = self.attend(tape, h, rel, heads, blk)?;
        let (wo, bo) = (tape.param(blk.wo), tape.param(blk.bo));
        let mut o = tape.linear(o, wo, Some(bo))?;
        if let Some(r) = train.as_deref_mut() {
            o = tape.dropout(o, self.cfg.dropout, r)?;
        }
        let x = tape.add(x, o)?;
        let (g, b) = (tape.param(blk.ln2_g), tape.param(blk.ln2_b));
        let h = tape.layer_norm(x, g, b)?;
        let (w1, b1) = (tape.param(blk.w1), tape.param(blk.b1));
        let f = tape.linear(h, w1, Some(b1))?;
        let f = tape.gelu(f)?;
        let (w2, b2) = (tape.param(blk.w2), tape.param(blk.b2));
        let mut f = tape.linear(f, w2, Some(b2))?;
        if let Some(r) = train {
            f = tape.dropout(f, self.cfg.dropout, r)?;
        }
        tape.add(x, f)
    }

    /// Distance table rows `0..dists` as a tape constant.
    pub fn rel_constant(&self, tape: &mut Tape, dists: usize) -> Result<Var> {
        let dm = self.cfg.d_model;
        let dists = dists.min(self.cfg.max_rel + 1);
        Ok(tape.constant(Tensor::new(&[dists, dm], self.rtab[..dists * dm].to_vec())?))
    }

    /// Teacher-forcing loss on `batch`. `train` enables dropout and
    /// corruption of the teacher inputs (never of the targets).
    pub fn loss_on(
        &self,
        tape: &mut Tape,
        batch: &[(TokenGrid, Vec<f32>)],
        mut train: Option<&mut Rng>,
    ) -> Result<Var> {
        let mut logits = Vec::with_capacity(batch.len());
        let mut targets = Vec::with_capacity(batch.len());
        let mut lengths = Vec::with_capacity(batch.len());
        for (grid, text) in batch {
            if grid.layers != self.cfg.num_layers {
                return Err(Error::shape(
                    "hct batch",
                    &[grid.n, grid.layers],
                    &[self.cfg.num_layers],
                ));
            }
            if grid.n == 0 {
                return Err(Error::invalid("empty token grid"));
            }
            let mut inputs = grid.prefix(grid.n - 1);
            if let Some(r) = train.as_deref_mut() {
                inputs = corrupt_tokens(&inputs, self.cfg.tau, self.cfg.codebook_size, r).0;
            }
            logits.push(self.logits_on(tape, text, &inputs, train.as_deref_mut())?);
            targets.push(grid.clone());
            lengths.push(grid.n);
        }
        hct_loss(tape, &logits, &targets, &lengths)
    }

    pub fn train_step(
        &mut self,
        batch: &[(TokenGrid, Vec<f32>)],
        opt: &mut AdamW,
        lr: f32,
        clip: f32,
        rng: &mut Rng,
    ) -> Result<(f32, f32)> {
        self.params.zero_grad();
        let (loss, grads) = {
            let mut tape = Tape::with_params(&self.params);
            let l = self.loss_on(&mut tape, batch, Some(rng))?;
            (tape.scalar_value(l)?, tape.backward(l)?)
        };
        self.params.accumulate(&grads)?;
        let norm = self.params.clip_grad_norm(clip);
        opt.step(&mut self.params, lr)?;
        Ok((loss, norm))
    }

    /// Clean teacher-forcing loss (no corruption, no dropout).
    pub fn eval_loss(&self, batch: &[(TokenGrid, Vec<f32>)]) -> Result<f32> {
        let mut tape = Tape::with_params(&self.params);
        let l = self.loss_on(&mut tape, batch, None)?;
        tape.scalar_value(l)
    }

    /// Eval-mode per-layer logits as plain row-major tensors.
    pub fn logits(&self, text_raw: &[f32], inputs: &TokenGrid) -> Result<Vec<Tensor>> {
        let mut tape = Tape::with_params(&self.params);
        let vars = self.logits_on(&mut tape, text_raw, inputs, None)?;
        Ok(vars.into_iter().map(|v| tape.to_tensor(v)).collect())
    }

    /// Fraction of (position, layer) targets whose clean teacher-forced
    /// argmax is correct, and the number of targets.
    pub fn teacher_forced_accuracy(&self, batch: &[(TokenGrid, Vec<f32>)]) -> Result<(f32, usize)> {
        let (mut hit, mut total) = (0usize, 0usize);
        for (grid, text) in batch {
            let lg = self.logits(text, &grid.prefix(grid.n.saturating_sub(1)))?;
            for (v, t) in lg.iter().enumerate() {
                let k = t.shape()[1];
                for j in 0..grid.n {
                    let row = &t.data()[j * k..(j + 1) * k];
                    if crate::generate::argmax(row) == grid.get(j, v) as usize {
                        hit += 1;
                    }
                    total += 1;
                }
            }
        }
        Ok((hit as f32 / total.max(1) as f32, total))
    }

    pub fn to_tensors(&self) -> Vec<(String, Tensor)> {
        self.params
            .iter()
            .map(|(n, t)| {
                (
                    String::from(n),
                    Tensor::new(t.shape(), t.data().to_vec()).expect("valid"),
                )
            })
            .collect()
    }

    pub fn from_tensors(cfg: HctConfig, tensors: &[(String, Tensor)]) -> Result<Self> {
        let mut m = Self::new(cfg)?;
        let names: Vec<String> = m.params.iter().map(|(n, _)| String::from(n)).collect();
        for name in names {
            let t = tensors
                .iter()
                .find(|(n, _)| *n == name)
                .map(|(_, t)| t)
                .ok_or_else(|| Error::invalid(format!("checkpoint is missing tensor {name}")))?;
            m.params.set_data(&name, t.shape(), t.data().to_vec())?;
        }
        Ok(m)
    }

    /// Starts an incremental decoding session for one caption embedding.
    pub fn stream(&self, text_raw: &[f32]) -> Result<HctStream<'_>> {
        HctStream::new(self, text_raw)
    }
}

// ---- incremental inference ---------------------------------------------

struct BlockCache {
    /// Per head, appended key rows.
    keys: Vec<Vec<f32>>,
    values: Vec<Vec<f32>>,
    /// Projected distance table, per head `[max_rel+1, hd]`.
    rel_keys: Vec<Vec<f32>>,
}

/// Key/value cache for generating one sequence position at a time. Every
/// step performs the same float operations, in the same order, as the tape
/// forward, so logits match a full-prefix recomputation bit for bit.
pub struct HctStream<'m> {
    model: &'m HctModel,
    p: Vec<f32>,
    caches: Vec<Vec<BlockCache>>,
    len: usize,
    positions: usize,
}

fn linear_row(x: &[f32], w: &[f32], b: Option<&[f32]>, n: usize) -> Vec<f32> {
    let mut out = vec![0f32; n];
    gemm_nn(x, w, &mut out, 1, x.len(), n);
    if let Some(b) = b {
        for (o, &bv) in out.iter_mut().zip(b) {
            *o += bv;
        }
    }
    out
}

fn ln_row(x: &[f32], g: &[f32], b: &[f32]) -> Vec<f32> {
    let mut out = vec![0f32; x.len()];
    kernels::layer_norm_rows(x, g, b, &mut out, x.len());
    out
}

impl<'m> HctStream<'m> {
    fn new(model: &'m HctModel, text_raw: &[f32]) -> Result<Self> {
        let cfg = &model.cfg;
        if text_raw.len() != cfg.text_dim {
            return Err(Error::shape(
                "text condition",
                &[text_raw.len()],
                &[cfg.text_dim],
            ));
        }
        let ps = &model.params;
        let dm = cfg.d_model;
        let p = linear_row(
            text_raw,
            ps.get(model.ids.text_w).data(),
            Some(ps.get(model.ids.text_b).data()),
            dm,
        );
        let dists = cfg.max_rel + 1;
        let caches = model
            .ids
            .stacks
            .iter()
            .map(|st| {
                let hd = dm / st.heads;
                let aw = cfg.attn_width(st.heads);
                st.blocks
                    .iter()
                    .map(|blk| {
                        let wkr = ps.get(blk.wkr).data();
                        let mut rel_keys = vec![vec![0f32; dists * hd]; st.heads];
                        for dist in 0..dists {
                            let row =
                                linear_row(&model.rtab[dist * dm..(dist + 1) * dm], wkr, None, aw);
                            for (h, rk) in rel_keys.iter_mut().enumerate() {
                                rk[dist * hd..(dist + 1) * hd]
                                    .copy_from_slice(&row[h * hd..(h + 1) * hd]);
                            }
                        }
                        BlockCache {
                            keys: vec![Vec::new(); st.heads],
                            values: vec![Vec::new(); st.heads],
                            rel_keys,
                        }
                    })
                    .collect()
            })
            .collect();
        Ok(Self {
            model,
            p,
            caches,
            len: 0,
            positions: 0,
        })
    }

    /// Number of positions whose logits have been produced.
    pub fn positions(&self) -> usize {
        self.positions
    }

    /// Logits for the next position, one `K`-vector per layer. `prev` must be
    /// `None` on the first call and the previous position's tokens (all
    /// layers) afterwards.
    pub fn next_logits(&mut self, prev: Option<&[u32]>) -> Result<Vec<Vec<f32>>> {
        let model = self.model;
        let cfg = &model.cfg;
        let ps = &model.params;
        let dm = cfg.d_model;
        let layers = cfg.num_layers;
        let tok = ps.get(model.ids.tok_emb).data();
        let le = ps.get(model.ids.layer_emb).data();
        let rows_per_layer: Vec<Vec<Vec<f32>>> = match (self.positions, prev) {
            (0, None) => (0..layers)
                .map(|v| {
                    let q = &le[v * dm..(v + 1) * dm];
                    if cfg.pnq {
                        vec![self.p.iter().zip(q).map(|(a, b)| a + b).collect()]
                    } else {
                        vec![self.p.clone(), q.to_vec()]
                    }
                })
                .collect(),
            (n, Some(t)) if n > 0 => {
                if t.len() != layers {
                    return Err(Error::shape("next_logits", &[t.len()], &[layers]));
                }
                if let Some(&bad) = t.iter().find(|&&id| id as usize >= cfg.codebook_size) {
                    return Err(Error::OutOfRange {
                        what: "token id",
                        index: bad as usize,
                        size: cfg.codebook_size,
                    });
                }
                let mut cum: Vec<f32> = Vec::new();
                (0..layers)
                    .map(|u| {
                        let e = &tok[t[u] as usize * dm..(t[u] as usize + 1) * dm];
                        cum = if u == 0 {
                            e.to_vec()
                        } else {
                            cum.iter().zip(e).map(|(a, b)| a + b).collect()
                        };
                        vec![cum.clone()]
                    })
                    .collect()
            }
            _ => {
                return Err(Error::invalid(
                    "previous tokens must be given after the first position, and only then",
                ))
            }
        };
        let mut out = Vec::with_capacity(layers);
        let start = self.len;
        for (v, rows) in rows_per_layer.into_iter().enumerate() {
            let st = &model.ids.stacks[v];
            let mut last = Vec::new();
            for (r, x) in rows.into_iter().enumerate() {
                let mut x = x;
                for (bi, blk) in st.blocks.iter().enumerate() {
                    x = Self::block_step(
                        model,
                        &mut self.caches[v][bi],
                        blk,
                        st.heads,
                        x,
                        start + r,
                    )?;
                }
                last = x;
            }
            let h = ln_row(&last, ps.get(st.lnf_g).data(), ps.get(st.lnf_b).data());
            let logits = linear_row(
                &h,
                ps.get(st.head_w).data(),
                Some(ps.get(st.head_b).data()),
                cfg.codebook_size,
            );
            crate::tensor::check_finite(&logits, "stream logits")?;
            out.push(logits);
        }
        self.len += if self.positions == 0 {
            cfg.prefix_len()
        } else {
            1
        };
        self.positions += 1;
        Ok(out)
    }

    fn block_step(
        model: &HctModel,
        cache: &mut BlockCache,
        blk: &BlockIds,
        heads: usize,
        x: Vec<f32>,
        i: usize,
    ) -> Result<Vec<f32>> {
        let ps = &model.params;
        let dm = model.cfg.d_model;
        let hd = dm / heads;
        let aw = heads * hd;
        let h = ln_row(&x, ps.get(blk.ln1_g).data(), ps.get(blk.ln1_b).data());
        let q = linear_row(&h, ps.get(blk.wq).data(), None, aw);
        let k = linear_row(&h, ps.get(blk.wk).data(), None, aw);
        let val = linear_row(&h, ps.get(blk.wv).data(), None, aw);
        let u = ps.get(blk.u).data();
        let vb = ps.get(blk.vb).data();
        let qu: Vec<f32> = q.iter().zip(u).map(|(a, b)| a + b).collect();
        let qv: Vec<f32> = q.iter().zip(vb).map(|(a, b)| a + b).collect();
        let scale = 1.0 / libm::sqrtf(hd as f32);
        let max_d = model.cfg.max_rel;
        let mut merged = vec![0f32; aw];
        for hh in 0..heads {
            cache.keys[hh].extend_from_slice(&k[hh * hd..(hh + 1) * hd]);
            cache.values[hh].extend_from_slice(&val[hh * hd..(hh + 1) * hd]);
            let quh = &qu[hh * hd..(hh + 1) * hd];
            let qvh = &qv[hh * hd..(hh + 1) * hd];
            let mut row = vec![0f32; i + 1];
            for (j, s) in row.iter_mut().enumerate() {
                let ac = kernels::dot(quh, &cache.keys[hh][j * hd..(j + 1) * hd]);
                let dist = (i - j).min(max_d);
                let bd = kernels::dot(qvh, &cache.rel_keys[hh][dist * hd..(dist + 1) * hd]);
                *s = (ac + bd) * scale;
            }
            kernels::softmax_row(&mut row, i);
            let o = &mut merged[hh * hd..(hh + 1) * hd];
            for (j, &pj) in row.iter().enumerate() {
                if pj != 0.0 {
                    kernels::axpy(pj, &cache.values[hh][j * hd..(j + 1) * hd], o);
                }
            }
        }
        let o = linear_row(
            &merged,
            ps.get(blk.wo).data(),
            Some(ps.get(blk.bo).data()),
            dm,
        );
        let x: Vec<f32> = x.iter().zip(&o).map(|(a, b)| a + b).collect();
        let h2 = ln_row(&x, ps.get(blk.ln2_g).data(), ps.get(blk.ln2_b).data());
        let ff = dm * model.cfg.ffn_mult;
        let f = linear_row(&h2, ps.get(blk.w1).data(), Some(ps.get(blk.b1).data()), ff);
        let f: Vec<f32> = f.iter().map(|&a| kernels::gelu(a)).collect();
        let f = linear_row(&f, ps.get(blk.w2).data(), Some(ps.get(blk.b2).data()), dm);
        let x: Vec<f32> = x.iter().zip(&f).map(|(a, b)| a + b).collect();
        crate::tensor::check_finite(&x, "stream block")?;
        Ok(x)
    }
}
