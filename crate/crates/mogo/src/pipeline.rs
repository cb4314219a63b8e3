//! Two-stage training, tokenization cache, generation and evaluation over a
//! run directory:
//!
//! ```text
//! run.config   fully resolved configuration
//! norm.stats   train-split normalization statistics
//! rvq.ckpt     tokenizer at best validation L1
//! hct.ckpt     transformer after the last step
//! *.resume     latest weights plus optimizer state, for --resume
//! metrics.log  step,split,metric,value
//! tokens/      MGT1 cache, one directory per tokenizer digest
//! ```
//!
//! Every training step draws its randomness from a generator forked from
//! `(seed, step)`, so a resumed run continues bit-identically.

use std::collections::BTreeSet;
use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use mogo_core::eval::{self, AutoencoderConfig, EvalReport, FeatureExtractor, MotionAutoencoder};
use mogo_core::generate::{Clock, GenRequest, GenResult, Generator, Policy};
use mogo_core::hct::HctModel;
use mogo_core::motion::{
    make_synthetic_dataset, Dataset, Item, MotionSequence, NormStats, Split, SynthConfig,
};
use mogo_core::optim::{AdamW, AdamWConfig, CosineSchedule};
use mogo_core::prompt::{ChatBackend, Gateway, PromptDecision};
use mogo_core::rng::{self, Rng};
use mogo_core::rvq::{RvqVae, TokenGrid};
use mogo_core::{ParamStore, Tensor};
use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::ckpt::{self, Checkpoint};
use crate::config::{self, RunConfig};
use crate::error::{Error, Result};
use crate::formats;

const RVQ_STREAM: u64 = 0x7276_7100_0000;
const HCT_STREAM: u64 = 0x6863_7400_0000;

pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn create(root: &Path) -> Result<Self> {
        fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        Ok(Self {
            root: root.to_path_buf(),
        })
    }

    pub fn open(root: &Path) -> Result<Self> {
        if !root.is_dir() {
            return Err(Error::config(format!(
                "run directory {} does not exist",
                root.display()
            )));
        }
        Ok(Self {
            root: root.to_path_buf(),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn config_path(&self) -> PathBuf {
        self.path("run.config")
    }

    pub fn write_config(&self, cfg: &RunConfig) -> Result<()> {
        formats::write_file(&self.config_path(), cfg.to_text().as_bytes())
    }

    pub fn read_config(&self) -> Result<RunConfig> {
        RunConfig::load(&self.config_path())
    }

    /// Appends `step,split,metric,value`.
    pub fn log_metric(&self, step: usize, split: &str, metric: &str, value: f64) -> Result<()> {
        let p = self.path("metrics.log");
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&p)
            .map_err(|e| Error::io(&p, e))?;
        writeln!(f, "{step},{split},{metric},{value}").map_err(|e| Error::io(&p, e))
    }
}

// ---- data ----------------------------------------------------------------

/// Synthetic set from the config, or every motion file in a directory with
/// its caption sidecar.
pub fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    if cfg.data_source == "synth" {
        let sc = SynthConfig {
            seed: cfg.seed,
            ..cfg.synth
        };
        return make_synthetic_dataset(&sc).map_err(|e| Error::config(e.to_string()));
    }
    let dir = Path::new(&cfg.data_source);
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::config(format!("{}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| formats::Format::from_path(p).is_some())
        .collect();
    paths.sort();
    let mut items = Vec::with_capacity(paths.len());
    for p in paths {
        let motion = formats::load_motion(&p, None)?;
        if motion.dim() != cfg.rvq.input_dim {
            return Err(Error::config(format!(
                "{}: {} channels, rvq.input_dim is {}",
                p.display(),
                motion.dim(),
                cfg.rvq.input_dim
            )));
        }
        let cap = formats::caption_path(&p);
        let captions = formats::load_captions(&cap).map_err(|_| {
            Error::config(format!(
                "{}: missing caption file {}",
                p.display(),
                cap.display()
            ))
        })?;
        let id = p
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("item")
            .to_string();
        items.push(Item {
            id,
            motion,
            captions,
            params: None,
        });
    }
    Dataset::new(items, cfg.seed).map_err(|e| Error::config(e.to_string()))
}

pub fn normalized_split(ds: &Dataset, split: Split) -> Result<Vec<MotionSequence>> {
    ds.indices(split)
        .iter()
        .map(|&i| ds.normalized(i).map_err(Error::from))
        .collect()
}

pub fn encode_stats(s: &NormStats) -> String {
    let list = |v: &[f32]| {
        v.iter()
            .map(|x| format!("{x:?}"))
            .collect::<Vec<_>>()
            .join(", ")
    };
    format!("mean = [{}]\nstd = [{}]\n", list(&s.mean), list(&s.std))
}

pub fn decode_stats(text: &str) -> std::result::Result<NormStats, String> {
    #[derive(serde::Deserialize)]
    #[serde(deny_unknown_fields)]
    struct F {
        mean: Vec<f32>,
        std: Vec<f32>,
    }
    let f: F = toml::from_str(text).map_err(|e| e.to_string())?;
    NormStats::new(f.mean, f.std).map_err(|e| e.to_string())
}

pub fn load_stats(path: &Path) -> Result<NormStats> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    decode_stats(&text).map_err(|m| Error::parse(path, m))
}

// ---- checkpoints -----------------------------------------------------------

fn optimizer_tensors(opt: &AdamW, params: &ParamStore) -> Vec<(String, Tensor)> {
    let (m, v) = opt.moments();
    let mut out = Vec::new();
    for (i, (name, t)) in params.iter().enumerate() {
        out.push((
            format!("opt.m.{name}"),
            Tensor::new(t.shape(), m[i].clone()).expect("sized"),
        ));
        out.push((
            format!("opt.v.{name}"),
            Tensor::new(t.shape(), v[i].clone()).expect("sized"),
        ));
    }
    out
}

fn optimizer_from(c: &Checkpoint, params: &ParamStore) -> Result<AdamW> {
    let step: u64 = c
        .get("opt.step")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::config("resume file lacks opt.step"))?;
    let (mut m, mut v) = (Vec::new(), Vec::new());
    for (name, _) in params.iter() {
        let get = |p: &str| {
            c.tensor(&format!("opt.{p}.{name}"))
                .map(|t| t.data().to_vec())
                .ok_or_else(|| {
                    Error::config(format!("resume file lacks optimizer state for {name}"))
                })
        };
        m.push(get("m")?);
        v.push(get("v")?);
    }
    Ok(AdamW::from_parts(
        AdamWConfig::default(),
        step,
        m,
        v,
        params,
    )?)
}

pub fn rvq_checkpoint(m: &RvqVae) -> Checkpoint {
    let mut c = Checkpoint::new(ckpt::RVQ);
    c.header.extend(config::rvq_header(&m.cfg));
    c.tensors = m.to_tensors();
    c
}

pub fn rvq_from_checkpoint(c: &Checkpoint) -> Result<RvqVae> {
    let cfg = config::rvq_from_header(&c.header)?;
    Ok(RvqVae::from_tensors(cfg, &c.tensors)?)
}

pub fn hct_checkpoint(m: &HctModel) -> Checkpoint {
    let mut c = Checkpoint::new(ckpt::HCT);
    c.header.extend(config::hct_header(&m.cfg));
    c.tensors = m.to_tensors();
    c
}

pub fn hct_from_checkpoint(c: &Checkpoint) -> Result<HctModel> {
    let cfg = config::hct_from_header(&c.header)?;
    Ok(HctModel::from_tensors(cfg, &c.tensors)?)
}

pub fn load_rvq(path: &Path) -> Result<(RvqVae, String)> {
    let c = Checkpoint::load_kind(path, ckpt::RVQ)?;
    Ok((rvq_from_checkpoint(&c)?, c.digest()))
}

pub fn load_hct(path: &Path) -> Result<HctModel> {
    hct_from_checkpoint(&Checkpoint::load_kind(path, ckpt::HCT)?)
}

fn numeric_dump(run: &RunDir, stage: &str, step: usize, lr: f32, detail: &str, e: Error) -> Error {
    let msg = format!("{stage} step {step} (lr {lr}): {e}\n{detail}\n");
    let _ = formats::write_file(&run.path("fault.txt"), msg.as_bytes());
    match e {
        Error::Numeric(m) => Error::Numeric(format!(
            "{stage} step {step}: {m} (state dumped to fault.txt)"
        )),
        other => other,
    }
}

// ---- tokenizer training ------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct RvqSummary {
    pub steps: usize,
    pub window: usize,
    /// (step, validation L1) at every validation, starting before step 0.
    pub val_l1: Vec<(usize, f64)>,
    pub train_loss: Vec<(usize, f32)>,
    pub best_l1: f64,
}

fn mean_l1(m: &RvqVae, seqs: &[MotionSequence]) -> Result<f64> {
    let (mut s, mut n) = (0.0f64, 0usize);
    for seq in seqs {
        let r = m.reconstruct(seq, m.cfg.num_layers - 1)?;
        s += seq
            .data()
            .iter()
            .zip(r.data())
            .map(|(a, b)| (a - b).abs() as f64)
            .sum::<f64>();
        n += seq.data().len();
    }
    Ok(s / n.max(1) as f64)
}

fn rvq_batch(train: &[MotionSequence], batch: usize, window: usize, r: &mut Rng) -> Result<Tensor> {
    let d = train[0].dim();
    let mut data = Vec::with_capacity(batch * d * window);
    for _ in 0..batch {
        let s = &train[r.random_range(0..train.len())];
        let start = r.random_range(0..=s.frames() - window);
        data.extend(s.window(start, window)?.channels_first());
    }
    Ok(Tensor::new(&[batch, d, window], data)?)
}

/// Trains the tokenizer. With `resume`, continues from `rvq.resume`.
/// `max_steps` stops early (the schedule still spans the configured
/// steps), which is how resumption is exercised.
pub fn train_rvq(
    cfg: &RunConfig,
    ds: &Dataset,
    run: &RunDir,
    resume: bool,
    max_steps: Option<usize>,
) -> Result<RvqSummary> {
    let (rcfg, _) = cfg.seeded();
    let train = normalized_split(ds, Split::Train)?;
    let val = normalized_split(ds, Split::Val)?;
    let shortest = train
        .iter()
        .map(|s| s.frames())
        .min()
        .ok_or_else(|| Error::config("empty training split"))?;
    let window = cfg.rvq_window.min(shortest);
    let sched = cfg.rvq_train.clone();
    let cos = CosineSchedule::new(sched.lr_max, sched.lr_min, sched.steps as u64)?;
    let resume_path = run.path("rvq.resume");

    let (mut model, mut opt, start, mut best) = if resume {
        let c = Checkpoint::load_kind(&resume_path, ckpt::RVQ)?;
        let m = rvq_from_checkpoint(&c)?;
        let opt = optimizer_from(&c, &m.params)?;
        let start: usize = c
            .get("train.step")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::config("resume file lacks train.step"))?;
        let best: f64 = c
            .get("train.best_l1")
            .and_then(|s| s.parse().ok())
            .unwrap_or(f64::INFINITY);
        (m, opt, start, best)
    } else {
        run.write_config(cfg)?;
        formats::write_file(&run.path("norm.stats"), encode_stats(&ds.stats).as_bytes())?;
        let m = RvqVae::new(rcfg)?;
        let opt = AdamW::new(AdamWConfig::default(), &m.params);
        (m, opt, 0, f64::INFINITY)
    };

    let mut summary = RvqSummary {
        steps: start,
        window,
        val_l1: Vec::new(),
        train_loss: Vec::new(),
        best_l1: best,
    };
    let validate =
        |m: &RvqVae, step: usize, best: &mut f64, summary: &mut RvqSummary| -> Result<()> {
            let l1 = mean_l1(m, &val)?;
            run.log_metric(step, "val", "recon_l1", l1)?;
            summary.val_l1.push((step, l1));
            if l1 < *best {
                *best = l1;
                rvq_checkpoint(m).save(&run.path("rvq.ckpt"))?;
            }
            Ok(())
        };
    if start == 0 {
        validate(&model, 0, &mut best, &mut summary)?;
    }
    let end = max_steps.map_or(sched.steps, |m| (start + m).min(sched.steps));
    for step in start..end {
        let lr = cos.lr(step as u64);
        let mut r = rng::fork(cfg.seed, RVQ_STREAM + step as u64);
        let out = rvq_batch(&train, sched.batch, window, &mut r).and_then(|b| {
            model
                .train_step(b, &mut opt, lr, sched.clip, &mut r)
                .map_err(Error::from)
        });
        let st = out.map_err(|e| numeric_dump(run, "train-rvq", step, lr, "", e))?;
        if !st.parts.total.is_finite() {
            return Err(numeric_dump(
                run,
                "train-rvq",
                step,
                lr,
                &format!("{:?}", st.parts),
                Error::Numeric("non-finite loss".into()),
            ));
        }
        summary.train_loss.push((step, st.parts.total));
        run.log_metric(step, "train", "loss", st.parts.total as f64)?;
        run.log_metric(step, "train", "recon_l1", st.parts.recon_l1 as f64)?;
        let done = step + 1;
        if done % sched.val_every.max(1) == 0 || done == sched.steps {
            validate(&model, done, &mut best, &mut summary)?;
            // dead: no assignment since the previous validation
            let window = sched.val_every.max(1) as u32;
            for v in 0..model.cfg.num_layers {
                run.log_metric(
                    done,
                    "train",
                    &format!("dead_codes.{v}"),
                    model.codebook.dead_fraction(v, window) as f64,
                )?;
            }
        }
        summary.steps = done;
    }
    let mut c = rvq_checkpoint(&model);
    c.header
        .insert("train.step".into(), summary.steps.to_string());
    c.header.insert("train.best_l1".into(), format!("{best:?}"));
    c.header
        .insert("opt.step".into(), opt.step_count().to_string());
    c.tensors.extend(optimizer_tensors(&opt, &model.params));
    c.save(&resume_path)?;
    summary.best_l1 = best;
    Ok(summary)
}

// ---- tokenization ----------------------------------------------------------

/// Token grids for `indices`, read from or written to the cache directory
/// of this tokenizer's digest.
pub fn tokenize_cached(
    rvq: &RvqVae,
    digest: &str,
    ds: &Dataset,
    indices: &[usize],
    cache_root: &Path,
) -> Result<Vec<TokenGrid>> {
    let dir = cache_root.join(&digest[..16]);
    indices
        .iter()
        .map(|&i| {
            let p = dir.join(format!("{}.mgt1", ds.items[i].id));
            if p.exists() {
                if let Ok(g) = formats::load_tokens(&p) {
                    if g.n == ds.items[i].motion.frames() && g.layers == rvq.cfg.num_layers {
                        return Ok(g);
                    }
                }
            }
            let g = rvq.tokenize(&ds.normalized(i)?)?;
            formats::save_tokens(&p, &g)?;
            Ok(g)
        })
        .collect()
}

// ---- transformer training ----------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct HctSummary {
    pub steps: usize,
    pub items: usize,
    pub train_loss: Vec<(usize, f32)>,
    /// (step, clean validation loss).
    pub val_loss: Vec<(usize, f32)>,
    /// (step, teacher-forced accuracy on the training items).
    pub train_acc: Vec<(usize, f32)>,
    pub val_fid: Vec<(usize, f64)>,
}

/// Training items: the training split, or its first `n` items with
/// distinct primary captions.
pub fn hct_items(ds: &Dataset, subset: usize) -> Vec<usize> {
    if subset == 0 {
        return ds.train.clone();
    }
    let mut seen = BTreeSet::new();
    ds.train
        .iter()
        .copied()
        .filter(|&i| seen.insert(ds.items[i].captions[0].clone()))
        .take(subset)
        .collect()
}

/// Item order for sample `s`: a fresh seeded shuffle every epoch.
fn epoch_item(seed: u64, n: usize, s: usize) -> usize {
    let epoch = s / n;
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng::fork(
        seed,
        HCT_STREAM + 0x1_0000_0000 + epoch as u64,
    ));
    perm[s % n]
}

pub fn train_hct(
    cfg: &RunConfig,
    ds: &Dataset,
    run: &RunDir,
    resume: bool,
    max_steps: Option<usize>,
) -> Result<HctSummary> {
    let (rvq, digest) = load_rvq(&run.path("rvq.ckpt"))?;
    let (_, hcfg) = cfg.seeded();
    if rvq.cfg.codebook_size != hcfg.codebook_size || rvq.cfg.num_layers != hcfg.num_layers {
        return Err(Error::config(format!(
            "tokenizer has {} layers of {} codes, transformer expects {} of {}",
            rvq.cfg.num_layers, rvq.cfg.codebook_size, hcfg.num_layers, hcfg.codebook_size
        )));
    }
    let items = hct_items(ds, cfg.hct_subset);
    let cache = run.path("tokens");
    let grids = tokenize_cached(&rvq, &digest, ds, &items, &cache)?;
    let val_grids = tokenize_cached(&rvq, &digest, ds, &ds.val, &cache)?;
    let sched = cfg.hct_train.clone();
    let cos = CosineSchedule::new(sched.lr_max, sched.lr_min, sched.steps as u64)?;
    let resume_path = run.path("hct.resume");
    let (mut model, mut opt, start) = if resume {
        let c = Checkpoint::load_kind(&resume_path, ckpt::HCT)?;
        let m = hct_from_checkpoint(&c)?;
        let opt = optimizer_from(&c, &m.params)?;
        let start = c
            .get("train.step")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::config("resume file lacks train.step"))?;
        (m, opt, start)
    } else {
        let m = HctModel::new(hcfg)?;
        let opt = AdamW::new(AdamWConfig::default(), &m.params);
        (m, opt, 0)
    };
    // memorisation runs train on the primary caption only
    let primary_only = cfg.hct_subset > 0;
    let embeds: Vec<Vec<Vec<f32>>> = items
        .iter()
        .map(|&i| {
            let caps = &ds.items[i].captions;
            let caps = if primary_only { &caps[..1] } else { &caps[..] };
            caps.iter()
                .map(|c| model.embed_text(c))
                .collect::<mogo_core::Result<Vec<_>>>()
        })
        .collect::<mogo_core::Result<_>>()?;
    let train_eval: Vec<(TokenGrid, Vec<f32>)> = grids
        .iter()
        .zip(&embeds)
        .map(|(g, e)| (g.clone(), e[0].clone()))
        .collect();
    let val_eval: Vec<(TokenGrid, Vec<f32>)> = ds
        .val
        .iter()
        .zip(&val_grids)
        .map(|(&i, g)| Ok((g.clone(), model.embed_text(&ds.items[i].captions[0])?)))
        .collect::<mogo_core::Result<_>>()?;
    let val_motion: Vec<&MotionSequence> = ds.val.iter().map(|&i| &ds.items[i].motion).collect();

    let mut summary = HctSummary {
        steps: start,
        items: items.len(),
        ..HctSummary::default_empty()
    };
    let validate = |m: &HctModel, step: usize, summary: &mut HctSummary| -> Result<()> {
        if !val_eval.is_empty() {
            let vl = m.eval_loss(&val_eval)?;
            run.log_metric(step, "val", "loss", vl as f64)?;
            summary.val_loss.push((step, vl));
        }
        let (acc, _) = m.teacher_forced_accuracy(&train_eval)?;
        run.log_metric(step, "train", "tf_accuracy", acc as f64)?;
        summary.train_acc.push((step, acc));
        if val_motion.len() >= 2 {
            let gen = Generator::new(m, &rvq, &ds.stats, val_motion[0].fps())?;
            let mut fake = Vec::new();
            for (&i, real) in ds.val.iter().zip(&val_motion).take(8) {
                let req = GenRequest {
                    text: ds.items[i].captions[0].clone(),
                    target_frames: real.frames(),
                    policy: Policy::Greedy,
                    seed: 0,
                };
                fake.push(
                    gen.generate(&req, &mogo_core::generate::NoClock, None)?
                        .motion,
                );
            }
            let fx = FeatureExtractor::IdentityPool;
            let real: Vec<MotionSequence> = val_motion
                .iter()
                .take(fake.len())
                .map(|s| (*s).clone())
                .collect();
            let fid = eval::frechet_distance(&fx.extract_all(&real)?, &fx.extract_all(&fake)?)?;
            run.log_metric(step, "val", "fid_identity", fid)?;
            summary.val_fid.push((step, fid));
        }
        Ok(())
    };
    if start == 0 {
        validate(&model, 0, &mut summary)?;
    }
    let n = items.len();
    let end = max_steps.map_or(sched.steps, |m| (start + m).min(sched.steps));
    for step in start..end {
        let lr = cos.lr(step as u64);
        let mut r = rng::fork(cfg.seed, HCT_STREAM + step as u64);
        let batch: Vec<(TokenGrid, Vec<f32>)> = (0..sched.batch)
            .map(|b| {
                let k = epoch_item(cfg.seed, n, step * sched.batch + b);
                let caps = &embeds[k];
                let c = if caps.len() > 1 {
                    r.random_range(0..caps.len())
                } else {
                    0
                };
                (grids[k].clone(), caps[c].clone())
            })
            .collect();
        let (loss, _) = model
            .train_step(&batch, &mut opt, lr, sched.clip, &mut r)
            .map_err(|e| numeric_dump(run, "train-hct", step, lr, "", e.into()))?;
        summary.train_loss.push((step, loss));
        run.log_metric(step, "train", "loss", loss as f64)?;
        let done = step + 1;
        if done % sched.val_every.max(1) == 0 || done == sched.steps {
            validate(&model, done, &mut summary)?;
        }
        summary.steps = done;
    }
    hct_checkpoint(&model).save(&run.path("hct.ckpt"))?;
    let mut c = hct_checkpoint(&model);
    c.header
        .insert("train.step".into(), summary.steps.to_string());
    c.header
        .insert("opt.step".into(), opt.step_count().to_string());
    c.tensors.extend(optimizer_tensors(&opt, &model.params));
    c.save(&resume_path)?;
    Ok(summary)
}

impl HctSummary {
    fn default_empty() -> Self {
        Self {
            steps: 0,
            items: 0,
            train_loss: Vec::new(),
            val_loss: Vec::new(),
            train_acc: Vec::new(),
            val_fid: Vec::new(),
        }
    }
}

// ---- inference -----------------------------------------------------------------

/// Frozen models of a finished run.
pub struct Models {
    pub rvq: RvqVae,
    pub hct: HctModel,
    pub stats: NormStats,
    pub fps: f32,
}

impl Models {
    pub fn load(run: &RunDir) -> Result<Self> {
        let cfg = run.read_config()?;
        let (rvq, _) = load_rvq(&run.path("rvq.ckpt"))?;
        let hct = load_hct(&run.path("hct.ckpt"))?;
        let stats = load_stats(&run.path("norm.stats"))?;
        Ok(Self {
            rvq,
            hct,
            stats,
            fps: cfg.synth.fps,
        })
    }

    pub fn generator(&self) -> Result<Generator<'_>> {
        Ok(Generator::new(&self.hct, &self.rvq, &self.stats, self.fps)?)
    }
}

pub struct WallClock(std::time::Instant);

impl WallClock {
    pub fn new() -> Self {
        Self(std::time::Instant::now())
    }
}

impl Default for WallClock {
    fn default() -> Self {
        Self::new()
    }
}

impl Clock for WallClock {
    fn now(&self) -> f64 {
        self.0.elapsed().as_secs_f64()
    }
}

/// Result of a gated generation: the prompt decision and the output.
pub struct Generated {
    pub decision: PromptDecision,
    pub result: GenResult,
}

/// Optional gateway rewrite, then generation. With `gateway_enabled`
/// false the raw prompt reaches the text encoder untouched.
pub fn generate(
    models: &Models,
    prompt: &str,
    frames: usize,
    policy: Policy,
    seed: u64,
    gateway_enabled: bool,
    backend: Option<&dyn ChatBackend>,
    tables: mogo_core::prompt::FallbackTables,
    on_frame: Option<&mut mogo_core::generate::FrameCallback<'_>>,
) -> Result<Generated> {
    let mut gw = Gateway::new(backend, tables);
    gw.enabled = gateway_enabled;
    let decision = gw.process(prompt);
    let req = GenRequest {
        text: decision.effective().to_string(),
        target_frames: frames,
        policy,
        seed,
    };
    let result = models
        .generator()?
        .generate(&req, &WallClock::new(), on_frame)?;
    Ok(Generated { decision, result })
}

pub fn write_generation(out: &Path, g: &Generated, seed: u64, policy: Policy) -> Result<()> {
    formats::save_motion(
        &out.join("motion.mgo1"),
        &g.result.motion,
        Some(formats::Format::Mgo1),
    )?;
    formats::save_tokens(&out.join("tokens.mgt1"), &g.result.tokens)?;
    let policy = match policy {
        Policy::Greedy => serde_json::json!({"kind": "greedy"}),
        Policy::TopK { k, temperature } => {
            serde_json::json!({"kind": "topk", "k": k, "temperature": temperature})
        }
    };
    let meta = serde_json::json!({
        "prompt": g.decision.original,
        "rewritten_prompt": g.decision.rewritten,
        "backend": g.decision.backend.as_str(),
        "seed": seed,
        "policy": policy,
        "frames": g.result.tokens.n,
        "timings": g.result.timings,
        "warnings": g.result.warnings.iter().chain(&g.decision.warnings).collect::<Vec<_>>(),
    });
    formats::write_file(
        &out.join("meta.json"),
        serde_json::to_string_pretty(&meta)
            .expect("json")
            .as_bytes(),
    )
}

// ---- evaluation -------------------------------------------------------------------

pub fn extractor(cfg: &RunConfig, ds: &Dataset, run: &RunDir) -> Result<FeatureExtractor> {
    if cfg.eval_extractor == "identity" {
        return Ok(FeatureExtractor::IdentityPool);
    }
    let p = run.path("extractor.ckpt");
    let acfg = AutoencoderConfig {
        seed: cfg.seed,
        ..AutoencoderConfig::default()
    };
    if let Ok(c) = Checkpoint::load_kind(&p, ckpt::EXTRACTOR) {
        return Ok(FeatureExtractor::Trained(MotionAutoencoder::from_tensors(
            acfg, &c.tensors,
        )?));
    }
    let train: Vec<MotionSequence> = ds
        .train
        .iter()
        .map(|&i| ds.items[i].motion.clone())
        .collect();
    let ae = MotionAutoencoder::train(&train, acfg)?;
    let mut c = Checkpoint::new(ckpt::EXTRACTOR);
    c.tensors = ae.to_tensors();
    c.save(&p)?;
    Ok(FeatureExtractor::Trained(ae))
}

/// Reconstruction metrics on the test split, per-layer reconstruction L1,
/// generation FID against test motions, and MultiModality.
pub fn evaluate(
    cfg: &RunConfig,
    ds: &Dataset,
    run: &RunDir,
    with_generation: bool,
) -> Result<(EvalReport, Vec<f64>)> {
    let (rvq, _) = load_rvq(&run.path("rvq.ckpt"))?;
    let test = normalized_split(ds, Split::Test)?;
    let layers = rvq.cfg.num_layers;
    let mut per_layer = Vec::with_capacity(layers);
    for v in 0..layers {
        per_layer.push(eval::reconstruction_report(&rvq, &test, v)?.l1);
    }
    let rec = eval::reconstruction_report(&rvq, &test, layers - 1)?;
    let mut report = EvalReport {
        recon_l1: Some(rec.l1),
        recon_mse: Some(rec.mse),
        recon_fid: rec.fid,
        extractor: String::from("identity-pool"),
        counts: vec![
            ("test_sequences".into(), rec.sequences),
            ("test_frames".into(), rec.frames),
        ],
        ..EvalReport::default()
    };
    if with_generation {
        let models = Models::load(run)?;
        let gen = models.generator()?;
        let fx = extractor(cfg, ds, run)?;
        report.extractor = fx.name().to_string();
        let idx: Vec<usize> = ds
            .test
            .iter()
            .copied()
            .take(cfg.eval_gen_samples.max(2))
            .collect();
        let mut fake = Vec::new();
        let mut real = Vec::new();
        for (j, &i) in idx.iter().enumerate() {
            let req = GenRequest {
                text: ds.items[i].captions[0].clone(),
                target_frames: ds.items[i].motion.frames(),
                policy: Policy::Greedy,
                seed: j as u64,
            };
            fake.push(
                gen.generate(&req, &mogo_core::generate::NoClock, None)?
                    .motion,
            );
            real.push(ds.items[i].motion.clone());
        }
        report.gen_fid = Some(eval::frechet_distance(
            &fx.extract_all(&real)?,
            &fx.extract_all(&fake)?,
        )?);
        report.counts.push(("gen_samples".into(), fake.len()));
        let policy = match cfg.policy()? {
            Policy::Greedy => Policy::TopK {
                k: cfg.gen_top_k,
                temperature: cfg.gen_temperature,
            },
            p => p,
        };
        let prompts: Vec<String> = ds
            .test
            .iter()
            .take(cfg.eval_mm_prompts)
            .map(|&i| ds.items[i].captions[0].clone())
            .collect();
        let frames = cfg.gen_frames;
        let mut sample = |p: &str, r: usize| -> mogo_core::Result<MotionSequence> {
            let req = GenRequest {
                text: p.to_string(),
                target_frames: frames,
                policy,
                seed: 1000 + r as u64,
            };
            Ok(gen
                .generate(&req, &mogo_core::generate::NoClock, None)?
                .motion)
        };
        let mm = eval::mmodality(&prompts, cfg.eval_mm_repeats, policy, &fx, &mut sample)?;
        report.mmodality = Some(mm.value);
        report.counts.push(("mm_prompts".into(), mm.prompts));
        report
            .counts
            .push(("mm_pairs_per_prompt".into(), mm.pairs_per_prompt));
    }
    Ok((report, per_layer))
}
