//! Flat `key = value` run configuration with dotted namespaces. The file is
//! valid TOML; nested tables are flattened, unknown keys are rejected.

use std::fmt::Write as _;
use std::path::Path;

use mogo_core::generate::Policy;
use mogo_core::hct::HctConfig;
use mogo_core::motion::SynthConfig;
use mogo_core::rvq::RvqConfig;
use toml::Value;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    Desk,
    Paper,
}

impl Preset {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Preset::Desk),
            "paper" => Ok(Preset::Paper),
            _ => Err(Error::config(format!(
                "unknown preset {s:?} (desk or paper)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Preset::Desk => "desk",
            Preset::Paper => "paper",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Schedule {
    pub steps: usize,
    pub batch: usize,
    pub lr_max: f32,
    pub lr_min: f32,
    pub clip: f32,
    pub val_every: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub preset: Preset,
    pub seed: u64,
    /// `synth` or a directory of motion files with caption sidecars.
    pub data_source: String,
    pub synth: SynthConfig,
    pub rvq: RvqConfig,
    pub rvq_train: Schedule,
    /// Training window length in frames (clamped to the shortest sequence).
    pub rvq_window: usize,
    pub hct: HctConfig,
    pub hct_train: Schedule,
    /// Train the transformer on the first `n` distinct-caption training
    /// items only; 0 uses the whole training split.
    pub hct_subset: usize,
    pub gen_frames: usize,
    pub gen_policy: String,
    pub gen_top_k: usize,
    pub gen_temperature: f32,
    pub gen_gateway: bool,
    /// `identity` or `trained`.
    pub eval_extractor: String,
    pub eval_mm_prompts: usize,
    pub eval_mm_repeats: usize,
    pub eval_gen_samples: usize,
}

enum Field<'a> {
    Usize(&'a mut usize),
    U32(&'a mut u32),
    U64(&'a mut u64),
    F32(&'a mut f32),
    Bool(&'a mut bool),
    Str(&'a mut String),
    List(&'a mut Vec<usize>),
}

fn schedule_fields<'a>(p: &str, s: &'a mut Schedule, out: &mut Vec<(String, Field<'a>)>) {
    out.push((format!("{p}.steps"), Field::Usize(&mut s.steps)));
    out.push((format!("{p}.batch"), Field::Usize(&mut s.batch)));
    out.push((format!("{p}.lr_max"), Field::F32(&mut s.lr_max)));
    out.push((format!("{p}.lr_min"), Field::F32(&mut s.lr_min)));
    out.push((format!("{p}.clip"), Field::F32(&mut s.clip)));
    out.push((format!("{p}.val_every"), Field::Usize(&mut s.val_every)));
}

impl RunConfig {
    pub fn preset(preset: Preset) -> Self {
        match preset {
            Preset::Desk => Self {
                preset,
                seed: 0,
                data_source: "synth".into(),
                synth: SynthConfig::default(),
                rvq: RvqConfig::desk(16),
                rvq_train: Schedule {
                    steps: 2000,
                    batch: 64,
                    lr_max: 2e-4,
                    lr_min: 2e-5,
                    clip: 1.0,
                    val_every: 100,
                },
                rvq_window: 64,
                hct: HctConfig::desk(),
                hct_train: Schedule {
                    steps: 2000,
                    batch: 10,
                    lr_max: 1e-3,
                    lr_min: 1.2e-4,
                    clip: 1.0,
                    val_every: 200,
                },
                hct_subset: 0,
                gen_frames: 60,
                gen_policy: "greedy".into(),
                gen_top_k: 10,
                gen_temperature: 1.0,
                gen_gateway: true,
                eval_extractor: "identity".into(),
                eval_mm_prompts: 10,
                eval_mm_repeats: 5,
                eval_gen_samples: 30,
            },
            Preset::Paper => {
                let d = Self::preset(Preset::Desk);
                Self {
                    preset,
                    synth: SynthConfig {
                        dim: 263,
                        ..d.synth
                    },
                    rvq: RvqConfig::paper(263),
                    rvq_train: Schedule {
                        batch: 512,
                        ..d.rvq_train
                    },
                    hct: HctConfig::paper(),
                    hct_train: Schedule {
                        steps: 20_000,
                        batch: 32,
                        lr_max: 2.5e-5,
                        lr_min: 3e-6,
                        ..d.hct_train
                    },
                    ..d
                }
            }
        }
    }

    fn fields(&mut self) -> Vec<(String, Field<'_>)> {
        let mut f: Vec<(String, Field<'_>)> = Vec::new();
        let Self {
            preset: _,
            seed,
            data_source,
            synth,
            rvq,
            rvq_train,
            rvq_window,
            hct,
            hct_train,
            hct_subset,
            gen_frames,
            gen_policy,
            gen_top_k,
            gen_temperature,
            gen_gateway,
            eval_extractor,
            eval_mm_prompts,
            eval_mm_repeats,
            eval_gen_samples,
        } = self;
        let mut add = |k: &str, v| f.push((k.to_string(), v));
        add("seed", Field::U64(seed));
        add("data.source", Field::Str(data_source));
        add("data.synth.count", Field::Usize(&mut synth.count));
        add("data.synth.min_frames", Field::Usize(&mut synth.min_frames));
        add("data.synth.max_frames", Field::Usize(&mut synth.max_frames));
        add("data.synth.dim", Field::Usize(&mut synth.dim));
        add("data.synth.fps", Field::F32(&mut synth.fps));
        add("rvq.input_dim", Field::Usize(&mut rvq.input_dim));
        add("rvq.num_layers", Field::Usize(&mut rvq.num_layers));
        add("rvq.codebook_size", Field::Usize(&mut rvq.codebook_size));
        add("rvq.code_dim", Field::Usize(&mut rvq.code_dim));
        add("rvq.hidden", Field::Usize(&mut rvq.hidden));
        add("rvq.kernel", Field::Usize(&mut rvq.kernel));
        add("rvq.res_blocks", Field::Usize(&mut rvq.res_blocks));
        add("rvq.dropout", Field::F32(&mut rvq.dropout));
        add("rvq.beta", Field::F32(&mut rvq.beta));
        add("rvq.ema_decay", Field::F32(&mut rvq.ema_decay));
        add("rvq.reset_after", Field::U32(&mut rvq.reset_after));
        add("rvq.decoder_causal", Field::Bool(&mut rvq.decoder_causal));
        add("rvq_train.window", Field::Usize(rvq_window));
        add("hct.d_model", Field::Usize(&mut hct.d_model));
        add("hct.num_layers", Field::Usize(&mut hct.num_layers));
        add("hct.heads", Field::List(&mut hct.heads));
        add("hct.depths", Field::List(&mut hct.depths));
        add("hct.codebook_size", Field::Usize(&mut hct.codebook_size));
        add("hct.max_rel", Field::Usize(&mut hct.max_rel));
        add("hct.dropout", Field::F32(&mut hct.dropout));
        add("hct.tau", Field::F32(&mut hct.tau));
        add("hct.text_dim", Field::Usize(&mut hct.text_dim));
        add("hct.text_seed", Field::U64(&mut hct.text_seed));
        add("hct.pnq", Field::Bool(&mut hct.pnq));
        add("hct.ffn_mult", Field::Usize(&mut hct.ffn_mult));
        add("hct_train.subset", Field::Usize(hct_subset));
        add("gen.frames", Field::Usize(gen_frames));
        add("gen.policy", Field::Str(gen_policy));
        add("gen.top_k", Field::Usize(gen_top_k));
        add("gen.temperature", Field::F32(gen_temperature));
        add("gen.gateway", Field::Bool(gen_gateway));
        add("eval.extractor", Field::Str(eval_extractor));
        add("eval.mm_prompts", Field::Usize(eval_mm_prompts));
        add("eval.mm_repeats", Field::Usize(eval_mm_repeats));
        add("eval.gen_samples", Field::Usize(eval_gen_samples));
        schedule_fields("rvq_train", rvq_train, &mut f);
        schedule_fields("hct_train", hct_train, &mut f);
        f
    }

    pub fn keys(&mut self) -> Vec<String> {
        self.fields().into_iter().map(|(k, _)| k).collect()
    }

    pub fn set(&mut self, key: &str, value: &Value) -> Result<()> {
        if key == "preset" {
            let s = value
                .as_str()
                .ok_or_else(|| Error::config("preset must be a string"))?;
            if Preset::parse(s)? != self.preset {
                return Err(Error::config(
                    "preset must be chosen before other keys are applied",
                ));
            }
            return Ok(());
        }
        let bad = || Error::config(format!("{key}: unexpected value {value}"));
        let uint = |v: &Value| v.as_integer().filter(|&i| i >= 0).ok_or_else(bad);
        let mut fields = self.fields();
        let (_, field) = fields
            .iter_mut()
            .find(|(k, _)| k == key)
            .ok_or_else(|| Error::config(format!("unknown config key {key:?}")))?;
        match field {
            Field::Usize(x) => **x = uint(value)? as usize,
            Field::U32(x) => **x = u32::try_from(uint(value)?).map_err(|_| bad())?,
            Field::U64(x) => **x = uint(value)? as u64,
            Field::F32(x) => {
                **x = match value {
                    Value::Float(f) => *f as f32,
                    Value::Integer(i) => *i as f32,
                    _ => return Err(bad()),
                }
            }
            Field::Bool(x) => **x = value.as_bool().ok_or_else(bad)?,
            Field::Str(x) => **x = value.as_str().ok_or_else(bad)?.to_string(),
            Field::List(x) => {
                let arr = value.as_array().ok_or_else(bad)?;
                **x = arr
                    .iter()
                    .map(|v| uint(v).map(|i| i as usize))
                    .collect::<Result<_>>()?;
            }
        }
        Ok(())
    }

    /// Parses `text`, starting from the preset it names (desk by default).
    pub fn parse(text: &str) -> Result<Self> {
        let table: toml::Table = text
            .parse()
            .map_err(|e| Error::config(format!("config: {e}")))?;
        let mut flat = Vec::new();
        flatten("", &Value::Table(table), &mut flat);
        let preset = match flat.iter().find(|(k, _)| k == "preset") {
            Some((_, v)) => Preset::parse(
                v.as_str()
                    .ok_or_else(|| Error::config("preset must be a string"))?,
            )?,
            None => Preset::Desk,
        };
        let mut cfg = Self::preset(preset);
        for (k, v) in &flat {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))
    }

    /// Applies a `key=value` override; the value is read as TOML, falling
    /// back to a bare string.
    pub fn apply_override(&mut self, kv: &str) -> Result<()> {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::config(format!("override {kv:?} is not key=value")))?;
        let (k, v) = (k.trim(), v.trim());
        let value = format!("x = {v}")
            .parse::<toml::Table>()
            .ok()
            .and_then(|mut t| t.remove("x"))
            .unwrap_or_else(|| Value::String(v.to_string()));
        self.set(k, &value)
    }

    /// Fully resolved document; parsing it gives back an equal config.
    pub fn to_text(&self) -> String {
        let mut c = self.clone();
        let mut s = format!("preset = \"{}\"\n", self.preset.name());
        for (k, f) in c.fields() {
            let v = match f {
                Field::Usize(x) => x.to_string(),
                Field::U32(x) => x.to_string(),
                Field::U64(x) => x.to_string(),
                Field::F32(x) => Value::Float(*x as f64).to_string(),
                Field::Bool(x) => x.to_string(),
                Field::Str(x) => Value::String(x.clone()).to_string(),
                Field::List(x) => format!(
                    "[{}]",
                    x.iter()
                        .map(|v| v.to_string())
                        .collect::<Vec<_>>()
                        .join(", ")
                ),
            };
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    /// Cross-section consistency; per-model rules are checked by the
    /// models themselves.
    pub fn validate(&self) -> Result<()> {
        self.rvq
            .validate()
            .map_err(|e| Error::config(e.to_string()))?;
        self.hct
            .validate()
            .map_err(|e| Error::config(e.to_string()))?;
        if self.rvq.codebook_size != self.hct.codebook_size
            || self.rvq.num_layers != self.hct.num_layers
        {
            return Err(Error::config(format!(
                "tokenizer has {} layers of {} codes, transformer expects {} of {}",
                self.rvq.num_layers,
                self.rvq.codebook_size,
                self.hct.num_layers,
                self.hct.codebook_size
            )));
        }
        if self.data_source == "synth" && self.synth.dim != self.rvq.input_dim {
            return Err(Error::config(format!(
                "data.synth.dim {} does not match rvq.input_dim {}",
                self.synth.dim, self.rvq.input_dim
            )));
        }
        for (name, s) in [
            ("rvq_train", &self.rvq_train),
            ("hct_train", &self.hct_train),
        ] {
            if s.steps == 0 || s.batch == 0 || !(s.lr_min <= s.lr_max) || !(s.clip > 0.0) {
                return Err(Error::config(format!(
                    "{name}: steps and batch must be positive, lr_min <= lr_max, clip > 0"
                )));
            }
        }
        self.policy()?;
        if !["identity", "trained"].contains(&self.eval_extractor.as_str()) {
            return Err(Error::config(format!(
                "eval.extractor {:?} (identity or trained)",
                self.eval_extractor
            )));
        }
        Ok(())
    }

    pub fn policy(&self) -> Result<Policy> {
        match self.gen_policy.as_str() {
            "greedy" => Ok(Policy::Greedy),
            "topk" => {
                if !(self.gen_temperature > 0.0) {
                    return Err(Error::config("gen.temperature must be positive"));
                }
                Ok(Policy::TopK {
                    k: self.gen_top_k,
                    temperature: self.gen_temperature,
                })
            }
            p => Err(Error::config(format!("gen.policy {p:?} (greedy or topk)"))),
        }
    }

    /// Model seeds derived from the run seed.
    pub fn seeded(&self) -> (RvqConfig, HctConfig) {
        let rvq = RvqConfig {
            seed: self.seed,
            ..self.rvq.clone()
        };
        let hct = HctConfig {
            seed: self.seed.wrapping_add(1),
            ..self.hct.clone()
        };
        (rvq, hct)
    }
}

fn flatten(prefix: &str, v: &Value, out: &mut Vec<(String, Value)>) {
    match v {
        Value::Table(t) => {
            for (k, v) in t {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten(&key, v, out);
            }
        }
        _ => out.push((prefix.to_string(), v.clone())),
    }
}

/// Config header entries written into checkpoints.
pub fn rvq_header(c: &RvqConfig) -> Vec<(String, String)> {
    let mut rc = RunConfig::preset(Preset::Desk);
    rc.rvq = c.clone();
    let mut out: Vec<(String, String)> = section_lines(&rc, "rvq.");
    out.push(("rvq.seed".into(), c.seed.to_string()));
    out
}

pub fn hct_header(c: &HctConfig) -> Vec<(String, String)> {
    let mut rc = RunConfig::preset(Preset::Desk);
    rc.hct = c.clone();
    let mut out = section_lines(&rc, "hct.");
    out.push(("hct.seed".into(), c.seed.to_string()));
    out
}

fn section_lines(rc: &RunConfig, prefix: &str) -> Vec<(String, String)> {
    rc.to_text()
        .lines()
        .filter_map(|l| l.split_once(" = "))
        .filter(|(k, _)| k.starts_with(prefix))
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect()
}

fn from_header<T>(
    header: &std::collections::BTreeMap<String, String>,
    prefix: &str,
    pick: impl Fn(&RunConfig) -> T,
) -> Result<(T, u64)> {
    let mut rc = RunConfig::preset(Preset::Desk);
    let mut seed = None;
    for (k, v) in header.iter().filter(|(k, _)| k.starts_with(prefix)) {
        if k == &format!("{prefix}seed") {
            seed = Some(
                v.parse()
                    .map_err(|_| Error::config(format!("bad {k} in checkpoint")))?,
            );
            continue;
        }
        let value = format!("x = {v}")
            .parse::<toml::Table>()
            .map_err(|e| Error::config(format!("checkpoint header {k}: {e}")))?
            .remove("x")
            .expect("parsed");
        rc.set(k, &value)?;
    }
    Ok((pick(&rc), seed.unwrap_or(0)))
}

pub fn rvq_from_header(header: &std::collections::BTreeMap<String, String>) -> Result<RvqConfig> {
    let (c, seed) = from_header(header, "rvq.", |rc| rc.rvq.clone())?;
    Ok(RvqConfig { seed, ..c })
}

pub fn hct_from_header(header: &std::collections::BTreeMap<String, String>) -> Result<HctConfig> {
    let (c, seed) = from_header(header, "hct.", |rc| rc.hct.clone())?;
    Ok(HctConfig { seed, ..c })
}
