//! `mogo` command line.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use mogo_core::generate::Frame;
use mogo_core::prompt::ChatBackend;
use serde_json::json;

use crate::ckpt::Checkpoint;
use crate::config::{Preset, RunConfig};
use crate::error::{Error, Result};
use crate::formats::{self, Format};
use crate::gateway::{self, HttpBackend};
use crate::pipeline::{self, Models, RunDir};
use crate::report;

#[derive(Parser, Debug)]
#[command(
    name = "mogo",
    version,
    about = "Text-to-motion with a residual tokenizer and a hierarchical causal transformer"
)]
pub struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override one key, e.g. `--set hct_train.steps=500`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long, global = true, value_enum)]
    pub preset: Option<PresetArg>,
    /// Machine-readable output on stdout.
    #[arg(long, global = true)]
    pub json: bool,
    #[arg(long, short, global = true)]
    pub verbose: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum PresetArg {
    Desk,
    Paper,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum FormatArg {
    Mgo1,
    Csv,
    Json,
}

impl From<FormatArg> for Format {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::Mgo1 => Format::Mgo1,
            FormatArg::Csv => Format::Csv,
            FormatArg::Json => Format::Json,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ReportFormat {
    Table,
    Json,
    Csv,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a synthetic motion dataset with caption sidecars.
    MakeSynth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "mgo1")]
        format: FormatArg,
    },
    /// Train the residual tokenizer into a run directory.
    TrainRvq {
        #[arg(long)]
        run: PathBuf,
        /// Continue from the run's resume state.
        #[arg(long)]
        resume: bool,
        /// Stop after this many steps of this invocation.
        #[arg(long)]
        max_steps: Option<usize>,
    },
    /// Train the transformer on tokens from the run's tokenizer.
    TrainHct {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        resume: bool,
        #[arg(long)]
        max_steps: Option<usize>,
    },
    /// Tokenize a motion file with the run's tokenizer.
    Tokenize {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Frame rate for CSV input.
        #[arg(long, default_value_t = formats::DEFAULT_CSV_FPS)]
        fps: f32,
    },
    /// Generate motion for a prompt.
    Generate {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        prompt: String,
        /// Output directory for motion.mgo1, tokens.mgt1 and meta.json.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        frames: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Pass the prompt to the text encoder without the gateway.
        #[arg(long)]
        no_gateway: bool,
        /// Gateway fallback tables (TOML).
        #[arg(long)]
        tables: Option<PathBuf>,
        /// Print each frame as it is produced.
        #[arg(long)]
        stream: bool,
    },
    /// Evaluate a trained run.
    Eval {
        #[arg(long)]
        run: PathBuf,
        /// Reconstruction metrics only.
        #[arg(long)]
        recon_only: bool,
        #[arg(long, value_enum, default_value = "table")]
        format: ReportFormat,
    },
    /// Run the prompt gateway on its own.
    RewritePrompt {
        prompt: String,
        #[arg(long)]
        tables: Option<PathBuf>,
    },
    /// Print a checkpoint's header, tensors and code usage.
    InspectCkpt { path: PathBuf },
}

fn resolve_config(cli: &Cli, base: Option<RunConfig>) -> Result<RunConfig> {
    let mut cfg = match (&cli.config, base) {
        (Some(p), _) => RunConfig::load(p)?,
        (None, Some(b)) => b,
        (None, None) => RunConfig::preset(Preset::Desk),
    };
    if let Some(p) = cli.preset {
        let preset = match p {
            PresetArg::Desk => Preset::Desk,
            PresetArg::Paper => Preset::Paper,
        };
        if cli.config.is_none() {
            cfg = RunConfig::preset(preset);
        } else if cfg.preset != preset {
            return Err(Error::config(format!(
                "--preset {} conflicts with the config file ({})",
                preset.name(),
                cfg.preset.name()
            )));
        }
    }
    for kv in &cli.overrides {
        cfg.apply_override(kv)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Configuration of an existing run, with command-line overrides on top.
fn run_config(cli: &Cli, run: &RunDir) -> Result<RunConfig> {
    let base = if run.config_path().exists() {
        Some(run.read_config()?)
    } else {
        None
    };
    resolve_config(cli, base)
}

fn print(json: bool, value: serde_json::Value, text: impl FnOnce() -> String) {
    if json {
        println!("{value}");
    } else {
        print!("{}", text());
    }
}

fn backend(verbose: bool) -> Option<HttpBackend> {
    HttpBackend::from_env().map(|mut b| {
        b.verbose = verbose;
        b
    })
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::MakeSynth { out, format } => {
            let cfg = resolve_config(cli, None)?;
            let ds = pipeline::load_dataset(&RunConfig {
                data_source: "synth".into(),
                ..cfg
            })?;
            let fmt: Format = (*format).into();
            for item in &ds.items {
                let p = out.join(format!("{}.{}", item.id, fmt.extension()));
                formats::save_motion(&p, &item.motion, Some(fmt))?;
                formats::save_captions(&formats::caption_path(&p), &item.captions)?;
            }
            print(
                cli.json,
                json!({"items": ds.items.len(), "out": out}),
                || format!("wrote {} items to {}\n", ds.items.len(), out.display()),
            );
        }
        Command::TrainRvq {
            run,
            resume,
            max_steps,
        } => {
            let dir = RunDir::create(run)?;
            let cfg = if *resume {
                run_config(cli, &dir)?
            } else {
                resolve_config(cli, None)?
            };
            let ds = pipeline::load_dataset(&cfg)?;
            let s = pipeline::train_rvq(&cfg, &ds, &dir, *resume, *max_steps)?;
            let first = s.val_l1.first().map(|x| x.1);
            print(
                cli.json,
                json!({"steps": s.steps, "window": s.window, "best_val_l1": s.best_l1, "initial_val_l1": first}),
                || format!("rvq: {} steps, best val L1 {:.5}\n", s.steps, s.best_l1),
            );
        }
        Command::TrainHct {
            run,
            resume,
            max_steps,
        } => {
            let dir = RunDir::open(run)?;
            let cfg = run_config(cli, &dir)?;
            dir.write_config(&cfg)?;
            let ds = pipeline::load_dataset(&cfg)?;
            let s = pipeline::train_hct(&cfg, &ds, &dir, *resume, *max_steps)?;
            let acc = s.train_acc.last().map(|x| x.1);
            let vl = s.val_loss.last().map(|x| x.1);
            print(
                cli.json,
                json!({"steps": s.steps, "items": s.items, "train_accuracy": acc, "val_loss": vl}),
                || {
                    format!(
                        "hct: {} steps on {} items, train accuracy {:?}, val loss {:?}\n",
                        s.steps, s.items, acc, vl
                    )
                },
            );
        }
        Command::Tokenize {
            run,
            input,
            out,
            fps,
        } => {
            let dir = RunDir::open(run)?;
            let (rvq, _) = pipeline::load_rvq(&dir.path("rvq.ckpt"))?;
            let stats = pipeline::load_stats(&dir.path("norm.stats"))?;
            let seq = formats::load_motion_fps(input, None, *fps)?;
            let grid = rvq.tokenize(&stats.normalize(&seq)?)?;
            formats::save_tokens(out, &grid)?;
            print(
                cli.json,
                json!({"frames": grid.n, "layers": grid.layers}),
                || {
                    format!(
                        "{} frames x {} layers -> {}\n",
                        grid.n,
                        grid.layers,
                        out.display()
                    )
                },
            );
        }
        Command::Generate {
            run,
            prompt,
            out,
            frames,
            seed,
            no_gateway,
            tables,
            stream,
        } => {
            let dir = RunDir::open(run)?;
            let cfg = run_config(cli, &dir)?;
            let models = Models::load(&dir)?;
            let policy = cfg.policy()?;
            let frames = frames.unwrap_or(cfg.gen_frames);
            let tables = gateway::load_tables(tables.as_deref())?;
            let http = backend(cli.verbose);
            let be = http.as_ref().map(|b| b as &dyn ChatBackend);
            let mut printer = |f: Frame<'_>| -> std::result::Result<(), String> {
                let pose: Vec<String> = f.pose.iter().map(|x| format!("{x:.4}")).collect();
                println!(
                    "frame {} tokens {:?} pose [{}]",
                    f.position,
                    f.tokens,
                    pose.join(", ")
                );
                Ok(())
            };
            let cb = if *stream {
                Some(&mut printer as &mut mogo_core::generate::FrameCallback<'_>)
            } else {
                None
            };
            let enabled = cfg.gen_gateway && !no_gateway;
            let g = pipeline::generate(
                &models, prompt, frames, policy, *seed, enabled, be, tables, cb,
            )?;
            pipeline::write_generation(out, &g, *seed, policy)?;
            for w in g.result.warnings.iter().chain(&g.decision.warnings) {
                log::warn!("{w}");
            }
            print(
                cli.json,
                json!({"frames": g.result.tokens.n, "prompt_used": g.decision.effective(), "backend_used": g.decision.backend.as_str(), "out": out}),
                || {
                    format!(
                        "{} frames for {:?} ({}) -> {}\n",
                        g.result.tokens.n,
                        g.decision.effective(),
                        g.decision.backend.as_str(),
                        out.display()
                    )
                },
            );
        }
        Command::Eval {
            run,
            recon_only,
            format,
        } => {
            let dir = RunDir::open(run)?;
            let cfg = run_config(cli, &dir)?;
            let ds = pipeline::load_dataset(&cfg)?;
            let (r, per_layer) = pipeline::evaluate(&cfg, &ds, &dir, !recon_only)?;
            let fmt = if cli.json {
                ReportFormat::Json
            } else {
                *format
            };
            match fmt {
                ReportFormat::Json => println!("{}", report::to_json(&r, &per_layer)),
                ReportFormat::Table => print!("{}", report::to_table(&r, &per_layer)),
                ReportFormat::Csv => print!("{}", report::to_csv(&r, &per_layer)),
            }
        }
        Command::RewritePrompt { prompt, tables } => {
            let tables = gateway::load_tables(tables.as_deref())?;
            let http = backend(cli.verbose);
            let gw = mogo_core::prompt::Gateway::new(
                http.as_ref().map(|b| b as &dyn ChatBackend),
                tables,
            );
            let d = gw.process(prompt);
            for w in &d.warnings {
                log::warn!("{w}");
            }
            print(
                cli.json,
                json!({"prompt": d.original, "needs_rewrite": d.needs_rewrite, "rewritten": d.rewritten, "backend_used": d.backend.as_str()}),
                || format!("{}\nbackend_used: {}\n", d.effective(), d.backend.as_str()),
            );
        }
        Command::InspectCkpt { path } => inspect(path, cli.json)?,
    }
    Ok(())
}

fn inspect(path: &Path, as_json: bool) -> Result<()> {
    let c = Checkpoint::load(path)?;
    let tensors: Vec<_> = c
        .tensors
        .iter()
        .map(|(n, t)| json!({"name": n, "shape": t.shape()}))
        .collect();
    let mut usage = Vec::new();
    for v in 0.. {
        let Some(t) = c.tensor(&format!("cb.{v}.usage")) else {
            break;
        };
        let counts = t.data();
        let total: f64 = counts.iter().map(|&x| x as f64).sum();
        let used = counts.iter().filter(|&&x| x > 0.0).count();
        // 10 buckets of codes ordered by index
        let per = counts.len().div_ceil(10).max(1);
        let buckets: Vec<f64> = counts
            .chunks(per)
            .map(|ch| ch.iter().map(|&x| x as f64).sum::<f64>() / total.max(1.0))
            .collect();
        usage.push(json!({"layer": v, "used": used, "codes": counts.len(), "assignments": total, "histogram": buckets}));
    }
    let value = json!({"kind": c.kind_str(), "digest": c.digest(), "header": c.header, "tensors": tensors, "usage": usage});
    print(as_json, value, || {
        let mut s = format!("kind {}\ndigest {}\n", c.kind_str(), c.digest());
        for (k, v) in &c.header {
            s.push_str(&format!("{k} = {v}\n"));
        }
        s.push_str(&format!("{} tensors\n", c.tensors.len()));
        for u in &usage {
            let bars: Vec<String> = u["histogram"]
                .as_array()
                .unwrap()
                .iter()
                .map(|x| format!("{:.2}", x.as_f64().unwrap()))
                .collect();
            s.push_str(&format!(
                "layer {}: {}/{} codes used, histogram [{}]\n",
                u["layer"],
                u["used"],
                u["codes"],
                bars.join(" ")
            ));
        }
        s
    });
    Ok(())
}

/// Parses arguments, runs, and returns the process exit code.
pub fn main_with_args(args: impl IntoIterator<Item = std::ffi::OsString>) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let level = if cli.verbose { "debug" } else { "warn" };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .try_init();
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
