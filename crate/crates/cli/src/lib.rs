//! `wm` command line: data generation, staged training, distillation,
//! evaluation, ablations and the streaming server.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use wm_core::config::{parse_overrides, RunConfig};
use wm_core::dataset::Dataset;
use wm_core::distill::DistillState;
use wm_core::eval::{ablate, ablation_grid, evaluate_model, render_table};
use wm_core::pipeline::{load_model, save_model};
use wm_core::train::{Stage, Trainer};
use wm_core::world::{read_episode, write_episode};
use wm_core::{Error, Model};

pub const CODE_HASH: &str = env!("WM_CODE_HASH");
pub const MANIFEST_FILE: &str = "run.json";

#[derive(Debug, Parser)]
#[command(name = "wm", version, about = "Desk-scale interactive world model")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone)]
pub struct Common {
    /// Plain-text `key = value` configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Configuration override, applied after the file; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub set: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render episodes from the simulator.
    GenData {
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long)]
        length: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Train one stage: 1a, 1b, 2 or 3-teacher.
    Train {
        #[arg(long, value_parser = ["1a", "1b", "2", "3-teacher"])]
        stage: String,
        #[arg(long)]
        steps: Option<usize>,
        /// Episode directory from `gen-data`; generated from the config when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Checkpoint to start from; a fresh model when absent.
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Context-forcing distillation of a student against a teacher.
    Distill {
        #[arg(long)]
        student: PathBuf,
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Long-horizon evaluation of a checkpoint.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        /// Sampling steps; the model's student steps when absent.
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Train and evaluate the action × position × memory grid.
    Ablate {
        /// Only cells whose name contains one of these substrings.
        #[arg(long)]
        only: Vec<String>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Serve the live session endpoint and the browser client.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: String,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 80)]
        tick_ms: u64,
        #[arg(long)]
        steps: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
}

/// Provenance written next to every artifact.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: Vec<String>,
    pub config_hash: String,
    pub config: String,
    pub seed: u64,
    pub code_hash: String,
    pub unix_time: u64,
    pub outputs: Vec<String>,
}

fn load_config(common: &Common) -> wm_core::Result<RunConfig> {
    let cfg = RunConfig::load(common.config.as_deref(), &parse_overrides(&common.set)?)?;
    if (cfg.data.width, cfg.data.height) != (cfg.model.frame_width, cfg.model.frame_height) {
        return Err(Error::Config(format!(
            "data is {}x{} but the model expects {}x{}",
            cfg.data.width, cfg.data.height, cfg.model.frame_width, cfg.model.frame_height
        )));
    }
    Ok(cfg)
}

fn write_manifest(dir: &Path, cfg: &RunConfig, seed: u64, outputs: Vec<String>) -> wm_core::Result<()> {
    fs::create_dir_all(dir)?;
    let m = RunManifest {
        command: std::env::args().collect(),
        config_hash: cfg.hash(),
        config: cfg.to_text()?,
        seed,
        code_hash: CODE_HASH.to_string(),
        unix_time: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
        outputs,
    };
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&m)?)?;
    fs::write(dir.join("config.txt"), cfg.to_text()?)?;
    Ok(())
}

fn episode_dirs(dir: &Path) -> wm_core::Result<Vec<PathBuf>> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("meta.jsonl").exists())
        .collect();
    dirs.sort();
    Ok(dirs)
}

fn dataset(cfg: &RunConfig, data: Option<&Path>) -> wm_core::Result<Dataset> {
    match data {
        Some(dir) => {
            let episodes = episode_dirs(dir)?.iter().map(|d| read_episode(d)).collect::<wm_core::Result<Vec<_>>>()?;
            if episodes.is_empty() {
                return Err(Error::Config(format!("no episodes in {}", dir.display())));
            }
            Dataset::from_episodes(&episodes, cfg.model.patch)
        }
        None => Dataset::generate(&cfg.data, &cfg.model),
    }
}

fn model_from(cfg: &RunConfig, init: Option<&Path>) -> wm_core::Result<Model> {
    match init {
        Some(dir) => {
            let m = load_model(dir)?;
            Model::with_params(cfg.model.clone(), &m.params)
        }
        None => Model::new(cfg.model.clone()),
    }
}

fn log_file(dir: &Path, name: &str) -> wm_core::Result<BufWriter<fs::File>> {
    fs::create_dir_all(dir)?;
    Ok(BufWriter::new(fs::File::create(dir.join(name))?))
}

pub fn execute(cli: Cli) -> wm_core::Result<()> {
    match cli.command {
        Command::GenData { episodes, length, out, common } => {
            let mut cfg = load_config(&common)?;
            cfg.data.episodes = episodes.unwrap_or(cfg.data.episodes);
            cfg.data.length = length.unwrap_or(cfg.data.length);
            let mut outputs = Vec::new();
            for i in 0..cfg.data.episodes {
                let name = format!("ep-{i:05}");
                write_episode(&out.join(&name), &cfg.data.episode(i)?)?;
                outputs.push(name);
            }
            write_manifest(&out, &cfg, cfg.data.seed, outputs)?;
            println!("wrote {} episodes to {}", cfg.data.episodes, out.display());
        }
        Command::Train { stage, steps, data, init, out, common } => {
            let stage = Stage::parse(&stage).ok_or_else(|| Error::Config(format!("unknown stage {stage:?}")))?;
            let mut cfg = load_config(&common)?;
            cfg.train.stage = stage;
            cfg.train.steps = steps.unwrap_or(cfg.train.steps);
            let ds = dataset(&cfg, data.as_deref())?;
            let mut model = model_from(&cfg, init.as_deref())?;
            let mut log = log_file(&out, "train.log")?;
            let losses = Trainer::new(cfg.train.clone()).run(&mut model, &ds, Some(&mut log))?;
            log.flush()?;
            save_model(&out, &model, Default::default())?;
            write_manifest(&out, &cfg, cfg.train.seed, vec!["train.log".into(), "checkpoint".into()])?;
            if let Some(l) = losses.last() {
                println!("stage {} done: {} steps, final loss {l:.5}", stage.as_str(), losses.len());
            }
        }
        Command::Distill { student, teacher, steps, data, out, common } => {
            let mut cfg = load_config(&common)?;
            cfg.distill.steps = steps.unwrap_or(cfg.distill.steps);
            let ds = dataset(&cfg, data.as_deref())?;
            let student = model_from(&cfg, Some(&student))?;
            let teacher = load_model(&teacher)?;
            let mut state = DistillState::new(student, teacher, cfg.distill.clone())?;
            let mut log = log_file(&out, "distill.log")?;
            state.run(&ds, Some(&mut log))?;
            log.flush()?;
            save_model(&out, &state.student, Default::default())?;
            write_manifest(&out, &cfg, cfg.distill.seed, vec!["distill.log".into(), "checkpoint".into()])?;
            println!("distilled {} steps", cfg.distill.steps);
        }
        Command::Eval { ckpt, steps, out, common } => {
            let cfg = load_config(&common)?;
            let model = load_model(&ckpt)?;
            let steps = steps.unwrap_or(model.cfg.student_steps);
            let mut report = evaluate_model(&ckpt.display().to_string(), &model, steps, &cfg.eval)?;
            report.checkpoint = ckpt.display().to_string();
            fs::create_dir_all(&out)?;
            fs::write(out.join("report.json"), serde_json::to_string_pretty(&report)?)?;
            write_manifest(&out, &cfg, cfg.eval.seed, vec!["report.json".into()])?;
            print!("{}", render_table(&[report]));
        }
        Command::Ablate { only, data, out, common } => {
            let cfg = load_config(&common)?;
            let ds = dataset(&cfg, data.as_deref())?;
            let cells: Vec<_> = ablation_grid().into_iter().filter(|c| only.is_empty() || only.iter().any(|o| c.name().contains(o.as_str()))).collect();
            fs::create_dir_all(&out)?;
            let mut progress = log_file(&out, "ablate.jsonl")?;
            let reports = ablate(&cells, &cfg.model, &ds, &cfg.budget, &cfg.eval, |r| {
                println!("{}", r.name);
                let _ = serde_json::to_writer(&mut progress, r).map(|_| progress.write_all(b"\n"));
            })?;
            progress.flush()?;
            let table = render_table(&reports);
            fs::write(out.join("table.txt"), &table)?;
            write_manifest(&out, &cfg, cfg.budget.seed, vec!["ablate.jsonl".into(), "table.txt".into()])?;
            print!("{table}");
        }
        Command::Serve { addr, ckpt, tick_ms, steps, common } => {
            let cfg = load_config(&common)?;
            let model = Arc::new(load_model(&ckpt)?);
            let mut sc = wm_server::ServerConfig::with_tick_ms(tick_ms);
            sc.session.steps = steps;
            sc.session.world_size = cfg.data.world_size;
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(async {
                let listener = tokio::net::TcpListener::bind(&addr).await?;
                println!("serving on http://{}", listener.local_addr()?);
                wm_server::serve(listener, model, sc).await
            })?;
        }
    }
    Ok(())
}

/// Parse `args` and run; 0 ok, 1 runtime failure, 2 usage.
pub fn run<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
