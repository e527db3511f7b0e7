//! Command-line front end: argument parsing, the combined run config, and
//! one function per subcommand. `main` only parses and maps errors to exit
//! codes, so everything here is callable from tests.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::{apply_lines, parse_lines, KvConfig};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalPlan};
use crate::flow::{sample, FlowSchedule, FlowTarget};
use crate::gradsuite::{run_suite, CheckResult};
use crate::image::Image;
use crate::kv_config;
use crate::model::{load_checkpoint, save_checkpoint, ModelConfig, UnifiedModel};
use crate::synthcorpus::{make_corpus, CorpusConfig, CorpusPaths, Vocab, EOS};
use crate::train::{train_diga, train_gduf, FreezePolicy, TrainConfig};

pub const RESOLVED_CONFIG: &str = "resolved.cfg";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const LOG_FILE: &str = "log.csv";
pub const METRICS_FILE: &str = "metrics.csv";
pub const ROBUSTNESS_FILE: &str = "robustness.csv";

/// Settings that belong to no single module.
#[derive(Clone, Debug, PartialEq)]
pub struct RunSettings {
    pub sample_steps: usize,
    pub sample_t_min: f64,
    pub fid_samples: usize,
    pub diversity_samples: usize,
    pub eval_explain: bool,
}

impl Default for RunSettings {
    fn default() -> Self {
        let s = FlowSchedule::default();
        Self {
            sample_steps: s.steps,
            sample_t_min: s.t_min,
            fid_samples: 200,
            diversity_samples: 16,
            eval_explain: true,
        }
    }
}

kv_config!(RunSettings {
    sample_steps: value,
    sample_t_min: float,
    fid_samples: value,
    diversity_samples: value,
    eval_explain: bool,
});

/// Everything one command needs, read from a `key = value` file and
/// overridden by flags.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub corpus: CorpusConfig,
    pub run: RunSettings,
    /// Keys set by the file or by flags, as opposed to defaults.
    pub explicit: BTreeSet<String>,
}

/// Alternative spellings of the ablation switches.
const ALIASES: [(&str, &str); 3] = [("smsa_on", "smsa"), ("diga_target", "flow_target"), ("freeze_policy", "freeze")];

impl KvConfig for RunConfig {
    fn set(&mut self, key: &str, value: &str) -> std::result::Result<bool, String> {
        let key = ALIASES.iter().find(|(from, _)| *from == key).map_or(key, |(_, to)| to);
        let hit = self.run.set(key, value)?
            || self.model.set(key, value)?
            || self.train.set(key, value)?
            || self.corpus.set(key, value)?;
        if hit {
            self.explicit.insert(key.to_string());
        }
        Ok(hit)
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        let mut out = self.model.entries();
        out.extend(self.train.entries());
        out.extend(self.corpus.entries());
        out.extend(self.run.entries());
        out
    }
}

impl RunConfig {
    pub fn schedule(&self) -> Result<FlowSchedule> {
        FlowSchedule::new(self.run.sample_steps, self.run.sample_t_min)
    }

    /// Fully resolved text with one section comment per module.
    pub fn resolved_text(&self) -> String {
        let mut out = String::new();
        for (title, body) in [
            ("model", self.model.to_text()),
            ("train", self.train.to_text()),
            ("corpus", self.corpus.to_text()),
            ("run", self.run.to_text()),
        ] {
            let _ = writeln!(out, "# {title}\n{body}");
        }
        out
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        let name = path.display().to_string();
        let mut cfg = Self::default();
        apply_lines(&mut cfg, &parse_lines(&text, &name)?, &name)?;
        Ok(cfg)
    }
}

#[derive(Debug, Parser)]
#[command(name = "gendet", version, about = "Unified synthetic-image generation and detection at desk scale")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Default)]
pub struct GlobalArgs {
    /// `key = value` run config; flags override it.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Seed for training and sampling (corpus seed for make-data).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Optimizer steps for the training command being run.
    #[arg(long, global = true)]
    pub steps: Option<usize>,
    /// Detection tokens do not attend to the generation latents.
    #[arg(long, global = true)]
    pub ablate_smsa: bool,
    /// Flow-matching regression target.
    #[arg(long, global = true, value_name = "literal|velocity")]
    pub diga_target: Option<FlowTarget>,
    /// Parameters frozen during alignment.
    #[arg(long, global = true, value_name = "detector-heads|backbone")]
    pub freeze: Option<FreezePolicy>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the four synthetic corpora.
    MakeData,
    /// Stage one: joint detection, explanation and generation training.
    TrainGduf {
        /// Directory written by make-data
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
    },
    /// Stage two: align generator features with the frozen detector.
    TrainDiga {
        /// Directory written by make-data
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        /// Model checkpoint file
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
    },
    /// Classify one PGM/PPM image and explain the verdict.
    Detect {
        /// Model checkpoint file
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        /// Binary PGM or PPM image
        #[arg(long, value_name = "PATH")]
        image: PathBuf,
    },
    /// Sample images for a caption.
    Generate {
        /// Model checkpoint file
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        /// Caption in the corpus vocabulary
        #[arg(long)]
        caption: String,
        /// Images to sample, seeded seed, seed+1, ...
        #[arg(long, default_value_t = 1)]
        count: usize,
    },
    /// Detection, robustness and generation metrics on the test splits.
    Eval {
        /// Directory written by make-data
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        /// Model checkpoint file
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
    },
    /// Finite-difference check of every differentiable operation.
    GradCheck,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::MakeData => "make-data",
            Command::TrainGduf { .. } => "train-gduf",
            Command::TrainDiga { .. } => "train-diga",
            Command::Detect { .. } => "detect",
            Command::Generate { .. } => "generate",
            Command::Eval { .. } => "eval",
            Command::GradCheck => "grad-check",
        }
    }
}

/// Config file first, then flags.
pub fn resolve(global: &GlobalArgs, command: &Command) -> Result<RunConfig> {
    let mut cfg = match &global.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let mut set = |k: &str, v: String| {
        cfg.set(k, &v).map_err(Error::Usage)?;
        Ok::<_, Error>(())
    };
    if let Some(s) = global.seed {
        set(if matches!(command, Command::MakeData) { "corpus_seed" } else { "seed" }, s.to_string())?;
    }
    if let Some(n) = global.steps {
        match command {
            Command::TrainGduf { .. } => set("gduf_steps", n.to_string())?,
            Command::TrainDiga { .. } => set("diga_steps", n.to_string())?,
            _ => {}
        }
    }
    if global.ablate_smsa {
        set("smsa", "false".into())?;
    }
    if let Some(t) = global.diga_target {
        set("flow_target", t.to_string())?;
    }
    if let Some(f) = global.freeze {
        set("freeze", f.to_string())?;
    }
    cfg.model.validate()?;
    cfg.train.validate()?;
    cfg.schedule()?;
    Ok(cfg)
}

fn out_dir(global: &GlobalArgs, command: &Command) -> Result<PathBuf> {
    let dir = global
        .out
        .clone()
        .ok_or_else(|| Error::Usage(format!("{} needs --out DIR", command.name())))?;
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

fn load_model(path: &Path) -> Result<UnifiedModel> {
    load_checkpoint(path).map_err(|e| match e {
        Error::Io(io) => Error::Data(format!("{}: {io}", path.display())),
        other => other,
    })
}

/// Loaded checkpoint with an explicitly requested flow target applied; the
/// run config then reflects the checkpoint's architecture.
fn adopt(cfg: &mut RunConfig, path: &Path) -> Result<UnifiedModel> {
    let mut model = load_model(path)?;
    if cfg.explicit.contains("flow_target") {
        model.config.flow_target = cfg.model.flow_target;
    }
    cfg.model = model.config.clone();
    Ok(model)
}

/// Runs one parsed command, writing artifacts and printing to `stdout`.
pub fn run(cli: &Cli, stdout: &mut dyn std::io::Write) -> Result<()> {
    let mut cfg = resolve(&cli.global, &cli.command)?;
    match &cli.command {
        Command::MakeData => {
            let dir = out_dir(&cli.global, &cli.command)?;
            let m = &cfg.model;
            make_corpus(&cfg.corpus, m.image_size, m.channels, m.gen_patch, &dir)?;
            write(&dir.join(RESOLVED_CONFIG), &cfg.resolved_text())?;
            writeln!(stdout, "wrote corpora to {}", dir.display())?;
        }
        Command::TrainGduf { data } => {
            let dir = out_dir(&cli.global, &cli.command)?;
            let paths = CorpusPaths::in_dir(data);
            let det = CorpusPaths::load_det(&paths.det_train)?;
            let gen = CorpusPaths::load_gen(&paths.gen_train)?;
            let held_out = if cfg.train.eval_every > 0 {
                Some(CorpusPaths::load_det(&paths.det_test)?)
            } else {
                None
            };
            let model = UnifiedModel::new(cfg.model.clone(), cfg.train.seed)?;
            let out = train_gduf(model, &det, &gen, &cfg.train, held_out.as_deref())?;
            save_checkpoint(&out.model, &dir.join(CHECKPOINT_FILE))?;
            write(&dir.join(LOG_FILE), &out.log.to_csv())?;
            write(&dir.join(RESOLVED_CONFIG), &cfg.resolved_text())?;
            writeln!(stdout, "wrote {} after {} steps", dir.join(CHECKPOINT_FILE).display(), out.log.rows.len())?;
        }
        Command::TrainDiga { data, checkpoint } => {
            let dir = out_dir(&cli.global, &cli.command)?;
            let model = adopt(&mut cfg, checkpoint)?;
            let paths = CorpusPaths::in_dir(data);
            let gen = CorpusPaths::load_gen(&paths.gen_train)?;
            let fakes = if cfg.train.balanced_diga {
                CorpusPaths::load_det(&paths.det_train)?
            } else {
                Vec::new()
            };
            let out = train_diga(model, &gen, &fakes, &cfg.train)?;
            save_checkpoint(&out.model, &dir.join(CHECKPOINT_FILE))?;
            write(&dir.join(LOG_FILE), &out.log.to_csv())?;
            write(&dir.join(RESOLVED_CONFIG), &cfg.resolved_text())?;
            writeln!(stdout, "wrote {} after {} steps", dir.join(CHECKPOINT_FILE).display(), out.log.rows.len())?;
        }
        Command::Detect { checkpoint, image } => {
            let model = adopt(&mut cfg, checkpoint)?;
            let img = Image::read_pnm(image).map_err(|e| Error::Data(format!("{}: {e}", image.display())))?;
            let vocab = Vocab::new();
            let (prob, tokens) = model.explain(&img, &vocab.instruction(0), EOS, model.config.max_text_len)?;
            let label = if prob > 0.5 { "fake" } else { "real" };
            writeln!(stdout, "label: {label}\nprobability: {prob:.6}\nexplanation: {}", vocab.decode(&tokens))?;
        }
        Command::Generate { checkpoint, caption, count } => {
            let dir = out_dir(&cli.global, &cli.command)?;
            let model = adopt(&mut cfg, checkpoint)?;
            let tokens = Vocab::new().encode(caption)?;
            let schedule = cfg.schedule()?;
            for i in 0..*count {
                let img = sample(&model, &tokens, &schedule, cfg.train.seed + i as u64)?;
                img.write_pnm(&dir.join(format!("gen-{i:03}.{}", if img.channels == 1 { "pgm" } else { "ppm" })))?;
            }
            write(&dir.join(RESOLVED_CONFIG), &cfg.resolved_text())?;
            writeln!(stdout, "wrote {count} images to {}", dir.display())?;
        }
        Command::Eval { data, checkpoint } => {
            let dir = out_dir(&cli.global, &cli.command)?;
            let model = adopt(&mut cfg, checkpoint)?;
            let paths = CorpusPaths::in_dir(data);
            let det = CorpusPaths::load_det(&paths.det_test)?;
            let gen = CorpusPaths::load_gen(&paths.gen_test)?;
            let plan = EvalPlan {
                fid_samples: cfg.run.fid_samples,
                diversity_samples: cfg.run.diversity_samples,
                schedule: cfg.schedule()?,
                seed: cfg.train.seed,
                explain: cfg.run.eval_explain,
            };
            let report = evaluate(&model, &det, &gen, &plan)?;
            write(&dir.join(METRICS_FILE), &report.metrics_csv())?;
            write(&dir.join(ROBUSTNESS_FILE), &report.robustness_csv())?;
            write(&dir.join(RESOLVED_CONFIG), &cfg.resolved_text())?;
            write!(stdout, "{}", report.table())?;
        }
        Command::GradCheck => {
            let base = cfg.train.seed;
            let seeds: Vec<u64> = (base..base + 5).collect();
            let results = run_suite(&seeds)?;
            let failed: Vec<&CheckResult> = results.iter().filter(|r| !r.passed()).collect();
            for r in &results {
                log::debug!("{} seed {}: {:.3e}", r.name, r.seed, r.max_rel_err);
            }
            let worst = results.iter().map(|r| r.max_rel_err).fold(0.0, f64::max);
            writeln!(stdout, "{} checks over {} seeds, worst relative error {worst:.3e}", results.len(), seeds.len())?;
            if !failed.is_empty() {
                let names: Vec<String> = failed.iter().map(|r| format!("{} (seed {}, {:.3e})", r.name, r.seed, r.max_rel_err)).collect();
                return Err(Error::GradCheck(names.join(", ")));
            }
        }
    }
    Ok(())
}

/// Parses `args` and runs; returns the process exit status.
pub fn main_with(args: impl IntoIterator<Item = String>, stdout: &mut dyn std::io::Write) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli, stdout) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
