//! Command-line harness: data generation, training, evaluation probes,
//! generation, and the finite-difference suite.
//!
//! Exit codes: 0 success, 2 usage/config error, 3 numeric failure.

use std::fs::OpenOptions;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use memdlm_core::checkpoint;
use memdlm_core::config::RunConfig;
use memdlm_core::diffusion::generate as sample_generate;
use memdlm_core::gradcheck;
use memdlm_core::inferadapt::adapt_on_prompt;
use memdlm_core::metrics::{MetricRecord, MetricsWriter, Phase};
use memdlm_core::model::BaseModel;
use memdlm_core::probes::{default_grid, exposure_report, retrieval_eval};
use memdlm_core::rng::{content_tag, stream_rng, stream};
use memdlm_core::taskgen::{self, Alphabets, TaskSpec};
use memdlm_core::trainer::{self, TrainError};

#[derive(Parser)]
#[command(name = "memdlm", about = "Masked diffusion language model laboratory", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic task data from a task spec file.
    GenData {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model from a run configuration.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Continue from the latest checkpoint in the run directory.
        #[arg(long)]
        resume: bool,
        /// key=value overrides applied on top of the config file.
        #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
        overrides: Vec<String>,
    },
    /// Exposure-bias grid on a trained checkpoint.
    EvalExposure {
        #[arg(long)]
        config: PathBuf,
        /// Checkpoint path; defaults to the latest in out.dir.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
        overrides: Vec<String>,
    },
    /// Retrieval accuracy per context length (honors infer.* flags).
    EvalRetrieval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
        overrides: Vec<String>,
    },
    /// Generate responses for prompts (token ids, one prompt per line).
    Generate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        prompt_file: PathBuf,
        /// Response length for raw-id prompt lines (toks lines use the gold length).
        #[arg(long, default_value_t = 16)]
        response_len: usize,
        #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
        overrides: Vec<String>,
    },
    /// Run the finite-difference gradient suite.
    Gradcheck,
}

struct Failure {
    code: i32,
    msg: String,
}

impl Failure {
    fn usage(msg: impl Into<String>) -> Self {
        Failure { code: 2, msg: msg.into() }
    }

    fn numeric(msg: impl Into<String>) -> Self {
        Failure { code: 3, msg: msg.into() }
    }
}

impl From<memdlm_core::config::ConfigError> for Failure {
    fn from(e: memdlm_core::config::ConfigError) -> Self {
        Failure::usage(e.to_string())
    }
}

impl From<taskgen::TaskError> for Failure {
    fn from(e: taskgen::TaskError) -> Self {
        Failure::usage(e.to_string())
    }
}

impl From<checkpoint::CheckpointError> for Failure {
    fn from(e: checkpoint::CheckpointError) -> Self {
        Failure::usage(e.to_string())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::usage(e.to_string())
    }
}

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NonFinite { .. } => Failure::numeric(e.to_string()),
            other => Failure::usage(other.to_string()),
        }
    }
}

impl From<memdlm_core::probes::ProbeError> for Failure {
    fn from(e: memdlm_core::probes::ProbeError) -> Self {
        match e {
            memdlm_core::probes::ProbeError::Train(TrainError::NonFinite { .. }) => {
                Failure::numeric(e.to_string())
            }
            other => Failure::usage(other.to_string()),
        }
    }
}

/// Exclusive ownership of a run directory for the process lifetime.
struct RunLock {
    path: PathBuf,
}

impl RunLock {
    fn acquire(dir: &Path) -> Result<Self, Failure> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(".lock");
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(RunLock { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Failure::usage(format!(
                "run directory {} is locked by another run (remove {} if stale)",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

fn load_config(path: &Path, overrides: &[String]) -> Result<RunConfig, Failure> {
    let mut cfg = RunConfig::parse(&std::fs::read_to_string(path)?)?;
    for raw in overrides {
        let cleaned = raw.trim_start_matches("--");
        let Some((key, value)) = cleaned.split_once('=') else {
            return Err(Failure::usage(format!("override '{raw}' is not key=value")));
        };
        cfg.set(key.trim(), value.trim())?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_model(run: &RunConfig, ckpt: Option<&Path>) -> Result<(BaseModel, PathBuf), Failure> {
    let path = match ckpt {
        Some(p) => p.to_path_buf(),
        None => {
            let dir = PathBuf::from(&run.out_dir);
            trainer::find_latest_checkpoint(&dir)
                .map(|(_, p)| p)
                .ok_or_else(|| Failure::usage(format!("no checkpoint found in {}", dir.display())))?
        }
    };
    if !path.exists() {
        return Err(Failure::usage(format!("checkpoint {} does not exist", path.display())));
    }
    let named = checkpoint::load_map(&path)?;
    let mut model =
        BaseModel::new_with_outer(run.model_config(), run.train_seed, run.outer_lora());
    model.load_named(&named).map_err(Failure::usage)?;
    Ok((model, path))
}

fn cmd_gen_data(spec_path: &Path, out: &Path) -> Result<(), Failure> {
    let spec = TaskSpec::load(spec_path)?;
    let pairs = taskgen::generate(&spec)?;
    std::fs::create_dir_all(out)?;
    let file = out.join(format!("{}-L{}-s{}.toks", spec.kind.name(), spec.context_len, spec.seed));
    taskgen::write_toks(&file, spec.vocab, &pairs)?;
    let manifest = format!(
        "{{\"format\":\"memdlm-manifest\",\"version\":1,\"kind\":\"{}\",\"context_len\":{},\"count\":{},\"seed\":{},\"vocab\":{},\"file\":\"{}\"}}\n",
        spec.kind.name(),
        spec.context_len,
        pairs.len(),
        spec.seed,
        spec.vocab,
        file.file_name().unwrap().to_string_lossy()
    );
    std::fs::write(out.join("manifest.json"), manifest)?;
    println!("wrote {} instances to {}", pairs.len(), file.display());
    Ok(())
}

fn cmd_train(config: &Path, resume: bool, overrides: &[String]) -> Result<(), Failure> {
    // Accept --resume in trailing position too (the override list is greedy).
    let mut resume = resume;
    let overrides: Vec<String> = overrides
        .iter()
        .filter(|o| {
            if o.as_str() == "--resume" {
                resume = true;
                false
            } else {
                true
            }
        })
        .cloned()
        .collect();
    let run = load_config(config, &overrides)?;
    let out_dir = PathBuf::from(&run.out_dir);
    let _lock = RunLock::acquire(&out_dir)?;
    let outcome = trainer::train(&run, &out_dir, resume)?;
    println!("trained to step {} in {}", outcome.final_step, outcome.out_dir.display());
    Ok(())
}

fn cmd_eval_exposure(config: &Path, ckpt: Option<&Path>, overrides: &[String]) -> Result<(), Failure> {
    let run = load_config(config, overrides)?;
    let (model, ckpt_path) = load_model(&run, ckpt)?;
    if run.data_eval.trim().is_empty() {
        return Err(Failure::usage("data.eval must point to probe pairs"));
    }
    let (_, pairs) = taskgen::read_toks_list(&run.data_eval)?;
    let grid = default_grid();
    let report = exposure_report(
        &model,
        None,
        &pairs,
        &grid,
        run.probe_samples,
        &run.sampler_config(),
        run.train_seed,
    )?;
    let out_dir = PathBuf::from(&run.out_dir);
    std::fs::create_dir_all(&out_dir)?;
    let mut writer = MetricsWriter::create(&out_dir.join("exposure.jsonl"))?;
    for (i, p) in report.points.iter().enumerate() {
        let mut rec = MetricRecord::new(i as u64, Phase::Exposure, run.train_seed)
            .field("t", p.t as f64)
            .field("l_static", p.l_static);
        if let Some(seq) = p.l_seq {
            rec = rec.field("l_seq", seq);
        }
        if let Some(r) = p.r_eb {
            rec = rec.field("r_eb", r);
        }
        writer.write(&rec)?;
    }
    std::fs::write(out_dir.join("exposure.csv"), report.to_csv())?;
    println!("exposure grid from {} ({} pairs):", ckpt_path.display(), pairs.len());
    for p in &report.points {
        match (p.l_seq, p.r_eb) {
            (Some(seq), Some(r)) => {
                println!("  t={:.1}  static={:.4}  seq={:.4}  r_eb={:.4}", p.t, p.l_static, seq, r)
            }
            _ => println!("  t={:.1}  static={:.4}  (no sequential masks left)", p.t, p.l_static),
        }
    }
    Ok(())
}

fn cmd_eval_retrieval(config: &Path, ckpt: Option<&Path>, overrides: &[String]) -> Result<(), Failure> {
    let run = load_config(config, overrides)?;
    let (model, ckpt_path) = load_model(&run, ckpt)?;
    if run.data_retrieval.trim().is_empty() {
        return Err(Failure::usage("data.retrieval must point to task files"));
    }
    let (_, pairs) = taskgen::read_toks_list(&run.data_retrieval)?;
    let report = retrieval_eval(
        &model,
        &pairs,
        &run.sampler_config(),
        &run.inner_config(),
        &run.infer_config(),
        run.train_seed,
    )?;
    let out_dir = PathBuf::from(&run.out_dir);
    std::fs::create_dir_all(&out_dir)?;
    let mut writer = MetricsWriter::create(&out_dir.join("retrieval.jsonl"))?;
    for (i, b) in report.buckets.iter().enumerate() {
        writer.write(
            &MetricRecord::new(i as u64, Phase::Retrieval, run.train_seed)
                .field("context_len", b.context_len as f64)
                .field("total", b.total as f64)
                .field("correct", b.correct as f64)
                .field("accuracy", b.accuracy()),
        )?;
    }
    std::fs::write(out_dir.join("retrieval.csv"), report.to_csv())?;
    println!(
        "retrieval from {} (adaptation {}):",
        ckpt_path.display(),
        if run.infer_enabled { "on" } else { "off" }
    );
    for b in &report.buckets {
        println!("  len={:<4} acc={:.4} ({}/{})", b.context_len, b.accuracy(), b.correct, b.total);
    }
    Ok(())
}

fn cmd_generate(
    config: &Path,
    ckpt: Option<&Path>,
    prompt_file: &Path,
    response_len: usize,
    overrides: &[String],
) -> Result<(), Failure> {
    let run = load_config(config, overrides)?;
    let (model, _) = load_model(&run, ckpt)?;
    let inner_cfg = run.inner_config();
    let infer_cfg = run.infer_config();
    let sampler = run.sampler_config();
    let alpha = Alphabets::default_for(run.model_vocab);
    let text = std::fs::read_to_string(prompt_file)?;

    let mut fast_ws = inner_cfg.make_fast_weights(&model.cfg, run.train_seed);
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with("memdlm-toks") {
            continue;
        }
        let (prompt, resp_len): (Vec<u32>, usize) = if line.starts_with("P:") {
            let rest = line.trim_start_matches("P:");
            let (p, r) = rest.split_once('|').unwrap_or((rest, ""));
            let prompt: Vec<u32> = p
                .split_whitespace()
                .map(|t| t.parse().map_err(|e| Failure::usage(format!("line {}: {e}", lineno + 1))))
                .collect::<Result<_, _>>()?;
            let gold: Vec<u32> = r
                .trim()
                .trim_start_matches("R:")
                .split_whitespace()
                .filter_map(|t| t.parse().ok())
                .collect();
            let len = if gold.is_empty() { response_len } else { gold.len() };
            (prompt, len)
        } else {
            let prompt: Vec<u32> = line
                .split_whitespace()
                .map(|t| t.parse().map_err(|e| Failure::usage(format!("line {}: {e}", lineno + 1))))
                .collect::<Result<_, _>>()?;
            (prompt, response_len)
        };

        let fast = if infer_cfg.enabled {
            let mut rng = stream_rng(run.train_seed, &[stream::INFER, content_tag(&prompt)]);
            adapt_on_prompt(&model, &mut fast_ws, &prompt, &infer_cfg, &inner_cfg, &mut rng)?;
            Some(&fast_ws)
        } else {
            None
        };
        let out = sample_generate(&model, fast, &prompt, resp_len, &sampler)
            .map_err(|e| Failure::usage(e.to_string()))?;
        let response = &out[prompt.len()..];
        let ids: Vec<String> = response.iter().map(|t| t.to_string()).collect();
        let labels: Vec<String> =
            response.iter().map(|&t| alpha.label(run.model_vocab, t)).collect();
        println!("{}", ids.join(" "));
        println!("# {}", labels.join(" "));
    }
    Ok(())
}

fn cmd_gradcheck() -> Result<(), Failure> {
    let reports = gradcheck::run_suite();
    let mut failed = 0;
    for r in &reports {
        println!(
            "gradcheck {:40} {} (worst ratio {:.4}, rel {:.0e})",
            r.name,
            if r.passed { "PASS" } else { "FAIL" },
            r.worst,
            r.rel_tol
        );
        if !r.passed {
            failed += 1;
        }
    }
    if failed > 0 {
        return Err(Failure::numeric(format!("{failed} gradient checks failed")));
    }
    println!("gradcheck: all {} checks passed", reports.len());
    Ok(())
}

fn run() -> Result<(), Failure> {
    if let Ok(threads) = std::env::var("MEMDLM_THREADS") {
        if let Ok(n) = threads.parse::<usize>() {
            memdlm_core::set_worker_threads(n);
        }
    }
    let cli = Cli::parse();
    match cli.command {
        Command::GenData { spec, out } => cmd_gen_data(&spec, &out),
        Command::Train { config, resume, overrides } => cmd_train(&config, resume, &overrides),
        Command::EvalExposure { config, ckpt, overrides } => {
            cmd_eval_exposure(&config, ckpt.as_deref(), &overrides)
        }
        Command::EvalRetrieval { config, ckpt, overrides } => {
            cmd_eval_retrieval(&config, ckpt.as_deref(), &overrides)
        }
        Command::Generate { config, ckpt, prompt_file, response_len, overrides } => {
            cmd_generate(&config, ckpt.as_deref(), &prompt_file, response_len, &overrides)
        }
        Command::Gradcheck => cmd_gradcheck(),
    }
}

fn main() {
    match run() {
        Ok(()) => {}
        Err(f) => {
            eprintln!("error: {}", f.msg);
            std::process::exit(f.code);
        }
    }
}
