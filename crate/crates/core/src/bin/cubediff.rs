use std::fs::{self, File};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::{error, info, warn};

use cubediff::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use cubediff::config::{key, required, Key, RunConfig};
use cubediff::harness::{run_ablation, synth_corpus, synth_labeled, toy_spec, EvalReport, Protocol, Subject, ToyJoint};
use cubediff::io::{read_features, read_tokens, write_features, write_tokens};
use cubediff::masking::MaskStrategy;
use cubediff::predictor::{MaskValueMode, Predictor, PredictorConfig};
use cubediff::quantizer::{calibrate, dequantize, quantize, QuantizerSpec};
use cubediff::sampler::{generate_batch, SampleConfig};
use cubediff::trainer::{train_on_corpus, Example, TrainConfig, TrainState};
use cubediff::verify::{run_suite, Suite, VerifyOptions};
use cubediff::{Error, TokenTensor};

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_VERIFY: u8 = 3;

#[derive(Parser)]
#[command(name = "cubediff", version, about = "Masked discrete diffusion over quantized feature tensors")]
struct Cli {
    /// Base directory for relative paths.
    #[arg(long, global = true, env = "CUBEDIFF_DATA_DIR")]
    data_dir: Option<PathBuf>,
    /// Worker threads (0 = all cores). Never changes results.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// Text file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key; repeatable, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Print the resolved configuration and exit.
    #[arg(long)]
    dry_run: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Fit per-dimension quantizer ranges to a feature corpus.
    Calibrate {
        #[command(flatten)]
        common: Common,
        /// Comma-separated feature files.
        #[arg(long)]
        features: Option<String>,
        #[arg(long)]
        quantile: Option<String>,
        #[arg(long)]
        levels: Option<String>,
        #[arg(long)]
        out: Option<String>,
    },
    /// Convert feature tensors to token files.
    Quantize {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        spec: Option<String>,
        #[arg(long)]
        features: Option<String>,
        #[arg(long)]
        out_dir: Option<String>,
    },
    /// Convert token files back to a feature file.
    Dequantize {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        spec: Option<String>,
        /// Comma-separated token files.
        #[arg(long)]
        tokens: Option<String>,
        #[arg(long)]
        out: Option<String>,
    },
    /// Train a predictor; resumes from the output directory's checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        /// `toy`, a feature file, or a directory of token files.
        #[arg(long)]
        corpus: Option<String>,
        #[arg(long)]
        out_dir: Option<String>,
        #[arg(long)]
        steps: Option<String>,
        #[arg(long)]
        seed: Option<String>,
    },
    /// Generate token tensors from a checkpoint.
    Sample {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<String>,
        #[arg(long)]
        steps: Option<String>,
        #[arg(long)]
        count: Option<String>,
        #[arg(long)]
        class: Option<String>,
        #[arg(long)]
        guidance: Option<String>,
        #[arg(long)]
        seed: Option<String>,
        #[arg(long)]
        out_dir: Option<String>,
    },
    /// Run self-check suites: quantizer, schedule, oracle, gradcheck, ablation or all.
    Verify {
        #[command(flatten)]
        common: Common,
        /// Defaults to `all`.
        suite: Option<String>,
        #[arg(long)]
        seed: Option<String>,
    },
    /// Compare masking granularities on the toy joint.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        subject: Option<String>,
        #[arg(long)]
        seed: Option<String>,
        #[arg(long)]
        out_dir: Option<String>,
    },
}

const CALIBRATE_KEYS: &[Key] = &[
    required("features", "comma-separated feature files"),
    key("quantile", "0.0005", "tail fraction clipped per side"),
    key("levels", "8", "quantization levels"),
    required("out", "output spec file"),
];

const QUANTIZE_KEYS: &[Key] = &[
    required("spec", "quantizer spec file"),
    required("features", "input feature file"),
    required("out_dir", "directory for token files"),
];

const DEQUANTIZE_KEYS: &[Key] = &[
    required("spec", "quantizer spec file"),
    required("tokens", "comma-separated token files"),
    required("out", "output feature file"),
];

const TRAIN_KEYS: &[Key] = &[
    required("corpus", "toy | feature file | token directory"),
    key("spec", "", "quantizer spec (required unless corpus = toy)"),
    required("out_dir", "output directory"),
    key("toy_samples", "10000", "corpus size drawn from the toy joint"),
    key("hidden", "64", "transformer width"),
    key("blocks", "2", "transformer blocks"),
    key("heads", "4", "attention heads"),
    key("mlp_ratio", "4", "MLP expansion"),
    key("classes", "0", "class count (0 = unconditional)"),
    key("mask_mode", "learned", "learned | random | fixed:<value>"),
    key("lr", "5e-5", "peak learning rate"),
    key("weight_decay", "0.05", "AdamW decay on weight matrices"),
    key("clip_norm", "3.0", "global gradient-norm clip"),
    key("warmup_steps", "100", "linear warmup steps"),
    key("total_steps", "1000", "optimization steps"),
    key("batch_size", "2048", "examples per step"),
    key("ema_momentum", "0.9999", "EMA momentum"),
    key("sigma", "0.10", "mask-ratio spread"),
    key("cond_dropout", "0.1", "probability of dropping the class"),
    key("beta1", "0.9", "AdamW beta1"),
    key("beta2", "0.999", "AdamW beta2"),
    key("eps", "1e-8", "AdamW epsilon"),
    key("strategy", "per-element", "masking granularity"),
    key("seed", "0", "random seed"),
    key("checkpoint_every", "100", "steps between checkpoints"),
    key("log_every", "10", "steps between progress lines"),
    key("resume", "true", "continue from an existing checkpoint"),
];

const SAMPLE_KEYS: &[Key] = &[
    required("checkpoint", "checkpoint file"),
    key("steps", "256", "generation steps"),
    key("count", "1", "number of samples"),
    key("class", "", "class id (empty = unconditional)"),
    key("guidance", "1.0", "guidance scale"),
    key("temperature", "1.0", "sampling temperature"),
    key("strategy", "per-element", "unit granularity"),
    key("seed", "0", "random seed"),
    key("weights", "ema", "ema | raw"),
    required("out_dir", "output directory"),
];

const VERIFY_KEYS: &[Key] = &[
    key("suite", "all", "suite name or all"),
    key("seed", "0", "random seed"),
    key("quantizer_cases", "2000", "random quantizer cases"),
    key("oracle_samples", "100000", "oracle generations"),
];

const ABLATE_KEYS: &[Key] = &[
    key("subject", "oracle", "oracle | trained"),
    key("strategies", "per-element,per-spatial,per-dim", "comma-separated strategies"),
    key("samples", "10000", "generated samples per strategy"),
    key("eval_examples", "2000", "held-out examples"),
    key("steps", "", "generation steps (empty = one per unit)"),
    key("seed", "0", "random seed"),
    key("out_dir", "", "directory for reports (empty = stdout only)"),
    key("corpus_size", "10000", "training draws (trained subject)"),
    key("hidden", "64", "transformer width"),
    key("blocks", "2", "transformer blocks"),
    key("heads", "4", "attention heads"),
    key("mlp_ratio", "4", "MLP expansion"),
    key("mask_mode", "learned", "learned | random | fixed:<value>"),
    key("lr", "5e-4", "peak learning rate"),
    key("weight_decay", "0.05", "AdamW decay"),
    key("clip_norm", "3.0", "gradient clip"),
    key("warmup_steps", "100", "warmup steps"),
    key("total_steps", "2000", "optimization steps"),
    key("batch_size", "64", "examples per step"),
    key("ema_momentum", "0.995", "EMA momentum"),
];

enum Failure {
    Error(Error),
    Verify(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Error(e)
    }
}

type CmdResult = std::result::Result<(), Failure>;

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => EXIT_USAGE,
        _ => EXIT_DATA,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if cli.threads > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global() {
            warn!("could not size worker pool: {e}");
        }
    }
    let ctx = Ctx {
        data_dir: cli.data_dir.clone(),
    };
    match ctx.run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Error(e)) => {
            error!("{e}");
            ExitCode::from(exit_code(&e))
        }
        Err(Failure::Verify(msg)) => {
            error!("{msg}");
            ExitCode::from(EXIT_VERIFY)
        }
    }
}

struct Ctx {
    data_dir: Option<PathBuf>,
}

fn resolve_config(command: &str, schema: &[Key], common: &Common, flags: &[(&str, &Option<String>)]) -> Result<RunConfig, Error> {
    let mut cfg = RunConfig::new(command, schema);
    if let Some(path) = &common.config {
        cfg.apply_file(path)?;
    }
    for (name, value) in flags {
        if let Some(v) = value {
            cfg.set(name, v)?;
        }
    }
    for pair in &common.set {
        cfg.set_pair(pair)?;
    }
    info!("resolved config:\n{}", cfg.dump().trim_end());
    Ok(cfg)
}

fn list(raw: &str) -> Vec<&str> {
    raw.split(',').map(str::trim).filter(|s| !s.is_empty()).collect()
}

impl Ctx {
    fn path(&self, raw: &str) -> PathBuf {
        let p = PathBuf::from(raw);
        match &self.data_dir {
            Some(base) if p.is_relative() => base.join(p),
            _ => p,
        }
    }

    fn out_dir(&self, raw: &str) -> Result<PathBuf, Error> {
        let dir = self.path(raw);
        fs::create_dir_all(&dir).map_err(|e| Error::Io { path: dir.clone(), source: e })?;
        Ok(dir)
    }

    fn run(&self, command: Command) -> CmdResult {
        match command {
            Command::Calibrate {
                common,
                features,
                quantile,
                levels,
                out,
            } => {
                let cfg = resolve_config(
                    "calibrate",
                    CALIBRATE_KEYS,
                    &common,
                    &[("features", &features), ("quantile", &quantile), ("levels", &levels), ("out", &out)],
                )?;
                if common.dry_run {
                    return Ok(());
                }
                self.calibrate(&cfg)
            }
            Command::Quantize {
                common,
                spec,
                features,
                out_dir,
            } => {
                let cfg = resolve_config(
                    "quantize",
                    QUANTIZE_KEYS,
                    &common,
                    &[("spec", &spec), ("features", &features), ("out_dir", &out_dir)],
                )?;
                if common.dry_run {
                    return Ok(());
                }
                self.quantize(&cfg)
            }
            Command::Dequantize {
                common,
                spec,
                tokens,
                out,
            } => {
                let cfg = resolve_config(
                    "dequantize",
                    DEQUANTIZE_KEYS,
                    &common,
                    &[("spec", &spec), ("tokens", &tokens), ("out", &out)],
                )?;
                if common.dry_run {
                    return Ok(());
                }
                self.dequantize(&cfg)
            }
            Command::Train {
                common,
                corpus,
                out_dir,
                steps,
                seed,
            } => {
                let cfg = resolve_config(
                    "train",
                    TRAIN_KEYS,
                    &common,
                    &[("corpus", &corpus), ("out_dir", &out_dir), ("total_steps", &steps), ("seed", &seed)],
                )?;
                let (predictor, train) = train_configs(&cfg)?;
                if common.dry_run {
                    return Ok(());
                }
                self.train(&cfg, predictor, train)
            }
            Command::Sample {
                common,
                checkpoint,
                steps,
                count,
                class,
                guidance,
                seed,
                out_dir,
            } => {
                let cfg = resolve_config(
                    "sample",
                    SAMPLE_KEYS,
                    &common,
                    &[
                        ("checkpoint", &checkpoint),
                        ("steps", &steps),
                        ("count", &count),
                        ("class", &class),
                        ("guidance", &guidance),
                        ("seed", &seed),
                        ("out_dir", &out_dir),
                    ],
                )?;
                if common.dry_run {
                    return Ok(());
                }
                self.sample(&cfg)
            }
            Command::Verify { common, suite, seed } => {
                let cfg = resolve_config("verify", VERIFY_KEYS, &common, &[("suite", &suite), ("seed", &seed)])?;
                if common.dry_run {
                    return Ok(());
                }
                self.verify(&cfg)
            }
            Command::Ablate {
                common,
                subject,
                seed,
                out_dir,
            } => {
                let cfg = resolve_config(
                    "ablate",
                    ABLATE_KEYS,
                    &common,
                    &[("subject", &subject), ("seed", &seed), ("out_dir", &out_dir)],
                )?;
                if common.dry_run {
                    return Ok(());
                }
                self.ablate(&cfg)
            }
        }
    }

    fn calibrate(&self, cfg: &RunConfig) -> CmdResult {
        let mut corpus = Vec::new();
        for f in list(cfg.raw("features")?) {
            corpus.extend(read_features(&self.path(f))?);
        }
        let stats = calibrate(&corpus, cfg.get("quantile")?)?;
        let spec = QuantizerSpec::new(cfg.get("levels")?, stats)?;
        let out = self.path(cfg.raw("out")?);
        spec.save(&out)?;
        info!("wrote {} (L={}, d={}, {} tensors)", out.display(), spec.levels(), spec.d(), corpus.len());
        Ok(())
    }

    fn quantize(&self, cfg: &RunConfig) -> CmdResult {
        let spec = QuantizerSpec::load(&self.path(cfg.raw("spec")?))?;
        let input = self.path(cfg.raw("features")?);
        let tensors = read_features(&input)?;
        let dir = self.out_dir(cfg.raw("out_dir")?)?;
        let stem = input.file_stem().and_then(|s| s.to_str()).unwrap_or("features");
        for (k, z) in tensors.iter().enumerate() {
            let path = dir.join(format!("{stem}_{k:05}.cubq"));
            write_tokens(&path, &quantize(z, &spec)?)?;
        }
        info!("wrote {} token files to {}", tensors.len(), dir.display());
        Ok(())
    }

    fn dequantize(&self, cfg: &RunConfig) -> CmdResult {
        let spec = QuantizerSpec::load(&self.path(cfg.raw("spec")?))?;
        let features = list(cfg.raw("tokens")?)
            .into_iter()
            .map(|t| dequantize(&read_tokens(&self.path(t))?, &spec))
            .collect::<Result<Vec<_>, _>>()?;
        let out = self.path(cfg.raw("out")?);
        write_features(&out, &features)?;
        info!("wrote {} tensors to {}", features.len(), out.display());
        Ok(())
    }

    /// Training examples and the quantizer that dequantizes them.
    fn load_corpus(&self, cfg: &RunConfig, classes: usize, seed: u64) -> Result<(Vec<Example>, QuantizerSpec), Error> {
        let raw = cfg.raw("corpus")?;
        if raw == "toy" {
            let joint = ToyJoint::default_verification();
            let n = cfg.get("toy_samples")?;
            let mut rng = cubediff::rng::SeededRng::with_stream(seed, 10);
            let examples = if classes > 0 {
                let templates = joint.mixture().map_or(0, |m| m.templates.len());
                if classes < templates {
                    return Err(Error::Config(format!("toy corpus has {templates} classes, got classes = {classes}")));
                }
                synth_labeled(&joint, n, &mut rng)?
            } else {
                synth_corpus(&joint, n, &mut rng)?
                    .into_iter()
                    .map(|tokens| Example { tokens, class: None })
                    .collect()
            };
            return Ok((examples, toy_spec(&joint)));
        }
        let spec = QuantizerSpec::load(&self.path(cfg.raw("spec").map_err(|_| {
            Error::Config("spec is required for feature and token corpora".into())
        })?))?;
        let path = self.path(raw);
        let examples = if path.is_dir() {
            token_dir(&path, None)?
        } else {
            read_features(&path)?
                .iter()
                .map(|z| quantize(z, &spec).map(|tokens| Example { tokens, class: None }))
                .collect::<Result<Vec<_>, _>>()?
        };
        if examples.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        if examples.iter().any(|e| e.class.is_some_and(|c| c >= classes)) {
            return Err(Error::Config(format!("corpus labels exceed classes = {classes}")));
        }
        Ok((examples, spec))
    }

    fn train(&self, cfg: &RunConfig, mut predictor: PredictorConfig, train: TrainConfig) -> CmdResult {
        let (corpus, spec) = self.load_corpus(cfg, predictor.classes, train.seed)?;
        let first = &corpus[0].tokens;
        predictor.shape = first.shape();
        predictor.levels = first.levels();
        if corpus.iter().any(|e| e.tokens.shape() != predictor.shape || e.tokens.levels() != predictor.levels) {
            return Err(Error::ShapeMismatch("corpus tensors differ in shape or levels".into()).into());
        }
        predictor.validate()?;
        let dir = self.out_dir(cfg.raw("out_dir")?)?;
        fs::write(dir.join("config.resolved.txt"), cfg.dump()).map_err(|e| Error::io(&dir, e))?;

        let ckpt_path = dir.join("checkpoint.cbdk");
        let loss_path = dir.join("loss.csv");
        let mut ckpt = if cfg.get::<bool>("resume")? && ckpt_path.exists() {
            let c = load_checkpoint(&ckpt_path)?;
            if c.train != train || c.state.params.config() != &predictor || c.spec != spec {
                return Err(Error::Config(format!(
                    "{} was written with a different configuration; use a new out_dir or resume = false",
                    ckpt_path.display()
                ))
                .into());
            }
            info!("resuming from step {}", c.step());
            c
        } else {
            Checkpoint {
                state: TrainState::new(predictor, &train)?,
                train: train.clone(),
                spec,
            }
        };
        let mut log = open_loss_log(&loss_path, ckpt.step())?;
        let every: u64 = cfg.get("checkpoint_every")?;
        let log_every: u64 = cfg.get::<u64>("log_every")?.max(1);
        while ckpt.step() < train.total_steps {
            let report = match train_on_corpus(&corpus, &mut ckpt.state, &train, &ckpt.spec) {
                Ok(r) => r,
                Err(e) => {
                    log.flush().map_err(|e| Error::io(&loss_path, e))?;
                    error!("training aborted; last checkpoint kept at {}", ckpt_path.display());
                    return Err(e.into());
                }
            };
            writeln!(log, "{},{:.9},{:.9},{:.9e}", report.step, report.loss, report.grad_norm, report.lr)
                .map_err(|e| Error::io(&loss_path, e))?;
            if report.step % log_every == 0 {
                info!("step {} loss {:.5} grad_norm {:.4} lr {:.3e}", report.step, report.loss, report.grad_norm, report.lr);
            }
            if (every > 0 && report.step % every == 0) || report.step == train.total_steps {
                log.flush().map_err(|e| Error::io(&loss_path, e))?;
                save_checkpoint(&ckpt_path, &ckpt)?;
            }
        }
        log.flush().map_err(|e| Error::io(&loss_path, e))?;
        if !ckpt_path.exists() {
            save_checkpoint(&ckpt_path, &ckpt)?;
        }
        info!("done at step {}; checkpoint {}", ckpt.step(), ckpt_path.display());
        Ok(())
    }

    fn sample(&self, cfg: &RunConfig) -> CmdResult {
        let ckpt = load_checkpoint(&self.path(cfg.raw("checkpoint")?))?;
        let params = match cfg.raw("weights")? {
            "ema" => ckpt.state.ema,
            "raw" => ckpt.state.params,
            other => return Err(Error::Config(format!("weights must be ema or raw, got '{other}'")).into()),
        };
        let model = Predictor::new(params, ckpt.spec.clone())?;
        let seed: u64 = cfg.get("seed")?;
        let sc = SampleConfig {
            steps: cfg.get("steps")?,
            temperature: cfg.get("temperature")?,
            guidance: cfg.get("guidance")?,
            class_id: cfg.get_opt("class")?,
            seed,
            strategy: cfg.get("strategy")?,
            snapshots: false,
        };
        let count: usize = cfg.get("count")?;
        let dir = self.out_dir(cfg.raw("out_dir")?)?;
        let results = generate_batch(&model, &sc, count)?;
        fs::write(dir.join(format!("sample_s{seed}.config.txt")), cfg.dump()).map_err(|e| Error::io(&dir, e))?;
        for (idx, (q, traj)) in results.iter().enumerate() {
            let base = format!("sample_s{seed}_{idx}");
            write_tokens(&dir.join(format!("{base}.cubq")), q)?;
            write_features(&dir.join(format!("{base}.cubf")), &[dequantize(q, &ckpt.spec)?])?;
            traj.save_csv(&dir.join(format!("{base}_trajectory.csv")))?;
        }
        info!(
            "wrote {count} samples to {} ({} model calls each)",
            dir.display(),
            results.first().map_or(0, |(_, t)| t.model_calls)
        );
        Ok(())
    }

    fn verify(&self, cfg: &RunConfig) -> CmdResult {
        let suites: Vec<Suite> = match cfg.raw("suite")? {
            "all" => Suite::ALL.to_vec(),
            s => vec![s.parse()?],
        };
        let opts = VerifyOptions {
            seed: cfg.get("seed")?,
            quantizer_cases: cfg.get("quantizer_cases")?,
            oracle_samples: cfg.get("oracle_samples")?,
        };
        let mut failed = Vec::new();
        for suite in suites {
            let report = run_suite(suite, &opts)?;
            print!("{report}");
            failed.extend(report.checks.iter().filter(|c| !c.passed).map(|c| format!("{suite}/{}", c.name)));
        }
        if failed.is_empty() {
            println!("all checks passed");
            Ok(())
        } else {
            Err(Failure::Verify(format!("failed checks: {}", failed.join(", "))))
        }
    }

    fn ablate(&self, cfg: &RunConfig) -> CmdResult {
        let joint = ToyJoint::default_verification();
        let seed: u64 = cfg.get("seed")?;
        let protocol = Protocol {
            steps: cfg.get_opt("steps")?,
            samples: cfg.get("samples")?,
            eval_examples: cfg.get("eval_examples")?,
            ..Protocol::new(joint.clone(), seed)
        };
        let subject = match cfg.raw("subject")? {
            "oracle" => Subject::Oracle,
            "trained" => Subject::Train {
                predictor: PredictorConfig {
                    shape: joint.shape(),
                    levels: joint.levels(),
                    hidden: cfg.get("hidden")?,
                    blocks: cfg.get("blocks")?,
                    heads: cfg.get("heads")?,
                    mlp_ratio: cfg.get("mlp_ratio")?,
                    classes: 0,
                    mask_mode: cfg.get("mask_mode")?,
                },
                train: TrainConfig {
                    lr: cfg.get("lr")?,
                    weight_decay: cfg.get("weight_decay")?,
                    clip_norm: cfg.get("clip_norm")?,
                    warmup_steps: cfg.get("warmup_steps")?,
                    total_steps: cfg.get("total_steps")?,
                    batch_size: cfg.get("batch_size")?,
                    ema_momentum: cfg.get("ema_momentum")?,
                    seed,
                    ..TrainConfig::default()
                },
                corpus_size: cfg.get("corpus_size")?,
            },
            other => return Err(Error::Config(format!("subject must be oracle or trained, got '{other}'")).into()),
        };
        let strategies = list(cfg.raw("strategies")?)
            .into_iter()
            .map(str::parse::<MaskStrategy>)
            .collect::<Result<Vec<_>, _>>()?;
        let mut reports = Vec::new();
        for s in strategies {
            info!("running {s}");
            reports.push(run_ablation(s, &subject, &protocol)?);
        }
        let mut stdout = std::io::stdout();
        EvalReport::write_csv(&reports, &mut stdout).map_err(|e| Error::io(Path::new("<stdout>"), e))?;
        if cfg.is_set("out_dir") {
            let dir = self.out_dir(cfg.raw("out_dir")?)?;
            let csv = dir.join("ablation.csv");
            let jsonl = dir.join("ablation.jsonl");
            EvalReport::write_csv(&reports, &mut File::create(&csv).map_err(|e| Error::io(&csv, e))?)
                .map_err(|e| Error::io(&csv, e))?;
            EvalReport::write_jsonl(&reports, &mut File::create(&jsonl).map_err(|e| Error::io(&jsonl, e))?)
                .map_err(|e| Error::io(&jsonl, e))?;
            fs::write(dir.join("ablation.config.txt"), cfg.dump()).map_err(|e| Error::io(&dir, e))?;
        }
        Ok(())
    }
}

fn train_configs(cfg: &RunConfig) -> Result<(PredictorConfig, TrainConfig), Error> {
    let train = TrainConfig {
        lr: cfg.get("lr")?,
        weight_decay: cfg.get("weight_decay")?,
        clip_norm: cfg.get("clip_norm")?,
        warmup_steps: cfg.get("warmup_steps")?,
        total_steps: cfg.get("total_steps")?,
        batch_size: cfg.get("batch_size")?,
        ema_momentum: cfg.get("ema_momentum")?,
        sigma: cfg.get("sigma")?,
        cond_dropout: cfg.get("cond_dropout")?,
        beta1: cfg.get("beta1")?,
        beta2: cfg.get("beta2")?,
        eps: cfg.get("eps")?,
        strategy: cfg.get("strategy")?,
        seed: cfg.get("seed")?,
    };
    train.validate()?;
    // Shape and levels are filled in from the corpus.
    let predictor = PredictorConfig {
        shape: cubediff::Shape3::new(1, 1, 1)?,
        levels: 2,
        hidden: cfg.get("hidden")?,
        blocks: cfg.get("blocks")?,
        heads: cfg.get("heads")?,
        mlp_ratio: cfg.get("mlp_ratio")?,
        classes: cfg.get("classes")?,
        mask_mode: cfg.get::<MaskValueMode>("mask_mode")?,
    };
    predictor.validate()?;
    Ok((predictor, train))
}

/// Token files under `dir`; files inside an integer-named subdirectory get that class.
fn token_dir(dir: &Path, class: Option<usize>) -> Result<Vec<Example>, Error> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<_, _>>()?;
    entries.sort();
    let mut out = Vec::new();
    for path in entries {
        if path.is_dir() {
            if class.is_none() {
                if let Some(c) = path.file_name().and_then(|n| n.to_str()).and_then(|n| n.parse().ok()) {
                    out.extend(token_dir(&path, Some(c))?);
                }
            }
        } else if path.extension().is_some_and(|e| e == "cubq") {
            let tokens: TokenTensor = read_tokens(&path)?;
            out.push(Example { tokens, class });
        }
    }
    Ok(out)
}

/// Opens the loss log, keeping only rows up to `step` when resuming.
fn open_loss_log(path: &Path, step: u64) -> Result<std::io::BufWriter<File>, Error> {
    let mut kept = vec!["step,loss,grad_norm,lr".to_string()];
    if step > 0 {
        if let Ok(f) = File::open(path) {
            for line in BufReader::new(f).lines().skip(1) {
                let line = line.map_err(|e| Error::io(path, e))?;
                match line.split(',').next().and_then(|s| s.parse::<u64>().ok()) {
                    Some(s) if s <= step => kept.push(line),
                    _ => break,
                }
            }
        }
    }
    let mut w = std::io::BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
    for line in kept {
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(w)
}
