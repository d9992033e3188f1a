//! `refseg`: corpus generation, two-stage training, evaluation and prediction.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use refseg::baselines::{train_perword, Combine, PerWordModel};
use refseg::data::{load_manifest, Split};
use refseg::eval::{evaluate, model_scores, Method};
use refseg::fusion::decide;
use refseg::synth::{write_corpus, SynthConfig};
use refseg::text::Vocabulary;
use refseg::train::{train_stage, Init, LogEntry, Stage, TrainConfig};
use refseg::{pnm, Checkpoint, Error, ModelConfig, RunConfig};

#[derive(Parser)]
#[command(name = "refseg", version, about = "Segmentation from natural language expressions")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic corpus: images, masks, manifest.tsv and vocab.txt.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1000)]
        count: usize,
        /// Canvas as WxH.
        #[arg(long, default_value = "64x64")]
        size: String,
        /// Relative train:val:test sizes.
        #[arg(long, default_value = "8:1:1")]
        splits: String,
    },
    /// Run one training stage on the manifest's training split.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        stage: Stage,
        /// Checkpoint to start from (required for the high stage).
        #[arg(long)]
        init: Option<PathBuf>,
        /// Start the high stage from scratch with a bilinear deconvolution.
        #[arg(long)]
        fresh_deconv: bool,
        /// key=value run configuration.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Run log; defaults to `<out>.log`.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Train the per-word baseline.
    TrainPerword {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Stop words, one per line.
        #[arg(long)]
        stopwords: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Evaluate a model or a baseline and append a report record.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, conflicts_with = "baseline")]
        model: Option<PathBuf>,
        /// whole-image or perword:average|intersection|union
        #[arg(long)]
        baseline: Option<String>,
        /// Per-word checkpoint for `--baseline perword:MODE`.
        #[arg(long)]
        perword_model: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long)]
        report: PathBuf,
    },
    /// Segment one image and write the mask and a score heatmap.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        expression: String,
        #[arg(long)]
        out_mask: PathBuf,
        #[arg(long)]
        out_heatmap: Option<PathBuf>,
    },
}

/// Failure carrying the process exit code.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure { code: if e.is_numeric() { 3 } else { 2 }, message: e.to_string() }
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure { code: 2, message: message.into() }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn run(cmd: Command) -> Result<(), Failure> {
    match cmd {
        Command::GenData { out, seed, count, size, splits } => gen_data(&out, seed, count, &size, &splits),
        Command::Train { data, stage, init, fresh_deconv, config, out, seed, log } => {
            train(&data, stage, init.as_deref(), fresh_deconv, config.as_deref(), &out, seed, log)
        }
        Command::TrainPerword { data, config, stopwords, out, seed, log } => {
            perword(&data, config.as_deref(), stopwords.as_deref(), &out, seed, log)
        }
        Command::Eval { data, model, baseline, perword_model, split, report } => {
            eval(&data, model.as_deref(), baseline.as_deref(), perword_model.as_deref(), split, &report)
        }
        Command::Predict { model, image, expression, out_mask, out_heatmap } => {
            predict(&model, &image, &expression, &out_mask, out_heatmap.as_deref())
        }
    }
}

fn parse_size(s: &str) -> Result<(usize, usize), Failure> {
    let bad = || usage(format!("--size: expected WxH, got {s:?}"));
    let (w, h) = s.split_once('x').ok_or_else(bad)?;
    Ok((w.parse().map_err(|_| bad())?, h.parse().map_err(|_| bad())?))
}

fn parse_splits(s: &str) -> Result<[u32; 3], Failure> {
    let bad = || usage(format!("--splits: expected train:val:test, got {s:?}"));
    let parts: Vec<u32> = s.split(':').map(|p| p.parse().map_err(|_| bad())).collect::<Result<_, _>>()?;
    parts.try_into().map_err(|_| bad())
}

fn gen_data(out: &Path, seed: u64, count: usize, size: &str, splits: &str) -> Result<(), Failure> {
    let (width, height) = parse_size(size)?;
    let cfg = SynthConfig { seed, count, width, height, splits: parse_splits(splits)? };
    let summary = write_corpus(out, &cfg)?;
    println!("manifest={}", summary.manifest.display());
    println!("train={} val={} test={}", summary.counts[0], summary.counts[1], summary.counts[2]);
    println!("spatial_expressions={}", summary.spatial);
    println!("vocabulary={}", summary.vocabulary.join(" "));
    Ok(())
}

/// Loads `--config` (or defaults). Without an explicit image size the size of
/// the first training image is used, so a corpus whose size the backbone
/// stride does not divide is rejected up front.
fn run_config(config: Option<&Path>, base: Option<RunConfig>, data: &[refseg::Sample], seed: Option<u64>) -> Result<RunConfig, Failure> {
    let (mut cfg, sized) = match (config, base) {
        (Some(p), _) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::Io { path: p.to_path_buf(), source: e })?;
            let sized = text.lines().any(|l| {
                let k = l.split('=').next().unwrap_or("").trim();
                k == "image_width" || k == "image_height"
            });
            (RunConfig::parse(&text)?, sized)
        }
        (None, Some(b)) => (b, true),
        (None, None) => (RunConfig::default(), false),
    };
    if !sized {
        if let Some(s) = data.first() {
            (cfg.image_height, cfg.image_width) = s.extents();
        }
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn log_sink(path: PathBuf) -> Result<impl FnMut(LogEntry), Failure> {
    let mut file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&path)
        .map_err(|e| Error::Io { path: path.clone(), source: e })?;
    Ok(move |e: LogEntry| {
        let line = format!("iteration={} loss={:.6} elapsed_s={:.3}", e.iteration, e.loss, e.elapsed.as_secs_f64());
        eprintln!("{line}");
        let _ = writeln!(file, "{line}");
    })
}

fn default_log(out: &Path, log: Option<PathBuf>) -> PathBuf {
    log.unwrap_or_else(|| {
        let mut p = out.as_os_str().to_owned();
        p.push(".log");
        PathBuf::from(p)
    })
}

#[allow(clippy::too_many_arguments)]
fn train(
    data: &Path,
    stage: Stage,
    init: Option<&Path>,
    fresh_deconv: bool,
    config: Option<&Path>,
    out: &Path,
    seed: Option<u64>,
    log: Option<PathBuf>,
) -> Result<(), Failure> {
    if stage == Stage::High && init.is_none() && !fresh_deconv {
        return Err(usage("--stage high needs --init <low-stage checkpoint> (or --fresh-deconv)"));
    }
    if stage == Stage::Low && fresh_deconv {
        return Err(usage("--fresh-deconv only applies to --stage high"));
    }
    let samples = load_manifest(data, Some(Split::Train))?;
    let ckpt = init.map(Checkpoint::load).transpose()?;
    let cfg = run_config(config, ckpt.as_ref().map(|c| c.config.clone()), &samples, seed)?;
    let start = match &ckpt {
        Some(c) => Init::From(c.to_model()?),
        None => {
            let vocab_path = data.parent().unwrap_or(Path::new(".")).join("vocab.txt");
            let vocab = if vocab_path.exists() {
                Vocabulary::load(&vocab_path)?
            } else {
                Vocabulary::build(samples.iter().map(|s| s.expression.as_str()))
            };
            Init::Fresh { config: ModelConfig::from(&cfg), vocab }
        }
    };
    let tc = TrainConfig::from_run(&cfg, stage)?;
    let mut sink = log_sink(default_log(out, log))?;
    let outcome = train_stage(&samples, &tc, start, &mut sink)?;
    let iteration = ckpt.map_or(0, |c| c.iteration) + tc.iterations;
    Checkpoint::from_model(&outcome.model, &cfg, iteration).save(out)?;
    println!("wrote {} ({} stage, {} iterations)", out.display(), stage, tc.iterations);
    Ok(())
}

fn perword(data: &Path, config: Option<&Path>, stopwords: Option<&Path>, out: &Path, seed: Option<u64>, log: Option<PathBuf>) -> Result<(), Failure> {
    let samples = load_manifest(data, Some(Split::Train))?;
    let mut cfg = run_config(config, None, &samples, seed)?;
    if let Some(p) = stopwords {
        let text = std::fs::read_to_string(p).map_err(|e| Error::Io { path: p.to_path_buf(), source: e })?;
        cfg.perword_stopwords = refseg::baselines::parse_stopwords(&text);
    }
    let mut sink = log_sink(default_log(out, log))?;
    let outcome = train_perword(&samples, &cfg, &mut sink)?;
    outcome.model.to_checkpoint(&cfg, cfg.perword.iterations)?.save(out)?;
    println!("wrote {} ({} words)", out.display(), outcome.model.words.len());
    Ok(())
}

fn eval(
    data: &Path,
    model: Option<&Path>,
    baseline: Option<&str>,
    perword_model: Option<&Path>,
    split: Split,
    report: &Path,
) -> Result<(), Failure> {
    let samples = load_manifest(data, Some(split))?;
    let seg;
    let pw;
    let (method, size) = match (model, baseline) {
        (Some(p), None) => {
            let c = Checkpoint::load(p)?;
            seg = c.to_model()?;
            (Method::Model(&seg), c.config.image_size())
        }
        (None, Some("whole-image")) => (Method::WholeImage, (0, 0)),
        (None, Some(b)) => {
            let mode: Combine = b
                .strip_prefix("perword:")
                .ok_or_else(|| usage(format!("unknown baseline {b:?}; expected whole-image or perword:MODE")))?
                .parse()?;
            let p = perword_model.ok_or_else(|| usage("--baseline perword:MODE needs --perword-model <checkpoint>"))?;
            let c = Checkpoint::load(p)?;
            pw = PerWordModel::from_checkpoint(&c)?;
            (Method::PerWord(&pw, mode), c.config.image_size())
        }
        _ => return Err(usage("select exactly one of --model or --baseline")),
    };
    let r = evaluate(method, &samples, size)?;
    let mut file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(report)
        .map_err(|e| Error::Io { path: report.to_path_buf(), source: e })?;
    let empty = file.metadata().map(|m| m.len() == 0).unwrap_or(true);
    let text = if empty { r.to_string() } else { format!("\n{r}") };
    file.write_all(text.as_bytes()).map_err(|e| Error::Io { path: report.to_path_buf(), source: e })?;
    print!("{r}");
    Ok(())
}

fn predict(model: &Path, image: &Path, expression: &str, out_mask: &Path, out_heatmap: Option<&Path>) -> Result<(), Failure> {
    let c = Checkpoint::load(model)?;
    let m = c.to_model()?;
    let img = pnm::read_ppm_file(image)?;
    let scores = model_scores(&m, &img, expression, c.config.image_size())?;
    let mask = decide(&scores)?;
    pnm::write_file(out_mask, &pnm::from_mask(&mask))?;
    if let Some(p) = out_heatmap {
        let (h, w) = mask.extents();
        pnm::write_file(p, &pnm::heatmap(scores.data(), h, w)?)?;
    }
    println!("foreground_pixels={} of {}", mask.count(), mask.bits().len());
    Ok(())
}
