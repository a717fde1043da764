use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use swifter_core::bench::{
    bench_decode, emit_report, parse_csv, synthetic_features, BenchConfig, BenchMeta, BenchReport,
    DecodeMode, ReportFormat,
};
use swifter_core::captioning::{beam_search, greedy_decode, Vocabulary};
use swifter_core::checkpoint;
use swifter_core::fusion::FusionConfig;
use swifter_core::model::{Swifter, SwifterConfig};
use swifter_core::training::shapeworld::{template_words, IMAGE_LEN, IMAGE_SIZE, CHANNELS};
use swifter_core::training::{
    examples_from_samples, gen_shape_world, load_dataset, render_sample, sample_seed, save_dataset,
    train_loop, write_log_csv, LossMode, OptimizerKind, TrainingConfig,
};
use swifter_core::Tensor;

#[derive(Parser)]
#[command(name = "swifter", version, about = "Lightweight image captioning with Fourier mixing and retention")]
struct Cli {
    /// Seed for data generation, initialization and sampling.
    #[arg(long, global = true, env = "SWIFTER_SEED", default_value_t = 42)]
    seed: u64,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic shape-world dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        count: usize,
    },
    /// Train a captioner and write a checkpoint.
    Train(TrainArgs),
    /// Caption one image with a trained checkpoint.
    Caption(CaptionArgs),
    /// Measure decode FLOPs, time and state size across caption lengths.
    Bench(BenchArgs),
    /// Render a bench CSV as an SVG chart.
    Report {
        #[arg(long)]
        csv: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(clap::Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Per-step loss log (CSV).
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Mode::Xe)]
    mode: Mode,
    /// Checkpoint to start from; required for SCST.
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long, value_enum)]
    optimizer: Option<Opt>,
    #[arg(long)]
    target_accuracy: Option<f64>,
    #[arg(long)]
    eval_every: Option<usize>,
    #[arg(long)]
    samples: Option<usize>,
}

#[derive(clap::Args)]
struct CaptionArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Index of a dataset sample.
    #[arg(long, conflicts_with = "input", required_unless_present = "input")]
    sample: Option<u64>,
    /// Dataset to read the sample from; by default it is regenerated from the checkpoint's data seed.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Raw little-endian f32 image file of 3x32x32 values.
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    beam: usize,
    #[arg(long, default_value_t = 16)]
    max_len: usize,
}

#[derive(clap::Args)]
struct BenchArgs {
    #[arg(long, value_enum, default_value_t = BenchMode::Both)]
    mode: BenchMode,
    #[arg(long, value_delimiter = ',', default_value = "8,16,32,64")]
    lens: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "1")]
    batch: Vec<usize>,
    #[arg(long, default_value_t = 3)]
    repeats: usize,
    #[arg(long)]
    out: PathBuf,
    /// Output format; inferred from the file extension when omitted.
    #[arg(long, value_enum)]
    format: Option<Format>,
    #[arg(long, value_enum, default_value_t = Preset::Desk)]
    config: Preset,
    /// Benchmark a trained checkpoint instead of a freshly initialized model.
    #[arg(long, conflicts_with = "config")]
    ckpt: Option<PathBuf>,
    /// Decode the streams of a batch on worker threads.
    #[arg(long)]
    parallel: bool,
    #[arg(long, default_value_t = BenchConfig::default().flop_budget)]
    budget: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Xe,
    Scst,
}

#[derive(Clone, Copy, ValueEnum)]
enum Opt {
    Sgd,
    Adam,
}

#[derive(Clone, Copy, ValueEnum)]
enum BenchMode {
    Recurrent,
    Stateless,
    Both,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Svg,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    /// Desk backbone and 2+2 fusion layers on shape-world images.
    Desk,
    /// 3+3 fusion layers, H=96, V=10000, on 49 synthetic feature rows.
    Small,
}

const SMALL_MEMORY_ROWS: usize = 49;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { out, count } => gen_data(&out, count, cli.seed),
        Command::Train(a) => train(a, cli.seed),
        Command::Caption(a) => caption(a),
        Command::Bench(a) => bench(a, cli.seed),
        Command::Report { csv, out } => report(&csv, &out),
    }
}

fn gen_data(out: &Path, count: usize, seed: u64) -> Result<()> {
    let samples = gen_shape_world(count, seed)?;
    save_dataset(out, seed, &samples)?;
    println!("wrote {count} samples to {}", out.display());
    Ok(())
}

fn vocab_from_meta(meta: &serde_json::Value) -> Result<Vocabulary> {
    let text = meta["vocab"]
        .as_str()
        .context("checkpoint has no vocabulary")?;
    Ok(Vocabulary::from_file_string(text)?)
}

fn train(a: TrainArgs, seed: u64) -> Result<()> {
    let (manifest, samples) = load_dataset(&a.data)
        .with_context(|| format!("loading dataset from {}", a.data.display()))?;
    let (mut model, vocab) = match &a.init {
        Some(p) => {
            let (m, meta) = checkpoint::load(p).with_context(|| format!("loading {}", p.display()))?;
            let v = vocab_from_meta(&meta)?;
            (m, v)
        }
        None => {
            if matches!(a.mode, Mode::Scst) {
                bail!("--mode scst needs --init <checkpoint>");
            }
            let vocab = Vocabulary::build(&template_words(), 1)?;
            (Swifter::new(SwifterConfig::desk(vocab.len()), seed)?, vocab)
        }
    };
    let d = TrainingConfig::default();
    let cfg = TrainingConfig {
        lr: a.lr.unwrap_or(d.lr),
        steps: a.steps.unwrap_or(d.steps),
        batch: a.batch.unwrap_or(d.batch),
        seed,
        mode: match a.mode {
            Mode::Xe => LossMode::Xe,
            Mode::Scst => LossMode::Scst,
        },
        scst_samples: a.samples.unwrap_or(d.scst_samples),
        optimizer: match a.optimizer {
            Some(Opt::Adam) => OptimizerKind::Adam,
            Some(Opt::Sgd) => OptimizerKind::Sgd,
            None => d.optimizer,
        },
        target_accuracy: a.target_accuracy,
        eval_every: a.eval_every.unwrap_or(d.eval_every),
        max_len: d.max_len,
    };
    let examples = examples_from_samples(&samples, &vocab);
    let rep = train_loop(&mut model, &examples, &cfg)?;
    model.store.round_to_f32();
    let meta = json!({
        "vocab": vocab.to_file_string(),
        "data_seed": manifest.seed,
        "data_count": manifest.count,
        "training": cfg,
        "steps_run": rep.steps_run,
    });
    let n = checkpoint::save(&model, &meta, &a.out)?;
    if let Some(p) = &a.log {
        let f = fs::File::create(p).with_context(|| format!("creating {}", p.display()))?;
        write_log_csv(std::io::BufWriter::new(f), &rep.log)?;
    }
    let last = rep.log.last().map_or(f64::NAN, |r| r.loss);
    print!("{} steps, final loss {last:.6}", rep.steps_run);
    if let Some(acc) = rep.accuracy {
        print!(", token accuracy {acc:.4}");
    }
    println!(", {n} parameters saved to {}", a.out.display());
    Ok(())
}

fn read_raw_image(p: &Path) -> Result<Tensor> {
    let bytes = fs::read(p).with_context(|| format!("reading {}", p.display()))?;
    if bytes.len() != 4 * IMAGE_LEN {
        bail!("{} holds {} bytes, expected {}", p.display(), bytes.len(), 4 * IMAGE_LEN);
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    Ok(Tensor::new(&[CHANNELS, IMAGE_SIZE, IMAGE_SIZE], data)?)
}

fn caption(a: CaptionArgs) -> Result<()> {
    let (model, meta) = checkpoint::load(&a.ckpt).with_context(|| format!("loading {}", a.ckpt.display()))?;
    let vocab = vocab_from_meta(&meta)?;
    let image = match (a.sample, &a.input) {
        (_, Some(p)) => read_raw_image(p)?,
        (Some(i), None) => match &a.data {
            Some(dir) => {
                let (_, samples) = load_dataset(dir)?;
                samples
                    .get(i as usize)
                    .with_context(|| format!("sample {i} out of range (dataset has {})", samples.len()))?
                    .image
                    .clone()
            }
            None => {
                let seed = meta["data_seed"].as_u64().context("checkpoint has no data seed")?;
                render_sample(sample_seed(seed, i)).image
            }
        },
        (None, None) => unreachable!("clap requires --sample or --input"),
    };
    let tokens = if a.beam > 1 {
        beam_search(&model, &image, a.beam, a.max_len, 0.0)?
            .into_iter()
            .next()
            .context("beam search returned no hypotheses")?
            .tokens
    } else {
        greedy_decode(&model, &image, a.max_len)?.tokens
    };
    println!("{}", vocab.detokenize(&tokens));
    Ok(())
}

fn bench_model(a: &BenchArgs, seed: u64) -> Result<(Swifter, Tensor)> {
    if let Some(p) = &a.ckpt {
        let (m, meta) = checkpoint::load(p)?;
        let input = match m.cfg.backbone {
            Some(_) => render_sample(sample_seed(meta["data_seed"].as_u64().unwrap_or(seed), 0)).image,
            None => synthetic_features(SMALL_MEMORY_ROWS, m.cfg.fusion.d_m, seed),
        };
        return Ok((m, input));
    }
    match a.config {
        Preset::Desk => {
            let vocab = Vocabulary::build(&template_words(), 1)?;
            let m = Swifter::new(SwifterConfig::desk(vocab.len()), seed)?;
            Ok((m, render_sample(sample_seed(seed, 0)).image))
        }
        Preset::Small => {
            let cfg = SwifterConfig {
                backbone: None,
                fusion: FusionConfig::small(),
            };
            let x = synthetic_features(SMALL_MEMORY_ROWS, cfg.fusion.d_m, seed);
            Ok((Swifter::new(cfg, seed)?, x))
        }
    }
}

fn format_for(path: &Path, f: Option<Format>) -> ReportFormat {
    match f {
        Some(Format::Csv) => ReportFormat::Csv,
        Some(Format::Svg) => ReportFormat::Svg,
        None if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("svg")) => ReportFormat::Svg,
        None => ReportFormat::Csv,
    }
}

fn timestamp() -> String {
    let secs = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    secs.to_string()
}

fn bench(a: BenchArgs, seed: u64) -> Result<()> {
    let (model, input) = bench_model(&a, seed)?;
    let modes = match a.mode {
        BenchMode::Recurrent => vec![DecodeMode::Recurrent],
        BenchMode::Stateless => vec![DecodeMode::Stateless],
        BenchMode::Both => vec![DecodeMode::Recurrent, DecodeMode::Stateless],
    };
    let cfg = BenchConfig {
        repeats: a.repeats,
        parallel: a.parallel,
        flop_budget: a.budget,
    };
    let mut rep = bench_decode(&model, &[input], &modes, &a.lens, &a.batch, &cfg, seed)?;
    rep.meta.timestamp = timestamp();
    emit_report(&rep, format_for(&a.out, a.format), &a.out)?;
    println!("wrote {} rows to {}", rep.rows.len(), a.out.display());
    Ok(())
}

fn report(csv: &Path, out: &Path) -> Result<()> {
    let text = fs::read_to_string(csv).with_context(|| format!("reading {}", csv.display()))?;
    let rows = parse_csv(&text)?;
    let mut sidecar = csv.as_os_str().to_owned();
    sidecar.push(".meta.json");
    let meta: BenchMeta = match fs::read_to_string(&sidecar) {
        Ok(s) => serde_json::from_str(&s)?,
        Err(_) => BenchMeta {
            config_hash: String::new(),
            seed: 0,
            timestamp: String::new(),
            parallel: false,
            repeats: 0,
        },
    };
    emit_report(&BenchReport { rows, meta }, ReportFormat::Svg, out)?;
    println!("wrote {}", out.display());
    Ok(())
}
