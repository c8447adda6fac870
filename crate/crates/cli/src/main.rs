use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use spectraldiff::dataset::{load_paired_dataset, Crop};
use spectraldiff::diffusion::PerturbationMode;
use spectraldiff::flops::model_report;
use spectraldiff::image_io::{load_png, save_png};
use spectraldiff::mask::{build_bank, load_bank, save_bank, GridSpec, StepOrdering};
use spectraldiff::metrics::evaluate_dirs;
use spectraldiff::nn::{load_checkpoint, Backbone, DenoiserConfig};
use spectraldiff::rain::{make_toy_dataset, ToyDatasetSpec};
use spectraldiff::sampler::{derain, SamplerConfig};
use spectraldiff::train::{train_loop, TrainConfig};
use spectraldiff::{Error, Result};

#[derive(Parser)]
#[command(name = "spectraldiff", version, about = "Spectral-mask diffusion deraining")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a mask bank and write it to disk.
    MakeMasks(MakeMasks),
    /// Write a synthetic paired dataset (clean/ and rainy/).
    SynthRain(SynthRain),
    /// Train a denoiser.
    Train(Train),
    /// Derain one image or every PNG in a directory.
    Derain(Derain),
    /// Compare predictions against ground truth.
    Eval(Eval),
    /// Print FLOPs for both backbones.
    FlopsReport(FlopsReport),
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Paper,
    Toy,
}

#[derive(Args)]
struct MakeMasks {
    #[arg(long, default_value_t = 64)]
    height: usize,
    #[arg(long, default_value_t = 64)]
    width: usize,
    /// Built-in parameter grid.
    #[arg(long, value_enum, default_value = "paper")]
    grid: Preset,
    /// JSON grid description; overrides --grid.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Shuffle step order with this seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SynthRain {
    #[arg(long)]
    out: PathBuf,
    /// JSON dataset description.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct Train {
    /// Directory with clean/ and rainy/ subdirectories.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    bank: PathBuf,
    /// Checkpoint to write.
    #[arg(long)]
    out: PathBuf,
    /// JSON training config.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    perturbation: Option<PerturbationMode>,
    #[arg(long, value_parser = parse_backbone)]
    backbone: Option<Backbone>,
    /// Number of diffusion steps D.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    loss_csv: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct Derain {
    /// Rainy PNG, or a directory of them.
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    bank: PathBuf,
    /// Number of sampling steps S.
    #[arg(long, default_value_t = 10)]
    steps: usize,
    #[arg(long, default_value_t = 1.0)]
    temperature: f64,
    /// Output PNG, or a directory when the input is one.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct Eval {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FlopsReport {
    #[arg(long, value_enum, default_value = "toy")]
    preset: Preset,
    /// JSON model config; overrides --preset.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    base_channels: Option<usize>,
    #[arg(long, default_value_t = 32)]
    height: usize,
    #[arg(long, default_value_t = 32)]
    width: usize,
    /// Also write per-layer rows here.
    #[arg(long)]
    csv: Option<PathBuf>,
}

fn parse_backbone(s: &str) -> std::result::Result<Backbone, String> {
    match s {
        "product" => Ok(Backbone::Product),
        "conv" => Ok(Backbone::Conv),
        _ => Err(format!("unknown backbone `{s}` (product, conv)")),
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(serde_json::from_str(&text)?)
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn make_masks(a: MakeMasks) -> Result<()> {
    let mut grid = match (&a.config, a.grid) {
        (Some(p), _) => read_json(p)?,
        (None, Preset::Paper) => GridSpec::paper(),
        (None, Preset::Toy) => GridSpec::toy(),
    };
    if let Some(seed) = a.seed {
        grid.ordering = StepOrdering::Shuffled { seed };
    }
    let bank = build_bank(a.height, a.width, &grid)?;
    save_bank(&bank, &a.out)?;
    println!("wrote {} masks at {}x{} to {}", bank.len(), a.height, a.width, a.out.display());
    Ok(())
}

fn synth_rain(a: SynthRain) -> Result<()> {
    let mut spec = match &a.config {
        Some(p) => read_json(p)?,
        None => ToyDatasetSpec::toy(256, 0),
    };
    spec.n_pairs = a.n.unwrap_or(spec.n_pairs);
    spec.height = a.height.unwrap_or(spec.height);
    spec.width = a.width.unwrap_or(spec.width);
    spec.seed = a.seed.unwrap_or(spec.seed);
    let manifest = make_toy_dataset(&spec, &a.out)?;
    println!("wrote {} pairs to {}", manifest.pairs.len(), a.out.display());
    Ok(())
}

fn train(a: Train) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => read_json(p)?,
        None => TrainConfig::default(),
    };
    cfg.iterations = a.iterations.unwrap_or(cfg.iterations);
    cfg.batch_size = a.batch_size.unwrap_or(cfg.batch_size);
    cfg.lr = a.lr.unwrap_or(cfg.lr);
    cfg.min_lr = cfg.min_lr.min(cfg.lr);
    cfg.perturbation = a.perturbation.unwrap_or(cfg.perturbation);
    cfg.model.backbone = a.backbone.unwrap_or(cfg.model.backbone);
    cfg.model.steps = a.steps.unwrap_or(cfg.model.steps);
    cfg.seed = a.seed.unwrap_or(cfg.seed);
    cfg.validate()?;
    let bank = load_bank(&a.bank)?;
    let data = load_paired_dataset(&a.data, Crop::None)?;
    let (model, report) = train_loop(&data, &bank, &cfg, &a.out, a.loss_csv.as_deref())?;
    let (head, tail) = report.head_tail_means(50);
    println!(
        "trained {} params for {} iterations in {:.1}s; loss {head:.4} -> {tail:.4}; wrote {}",
        model.num_params(),
        report.losses.len(),
        report.wall_clock_secs,
        a.out.display()
    );
    Ok(())
}

fn derain_cmd(a: Derain) -> Result<()> {
    let same = |x: &Path, y: &Path| match (x.canonicalize(), y.canonicalize()) {
        (Ok(x), Ok(y)) => x == y,
        _ => false,
    };
    if same(&a.input, &a.out) {
        return Err(Error::Config(format!(
            "refusing to overwrite the input {}",
            a.input.display()
        )));
    }
    let model = load_checkpoint(&a.ckpt)?;
    let bank = load_bank(&a.bank)?;
    let cfg = SamplerConfig {
        steps: a.steps,
        temperature: a.temperature,
    };
    let run = |input: &Path, output: &Path, seed: u64| -> Result<()> {
        let rainy = load_png(input)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let clean = derain(&rainy, &model, &bank, &cfg, &mut rng)?;
        save_png(&clean, output)
    };
    if a.input.is_dir() {
        fs::create_dir_all(&a.out).map_err(|e| Error::Io {
            path: a.out.clone(),
            source: e,
        })?;
        let mut names: Vec<PathBuf> = fs::read_dir(&a.input)
            .map_err(|e| Error::Io {
                path: a.input.clone(),
                source: e,
            })?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
            .collect();
        names.sort();
        names
            .par_iter()
            .enumerate()
            .map(|(i, p)| {
                let out = a.out.join(p.file_name().expect("file path"));
                // Per-image streams keep results independent of scheduling.
                run(p, &out, a.seed.wrapping_add(i as u64))
            })
            .collect::<Result<Vec<_>>>()?;
        println!("derained {} images into {}", names.len(), a.out.display());
    } else {
        run(&a.input, &a.out, a.seed)?;
        println!("wrote {}", a.out.display());
    }
    Ok(())
}

fn eval(a: Eval) -> Result<()> {
    let e = evaluate_dirs(&a.pred, &a.gt)?;
    write(&a.out, &e.to_csv())?;
    let m = e.mean();
    println!(
        "{} images: PSNR {:.3} dB, SSIM global {:.4}, SSIM windowed {:.4}",
        e.rows.len(),
        m.psnr_db,
        m.ssim_global,
        m.ssim_windowed
    );
    Ok(())
}

fn flops_report(a: FlopsReport) -> Result<()> {
    let mut cfg: DenoiserConfig = match (&a.config, a.preset) {
        (Some(p), _) => read_json(p)?,
        (None, Preset::Paper) => DenoiserConfig::paper(),
        (None, Preset::Toy) => DenoiserConfig::toy(),
    };
    cfg.base_channels = a.base_channels.unwrap_or(cfg.base_channels);
    let report = model_report(&cfg, a.height, a.width)?;
    print!("{}", report.to_table());
    if let Some(path) = &a.csv {
        write(path, &report.to_csv())?;
    }
    Ok(())
}

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var("SPECTRALDIFF_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|n| *n > 0)
            .ok_or_else(|| Error::Config(format!("SPECTRALDIFF_THREADS must be a positive integer, got `{v}`")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(e.to_string()))?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = configure_threads().and_then(|()| match cli.command {
        Command::MakeMasks(a) => make_masks(a),
        Command::SynthRain(a) => synth_rain(a),
        Command::Train(a) => train(a),
        Command::Derain(a) => derain_cmd(a),
        Command::Eval(a) => eval(a),
        Command::FlopsReport(a) => flops_report(a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
