//! `carrot-cure`: synthesise, augment, train, evaluate, predict, serve and
//! compare.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 runtime or
//! training error.

use std::fmt::Write as _;
use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use carrot_core::augment::{expand_dataset, AugmentConfig};
use carrot_core::dataset::{generate_synthetic, scan_dataset, split_stratified, write_dataset, LabeledImage};
use carrot_core::eval::{render_report, EvaluationReport, ReportFormat};
use carrot_core::image::{decode_image, INPUT_SIZE};
use carrot_core::model::{load_model, proposed_spec, save_model, variant_spec, Model, ModelError, ModelSpec, VARIANTS};
use carrot_core::nn::OptimizerKind;
use carrot_core::train::{fit, history_to_csv, predicted_classes, TrainConfig, TrainError};
use carrot_serve::{load_remedy_kb, predict_image, AppState, RemedyTable};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "carrot-cure", version, about = "Carrot disease classifier pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a procedural corpus in the class-directory layout.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 100)]
        per_class: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Side length of the generated square images.
        #[arg(long, default_value_t = INPUT_SIZE)]
        size: usize,
    },
    /// Write every image of a corpus plus K augmented copies of each.
    Augment {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        copies: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train one architecture and save the best checkpoint.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// 1 to 5, or "proposed".
        #[arg(long, default_value = "proposed")]
        model: String,
        #[command(flatten)]
        opts: TrainOpts,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        history: Option<PathBuf>,
    },
    /// Classify every image of a corpus and report the metrics.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value = "text")]
        format: ReportFormat,
    },
    /// Classify one image and print the prediction with its remedy as JSON.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Remedy file; the bundled placeholder table when omitted.
        #[arg(long)]
        kb: Option<PathBuf>,
    },
    /// Run the HTTP service.
    Serve {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        kb: Option<PathBuf>,
        #[arg(long, default_value = "127.0.0.1:8080")]
        bind: SocketAddr,
        /// Directory holding the web bundle served at `/`.
        #[arg(long)]
        static_dir: Option<PathBuf>,
    },
    /// Train all five comparison architectures and tabulate validation accuracy.
    Compare {
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        opts: TrainOpts,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct TrainOpts {
    #[arg(long, default_value_t = 50)]
    epochs: usize,
    #[arg(long, default_value_t = 32)]
    batch: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f32,
    #[arg(long, default_value = "adam")]
    optimizer: OptimizerKind,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.2)]
    val_fraction: f64,
    /// Epochs without validation improvement before stopping.
    #[arg(long, default_value_t = 10)]
    patience: usize,
    #[arg(long)]
    no_early_stop: bool,
    #[arg(long)]
    no_augment: bool,
    /// Expand the training split once with this many augmented copies per
    /// image instead of augmenting every epoch.
    #[arg(long, default_value_t = 0)]
    pre_expand: usize,
}

impl TrainOpts {
    fn config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch,
            optimizer: self.optimizer,
            learning_rate: self.lr,
            val_fraction: self.val_fraction,
            augment: (!self.no_augment).then(AugmentConfig::default),
            pre_expand_copies: self.pre_expand,
            seed: self.seed,
            early_stop_patience: (!self.no_early_stop).then_some(self.patience),
            ..TrainConfig::default()
        }
    }
}

enum Failure {
    Usage(String),
    Data(String),
    Runtime(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Data(_) => 2,
            Failure::Runtime(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Data(m) | Failure::Runtime(m) => m,
        }
    }
}

fn data<E: std::fmt::Display>(e: E) -> Failure {
    Failure::Data(e.to_string())
}

fn runtime<E: std::fmt::Display>(e: E) -> Failure {
    Failure::Runtime(e.to_string())
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), Failure> {
    fs::write(path, contents).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))
}

fn read_model(path: &Path) -> Result<Model, Failure> {
    load_model(path).map_err(|e| match e {
        ModelError::Io { .. } => data(e),
        other => Failure::Data(format!("{}: {other}", path.display())),
    })
}

fn read_kb(path: Option<&Path>) -> Result<RemedyTable, Failure> {
    match path {
        Some(p) => load_remedy_kb(p).map_err(|e| Failure::Data(format!("{}: {e}", p.display()))),
        None => Ok(RemedyTable::builtin()),
    }
}

fn read_corpus(dir: &Path) -> Result<Vec<LabeledImage>, Failure> {
    let report = scan_dataset(dir).map_err(data)?;
    for w in &report.warnings {
        log::warn!("{w}");
    }
    if report.items.is_empty() {
        return Err(Failure::Data(format!("{}: no images found", dir.display())));
    }
    Ok(report.items)
}

fn model_spec(name: &str) -> Result<ModelSpec, Failure> {
    if name == "proposed" {
        return Ok(proposed_spec());
    }
    name.parse::<usize>()
        .ok()
        .and_then(|k| variant_spec(k).ok())
        .ok_or_else(|| Failure::Usage(format!("--model must be 1..5 or 'proposed', got '{name}'")))
}

fn train_error(e: TrainError) -> Failure {
    match e {
        TrainError::Config(m) => Failure::Usage(m),
        TrainError::Data(m) => Failure::Data(m),
        other => runtime(other),
    }
}

fn train_split(
    spec: ModelSpec,
    items: &[LabeledImage],
    cfg: &TrainConfig,
) -> Result<(Model, carrot_core::train::TrainHistory), Failure> {
    cfg.validate().map_err(train_error)?;
    let split = split_stratified(items, cfg.val_fraction, cfg.seed).map_err(data)?;
    log::info!("training {} on {} images, validating on {}", spec.name, split.train.len(), split.validation.len());
    fit(spec, &split, cfg).map_err(train_error)
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Synth { out, per_class, seed, size } => {
            let items = generate_synthetic(per_class, size, seed).map_err(|e| Failure::Usage(e.to_string()))?;
            let written = write_dataset(&out, &items).map_err(runtime)?;
            log::info!("wrote {} images to {}", written.len(), out.display());
        }
        Command::Augment { input, out, copies, seed } => {
            let items = read_corpus(&input)?;
            let cfg = AugmentConfig { seed, ..AugmentConfig::default() };
            let expanded = expand_dataset(&items, &cfg, copies).map_err(runtime)?;
            let written = write_dataset(&out, &expanded).map_err(runtime)?;
            log::info!("wrote {} images to {}", written.len(), out.display());
        }
        Command::Train { data: dir, model, opts, out, history } => {
            let spec = model_spec(&model)?;
            let items = read_corpus(&dir)?;
            let (trained, hist) = train_split(spec, &items, &opts.config())?;
            save_model(&trained, &out).map_err(runtime)?;
            if let Some(path) = history {
                write_file(&path, history_to_csv(&hist))?;
            }
            if let Some(best) = hist.best() {
                log::info!("kept epoch {} with validation accuracy {:.4}", best.epoch, best.val_acc);
            }
        }
        Command::Eval { data: dir, model, format } => {
            let model = read_model(&model)?;
            let items = read_corpus(&dir)?;
            let mut predicted = Vec::with_capacity(items.len());
            for chunk in items.chunks(32) {
                let images: Vec<_> = chunk.iter().map(|i| &i.image).collect();
                predicted.extend(predicted_classes(&model.classify(&images).map_err(runtime)?));
            }
            let truth: Vec<_> = items.iter().map(|i| i.label).collect();
            let report = EvaluationReport::from_labels(&truth, &predicted).map_err(runtime)?;
            print!("{}", render_report(&report.classes, report.overall_accuracy, format));
        }
        Command::Predict { model, image, kb } => {
            let model = read_model(&model)?;
            let kb = read_kb(kb.as_deref())?;
            let bytes = fs::read(&image).map_err(|e| Failure::Data(format!("{}: {e}", image.display())))?;
            decode_image(&bytes).map_err(|e| Failure::Data(format!("{}: {e}", image.display())))?;
            let prediction = predict_image(Some(&model), &kb, &bytes).map_err(runtime)?;
            println!("{}", serde_json::to_string_pretty(&prediction).expect("prediction serializes"));
        }
        Command::Serve { model, kb, bind, static_dir } => {
            let model = read_model(&model)?;
            let kb = read_kb(kb.as_deref())?;
            let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build().map_err(runtime)?;
            rt.block_on(carrot_serve::run(bind, AppState::new(Some(model), kb), static_dir)).map_err(runtime)?;
        }
        Command::Compare { data: dir, opts, out } => {
            let items = read_corpus(&dir)?;
            let cfg = opts.config();
            let mut csv = String::from("model,maxpool_layers,dense_layers,val_accuracy\n");
            for k in VARIANTS {
                let spec = variant_spec(k).map_err(runtime)?;
                let (name, pools, dense) = (spec.name.clone(), spec.maxpool_layers(), spec.dense_layers());
                let (_, hist) = train_split(spec, &items, &cfg)?;
                let acc = hist.best().map_or(0.0, |r| r.val_acc);
                log::info!("{name}: validation accuracy {acc:.4}");
                let _ = writeln!(csv, "{name},{pools},{dense},{acc:.6}");
            }
            write_file(&out, csv)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
