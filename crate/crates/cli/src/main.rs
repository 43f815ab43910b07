use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{ArgGroup, Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use fmt_core::ablation::{ablate, AblationConfig};
use fmt_core::checkpoint::{load_checkpoint, save_checkpoint};
use fmt_core::data::{self, class_histogram, split, GenConfig, Record, SplitSpec};
use fmt_core::train::{predictions, train, TrainConfig};
use fmt_core::{build_mask, ConfusionCounts, FmtConfig, FmtError, FmtModel, MetricReport, Modality, ModalityTag, TaskKind};

#[derive(Parser)]
#[command(name = "fmt", version, about = "Multimodal transformer: data generation, training, evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic image+text dataset.
    GenData(GenArgs),
    /// Train a model and write a checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint and append a metric row to a report.
    Eval(EvalArgs),
    /// Train and evaluate every ablation arm on one shared split.
    Ablate(AblateArgs),
    /// Print an attention mask as an ASCII grid.
    MaskDemo(MaskArgs),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 200, value_parser = clap::value_parser!(u64).range(1..))]
    n: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.0, value_parser = non_negative)]
    noise: f64,
    #[arg(long, default_value_t = 0.0, value_parser = unit_half_open)]
    missing_rate: f64,
    #[arg(long, default_value_t = 32)]
    vocab: usize,
    #[arg(long, default_value_t = 8, value_parser = clap::value_parser!(u64).range(1..))]
    text_len: u64,
    #[arg(long, default_value_t = 2, value_parser = clap::value_parser!(u64).range(2..))]
    num_classes: u64,
    #[arg(long, default_value_t = 1.6)]
    text_signal: f64,
}

#[derive(Clone, Copy, ValueEnum)]
enum Part {
    All,
    Train,
    Test,
}

#[derive(Args)]
struct SplitArgs {
    /// Which partition of the 75/25 split to use.
    #[arg(long, value_enum, default_value = "all")]
    split: Part,
    #[arg(long, default_value_t = 0)]
    split_seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// JSON file with optional `model` and `train` sections.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    epochs: Option<u64>,
    #[arg(long, value_parser = non_negative)]
    lr: Option<f64>,
    #[arg(long, value_parser = unit_closed)]
    p_drop: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    batch_size: Option<u64>,
    #[arg(long, value_parser = non_negative)]
    aux_loss_weight: Option<f64>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    d_model: Option<u64>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    n_heads: Option<u64>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    n_layers: Option<u64>,
    #[command(flatten)]
    split: SplitArgs,
}

#[derive(Args)]
#[command(group(ArgGroup::new("drop").args(["drop_text", "drop_image"])))]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    report: PathBuf,
    #[arg(long)]
    drop_text: bool,
    #[arg(long)]
    drop_image: bool,
    /// Row label; defaults to the checkpoint file stem.
    #[arg(long)]
    name: Option<String>,
    /// Also write `id,label,prediction` lines here.
    #[arg(long)]
    predictions: Option<PathBuf>,
    #[command(flatten)]
    split: SplitArgs,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    epochs: Option<u64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum DropArg {
    Image,
    Text,
}

#[derive(Args)]
struct MaskArgs {
    #[arg(long, default_value_t = 1)]
    n_img: usize,
    #[arg(long, default_value_t = 2)]
    n_txt: usize,
    #[arg(long, value_parser = parse_task, default_value = "joint")]
    task: TaskKind,
    #[arg(long, value_enum)]
    drop: Option<DropArg>,
}

fn parse_task(s: &str) -> Result<TaskKind, String> {
    TaskKind::parse(s).ok_or_else(|| format!("unknown task `{s}` (expected joint, image-only or text-only)"))
}

fn parse_f64(s: &str) -> Result<f64, String> {
    s.parse::<f64>().map_err(|e| e.to_string())
}

fn non_negative(s: &str) -> Result<f64, String> {
    let v = parse_f64(s)?;
    if v >= 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(format!("{v} must be finite and >= 0"))
    }
}

fn unit_closed(s: &str) -> Result<f64, String> {
    let v = parse_f64(s)?;
    if (0.0..=1.0).contains(&v) {
        Ok(v)
    } else {
        Err(format!("{v} is outside [0, 1]"))
    }
}

fn unit_half_open(s: &str) -> Result<f64, String> {
    let v = parse_f64(s)?;
    if (0.0..1.0).contains(&v) {
        Ok(v)
    } else {
        Err(format!("{v} is outside [0, 1)"))
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    model: Option<FmtConfig>,
    train: Option<TrainConfig>,
}

type CliResult<T = ()> = Result<T, FmtError>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Ablate(a) => ablate_cmd(a),
        Command::MaskDemo(a) => {
            mask_demo(a);
            Ok(())
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn gen_data(a: GenArgs) -> CliResult {
    let cfg = GenConfig {
        n: a.n as usize,
        seed: a.seed,
        noise: a.noise,
        missing_rate: a.missing_rate,
        vocab: a.vocab,
        text_len: a.text_len as usize,
        num_classes: a.num_classes as usize,
        text_signal: a.text_signal,
    };
    let records = data::generate(&cfg)?;
    data::save(&records, &a.out)?;
    println!("records,{}", records.len());
    for (class, count) in class_histogram(&records, cfg.num_classes).iter().enumerate() {
        println!("class,{class},count,{count}");
    }
    Ok(())
}

fn select(records: Vec<Record>, args: &SplitArgs) -> CliResult<Vec<Record>> {
    Ok(match args.split {
        Part::All => records,
        Part::Train => split(&records, SplitSpec::new(args.split_seed))?.0,
        Part::Test => split(&records, SplitSpec::new(args.split_seed))?.1,
    })
}

/// Widens vocabulary, text length and class count so the model fits the data.
fn fit_to_data(mut cfg: FmtConfig, records: &[Record]) -> FmtConfig {
    for r in records {
        cfg.num_classes = cfg.num_classes.max(r.label + 1);
        if let Some(t) = &r.text {
            cfg.max_text_len = cfg.max_text_len.max(t.len());
            if let Some(&m) = t.iter().max() {
                cfg.vocab = cfg.vocab.max(m + 1);
            }
        }
    }
    cfg
}

fn train_cmd(a: TrainArgs) -> CliResult {
    let file: ConfigFile = match &a.config {
        Some(p) => serde_json::from_str(&fs::read_to_string(p)?)
            .map_err(|e| FmtError::Config(format!("{}: {e}", p.display())))?,
        None => ConfigFile::default(),
    };
    let mut tc = file.train.unwrap_or_default();
    if let Some(v) = a.epochs {
        tc.epochs = v as usize;
    }
    if let Some(v) = a.lr {
        tc.lr = v;
    }
    if let Some(v) = a.p_drop {
        tc.p_drop = v;
    }
    if let Some(v) = a.seed {
        tc.seed = v;
    }
    if let Some(v) = a.batch_size {
        tc.batch_size = v as usize;
    }
    if let Some(v) = a.aux_loss_weight {
        tc.aux_loss_weight = v;
    }
    let model_from_file = file.model.is_some();
    let mut mc = file.model.unwrap_or_else(FmtConfig::desk);
    if let Some(v) = a.d_model {
        mc.encoder.d_model = v as usize;
    }
    if let Some(v) = a.n_heads {
        mc.encoder.n_heads = v as usize;
    }
    if let Some(v) = a.n_layers {
        mc.encoder.n_layers = v as usize;
    }
    if a.seed.is_some() || !model_from_file {
        mc.init_seed = tc.seed;
    }
    let records = select(data::load(&a.data)?, &a.split)?;
    let mc = fit_to_data(mc, &records);
    let mut model = FmtModel::<f64>::new(mc)?;
    let outcome = train(&mut model, &records, &tc)?;
    for (i, loss) in outcome.epoch_losses.iter().enumerate() {
        println!("epoch,{},loss,{loss:.4}", i + 1);
    }
    save_checkpoint(&model, Some(&outcome.adam), &a.out)?;
    Ok(())
}

fn eval_cmd(a: EvalArgs) -> CliResult {
    let (model, _) = load_checkpoint::<f64>(&a.model)?;
    let records = select(data::load(&a.data)?, &a.split)?;
    for r in &records {
        model.check_record(r)?;
    }
    let forced = match (a.drop_text, a.drop_image) {
        (true, _) => Some(Modality::Text),
        (_, true) => Some(Modality::Image),
        _ => None,
    };
    let preds = predictions(&model, &records, forced)?;
    let counts = ConfusionCounts::from_pairs(preds.iter().copied().zip(records.iter().map(|r| r.label)));
    let name = a.name.unwrap_or_else(|| {
        let stem = a.model.file_stem().map_or("model".into(), |s| s.to_string_lossy().into_owned());
        match forced {
            Some(Modality::Text) => format!("{stem}-drop-text"),
            Some(Modality::Image) => format!("{stem}-drop-image"),
            None => stem,
        }
    });
    let report = MetricReport::from_counts(name, &counts)?;
    append_report(&a.report, &report)?;
    println!("{}", MetricReport::CSV_HEADER);
    println!("{}", report.csv_row());
    if let Some(path) = &a.predictions {
        let mut s = String::from("id,label,prediction\n");
        for (r, p) in records.iter().zip(&preds) {
            s.push_str(&format!("{},{},{p}\n", r.id, r.label));
        }
        fs::write(path, s)?;
    }
    Ok(())
}

fn append_report(path: &Path, report: &MetricReport) -> CliResult {
    let fresh = fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    if fresh {
        writeln!(f, "{}", MetricReport::CSV_HEADER)?;
    }
    writeln!(f, "{}", report.csv_row())?;
    Ok(())
}

fn ablate_cmd(a: AblateArgs) -> CliResult {
    let records = data::load(&a.data)?;
    let mut cfg = AblationConfig::desk(a.seed);
    cfg.model = fit_to_data(cfg.model, &records);
    if let Some(e) = a.epochs {
        cfg.train.epochs = e as usize;
    }
    let report = ablate(&records, &cfg)?;
    fs::write(&a.out, report.to_csv())?;
    print!("{}", report.to_table());
    Ok(())
}

fn mask_demo(a: MaskArgs) {
    let mut tags = vec![ModalityTag::ImageCls];
    tags.extend(std::iter::repeat_n(ModalityTag::Image, a.n_img));
    tags.push(ModalityTag::TextCls);
    tags.extend(std::iter::repeat_n(ModalityTag::Text, a.n_txt));
    let dropped = a.drop.map(|d| match d {
        DropArg::Image => Modality::Image,
        DropArg::Text => Modality::Text,
    });
    print!("{}", build_mask(&tags, a.task, dropped).render(&tags));
}
