use std::path::PathBuf;
use std::process::ExitCode;

use candle_core::Device;
use clap::{Args, Parser, Subcommand};

use cliprec::checkpoint::load_student;
use cliprec::data::{synth_generate, Dataset, Image32, SynthSpec};
use cliprec::error::{Error, Result};
use cliprec::eval::{dump_predictions, EvalReport};
use cliprec::pretrain::{pretrain_and_save, PretrainSpec};
use cliprec::teacher::{Teacher, TeacherConfig, TeacherVariant};
use cliprec::trainer::{
    ensure_cache, render_table, run_table2, run_table3, TrainConfig, Trainer,
};

#[derive(Parser)]
#[command(name = "cliprec", about = "Scene text recognizer trained by CLIP distillation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a recognizer.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a labeled dataset.
    Evaluate(EvaluateArgs),
    /// Recognize individual images.
    Predict(PredictArgs),
    /// Precompute teacher features for a dataset.
    CacheTeacher(CacheTeacherArgs),
    /// Generate a synthetic labeled corpus.
    MakeSynth(MakeSynthArgs),
    /// Run the distillation ablation tables.
    Ablate(AblateArgs),
    /// Calibrate a synthetic teacher and write its weights.
    PretrainTeacher(PretrainArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// TOML training config; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Start from a built-in recipe instead of a file.
    #[arg(long, value_parser = ["desk", "paper"])]
    preset: Option<String>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    teacher: Option<PathBuf>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    distill_lambda: Option<f64>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Dataset name used in the report.
    #[arg(long, default_value = "eval")]
    name: String,
    /// Write per-sample predictions (id, prediction, label, hit) here.
    #[arg(long)]
    preds: Option<PathBuf>,
    /// Measure decoding speed over at least this many decodes (0 skips).
    #[arg(long, default_value_t = 0)]
    time: usize,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Image files to recognize.
    #[arg(required = true)]
    images: Vec<PathBuf>,
}

#[derive(Args)]
struct CacheTeacherArgs {
    #[arg(long)]
    teacher: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    cache_dir: PathBuf,
    #[arg(long, default_value = "vit-b-16", value_parser = parse_variant)]
    variant: TeacherVariant,
    #[arg(long, default_value_t = 25)]
    max_label_len: usize,
}

#[derive(Args)]
struct MakeSynthArgs {
    #[arg(long)]
    out: PathBuf,
    /// TOML synth spec; optional when count/seed are given.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long, default_value_t = 2000)]
    count: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// One word per line; overrides the built-in list.
    #[arg(long)]
    words_file: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    /// Base training config shared by every row.
    #[arg(long)]
    config: PathBuf,
    /// Which ablation: 2 (distillation terms) or 3 (consistency losses).
    #[arg(long, value_parser = ["table2", "table3"])]
    table: String,
    /// Comma-separated seeds; each row is averaged over them.
    #[arg(long, default_value = "1,2,3", value_delimiter = ',')]
    seeds: Vec<u64>,
}

#[derive(Args)]
struct PretrainArgs {
    /// Where to write the calibrated weights.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "vit-b-16", value_parser = parse_variant)]
    variant: TeacherVariant,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, default_value_t = 1500)]
    corpus: usize,
    #[arg(long, default_value_t = 40)]
    epochs: usize,
    #[arg(long, default_value_t = 25)]
    max_label_len: usize,
}

fn parse_variant(s: &str) -> std::result::Result<TeacherVariant, String> {
    match s {
        "vit-b-16" => Ok(TeacherVariant::VitB16),
        "vit-b-32" => Ok(TeacherVariant::VitB32),
        other => Err(format!("unknown variant {other:?} (vit-b-16 or vit-b-32)")),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let device = Device::Cpu;
    match cli.command {
        Command::Train(args) => train(args, &device),
        Command::Evaluate(args) => evaluate(args, &device),
        Command::Predict(args) => predict(args, &device),
        Command::CacheTeacher(args) => cache_teacher(args, &device),
        Command::MakeSynth(args) => make_synth(args),
        Command::Ablate(args) => ablate(args, &device),
        Command::PretrainTeacher(args) => pretrain(args, &device),
    }
}

fn train(args: TrainArgs, device: &Device) -> Result<()> {
    let mut cfg = match (&args.config, args.preset.as_deref()) {
        (Some(path), _) => TrainConfig::from_toml_file(path)?,
        (None, Some(preset)) => {
            let missing = |key: &str| Error::Config {
                key: key.into(),
                reason: "required with --preset".into(),
            };
            let data = args.data.clone().ok_or_else(|| missing("--data"))?;
            let out = args.out.clone().ok_or_else(|| missing("--out"))?;
            let teacher = args.teacher.clone().ok_or_else(|| missing("--teacher"))?;
            match preset {
                "paper" => TrainConfig::paper(data, out, teacher),
                _ => TrainConfig::desk(data, out, teacher),
            }
        }
        (None, None) => {
            return Err(Error::Config {
                key: "train".into(),
                reason: "pass --config or --preset".into(),
            })
        }
    };
    if let Some(v) = args.data {
        cfg.data_dir = v;
    }
    if let Some(v) = args.out {
        cfg.out_dir = v;
    }
    if let Some(v) = args.teacher {
        cfg.teacher_weights = v;
    }
    if let Some(v) = args.lr {
        cfg.lr = v;
    }
    if let Some(v) = args.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = args.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(v) = args.distill_lambda {
        cfg.distill_lambda = v;
    }
    cfg.validate()?;

    let mut trainer = Trainer::new(cfg, device)?;
    let outcome = trainer.train()?;
    println!("{}", serde_json::to_string_pretty(&outcome).expect("outcome serializes"));
    Ok(())
}

fn evaluate(args: EvaluateArgs, device: &Device) -> Result<()> {
    let (student, _meta) = load_student(&args.checkpoint, device)?;
    let dataset = Dataset::load_with_codec(&args.data, student.codec())?;
    if dataset.is_empty() {
        return Err(Error::DatasetEmpty(args.data.display().to_string()));
    }
    let mut ids = Vec::new();
    let mut preds = Vec::new();
    let mut gts = Vec::new();
    let n = dataset.len();
    let mut i = 0usize;
    while i < n {
        let end = (i + args.batch_size.max(1)).min(n);
        let imgs: Result<Vec<Image32>> = (i..end).map(|k| dataset.image(k)).collect();
        let batch = Image32::batch(&imgs?, device)?;
        preds.extend(student.recognize(&batch)?);
        for k in i..end {
            ids.push(dataset.entries[k].id.clone());
            gts.push(dataset.entries[k].label.clone());
        }
        i = end;
    }
    let mut report = EvalReport::from_pairs(&args.name, &preds, &gts)?;

    if args.time > 0 {
        let imgs: Result<Vec<Image32>> =
            (0..n.min(args.batch_size.max(1))).map(|k| dataset.image(k)).collect();
        let batch = Image32::batch(&imgs?, device)?;
        let per_round = batch.dims()[0];
        let rounds = args.time.div_ceil(per_round);
        let start = std::time::Instant::now();
        for _ in 0..rounds {
            let _ = student.recognize(&batch)?;
        }
        let total = start.elapsed().as_secs_f64() * 1000.0;
        report.ms_per_image = Some(total / (rounds * per_round) as f64);
    }

    if let Some(path) = &args.preds {
        dump_predictions(path, &ids, &preds, &gts)?;
    }
    println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
    Ok(())
}

fn predict(args: PredictArgs, device: &Device) -> Result<()> {
    let (student, _meta) = load_student(&args.checkpoint, device)?;
    for path in &args.images {
        let img = Image32::load_png(path)?;
        let batch = Image32::batch(&[img], device)?;
        let pred = student.recognize(&batch)?.remove(0);
        println!("{}\t{pred}", path.display());
    }
    Ok(())
}

fn cache_teacher(args: CacheTeacherArgs, device: &Device) -> Result<()> {
    let config = TeacherConfig {
        variant: args.variant,
        weights_path: args.teacher,
        cache_dir: Some(args.cache_dir.clone()),
        max_label_len: args.max_label_len,
    };
    let teacher = Teacher::load(config, device)?;
    let codec = cliprec::LabelCodec::new(args.max_label_len);
    let dataset = Dataset::load_with_codec(&args.data, &codec)?;
    if dataset.is_empty() {
        return Err(Error::DatasetEmpty(args.data.display().to_string()));
    }
    let written = ensure_cache(&teacher, &dataset, &args.cache_dir)?;
    println!("cached {written} new of {} samples", dataset.len());
    Ok(())
}

fn make_synth(args: MakeSynthArgs) -> Result<()> {
    let mut spec = match &args.spec {
        Some(path) => SynthSpec::from_toml_file(path)?,
        None => SynthSpec::with_defaults(args.count, args.seed),
    };
    if args.spec.is_none() {
        spec.count = args.count;
        spec.seed = args.seed;
    }
    if let Some(path) = &args.words_file {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        spec.words = text.split_whitespace().map(str::to_string).collect();
    }
    synth_generate(&spec, &args.out)?;
    println!("wrote {} images to {}", spec.count, args.out.display());
    Ok(())
}

fn ablate(args: AblateArgs, device: &Device) -> Result<()> {
    let base = TrainConfig::from_toml_file(&args.config)?;
    let make_teacher = |cfg: &TrainConfig| -> Result<Option<Teacher>> {
        if cfg.distill_lambda > 0.0 {
            Ok(Some(Teacher::load(cfg.teacher_config(), device)?))
        } else {
            Ok(None)
        }
    };
    let rows = match args.table.as_str() {
        "table2" => run_table2(&base, &make_teacher, &args.seeds, device)?,
        _ => run_table3(&base, &make_teacher, &args.seeds, device)?,
    };
    print!("{}", render_table(&args.table, &rows));
    let json_path = base.out_dir.join(format!("{}.json", args.table));
    std::fs::create_dir_all(&base.out_dir).map_err(|e| Error::io(&base.out_dir, e))?;
    std::fs::write(
        &json_path,
        serde_json::to_string_pretty(&rows).expect("rows serialize"),
    )
    .map_err(|e| Error::io(&json_path, e))?;
    Ok(())
}

fn pretrain(args: PretrainArgs, device: &Device) -> Result<()> {
    let config = TeacherConfig {
        variant: args.variant,
        weights_path: args.out.clone(),
        cache_dir: None,
        max_label_len: args.max_label_len,
    };
    let spec = PretrainSpec {
        seed: args.seed,
        corpus: args.corpus,
        epochs: args.epochs,
        ..PretrainSpec::default()
    };
    let report = pretrain_and_save(&config, &spec, device)?;
    println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
    Ok(())
}
