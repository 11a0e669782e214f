use std::fs;
use std::path::{Path, PathBuf};

use cmer::data::{generate_synthetic, read_feature_file, write_feature_file, CmafError, UtteranceSample};
use cmer::model::{CheckpointError, ModelError};
use cmer::layers::LayerError;
use cmer::seed::derive_indexed;
use cmer::train::{
    evaluate, loso_run, model_gradient_check, session_split, train as fit, EvalReport, FoldOutcome, LosoOutcome,
    SessionReport, TrainError,
};
use cmer::{Checkpoint, EmotionLabel, Metrics, Model, ModelConfig};
use serde::Serialize;

use crate::config::RunConfig;
use crate::{CliError, EvalArgs, GenDataArgs, GradcheckArgs, TrainArgs};

type Result<T> = std::result::Result<T, CliError>;

fn runtime(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        let msg = e.to_string();
        match e {
            TrainError::EmptySplit(_) | TrainError::InvalidConfig(_) | TrainError::Protocol(_) => {
                CliError::Validation(msg)
            }
            TrainError::Model(ModelError::Input(_) | ModelError::Config(_))
            | TrainError::Model(ModelError::Layer(
                LayerError::DimMismatch { .. } | LayerError::InputTooShort { .. },
            )) => CliError::Validation(msg),
            _ => CliError::Runtime(msg),
        }
    }
}

fn read_data(path: &Path) -> Result<Vec<UtteranceSample>> {
    read_feature_file(path).map_err(|e| match e {
        CmafError::Io { .. } => CliError::Validation(e.to_string()),
        other => CliError::Validation(format!("{}: {other}", path.display())),
    })
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).map_err(|e| match e {
        CheckpointError::Io { .. } => CliError::Validation(e.to_string()),
        other => CliError::Validation(format!("{}: {other}", path.display())),
    })
}

fn check_dims(samples: &[UtteranceSample], cfg: &ModelConfig) -> Result<()> {
    if let Some(s) = samples
        .iter()
        .find(|s| s.audio.dim != cfg.audio_dim || s.text.dim != cfg.text_dim)
    {
        return Err(CliError::Validation(format!(
            "utterance {} has audio/text dims {}/{}, model expects {}/{}",
            s.id, s.audio.dim, s.text.dim, cfg.audio_dim, cfg.text_dim
        )));
    }
    Ok(())
}

fn counts(samples: &[UtteranceSample]) -> String {
    let mut out = String::from("class counts:");
    for label in EmotionLabel::ALL {
        out += &format!(" {label}={}", samples.iter().filter(|s| s.label == label).count());
    }
    out += "\nsession counts:";
    for session in 1..=5u8 {
        out += &format!(" {session}={}", samples.iter().filter(|s| s.session == session).count());
    }
    out
}

pub fn gen_data(args: GenDataArgs) -> Result<()> {
    let mut spec = RunConfig::load(args.config.as_deref())?.synthetic;
    if let Some(n) = args.samples {
        spec.samples = n;
    }
    if let Some(noise) = args.noise {
        spec.noise = noise;
    }
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    let samples = generate_synthetic(&spec).map_err(|e| CliError::Validation(e.to_string()))?;
    write_feature_file(&samples, &args.out).map_err(|e| CliError::Runtime(e.to_string()))?;
    println!("wrote {} utterances to {}", samples.len(), args.out.display());
    println!("{}", counts(&samples));
    Ok(())
}

fn print_metrics(m: &Metrics) {
    println!("  UA {:.4}  WA {:.4}  ({} samples)", m.unweighted_accuracy, m.weighted_accuracy, m.samples());
    println!("  confusion (rows true, columns predicted):");
    print!("  {:>8}", "");
    for l in EmotionLabel::ALL {
        print!(" {:>8}", l.name());
    }
    println!();
    for (l, row) in EmotionLabel::ALL.iter().zip(&m.confusion) {
        print!("  {:>8}", l.name());
        for v in row {
            print!(" {v:>8}");
        }
        println!();
    }
    for w in &m.warnings {
        eprintln!("warning: {w}");
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| runtime(path, e))
}

#[derive(Serialize)]
struct HistoryLine<'a> {
    session: u8,
    #[serde(flatten)]
    record: &'a cmer::train::EpochRecord,
}

pub fn train(args: TrainArgs) -> Result<()> {
    let mut cfg = RunConfig::load(args.config.as_deref())?;
    if let Some(mode) = args.mode {
        cfg.model.mode = mode;
    }
    cfg.train.freeze_encoders |= args.freeze_encoders;
    cfg.model.validate().map_err(|e| CliError::Validation(e.to_string()))?;
    cfg.train.validate()?;
    let samples = read_data(&args.data)?;
    check_dims(&samples, &cfg.model)?;

    let checkpoints = args.out_dir.join("checkpoints");
    fs::create_dir_all(&checkpoints).map_err(|e| runtime(&checkpoints, e))?;
    let protocol = match args.test_session {
        Some(k) => format!("test-session {k}"),
        None => "loso".to_string(),
    };
    let echo = format!(
        "# data = {:?}\n# protocol = {protocol}\n# seed = {}\n# jobs = {}\n\n{}",
        args.data.display().to_string(),
        args.seed,
        args.jobs,
        cfg.to_toml()
    );
    write(&args.out_dir.join("config.toml"), echo)?;

    let summary = Model::<f32>::new(cfg.model.clone(), args.seed).map_err(|e| CliError::Validation(e.to_string()))?;
    println!("model: {} mode, {} parameters", cfg.model.mode, summary.params.num_elements());
    for (name, size) in summary.component_sizes() {
        println!("  {name:<12} {size}");
    }
    println!("  cross-modal attention parameters: {}", summary.cma_parameter_count());

    let outcome = match args.test_session {
        None => loso_run::<f32>(&samples, &cfg.model, &cfg.train, &cfg.scheduler, args.seed, args.jobs as usize)?,
        Some(k) => {
            let (train_set, test_set) = session_split(&samples, k);
            let fold_seed = derive_indexed(args.seed, "fold", k as u64);
            let model = Model::<f32>::new(cfg.model.clone(), fold_seed).map_err(|e| CliError::Validation(e.to_string()))?;
            let out = fit(model, &train_set, &test_set, &cfg.train, &cfg.scheduler, fold_seed)?;
            let eval = evaluate(&out.model, &test_set, cfg.train.eval_batch_size)?;
            let report = SessionReport { session: k, metrics: eval.metrics, loss: eval.loss };
            LosoOutcome {
                report: EvalReport::from_sessions(vec![report.clone()]),
                folds: vec![FoldOutcome {
                    report,
                    predictions: eval.predictions,
                    history: out.history,
                    checkpoint: Some(out.checkpoint),
                }],
            }
        }
    };

    let mut history = String::new();
    for fold in &outcome.folds {
        let session = fold.report.session;
        if let Some(ckpt) = &fold.checkpoint {
            let path = checkpoints.join(format!("session{session}.cmck"));
            ckpt.save(&path).map_err(|e| runtime(&path, e))?;
        }
        for record in &fold.history {
            history += &serde_json::to_string(&HistoryLine { session, record }).expect("serializes");
            history.push('\n');
        }
        println!("session {session}:");
        print_metrics(&fold.report.metrics);
    }
    write(&args.out_dir.join("history.log"), history)?;
    let report = serde_json::to_string_pretty(&outcome.report).expect("serializes");
    write(&args.out_dir.join("report.json"), report + "\n")?;
    println!(
        "average over {} session(s): UA {:.4}  WA {:.4}",
        outcome.report.sessions.len(),
        outcome.report.average_unweighted_accuracy,
        outcome.report.average_weighted_accuracy
    );
    println!("run directory: {}", args.out_dir.display());
    Ok(())
}

#[derive(Serialize)]
struct EvalFile {
    checkpoint: String,
    test_session: Option<u8>,
    loss: f64,
    metrics: Metrics,
}

fn default_report(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("report.json")
}

pub fn eval(args: EvalArgs) -> Result<()> {
    if args.batch_size == 0 {
        return Err(CliError::Validation("batch size must be positive".into()));
    }
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let model: Model<f32> = ckpt
        .to_model()
        .map_err(|e| CliError::Validation(format!("{}: {e}", args.checkpoint.display())))?;
    let samples = read_data(&args.data)?;
    check_dims(&samples, &model.config)?;
    let selected: Vec<&UtteranceSample> = match args.test_session {
        Some(k) => session_split(&samples, k).1,
        None => samples.iter().collect(),
    };
    let eval = evaluate(&model, &selected, args.batch_size)?;
    println!("{} mode checkpoint on {} utterances:", model.config.mode, selected.len());
    print_metrics(&eval.metrics);
    let path = args.report.unwrap_or_else(|| default_report(&args.checkpoint));
    let file = EvalFile {
        checkpoint: args.checkpoint.display().to_string(),
        test_session: args.test_session,
        loss: eval.loss,
        metrics: eval.metrics,
    };
    write(&path, serde_json::to_string_pretty(&file).expect("serializes") + "\n")?;
    println!("report: {}", path.display());
    Ok(())
}

pub fn gradcheck(args: GradcheckArgs) -> Result<()> {
    if !(args.eps.is_finite() && args.eps > 0.0) {
        return Err(CliError::Validation(format!("eps must be positive, got {}", args.eps)));
    }
    let groups = model_gradient_check(args.seed, args.eps)?;
    println!("{:<12} {:>8} {:>12} {:>12} {:>8}  status", "group", "checked", "max rel", "max abs", "retries");
    for g in &groups {
        println!(
            "{:<12} {:>8} {:>12.3e} {:>12.3e} {:>8}  {}",
            g.group,
            g.stats.count,
            g.stats.max_relative,
            g.stats.max_absolute,
            g.kink_retries,
            if g.passed() { "ok" } else { "FAIL" }
        );
    }
    let failed: Vec<_> = groups.iter().filter(|g| !g.passed()).map(|g| g.group).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Runtime(format!("gradient check failed for {}", failed.join(", "))))
    }
}
