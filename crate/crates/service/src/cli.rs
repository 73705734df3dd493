use std::collections::BTreeSet;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use exemplar_core::aae::AaeModel;
use exemplar_core::bundle::{stages_dir, AAE_FILE, CLASSIFIER_FILE};
use exemplar_core::checkpoint::Checkpoint;
use exemplar_core::classifier::{balanced_accuracy, predict_labels, train_classifier, BlackBox, CnnClassifier};
use exemplar_core::explainer::{explain, ArtifactStore, ExplanationRecord};
use exemplar_core::image::Image;
use exemplar_core::progressive::{stage_file_name, stage_plan, train_progressive};
use serde_json::{json, Value};

use crate::api::{self, AppState};
use crate::config::Settings;
use crate::error::{Result, ServiceError};
use crate::registry::Registry;
use crate::report::render_html;
use crate::schema::{check_record, explanation_validator};
use crate::store::SessionStore;

#[derive(Debug, Parser)]
#[command(name = "exemplar", version, about = "Exemplar and counterexemplar explanations for an image classifier")]
pub struct Cli {
    /// TOML settings file; EXEMPLAR_* environment variables override it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the black-box classifier and save it into a model directory.
    TrainClassifier(TrainClassifierArgs),
    /// Train the progressively grown autoencoder, saving every stage.
    TrainPgaae(TrainPgaaeArgs),
    /// Compute a metric from a predictions file or a trained model.
    Evaluate(EvaluateArgs),
    /// Explain one image and write the explanation JSON plus its images.
    Explain(ExplainArgs),
    /// Run the HTTP API.
    Serve(ServeArgs),
    /// Render an explanation JSON as a self-contained HTML page.
    ExportReport(ExportReportArgs),
}

#[derive(Debug, Args)]
pub struct TrainClassifierArgs {
    /// Model directory (defaults to `model_dir` from the settings).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Size of the synthetic dataset.
    #[arg(long)]
    pub images: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainPgaaeArgs {
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Base and target resolution, e.g. `7:28`.
    #[arg(long, value_parser = parse_plan)]
    pub plan: Option<(usize, usize)>,
    /// Epochs per stage, comma separated; the last value repeats.
    #[arg(long, value_delimiter = ',')]
    pub epochs: Option<Vec<usize>>,
    #[arg(long)]
    pub images: Option<usize>,
    #[arg(long)]
    pub latent_dim: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Metric {
    BalancedAccuracy,
    Rmse,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long, value_enum)]
    pub metric: Metric,
    /// CSV with `truth` and `prediction` columns of class codes.
    #[arg(long, conflicts_with = "model_dir")]
    pub predictions: Option<PathBuf>,
    /// Evaluate a trained model on the validation split instead.
    #[arg(long)]
    pub model_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExplainArgs {
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub model_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output JSON; images go to an `artifacts/` directory beside it.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub model_dir: Option<PathBuf>,
    /// Session store directory.
    #[arg(long)]
    pub store: Option<PathBuf>,
    #[arg(long)]
    pub host: Option<String>,
    #[arg(long)]
    pub port: Option<u16>,
}

#[derive(Debug, Args)]
pub struct ExportReportArgs {
    #[arg(long)]
    pub explanation: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_plan(s: &str) -> std::result::Result<(usize, usize), String> {
    let (a, b) = s.split_once(':').ok_or("expected BASE:TARGET, e.g. 7:28")?;
    let base = a.trim().parse().map_err(|_| format!("bad base resolution {a:?}"))?;
    let target = b.trim().parse().map_err(|_| format!("bad target resolution {b:?}"))?;
    Ok((base, target))
}

/// Executes `cli`, returning the summary printed on standard output.
pub fn run(cli: Cli) -> Result<Value> {
    let settings = Settings::load(cli.config.as_deref())?;
    match cli.command {
        Command::TrainClassifier(a) => train_classifier_cmd(&settings, a),
        Command::TrainPgaae(a) => train_pgaae_cmd(&settings, a),
        Command::Evaluate(a) => evaluate_cmd(&settings, a),
        Command::Explain(a) => explain_cmd(&settings, a),
        Command::Serve(a) => serve_cmd(&settings, a),
        Command::ExportReport(a) => export_report_cmd(a),
    }
}

fn train_classifier_cmd(settings: &Settings, a: TrainClassifierArgs) -> Result<Value> {
    let out = a.out.unwrap_or_else(|| settings.model_dir.clone());
    let mut s = settings.clone();
    if let Some(n) = a.images {
        s.desk.images = n;
    }
    if let Some(e) = a.epochs {
        s.desk.classifier.epochs = e;
    }
    let start = Instant::now();
    let (train, val) = s.datasets(s.desk.classifier.resolution)?;
    let (model, report) = train_classifier(&train, Some(&val), &s.desk.classifier)?;
    std::fs::create_dir_all(&out)?;
    let path = out.join(CLASSIFIER_FILE);
    model.to_checkpoint()?.save(&path)?;
    Ok(json!({
        "command": "train-classifier",
        "checkpoint": path,
        "train_images": train.len(),
        "val_images": val.len(),
        "train_balanced_accuracy": report.train_balanced_accuracy,
        "val_balanced_accuracy": report.val_balanced_accuracy,
        "epoch_losses": report.epoch_losses,
        "seconds": start.elapsed().as_secs_f64(),
    }))
}

fn train_pgaae_cmd(settings: &Settings, a: TrainPgaaeArgs) -> Result<Value> {
    let out = a.out.unwrap_or_else(|| settings.model_dir.clone());
    let mut s = settings.clone();
    let (base, target) = a.plan.unwrap_or((s.desk.base_resolution, s.desk.resolution));
    if let Some(n) = a.images {
        s.desk.images = n;
    }
    if let Some(e) = a.epochs {
        s.desk.progressive.epochs = e;
    }
    if let Some(k) = a.latent_dim {
        s.desk.progressive.latent_dim = k;
    }
    let hyper = &s.desk.progressive;
    let plan = stage_plan(base, target, hyper).map_err(|e| ServiceError::Usage(e.to_string()))?;
    let start = Instant::now();
    let (train, val) = s.datasets(target)?;
    std::fs::create_dir_all(&out)?;
    let dir = stages_dir(&out);
    let (model, stages) = train_progressive(&train, &plan, hyper, Some(&dir), &mut |m| {
        log::debug!("stage {} step {} {} = {:.5}", m.stage, m.step, m.name, m.value)
    })?;
    let path = out.join(AAE_FILE);
    model.to_checkpoint()?.save(&path)?;
    let stage_summaries: Vec<Value> = stages
        .iter()
        .map(|st| {
            json!({
                "stage_index": st.stage_index,
                "resolution": st.resolution,
                "checkpoint": dir.join(stage_file_name(st.stage_index, st.resolution)),
                "final_rmse": st.final_rmse,
                "transfer_rmse": st.transfer_rmse,
                "diversity": st.diversity,
                "seconds": st.seconds,
            })
        })
        .collect();
    Ok(json!({
        "command": "train-pgaae",
        "checkpoint": path,
        "stages": stage_summaries,
        "val_rmse": model.rmse(&val.images)?,
        "seconds": start.elapsed().as_secs_f64(),
    }))
}

/// Class-code pairs from a CSV with `truth` and `prediction` columns.
fn read_predictions(path: &Path) -> Result<Vec<(String, String)>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| ServiceError::Other(e.to_string()))?;
    let headers = reader.headers().map_err(|e| ServiceError::Other(e.to_string()))?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| ServiceError::Other(format!("{} has no {name} column", path.display())))
    };
    let (t, p) = (col("truth")?, col("prediction")?);
    let mut rows = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| ServiceError::Other(e.to_string()))?;
        rows.push((rec[t].trim().to_string(), rec[p].trim().to_string()));
    }
    Ok(rows)
}

fn evaluate_cmd(settings: &Settings, a: EvaluateArgs) -> Result<Value> {
    let metric = a.metric.to_possible_value().expect("value enum").get_name().to_string();
    if let Some(path) = a.predictions {
        if a.metric != Metric::BalancedAccuracy {
            return Err(ServiceError::Usage("a predictions file only supports balanced-accuracy".into()));
        }
        let rows = read_predictions(&path)?;
        let codes: Vec<&String> = rows.iter().flat_map(|(t, p)| [t, p]).collect::<BTreeSet<_>>().into_iter().collect();
        let index = |c: &String| codes.iter().position(|x| *x == c).expect("code collected");
        let truth: Vec<usize> = rows.iter().map(|(t, _)| index(t)).collect();
        let preds: Vec<usize> = rows.iter().map(|(_, p)| index(p)).collect();
        let value = balanced_accuracy(&preds, &truth)?;
        return Ok(json!({ "metric": metric, "value": value, "count": rows.len() }));
    }
    let dir = a.model_dir.unwrap_or_else(|| settings.model_dir.clone());
    let (value, count) = match a.metric {
        Metric::BalancedAccuracy => {
            let model = CnnClassifier::from_checkpoint(&Checkpoint::load(&dir.join(CLASSIFIER_FILE))?)?;
            let (_, val) = settings.datasets(model.spec.resolution)?;
            let codes = model.class_codes();
            let truth = val
                .labels
                .iter()
                .map(|&l| {
                    let code = &val.class_codes[l];
                    codes
                        .iter()
                        .position(|c| c == code)
                        .ok_or_else(|| ServiceError::Other(format!("model has no class {code}")))
                })
                .collect::<Result<Vec<usize>>>()?;
            (balanced_accuracy(&predict_labels(&model, &val.images)?, &truth)?, val.len())
        }
        Metric::Rmse => {
            let model = AaeModel::from_checkpoint(&Checkpoint::load(&dir.join(AAE_FILE))?)?;
            let (_, val) = settings.datasets(model.resolution())?;
            (model.rmse(&val.images)?, val.len())
        }
    };
    Ok(json!({ "metric": metric, "value": value, "count": count, "model_dir": dir }))
}

fn explain_cmd(settings: &Settings, a: ExplainArgs) -> Result<Value> {
    let dir = a.model_dir.unwrap_or_else(|| settings.model_dir.clone());
    let registry = Registry::load(&dir)?;
    let img = registry.prepare(&Image::open(&a.image)?);
    let bundle = &registry.bundle;
    let e = explain(&img, &bundle.classifier, &bundle.aae, &settings.explain, a.seed)?;
    let mut artifacts = ArtifactStore::default();
    let record = e.to_record(&mut artifacts)?;
    check_record(&explanation_validator(), &record).map_err(ServiceError::Other)?;
    let root = a.out.parent().map(Path::to_path_buf).unwrap_or_default();
    if !root.as_os_str().is_empty() {
        std::fs::create_dir_all(&root)?;
    }
    artifacts.write_to(&root)?;
    std::fs::write(&a.out, serde_json::to_vec_pretty(&record)?)?;
    Ok(json!({
        "command": "explain",
        "out": a.out,
        "status": record.status,
        "label": record.label,
        "exemplars": record.exemplars.len(),
        "counterexemplars": record.counterexemplars.len(),
        "fidelity": record.fidelity,
        "diagnostics": record.diagnostics,
    }))
}

fn serve_cmd(settings: &Settings, a: ServeArgs) -> Result<Value> {
    let dir = a.model_dir.unwrap_or_else(|| settings.model_dir.clone());
    let store_dir = a.store.unwrap_or_else(|| settings.store_dir.clone());
    let host = a.host.unwrap_or_else(|| settings.host.clone());
    let port = a.port.unwrap_or(settings.port);
    let addr: SocketAddr = format!("{host}:{port}")
        .parse()
        .map_err(|e| ServiceError::Usage(format!("bad listen address {host}:{port}: {e}")))?;
    let state = AppState {
        registry: Arc::new(Registry::load(&dir)?),
        store: Arc::new(SessionStore::open(&store_dir)?),
        explain: settings.explain.clone(),
        validator: explanation_validator(),
    };
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(api::serve(state, addr))?;
    Ok(json!({ "command": "serve", "stopped": true }))
}

fn export_report_cmd(a: ExportReportArgs) -> Result<Value> {
    let record: ExplanationRecord = serde_json::from_slice(&std::fs::read(&a.explanation)?)?;
    let root = a.explanation.parent().map(Path::to_path_buf).unwrap_or_default();
    let html = render_html(&record, |r| std::fs::read(root.join(r)).ok());
    std::fs::write(&a.out, html)?;
    Ok(json!({ "command": "export-report", "out": a.out }))
}
