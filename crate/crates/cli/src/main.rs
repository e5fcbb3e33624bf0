use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use idfree_core::checkpoint::Checkpoint;
use idfree_core::config::{AblationFlags, AsgPairing, LossMode, ScoreKind, TrainConfig};
use idfree_core::dataset::{save_features, FeatureMatrix, Modality};
use idfree_core::error::{Error, Result};
use idfree_core::evaluator::Split;
use idfree_core::gradcheck;
use idfree_core::pipeline::{evaluate_checkpoint, infer_embeddings, ModelInputs, PreparedData};
use idfree_core::tensor::Tensor;
use idfree_core::trainer;

#[derive(Parser)]
#[command(
    name = "idfree",
    version,
    about = "ID-free multimodal collaborative filtering: prepare data, train, evaluate, ablate"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Split an interaction log, derive user features, and build the static
    /// similarity graphs.
    Prepare(PrepareArgs),
    /// Train on a prepared dataset and write the best checkpoint.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset split (optionally a different
    /// dataset for transfer).
    Evaluate(EvaluateArgs),
    /// Train and evaluate one configuration per ablation row.
    Ablate(AblateArgs),
    /// Write inference-mode user/item embeddings as feature containers.
    ExportEmbeddings(ExportArgs),
    /// Verify every gradient against central finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct PrepareArgs {
    /// Interaction log (TSV or CSV with user_id, item_id columns).
    #[arg(long)]
    interactions: PathBuf,
    /// Item text features (binary feature container or CSV).
    #[arg(long)]
    text: PathBuf,
    /// Item visual features (binary feature container or CSV).
    #[arg(long)]
    visual: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Neighbors kept per row in the similarity graphs.
    #[arg(long, default_value_t = 10)]
    k: usize,
}

#[derive(Args, Clone)]
struct ConfigOverrides {
    /// TOML config; command-line flags override individual fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Preset: `idfree` (all modules) or `lightgcn-sl` (positional
    /// identifiers over the interaction graph with the softmax loss only).
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    use_pe: Option<bool>,
    #[arg(long)]
    use_asg: Option<bool>,
    #[arg(long)]
    use_static_graphs: Option<bool>,
    #[arg(long)]
    use_age: Option<bool>,
    #[arg(long)]
    use_align: Option<bool>,
    /// `sampled` or `literal`.
    #[arg(long)]
    loss_mode: Option<String>,
    /// `cross` or `same`.
    #[arg(long)]
    asg_pairing: Option<String>,
    #[arg(long)]
    symmetric_align: Option<bool>,
    #[arg(long)]
    include_layer0: Option<bool>,
    /// `dot` or `cosine`.
    #[arg(long)]
    score: Option<String>,
    /// Comma-separated ranking depths, e.g. `5,10,20,50`.
    #[arg(long)]
    eval_ks: Option<String>,
    #[arg(long)]
    log_losses: bool,
    #[arg(long)]
    profile: bool,
}

impl ConfigOverrides {
    fn resolve(&self) -> Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(path) => TrainConfig::from_toml_file(path)?,
            None => TrainConfig::default(),
        };
        if let Some(model) = &self.model {
            match model.as_str() {
                "idfree" => {}
                "lightgcn-sl" => cfg.flags = AblationFlags::lightgcn_sl(),
                other => {
                    return Err(Error::Config(format!(
                        "unknown model {other:?}; expected idfree or lightgcn-sl"
                    )))
                }
            }
        }
        macro_rules! copy {
            ($($field:ident),*) => {
                $(if let Some(v) = self.$field { cfg.$field = v; })*
            };
        }
        copy!(d, batch_size, max_epochs, patience, lr, alpha, k, layers, rho, tau, seed);
        copy!(symmetric_align, include_layer0);
        if let Some(v) = self.use_pe {
            cfg.flags.use_pe = v;
        }
        if let Some(v) = self.use_asg {
            cfg.flags.use_asg = v;
        }
        if let Some(v) = self.use_static_graphs {
            cfg.flags.use_static_graphs = v;
        }
        if let Some(v) = self.use_age {
            cfg.flags.use_age = v;
        }
        if let Some(v) = self.use_align {
            cfg.flags.use_align = v;
        }
        if let Some(v) = &self.loss_mode {
            cfg.loss_mode = match v.as_str() {
                "sampled" => LossMode::Sampled,
                "literal" => LossMode::Literal,
                other => return Err(Error::Config(format!("unknown loss mode {other:?}"))),
            };
        }
        if let Some(v) = &self.asg_pairing {
            cfg.asg_pairing = match v.as_str() {
                "cross" => AsgPairing::Cross,
                "same" => AsgPairing::Same,
                other => return Err(Error::Config(format!("unknown pairing {other:?}"))),
            };
        }
        if let Some(v) = &self.score {
            cfg.score = match v.as_str() {
                "dot" => ScoreKind::Dot,
                "cosine" => ScoreKind::Cosine,
                other => return Err(Error::Config(format!("unknown score kind {other:?}"))),
            };
        }
        if let Some(v) = &self.eval_ks {
            cfg.eval_ks = parse_ks(v)?;
        }
        if self.log_losses {
            cfg.log_losses = true;
        }
        if self.profile {
            cfg.profile = true;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn parse_ks(text: &str) -> Result<Vec<usize>> {
    let ks: Vec<usize> = text
        .split(',')
        .map(|t| {
            t.trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad k value {t:?}")))
        })
        .collect::<Result<_>>()?;
    if ks.is_empty() {
        return Err(Error::Config("need at least one k".into()));
    }
    Ok(ks)
}

#[derive(Args)]
struct TrainArgs {
    /// Prepared dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint output path (default: <data>/checkpoint.idfc).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Epoch metric log path (default: <data>/metrics.jsonl).
    #[arg(long)]
    metrics_out: Option<PathBuf>,
    #[command(flatten)]
    overrides: ConfigOverrides,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Dataset the checkpoint was trained against.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// `val` or `test`.
    #[arg(long, default_value = "test")]
    split: String,
    /// Evaluate on this dataset instead (feature widths must match).
    #[arg(long)]
    transfer_data: Option<PathBuf>,
    /// Comma-separated ranking depths.
    #[arg(long)]
    k: Option<String>,
    /// Also write the report JSON here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    data: PathBuf,
    /// JSON list of rows: [{"name": "...", "flags": {...}}, ...].
    #[arg(long)]
    rows: PathBuf,
    /// Report output path (default: stdout only).
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    overrides: ConfigOverrides,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Prepared dataset directory; defaults to the one recorded in the
    /// checkpoint.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

fn echo_config(cfg: &TrainConfig) {
    eprintln!(
        "resolved config (hash {}): {}",
        cfg.hash(),
        serde_json::to_string(cfg).expect("config serializes")
    );
    eprintln!("seed: {}", cfg.seed);
}

fn cmd_prepare(args: &PrepareArgs) -> Result<()> {
    eprintln!(
        "prepare: interactions={} seed={} k={}",
        args.interactions.display(),
        args.seed,
        args.k
    );
    let data = idfree_core::pipeline::prepare(
        &args.interactions,
        &args.text,
        &args.visual,
        args.seed,
        args.k,
    )?;
    data.save(&args.out)?;
    println!(
        "{}",
        serde_json::to_string_pretty(&data.meta).expect("meta serializes")
    );
    Ok(())
}

fn cmd_train(args: &TrainArgs) -> Result<i32> {
    let cfg = args.overrides.resolve()?;
    echo_config(&cfg);
    let data = PreparedData::load(&args.data)?;
    let outcome = trainer::train(&cfg, &data, Some(args.data.display().to_string()))?;

    let ckpt_path = args
        .out
        .clone()
        .unwrap_or_else(|| args.data.join("checkpoint.idfc"));
    outcome.checkpoint.save(&ckpt_path)?;

    let metrics_path = args
        .metrics_out
        .clone()
        .unwrap_or_else(|| args.data.join("metrics.jsonl"));
    let mut log_text = String::new();
    for rec in &outcome.log {
        log_text.push_str(&serde_json::to_string(rec)?);
        log_text.push('\n');
    }
    std::fs::write(&metrics_path, log_text)
        .map_err(|e| Error::io(metrics_path.display().to_string(), e))?;

    if cfg.log_losses {
        let losses_path = args.data.join("losses.jsonl");
        let mut text = String::new();
        for report in &outcome.loss_reports {
            text.push_str(&serde_json::to_string(report)?);
            text.push('\n');
        }
        std::fs::write(&losses_path, text)
            .map_err(|e| Error::io(losses_path.display().to_string(), e))?;
    }

    println!(
        "{}",
        serde_json::json!({
            "checkpoint": ckpt_path.display().to_string(),
            "metrics": metrics_path.display().to_string(),
            "epochs_run": outcome.log.len(),
            "best_epoch": outcome.best_epoch,
            "best_val_recall@20": outcome.best_val_recall20,
            "diverged": outcome.diverged,
        })
    );
    if let Some(reason) = outcome.diverged {
        eprintln!("training aborted: {reason}; last finite checkpoint saved");
        return Ok(3);
    }
    Ok(0)
}

fn cmd_evaluate(args: &EvaluateArgs) -> Result<()> {
    let split = match args.split.as_str() {
        "val" => Split::Val,
        "test" => Split::Test,
        other => return Err(Error::Config(format!("unknown split {other:?}"))),
    };
    let mut ckpt = Checkpoint::load(&args.checkpoint)?;
    if let Some(ks) = &args.k {
        ckpt.manifest.config.eval_ks = parse_ks(ks)?;
        ckpt.manifest.config.validate()?;
    }
    echo_config(&ckpt.manifest.config);
    let data_dir = args.transfer_data.as_ref().unwrap_or(&args.data);
    let data = PreparedData::load(data_dir)?;
    let report = evaluate_checkpoint(&ckpt, &data, split)?;
    let json = serde_json::to_string_pretty(&report)?;
    if let Some(out) = &args.out {
        std::fs::write(out, &json).map_err(|e| Error::io(out.display().to_string(), e))?;
    }
    println!("{json}");
    Ok(())
}

#[derive(serde::Deserialize)]
struct AblationRow {
    name: String,
    flags: AblationFlags,
}

fn cmd_ablate(args: &AblateArgs) -> Result<()> {
    let base = args.overrides.resolve()?;
    let rows_text = std::fs::read_to_string(&args.rows)
        .map_err(|e| Error::io(args.rows.display().to_string(), e))?;
    let rows: Vec<AblationRow> = serde_json::from_str(&rows_text)?;
    if rows.is_empty() {
        return Err(Error::Config(format!(
            "{}: ablation row list is empty",
            args.rows.display()
        )));
    }
    let data = PreparedData::load(&args.data)?;

    let mut results = Vec::new();
    for row in &rows {
        let cfg = TrainConfig {
            flags: row.flags,
            ..base.clone()
        };
        cfg.validate()?;
        eprintln!("ablate row {:?}", row.name);
        echo_config(&cfg);
        let outcome = trainer::train(&cfg, &data, None)?;
        if let Some(reason) = &outcome.diverged {
            return Err(Error::Numeric(format!(
                "row {:?} diverged: {reason}",
                row.name
            )));
        }
        let report = evaluate_checkpoint(&outcome.checkpoint, &data, Split::Test)?;
        results.push(serde_json::json!({
            "name": row.name,
            "flags": row.flags,
            "best_epoch": outcome.best_epoch,
            "recall@5": report.recall_at(5),
            "recall@20": report.recall_at(20),
            "ndcg@5": report.ndcg_at(5),
            "ndcg@20": report.ndcg_at(20),
        }));
    }

    let report = serde_json::json!({ "rows": results });
    let json = serde_json::to_string_pretty(&report)?;
    if let Some(out) = &args.out {
        std::fs::write(out, &json).map_err(|e| Error::io(out.display().to_string(), e))?;
    }
    println!("{json}");

    // human-readable table on stderr
    eprintln!("\n| row | R@5 | R@20 | N@5 | N@20 |");
    eprintln!("|---|---|---|---|---|");
    for r in report["rows"].as_array().unwrap() {
        eprintln!(
            "| {} | {:.4} | {:.4} | {:.4} | {:.4} |",
            r["name"].as_str().unwrap(),
            r["recall@5"].as_f64().unwrap(),
            r["recall@20"].as_f64().unwrap(),
            r["ndcg@5"].as_f64().unwrap(),
            r["ndcg@20"].as_f64().unwrap(),
        );
    }
    Ok(())
}

fn cmd_export(args: &ExportArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let data_dir = match (&args.data, &ckpt.manifest.data_dir) {
        (Some(dir), _) => dir.clone(),
        (None, Some(recorded)) => PathBuf::from(recorded),
        (None, None) => {
            return Err(Error::Config(
                "checkpoint records no dataset directory; pass --data".into(),
            ))
        }
    };
    let data = PreparedData::load(&data_dir)?;
    let cfg = &ckpt.manifest.config;
    echo_config(cfg);
    let inputs: ModelInputs<f32> = ModelInputs::build(&data, cfg)?;
    let (e_users, e_items) = infer_embeddings(&ckpt.params, &inputs, &data, cfg)?;
    std::fs::create_dir_all(&args.out)
        .map_err(|e| Error::io(args.out.display().to_string(), e))?;
    let write = |name: &str, t: &Tensor<f32>| -> Result<()> {
        let feats = FeatureMatrix::new(Modality::Text, t.clone())?;
        save_features(&feats, &args.out.join(name))
    };
    write("user_embeddings.idfv", &e_users)?;
    write("item_embeddings.idfv", &e_items)?;
    println!(
        "{}",
        serde_json::json!({
            "out": args.out.display().to_string(),
            "users": e_users.rows(),
            "items": e_items.rows(),
            "d": e_users.cols(),
        })
    );
    Ok(())
}

fn cmd_gradcheck(args: &GradcheckArgs) -> Result<i32> {
    eprintln!("gradcheck seed {}", args.seed);
    let report = gradcheck::run_full_suite(args.seed, None)?;
    for check in &report.checks {
        println!(
            "{:20} max_rel_err {:.3e}  {}",
            check.name,
            check.max_rel_err,
            if check.pass { "PASS" } else { "FAIL" }
        );
    }
    if let Some(failure) = report.first_failure() {
        eprintln!("gradient mismatch in {}", failure.name);
        return Ok(3);
    }
    Ok(0)
}

fn run() -> Result<i32> {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // help/version print to stdout and exit clean; real usage
            // errors exit 1
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return Ok(code);
        }
    };
    match &cli.cmd {
        Cmd::Prepare(args) => cmd_prepare(args).map(|()| 0),
        Cmd::Train(args) => cmd_train(args),
        Cmd::Evaluate(args) => cmd_evaluate(args).map(|()| 0),
        Cmd::Ablate(args) => cmd_ablate(args).map(|()| 0),
        Cmd::ExportEmbeddings(args) => cmd_export(args).map(|()| 0),
        Cmd::Gradcheck(args) => cmd_gradcheck(args),
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
