use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::{json, Value};
use softfer::io::{self, hard_labels, PredictionKind};
use softfer::metrics::{evaluate, EvalOptions, EvalRecord, EvalReport, FailureNormalization, DEFAULT_EPSILON};
use softfer::model::{AuCorrelationMatrix, AuScoreVector, AuTable, AuTablesDocument, AusVariant};
use softfer::pipeline::{align, categorize_records, label_records};
use softfer::sampling::{plan_negatives, DEFAULT_UNIFORM_FRACTION};
use softfer::scoring::{
    au_confusion, build_confidence_table, ebc_confusion, ConfidenceMode, ConfidenceTable, EbcConfidenceSource,
    FusionConfig, SoftLabeler, DEFAULT_SIM_NEUTRAL,
};
use softfer::study::{agreement_report, AgreementReport, Event, StudyStore};
use softfer::subsets::{distribution_of, DistributionReport, Subset};
use softfer::synth::{generate_with, SynthesisConfig};
use softfer::{Emotion, Execution};

use crate::args::*;
use crate::config::Defaults;
use crate::failure::Failure;

pub const AU_TABLES_FILE: &str = "au-tables.json";
pub const PUBLISHED_CONF_FILE: &str = "conf.paper.json";
const DEFAULT_LOG_LEVEL: &str = "warn";
const DEFAULT_BIND: &str = "127.0.0.1:8080";
const LOG_LEVELS: [&str; 6] = ["off", "error", "warn", "info", "debug", "trace"];

/// Settings shared by every command.
#[derive(Debug, Clone, Serialize)]
pub struct Common {
    pub seed: u64,
    pub log_level: String,
    pub threads: Option<usize>,
    pub parallel: bool,
    pub defaults_file: Option<PathBuf>,
}

impl Common {
    pub fn resolve(g: &GlobalArgs, d: &Defaults, defaults_file: Option<PathBuf>) -> Result<Common, Failure> {
        let log_level = g
            .log_level
            .clone()
            .or_else(|| d.log_level.clone())
            .unwrap_or_else(|| DEFAULT_LOG_LEVEL.into())
            .to_ascii_lowercase();
        if !LOG_LEVELS.contains(&log_level.as_str()) {
            return Err(Failure::invalid_argument(
                "--log-level",
                format!("unknown log level `{log_level}`, expected one of {}", LOG_LEVELS.join(", ")),
            ));
        }
        let threads = g.threads.or(d.threads);
        if threads == Some(0) {
            return Err(Failure::invalid_argument("--threads", "thread cap must be at least 1"));
        }
        Ok(Common {
            seed: g.seed.or(d.seed).unwrap_or(0),
            log_level,
            threads,
            parallel: cfg!(feature = "parallel") && threads != Some(1),
            defaults_file,
        })
    }

    fn exec(&self) -> Execution {
        if self.parallel {
            Execution::Parallel
        } else {
            Execution::Sequential
        }
    }
}

#[derive(Serialize)]
struct Provenance<'a, T: Serialize> {
    command: &'static str,
    common: &'a Common,
    config: &'a T,
    constants_digest: String,
}

/// Hash of the AU tables and weights in effect.
pub fn constants_digest(variant: AusVariant) -> String {
    let table = AuTable::emfacs();
    AuTablesDocument::build(&table, &AuScoreVector::for_variant(variant, &table)).digest()
}

fn announce<T: Serialize>(command: &'static str, common: &Common, config: &T, variant: AusVariant) {
    let line = Provenance {
        command,
        common,
        config,
        constants_digest: constants_digest(variant),
    };
    eprintln!("{}", serde_json::to_string(&line).expect("provenance serializes"));
}

fn fraction(flag: &str, v: f64) -> Result<f64, Failure> {
    if (0.0..=1.0).contains(&v) {
        Ok(v)
    } else {
        Err(Failure::invalid_argument(flag, format!("{flag} must lie in [0, 1], got {v}")))
    }
}

fn non_negative(flag: &str, v: f64) -> Result<f64, Failure> {
    if v.is_finite() && v >= 0.0 {
        Ok(v)
    } else {
        Err(Failure::invalid_argument(flag, format!("{flag} must be finite and >= 0, got {v}")))
    }
}

fn load_hard(manifest: Option<&Path>) -> Result<Option<HashMap<String, Emotion>>, Failure> {
    manifest
        .map(|p| Ok(hard_labels(&io::load_manifest(p)?)))
        .transpose()
}

pub fn run(command: &Command, common: &Common, d: &Defaults) -> Result<(), Failure> {
    match command {
        Command::PlanSampling(a) => plan_sampling(a, common, d),
        Command::Confidence(a) => confidence(a, common, d),
        Command::Fuse(a) => fuse(a, common, d),
        Command::Categorize(a) => categorize(a, common),
        Command::Evaluate(a) => evaluate_cmd(a, common, d),
        Command::Synth(a) => synth(a, common, d),
        Command::Serve(a) => serve(a, common, d),
        Command::Report(a) => report(a, common),
        Command::Export(a) => export(a, common),
    }
}

fn plan_sampling(a: &PlanArgs, common: &Common, d: &Defaults) -> Result<(), Failure> {
    let uniform_fraction = fraction(
        "--uniform-fraction",
        a.uniform_fraction
            .or(d.plan_sampling.uniform_fraction)
            .unwrap_or(DEFAULT_UNIFORM_FRACTION),
    )?;
    announce(
        "plan-sampling",
        common,
        &json!({
            "target": a.target,
            "total": a.total,
            "uniform_fraction": uniform_fraction,
            "out": a.out,
            "manifest": a.manifest,
            "selection": a.selection,
        }),
        AusVariant::Published,
    );
    let plan = plan_negatives(a.target, a.total, &AuCorrelationMatrix::published(), uniform_fraction)?;
    io::save_json(&a.out, &plan)?;
    if let (Some(manifest), Some(selection)) = (&a.manifest, &a.selection) {
        let ids = io::materialize_plan(&plan, &io::load_manifest(manifest)?, common.seed)?;
        let mut text = ids.join("\n");
        text.push('\n');
        io::write_file(selection, text.as_bytes())?;
    }
    Ok(())
}

fn confidence(a: &ConfidenceArgs, common: &Common, d: &Defaults) -> Result<(), Failure> {
    let mode = a.mode.or(d.confidence.mode).unwrap_or(ConfidenceMode::Literal);
    let sim_neutral = fraction("--sim-neutral", a.sim_neutral.or(d.fuse.sim_neutral).unwrap_or(DEFAULT_SIM_NEUTRAL))?;
    let aus_variant = a.aus_variant.or(d.fuse.aus_variant).unwrap_or_default();
    announce(
        "confidence",
        common,
        &json!({
            "predictions": a.predictions,
            "manifest": a.manifest,
            "mode": mode,
            "sim_neutral": sim_neutral,
            "aus_variant": aus_variant,
            "out": a.out,
        }),
        aus_variant,
    );
    let hard = hard_labels(&io::load_manifest(&a.manifest)?);
    let mut ebc = None;
    let mut au = None;
    for path in &a.predictions {
        let kind = PredictionKind::detect(path)?;
        let duplicate = match kind {
            PredictionKind::Ebc => ebc.is_some(),
            PredictionKind::Au => au.is_some(),
        };
        if duplicate {
            return Err(Failure::usage(
                "more than one prediction file of the same kind",
                json!({ "path": path }),
            ));
        }
        log::info!("{}: {kind:?} predictions", path.display());
        match kind {
            PredictionKind::Ebc => ebc = Some(ebc_confusion(&io::load_ebc(path, false)?, &hard)?),
            PredictionKind::Au => au = Some(au_confusion(&io::load_au(path)?, &hard, sim_neutral, aus_variant)?),
        }
    }
    let table = build_confidence_table(ebc.as_ref(), au.as_ref(), mode)?;
    io::save_json(&a.out, &table)?;
    Ok(())
}

fn fuse(a: &FuseArgs, common: &Common, d: &Defaults) -> Result<(), Failure> {
    let config = FusionConfig {
        sim_neutral: fraction("--sim-neutral", a.sim_neutral.or(d.fuse.sim_neutral).unwrap_or(DEFAULT_SIM_NEUTRAL))?,
        ebc_confidence: a
            .ebc_confidence
            .or(d.fuse.ebc_confidence)
            .unwrap_or(EbcConfidenceSource::PerBackbone),
        allow_partial: a.allow_partial || d.fuse.allow_partial.unwrap_or(false),
        aus_variant: a.aus_variant.or(d.fuse.aus_variant).unwrap_or_default(),
    };
    announce(
        "fuse",
        common,
        &json!({
            "ebc": a.ebc,
            "au": a.au,
            "conf": a.conf,
            "manifest": a.manifest,
            "fusion": config,
            "out": a.out,
        }),
        config.aus_variant,
    );
    let conf: ConfidenceTable = io::load_json(&a.conf)?;
    let labeler = SoftLabeler::new(conf, config)?;
    let ebc = io::load_ebc(&a.ebc, config.allow_partial)?;
    let au = io::load_au(&a.au)?;
    let hard = load_hard(a.manifest.as_deref())?;
    let records = label_records(&labeler, &ebc, &au, hard.as_ref(), common.exec())?;
    log::info!("labelled {} images", records.len());
    io::save_soft_labels(&a.out, &records)?;
    Ok(())
}

fn categorize(a: &CategorizeArgs, common: &Common) -> Result<(), Failure> {
    announce(
        "categorize",
        common,
        &json!({
            "softlabels": a.softlabels,
            "manifest": a.manifest,
            "out": a.out,
            "report": a.report,
            "report_json": a.report_json,
        }),
        AusVariant::Published,
    );
    let records = io::load_soft_labels(&a.softlabels)?;
    let hard = load_hard(a.manifest.as_deref())?;
    let assignments = categorize_records(&records, hard.as_ref())?;
    io::save_subsets(&a.out, &assignments)?;
    let dist = distribution_of(&assignments);
    if let Some(path) = &a.report {
        io::write_file(path, dist.to_markdown().as_bytes())?;
    }
    if let Some(path) = &a.report_json {
        io::save_json(path, &dist)?;
    }
    Ok(())
}

fn evaluate_cmd(a: &EvaluateArgs, common: &Common, d: &Defaults) -> Result<(), Failure> {
    let opts = EvalOptions {
        epsilon: non_negative("--epsilon", a.epsilon.or(d.evaluate.epsilon).unwrap_or(DEFAULT_EPSILON))?,
        normalization: a
            .normalization
            .or(d.evaluate.normalization)
            .unwrap_or(FailureNormalization::PerEmotionMean),
        hard: a.hard,
        exec: common.exec(),
    };
    announce(
        "evaluate",
        common,
        &json!({
            "truth": a.truth,
            "pred": a.pred,
            "hard": opts.hard,
            "epsilon": opts.epsilon,
            "normalization": opts.normalization,
            "stratify": a.stratify,
            "manifest": a.manifest,
            "out": a.out,
            "markdown": a.markdown,
        }),
        AusVariant::Published,
    );
    let truth = io::load_soft_labels(&a.truth)?;
    let pred = io::load_soft_labels(&a.pred)?;
    let pairs = align(&truth, &pred)?;
    let hard = load_hard(a.manifest.as_deref())?;
    let strata: Option<HashMap<String, Subset>> = a
        .stratify
        .as_deref()
        .map(|p| -> Result<_, Failure> {
            Ok(io::load_subsets(p)?
                .into_iter()
                .map(|s| (s.image_id, s.subset))
                .collect())
        })
        .transpose()?;

    let mut records = Vec::with_capacity(pairs.len());
    for (t, p) in pairs {
        let truth_hard = t
            .hard_label
            .or_else(|| hard.as_ref().and_then(|h| h.get(&t.image_id).copied()));
        if opts.hard && truth_hard.is_none() {
            return Err(Failure::data(
                "invalid_data",
                format!("--hard needs a hard label for image `{}`", t.image_id),
                json!({ "image_id": t.image_id }),
            ));
        }
        let subset = match &strata {
            None => None,
            Some(m) => Some(*m.get(&t.image_id).ok_or_else(|| {
                Failure::data(
                    "invalid_data",
                    format!("image `{}` has no subset assignment", t.image_id),
                    json!({ "image_id": t.image_id }),
                )
            })?),
        };
        records.push(EvalRecord {
            truth: t.soft_label,
            pred: p.soft_label,
            truth_hard,
            subset,
        });
    }
    let report = evaluate(&records, &opts)?;
    io::save_json(&a.out, &report)?;
    if let Some(path) = &a.markdown {
        io::write_file(path, report.to_markdown().as_bytes())?;
    }
    Ok(())
}

fn synth(a: &SynthArgs, common: &Common, d: &Defaults) -> Result<(), Failure> {
    let config = SynthesisConfig {
        n_images: a.n.or(d.synth.n).unwrap_or(SynthesisConfig::default().n_images),
        seed: common.seed,
        noise_sigma: non_negative("--noise", a.noise.or(d.synth.noise).unwrap_or(SynthesisConfig::default().noise_sigma))?,
        secondary_emotion_bias: fraction(
            "--secondary-bias",
            a.secondary_bias
                .or(d.synth.secondary_bias)
                .unwrap_or(SynthesisConfig::default().secondary_emotion_bias),
        )?,
    };
    announce("synth", common, &json!({ "synthesis": config, "out": a.out }), AusVariant::Published);
    generate_with(&config, common.exec())?.write_to(&a.out)?;
    Ok(())
}

fn serve(a: &ServeArgs, common: &Common, d: &Defaults) -> Result<(), Failure> {
    let bind = a
        .bind
        .clone()
        .or_else(|| d.serve.bind.clone())
        .unwrap_or_else(|| DEFAULT_BIND.into());
    let mut config = softfer_server::ServerConfig::new(&a.data_dir);
    config.images_dir = a.images.clone();
    config.snapshot_every = a
        .snapshot_every
        .or(d.serve.snapshot_every)
        .unwrap_or(softfer_server::DEFAULT_SNAPSHOT_EVERY);
    announce(
        "serve",
        common,
        &json!({
            "data_dir": config.data_dir,
            "images": config.images_dir,
            "bind": bind,
            "snapshot_every": config.snapshot_every,
        }),
        AusVariant::Published,
    );
    let mut rt = tokio::runtime::Builder::new_multi_thread();
    if let Some(n) = common.threads {
        rt.worker_threads(n);
    }
    let rt = rt.enable_all().build().map_err(|e| Failure::data("io", e.to_string(), json!({})))?;
    let state = softfer_server::AppState::open(&config)?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(&bind)
            .await
            .map_err(|e| Failure::data("io", format!("cannot bind {bind}: {e}"), json!({ "bind": bind })))?;
        let addr = listener
            .local_addr()
            .map_err(|e| Failure::data("io", e.to_string(), json!({})))?;
        eprintln!("{}", json!({ "listening": format!("http://{addr}") }));
        softfer_server::serve(listener, state, async {
            tokio::signal::ctrl_c().await.ok();
        })
        .await
        .map_err(|e| Failure::data("io", e.to_string(), json!({})))
    })
}

/// Renders any report kind this tool writes.
pub fn render_report(value: Value) -> Result<String, Failure> {
    let kind = value.get("kind").and_then(Value::as_str).unwrap_or_default().to_string();
    let bad = |e: serde_json::Error| Failure::data("parse", format!("malformed {kind} report: {e}"), json!({}));
    match kind.as_str() {
        DistributionReport::KIND => Ok(serde_json::from_value::<DistributionReport>(value).map_err(bad)?.to_markdown()),
        EvalReport::KIND => Ok(serde_json::from_value::<EvalReport>(value).map_err(bad)?.to_markdown()),
        "agreement" => Ok(serde_json::from_value::<AgreementReport>(value).map_err(bad)?.to_markdown()),
        other => Err(Failure::data(
            "invalid_data",
            format!("unknown report kind `{other}`"),
            json!({ "allowed": [DistributionReport::KIND, EvalReport::KIND, "agreement"] }),
        )),
    }
}

fn report(a: &ReportArgs, common: &Common) -> Result<(), Failure> {
    announce(
        "report",
        common,
        &json!({
            "input": a.input,
            "events": a.events,
            "study": a.study,
            "out": a.out,
            "json": a.json,
        }),
        AusVariant::Published,
    );
    let value = match (&a.input, &a.events, &a.study) {
        (Some(input), _, _) => io::load_json::<Value>(input)?,
        (None, Some(events), Some(study)) => {
            let log: Vec<Event> = io::load_jsonl(events)?.into_iter().map(|(_, e)| e).collect();
            let store = StudyStore::replay(&log)?;
            serde_json::to_value(agreement_report(&store, study)?).expect("report serializes")
        }
        _ => unreachable!("clap enforces --input or --events with --study"),
    };
    if let Some(path) = &a.json {
        io::save_json(path, &value)?;
    }
    let markdown = render_report(value)?;
    match &a.out {
        Some(path) => io::write_file(path, markdown.as_bytes())?,
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(markdown.as_bytes())
                .map_err(|e| Failure::data("io", e.to_string(), json!({})))?;
        }
    }
    Ok(())
}

fn export(a: &ExportArgs, common: &Common) -> Result<(), Failure> {
    let variant = a.aus_variant.unwrap_or_default();
    announce("export", common, &json!({ "out_dir": a.out_dir, "aus_variant": variant }), variant);
    std::fs::create_dir_all(&a.out_dir)
        .map_err(|e| Failure::data("io", e.to_string(), json!({ "path": a.out_dir })))?;
    let table = AuTable::emfacs();
    let doc = AuTablesDocument::build(&table, &AuScoreVector::for_variant(variant, &table));
    io::save_json(&a.out_dir.join(AU_TABLES_FILE), &doc)?;
    io::save_json(&a.out_dir.join(PUBLISHED_CONF_FILE), &ConfidenceTable::published())?;
    Ok(())
}
