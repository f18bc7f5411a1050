use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use softfer::Emotion;

/// Parses a flag value with the same spelling the serde form uses, so
/// flags and config files accept identical names.
fn serde_value<T: DeserializeOwned>(s: &str) -> Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|e| e.to_string())
}

#[derive(Debug, Parser)]
#[command(name = "softfer", version, about = "Soft-label tooling for facial-expression datasets")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// Seed for every random choice.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// error, warn, info, debug or trace.
    #[arg(long, global = true)]
    pub log_level: Option<String>,
    /// Upper bound on worker threads.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Allocate negatives for a one-vs-rest classifier.
    PlanSampling(PlanArgs),
    /// Confidence table from predictions and a manifest.
    Confidence(ConfidenceArgs),
    /// Fuse EBC and AU predictions into soft labels.
    Fuse(FuseArgs),
    /// Split images into Easy / Challenging / Difficult.
    Categorize(CategorizeArgs),
    /// Soft and hard metrics of predicted soft labels.
    Evaluate(EvaluateArgs),
    /// Generate a synthetic batch with planted labels.
    Synth(SynthArgs),
    /// Run the annotation study service.
    Serve(ServeArgs),
    /// Render a JSON report, or an event log, as markdown.
    Report(ReportArgs),
    /// Write the AU tables and the published confidence table.
    Export(ExportArgs),
}

#[derive(Debug, Args)]
pub struct PlanArgs {
    #[arg(long, value_parser = clap::value_parser!(Emotion))]
    pub target: Emotion,
    #[arg(long)]
    pub total: usize,
    #[arg(long)]
    pub uniform_fraction: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
    /// Draw concrete image ids from this manifest.
    #[arg(long, requires = "selection")]
    pub manifest: Option<PathBuf>,
    /// Where to write the drawn ids, one per line.
    #[arg(long, requires = "manifest")]
    pub selection: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ConfidenceArgs {
    /// EBC and/or AU prediction CSV; the kind is read from the header.
    #[arg(long, required = true, num_args = 1)]
    pub predictions: Vec<PathBuf>,
    #[arg(long)]
    pub manifest: PathBuf,
    /// literal or balanced.
    #[arg(long, value_parser = serde_value::<softfer::scoring::ConfidenceMode>)]
    pub mode: Option<softfer::scoring::ConfidenceMode>,
    #[arg(long)]
    pub sim_neutral: Option<f64>,
    /// published or inverse-frequency.
    #[arg(long, value_parser = serde_value::<softfer::model::AusVariant>)]
    pub aus_variant: Option<softfer::model::AusVariant>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct FuseArgs {
    #[arg(long)]
    pub ebc: PathBuf,
    #[arg(long)]
    pub au: PathBuf,
    #[arg(long)]
    pub conf: PathBuf,
    /// Adds hard labels and subsets to the output.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub sim_neutral: Option<f64>,
    /// per-backbone or ensemble.
    #[arg(long, value_parser = serde_value::<softfer::scoring::EbcConfidenceSource>)]
    pub ebc_confidence: Option<softfer::scoring::EbcConfidenceSource>,
    /// published or inverse-frequency.
    #[arg(long, value_parser = serde_value::<softfer::model::AusVariant>)]
    pub aus_variant: Option<softfer::model::AusVariant>,
    /// Average over the backbones present instead of failing.
    #[arg(long)]
    pub allow_partial: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CategorizeArgs {
    #[arg(long)]
    pub softlabels: PathBuf,
    /// Hard labels for records that do not carry one.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Markdown distribution table.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// The same distribution as JSON.
    #[arg(long)]
    pub report_json: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub truth: PathBuf,
    #[arg(long)]
    pub pred: PathBuf,
    /// Also report accuracy, per-class P/R/F1 and confusion matrices.
    #[arg(long)]
    pub hard: bool,
    #[arg(long)]
    pub epsilon: Option<f64>,
    /// per-emotion-mean or weight-sum.
    #[arg(long, value_parser = serde_value::<softfer::metrics::FailureNormalization>)]
    pub normalization: Option<softfer::metrics::FailureNormalization>,
    /// Subset assignments to stratify by.
    #[arg(long)]
    pub stratify: Option<PathBuf>,
    /// Hard labels for truth records that do not carry one.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub markdown: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub noise: Option<f64>,
    /// Probability that an image mixes in a correlated second emotion.
    #[arg(long)]
    pub secondary_bias: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// Directory for the answer log and snapshots.
    #[arg(long)]
    pub data_dir: PathBuf,
    /// Directory of `<image_id>.<ext>` files.
    #[arg(long)]
    pub images: Option<PathBuf>,
    #[arg(long)]
    pub bind: Option<String>,
    /// Snapshot after this many events; 0 disables snapshots.
    #[arg(long)]
    pub snapshot_every: Option<u64>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// A distribution, evaluation or agreement JSON report.
    #[arg(long, conflicts_with = "events", required_unless_present = "events")]
    pub input: Option<PathBuf>,
    /// A study event log; the agreement report is recomputed from it.
    #[arg(long, requires = "study")]
    pub events: Option<PathBuf>,
    #[arg(long)]
    pub study: Option<String>,
    /// Markdown output; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also write the JSON report (useful with --events).
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub out_dir: PathBuf,
    /// published or inverse-frequency.
    #[arg(long, value_parser = serde_value::<softfer::model::AusVariant>)]
    pub aus_variant: Option<softfer::model::AusVariant>,
}
