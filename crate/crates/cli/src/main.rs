use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use unibind_core::adapter;
use unibind_core::centers::{self, prompt_map, prompt_sets};
use unibind_core::diagnostics::LabelledSet;
use unibind_core::eval::{class_relevance, Direction, Relevance};
use unibind_core::io::{read_jsonl, to_json_pretty, to_jsonl, write_atomic};
use unibind_core::pipeline::{LabelRow, SampleRef, TrainReport};
use unibind_core::synthetic::{desk_train_config, BUNDLE_CONFIG_FILE};
use unibind_core::train::{default_init, random_gradcheck_setup, resolve_pairs};
use unibind_core::{
    diagnostics, evaluate_classification, evaluate_retrieval, generate_synthetic, gradient_check, run_pipeline, train,
    ubem, Anchors, EmbeddingMatrix, Error, KnowledgeBase, PipelineConfig, PipelineError, ScoringMode, Source,
    SyntheticSpec, TrainConfig,
};

#[derive(Parser)]
#[command(
    name = "unibind",
    version,
    about = "Text-anchored alignment of multi-modal embeddings"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build or inspect a knowledge base
    #[command(subcommand)]
    Kb(KbCommand),
    /// Localize embedding centers
    #[command(subcommand)]
    Centers(CentersCommand),
    /// Train a linear adapter for one modality
    Train(TrainArgs),
    /// Compare analytic and finite-difference gradients on a random batch
    Gradcheck(GradcheckArgs),
    /// Zero-shot classification and retrieval metrics
    #[command(subcommand)]
    Eval(EvalCommand),
    /// Synthetic data
    #[command(subcommand)]
    Synth(SynthCommand),
    /// End-to-end runs
    #[command(subcommand)]
    Pipeline(PipelineCommand),
    /// Same-modal vs cross-modal cosine within classes
    Diagnostics(DiagnosticsArgs),
}

#[derive(Subcommand)]
enum KbCommand {
    /// Validate records and embeddings and write a knowledge-base directory
    Build {
        #[arg(long)]
        records: PathBuf,
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Record counts per category and source
    Stats {
        #[arg(long)]
        kb: PathBuf,
        #[arg(long)]
        json: bool,
    },
}

#[derive(Subcommand)]
enum CentersCommand {
    /// Top-k descriptions per category around its prompt embedding
    Localize {
        #[arg(long)]
        kb: PathBuf,
        /// Prompt embeddings labelled by category
        #[arg(long)]
        prompts: PathBuf,
        #[arg(long, default_value_t = centers::DEFAULT_K)]
        k: usize,
        /// Restrict to llm_category or mllm_data descriptions
        #[arg(long)]
        source: Option<Source>,
        #[arg(long)]
        out: PathBuf,
    },
    /// One center set per k, written as `<out-dir>/centers_k<k>.bin`
    Sweep {
        #[arg(long)]
        kb: PathBuf,
        #[arg(long)]
        prompts: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = [10, 25, 50, 100])]
        ks: Vec<usize>,
        #[arg(long)]
        source: Option<Source>,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    kb: PathBuf,
    /// JSON lines of {"sample_id": ...}
    #[arg(long)]
    pairs: PathBuf,
    /// Backbone embeddings labelled by sample id
    #[arg(long)]
    visual: PathBuf,
    #[arg(long)]
    modality: String,
    /// `key = value` training config; defaults apply to missing keys
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Optional JSON training report
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 8)]
    dim: usize,
    /// Output dim; defaults to --dim
    #[arg(long)]
    dim_out: Option<usize>,
    #[arg(long, default_value_t = 4)]
    batch: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.07)]
    temperature: f64,
    #[arg(long)]
    symmetric: bool,
}

#[derive(Subcommand)]
enum EvalCommand {
    /// Top-1 accuracy of labelled queries
    Zeroshot {
        #[arg(long)]
        centers: PathBuf,
        #[arg(long)]
        queries: PathBuf,
        /// JSON lines of {"id": ..., "category": ...}, one per query row
        #[arg(long)]
        labels: PathBuf,
        #[arg(long, default_value = "center_max")]
        mode: ScoringMode,
        #[arg(long)]
        report: PathBuf,
        /// Map queries through this adapter first
        #[arg(long)]
        adapter: Option<PathBuf>,
        /// Prompt ensemble for prompt_mean; defaults to the center set's prompts
        #[arg(long)]
        prompts: Option<PathBuf>,
        /// Also write per-query predictions as JSON lines
        #[arg(long)]
        predictions: Option<PathBuf>,
    },
    /// Recall@k of queries against a gallery
    Retrieval {
        /// Queries labelled by id
        #[arg(long)]
        queries: PathBuf,
        /// Gallery labelled by id
        #[arg(long)]
        gallery: PathBuf,
        /// JSON lines of {"query_id": ..., "relevant": [gallery ids]}
        #[arg(long)]
        relevance: Option<PathBuf>,
        /// Category labels of queries, for class-level relevance
        #[arg(long, requires = "gallery_labels")]
        query_labels: Option<PathBuf>,
        /// Category labels of gallery items, for class-level relevance
        #[arg(long, requires = "query_labels")]
        gallery_labels: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_values_t = [1, 5, 10, 20])]
        ks: Vec<usize>,
        #[arg(long, default_value = "a_to_b")]
        direction: Direction,
        #[arg(long)]
        report: PathBuf,
    },
}

#[derive(Subcommand)]
enum SynthCommand {
    /// Write a synthetic bundle with a ready-to-run pipeline.toml
    Generate {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        categories: usize,
        #[arg(long, default_value_t = 2)]
        modalities: usize,
        #[arg(long, default_value_t = 20)]
        samples: usize,
        #[arg(long, default_value_t = 32)]
        dim: usize,
        #[arg(long, default_value_t = 1.0)]
        separation: f64,
        #[arg(long, default_value_t = 2.0)]
        offset: f64,
        #[arg(long, default_value_t = 0.8)]
        noise: f64,
        #[arg(long, default_value_t = 100)]
        descriptions: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Center size written into pipeline.toml
        #[arg(long, default_value_t = centers::DEFAULT_K)]
        k: usize,
    },
}

#[derive(Subcommand)]
enum PipelineCommand {
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Run directory; defaults to `run` next to the config
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write 2-D PCA coordinates of the query embeddings
        #[arg(long)]
        dump_projection: bool,
    },
}

#[derive(Args)]
struct DiagnosticsArgs {
    /// Embeddings of one modality; repeat once per modality
    #[arg(long, required = true)]
    queries: Vec<PathBuf>,
    /// Label file matching each --queries, in the same order
    #[arg(long, required = true)]
    labels: Vec<PathBuf>,
    /// Adapter for each --queries, in the same order
    #[arg(long)]
    adapter: Vec<PathBuf>,
    #[arg(long)]
    report: Option<PathBuf>,
}

/// Flag combinations that parse but make no sense together.
#[derive(Debug)]
struct UsageError(String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

/// Analytic and numeric gradients disagree.
#[derive(Debug)]
struct GradcheckFailed(f64);

impl fmt::Display for GradcheckFailed {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "gradient check failed: max relative error {:.3e}", self.0)
    }
}

impl std::error::Error for GradcheckFailed {}

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return EXIT_USAGE;
        }
        if cause.is::<GradcheckFailed>() {
            return EXIT_NUMERICAL;
        }
        if let Some(e) = cause.downcast_ref::<Error>() {
            return if e.is_numerical() { EXIT_NUMERICAL } else { EXIT_DATA };
        }
        if let Some(e) = cause.downcast_ref::<PipelineError>() {
            return if e.source.is_numerical() {
                EXIT_NUMERICAL
            } else {
                EXIT_DATA
            };
        }
    }
    EXIT_DATA
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Kb(c) => kb(c),
        Command::Centers(c) => centers_cmd(c),
        Command::Train(a) => train_cmd(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Eval(c) => eval(c),
        Command::Synth(c) => synth(c),
        Command::Pipeline(c) => pipeline(c),
        Command::Diagnostics(a) => diagnostics_cmd(a),
    }
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    write_atomic(path, to_json_pretty(value)?.as_bytes())?;
    Ok(())
}

fn kb(c: KbCommand) -> Result<()> {
    match c {
        KbCommand::Build {
            records,
            embeddings,
            out,
        } => {
            let kb = KnowledgeBase::build(&records, &embeddings)?;
            kb.export(&out)?;
            println!(
                "{} records, dim {}, {} categories -> {}",
                kb.len(),
                kb.dim(),
                kb.categories().count(),
                out.display()
            );
        }
        KbCommand::Stats { kb, json } => {
            let stats = KnowledgeBase::load_dir(&kb)?.stats();
            if json {
                print!("{}", to_json_pretty(&stats)?);
                return Ok(());
            }
            println!("records {}  dim {}", stats.records, stats.dim);
            for (source, n) in &stats.by_source {
                println!("  {source:<13} {n}");
            }
            println!("{:<24} {:>13} {:>10}", "category", "llm_category", "mllm_data");
            for (cat, counts) in &stats.by_category {
                let get = |s| counts.get(&s).copied().unwrap_or(0);
                println!(
                    "{cat:<24} {:>13} {:>10}",
                    get(Source::LlmCategory),
                    get(Source::MllmData)
                );
            }
        }
    }
    Ok(())
}

fn centers_cmd(c: CentersCommand) -> Result<()> {
    match c {
        CentersCommand::Localize {
            kb,
            prompts,
            k,
            source,
            out,
        } => {
            let kb = KnowledgeBase::load_dir(&kb)?;
            let prompts = prompt_map(&ubem::load(&prompts)?)?;
            let set = centers::localize(&kb, &prompts, k, source)?;
            for w in &set.warnings {
                eprintln!("warning: {w}");
            }
            centers::save(&out, &set)?;
            println!("{} centers, k = {k} -> {}", set.centers.len(), out.display());
        }
        CentersCommand::Sweep {
            kb,
            prompts,
            ks,
            source,
            out_dir,
        } => {
            let kb = KnowledgeBase::load_dir(&kb)?;
            let prompts = prompt_map(&ubem::load(&prompts)?)?;
            let sets = centers::sweep_k(&kb, &prompts, &ks, source)?;
            for (k, set) in &sets {
                let path = out_dir.join(format!("centers_k{k}.bin"));
                centers::save(&path, set)?;
                let members: usize = set.centers.values().map(|c| c.len()).sum();
                println!(
                    "k = {k}: {} centers, {members} members -> {}",
                    set.centers.len(),
                    path.display()
                );
            }
        }
    }
    Ok(())
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let config = match &a.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            TrainConfig::from_kv_str(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => TrainConfig::default(),
    };
    let kb = KnowledgeBase::load_dir(&a.kb)?;
    let visual = ubem::load(&a.visual)?;
    let ids: Vec<String> = read_jsonl::<SampleRef>(&a.pairs)?
        .into_iter()
        .map(|r| r.sample_id)
        .collect();
    let pairs = resolve_pairs(&kb, &visual, &ids)?;
    let init = default_init(&a.modality, visual.dim(), kb.dim(), config.seed);
    let outcome = train(&a.modality, &pairs, &kb, &config, Some(init))?;
    adapter::save(&a.out, &outcome.adapter)?;
    if let Some(path) = &a.report {
        let report = TrainReport {
            modality: a.modality.clone(),
            dim_in: visual.dim(),
            dim_out: kb.dim(),
            pairs: pairs.len(),
            init: if visual.dim() == kb.dim() { "identity" } else { "random" },
            config: config.clone(),
            loss_history: outcome.loss_history.clone(),
        };
        write_json(path, &report)?;
    }
    let first = outcome.loss_history.first().copied().unwrap_or(f64::NAN);
    let last = outcome.loss_history.last().copied().unwrap_or(f64::NAN);
    println!(
        "{}: {} pairs, {} epochs, loss {first:.6} -> {last:.6} -> {}",
        a.modality,
        pairs.len(),
        config.epochs,
        a.out.display()
    );
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> Result<()> {
    let config = TrainConfig {
        temperature: a.temperature,
        symmetric_loss: a.symmetric,
        ..Default::default()
    };
    let (adapter, pairs, kb) = random_gradcheck_setup(a.dim, a.dim_out.unwrap_or(a.dim), a.batch, a.seed)?;
    let report = gradient_check(&adapter, &pairs, &kb, &config)?;
    print!("{}", to_json_pretty(&report)?);
    if !report.pass {
        return Err(GradcheckFailed(report.max_rel_error).into());
    }
    Ok(())
}

fn read_labels(path: &Path, rows: usize) -> Result<(Vec<String>, Vec<String>)> {
    let labels: Vec<LabelRow> = read_jsonl(path)?;
    if labels.len() != rows {
        return Err(Error::CountMismatch {
            records: labels.len(),
            rows,
        })
        .with_context(|| format!("{}", path.display()));
    }
    Ok(labels.into_iter().map(|l| (l.id, l.category)).unzip())
}

fn maybe_adapt(queries: EmbeddingMatrix, adapter: Option<&Path>) -> Result<EmbeddingMatrix> {
    match adapter {
        Some(p) => Ok(adapter::load(p)?.apply(&queries)?),
        None => Ok(queries),
    }
}

#[derive(Deserialize)]
struct RelevanceRow {
    query_id: String,
    relevant: Vec<String>,
}

fn eval(c: EvalCommand) -> Result<()> {
    match c {
        EvalCommand::Zeroshot {
            centers,
            queries,
            labels,
            mode,
            report,
            adapter,
            prompts,
            predictions,
        } => {
            let set = centers::load(&centers)?;
            let raw = ubem::load(&queries)?;
            let (ids, categories) = read_labels(&labels, raw.rows())?;
            let queries = maybe_adapt(raw, adapter.as_deref())?.with_labels(ids)?;
            let anchors = match mode {
                ScoringMode::CenterMax => {
                    if prompts.is_some() {
                        return Err(UsageError("--prompts only applies to --mode prompt_mean".into()).into());
                    }
                    Anchors::from_centers(&set)?
                }
                ScoringMode::PromptMean => {
                    let sets = match &prompts {
                        Some(p) => prompt_sets(&ubem::load(p)?)?,
                        None => set
                            .prompt_embeddings
                            .iter()
                            .map(|(c, e)| Ok((c.clone(), EmbeddingMatrix::new(e.dim(), e.as_slice().to_vec(), None)?)))
                            .collect::<unibind_core::Result<_>>()?,
                    };
                    Anchors::from_prompt_sets(&sets)?
                }
            };
            let (r, preds) = evaluate_classification(&queries, &categories, &anchors)?;
            write_json(&report, &r)?;
            if let Some(p) = predictions {
                write_atomic(&p, to_jsonl(&preds)?.as_bytes())?;
            }
            println!(
                "{mode}: top-1 {:.6} ({}/{}) -> {}",
                r.top1_accuracy,
                r.correct,
                r.sample_count,
                report.display()
            );
        }
        EvalCommand::Retrieval {
            queries,
            gallery,
            relevance,
            query_labels,
            gallery_labels,
            ks,
            direction,
            report,
        } => {
            let q = ubem::load(&queries)?;
            let g = ubem::load(&gallery)?;
            let (qids, gids, rel): (Vec<String>, Vec<String>, Relevance) =
                match (relevance, query_labels, gallery_labels) {
                    (Some(path), None, None) => {
                        let qids = q
                            .labels()
                            .with_context(|| format!("{} needs id labels", queries.display()))?
                            .to_vec();
                        let gids = g
                            .labels()
                            .with_context(|| format!("{} needs id labels", gallery.display()))?
                            .to_vec();
                        let mut rel = Relevance::new();
                        for row in read_jsonl::<RelevanceRow>(&path)? {
                            rel.entry(row.query_id).or_default().extend(row.relevant);
                        }
                        (qids, gids, rel)
                    }
                    (None, Some(ql), Some(gl)) => {
                        let (qids, qcats) = read_labels(&ql, q.rows())?;
                        let (_, gcats) = read_labels(&gl, g.rows())?;
                        let rel = class_relevance(&qids, &qcats);
                        (qids, gcats, rel)
                    }
                    _ => {
                        return Err(UsageError(
                            "give either --relevance or both --query-labels and --gallery-labels".into(),
                        )
                        .into())
                    }
                };
            let r = evaluate_retrieval(&q, &qids, &g, &gids, &rel, &ks, direction)?;
            write_json(&report, &r)?;
            let summary: Vec<String> = r.recall_at.iter().map(|(k, v)| format!("R@{k} {v:.6}")).collect();
            println!("{} -> {}", summary.join("  "), report.display());
        }
    }
    Ok(())
}

fn synth(c: SynthCommand) -> Result<()> {
    let SynthCommand::Generate {
        out,
        categories,
        modalities,
        samples,
        dim,
        separation,
        offset,
        noise,
        descriptions,
        seed,
        k,
    } = c;
    let spec = SyntheticSpec {
        categories,
        modalities,
        samples_per_class_per_modality: samples,
        dim,
        class_separation: separation,
        modality_offset: offset,
        noise_sigma: noise,
        descriptions_per_class: descriptions,
        seed,
    };
    let bundle = generate_synthetic(&spec)?;
    bundle.write_to(&out, k, &desk_train_config(seed))?;
    println!(
        "{} records, {} modalities x {} train/test samples -> {}",
        bundle.records.len(),
        modalities,
        categories * samples,
        out.join(BUNDLE_CONFIG_FILE).display()
    );
    Ok(())
}

fn pipeline(c: PipelineCommand) -> Result<()> {
    let PipelineCommand::Run {
        config,
        out,
        dump_projection,
    } = c;
    let (mut cfg, base) = PipelineConfig::load(&config)?;
    cfg.dump_projection |= dump_projection;
    let out = out.unwrap_or_else(|| base.join("run"));
    let summary = run_pipeline(&cfg, &base, &out)?;
    for w in &summary.warnings {
        eprintln!("warning: {w}");
    }
    for z in &summary.zeroshot {
        println!(
            "zeroshot {:<12} {:<4} {:<11} top-1 {:.6}",
            z.modality,
            z.phase.as_str(),
            z.report.mode,
            z.report.top1_accuracy
        );
    }
    for r in &summary.retrieval {
        let recalls: Vec<String> = r
            .report
            .recall_at
            .iter()
            .map(|(k, v)| format!("R@{k} {v:.6}"))
            .collect();
        println!(
            "retrieval {} -> {} {:<4} {}",
            r.query_modality,
            r.gallery_modality,
            r.phase.as_str(),
            recalls.join("  ")
        );
    }
    for (name, d) in [("pre", &summary.diagnostics_pre), ("post", &summary.diagnostics_post)] {
        if let Some(d) = d {
            println!(
                "diagnostics {name:<4} cross {:.6} same {:.6} gap {:.6}",
                d.intra_class_cross_modal_cosine, d.intra_class_same_modal_cosine, d.modality_gap
            );
        }
    }
    println!("{} outputs -> {}", summary.outputs.len() + 1, out.display());
    Ok(())
}

fn diagnostics_cmd(a: DiagnosticsArgs) -> Result<()> {
    if a.queries.len() != a.labels.len() {
        return Err(UsageError("--queries and --labels must be given the same number of times".into()).into());
    }
    if !a.adapter.is_empty() && a.adapter.len() != a.queries.len() {
        return Err(UsageError("--adapter must be given once per --queries or not at all".into()).into());
    }
    let mut sets = Vec::new();
    for (i, (q, l)) in a.queries.iter().zip(&a.labels).enumerate() {
        let raw = ubem::load(q)?;
        let (_, cats) = read_labels(l, raw.rows())?;
        let m = maybe_adapt(raw, a.adapter.get(i).map(PathBuf::as_path))?;
        sets.push((m, cats));
    }
    let refs: Vec<LabelledSet> = sets
        .iter()
        .map(|(m, c)| LabelledSet {
            embeddings: m,
            labels: c,
        })
        .collect();
    let d = diagnostics(&refs)?;
    if !d.modality_gap.is_finite() {
        bail!(Error::NonFinite("modality gap".into()));
    }
    match &a.report {
        Some(p) => {
            write_json(p, &d)?;
            let categories: BTreeSet<&String> = sets.iter().flat_map(|(_, c)| c).collect();
            println!(
                "{} modalities, {} categories: cross {:.6} same {:.6} gap {:.6}",
                sets.len(),
                categories.len(),
                d.intra_class_cross_modal_cosine,
                d.intra_class_same_modal_cosine,
                d.modality_gap
            );
        }
        None => print!("{}", to_json_pretty(&d)?),
    }
    Ok(())
}
