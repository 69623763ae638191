//! Command-line front end.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::io::BufRead;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use qualcode_core::annotation::{import_corpus, Annotation, Annotator, CorpusFormat, SourceText};
use qualcode_core::coder::group_codes_into_themes;
use qualcode_core::embedding::Embedder;
use qualcode_core::lab::{
    chronological_examples, extrapolation_analysis, fit_exp_curve, learning_curve, new_code_fraction,
    random_baseline, ExperimentContext, DEFAULT_BINS,
};
use qualcode_core::metrics::{alignment_report, rank_texts, AnnotationLayer, SortKey};
use qualcode_core::reconstruct::verify_and_reconstruct;

use crate::config::{Config, ProviderKind};
use crate::plot::{chart, Series};
use crate::run::RunStatus;
use crate::state::RunScope;
use crate::store::Store;
use crate::workspace::Workspace;

#[derive(Debug, Parser)]
#[command(name = "qualcode", version, about = "Inductive qualitative coding with a language model")]
pub struct Cli {
    /// TOML configuration file (default: ./qualcode.toml if present).
    #[arg(long, global = true, env = "QUALCODE_CONFIG")]
    pub config: Option<PathBuf>,
    /// Project store directory.
    #[arg(long, global = true)]
    pub store: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    pub provider: Option<ProviderKind>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Create a project from a JSONL or CSV corpus.
    Import {
        file: PathBuf,
        #[arg(long)]
        format: Option<CorpusFormat>,
        #[arg(long)]
        id: Option<String>,
    },
    /// Load human annotations from JSONL lines of `{"id", "annotated"}`.
    Annotate { project: String, file: PathBuf },
    /// Run the coder over a project scope and print the alignment report.
    Code {
        project: String,
        /// Comma-separated example ids; replaces the current selection.
        #[arg(long, value_delimiter = ',')]
        examples: Option<Vec<String>>,
        #[arg(long, default_value = "validation")]
        scope: RunScope,
        #[arg(long, default_value = "corpus")]
        sort: SortKey,
        #[arg(long)]
        json: bool,
    },
    /// Score an LLM layer against a human layer without running a model.
    Eval {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        human: PathBuf,
        #[arg(long)]
        llm: PathBuf,
        #[arg(long, default_value = "corpus")]
        sort: SortKey,
        #[arg(long)]
        csv: bool,
        /// Skip embedding calls and report IoU only.
        #[arg(long)]
        no_mhd: bool,
    },
    /// Alignment as a function of the number of chronological examples.
    Curve {
        project: String,
        #[arg(long, value_delimiter = ',', required = true)]
        sizes: Vec<usize>,
        #[arg(long)]
        no_balance: bool,
        #[command(flatten)]
        out: OutDir,
    },
    /// Example-to-text distance versus output alignment within one code cluster.
    Extrapolate {
        project: String,
        #[arg(long, default_value_t = 5)]
        k: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 8)]
        max_examples: usize,
        #[command(flatten)]
        out: OutDir,
    },
    /// Mean alignment over randomly drawn balanced example sets.
    Baseline {
        project: String,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 5)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Number of chronologically first annotated texts examples are drawn
        /// from; the rest are evaluated. Defaults to half.
        #[arg(long)]
        pool: Option<usize>,
    },
    /// Group the codebook into named themes.
    Themes {
        project: String,
        #[arg(long, default_value_t = 5)]
        k: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Use the codebook of this run instead of the human codebook.
        #[arg(long)]
        run: Option<String>,
    },
    /// Fraction of new codes per chronological bin of code applications.
    Saturation {
        project: String,
        #[arg(long, default_value_t = DEFAULT_BINS)]
        bins: usize,
    },
    /// Serve the HTTP API.
    Serve {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        bind: String,
    },
}

#[derive(Debug, Args)]
pub struct OutDir {
    /// Directory for CSV and SVG output.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    let mut config = Config::load(cli.config.as_deref())?;
    if let Some(store) = cli.store {
        config.store = store;
    }
    if let Some(p) = cli.provider {
        config.provider = p;
    }
    match cli.command {
        Command::Eval {
            corpus,
            human,
            llm,
            sort,
            csv,
            no_mhd,
        } => {
            let embedder = if no_mhd { None } else { Some(config.embedder()?) };
            print!("{}", eval_files(&corpus, &human, &llm, sort, csv, embedder.as_ref())?);
            Ok(())
        }
        Command::Serve { port, bind } => serve(workspace(&config)?, &bind, port),
        command => {
            let ws = workspace(&config)?;
            print!("{}", execute(&ws, command)?);
            Ok(())
        }
    }
}

pub fn workspace(config: &Config) -> anyhow::Result<Arc<Workspace>> {
    let store = Store::open(&config.store)?;
    let ws = Workspace::new(store, config.chat_source()?, Arc::new(config.embedder()?))
        .with_min_annotations(config.min_annotations);
    Ok(Arc::new(ws))
}

fn serve(ws: Arc<Workspace>, bind: &str, port: u16) -> anyhow::Result<()> {
    let addr: SocketAddr = format!("{bind}:{port}").parse().context("bind address")?;
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr).await?;
        log::info!("listening on http://{addr}");
        axum::serve(listener, crate::api::router(ws)).await?;
        Ok(())
    })
}

#[derive(Debug, Deserialize)]
struct MarkupLine {
    id: String,
    annotated: String,
}

fn read_markup(path: &Path) -> anyhow::Result<Vec<MarkupLine>> {
    let file = std::fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).with_context(|| format!("{}:{}", path.display(), i + 1))?);
    }
    Ok(out)
}

/// Parses markup against the original body, tolerating small edits.
fn annotation_from_markup(text: &SourceText, markup: &str, annotator: Annotator) -> anyhow::Result<Annotation> {
    let rebuilt = verify_and_reconstruct(&text.body, markup).with_context(|| format!("text {:?}", text.id))?;
    Ok(Annotation::new(&text.id, annotator, rebuilt.segments)?)
}

fn markup_layer(texts: &[SourceText], path: &Path, annotator: Annotator) -> anyhow::Result<AnnotationLayer> {
    let by_id: HashMap<&str, &SourceText> = texts.iter().map(|t| (t.id.as_str(), t)).collect();
    let mut layer = AnnotationLayer::new();
    for line in read_markup(path)? {
        let text = by_id
            .get(line.id.as_str())
            .ok_or_else(|| anyhow!("{}: unknown text {:?}", path.display(), line.id))?;
        layer.insert(line.id.clone(), annotation_from_markup(text, &line.annotated, annotator)?);
    }
    Ok(layer)
}

fn corpus_file(path: &Path) -> anyhow::Result<Vec<SourceText>> {
    let format = CorpusFormat::from_path(path).unwrap_or(CorpusFormat::Jsonl);
    Ok(import_corpus(path, format)?)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"))
}

/// Texts present in both layers, scored and ranked.
pub fn eval_files(
    corpus: &Path,
    human: &Path,
    llm: &Path,
    sort: SortKey,
    csv: bool,
    embedder: Option<&Embedder>,
) -> anyhow::Result<String> {
    let texts = corpus_file(corpus)?;
    let human = markup_layer(&texts, human, Annotator::Human)?;
    let llm = markup_layer(&texts, llm, Annotator::Llm)?;
    let scored: Vec<&SourceText> = texts
        .iter()
        .filter(|t| human.contains_key(&t.id) && llm.contains_key(&t.id))
        .collect();
    let report = alignment_report(&human, &llm, &scored, embedder)?;
    if csv {
        return Ok(report.to_csv());
    }
    let mut out = String::new();
    writeln!(out, "{:<24} {:>7} {:>7}  flags", "text", "iou", "mhd")?;
    for id in rank_texts(&report, sort) {
        let row = report.row(&id).expect("ranked ids come from the report");
        writeln!(
            out,
            "{:<24} {:>7.4} {:>7}  {}",
            row.text_id,
            row.iou,
            fmt_opt(row.mhd),
            row.flags().join(",")
        )?;
    }
    let s = report.summary();
    writeln!(
        out,
        "texts {}  mean IoU {}  mean MHD {}  (coded only: IoU {}  MHD {})",
        s.n_texts,
        fmt_opt(s.mean_iou),
        fmt_opt(s.mean_mhd),
        fmt_opt(s.mean_iou_coded),
        fmt_opt(s.mean_mhd_coded)
    )?;
    Ok(out)
}

fn write_out(dir: &Option<PathBuf>, name: &str, contents: &str) -> anyhow::Result<()> {
    if let Some(dir) = dir {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(name), contents)?;
    }
    Ok(())
}

/// Runs every subcommand that works on a stored project; returns stdout.
pub fn execute(ws: &Arc<Workspace>, command: Command) -> anyhow::Result<String> {
    let mut out = String::new();
    match command {
        Command::Import { file, format, id } => {
            let format = format
                .or_else(|| CorpusFormat::from_path(&file))
                .ok_or_else(|| anyhow!("cannot infer corpus format of {}; pass --format", file.display()))?;
            let id = ws.import_project(id, &file, format)?;
            writeln!(out, "{id}")?;
        }
        Command::Annotate { project, file } => {
            let state = ws.state(&project)?;
            let layer = markup_layer(&state.corpus, &file, Annotator::Human)?;
            for (tid, ann) in &layer {
                ws.upsert_annotation(&project, tid, ann.segments.clone())?;
            }
            writeln!(out, "annotated {} texts", layer.len())?;
        }
        Command::Code {
            project,
            examples,
            scope,
            sort,
            json,
        } => {
            if let Some(ids) = examples {
                ws.set_examples(&project, ids)?;
            }
            let run_id = ws.start_run(&project, scope)?;
            let status = ws.wait_for_run(&project, &run_id)?;
            if status.status == RunStatus::Failed {
                bail!("run {run_id} failed: {}", status.error.unwrap_or_default());
            }
            let report = ws.report(&project, &run_id, sort)?;
            if json {
                writeln!(out, "{}", serde_json::to_string_pretty(&report)?)?;
            } else {
                writeln!(out, "{run_id} ({} texts)", report.rows.len())?;
                if let Some(w) = status.warning {
                    writeln!(out, "warning: {w}")?;
                }
                for row in &report.rows {
                    let (iou, mhd) = row
                        .metrics
                        .as_ref()
                        .map_or(("-".to_string(), "-".to_string()), |m| (format!("{:.4}", m.iou), fmt_opt(m.mhd)));
                    writeln!(out, "{:<24} {:>7} {:>7}  {}", row.text_id, iou, mhd, row.flags.join(","))?;
                }
                if let Some(s) = report.summary {
                    writeln!(out, "mean IoU {}  mean MHD {}", fmt_opt(s.mean_iou), fmt_opt(s.mean_mhd))?;
                }
            }
        }
        Command::Curve {
            project,
            sizes,
            no_balance,
            out: dir,
        } => {
            let (dataset, state) = (ws.dataset(&project)?, ws.state(&project)?);
            let chat = ws.chat_for(&state);
            let ctx = context(ws, chat.as_ref(), &state.custom_instructions);
            let points = learning_curve(&dataset, &sizes, !no_balance, &ctx)?;
            let mut csv = String::from("n_examples,mean_iou,mean_mhd,n_evaluated,n_failed\n");
            for p in &points {
                writeln!(csv, "{},{},{},{},{}", p.n_examples, p.mean_iou, p.mean_mhd, p.n_evaluated, p.n_failed)?;
            }
            out.push_str(&csv);
            let iou: Vec<(f64, f64)> = points.iter().map(|p| (p.n_examples as f64, p.mean_iou)).collect();
            let mhd: Vec<(f64, f64)> = points.iter().map(|p| (p.n_examples as f64, p.mean_mhd)).collect();
            let mut series = vec![Series::line("mean IoU", iou.clone()), Series::line("mean MHD", mhd.clone())];
            for (name, pts) in [("IoU", &iou), ("MHD", &mhd)] {
                match fit_exp_curve(pts) {
                    Ok(f) => {
                        writeln!(out, "fit {name}: y = {:.4} + {:.4} * (1 - exp(-{:.4} n))  sse {:.3e}", f.a, f.b, f.c, f.residual_sse)?;
                        let (lo, hi) = (pts[0].0, pts[pts.len() - 1].0);
                        let curve = (0..=40)
                            .map(|i| {
                                let n = lo + (hi - lo) * f64::from(i) / 40.0;
                                (n, f.predict(n))
                            })
                            .collect();
                        series.push(Series::line(format!("{name} fit"), curve).dashed());
                    }
                    Err(e) => writeln!(out, "fit {name}: {e}")?,
                }
            }
            write_out(&dir.out, "curve.csv", &csv)?;
            write_out(&dir.out, "curve.svg", &chart("Alignment by number of examples", "examples", "mean", &series))?;
        }
        Command::Extrapolate {
            project,
            k,
            seed,
            max_examples,
            out: dir,
        } => {
            let (dataset, state) = (ws.dataset(&project)?, ws.state(&project)?);
            let chat = ws.chat_for(&state);
            let ctx = context(ws, chat.as_ref(), &state.custom_instructions);
            let result = extrapolation_analysis(&dataset, k, seed, max_examples, &ctx)?;
            writeln!(out, "cluster {}: {}", result.cluster, result.cluster_codes.join(", "))?;
            writeln!(out, "examples: {}", result.example_ids.join(", "))?;
            let mut csv = String::from("text_id,example_mhd,output_mhd\n");
            for p in &result.points {
                writeln!(csv, "{},{},{}", p.text_id, p.example_mhd, p.output_mhd)?;
            }
            out.push_str(&csv);
            writeln!(out, "pearson r {}", fmt_opt(result.pearson_r))?;
            let pts = result.points.iter().map(|p| (p.example_mhd, p.output_mhd)).collect();
            write_out(&dir.out, "extrapolation.csv", &csv)?;
            write_out(
                &dir.out,
                "extrapolation.svg",
                &chart(
                    "Distance to examples versus output alignment",
                    "MHD to nearest example",
                    "MHD human vs LLM",
                    &[Series::scatter("texts", pts)],
                ),
            )?;
        }
        Command::Baseline {
            project,
            n,
            trials,
            seed,
            pool,
        } => {
            let (dataset, state) = (ws.dataset(&project)?, ws.state(&project)?);
            let chat = ws.chat_for(&state);
            let ctx = context(ws, chat.as_ref(), &state.custom_instructions);
            let candidates = dataset.candidates();
            let pool_size = pool.unwrap_or(candidates.len() / 2).min(candidates.len());
            let pool_ids: Vec<String> = candidates[..pool_size].iter().map(|c| c.text_id.clone()).collect();
            let eval_ids: Vec<String> = candidates[pool_size..].iter().map(|c| c.text_id.clone()).collect();
            let report = random_baseline(&dataset, &pool_ids, &eval_ids, n, trials, seed, &ctx)?;
            for (t, s) in report.per_trial.iter().enumerate() {
                writeln!(out, "trial {t}: mean IoU {}  mean MHD {}", fmt_opt(s.mean_iou), fmt_opt(s.mean_mhd))?;
            }
            writeln!(
                out,
                "n {}  trials {}  mean IoU {}  mean MHD {}",
                report.n_examples,
                report.per_trial.len(),
                fmt_opt(report.mean_iou),
                fmt_opt(report.mean_mhd)
            )?;
            let chrono = chronological_examples(&candidates[..pool_size], n, true)?;
            writeln!(out, "chronological examples for comparison: {}", chrono.join(", "))?;
        }
        Command::Themes { project, k, seed, run } => {
            let state = ws.state(&project)?;
            let codebook = match run {
                Some(rid) => ws.run_record(&project, &rid)?.codebook,
                None => state.codebook.clone(),
            };
            let chat = ws.chat_for(&state);
            let themes = group_codes_into_themes(&codebook, ws.embedder(), chat.as_ref(), k, seed)?;
            for t in themes {
                writeln!(out, "{}: {}", t.label, t.codes.join(", "))?;
            }
        }
        Command::Saturation { project, bins } => {
            let dataset = ws.dataset(&project)?;
            for (i, f) in new_code_fraction(&dataset.code_log(), bins)?.iter().enumerate() {
                writeln!(out, "bin {i}: {f:.4}")?;
            }
        }
        Command::Eval { .. } | Command::Serve { .. } => unreachable!("handled by run"),
    }
    Ok(out)
}

fn context<'a>(
    ws: &'a Workspace,
    chat: &'a dyn qualcode_core::provider::ChatBackend,
    instructions: &'a [String],
) -> ExperimentContext<'a> {
    ExperimentContext {
        chat,
        embedder: ws.embedder(),
        config: ws.coding_config(),
        custom_instructions: instructions,
    }
}

