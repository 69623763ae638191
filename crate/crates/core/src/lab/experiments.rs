use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use super::sampling::{chronological_examples, sample_balanced, trial_seed, ExampleCandidate};
use super::stats::{pearson, CodeApplication};
use super::LabError;
use crate::annotation::{Codebook, SourceText};
use crate::cluster::kmeans;
use crate::coder::{code_inductively, CodingConfig, CodingRun, CodingSeed};
use crate::embedding::Embedder;
use crate::metrics::{alignment_report, mean, mhd, AlignmentReport, AnnotationLayer, ReportSummary};
use crate::prompt::FewShotExample;
use crate::provider::ChatBackend;

/// Corpus plus human annotations, the input to every experiment.
#[derive(Debug, Clone, Default)]
pub struct Dataset {
    texts: Vec<SourceText>,
    index: HashMap<String, usize>,
    pub human: AnnotationLayer,
    /// Descriptions for human codes; example codes are seeded from here.
    pub codebook: Codebook,
    /// Never used as examples or evaluation targets.
    pub excluded: BTreeSet<String>,
}

impl Dataset {
    pub fn new(mut texts: Vec<SourceText>, human: AnnotationLayer) -> Self {
        texts.sort_by_key(|t| t.created_order);
        let index = texts.iter().enumerate().map(|(i, t)| (t.id.clone(), i)).collect();
        Self {
            texts,
            index,
            human,
            codebook: Codebook::new(),
            excluded: BTreeSet::new(),
        }
    }

    pub fn with_codebook(mut self, codebook: Codebook) -> Self {
        self.codebook = codebook;
        self
    }

    pub fn with_excluded(mut self, ids: impl IntoIterator<Item = String>) -> Self {
        self.excluded.extend(ids);
        self
    }

    /// Texts in corpus order.
    pub fn texts(&self) -> &[SourceText] {
        &self.texts
    }

    pub fn text(&self, id: &str) -> Option<&SourceText> {
        self.index.get(id).map(|&i| &self.texts[i])
    }

    /// Annotated, non-excluded texts in corpus order.
    pub fn annotated(&self) -> Vec<&SourceText> {
        self.texts
            .iter()
            .filter(|t| self.human.contains_key(&t.id) && !self.excluded.contains(&t.id))
            .collect()
    }

    pub fn candidates(&self) -> Vec<ExampleCandidate> {
        self.annotated()
            .into_iter()
            .map(|t| ExampleCandidate {
                text_id: t.id.clone(),
                created_order: t.created_order,
                positive: self.human[&t.id].is_positive(),
            })
            .collect()
    }

    /// One entry per code on every human segment, by text order.
    pub fn code_log(&self) -> Vec<CodeApplication> {
        let mut log = Vec::new();
        for text in &self.texts {
            if let Some(ann) = self.human.get(&text.id) {
                for seg in &ann.segments {
                    log.extend(seg.codes.iter().map(|c| CodeApplication {
                        created_order: text.created_order,
                        label: c.clone(),
                    }));
                }
            }
        }
        log
    }

    fn resolve<'a>(&'a self, ids: &[String]) -> Result<Vec<&'a SourceText>, LabError> {
        ids.iter()
            .map(|id| self.text(id).ok_or_else(|| LabError::UnknownText(id.clone())))
            .collect()
    }

    /// Prompt inputs for the given example ids: the few-shot pairs and a
    /// codebook holding the codes those examples use.
    pub fn seed(&self, example_ids: &[String], custom_instructions: &[String]) -> Result<CodingSeed, LabError> {
        let mut examples = Vec::with_capacity(example_ids.len());
        let mut codebook = Codebook::new();
        for text in self.resolve(example_ids)? {
            let annotation = self
                .human
                .get(&text.id)
                .ok_or_else(|| LabError::UnknownText(text.id.clone()))?;
            for label in annotation.code_set() {
                let description = self.codebook.description(&label).unwrap_or_default().to_string();
                codebook.insert(label, description);
            }
            examples.push(FewShotExample {
                text: text.clone(),
                annotation: annotation.clone(),
            });
        }
        Ok(CodingSeed {
            custom_instructions: custom_instructions.to_vec(),
            codebook,
            examples,
        })
    }
}

/// The provider, embedder and coding settings an experiment runs with.
#[derive(Clone, Copy)]
pub struct ExperimentContext<'a> {
    pub chat: &'a dyn ChatBackend,
    pub embedder: &'a Embedder,
    pub config: &'a CodingConfig,
    pub custom_instructions: &'a [String],
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub run: CodingRun,
    pub report: AlignmentReport,
}

/// Codes `eval_ids` with the given examples and scores the result.
pub fn evaluate(
    dataset: &Dataset,
    run_id: &str,
    example_ids: &[String],
    eval_ids: &[String],
    ctx: &ExperimentContext<'_>,
) -> Result<Evaluation, LabError> {
    if eval_ids.is_empty() {
        return Err(LabError::EmptyEvaluation);
    }
    let seed = dataset.seed(example_ids, ctx.custom_instructions)?;
    let targets: Vec<SourceText> = dataset.resolve(eval_ids)?.into_iter().cloned().collect();
    let run = code_inductively(run_id, &targets, &seed, ctx.chat, ctx.config)?;
    let refs: Vec<&SourceText> = targets.iter().collect();
    let report = alignment_report(&dataset.human, &run.layer, &refs, Some(ctx.embedder))?;
    Ok(Evaluation { run, report })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearningCurvePoint {
    pub n_examples: usize,
    pub mean_iou: f64,
    pub mean_mhd: f64,
    pub n_evaluated: usize,
    pub n_failed: usize,
}

/// One point per size. Examples are chronological prefixes; every size is
/// scored on the same texts, namely the annotated texts outside the largest
/// example set.
pub fn learning_curve(
    dataset: &Dataset,
    sizes: &[usize],
    balance: bool,
    ctx: &ExperimentContext<'_>,
) -> Result<Vec<LearningCurvePoint>, LabError> {
    let Some(&largest) = sizes.iter().max() else {
        return Ok(Vec::new());
    };
    let candidates = dataset.candidates();
    let widest = chronological_examples(&candidates, largest, balance)?;
    let eval_ids: Vec<String> = candidates
        .iter()
        .map(|c| c.text_id.clone())
        .filter(|id| !widest.contains(id))
        .collect();
    if eval_ids.is_empty() {
        return Err(LabError::EmptyEvaluation);
    }

    let mut points = Vec::with_capacity(sizes.len());
    for &n in sizes {
        let examples = chronological_examples(&candidates, n, balance)?;
        let eval = evaluate(dataset, &format!("curve-n{n}"), &examples, &eval_ids, ctx)?;
        let summary = eval.report.summary();
        points.push(LearningCurvePoint {
            n_examples: n,
            mean_iou: summary.mean_iou.unwrap_or(0.0),
            mean_mhd: summary.mean_mhd.unwrap_or(0.0),
            n_evaluated: summary.n_texts,
            n_failed: eval.run.count(crate::coder::TextOutcome::Failed),
        });
    }
    Ok(points)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineReport {
    pub n_examples: usize,
    pub example_sets: Vec<Vec<String>>,
    pub per_trial: Vec<ReportSummary>,
    pub mean_iou: Option<f64>,
    pub mean_mhd: Option<f64>,
    pub mean_iou_coded: Option<f64>,
    pub mean_mhd_coded: Option<f64>,
}

/// Averages `trials` runs, each taught with a balanced uniform sample of `n`
/// examples from `pool` and scored on `eval_ids`.
pub fn random_baseline(
    dataset: &Dataset,
    pool: &[String],
    eval_ids: &[String],
    n: usize,
    trials: usize,
    seed: u64,
    ctx: &ExperimentContext<'_>,
) -> Result<BaselineReport, LabError> {
    let pool: BTreeSet<&String> = pool.iter().collect();
    let candidates: Vec<ExampleCandidate> = dataset
        .candidates()
        .into_iter()
        .filter(|c| pool.contains(&c.text_id))
        .collect();

    let mut example_sets = Vec::with_capacity(trials);
    let mut per_trial = Vec::with_capacity(trials);
    for t in 0..trials {
        let examples = sample_balanced(&candidates, n, trial_seed(seed, t))?;
        let eval = evaluate(dataset, &format!("baseline-n{n}-t{t}"), &examples, eval_ids, ctx)?;
        per_trial.push(eval.report.summary());
        example_sets.push(examples);
    }
    let avg = |f: fn(&ReportSummary) -> Option<f64>| mean(per_trial.iter().filter_map(f));
    Ok(BaselineReport {
        n_examples: n,
        mean_iou: avg(|s| s.mean_iou),
        mean_mhd: avg(|s| s.mean_mhd),
        mean_iou_coded: avg(|s| s.mean_iou_coded),
        mean_mhd_coded: avg(|s| s.mean_mhd_coded),
        example_sets,
        per_trial,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtrapolationPoint {
    pub text_id: String,
    /// MHD between the text's human codes and the codes used in the examples.
    pub example_mhd: f64,
    /// MHD between the text's human codes and the model's codes.
    pub output_mhd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtrapolationResult {
    pub cluster: usize,
    pub cluster_codes: Vec<String>,
    pub example_ids: Vec<String>,
    pub points: Vec<ExtrapolationPoint>,
    /// `None` when either coordinate has zero variance.
    pub pearson_r: Option<f64>,
}

/// Teaches with examples drawn from a single code cluster and measures how
/// output quality falls off with distance from that cluster.
///
/// Human codes are clustered into `k` groups. The cluster with the most
/// texts whose codes all fall inside it supplies up to `max_examples`
/// positive examples (chronologically), matched by as many negatives when
/// available. Every other annotated positive text is coded and plotted.
pub fn extrapolation_analysis(
    dataset: &Dataset,
    k: usize,
    seed: u64,
    max_examples: usize,
    ctx: &ExperimentContext<'_>,
) -> Result<ExtrapolationResult, LabError> {
    let annotated = dataset.annotated();
    let labels: Vec<String> = annotated
        .iter()
        .flat_map(|t| dataset.human[&t.id].code_set())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if k == 0 || labels.len() < k {
        return Err(LabError::TooFewClusters { codes: labels.len(), k });
    }
    let vectors: Vec<Vec<f64>> = ctx.embedder.embed(&labels)?.iter().map(|v| v.normalized()).collect();
    let clustering = kmeans(&vectors, k, seed)?;
    let cluster_of: BTreeMap<&str, usize> = labels
        .iter()
        .zip(&clustering.assignments)
        .map(|(l, &c)| (l.as_str(), c))
        .collect();

    // positive texts whose codes sit in a single cluster, grouped by cluster
    let mut pure: Vec<Vec<&SourceText>> = vec![Vec::new(); k];
    for text in &annotated {
        let codes = dataset.human[&text.id].code_set();
        let Some(first) = codes.first() else { continue };
        let c = cluster_of[first.as_str()];
        if codes.iter().all(|l| cluster_of[l.as_str()] == c) {
            pure[c].push(text);
        }
    }
    let (cluster, members) = pure
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.len().cmp(&b.1.len()).then(b.0.cmp(&a.0)))
        .expect("k > 0");
    let positives: Vec<&SourceText> = members.iter().take(max_examples).copied().collect();
    if positives.is_empty() {
        return Err(LabError::InsufficientExamples { needed: 1, available: 0 });
    }
    let negatives = annotated
        .iter()
        .filter(|t| !dataset.human[&t.id].is_positive())
        .take(positives.len());
    let mut example_texts: Vec<&SourceText> = positives.iter().copied().chain(negatives.copied()).collect();
    example_texts.sort_by_key(|t| t.created_order);
    let example_ids: Vec<String> = example_texts.iter().map(|t| t.id.clone()).collect();

    let example_codes: Vec<String> = positives
        .iter()
        .flat_map(|t| dataset.human[&t.id].code_set())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let eval_ids: Vec<String> = annotated
        .iter()
        .filter(|t| dataset.human[&t.id].is_positive() && !example_ids.contains(&t.id))
        .map(|t| t.id.clone())
        .collect();
    let eval = evaluate(dataset, "extrapolation", &example_ids, &eval_ids, ctx)?;

    let mut points = Vec::with_capacity(eval_ids.len());
    for row in &eval.report.per_text {
        let human_codes = dataset.human[&row.text_id].code_set();
        let x = mhd(&human_codes, &example_codes, ctx.embedder)?.value;
        let y = match row.mhd {
            Some(v) => v,
            None => mhd(&human_codes, &eval.run.layer[&row.text_id].code_set(), ctx.embedder)?.value,
        };
        points.push(ExtrapolationPoint {
            text_id: row.text_id.clone(),
            example_mhd: x,
            output_mhd: y,
        });
    }
    let xs: Vec<f64> = points.iter().map(|p| p.example_mhd).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.output_mhd).collect();
    let mut cluster_codes: Vec<String> = labels
        .iter()
        .filter(|l| cluster_of[l.as_str()] == cluster)
        .cloned()
        .collect();
    cluster_codes.sort();
    Ok(ExtrapolationResult {
        cluster,
        cluster_codes,
        example_ids,
        pearson_r: pearson(&xs, &ys),
        points,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::annotation::{parse_markup, Annotation, Annotator};
    use crate::provider::{FidelityChat, RetryPolicy, ScriptedChat};

    fn corpus() -> (Vec<SourceText>, AnnotationLayer, HashMap<String, String>) {
        let marked = [
            "**I love cats**<sup>pets</sup> and dogs.",
            "Nothing to see here.",
            "The **rent is high**<sup>housing cost</sup> this year.",
            "Plain words again.",
            "My **dog barks**<sup>pets</sup> at night.",
            "Still nothing.",
            "We **moved flats**<sup>moving</sup> twice.",
            "Quiet afternoon.",
            "**Landlord raised rent**<sup>housing cost</sup> again.",
            "Just a remark.",
        ];
        let mut texts = Vec::new();
        let mut layer = AnnotationLayer::new();
        let mut reference = HashMap::new();
        for (i, m) in marked.iter().enumerate() {
            let (plain, segments) = parse_markup(m).unwrap();
            let id = format!("t{i}");
            texts.push(SourceText::new(&id, &plain, i as i64));
            layer.insert(id.clone(), Annotation::new(&id, Annotator::Human, segments).unwrap());
            reference.insert(plain, m.to_string());
        }
        (texts, layer, reference)
    }

    fn config() -> CodingConfig {
        CodingConfig {
            retry: RetryPolicy::immediate(0),
            ..CodingConfig::default()
        }
    }

    #[test]
    fn empty_sizes_give_empty_curve() {
        let (texts, layer, _) = corpus();
        let ds = Dataset::new(texts, layer);
        let embedder = Embedder::mock();
        let cfg = config();
        let ctx = ExperimentContext {
            chat: &ScriptedChat::new(),
            embedder: &embedder,
            config: &cfg,
            custom_instructions: &[],
        };
        assert!(learning_curve(&ds, &[], true, &ctx).unwrap().is_empty());
    }

    #[test]
    fn perfect_provider_scores_one() {
        let (texts, layer, reference) = corpus();
        let ds = Dataset::new(texts, layer);
        let embedder = Embedder::mock();
        let cfg = config();
        let chat = FidelityChat::new(reference, 3, |_| 1.0);
        let ctx = ExperimentContext {
            chat: &chat,
            embedder: &embedder,
            config: &cfg,
            custom_instructions: &[],
        };
        let curve = learning_curve(&ds, &[2, 4], true, &ctx).unwrap();
        assert_eq!(curve.len(), 2);
        for p in &curve {
            assert_eq!(p.n_evaluated, 6);
            assert!((p.mean_iou - 1.0).abs() < 1e-12);
            assert!(p.mean_mhd.abs() < 1e-12);
        }
    }

    #[test]
    fn excluded_texts_are_never_used() {
        let (texts, layer, _) = corpus();
        let ds = Dataset::new(texts, layer).with_excluded(["t0".to_string(), "t9".to_string()]);
        let ids: Vec<String> = ds.candidates().into_iter().map(|c| c.text_id).collect();
        assert!(!ids.contains(&"t0".to_string()) && !ids.contains(&"t9".to_string()));
        assert_eq!(ids.len(), 8);
    }

    #[test]
    fn code_log_follows_text_order() {
        let (texts, layer, _) = corpus();
        let ds = Dataset::new(texts, layer);
        let labels: Vec<String> = ds.code_log().into_iter().map(|a| a.label).collect();
        assert_eq!(labels, vec!["pets", "housing cost", "pets", "moving", "housing cost"]);
    }

    #[test]
    fn seed_codebook_holds_example_codes_only() {
        let (texts, layer, _) = corpus();
        let mut book = Codebook::new();
        book.insert("pets", "animals at home");
        book.insert("moving", "changing homes");
        let ds = Dataset::new(texts, layer).with_codebook(book);
        let seed = ds.seed(&["t0".into(), "t1".into()], &[]).unwrap();
        assert_eq!(seed.codebook.labels().collect::<Vec<_>>(), vec!["pets"]);
        assert_eq!(seed.codebook.description("pets"), Some("animals at home"));
        assert_eq!(seed.examples.len(), 2);
    }

    #[test]
    fn extrapolation_needs_enough_codes() {
        let (texts, layer, reference) = corpus();
        let ds = Dataset::new(texts, layer);
        let embedder = Embedder::mock();
        let cfg = config();
        let chat = FidelityChat::new(reference, 3, |_| 1.0);
        let ctx = ExperimentContext {
            chat: &chat,
            embedder: &embedder,
            config: &cfg,
            custom_instructions: &[],
        };
        assert!(matches!(
            extrapolation_analysis(&ds, 5, 1, 4, &ctx),
            Err(LabError::TooFewClusters { codes: 3, k: 5 })
        ));
        let result = extrapolation_analysis(&ds, 2, 1, 4, &ctx).unwrap();
        assert!(!result.points.is_empty());
        for p in &result.points {
            assert!(p.output_mhd.abs() < 1e-12, "perfect provider reproduces codes");
        }
    }
}
