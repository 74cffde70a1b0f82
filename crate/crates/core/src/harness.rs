//! Prompt construction, the prompts/completions file contract, response
//! parsing and accuracy reports.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedstore::{write_atomic, EmbeddingDataset, ExampleRecord, StoreError, Task};
use crate::samplers::{Method, SelectionResult};

pub const SCHEMA_VERSION: u32 = 1;

const HALUEVAL_KEY: &str = "Hallucination response: 'yes' = hallucinated, 'no' = not hallucinated.\n\n";
const QA_PREAMBLE: &str = "You are an unbiased document-grounded fact checker. \
You are provided a Knowledge, a question based on the knowledge and a answer based on the question. \
Based on the provided knowledge for the question identify if the corresponding answer is hallucinated or not.\n";
const DIALOGUE_PREAMBLE: &str = "You are an unbiased document-grounded fact checker. \
You are provided a Knowledge, a dialogue history based on the knowledge and a response \
based on the Knowledge and the dialogue history. \
Based on the provided knowledge and dialogue history identify if the corresponding \
response is hallucinated or not.\n";
const SUMMARY_PREAMBLE: &str = "You are an unbiased document-grounded fact checker. \
Identify if the corresponding summary for the given document \
is hallucinated or not.\n";
const FEVER_INSTRUCTION: &str = "You are an unbiased fact checker. \
Classify the following claim as supported if it is valid \
or refuted if it is invalid:\n";

pub const HALUEVAL_CUE: &str = "Hallucination response: [BEGIN]";
pub const FEVER_CUE: &str = "[BEGIN]\n";

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("task {task}, record {id}: missing field {field:?}")]
    MissingField { task: Task, id: usize, field: String },
    #[error("demonstration {id} is also in the evaluation set")]
    Leakage { id: usize },
    #[error("no demonstrations selected for query {id}")]
    NoSelection { id: usize },
    #[error("no completion for query {id}")]
    MissingCompletion { id: usize },
    #[error("duplicate completion for query {id}")]
    DuplicateCompletion { id: usize },
    #[error("completion for unknown query {id}")]
    UnexpectedCompletion { id: usize },
    #[error("cannot merge reports: {0}")]
    Sweep(String),
    #[error("{path} line {line}: {source}")]
    Json {
        path: String,
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("unsupported schema version {found} in {path}")]
    SchemaVersion { path: String, found: u32 },
    #[error(transparent)]
    Store(#[from] StoreError),
}

fn field<'a>(task: Task, rec: &'a ExampleRecord, name: &str) -> Result<&'a str, HarnessError> {
    rec.fields.get(name).map(String::as_str).ok_or_else(|| HarnessError::MissingField {
        task,
        id: rec.id,
        field: name.to_string(),
    })
}

/// The demonstration terminator the templates put after a label.
pub fn demonstration_answer(task: Task, label: &str) -> String {
    match task {
        Task::Fever => format!("[BEGIN]\n{label}\n[DONE]\n\n"),
        _ => format!("[BEGIN]{label}[DONE]\n\n"),
    }
}

/// The trailing cue every prompt for `task` ends with.
pub fn generation_cue(task: Task) -> &'static str {
    match task {
        Task::Fever => FEVER_CUE,
        _ => HALUEVAL_CUE,
    }
}

/// Instantiate the task's template with `demos` (in order) and the query.
pub fn build_prompt(task: Task, demos: &[&ExampleRecord], query: &ExampleRecord) -> Result<String, HarnessError> {
    let mut p = String::new();
    match task {
        Task::HaluevalQa => {
            p.push_str(QA_PREAMBLE);
            p.push_str(HALUEVAL_KEY);
            for d in demos {
                p.push_str(&format!(
                    "Knowledge: {}\nQuestion: {}\nAnswer: {}\nHallucination response: {}",
                    field(task, d, "knowledge")?,
                    field(task, d, "question")?,
                    field(task, d, "answer")?,
                    demonstration_answer(task, &d.label)
                ));
            }
            p.push_str(&format!(
                "Knowledge: {}\nquestion: {}\nAnswer: {}\n{HALUEVAL_CUE}",
                field(task, query, "knowledge")?,
                field(task, query, "question")?,
                field(task, query, "answer")?
            ));
        }
        Task::HaluevalDialogue => {
            p.push_str(DIALOGUE_PREAMBLE);
            p.push_str(HALUEVAL_KEY);
            for d in demos {
                p.push_str(&format!(
                    "Knowledge: {}\nDialogue history: {}\nResponse: {}\nHallucination response: {}",
                    field(task, d, "knowledge")?,
                    field(task, d, "dialogue_history")?,
                    field(task, d, "response")?,
                    demonstration_answer(task, &d.label)
                ));
            }
            p.push_str(&format!(
                "Knowledge: {}\nDialogue history: {}\nResponse: {}\n{HALUEVAL_CUE}",
                field(task, query, "knowledge")?,
                field(task, query, "dialogue_history")?,
                field(task, query, "response")?
            ));
        }
        Task::HaluevalSummarization => {
            p.push_str(SUMMARY_PREAMBLE);
            p.push_str(HALUEVAL_KEY);
            for d in demos {
                p.push_str(&format!(
                    "Document: {}\nSummary: {}\nHallucination response: {}",
                    field(task, d, "document")?,
                    field(task, d, "summary")?,
                    demonstration_answer(task, &d.label)
                ));
            }
            p.push_str(&format!(
                "Document: {}\nSummary: {}\n{HALUEVAL_CUE}",
                field(task, query, "document")?,
                field(task, query, "summary")?
            ));
        }
        Task::Fever => {
            for d in demos {
                p.push_str(FEVER_INSTRUCTION);
                p.push_str(&format!("Claim: {}\n{}", field(task, d, "claim")?, demonstration_answer(task, &d.label)));
            }
            p.push_str(FEVER_INSTRUCTION);
            p.push_str(&format!("Claim: {}\n{FEVER_CUE}", field(task, query, "claim")?));
        }
    }
    Ok(p)
}

/// Extract the predicted label from a completion, or `None` when no label
/// token is found.
pub fn parse_response(task: Task, completion: &str) -> Option<&'static str> {
    let after = completion.rfind("[BEGIN]").map_or(completion, |i| &completion[i + "[BEGIN]".len()..]);
    let body = after.find("[DONE]").map_or(after, |i| &after[..i]);
    let lowered = body.trim().to_lowercase();
    let labels = task.labels();
    lowered.split(|c: char| !c.is_alphanumeric()).find_map(|tok| labels.iter().find(|&&l| l == tok).copied())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptMetadata {
    pub method: Option<Method>,
    pub shots: usize,
    pub temperature: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptRecord {
    pub schema_version: u32,
    pub query_id: usize,
    pub task: Task,
    pub prompt_text: String,
    pub demo_ids: Vec<usize>,
    pub metadata: PromptMetadata,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRecord {
    #[serde(default = "default_schema")]
    pub schema_version: u32,
    pub query_id: usize,
    pub completion_text: String,
    #[serde(default)]
    pub finish_reason: Option<String>,
    /// Perplexity the runner measured for this prompt, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub perplexity: Option<f64>,
}

fn default_schema() -> u32 {
    SCHEMA_VERSION
}

/// Which demonstrations go with which query.
#[derive(Debug, Clone)]
pub enum DemoPlan {
    ZeroShot,
    /// One demo set for every query.
    Shared(SelectionResult),
    /// A demo set per query id.
    PerQuery(BTreeMap<usize, SelectionResult>),
}

impl DemoPlan {
    pub fn method(&self) -> Option<Method> {
        match self {
            DemoPlan::ZeroShot => None,
            DemoPlan::Shared(s) => Some(s.method),
            DemoPlan::PerQuery(m) => m.values().next().map(|s| s.method),
        }
    }

    /// Build a plan from selection lines: one line without a query id is a
    /// shared set, otherwise every line must name its query.
    pub fn from_selections(selections: Vec<SelectionResult>) -> Self {
        if selections.is_empty() {
            return DemoPlan::ZeroShot;
        }
        if selections.len() == 1 && selections[0].query_id.is_none() {
            return DemoPlan::Shared(selections.into_iter().next().expect("one selection"));
        }
        DemoPlan::PerQuery(selections.into_iter().filter_map(|s| s.query_id.map(|q| (q, s))).collect())
    }

    fn demos_for(&self, query: usize) -> Result<&[usize], HarnessError> {
        match self {
            DemoPlan::ZeroShot => Ok(&[]),
            DemoPlan::Shared(s) => Ok(&s.demo_ids),
            DemoPlan::PerQuery(m) => {
                m.get(&query).map(|s| s.demo_ids.as_slice()).ok_or(HarnessError::NoSelection { id: query })
            }
        }
    }
}

/// Build one PromptRecord per evaluation id. Fails if any demo is itself
/// evaluated.
pub fn build_prompt_records(
    dataset: &EmbeddingDataset,
    plan: &DemoPlan,
    eval_ids: &[usize],
    temperature: f64,
) -> Result<Vec<PromptRecord>, HarnessError> {
    let task = dataset.task();
    let evaluated: BTreeSet<usize> = eval_ids.iter().copied().collect();
    let mut out = Vec::with_capacity(eval_ids.len());
    for &qid in eval_ids {
        let demo_ids = plan.demos_for(qid)?;
        if let Some(&id) = demo_ids.iter().find(|id| evaluated.contains(id)) {
            return Err(HarnessError::Leakage { id });
        }
        let demos = demo_ids.iter().map(|&id| dataset.get(id)).collect::<Result<Vec<_>, _>>()?;
        let query = dataset.get(qid)?;
        out.push(PromptRecord {
            schema_version: SCHEMA_VERSION,
            query_id: qid,
            task,
            prompt_text: build_prompt(task, &demos, query)?,
            demo_ids: demo_ids.to_vec(),
            metadata: PromptMetadata { method: plan.method(), shots: demo_ids.len(), temperature },
        });
    }
    Ok(out)
}

/// Write prompts as JSON Lines and return how many were written.
pub fn emit_prompts(
    dataset: &EmbeddingDataset,
    plan: &DemoPlan,
    eval_ids: &[usize],
    temperature: f64,
    out_path: &Path,
) -> Result<usize, HarnessError> {
    let records = build_prompt_records(dataset, plan, eval_ids, temperature)?;
    write_jsonl(out_path, &records)?;
    Ok(records.len())
}

pub fn to_jsonl<T: Serialize>(items: &[T]) -> String {
    let mut s = String::new();
    for item in items {
        s.push_str(&serde_json::to_string(item).expect("records serialise"));
        s.push('\n');
    }
    s
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), HarnessError> {
    Ok(write_atomic(path, to_jsonl(items).as_bytes())?)
}

/// Read JSON Lines, skipping blank lines.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, HarnessError> {
    let file = fs::File::open(path).map_err(|e| StoreError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| StoreError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|source| HarnessError::Json {
            path: path.display().to_string(),
            line: i + 1,
            source,
        })?);
    }
    Ok(out)
}

pub fn read_prompts(path: &Path) -> Result<Vec<PromptRecord>, HarnessError> {
    let records: Vec<PromptRecord> = read_jsonl(path)?;
    check_versions(path, records.iter().map(|r| r.schema_version))?;
    Ok(records)
}

pub fn read_completions(path: &Path) -> Result<Vec<CompletionRecord>, HarnessError> {
    let records: Vec<CompletionRecord> = read_jsonl(path)?;
    check_versions(path, records.iter().map(|r| r.schema_version))?;
    Ok(records)
}

fn check_versions(path: &Path, mut versions: impl Iterator<Item = u32>) -> Result<(), HarnessError> {
    match versions.find(|&v| v != SCHEMA_VERSION) {
        Some(found) => Err(HarnessError::SchemaVersion { path: path.display().to_string(), found }),
        None => Ok(()),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub query_id: usize,
    pub gold: String,
    pub predicted: Option<String>,
    pub correct: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelStats {
    pub n: usize,
    pub correct: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerplexitySummary {
    pub n: usize,
    pub mean: f64,
    /// Sample standard deviation; absent for a single value.
    pub std: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub method: Option<Method>,
    pub task: Task,
    pub shots: usize,
    pub temperature: f64,
    pub n_examples: usize,
    pub n_correct: usize,
    pub accuracy: f64,
    pub n_unparseable: usize,
    pub per_label: BTreeMap<String, LabelStats>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub perplexity: Option<PerplexitySummary>,
    pub verdicts: Vec<Verdict>,
}

/// Run metadata copied into a report.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportContext {
    pub method: Option<Method>,
    pub task: Task,
    pub shots: usize,
    pub temperature: f64,
}

impl ReportContext {
    /// Take the context from the first prompt of a prompts file.
    pub fn from_prompts(task: Task, prompts: &[PromptRecord]) -> Self {
        let meta = prompts.first().map(|p| p.metadata.clone());
        ReportContext {
            method: meta.as_ref().and_then(|m| m.method),
            task,
            shots: meta.as_ref().map_or(0, |m| m.shots),
            temperature: meta.map_or(0.0, |m| m.temperature),
        }
    }
}

pub fn summarize_perplexity(values: &[f64]) -> Option<PerplexitySummary> {
    if values.is_empty() {
        return None;
    }
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let std = (n > 1).then(|| (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt());
    Some(PerplexitySummary { n, mean, std })
}

/// Score completions against gold labels (query id → label).
pub fn score(
    completions: &[CompletionRecord],
    gold: &BTreeMap<usize, String>,
    ctx: &ReportContext,
) -> Result<EvalReport, HarnessError> {
    let mut by_id: BTreeMap<usize, &CompletionRecord> = BTreeMap::new();
    for c in completions {
        if !gold.contains_key(&c.query_id) {
            return Err(HarnessError::UnexpectedCompletion { id: c.query_id });
        }
        if by_id.insert(c.query_id, c).is_some() {
            return Err(HarnessError::DuplicateCompletion { id: c.query_id });
        }
    }
    let mut verdicts = Vec::with_capacity(gold.len());
    let mut per_label: BTreeMap<String, LabelStats> = BTreeMap::new();
    let mut perplexities = Vec::new();
    for (&id, label) in gold {
        let c = by_id.get(&id).ok_or(HarnessError::MissingCompletion { id })?;
        let predicted = parse_response(ctx.task, &c.completion_text);
        let correct = predicted == Some(label.as_str());
        let stats = per_label.entry(label.clone()).or_insert(LabelStats { n: 0, correct: 0, accuracy: 0.0 });
        stats.n += 1;
        stats.correct += usize::from(correct);
        perplexities.extend(c.perplexity);
        verdicts.push(Verdict { query_id: id, gold: label.clone(), predicted: predicted.map(str::to_string), correct });
    }
    for stats in per_label.values_mut() {
        stats.accuracy = stats.correct as f64 / stats.n as f64;
    }
    let n_examples = verdicts.len();
    let n_correct = verdicts.iter().filter(|v| v.correct).count();
    Ok(EvalReport {
        schema_version: SCHEMA_VERSION,
        method: ctx.method,
        task: ctx.task,
        shots: ctx.shots,
        temperature: ctx.temperature,
        n_examples,
        n_correct,
        accuracy: if n_examples == 0 { 0.0 } else { n_correct as f64 / n_examples as f64 },
        n_unparseable: verdicts.iter().filter(|v| v.predicted.is_none()).count(),
        per_label,
        perplexity: if perplexities.len() == n_examples { summarize_perplexity(&perplexities) } else { None },
        verdicts,
    })
}

/// The temperature grid 0.0, 0.1, ..., 1.0.
pub fn sweep_temperatures() -> Vec<f64> {
    (0..=10).map(|i| f64::from(i) / 10.0).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub temperature: f64,
    pub accuracy: f64,
    pub n_unparseable: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub perplexity: Option<PerplexitySummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub schema_version: u32,
    pub method: Option<Method>,
    pub task: Task,
    pub shots: usize,
    pub points: Vec<SweepPoint>,
    pub accuracy_min: f64,
    pub accuracy_max: f64,
    pub accuracy_range: f64,
}

/// Merge per-temperature reports of one method/task/shots into a sweep,
/// sorted by temperature.
pub fn merge_sweep(reports: &[EvalReport]) -> Result<SweepReport, HarnessError> {
    let first = reports.first().ok_or_else(|| HarnessError::Sweep("no reports".into()))?;
    for r in reports {
        if (r.method, r.task, r.shots) != (first.method, first.task, first.shots) {
            return Err(HarnessError::Sweep(format!(
                "report at temperature {} differs in method, task or shots",
                r.temperature
            )));
        }
    }
    let mut points: Vec<SweepPoint> = reports
        .iter()
        .map(|r| SweepPoint {
            temperature: r.temperature,
            accuracy: r.accuracy,
            n_unparseable: r.n_unparseable,
            perplexity: r.perplexity.clone(),
        })
        .collect();
    points.sort_by(|a, b| a.temperature.total_cmp(&b.temperature));
    if let Some(w) = points.windows(2).find(|w| w[0].temperature == w[1].temperature) {
        return Err(HarnessError::Sweep(format!("temperature {} appears twice", w[0].temperature)));
    }
    let accuracy_min = points.iter().map(|p| p.accuracy).fold(f64::INFINITY, f64::min);
    let accuracy_max = points.iter().map(|p| p.accuracy).fold(f64::NEG_INFINITY, f64::max);
    Ok(SweepReport {
        schema_version: SCHEMA_VERSION,
        method: first.method,
        task: first.task,
        shots: first.shots,
        points,
        accuracy_min,
        accuracy_max,
        accuracy_range: accuracy_max - accuracy_min,
    })
}
