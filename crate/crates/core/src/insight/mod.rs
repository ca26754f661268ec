//! Answers one selected question: clarification, three-strategy code
//! generation and selection, then an execute/review/interpret/fix loop whose
//! versions are judged for the final insight.
//!
//! Loop invariants: the chain holds at most `n_fix + 1` versions, and
//! version `i > 0` exists only if version `i - 1` carried a FAIL review.

mod agents;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use agents::{
    clarify_question, code_preamble, final_judge, fix_code, generate_candidates, interpret, review_code, review_plot,
    select_code, JudgedInsight, Selection,
};

use crate::agent::AgentContext;
use crate::artifacts::{RunDir, QUESTIONS_DIR};
use crate::error::{Error, Result};
use crate::knowledge::KnowledgeSet;
use crate::questions::{Question, SelectedQuestion};
use crate::sandbox::{prepare_workdir, ExecutionOutput, ExecutionRequestDoc, Executor, PLOT_FILE};

pub const NO_INTERPRETABLE_RESULT: &str = "no interpretable result";
pub const NO_PLOT_FINDING: &str = "no plot produced";

pub const CODE_DIMENSIONS: [&str; 4] = [
    "requirement_alignment",
    "schema_compliance",
    "operational_risk",
    "data_integrity",
];
pub const PLOT_DIMENSIONS: [&str; 4] = ["relevance", "layout", "annotation", "clarity"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    DivideAndConquer,
    QueryPlan,
    NegativeReasoning,
}

impl Strategy {
    /// Also the fallback preference order of the selector.
    pub const ALL: [Strategy; 3] = [Strategy::DivideAndConquer, Strategy::QueryPlan, Strategy::NegativeReasoning];

    pub fn tag(self) -> &'static str {
        match self {
            Strategy::DivideAndConquer => "divide_and_conquer",
            Strategy::QueryPlan => "query_plan",
            Strategy::NegativeReasoning => "negative_reasoning",
        }
    }

    pub fn parse(tag: &str) -> Option<Self> {
        let tag = tag.trim().to_ascii_lowercase().replace([' ', '-'], "_");
        Strategy::ALL.into_iter().find(|s| s.tag() == tag)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClarifiedQuestion {
    pub original: Question,
    pub text: String,
    pub grounding_notes: String,
    pub columns: Vec<String>,
    /// Set when the rewriter failed and `text` is the original question.
    pub degraded: bool,
}

impl ClarifiedQuestion {
    pub fn identity(original: &Question) -> Self {
        Self {
            original: original.clone(),
            text: original.text.clone(),
            grounding_notes: String::new(),
            columns: Vec::new(),
            degraded: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodeCandidate {
    pub strategy: Strategy,
    pub reasoning: String,
    pub code: String,
    /// Why generation failed; a failed candidate is never selected.
    pub failure: Option<String>,
}

impl CodeCandidate {
    pub fn is_live(&self) -> bool {
        self.failure.is_none() && !self.code.trim().is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReviewSubject {
    Code,
    Plot,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    #[serde(rename = "PASS")]
    Pass,
    #[serde(rename = "FAIL")]
    Fail,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReviewOrigin {
    Reviewer,
    /// Synthesized from a failed execution.
    Sandbox,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Finding {
    pub dimension: String,
    pub issue: String,
}

/// Invariant: `verdict == Fail` iff `findings` is non-empty.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReviewReport {
    pub subject: ReviewSubject,
    pub verdict: Verdict,
    pub findings: Vec<Finding>,
    pub origin: ReviewOrigin,
    pub degraded: bool,
}

impl ReviewReport {
    pub fn pass(subject: ReviewSubject, degraded: bool) -> Self {
        Self {
            subject,
            verdict: Verdict::Pass,
            findings: Vec::new(),
            origin: ReviewOrigin::Reviewer,
            degraded,
        }
    }

    pub fn fail(subject: ReviewSubject, origin: ReviewOrigin, findings: Vec<Finding>) -> Self {
        assert!(!findings.is_empty(), "a FAIL review carries findings");
        Self {
            subject,
            verdict: Verdict::Fail,
            findings,
            origin,
            degraded: false,
        }
    }

    pub fn crash(output: &ExecutionOutput) -> Self {
        let status = serde_json::to_value(output.status).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default();
        let tail: String = {
            let chars: Vec<char> = output.stderr.chars().collect();
            chars[chars.len().saturating_sub(2000)..].iter().collect()
        };
        Self::fail(
            ReviewSubject::Code,
            ReviewOrigin::Sandbox,
            vec![Finding {
                dimension: "operational_risk".into(),
                issue: format!("execution finished with status {status}: {}", tail.trim()),
            }],
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Insight {
    pub text: String,
    pub question: Question,
    /// Run-relative paths of the artifacts the insight was derived from.
    pub evidence: Vec<String>,
    pub degraded: bool,
}

impl Insight {
    pub fn new(text: impl Into<String>, question: Question, evidence: Vec<String>) -> Self {
        Self {
            text: text.into(),
            question,
            evidence,
            degraded: false,
        }
    }

    pub fn uninterpretable(question: Question, evidence: Vec<String>) -> Self {
        Self {
            text: NO_INTERPRETABLE_RESULT.into(),
            question,
            evidence,
            degraded: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodeVersion {
    pub index: usize,
    pub code: String,
    pub reviews: Vec<ReviewReport>,
    /// Plot paths are relative to the run directory.
    pub execution: Option<ExecutionOutput>,
    pub insight: Option<Insight>,
}

impl CodeVersion {
    pub fn new(index: usize, code: impl Into<String>) -> Self {
        Self {
            index,
            code: code.into(),
            reviews: Vec::new(),
            execution: None,
            insight: None,
        }
    }

    pub fn has_fail(&self) -> bool {
        self.reviews.iter().any(|r| r.verdict == Verdict::Fail)
    }

    pub fn all_pass(&self) -> bool {
        !self.reviews.is_empty() && !self.has_fail()
    }

    pub fn executed_ok(&self) -> bool {
        self.execution.as_ref().is_some_and(ExecutionOutput::is_ok)
    }

    /// Insight eligible for the final judge.
    pub fn usable_insight(&self) -> Option<&Insight> {
        self.insight.as_ref().filter(|i| !i.degraded)
    }
}

/// Maps a free-form dimension label onto the closest allowed one.
pub fn normalize_dimension(label: &str, allowed: &[&str]) -> String {
    let key = label.trim().to_ascii_lowercase().replace([' ', '-'], "_");
    if let Some(exact) = allowed.iter().find(|d| **d == key) {
        return exact.to_string();
    }
    let best = allowed
        .iter()
        .max_by(|a, b| {
            strsim::normalized_levenshtein(&key, a)
                .partial_cmp(&strsim::normalized_levenshtein(&key, b))
                .expect("similarities are finite")
                .then_with(|| b.cmp(a))
        })
        .expect("dimension list is non-empty");
    tracing::info!(label, normalized = best, "review dimension normalized");
    best.to_string()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EngineSettings {
    pub n_fix: usize,
    pub timeout_secs: u64,
    pub memory_cap_bytes: u64,
}

/// What happened to one selected question.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionOutcome {
    pub qid: String,
    /// Run-relative directory holding every artifact of the question.
    pub dir: String,
    pub selected: SelectedQuestion,
    pub strategy: Option<Strategy>,
    pub versions: usize,
    pub chosen_version: Option<usize>,
    pub insight: Option<Insight>,
    pub skipped_reason: Option<String>,
    pub executions: usize,
    pub sandbox_wall_time_secs: f64,
}

struct Writer<'a> {
    run: &'a RunDir,
    dir: String,
}

impl Writer<'_> {
    fn rel(&self, name: &str) -> String {
        format!("{}/{}", self.dir, name)
    }

    fn text(&self, name: &str, body: &str) -> Result<String> {
        let rel = self.rel(name);
        self.run.write_text(&rel, body).map_err(|e| Error::io(self.run.path(&rel), e))?;
        Ok(rel)
    }

    fn json(&self, name: &str, value: &impl Serialize) -> Result<String> {
        let rel = self.rel(name);
        self.run.write_json(&rel, value).map_err(|e| Error::io(self.run.path(&rel), e))?;
        Ok(rel)
    }

    fn copy(&self, from: &Path, name: &str) -> Result<String> {
        let rel = self.rel(name);
        let to = self.run.path(&rel);
        std::fs::copy(from, &to).map_err(|e| Error::io(&to, e))?;
        Ok(rel)
    }
}

fn with_newline(s: &str) -> String {
    if s.ends_with('\n') {
        s.to_string()
    } else {
        format!("{s}\n")
    }
}

/// Runs the whole per-question pipeline, persisting artifacts under
/// `questions/<qid>/`. Only fatal errors are returned; a question that
/// yields no usable insight is reported through `skipped_reason`.
#[allow(clippy::too_many_arguments)]
pub async fn answer_question(
    ctx: &AgentContext<'_>,
    knowledge: &KnowledgeSet,
    executor: &dyn Executor,
    run: &RunDir,
    dataset_path: &Path,
    settings: &EngineSettings,
    qid: &str,
    selected: &SelectedQuestion,
) -> Result<QuestionOutcome> {
    let w = Writer {
        run,
        dir: format!("{QUESTIONS_DIR}/{qid}"),
    };
    let q = &selected.question;
    let mut outcome = QuestionOutcome {
        qid: qid.to_string(),
        dir: w.dir.clone(),
        selected: selected.clone(),
        strategy: None,
        versions: 0,
        chosen_version: None,
        insight: None,
        skipped_reason: None,
        executions: 0,
        sandbox_wall_time_secs: 0.0,
    };
    w.text(
        "question.txt",
        &format!("{}\n\nRole: {}\nJustification: {}\n", q.text, q.source_role, selected.justification),
    )?;

    let clarified = clarify_question(ctx, q, knowledge).await?;
    w.text(
        "clarified.txt",
        &format!("{}\n\nGrounding notes: {}\nColumns: {}\n", clarified.text, clarified.grounding_notes, clarified.columns.join(", ")),
    )?;

    let candidates = match generate_candidates(ctx, &clarified).await {
        Ok(c) => c,
        Err(Error::MultiPathExhausted) => {
            ctx.flags.raise("insight.candidates", format!("{qid}: every strategy failed; question skipped"));
            outcome.skipped_reason = Some(Error::MultiPathExhausted.to_string());
            w.json("outcome.json", &outcome)?;
            return Ok(outcome);
        }
        Err(e) => return Err(e),
    };
    for c in &candidates {
        let body = match &c.failure {
            None => with_newline(&c.code),
            Some(reason) => format!("# generation failed: {reason}\n"),
        };
        w.text(&format!("candidates/{}.code", c.strategy.tag()), &body)?;
    }
    let selection = select_code(ctx, &clarified, &candidates).await?;
    w.json("candidates/selection.json", &selection)?;
    outcome.strategy = Some(selection.strategy);

    let mut versions: Vec<CodeVersion> = Vec::new();
    let mut code = selection.code.clone();
    loop {
        let index = versions.len();
        let vdir = format!("versions/{index}");
        let mut version = CodeVersion::new(index, code.clone());
        w.text(&format!("{vdir}/code.py"), &with_newline(&code))?;

        let work = prepare_workdir(run.root(), qid, index, dataset_path)?;
        let dataset_copy = work.join(dataset_path.file_name().expect("dataset has a file name"));
        let request = ExecutionRequestDoc::new(&code, &work, &dataset_copy, settings.timeout_secs, settings.memory_cap_bytes);
        let mut output = executor.execute(&request).await?;
        outcome.executions += 1;
        outcome.sandbox_wall_time_secs += output.wall_time_secs;

        let mut plot_rel: Vec<String> = Vec::new();
        let mut plot_abs: Vec<PathBuf> = Vec::new();
        for (k, p) in output.plot_paths.iter().enumerate() {
            let name = if k == 0 { PLOT_FILE.to_string() } else { format!("plot-{}.png", k + 1) };
            let rel = w.copy(p, &format!("{vdir}/{name}"))?;
            plot_abs.push(run.path(&rel));
            plot_rel.push(rel);
        }
        output.plot_paths = plot_rel.iter().map(PathBuf::from).collect();
        let stdout_rel = w.text(&format!("{vdir}/stdout.txt"), &output.stdout)?;
        w.text(&format!("{vdir}/stderr.txt"), &output.stderr)?;

        version.reviews.push(review_code(ctx, &clarified, &code).await?);
        version
            .reviews
            .push(review_plot(ctx, &clarified, plot_abs.first().map(PathBuf::as_path)).await?);
        if !output.is_ok() {
            version.reviews.push(ReviewReport::crash(&output));
        }
        if output.is_ok() {
            let mut evidence = vec![stdout_rel];
            evidence.extend(plot_rel.iter().cloned());
            let insight = interpret(ctx, q, &output, &plot_abs, evidence).await?;
            w.text(&format!("{vdir}/insight.txt"), &with_newline(&insight.text))?;
            version.insight = Some(insight);
        }
        w.json(&format!("{vdir}/reviews.json"), &version.reviews)?;
        w.json(&format!("{vdir}/execution.json"), &output)?;
        version.execution = Some(output);

        let stop = version.all_pass() || index >= settings.n_fix;
        versions.push(version);
        if stop {
            break;
        }
        match fix_code(ctx, &clarified, versions.last().expect("just pushed")).await {
            Ok(fixed) => code = fixed,
            Err(e) if e.is_fatal() => return Err(e),
            Err(e) => {
                ctx.flags.raise("insight.fix", format!("{qid}: fix loop stopped at version {index}: {e}"));
                break;
            }
        }
    }
    outcome.versions = versions.len();

    match final_judge(ctx, q, &versions).await? {
        Some(judged) => {
            w.json("final.json", &judged)?;
            outcome.chosen_version = Some(judged.version);
            outcome.insight = Some(judged.insight);
        }
        None => {
            let reason = if versions.iter().any(CodeVersion::executed_ok) {
                "no version produced an interpretable insight"
            } else {
                "no version executed successfully"
            };
            ctx.flags.raise("insight.final", format!("{qid}: {reason}; question skipped"));
            outcome.skipped_reason = Some(reason.into());
        }
    }
    w.json("outcome.json", &outcome)?;
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strategy_tags_round_trip() {
        for s in Strategy::ALL {
            assert_eq!(Strategy::parse(s.tag()), Some(s));
        }
        assert_eq!(Strategy::parse("Query Plan"), Some(Strategy::QueryPlan));
        assert_eq!(Strategy::parse("brute_force"), None);
    }

    #[test]
    fn dimensions_normalize_to_nearest() {
        assert_eq!(normalize_dimension("Schema Compliance", &CODE_DIMENSIONS), "schema_compliance");
        assert_eq!(normalize_dimension("schema", &CODE_DIMENSIONS), "schema_compliance");
        assert_eq!(normalize_dimension("data integrty", &CODE_DIMENSIONS), "data_integrity");
        assert_eq!(normalize_dimension("overlap layout", &PLOT_DIMENSIONS), "layout");
    }

    #[test]
    fn version_verdict_helpers() {
        let mut v = CodeVersion::new(0, "x");
        assert!(!v.all_pass());
        v.reviews.push(ReviewReport::pass(ReviewSubject::Code, false));
        assert!(v.all_pass());
        v.reviews.push(ReviewReport::fail(
            ReviewSubject::Plot,
            ReviewOrigin::Reviewer,
            vec![Finding {
                dimension: "layout".into(),
                issue: "overlap".into(),
            }],
        ));
        assert!(v.has_fail() && !v.all_pass());
    }

    #[test]
    fn crash_report_is_an_operational_finding() {
        let out = ExecutionOutput::failed(crate::sandbox::ExecutionStatus::Error, "KeyError: 'region'", 0.1);
        let r = ReviewReport::crash(&out);
        assert_eq!(r.verdict, Verdict::Fail);
        assert_eq!(r.origin, ReviewOrigin::Sandbox);
        assert_eq!(r.findings[0].dimension, "operational_risk");
        assert!(r.findings[0].issue.contains("status error"));
        assert!(r.findings[0].issue.contains("KeyError"));
    }
}
