//! The iterative question-answer loop over one dataset.
//!
//! profile -> knowledge (once) -> roles (once) -> for each iteration:
//! raise -> converge -> answer each selected question -> extend history;
//! finally the history is consolidated into a summary. The run directory is
//! the only persistence: every stage writes its artifacts there and the
//! final [`RunReport`] indexes them.

use std::collections::HashSet;
use std::path::Path;
use std::time::Instant;

use futures::future::join_all;
use serde::{Deserialize, Serialize};

use crate::agent::{first_sentence, normalize_ws, AgentContext, AnalysisGoal};
use crate::artifacts::{
    RunDir, CASSETTE_FILE, EXECUTIONS_FILE, INPUT_DIR, PROFILE_FILE, QUESTIONS_DIR, REPORT_FILE, ROLES_FILE, SUMMARY_FILE,
};
use crate::config::RunConfig;
use crate::error::{split_fatal, Error, Result};
use crate::flags::{DegradedFlag, Flags};
use crate::gateway::cassette::bytes_digest;
use crate::gateway::{CallKind, Gateway};
use crate::insight::{answer_question, EngineSettings, QuestionOutcome, Strategy};
use crate::knowledge::{acquire_knowledge, KnowledgeSet};
use crate::profile::{profile_dataset, DatasetProfile};
use crate::prompts::Template;
use crate::questions::{converge, design_roles, fallback_roles, filter_pool, raise_pool, History, Question, RoleSpec};
use crate::sandbox::{Executor, PLOT_FILE};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetRef {
    pub file_name: String,
    pub sha256: String,
    /// Run-relative path of the copy the pipeline worked on.
    pub path: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionIndexEntry {
    pub iteration: usize,
    pub qid: String,
    pub dir: String,
    pub question: String,
    pub source_role: String,
    pub strategy: Option<Strategy>,
    pub versions: usize,
    pub chosen_version: Option<usize>,
    /// Run-relative plot of the chosen version, when it produced one.
    pub plot: Option<String>,
    pub skipped_reason: Option<String>,
}

/// Counts and sandbox-reported durations only, so reports of replayed runs
/// are byte-identical. Elapsed wall-clock time goes to the log.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunStats {
    pub iterations: usize,
    pub questions_selected: usize,
    pub questions_answered: usize,
    pub questions_skipped: usize,
    pub model_calls: usize,
    pub embedding_calls: usize,
    pub search_calls: usize,
    pub executions: usize,
    pub sandbox_wall_time_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: RunConfig,
    pub dataset: DatasetRef,
    pub goal: AnalysisGoal,
    pub profile: DatasetProfile,
    pub knowledge: KnowledgeSet,
    pub roles: Vec<RoleSpec>,
    pub history: History,
    pub summary: String,
    pub questions: Vec<QuestionIndexEntry>,
    pub flags: Vec<DegradedFlag>,
    pub stats: RunStats,
}

impl RunReport {
    pub fn degraded(&self) -> bool {
        !self.flags.is_empty()
    }

    pub fn load(run_dir: &Path) -> Result<Self> {
        let path = run_dir.join(REPORT_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Contract(format!("unreadable run report {}: {e}", path.display())))
    }
}

#[derive(Debug, Deserialize)]
struct SummaryReply {
    summary: String,
}

fn render_history_full(history: &History) -> String {
    history
        .entries()
        .iter()
        .enumerate()
        .map(|(i, e)| format!("{}. Question: {}\n   Insight: {}", i + 1, e.question.text, e.insight.text))
        .collect::<Vec<_>>()
        .join("\n")
}

/// The first sentence of every insight, one per line.
pub fn fallback_summary(history: &History) -> String {
    history
        .entries()
        .iter()
        .map(|e| format!("- {}", first_sentence(&e.insight.text)))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Consolidates the history; persistent failure concatenates the first
/// sentence of each insight, flagged.
pub async fn summarize(ctx: &AgentContext<'_>, history: &History) -> Result<String> {
    if history.is_empty() {
        return Err(Error::Contract("summarizing requires a non-empty history".into()));
    }
    let rendered = render_history_full(history);
    let prompt = Template::Summary.render(&[
        ("goal", ctx.goal()),
        ("profile", ctx.profile_doc()),
        ("history", &rendered),
    ]);
    let request = ctx.gateway.request("summarizer", prompt);
    let reply = ctx
        .gateway
        .complete_json::<SummaryReply, _>(&request, |r| {
            if r.summary.trim().is_empty() {
                Err("empty summary".into())
            } else {
                Ok(())
            }
        })
        .await;
    match split_fatal(reply)? {
        Ok(s) => Ok(s.value.summary.trim().to_string()),
        Err(e) => {
            ctx.flags.raise("summary", format!("concatenated-insights fallback: {e}"));
            Ok(fallback_summary(history))
        }
    }
}

/// Creates the run directory, refusing one that holds anything besides
/// replay recordings.
fn open_run_dir(path: &Path) -> Result<RunDir> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))?;
    let entries = std::fs::read_dir(path).map_err(|e| Error::io(path, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(path, e))?;
        let name = entry.file_name().to_string_lossy().to_string();
        if name != CASSETTE_FILE && name != EXECUTIONS_FILE {
            return Err(Error::Contract(format!(
                "run directory {} is not empty (found {name})",
                path.display()
            )));
        }
    }
    Ok(RunDir::new(path))
}

fn write_json(run: &RunDir, rel: &str, value: &impl Serialize) -> Result<()> {
    run.write_json(rel, value).map(|_| ()).map_err(|e| Error::io(run.path(rel), e))
}

fn stage_dataset(run: &RunDir, dataset: &Path) -> Result<(DatasetRef, std::path::PathBuf)> {
    let bytes = std::fs::read(dataset).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::Profile(crate::profile::ProfileError::FileNotFound(dataset.to_path_buf())),
        _ => Error::io(dataset, e),
    })?;
    let file_name = dataset
        .file_name()
        .map(|n| n.to_string_lossy().to_string())
        .ok_or_else(|| Error::Contract(format!("dataset path {} has no file name", dataset.display())))?;
    let rel = format!("{INPUT_DIR}/{file_name}");
    let copy = run.write_bytes(&rel, &bytes).map_err(|e| Error::io(run.path(&rel), e))?;
    Ok((
        DatasetRef {
            file_name,
            sha256: bytes_digest(&bytes),
            path: rel,
        },
        copy,
    ))
}

/// Runs the full loop into `config.run_dir` and writes `run_report.json`.
/// Fails only on unusable inputs or fatal gateway/sandbox errors.
pub async fn run_analysis(
    dataset: &Path,
    goal: &AnalysisGoal,
    config: &RunConfig,
    gateway: &Gateway,
    executor: &dyn Executor,
) -> Result<RunReport> {
    config.validate()?;
    let started = Instant::now();
    let run = open_run_dir(&config.run_dir)?;
    let (dataset_ref, dataset_copy) = stage_dataset(&run, dataset)?;
    let profile = profile_dataset(&dataset_copy, config.sample_k)?;
    write_json(&run, PROFILE_FILE, &profile)?;

    let flags = Flags::new();
    let ctx = AgentContext::new(gateway, flags.clone(), &profile, goal);

    let knowledge = acquire_knowledge(&ctx, config, &run).await?;
    let roles = match design_roles(&ctx, &knowledge, config.n_r).await {
        Ok(r) => r,
        Err(e) if e.is_fatal() => return Err(e),
        Err(e) => {
            flags.raise("questions.roles", format!("generic roles used: {e}"));
            fallback_roles(config.n_r)
        }
    };
    write_json(&run, ROLES_FILE, &roles)?;

    let settings = EngineSettings {
        n_fix: config.n_fix,
        timeout_secs: config.sandbox.timeout_secs,
        memory_cap_bytes: config.sandbox.memory_cap_bytes,
    };
    let mut history = History::new();
    let mut index = Vec::new();
    let mut stats = RunStats::default();
    let mut already_selected: HashSet<String> = HashSet::new();

    for iteration in 1..=config.n_iter {
        stats.iterations = iteration;
        let iter_dir = format!("{QUESTIONS_DIR}/iter-{iteration}");
        let raised = raise_pool(&ctx, &roles, &knowledge, &history, config.per_role_m, iteration).await?;
        let pool = filter_pool(raised.clone(), &already_selected);
        write_json(&run, &format!("{iter_dir}/pool.json"), &PoolArtifact { raised: &raised, pool: &pool })?;
        if pool.is_empty() {
            flags.raise("questions.pool", format!("iteration {iteration}: empty pool, nothing to answer"));
            continue;
        }
        let selected = converge(&ctx, &pool, &knowledge, &history, config.select_s).await?;
        write_json(&run, &format!("{iter_dir}/selected.json"), &selected)?;
        for s in &selected {
            already_selected.insert(normalize_ws(&s.question.text));
        }
        stats.questions_selected += selected.len();

        let tasks = selected.iter().enumerate().map(|(k, s)| {
            let qid = format!("iter-{iteration}/q-{}", k + 1);
            let (ctx, knowledge, run, dataset_copy, settings) = (&ctx, &knowledge, &run, &dataset_copy, &settings);
            async move { answer_question(ctx, knowledge, executor, run, dataset_copy, settings, &qid, s).await }
        });
        let outcomes: Vec<QuestionOutcome> = if config.parallel_questions {
            join_all(tasks).await.into_iter().collect::<Result<_>>()?
        } else {
            let mut out = Vec::new();
            for t in tasks {
                out.push(t.await?);
            }
            out
        };

        for outcome in outcomes {
            stats.executions += outcome.executions;
            stats.sandbox_wall_time_secs += outcome.sandbox_wall_time_secs;
            let plot = outcome.chosen_version.and_then(|v| {
                let rel = format!("{}/versions/{v}/{PLOT_FILE}", outcome.dir);
                run.path(&rel).is_file().then_some(rel)
            });
            index.push(QuestionIndexEntry {
                iteration,
                qid: outcome.qid.clone(),
                dir: outcome.dir.clone(),
                question: outcome.selected.question.text.clone(),
                source_role: outcome.selected.question.source_role.clone(),
                strategy: outcome.strategy,
                versions: outcome.versions,
                chosen_version: outcome.chosen_version,
                plot,
                skipped_reason: outcome.skipped_reason.clone(),
            });
            match outcome.insight {
                Some(insight) => {
                    stats.questions_answered += 1;
                    history.push(outcome.selected.question.clone(), insight);
                }
                None => stats.questions_skipped += 1,
            }
        }
    }

    let summary = if history.is_empty() {
        flags.raise("summary", "no question was answered; summary is empty");
        String::new()
    } else {
        summarize(&ctx, &history).await?
    };
    run.write_text(SUMMARY_FILE, &format!("{summary}\n"))
        .map_err(|e| Error::io(run.path(SUMMARY_FILE), e))?;

    stats.model_calls = gateway.call_count(CallKind::Completion);
    stats.embedding_calls = gateway.call_count(CallKind::Embedding);
    stats.search_calls = gateway.call_count(CallKind::Search);

    let report = RunReport {
        config: config.clone(),
        dataset: dataset_ref,
        goal: goal.clone(),
        profile,
        knowledge,
        roles,
        history,
        summary,
        questions: index,
        flags: flags.snapshot(),
        stats,
    };
    write_json(&run, REPORT_FILE, &report)?;
    tracing::info!(
        elapsed_secs = started.elapsed().as_secs_f64(),
        answered = report.stats.questions_answered,
        degraded = report.degraded(),
        "run finished"
    );
    Ok(report)
}

#[derive(Serialize)]
struct PoolArtifact<'a> {
    /// Every question raised this iteration, before filtering.
    raised: &'a [Question],
    /// Distinct questions not selected in earlier iterations.
    pool: &'a [Question],
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::insight::Insight;

    fn q(text: &str) -> Question {
        Question {
            text: text.into(),
            source_role: "A".into(),
            iteration: 1,
        }
    }

    #[test]
    fn fallback_summary_contains_first_sentences() {
        let mut h = History::new();
        h.push(q("a"), Insight::new("Sales peak in December. Details follow.", q("a"), vec![]));
        h.push(q("b"), Insight::new("Returns are flat", q("b"), vec![]));
        let s = fallback_summary(&h);
        assert!(s.contains("Sales peak in December."));
        assert!(!s.contains("Details follow"));
        assert!(s.contains("Returns are flat"));
    }

    #[test]
    fn run_dir_must_be_empty_except_recordings() {
        let tmp = tempfile::tempdir().unwrap();
        std::fs::write(tmp.path().join(CASSETTE_FILE), "{}").unwrap();
        assert!(open_run_dir(tmp.path()).is_ok());
        std::fs::write(tmp.path().join("profile.json"), "{}").unwrap();
        assert!(matches!(open_run_dir(tmp.path()), Err(Error::Contract(_))));
    }
}
