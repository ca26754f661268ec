//! Scores a finished run directory against a gold standard.
//!
//! Reads only `run_report.json` and the per-question artifacts it indexes,
//! so any run (live, recorded or replayed) can be evaluated later.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::artifacts::RunDir;
use crate::error::{Error, Result};
use crate::eval::{coverage, diversity, judge_plot, score_insights, score_summary, Judge, MetricError, MetricResult, PlotScore};
use crate::flags::{DegradedFlag, Flags};
use crate::gateway::Gateway;
use crate::orchestrator::RunReport;

pub const METRICS_FILE: &str = "metrics.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GoldStandard {
    pub insights: Vec<String>,
    #[serde(default)]
    pub summary: Option<String>,
}

impl GoldStandard {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let gold: Self =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("invalid gold file {}: {e}", path.display())))?;
        if gold.insights.is_empty() {
            return Err(Error::Config("gold file lists no insights".into()));
        }
        Ok(gold)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotEntry {
    pub qid: String,
    pub question: String,
    pub plot: Option<String>,
    pub score: PlotScore,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotMeans {
    pub relevance: f64,
    pub clarity: f64,
    pub annotation: f64,
    pub interpretability: f64,
    pub overall: f64,
}

impl PlotMeans {
    fn of(scores: &[PlotScore]) -> Option<Self> {
        if scores.is_empty() {
            return None;
        }
        let n = scores.len() as f64;
        let mean = |f: fn(&PlotScore) -> u8| scores.iter().map(|s| f(s) as f64).sum::<f64>() / n;
        Some(Self {
            relevance: mean(|s| s.relevance),
            clarity: mean(|s| s.clarity),
            annotation: mean(|s| s.annotation),
            interpretability: mean(|s| s.interpretability),
            overall: scores.iter().map(PlotScore::mean).sum::<f64>() / n,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub insight_level: Option<MetricResult>,
    pub summary_level: Option<MetricResult>,
    pub plots: Vec<PlotEntry>,
    pub plot_means: Option<PlotMeans>,
    /// Over embeddings of every selected question.
    pub diversity: Option<f64>,
    pub coverage: Option<f64>,
    pub flags: Vec<DegradedFlag>,
}

/// Fatal gateway errors abort; anything else leaves the metric unset.
fn settle<T>(stage: &str, result: std::result::Result<T, MetricError>, flags: &Flags) -> Result<Option<T>> {
    match result {
        Ok(v) => Ok(Some(v)),
        Err(MetricError::Gateway(e)) if e.is_fatal() => Err(Error::Gateway(e)),
        Err(e) => {
            flags.raise(stage, e.to_string());
            Ok(None)
        }
    }
}

/// Scores the run and writes `metrics.json` into its directory.
pub async fn evaluate_run(run_dir: &Path, gold: &GoldStandard, gateway: &Gateway, parallelism: usize) -> Result<MetricsReport> {
    let report = RunReport::load(run_dir)?;
    let run = RunDir::new(run_dir);
    let flags = Flags::new();
    let judge = Judge::new(gateway, flags.clone()).with_parallelism(parallelism);

    let predicted: Vec<String> = report.history.entries().iter().map(|e| e.insight.text.clone()).collect();
    let insight_level = settle("eval.insights", score_insights(&predicted, &gold.insights, &judge).await, &flags)?;

    let summary_level = match &gold.summary {
        Some(g) => settle("eval.summary", score_summary(&report.summary, g, &judge).await, &flags)?,
        None => None,
    };

    // Skipped questions and missing plots score zero rather than vanish.
    let mut plots = Vec::new();
    for q in &report.questions {
        let abs = q.plot.as_ref().map(|p| run.path(p));
        let score = settle("eval.plots", judge_plot(&q.question, abs.as_deref(), &judge).await, &flags)?
            .unwrap_or(PlotScore::ZERO);
        plots.push(PlotEntry {
            qid: q.qid.clone(),
            question: q.question.clone(),
            plot: q.plot.clone(),
            score,
        });
    }
    let plot_means = PlotMeans::of(&plots.iter().map(|p| p.score).collect::<Vec<_>>());

    let texts: Vec<String> = report.questions.iter().map(|q| q.question.clone()).collect();
    let (diversity_v, coverage_v) = if texts.is_empty() {
        flags.raise("eval.embeddings", "no selected questions to embed");
        (None, None)
    } else {
        match settle("eval.embeddings", gateway.embed(&texts).await.map_err(MetricError::from), &flags)? {
            Some(vectors) => (
                settle("eval.diversity", diversity(&vectors), &flags)?,
                settle("eval.coverage", coverage(&vectors), &flags)?,
            ),
            None => (None, None),
        }
    };

    let metrics = MetricsReport {
        insight_level,
        summary_level,
        plots,
        plot_means,
        diversity: diversity_v,
        coverage: coverage_v,
        flags: flags.snapshot(),
    };
    run.write_json(METRICS_FILE, &metrics)
        .map_err(|e| Error::io(run.path(METRICS_FILE), e))?;
    Ok(metrics)
}
