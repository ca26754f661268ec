//! Measurement kit: embedding diversity and coverage of raised questions,
//! judge-based insight and summary scoring, and the plot-quality rubric.

use std::collections::HashMap;
use std::path::Path;
use std::sync::Mutex;

use futures::stream::{self, StreamExt};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::flags::Flags;
use crate::gateway::cassette::content_hash;
use crate::gateway::{Attachment, Gateway, GatewayError};
use crate::prompts::Template;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EmbeddingVector {
    pub values: Vec<f64>,
}

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Self {
        Self { values }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

impl From<Vec<f64>> for EmbeddingVector {
    fn from(values: Vec<f64>) -> Self {
        Self::new(values)
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MetricError {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

fn check_shape(vectors: &[EmbeddingVector]) -> Result<usize, MetricError> {
    let dim = vectors.first().map(EmbeddingVector::dim).unwrap_or(0);
    for v in vectors {
        if v.dim() != dim {
            return Err(MetricError::DimensionMismatch {
                expected: dim,
                found: v.dim(),
            });
        }
        if v.values.iter().any(|x| !x.is_finite()) {
            return Err(MetricError::DegenerateInput("non-finite embedding entry".into()));
        }
    }
    Ok(dim)
}

/// `1 - 2/(n(n-1)) * sum_{i<j} cos(v_i, v_j)`.
///
/// Zero vectors are rejected: cosine similarity is undefined for them.
pub fn diversity(vectors: &[EmbeddingVector]) -> Result<f64, MetricError> {
    let n = vectors.len();
    if n < 2 {
        return Err(MetricError::DegenerateInput(format!(
            "diversity needs at least two vectors, got {n}"
        )));
    }
    check_shape(vectors)?;
    let units: Vec<Vec<f64>> = vectors
        .iter()
        .map(|v| {
            let norm = v.norm();
            if norm == 0.0 {
                Err(MetricError::DegenerateInput("zero vector".into()))
            } else {
                Ok(v.values.iter().map(|x| x / norm).collect())
            }
        })
        .collect::<Result<_, _>>()?;
    let mut total = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            total += units[i].iter().zip(&units[j]).map(|(a, b)| a * b).sum::<f64>();
        }
    }
    Ok(1.0 - 2.0 * total / (n * (n - 1)) as f64)
}

/// Mean Euclidean distance of the vectors to their centroid.
pub fn coverage(vectors: &[EmbeddingVector]) -> Result<f64, MetricError> {
    let n = vectors.len();
    if n == 0 {
        return Err(MetricError::DegenerateInput("coverage needs at least one vector".into()));
    }
    let dim = check_shape(vectors)?;
    let mut centroid = vec![0.0; dim];
    for v in vectors {
        for (c, x) in centroid.iter_mut().zip(&v.values) {
            *c += x;
        }
    }
    centroid.iter_mut().for_each(|c| *c /= n as f64);
    let radius: f64 = vectors
        .iter()
        .map(|v| {
            v.values
                .iter()
                .zip(&centroid)
                .map(|(x, c)| (x - c).powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .sum();
    Ok(radius / n as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricName {
    InsightLevel,
    SummaryLevel,
    Diversity,
    Coverage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricDetail {
    pub label: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricResult {
    pub name: MetricName,
    pub value: f64,
    pub details: Vec<MetricDetail>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlotScore {
    pub relevance: u8,
    pub clarity: u8,
    pub annotation: u8,
    pub interpretability: u8,
}

impl PlotScore {
    pub const ZERO: PlotScore = PlotScore {
        relevance: 0,
        clarity: 0,
        annotation: 0,
        interpretability: 0,
    };

    pub fn as_tuple(&self) -> (u8, u8, u8, u8) {
        (self.relevance, self.clarity, self.annotation, self.interpretability)
    }

    pub fn mean(&self) -> f64 {
        (self.relevance as f64 + self.clarity as f64 + self.annotation as f64 + self.interpretability as f64) / 4.0
    }
}

#[derive(Debug, Deserialize)]
struct ScoreReply {
    score: f64,
}

#[derive(Debug, Deserialize)]
struct PlotReply {
    relevance: i64,
    clarity: i64,
    annotation: i64,
    interpretability: i64,
}

/// Judge-backed scorer. Pairwise ratings are cached by content hash.
pub struct Judge<'a> {
    gateway: &'a Gateway,
    flags: Flags,
    parallelism: usize,
    cache: Mutex<HashMap<String, f64>>,
}

impl<'a> Judge<'a> {
    pub fn new(gateway: &'a Gateway, flags: Flags) -> Self {
        Self {
            gateway,
            flags,
            parallelism: 4,
            cache: Mutex::new(HashMap::new()),
        }
    }

    pub fn with_parallelism(mut self, parallelism: usize) -> Self {
        self.parallelism = parallelism.max(1);
        self
    }

    pub fn flags(&self) -> &Flags {
        &self.flags
    }

    async fn rate(&self, template: Template, role: &str, gold: &str, predicted: &str) -> Result<f64, GatewayError> {
        let key = content_hash(&json!({"template": format!("{template:?}"), "gold": gold, "predicted": predicted}));
        if let Some(v) = self.cache.lock().expect("cache lock").get(&key) {
            return Ok(*v);
        }
        let prompt = template.render(&[("gold", gold), ("predicted", predicted)]);
        let request = self.gateway.request(role, prompt);
        let score = match self
            .gateway
            .complete_json::<ScoreReply, _>(&request, |r| {
                if (0.0..=1.0).contains(&r.score) {
                    Ok(())
                } else {
                    Err(format!("score {} outside [0, 1]", r.score))
                }
            })
            .await
        {
            Ok(s) => s.value.score,
            Err(e) if e.is_fatal() => return Err(e),
            Err(e) => {
                self.flags.raise(format!("eval.{role}"), format!("pair scored 0: {e}"));
                0.0
            }
        };
        self.cache.lock().expect("cache lock").insert(key, score);
        Ok(score)
    }
}

/// For each gold insight, the best judge rating over all predictions; the
/// value is the mean over gold insights. Matching is unconstrained: one
/// prediction may be the best match for several gold insights.
pub async fn score_insights(predicted: &[String], gold: &[String], judge: &Judge<'_>) -> Result<MetricResult, MetricError> {
    if gold.is_empty() {
        return Err(MetricError::Precondition("gold insights must be non-empty".into()));
    }
    let pairs: Vec<(usize, &str, &str)> = gold
        .iter()
        .enumerate()
        .flat_map(|(gi, g)| predicted.iter().map(move |p| (gi, g.as_str(), p.as_str())))
        .collect();
    let scores: Vec<Result<(usize, f64), GatewayError>> = stream::iter(pairs)
        .map(|(gi, g, p)| async move {
            judge
                .rate(Template::EvalInsightJudge, "eval_insight_judge", g, p)
                .await
                .map(|s| (gi, s))
        })
        .buffered(judge.parallelism)
        .collect()
        .await;
    let mut best = vec![0.0f64; gold.len()];
    for r in scores {
        let (gi, s) = r?;
        best[gi] = best[gi].max(s);
    }
    let details = gold
        .iter()
        .zip(&best)
        .map(|(g, v)| MetricDetail {
            label: g.clone(),
            value: *v,
        })
        .collect();
    Ok(MetricResult {
        name: MetricName::InsightLevel,
        value: best.iter().sum::<f64>() / gold.len() as f64,
        details,
    })
}

pub async fn score_summary(predicted: &str, gold: &str, judge: &Judge<'_>) -> Result<MetricResult, MetricError> {
    if predicted.trim().is_empty() || gold.trim().is_empty() {
        return Err(MetricError::Precondition("summaries must be non-empty".into()));
    }
    let value = judge
        .rate(Template::EvalSummaryJudge, "eval_summary_judge", gold, predicted)
        .await?;
    Ok(MetricResult {
        name: MetricName::SummaryLevel,
        value,
        details: vec![MetricDetail {
            label: "summary".into(),
            value,
        }],
    })
}

fn clamp_score(raw: i64, name: &str, flags: &Flags) -> u8 {
    let clamped = raw.clamp(0, 10);
    if clamped != raw {
        flags.raise("eval.plot_judge", format!("{name} score {raw} clamped to {clamped}"));
    }
    clamped as u8
}

/// Four-dimension 0-10 rubric. A missing plot scores zero on every dimension
/// without consulting the judge.
pub async fn judge_plot(question: &str, plot: Option<&Path>, judge: &Judge<'_>) -> Result<PlotScore, MetricError> {
    let Some(path) = plot.filter(|p| p.exists()) else {
        return Ok(PlotScore::ZERO);
    };
    let attachment = match Attachment::from_image_file(path, "plot.png") {
        Ok(a) => a,
        Err(e) => {
            judge.flags.raise("eval.plot_judge", format!("unreadable plot {}: {e}", path.display()));
            return Ok(PlotScore::ZERO);
        }
    };
    let prompt = Template::EvalPlotJudge.render(&[("question", question)]);
    let request = judge
        .gateway
        .request("eval_plot_judge", prompt)
        .with_attachments(vec![attachment]);
    match judge.gateway.complete_json::<PlotReply, _>(&request, |_| Ok(())).await {
        Ok(reply) => {
            let r = reply.value;
            let f = &judge.flags;
            Ok(PlotScore {
                relevance: clamp_score(r.relevance, "relevance", f),
                clarity: clamp_score(r.clarity, "clarity", f),
                annotation: clamp_score(r.annotation, "annotation", f),
                interpretability: clamp_score(r.interpretability, "interpretability", f),
            })
        }
        Err(e) if e.is_fatal() => Err(e.into()),
        Err(e) => {
            judge.flags.raise("eval.plot_judge", format!("plot scored 0: {e}"));
            Ok(PlotScore::ZERO)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::scripted::{fenced_json, ScriptedBackend};
    use crate::gateway::{CallKind, ModelSettings};
    use std::sync::Arc;

    fn v(values: &[f64]) -> EmbeddingVector {
        EmbeddingVector::new(values.to_vec())
    }

    #[test]
    fn diversity_hand_cases() {
        assert!((diversity(&[v(&[1.0, 0.0]), v(&[1.0, 0.0])]).unwrap()).abs() < 1e-12);
        assert!((diversity(&[v(&[1.0, 0.0]), v(&[0.0, 1.0])]).unwrap() - 1.0).abs() < 1e-12);
        let d = diversity(&[v(&[1.0, 0.0]), v(&[1.0, 0.0]), v(&[0.0, 1.0])]).unwrap();
        assert!((d - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn coverage_hand_cases() {
        assert_eq!(coverage(&[v(&[3.0, 1.0]), v(&[3.0, 1.0])]).unwrap(), 0.0);
        assert!((coverage(&[v(&[1.0, 0.0]), v(&[-1.0, 0.0])]).unwrap() - 1.0).abs() < 1e-12);
        let c = coverage(&[v(&[1.0, 0.0]), v(&[0.0, 1.0])]).unwrap();
        assert!((c - 0.5f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn formula_errors() {
        assert!(matches!(
            diversity(&[v(&[1.0, 0.0]), v(&[1.0])]),
            Err(MetricError::DimensionMismatch { .. })
        ));
        assert!(matches!(
            diversity(&[v(&[1.0, 0.0]), v(&[0.0, 0.0])]),
            Err(MetricError::DegenerateInput(_))
        ));
        assert!(matches!(diversity(&[v(&[1.0])]), Err(MetricError::DegenerateInput(_))));
        assert!(matches!(coverage(&[]), Err(MetricError::DegenerateInput(_))));
        assert!(matches!(
            coverage(&[v(&[1.0]), v(&[1.0, 2.0])]),
            Err(MetricError::DimensionMismatch { .. })
        ));
    }

    fn scripted_judge(f: impl Fn(&str, &str) -> serde_json::Value + Send + Sync + 'static) -> (Gateway, ScriptedBackend) {
        let backend = ScriptedBackend::new(move |req| {
            let gold = between(&req.prompt, "Reference insight:\n", "\n\nGenerated")
                .or_else(|| between(&req.prompt, "Reference summary:\n", "\n\nGenerated"))
                .unwrap_or_default();
            let pred = between(&req.prompt, "Generated insight:\n", "\n\nRespond")
                .or_else(|| between(&req.prompt, "Generated summary:\n", "\n\nRespond"))
                .unwrap_or_default();
            Ok(fenced_json(&f(&gold, &pred)))
        });
        (
            Gateway::passthrough(Arc::new(backend.clone()), None, ModelSettings::default()),
            backend,
        )
    }

    fn between(s: &str, a: &str, b: &str) -> Option<String> {
        let start = s.find(a)? + a.len();
        let end = s[start..].find(b)? + start;
        Some(s[start..end].to_string())
    }

    #[tokio::test]
    async fn insight_scores_max_then_mean() {
        let (gw, _) = scripted_judge(|g, p| {
            let score = match (g, p) {
                ("g1", "p1") => 0.6,
                ("g1", "p2") => 0.2,
                ("g2", "p1") => 0.3,
                ("g2", "p2") => 1.0,
                _ => 0.0,
            };
            json!({"score": score})
        });
        let judge = Judge::new(&gw, Flags::new());
        let r = score_insights(&["p1".into(), "p2".into()], &["g1".into(), "g2".into()], &judge)
            .await
            .unwrap();
        assert!((r.value - 0.8).abs() < 1e-12);
        assert_eq!(r.details[0].value, 0.6);

        let single = score_insights(&["p1".into()], &["g1".into()], &judge).await.unwrap();
        assert!((single.value - 0.6).abs() < 1e-12);
    }

    #[tokio::test]
    async fn empty_predictions_score_zero_without_calls() {
        let (gw, backend) = scripted_judge(|_, _| json!({"score": 1.0}));
        let judge = Judge::new(&gw, Flags::new());
        let r = score_insights(&[], &["g".into(), "h".into()], &judge).await.unwrap();
        assert_eq!(r.value, 0.0);
        assert_eq!(r.details.len(), 2);
        assert_eq!(backend.calls(), 0);
        assert!(score_insights(&["p".into()], &[], &judge).await.is_err());
    }

    #[tokio::test]
    async fn pair_cache_avoids_repeat_calls() {
        let (gw, backend) = scripted_judge(|_, _| json!({"score": 0.5}));
        let judge = Judge::new(&gw, Flags::new());
        score_insights(&["p".into()], &["g".into()], &judge).await.unwrap();
        score_insights(&["p".into()], &["g".into()], &judge).await.unwrap();
        assert_eq!(backend.calls(), 1);
    }

    #[tokio::test]
    async fn broken_judge_scores_zero_and_flags() {
        let backend = ScriptedBackend::new(|_| Ok("no idea".into()));
        let gw = Gateway::passthrough(Arc::new(backend), None, ModelSettings::default());
        let judge = Judge::new(&gw, Flags::new());
        let r = score_summary("a", "b", &judge).await.unwrap();
        assert_eq!(r.value, 0.0);
        assert!(judge.flags().has_stage("eval.eval_summary_judge"));
    }

    #[tokio::test]
    async fn summary_passthrough_and_precondition() {
        let (gw, _) = scripted_judge(|g, p| json!({"score": if g == p { 1.0 } else { 0.5 }}));
        let judge = Judge::new(&gw, Flags::new());
        assert_eq!(score_summary("same", "same", &judge).await.unwrap().value, 1.0);
        assert_eq!(score_summary("x", "y", &judge).await.unwrap().value, 0.5);
        assert!(matches!(
            score_summary("", "y", &judge).await,
            Err(MetricError::Precondition(_))
        ));
    }

    fn png_file(dir: &Path) -> std::path::PathBuf {
        let path = dir.join("plot.png");
        image::RgbImage::new(4, 4).save(&path).unwrap();
        path
    }

    #[tokio::test]
    async fn plot_rubric() {
        let backend = ScriptedBackend::new(|_| {
            Ok(fenced_json(&json!({"relevance": 7, "clarity": 8, "annotation": 6, "interpretability": 12})))
        });
        let gw = Gateway::passthrough(Arc::new(backend), None, ModelSettings::default());
        let judge = Judge::new(&gw, Flags::new());

        assert_eq!(judge_plot("q", None, &judge).await.unwrap(), PlotScore::ZERO);
        assert_eq!(
            judge_plot("q", Some(Path::new("/nonexistent/plot.png")), &judge).await.unwrap(),
            PlotScore::ZERO
        );
        assert_eq!(gw.call_count(CallKind::Completion), 0);

        let dir = tempfile::tempdir().unwrap();
        let png = png_file(dir.path());
        let s = judge_plot("q", Some(&png), &judge).await.unwrap();
        assert_eq!(s.as_tuple(), (7, 8, 6, 10));
        assert!(judge.flags().has_stage("eval.plot_judge"));

        let junk = dir.path().join("junk.png");
        std::fs::write(&junk, b"not an image").unwrap();
        assert_eq!(judge_plot("q", Some(&junk), &judge).await.unwrap(), PlotScore::ZERO);
        assert_eq!(gw.call_count(CallKind::Completion), 1);
    }
}
