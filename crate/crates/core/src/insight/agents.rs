use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use futures::future::join_all;
use serde::{Deserialize, Serialize};

use super::{
    normalize_dimension, ClarifiedQuestion, CodeCandidate, CodeVersion, Finding, Insight, ReviewOrigin, ReviewReport,
    ReviewSubject, Strategy, Verdict, CODE_DIMENSIONS, NO_PLOT_FINDING, PLOT_DIMENSIONS,
};
use crate::agent::AgentContext;
use crate::error::{split_fatal, Error, Result};
use crate::gateway::{Attachment, ModelRequest};
use crate::knowledge::KnowledgeSet;
use crate::prompts::Template;
use crate::questions::Question;
use crate::sandbox::ExecutionOutput;

#[derive(Debug, Deserialize)]
struct RewriteReply {
    question: String,
    #[serde(default)]
    grounding_notes: String,
    #[serde(default)]
    columns: Vec<String>,
}

/// Schema-grounded rewrite. Columns the rewriter names that the profile
/// lacks are flagged but kept; persistent failure is the identity rewrite.
pub async fn clarify_question(ctx: &AgentContext<'_>, q: &Question, knowledge: &KnowledgeSet) -> Result<ClarifiedQuestion> {
    let rendered = knowledge.render();
    let prompt = Template::QuestionRewriter.render(&[
        ("goal", ctx.goal()),
        ("profile", ctx.profile_doc()),
        ("knowledge", &rendered),
        ("question", &q.text),
    ]);
    let request = ctx.gateway.request("question_rewriter", prompt);
    let reply = ctx
        .gateway
        .complete_json::<RewriteReply, _>(&request, |r| {
            if r.question.trim().is_empty() {
                Err("empty rewrite".into())
            } else {
                Ok(())
            }
        })
        .await;
    match split_fatal(reply)? {
        Ok(s) => {
            let known: BTreeSet<&str> = ctx.profile.column_names().collect();
            for col in &s.value.columns {
                if !known.contains(col.trim()) {
                    ctx.flags
                        .raise("insight.clarify", format!("rewrite of `{}` names unknown column `{col}`", q.text));
                }
            }
            Ok(ClarifiedQuestion {
                original: q.clone(),
                text: s.value.question.trim().to_string(),
                grounding_notes: s.value.grounding_notes.trim().to_string(),
                columns: s.value.columns.iter().map(|c| c.trim().to_string()).collect(),
                degraded: false,
            })
        }
        Err(e) => {
            ctx.flags.raise("insight.clarify", format!("identity rewrite for `{}`: {e}", q.text));
            Ok(ClarifiedQuestion::identity(q))
        }
    }
}

/// Context block shared by the three generation strategies.
pub fn code_preamble(ctx: &AgentContext<'_>, question: &ClarifiedQuestion) -> String {
    Template::CodePreamble.render(&[
        ("goal", ctx.goal()),
        ("profile", ctx.profile_doc()),
        ("question", &question.text),
        ("dataset_file", &ctx.profile.file_name),
    ])
}

fn strategy_template(s: Strategy) -> Template {
    match s {
        Strategy::DivideAndConquer => Template::CodeDivideAndConquer,
        Strategy::QueryPlan => Template::CodeQueryPlan,
        Strategy::NegativeReasoning => Template::CodeNegativeReasoning,
    }
}

#[derive(Debug, Deserialize)]
struct CodeReply {
    #[serde(default)]
    reasoning: String,
    code: String,
}

fn non_empty_code(r: &CodeReply) -> std::result::Result<(), String> {
    if r.code.trim().is_empty() {
        Err("empty code".into())
    } else {
        Ok(())
    }
}

/// One candidate per strategy, generated concurrently, in [`Strategy::ALL`]
/// order. Failed strategies yield placeholder candidates.
pub async fn generate_candidates(ctx: &AgentContext<'_>, question: &ClarifiedQuestion) -> Result<Vec<CodeCandidate>> {
    let preamble = code_preamble(ctx, question);
    let calls = Strategy::ALL.into_iter().map(|strategy| {
        let prompt = strategy_template(strategy).render(&[("code_preamble", &preamble)]);
        let request = ctx.gateway.request(format!("code_generator:{}", strategy.tag()), prompt);
        async move { (strategy, ctx.gateway.complete_json::<CodeReply, _>(&request, non_empty_code).await) }
    });
    let mut candidates = Vec::new();
    for (strategy, reply) in join_all(calls).await {
        candidates.push(match split_fatal(reply)? {
            Ok(s) => CodeCandidate {
                strategy,
                reasoning: s.value.reasoning,
                code: s.value.code,
                failure: None,
            },
            Err(e) => {
                ctx.flags.raise("insight.candidates", format!("{} failed: {e}", strategy.tag()));
                CodeCandidate {
                    strategy,
                    reasoning: String::new(),
                    code: String::new(),
                    failure: Some(e.to_string()),
                }
            }
        });
    }
    if !candidates.iter().any(CodeCandidate::is_live) {
        return Err(Error::MultiPathExhausted);
    }
    Ok(candidates)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Selection {
    pub strategy: Strategy,
    pub rationale: String,
    pub code: String,
    pub fallback: bool,
}

#[derive(Debug, Deserialize)]
struct SelectorReply {
    strategy: String,
    #[serde(default)]
    rationale: String,
}

/// Picks one live candidate. The returned code is byte-equal to that
/// candidate's code.
pub async fn select_code(ctx: &AgentContext<'_>, question: &ClarifiedQuestion, candidates: &[CodeCandidate]) -> Result<Selection> {
    let live: Vec<&CodeCandidate> = candidates.iter().filter(|c| c.is_live()).collect();
    let pick = |c: &CodeCandidate, rationale: String, fallback: bool| Selection {
        strategy: c.strategy,
        rationale,
        code: c.code.clone(),
        fallback,
    };
    match live.as_slice() {
        [] => return Err(Error::Contract("selection requires at least one live candidate".into())),
        [only] => return Ok(pick(only, "only live candidate".into(), false)),
        _ => {}
    }
    let rendered = live
        .iter()
        .map(|c| format!("### {}\nReasoning: {}\n```python\n{}\n```", c.strategy.tag(), c.reasoning.trim(), c.code.trim_end()))
        .collect::<Vec<_>>()
        .join("\n\n");
    let prompt = Template::CodeSelector.render(&[
        ("goal", ctx.goal()),
        ("profile", ctx.profile_doc()),
        ("question", &question.text),
        ("candidates", &rendered),
    ]);
    let request = ctx.gateway.request("code_selector", prompt);
    let reply = ctx
        .gateway
        .complete_json::<SelectorReply, _>(&request, |r| match Strategy::parse(&r.strategy) {
            Some(s) if live.iter().any(|c| c.strategy == s) => Ok(()),
            _ => Err(format!("`{}` is not a live candidate", r.strategy)),
        })
        .await;
    match split_fatal(reply)? {
        Ok(s) => {
            let strategy = Strategy::parse(&s.value.strategy).expect("checked");
            let chosen = live.iter().find(|c| c.strategy == strategy).expect("checked");
            tracing::info!(strategy = strategy.tag(), rationale = %s.value.rationale, "code selected");
            Ok(pick(chosen, s.value.rationale, false))
        }
        Err(e) => {
            let chosen = Strategy::ALL
                .into_iter()
                .find_map(|s| live.iter().find(|c| c.strategy == s))
                .expect("at least two live candidates");
            ctx.flags
                .raise("insight.select", format!("fell back to {}: {e}", chosen.strategy.tag()));
            Ok(pick(chosen, "deterministic fallback".into(), true))
        }
    }
}

#[derive(Debug, Deserialize)]
struct FindingReply {
    dimension: String,
    issue: String,
}

#[derive(Debug, Deserialize)]
struct ReviewReply {
    verdict: String,
    #[serde(default)]
    findings: Vec<FindingReply>,
}

fn check_review(r: &ReviewReply) -> std::result::Result<(), String> {
    match r.verdict.trim().to_ascii_uppercase().as_str() {
        "PASS" if r.findings.is_empty() => Ok(()),
        "FAIL" if !r.findings.is_empty() => Ok(()),
        "PASS" | "FAIL" => Err(format!("verdict {} contradicts {} findings", r.verdict, r.findings.len())),
        other => Err(format!("unknown verdict `{other}`")),
    }
}

fn into_report(subject: ReviewSubject, reply: ReviewReply, dims: &[&str]) -> ReviewReport {
    if reply.findings.is_empty() {
        return ReviewReport::pass(subject, false);
    }
    let findings = reply
        .findings
        .into_iter()
        .map(|f| Finding {
            dimension: normalize_dimension(&f.dimension, dims),
            issue: f.issue.trim().to_string(),
        })
        .collect();
    ReviewReport::fail(subject, ReviewOrigin::Reviewer, findings)
}

async fn review(
    ctx: &AgentContext<'_>,
    subject: ReviewSubject,
    request: ModelRequest,
    dims: &[&str],
) -> Result<ReviewReport> {
    let reply = ctx.gateway.complete_json::<ReviewReply, _>(&request, check_review).await;
    match split_fatal(reply)? {
        Ok(s) => Ok(into_report(subject, s.value, dims)),
        Err(e) => {
            let stage = match subject {
                ReviewSubject::Code => "review.code",
                ReviewSubject::Plot => "review.plot",
            };
            ctx.flags.raise(stage, format!("degraded PASS: {e}"));
            Ok(ReviewReport::pass(subject, true))
        }
    }
}

/// Failure to obtain a review is a degraded PASS, so outages cannot keep
/// the fix loop spinning.
pub async fn review_code(ctx: &AgentContext<'_>, question: &ClarifiedQuestion, code: &str) -> Result<ReviewReport> {
    let prompt = Template::CodeReviewer.render(&[
        ("goal", ctx.goal()),
        ("profile", ctx.profile_doc()),
        ("question", &question.text),
        ("code", code.trim_end()),
    ]);
    review(ctx, ReviewSubject::Code, ctx.gateway.request("code_reviewer", prompt), &CODE_DIMENSIONS).await
}

/// A missing plot fails without a model call; an undecodable one fails
/// with the decode error as finding.
pub async fn review_plot(ctx: &AgentContext<'_>, question: &ClarifiedQuestion, plot: Option<&Path>) -> Result<ReviewReport> {
    let Some(path) = plot.filter(|p| p.is_file()) else {
        return Ok(ReviewReport::fail(
            ReviewSubject::Plot,
            ReviewOrigin::Reviewer,
            vec![Finding {
                dimension: "relevance".into(),
                issue: NO_PLOT_FINDING.into(),
            }],
        ));
    };
    let attachment = match Attachment::from_image_file(path, "plot.png") {
        Ok(a) => a,
        Err(e) => {
            return Ok(ReviewReport::fail(
                ReviewSubject::Plot,
                ReviewOrigin::Reviewer,
                vec![Finding {
                    dimension: "clarity".into(),
                    issue: format!("plot image unreadable: {e}"),
                }],
            ))
        }
    };
    let prompt = Template::PlotReviewer.render(&[
        ("goal", ctx.goal()),
        ("profile", ctx.profile_doc()),
        ("question", &question.text),
    ]);
    let request = ctx.gateway.request("plot_reviewer", prompt).with_attachments(vec![attachment]);
    review(ctx, ReviewSubject::Plot, request, &PLOT_DIMENSIONS).await
}

#[derive(Debug, Deserialize)]
struct FixReply {
    #[serde(default)]
    changes: String,
    code: String,
}

fn render_reviews(reviews: &[ReviewReport]) -> String {
    let lines: Vec<String> = reviews
        .iter()
        .filter(|r| r.verdict == Verdict::Fail)
        .flat_map(|r| {
            let source = match (r.subject, r.origin) {
                (_, ReviewOrigin::Sandbox) => "runtime",
                (ReviewSubject::Code, _) => "code review",
                (ReviewSubject::Plot, _) => "plot review",
            };
            r.findings
                .iter()
                .map(move |f| format!("- [{source} / {}] {}", f.dimension, f.issue))
        })
        .collect();
    lines.join("\n")
}

/// The next code version. Requires a FAIL review on `previous`.
pub async fn fix_code(ctx: &AgentContext<'_>, question: &ClarifiedQuestion, previous: &CodeVersion) -> Result<String> {
    if !previous.has_fail() {
        return Err(Error::Contract("fixing requires a FAIL review".into()));
    }
    let reviews = render_reviews(&previous.reviews);
    let prompt = Template::CodeFixer.render(&[
        ("goal", ctx.goal()),
        ("profile", ctx.profile_doc()),
        ("question", &question.text),
        ("code", previous.code.trim_end()),
        ("reviews", &reviews),
        ("dataset_file", &ctx.profile.file_name),
    ]);
    let request = ctx.gateway.request("code_fixer", prompt);
    let reply = ctx
        .gateway
        .complete_json::<FixReply, _>(&request, |r| {
            if r.code.trim().is_empty() {
                Err("empty code".into())
            } else {
                Ok(())
            }
        })
        .await?;
    tracing::info!(version = previous.index + 1, changes = %reply.value.changes, "code fixed");
    Ok(reply.value.code)
}

#[derive(Debug, Deserialize)]
struct InterpretReply {
    insight: String,
}

/// Reads stdout and every plot of one execution. Receives the original
/// question, not the rewrite. Nothing to read, or no usable reply, yields
/// the degraded "no interpretable result" insight.
pub async fn interpret(
    ctx: &AgentContext<'_>,
    question: &Question,
    output: &ExecutionOutput,
    plots: &[PathBuf],
    evidence: Vec<String>,
) -> Result<Insight> {
    if output.stdout.trim().is_empty() && plots.is_empty() {
        ctx.flags.raise("insight.interpret", format!("`{}`: empty stdout and no plot", question.text));
        return Ok(Insight::uninterpretable(question.clone(), evidence));
    }
    let mut attachments = Vec::new();
    let mut names = Vec::new();
    for p in plots {
        let name = p.file_name().map(|n| n.to_string_lossy().to_string()).unwrap_or_default();
        match Attachment::from_image_file(p, name.clone()) {
            Ok(a) => {
                attachments.push(a);
                names.push(name);
            }
            Err(e) => ctx.flags.raise("insight.interpret", format!("plot {name} unreadable: {e}")),
        }
    }
    let stdout = if output.stdout.trim().is_empty() { "(empty)" } else { output.stdout.trim_end() };
    let plots_line = if names.is_empty() { "none".to_string() } else { names.join(", ") };
    let prompt = Template::Interpreter.render(&[
        ("question", &question.text),
        ("profile", ctx.profile_doc()),
        ("stdout", stdout),
        ("plots", &plots_line),
    ]);
    let request = ctx.gateway.request("interpreter", prompt).with_attachments(attachments);
    let reply = ctx
        .gateway
        .complete_json::<InterpretReply, _>(&request, |r| {
            if r.insight.trim().is_empty() {
                Err("empty insight".into())
            } else {
                Ok(())
            }
        })
        .await;
    match split_fatal(reply)? {
        Ok(s) => Ok(Insight::new(s.value.insight.trim(), question.clone(), evidence)),
        Err(e) => {
            ctx.flags.raise("insight.interpret", format!("`{}`: {e}", question.text));
            Ok(Insight::uninterpretable(question.clone(), evidence))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgedInsight {
    pub version: usize,
    pub insight: Insight,
    pub rationale: String,
    pub fallback: bool,
}

#[derive(Debug, Deserialize)]
struct JudgeReply {
    version: serde_json::Value,
    #[serde(default)]
    rationale: String,
}

fn version_index(v: &serde_json::Value) -> Option<usize> {
    match v {
        serde_json::Value::Number(n) => n.as_u64().map(|n| n as usize),
        serde_json::Value::String(s) => s.trim().trim_start_matches(['v', 'V']).parse().ok(),
        _ => None,
    }
}

fn verdict_word(v: &CodeVersion, subject: ReviewSubject) -> &'static str {
    let fail = v
        .reviews
        .iter()
        .any(|r| r.subject == subject && r.verdict == Verdict::Fail);
    if fail {
        "FAIL"
    } else {
        "PASS"
    }
}

/// The best insight of the chain, byte-equal to one version's insight.
/// `None` when no version produced a usable insight.
pub async fn final_judge(ctx: &AgentContext<'_>, question: &Question, versions: &[CodeVersion]) -> Result<Option<JudgedInsight>> {
    let eligible: Vec<&CodeVersion> = versions.iter().filter(|v| v.usable_insight().is_some()).collect();
    let judged = |v: &CodeVersion, rationale: String, fallback: bool| JudgedInsight {
        version: v.index,
        insight: v.usable_insight().expect("eligible").clone(),
        rationale,
        fallback,
    };
    match eligible.as_slice() {
        [] => return Ok(None),
        [only] => return Ok(Some(judged(only, "only version with an insight".into(), false))),
        _ => {}
    }
    let rendered = eligible
        .iter()
        .map(|v| {
            format!(
                "Version {} (code review: {}, plot review: {}):\n{}",
                v.index,
                verdict_word(v, ReviewSubject::Code),
                verdict_word(v, ReviewSubject::Plot),
                v.usable_insight().expect("eligible").text
            )
        })
        .collect::<Vec<_>>()
        .join("\n\n");
    let prompt = Template::InsightJudge.render(&[
        ("goal", ctx.goal()),
        ("profile", ctx.profile_doc()),
        ("question", &question.text),
        ("versions", &rendered),
    ]);
    let request = ctx.gateway.request("insight_judge", prompt);
    let reply = ctx
        .gateway
        .complete_json::<JudgeReply, _>(&request, |r| match version_index(&r.version) {
            Some(i) if eligible.iter().any(|v| v.index == i) => Ok(()),
            _ => Err(format!("`{}` is not an eligible version", r.version)),
        })
        .await;
    match split_fatal(reply)? {
        Ok(s) => {
            let i = version_index(&s.value.version).expect("checked");
            let v = eligible.iter().find(|v| v.index == i).expect("checked");
            tracing::info!(version = i, rationale = %s.value.rationale, "final insight chosen");
            Ok(Some(judged(v, s.value.rationale, false)))
        }
        Err(e) => {
            let v = eligible
                .iter()
                .rev()
                .find(|v| v.all_pass())
                .or_else(|| eligible.iter().rev().find(|v| v.executed_ok()))
                .or(eligible.last())
                .expect("non-empty");
            ctx.flags
                .raise("insight.final_judge", format!("fell back to version {}: {e}", v.index));
            Ok(Some(judged(v, "deterministic fallback".into(), true)))
        }
    }
}
