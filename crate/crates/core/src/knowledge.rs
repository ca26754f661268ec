//! On-demand domain knowledge: a judge decides whether external knowledge
//! is needed; if so, queries are generated, searched with a date cap, and
//! the hits are distilled into cited knowledge items. Otherwise, or when
//! any retrieval step fails, the model's own background knowledge is used.

use std::collections::HashSet;

use chrono::NaiveDate;
use futures::future::join_all;
use serde::{Deserialize, Serialize};

use crate::agent::{normalize_ws, AgentContext};
use crate::artifacts::{RunDir, KNOWLEDGE_DIR, KNOWLEDGE_FILE};
use crate::config::RunConfig;
use crate::error::{split_fatal, Error, Result};
use crate::gateway::{GatewayError, SearchQuery};
use crate::prompts::Template;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SearchVerdict {
    Yes,
    No,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchJudgement {
    pub verdict: SearchVerdict,
    pub rationale: String,
    pub degraded: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchQuerySet {
    pub queries: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchResult {
    pub query: String,
    pub title: String,
    pub snippet: String,
    pub url: String,
    pub date: Option<NaiveDate>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchResultSet {
    pub results: Vec<SearchResult>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KnowledgeSource {
    External,
    Internal,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnowledgeItem {
    pub statement: String,
    pub relevance: String,
    pub source: KnowledgeSource,
    pub citation: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Acquisition {
    Retrieved,
    Vanilla,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnowledgeSet {
    pub items: Vec<KnowledgeItem>,
    pub acquisition: Acquisition,
}

impl KnowledgeSet {
    pub fn empty() -> Self {
        Self {
            items: Vec::new(),
            acquisition: Acquisition::Vanilla,
        }
    }

    /// Prompt rendering; an empty set renders an explicit notice.
    pub fn render(&self) -> String {
        if self.items.is_empty() {
            return "No domain knowledge is available for this analysis.".into();
        }
        self.items
            .iter()
            .map(|i| match &i.citation {
                Some(url) => format!("- {} (relevance: {}) [source: {url}]", i.statement, i.relevance),
                None => format!("- {} (relevance: {})", i.statement, i.relevance),
            })
            .collect::<Vec<_>>()
            .join("\n")
    }

    pub fn external_count(&self) -> usize {
        self.items.iter().filter(|i| i.source == KnowledgeSource::External).count()
    }
}

#[derive(Debug, Deserialize)]
struct JudgeReply {
    verdict: String,
    #[serde(default)]
    rationale: String,
}

fn parse_verdict(raw: &str) -> Option<SearchVerdict> {
    let v = raw.trim().to_ascii_lowercase();
    if v.starts_with("yes") {
        Some(SearchVerdict::Yes)
    } else if v.starts_with("no") {
        Some(SearchVerdict::No)
    } else {
        None
    }
}

/// Malformed output after retries defaults to `no`, flagged.
pub async fn judge_search_necessity(ctx: &AgentContext<'_>) -> Result<SearchJudgement> {
    let prompt = Template::SearchJudge.render(&[("goal", ctx.goal()), ("profile", ctx.profile_doc())]);
    let request = ctx.gateway.request("search_judge", prompt);
    let reply = ctx
        .gateway
        .complete_json::<JudgeReply, _>(&request, |r| {
            parse_verdict(&r.verdict)
                .map(|_| ())
                .ok_or_else(|| format!("verdict `{}` is neither yes nor no", r.verdict))
        })
        .await;
    match split_fatal(reply)? {
        Ok(s) => {
            let verdict = parse_verdict(&s.value.verdict).expect("checked");
            tracing::info!(?verdict, rationale = %s.value.rationale, "search necessity");
            Ok(SearchJudgement {
                verdict,
                rationale: s.value.rationale,
                degraded: false,
            })
        }
        Err(e) => {
            ctx.flags.raise("knowledge.judge", format!("defaulted to no search: {e}"));
            Ok(SearchJudgement {
                verdict: SearchVerdict::No,
                rationale: String::new(),
                degraded: true,
            })
        }
    }
}

#[derive(Debug, Deserialize)]
struct QueriesReply {
    queries: Vec<String>,
}

fn merge_queries(into: &mut Vec<String>, seen: &mut HashSet<String>, new: Vec<String>) {
    for q in new {
        let q = normalize_ws(&q);
        if !q.is_empty() && seen.insert(q.clone()) {
            into.push(q);
        }
    }
}

async fn ask_queries(ctx: &AgentContext<'_>, n_q: usize, existing: &[String]) -> Result<Vec<String>, GatewayError> {
    let existing_block = if existing.is_empty() {
        String::new()
    } else {
        let listed: Vec<String> = existing.iter().map(|q| format!("- {q}")).collect();
        format!("\nQueries already written (do not repeat them):\n{}\n", listed.join("\n"))
    };
    let n = n_q.to_string();
    let prompt = Template::QueryGenerator.render(&[
        ("goal", ctx.goal()),
        ("profile", ctx.profile_doc()),
        ("existing_queries", &existing_block),
        ("n_queries", &n),
    ]);
    let request = ctx.gateway.request("query_generator", prompt);
    let reply = ctx
        .gateway
        .complete_json::<QueriesReply, _>(&request, |r| {
            if r.queries.iter().any(|q| !q.trim().is_empty()) {
                Ok(())
            } else {
                Err("no queries".into())
            }
        })
        .await?;
    Ok(reply.value.queries)
}

/// Exactly `n_q` distinct queries. Duplicates are collapsed and the
/// shortfall is requested once more with the existing queries listed.
pub async fn generate_queries(ctx: &AgentContext<'_>, n_q: usize) -> Result<SearchQuerySet> {
    let mut queries = Vec::new();
    let mut seen = HashSet::new();
    merge_queries(&mut queries, &mut seen, ask_queries(ctx, n_q, &[]).await?);
    if queries.len() < n_q {
        let more = ask_queries(ctx, n_q, &queries).await?;
        merge_queries(&mut queries, &mut seen, more);
    }
    if queries.len() < n_q {
        return Err(Error::Gateway(GatewayError::Schema {
            role: "query_generator".into(),
            attempts: 2,
            message: format!("only {} distinct queries after padding, {n_q} required", queries.len()),
        }));
    }
    queries.truncate(n_q);
    Ok(SearchQuerySet { queries })
}

/// Union of per-query hits, each query truncated to `per_query_k`, hits
/// dated after `max_date` dropped, and URLs kept once. Individual query
/// failures are tolerated; all failing is [`Error::SearchUnavailable`].
pub async fn execute_search(
    ctx: &AgentContext<'_>,
    queries: &SearchQuerySet,
    max_date: NaiveDate,
    per_query_k: usize,
) -> Result<SearchResultSet> {
    let calls = queries.queries.iter().map(|q| {
        let query = SearchQuery {
            query: q.clone(),
            max_date: Some(max_date),
            k: per_query_k,
        };
        async move { (query.query.clone(), ctx.gateway.search(&query).await) }
    });
    let outcomes = join_all(calls).await;
    let mut results = Vec::new();
    let mut seen_urls = HashSet::new();
    let mut failures = Vec::new();
    for (query, outcome) in outcomes {
        let hits = match outcome {
            Ok(h) => h,
            Err(GatewayError::NotConfigured(what)) => {
                failures.push(format!("{query}: no {what}"));
                continue;
            }
            Err(e) if e.is_fatal() => return Err(e.into()),
            Err(e) => {
                ctx.flags.raise("knowledge.search", format!("query `{query}` failed: {e}"));
                failures.push(format!("{query}: {e}"));
                continue;
            }
        };
        for hit in hits.into_iter().take(per_query_k) {
            if hit.date.is_some_and(|d| d > max_date) {
                continue;
            }
            if !seen_urls.insert(hit.url.clone()) {
                continue;
            }
            results.push(SearchResult {
                query: query.clone(),
                title: hit.title,
                snippet: hit.snippet,
                url: hit.url,
                date: hit.date,
            });
        }
    }
    if failures.len() == queries.queries.len() {
        return Err(Error::SearchUnavailable(failures.join("; ")));
    }
    Ok(SearchResultSet { results })
}

#[derive(Debug, Deserialize)]
struct ItemReply {
    statement: String,
    #[serde(default)]
    relevance: String,
    #[serde(default)]
    citation: Option<String>,
}

#[derive(Debug, Deserialize)]
struct ItemsReply {
    items: Vec<ItemReply>,
}

fn render_results(results: &SearchResultSet) -> String {
    results
        .results
        .iter()
        .enumerate()
        .map(|(i, r)| format!("[{}] {}\n{}\n{}", i + 1, r.title, r.snippet, r.url))
        .collect::<Vec<_>>()
        .join("\n\n")
}

/// Items citing a url outside `results` are demoted to internal; at least
/// one item must cite a result, else the reply is rejected and retried.
pub async fn generate_knowledge(ctx: &AgentContext<'_>, results: &SearchResultSet) -> Result<KnowledgeSet> {
    if results.results.is_empty() {
        return Err(Error::Contract("knowledge generation requires at least one search result".into()));
    }
    let urls: HashSet<&str> = results.results.iter().map(|r| r.url.as_str()).collect();
    let rendered = render_results(results);
    let prompt = Template::KnowledgeGenerator.render(&[
        ("goal", ctx.goal()),
        ("profile", ctx.profile_doc()),
        ("results", &rendered),
    ]);
    let request = ctx.gateway.request("knowledge_generator", prompt);
    let reply = ctx
        .gateway
        .complete_json::<ItemsReply, _>(&request, |r| {
            if r.items.iter().any(|i| i.statement.trim().is_empty()) {
                return Err("empty statement".into());
            }
            let cited = r
                .items
                .iter()
                .any(|i| i.citation.as_deref().is_some_and(|c| urls.contains(c.trim())));
            if cited {
                Ok(())
            } else {
                Err("no item cites a search result".into())
            }
        })
        .await?;
    let items = reply
        .value
        .items
        .into_iter()
        .map(|i| {
            let citation = i.citation.map(|c| c.trim().to_string()).filter(|c| urls.contains(c.as_str()));
            KnowledgeItem {
                statement: i.statement.trim().to_string(),
                relevance: i.relevance.trim().to_string(),
                source: if citation.is_some() { KnowledgeSource::External } else { KnowledgeSource::Internal },
                citation,
            }
        })
        .collect();
    Ok(KnowledgeSet {
        items,
        acquisition: Acquisition::Retrieved,
    })
}

/// Background-knowledge items only. Persistent failure yields an empty
/// set, flagged; the pipeline then runs knowledge-free.
pub async fn generate_vanilla_knowledge(ctx: &AgentContext<'_>) -> Result<KnowledgeSet> {
    let prompt = Template::VanillaKnowledge.render(&[("goal", ctx.goal()), ("profile", ctx.profile_doc())]);
    let request = ctx.gateway.request("vanilla_knowledge", prompt);
    let reply = ctx
        .gateway
        .complete_json::<ItemsReply, _>(&request, |r| {
            if r.items.iter().any(|i| i.statement.trim().is_empty()) {
                Err("empty statement".into())
            } else {
                Ok(())
            }
        })
        .await;
    match split_fatal(reply)? {
        Ok(s) => Ok(KnowledgeSet {
            items: s
                .value
                .items
                .into_iter()
                .map(|i| KnowledgeItem {
                    statement: i.statement.trim().to_string(),
                    relevance: i.relevance.trim().to_string(),
                    source: KnowledgeSource::Internal,
                    citation: None,
                })
                .collect(),
            acquisition: Acquisition::Vanilla,
        }),
        Err(e) => {
            ctx.flags.raise("knowledge.vanilla", format!("proceeding without knowledge: {e}"));
            Ok(KnowledgeSet::empty())
        }
    }
}

fn write(run: &RunDir, rel: &str, value: &impl Serialize) -> Result<()> {
    run.write_json(rel, value).map(|_| ()).map_err(|e| Error::io(run.path(rel), e))
}

/// Retrieved path when the judge asks for it and every step succeeds;
/// otherwise vanilla knowledge, each fallback flagged.
pub async fn acquire_knowledge(ctx: &AgentContext<'_>, config: &RunConfig, run: &RunDir) -> Result<KnowledgeSet> {
    let judgement = judge_search_necessity(ctx).await?;
    write(run, &format!("{KNOWLEDGE_DIR}/judge.json"), &judgement)?;
    let knowledge = match judgement.verdict {
        SearchVerdict::No => generate_vanilla_knowledge(ctx).await?,
        SearchVerdict::Yes => match retrieve(ctx, config, run).await {
            Ok(k) => k,
            Err(e) if e.is_fatal() => return Err(e),
            Err(e) => {
                ctx.flags.raise("knowledge.retrieval", format!("fell back to vanilla knowledge: {e}"));
                generate_vanilla_knowledge(ctx).await?
            }
        },
    };
    write(run, KNOWLEDGE_FILE, &knowledge)?;
    Ok(knowledge)
}

async fn retrieve(ctx: &AgentContext<'_>, config: &RunConfig, run: &RunDir) -> Result<KnowledgeSet> {
    let queries = generate_queries(ctx, config.n_q).await?;
    write(run, &format!("{KNOWLEDGE_DIR}/queries.json"), &queries)?;
    let results = execute_search(ctx, &queries, config.max_date(), config.per_query_k).await?;
    write(run, &format!("{KNOWLEDGE_DIR}/search_results.json"), &results)?;
    if results.results.is_empty() {
        return Err(Error::SearchUnavailable("searches returned no usable results".into()));
    }
    generate_knowledge(ctx, &results).await
}
