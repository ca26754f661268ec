//! Divergent question raising by designed analyst roles, followed by a
//! judged convergence onto a few questions per iteration.

use std::collections::{HashMap, HashSet};

use futures::future::join_all;
use serde::{Deserialize, Serialize};

use crate::agent::{normalize_ws, truncate_chars, AgentContext};
use crate::error::{split_fatal, Error, Result};
use crate::insight::Insight;
use crate::knowledge::KnowledgeSet;
use crate::prompts::Template;

/// Prior insights are cut to this many characters in prompts.
pub const HISTORY_INSIGHT_CHARS: usize = 500;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoleSpec {
    pub name: String,
    pub background: String,
    pub domain_focus: String,
    pub traits: Vec<String>,
    pub capabilities: Vec<String>,
}

impl RoleSpec {
    fn is_complete(&self) -> bool {
        let filled = |v: &[String]| !v.is_empty() && v.iter().all(|s| !s.trim().is_empty());
        !self.name.trim().is_empty()
            && !self.background.trim().is_empty()
            && !self.domain_focus.trim().is_empty()
            && filled(&self.traits)
            && filled(&self.capabilities)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Question {
    pub text: String,
    pub source_role: String,
    pub iteration: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectedQuestion {
    pub question: Question,
    pub justification: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub question: Question,
    pub insight: Insight,
}

/// Answered (question, insight) pairs. Only ever appended to.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    entries: Vec<HistoryEntry>,
}

impl History {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, question: Question, insight: Insight) {
        self.entries.push(HistoryEntry { question, insight });
    }

    pub fn entries(&self) -> &[HistoryEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn render(&self) -> String {
        if self.entries.is_empty() {
            return "No questions have been answered yet.".into();
        }
        self.entries
            .iter()
            .enumerate()
            .map(|(i, e)| {
                format!(
                    "{}. Question: {}\n   Insight: {}",
                    i + 1,
                    e.question.text,
                    truncate_chars(&e.insight.text, HISTORY_INSIGHT_CHARS)
                )
            })
            .collect::<Vec<_>>()
            .join("\n")
    }
}

#[derive(Debug, Deserialize)]
struct RolesReply {
    roles: Vec<RoleSpec>,
}

/// Renames repeated names with a numeric suffix (`Analyst`, `Analyst 2`).
pub fn dedupe_role_names(roles: &mut [RoleSpec]) {
    let mut taken: HashSet<String> = HashSet::new();
    for role in roles.iter_mut() {
        role.name = normalize_ws(&role.name);
        if taken.insert(role.name.clone()) {
            continue;
        }
        let mut n = 2;
        while taken.contains(&format!("{} {n}", role.name)) {
            n += 1;
        }
        role.name = format!("{} {n}", role.name);
        taken.insert(role.name.clone());
    }
}

/// Exactly `n_r` roles with unique names.
pub async fn design_roles(ctx: &AgentContext<'_>, knowledge: &KnowledgeSet, n_r: usize) -> Result<Vec<RoleSpec>> {
    let n = n_r.to_string();
    let rendered = knowledge.render();
    let prompt = Template::RoleDesigner.render(&[
        ("goal", ctx.goal()),
        ("profile", ctx.profile_doc()),
        ("knowledge", &rendered),
        ("n_roles", &n),
    ]);
    let request = ctx.gateway.request("role_designer", prompt);
    let reply = ctx
        .gateway
        .complete_json::<RolesReply, _>(&request, |r| {
            let complete = r.roles.iter().filter(|role| role.is_complete()).count();
            if complete >= n_r {
                Ok(())
            } else {
                Err(format!("{complete} complete roles, {n_r} required"))
            }
        })
        .await?;
    let mut roles: Vec<RoleSpec> = reply.value.roles.into_iter().filter(RoleSpec::is_complete).take(n_r).collect();
    dedupe_role_names(&mut roles);
    Ok(roles)
}

/// Generic roles used when role design fails.
pub fn fallback_roles(n_r: usize) -> Vec<RoleSpec> {
    let presets = [
        ("Trend Analyst", "time series and business performance analyst", "temporal dynamics and growth", "methodical"),
        ("Distribution Analyst", "statistician focused on value distributions", "spread, skew and segment differences", "skeptical"),
        ("Anomaly Hunter", "fraud and quality analyst", "outliers and rare events", "curious"),
    ];
    let mut roles: Vec<RoleSpec> = (0..n_r)
        .map(|i| {
            let (name, background, focus, trait_) = presets[i % presets.len()];
            RoleSpec {
                name: name.into(),
                background: background.into(),
                domain_focus: focus.into(),
                traits: vec![trait_.into()],
                capabilities: vec!["descriptive statistics".into(), "group comparisons".into()],
            }
        })
        .collect();
    dedupe_role_names(&mut roles);
    roles
}

#[derive(Debug, Deserialize)]
struct QuestionsReply {
    questions: Vec<String>,
}

/// Up to `per_role_m` questions from one role. Persistent failure yields
/// no questions, flagged.
pub async fn raise_questions(
    ctx: &AgentContext<'_>,
    role: &RoleSpec,
    knowledge: &KnowledgeSet,
    history: &History,
    per_role_m: usize,
    iteration: usize,
) -> Result<Vec<Question>> {
    let per_role = per_role_m.to_string();
    let traits = role.traits.join(", ");
    let capabilities = role.capabilities.join(", ");
    let rendered_knowledge = knowledge.render();
    let rendered_history = history.render();
    let prompt = Template::QuestionRaising.render(&[
        ("role_name", &role.name),
        ("role_background", &role.background),
        ("role_focus", &role.domain_focus),
        ("role_traits", &traits),
        ("role_capabilities", &capabilities),
        ("goal", ctx.goal()),
        ("profile", ctx.profile_doc()),
        ("knowledge", &rendered_knowledge),
        ("history", &rendered_history),
        ("per_role", &per_role),
    ]);
    let request = ctx.gateway.request(format!("question_raiser:{}", role.name), prompt);
    let reply = ctx
        .gateway
        .complete_json::<QuestionsReply, _>(&request, |r| {
            if r.questions.iter().any(|q| !q.trim().is_empty()) {
                Ok(())
            } else {
                Err("no questions".into())
            }
        })
        .await;
    match split_fatal(reply)? {
        Ok(s) => {
            let mut seen = HashSet::new();
            Ok(s.value
                .questions
                .iter()
                .map(|q| normalize_ws(q))
                .filter(|q| !q.is_empty() && seen.insert(q.clone()))
                .take(per_role_m)
                .map(|text| Question {
                    text,
                    source_role: role.name.clone(),
                    iteration,
                })
                .collect())
        }
        Err(e) => {
            ctx.flags
                .raise("questions.raise", format!("iteration {iteration}, role `{}` contributed nothing: {e}", role.name));
            Ok(Vec::new())
        }
    }
}

/// Union of every role's questions in role order, concurrently raised.
pub async fn raise_pool(
    ctx: &AgentContext<'_>,
    roles: &[RoleSpec],
    knowledge: &KnowledgeSet,
    history: &History,
    per_role_m: usize,
    iteration: usize,
) -> Result<Vec<Question>> {
    let raised = join_all(
        roles
            .iter()
            .map(|role| raise_questions(ctx, role, knowledge, history, per_role_m, iteration)),
    )
    .await;
    let mut pool = Vec::new();
    for r in raised {
        pool.extend(r?);
    }
    Ok(pool)
}

/// Drops repeats within the pool and questions selected earlier in the run,
/// so selections stay pairwise distinct across iterations.
pub fn filter_pool(pool: Vec<Question>, already_selected: &HashSet<String>) -> Vec<Question> {
    let mut seen = HashSet::new();
    pool.into_iter()
        .filter(|q| {
            let key = normalize_ws(&q.text);
            !already_selected.contains(&key) && seen.insert(key)
        })
        .collect()
}

#[derive(Debug, Deserialize)]
struct SelectionReply {
    question: String,
    #[serde(default)]
    justification: String,
}

#[derive(Debug, Deserialize)]
struct SelectionsReply {
    selections: Vec<SelectionReply>,
}

/// Round-robin over roles in pool order: every role's first question, then
/// every role's second, until `n` are chosen.
pub fn round_robin(pool: &[Question], n: usize) -> Vec<SelectedQuestion> {
    let mut roles: Vec<&str> = Vec::new();
    let mut by_role: HashMap<&str, Vec<&Question>> = HashMap::new();
    for q in pool {
        if !by_role.contains_key(q.source_role.as_str()) {
            roles.push(&q.source_role);
        }
        by_role.entry(&q.source_role).or_default().push(q);
    }
    let mut out = Vec::new();
    let mut depth = 0;
    while out.len() < n.min(pool.len()) {
        for role in &roles {
            if let Some(q) = by_role[role].get(depth) {
                if out.len() < n {
                    out.push(SelectedQuestion {
                        question: (*q).clone(),
                        justification: "selected by round-robin fallback".into(),
                    });
                }
            }
        }
        depth += 1;
    }
    out
}

/// `min(select_s, |pool|)` distinct pool members. A judge reply naming a
/// question outside the pool is rejected; persistent failure falls back to
/// [`round_robin`], flagged.
pub async fn converge(
    ctx: &AgentContext<'_>,
    pool: &[Question],
    knowledge: &KnowledgeSet,
    history: &History,
    select_s: usize,
) -> Result<Vec<SelectedQuestion>> {
    if pool.is_empty() {
        return Err(Error::Contract("convergence requires a non-empty pool".into()));
    }
    if pool.len() == 1 {
        return Ok(vec![SelectedQuestion {
            question: pool[0].clone(),
            justification: "only candidate in the pool".into(),
        }]);
    }
    let n = select_s.min(pool.len());
    let index: HashMap<String, usize> = pool
        .iter()
        .enumerate()
        .rev()
        .map(|(i, q)| (normalize_ws(&q.text), i))
        .collect();
    let rendered_pool = pool
        .iter()
        .map(|q| format!("- [{}] {}", q.source_role, q.text))
        .collect::<Vec<_>>()
        .join("\n");
    let n_select = n.to_string();
    let rendered_knowledge = knowledge.render();
    let rendered_history = history.render();
    let prompt = Template::QuestionJudge.render(&[
        ("goal", ctx.goal()),
        ("profile", ctx.profile_doc()),
        ("knowledge", &rendered_knowledge),
        ("history", &rendered_history),
        ("pool", &rendered_pool),
        ("n_select", &n_select),
    ]);
    let request = ctx.gateway.request("question_judge", prompt);
    let reply = ctx
        .gateway
        .complete_json::<SelectionsReply, _>(&request, |r| {
            let mut seen = HashSet::new();
            for s in r.selections.iter().take(n) {
                let key = normalize_ws(&s.question);
                if !index.contains_key(&key) {
                    return Err(format!("`{}` is not a pool member", s.question));
                }
                if !seen.insert(key) {
                    return Err(format!("`{}` selected twice", s.question));
                }
                if s.justification.trim().is_empty() {
                    return Err("missing justification".into());
                }
            }
            if r.selections.len() < n {
                return Err(format!("{} selections, {n} required", r.selections.len()));
            }
            Ok(())
        })
        .await;
    match split_fatal(reply)? {
        Ok(s) => Ok(s
            .value
            .selections
            .into_iter()
            .take(n)
            .map(|sel| SelectedQuestion {
                question: pool[index[&normalize_ws(&sel.question)]].clone(),
                justification: sel.justification.trim().to_string(),
            })
            .collect()),
        Err(e) => {
            ctx.flags.raise("questions.converge", format!("round-robin fallback: {e}"));
            Ok(round_robin(pool, n))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn q(text: &str, role: &str) -> Question {
        Question {
            text: text.into(),
            source_role: role.into(),
            iteration: 1,
        }
    }

    #[test]
    fn duplicate_names_get_suffixes() {
        let mut roles = fallback_roles(3);
        roles[1].name = roles[0].name.clone();
        roles[2].name = format!("{} 2", roles[0].name);
        dedupe_role_names(&mut roles);
        let names: HashSet<_> = roles.iter().map(|r| r.name.clone()).collect();
        assert_eq!(names.len(), 3);
        assert_eq!(roles[1].name, "Trend Analyst 2");
        assert_eq!(roles[2].name, "Trend Analyst 2 2");
    }

    #[test]
    fn fallback_roles_are_complete_and_unique() {
        let roles = fallback_roles(5);
        assert_eq!(roles.len(), 5);
        assert!(roles.iter().all(RoleSpec::is_complete));
        assert_eq!(roles.iter().map(|r| &r.name).collect::<HashSet<_>>().len(), 5);
    }

    #[test]
    fn round_robin_interleaves_roles() {
        let pool = vec![q("a1", "A"), q("a2", "A"), q("b1", "B"), q("c1", "C")];
        let picked: Vec<_> = round_robin(&pool, 4).into_iter().map(|s| s.question.text).collect();
        assert_eq!(picked, vec!["a1", "b1", "c1", "a2"]);
        assert_eq!(round_robin(&pool, 2).len(), 2);
        assert_eq!(round_robin(&pool, 9).len(), 4);
    }

    #[test]
    fn filter_drops_repeats_and_prior_selections() {
        let prior: HashSet<String> = ["old question".to_string()].into();
        let pool = vec![q("old  question", "A"), q("new", "A"), q(" new ", "B")];
        let kept = filter_pool(pool, &prior);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].source_role, "A");
    }

    #[test]
    fn history_render_truncates_insights() {
        let mut h = History::new();
        let long = "x".repeat(800);
        h.push(q("q", "A"), Insight::new(long, q("q", "A"), vec![]));
        let r = h.render();
        assert!(r.contains(&format!("{}...", "x".repeat(HISTORY_INSIGHT_CHARS))));
        assert!(!r.contains(&"x".repeat(HISTORY_INSIGHT_CHARS + 1)));
    }
}
