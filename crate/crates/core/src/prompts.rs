//! Agent prompt templates, shipped as text files under `prompts/` and
//! compiled into the binary.
//!
//! Placeholders are written `{{name}}` and substituted in a single pass, so
//! substituted text (code, model output) is never re-scanned.
//!
//! The three `Eval*` rubric templates follow the G-Eval chain-of-thought
//! scoring scheme with a 0-1 output contract. They are a reimplementation;
//! the original G-Eval prompts are not reproduced.

use std::collections::HashMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Template {
    SearchJudge,
    QueryGenerator,
    KnowledgeGenerator,
    VanillaKnowledge,
    RoleDesigner,
    QuestionRaising,
    QuestionJudge,
    QuestionRewriter,
    CodePreamble,
    CodeDivideAndConquer,
    CodeQueryPlan,
    CodeNegativeReasoning,
    CodeSelector,
    CodeReviewer,
    PlotReviewer,
    CodeFixer,
    Interpreter,
    InsightJudge,
    Summary,
    EvalInsightJudge,
    EvalSummaryJudge,
    EvalPlotJudge,
}

impl Template {
    pub const ALL: [Template; 22] = [
        Template::SearchJudge,
        Template::QueryGenerator,
        Template::KnowledgeGenerator,
        Template::VanillaKnowledge,
        Template::RoleDesigner,
        Template::QuestionRaising,
        Template::QuestionJudge,
        Template::QuestionRewriter,
        Template::CodePreamble,
        Template::CodeDivideAndConquer,
        Template::CodeQueryPlan,
        Template::CodeNegativeReasoning,
        Template::CodeSelector,
        Template::CodeReviewer,
        Template::PlotReviewer,
        Template::CodeFixer,
        Template::Interpreter,
        Template::InsightJudge,
        Template::Summary,
        Template::EvalInsightJudge,
        Template::EvalSummaryJudge,
        Template::EvalPlotJudge,
    ];

    pub fn source(self) -> &'static str {
        match self {
            Template::SearchJudge => include_str!("../prompts/search_judge.txt"),
            Template::QueryGenerator => include_str!("../prompts/query_generator.txt"),
            Template::KnowledgeGenerator => include_str!("../prompts/knowledge_generator.txt"),
            Template::VanillaKnowledge => include_str!("../prompts/vanilla_knowledge.txt"),
            Template::RoleDesigner => include_str!("../prompts/role_designer.txt"),
            Template::QuestionRaising => include_str!("../prompts/question_raising.txt"),
            Template::QuestionJudge => include_str!("../prompts/question_judge.txt"),
            Template::QuestionRewriter => include_str!("../prompts/question_rewriter.txt"),
            Template::CodePreamble => include_str!("../prompts/code_preamble.txt"),
            Template::CodeDivideAndConquer => {
                include_str!("../prompts/code_generation_divide_and_conquer.txt")
            }
            Template::CodeQueryPlan => include_str!("../prompts/code_generation_query_plan.txt"),
            Template::CodeNegativeReasoning => {
                include_str!("../prompts/code_generation_negative_reasoning.txt")
            }
            Template::CodeSelector => include_str!("../prompts/code_selector.txt"),
            Template::CodeReviewer => include_str!("../prompts/code_reviewer.txt"),
            Template::PlotReviewer => include_str!("../prompts/plot_reviewer.txt"),
            Template::CodeFixer => include_str!("../prompts/code_fixer.txt"),
            Template::Interpreter => include_str!("../prompts/interpreter.txt"),
            Template::InsightJudge => include_str!("../prompts/insight_judge.txt"),
            Template::Summary => include_str!("../prompts/summary.txt"),
            Template::EvalInsightJudge => include_str!("../prompts/eval_insight_judge.txt"),
            Template::EvalSummaryJudge => include_str!("../prompts/eval_summary_judge.txt"),
            Template::EvalPlotJudge => include_str!("../prompts/eval_plot_judge.txt"),
        }
    }

    /// Placeholder names in order of first appearance.
    pub fn placeholders(self) -> Vec<&'static str> {
        let mut out: Vec<&'static str> = Vec::new();
        let src = self.source();
        let mut rest = src;
        while let Some(start) = rest.find("{{") {
            let after = &rest[start + 2..];
            match after.find("}}") {
                Some(end) => {
                    let name = &after[..end];
                    if is_name(name) && !out.contains(&name) {
                        out.push(name);
                    }
                    rest = &after[end + 2..];
                }
                None => break,
            }
        }
        out
    }

    /// Substitutes every `{{name}}`. Panics in debug builds on a missing var,
    /// which is a programming error in the calling agent.
    pub fn render(self, vars: &[(&str, &str)]) -> String {
        let map: HashMap<&str, &str> = vars.iter().copied().collect();
        let src = self.source();
        let mut out = String::with_capacity(src.len() + vars.iter().map(|(_, v)| v.len()).sum::<usize>());
        let mut rest = src;
        while let Some(start) = rest.find("{{") {
            out.push_str(&rest[..start]);
            let after = &rest[start + 2..];
            match after.find("}}") {
                Some(end) if is_name(&after[..end]) => {
                    let name = &after[..end];
                    match map.get(name) {
                        Some(value) => out.push_str(value),
                        None => {
                            debug_assert!(false, "template {self:?} missing var `{name}`");
                            out.push_str(&rest[start..start + end + 4]);
                        }
                    }
                    rest = &after[end + 2..];
                }
                _ => {
                    out.push_str("{{");
                    rest = after;
                }
            }
        }
        out.push_str(rest);
        out
    }
}

fn is_name(s: &str) -> bool {
    !s.is_empty() && s.chars().all(|c| c.is_ascii_lowercase() || c == '_')
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_template_renders_fully() {
        for t in Template::ALL {
            let names = t.placeholders();
            let vars: Vec<(&str, &str)> = names.iter().map(|n| (*n, "X")).collect();
            let out = t.render(&vars);
            for n in &names {
                assert!(!out.contains(&format!("{{{{{n}}}}}")), "{t:?} left {n}");
            }
            if t != Template::CodePreamble {
                assert!(out.contains("```json"), "{t:?} lacks an output contract");
            }
        }
    }

    #[test]
    fn substituted_text_is_not_rescanned() {
        let out = Template::Interpreter.render(&[
            ("question", "{{profile}}"),
            ("profile", "P"),
            ("stdout", "s"),
            ("plots", "none"),
        ]);
        assert!(out.contains("Question:\n{{profile}}"));
    }

    #[test]
    fn code_strategies_share_the_preamble_slot() {
        for t in [
            Template::CodeDivideAndConquer,
            Template::CodeQueryPlan,
            Template::CodeNegativeReasoning,
        ] {
            assert_eq!(t.placeholders(), vec!["code_preamble"]);
        }
    }
}
