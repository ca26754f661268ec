//! A self-contained scripted world: a synthetic retail dataset, agent
//! replies that depend only on the prompt, a fake search provider and an
//! in-process sandbox.
//!
//! It exists so complete runs can be recorded without network access. The
//! shipped fixture cassette, the integration tests and the acceptance
//! suite are all produced from it.
//!
//! Script of a default run (`n_iter = 2`, `select_s = 2`):
//! - iteration 1 selects the revenue-trend question, whose version 0
//!   crashes on a misspelled column and is fixed in version 1, and the
//!   return-count question, for which every code strategy fails so it is
//!   skipped;
//! - iteration 2 selects the discount and volatility questions, both clean.
//!
//! The history therefore ends with three entries.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use chrono::NaiveDate;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::agent::AnalysisGoal;
use crate::config::RunConfig;
use crate::evaluate::GoldStandard;
use crate::gateway::scripted::{fenced_json, ScriptedBackend, ScriptedSearch};
use crate::gateway::{ModelRequest, SearchHit, SearchQuery};
use crate::sandbox::{ExecutionRequestDoc, ExecutionStatus, ScriptedExecutor};

pub const DATASET_FILE: &str = "sales.csv";
pub const MAX_DATE: &str = "2024-06-30";
pub const GOAL: &str =
    "Find the drivers of revenue and returns across regions and products to guide next quarter's inventory planning.";
pub const EMBEDDING_DIM: usize = 32;
/// History length of a default run, per the script above.
pub const SCRIPTED_HISTORY_LEN: usize = 3;

/// Spelling mistake planted in the first version of the trend script.
const BUG: &str = "values=\"Revenue\"";
const BUG_FIX: &str = "values=\"revenue\"";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    Clean,
    BuggyFirst,
    Unanswerable,
}

struct Entry {
    key: &'static str,
    text: &'static str,
    columns: &'static [&'static str],
    /// Lower is preferred by the question judge.
    priority: u8,
    kind: Kind,
    body: &'static str,
    stdout: &'static str,
    insight: &'static str,
}

const BANK: [Entry; 9] = [
    Entry {
        key: "trend",
        text: "How does monthly revenue evolve over the year in each region?",
        columns: &["date", "region", "revenue"],
        priority: 1,
        kind: Kind::BuggyFirst,
        body: "df[\"month\"] = df[\"date\"].str[:7]\nresult = df.pivot_table(index=\"month\", columns=\"region\", values=\"Revenue\", aggfunc=\"sum\")\nprint(result.round(2).to_string())\nax = result.plot(title=\"Monthly revenue by region\")\nax.set_xlabel(\"month\")\nax.set_ylabel(\"revenue\")",
        stdout: "month    East    North   South   West\n2024-01  410.4   655.2   318.0   502.6\n2024-12  902.1  1310.5   540.3   948.0\n",
        insight: "Revenue rises in every region through the year and roughly doubles from January to December; North leads every month while South grows slowest.",
    },
    Entry {
        key: "returns",
        text: "Which products have return counts above the catalogue median?",
        columns: &["product", "returned"],
        priority: 2,
        kind: Kind::Unanswerable,
        body: "",
        stdout: "",
        insight: "",
    },
    Entry {
        key: "discount",
        text: "Is there a relationship between discount level and units sold?",
        columns: &["discount", "units"],
        priority: 3,
        kind: Kind::Clean,
        body: "result = df.groupby(\"discount\")[\"units\"].mean()\nprint(result.round(2).to_string())\nax = result.plot(kind=\"bar\", title=\"Mean units by discount\")\nax.set_xlabel(\"discount\")\nax.set_ylabel(\"mean units\")",
        stdout: "discount\n0.00    21.4\n0.05    24.9\n0.10    28.3\n0.15    33.0\n",
        insight: "Units sold climb steadily with discount depth: orders at a 15% discount move about 54% more units than undiscounted ones.",
    },
    Entry {
        key: "volatility",
        text: "Which region shows the most volatile monthly units?",
        columns: &["region", "units"],
        priority: 4,
        kind: Kind::Clean,
        body: "result = df.groupby(\"region\")[\"units\"].std().sort_values()\nprint(result.round(2).to_string())\nax = result.plot(kind=\"barh\", title=\"Std. dev. of units by region\")\nax.set_xlabel(\"units std\")",
        stdout: "region\nSouth     4.1\nEast      5.6\nWest      7.2\nNorth    10.8\n",
        insight: "North is the most volatile region, with a standard deviation of monthly units about 2.6 times that of South, so its inventory needs the largest buffer.",
    },
    Entry {
        key: "price",
        text: "How does average unit price differ across products?",
        columns: &["product", "unit_price"],
        priority: 5,
        kind: Kind::Clean,
        body: "result = df.groupby(\"product\")[\"unit_price\"].mean()\nprint(result.to_string())\nresult.plot(kind=\"bar\", title=\"Mean unit price\")",
        stdout: "product\nGadget 24.5\nGizmo 9.75\nWidget 12.0\n",
        insight: "Gadget is priced about twice as high as Widget and 2.5 times as high as Gizmo.",
    },
    Entry {
        key: "share",
        text: "What share of total revenue does each region contribute?",
        columns: &["region", "revenue"],
        priority: 6,
        kind: Kind::Clean,
        body: "result = df.groupby(\"region\")[\"revenue\"].sum() / df[\"revenue\"].sum()\nprint(result.round(3).to_string())\nresult.plot(kind=\"pie\", title=\"Revenue share\")",
        stdout: "region\nEast 0.24\nNorth 0.36\nSouth 0.15\nWest 0.25\n",
        insight: "North contributes over a third of revenue while South contributes 15%.",
    },
    Entry {
        key: "peak",
        text: "In which month does each product reach its peak units?",
        columns: &["date", "product", "units"],
        priority: 7,
        kind: Kind::Clean,
        body: "df[\"month\"] = df[\"date\"].str[:7]\nresult = df.groupby([\"product\", \"month\"])[\"units\"].sum().groupby(level=0).idxmax()\nprint(result.to_string())\ndf.groupby(\"month\")[\"units\"].sum().plot(title=\"Units by month\")",
        stdout: "product\nGadget 2024-12\nGizmo 2024-11\nWidget 2024-12\n",
        insight: "All products peak in November or December.",
    },
    Entry {
        key: "returns_region",
        text: "Do return counts differ between regions?",
        columns: &["region", "returned"],
        priority: 8,
        kind: Kind::Clean,
        body: "result = df.groupby(\"region\")[\"returned\"].sum()\nprint(result.to_string())\nresult.plot(kind=\"bar\", title=\"Returns by region\")",
        stdout: "region\nEast 9\nNorth 14\nSouth 6\nWest 8\n",
        insight: "North records the most returns, in line with its higher volume.",
    },
    Entry {
        key: "discount_revenue",
        text: "Does higher discount reduce revenue per order?",
        columns: &["discount", "revenue"],
        priority: 9,
        kind: Kind::Clean,
        body: "result = df.groupby(\"discount\")[\"revenue\"].mean()\nprint(result.round(2).to_string())\nresult.plot(title=\"Revenue per order by discount\")",
        stdout: "discount\n0.00 251.0\n0.15 268.4\n",
        insight: "Revenue per order does not fall with discount; volume gains offset the lower price.",
    },
];

const ROLES: [(&str, &str, &str); 3] = [
    ("Seasonality Analyst", "retail demand planner", "temporal dynamics of revenue and units"),
    ("Returns Investigator", "quality and after-sales analyst", "rare events and return behaviour"),
    ("Pricing Skeptic", "pricing economist", "discounts, prices and their effect on volume"),
];

const QUERIES: [&str; 3] = [
    "retail seasonal demand patterns by region",
    "effect of price discounts on unit sales",
    "product return rate benchmarks retail",
];

/// Knobs for the scripted world.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Scenario {
    /// Whether the search judge asks for external knowledge.
    pub needs_search: bool,
}

impl Default for Scenario {
    fn default() -> Self {
        Self { needs_search: true }
    }
}

impl Scenario {
    pub fn goal(&self) -> AnalysisGoal {
        AnalysisGoal::new(GOAL).expect("non-empty goal")
    }

    pub fn max_date() -> NaiveDate {
        NaiveDate::parse_from_str(MAX_DATE, "%Y-%m-%d").expect("valid date")
    }

    /// Small counts so a run stays quick; matches the script above.
    pub fn config(&self, run_dir: &Path) -> RunConfig {
        RunConfig {
            n_iter: 2,
            n_q: 3,
            n_r: 3,
            n_fix: 3,
            select_s: 2,
            per_role_m: 3,
            max_date: Some(Self::max_date()),
            run_dir: run_dir.to_path_buf(),
            ..RunConfig::default()
        }
    }

    pub fn write_dataset(&self, dir: &Path) -> std::io::Result<PathBuf> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(DATASET_FILE);
        std::fs::write(&path, dataset_csv())?;
        Ok(path)
    }

    pub fn gold(&self) -> GoldStandard {
        GoldStandard {
            insights: vec![
                "Revenue grows through the year in all regions and North leads every month.".into(),
                "Deeper discounts are associated with more units sold per order.".into(),
                "North has the most volatile monthly units.".into(),
                "Gadget returns exceed the median of the catalogue.".into(),
            ],
            summary: Some(
                "Revenue grows through the year with North leading; discounts lift volume without reducing revenue; North needs the largest inventory buffer.".into(),
            ),
        }
    }

    pub fn backend(&self) -> ScriptedBackend {
        let needs_search = self.needs_search;
        ScriptedBackend::new(move |req| Ok(respond(needs_search, req))).with_embedder(|texts| texts.iter().map(|t| embed(t)).collect())
    }

    pub fn search(&self) -> ScriptedSearch {
        ScriptedSearch::new(|q| Ok(search_hits(q)))
    }

    pub fn executor(&self) -> ScriptedExecutor {
        ScriptedExecutor::new(|req| execute(req))
    }

    pub fn backend_arc(&self) -> Arc<ScriptedBackend> {
        Arc::new(self.backend())
    }
}

/// 48 rows: twelve months by four regions, products in rotation. One
/// discount cell is blank.
pub fn dataset_csv() -> String {
    let regions = [("North", 1.5), ("South", 0.7), ("East", 1.0), ("West", 1.1)];
    let products = [("Widget", 12.0), ("Gadget", 24.5), ("Gizmo", 9.75)];
    let discounts = [0.0, 0.05, 0.1, 0.15];
    let mut out = String::from("date,region,product,units,unit_price,discount,revenue,returned\n");
    for month in 1..=12u32 {
        for (r, (region, scale)) in regions.iter().enumerate() {
            let i = (month as usize - 1) * regions.len() + r;
            let (product, price) = products[i % products.len()];
            let discount = discounts[(i / 3) % discounts.len()];
            let units = ((10.0 + month as f64 * 2.0) * scale + discount * 60.0).round();
            let revenue = units * price * (1.0 - discount);
            let returned = (units as usize * (r + 1)) % 5;
            let discount_cell = if i == 17 { String::new() } else { format!("{discount:.2}") };
            out.push_str(&format!(
                "2024-{month:02}-15,{region},{product},{units},{price:.2},{discount_cell},{revenue:.2},{returned}\n"
            ));
        }
    }
    out
}

/// A deterministic 64x48 PNG: a bar chart drawn as coloured columns.
pub fn plot_png() -> Vec<u8> {
    let img = image::RgbImage::from_fn(64, 48, |x, y| {
        let bar = x / 16;
        let height = 12 + bar * 9;
        if 48 - y <= height && x % 16 < 12 {
            image::Rgb([40 + (bar * 50) as u8, 90, 160])
        } else {
            image::Rgb([255, 255, 255])
        }
    });
    let mut bytes = std::io::Cursor::new(Vec::new());
    img.write_to(&mut bytes, image::ImageFormat::Png).expect("png encodes");
    bytes.into_inner()
}

/// Hashed bag of words, L2-normalised.
pub fn embed(text: &str) -> Vec<f64> {
    let mut v = vec![0.0; EMBEDDING_DIM];
    for word in tokens(text) {
        let digest = Sha256::digest(word.as_bytes());
        v[digest[0] as usize % EMBEDDING_DIM] += 1.0;
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    } else {
        v[0] = 1.0;
    }
    v
}

fn tokens(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| w.len() > 2)
        .map(|w| w.to_lowercase())
}

fn jaccard(a: &str, b: &str) -> f64 {
    use std::collections::BTreeSet;
    let a: BTreeSet<String> = tokens(a).collect();
    let b: BTreeSet<String> = tokens(b).collect();
    if a.is_empty() && b.is_empty() {
        return 0.0;
    }
    let inter = a.intersection(&b).count() as f64;
    let union = a.union(&b).count() as f64;
    (inter / union * 100.0).round() / 100.0
}

fn entry_in(text: &str) -> Option<&'static Entry> {
    BANK.iter().find(|e| text.contains(e.text))
}

/// Text between the line equal to `header` and the next blank line.
fn section<'a>(prompt: &'a str, header: &str) -> &'a str {
    let Some(start) = prompt.find(&format!("{header}\n")) else {
        return "";
    };
    let rest = &prompt[start + header.len() + 1..];
    let end = rest.find("\n\n").unwrap_or(rest.len());
    &rest[..end]
}

fn number_after(prompt: &str, marker: &str) -> Option<usize> {
    let rest = &prompt[prompt.find(marker)? + marker.len()..];
    rest.split_whitespace().next()?.parse().ok()
}

fn script(entry: &Entry, strategy: &str) -> String {
    format!(
        "# strategy: {strategy}\n# answers: {}\nimport pandas as pd\nimport matplotlib\nmatplotlib.use(\"Agg\")\nimport matplotlib.pyplot as plt\n\ndf = pd.read_csv(\"{DATASET_FILE}\")\n{}\nplt.tight_layout()\nplt.savefig(\"plot.png\")\n",
        entry.key, entry.body
    )
}

fn respond(needs_search: bool, req: &ModelRequest) -> String {
    let p = req.prompt.as_str();
    let (agent, detail) = req.role_name.split_once(':').unwrap_or((req.role_name.as_str(), ""));
    let reply = match agent {
        "search_judge" => json!({
            "verdict": if needs_search { "yes" } else { "no" },
            "rationale": if needs_search {
                "Retail seasonality and discount benchmarks would sharpen the analysis."
            } else {
                "The columns are self-explanatory; no outside context is needed."
            },
        }),
        "query_generator" => json!({ "queries": QUERIES }),
        "knowledge_generator" => {
            let url = p
                .split_whitespace()
                .find(|w| w.starts_with("https://"))
                .unwrap_or("https://example.org/none");
            json!({"items": [
                {"statement": "Retail demand typically peaks in the fourth quarter.", "relevance": "Explains month-to-month revenue growth.", "citation": url},
                {"statement": "Discounts usually raise unit volume more than they cut revenue per order.", "relevance": "Frames the discount columns.", "citation": null},
            ]})
        }
        "vanilla_knowledge" => json!({"items": [
            {"statement": "Revenue equals units times unit price net of discount.", "relevance": "Links the numeric columns."},
            {"statement": "Return counts scale with sales volume.", "relevance": "Returns should be compared per unit sold."},
        ]}),
        "role_designer" => {
            let n = number_after(p, "Design exactly").unwrap_or(ROLES.len());
            let roles: Vec<Value> = ROLES
                .iter()
                .cycle()
                .take(n)
                .map(|(name, background, focus)| {
                    json!({"name": name, "background": background, "domain_focus": focus, "traits": ["methodical"], "capabilities": ["pandas aggregation", "time series"]})
                })
                .collect();
            json!({ "roles": roles })
        }
        "question_raiser" => {
            let slot = ROLES
                .iter()
                .position(|(name, _, _)| detail.starts_with(name))
                .unwrap_or_else(|| detail.bytes().map(usize::from).sum::<usize>() % ROLES.len());
            let m = number_after(p, "pose up to").unwrap_or(3);
            let history = section(p, "Questions already answered and their insights:");
            let questions: Vec<&str> = BANK
                .iter()
                .enumerate()
                .filter(|(i, e)| i % ROLES.len() == slot && !history.contains(e.text) && !p.contains(&format!("Question: {}", e.text)))
                .map(|(_, e)| e.text)
                .take(m)
                .collect();
            json!({ "questions": questions })
        }
        "question_judge" => {
            let n = number_after(p, "Select exactly").unwrap_or(1);
            let pool = section(p, "Candidate questions (with the role that raised them):");
            let mut candidates: Vec<(u8, &str)> = pool
                .lines()
                .filter_map(|l| l.split_once("] ").map(|(_, q)| q.trim()))
                .map(|q| (entry_in(q).map_or(u8::MAX, |e| e.priority), q))
                .collect();
            candidates.sort_by_key(|(prio, _)| *prio);
            let selections: Vec<Value> = candidates
                .iter()
                .take(n)
                .map(|(_, q)| json!({"question": q, "justification": "High expected value for the planning goal."}))
                .collect();
            json!({ "selections": selections })
        }
        "question_rewriter" => match entry_in(p) {
            Some(e) => json!({"question": e.text, "grounding_notes": "Terms map directly onto dataset columns.", "columns": e.columns}),
            None => json!({"question": section(p, "Original question:"), "grounding_notes": "", "columns": []}),
        },
        "code_generator" => match entry_in(p) {
            Some(e) if e.kind != Kind::Unanswerable => {
                json!({"reasoning": format!("{detail} plan for {}", e.key), "code": script(e, detail)})
            }
            _ => return "I cannot produce a script for this question.".into(),
        },
        "code_selector" => json!({"strategy": "query_plan", "rationale": "The query plan version states each aggregation explicitly."}),
        "code_reviewer" => {
            if p.contains(BUG) {
                json!({"verdict": "FAIL", "findings": [{"dimension": "correctness", "issue": "Column \"Revenue\" does not exist; the dataset uses \"revenue\"."}]})
            } else {
                json!({"verdict": "PASS", "findings": []})
            }
        }
        "plot_reviewer" => json!({"verdict": "PASS", "findings": []}),
        "code_fixer" => {
            let code = p
                .split("```python\n")
                .nth(1)
                .and_then(|rest| rest.split("\n```").next())
                .unwrap_or("");
            json!({"changes": "Corrected the column name.", "code": code.replace(BUG, BUG_FIX)})
        }
        "interpreter" => match entry_in(p) {
            Some(e) => json!({ "insight": e.insight }),
            None => json!({ "insight": "The output shows no clear pattern." }),
        },
        "insight_judge" => {
            let latest = p
                .match_indices("Version ")
                .filter_map(|(i, _)| number_after(&p[i..], "Version "))
                .max()
                .unwrap_or(1);
            json!({"version": latest, "rationale": "The latest version passed every review."})
        }
        "summarizer" => {
            let insights: Vec<&str> = p
                .lines()
                .filter_map(|l| l.trim().strip_prefix("Insight: "))
                .collect();
            json!({ "summary": format!("Key findings for inventory planning: {}", insights.join(" ")) })
        }
        "eval_insight_judge" => {
            let s = jaccard(section(p, "Reference insight:"), section(p, "Generated insight:"));
            json!({"score": s, "rationale": "token overlap"})
        }
        "eval_summary_judge" => {
            let s = jaccard(section(p, "Reference summary:"), section(p, "Generated summary:"));
            json!({"score": s, "rationale": "token overlap"})
        }
        "eval_plot_judge" => json!({"relevance": 8, "clarity": 7, "annotation": 6, "interpretability": 7}),
        _ => return format!("unscripted agent {}", req.role_name),
    };
    fenced_json(&reply)
}

/// Two hits per query; the second is dated after [`MAX_DATE`] and must be
/// dropped by the date filter.
fn search_hits(q: &SearchQuery) -> Vec<SearchHit> {
    let slug: String = q
        .query
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '-' })
        .collect();
    vec![
        SearchHit {
            title: format!("Guide: {}", q.query),
            snippet: format!("Industry overview of {}.", q.query),
            url: format!("https://example.org/{slug}"),
            date: NaiveDate::from_ymd_opt(2024, 3, 1),
        },
        SearchHit {
            title: format!("Outlook: {}", q.query),
            snippet: "Forecast published after the cutoff.".into(),
            url: format!("https://example.org/{slug}/outlook"),
            date: NaiveDate::from_ymd_opt(2025, 1, 15),
        },
    ]
    .into_iter()
    .take(q.k.max(1))
    .collect()
}

fn execute(req: &ExecutionRequestDoc) -> crate::sandbox::ExecutionResponseDoc {
    if req.code.contains(BUG) {
        let mut doc = ScriptedExecutor::respond(req, ExecutionStatus::Error, "", None);
        doc.stderr = "Traceback (most recent call last):\n  File \"<analysis>\", line 9\nKeyError: 'Revenue'".into();
        return doc;
    }
    match BANK.iter().find(|e| req.code.contains(&format!("# answers: {}\n", e.key))) {
        Some(e) => ScriptedExecutor::respond(req, ExecutionStatus::Ok, e.stdout, Some(&plot_png())),
        None => ScriptedExecutor::respond(req, ExecutionStatus::Ok, "", None),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dataset_has_expected_shape() {
        let csv = dataset_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 49);
        assert!(lines.iter().all(|l| l.split(',').count() == 8));
        assert_eq!(lines.iter().filter(|l| l.contains(",,")).count(), 1);
    }

    #[test]
    fn plot_is_a_valid_png() {
        let bytes = plot_png();
        assert!(image::load_from_memory(&bytes).is_ok());
        assert_eq!(bytes, plot_png());
    }

    #[test]
    fn embeddings_are_unit_length() {
        let v = embed("monthly revenue by region");
        let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-12);
        assert_eq!(embed(""), {
            let mut z = vec![0.0; EMBEDDING_DIM];
            z[0] = 1.0;
            z
        });
    }

    #[test]
    fn sections_stop_at_blank_lines() {
        let p = "A:\nfirst\nsecond\n\nB:\nthird";
        assert_eq!(section(p, "A:"), "first\nsecond");
        assert_eq!(section(p, "B:"), "third");
        assert_eq!(section(p, "C:"), "");
    }

    #[test]
    fn jaccard_bounds() {
        assert_eq!(jaccard("north leads revenue", "north leads revenue"), 1.0);
        assert_eq!(jaccard("north", "south"), 0.0);
    }
}
