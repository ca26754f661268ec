//! Acceptance suite. Runs every primary criterion at its stated tolerance
//! and prints one PASS/FAIL line per criterion; exits non-zero on any
//! failure.
//!
//! cargo test -p insightloop-cli --test acceptance

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use insightloop::agent::{AgentContext, AnalysisGoal};
use insightloop::artifacts::RunDir;
use insightloop::eval::{coverage, diversity, judge_plot, EmbeddingVector, Judge, PlotScore};
use insightloop::flags::Flags;
use insightloop::gateway::scripted::{fenced_json, ScriptedBackend};
use insightloop::gateway::{CallKind, Gateway, ModelRequest, ModelSettings};
use insightloop::insight::{
    answer_question, final_judge, select_code, ClarifiedQuestion, CodeCandidate, CodeVersion, EngineSettings, Insight,
    Finding, ReviewOrigin, ReviewReport, ReviewSubject, Strategy,
};
use insightloop::knowledge::KnowledgeSet;
use insightloop::orchestrator::{run_analysis, RunReport};
use insightloop::profile::{profile_dataset, ColumnType, DatasetProfile, DiagnosticKind};
use insightloop::questions::{converge, filter_pool, Question, SelectedQuestion};
use insightloop::sandbox::{ExecutionOutput, ExecutionStatus, RecordingExecutor, ReplayExecutor, ScriptedExecutor};
use insightloop::scenario::{self, Scenario, SCRIPTED_HISTORY_LEN};
use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use serde_json::json;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn runtime() -> tokio::runtime::Runtime {
    tokio::runtime::Builder::new_current_thread().enable_all().build().expect("runtime")
}

/// Dataset, profile and goal shared by the agent-level criteria.
struct Bench {
    _tmp: tempfile::TempDir,
    dataset: PathBuf,
    profile: DatasetProfile,
    goal: AnalysisGoal,
}

fn bench() -> Bench {
    let tmp = tempfile::tempdir().expect("tempdir");
    let dataset = Scenario::default().write_dataset(tmp.path()).expect("dataset");
    let profile = profile_dataset(&dataset, 5).expect("profile");
    Bench {
        _tmp: tmp,
        dataset,
        profile,
        goal: Scenario::default().goal(),
    }
}

fn scripted_gateway<F>(responder: F) -> Gateway
where
    F: Fn(&ModelRequest) -> Result<String, String> + Send + Sync + 'static,
{
    Gateway::passthrough(Arc::new(ScriptedBackend::new(responder)), None, ModelSettings::default())
}

fn question(text: &str) -> Question {
    Question {
        text: text.into(),
        source_role: "Analyst".into(),
        iteration: 1,
    }
}

// ---------------------------------------------------------------------------
// Formula oracle

fn oracle_diversity(vs: &[Vec<f64>]) -> f64 {
    // All ordered pairs, unnormalised vectors: independent of the
    // implementation's unit-vector, i<j formulation.
    let n = vs.len();
    let mut sum = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                let dot: f64 = vs[i].iter().zip(&vs[j]).map(|(a, b)| a * b).sum();
                let na: f64 = vs[i].iter().map(|a| a * a).sum::<f64>().sqrt();
                let nb: f64 = vs[j].iter().map(|b| b * b).sum::<f64>().sqrt();
                sum += dot / (na * nb);
            }
        }
    }
    1.0 - sum / (n * (n - 1)) as f64
}

fn oracle_coverage(vs: &[Vec<f64>]) -> f64 {
    let n = vs.len() as f64;
    let dim = vs[0].len();
    let centroid: Vec<f64> = (0..dim).map(|d| vs.iter().rev().map(|v| v[d]).sum::<f64>() / n).collect();
    vs.iter()
        .map(|v| {
            let mut sq = 0.0;
            for d in (0..dim).rev() {
                sq += (v[d] - centroid[d]) * (v[d] - centroid[d]);
            }
            sq.sqrt()
        })
        .sum::<f64>()
        / n
}

fn embed_all(vs: &[Vec<f64>]) -> Vec<EmbeddingVector> {
    vs.iter().cloned().map(EmbeddingVector::new).collect()
}

fn formula_oracle() -> Outcome {
    let hand = |vs: &[&[f64]]| embed_all(&vs.iter().map(|v| v.to_vec()).collect::<Vec<_>>());
    let exact = |got: f64, want: f64, what: &str| ensure((got - want).abs() <= 1e-12, || format!("{what}: {got} != {want}"));
    exact(diversity(&hand(&[&[1.0, 0.0], &[1.0, 0.0]])).unwrap(), 0.0, "diversity identical")?;
    exact(diversity(&hand(&[&[1.0, 0.0], &[0.0, 1.0]])).unwrap(), 1.0, "diversity orthogonal")?;
    exact(diversity(&hand(&[&[1.0, 0.0], &[1.0, 0.0], &[0.0, 1.0]])).unwrap(), 2.0 / 3.0, "diversity e1,e1,e2")?;
    exact(coverage(&hand(&[&[0.3, 0.4], &[0.3, 0.4], &[0.3, 0.4]])).unwrap(), 0.0, "coverage identical")?;
    exact(coverage(&hand(&[&[1.0, 0.0], &[-1.0, 0.0]])).unwrap(), 1.0, "coverage e1,-e1")?;
    exact(coverage(&hand(&[&[1.0, 0.0], &[0.0, 1.0]])).unwrap(), 0.5f64.sqrt(), "coverage e1,e2")?;

    let mut rng = StdRng::seed_from_u64(0x5eed_0001);
    let mut worst = 0.0f64;
    for trial in 0..1000 {
        let n = rng.gen_range(2..=50);
        let dim = rng.gen_range(1..=64);
        let vs: Vec<Vec<f64>> = (0..n)
            .map(|_| loop {
                let v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
                if v.iter().any(|x| *x != 0.0) {
                    break v;
                }
            })
            .collect();
        let e = embed_all(&vs);
        let dd = (diversity(&e).map_err(|err| err.to_string())? - oracle_diversity(&vs)).abs();
        let dc = (coverage(&e).map_err(|err| err.to_string())? - oracle_coverage(&vs)).abs();
        worst = worst.max(dd).max(dc);
        ensure(dd <= 1e-9 && dc <= 1e-9, || format!("trial {trial}: diversity err {dd:e}, coverage err {dc:e}"))?;
    }
    Ok(format!("1000 random sets within 1e-9 (max err {worst:.1e}); 6 hand cases within 1e-12"))
}

// ---------------------------------------------------------------------------
// Profiler oracle

struct OracleStats {
    mean: f64,
    std_dev: f64,
    min: f64,
    max: f64,
    q: [f64; 3],
}

fn oracle_stats(values: &[f64]) -> OracleStats {
    let mut s = values.to_vec();
    s.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = s.len();
    let mean = s.iter().sum::<f64>() / n as f64;
    let var = if n > 1 { s.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64 } else { 0.0 };
    // Type 7: position p(n-1), linear interpolation.
    let q = |p: f64| {
        let pos = p * (n - 1) as f64;
        let i = pos as usize;
        if i + 1 >= n {
            s[n - 1]
        } else {
            s[i] * (1.0 - (pos - i as f64)) + s[i + 1] * (pos - i as f64)
        }
    };
    OracleStats {
        mean,
        std_dev: var.sqrt(),
        min: s[0],
        max: s[n - 1],
        q: [q(0.25), q(0.5), q(0.75)],
    }
}

fn profiler_oracle() -> Outcome {
    let mut rng = StdRng::seed_from_u64(0x5eed_0002);
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let markers = ["", "NA", "n/a", "null"];
    let labels = ["north", "south", "east", "west", "central"];
    let mut total_rows = 0u64;
    for table in 0..50 {
        let rows = if table % 10 == 0 { 10_000 } else { rng.gen_range(1..=3_000) };
        let mut lines = vec!["id,amount,segment,active,blank,note".to_string()];
        let mut ids = Vec::new();
        let mut amounts = Vec::new();
        let mut missing = [0u64; 6];
        let mut seen: HashSet<String> = HashSet::new();
        let mut duplicates = 0u64;
        for r in 0..rows {
            let line = if r > 0 && rng.gen_bool(0.02) {
                // Repeat an earlier row verbatim.
                lines[rng.gen_range(1..lines.len())].clone()
            } else {
                let id = r as f64;
                let amount = if r == 0 || rng.gen_bool(0.9) {
                    Some((rng.gen_range(-5_000.0..5_000.0f64) * 1000.0).round() / 1000.0)
                } else {
                    None
                };
                let segment = if rng.gen_bool(0.95) { labels.choose(&mut rng).unwrap().to_string() } else { markers[rng.gen_range(0..4)].to_string() };
                let active = if rng.gen_bool(0.5) { "true" } else { "false" };
                let blank = markers[rng.gen_range(0..4)];
                format!(
                    "{id},{},{segment},{active},{blank},note {r}",
                    amount.map(|a| a.to_string()).unwrap_or_else(|| markers[rng.gen_range(0..4)].to_string())
                )
            };
            let fields: Vec<&str> = line.split(',').collect();
            ids.push(fields[0].parse::<f64>().unwrap());
            if let Ok(a) = fields[1].parse::<f64>() {
                amounts.push(a);
            }
            for (c, f) in fields.iter().enumerate() {
                if markers.iter().any(|m| f.eq_ignore_ascii_case(m)) {
                    missing[c] += 1;
                }
            }
            if !seen.insert(line.clone()) {
                duplicates += 1;
            }
            lines.push(line);
        }
        total_rows += rows as u64;
        let path = tmp.path().join(format!("t{table}.csv"));
        std::fs::write(&path, lines.join("\n") + "\n").map_err(|e| e.to_string())?;
        let p = profile_dataset(&path, 5).map_err(|e| format!("table {table}: {e}"))?;

        let ctx = |what: &str| format!("table {table}: {what}");
        ensure(p.row_count == rows as u64, || ctx(&format!("row_count {} != {rows}", p.row_count)))?;
        ensure(p.column_count == 6, || ctx("column_count"))?;
        for (c, col) in p.columns.iter().enumerate() {
            ensure(col.missing_count == missing[c], || ctx(&format!("{} missing {} != {}", col.name, col.missing_count, missing[c])))?;
        }
        let types: Vec<ColumnType> = p.columns.iter().map(|c| c.inferred_type).collect();
        ensure(
            types
                == [
                    ColumnType::Numeric,
                    ColumnType::Numeric,
                    ColumnType::Categorical,
                    ColumnType::Boolean,
                    ColumnType::Text,
                    if rows > 20 { ColumnType::Text } else { ColumnType::Categorical },
                ]
                || (rows <= 20),
            || ctx(&format!("types {types:?}")),
        )?;
        let dup_diag = p.diagnostics.iter().find(|d| d.kind == DiagnosticKind::DuplicatedRows).map_or(0, |d| d.count);
        ensure(dup_diag == duplicates, || ctx(&format!("duplicates {dup_diag} != {duplicates}")))?;
        let miss_diag = p.diagnostics.iter().find(|d| d.kind == DiagnosticKind::MissingValues).map_or(0, |d| d.count);
        ensure(miss_diag == missing.iter().sum::<u64>(), || ctx("missing diagnostic total"))?;

        for (col, values) in [(&p.columns[0], &ids), (&p.columns[1], &amounts)] {
            let got = col.numeric_stats.as_ref().ok_or_else(|| ctx(&format!("{} has no stats", col.name)))?;
            let want = oracle_stats(values);
            let pairs = [
                ("mean", got.mean, want.mean),
                ("std_dev", got.std_dev, want.std_dev),
                ("min", got.min, want.min),
                ("max", got.max, want.max),
                ("p25", got.quantiles.p25, want.q[0]),
                ("p50", got.quantiles.p50, want.q[1]),
                ("p75", got.quantiles.p75, want.q[2]),
            ];
            for (name, g, w) in pairs {
                ensure((g - w).abs() <= 1e-9, || ctx(&format!("{}.{name}: {g} vs oracle {w}", col.name)))?;
            }
        }
    }
    Ok(format!("50 tables ({total_rows} rows): counts exact, stats within 1e-9"))
}

// ---------------------------------------------------------------------------
// Fix-loop bounds

const N_FIX: usize = 5;

/// Runs one question whose k-th code review returns `verdicts[k]` (true is
/// PASS); returns the per-version "had a FAIL" list.
async fn fix_chain(b: &Bench, verdicts: Vec<bool>) -> Result<Vec<bool>, String> {
    let seq = Arc::new(verdicts);
    let cursor = Arc::new(AtomicUsize::new(0));
    let (seq2, cursor2) = (seq.clone(), cursor.clone());
    let gateway = scripted_gateway(move |req| {
        let (agent, _) = req.role_name.split_once(':').unwrap_or((req.role_name.as_str(), ""));
        let v = match agent {
            "question_rewriter" => json!({"question": "How do units vary by region?", "grounding_notes": "", "columns": ["region", "units"]}),
            "code_generator" => json!({"reasoning": "r", "code": format!("# {}\nprint(1)", req.role_name)}),
            "code_selector" => json!({"strategy": "query_plan", "rationale": "r"}),
            "code_reviewer" => {
                let k = cursor2.fetch_add(1, Ordering::SeqCst);
                if *seq2.get(k).unwrap_or(&true) {
                    json!({"verdict": "PASS", "findings": []})
                } else {
                    json!({"verdict": "FAIL", "findings": [{"dimension": "correctness", "issue": format!("issue {k}")}]})
                }
            }
            "plot_reviewer" => json!({"verdict": "PASS", "findings": []}),
            "code_fixer" => json!({"changes": "c", "code": format!("print({})", cursor2.load(Ordering::SeqCst))}),
            "interpreter" => json!({"insight": "Units differ by region."}),
            "insight_judge" => json!({"version": 0, "rationale": "r"}),
            other => return Err(format!("unexpected agent {other}")),
        };
        Ok(fenced_json(&v))
    });
    let executor = ScriptedExecutor::new(|req| {
        ScriptedExecutor::respond(req, ExecutionStatus::Ok, "region units\nNorth 10\n", Some(&scenario::plot_png()))
    });
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let run = RunDir::new(tmp.path());
    let ctx = AgentContext::new(&gateway, Flags::new(), &b.profile, &b.goal);
    let settings = EngineSettings {
        n_fix: N_FIX,
        timeout_secs: 5,
        memory_cap_bytes: 1 << 30,
    };
    let selected = SelectedQuestion {
        question: question("How do units vary by region?"),
        justification: "j".into(),
    };
    let outcome = answer_question(&ctx, &KnowledgeSet::empty(), &executor, &run, &b.dataset, &settings, "iter-1/q-1", &selected)
        .await
        .map_err(|e| e.to_string())?;
    let mut chain = Vec::new();
    for i in 0..outcome.versions {
        let text = std::fs::read_to_string(run.path(format!("questions/iter-1/q-1/versions/{i}/reviews.json"))).map_err(|e| e.to_string())?;
        chain.push(text.contains("\"FAIL\""));
    }
    ensure(!run.path(format!("questions/iter-1/q-1/versions/{}", outcome.versions)).exists(), || "extra version dir".into())?;
    Ok(chain)
}

fn fix_loop_bounds() -> Outcome {
    let b = bench();
    let rt = runtime();
    let all_fail = rt.block_on(fix_chain(&b, vec![false; 20]))?;
    ensure(all_fail.len() == N_FIX + 1, || format!("always-FAIL chain has {} versions", all_fail.len()))?;
    let all_pass = rt.block_on(fix_chain(&b, vec![true; 20]))?;
    ensure(all_pass.len() == 1, || format!("always-PASS chain has {} versions", all_pass.len()))?;
    let mut rng = StdRng::seed_from_u64(0x5eed_0003);
    let trials = 200;
    for t in 0..trials {
        let p_pass = rng.gen_range(0.0..1.0);
        let verdicts: Vec<bool> = (0..10).map(|_| rng.gen_bool(p_pass)).collect();
        let chain = rt.block_on(fix_chain(&b, verdicts.clone()))?;
        let expected = verdicts.iter().position(|v| *v).map_or(N_FIX + 1, |i| (i + 1).min(N_FIX + 1));
        ensure(chain.len() <= N_FIX + 1, || format!("trial {t}: {} versions", chain.len()))?;
        ensure(chain.len() == expected, || format!("trial {t}: {} versions, expected {expected}", chain.len()))?;
        for i in 1..chain.len() {
            ensure(chain[i - 1], || format!("trial {t}: version {i} exists without a FAIL at {}", i - 1))?;
        }
    }
    Ok(format!("always-FAIL -> {} versions, always-PASS -> 1, {trials} random sequences bounded", N_FIX + 1))
}

// ---------------------------------------------------------------------------
// Retrieval gating

fn search_calls_on_replay(needs_search: bool) -> Result<usize, String> {
    let scenario = Scenario { needs_search };
    let rt = runtime();
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let dataset = scenario.write_dataset(&tmp.path().join("data")).map_err(|e| e.to_string())?;
    let recorder = Gateway::record(Arc::new(scenario.backend()), Some(Arc::new(scenario.search())), ModelSettings::default());
    let executor = RecordingExecutor::new(Arc::new(scenario.executor()));
    let config = scenario.config(&tmp.path().join("record"));
    ensure(config.n_q == 3, || "scenario must use n_q = 3".into())?;
    rt.block_on(run_analysis(&dataset, &scenario.goal(), &config, &recorder, &executor)).map_err(|e| e.to_string())?;

    let replayer = Gateway::replay(recorder.recorded(), ModelSettings::default());
    let mut config = config;
    config.run_dir = tmp.path().join("replay");
    rt.block_on(run_analysis(&dataset, &scenario.goal(), &config, &replayer, &ReplayExecutor::new(executor.log())))
        .map_err(|e| e.to_string())?;
    Ok(replayer.call_count(CallKind::Search))
}

fn retrieval_gating() -> Outcome {
    let no = search_calls_on_replay(false)?;
    ensure(no == 0, || format!("judge said no, yet {no} search calls"))?;
    let yes = search_calls_on_replay(true)?;
    ensure(yes == 3, || format!("judge said yes, {yes} search calls instead of 3"))?;
    Ok("verdict no -> 0 search calls, verdict yes -> 3".into())
}

// ---------------------------------------------------------------------------
// Convergence subset property

const WORDS: [&str; 12] = ["revenue", "region", "month", "returns", "discount", "units", "trend", "share", "peak", "price", "churn", "basket"];

fn random_question(rng: &mut StdRng) -> String {
    let n = rng.gen_range(3..8);
    let words: Vec<&str> = (0..n).map(|_| *WORDS.choose(rng).unwrap()).collect();
    format!("How does {}?", words.join(" "))
}

fn convergence_subset() -> Outcome {
    let b = bench();
    let rt = runtime();
    let mut rng = StdRng::seed_from_u64(0x5eed_0005);
    let mut fallbacks = 0;
    for trial in 0..1000 {
        let raw: Vec<Question> = (0..rng.gen_range(1..12))
            .map(|_| Question {
                text: random_question(&mut rng),
                source_role: format!("R{}", rng.gen_range(0..3)),
                iteration: 1,
            })
            .collect();
        let pool = filter_pool(raw, &HashSet::new());
        let select_s = rng.gen_range(1..5);
        // Judge replies mix verbatim members, whitespace variants,
        // inventions, repeats and garbage.
        let mut picks = Vec::new();
        for _ in 0..rng.gen_range(0..6) {
            let q = pool.choose(&mut rng).unwrap().text.clone();
            picks.push(match rng.gen_range(0..5) {
                0 => format!("  {}  ", q.replace(' ', "   ")),
                1 => random_question(&mut rng) + " (new)",
                _ => q,
            });
        }
        let garbage = rng.gen_bool(0.15);
        let reply = if garbage {
            "no json here".to_string()
        } else {
            fenced_json(&json!({"selections": picks.iter().map(|q| json!({"question": q, "justification": "j"})).collect::<Vec<_>>()}))
        };
        let gateway = scripted_gateway(move |_| Ok(reply.clone()));
        let flags = Flags::new();
        let ctx = AgentContext::new(&gateway, flags.clone(), &b.profile, &b.goal);
        let selected = rt
            .block_on(converge(&ctx, &pool, &KnowledgeSet::empty(), &Default::default(), select_s))
            .map_err(|e| format!("trial {trial}: {e}"))?;
        let members: HashSet<&str> = pool.iter().map(|q| q.text.as_str()).collect();
        let mut seen = HashSet::new();
        for s in &selected {
            ensure(members.contains(s.question.text.as_str()), || format!("trial {trial}: `{}` not in pool", s.question.text))?;
            ensure(seen.insert(s.question.text.clone()), || format!("trial {trial}: duplicate selection"))?;
        }
        ensure(selected.len() == select_s.min(pool.len()), || {
            format!("trial {trial}: {} selected, expected {}", selected.len(), select_s.min(pool.len()))
        })?;
        if flags.has_stage("questions.converge") {
            fallbacks += 1;
        }
    }
    Ok(format!("1000 random pools: selections verbatim pool members and distinct ({fallbacks} round-robin fallbacks)"))
}

// ---------------------------------------------------------------------------
// End-to-end replay determinism

fn fixtures_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

fn tree(root: &Path) -> Result<BTreeMap<String, Vec<u8>>, String> {
    let mut out = BTreeMap::new();
    for entry in walkdir::WalkDir::new(root) {
        let entry = entry.map_err(|e| e.to_string())?;
        if entry.file_type().is_file() {
            let rel = entry.path().strip_prefix(root).unwrap().to_string_lossy().to_string();
            out.insert(rel, std::fs::read(entry.path()).map_err(|e| e.to_string())?);
        }
    }
    Ok(out)
}

fn replay_once(out: &Path) -> Result<i32, String> {
    let f = fixtures_dir();
    let status = Command::new(env!("CARGO_BIN_EXE_insightloop"))
        .arg("run")
        .arg("--dataset")
        .arg(f.join("sales.csv"))
        .arg("--goal-file")
        .arg(f.join("goal.txt"))
        .arg("--config")
        .arg(f.join("config.toml"))
        .args(["--mode", "replay"])
        .arg("--cassette")
        .arg(f.join("cassette.json"))
        .arg("--executions")
        .arg(f.join("executions.json"))
        .arg("--run-dir")
        .arg(out)
        .env_clear()
        .output()
        .map_err(|e| e.to_string())?;
    let code = status.status.code().unwrap_or(-1);
    ensure(code == 0 || code == 1, || format!("exit {code}: {}", String::from_utf8_lossy(&status.stderr)))?;
    Ok(code)
}

fn replay_determinism() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    replay_once(&a)?;
    replay_once(&b)?;
    let (ta, tb) = (tree(&a)?, tree(&b)?);
    ensure(ta.get("run_report.json") == tb.get("run_report.json"), || "run reports differ".into())?;
    ensure(ta.get("summary.txt") == tb.get("summary.txt"), || "summaries differ".into())?;
    let differing: Vec<&String> = ta.keys().chain(tb.keys()).filter(|k| ta.get(*k) != tb.get(*k)).collect();
    ensure(differing.is_empty(), || format!("artifact trees differ: {differing:?}"))?;
    let report = RunReport::load(&a).map_err(|e| e.to_string())?;
    ensure(report.history.len() == SCRIPTED_HISTORY_LEN, || {
        format!("history length {} != scripted {SCRIPTED_HISTORY_LEN}", report.history.len())
    })?;
    Ok(format!("two replays byte-identical over {} files; history length {}", ta.len(), report.history.len()))
}

// ---------------------------------------------------------------------------
// Selector/judge soundness

fn random_candidates(rng: &mut StdRng) -> Vec<CodeCandidate> {
    loop {
        let c: Vec<CodeCandidate> = Strategy::ALL
            .into_iter()
            .map(|s| {
                let live = rng.gen_bool(0.7);
                CodeCandidate {
                    strategy: s,
                    reasoning: "r".into(),
                    code: if live { format!("# {}\nprint({})\n", s.tag(), rng.gen::<u32>()) } else { String::new() },
                    failure: (!live).then(|| "schema".to_string()),
                }
            })
            .collect();
        if c.iter().any(CodeCandidate::is_live) {
            return c;
        }
    }
}

fn random_versions(rng: &mut StdRng, q: &Question) -> Vec<CodeVersion> {
    (0..rng.gen_range(1..=6))
        .map(|i| {
            let mut v = CodeVersion::new(i, format!("code {i}"));
            let ok = rng.gen_bool(0.7);
            v.execution = Some(if ok {
                ExecutionOutput {
                    status: ExecutionStatus::Ok,
                    stdout: "x".into(),
                    stderr: String::new(),
                    plot_paths: vec![],
                    wall_time_secs: 0.1,
                }
            } else {
                ExecutionOutput::failed(ExecutionStatus::Error, "boom", 0.1)
            });
            v.reviews.push(if rng.gen_bool(0.5) {
                ReviewReport::pass(ReviewSubject::Code, false)
            } else {
                ReviewReport::fail(ReviewSubject::Code, ReviewOrigin::Reviewer, vec![Finding { dimension: "correctness".into(), issue: "i".into() }])
            });
            if ok {
                v.insight = Some(if rng.gen_bool(0.8) {
                    Insight::new(format!("insight {i} {}", rng.gen::<u16>()), q.clone(), vec![])
                } else {
                    Insight::uninterpretable(q.clone(), vec![])
                });
            }
            v
        })
        .collect()
}

fn selector_judge_soundness() -> Outcome {
    let b = bench();
    let rt = runtime();
    let mut rng = StdRng::seed_from_u64(0x5eed_0007);
    let q = question("How do units vary by region?");
    let clarified = ClarifiedQuestion::identity(&q);
    let (mut sel_fallbacks, mut judge_fallbacks) = (0, 0);
    for trial in 0..1000 {
        // Selector.
        let candidates = random_candidates(&mut rng);
        let live: Vec<&CodeCandidate> = candidates.iter().filter(|c| c.is_live()).collect();
        let reply_tag = match rng.gen_range(0..5) {
            0 => "brute_force".to_string(),
            1 => "not json".to_string(),
            2 => "Query Plan".to_string(),
            _ => Strategy::ALL.choose(&mut rng).unwrap().tag().to_string(),
        };
        let reply = if reply_tag == "not json" { reply_tag.clone() } else { fenced_json(&json!({"strategy": reply_tag, "rationale": "r"})) };
        let gateway = scripted_gateway(move |_| Ok(reply.clone()));
        let ctx = AgentContext::new(&gateway, Flags::new(), &b.profile, &b.goal);
        let sel = rt.block_on(select_code(&ctx, &clarified, &candidates)).map_err(|e| e.to_string())?;
        ensure(live.iter().any(|c| c.code == sel.code && c.strategy == sel.strategy), || format!("trial {trial}: selected code is not a live candidate"))?;
        let valid = Strategy::parse(&reply_tag).filter(|s| live.iter().any(|c| c.strategy == *s));
        let expected = if live.len() == 1 {
            live[0].strategy
        } else if let Some(s) = valid {
            s
        } else {
            live[0].strategy
        };
        ensure(sel.strategy == expected, || format!("trial {trial}: selector chose {:?}, expected {expected:?}", sel.strategy))?;
        ensure(sel.fallback == (live.len() > 1 && valid.is_none()), || format!("trial {trial}: fallback flag wrong"))?;
        sel_fallbacks += sel.fallback as usize;

        // Final judge.
        let versions = random_versions(&mut rng, &q);
        let eligible: Vec<&CodeVersion> = versions.iter().filter(|v| v.usable_insight().is_some()).collect();
        let pick: serde_json::Value = match rng.gen_range(0..4) {
            0 => json!(99),
            1 => json!(format!("v{}", rng.gen_range(0..versions.len()))),
            2 => json!("garbage"),
            _ => json!(rng.gen_range(0..versions.len())),
        };
        let judge_reply = fenced_json(&json!({"version": pick, "rationale": "r"}));
        let gateway = scripted_gateway(move |_| Ok(judge_reply.clone()));
        let ctx = AgentContext::new(&gateway, Flags::new(), &b.profile, &b.goal);
        let judged = rt.block_on(final_judge(&ctx, &q, &versions)).map_err(|e| e.to_string())?;
        match (eligible.as_slice(), judged) {
            ([], None) => {}
            ([], Some(_)) => return Err(format!("trial {trial}: insight without an eligible version")),
            (_, None) => return Err(format!("trial {trial}: eligible versions but no insight")),
            (el, Some(j)) => {
                let chosen = versions.iter().find(|v| v.index == j.version).unwrap();
                ensure(chosen.insight.as_ref().map(|i| &i.text) == Some(&j.insight.text), || format!("trial {trial}: insight not byte-equal to its version"))?;
                let requested = match &pick {
                    serde_json::Value::Number(n) => n.as_u64().map(|n| n as usize),
                    serde_json::Value::String(s) => s.trim_start_matches('v').parse().ok(),
                    _ => None,
                }
                .filter(|i| el.iter().any(|v| v.index == *i));
                let expected = if el.len() == 1 {
                    el[0].index
                } else if let Some(i) = requested {
                    i
                } else {
                    el.iter()
                        .rev()
                        .find(|v| v.all_pass())
                        .or_else(|| el.iter().rev().find(|v| v.executed_ok()))
                        .unwrap_or(el.last().unwrap())
                        .index
                };
                ensure(j.version == expected, || format!("trial {trial}: judge chose {}, expected {expected}", j.version))?;
                judge_fallbacks += j.fallback as usize;
            }
        }
    }
    Ok(format!("1000 trials: code and insights byte-equal to candidates; {sel_fallbacks} selector and {judge_fallbacks} judge fallbacks as documented"))
}

// ---------------------------------------------------------------------------
// Plot rubric

fn plot_rubric() -> Outcome {
    let rt = runtime();
    let calls = Arc::new(Mutex::new(0usize));
    let c = calls.clone();
    let gateway = scripted_gateway(move |_| {
        *c.lock().unwrap() += 1;
        Ok(fenced_json(&json!({"relevance": 9, "clarity": 9, "annotation": 9, "interpretability": 9})))
    });
    let judge = Judge::new(&gateway, Flags::new());
    let absent = rt.block_on(judge_plot("q", None, &judge)).map_err(|e| e.to_string())?;
    let missing_file = rt
        .block_on(judge_plot("q", Some(Path::new("/nonexistent/plot.png")), &judge))
        .map_err(|e| e.to_string())?;
    ensure(absent == PlotScore::ZERO && missing_file == PlotScore::ZERO, || "absent plot scored non-zero".into())?;
    ensure(absent.as_tuple() == (0, 0, 0, 0), || "tuple not zero".into())?;
    let n = *calls.lock().unwrap();
    ensure(n == 0 && gateway.call_count(CallKind::Completion) == 0, || format!("{n} judge calls for absent plots"))?;
    Ok("absent and missing plots -> (0,0,0,0) with 0 judge calls".into())
}

// ---------------------------------------------------------------------------

fn main() {
    let criteria: [(&str, Duration, fn() -> Outcome); 8] = [
        ("formula-oracle", Duration::from_secs(10), formula_oracle),
        ("profiler-oracle", Duration::from_secs(30), profiler_oracle),
        ("fix-loop-bounds", Duration::MAX, fix_loop_bounds),
        ("retrieval-gating", Duration::MAX, retrieval_gating),
        ("convergence-subset", Duration::MAX, convergence_subset),
        ("replay-determinism", Duration::from_secs(60), replay_determinism),
        ("selector-judge-soundness", Duration::MAX, selector_judge_soundness),
        ("plot-rubric", Duration::MAX, plot_rubric),
    ];
    let mut failed = 0;
    for (name, budget, check) in criteria {
        let started = Instant::now();
        let result = std::panic::catch_unwind(check).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_else(|| "panicked".into()))
        });
        let elapsed = started.elapsed();
        let result = result.and_then(|detail| {
            if elapsed > budget {
                Err(format!("{detail}; but took {:.1}s, budget {}s", elapsed.as_secs_f64(), budget.as_secs()))
            } else {
                Ok(detail)
            }
        });
        match result {
            Ok(detail) => println!("PASS {name}: {detail} ({:.2}s)", elapsed.as_secs_f64()),
            Err(why) => {
                failed += 1;
                println!("FAIL {name}: {why} ({:.2}s)", elapsed.as_secs_f64());
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
