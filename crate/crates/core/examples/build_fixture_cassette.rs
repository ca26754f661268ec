//! Regenerates the shipped replay fixtures from the scripted scenario.
//!
//! cargo run -p insightloop --example build_fixture_cassette -- [out_dir]
//!
//! Writes sales.csv, goal.txt, config.toml, cassette.json, executions.json,
//! gold.json and eval_cassette.json. The default output is `fixtures/` at
//! the workspace root.

use std::path::PathBuf;
use std::sync::Arc;

use insightloop::artifacts::{CASSETTE_FILE, EXECUTIONS_FILE};
use insightloop::evaluate::evaluate_run;
use insightloop::gateway::{Gateway, ModelSettings};
use insightloop::orchestrator::run_analysis;
use insightloop::sandbox::RecordingExecutor;
use insightloop::scenario::{Scenario, SCRIPTED_HISTORY_LEN};

#[tokio::main]
async fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = std::env::args_os()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures"));
    std::fs::create_dir_all(&out)?;
    let scenario = Scenario::default();
    let dataset = scenario.write_dataset(&out)?;
    std::fs::write(out.join("goal.txt"), format!("{}\n", scenario.goal().as_str()))?;

    let scratch = tempfile::tempdir()?;
    let config = scenario.config(&scratch.path().join("run"));
    std::fs::write(out.join("config.toml"), toml::to_string(&config)?)?;

    let gateway = Gateway::record(
        Arc::new(scenario.backend()),
        Some(Arc::new(scenario.search())),
        ModelSettings::default(),
    );
    let executor = RecordingExecutor::new(Arc::new(scenario.executor()));
    let report = run_analysis(&dataset, &scenario.goal(), &config, &gateway, &executor).await?;
    assert_eq!(report.history.len(), SCRIPTED_HISTORY_LEN, "scenario drifted from its script");
    gateway.recorded().save(&out.join(CASSETTE_FILE))?;
    executor.log().save(&out.join(EXECUTIONS_FILE))?;

    let gold = scenario.gold();
    std::fs::write(out.join("gold.json"), serde_json::to_string_pretty(&gold)? + "\n")?;
    let judge = Gateway::record(Arc::new(scenario.backend()), None, ModelSettings::default());
    evaluate_run(&config.run_dir, &gold, &judge, 4).await?;
    judge.recorded().save(&out.join("eval_cassette.json"))?;

    println!(
        "wrote fixtures to {} ({} model calls, {} executions, history {})",
        out.display(),
        gateway.recorded().len(),
        executor.log().entries.len(),
        report.history.len()
    );
    Ok(())
}
