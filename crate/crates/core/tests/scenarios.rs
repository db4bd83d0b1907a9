use std::path::Path;

use cgrepl::scenario::run_scenario;
use cgrepl::world::WorldConfig;

fn run(name: &str) -> cgrepl::scenario::ScenarioOutcome {
    let path = Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("scenarios")
        .join(name);
    let text = std::fs::read_to_string(&path).unwrap();
    let (outcome, _) = run_scenario(&text, WorldConfig::default());
    outcome
}

#[test]
fn bundled_scenarios_pass() {
    for name in ["demo.scn", "collapse.scn", "grouped_failover.scn"] {
        let o = run(name);
        assert_eq!(o.exit_code, 0, "{name}:\n{}", o.report_text());
    }
}

#[test]
fn reruns_produce_identical_reports_and_traces() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("scenarios/collapse.scn");
    let text = std::fs::read_to_string(path).unwrap();
    let cfg = WorldConfig {
        trace: true,
        ..WorldConfig::default()
    };
    let (a, wa) = run_scenario(&text, cfg.clone());
    let (b, wb) = run_scenario(&text, cfg);
    assert_eq!(a, b);
    assert_eq!(wa.trace(), wb.trace());
    assert!(!wa.trace().is_empty());
    assert_eq!(wa.state_digest(), wb.state_digest());
}
