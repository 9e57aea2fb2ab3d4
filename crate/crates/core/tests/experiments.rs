use neurogeom::experiments::*;
use serde_json::{json, Value};

fn ctx(workers: usize) -> RunContext {
    RunContext { seed: 7, workers, out_dir: None }
}

#[test]
fn registry_has_the_three_experiments() {
    assert_eq!(EXPERIMENTS.names(), ["oblique-suite", "contrast-demo", "grouping-demo"]);
    for name in EXPERIMENTS.names() {
        assert_eq!(experiment(name).unwrap().id(), name);
    }
}

#[test]
fn contrast_demo_orders_the_disks() {
    let r = ContrastDemo.run(&Value::Null, &ctx(0)).unwrap();
    assert!(r.passed(), "{:#?}", r.expectations);
    assert!(r.metrics["diskDarkSurround"] > r.metrics["diskBrightSurround"]);
    assert!(r.metrics["controlDifference"] < 1e-6);
    // Mean anchoring keeps the overall brightness at the image mean.
    let c = r.cell("contrast").unwrap();
    assert!((c.metrics["meanBrightness"] - c.metrics["meanImage"]).abs() < 1e-9);
}

#[test]
fn contrast_demo_follows_the_darker_half() {
    let r = ContrastDemo
        .run(&json!({"stimulus": {"bgLeft": 0.1, "bgRight": 0.9}}), &ctx(0))
        .unwrap();
    assert!(r.passed());
    let c = r.cell("contrast").unwrap();
    assert!(c.metrics["diskLeft"] > c.metrics["diskRight"]);
}

#[test]
fn reports_are_identical_across_runs_and_worker_counts() {
    let dir = tempfile::tempdir().unwrap();
    let with_out = RunContext { out_dir: Some(dir.path().to_path_buf()), ..ctx(1) };
    let a = ContrastDemo.run(&Value::Null, &with_out).unwrap();
    let b = ContrastDemo.run(&Value::Null, &ctx(3)).unwrap();
    for name in a.artifacts() {
        assert!(dir.path().join(name).is_file(), "{name}");
    }
    assert_eq!(a.artifacts().len(), 8);
    let strip = |r: &ExperimentReport| {
        let mut r = r.clone();
        r.cells.iter_mut().for_each(|c| c.artifacts.clear());
        r.stable_json().unwrap()
    };
    assert_eq!(strip(&a), strip(&b));
}

#[test]
fn config_snapshot_records_overrides() {
    let r = ContrastDemo.run(&json!({"minGap": 0.5}), &ctx(0)).unwrap();
    assert_eq!(r.config["minGap"], json!(0.5));
    assert_eq!(r.config["logSigma"], json!(2.0));
}

#[test]
fn grouping_demo_meets_its_expectations() {
    let r = GroupingDemo.run(&Value::Null, &ctx(0)).unwrap();
    assert!(r.passed(), "{:#?}", r.expectations);
    let empty = r.cell("empty").unwrap();
    assert!(!empty.ok);
    assert!(empty.error.as_deref().unwrap().contains("empty input"));
    assert!(r.metrics["squareCoverage"] >= 0.9);
    assert!(r.metrics["rotationOverlap"] >= 0.9);
}

#[test]
fn a_failing_cell_does_not_abort_the_suite() {
    let overrides = json!({
        "misalignments": [0.0],
        "diamondMode": "sideways",
        "kernel": {"extent": 32, "time": 32.0},
    });
    let r = ObliqueSuite.run(&overrides, &ctx(0)).unwrap();
    assert_eq!(r.cells.len(), 2);
    let sq = r.cell("square-0").unwrap();
    let di = r.cell("diamond-0").unwrap();
    assert!(sq.ok && sq.metrics.contains_key("closure"));
    assert!(!di.ok && di.error.as_deref().unwrap().contains("sideways"));
    // Expectations for the missing 6 and 12 degree cells fail as well.
    assert!(!r.passed());
    assert!(r.expectations.iter().any(|e| e.name.starts_with("diamond-0") && !e.met));
}

#[test]
fn shipped_configs_match_the_defaults() {
    let root = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for name in EXPERIMENTS.names() {
        let path = root.join(format!("{name}.json"));
        let text = std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        let shipped: Value = serde_json::from_str(&text).unwrap();
        assert_eq!(shipped, experiment(name).unwrap().default_config(), "{name}");
    }
}
