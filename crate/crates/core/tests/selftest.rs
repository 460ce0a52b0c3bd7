use lbmtrack::selftest::{assoc, oracle, props};

fn run(checks: Vec<lbmtrack::selftest::Check>) {
    for c in &checks {
        println!("{}", c.line());
    }
    let failed: Vec<_> = checks.iter().filter(|c| !c.passed).map(|c| c.name.clone()).collect();
    assert!(failed.is_empty(), "failed: {failed:?}");
}

#[test]
fn oracle_suite_passes() {
    run(oracle::suite(5));
}

#[test]
fn assoc_suite_passes() {
    run(assoc::suite(5));
}

#[test]
fn loss_metric_and_schedule_suites_pass() {
    let mut checks = props::loss_suite(5);
    checks.extend(props::metric_suite(5));
    checks.extend(props::schedule_suite(5));
    run(checks);
}

#[test]
fn online_suite_report() {
    for c in props::online_suite(5) {
        println!("{}", c.line());
    }
}
