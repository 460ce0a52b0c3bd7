use lbmtrack::selftest::grad;

#[test]
fn every_op_and_module_matches_finite_differences() {
    let checks = grad::suite(11);
    for c in &checks {
        println!("{}", c.line());
    }
    let failed: Vec<_> = checks.iter().filter(|c| !c.passed).map(|c| c.name.clone()).collect();
    assert!(failed.is_empty(), "failed: {failed:?}");
}
