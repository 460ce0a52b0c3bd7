//! Built-in oracle, property and gradient suites, shared by the `selftest`
//! command and the test targets.

pub mod assoc;
pub mod grad;
pub mod oracle;
pub mod props;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Outcome of one named check.
#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub suite: &'static str,
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    pub fn new(suite: &'static str, name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Self { suite, name: name.into(), passed, detail: detail.into() }
    }

    pub fn line(&self) -> String {
        let status = if self.passed { "PASS" } else { "FAIL" };
        format!("{status} {}/{} {}", self.suite, self.name, self.detail)
    }
}

pub(crate) fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// All suites in a fixed order.
pub fn run_all(seed: u64) -> Vec<Check> {
    let mut out = grad::suite(seed);
    out.extend(oracle::suite(seed));
    out.extend(props::loss_suite(seed));
    out.extend(props::metric_suite(seed));
    out.extend(props::schedule_suite(seed));
    out.extend(props::online_suite(seed));
    out.extend(assoc::suite(seed));
    out
}
