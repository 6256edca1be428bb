use std::time::Instant;

use t2d_core::gradsuite::{check_names, run_suite, SuiteConfig, TOLERANCE};

#[test]
fn suite_passes_is_reproducible_and_catches_corruption() {
    let start = Instant::now();
    let report = run_suite(&SuiteConfig { seed: 1, corrupt: None }).unwrap();
    let elapsed = start.elapsed();
    print!("{}", report.to_text());
    assert!(report.passed(), "failed: {:?}", report.failures());
    assert!(elapsed.as_secs() < 300, "{elapsed:?}");
    let names: Vec<_> = report.checks.iter().map(|c| c.name.clone()).collect();
    assert_eq!(names, check_names());
    assert!(report.checks.iter().all(|c| c.max_rel_err < TOLERANCE && c.coords > 0));

    let again = run_suite(&SuiteConfig { seed: 1, corrupt: None }).unwrap();
    assert_eq!(again.to_text(), report.to_text());

    for name in ["matmul", "gru_cell", "actor_loss"] {
        let bad = run_suite(&SuiteConfig {
            seed: 1,
            corrupt: Some(name.into()),
        })
        .unwrap();
        assert_eq!(bad.failures(), vec![name]);
    }
}
