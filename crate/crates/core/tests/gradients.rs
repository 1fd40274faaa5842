//! Finite-difference verification of every differentiable operation and
//! training objective.

use dsbn_core::gradcheck::suite;

#[test]
fn all_gradients_match_central_differences() {
    let start = std::time::Instant::now();
    let reports = suite::run_all(0xD5B9, 20);
    assert_eq!(reports.len(), 19, "every case must run");
    for r in &reports {
        println!(
            "gradcheck {:<34} instances={} max_rel_err={:.3e}",
            r.name, r.instances, r.max_rel_err
        );
        assert!(
            r.max_rel_err < 1e-5,
            "{} exceeded tolerance: {:.3e}",
            r.name,
            r.max_rel_err
        );
    }
    println!("gradient suite finished in {:?}", start.elapsed());
}
