use stegalift::gradcheck::{self, SUITE_OPS, TOLERANCE};

#[test]
fn every_differentiable_op_matches_finite_differences() {
    let reports = gradcheck::suite(3).unwrap();
    let names: Vec<&str> = reports.iter().map(|r| r.name.as_str()).collect();
    assert_eq!(names, SUITE_OPS);
    for r in &reports {
        println!("{:<22} max_rel_err = {:.3e}", r.name, r.max_rel_err);
    }
    let failed: Vec<_> = reports.iter().filter(|r| r.max_rel_err > TOLERANCE).collect();
    assert!(failed.is_empty(), "{failed:?}");
}

#[test]
fn suite_is_stable_across_seeds() {
    for seed in [11, 12] {
        for r in gradcheck::suite(seed).unwrap() {
            assert!(r.passed, "seed {seed}: {r:?}");
        }
    }
}
