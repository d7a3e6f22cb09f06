use revdarts::reversible::oracle::{linear_example, stack_gradient_check};
use revdarts::tensor::gradcheck::primitive_suite;

#[test]
fn primitives_match_central_differences() {
    let results = primitive_suite(17).unwrap();
    assert!(results.len() >= 25);
    for c in results {
        assert!(c.passed, "{}: {:e} > {:e}", c.name, c.max_rel_err, c.tolerance);
    }
}

#[test]
fn linear_layer_hand_example() {
    let dx = linear_example().unwrap();
    assert_eq!(dx.data(), &[0.0, 1.0]);
}

#[test]
fn small_stacks_agree_with_both_oracles() {
    for (depth, n) in [(1, 2), (2, 3)] {
        let c = stack_gradient_check(depth, n, 3 + depth as u64, 1e-5, 24).unwrap();
        for r in c.results(1e-8, 1e-5) {
            assert!(r.passed, "{}: {:e}", r.name, r.max_rel_err);
        }
    }
}
