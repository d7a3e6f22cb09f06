//! Finite-difference checks of every tape primitive and of
//! backward-with-reconstruction on small random stacks.
use revdarts::reversible::oracle::{linear_example, stack_gradient_check};
use revdarts::tensor::gradcheck::primitive_suite;

fn main() -> revdarts::Result<()> {
    println!("linear example dX = {:?}", linear_example()?.data());
    let mut checks = primitive_suite(1)?;
    for (depth, n) in [(1, 2), (2, 3), (4, 2)] {
        checks.extend(stack_gradient_check(depth, n, 7, 1e-5, 16)?.results(1e-8, 1e-5));
    }
    for c in &checks {
        println!(
            "{} {:<44} {:.2e}",
            if c.passed { "PASS" } else { "FAIL" },
            c.name,
            c.max_rel_err
        );
    }
    Ok(())
}
