//! Backpropagation that rebuilds each layer's input from its output,
//! compared against ordinary backward through stored activations.
use revdarts::ops::Side;
use revdarts::profiler::ledger;
use revdarts::reversible::oracle::{linear_example, param_rel_err, random_op_stack, SMOOTH_KINDS};
use revdarts::search::Pooling;
use revdarts::tensor::{rel_err, RngStream, Tensor};

fn main() -> revdarts::Result<()> {
    let dx = linear_example()?;
    println!("linear example dX = {:?}", dx.data());

    let (depth, n) = (4, 3);
    let net = random_op_stack::<f64>(Side::Encoder, depth, n, 8, 8, &SMOOTH_KINDS, Pooling::Avg, 2)?;
    let mut rng = RngStream::new(9);
    let x = Tensor::randn(vec![2, 6, 8 * n], 1.0, &mut rng);
    let w = Tensor::randn(vec![2, 6, 8 * n], 1.0, &mut rng);

    ledger::reset();
    let rev = net.reconstruction_grads(&x, &w, None)?;
    let peak_rev = ledger::snapshot().peak_bytes;
    ledger::reset();
    let oracle = net.stored_activation_grads(&x, &w, None)?;
    let peak_std = ledger::snapshot().peak_bytes;

    println!("dX rel err vs stored activations: {:e}", rel_err(&rev.dx, &oracle.dx));
    println!(
        "dθ rel err vs stored activations: {:e}",
        param_rel_err(&rev.params, &oracle.params)
    );
    println!(
        "G evaluations: reconstruction {} forward + {} recompute, stored {} forward",
        rev.forward_evals, rev.recompute_evals, oracle.forward_evals
    );
    println!("peak activation bytes: reconstruction {peak_rev}, stored {peak_std}");
    Ok(())
}
