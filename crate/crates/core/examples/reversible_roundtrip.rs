//! Forward a random multi-split layer and recover its input exactly by
//! running the splits backwards.
use revdarts::ops::{OpContext, OpKind, Side};
use revdarts::reversible::oracle::random_op_stack;
use revdarts::reversible::{LayerContext, RngLog};
use revdarts::search::Pooling;
use revdarts::tensor::{RngStream, Tensor};

fn main() -> revdarts::Result<()> {
    let n = 4;
    let split_width = 16;
    let kinds = OpKind::candidates(Side::Decoder);
    let net = random_op_stack::<f64>(Side::Decoder, 1, n, split_width, 32, &kinds, Pooling::Max, 11)?;
    let mut rng = RngStream::new(5);
    let x = Tensor::<f64>::randn(vec![2, 10, n * split_width], 1.0, &mut rng);
    let memory = Tensor::<f64>::randn(vec![2, 7, 32], 1.0, &mut rng);
    let ctx = LayerContext {
        memory: Some(&memory),
        ops: OpContext::default(),
    };
    let layer = &net.stack.layers()[0];
    let log: &RngLog = &net.logs[0];
    let y = layer.forward(&net.params, &x, &ctx, log)?;
    let back = layer.inverse(&net.params, &y, &ctx, log)?;
    println!("splits: {:?}", net.kinds[0]);
    println!("max |X - inverse(forward(X))| = {:e}", x.max_abs_diff(&back));
    println!("max |Y - X| = {:.3}", y.max_abs_diff(&x));
    Ok(())
}
