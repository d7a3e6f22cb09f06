//! A single mixed-operation node: the softmax-weighted sum over every
//! candidate, its gradient with respect to the logits, and discretization.
use std::rc::Rc;

use revdarts::ops::{OpContext, Side};
use revdarts::search::node::{build_search_node, new_alpha};
use revdarts::search::{argmax_lowest, Pooling};
use revdarts::tensor::{Gradients, ParamGroup, ParamStore, RngStream, Tape, Tensor};

fn main() -> revdarts::Result<()> {
    let mut rng = RngStream::new(21);
    let mut store = ParamStore::<f64>::new();
    let alpha = new_alpha(&mut store, "alpha".into(), Side::Encoder, &mut rng);
    let node = build_search_node(
        Side::Encoder,
        0,
        alpha,
        Pooling::Max,
        16,
        16,
        &mut store,
        "node",
        &mut rng,
    )?;
    let h = Tensor::<f64>::randn(vec![1, 6, 16], 1.0, &mut rng);
    let ctx = OpContext {
        self_mask: Some(Rc::from(vec![true; 6])),
        ..Default::default()
    };

    let mut grads = Gradients::new();
    {
        let mut tape = Tape::with_params(&store);
        let hv = tape.leaf(h.clone(), false)?;
        let mixed = node.mixed_forward(&mut tape, hv, &ctx, &mut RngStream::new(0))?;
        let loss = tape.sum_all(mixed)?;
        tape.backward_from(loss, &Tensor::scalar(1.0))?;
        tape.drain_param_grads(&mut grads)?;
    }
    let g = grads.get(node.alpha).expect("alpha receives a gradient");
    for (kind, d) in node.candidates().iter().zip(g.data()) {
        println!("{:<12} dL/dα = {d:+.4}", kind.tag());
    }

    // One-hot logits pick a single candidate.
    let pick = 9;
    let k = node.candidates().len();
    let one_hot: Vec<f64> = (0..k).map(|i| if i == pick { 60.0 } else { 0.0 }).collect();
    *store.value_mut(node.alpha) = Tensor::from_f64(vec![k], &one_hot)?;
    let mut tape = Tape::no_grad(&store);
    let hv = tape.leaf(h, false)?;
    let mixed = node.mixed_forward(&mut tape, hv, &ctx, &mut RngStream::new(0))?;
    let single = node.ops[pick].apply(&mut tape, hv, &ctx, &mut RngStream::new(0))?;
    println!(
        "one-hot on {}: max |mixed - single| = {:e}",
        node.candidates()[pick],
        tape.value(mixed).max_abs_diff(tape.value(single))
    );
    let alpha: Vec<f64> = store.value(node.alpha).to_f64_vec();
    println!("discretized choice: {}", node.candidates()[argmax_lowest(&alpha)]);
    assert_eq!(store.group(node.alpha), ParamGroup::Alpha);
    Ok(())
}
