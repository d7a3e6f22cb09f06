use std::rc::Rc;

use super::supernet::Seq2Seq;
use crate::ops::OpKind;
use crate::tensor::{RngStream, Scalar};

/// One uniformly drawn candidate index per search slot.
pub fn sample_uniform_path<T: Scalar>(net: &Seq2Seq<T>, rng: &mut RngStream) -> Rc<[usize]> {
    net.slot_candidates().iter().map(|c| rng.below(c.len())).collect()
}

/// Kinds selected by `path`, in slot order.
pub fn path_kinds<T: Scalar>(net: &Seq2Seq<T>, path: &[usize]) -> Vec<OpKind> {
    net.slot_candidates().iter().zip(path).map(|(c, &i)| c[i]).collect()
}
