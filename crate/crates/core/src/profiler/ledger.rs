//! Activation-memory ledger.
//!
//! "Memory" here means bytes of activation tensors held alive by tapes and
//! stack states, counted explicitly as they are created and dropped. Process
//! RSS is never consulted. The ledger is thread-local, so independent runs on
//! separate threads (including parallel tests) never see each other's bytes.

use std::cell::RefCell;
use std::ops::Deref;

use serde::Serialize;

use crate::tensor::{Scalar, Tensor};
use crate::{Error, Result};

/// Where a G-function evaluation happened.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalPhase {
    /// Layer forward (either backbone).
    Forward,
    /// Re-evaluation inside backward-with-reconstruction.
    Recompute,
    /// Standalone inverse.
    Inverse,
}

#[derive(Default)]
struct State {
    retained: usize,
    peak: usize,
    forward_evals: u64,
    recompute_evals: u64,
    inverse_evals: u64,
    cap: Option<usize>,
    scopes: Vec<String>,
    scope_bytes: Vec<usize>,
    stack: Vec<u32>,
}

impl State {
    fn current_scope(&mut self) -> u32 {
        match self.stack.last() {
            Some(&s) => s,
            None => self.intern("(root)"),
        }
    }

    fn intern(&mut self, name: &str) -> u32 {
        if let Some(i) = self.scopes.iter().position(|s| s == name) {
            return i as u32;
        }
        self.scopes.push(name.to_string());
        self.scope_bytes.push(0);
        (self.scopes.len() - 1) as u32
    }
}

thread_local! {
    static LEDGER: RefCell<State> = RefCell::new(State::default());
}

/// Snapshot of the ledger counters.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct MemoryLedger {
    pub retained_bytes: usize,
    pub peak_bytes: usize,
    pub recompute_forward_count: u64,
    pub forward_evals: u64,
    pub inverse_evals: u64,
    pub per_scope: Vec<(String, usize)>,
}

impl MemoryLedger {
    pub fn scope_bytes(&self, name: &str) -> usize {
        self.per_scope.iter().find(|(n, _)| n == name).map_or(0, |(_, b)| *b)
    }

    /// All G evaluations of any phase.
    pub fn total_evals(&self) -> u64 {
        self.forward_evals + self.recompute_forward_count + self.inverse_evals
    }
}

/// Token identifying the scope a retained allocation was charged to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ScopeTag(u32);

/// Charges `bytes` to the current scope.
pub fn retain(bytes: usize) -> Result<ScopeTag> {
    LEDGER.with(|l| {
        let mut l = l.borrow_mut();
        if let Some(cap) = l.cap {
            if l.retained + bytes > cap {
                return Err(Error::CapExceeded {
                    cap,
                    requested: l.retained + bytes,
                });
            }
        }
        let scope = l.current_scope();
        l.retained += bytes;
        l.scope_bytes[scope as usize] += bytes;
        l.peak = l.peak.max(l.retained);
        Ok(ScopeTag(scope))
    })
}

pub fn release(bytes: usize, tag: ScopeTag) {
    LEDGER.with(|l| {
        let mut l = l.borrow_mut();
        debug_assert!(l.retained >= bytes, "ledger underflow");
        l.retained = l.retained.saturating_sub(bytes);
        let slot = &mut l.scope_bytes[tag.0 as usize];
        *slot = slot.saturating_sub(bytes);
    })
}

pub fn record_eval(phase: EvalPhase) {
    LEDGER.with(|l| {
        let mut l = l.borrow_mut();
        match phase {
            EvalPhase::Forward => l.forward_evals += 1,
            EvalPhase::Recompute => l.recompute_evals += 1,
            EvalPhase::Inverse => l.inverse_evals += 1,
        }
    })
}

pub fn snapshot() -> MemoryLedger {
    LEDGER.with(|l| {
        let l = l.borrow();
        MemoryLedger {
            retained_bytes: l.retained,
            peak_bytes: l.peak,
            recompute_forward_count: l.recompute_evals,
            forward_evals: l.forward_evals,
            inverse_evals: l.inverse_evals,
            per_scope: l
                .scopes
                .iter()
                .cloned()
                .zip(l.scope_bytes.iter().copied())
                .filter(|(_, b)| *b > 0)
                .collect(),
        }
    })
}

pub fn retained_bytes() -> usize {
    LEDGER.with(|l| l.borrow().retained)
}

/// Resets the counters at a run boundary. Outstanding allocations keep their
/// bytes: only peak and evaluation counts restart.
pub fn reset() {
    LEDGER.with(|l| {
        let mut l = l.borrow_mut();
        l.peak = l.retained;
        l.forward_evals = 0;
        l.recompute_evals = 0;
        l.inverse_evals = 0;
    })
}

pub fn set_cap(cap: Option<usize>) {
    LEDGER.with(|l| l.borrow_mut().cap = cap)
}

/// Pushes a named scope for the per-layer breakdown; popped on drop.
pub fn scope(name: &str) -> ScopeGuard {
    LEDGER.with(|l| {
        let mut l = l.borrow_mut();
        let id = l.intern(name);
        l.stack.push(id);
    });
    ScopeGuard { _private: () }
}

pub struct ScopeGuard {
    _private: (),
}

impl Drop for ScopeGuard {
    fn drop(&mut self) {
        LEDGER.with(|l| {
            l.borrow_mut().stack.pop();
        })
    }
}

/// A tensor whose bytes stay charged to the ledger for as long as it lives.
#[derive(Debug)]
pub struct Retained<T: Scalar> {
    tensor: Tensor<T>,
    tag: ScopeTag,
}

impl<T: Scalar> Retained<T> {
    pub fn new(tensor: Tensor<T>) -> Result<Self> {
        let tag = retain(tensor.bytes())?;
        Ok(Self { tensor, tag })
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.tensor
    }
}

impl<T: Scalar> Deref for Retained<T> {
    type Target = Tensor<T>;

    fn deref(&self) -> &Tensor<T> {
        &self.tensor
    }
}

impl<T: Scalar> Drop for Retained<T> {
    fn drop(&mut self) {
        release(self.tensor.bytes(), self.tag);
    }
}
