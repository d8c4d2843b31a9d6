//! Hand-rolled neural-network primitives in 64-bit floats.
//!
//! Every network exposes its tensors through [`ParamSet`] so the optimizer,
//! checkpoint container and gradient checks can walk parameters generically.
//! Gradients are carried in a second instance of the same parameter struct.

use ndarray::{ArrayViewD, ArrayViewMutD};

pub mod conv;
pub mod ops;

/// How the optimizer treats a tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Weight-decayed parameter (matrices and kernels).
    Decay,
    /// Optimized without decay (biases, norm scales, class/mask tokens).
    NoDecay,
    /// Persisted but never optimized (e.g. batch-norm running statistics).
    State,
}

pub struct ParamRef<'a> {
    pub name: String,
    pub view: ArrayViewD<'a, f64>,
    pub kind: ParamKind,
}

pub struct ParamMut<'a> {
    pub name: String,
    pub view: ArrayViewMutD<'a, f64>,
    pub kind: ParamKind,
}

/// Uniform access to a network's tensors, in a fixed declaration order.
pub trait ParamSet {
    fn entries(&self) -> Vec<ParamRef<'_>>;
    fn entries_mut(&mut self) -> Vec<ParamMut<'_>>;

    /// Total scalar count.
    fn param_count(&self) -> usize {
        self.entries().iter().map(|e| e.view.len()).sum()
    }
}

/// dst += src, entry by entry. Both sides must be the same architecture.
pub fn add_assign<P: ParamSet>(dst: &mut P, src: &P) {
    let srcs = src.entries();
    for (d, s) in dst.entries_mut().into_iter().zip(srcs) {
        debug_assert_eq!(d.name, s.name);
        let mut view = d.view;
        view.zip_mut_with(&s.view, |a, &b| *a += b);
    }
}

/// Multiply every tensor in place.
pub fn scale<P: ParamSet>(params: &mut P, factor: f64) {
    for e in params.entries_mut() {
        let mut view = e.view;
        view.mapv_inplace(|v| v * factor);
    }
}

/// Zero every tensor in place.
pub fn zero<P: ParamSet>(params: &mut P) {
    for e in params.entries_mut() {
        let mut view = e.view;
        view.fill(0.0);
    }
}

/// True if every value in every tensor is finite.
pub fn all_finite<P: ParamSet>(params: &P) -> bool {
    params
        .entries()
        .iter()
        .all(|e| e.view.iter().all(|v| v.is_finite()))
}

/// Sum per-sample gradient sets into the first one. Deterministic: the fold
/// follows input order regardless of how the parts were produced.
pub fn reduce_grads<P: ParamSet>(mut parts: Vec<P>) -> Option<P> {
    let mut acc = parts.drain(..1).next()?;
    for part in &parts {
        add_assign(&mut acc, part);
    }
    Some(acc)
}
