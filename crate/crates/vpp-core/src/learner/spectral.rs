//! Spectral-norm estimation and projection for the actor's weight
//! matrices.
//!
//! The actor's nonlinearities (ReLU, Tanh) are 1-Lipschitz, so bounding
//! each of its three weight matrices' largest singular value by L^(1/3)
//! bounds the network's Lipschitz constant by L. The largest singular
//! value is estimated by power iteration with a persistent right-singular
//! vector, which converges in a couple of iterations per optimizer step
//! because the matrix changes slowly.

use ndarray::{Array1, Array2};

use super::nn::Real;

/// Power-iteration state for one weight matrix: the current estimate of
/// the top right-singular vector (length = matrix columns).
#[derive(Debug, Clone)]
pub struct SpectralState<T: Real> {
    pub v: Array1<T>,
}

impl<T: Real> SpectralState<T> {
    pub fn new(cols: usize) -> Self {
        // deterministic non-degenerate start: normalized ones
        let v = Array1::from_elem(cols, T::one() / T::c((cols as f64).sqrt()));
        Self { v }
    }
}

/// Estimate the largest singular value of `w` by `iters` rounds of power
/// iteration on `w^T w`, warm-starting from (and updating) `state`.
pub fn spectral_norm<T: Real>(w: &Array2<T>, state: &mut SpectralState<T>, iters: usize) -> T {
    debug_assert_eq!(w.ncols(), state.v.len());
    let mut v = state.v.clone();
    let mut sigma = T::zero();
    for _ in 0..iters.max(1) {
        let u = w.dot(&v);
        let un = norm(&u);
        if un <= T::epsilon() {
            // degenerate (zero matrix): restart from the fixed seed
            v = SpectralState::<T>::new(w.ncols()).v;
            sigma = T::zero();
            continue;
        }
        let u = u / un;
        let vt = w.t().dot(&u);
        sigma = norm(&vt);
        if sigma <= T::epsilon() {
            v = SpectralState::<T>::new(w.ncols()).v;
            continue;
        }
        v = vt / sigma;
    }
    state.v = v;
    sigma
}

/// Project `w` onto the spectral-norm ball of radius `cap`: if the
/// estimated top singular value exceeds the cap, scale the whole matrix
/// by cap/sigma. Returns the applied scale factor (1 when inside).
pub fn spectral_normalize<T: Real>(
    w: &mut Array2<T>,
    state: &mut SpectralState<T>,
    cap: T,
    iters: usize,
) -> T {
    let sigma = spectral_norm(w, state, iters);
    if sigma > cap {
        let factor = cap / sigma;
        w.mapv_inplace(|x| x * factor);
        factor
    } else {
        T::one()
    }
}

fn norm<T: Real>(v: &Array1<T>) -> T {
    v.iter().fold(T::zero(), |acc, &x| acc + x * x).sqrt()
}
