//! Minimal reverse-mode neural-network layers used by the actor and
//! critic: dense layers, pointwise activations, and an LSTM cell, each
//! with hand-written backward passes and per-layer Adam state.
//!
//! Everything is generic over the scalar so the same code trains in f32
//! and is gradient-checked against central finite differences in f64.

use ndarray::{s, Array1, Array2, Array3, Axis, LinalgScalar, ScalarOperand};
use num_traits::Float;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use std::fmt::Debug;

/// Scalar bound for all network math: f32 for training, f64 for checks.
pub trait Real:
    Float + LinalgScalar + ScalarOperand + Send + Sync + Debug + 'static
{
    fn c(x: f64) -> Self {
        Self::from(x).expect("constant representable")
    }
    fn f64(self) -> f64 {
        self.to_f64().expect("scalar convertible")
    }
}

impl Real for f32 {}
impl Real for f64 {}

pub fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// Semi-orthogonal initialization (QR of a Gaussian matrix), the common
/// choice for policy-gradient nets. Drawn in f64 and cast down.
fn orthogonal_init<T: Real>(rows: usize, cols: usize, gain: f64, rng: &mut ChaCha8Rng) -> Array2<T> {
    let (n, m, transpose) = if rows >= cols {
        (rows, cols, false)
    } else {
        (cols, rows, true)
    };
    let raw = nalgebra::DMatrix::<f64>::from_fn(n, m, |_, _| StandardNormal.sample(rng));
    let q = raw.qr().q(); // n x m with orthonormal columns
    Array2::from_shape_fn((rows, cols), |(r, c)| {
        let v = if transpose { q[(c, r)] } else { q[(r, c)] };
        T::c(gain * v)
    })
}

/// Adam moments for one parameter tensor, generic over its dimension.
#[derive(Debug, Clone)]
struct AdamBuf<T, D: ndarray::Dimension> {
    m: ndarray::Array<T, D>,
    v: ndarray::Array<T, D>,
}

impl<T: Real, D: ndarray::Dimension> AdamBuf<T, D> {
    fn like(shape: &ndarray::Array<T, D>) -> Self {
        Self {
            m: ndarray::Array::zeros(shape.raw_dim()),
            v: ndarray::Array::zeros(shape.raw_dim()),
        }
    }

    fn step(
        &mut self,
        param: &mut ndarray::Array<T, D>,
        grad: &ndarray::Array<T, D>,
        lr: T,
        opt: &AdamParams,
        t: i32,
    ) {
        let b1 = T::c(opt.beta1);
        let b2 = T::c(opt.beta2);
        let eps = T::c(opt.eps);
        let bc1 = T::one() - T::c(opt.beta1.powi(t));
        let bc2 = T::one() - T::c(opt.beta2.powi(t));
        ndarray::Zip::from(param)
            .and(&mut self.m)
            .and(&mut self.v)
            .and(grad)
            .for_each(|p, m, v, &g| {
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                let mh = *m / bc1;
                let vh = *v / bc2;
                *p = *p - lr * mh / (vh.sqrt() + eps);
            });
    }
}

/// Shared Adam hyper-parameters (the learning rate is scheduled
/// externally and passed per step).
#[derive(Debug, Clone, Copy)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Dense layer `y = x W^T + b` with accumulated gradients and Adam state.
#[derive(Debug, Clone)]
pub struct Linear<T: Real> {
    /// Weights, out x in.
    pub w: Array2<T>,
    pub b: Array1<T>,
    pub gw: Array2<T>,
    pub gb: Array1<T>,
    adam_w: AdamBuf<T, ndarray::Ix2>,
    adam_b: AdamBuf<T, ndarray::Ix1>,
}

impl<T: Real> Linear<T> {
    pub fn new(input: usize, output: usize, gain: f64, rng: &mut ChaCha8Rng) -> Self {
        let w = orthogonal_init(output, input, gain, rng);
        let b = Array1::zeros(output);
        Self {
            gw: Array2::zeros((output, input)),
            gb: Array1::zeros(output),
            adam_w: AdamBuf::like(&w),
            adam_b: AdamBuf::like(&b),
            w,
            b,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.w.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.w.nrows()
    }

    /// x: [B, in] -> [B, out]
    pub fn forward(&self, x: &Array2<T>) -> Array2<T> {
        x.dot(&self.w.t()) + &self.b
    }

    /// Accumulates parameter gradients and returns dL/dx.
    pub fn backward(&mut self, x: &Array2<T>, gy: &Array2<T>) -> Array2<T> {
        self.gw = &self.gw + &gy.t().dot(x);
        self.gb = &self.gb + &gy.sum_axis(Axis(0));
        gy.dot(&self.w)
    }

    pub fn zero_grad(&mut self) {
        self.gw.fill(T::zero());
        self.gb.fill(T::zero());
    }

    pub fn adam_step(&mut self, lr: f64, opt: &AdamParams, t: i32) {
        let lr = T::c(lr);
        self.adam_w.step(&mut self.w, &self.gw, lr, opt, t);
        self.adam_b.step(&mut self.b, &self.gb, lr, opt, t);
    }

    /// Scale the weight matrix in place (spectral projection).
    pub fn scale_weights(&mut self, factor: T) {
        self.w.mapv_inplace(|w| w * factor);
    }
}

/// ReLU with cached mask via the forward output.
pub fn relu<T: Real>(x: &Array2<T>) -> Array2<T> {
    x.mapv(|v| if v > T::zero() { v } else { T::zero() })
}

pub fn relu_backward<T: Real>(y: &Array2<T>, gy: &Array2<T>) -> Array2<T> {
    ndarray::Zip::from(y)
        .and(gy)
        .map_collect(|&y, &g| if y > T::zero() { g } else { T::zero() })
}

pub fn tanh<T: Real>(x: &Array2<T>) -> Array2<T> {
    x.mapv(|v| v.tanh())
}

pub fn tanh_backward<T: Real>(y: &Array2<T>, gy: &Array2<T>) -> Array2<T> {
    ndarray::Zip::from(y)
        .and(gy)
        .map_collect(|&y, &g| g * (T::one() - y * y))
}

/// Single LSTM cell unrolled over a fixed window. Gate layout in the
/// stacked weight matrices is `[input, forget, cell, output]`.
#[derive(Debug, Clone)]
pub struct LstmCell<T: Real> {
    /// 4H x D
    pub w_ih: Array2<T>,
    /// 4H x H
    pub w_hh: Array2<T>,
    /// 4H
    pub b: Array1<T>,
    pub gw_ih: Array2<T>,
    pub gw_hh: Array2<T>,
    pub gb: Array1<T>,
    adam_ih: AdamBuf<T, ndarray::Ix2>,
    adam_hh: AdamBuf<T, ndarray::Ix2>,
    adam_b: AdamBuf<T, ndarray::Ix1>,
    hidden: usize,
}

/// Saved forward intermediates for backpropagation through time.
pub struct LstmCache<T: Real> {
    /// [B, T, D] input window.
    x: Array3<T>,
    /// Per step: (h_prev, c_prev, i, f, g, o, tanh_c_new).
    steps: Vec<[Array2<T>; 7]>,
}

impl<T: Real> LstmCell<T> {
    pub fn new(input: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        let w_ih = orthogonal_init(4 * hidden, input, 1.0, rng);
        let w_hh = orthogonal_init(4 * hidden, hidden, 1.0, rng);
        // forget-gate bias starts at 1 so early training can retain state
        let mut b = Array1::zeros(4 * hidden);
        b.slice_mut(s![hidden..2 * hidden]).fill(T::one());
        Self {
            gw_ih: Array2::zeros(w_ih.raw_dim()),
            gw_hh: Array2::zeros(w_hh.raw_dim()),
            gb: Array1::zeros(b.raw_dim()),
            adam_ih: AdamBuf::like(&w_ih),
            adam_hh: AdamBuf::like(&w_hh),
            adam_b: AdamBuf::like(&b),
            w_ih,
            w_hh,
            b,
            hidden,
        }
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden
    }

    pub fn input_dim(&self) -> usize {
        self.w_ih.ncols()
    }

    /// Run the cell over a [B, T, D] window from zero initial state and
    /// return the final hidden state [B, H] plus the backprop cache.
    pub fn forward_window(&self, x: &Array3<T>) -> (Array2<T>, LstmCache<T>) {
        let (batch, steps, _d) = x.dim();
        let h0 = Array2::zeros((batch, self.hidden));
        let mut h = h0;
        let mut c: Array2<T> = Array2::zeros((batch, self.hidden));
        let mut cache = LstmCache {
            x: x.clone(),
            steps: Vec::with_capacity(steps),
        };
        for t in 0..steps {
            let xt = x.index_axis(Axis(1), t).to_owned();
            let gates = xt.dot(&self.w_ih.t()) + h.dot(&self.w_hh.t()) + &self.b;
            let hsz = self.hidden;
            let i = gates.slice(s![.., 0..hsz]).mapv(sigmoid);
            let f = gates.slice(s![.., hsz..2 * hsz]).mapv(sigmoid);
            let g = gates.slice(s![.., 2 * hsz..3 * hsz]).mapv(|v| v.tanh());
            let o = gates.slice(s![.., 3 * hsz..4 * hsz]).mapv(sigmoid);
            let c_new = &f * &c + &i * &g;
            let tanh_c = c_new.mapv(|v| v.tanh());
            let h_new = &o * &tanh_c;
            cache.steps.push([h, c, i, f, g, o, tanh_c]);
            h = h_new;
            c = c_new;
        }
        (h, cache)
    }

    /// Backpropagate dL/dh_final through the unrolled window, accumulating
    /// parameter gradients. Input gradients are not produced (the window
    /// is observation data, never an upstream computation).
    pub fn backward_window(&mut self, cache: &LstmCache<T>, gh_final: &Array2<T>) {
        let batch = gh_final.nrows();
        let hsz = self.hidden;
        let mut dh = gh_final.clone();
        let mut dc: Array2<T> = Array2::zeros((batch, hsz));
        for t in (0..cache.steps.len()).rev() {
            let [h_prev, c_prev, i, f, g, o, tanh_c] = &cache.steps[t];
            let do_ = &dh * tanh_c;
            let dct = &dh * o * &tanh_c.mapv(|v| T::one() - v * v) + &dc;
            let di = &dct * g;
            let df = &dct * c_prev;
            let dg = &dct * i;
            dc = &dct * f;
            // pre-activation gate gradients
            let dzi = di * i * &i.mapv(|v| T::one() - v);
            let dzf = df * f * &f.mapv(|v| T::one() - v);
            let dzg = dg * &g.mapv(|v| T::one() - v * v);
            let dzo = do_ * o * &o.mapv(|v| T::one() - v);
            let mut dz = Array2::zeros((batch, 4 * hsz));
            dz.slice_mut(s![.., 0..hsz]).assign(&dzi);
            dz.slice_mut(s![.., hsz..2 * hsz]).assign(&dzf);
            dz.slice_mut(s![.., 2 * hsz..3 * hsz]).assign(&dzg);
            dz.slice_mut(s![.., 3 * hsz..4 * hsz]).assign(&dzo);
            let xt = cache.x.index_axis(Axis(1), t);
            self.gw_ih = &self.gw_ih + &dz.t().dot(&xt);
            self.gw_hh = &self.gw_hh + &dz.t().dot(h_prev);
            self.gb = &self.gb + &dz.sum_axis(Axis(0));
            dh = dz.dot(&self.w_hh);
        }
    }

    pub fn zero_grad(&mut self) {
        self.gw_ih.fill(T::zero());
        self.gw_hh.fill(T::zero());
        self.gb.fill(T::zero());
    }

    pub fn adam_step(&mut self, lr: f64, opt: &AdamParams, t: i32) {
        let lr = T::c(lr);
        self.adam_ih.step(&mut self.w_ih, &self.gw_ih, lr, opt, t);
        self.adam_hh.step(&mut self.w_hh, &self.gw_hh, lr, opt, t);
        self.adam_b.step(&mut self.b, &self.gb, lr, opt, t);
    }
}
