//! Adam with bias correction, plus the decoder unit-norm handling: the
//! radial component of the decoder gradient is removed before the moment
//! update, and columns are renormalized after the parameter step.

use alloc::vec;
use alloc::vec::Vec;

use crate::matrix::Matrix;
use crate::sae::{Gradients, SaeParams};

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct AdamState {
    t: u64,
    m_w_enc: Matrix,
    v_w_enc: Matrix,
    m_b_enc: Vec<f64>,
    v_b_enc: Vec<f64>,
    m_w_dec: Matrix,
    v_w_dec: Matrix,
    m_b_pre: Vec<f64>,
    v_b_pre: Vec<f64>,
}

impl AdamState {
    pub fn new(d: usize, d_sae: usize) -> Self {
        Self {
            t: 0,
            m_w_enc: Matrix::zeros(d_sae, d),
            v_w_enc: Matrix::zeros(d_sae, d),
            m_b_enc: vec![0.0; d_sae],
            v_b_enc: vec![0.0; d_sae],
            m_w_dec: Matrix::zeros(d, d_sae),
            v_w_dec: Matrix::zeros(d, d_sae),
            m_b_pre: vec![0.0; d],
            v_b_pre: vec![0.0; d],
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }
}

fn update_block(p: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64], lr: f64, bc1: f64, bc2: f64) {
    for i in 0..p.len() {
        let gi = g[i];
        m[i] = BETA1 * m[i] + (1.0 - BETA1) * gi;
        v[i] = BETA2 * v[i] + (1.0 - BETA2) * gi * gi;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        p[i] -= lr * m_hat / (libm::sqrt(v_hat) + EPS);
    }
}

/// One optimizer step. Consumes the gradients (the decoder block is projected
/// in place before the moment update).
pub fn adam_step(state: &mut AdamState, params: &mut SaeParams, mut grads: Gradients, lr: f64) {
    let d = params.d();
    let d_sae = params.d_sae();
    debug_assert_eq!(grads.w_enc.rows(), d_sae);
    debug_assert_eq!(grads.w_dec.rows(), d);

    // Remove the radial component of each decoder column gradient so the
    // update moves tangentially to the unit sphere.
    for j in 0..d_sae {
        let mut radial = 0.0;
        for r in 0..d {
            radial += grads.w_dec.get(r, j) * params.w_dec.get(r, j);
        }
        for r in 0..d {
            let g = grads.w_dec.get(r, j) - radial * params.w_dec.get(r, j);
            grads.w_dec.set(r, j, g);
        }
    }

    state.t += 1;
    let t = state.t as f64;
    let bc1 = 1.0 - libm::pow(BETA1, t);
    let bc2 = 1.0 - libm::pow(BETA2, t);

    update_block(
        params.w_enc.data_mut(),
        grads.w_enc.data(),
        state.m_w_enc.data_mut(),
        state.v_w_enc.data_mut(),
        lr,
        bc1,
        bc2,
    );
    update_block(
        &mut params.b_enc,
        &grads.b_enc,
        &mut state.m_b_enc,
        &mut state.v_b_enc,
        lr,
        bc1,
        bc2,
    );
    update_block(
        params.w_dec.data_mut(),
        grads.w_dec.data(),
        state.m_w_dec.data_mut(),
        state.v_w_dec.data_mut(),
        lr,
        bc1,
        bc2,
    );
    update_block(
        &mut params.b_pre,
        &grads.b_pre,
        &mut state.m_b_pre,
        &mut state.v_b_pre,
        lr,
        bc1,
        bc2,
    );

    // Renormalize decoder columns. Columns already at unit norm (to 1e-12)
    // are left untouched so a zero-gradient step is an exact no-op.
    for j in 0..d_sae {
        let mut sq = 0.0;
        for r in 0..d {
            let v = params.w_dec.get(r, j);
            sq += v * v;
        }
        let norm = libm::sqrt(sq);
        if norm > 1e-12 && libm::fabs(norm - 1.0) > 1e-12 {
            for r in 0..d {
                let v = params.w_dec.get(r, j) / norm;
                params.w_dec.set(r, j, v);
            }
        }
    }
}
