//! Adam with global gradient-norm clipping.

use alloc::vec::Vec;

use crate::math::sqrt;
use crate::policy::ParamSet;

/// Adam state for one parameter set.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new<P: ParamSet>(params: &P, lr: f64) -> Self {
        let zeros: Vec<Vec<f64>> = params.blocks().iter().map(|(_, b)| alloc::vec![0.0; b.data.len()]).collect();
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: zeros.clone(), v: zeros }
    }

    pub fn step<P: ParamSet>(&mut self, params: &mut P, grads: &P) {
        if self.lr == 0.0 {
            return;
        }
        self.step += 1;
        let bc1 = 1.0 - libm::pow(self.beta1, self.step as f64);
        let bc2 = 1.0 - libm::pow(self.beta2, self.step as f64);
        let blocks = params.blocks_mut().into_iter().zip(grads.blocks()).zip(self.m.iter_mut().zip(self.v.iter_mut()));
        for (((_, p), (_, g)), (m, v)) in blocks {
            for i in 0..p.data.len() {
                let gi = g.data[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p.data[i] -= self.lr * mhat / (sqrt(vhat) + self.eps);
            }
        }
    }
}

/// Scales both gradient sets so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<A: ParamSet, B: ParamSet>(a: &mut A, b: Option<&mut B>, max_norm: f64) -> f64 {
    let mut sq = a.sq_norm();
    if let Some(b) = b.as_ref() {
        sq += b.sq_norm();
    }
    let norm = sqrt(sq);
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        a.scale(s);
        if let Some(b) = b {
            b.scale(s);
        }
    }
    norm
}
