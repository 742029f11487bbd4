//! Hand-derived reverse-mode gradients for the fixed rendering pipeline
//! (grid sampling → decoders → compositing) and the Adam optimizer.

use crate::error::{Error, Result};
use crate::field::FeatureKind;
use crate::model::Model;
use crate::real::Real;
use crate::render::{grid_coord, ParamFeatures, RayTrace};

/// One accumulator per trainable tensor, shaped like the model.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientBuffers<T> {
    pub model: Model<T>,
}

impl<T: Real> GradientBuffers<T> {
    pub fn zeros_for(model: &Model<T>) -> Self {
        Self {
            model: model.zeros_like(),
        }
    }

    pub fn zero(&mut self) {
        for t in self.model.tensors_mut() {
            t.fill(T::zero());
        }
    }

    /// Adds `other` element-wise (the merge step of parallel accumulation).
    pub fn merge(&mut self, other: &GradientBuffers<T>) {
        for (dst, src) in self.model.tensors_mut().into_iter().zip(other.model.tensors()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += *s;
            }
        }
    }

    pub fn tensors(&self) -> Vec<&[T]> {
        self.model.tensors()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        self.model.tensors_mut()
    }

    /// Name of the first tensor holding a non-finite value.
    pub fn first_non_finite(&self) -> Option<String> {
        self.model
            .tensor_infos()
            .into_iter()
            .zip(self.model.tensors())
            .find(|(_, t)| t.iter().any(|v| !v.is_finite()))
            .map(|(info, _)| info.name)
    }
}

/// Gradient w.r.t. the parameter-product features of one parameter tuple.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamFeatureGrads<T> {
    pub density: Vec<T>,
    pub appearance: Vec<T>,
}

impl<T: Real> ParamFeatureGrads<T> {
    pub fn zeros(pf: &ParamFeatures<T>) -> Self {
        Self {
            density: vec![T::zero(); pf.density.len()],
            appearance: vec![T::zero(); pf.appearance.len()],
        }
    }

    /// Pushes the accumulated feature gradient down to the parameter vectors.
    pub fn apply(&self, model: &Model<T>, params: &[f64], grads: &mut GradientBuffers<T>) -> Result<()> {
        let field = &model.field;
        field
            .params(FeatureKind::Density)
            .accumulate(params, &self.density, grads.model.field.params_mut(FeatureKind::Density))?;
        field
            .params(FeatureKind::Appearance)
            .accumulate(params, &self.appearance, grads.model.field.params_mut(FeatureKind::Appearance))?;
        Ok(())
    }
}

/// Scratch space reused across rays.
pub struct BackwardScratch<T> {
    d_sigma: Vec<T>,
    d_input: Vec<T>,
    d_hidden: Vec<T>,
}

impl<T: Real> BackwardScratch<T> {
    pub fn new(model: &Model<T>) -> Self {
        let hidden = model.decoders.density.hidden.max(model.decoders.color.hidden);
        let feat = model
            .field
            .feature_len(FeatureKind::Density)
            .max(model.field.feature_len(FeatureKind::Appearance));
        Self {
            d_sigma: Vec::new(),
            d_input: vec![T::zero(); feat],
            d_hidden: vec![T::zero(); hidden],
        }
    }
}

/// Backpropagates `∂L/∂rgb` of one traced ray into `grads` (weights) and
/// `d_params` (parameter features).
pub fn backward_ray<T: Real>(
    model: &Model<T>,
    trace: &RayTrace<T>,
    d_rgb: [T; 3],
    grads: &mut GradientBuffers<T>,
    d_params: &mut ParamFeatureGrads<T>,
    scratch: &mut BackwardScratch<T>,
) {
    let n = trace.len();
    if n == 0 {
        return;
    }
    // ∂rgb/∂τ_k = T_{k+1} c_k − (Σ_{i>k} w_i c_i + T_final · background), τ_k = σ_k δ_k.
    scratch.d_sigma.clear();
    scratch.d_sigma.resize(n, T::zero());
    let mut suffix = trace.background.map(|b| b * trace.t_final);
    for k in (0..n).rev() {
        let c = trace.color_of[k].map_or([T::zero(); 3], |j| trace.colors[j]);
        let t_next = trace.transmittance[k] - trace.weights[k];
        let mut acc = T::zero();
        for ch in 0..3 {
            acc += d_rgb[ch] * (t_next * c[ch] - suffix[ch]);
            suffix[ch] += trace.weights[k] * c[ch];
        }
        scratch.d_sigma[k] = acc * trace.deltas[k];
    }

    let color = &model.decoders.color;
    let agrid = model.field.grid(FeatureKind::Appearance);
    let afl = agrid.feature_len();
    let arp = d_params.appearance.len();
    for k in 0..n {
        let Some(j) = trace.color_of[k] else { continue };
        let c = trace.colors[j];
        let w = trace.weights[k];
        let dz = [0, 1, 2].map(|ch| d_rgb[ch] * w * c[ch] * (T::one() - c[ch]));
        let input = &trace.color_in[j * color.input..(j + 1) * color.input];
        let pre = &trace.color_pre[j * color.hidden..(j + 1) * color.hidden];
        let d_x = &mut scratch.d_input[..afl + arp];
        color.backward(input, pre, &dz, &mut grads.model.decoders.color, d_x, &mut scratch.d_hidden[..color.hidden]);
        let x = grid_coord(model, trace.positions[k]);
        agrid.accumulate(x, &d_x[..afl], grads.model.field.grid_mut(FeatureKind::Appearance));
        for (g, d) in d_params.appearance.iter_mut().zip(&d_x[afl..]) {
            *g += *d;
        }
    }

    let density = &model.decoders.density;
    let dgrid = &model.field.density;
    let dfl = dgrid.feature_len();
    let drp = d_params.density.len();
    for k in 0..n {
        let dz = scratch.d_sigma[k] * trace.density_logit[k].sigmoid();
        if dz == T::zero() {
            continue;
        }
        let input = &trace.density_in[k * density.input..(k + 1) * density.input];
        let pre = &trace.density_pre[k * density.hidden..(k + 1) * density.hidden];
        let d_x = &mut scratch.d_input[..dfl + drp];
        density.backward(input, pre, &[dz], &mut grads.model.decoders.density, d_x, &mut scratch.d_hidden[..density.hidden]);
        let x = grid_coord(model, trace.positions[k]);
        dgrid.accumulate(x, &d_x[..dfl], &mut grads.model.field.density);
        for (g, d) in d_params.density.iter_mut().zip(&d_x[dfl..]) {
            *g += *d;
        }
    }
}

/// Bias-corrected Adam moments for every trainable tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<T: Real> AdamState<T> {
    pub fn with_shapes(lens: impl IntoIterator<Item = usize>, beta1: f64, beta2: f64) -> Self {
        let lens: Vec<usize> = lens.into_iter().collect();
        Self {
            m: lens.iter().map(|&n| vec![T::zero(); n]).collect(),
            v: lens.iter().map(|&n| vec![T::zero(); n]).collect(),
            step: 0,
            beta1,
            beta2,
            eps: 1e-8,
        }
    }

    /// Moments for `model` with β = (0.9, 0.99).
    pub fn for_model(model: &Model<T>) -> Self {
        Self::with_shapes(model.tensors().iter().map(|t| t.len()), 0.9, 0.99)
    }

    /// One update of every tensor; `lr[i]` is the learning rate of tensor `i`.
    pub fn step(&mut self, weights: Vec<&mut [T]>, grads: Vec<&[T]>, lr: &[f64]) -> Result<()> {
        if weights.len() != self.m.len() || grads.len() != self.m.len() || lr.len() != self.m.len() {
            return Err(Error::Config("optimizer state does not match the model's tensors".into()));
        }
        for (i, g) in grads.iter().enumerate() {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    term: format!("gradient of tensor {i}"),
                    iteration: self.step as usize,
                });
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let (nb1, nb2) = (T::lit(1.0 - self.beta1), T::lit(1.0 - self.beta2));
        let eps = T::lit(self.eps);
        for (i, (w, g)) in weights.into_iter().zip(grads).enumerate() {
            let step = T::lit(lr[i] / bc1);
            let inv_bc2 = T::lit(1.0 / bc2);
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..w.len() {
                m[j] = b1 * m[j] + nb1 * g[j];
                v[j] = b2 * v[j] + nb2 * g[j] * g[j];
                w[j] -= step * m[j] / ((v[j] * inv_bc2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Single-tensor Adam update.
pub fn adam_step<T: Real>(weights: &mut [T], grads: &[T], state: &mut AdamState<T>, lr: f64) -> Result<()> {
    state.step(vec![weights], vec![grads], &[lr])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        let mut w = [1.0f64, -2.0];
        let mut s = AdamState::with_shapes([2], 0.9, 0.99);
        adam_step(&mut w, &[3.0, -0.5], &mut s, 0.01).unwrap();
        assert!((w[0] - (1.0 - 0.01)).abs() < 1e-8);
        assert!((w[1] - (-2.0 + 0.01)).abs() < 1e-8);
    }

    #[test]
    fn zero_gradient_leaves_weights() {
        let mut w = [0.5f64];
        let mut s = AdamState::with_shapes([1], 0.9, 0.99);
        adam_step(&mut w, &[2.0], &mut s, 0.1).unwrap();
        let after_first = w[0];
        let (m, v) = (s.m[0][0], s.v[0][0]);
        s.m[0][0] = 0.0;
        s.v[0][0] = 0.0;
        adam_step(&mut w, &[0.0], &mut s, 0.1).unwrap();
        assert_eq!(w[0], after_first);
        s.m[0][0] = m;
        s.v[0][0] = v;
        let before = w[0];
        adam_step(&mut w, &[0.0], &mut s, 0.1).unwrap();
        // Moments decay, weight keeps drifting along the stored momentum only.
        assert!(s.m[0][0].abs() < m.abs() && s.v[0][0] < v);
        assert!(w[0] < before);
    }

    #[test]
    fn zero_moments_zero_gradient_is_noop() {
        let mut w = [0.25f64, -4.0];
        let mut s = AdamState::with_shapes([2], 0.9, 0.99);
        for _ in 0..10 {
            adam_step(&mut w, &[0.0, 0.0], &mut s, 0.5).unwrap();
        }
        assert_eq!(w, [0.25, -4.0]);
    }

    #[test]
    fn quadratic_converges() {
        let mut w = [0.0f64];
        let mut s = AdamState::with_shapes([1], 0.9, 0.99);
        for _ in 0..100 {
            let g = 2.0 * (w[0] - 3.0);
            adam_step(&mut w, &[g], &mut s, 0.1).unwrap();
        }
        assert!((w[0] - 3.0).abs() < 0.5, "w = {}", w[0]);
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let mut w = [0.0f64];
        let mut s = AdamState::with_shapes([1], 0.9, 0.99);
        assert!(matches!(adam_step(&mut w, &[f64::NAN], &mut s, 0.1), Err(Error::NonFinite { .. })));
        assert_eq!(w[0], 0.0);
    }
}
