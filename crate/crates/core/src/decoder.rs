//! One-hidden-layer decoders for density and view-dependent color.

use rand::Rng;

use crate::encoding::EncodingConfig;
use crate::error::{Error, Result};
use crate::real::Real;

/// Dot product with eight independent partial sums so the loop vectorizes.
#[inline]
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = T::zero();
    for (x, y) in ra.iter().zip(rb) {
        tail += *x * *y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// Fully connected `input → hidden (ReLU) → output`.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp<T> {
    pub input: usize,
    pub hidden: usize,
    pub output: usize,
    /// `hidden × input`, row-major.
    pub w1: Vec<T>,
    pub b1: Vec<T>,
    /// `output × hidden`, row-major.
    pub w2: Vec<T>,
    pub b2: Vec<T>,
}

impl<T: Real> Mlp<T> {
    pub fn zeros(input: usize, hidden: usize, output: usize) -> Self {
        Self {
            input,
            hidden,
            output,
            w1: vec![T::zero(); hidden * input],
            b1: vec![T::zero(); hidden],
            w2: vec![T::zero(); output * hidden],
            b2: vec![T::zero(); output],
        }
    }

    /// Uniform fan-in scaled weights (Kaiming bound for the ReLU layer), zero biases.
    pub fn init<R: Rng + ?Sized>(input: usize, hidden: usize, output: usize, rng: &mut R) -> Self {
        let mut m = Self::zeros(input, hidden, output);
        let b1 = (6.0 / input.max(1) as f64).sqrt();
        let b2 = (1.0 / hidden.max(1) as f64).sqrt();
        m.w1.iter_mut().for_each(|w| *w = T::lit(rng.gen_range(-b1..b1)));
        m.w2.iter_mut().for_each(|w| *w = T::lit(rng.gen_range(-b2..b2)));
        m
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.input, self.hidden, self.output)
    }

    pub fn count_parameters(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }

    /// Forward pass; `pre` receives the hidden pre-activations, `out` the raw outputs.
    #[inline]
    pub fn forward(&self, x: &[T], pre: &mut [T], out: &mut [T]) {
        debug_assert_eq!(x.len(), self.input);
        for h in 0..self.hidden {
            pre[h] = self.b1[h] + dot(&self.w1[h * self.input..(h + 1) * self.input], x);
        }
        for o in 0..self.output {
            let row = &self.w2[o * self.hidden..(o + 1) * self.hidden];
            let mut acc = self.b2[o];
            for (w, p) in row.iter().zip(pre.iter()) {
                if *p > T::zero() {
                    acc += *w * *p;
                }
            }
            out[o] = acc;
        }
    }

    /// Accumulates weight gradients into `grads` and writes `∂L/∂x` for the
    /// first `d_x.len()` inputs.
    pub fn backward(&self, x: &[T], pre: &[T], d_out: &[T], grads: &mut Mlp<T>, d_x: &mut [T], d_hidden: &mut [T]) {
        for o in 0..self.output {
            grads.b2[o] += d_out[o];
        }
        for h in 0..self.hidden {
            if pre[h] > T::zero() {
                let mut dh = T::zero();
                for o in 0..self.output {
                    grads.w2[o * self.hidden + h] += d_out[o] * pre[h];
                    dh += self.w2[o * self.hidden + h] * d_out[o];
                }
                d_hidden[h] = dh;
            } else {
                d_hidden[h] = T::zero();
            }
        }
        d_x.fill(T::zero());
        let nx = d_x.len();
        for h in 0..self.hidden {
            let dh = d_hidden[h];
            if dh == T::zero() {
                continue;
            }
            grads.b1[h] += dh;
            let g_row = &mut grads.w1[h * self.input..(h + 1) * self.input];
            for (g, v) in g_row.iter_mut().zip(x) {
                *g += dh * *v;
            }
            let row = &self.w1[h * self.input..h * self.input + nx];
            for (d, w) in d_x.iter_mut().zip(row) {
                *d += dh * *w;
            }
        }
    }
}

/// Density and color decoders with their input encodings.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderPair<T> {
    pub density: Mlp<T>,
    pub color: Mlp<T>,
    pub encoding: EncodingConfig,
}

/// Initial bias of the density head; fresh scenes start near-empty.
pub const DENSITY_BIAS_INIT: f64 = -5.0;

impl<T: Real> DecoderPair<T> {
    pub fn new<R: Rng + ?Sized>(
        density_feature_len: usize,
        appearance_feature_len: usize,
        hidden: usize,
        encoding: EncodingConfig,
        rng: &mut R,
    ) -> Result<Self> {
        encoding.validate()?;
        let mut density = Mlp::init(density_feature_len + encoding.pe_len(), hidden, 1, rng);
        density.b2[0] = T::lit(DENSITY_BIAS_INIT);
        let color = Mlp::init(appearance_feature_len + encoding.sh_len(), hidden, 3, rng);
        Ok(Self {
            density,
            color,
            encoding,
        })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            density: self.density.zeros_like(),
            color: self.color.zeros_like(),
            encoding: self.encoding,
        }
    }

    pub fn count_parameters(&self) -> usize {
        self.density.count_parameters() + self.color.count_parameters()
    }

    pub fn density_feature_len(&self) -> usize {
        self.density.input - self.encoding.pe_len()
    }

    pub fn appearance_feature_len(&self) -> usize {
        self.color.input - self.encoding.sh_len()
    }

    fn concat(feature: &[T], encoded: &[f64], expected: usize) -> Result<Vec<T>> {
        let got = feature.len() + encoded.len();
        if got != expected {
            return Err(Error::WidthMismatch { expected, got });
        }
        Ok(feature
            .iter()
            .copied()
            .chain(encoded.iter().map(|&v| T::lit(v)))
            .collect())
    }

    /// σ = softplus(g_σ(f_σ, PE(x))).
    pub fn decode_density(&self, feature: &[T], pe: &[f64]) -> Result<T> {
        let x = Self::concat(feature, pe, self.density.input)?;
        let mut pre = vec![T::zero(); self.density.hidden];
        let mut z = [T::zero()];
        self.density.forward(&x, &mut pre, &mut z);
        Ok(z[0].softplus())
    }

    /// rgb = sigmoid(g_c(f_c, SH(d))).
    pub fn decode_color(&self, feature: &[T], sh: &[f64]) -> Result<[T; 3]> {
        let x = Self::concat(feature, sh, self.color.input)?;
        let mut pre = vec![T::zero(); self.color.hidden];
        let mut z = [T::zero(); 3];
        self.color.forward(&x, &mut pre, &mut z);
        Ok([z[0].sigmoid(), z[1].sigmoid(), z[2].sigmoid()])
    }
}
