//! Sign binarization of activations and weights, and the straight-through gradients.
//!
//! Activations are binarized per channel against a learnable threshold:
//! `+1` if `x > alpha`, `-1` otherwise (ties go to `-1`). Weights are
//! binarized as `scale * sign(w)` with `scale = mean(|w|)` over the layer or
//! over each output filter, and `sign(0) = -1`.
//!
//! The derivative of `sign` is replaced by the piecewise-linear
//! [`sign_derivative`]. Its antiderivative [`surrogate_sign`] is the smooth
//! stand-in used when checking gradients by finite differences.

use alloc::vec;
use alloc::vec::Vec;

use crate::tensor::check_same;
use crate::{Error, Result, Tensor};

/// Whether `sign` is evaluated exactly or through its smooth surrogate.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum SignMode {
    #[default]
    Exact,
    /// Activations use [`surrogate_sign`], weights use `clamp(w, -1, 1)`.
    Surrogate,
}

/// Extent over which the weight scaling factor is averaged.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ScaleScope {
    #[default]
    Layer,
    Filter,
}

#[inline]
pub fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else {
        -1.0
    }
}

/// Approximate derivative of `sign` at `u = x - alpha`.
#[inline]
pub fn sign_derivative(u: f64) -> f64 {
    if (-1.0..0.0).contains(&u) {
        2.0 + 2.0 * u
    } else if (0.0..1.0).contains(&u) {
        2.0 - 2.0 * u
    } else {
        0.0
    }
}

/// Piecewise-quadratic function whose derivative is exactly [`sign_derivative`].
#[inline]
pub fn surrogate_sign(u: f64) -> f64 {
    if u < -1.0 {
        -1.0
    } else if u < 0.0 {
        2.0 * u + u * u
    } else if u < 1.0 {
        2.0 * u - u * u
    } else {
        1.0
    }
}

/// Per-channel learnable thresholds for activation binarization.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationBinarizer {
    pub alpha: Vec<f64>,
}

impl ActivationBinarizer {
    pub fn zeros(channels: usize) -> Self {
        ActivationBinarizer {
            alpha: vec![0.0; channels],
        }
    }

    pub fn forward(&self, x: &Tensor, mode: SignMode) -> Result<Tensor> {
        match mode {
            SignMode::Exact => sign_activations(x, &self.alpha),
            SignMode::Surrogate => map_per_channel(x, &self.alpha, |v, a| surrogate_sign(v - a)),
        }
    }
}

fn check_alpha(x: &Tensor, alpha: &[f64]) -> Result<()> {
    if alpha.len() != x.channels() {
        return Err(Error::dim("alpha channels", x.channels(), alpha.len()));
    }
    Ok(())
}

fn map_per_channel(x: &Tensor, alpha: &[f64], f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    check_alpha(x, alpha)?;
    let mut out = x.clone();
    for b in 0..x.batch() {
        for (c, &a) in alpha.iter().enumerate() {
            for v in out.plane_mut(b, c) {
                *v = f(*v, a);
            }
        }
    }
    Ok(out)
}

pub fn sign_activations(x: &Tensor, alpha: &[f64]) -> Result<Tensor> {
    map_per_channel(x, alpha, |v, a| if v > a { 1.0 } else { -1.0 })
}

pub fn ste_backward_x(grad_out: &Tensor, x: &Tensor, alpha: &[f64]) -> Result<Tensor> {
    check_same(grad_out, x)?;
    check_alpha(x, alpha)?;
    let mut out = grad_out.clone();
    for b in 0..x.batch() {
        for (c, &a) in alpha.iter().enumerate() {
            let xs = x.plane(b, c);
            for (g, &v) in out.plane_mut(b, c).iter_mut().zip(xs) {
                *g *= sign_derivative(v - a);
            }
        }
    }
    Ok(out)
}

pub fn ste_backward_alpha(grad_out: &Tensor, x: &Tensor, alpha: &[f64]) -> Result<Vec<f64>> {
    check_same(grad_out, x)?;
    check_alpha(x, alpha)?;
    let mut out = vec![0.0; alpha.len()];
    for b in 0..x.batch() {
        for (c, &a) in alpha.iter().enumerate() {
            let s: f64 = x
                .plane(b, c)
                .iter()
                .zip(grad_out.plane(b, c))
                .map(|(&v, &g)| g * sign_derivative(v - a))
                .sum();
            out[c] -= s;
        }
    }
    Ok(out)
}

/// `scale * signs`, the binarized weight of one conv layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BinarizedWeights {
    pub signs: Tensor,
    /// One entry for [`ScaleScope::Layer`], one per output filter for [`ScaleScope::Filter`].
    pub scales: Vec<f64>,
    pub scope: ScaleScope,
}

impl BinarizedWeights {
    #[inline]
    pub fn scale_for(&self, out_channel: usize) -> f64 {
        match self.scope {
            ScaleScope::Layer => self.scales[0],
            ScaleScope::Filter => self.scales[out_channel],
        }
    }

    /// True when every scale is exactly zero (all-zero latent weights).
    pub fn is_degenerate(&self) -> bool {
        self.scales.iter().all(|&s| s == 0.0)
    }

    /// Dense `scale * sign` weights.
    pub fn effective(&self) -> Tensor {
        let per = self.signs.len() / self.signs.batch();
        let mut out = self.signs.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v *= self.scale_for(i / per);
        }
        out
    }
}

fn scope_groups(w: &Tensor, scope: ScaleScope) -> (usize, usize) {
    match scope {
        ScaleScope::Layer => (1, w.len()),
        ScaleScope::Filter => (w.batch(), w.len() / w.batch()),
    }
}

fn mean_abs_scales(w: &Tensor, scope: ScaleScope) -> Vec<f64> {
    let (groups, per) = scope_groups(w, scope);
    (0..groups)
        .map(|g| w.data()[g * per..(g + 1) * per].iter().map(|v| v.abs()).sum::<f64>() / per as f64)
        .collect()
}

/// Binarize latent conv weights `[C_out, C_in, K_h, K_w]`.
pub fn binarize_weights(w_latent: &Tensor, scope: ScaleScope) -> BinarizedWeights {
    BinarizedWeights {
        signs: w_latent.map(sign),
        scales: mean_abs_scales(w_latent, scope),
        scope,
    }
}

/// Weights as seen by the forward pass in the given mode (`scale * q(w)`).
pub fn effective_weights(w_latent: &Tensor, scope: ScaleScope, mode: SignMode) -> Tensor {
    match mode {
        SignMode::Exact => binarize_weights(w_latent, scope).effective(),
        SignMode::Surrogate => {
            let scales = mean_abs_scales(w_latent, scope);
            let (_, per) = scope_groups(w_latent, scope);
            let mut out = w_latent.map(|v| v.clamp(-1.0, 1.0));
            for (i, v) in out.data_mut().iter_mut().enumerate() {
                *v *= scales[(i / per).min(scales.len() - 1)];
            }
            out
        }
    }
}

/// Gradient on the latent weights given the gradient on `scale * q(w)`.
///
/// Sign path: `g * scale * 1{|w| <= 1}`. Scale path (optional):
/// `sum_j(g_j * q(w_j)) * sgn(w_i) / n` within each scope group.
pub fn weight_grad_through_binarization(
    grad_wb: &Tensor,
    w_latent: &Tensor,
    scope: ScaleScope,
    mode: SignMode,
    scale_path: bool,
) -> Result<Tensor> {
    check_same(grad_wb, w_latent)?;
    let scales = mean_abs_scales(w_latent, scope);
    let (groups, per) = scope_groups(w_latent, scope);
    let q = |v: f64| match mode {
        SignMode::Exact => sign(v),
        SignMode::Surrogate => v.clamp(-1.0, 1.0),
    };
    let mut out = Tensor::zeros(w_latent.shape());
    let g = grad_wb.data();
    let w = w_latent.data();
    for grp in 0..groups {
        let range = grp * per..(grp + 1) * per;
        let s = scales[grp];
        let proj: f64 = if scale_path {
            range.clone().map(|i| g[i] * q(w[i])).sum::<f64>() / per as f64
        } else {
            0.0
        };
        for i in range {
            let mask = if w[i].abs() <= 1.0 { 1.0 } else { 0.0 };
            let d_abs = if w[i] > 0.0 {
                1.0
            } else if w[i] < 0.0 {
                -1.0
            } else {
                0.0
            };
            out.data_mut()[i] = g[i] * s * mask + proj * d_abs;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn threshold_tie_goes_negative() {
        let x = Tensor::from_vec([1, 2, 1, 2], alloc::vec![0.5, -0.3, 0.25, 0.2501]).unwrap();
        let s = sign_activations(&x, &[0.0, 0.25]).unwrap();
        assert_eq!(s.data(), &[1.0, -1.0, -1.0, 1.0]);
        assert!(sign_activations(&x, &[0.0]).is_err());
    }

    #[test]
    fn sign_matches_scalar_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::from_fn([2, 3, 4, 5], |_| rng.random_range(-2.0..2.0));
        let alpha: Vec<f64> = (0..3).map(|_| rng.random_range(-0.5..0.5)).collect();
        let s = sign_activations(&x, &alpha).unwrap();
        for b in 0..2 {
            for c in 0..3 {
                for h in 0..4 {
                    for w in 0..5 {
                        let expect = if x.get(b, c, h, w) > alpha[c] { 1.0 } else { -1.0 };
                        assert_eq!(s.get(b, c, h, w), expect);
                    }
                }
            }
        }
    }

    #[test]
    fn uniform_weights() {
        let w = Tensor::full([2, 2, 3, 3], 0.5);
        let b = binarize_weights(&w, ScaleScope::Layer);
        assert!(b.signs.data().iter().all(|&v| v == 1.0));
        assert_eq!(b.scales, alloc::vec![0.5]);
    }

    #[test]
    fn two_weight_layer() {
        let w = Tensor::from_vec([1, 1, 1, 2], alloc::vec![1.0, -3.0]).unwrap();
        let b = binarize_weights(&w, ScaleScope::Layer);
        assert_eq!(b.scales, alloc::vec![2.0]);
        assert_eq!(b.signs.data(), &[1.0, -1.0]);
        let z = binarize_weights(&Tensor::zeros([1, 1, 1, 2]), ScaleScope::Layer);
        assert!(z.is_degenerate());
        assert_eq!(z.signs.data(), &[-1.0, -1.0]);
    }

    #[test]
    fn per_filter_scales() {
        let w = Tensor::from_vec([2, 1, 1, 2], alloc::vec![1.0, -3.0, 0.5, 0.5]).unwrap();
        let b = binarize_weights(&w, ScaleScope::Filter);
        assert_eq!(b.scales, alloc::vec![2.0, 0.5]);
        assert_eq!(b.effective().data(), &[2.0, -2.0, 0.5, 0.5]);
    }

    #[test]
    fn mean_abs_scale_is_least_squares_optimal() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let w = Tensor::from_fn([8, 4, 3, 3], |_| rng.random_range(-1.0..1.0));
        let b = binarize_weights(&w, ScaleScope::Layer);
        let err = |s: f64| -> f64 {
            w.data().iter().zip(b.signs.data()).map(|(a, q)| (a - s * q) * (a - s * q)).sum()
        };
        let best = err(b.scales[0]);
        for i in 0..=2000 {
            let s = i as f64 / 2000.0;
            assert!(err(s) >= best - 1e-12);
        }
        // No other sign pattern does better at any scale: sign(w) maximizes sum(|w|).
        let mut flipped = b.signs.clone();
        flipped.data_mut()[0] *= -1.0;
        let s2 = w.data().iter().zip(flipped.data()).map(|(a, q)| a * q).sum::<f64>() / w.len() as f64;
        let err2: f64 = w.data().iter().zip(flipped.data()).map(|(a, q)| (a - s2 * q) * (a - s2 * q)).sum();
        assert!(err2 >= best);
    }

    #[test]
    fn derivative_pieces() {
        assert_eq!(sign_derivative(-2.0), 0.0);
        assert_eq!(sign_derivative(0.0), 2.0);
        assert_eq!(sign_derivative(-0.5), 1.0);
        assert_eq!(sign_derivative(0.5), 1.0);
        assert_eq!(sign_derivative(1.0), 0.0);
        assert_eq!(sign_derivative(-1.0), 0.0);
    }

    #[test]
    fn derivative_matches_surrogate_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let h = 1e-6;
        for _ in 0..1000 {
            let u: f64 = rng.random_range(-1.5..1.5);
            let fd = (surrogate_sign(u + h) - surrogate_sign(u - h)) / (2.0 * h);
            assert!((fd - sign_derivative(u)).abs() < 1e-4, "u={u}");
        }
    }

    #[test]
    fn alpha_gradient_single_element() {
        let x = Tensor::full([1, 1, 1, 1], 0.5);
        let g = Tensor::full([1, 1, 1, 1], 1.0);
        assert_eq!(ste_backward_alpha(&g, &x, &[0.0]).unwrap(), alloc::vec![-1.0]);
        let z = Tensor::zeros([1, 1, 1, 1]);
        assert_eq!(ste_backward_alpha(&z, &x, &[0.0]).unwrap(), alloc::vec![0.0]);
    }

    #[test]
    fn alpha_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = Tensor::from_fn([2, 3, 4, 4], |_| rng.random_range(-1.5..1.5));
        let g = Tensor::from_fn([2, 3, 4, 4], |_| rng.random_range(-1.0..1.0));
        let alpha = alloc::vec![0.1, -0.2, 0.05];
        let loss = |a: &[f64]| -> f64 {
            let s = ActivationBinarizer { alpha: a.to_vec() }
                .forward(&x, SignMode::Surrogate)
                .unwrap();
            s.data().iter().zip(g.data()).map(|(p, q)| p * q).sum()
        };
        let ga = ste_backward_alpha(&g, &x, &alpha).unwrap();
        let h = 1e-6;
        for c in 0..3 {
            let mut ap = alpha.clone();
            ap[c] += h;
            let mut am = alpha.clone();
            am[c] -= h;
            let fd = (loss(&ap) - loss(&am)) / (2.0 * h);
            assert!((fd - ga[c]).abs() <= 1e-3 * fd.abs().max(1e-6), "{fd} vs {}", ga[c]);
        }
    }

    #[test]
    fn clip_mask_kills_sign_path() {
        let w = Tensor::from_vec([1, 1, 1, 2], alloc::vec![2.0, 0.5]).unwrap();
        let g = Tensor::full([1, 1, 1, 2], 1.0);
        let d = weight_grad_through_binarization(&g, &w, ScaleScope::Layer, SignMode::Exact, false).unwrap();
        assert_eq!(d.data()[0], 0.0);
        assert_eq!(d.data()[1], 1.25);
        let z = weight_grad_through_binarization(&Tensor::zeros([1, 1, 1, 2]), &w, ScaleScope::Layer, SignMode::Exact, true).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_weight_gradient_matches_finite_differences() {
        // One weight: forward is |w| * clamp(w), whose derivative at 0.5 is 2|w| = 1.
        let w = Tensor::full([1, 1, 1, 1], 0.5);
        let g = Tensor::full([1, 1, 1, 1], 1.0);
        let d = weight_grad_through_binarization(&g, &w, ScaleScope::Layer, SignMode::Surrogate, true).unwrap();
        let f = |v: f64| effective_weights(&Tensor::full([1, 1, 1, 1], v), ScaleScope::Layer, SignMode::Surrogate).data()[0];
        let h = 1e-3;
        let fd = (f(0.5 + h) - f(0.5 - h)) / (2.0 * h);
        assert!((d.data()[0] - fd).abs() < 1e-9);
        assert!((fd - 1.0).abs() < 1e-9);
    }

    #[test]
    fn weight_gradient_matches_finite_differences_per_filter() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let w = Tensor::from_fn([3, 2, 3, 3], |_| rng.random_range(-0.9..0.9));
        let g = Tensor::from_fn([3, 2, 3, 3], |_| rng.random_range(-1.0..1.0));
        for scope in [ScaleScope::Layer, ScaleScope::Filter] {
            let loss = |w: &Tensor| -> f64 {
                effective_weights(w, scope, SignMode::Surrogate)
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(a, b)| a * b)
                    .sum()
            };
            let d = weight_grad_through_binarization(&g, &w, scope, SignMode::Surrogate, true).unwrap();
            let h = 1e-6;
            for i in 0..w.len() {
                let mut wp = w.clone();
                wp.data_mut()[i] += h;
                let mut wm = w.clone();
                wm.data_mut()[i] -= h;
                let fd = (loss(&wp) - loss(&wm)) / (2.0 * h);
                assert!((fd - d.data()[i]).abs() <= 1e-3 * fd.abs().max(1e-3));
            }
        }
    }
}
