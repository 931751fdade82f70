//! The basic binary convolution unit (BBCU) and its position variants.
//!
//! Four block topologies, with `bc` the scaled binary convolution, `R` the
//! residual and `f` the RPReLU activation:
//!
//! | variant | output                  |
//! |---------|-------------------------|
//! | V1      | `f(BN(bc(x)) + R)`      |
//! | V2      | `f(bc(x) + R)`          |
//! | V3      | `f(bc(x) + R)` (input amplified by `k` upstream) |
//! | V4      | `R + f(bc(x))`          |
//!
//! The residual depends on where the block sits: body blocks add their
//! input, head and upsampling blocks add a blocked channel repetition of
//! their input, and tail blocks add an externally supplied image.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::binarize::{
    binarize_weights, effective_weights, ste_backward_alpha, ste_backward_x, weight_grad_through_binarization,
    ActivationBinarizer, BinarizedWeights, ScaleScope, SignMode,
};
use crate::bitkernel::{scaled_binary_conv_packed, PackedKernel};
use crate::tensor::{check_same, conv2d_backward, conv2d_fp, repeat_channels_adjoint, repeat_channels_to, ConvSpec};
use crate::{Error, Result, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    V1,
    V2,
    V3,
    V4,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::V1, Variant::V2, Variant::V3, Variant::V4];

    pub fn has_batch_norm(self) -> bool {
        self == Variant::V1
    }

    /// V3 and V4 rely on input amplification instead of BatchNorm.
    pub fn uses_amplification(self) -> bool {
        matches!(self, Variant::V3 | Variant::V4)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Position {
    Head,
    Body,
    Upsampling,
    Tail,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Mode {
    #[default]
    Train,
    Infer,
}

/// How a forward pass evaluates: caching/batch statistics, and exact or surrogate sign.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Pass {
    pub mode: Mode,
    pub sign: SignMode,
}

impl Pass {
    pub const TRAIN: Pass = Pass {
        mode: Mode::Train,
        sign: SignMode::Exact,
    };
    pub const INFER: Pass = Pass {
        mode: Mode::Infer,
        sign: SignMode::Exact,
    };
    /// Train mode with the smooth sign surrogate, for finite-difference checks.
    pub const SURROGATE: Pass = Pass {
        mode: Mode::Train,
        sign: SignMode::Surrogate,
    };
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamKind {
    LatentWeight,
    FpWeight,
    Alpha,
    Gamma,
    Zeta,
    Beta,
    Kappa,
    Tau,
}

impl ParamKind {
    pub fn name(self) -> &'static str {
        match self {
            ParamKind::LatentWeight => "latent_w",
            ParamKind::FpWeight => "fp_w",
            ParamKind::Alpha => "alpha",
            ParamKind::Gamma => "gamma",
            ParamKind::Zeta => "zeta",
            ParamKind::Beta => "beta",
            ParamKind::Kappa => "bn_kappa",
            ParamKind::Tau => "bn_tau",
        }
    }
}

/// A learnable tensor with its accumulated gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub kind: ParamKind,
    pub value: Tensor,
    pub grad: Tensor,
}

impl Param {
    pub fn new(kind: ParamKind, value: Tensor) -> Self {
        let grad = Tensor::zeros(value.shape());
        Param { kind, value, grad }
    }

    /// Per-channel vector stored as `[1, C, 1, 1]`.
    pub fn vector(kind: ParamKind, values: Vec<f64>) -> Self {
        let n = values.len();
        Self::new(kind, Tensor::from_vec([1, n, 1, 1], values).expect("non-empty parameter"))
    }

    pub fn zero_grad(&mut self) {
        self.grad.data_mut().fill(0.0);
    }

    pub fn accumulate(&mut self, g: &[f64]) {
        for (a, b) in self.grad.data_mut().iter_mut().zip(g) {
            *a += b;
        }
    }
}

fn per_channel_check(y: &Tensor, n: usize) -> Result<()> {
    if y.channels() != n {
        return Err(Error::dim("parameter channels", y.channels(), n));
    }
    Ok(())
}

/// `f(y) = y - gamma + zeta` above `gamma`, `beta * (y - gamma) + zeta` at or below it.
pub fn rprelu_forward(y: &Tensor, gamma: &[f64], zeta: &[f64], beta: &[f64]) -> Result<Tensor> {
    per_channel_check(y, gamma.len())?;
    per_channel_check(y, zeta.len())?;
    per_channel_check(y, beta.len())?;
    let mut out = y.clone();
    for b in 0..y.batch() {
        for c in 0..y.channels() {
            let (g, z, s) = (gamma[c], zeta[c], beta[c]);
            for v in out.plane_mut(b, c) {
                let d = *v - g;
                *v = if d > 0.0 { d + z } else { s * d + z };
            }
        }
    }
    Ok(out)
}

/// Gradients of [`rprelu_forward`]: `(d/dy, d/dgamma, d/dzeta, d/dbeta)`.
pub fn rprelu_backward(
    grad_out: &Tensor,
    y: &Tensor,
    gamma: &[f64],
    beta: &[f64],
) -> Result<(Tensor, Vec<f64>, Vec<f64>, Vec<f64>)> {
    check_same(grad_out, y)?;
    per_channel_check(y, gamma.len())?;
    per_channel_check(y, beta.len())?;
    let c_n = y.channels();
    let (mut dg, mut dz, mut db) = (vec![0.0; c_n], vec![0.0; c_n], vec![0.0; c_n]);
    let mut dy = grad_out.clone();
    for b in 0..y.batch() {
        for c in 0..c_n {
            let ys = y.plane(b, c);
            for (g, &v) in dy.plane_mut(b, c).iter_mut().zip(ys) {
                let d = v - gamma[c];
                let up = *g;
                dz[c] += up;
                if d > 0.0 {
                    dg[c] -= up;
                } else {
                    dg[c] -= up * beta[c];
                    db[c] += up * d;
                    *g = up * beta[c];
                }
            }
        }
    }
    Ok((dy, dg, dz, db))
}

#[derive(Clone, Debug, PartialEq)]
pub struct RpreluParams {
    pub gamma: Param,
    pub zeta: Param,
    pub beta: Param,
}

impl RpreluParams {
    /// `gamma = zeta = 0`, `beta = 0.25`.
    pub fn new(channels: usize) -> Self {
        RpreluParams {
            gamma: Param::vector(ParamKind::Gamma, vec![0.0; channels]),
            zeta: Param::vector(ParamKind::Zeta, vec![0.0; channels]),
            beta: Param::vector(ParamKind::Beta, vec![0.25; channels]),
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.value.len()
    }

    pub fn forward(&self, y: &Tensor) -> Result<Tensor> {
        rprelu_forward(y, self.gamma.value.data(), self.zeta.value.data(), self.beta.value.data())
    }

    /// Accumulates parameter gradients and returns the gradient on `y`.
    pub fn backward(&mut self, grad_out: &Tensor, y: &Tensor) -> Result<Tensor> {
        let (dy, dg, dz, db) = rprelu_backward(grad_out, y, self.gamma.value.data(), self.beta.value.data())?;
        self.gamma.accumulate(&dg);
        self.zeta.accumulate(&dz);
        self.beta.accumulate(&db);
        Ok(dy)
    }

    pub fn params_mut(&mut self) -> [&mut Param; 3] {
        [&mut self.gamma, &mut self.zeta, &mut self.beta]
    }

    pub fn params(&self) -> [&Param; 3] {
        [&self.gamma, &self.zeta, &self.beta]
    }
}

#[derive(Clone, Debug, PartialEq)]
struct BnCache {
    xhat: Tensor,
    inv_std: Vec<f64>,
}

/// Per-channel BatchNorm. Train mode normalizes with batch statistics;
/// infer mode uses the folded affine `kappa' * v + tau'` from running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState {
    pub kappa: Param,
    pub tau: Param,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub epsilon: f64,
    cache: Option<BnCache>,
}

impl BatchNormState {
    pub fn new(channels: usize) -> Self {
        BatchNormState {
            kappa: Param::vector(ParamKind::Kappa, vec![1.0; channels]),
            tau: Param::vector(ParamKind::Tau, vec![0.0; channels]),
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum: 0.1,
            epsilon: 1e-5,
            cache: None,
        }
    }

    /// Folded `(scale, shift)` per channel for inference.
    pub fn folded(&self) -> (Vec<f64>, Vec<f64>) {
        let k = self.kappa.value.data();
        let t = self.tau.value.data();
        (0..k.len())
            .map(|c| {
                let s = k[c] / libm::sqrt(self.running_var[c] + self.epsilon);
                (s, t[c] - s * self.running_mean[c])
            })
            .unzip()
    }

    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        per_channel_check(x, self.running_mean.len())?;
        let mut out = x.clone();
        let (b_n, c_n) = (x.batch(), x.channels());
        if mode == Mode::Infer {
            let (s, t) = self.folded();
            for b in 0..b_n {
                for c in 0..c_n {
                    for v in out.plane_mut(b, c) {
                        *v = s[c] * *v + t[c];
                    }
                }
            }
            return Ok(out);
        }
        let count = (b_n * x.height() * x.width()) as f64;
        let mut inv_std = vec![0.0; c_n];
        let mut xhat = x.clone();
        for c in 0..c_n {
            let mean = (0..b_n).map(|b| x.plane(b, c).iter().sum::<f64>()).sum::<f64>() / count;
            let var = (0..b_n)
                .map(|b| x.plane(b, c).iter().map(|v| (v - mean) * (v - mean)).sum::<f64>())
                .sum::<f64>()
                / count;
            let is = 1.0 / libm::sqrt(var + self.epsilon);
            inv_std[c] = is;
            let (k, t) = (self.kappa.value.data()[c], self.tau.value.data()[c]);
            for b in 0..b_n {
                for (h, o) in xhat.plane_mut(b, c).iter_mut().zip(out.plane_mut(b, c)) {
                    *h = (*h - mean) * is;
                    *o = k * *h + t;
                }
            }
            let m = self.momentum;
            let unbiased = if count > 1.0 { var * count / (count - 1.0) } else { var };
            self.running_mean[c] = (1.0 - m) * self.running_mean[c] + m * mean;
            self.running_var[c] = (1.0 - m) * self.running_var[c] + m * unbiased;
        }
        self.cache = Some(BnCache { xhat, inv_std });
        Ok(out)
    }

    pub fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        let cache = self.cache.take().ok_or(Error::NoForwardCache)?;
        check_same(grad_out, &cache.xhat)?;
        let (b_n, c_n) = (grad_out.batch(), grad_out.channels());
        let count = (b_n * grad_out.height() * grad_out.width()) as f64;
        let mut dx = grad_out.clone();
        let mut dk = vec![0.0; c_n];
        let mut dt = vec![0.0; c_n];
        for c in 0..c_n {
            let k = self.kappa.value.data()[c];
            let (mut sum_g, mut sum_gx) = (0.0, 0.0);
            for b in 0..b_n {
                for (&g, &h) in grad_out.plane(b, c).iter().zip(cache.xhat.plane(b, c)) {
                    sum_g += g;
                    sum_gx += g * h;
                }
            }
            dk[c] = sum_gx;
            dt[c] = sum_g;
            let coef = k * cache.inv_std[c] / count;
            for b in 0..b_n {
                let xs = cache.xhat.plane(b, c);
                for (g, &h) in dx.plane_mut(b, c).iter_mut().zip(xs) {
                    *g = coef * (count * *g - sum_g - h * sum_gx);
                }
            }
        }
        self.kappa.accumulate(&dk);
        self.tau.accumulate(&dt);
        Ok(dx)
    }
}

/// Where a block's residual comes from on a given call.
#[derive(Clone, Copy, Debug)]
pub enum ResidualInput<'a> {
    /// Derived from the block input according to its position.
    Own,
    /// Supplied by the caller; its gradient is returned separately.
    Given(&'a Tensor),
    /// No residual connection.
    Disabled,
}

#[derive(Clone, Debug, PartialEq)]
struct BlockCache {
    x: Tensor,
    xb: Tensor,
    wb: Tensor,
    y: Tensor,
    sign: SignMode,
    residual: ResidualKind,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum ResidualKind {
    Own,
    Given,
    Disabled,
}

/// One binary convolution unit.
#[derive(Clone, Debug, PartialEq)]
pub struct BbcuBlock {
    pub variant: Variant,
    pub position: Position,
    pub spec: ConvSpec,
    /// Full-precision latent weights `[C_out, C_in, K, K]`.
    pub weight: Param,
    pub scope: ScaleScope,
    /// Backpropagate through the mean-absolute scaling factor.
    pub scale_path: bool,
    pub alpha: Param,
    pub act: RpreluParams,
    pub bn: Option<BatchNormState>,
    frozen: Option<BinarizedWeights>,
    cache: Option<BlockCache>,
}

impl BbcuBlock {
    /// Latent weights start uniform in `[-1, 1]`, thresholds at zero.
    pub fn new<R: Rng + ?Sized>(
        variant: Variant,
        position: Position,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        rng: &mut R,
    ) -> Self {
        let spec = ConvSpec::same(in_channels, out_channels, kernel).with_pad_value(-1.0);
        let w = Tensor::from_fn(spec.weight_shape(), |_| rng.random_range(-1.0..1.0));
        BbcuBlock {
            variant,
            position,
            spec,
            weight: Param::new(ParamKind::LatentWeight, w),
            scope: ScaleScope::Layer,
            scale_path: true,
            alpha: Param::vector(ParamKind::Alpha, vec![0.0; in_channels]),
            act: RpreluParams::new(out_channels),
            bn: variant.has_batch_norm().then(|| BatchNormState::new(out_channels)),
            frozen: None,
            cache: None,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.spec.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.spec.out_channels
    }

    /// Current binarized weights (the stored ones if the block was loaded frozen).
    pub fn binarized(&self) -> BinarizedWeights {
        match &self.frozen {
            Some(b) => b.clone(),
            None => binarize_weights(&self.weight.value, self.scope),
        }
    }

    /// Install exact binarized weights; latent weights become `scale * sign`.
    pub fn set_binarized(&mut self, b: BinarizedWeights) {
        self.weight.value = b.effective();
        self.scope = b.scope;
        self.frozen = Some(b);
    }

    /// Drop stored binarized weights so the next forward re-derives them from latents.
    pub fn unfreeze(&mut self) {
        self.frozen = None;
    }

    /// Sign pattern of the last train-mode forward.
    pub fn cached_signs(&self) -> Option<&Tensor> {
        self.cache.as_ref().map(|c| &c.xb)
    }

    fn own_residual(&self, x: &Tensor) -> Result<Tensor> {
        match self.position {
            Position::Body => Ok(x.clone()),
            Position::Head | Position::Upsampling => repeat_channels_to(x, self.out_channels()),
            Position::Tail => Err(Error::Config("tail block needs an externally supplied residual".into())),
        }
    }

    /// Binary convolution branch only, `scale * (sign(x) ⊛ sign(w))`.
    pub fn binary_conv(&self, x: &Tensor, sign: SignMode) -> Result<(Tensor, Tensor, Tensor)> {
        let binarizer = ActivationBinarizer {
            alpha: self.alpha.value.data().to_vec(),
        };
        let xb = binarizer.forward(x, sign)?;
        match sign {
            SignMode::Exact => {
                let b = self.binarized();
                let kernel = PackedKernel::from_binarized(&b)?;
                let out = scaled_binary_conv_packed(&xb, &kernel, self.spec.padding)?;
                Ok((xb, b.effective(), out))
            }
            SignMode::Surrogate => {
                let wb = effective_weights(&self.weight.value, self.scope, sign);
                let out = conv2d_fp(&xb, &wb, &self.spec)?;
                Ok((xb, wb, out))
            }
        }
    }

    pub fn forward(&mut self, x: &Tensor, residual: ResidualInput<'_>, pass: Pass) -> Result<Tensor> {
        let (xb, wb, mut conv) = self.binary_conv(x, pass.sign)?;
        if let Some(bn) = self.bn.as_mut() {
            conv = bn.forward(&conv, pass.mode)?;
        }
        let (res, kind) = match residual {
            ResidualInput::Own => (Some(self.own_residual(x)?), ResidualKind::Own),
            ResidualInput::Given(r) => (Some(r.clone()), ResidualKind::Given),
            ResidualInput::Disabled => (None, ResidualKind::Disabled),
        };
        if let Some(r) = &res {
            check_same(&conv, r)?;
        }
        let (y, out) = match (self.variant, res) {
            (Variant::V4, Some(r)) => {
                let mut out = self.act.forward(&conv)?;
                out.add_assign(&r)?;
                (conv, out)
            }
            (_, Some(r)) => {
                let mut y = conv;
                y.add_assign(&r)?;
                let out = self.act.forward(&y)?;
                (y, out)
            }
            (_, None) => {
                let out = self.act.forward(&conv)?;
                (conv, out)
            }
        };
        self.cache = (pass.mode == Mode::Train).then(|| BlockCache {
            x: x.clone(),
            xb,
            wb,
            y,
            sign: pass.sign,
            residual: kind,
        });
        Ok(out)
    }

    /// Accumulates parameter gradients. Returns the gradient on the block input
    /// (including the own-residual path) and, for a given residual, its gradient.
    pub fn backward(&mut self, grad_out: &Tensor) -> Result<(Tensor, Option<Tensor>)> {
        let cache = self.cache.take().ok_or(Error::NoForwardCache)?;
        let has_res = cache.residual != ResidualKind::Disabled;
        let (grad_conv, grad_res) = if self.variant == Variant::V4 {
            let gy = self.act.backward(grad_out, &cache.y)?;
            (gy, has_res.then(|| grad_out.clone()))
        } else {
            let gy = self.act.backward(grad_out, &cache.y)?;
            let gr = has_res.then(|| gy.clone());
            (gy, gr)
        };
        let grad_conv = match self.bn.as_mut() {
            Some(bn) => bn.backward(&grad_conv)?,
            None => grad_conv,
        };
        let (g_xb, g_wb) = conv2d_backward(&grad_conv, &cache.xb, &cache.wb, &self.spec, true)?;
        let g_xb = g_xb.expect("input gradient requested");
        let g_w = weight_grad_through_binarization(&g_wb, &self.weight.value, self.scope, cache.sign, self.scale_path)?;
        self.weight.accumulate(g_w.data());
        let alpha = self.alpha.value.data().to_vec();
        // The surrogate's derivative is exactly the STE factor, so both modes share it.
        let mut g_x = ste_backward_x(&g_xb, &cache.x, &alpha)?;
        let g_alpha = ste_backward_alpha(&g_xb, &cache.x, &alpha)?;
        self.alpha.accumulate(&g_alpha);
        match (cache.residual, grad_res) {
            (ResidualKind::Own, Some(gr)) => {
                let back = match self.position {
                    Position::Body => gr,
                    _ => repeat_channels_adjoint(&gr, self.in_channels()),
                };
                g_x.add_assign(&back)?;
                Ok((g_x, None))
            }
            (ResidualKind::Given, gr) => Ok((g_x, gr)),
            _ => Ok((g_x, None)),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v: Vec<&mut Param> = vec![&mut self.weight, &mut self.alpha];
        v.extend(self.act.params_mut());
        if let Some(bn) = self.bn.as_mut() {
            v.push(&mut bn.kappa);
            v.push(&mut bn.tau);
        }
        v
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut v: Vec<&Param> = vec![&self.weight, &self.alpha];
        v.extend(self.act.params());
        if let Some(bn) = self.bn.as_ref() {
            v.push(&bn.kappa);
            v.push(&bn.tau);
        }
        v
    }
}

/// Mean-magnitude comparison of the binary-conv branch and the residual branch.
#[derive(Clone, Debug, PartialEq)]
pub struct ValueRangeReport {
    pub channels: usize,
    pub k: f64,
    pub conv_mean_abs: f64,
    pub residual_mean_abs: f64,
    /// Symmetric histogram edges shared by both branches.
    pub edges: Vec<f64>,
    pub conv_hist: Vec<usize>,
    pub residual_hist: Vec<usize>,
}

/// Freshly initialized body block fed `k * U(0, 1)` activations.
pub fn value_range_diagnostic<R: Rng + ?Sized>(
    channels: usize,
    k: f64,
    size: usize,
    bins: usize,
    rng: &mut R,
) -> Result<ValueRangeReport> {
    let block = BbcuBlock::new(Variant::V3, Position::Body, channels, channels, 3, rng);
    let x = Tensor::from_fn([1, channels, size, size], |_| k * rng.random_range(0.0..1.0));
    let (_, _, conv) = block.binary_conv(&x, SignMode::Exact)?;
    let limit = conv
        .data()
        .iter()
        .chain(x.data())
        .fold(0.0f64, |m, v| m.max(v.abs()))
        .max(f64::MIN_POSITIVE);
    let edges: Vec<f64> = (0..=bins).map(|i| -limit + 2.0 * limit * i as f64 / bins as f64).collect();
    let hist = |t: &Tensor| {
        let mut h = vec![0usize; bins];
        for v in t.data() {
            let i = (((v + limit) / (2.0 * limit)) * bins as f64) as usize;
            h[i.min(bins - 1)] += 1;
        }
        h
    };
    Ok(ValueRangeReport {
        channels,
        k,
        conv_mean_abs: conv.mean_abs(),
        residual_mean_abs: x.mean_abs(),
        conv_hist: hist(&conv),
        residual_hist: hist(&x),
        edges,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::repeat_channels;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random(shape: [usize; 4], r: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(shape, |_| r.random_range(-1.0..1.0))
    }

    #[test]
    fn rprelu_identity_and_kink() {
        let mut r = rng(1);
        let y = random([1, 2, 3, 3], &mut r);
        assert_eq!(rprelu_forward(&y, &[0.0; 2], &[0.0; 2], &[1.0; 2]).unwrap(), y);
        let at = Tensor::from_vec([1, 1, 1, 1], vec![0.3]).unwrap();
        assert_eq!(rprelu_forward(&at, &[0.3], &[0.7], &[0.25]).unwrap().data(), &[0.7]);
    }

    #[test]
    fn rprelu_gradients_match_finite_differences() {
        let mut r = rng(2);
        let y = random([2, 3, 4, 4], &mut r);
        let g = random([2, 3, 4, 4], &mut r);
        let gamma = vec![0.1, -0.2, 0.05];
        let zeta = vec![0.3, 0.0, -0.1];
        let beta = vec![0.25, -0.5, 1.5];
        let loss = |y: &Tensor, ga: &[f64], ze: &[f64], be: &[f64]| -> f64 {
            let o = rprelu_forward(y, ga, ze, be).unwrap();
            o.data().iter().zip(g.data()).map(|(a, b)| a * b).sum()
        };
        let (dy, dg, dz, db) = rprelu_backward(&g, &y, &gamma, &beta).unwrap();
        let h = 1e-6;
        let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1e-6);
        for i in 0..y.len() {
            let c = (i / 16) % 3;
            if (y.data()[i] - gamma[c]).abs() < 1e-4 {
                continue;
            }
            let mut yp = y.clone();
            yp.data_mut()[i] += h;
            let mut ym = y.clone();
            ym.data_mut()[i] -= h;
            let fd = (loss(&yp, &gamma, &zeta, &beta) - loss(&ym, &gamma, &zeta, &beta)) / (2.0 * h);
            assert!(rel(fd, dy.data()[i]) < 1e-3);
        }
        for c in 0..3 {
            let bump = |v: &[f64], d: f64| {
                let mut v = v.to_vec();
                v[c] += d;
                v
            };
            let fd = (loss(&y, &bump(&gamma, h), &zeta, &beta) - loss(&y, &bump(&gamma, -h), &zeta, &beta)) / (2.0 * h);
            assert!(rel(fd, dg[c]) < 1e-3);
            let fd = (loss(&y, &gamma, &bump(&zeta, h), &beta) - loss(&y, &gamma, &bump(&zeta, -h), &beta)) / (2.0 * h);
            assert!(rel(fd, dz[c]) < 1e-3);
            let fd = (loss(&y, &gamma, &zeta, &bump(&beta, h)) - loss(&y, &gamma, &zeta, &bump(&beta, -h))) / (2.0 * h);
            assert!(rel(fd, db[c]) < 1e-3);
        }
    }

    #[test]
    fn v4_with_zero_conv_is_identity() {
        let mut r = rng(3);
        let mut block = BbcuBlock::new(Variant::V4, Position::Body, 4, 4, 3, &mut r);
        block.weight.value = Tensor::zeros(block.weight.value.shape());
        // f(0) = zeta = 0 with the default init.
        let x = random([2, 4, 5, 5], &mut r);
        let y = block.forward(&x, ResidualInput::Own, Pass::INFER).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn v4_residual_branch_is_exact() {
        let mut r = rng(4);
        let mut block = BbcuBlock::new(Variant::V4, Position::Body, 3, 3, 3, &mut r);
        for p in block.act.params_mut() {
            for v in p.value.data_mut() {
                *v = r.random_range(-0.5..0.5);
            }
        }
        let x = random([1, 3, 6, 6], &mut r);
        let y = block.forward(&x, ResidualInput::Own, Pass::INFER).unwrap();
        let (_, _, conv) = block.binary_conv(&x, SignMode::Exact).unwrap();
        let f = block.act.forward(&conv).unwrap();
        // The residual enters unmodified: out is exactly x + f(bc), bit for bit.
        for ((o, fv), xv) in y.data().iter().zip(f.data()).zip(x.data()) {
            assert_eq!(*o, fv + xv);
            assert!((o - fv - xv).abs() <= 1e-12 * o.abs().max(1.0));
        }
    }

    #[test]
    fn v1_with_identity_bn_equals_v2() {
        let mut r = rng(5);
        let mut v1 = BbcuBlock::new(Variant::V1, Position::Body, 4, 4, 3, &mut r);
        let mut v2 = v1.clone();
        v2.variant = Variant::V2;
        v2.bn = None;
        let bn = v1.bn.as_mut().unwrap();
        bn.running_var.fill(1.0 - bn.epsilon);
        let x = random([2, 4, 5, 5], &mut r);
        let a = v1.forward(&x, ResidualInput::Own, Pass::INFER).unwrap();
        let b = v2.forward(&x, ResidualInput::Own, Pass::INFER).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-12);
    }

    #[test]
    fn backward_without_forward_is_state_error() {
        let mut r = rng(6);
        let mut block = BbcuBlock::new(Variant::V4, Position::Body, 2, 2, 3, &mut r);
        let g = Tensor::zeros([1, 2, 3, 3]);
        assert_eq!(block.backward(&g).unwrap_err(), Error::NoForwardCache);
        let x = random([1, 2, 3, 3], &mut r);
        block.forward(&x, ResidualInput::Own, Pass::INFER).unwrap();
        assert_eq!(block.backward(&g).unwrap_err(), Error::NoForwardCache);
    }

    #[test]
    fn zero_grad_out_gives_zero_grads() {
        let mut r = rng(7);
        for variant in Variant::ALL {
            let mut block = BbcuBlock::new(variant, Position::Body, 3, 3, 3, &mut r);
            let x = random([2, 3, 4, 4], &mut r);
            let y = block.forward(&x, ResidualInput::Own, Pass::TRAIN).unwrap();
            let (gx, _) = block.backward(&Tensor::zeros(y.shape())).unwrap();
            assert!(gx.data().iter().all(|&v| v == 0.0));
            for p in block.params() {
                assert!(p.grad.data().iter().all(|&v| v == 0.0), "{:?}", p.kind);
            }
        }
    }

    #[test]
    fn upsampling_residual_adjoint() {
        let mut r = rng(8);
        let mut block = BbcuBlock::new(Variant::V4, Position::Upsampling, 2, 8, 3, &mut r);
        // Kill the conv path so only the residual carries gradient.
        block.weight.value = Tensor::zeros(block.weight.value.shape());
        let x = random([1, 2, 3, 3], &mut r);
        let y = block.forward(&x, ResidualInput::Own, Pass::TRAIN).unwrap();
        assert_eq!(y.channels(), 8);
        let mut g = Tensor::zeros(y.shape());
        g.set(0, 5, 1, 2, 1.0);
        let (gx, _) = block.backward(&g).unwrap();
        // With zero weights the conv-path input gradient is zero too.
        assert_eq!(gx.get(0, 1, 1, 2), 1.0);
        assert_eq!(gx.data().iter().filter(|&&v| v != 0.0).count(), 1);
        assert_eq!(repeat_channels(&x, 4).unwrap().plane(0, 5), x.plane(0, 1));
    }

    #[test]
    fn head_truncates_repetition() {
        let mut r = rng(9);
        let mut block = BbcuBlock::new(Variant::V2, Position::Head, 3, 8, 3, &mut r);
        let x = random([1, 3, 4, 4], &mut r);
        let y = block.forward(&x, ResidualInput::Own, Pass::INFER).unwrap();
        assert_eq!(y.shape(), [1, 8, 4, 4]);
    }

    #[test]
    fn tail_requires_given_residual() {
        let mut r = rng(10);
        let mut block = BbcuBlock::new(Variant::V4, Position::Tail, 4, 3, 3, &mut r);
        let x = random([1, 4, 4, 4], &mut r);
        assert!(block.forward(&x, ResidualInput::Own, Pass::INFER).is_err());
        let lq = random([1, 3, 4, 4], &mut r);
        let y = block.forward(&x, ResidualInput::Given(&lq), Pass::TRAIN).unwrap();
        let (_, gr) = block.backward(&Tensor::full(y.shape(), 1.0)).unwrap();
        assert_eq!(gr.unwrap(), Tensor::full([1, 3, 4, 4], 1.0));
        let bad = random([1, 3, 5, 4], &mut r);
        assert!(block.forward(&x, ResidualInput::Given(&bad), Pass::INFER).is_err());
    }

    #[test]
    fn block_gradients_match_surrogate_finite_differences() {
        let mut r = rng(11);
        for variant in Variant::ALL {
            let mut block = BbcuBlock::new(variant, Position::Body, 3, 3, 3, &mut r);
            for v in block.weight.value.data_mut() {
                *v *= 0.9;
            }
            for p in block.params_mut().into_iter().skip(1) {
                for v in p.value.data_mut() {
                    *v += r.random_range(-0.2..0.2);
                }
            }
            let x = random([2, 3, 4, 4], &mut r);
            let g = random([2, 3, 4, 4], &mut r);
            let loss = |b: &mut BbcuBlock, x: &Tensor| -> f64 {
                let y = b.forward(x, ResidualInput::Own, Pass::SURROGATE).unwrap();
                y.data().iter().zip(g.data()).map(|(a, c)| a * c).sum()
            };
            loss(&mut block, &x);
            let (gx, _) = block.backward(&g).unwrap();
            let h = 1e-6;
            let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1e-4);
            for i in 0..x.len() {
                let mut xp = x.clone();
                xp.data_mut()[i] += h;
                let mut xm = x.clone();
                xm.data_mut()[i] -= h;
                let mut bb = block.clone();
                let fd = (loss(&mut bb, &xp) - loss(&mut bb, &xm)) / (2.0 * h);
                assert!(rel(fd, gx.data()[i]) < 1e-3, "{variant:?} x[{i}] {fd} vs {}", gx.data()[i]);
            }
            let grads: Vec<(ParamKind, Vec<f64>)> =
                block.params().iter().map(|p| (p.kind, p.grad.data().to_vec())).collect();
            for (pi, (kind, grad)) in grads.iter().enumerate() {
                for i in 0..grad.len() {
                    let mut bp = block.clone();
                    bp.params_mut()[pi].value.data_mut()[i] += h;
                    let mut bm = block.clone();
                    bm.params_mut()[pi].value.data_mut()[i] -= h;
                    let fd = (loss(&mut bp, &x) - loss(&mut bm, &x)) / (2.0 * h);
                    assert!(rel(fd, grad[i]) < 1e-3, "{variant:?} {kind:?}[{i}] {fd} vs {}", grad[i]);
                }
            }
        }
    }

    #[test]
    fn range_gap_and_alignment() {
        let mut r = rng(12);
        let plain = value_range_diagnostic(64, 1.0, 16, 12, &mut r).unwrap();
        assert!(plain.conv_mean_abs > 10.0 * plain.residual_mean_abs);
        let mut r = rng(12);
        let aligned = value_range_diagnostic(64, 130.0, 16, 12, &mut r).unwrap();
        let ratio = aligned.residual_mean_abs / aligned.conv_mean_abs;
        assert!((0.1..10.0).contains(&ratio), "ratio {ratio}");
        assert_eq!(plain.conv_hist.iter().sum::<usize>(), 64 * 256);
    }
}
