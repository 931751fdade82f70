//! Four-part restoration networks: head, body, upsampling, tail.
//!
//! ```text
//! x0 = k * lq
//! h  = head(x0)
//! b  = body_out(units(h)) + h
//! u  = [conv C->4C, shuffle x2] per factor of two in the scale
//! y  = tail(u) / k            (+ lq when the image residual is on)
//! ```
//!
//! Binarized parts use the matching BBCU position variant; full-precision
//! parts use plain convolutions with an RPReLU where the backbone has one.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bbcu::{BbcuBlock, Mode, Param, ParamKind, Pass, Position, ResidualInput, RpreluParams, Variant};
use crate::binarize::ScaleScope;
use crate::tensor::{conv2d_backward, conv2d_fp, resize_bicubic, scale, ConvSpec};
use crate::{Error, Result, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    SuperResolution,
    Denoise,
    Deblock,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::SuperResolution => "sr",
            Task::Denoise => "denoise",
            Task::Deblock => "deblock",
        }
    }
}

/// Which parts are built from binary units.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Parts {
    pub head: bool,
    pub body: bool,
    pub upsampling: bool,
    pub tail: bool,
}

impl Parts {
    pub const NONE: Parts = Parts {
        head: false,
        body: false,
        upsampling: false,
        tail: false,
    };
    pub const BODY: Parts = Parts {
        head: false,
        body: true,
        upsampling: false,
        tail: false,
    };
    pub const ALL: Parts = Parts {
        head: true,
        body: true,
        upsampling: true,
        tail: true,
    };

    pub fn any(&self) -> bool {
        self.head || self.body || self.upsampling || self.tail
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkSpec {
    pub task: Task,
    /// Upscaling factor r: 1, 2 or 4.
    pub scale: usize,
    pub image_channels: usize,
    pub channels: usize,
    /// Number of 3x3 convolutions in the body (excluding the closing conv).
    pub body_blocks: usize,
    pub binarize: Parts,
    pub variant: Variant,
    /// Amplification factor applied to the input image.
    pub k: f64,
    /// Convolutions sharing one residual connection; `None` picks 1 (binary) or 2 (full precision).
    pub convs_per_unit: Option<usize>,
    /// Body units whose residual connection is removed.
    pub breakpoints: Vec<usize>,
    /// Add the (resized) input image to the output when the tail is full precision.
    pub image_residual: bool,
    pub scope: ScaleScope,
}

impl NetworkSpec {
    /// SRResNet-shaped x4 network with a binarized body, as used for the cost tables.
    pub fn reference_sr() -> Self {
        NetworkSpec {
            task: Task::SuperResolution,
            scale: 4,
            image_channels: 3,
            channels: 64,
            body_blocks: 32,
            binarize: Parts::BODY,
            variant: Variant::V4,
            k: 130.0,
            convs_per_unit: None,
            breakpoints: Vec::new(),
            image_residual: false,
            scope: ScaleScope::Layer,
        }
    }

    /// Small V4 denoiser, 12 channels and 6 body convolutions.
    pub fn toy_denoiser() -> Self {
        NetworkSpec {
            task: Task::Denoise,
            scale: 1,
            image_channels: 3,
            channels: 12,
            body_blocks: 6,
            binarize: Parts::BODY,
            variant: Variant::V4,
            k: optimal_k(12),
            convs_per_unit: None,
            breakpoints: Vec::new(),
            image_residual: true,
            scope: ScaleScope::Layer,
        }
    }

    pub fn unit_size(&self) -> usize {
        self.convs_per_unit
            .unwrap_or(if self.binarize.body { 1 } else { 2 })
    }

    pub fn unit_count(&self) -> usize {
        self.body_blocks / self.unit_size().max(1)
    }

    pub fn upsampling_stages(&self) -> usize {
        match self.scale {
            4 => 2,
            2 => 1,
            _ => 0,
        }
    }

    /// Every violated constraint, or `Ok`.
    pub fn validate(&self) -> Result<()> {
        let mut errs: Vec<String> = Vec::new();
        if ![1, 2, 4].contains(&self.scale) {
            errs.push(format!("scale must be 1, 2 or 4 (got {})", self.scale));
        }
        if self.task != Task::SuperResolution && self.scale != 1 {
            errs.push(format!("{} requires scale 1", self.task.name()));
        }
        if self.image_channels == 0 {
            errs.push("image_channels must be >= 1".into());
        }
        if self.channels == 0 {
            errs.push("channels must be >= 1".into());
        }
        if self.body_blocks == 0 {
            errs.push("body_blocks must be >= 1".into());
        }
        let unit = self.unit_size();
        if unit == 0 {
            errs.push("convs_per_unit must be >= 1".into());
        } else if self.body_blocks % unit != 0 {
            errs.push(format!(
                "body_blocks ({}) must be a multiple of convs_per_unit ({unit})",
                self.body_blocks
            ));
        }
        if !(self.k.is_finite() && self.k > 0.0) {
            errs.push(format!("k must be positive and finite (got {})", self.k));
        }
        if !self.variant.uses_amplification() && self.k != 1.0 {
            errs.push(format!("variant {:?} requires k = 1 (got {})", self.variant, self.k));
        }
        if let Some(&b) = self.breakpoints.iter().find(|&&b| unit > 0 && b >= self.unit_count()) {
            errs.push(format!("breakpoint {b} is past the last body unit"));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(errs))
        }
    }
}

/// Amplification factor that balances `n`-channel binary convolutions: `130 n / 64`.
pub fn optimal_k(channels: usize) -> f64 {
    130.0 * channels as f64 / 64.0
}

/// `(B, C r^2, H, W) -> (B, C, H r, W r)`.
pub fn pixel_shuffle(x: &Tensor, r: usize) -> Result<Tensor> {
    let [b, c, h, w] = x.shape();
    if r == 0 || c % (r * r) != 0 {
        return Err(Error::dim("channels divisible by r^2", r * r, c));
    }
    let oc = c / (r * r);
    let mut out = Tensor::zeros([b, oc, h * r, w * r]);
    for bi in 0..b {
        for ci in 0..c {
            let (o, dy, dx) = (ci / (r * r), (ci % (r * r)) / r, ci % r);
            let src = x.plane(bi, ci);
            let dst = out.plane_mut(bi, o);
            for y in 0..h {
                for xx in 0..w {
                    dst[(y * r + dy) * w * r + xx * r + dx] = src[y * w + xx];
                }
            }
        }
    }
    Ok(out)
}

/// Inverse of [`pixel_shuffle`] (also its adjoint).
pub fn pixel_unshuffle(x: &Tensor, r: usize) -> Result<Tensor> {
    let [b, c, h, w] = x.shape();
    if r == 0 || h % r != 0 || w % r != 0 {
        return Err(Error::dim("spatial divisible by r", r, h));
    }
    let (oh, ow) = (h / r, w / r);
    let mut out = Tensor::zeros([b, c * r * r, oh, ow]);
    for bi in 0..b {
        for ci in 0..c * r * r {
            let (o, dy, dx) = (ci / (r * r), (ci % (r * r)) / r, ci % r);
            let src = x.plane(bi, o);
            let dst = out.plane_mut(bi, ci);
            for y in 0..oh {
                for xx in 0..ow {
                    dst[y * ow + xx] = src[(y * r + dy) * w + xx * r + dx];
                }
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
struct FpCache {
    x: Tensor,
    y: Tensor,
}

/// Full-precision 3x3 convolution with an optional RPReLU.
#[derive(Clone, Debug, PartialEq)]
pub struct FpConv {
    pub spec: ConvSpec,
    pub weight: Param,
    pub act: Option<RpreluParams>,
    cache: Option<FpCache>,
}

impl FpConv {
    pub fn new<R: Rng + ?Sized>(cin: usize, cout: usize, act: bool, rng: &mut R) -> Self {
        let spec = ConvSpec::same(cin, cout, 3);
        let bound = 1.0 / libm::sqrt((cin * 9) as f64);
        let w = Tensor::from_fn(spec.weight_shape(), |_| rng.random_range(-bound..bound));
        FpConv {
            spec,
            weight: Param::new(ParamKind::FpWeight, w),
            act: act.then(|| RpreluParams::new(cout)),
            cache: None,
        }
    }

    pub fn forward(&mut self, x: &Tensor, pass: Pass) -> Result<Tensor> {
        let y = conv2d_fp(x, &self.weight.value, &self.spec)?;
        let out = match &self.act {
            Some(a) => a.forward(&y)?,
            None => y.clone(),
        };
        self.cache = (pass.mode == Mode::Train).then(|| FpCache { x: x.clone(), y });
        Ok(out)
    }

    pub fn backward(&mut self, grad_out: &Tensor, want_input: bool) -> Result<Option<Tensor>> {
        let cache = self.cache.take().ok_or(Error::NoForwardCache)?;
        let gy = match self.act.as_mut() {
            Some(a) => a.backward(grad_out, &cache.y)?,
            None => grad_out.clone(),
        };
        let (gx, gw) = conv2d_backward(&gy, &cache.x, &self.weight.value, &self.spec, want_input)?;
        self.weight.accumulate(gw.data());
        Ok(gx)
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = vec![&mut self.weight];
        if let Some(a) = self.act.as_mut() {
            v.extend(a.params_mut());
        }
        v
    }

    fn params(&self) -> Vec<&Param> {
        let mut v = vec![&self.weight];
        if let Some(a) = self.act.as_ref() {
            v.extend(a.params());
        }
        v
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Binary(BbcuBlock),
    Full(FpConv),
}

impl Layer {
    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        match self {
            Layer::Binary(b) => b.params_mut(),
            Layer::Full(f) => f.params_mut(),
        }
    }

    pub fn params(&self) -> Vec<&Param> {
        match self {
            Layer::Binary(b) => b.params(),
            Layer::Full(f) => f.params(),
        }
    }

    pub fn conv_spec(&self) -> ConvSpec {
        match self {
            Layer::Binary(b) => b.spec,
            Layer::Full(f) => f.spec,
        }
    }
}

/// Body convolutions sharing one residual connection.
#[derive(Clone, Debug, PartialEq)]
pub struct Unit {
    pub layers: Vec<Layer>,
    pub residual: bool,
}

impl Unit {
    fn forward(&mut self, x: &Tensor, pass: Pass) -> Result<Tensor> {
        let n = self.layers.len();
        let mut cur = x.clone();
        for (i, layer) in self.layers.iter_mut().enumerate() {
            let last = i + 1 == n;
            cur = match layer {
                Layer::Binary(b) => {
                    let res = if last && self.residual {
                        ResidualInput::Given(x)
                    } else {
                        ResidualInput::Disabled
                    };
                    b.forward(&cur, res, pass)?
                }
                Layer::Full(f) => {
                    let mut y = f.forward(&cur, pass)?;
                    if last && self.residual {
                        y.add_assign(x)?;
                    }
                    y
                }
            };
        }
        Ok(cur)
    }

    fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        let mut skip = None;
        let mut g = grad_out.clone();
        let n = self.layers.len();
        for (i, layer) in self.layers.iter_mut().enumerate().rev() {
            let last = i + 1 == n;
            g = match layer {
                Layer::Binary(b) => {
                    let (gx, gr) = b.backward(&g)?;
                    if gr.is_some() {
                        skip = gr;
                    }
                    gx
                }
                Layer::Full(f) => {
                    if last && self.residual {
                        skip = Some(g.clone());
                    }
                    f.backward(&g, true)?.expect("input gradient")
                }
            };
        }
        if let Some(s) = skip {
            g.add_assign(&s)?;
        }
        Ok(g)
    }
}

#[derive(Clone, Debug, PartialEq)]
struct NetCache {
    x0: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RestorationNet {
    pub spec: NetworkSpec,
    pub head: Layer,
    pub body: Vec<Unit>,
    /// Closing full-precision body conv, followed by the global residual.
    pub body_out: FpConv,
    pub upsampling: Vec<Layer>,
    pub tail: Layer,
    cache: Option<NetCache>,
}

impl RestorationNet {
    pub fn build(spec: &NetworkSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (ic, c) = (spec.image_channels, spec.channels);
        let binary = |pos, cin, cout, rng: &mut ChaCha8Rng| {
            let mut b = BbcuBlock::new(spec.variant, pos, cin, cout, 3, rng);
            b.scope = spec.scope;
            Layer::Binary(b)
        };
        let head = if spec.binarize.head {
            binary(Position::Head, ic, c, &mut rng)
        } else {
            Layer::Full(FpConv::new(ic, c, false, &mut rng))
        };
        let unit = spec.unit_size();
        let body = (0..spec.unit_count())
            .map(|u| Unit {
                layers: (0..unit)
                    .map(|i| {
                        if spec.binarize.body {
                            binary(Position::Body, c, c, &mut rng)
                        } else {
                            Layer::Full(FpConv::new(c, c, unit == 1 || i + 1 < unit, &mut rng))
                        }
                    })
                    .collect(),
                residual: !spec.breakpoints.contains(&u),
            })
            .collect();
        let body_out = FpConv::new(c, c, false, &mut rng);
        let upsampling = (0..spec.upsampling_stages())
            .map(|_| {
                if spec.binarize.upsampling {
                    binary(Position::Upsampling, c, 4 * c, &mut rng)
                } else {
                    Layer::Full(FpConv::new(c, 4 * c, true, &mut rng))
                }
            })
            .collect();
        let tail = if spec.binarize.tail {
            binary(Position::Tail, c, ic, &mut rng)
        } else {
            Layer::Full(FpConv::new(c, ic, false, &mut rng))
        };
        Ok(RestorationNet {
            spec: spec.clone(),
            head,
            body,
            body_out,
            upsampling,
            tail,
            cache: None,
        })
    }

    pub fn forward(&mut self, lq: &Tensor, pass: Pass) -> Result<Tensor> {
        if lq.channels() != self.spec.image_channels {
            return Err(Error::dim("image channels", self.spec.image_channels, lq.channels()));
        }
        let k = self.spec.k;
        let r = self.spec.scale;
        let x0 = scale(lq, k);
        let h = match &mut self.head {
            Layer::Binary(b) => b.forward(&x0, ResidualInput::Own, pass)?,
            Layer::Full(f) => f.forward(&x0, pass)?,
        };
        let mut b = h.clone();
        for unit in &mut self.body {
            b = unit.forward(&b, pass)?;
        }
        let mut u = self.body_out.forward(&b, pass)?;
        u.add_assign(&h)?;
        for stage in &mut self.upsampling {
            let y = match stage {
                Layer::Binary(blk) => blk.forward(&u, ResidualInput::Own, pass)?,
                Layer::Full(f) => f.forward(&u, pass)?,
            };
            u = pixel_shuffle(&y, 2)?;
        }
        let (oh, ow) = (lq.height() * r, lq.width() * r);
        let t = match &mut self.tail {
            Layer::Binary(blk) => {
                let res = resize_bicubic(&x0, oh, ow);
                blk.forward(&u, ResidualInput::Given(&res), pass)?
            }
            Layer::Full(f) => f.forward(&u, pass)?,
        };
        let mut out = scale(&t, 1.0 / k);
        if self.spec.image_residual && matches!(self.tail, Layer::Full(_)) {
            out.add_assign(&resize_bicubic(lq, oh, ow))?;
        }
        self.cache = (pass.mode == Mode::Train).then(|| NetCache { x0 });
        Ok(out)
    }

    /// Accumulates gradients into every parameter. The input gradient is not needed.
    pub fn backward(&mut self, grad_out: &Tensor) -> Result<()> {
        self.cache.take().ok_or(Error::NoForwardCache)?;
        let gt = scale(grad_out, 1.0 / self.spec.k);
        let mut g = match &mut self.tail {
            Layer::Binary(b) => b.backward(&gt)?.0,
            Layer::Full(f) => f.backward(&gt, true)?.expect("input gradient"),
        };
        for stage in self.upsampling.iter_mut().rev() {
            let gy = pixel_unshuffle(&g, 2)?;
            g = match stage {
                Layer::Binary(b) => b.backward(&gy)?.0,
                Layer::Full(f) => f.backward(&gy, true)?.expect("input gradient"),
            };
        }
        let global = g.clone();
        let mut gb = self.body_out.backward(&g, true)?.expect("input gradient");
        for unit in self.body.iter_mut().rev() {
            gb = unit.backward(&gb)?;
        }
        gb.add_assign(&global)?;
        match &mut self.head {
            Layer::Binary(b) => {
                b.backward(&gb)?;
            }
            Layer::Full(f) => {
                f.backward(&gb, false)?;
            }
        }
        Ok(())
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.head.params_mut();
        for unit in &mut self.body {
            for l in &mut unit.layers {
                v.extend(l.params_mut());
            }
        }
        v.extend(self.body_out.params_mut());
        for l in &mut self.upsampling {
            v.extend(l.params_mut());
        }
        v.extend(self.tail.params_mut());
        v
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut v = self.head.params();
        for unit in &self.body {
            for l in &unit.layers {
                v.extend(l.params());
            }
        }
        v.extend(self.body_out.params());
        for l in &self.upsampling {
            v.extend(l.params());
        }
        v.extend(self.tail.params());
        v
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    /// Every layer in forward order (the closing body conv after the units).
    pub fn layers(&self) -> Vec<&Layer> {
        let mut v = vec![&self.head];
        for unit in &self.body {
            v.extend(unit.layers.iter());
        }
        v.extend(self.upsampling.iter());
        v.push(&self.tail);
        v
    }

    pub fn binary_blocks_mut(&mut self) -> Vec<&mut BbcuBlock> {
        fn binary(l: &mut Layer) -> Option<&mut BbcuBlock> {
            match l {
                Layer::Binary(b) => Some(b),
                Layer::Full(_) => None,
            }
        }
        let mut v: Vec<&mut BbcuBlock> = Vec::new();
        v.extend(binary(&mut self.head));
        for unit in &mut self.body {
            v.extend(unit.layers.iter_mut().filter_map(binary));
        }
        v.extend(self.upsampling.iter_mut().filter_map(binary));
        v.extend(binary(&mut self.tail));
        v
    }

    /// Sign patterns seen by the body's binary blocks during the last train-mode forward.
    pub fn body_sign_patterns(&self) -> Vec<Tensor> {
        self.body
            .iter()
            .flat_map(|u| u.layers.iter())
            .filter_map(|l| match l {
                Layer::Binary(b) => b.cached_signs().cloned(),
                Layer::Full(_) => None,
            })
            .collect()
    }

    /// Clamp latent weights to `[-1, 1]` and drop any stored binarizations.
    pub fn clip_latent_weights(&mut self) {
        for b in self.binary_blocks_mut() {
            for v in b.weight.value.data_mut() {
                *v = v.clamp(-1.0, 1.0);
            }
            b.unfreeze();
        }
    }
}
