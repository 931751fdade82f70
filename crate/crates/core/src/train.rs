//! Degradation synthesis, patch sampling, L1 loss, Adam training and gradient checks.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::bbcu::{Mode, ParamKind, Pass};
use crate::metrics::psnr;
use crate::net::RestorationNet;
use crate::tensor::{check_same, resize_bicubic};
use crate::{Error, Result, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub enum Degradation {
    /// Additive white Gaussian noise, standard deviation on the `[0, 1]` scale.
    Awgn { sigma: f64 },
    /// Bicubic downscaling by an integer factor.
    BicubicDown { scale: usize },
    /// Low-quality images come from files paired with the targets.
    Paired,
}

impl Degradation {
    /// AWGN with the noise level given on the 8-bit scale (15, 25, 50, ...).
    pub fn awgn_8bit(level: f64) -> Self {
        Degradation::Awgn { sigma: level / 255.0 }
    }

    /// Spatial shrink factor from target to input.
    pub fn factor(&self) -> usize {
        match self {
            Degradation::BicubicDown { scale } => *scale,
            _ => 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Degradation::Awgn { sigma } if !(sigma.is_finite() && *sigma > 0.0) => {
                Err(Error::Config(format!("awgn sigma must be positive (got {sigma})")))
            }
            Degradation::BicubicDown { scale } if ![1, 2, 4].contains(scale) => {
                Err(Error::Config(format!("bicubic_down scale must be 1, 2 or 4 (got {scale})")))
            }
            _ => Ok(()),
        }
    }
}

/// Synthesize a low-quality input. Noise is not clipped.
pub fn degrade<R: Rng + ?Sized>(hq: &Tensor, kind: &Degradation, rng: &mut R) -> Result<Tensor> {
    match *kind {
        Degradation::Awgn { sigma } => {
            if sigma == 0.0 {
                return Ok(hq.clone());
            }
            let normal = Normal::new(0.0, sigma).map_err(|e| Error::Config(format!("awgn: {e}")))?;
            Ok(hq.map(|v| v + normal.sample(rng)))
        }
        Degradation::BicubicDown { scale } => {
            if scale == 0 || hq.height() % scale != 0 || hq.width() % scale != 0 {
                return Err(Error::dim("size divisible by scale", scale, hq.height()));
            }
            Ok(resize_bicubic(hq, hq.height() / scale, hq.width() / scale))
        }
        Degradation::Paired => Err(Error::Config("paired data cannot be synthesized".into())),
    }
}

/// Mean absolute error and its gradient; the gradient is zero at exact ties.
pub fn l1_loss(pred: &Tensor, target: &Tensor) -> Result<(f64, Tensor)> {
    check_same(pred, target)?;
    let n = pred.len() as f64;
    let mut grad = Tensor::zeros(pred.shape());
    let mut sum = 0.0;
    for ((g, &p), &t) in grad.data_mut().iter_mut().zip(pred.data()).zip(target.data()) {
        let d = p - t;
        sum += d.abs();
        *g = if d > 0.0 {
            1.0 / n
        } else if d < 0.0 {
            -1.0 / n
        } else {
            0.0
        };
    }
    Ok((sum / n, grad))
}

/// Smooth synthetic test image in `[0, 1]`: a colour gradient with flat shapes and stripes.
pub fn synthetic_image<R: Rng + ?Sized>(channels: usize, height: usize, width: usize, rng: &mut R) -> Tensor {
    let corners: Vec<[f64; 4]> = (0..channels).map(|_| core::array::from_fn(|_| rng.random_range(0.1..0.9))).collect();
    let mut img = Tensor::from_fn([1, channels, height, width], |[_, c, y, x]| {
        let fy = y as f64 / height.max(2) as f64;
        let fx = x as f64 / width.max(2) as f64;
        let k = corners[c];
        (k[0] * (1.0 - fx) + k[1] * fx) * (1.0 - fy) + (k[2] * (1.0 - fx) + k[3] * fx) * fy
    });
    let shapes = rng.random_range(3..9);
    for _ in 0..shapes {
        let colour: Vec<f64> = (0..channels).map(|_| rng.random_range(0.0..1.0)).collect();
        let cy = rng.random_range(0.0..height as f64);
        let cx = rng.random_range(0.0..width as f64);
        let ry = rng.random_range(2.0..(height as f64 / 2.0).max(3.0));
        let rx = rng.random_range(2.0..(width as f64 / 2.0).max(3.0));
        let kind = rng.random_range(0..3);
        let period = rng.random_range(3.0..8.0);
        for y in 0..height {
            for x in 0..width {
                let (dy, dx) = ((y as f64 - cy) / ry, (x as f64 - cx) / rx);
                let inside = match kind {
                    0 => dy.abs() <= 1.0 && dx.abs() <= 1.0,
                    1 => dy * dy + dx * dx <= 1.0,
                    _ => dy.abs() <= 1.0 && dx.abs() <= 1.0 && ((x as f64 + y as f64) / period) as i64 % 2 == 0,
                };
                if inside {
                    for (c, &v) in colour.iter().enumerate() {
                        img.set(0, c, y, x, v);
                    }
                }
            }
        }
    }
    img
}

/// One of the eight flips/rotations of a square image.
pub fn dihedral(x: &Tensor, t: u8) -> Tensor {
    let [b, c, h, w] = x.shape();
    let (transpose, flip_y, flip_x) = (t & 4 != 0, t & 1 != 0, t & 2 != 0);
    let (oh, ow) = if transpose { (w, h) } else { (h, w) };
    Tensor::from_fn([b, c, oh, ow], |[bi, ci, y, xx]| {
        let (mut sy, mut sx) = if transpose { (xx, y) } else { (y, xx) };
        if flip_y {
            sy = h - 1 - sy;
        }
        if flip_x {
            sx = w - 1 - sx;
        }
        x.get(bi, ci, sy, sx)
    })
}

pub fn crop(x: &Tensor, top: usize, left: usize, height: usize, width: usize) -> Tensor {
    Tensor::from_fn([x.batch(), x.channels(), height, width], |[b, c, y, xx]| {
        x.get(b, c, top + y, left + xx)
    })
}

/// A low-quality / high-quality image pair, each `[1, C, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Pair {
    pub lq: Tensor,
    pub hq: Tensor,
}

/// Training targets plus, for paired data, their low-quality counterparts.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainData {
    pub hq: Vec<Tensor>,
    pub lq: Vec<Tensor>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch: usize,
    /// Target patch side; the input patch is `patch / r`.
    pub patch: usize,
    pub steps: usize,
    pub seed: u64,
    /// Steps at which the learning rate halves.
    pub halve_at: Vec<usize>,
    pub adam: AdamConfig,
    /// Steps between trace rows.
    pub log_every: usize,
    pub degradation: Degradation,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            batch: 4,
            patch: 32,
            steps: 1000,
            seed: 0,
            halve_at: Vec::new(),
            adam: AdamConfig::default(),
            log_every: 100,
            degradation: Degradation::awgn_8bit(25.0),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, scale: usize) -> Result<()> {
        let mut errs = Vec::new();
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            errs.push(format!("lr must be a non-negative number (got {})", self.lr));
        }
        if self.batch == 0 {
            errs.push("batch must be >= 1".into());
        }
        if self.patch == 0 || self.patch % scale.max(1) != 0 {
            errs.push(format!("patch ({}) must be a positive multiple of the scale ({scale})", self.patch));
        }
        if self.log_every == 0 {
            errs.push("log_every must be >= 1".into());
        }
        if let Err(Error::Config(e)) = self.degradation.validate() {
            errs.push(e);
        }
        if self.degradation.factor() != 1 && self.degradation.factor() != scale {
            errs.push(format!(
                "degradation factor {} does not match network scale {scale}",
                self.degradation.factor()
            ));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(errs))
        }
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        let halvings = self.halve_at.iter().filter(|&&s| s <= step).count();
        self.lr * libm::pow(0.5, halvings as f64)
    }
}

/// Generator for stream `stream` of a seeded run.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

const VALIDATION_STREAM: u64 = u64::MAX;

/// Degrade full validation images with a generator derived from `seed`.
pub fn make_validation(hq: &[Tensor], kind: &Degradation, seed: u64) -> Result<Vec<Pair>> {
    let mut rng = stream_rng(seed, VALIDATION_STREAM);
    hq.iter()
        .map(|h| {
            Ok(Pair {
                lq: degrade(h, kind, &mut rng)?,
                hq: h.clone(),
            })
        })
        .collect()
}

/// Draw a batch of augmented patches: `(lq, hq)`.
pub fn sample_batch<R: Rng + ?Sized>(
    data: &TrainData,
    cfg: &TrainConfig,
    scale: usize,
    rng: &mut R,
) -> Result<(Tensor, Tensor)> {
    if data.hq.is_empty() {
        return Err(Error::Config("no training images".into()));
    }
    let paired = matches!(cfg.degradation, Degradation::Paired);
    if paired && data.lq.len() != data.hq.len() {
        return Err(Error::Config("paired data needs one input per target".into()));
    }
    let p = cfg.patch;
    let mut lqs = Vec::with_capacity(cfg.batch);
    let mut hqs = Vec::with_capacity(cfg.batch);
    for _ in 0..cfg.batch {
        let i = rng.random_range(0..data.hq.len());
        let hq = &data.hq[i];
        if hq.height() < p || hq.width() < p {
            return Err(Error::dim("image side >= patch", p, hq.height().min(hq.width())));
        }
        let top = scale * rng.random_range(0..=(hq.height() - p) / scale);
        let left = scale * rng.random_range(0..=(hq.width() - p) / scale);
        let t: u8 = rng.random_range(0..8);
        let hp = dihedral(&crop(hq, top, left, p, p), t);
        let lp = if paired {
            dihedral(&crop(&data.lq[i], top / scale, left / scale, p / scale, p / scale), t)
        } else {
            degrade(&hp, &cfg.degradation, rng)?
        };
        lqs.push(lp);
        hqs.push(hp);
    }
    Ok((Tensor::stack(&lqs)?, Tensor::stack(&hqs)?))
}

/// Adam moments for every parameter, in the network's parameter order.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl Adam {
    pub fn new(config: AdamConfig, net: &RestorationNet) -> Self {
        let sizes: Vec<usize> = net.params().iter().map(|p| p.value.len()).collect();
        Adam {
            config,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }

    pub fn step(&mut self, net: &mut RestorationNet, lr: f64) {
        self.t += 1;
        let AdamConfig { beta1, beta2, epsilon } = self.config;
        let c1 = 1.0 - libm::pow(beta1, self.t as f64);
        let c2 = 1.0 - libm::pow(beta2, self.t as f64);
        for ((p, m), v) in net.params_mut().into_iter().zip(&mut self.m).zip(&mut self.v) {
            let grad = p.grad.data();
            let value = p.value.data_mut();
            for i in 0..value.len() {
                let g = grad[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                value[i] -= lr * (m[i] / c1) / (libm::sqrt(v[i] / c2) + epsilon);
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceRow {
    pub step: usize,
    /// Mean training loss since the previous row.
    pub loss: f64,
    pub val_psnr: f64,
}

pub fn trace_csv(rows: &[TraceRow]) -> String {
    let mut out = String::from("step,loss,val_psnr\n");
    for r in rows {
        out.push_str(&format!("{},{:.9},{:.6}\n", r.step, r.loss, r.val_psnr));
    }
    out
}

/// Mean PSNR of the clipped network output over a validation set.
pub fn evaluate(net: &mut RestorationNet, val: &[Pair]) -> Result<f64> {
    if val.is_empty() {
        return Ok(f64::NAN);
    }
    let mut total = 0.0;
    for pair in val {
        let y = net.forward(&pair.lq, Pass::INFER)?;
        total += psnr(&y, &pair.hq, 1.0)?;
    }
    Ok(total / val.len() as f64)
}

/// Mean PSNR of the inputs themselves (resized to the target size when needed).
pub fn input_psnr(val: &[Pair]) -> Result<f64> {
    let mut total = 0.0;
    for pair in val {
        let lq = resize_bicubic(&pair.lq, pair.hq.height(), pair.hq.width());
        total += psnr(&lq, &pair.hq, 1.0)?;
    }
    Ok(total / val.len() as f64)
}

fn param_norms(net: &RestorationNet) -> String {
    let mut s = String::new();
    for (i, p) in net.params().iter().enumerate() {
        let v: f64 = p.value.data().iter().map(|x| x * x).sum();
        let g: f64 = p.grad.data().iter().map(|x| x * x).sum();
        s.push_str(&format!(
            "{i}:{} |w|={:.4e} |g|={:.4e}\n",
            p.kind.name(),
            libm::sqrt(v),
            libm::sqrt(g)
        ));
    }
    s
}

/// Train with Adam and L1 loss; latent weights are clipped to `[-1, 1]` after every step.
/// `on_row` sees each trace row as it is produced.
pub fn train_loop(
    net: &mut RestorationNet,
    data: &TrainData,
    val: &[Pair],
    cfg: &TrainConfig,
    mut on_row: impl FnMut(&TraceRow),
) -> Result<Vec<TraceRow>> {
    cfg.validate(net.spec.scale)?;
    let mut adam = Adam::new(cfg.adam, net);
    let mut trace = Vec::new();
    let mut acc = 0.0;
    let mut seen = 0usize;
    net.clip_latent_weights();
    for step in 1..=cfg.steps {
        let mut rng = stream_rng(cfg.seed, step as u64);
        let (lq, hq) = sample_batch(data, cfg, net.spec.scale, &mut rng)?;
        net.zero_grad();
        let y = net.forward(&lq, Pass::TRAIN)?;
        let (loss, grad) = l1_loss(&y, &hq)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                step,
                norms: param_norms(net),
            });
        }
        net.backward(&grad)?;
        if net.params().iter().any(|p| !p.grad.is_finite()) {
            return Err(Error::NonFinite {
                step,
                norms: param_norms(net),
            });
        }
        adam.step(net, cfg.lr_at(step));
        net.clip_latent_weights();
        acc += loss;
        seen += 1;
        if step % cfg.log_every == 0 || step == cfg.steps {
            let row = TraceRow {
                step,
                loss: acc / seen as f64,
                val_psnr: evaluate(net, val)?,
            };
            on_row(&row);
            trace.push(row);
            acc = 0.0;
            seen = 0;
        }
    }
    Ok(trace)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckEntry {
    pub kind: ParamKind,
    pub max_rel_err: f64,
    pub checked: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub tolerance: f64,
    pub entries: Vec<GradcheckEntry>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.max_rel_err <= self.tolerance)
    }

    pub fn max_for(&self, kind: ParamKind) -> Option<f64> {
        self.entries.iter().find(|e| e.kind == kind).map(|e| e.max_rel_err)
    }
}

/// Gradients below this magnitude are compared absolutely.
const GRADCHECK_FLOOR: f64 = 1e-6;
const GRADCHECK_STEP: f64 = 1e-6;

/// Central-difference check of every parameter under the smooth sign surrogate.
/// The loss is `sum(y * t)` for a fixed random `t`, so only the network's own kinks matter.
pub fn gradcheck(net: &mut RestorationNet, input: &Tensor, tolerance: f64, seed: u64) -> Result<GradcheckReport> {
    let pass = Pass::SURROGATE;
    debug_assert_eq!(pass.mode, Mode::Train);
    let probe = {
        let mut y = net.forward(input, pass)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for v in y.data_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
        y
    };
    let loss = |net: &mut RestorationNet| -> Result<f64> {
        let y = net.forward(input, pass)?;
        Ok(y.data().iter().zip(probe.data()).map(|(a, b)| a * b).sum())
    };
    net.zero_grad();
    net.forward(input, pass)?;
    net.backward(&probe)?;
    let analytic: Vec<Vec<f64>> = net.params().iter().map(|p| p.grad.data().to_vec()).collect();
    let kinds: Vec<ParamKind> = net.params().iter().map(|p| p.kind).collect();
    let mut worst: BTreeMap<ParamKind, (f64, usize)> = BTreeMap::new();
    for (pi, kind) in kinds.iter().enumerate() {
        for i in 0..analytic[pi].len() {
            let orig = net.params()[pi].value.data()[i];
            net.params_mut()[pi].value.data_mut()[i] = orig + GRADCHECK_STEP;
            let up = loss(net)?;
            net.params_mut()[pi].value.data_mut()[i] = orig - GRADCHECK_STEP;
            let down = loss(net)?;
            net.params_mut()[pi].value.data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * GRADCHECK_STEP);
            let a = analytic[pi][i];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(GRADCHECK_FLOOR);
            let e = worst.entry(*kind).or_insert((0.0, 0));
            e.0 = e.0.max(err);
            e.1 += 1;
        }
    }
    Ok(GradcheckReport {
        tolerance,
        entries: worst
            .into_iter()
            .map(|(kind, (max_rel_err, checked))| GradcheckEntry {
                kind,
                max_rel_err,
                checked,
            })
            .collect(),
    })
}
