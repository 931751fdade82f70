//! Packed binary convolution against a naive float loop.

use std::time::Instant;

use bbcu_core::binarize::{binarize_weights, ScaleScope};
use bbcu_core::bitkernel::{xnor_popcount_conv, PackedBitPlane, PackedKernel};
use bbcu_core::{ConvSpec, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::BenchConfig;
use crate::error::{CliError, CliResult};

#[derive(Clone, Debug, PartialEq)]
pub struct ThroughputReport {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub repeats: usize,
    /// Best wall time of one convolution, packing included.
    pub packed_seconds: f64,
    pub naive_seconds: f64,
    pub outputs_match: bool,
}

impl ThroughputReport {
    pub fn speedup(&self) -> f64 {
        self.naive_seconds / self.packed_seconds
    }

    pub fn macs(&self) -> u64 {
        (self.height * self.width * self.channels * self.channels * self.kernel * self.kernel) as u64
    }

    pub fn to_text(&self) -> String {
        let g = |s: f64| self.macs() as f64 / s / 1e9;
        format!(
            "channels={}\nheight={}\nwidth={}\nkernel={}\nrepeats={}\nthreads=1\n\
             packed_seconds={:.6}\nnaive_f32_seconds={:.6}\npacked_gmacs={:.3}\nnaive_f32_gmacs={:.3}\n\
             speedup={:.2}\noutputs_match={}\n",
            self.channels,
            self.height,
            self.width,
            self.kernel,
            self.repeats,
            self.packed_seconds,
            self.naive_seconds,
            g(self.packed_seconds),
            g(self.naive_seconds),
            self.speedup(),
            self.outputs_match
        )
    }
}

/// Six nested loops over `f32`, zero-free ±1 data with -1 padding.
pub fn naive_conv_f32(x: &[f32], w: &[f32], c: usize, h: usize, wd: usize, k: usize) -> Vec<f32> {
    let p = (k / 2) as isize;
    let mut out = vec![0f32; c * h * wd];
    for o in 0..c {
        for y in 0..h {
            for xx in 0..wd {
                let mut acc = 0f32;
                for i in 0..c {
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = y as isize + ky as isize - p;
                            let ix = xx as isize + kx as isize - p;
                            let v = if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                -1.0
                            } else {
                                x[(i * h + iy as usize) * wd + ix as usize]
                            };
                            acc += v * w[((o * c + i) * k + ky) * k + kx];
                        }
                    }
                }
                out[(o * h + y) * wd + xx] = acc;
            }
        }
    }
    out
}

pub fn run(cfg: &BenchConfig, seed: u64) -> CliResult<ThroughputReport> {
    if cfg.channels == 0 || cfg.height == 0 || cfg.width == 0 || cfg.repeats == 0 {
        return Err(CliError::Input("bench sizes and repeats must be positive".into()));
    }
    let (c, h, w, k) = (cfg.channels, cfg.height, cfg.width, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sign = |r: &mut ChaCha8Rng| if r.random_bool(0.5) { 1.0 } else { -1.0 };
    let x = Tensor::from_fn([1, c, h, w], |_| sign(&mut rng));
    let weights = Tensor::from_fn(ConvSpec::same(c, c, k).weight_shape(), |_| sign(&mut rng));
    let kernel = PackedKernel::from_binarized(&binarize_weights(&weights, ScaleScope::Layer))?;
    let xf: Vec<f32> = x.data().iter().map(|&v| v as f32).collect();
    let wf: Vec<f32> = weights.data().iter().map(|&v| v as f32).collect();

    let mut packed_seconds = f64::INFINITY;
    let mut counts = Vec::new();
    for _ in 0..cfg.repeats {
        let t = Instant::now();
        let plane = PackedBitPlane::pack_image(&x, 0)?;
        let map = xnor_popcount_conv(&plane, &kernel, k / 2)?;
        packed_seconds = packed_seconds.min(t.elapsed().as_secs_f64());
        counts = map.data;
    }
    let mut naive_seconds = f64::INFINITY;
    let mut reference = Vec::new();
    for _ in 0..cfg.repeats {
        let t = Instant::now();
        reference = naive_conv_f32(std::hint::black_box(&xf), std::hint::black_box(&wf), c, h, w, k);
        naive_seconds = naive_seconds.min(t.elapsed().as_secs_f64());
    }
    let outputs_match = counts.iter().zip(&reference).all(|(&a, &b)| a as f32 == b);
    Ok(ThroughputReport {
        channels: c,
        height: h,
        width: w,
        kernel: k,
        repeats: cfg.repeats,
        packed_seconds,
        naive_seconds,
        outputs_match,
    })
}
