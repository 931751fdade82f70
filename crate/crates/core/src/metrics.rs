//! Image quality metrics, operation/parameter accounting and binarization benefit.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt::Write;

use num_rational::Ratio;

use crate::net::NetworkSpec;
use crate::tensor::check_same;
use crate::{Error, Result, Tensor};

/// Reported PSNR for identical images.
pub const PSNR_CAP: f64 = 99.0;

/// Upsampling OPs printed in the reference table, which our counting rule does not reproduce.
pub const REFERENCE_UPSAMPLING_MOPS: f64 = 76441.19;

fn clipped(v: f64, peak: f64) -> f64 {
    v.clamp(0.0, peak)
}

/// PSNR in dB after clipping both images to `[0, peak]`, capped at [`PSNR_CAP`].
pub fn psnr(a: &Tensor, b: &Tensor, peak: f64) -> Result<f64> {
    check_same(a, b)?;
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = clipped(x, peak) - clipped(y, peak);
            d * d
        })
        .sum::<f64>()
        / a.len() as f64;
    Ok(psnr_from_mse(mse, peak))
}

pub fn psnr_from_mse(mse: f64, peak: f64) -> f64 {
    if mse <= 0.0 {
        return PSNR_CAP;
    }
    (10.0 * libm::log10(peak * peak / mse)).min(PSNR_CAP)
}

/// Luma (ITU-R BT.601, studio range) of an RGB tensor in `[0, 1]`.
pub fn rgb_to_y(x: &Tensor) -> Result<Tensor> {
    if x.channels() != 3 {
        return Err(Error::dim("channels", 3, x.channels()));
    }
    let [b, _, h, w] = x.shape();
    let mut y = Tensor::zeros([b, 1, h, w]);
    for bi in 0..b {
        for i in 0..h * w {
            let r = clipped(x.plane(bi, 0)[i], 1.0);
            let g = clipped(x.plane(bi, 1)[i], 1.0);
            let bl = clipped(x.plane(bi, 2)[i], 1.0);
            y.plane_mut(bi, 0)[i] = (16.0 + 65.481 * r + 128.553 * g + 24.966 * bl) / 255.0;
        }
    }
    Ok(y)
}

/// PSNR on the luma channel only.
pub fn psnr_y(a: &Tensor, b: &Tensor) -> Result<f64> {
    check_same(a, b)?;
    psnr(&rgb_to_y(a)?, &rgb_to_y(b)?, 1.0)
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;

fn gaussian_window(size: usize) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let g: Vec<f64> = (0..size)
        .map(|i| {
            let d = i as f64 - c;
            libm::exp(-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA))
        })
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Separable "valid" filtering of one plane.
fn filter_valid(p: &[f64], h: usize, w: usize, g: &[f64]) -> (Vec<f64>, usize, usize) {
    let n = g.len();
    let (oh, ow) = (h + 1 - n, w + 1 - n);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..n).map(|i| g[i] * p[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|i| g[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    (out, oh, ow)
}

/// Mean SSIM over every channel of every image (Gaussian window 11, sigma 1.5,
/// K1 = 0.01, K2 = 0.03, peak 1). The window shrinks for images smaller than 11 pixels.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    check_same(a, b)?;
    let [bs, cs, h, w] = a.shape();
    let g = gaussian_window(SSIM_WINDOW.min(h).min(w));
    let (c1, c2) = ((0.01f64).powi(2), (0.03f64).powi(2));
    let mut total = 0.0;
    let mut count = 0usize;
    for bi in 0..bs {
        for ci in 0..cs {
            let x: Vec<f64> = a.plane(bi, ci).iter().map(|&v| clipped(v, 1.0)).collect();
            let y: Vec<f64> = b.plane(bi, ci).iter().map(|&v| clipped(v, 1.0)).collect();
            let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
            let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
            let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
            let (mx, _, _) = filter_valid(&x, h, w, &g);
            let (my, _, _) = filter_valid(&y, h, w, &g);
            let (sxx, _, _) = filter_valid(&xx, h, w, &g);
            let (syy, _, _) = filter_valid(&yy, h, w, &g);
            let (sxy, _, _) = filter_valid(&xy, h, w, &g);
            for i in 0..mx.len() {
                let (ux, uy) = (mx[i], my[i]);
                let vx = sxx[i] - ux * ux;
                let vy = syy[i] - uy * uy;
                let cxy = sxy[i] - ux * uy;
                total += ((2.0 * ux * uy + c1) * (2.0 * cxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CostPart {
    Head,
    Body,
    /// Full-precision conv closing the body before the global residual.
    BodyOut,
    Upsampling,
    Tail,
}

impl CostPart {
    pub fn name(self) -> &'static str {
        match self {
            CostPart::Head => "head",
            CostPart::Body => "body",
            CostPart::BodyOut => "body_out",
            CostPart::Upsampling => "upsampling",
            CostPart::Tail => "tail",
        }
    }
}

/// Exact cost of one network part: one op per multiply-accumulate, weights only.
#[derive(Clone, Debug, PartialEq)]
pub struct PartCost {
    pub part: CostPart,
    pub ops: u128,
    pub params: u128,
    /// Whether the network binarizes this part.
    pub binarized: bool,
    /// PSNR measured with only this part binarized, when known.
    pub psnr_b: Option<f64>,
}

impl PartCost {
    pub fn ops_f(&self) -> Ratio<u128> {
        Ratio::from_integer(self.ops)
    }

    /// OPs if this part were binarized.
    pub fn ops_b(&self) -> Ratio<u128> {
        Ratio::new(self.ops, 64)
    }

    pub fn params_f(&self) -> Ratio<u128> {
        Ratio::from_integer(self.params)
    }

    pub fn params_b(&self) -> Ratio<u128> {
        Ratio::new(self.params, 32)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CostReport {
    pub width: usize,
    pub height: usize,
    pub parts: Vec<PartCost>,
    /// PSNR of the full-precision network, when known.
    pub psnr_f: Option<f64>,
}

fn conv_ops(h: usize, w: usize, cin: usize, cout: usize, k: usize) -> u128 {
    (h * w) as u128 * (cin * cout * k * k) as u128
}

/// Costs at LQ resolution `width x height`; each conv is counted at its own output resolution.
pub fn count_costs(spec: &NetworkSpec, width: usize, height: usize) -> Result<CostReport> {
    spec.validate()?;
    let (ic, c, k) = (spec.image_channels, spec.channels, 3);
    let (h, w) = (height, width);
    let r = spec.scale;
    let conv_params = |cin: usize, cout: usize| (cin * cout * k * k) as u128;
    let ups_ops: u128 = (0..spec.upsampling_stages())
        .map(|s| conv_ops(h << s, w << s, c, 4 * c, k))
        .sum();
    let part = |part, ops, params, binarized| PartCost {
        part,
        ops,
        params,
        binarized,
        psnr_b: None,
    };
    let parts = vec![
        part(CostPart::Head, conv_ops(h, w, ic, c, k), conv_params(ic, c), spec.binarize.head),
        part(
            CostPart::Body,
            spec.body_blocks as u128 * conv_ops(h, w, c, c, k),
            spec.body_blocks as u128 * conv_params(c, c),
            spec.binarize.body,
        ),
        part(CostPart::BodyOut, conv_ops(h, w, c, c, k), conv_params(c, c), false),
        part(
            CostPart::Upsampling,
            ups_ops,
            spec.upsampling_stages() as u128 * conv_params(c, 4 * c),
            spec.binarize.upsampling,
        ),
        part(CostPart::Tail, conv_ops(h * r, w * r, c, ic, k), conv_params(c, ic), spec.binarize.tail),
    ];
    Ok(CostReport {
        width,
        height,
        parts,
        psnr_f: None,
    })
}

/// Round half-up to `digits` decimals, as an integer count of `10^-digits`.
fn round_half_up(x: Ratio<u128>, digits: u32) -> u128 {
    let s = Ratio::from_integer(10u128.pow(digits));
    (x * s + Ratio::new(1, 2)).floor().to_integer()
}

/// Two-decimal display of a non-negative exact value, rounded half-up to three
/// decimals first and then to two (the convention the reference table follows).
pub fn display_2dp(x: Ratio<u128>) -> String {
    let thousandths = round_half_up(x, 3);
    let hundredths = (thousandths + 5) / 10;
    format!("{}.{:02}", hundredths / 100, hundredths % 100)
}

/// [`display_2dp`] for a float: half-up (away from zero) to three decimals, then to two.
pub fn display_2dp_f64(x: f64) -> String {
    let thousandths = libm::round(x.abs() * 1000.0) as u128;
    let hundredths = (thousandths + 5) / 10;
    let sign = if x < 0.0 && hundredths > 0 { "-" } else { "" };
    format!("{sign}{}.{:02}", hundredths / 100, hundredths % 100)
}

/// Millions / thousands as exact rationals.
pub fn in_millions(x: Ratio<u128>) -> Ratio<u128> {
    x / 1_000_000
}

pub fn in_thousands(x: Ratio<u128>) -> Ratio<u128> {
    x / 1_000
}

/// `(V_C, V_P)`: PSNR drop per unit of saved operations and per unit of saved parameters.
pub fn benefit(psnr_f: f64, psnr_b: f64, cost_f: (f64, f64), cost_b: (f64, f64)) -> Result<(f64, f64)> {
    let d_ops = cost_f.0 - cost_b.0;
    let d_params = cost_f.1 - cost_b.1;
    if d_ops == 0.0 {
        return Err(Error::UndefinedBenefit("operations"));
    }
    if d_params == 0.0 {
        return Err(Error::UndefinedBenefit("parameters"));
    }
    let d = psnr_f - psnr_b;
    Ok((d / d_ops, d / d_params))
}

fn displayed(x: Ratio<u128>) -> f64 {
    display_2dp(x).parse().unwrap_or(f64::NAN)
}

impl CostReport {
    pub fn part(&self, p: CostPart) -> Option<&PartCost> {
        self.parts.iter().find(|c| c.part == p)
    }

    pub fn total_ops_f(&self) -> Ratio<u128> {
        self.parts.iter().map(PartCost::ops_f).sum()
    }

    pub fn total_params_f(&self) -> Ratio<u128> {
        self.parts.iter().map(PartCost::params_f).sum()
    }

    /// OPs of the configured network, with its binarized parts at 1/64.
    pub fn total_ops(&self) -> Ratio<u128> {
        self.parts
            .iter()
            .map(|p| if p.binarized { p.ops_b() } else { p.ops_f() })
            .sum()
    }

    pub fn total_params(&self) -> Ratio<u128> {
        self.parts
            .iter()
            .map(|p| if p.binarized { p.params_b() } else { p.params_f() })
            .sum()
    }

    /// `(V_C, V_P)` for one part, computed from the displayed (two-decimal) M-ops and K-params.
    pub fn part_benefit(&self, p: &PartCost) -> Option<Result<(f64, f64)>> {
        let (f, b) = (self.psnr_f?, p.psnr_b?);
        Some(benefit(
            f,
            b,
            (displayed(in_millions(p.ops_f())), displayed(in_thousands(p.params_f()))),
            (displayed(in_millions(p.ops_b())), displayed(in_thousands(p.params_b()))),
        ))
    }

    /// Share of the upsampling part among head, body, upsampling and tail OPs, as a percentage.
    pub fn upsampling_share(&self, upsampling_mops: f64) -> f64 {
        let others: f64 = self
            .parts
            .iter()
            .filter(|p| matches!(p.part, CostPart::Head | CostPart::Body | CostPart::Tail))
            .map(|p| displayed(in_millions(p.ops_f())))
            .sum();
        100.0 * upsampling_mops / (others + upsampling_mops)
    }

    fn rows(&self) -> Vec<(String, Vec<String>)> {
        let col = |f: &dyn Fn(&PartCost) -> String| self.parts.iter().map(f).collect::<Vec<_>>();
        let mut rows = vec![
            ("OPs_f (M)".into(), col(&|p| display_2dp(in_millions(p.ops_f())))),
            ("OPs_b (M)".into(), col(&|p| display_2dp(in_millions(p.ops_b())))),
            ("Params_f (K)".into(), col(&|p| display_2dp(in_thousands(p.params_f())))),
            ("Params_b (K)".into(), col(&|p| display_2dp(in_thousands(p.params_b())))),
            ("binarized".into(), col(&|p| format!("{}", p.binarized))),
        ];
        if self.psnr_f.is_some() {
            rows.push((
                "PSNR_b (dB)".into(),
                col(&|p| p.psnr_b.map_or("-".into(), |v| format!("{v:.2}"))),
            ));
            let bf = |i: usize| {
                move |p: &PartCost| match self.part_benefit(p) {
                    Some(Ok(v)) => {
                        let (x, s) = if i == 0 { (v.0, 1e6) } else { (v.1, 1e3) };
                        display_2dp_f64(x * s)
                    }
                    _ => "-".into(),
                }
            };
            rows.push(("V_C (1e-6)".into(), col(&bf(0))));
            rows.push(("V_P (1e-3)".into(), col(&bf(1))));
        }
        rows
    }

    /// Aligned text table, one column per part plus notes.
    pub fn to_text(&self) -> String {
        let mut header = vec![String::new()];
        header.extend(self.parts.iter().map(|p| String::from(p.part.name())));
        header.push("total".into());
        let mut table = vec![header];
        for (i, (name, mut cells)) in self.rows().into_iter().enumerate() {
            cells.insert(0, name);
            cells.push(match i {
                0 => display_2dp(in_millions(self.total_ops_f())),
                1 => display_2dp(in_millions(self.total_ops())),
                2 => display_2dp(in_thousands(self.total_params_f())),
                3 => display_2dp(in_thousands(self.total_params())),
                _ => String::new(),
            });
            table.push(cells);
        }
        let widths: Vec<usize> = (0..table[0].len())
            .map(|c| table.iter().map(|r| r[c].len()).max().unwrap_or(0))
            .collect();
        let mut out = format!("LQ resolution {}x{}\n", self.width, self.height);
        for row in &table {
            let line: Vec<String> = row
                .iter()
                .enumerate()
                .map(|(c, s)| if c == 0 { format!("{s:<w$}", w = widths[c]) } else { format!("{s:>w$}", w = widths[c]) })
                .collect();
            let _ = writeln!(out, "{}", line.join("  ").trim_end());
        }
        let _ = writeln!(out, "total: configured network (binarized parts at 1/64 ops, 1/32 params)");
        if let Some(up) = self.part(CostPart::Upsampling).filter(|p| p.ops > 0) {
            let ours = displayed(in_millions(up.ops_f()));
            let _ = writeln!(
                out,
                "note: upsampling OPs paper convention unresolved (reference table {REFERENCE_UPSAMPLING_MOPS:.2} M, this count {ours:.2} M)"
            );
            let _ = writeln!(
                out,
                "note: upsampling share of head+body+upsampling+tail OPs: {:.1}% (this count), {:.1}% (reference figure)",
                self.upsampling_share(ours),
                self.upsampling_share(REFERENCE_UPSAMPLING_MOPS)
            );
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("part,ops_f_m,ops_b_m,params_f_k,params_b_k,binarized,psnr_b,v_c,v_p\n");
        for p in &self.parts {
            let (vc, vp) = match self.part_benefit(p) {
                Some(Ok((c, v))) => (format!("{c:e}"), format!("{v:e}")),
                _ => (String::new(), String::new()),
            };
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                p.part.name(),
                display_2dp(in_millions(p.ops_f())),
                display_2dp(in_millions(p.ops_b())),
                display_2dp(in_thousands(p.params_f())),
                display_2dp(in_thousands(p.params_b())),
                p.binarized,
                p.psnr_b.map_or(String::new(), |v| format!("{v}")),
                vc,
                vp
            );
        }
        out
    }
}
