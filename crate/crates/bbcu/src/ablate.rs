//! Desk-scale ablation suites. Each cell trains one network per seed on
//! synthetic images and reports the median validation PSNR with its spread
//! (half the range across seeds). No ordering between cells is asserted.

use std::fmt::Write;

use bbcu_core::bbcu::{value_range_diagnostic, Variant};
use bbcu_core::metrics::count_costs;
use bbcu_core::net::{optimal_k, NetworkSpec, Parts, RestorationNet, Task};
use bbcu_core::train::{make_validation, synthetic_image, train_loop, Degradation, Pair, TrainConfig, TrainData};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{CliError, CliResult};

pub const SUITES: [&str; 6] = ["variants", "residual-count", "breakpoint", "k-sweep", "parts", "value-range"];
pub const K_SWEEP: [f64; 5] = [1.0, 32.0, 65.0, 130.0, 260.0];
pub const K_SWEEP_WIDTHS: [usize; 3] = [16, 32, 64];

#[derive(Clone, Debug, PartialEq)]
pub struct AblationOptions {
    pub steps: usize,
    pub seeds: usize,
    pub patch: usize,
    pub batch: usize,
}

impl Default for AblationOptions {
    fn default() -> Self {
        AblationOptions {
            steps: 300,
            seeds: 3,
            patch: 32,
            batch: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Cell {
    pub label: String,
    pub values: Vec<f64>,
}

impl Cell {
    pub fn median(&self) -> f64 {
        median(&self.values)
    }

    pub fn spread(&self) -> f64 {
        let lo = self.values.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = self.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        (hi - lo) / 2.0
    }
}

pub fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        s[n / 2]
    } else {
        (s[n / 2 - 1] + s[n / 2]) / 2.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationTable {
    pub suite: String,
    pub metric: String,
    pub cells: Vec<Cell>,
    /// Extra text printed under the table.
    pub notes: String,
}

impl AblationTable {
    pub fn to_text(&self) -> String {
        let w = self.cells.iter().map(|c| c.label.len()).max().unwrap_or(4).max(4);
        let mut out = format!("suite={} metric={}\n", self.suite, self.metric);
        let _ = writeln!(out, "{:<w$}  {:>9}  {:>7}  values", "cell", "median", "spread");
        for c in &self.cells {
            let vals: Vec<String> = c.values.iter().map(|v| format!("{v:.3}")).collect();
            let _ = writeln!(
                out,
                "{:<w$}  {:>9.3}  {:>7.3}  {}",
                c.label,
                c.median(),
                c.spread(),
                vals.join(" ")
            );
        }
        out.push_str(&self.notes);
        out
    }

    pub fn cell(&self, label: &str) -> Option<&Cell> {
        self.cells.iter().find(|c| c.label == label)
    }
}

/// Fixed synthetic training and validation sets.
pub fn desk_data(degradation: &Degradation) -> CliResult<(TrainData, Vec<Pair>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let hq: Vec<_> = (0..16).map(|_| synthetic_image(3, 64, 64, &mut rng)).collect();
    let val_hq: Vec<_> = (0..4).map(|_| synthetic_image(3, 48, 48, &mut rng)).collect();
    let val = make_validation(&val_hq, degradation, 1)?;
    Ok((TrainData { hq, lq: Vec::new() }, val))
}

/// Train one network and return its final validation PSNR.
pub fn train_cell(
    spec: &NetworkSpec,
    degradation: &Degradation,
    data: &TrainData,
    val: &[Pair],
    opts: &AblationOptions,
    seed: u64,
) -> CliResult<f64> {
    let mut net = RestorationNet::build(spec, seed)?;
    let cfg = TrainConfig {
        batch: opts.batch,
        patch: opts.patch,
        steps: opts.steps,
        seed,
        log_every: opts.steps.max(1),
        degradation: degradation.clone(),
        ..TrainConfig::default()
    };
    let trace = train_loop(&mut net, data, val, &cfg, |_| {})?;
    Ok(trace.last().map_or(f64::NAN, |r| r.val_psnr))
}

fn run_cells(
    cells: Vec<(String, NetworkSpec)>,
    degradation: &Degradation,
    opts: &AblationOptions,
    progress: &mut dyn FnMut(&str),
) -> CliResult<Vec<Cell>> {
    let (data, val) = desk_data(degradation)?;
    cells
        .into_iter()
        .map(|(label, spec)| {
            let values = (0..opts.seeds as u64)
                .map(|s| {
                    let v = train_cell(&spec, degradation, &data, &val, opts, s)?;
                    progress(&format!("{label} seed={s} psnr={v:.3}"));
                    Ok(v)
                })
                .collect::<CliResult<Vec<f64>>>()?;
            Ok(Cell { label, values })
        })
        .collect()
}

fn with_variant(mut spec: NetworkSpec, v: Variant) -> NetworkSpec {
    spec.variant = v;
    spec.k = if v.uses_amplification() { optimal_k(spec.channels) } else { 1.0 };
    spec
}

fn parts_base() -> NetworkSpec {
    let mut sr = NetworkSpec::toy_denoiser();
    sr.task = Task::SuperResolution;
    sr.scale = 2;
    sr
}

/// Labelled network specs and degradation for a training suite.
pub fn training_cells(suite: &str) -> Option<(Vec<(String, NetworkSpec)>, Degradation)> {
    let base = NetworkSpec::toy_denoiser();
    let awgn = Degradation::awgn_8bit(25.0);
    let cells = match suite {
        "variants" => Variant::ALL
            .into_iter()
            .map(|v| (format!("{v:?}"), with_variant(base.clone(), v)))
            .collect(),
        "residual-count" => [1, 2, 3, 6]
            .into_iter()
            .map(|u| {
                let mut s = base.clone();
                s.convs_per_unit = Some(u);
                (format!("convs_per_residual={u}"), s)
            })
            .collect(),
        "breakpoint" => {
            let mut cells = vec![("none".to_string(), base.clone())];
            for b in 0..base.unit_count() {
                let mut s = base.clone();
                s.breakpoints = vec![b];
                cells.push((format!("removed_at={b}"), s));
            }
            cells
        }
        "k-sweep" => {
            let mut cells = Vec::new();
            for &width in &K_SWEEP_WIDTHS {
                for &k in &K_SWEEP {
                    let mut s = base.clone();
                    s.channels = width;
                    s.k = k;
                    cells.push((format!("channels={width} k={k}"), s));
                }
            }
            cells
        }
        "parts" => {
            let sr = parts_base();
            let mut cells = vec![("full_precision".to_string(), with_parts(&sr, Parts::NONE))];
            for (name, p) in single_parts() {
                cells.push((name.to_string(), with_parts(&sr, p)));
            }
            return Some((cells, Degradation::BicubicDown { scale: 2 }));
        }
        _ => return None,
    };
    Some((cells, awgn))
}

pub fn run(suite: &str, opts: &AblationOptions, progress: &mut dyn FnMut(&str)) -> CliResult<AblationTable> {
    if opts.seeds < 3 {
        return Err(CliError::Usage("ablation needs at least 3 seeds".into()));
    }
    if suite == "value-range" {
        let mut cells = Vec::new();
        for &width in &K_SWEEP_WIDTHS {
            for &k in &K_SWEEP {
                let values = (0..opts.seeds as u64)
                    .map(|s| {
                        let mut rng = ChaCha8Rng::seed_from_u64(s);
                        let r = value_range_diagnostic(width, k, 16, 32, &mut rng)?;
                        Ok(r.conv_mean_abs / r.residual_mean_abs)
                    })
                    .collect::<CliResult<Vec<f64>>>()?;
                cells.push(Cell {
                    label: format!("channels={width} k={k}"),
                    values,
                });
            }
        }
        return Ok(AblationTable {
            suite: suite.to_string(),
            metric: "conv_to_residual_mean_abs".into(),
            cells,
            notes: String::new(),
        });
    }
    let (specs, degradation) = training_cells(suite).ok_or_else(|| {
        CliError::Usage(format!(
            "unknown ablation suite {suite:?}; expected one of {}",
            SUITES.join(", ")
        ))
    })?;
    let cells = run_cells(specs, &degradation, opts, progress)?;
    let notes = match suite {
        "k-sweep" => K_SWEEP_WIDTHS
            .iter()
            .map(|&w| format!("balanced k for channels={w}: {:.3}\n", optimal_k(w)))
            .collect(),
        "parts" => {
            let mut report = count_costs(&parts_base(), 320, 180)?;
            report.psnr_f = Some(cells[0].median());
            let binarizable = report.parts.iter_mut().filter(|p| p.part.name() != "body_out");
            for (part, cell) in binarizable.zip(&cells[1..]) {
                part.psnr_b = Some(cell.median());
            }
            report.to_text()
        }
        _ => String::new(),
    };
    Ok(AblationTable {
        suite: suite.to_string(),
        metric: "val_psnr_db".into(),
        cells,
        notes,
    })
}

fn single_parts() -> [(&'static str, Parts); 4] {
    let only = |f: fn(&mut Parts)| {
        let mut p = Parts::NONE;
        f(&mut p);
        p
    };
    [
        ("head", only(|p| p.head = true)),
        ("body", only(|p| p.body = true)),
        ("upsampling", only(|p| p.upsampling = true)),
        ("tail", only(|p| p.tail = true)),
    ]
}

fn with_parts(spec: &NetworkSpec, p: Parts) -> NetworkSpec {
    let mut s = spec.clone();
    s.binarize = p;
    s
}
