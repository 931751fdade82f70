//! Subcommand implementations. Each returns its report; printing is left to the caller.

use std::fmt::Write;
use std::path::{Path, PathBuf};

use bbcu_core::bbcu::Pass;
use bbcu_core::metrics::{count_costs, psnr, psnr_y, ssim, CostPart, CostReport};
use bbcu_core::net::{NetworkSpec, RestorationNet};
use bbcu_core::train::{input_psnr, make_validation, train_loop, trace_csv, Degradation, Pair, TraceRow, TrainData};
use bbcu_core::Error;
use sha2::{Digest, Sha256};

use crate::bench::{self, ThroughputReport};
use crate::config::{BenchConfig, RunConfig};
use crate::error::{CliError, CliResult};
use crate::{imageio, model};

pub const MODEL_FILE: &str = "model.bbcu";
pub const TRACE_FILE: &str = "trace.csv";
pub const MANIFEST_FILE: &str = "manifest.txt";
pub const NAN_DUMP_FILE: &str = "nonfinite_dump.txt";

fn hex(bytes: &[u8]) -> String {
    bytes.iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutputs {
    pub model: PathBuf,
    pub trace: PathBuf,
    pub manifest: PathBuf,
    pub rows: Vec<TraceRow>,
    pub input_psnr: f64,
}

fn require_dir(dir: Option<&PathBuf>, key: &str) -> CliResult<PathBuf> {
    let d = dir.ok_or_else(|| CliError::Input(format!("[data] {key} is not set")))?;
    if !d.is_dir() {
        return Err(CliError::Input(format!("{key} {} is not a directory", d.display())));
    }
    Ok(d.clone())
}

fn images(dir: &Path) -> CliResult<Vec<(String, bbcu_core::Tensor)>> {
    imageio::load_dir(dir)
}

/// Training and validation sets described by a run configuration.
pub fn load_data(cfg: &RunConfig) -> CliResult<(TrainData, Vec<Pair>)> {
    let paired = matches!(cfg.train.degradation, Degradation::Paired);
    let train_dir = require_dir(cfg.data.train_dir.as_ref(), "train_dir")?;
    let mut hq = images(&train_dir)?;
    let mut lq = if paired {
        let d = require_dir(cfg.data.train_lq_dir.as_ref(), "train_lq_dir")?;
        let lq = images(&d)?;
        if lq.iter().map(|p| &p.0).ne(hq.iter().map(|p| &p.0)) {
            return Err(CliError::Input("train_dir and train_lq_dir hold different file names".into()));
        }
        lq
    } else {
        Vec::new()
    };
    let val = match &cfg.data.val_dir {
        Some(d) => {
            let vhq = images(&require_dir(Some(d), "val_dir")?)?;
            if paired {
                let vlq = images(&require_dir(cfg.data.val_lq_dir.as_ref(), "val_lq_dir")?)?;
                vlq.into_iter().zip(vhq).map(|(l, h)| Pair { lq: l.1, hq: h.1 }).collect()
            } else {
                let h: Vec<_> = vhq.into_iter().map(|p| p.1).collect();
                make_validation(&h, &cfg.train.degradation, cfg.train.seed)?
            }
        }
        None => {
            let n = cfg.data.val_count;
            if n >= hq.len() {
                return Err(CliError::Input(format!(
                    "val_count {n} leaves no training images out of {}",
                    hq.len()
                )));
            }
            let vhq = hq.split_off(hq.len() - n);
            if paired {
                let vlq = lq.split_off(lq.len() - n);
                vlq.into_iter().zip(vhq).map(|(l, h)| Pair { lq: l.1, hq: h.1 }).collect()
            } else {
                let h: Vec<_> = vhq.into_iter().map(|p| p.1).collect();
                make_validation(&h, &cfg.train.degradation, cfg.train.seed)?
            }
        }
    };
    Ok((
        TrainData {
            hq: hq.into_iter().map(|p| p.1).collect(),
            lq: lq.into_iter().map(|p| p.1).collect(),
        },
        val,
    ))
}

/// Train from a configuration file, writing the model, trace and manifest.
pub fn cmd_train(config_path: &Path, on_row: &mut dyn FnMut(&TraceRow)) -> CliResult<TrainOutputs> {
    let text = std::fs::read(config_path).map_err(|e| CliError::io(config_path, e))?;
    let cfg = RunConfig::load(config_path)?;
    let (data, val) = load_data(&cfg)?;
    let out = &cfg.output_dir;
    std::fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    let mut net = RestorationNet::build(&cfg.network, cfg.train.seed)?;
    let rows = match train_loop(&mut net, &data, &val, &cfg.train, |r| on_row(r)) {
        Ok(rows) => rows,
        Err(Error::NonFinite { step, norms }) => {
            let dump = out.join(NAN_DUMP_FILE);
            std::fs::write(&dump, format!("step={step}\n{norms}")).map_err(|e| CliError::io(&dump, e))?;
            return Err(Error::NonFinite { step, norms }.into());
        }
        Err(e) => return Err(e.into()),
    };
    let model_path = out.join(MODEL_FILE);
    let bytes = model::save(&model_path, &net)?;
    let trace_path = out.join(TRACE_FILE);
    std::fs::write(&trace_path, trace_csv(&rows)).map_err(|e| CliError::io(&trace_path, e))?;
    let input = if val.is_empty() { f64::NAN } else { input_psnr(&val)? };
    let manifest = format!(
        "format_version={}\nseed={}\nconfig_sha256={}\nmodel_sha256={}\nmodel_crc32={:08x}\nsteps={}\n\
         train_images={}\nval_images={}\ninput_val_psnr={:.6}\nfinal_val_psnr={:.6}\n",
        model::VERSION,
        cfg.train.seed,
        sha256_hex(&text),
        sha256_hex(&bytes),
        crc32fast::hash(&bytes),
        cfg.train.steps,
        data.hq.len(),
        val.len(),
        input,
        rows.last().map_or(f64::NAN, |r| r.val_psnr),
    );
    let manifest_path = out.join(MANIFEST_FILE);
    std::fs::write(&manifest_path, manifest).map_err(|e| CliError::io(&manifest_path, e))?;
    Ok(TrainOutputs {
        model: model_path,
        trace: trace_path,
        manifest: manifest_path,
        rows,
        input_psnr: input,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub name: String,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub luma: bool,
}

impl EvalReport {
    pub fn mean_psnr(&self) -> f64 {
        self.rows.iter().map(|r| r.psnr).sum::<f64>() / self.rows.len() as f64
    }

    pub fn mean_ssim(&self) -> f64 {
        self.rows.iter().map(|r| r.ssim).sum::<f64>() / self.rows.len() as f64
    }

    pub fn to_text(&self) -> String {
        let w = self.rows.iter().map(|r| r.name.len()).max().unwrap_or(4).max(4);
        let label = if self.luma { "psnr_y" } else { "psnr" };
        let mut out = format!("{:<w$}  {label:>8}  {:>7}\n", "image", "ssim");
        for r in &self.rows {
            let _ = writeln!(out, "{:<w$}  {:>8.3}  {:>7.4}", r.name, r.psnr, r.ssim);
        }
        let _ = writeln!(out, "{:<w$}  {:>8.3}  {:>7.4}", "mean", self.mean_psnr(), self.mean_ssim());
        out
    }
}

/// Restore every image in `lq_dir` and compare with the same-named file in `hq_dir`.
pub fn eval_net(
    net: &mut RestorationNet,
    lq_dir: &Path,
    hq_dir: &Path,
    luma: bool,
    save_dir: Option<&Path>,
) -> CliResult<EvalReport> {
    if let Some(d) = save_dir {
        std::fs::create_dir_all(d).map_err(|e| CliError::io(d, e))?;
    }
    let mut rows = Vec::new();
    for lq_path in imageio::png_files(lq_dir)? {
        let name = lq_path.file_name().unwrap_or_default().to_string_lossy().into_owned();
        let hq_path = hq_dir.join(&name);
        if !hq_path.is_file() {
            return Err(CliError::Input(format!("no target {} for {name}", hq_path.display())));
        }
        let lq = imageio::load_png(&lq_path)?;
        let hq = imageio::load_png(&hq_path)?;
        let y = net.forward(&lq, Pass::INFER)?;
        if y.shape() != hq.shape() {
            return Err(CliError::Input(format!(
                "{name}: output {:?} does not match target {:?}",
                y.shape(),
                hq.shape()
            )));
        }
        if let Some(d) = save_dir {
            imageio::save_png(&d.join(&name), &y)?;
        }
        let y = y.map(|v| v.clamp(0.0, 1.0));
        rows.push(EvalRow {
            name,
            psnr: if luma { psnr_y(&y, &hq)? } else { psnr(&y, &hq, 1.0)? },
            ssim: ssim(&y, &hq)?,
        });
    }
    Ok(EvalReport { rows, luma })
}

pub fn cmd_eval(
    model_path: &Path,
    lq_dir: &Path,
    hq_dir: &Path,
    luma: bool,
    save_dir: Option<&Path>,
) -> CliResult<EvalReport> {
    let mut net = model::load(model_path)?;
    eval_net(&mut net, lq_dir, hq_dir, luma, save_dir)
}

pub fn cmd_bench(config: Option<&Path>, overrides: BenchConfig) -> CliResult<ThroughputReport> {
    let cfg = match config {
        Some(p) => RunConfig::load(p)?.bench,
        None => overrides,
    };
    bench::run(&cfg, 0)
}

/// Measured PSNRs to attach to a cost report.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BenefitInputs {
    pub psnr_f: Option<f64>,
    pub psnr_b: Vec<(CostPart, f64)>,
}

pub fn parse_part(name: &str) -> Option<CostPart> {
    [CostPart::Head, CostPart::Body, CostPart::Upsampling, CostPart::Tail]
        .into_iter()
        .find(|p| p.name() == name)
}

/// `head=28.58,body=28.38` style list.
pub fn parse_part_psnrs(text: &str) -> CliResult<Vec<(CostPart, f64)>> {
    text.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|item| {
            let (k, v) = item
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("expected part=psnr, got {item:?}")))?;
            let part = parse_part(k.trim()).ok_or_else(|| CliError::Usage(format!("unknown part {k:?}")))?;
            let v = v
                .trim()
                .parse()
                .map_err(|_| CliError::Usage(format!("bad PSNR value {v:?}")))?;
            Ok((part, v))
        })
        .collect()
}

/// Cost report for a configured network, or the reference x4 network when no config is given.
pub fn cmd_account(config: Option<&Path>, benefit: &BenefitInputs) -> CliResult<CostReport> {
    let (spec, (w, h)) = match config {
        Some(p) => {
            let c = RunConfig::load(p)?;
            (c.network, c.account)
        }
        None => (NetworkSpec::reference_sr(), (320, 180)),
    };
    let mut report = count_costs(&spec, w, h)?;
    report.psnr_f = benefit.psnr_f;
    for &(part, v) in &benefit.psnr_b {
        if let Some(p) = report.parts.iter_mut().find(|p| p.part == part) {
            p.psnr_b = Some(v);
        }
    }
    Ok(report)
}
