//! Run configuration files.
//!
//! The format is line oriented. `#` starts a comment, `[name]` opens a
//! section, and every other non-blank line is `key = value`. Unknown
//! sections or keys, repeated keys and malformed values are errors that
//! carry the offending line number. Relative paths resolve against the
//! directory containing the file.
//!
//! ```text
//! [network]
//! task = denoise            # sr | denoise | deblock
//! scale = 1                 # 1 | 2 | 4
//! image_channels = 3
//! channels = 12
//! body_blocks = 6
//! binarize = body           # none | all | comma list of head, body, upsampling, tail
//! variant = V4              # V1 | V2 | V3 | V4
//! k = auto                  # positive number, or auto for 130 * channels / 64
//! convs_per_unit = 1
//! breakpoints =             # comma list of body unit indices
//! image_residual = true
//! scale_scope = layer       # layer | filter
//!
//! [train]
//! lr = 1e-4
//! batch = 4
//! patch = 32
//! steps = 5000
//! seed = 0
//! halve_at = 2000, 4000
//! log_every = 100
//! degradation = awgn        # awgn | bicubic_down | paired
//! sigma = 25                # awgn level on the 8-bit scale
//!
//! [data]
//! train_dir = data/toy
//! train_lq_dir =            # paired inputs, same file names
//! val_dir =                 # defaults to holding out the last val_count training images
//! val_lq_dir =
//! val_count = 2
//!
//! [output]
//! dir = runs/toy
//!
//! [account]
//! width = 320
//! height = 180
//!
//! [bench]
//! channels = 64
//! height = 180
//! width = 320
//! repeats = 3
//! ```

use std::path::{Path, PathBuf};
use std::str::FromStr;

use bbcu_core::bbcu::Variant;
use bbcu_core::binarize::ScaleScope;
use bbcu_core::net::{optimal_k, NetworkSpec, Parts, Task};
use bbcu_core::train::{Degradation, TrainConfig};

use crate::error::{CliError, CliResult};

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub train_dir: Option<PathBuf>,
    pub train_lq_dir: Option<PathBuf>,
    pub val_dir: Option<PathBuf>,
    pub val_lq_dir: Option<PathBuf>,
    pub val_count: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchConfig {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub repeats: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            channels: 64,
            height: 180,
            width: 320,
            repeats: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub network: NetworkSpec,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub output_dir: PathBuf,
    pub account: (usize, usize),
    pub bench: BenchConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        parse(&text, &path.display().to_string(), base)
    }
}

struct Ctx<'a> {
    path: &'a str,
    line: usize,
}

impl Ctx<'_> {
    fn err(&self, message: impl Into<String>) -> CliError {
        CliError::Config {
            path: self.path.to_string(),
            line: self.line,
            message: message.into(),
        }
    }

    fn num<T: FromStr>(&self, key: &str, v: &str) -> CliResult<T> {
        v.parse()
            .map_err(|_| self.err(format!("{key}: cannot parse {v:?} as a number")))
    }

    fn list<T: FromStr>(&self, key: &str, v: &str) -> CliResult<Vec<T>> {
        v.split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| self.num(key, s))
            .collect()
    }

    fn boolean(&self, key: &str, v: &str) -> CliResult<bool> {
        match v {
            "true" | "yes" | "1" => Ok(true),
            "false" | "no" | "0" => Ok(false),
            _ => Err(self.err(format!("{key}: expected true or false, got {v:?}"))),
        }
    }
}

pub fn parse_task(v: &str) -> Option<Task> {
    match v {
        "sr" => Some(Task::SuperResolution),
        "denoise" => Some(Task::Denoise),
        "deblock" => Some(Task::Deblock),
        _ => None,
    }
}

pub fn parse_variant(v: &str) -> Option<Variant> {
    match v.to_ascii_uppercase().as_str() {
        "V1" => Some(Variant::V1),
        "V2" => Some(Variant::V2),
        "V3" => Some(Variant::V3),
        "V4" => Some(Variant::V4),
        _ => None,
    }
}

pub fn parse_parts(v: &str) -> Option<Parts> {
    match v {
        "none" | "" => return Some(Parts::NONE),
        "all" => return Some(Parts::ALL),
        _ => {}
    }
    let mut p = Parts::NONE;
    for item in v.split(',').map(str::trim) {
        match item {
            "head" => p.head = true,
            "body" => p.body = true,
            "upsampling" => p.upsampling = true,
            "tail" => p.tail = true,
            _ => return None,
        }
    }
    Some(p)
}

#[derive(Clone, Copy, PartialEq)]
enum Section {
    Network,
    Train,
    Data,
    Output,
    Account,
    Bench,
}

/// Parse configuration text. `path` labels errors; `base` anchors relative paths.
pub fn parse(text: &str, path: &str, base: &Path) -> CliResult<RunConfig> {
    let mut net = NetworkSpec::toy_denoiser();
    let mut k_auto = true;
    let mut train = TrainConfig::default();
    let mut degradation_kind: Option<(String, usize)> = None;
    let mut sigma = 25.0;
    let mut data = DataConfig {
        train_dir: None,
        train_lq_dir: None,
        val_dir: None,
        val_lq_dir: None,
        val_count: 2,
    };
    let mut output_dir = base.join("run");
    let mut account = (320, 180);
    let mut bench = BenchConfig::default();
    let mut section: Option<Section> = None;
    let mut seen: Vec<(Section, String)> = Vec::new();
    let resolve = |v: &str| (!v.is_empty()).then(|| base.join(v));

    for (i, raw) in text.lines().enumerate() {
        let ctx = Ctx { path, line: i + 1 };
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(name) = line.strip_prefix('[') {
            let name = name
                .strip_suffix(']')
                .ok_or_else(|| ctx.err("section header missing ']'"))?
                .trim();
            section = Some(match name {
                "network" => Section::Network,
                "train" => Section::Train,
                "data" => Section::Data,
                "output" => Section::Output,
                "account" => Section::Account,
                "bench" => Section::Bench,
                _ => return Err(ctx.err(format!("unknown section [{name}]"))),
            });
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| ctx.err("expected `key = value`"))?;
        let (key, v) = (key.trim(), value.trim());
        let sec = section.ok_or_else(|| ctx.err(format!("{key}: key outside any section")))?;
        if seen.iter().any(|(s, k)| *s == sec && k == key) {
            return Err(ctx.err(format!("{key}: repeated key")));
        }
        seen.push((sec, key.to_string()));
        let unknown = || ctx.err(format!("unknown key {key:?}"));
        match sec {
            Section::Network => match key {
                "task" => net.task = parse_task(v).ok_or_else(|| ctx.err(format!("task: unknown task {v:?}")))?,
                "scale" => net.scale = ctx.num(key, v)?,
                "image_channels" => net.image_channels = ctx.num(key, v)?,
                "channels" => net.channels = ctx.num(key, v)?,
                "body_blocks" => net.body_blocks = ctx.num(key, v)?,
                "binarize" => {
                    net.binarize = parse_parts(v).ok_or_else(|| ctx.err(format!("binarize: unknown part list {v:?}")))?
                }
                "variant" => {
                    net.variant = parse_variant(v).ok_or_else(|| ctx.err(format!("variant: unknown variant {v:?}")))?
                }
                "k" => {
                    k_auto = v == "auto";
                    if !k_auto {
                        net.k = ctx.num(key, v)?;
                    }
                }
                "convs_per_unit" => net.convs_per_unit = Some(ctx.num(key, v)?),
                "breakpoints" => net.breakpoints = ctx.list(key, v)?,
                "image_residual" => net.image_residual = ctx.boolean(key, v)?,
                "scale_scope" => {
                    net.scope = match v {
                        "layer" => ScaleScope::Layer,
                        "filter" => ScaleScope::Filter,
                        _ => return Err(ctx.err(format!("scale_scope: expected layer or filter, got {v:?}"))),
                    }
                }
                _ => return Err(unknown()),
            },
            Section::Train => match key {
                "lr" => train.lr = ctx.num(key, v)?,
                "batch" => train.batch = ctx.num(key, v)?,
                "patch" => train.patch = ctx.num(key, v)?,
                "steps" => train.steps = ctx.num(key, v)?,
                "seed" => train.seed = ctx.num(key, v)?,
                "halve_at" => train.halve_at = ctx.list(key, v)?,
                "log_every" => train.log_every = ctx.num(key, v)?,
                "degradation" => degradation_kind = Some((v.to_string(), ctx.line)),
                "sigma" => sigma = ctx.num(key, v)?,
                _ => return Err(unknown()),
            },
            Section::Data => match key {
                "train_dir" => data.train_dir = resolve(v),
                "train_lq_dir" => data.train_lq_dir = resolve(v),
                "val_dir" => data.val_dir = resolve(v),
                "val_lq_dir" => data.val_lq_dir = resolve(v),
                "val_count" => data.val_count = ctx.num(key, v)?,
                _ => return Err(unknown()),
            },
            Section::Output => match key {
                "dir" => output_dir = base.join(v),
                _ => return Err(unknown()),
            },
            Section::Account => match key {
                "width" => account.0 = ctx.num(key, v)?,
                "height" => account.1 = ctx.num(key, v)?,
                _ => return Err(unknown()),
            },
            Section::Bench => match key {
                "channels" => bench.channels = ctx.num(key, v)?,
                "height" => bench.height = ctx.num(key, v)?,
                "width" => bench.width = ctx.num(key, v)?,
                "repeats" => bench.repeats = ctx.num(key, v)?,
                _ => return Err(unknown()),
            },
        }
    }

    if k_auto {
        net.k = if net.variant.uses_amplification() { optimal_k(net.channels) } else { 1.0 };
    }
    train.degradation = match degradation_kind {
        None => match net.task {
            Task::SuperResolution => Degradation::BicubicDown { scale: net.scale },
            Task::Denoise => Degradation::awgn_8bit(sigma),
            Task::Deblock => Degradation::Paired,
        },
        Some((kind, line)) => match kind.as_str() {
            "awgn" => Degradation::awgn_8bit(sigma),
            "bicubic_down" => Degradation::BicubicDown { scale: net.scale },
            "paired" => Degradation::Paired,
            _ => {
                return Err(Ctx { path, line }.err(format!("degradation: unknown kind {kind:?}")));
            }
        },
    };
    net.validate()?;
    train.validate(net.scale)?;
    Ok(RunConfig {
        network: net,
        train,
        data,
        output_dir,
        account,
        bench,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(text: &str) -> CliResult<RunConfig> {
        parse(text, "test.conf", Path::new("/base"))
    }

    #[test]
    fn defaults_are_the_toy_denoiser() {
        let c = p("").unwrap();
        assert_eq!(c.network, NetworkSpec::toy_denoiser());
        assert_eq!(c.train.degradation, Degradation::awgn_8bit(25.0));
        assert_eq!(c.output_dir, Path::new("/base/run"));
    }

    #[test]
    fn full_example() {
        let c = p("# run\n[network]\ntask = sr\nscale = 4\nchannels = 64\nbody_blocks = 32\nbinarize = body, tail\nk = 130\n\
             [train]\nlr = 2e-4\nhalve_at = 10, 20\n[data]\ntrain_dir = imgs\n[output]\ndir = out\n")
            .unwrap();
        assert_eq!(c.network.scale, 4);
        assert!(c.network.binarize.tail && !c.network.binarize.head);
        assert_eq!(c.network.k, 130.0);
        assert_eq!(c.train.halve_at, vec![10, 20]);
        assert_eq!(c.train.degradation, Degradation::BicubicDown { scale: 4 });
        assert_eq!(c.data.train_dir.as_deref(), Some(Path::new("/base/imgs")));
    }

    #[test]
    fn errors_carry_line_numbers() {
        let cases = [
            ("[network]\nchannels = x\n", 2),
            ("[nope]\n", 1),
            ("\n\n[train]\nbogus = 1\n", 4),
            ("k = 1\n", 1),
            ("[train]\nlr = 1\nlr = 2\n", 3),
            ("[network]\nvariant = V9\n", 2),
            ("[train]\ndegradation = jpeg\n", 2),
            ("[network]\nno equals sign\n", 2),
        ];
        for (text, line) in cases {
            match p(text) {
                Err(CliError::Config { line: l, .. }) => assert_eq!(l, line, "{text:?}"),
                other => panic!("{text:?}: {other:?}"),
            }
        }
    }

    #[test]
    fn invalid_spec_is_rejected() {
        let e = p("[network]\nvariant = V1\nk = 24\n").unwrap_err();
        assert!(matches!(e, CliError::Core(bbcu_core::Error::Validation(_))), "{e:?}");
        assert!(p("[network]\nvariant = V1\n").is_ok());
    }
}
