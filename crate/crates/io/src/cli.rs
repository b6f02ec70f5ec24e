//! Command-line surface.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Parser, Subcommand};
use hnfnet::pipeline::{preprocess, run_study, ModelEnsemble, TtaMode};
use hnfnet::Study;

use crate::config::{ConfigFile, Family};
use crate::error::{IoError, IoResult};
use crate::fsutil::write_atomic;
use crate::report::{evaluate_labels, render_csv, size_report, PUBLISHED_DIMS};
use crate::volume::{read_volume, write_volume, Volume};
use crate::weights::{init_weights, load_model, write_weights};

#[derive(Debug, Parser)]
#[command(name = "hnfnet", version, about = "Brain tumor segmentation inference")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// `single:path` or `cascade:path`.
#[derive(Debug, Clone, PartialEq)]
pub struct TaggedWeights {
    pub family: Family,
    pub path: PathBuf,
}

impl FromStr for TaggedWeights {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (tag, path) = s.split_once(':').ok_or("expected single:<path> or cascade:<path>")?;
        let family = match tag {
            "single" => Family::Single,
            "cascade" => Family::Cascade,
            other => return Err(format!("unknown weight tag `{other}`, expected single or cascade")),
        };
        if path.is_empty() {
            return Err("empty weight path".into());
        }
        Ok(Self {
            family,
            path: path.into(),
        })
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Normalise four single-channel scans into one 4-channel volume.
    Preprocess {
        #[arg(long)]
        t1: PathBuf,
        #[arg(long)]
        t1ce: PathBuf,
        #[arg(long)]
        t2: PathBuf,
        #[arg(long)]
        flair: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Segment a raw 4-channel study (T1, T1ce, T2, Flair) into a label map.
    Infer {
        #[arg(long)]
        input: PathBuf,
        /// Repeatable; each member joins its family's ensemble.
        #[arg(long, required = true, value_name = "single|cascade:PATH")]
        weights: Vec<TaggedWeights>,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        no_tta: bool,
        #[arg(long, value_name = "VOXELS")]
        et_threshold_single: Option<usize>,
        #[arg(long, value_name = "VOXELS")]
        et_threshold_cascade: Option<usize>,
    },
    /// Per-region Dice and HD95 of a prediction against ground truth.
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write seeded random weights for a config.
    InitWeights {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Needed when the config has both sections.
        #[arg(long, value_enum)]
        family: Option<Family>,
    },
    /// Parameter and compute counts.
    Inspect {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, num_args = 3, value_names = ["D", "H", "W"])]
        input_dims: Option<Vec<usize>>,
    },
}

fn preprocess_cmd(paths: [&Path; 4], out: &Path) -> IoResult<()> {
    let mut spacing = [1.0; 3];
    let mut scans = Vec::with_capacity(4);
    for (i, p) in paths.iter().enumerate() {
        let v = read_volume(p)?;
        if i == 0 {
            spacing = v.spacing_mm;
        }
        scans.push(v.into_intensity(p)?);
    }
    let scans: [_; 4] = scans.try_into().expect("four scans");
    let study = Study::new(scans)?;
    write_volume(out, &Volume::intensity(preprocess(&study)?, spacing))
}

#[allow(clippy::too_many_arguments)]
fn infer_cmd(
    input: &Path,
    weights: &[TaggedWeights],
    config: &Path,
    out: &Path,
    no_tta: bool,
    et_single: Option<usize>,
    et_cascade: Option<usize>,
) -> IoResult<()> {
    let cfg = ConfigFile::read(config)?;
    let mut pipeline = cfg.pipeline.clone();
    if no_tta {
        pipeline.tta = TtaMode::Off;
    }
    pipeline.et_threshold_single = et_single.unwrap_or(pipeline.et_threshold_single);
    pipeline.et_threshold_cascade = et_cascade.unwrap_or(pipeline.et_threshold_cascade);

    let mut models = Vec::with_capacity(weights.len());
    for w in weights {
        let model_cfg = cfg.model(Some(w.family), config)?;
        models.push((w.family, load_model(&w.path, &model_cfg)?));
    }
    let volume = read_volume(input)?;
    let spacing = volume.spacing_mm;
    let study = Study::from_stacked(&volume.into_intensity(input)?)?;

    let mut ensemble = ModelEnsemble::default();
    for (family, m) in &models {
        match family {
            Family::Single => ensemble.single.push(m.predictor()),
            Family::Cascade => ensemble.cascade.push(m.predictor()),
        }
    }
    let labels = run_study(&study, &ensemble, &pipeline)?;
    write_volume(out, &Volume::labels(labels, spacing))
}

fn evaluate_cmd(pred: &Path, gt: &Path, out: &Path) -> IoResult<String> {
    let p = read_volume(pred)?.into_labels(pred)?;
    let gv = read_volume(gt)?;
    let spacing = gv.spacing_mm;
    let g = gv.into_labels(gt)?;
    let csv = render_csv(&evaluate_labels(&p, &g, spacing)?);
    write_atomic(out, csv.as_bytes())?;
    Ok(csv)
}

fn init_weights_cmd(config: &Path, seed: u64, out: &Path, family: Option<Family>) -> IoResult<String> {
    let cfg = ConfigFile::read(config)?;
    let model = cfg.model(family, config)?;
    let file = init_weights(&model, seed)?;
    write_weights(out, &file)?;
    Ok(format!(
        "{} weights: {} tensors, {} scalars, sha256 {}\n",
        model.family().name(),
        file.manifest.tensors.len(),
        file.scalar_count(),
        file.content_hash()
    ))
}

fn inspect_cmd(config: &Path, dims: Option<&[usize]>) -> IoResult<String> {
    let cfg = ConfigFile::read(config)?;
    let dims = match dims {
        Some(&[d, h, w]) => [d, h, w],
        Some(_) => return Err(IoError::Usage("--input-dims takes exactly three values".into())),
        None => PUBLISHED_DIMS,
    };
    Ok(size_report(&cfg, dims)?.to_string())
}

/// Runs one parsed command, returning text for standard output.
pub fn execute(cli: &Cli) -> IoResult<String> {
    match &cli.command {
        Command::Preprocess {
            t1,
            t1ce,
            t2,
            flair,
            out,
        } => preprocess_cmd([t1, t1ce, t2, flair], out).map(|_| String::new()),
        Command::Infer {
            input,
            weights,
            config,
            out,
            no_tta,
            et_threshold_single,
            et_threshold_cascade,
        } => infer_cmd(input, weights, config, out, *no_tta, *et_threshold_single, *et_threshold_cascade)
            .map(|_| String::new()),
        Command::Evaluate { pred, gt, out } => evaluate_cmd(pred, gt, out),
        Command::InitWeights {
            config,
            seed,
            out,
            family,
        } => init_weights_cmd(config, *seed, out, *family),
        Command::Inspect { config, input_dims } => inspect_cmd(config, input_dims.as_deref()),
    }
}

/// Parses `args`, runs, writes to the given streams and returns the exit code.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = write!(stdout, "{}", e.render());
            return 0;
        }
        Err(e) => {
            let _ = write!(stderr, "{}", e.render());
            let text = e.to_string();
            let summary: Vec<&str> = text.lines().map(str::trim).take_while(|l| !l.is_empty()).collect();
            let message = summary.join(" ").trim_start_matches("error: ").to_string();
            let _ = writeln!(stderr, "{}", IoError::Usage(message).diagnostic());
            return 1;
        }
    };
    match execute(&cli) {
        Ok(text) => {
            let _ = write!(stdout, "{text}");
            0
        }
        Err(e) => {
            let _ = writeln!(stderr, "{}", e.diagnostic());
            e.exit_code()
        }
    }
}
