//! Command-line front end.
//!
//! Tunables come from three layers: a command-line flag wins over a key in
//! the `--config` file, which wins over the built-in default. The config file
//! is flat UTF-8 text, one `key = value` per line, `#` starts a comment.
//!
//! Exit codes: 0 success, 2 usage or validation error, 1 runtime failure.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};

use crate::diffnet::Real;
use crate::evaluation::evaluate_pairs;
use crate::pipeline::{
    generate_backgrounds, run_deeppbm, run_long_video, run_rpca_bs, train_and_run_deeppbm, ChannelRule,
    GenerateMode, MaskSequence, SubtractConfig,
};
use crate::rpca::RpcaParams;
use crate::training::{
    checkpoint_precision, load_checkpoint, save_checkpoint, train_with_progress, EpochRecord, Precision,
    TrainConfig, TrainHistory,
};
use crate::vae::VaeModel;
use crate::video_io::{
    generate_synthetic_scene, load_frame_file, load_frame_sequence, load_mask_dir, write_frame_sequence,
    write_mask_png, write_mask_sequence, BackgroundKind, FrameTensor, SyntheticSceneSpec,
};
use crate::{Error, Result};

/// Keys accepted in a config file.
pub const CONFIG_KEYS: &[&str] = &[
    "latent_dim",
    "epochs",
    "batch_size",
    "lr",
    "seed",
    "shuffle",
    "precision",
    "widths",
    "resize",
    "grayscale",
    "threshold",
    "channel_rule",
    "long_video_fraction",
    "lambda",
    "tol",
    "max_iter",
];

/// Parsed `key = value` config file.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ConfigFile {
    values: BTreeMap<String, String>,
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        let mut values = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::InvalidConfig(format!("line {}: expected key = value", n + 1)))?;
            let key = key.trim();
            if !CONFIG_KEYS.contains(&key) {
                return Err(Error::InvalidConfig(format!("line {}: unknown key {key:?}", n + 1)));
            }
            if values.insert(key.to_string(), value.trim().to_string()).is_some() {
                return Err(Error::InvalidConfig(format!("line {}: duplicate key {key:?}", n + 1)));
            }
        }
        Ok(ConfigFile { values })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        self.values
            .get(key)
            .map(|v| {
                v.parse()
                    .map_err(|e| Error::InvalidConfig(format!("config key {key}: {v:?}: {e}")))
            })
            .transpose()
    }
}

/// `WxH` frame size.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Resize {
    pub width: usize,
    pub height: usize,
}

impl FromStr for Resize {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let (w, h) = s
            .split_once(['x', 'X'])
            .ok_or_else(|| format!("expected WxH, got {s:?}"))?;
        let parse = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("{v:?}: {e}"));
        let (width, height) = (parse(w)?, parse(h)?);
        if width == 0 || height == 0 {
            return Err("size must be positive".into());
        }
        Ok(Resize { width, height })
    }
}

/// Comma-separated channel widths, e.g. `32,64,128`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Widths(pub Vec<usize>);

impl FromStr for Widths {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        s.split(',')
            .map(|v| v.trim().parse::<usize>().map_err(|e| format!("{v:?}: {e}")))
            .collect::<std::result::Result<Vec<_>, _>>()
            .map(Widths)
    }
}

impl FromStr for Precision {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let bits: u32 = s.trim().parse().map_err(|e| format!("{s:?}: {e}"))?;
        Precision::try_from(bits)
    }
}

/// Merged configuration after applying flags over the config file over
/// defaults.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CliConfig {
    pub train: TrainConfig,
    pub subtract: SubtractConfig,
    pub rpca: RpcaParams,
}

fn layer<T: FromStr>(flag: Option<T>, file: &ConfigFile, key: &str, slot: &mut T) -> Result<()>
where
    T::Err: std::fmt::Display,
{
    if let Some(v) = flag.map_or_else(|| file.get(key), |v| Ok(Some(v)))? {
        *slot = v;
    }
    Ok(())
}

#[derive(Parser, Debug)]
#[command(name = "deeppbm", version, about = "Background subtraction with a convolutional VAE")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a background model on a directory of frames.
    Train(TrainCmd),
    /// Write foreground masks (and optionally backgrounds) for a frame directory.
    Subtract(SubtractCmd),
    /// Robust PCA baseline: masks from the low-rank background.
    Rpca(RpcaCmd),
    /// Score masks against ground truth.
    Eval(EvalCmd),
    /// Decode synthetic backgrounds from a trained model.
    Generate(GenerateCmd),
    /// Write a moving-rectangle test scene with ground truth.
    Synth(SynthCmd),
}

#[derive(Args, Debug, Default)]
pub struct TrainFlags {
    #[arg(long)]
    pub latent_dim: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub shuffle: Option<bool>,
    /// Float width, 32 or 64.
    #[arg(long)]
    pub precision: Option<Precision>,
    /// Encoder channel widths, e.g. 32,64,128.
    #[arg(long)]
    pub widths: Option<Widths>,
    #[command(flatten)]
    pub load: LoadFlags,
}

impl TrainFlags {
    fn apply(&self, file: &ConfigFile, cfg: &mut TrainConfig) -> Result<()> {
        layer(self.latent_dim, file, "latent_dim", &mut cfg.latent_dim)?;
        layer(self.epochs, file, "epochs", &mut cfg.epochs)?;
        layer(self.batch_size, file, "batch_size", &mut cfg.batch_size)?;
        layer(self.lr, file, "lr", &mut cfg.learning_rate)?;
        layer(self.seed, file, "seed", &mut cfg.seed)?;
        layer(self.shuffle, file, "shuffle", &mut cfg.shuffle)?;
        layer(self.precision, file, "precision", &mut cfg.precision)?;
        let mut widths = Widths(cfg.architecture.widths.clone());
        layer(self.widths.clone(), file, "widths", &mut widths)?;
        cfg.architecture.widths = widths.0;
        let (resize, grayscale) = self.load.resolve(file)?;
        cfg.resize = resize;
        cfg.grayscale = grayscale;
        cfg.validate()
    }
}

#[derive(Args, Debug, Default)]
pub struct LoadFlags {
    /// Resize frames to WxH on load.
    #[arg(long)]
    pub resize: Option<Resize>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub grayscale: Option<bool>,
}

impl LoadFlags {
    /// `(resize as (height, width), grayscale)`.
    fn resolve(&self, file: &ConfigFile) -> Result<(Option<(usize, usize)>, bool)> {
        let resize = match self.resize {
            Some(r) => Some(r),
            None => file.get::<Resize>("resize")?,
        };
        let mut grayscale = false;
        layer(self.grayscale, file, "grayscale", &mut grayscale)?;
        Ok((resize.map(|r| (r.height, r.width)), grayscale))
    }
}

#[derive(Args, Debug, Default)]
pub struct MaskFlags {
    /// Foreground threshold on the frame/background difference, in (0, 1].
    #[arg(long)]
    pub threshold: Option<f32>,
    /// max-channel or luma.
    #[arg(long)]
    pub channel_rule: Option<ChannelRule>,
}

impl MaskFlags {
    fn apply(&self, file: &ConfigFile, cfg: &mut SubtractConfig) -> Result<()> {
        layer(self.threshold, file, "threshold", &mut cfg.threshold)?;
        layer(self.channel_rule, file, "channel_rule", &mut cfg.channel_rule)?;
        cfg.validate()
    }
}

#[derive(Args, Debug)]
pub struct TrainCmd {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Checkpoint to write.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub train: TrainFlags,
}

#[derive(Args, Debug)]
pub struct SubtractCmd {
    /// Trained checkpoint. Without it a model is trained on the input first.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out_masks: PathBuf,
    #[arg(long)]
    pub out_backgrounds: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Train on this leading fraction of the frames, then subtract on all.
    #[arg(long, conflicts_with = "model")]
    pub long_video: Option<f64>,
    /// Where to save the model trained by this run.
    #[arg(long, conflicts_with = "model")]
    pub save_model: Option<PathBuf>,
    #[command(flatten)]
    pub mask: MaskFlags,
    #[command(flatten)]
    pub train: TrainFlags,
}

#[derive(Args, Debug)]
pub struct RpcaCmd {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out_masks: PathBuf,
    #[arg(long)]
    pub out_backgrounds: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Sparsity weight; 1/sqrt(max(P, N)) when omitted.
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub tol: Option<f64>,
    #[arg(long)]
    pub max_iter: Option<usize>,
    #[command(flatten)]
    pub mask: MaskFlags,
    #[command(flatten)]
    pub load: LoadFlags,
}

#[derive(Args, Debug)]
pub struct EvalCmd {
    #[arg(long)]
    pub masks: PathBuf,
    #[arg(long)]
    pub gt: PathBuf,
    /// JSON report to write.
    #[arg(long)]
    pub report: PathBuf,
}

#[derive(Args, Debug)]
pub struct GenerateCmd {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub num: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Perturb the latent mean of this frame instead of sampling the prior.
    #[arg(long)]
    pub perturb: Option<PathBuf>,
    /// Noise scale for --perturb.
    #[arg(long, default_value_t = 0.1, requires = "perturb")]
    pub scale: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct SynthCmd {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 100)]
    pub frames: usize,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long, default_value_t = 64)]
    pub height: usize,
    #[arg(long, default_value_t = 64)]
    pub width: usize,
    #[arg(long, default_value_t = 8)]
    pub rect_height: usize,
    #[arg(long, default_value_t = 8)]
    pub rect_width: usize,
    #[arg(long, default_value_t = 1, allow_hyphen_values = true)]
    pub vx: i32,
    #[arg(long, default_value_t = 0, allow_hyphen_values = true)]
    pub vy: i32,
    #[arg(long, default_value_t = 0.5)]
    pub contrast: f32,
    /// Frames the rectangle stays still before moving.
    #[arg(long, default_value_t = 0)]
    pub park: usize,
    /// Amplitude of a global sinusoidal illumination change.
    #[arg(long)]
    pub illumination: Option<f32>,
    /// Period in frames of the illumination change.
    #[arg(long, default_value_t = 25.0)]
    pub period: f32,
}

fn load_config(path: Option<&Path>) -> Result<ConfigFile> {
    path.map_or_else(|| Ok(ConfigFile::default()), ConfigFile::load)
}

/// Exit code for a failed command.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::InvalidConfig(_) | Error::InvalidArchitecture(_) => 2,
        _ => 1,
    }
}

/// Parses `args` (program name first) and runs the command.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(&cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn execute(command: &Command) -> Result<()> {
    match command {
        Command::Train(c) => cmd_train(c),
        Command::Subtract(c) => cmd_subtract(c),
        Command::Rpca(c) => cmd_rpca(c),
        Command::Eval(c) => cmd_eval(c),
        Command::Generate(c) => cmd_generate(c),
        Command::Synth(c) => cmd_synth(c),
    }
}

fn print_epoch(r: &EpochRecord) {
    println!(
        "epoch {} total {} recon {} kl {}",
        r.epoch, r.loss.total, r.loss.reconstruction_l1, r.loss.kl
    );
}

fn cmd_train(c: &TrainCmd) -> Result<()> {
    let file = load_config(c.config.as_deref())?;
    let mut cfg = CliConfig::default();
    c.train.apply(&file, &mut cfg.train)?;
    let frames = load_frame_sequence(&c.input, cfg.train.resize, cfg.train.grayscale)?;
    eprintln!("training on {} frames of {:?}", frames.len(), frames.frame_shape());
    match cfg.train.precision {
        Precision::F32 => train_and_save::<f32>(&frames, &cfg.train, &c.out),
        Precision::F64 => train_and_save::<f64>(&frames, &cfg.train, &c.out),
    }
}

fn train_and_save<T: Real>(frames: &FrameTensor, cfg: &TrainConfig, out: &Path) -> Result<()> {
    let (model, history) = train_with_progress::<T>(frames, cfg, |r| print_epoch(r))?;
    save_checkpoint(out, &model, &history, Some(cfg))
}

fn cmd_subtract(c: &SubtractCmd) -> Result<()> {
    let file = load_config(c.config.as_deref())?;
    let mut cfg = CliConfig::default();
    c.mask.apply(&file, &mut cfg.subtract)?;
    if let Some(model) = &c.model {
        let masks = match checkpoint_precision(model)? {
            Precision::F32 => subtract_with_checkpoint::<f32>(model, &c.input, &cfg.subtract)?,
            Precision::F64 => subtract_with_checkpoint::<f64>(model, &c.input, &cfg.subtract)?,
        };
        return write_masks(&masks, c);
    }
    c.train.apply(&file, &mut cfg.train)?;
    layer(
        c.long_video,
        &file,
        "long_video_fraction",
        &mut cfg.subtract.long_video_fraction,
    )?;
    cfg.subtract.validate()?;
    let long_video = c.long_video.is_some() || file.get::<f64>("long_video_fraction")?.is_some();
    let frames = load_frame_sequence(&c.input, cfg.train.resize, cfg.train.grayscale)?;
    let masks = match cfg.train.precision {
        Precision::F32 => train_and_subtract::<f32>(&frames, &cfg, long_video, c.save_model.as_deref())?,
        Precision::F64 => train_and_subtract::<f64>(&frames, &cfg, long_video, c.save_model.as_deref())?,
    };
    write_masks(&masks, c)
}

fn subtract_with_checkpoint<T: Real>(model: &Path, input: &Path, cfg: &SubtractConfig) -> Result<MaskSequence> {
    let ckpt = load_checkpoint::<T>(model)?;
    let (resize, grayscale) = ckpt
        .config
        .as_ref()
        .map_or((None, false), |t| (t.resize, t.grayscale));
    let frames = load_frame_sequence(input, resize, grayscale)?;
    run_deeppbm(&frames, &ckpt.model, cfg)
}

fn train_and_subtract<T: Real>(
    frames: &FrameTensor,
    cfg: &CliConfig,
    long_video: bool,
    save_to: Option<&Path>,
) -> Result<MaskSequence> {
    let (masks, model, history): (MaskSequence, VaeModel<T>, TrainHistory) = if long_video {
        let n = crate::pipeline::long_video_training_len(frames.len(), cfg.subtract.long_video_fraction);
        eprintln!("training on the first {n} of {} frames", frames.len());
        let run = run_long_video::<T>(frames, &cfg.train, &cfg.subtract)?;
        (run.masks, run.model, run.history)
    } else {
        eprintln!("training on all {} frames", frames.len());
        train_and_run_deeppbm::<T>(frames, &cfg.train, &cfg.subtract)?
    };
    if let Some(last) = history.last() {
        print_epoch(last);
    }
    if let Some(path) = save_to {
        save_checkpoint(path, &model, &history, Some(&cfg.train))?;
    }
    Ok(masks)
}

fn write_masks(masks: &MaskSequence, c: &SubtractCmd) -> Result<()> {
    write_mask_sequence(masks, &c.out_masks, c.out_backgrounds.as_deref())?;
    eprintln!(
        "wrote {} masks to {} (foreground rate {:.4})",
        masks.len(),
        c.out_masks.display(),
        masks.foreground_rate()
    );
    Ok(())
}

fn cmd_rpca(c: &RpcaCmd) -> Result<()> {
    let file = load_config(c.config.as_deref())?;
    let mut cfg = CliConfig::default();
    c.mask.apply(&file, &mut cfg.subtract)?;
    let lambda = match c.lambda {
        Some(l) => Some(l),
        None => file.get("lambda")?,
    };
    cfg.rpca.lambda = lambda;
    layer(c.tol, &file, "tol", &mut cfg.rpca.tol)?;
    layer(c.max_iter, &file, "max_iter", &mut cfg.rpca.max_iter)?;
    if !(cfg.rpca.tol > 0.0) || cfg.rpca.max_iter == 0 || cfg.rpca.lambda.is_some_and(|l| !(l > 0.0)) {
        return Err(Error::InvalidConfig(
            "tol and lambda must be positive and max_iter at least 1".into(),
        ));
    }
    let (resize, grayscale) = c.load.resolve(&file)?;
    let frames = load_frame_sequence(&c.input, resize, grayscale)?;
    let (masks, result) = run_rpca_bs(&frames, &cfg.rpca, &cfg.subtract)?;
    println!(
        "rpca lambda {} iterations {} residual {:e} rank {} converged {}",
        result.lambda, result.iterations, result.residual, result.rank, result.converged
    );
    if !result.converged {
        eprintln!(
            "warning: not converged after {} iterations (residual {:e} > tol {:e})",
            result.iterations, result.residual, cfg.rpca.tol
        );
    }
    write_mask_sequence(&masks, &c.out_masks, c.out_backgrounds.as_deref())
}

fn cmd_eval(c: &EvalCmd) -> Result<()> {
    let predicted = load_mask_dir(&c.masks)?;
    let truth = load_mask_dir(&c.gt)?;
    let mut pairs = Vec::with_capacity(truth.len());
    for (&i, t) in &truth {
        let p = predicted
            .get(&i)
            .ok_or_else(|| Error::InvalidData(format!("no predicted mask for ground-truth frame {i}")))?;
        pairs.push((i, p, t));
    }
    let report = evaluate_pairs(pairs)?;
    if let Some(parent) = c.report.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(&c.report, report.to_json()).map_err(|e| Error::io(&c.report, e))?;
    println!(
        "f_measure {} precision {} recall {} frames {}",
        report.f_measure, report.precision, report.recall, report.frames
    );
    Ok(())
}

fn cmd_generate(c: &GenerateCmd) -> Result<()> {
    if c.num == 0 {
        return Err(Error::InvalidConfig("--num must be at least 1".into()));
    }
    let out = match checkpoint_precision(&c.model)? {
        Precision::F32 => generate_with::<f32>(c)?,
        Precision::F64 => generate_with::<f64>(c)?,
    };
    write_frame_sequence(&out, &c.out, "gen_")?;
    eprintln!("wrote {} backgrounds to {}", out.len(), c.out.display());
    Ok(())
}

fn generate_with<T: Real>(c: &GenerateCmd) -> Result<FrameTensor> {
    let ckpt = load_checkpoint::<T>(&c.model)?;
    match &c.perturb {
        Some(path) => {
            let (resize, grayscale) = ckpt
                .config
                .as_ref()
                .map_or((None, false), |t| (t.resize, t.grayscale));
            let frame = load_frame_file(path, resize, grayscale)?;
            let mode = GenerateMode::Perturb {
                frame: &frame,
                scale: c.scale,
            };
            generate_backgrounds(&ckpt.model, mode, c.num, c.seed)
        }
        None => generate_backgrounds(&ckpt.model, GenerateMode::PriorSample, c.num, c.seed),
    }
}

fn cmd_synth(c: &SynthCmd) -> Result<()> {
    let spec = SyntheticSceneSpec {
        frames: c.frames,
        size: (c.height, c.width),
        background: match c.illumination {
            Some(amplitude) => BackgroundKind::SinusoidalIllumination {
                amplitude,
                period: c.period,
            },
            None => BackgroundKind::Static,
        },
        rect_size: (c.rect_height, c.rect_width),
        velocity: (c.vx, c.vy),
        contrast: c.contrast,
        park_frames: c.park,
        seed: c.seed,
    };
    let scene = generate_synthetic_scene(&spec)?;
    write_frame_sequence(&scene.frames, &c.out.join("frames"), "frame_")?;
    let gt = c.out.join("gt");
    fs::create_dir_all(&gt).map_err(|e| Error::io(&gt, e))?;
    for (i, m) in scene.truth.masks().iter().enumerate() {
        write_mask_png(m, &gt.join(format!("mask_{i:06}.png")))?;
    }
    eprintln!("wrote {} frames to {}", c.frames, c.out.display());
    Ok(())
}
