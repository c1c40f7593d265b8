//! Subcommands. Each one reads its inputs, runs the core pipeline and writes
//! its artifact atomically; progress and results go to `out` as
//! `key=value` lines.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rlvis_core::classviz::synthesize;
use rlvis_core::policy::{evaluate, run_episode, train, Archetype};
use rlvis_core::tsne::{embed, extract_features, Embedding};
use rlvis_core::vizio::{compose_attribution, compose_tsne_map, encode_ppm, RgbImage};
use rlvis_core::{attrib, rng, Action, Objective, PolicyNetwork, Tensor};

use crate::config::{parse_init, parse_objective, RunConfig};
use crate::error::{usage, CliError, CliResult};
use crate::formats::{read_file, write_atomic, RolloutFile, WeightsFile};

/// Side length of the square t-SNE canvas.
pub const TSNE_CANVAS: usize = 1200;
/// Side length of each t-SNE thumbnail.
pub const TSNE_THUMB: usize = 24;
pub const MIN_TSNE_RECORDS: usize = 4;

#[derive(Debug, Parser)]
#[command(name = "rlvis", version, about = "Train small vision policies and visualize what they attend to")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a policy archetype and write its weights.
    Train(TrainArgs),
    /// Roll out a policy and record every step.
    Collect(CollectArgs),
    /// Embed penultimate features of recorded observations with t-SNE.
    Tsne(TsneArgs),
    /// Synthesize an input image that maximizes one action.
    Classviz(ClassvizArgs),
    /// Grad-CAM overlay for one recorded step.
    Gradcam(GradcamArgs),
    /// Mean cubes collected and action frequencies.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// high, poor or forward-right
    #[arg(long)]
    pub archetype: String,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct CollectArgs {
    #[arg(long)]
    pub weights: PathBuf,
    #[arg(long)]
    pub episodes: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub mask_left: bool,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TsneArgs {
    #[arg(long)]
    pub weights: PathBuf,
    #[arg(long)]
    pub rollouts: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub perplexity: Option<f64>,
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ClassvizArgs {
    #[arg(long)]
    pub weights: PathBuf,
    /// left, forward or right
    #[arg(long)]
    pub action: String,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub step_size: Option<f32>,
    #[arg(long)]
    pub l2: Option<f32>,
    #[arg(long)]
    pub blur_every: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// mid-gray or noise
    #[arg(long)]
    pub init: Option<String>,
    /// probability, log-probability or logit
    #[arg(long)]
    pub objective: Option<String>,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcamArgs {
    #[arg(long)]
    pub weights: PathBuf,
    #[arg(long)]
    pub rollouts: PathBuf,
    #[arg(long)]
    pub index: usize,
    #[arg(long)]
    pub out: PathBuf,
    /// Integer enlargement of the overlay.
    #[arg(long, default_value_t = 8)]
    pub scale: usize,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub weights: PathBuf,
    #[arg(long)]
    pub episodes: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub mask_left: bool,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

/// Parses `args` (program name first) and runs the command. Returns the
/// process exit code.
pub fn run<I, S>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> u8
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let text = e.render().to_string();
            let sink: &mut dyn Write = if code == 0 { out } else { err };
            let _ = sink.write_all(text.as_bytes());
            return code;
        }
    };
    match execute(cli.command, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(command: Command, out: &mut dyn Write) -> CliResult<()> {
    match command {
        Command::Train(a) => cmd_train(&a, out),
        Command::Collect(a) => cmd_collect(&a, out),
        Command::Tsne(a) => cmd_tsne(&a, out),
        Command::Classviz(a) => cmd_classviz(&a, out),
        Command::Gradcam(a) => cmd_gradcam(&a, out),
        Command::Eval(a) => cmd_eval(&a, out),
    }
}

fn emit(out: &mut dyn Write, line: std::fmt::Arguments) -> CliResult<()> {
    writeln!(out, "{line}").map_err(|e| CliError::Internal(format!("cannot write output: {e}")))
}

pub fn load_weights(path: &Path) -> CliResult<PolicyNetwork> {
    WeightsFile::from_bytes(&read_file(path)?)
        .and_then(WeightsFile::into_network)
        .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

pub fn load_rollouts(path: &Path) -> CliResult<RolloutFile> {
    RolloutFile::from_bytes(&read_file(path)?).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

fn write_ppm(path: &Path, img: &RgbImage) -> CliResult<()> {
    write_atomic(path, &encode_ppm(img).map_err(|e| CliError::Internal(e.to_string()))?)
}

fn check_shape(net: &PolicyNetwork, h: usize, w: usize, what: &str) -> CliResult<()> {
    if net.input_shape() != (h, w) {
        let (nh, nw) = net.input_shape();
        return usage(format!("weights expect {nh}x{nw} observations but {what} is {h}x{w}"));
    }
    Ok(())
}

fn cmd_train(a: &TrainArgs, out: &mut dyn Write) -> CliResult<()> {
    let mut cfg = RunConfig::load(a.config.as_deref())?;
    let archetype: Archetype = a.archetype.parse()?;
    if let Some(seed) = a.seed {
        cfg.train.seed = seed;
    }
    let outcome = train(archetype, &cfg.train, &cfg.env, |p| {
        let _ = writeln!(out, "episode={} mean_return={:.6}", p.episode, p.mean_return);
        if let Some(e) = p.eval_mean_cubes {
            let _ = writeln!(out, "episode={} eval_mean_cubes={:.6}", p.episode, e);
        }
    })?;
    write_atomic(&a.out, &WeightsFile::from_network(&outcome.net).to_bytes()?)?;
    if outcome.budget_exhausted {
        emit(
            out,
            format_args!(
                "warning=budget_exhausted best_eval_mean_cubes={:.6}",
                outcome.best_eval.unwrap_or(0.0)
            ),
        )?;
    }
    emit(out, format_args!("episodes_run={}", outcome.episodes_run))
}

fn cmd_collect(a: &CollectArgs, out: &mut dyn Write) -> CliResult<()> {
    let cfg = RunConfig::load(a.config.as_deref())?;
    let net = load_weights(&a.weights)?;
    check_shape(&net, cfg.env.image_h, cfg.env.image_w, "the environment")?;
    if u32::try_from(a.episodes).is_err() {
        return usage("too many episodes");
    }
    let mut file = RolloutFile::new(cfg.env.image_h, cfg.env.image_w);
    for i in 0..a.episodes {
        let traj = run_episode(&net, &cfg.env, rng::episode_seed(a.seed, i as u64), a.mask_left)?;
        file.push_trajectory(i as u32, &traj)?;
    }
    write_atomic(&a.out, &file.to_bytes()?)?;
    emit(out, format_args!("records={}", file.records.len()))
}

fn cmd_tsne(a: &TsneArgs, out: &mut dyn Write) -> CliResult<()> {
    let mut cfg = RunConfig::load(a.config.as_deref())?.tsne;
    if let Some(p) = a.perplexity {
        cfg.perplexity = p;
    }
    if let Some(n) = a.iters {
        cfg.iterations = n;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let net = load_weights(&a.weights)?;
    let rollouts = load_rollouts(&a.rollouts)?;
    let n = rollouts.records.len();
    if n < MIN_TSNE_RECORDS {
        return usage(format!("t-SNE needs at least {MIN_TSNE_RECORDS} records, found {n}"));
    }
    check_shape(&net, rollouts.image_h, rollouts.image_w, "the rollout file")?;
    let observations: Vec<Tensor> = (0..n).map(|i| rollouts.observation(i)).collect();
    let features = extract_features(&net, &observations)?;
    let points = embed(&features, &cfg)?;
    let actions = rollouts.records.iter().map(|r| r.action).collect();
    let embedding = Embedding::new(points, actions, (0..n).collect())?;
    let map = compose_tsne_map(&embedding, &observations, TSNE_CANVAS, TSNE_THUMB)?;
    let mut csv = String::from("index,x,y,action\n");
    for ((p, action), idx) in embedding.points.iter().zip(&embedding.action_tags).zip(&embedding.source_indices) {
        csv.push_str(&format!("{idx},{:.6},{:.6},{action}\n", p[0], p[1]));
    }
    write_ppm(&a.out, &map)?;
    write_atomic(&sidecar_path(&a.out), csv.as_bytes())?;
    emit(out, format_args!("points={n}"))
}

/// `<out>.csv` next to the image.
pub fn sidecar_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".csv");
    PathBuf::from(s)
}

fn cmd_classviz(a: &ClassvizArgs, out: &mut dyn Write) -> CliResult<()> {
    let action: Action = a.action.parse()?;
    let mut cfg = RunConfig::load(a.config.as_deref())?.cmv;
    if let Some(v) = a.steps {
        cfg.steps = v;
    }
    if let Some(v) = a.step_size {
        cfg.step_size = v;
    }
    if let Some(v) = a.l2 {
        cfg.l2_decay = v;
    }
    if let Some(v) = a.blur_every {
        cfg.blur_every = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = &a.init {
        cfg.init = parse_init(v).map_err(CliError::Usage)?;
    }
    if let Some(v) = &a.objective {
        cfg.objective = parse_objective(v).map_err(CliError::Usage)?;
    }
    let net = load_weights(&a.weights)?;
    let result = synthesize(&net, action, &cfg)?;
    write_ppm(&a.out, &RgbImage::from_gray(&result.image)?)?;
    emit(out, format_args!("final_prob={:.6}", result.final_prob))
}

/// Cube pixels are the only ones rendered at full intensity.
pub fn cube_mask_from_pixels(obs: &Tensor) -> Tensor {
    let data = obs.data().iter().map(|&v| if v == 1.0 { 1.0 } else { 0.0 }).collect();
    let (h, w) = (obs.shape()[obs.shape().len() - 2], obs.shape()[obs.shape().len() - 1]);
    Tensor::new(vec![h, w], data).expect("mask shape")
}

fn cmd_gradcam(a: &GradcamArgs, out: &mut dyn Write) -> CliResult<()> {
    if a.scale == 0 {
        return usage("scale must be at least 1");
    }
    let net = load_weights(&a.weights)?;
    let rollouts = load_rollouts(&a.rollouts)?;
    let n = rollouts.records.len();
    if a.index >= n {
        return usage(format!("index {} out of range for {n} records", a.index));
    }
    check_shape(&net, rollouts.image_h, rollouts.image_w, "the rollout file")?;
    let obs = rollouts.observation(a.index);
    let map = attrib::grad_cam_with(&net, &obs, rollouts.records[a.index].action, Objective::Probability)?;
    let mass = attrib::cube_mass_fraction(&map, &cube_mask_from_pixels(&obs))?;
    write_ppm(&a.out, &compose_attribution(&obs, &map, a.scale)?)?;
    emit(out, format_args!("mass_in_cubes={mass:.6}"))
}

fn cmd_eval(a: &EvalArgs, out: &mut dyn Write) -> CliResult<()> {
    let cfg = RunConfig::load(a.config.as_deref())?;
    let net = load_weights(&a.weights)?;
    check_shape(&net, cfg.env.image_h, cfg.env.image_w, "the environment")?;
    let stats = evaluate(&net, &cfg.env, a.episodes, a.seed, a.mask_left)?;
    emit(
        out,
        format_args!(
            "mean_cubes={:.6} left_freq={:.6} forward_freq={:.6} right_freq={:.6} steps={}",
            stats.mean_cubes, stats.action_freq[0], stats.action_freq[1], stats.action_freq[2], stats.steps
        ),
    )
}

