//! Command-line surface.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::info;

use crate::body_model::{build_canonical_body, BodyModel, JOINT_COUNT, JOINT_NAMES};
use crate::checkpoint::{load_checkpoint, model_fingerprint, save_checkpoint, Checkpoint};
use crate::config::RunConfig;
use crate::error::{ensure, Error, Result};
use crate::eval::{
    cumulative_translation_error, default_sweep, global_angular_error, infer_pose, placement_sweep, read_pose,
    report_text, write_pose, SweepRow, DEFAULT_GAE_MASK,
};
use crate::matchmaker::{assign_devices, build_loss_table, read_table, write_table, Device, DeviceSet};
use crate::motion_gen::{generate_motion, read_motion, write_motion, MotionKind, MotionSequence};
use crate::net::{ForwardOptions, ModelParams};
use crate::trainer::{prepare_corpus, train_phase1, train_phase2, write_loss_log, PreparedSequence, TrainState};
use crate::vimu_synth::{read_track, synthesize_joint_imu, synthesize_mesh_imu, write_track, ImuTrack};

#[derive(Parser, Debug)]
#[command(name = "imucoco", version, about = "Placement-flexible IMU pose estimation")]
pub struct Cli {
    /// Key-value config file (body.*, network and training keys).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for generation, initialization and training.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output path.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic motion sequence.
    Genmotion(GenmotionArgs),
    /// Synthesize virtual IMU tracks from a motion.
    Synth(SynthArgs),
    /// Run one training phase.
    Train(TrainArgs),
    /// Build the joint-by-vertex loss table.
    Losstable(LosstableArgs),
    /// Assign devices to joint nodes.
    Assign(AssignArgs),
    /// Estimate pose from device tracks.
    Infer(InferArgs),
    /// Score a pose estimate against a motion's ground truth.
    Eval(EvalArgs),
    /// Angular error over a sweep of placements.
    Sweep(SweepArgs),
}

#[derive(Args, Debug)]
pub struct GenmotionArgs {
    /// idle, walk, arm_swing, squat or mixed.
    #[arg(long, default_value = "walk")]
    pub kind: String,
    #[arg(long, default_value_t = 4.0)]
    pub seconds: f64,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub motion: PathBuf,
    /// Device file (`id x y z` per line); writes `device_<id>.imutrack` into the --out directory.
    #[arg(long, conflicts_with_all = ["vertex", "joint"])]
    pub devices: Option<PathBuf>,
    /// Single track at this mesh vertex.
    #[arg(long, conflicts_with = "joint")]
    pub vertex: Option<usize>,
    /// Single track at this joint.
    #[arg(long)]
    pub joint: Option<usize>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
    pub phase: u8,
    /// Training motions.
    #[arg(long, num_args = 1.., required = true)]
    pub motion: Vec<PathBuf>,
    /// Checkpoint to resume from; required for phase 2.
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// Per-step loss log.
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct LosstableArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Held-out validation motions.
    #[arg(long, num_args = 1.., required = true)]
    pub motion: Vec<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub stride: usize,
}

#[derive(Args, Debug)]
pub struct AssignArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub table: PathBuf,
    #[arg(long)]
    pub devices: PathBuf,
}

#[derive(Args, Debug)]
pub struct InferArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub table: PathBuf,
    #[arg(long)]
    pub devices: PathBuf,
    /// One track per device, in device-file order.
    #[arg(long, num_args = 1.., required = true)]
    pub tracks: Vec<PathBuf>,
    /// Feed (0,0,0) as every node's standardized coordinate.
    #[arg(long)]
    pub zero_coordinate: bool,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub pose: PathBuf,
    /// Motion that produced the tracks.
    #[arg(long)]
    pub motion: PathBuf,
    /// Row label in the report.
    #[arg(long, default_value = "estimate")]
    pub label: String,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub table: PathBuf,
    #[arg(long, num_args = 1.., required = true)]
    pub motion: Vec<PathBuf>,
    #[arg(long)]
    pub zero_coordinate: bool,
}

struct Context {
    config: RunConfig,
    seed: Option<u64>,
    out: Option<PathBuf>,
}

impl Context {
    fn out(&self) -> Result<&Path> {
        self.out
            .as_deref()
            .ok_or_else(|| Error::Validation("this subcommand needs --out PATH".into()))
    }

    fn emit(&self, text: &str) -> Result<()> {
        match &self.out {
            Some(p) => std::fs::write(p, text).map_err(|e| Error::io(p, e)),
            None => {
                print!("{text}");
                Ok(())
            }
        }
    }
}

fn load_motions(paths: &[PathBuf]) -> Result<Vec<MotionSequence>> {
    paths.iter().map(|p| read_motion(p)).collect()
}

fn corpus(body: &BodyModel, paths: &[PathBuf]) -> Result<Vec<PreparedSequence>> {
    prepare_corpus(body, &load_motions(paths)?)
}

fn load_trained(path: &Path) -> Result<(Checkpoint, BodyModel)> {
    let ck = load_checkpoint(path)?;
    let body = build_canonical_body(&ck.body)?;
    Ok((ck, body))
}

fn read_devices(path: &Path, body: &BodyModel) -> Result<DeviceSet> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    DeviceSet::parse(&text, &path.display().to_string(), body)
}

fn genmotion(ctx: &Context, a: &GenmotionArgs) -> Result<()> {
    let kind: MotionKind = a.kind.parse()?;
    let motion = generate_motion(ctx.seed.unwrap_or(0), a.seconds, kind)?;
    write_motion(&motion, ctx.out()?)?;
    info!("wrote {} frames of {kind}", motion.len());
    Ok(())
}

fn synth(ctx: &Context, a: &SynthArgs) -> Result<()> {
    let body = build_canonical_body(&ctx.config.body)?;
    let motion = read_motion(&a.motion)?;
    let out = ctx.out()?;
    if let Some(dev) = &a.devices {
        let set = read_devices(dev, &body)?;
        std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        let posed = crate::vimu_synth::PosedMotion::new(&body, &motion)?;
        for d in &set.devices {
            let track = device_track_posed(&body, &posed, d)?;
            write_track(&track, &out.join(format!("device_{}.imutrack", d.id)))?;
        }
        return Ok(());
    }
    let track = match (a.vertex, a.joint) {
        (Some(v), None) => synthesize_mesh_imu(&body, &motion, v)?,
        (None, Some(j)) => synthesize_joint_imu(&body, &motion, j)?,
        _ => return Err(Error::Validation("synth needs one of --devices, --vertex or --joint".into())),
    };
    write_track(&track, out)
}

fn device_track_posed(body: &BodyModel, posed: &crate::vimu_synth::PosedMotion, d: &Device) -> Result<ImuTrack> {
    let mut track = match d.source {
        crate::matchmaker::DeviceSource::Vertex(v) => crate::vimu_synth::synthesize_mesh_imu_posed(body, posed, v)?,
        crate::matchmaker::DeviceSource::Joint(j) => crate::vimu_synth::synthesize_joint_imu_posed(body, posed, j)?,
    };
    track.placement = d.placement;
    Ok(track)
}

fn train(ctx: &Context, a: &TrainArgs) -> Result<()> {
    let mut train_cfg = ctx.config.train.clone();
    if let Some(seed) = ctx.seed {
        train_cfg.seed = seed;
    }
    let (body_cfg, state) = match &a.init {
        Some(p) => {
            let ck = load_checkpoint(p)?;
            (ck.body, ck.state)
        }
        None => {
            ensure!(a.phase == 1, "phase 2 requires --init with a phase-1 checkpoint");
            let model = ModelParams::init(&ctx.config.net, train_cfg.seed)?;
            (ctx.config.body.clone(), TrainState::fresh(model))
        }
    };
    let body = build_canonical_body(&body_cfg)?;
    let data = corpus(&body, &a.motion)?;
    let (state, log) = if a.phase == 1 {
        train_phase1(&state, &body, &data, &train_cfg)?
    } else {
        train_phase2(&state, &body, &data, &train_cfg)?
    };
    if let (Some(first), Some(last)) = (log.first(), log.last()) {
        info!("phase {}: {} steps, loss {:.4} -> {:.4}", a.phase, log.len(), first.total, last.total);
    }
    if let Some(p) = &a.log {
        write_loss_log(&log, p)?;
    }
    save_checkpoint(
        &Checkpoint {
            body: body_cfg,
            train: train_cfg,
            state,
        },
        ctx.out()?,
    )
}

fn losstable(ctx: &Context, a: &LosstableArgs) -> Result<()> {
    let (ck, body) = load_trained(&a.checkpoint)?;
    let data = corpus(&body, &a.motion)?;
    let model = &ck.state.model;
    let table = build_loss_table(model, &model_fingerprint(model), &body, &data, a.stride)?;
    write_table(&table, ctx.out()?)
}

fn assign(ctx: &Context, a: &AssignArgs) -> Result<()> {
    let (ck, body) = load_trained(&a.checkpoint)?;
    let table = read_table(&a.table)?;
    table.verify(&body, &model_fingerprint(&ck.state.model))?;
    let set = read_devices(&a.devices, &body)?;
    let assignment = assign_devices(&table, &body, &set)?;
    let mut text = String::from("# joint name device\n");
    for j in 0..JOINT_COUNT {
        text.push_str(&format!("{j} {} {}\n", JOINT_NAMES[j], assignment[j]));
    }
    ctx.emit(&text)
}

fn infer(ctx: &Context, a: &InferArgs) -> Result<()> {
    let (ck, body) = load_trained(&a.checkpoint)?;
    let table = read_table(&a.table)?;
    let set = read_devices(&a.devices, &body)?;
    let tracks = a.tracks.iter().map(|p| read_track(p)).collect::<Result<Vec<_>>>()?;
    let opts = ForwardOptions {
        zero_coordinate: a.zero_coordinate,
    };
    let est = infer_pose(&ck.state.model, &body, &table, &set, &tracks, opts)?;
    write_pose(&est, ctx.out()?)
}

fn eval(ctx: &Context, a: &EvalArgs) -> Result<()> {
    let est = read_pose(&a.pose)?;
    let motion = read_motion(&a.motion)?;
    let body = build_canonical_body(&ctx.config.body)?;
    let data = PreparedSequence::new(&body, &motion)?;
    ensure!(est.fps == motion.fps, "pose fps {} differs from motion fps {}", est.fps, motion.fps);
    let gae = global_angular_error(&est.orientations, &crate::eval::ground_truth_rotations(&data), &DEFAULT_GAE_MASK)?;
    let err = cumulative_translation_error(&est.translation, &data.gt.root_translation)?;
    let row = SweepRow {
        label: a.label.clone(),
        gae_deg: gae,
        final_translation_error_m: err.last().copied().unwrap_or(0.0),
    };
    ctx.emit(&report_text(&[row]))
}

fn sweep(ctx: &Context, a: &SweepArgs) -> Result<()> {
    let (ck, body) = load_trained(&a.checkpoint)?;
    let table = read_table(&a.table)?;
    let data = corpus(&body, &a.motion)?;
    let variants = default_sweep(&body)?;
    let opts = ForwardOptions {
        zero_coordinate: a.zero_coordinate,
    };
    let rows = placement_sweep(&ck.state.model, &body, &table, &data, &variants, opts)?;
    ctx.emit(&report_text(&rows))
}

fn run(cli: Cli) -> Result<()> {
    let config = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let ctx = Context {
        config,
        seed: cli.seed,
        out: cli.out,
    };
    match &cli.command {
        Command::Genmotion(a) => genmotion(&ctx, a),
        Command::Synth(a) => synth(&ctx, a),
        Command::Train(a) => train(&ctx, a),
        Command::Losstable(a) => losstable(&ctx, a),
        Command::Assign(a) => assign(&ctx, a),
        Command::Infer(a) => infer(&ctx, a),
        Command::Eval(a) => eval(&ctx, a),
        Command::Sweep(a) => sweep(&ctx, a),
    }
}

/// Parses `argv` and runs the subcommand. Returns the process exit code:
/// 0 on success or help, 1 on usage and validation errors, 2 otherwise.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_user_error() {
                1
            } else {
                2
            }
        }
    }
}

/// Sizes the global thread pool from `IMUCOCO_WORKERS` when set.
pub fn init_workers() -> Result<()> {
    if let Ok(v) = std::env::var("IMUCOCO_WORKERS") {
        let n: usize = v
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("IMUCOCO_WORKERS must be a positive integer, got {v:?}")))?;
        ensure!(n >= 1, "IMUCOCO_WORKERS must be at least 1");
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("cannot size worker pool: {e}")))?;
    }
    Ok(())
}
