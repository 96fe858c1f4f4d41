//! Losses and the two-phase buffered training procedure.
//!
//! Phase 1 trains every node on its own joint IMU with kinematic and pose
//! losses. Phase 2 feeds sampled mesh IMUs through one node at a time,
//! substitutes the mesh feature into a buffer of joint features for the
//! pose loss, aligns it to the joint feature, and keeps the kinematic heads
//! fixed.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autodiff::{adam_step, AdamState, Graph, Tensor, Var};
use crate::body_model::{bfs_hops, BodyModel, JOINT_COUNT};
use crate::error::{ensure, Error, Result};
use crate::motion_gen::MotionSequence;
use crate::net::{evaluate_node, node_forward, pr_forward, ForwardOptions, KinematicPreds, ModelParams, Session};
use crate::vimu_synth::{
    kinematics_ground_truth_posed, synthesize_joint_imu_posed, synthesize_mesh_imu_posed, ImuTrack, KinematicsGT,
    PosedMotion,
};

pub const MULTIFRAME_HORIZONS: [usize; 4] = [1, 3, 9, 27];

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lambda_kinematic: f64,
    pub lambda_pose: f64,
    pub lambda_align: f64,
    pub phase1_steps: usize,
    pub phase2_steps: usize,
    /// Mesh samples drawn per sequence window, split evenly across nodes.
    pub mesh_samples: usize,
    pub hop_decay: f64,
    pub bptt_window: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    /// Steps per plateau check; 0 disables early stopping.
    pub plateau_window: usize,
    pub plateau_tolerance: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda_kinematic: 1.0,
            lambda_pose: 1.0,
            lambda_align: 0.1,
            phase1_steps: 200,
            phase2_steps: 240,
            mesh_samples: 48,
            hop_decay: 0.5,
            bptt_window: 64,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            plateau_window: 50,
            plateau_tolerance: 0.01,
        }
    }
}

impl TrainConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let real = || -> Result<f64> {
            value
                .parse()
                .map_err(|_| Error::Config(format!("{key}: expected a number, got '{value}'")))
        };
        let int = || -> Result<usize> {
            value
                .parse()
                .map_err(|_| Error::Config(format!("{key}: expected a non-negative integer, got '{value}'")))
        };
        match key {
            "lambda_kinematic" => self.lambda_kinematic = real()?,
            "lambda_pose" => self.lambda_pose = real()?,
            "lambda_align" => self.lambda_align = real()?,
            "phase1_steps" => self.phase1_steps = int()?,
            "phase2_steps" => self.phase2_steps = int()?,
            "mesh_samples" => self.mesh_samples = int()?,
            "hop_decay" => self.hop_decay = real()?,
            "bptt_window" => self.bptt_window = int()?,
            "lr" => self.lr = real()?,
            "beta1" => self.beta1 = real()?,
            "beta2" => self.beta2 = real()?,
            "eps" => self.eps = real()?,
            "seed" => self.seed = int()? as u64,
            "plateau_window" => self.plateau_window = int()?,
            "plateau_tolerance" => self.plateau_tolerance = real()?,
            _ => return Err(Error::Config(format!("unknown key '{key}'"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_kinematic", self.lambda_kinematic),
            ("lambda_pose", self.lambda_pose),
            ("lambda_align", self.lambda_align),
            ("lr", self.lr),
            ("plateau_tolerance", self.plateau_tolerance),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        if self.mesh_samples == 0 || self.bptt_window == 0 {
            return Err(Error::Config("mesh_samples and bptt_window must be at least 1".into()));
        }
        if !(self.hop_decay > 0.0 && self.hop_decay <= 1.0) {
            return Err(Error::Config(format!("hop_decay must lie in (0, 1], got {}", self.hop_decay)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(Error::Config("betas must lie in [0, 1) and eps must be positive".into()));
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        format!(
            "lambda_kinematic = {:?}\nlambda_pose = {:?}\nlambda_align = {:?}\nphase1_steps = {}\nphase2_steps = {}\n\
             mesh_samples = {}\nhop_decay = {:?}\nbptt_window = {}\nlr = {:?}\nbeta1 = {:?}\nbeta2 = {:?}\neps = {:?}\n\
             seed = {}\nplateau_window = {}\nplateau_tolerance = {:?}\n",
            self.lambda_kinematic,
            self.lambda_pose,
            self.lambda_align,
            self.phase1_steps,
            self.phase2_steps,
            self.mesh_samples,
            self.hop_decay,
            self.bptt_window,
            self.lr,
            self.beta1,
            self.beta2,
            self.eps,
            self.seed,
            self.plateau_window,
            self.plateau_tolerance,
        )
    }

    pub fn new_optimizer(&self, model: &ModelParams) -> AdamState {
        AdamState::new(&model.tensors, self.lr, self.beta1, self.beta2, self.eps)
    }
}

fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Tensor {
    Tensor::matrix(rows, cols, data).expect("ground-truth layout")
}

/// Kinematic targets of joint `j` as tensors, in head order.
pub fn joint_targets(gt: &KinematicsGT, j: usize) -> [Tensor; 5] {
    let t = gt.frames;
    let jk = &gt.joints[j];
    [
        matrix(t, 3, jk.velocity.clone()),
        matrix(t, 3, jk.position.clone()),
        matrix(t, 6, jk.local_orientation.clone()),
        matrix(t, 6, jk.global_orientation.clone()),
        matrix(t, 3, gt.root_velocity.clone()),
    ]
}

/// Window-sum matrix with `T − n + 1` rows; row `t` sums frames `t..t+n`.
fn window_sum_matrix(frames: usize, n: usize) -> Tensor {
    let rows = frames - n + 1;
    let mut data = vec![0.0; rows * frames];
    for t in 0..rows {
        data[t * frames + t..t * frames + t + n].iter_mut().for_each(|x| *x = 1.0);
    }
    matrix(rows, frames, data)
}

/// Sum over horizons `n ∈ {1, 3, 9, 27}` (those that fit in `T`) of the
/// mean squared error between `n`-frame window sums, per component.
pub fn root_velocity_multiframe_loss(g: &mut Graph, pred: Var, gt: Var) -> Result<Var> {
    let shape = g.shape(pred).to_vec();
    ensure!(shape.len() == 2 && shape[1] == 3, "root velocity must be T × 3, got {shape:?}");
    ensure!(g.shape(gt) == shape.as_slice(), "root velocity shapes differ: {shape:?} vs {:?}", g.shape(gt));
    let frames = shape[0];
    ensure!(frames >= 1, "root velocity needs at least one frame");
    let mut total: Option<Var> = None;
    for n in MULTIFRAME_HORIZONS.into_iter().filter(|&n| n <= frames) {
        let s = g.constant(window_sum_matrix(frames, n));
        let ps = g.matmul(s, pred)?;
        let gs = g.matmul(s, gt)?;
        let term = g.sum_squared_error(ps, gs)?;
        total = Some(match total {
            Some(t) => g.add(t, term)?,
            None => term,
        });
    }
    Ok(total.expect("horizon 1 always fits"))
}

/// Velocity, position, global and local orientation errors plus the
/// multiframe root-velocity loss, summed with equal weight.
pub fn kinematic_loss(g: &mut Graph, preds: &KinematicPreds, gt: &KinematicsGT, j: usize) -> Result<Var> {
    let frames = g.shape(preds.velocity)[0];
    ensure!(
        frames == gt.frames,
        "kinematic_loss: {frames} predicted frames, {} ground-truth frames",
        gt.frames
    );
    let [vel, pos, local, global, root] = joint_targets(gt, j).map(|t| g.constant(t));
    let terms = [
        g.sum_squared_error(preds.velocity, vel)?,
        g.sum_squared_error(preds.position, pos)?,
        g.sum_squared_error(preds.global_orientation, global)?,
        g.sum_squared_error(preds.local_orientation, local)?,
        root_velocity_multiframe_loss(g, preds.root_velocity, root)?,
    ];
    let mut total = terms[0];
    for t in &terms[1..] {
        total = g.add(total, *t)?;
    }
    Ok(total)
}

/// Mean over frames of `1 − cos(z[t], z_ref[t])`, `z_ref` held constant.
/// Frames where either row has zero norm are skipped; their count is
/// returned alongside the loss.
pub fn alignment_loss(g: &mut Graph, z: Var, z_ref: &Tensor) -> Result<(Var, usize)> {
    ensure!(
        g.shape(z) == z_ref.shape(),
        "alignment_loss: shapes {:?} and {:?} differ",
        g.shape(z),
        z_ref.shape()
    );
    let frames = z_ref.rows();
    let zv = g.value(z).clone();
    let mask: Vec<f64> = (0..frames)
        .map(|t| {
            let nz = zv.row_slice(t).iter().any(|x| *x != 0.0);
            let nr = z_ref.row_slice(t).iter().any(|x| *x != 0.0);
            if nz && nr {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    let valid = mask.iter().filter(|m| **m > 0.0).count();
    let skipped = frames - valid;
    if skipped > 0 {
        log::warn!("alignment_loss: skipped {skipped} zero-norm frames");
    }
    let r = g.constant(z_ref.clone());
    let cos = g.cosine_similarity(z, r)?;
    if valid == 0 {
        let zero = g.scale(cos, 0.0);
        return Ok((g.sum(zero), skipped));
    }
    let m = g.constant(Tensor::matrix(frames, 1, mask)?);
    let kept = g.hadamard(cos, m)?;
    let s = g.sum(kept);
    let neg = g.scale(s, -1.0 / valid as f64);
    Ok((g.add_scalar(neg, 1.0), skipped))
}

pub fn pose_loss(g: &mut Graph, pr_output: Var, gt_pose: &Tensor) -> Result<Var> {
    let target = g.constant(gt_pose.clone());
    g.sum_squared_error(pr_output, target)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    JointImu,
    MeshImu,
}

/// Cached detached features for all 24 nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeBuffer {
    slots: Vec<Option<Tensor>>,
    provenance: Vec<Provenance>,
}

impl Default for NodeBuffer {
    fn default() -> Self {
        NodeBuffer {
            slots: vec![None; JOINT_COUNT],
            provenance: vec![Provenance::JointImu; JOINT_COUNT],
        }
    }
}

impl NodeBuffer {
    pub fn from_features(features: Vec<Tensor>) -> Result<Self> {
        ensure!(features.len() == JOINT_COUNT, "buffer needs {JOINT_COUNT} features, got {}", features.len());
        Ok(NodeBuffer {
            slots: features.into_iter().map(Some).collect(),
            provenance: vec![Provenance::JointImu; JOINT_COUNT],
        })
    }

    pub fn set(&mut self, j: usize, z: Tensor, provenance: Provenance) {
        self.slots[j] = Some(z);
        self.provenance[j] = provenance;
    }

    pub fn get(&self, j: usize) -> Option<&Tensor> {
        self.slots[j].as_ref()
    }

    pub fn provenance(&self, j: usize) -> Provenance {
        self.provenance[j]
    }

    pub fn is_full(&self) -> bool {
        self.slots.iter().all(Option::is_some)
    }

    /// Buffer features as graph constants with slot `j` replaced by `z_j`.
    pub fn substituted(&self, g: &mut Graph, j: usize, z_j: Var) -> Result<Vec<Var>> {
        ensure!(self.is_full(), "pose loss evaluated with an unpopulated buffer slot");
        Ok((0..JOINT_COUNT)
            .map(|k| {
                if k == j {
                    z_j
                } else {
                    g.constant(self.slots[k].clone().expect("checked full"))
                }
            })
            .collect())
    }
}

/// The three weighted terms of one node objective and their sum.
#[derive(Debug, Clone, Copy)]
pub struct NodeLossTerms {
    pub total: Var,
    pub kinematic: Var,
    pub pose: Var,
    pub align: Option<Var>,
    pub z: Var,
}

/// `λ_k·kinematic + λ_p·pose(PR(buffer with slot j ← z_j)) + λ_a·align`,
/// the alignment term present only when `z_ref` is given.
#[allow(clippy::too_many_arguments)]
pub fn total_node_loss(
    s: &mut Session,
    j: usize,
    track: &ImuTrack,
    gt: &KinematicsGT,
    buffer: &NodeBuffer,
    z_ref: Option<&Tensor>,
    config: &TrainConfig,
    body: &BodyModel,
) -> Result<NodeLossTerms> {
    let out = node_forward(s, j, track, body)?;
    let kinematic = kinematic_loss(&mut s.g, &out.preds, gt, j)?;
    let features = buffer.substituted(&mut s.g, j, out.z)?;
    let pose_out = pr_forward(s, &features)?;
    let pose = pose_loss(&mut s.g, pose_out, &matrix(gt.frames, 144, gt.global_pose()))?;
    let wk = s.g.scale(kinematic, config.lambda_kinematic);
    let wp = s.g.scale(pose, config.lambda_pose);
    let mut total = s.g.add(wk, wp)?;
    let align = match z_ref {
        Some(r) => {
            let (a, _) = alignment_loss(&mut s.g, out.z, r)?;
            let wa = s.g.scale(a, config.lambda_align);
            total = s.g.add(total, wa)?;
            Some(a)
        }
        None => None,
    };
    Ok(NodeLossTerms {
        total,
        kinematic,
        pose,
        align,
        z: out.z,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplingDensity {
    /// Per-vertex surface area, so samples are uniform per unit area.
    Area,
    Uniform,
}

/// Unnormalized sampling weight of every vertex for node `j`.
pub fn sampling_weights(body: &BodyModel, j: usize, hop_decay: f64, density: SamplingDensity) -> Vec<f64> {
    let hops = bfs_hops(&body.skeleton, j);
    (0..body.vertex_count())
        .map(|v| {
            let d = match density {
                SamplingDensity::Area => body.mesh.vertex_area(v),
                SamplingDensity::Uniform => 1.0,
            };
            d * hop_decay.powi(hops[body.mesh.region[v]] as i32)
        })
        .collect()
}

/// Weighted sampling without replacement (exponential-key method); `n` is
/// clamped to the number of positive weights.
pub fn sample_weighted(weights: &[f64], n: usize, seed: u64) -> Vec<usize> {
    let positive = weights.iter().filter(|w| **w > 0.0).count();
    let n = if n > positive {
        log::warn!("requested {n} samples but only {positive} vertices have positive weight; clamping");
        positive
    } else {
        n
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keys: Vec<(f64, usize)> = weights
        .iter()
        .enumerate()
        .map(|(i, &w)| {
            let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
            (if w > 0.0 { u.ln() / w } else { f64::NEG_INFINITY }, i)
        })
        .collect();
    keys.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    keys.into_iter().take(n).map(|(_, i)| i).collect()
}

pub fn sample_mesh_vertices(body: &BodyModel, j: usize, n: usize, seed: u64, hop_decay: f64) -> Vec<usize> {
    sample_weighted(&sampling_weights(body, j, hop_decay, SamplingDensity::Area), n, seed)
}

/// A motion with its forward kinematics, targets and 24 joint IMUs.
#[derive(Debug, Clone)]
pub struct PreparedSequence {
    pub motion: MotionSequence,
    pub posed: PosedMotion,
    pub gt: KinematicsGT,
    pub joint_tracks: Vec<ImuTrack>,
}

impl PreparedSequence {
    pub fn new(body: &BodyModel, motion: &MotionSequence) -> Result<Self> {
        let posed = PosedMotion::new(body, motion)?;
        let gt = kinematics_ground_truth_posed(body, &posed, motion);
        let joint_tracks = (0..JOINT_COUNT)
            .map(|j| synthesize_joint_imu_posed(body, &posed, j))
            .collect::<Result<Vec<_>>>()?;
        Ok(PreparedSequence {
            motion: motion.clone(),
            posed,
            gt,
            joint_tracks,
        })
    }

    pub fn len(&self) -> usize {
        self.gt.frames
    }

    pub fn is_empty(&self) -> bool {
        self.gt.frames == 0
    }
}

pub fn prepare_corpus(body: &BodyModel, motions: &[MotionSequence]) -> Result<Vec<PreparedSequence>> {
    ensure!(!motions.is_empty(), "training corpus is empty");
    motions.par_iter().map(|m| PreparedSequence::new(body, m)).collect()
}

pub fn window_track(track: &ImuTrack, start: usize, len: usize) -> ImuTrack {
    ImuTrack {
        accel: track.accel[start..start + len].to_vec(),
        orient: track.orient[start..start + len].to_vec(),
        ..track.clone()
    }
}

/// Parameters, optimizer state and progress counters.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub model: ModelParams,
    pub optimizer: Option<AdamState>,
    pub phase1_steps_done: u64,
    pub phase2_steps_done: u64,
}

impl TrainState {
    pub fn fresh(model: ModelParams) -> Self {
        TrainState {
            model,
            optimizer: None,
            phase1_steps_done: 0,
            phase2_steps_done: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub step: u64,
    pub kinematic: f64,
    pub pose: f64,
    pub align: f64,
    pub total: f64,
}

pub fn loss_log_text(log: &[LossRecord]) -> String {
    let mut out = String::new();
    for r in log {
        let _ = writeln!(out, "{} {:.9e} {:.9e} {:.9e}", r.step, r.kinematic, r.pose, r.align);
    }
    out
}

pub fn write_loss_log(log: &[LossRecord], path: &Path) -> Result<()> {
    std::fs::write(path, loss_log_text(log)).map_err(|e| Error::io(path, e))
}

fn plateaued(log: &[LossRecord], window: usize, tolerance: f64) -> bool {
    if window == 0 || log.len() < 2 * window || log.len() % window != 0 {
        return false;
    }
    let mean = |s: &[LossRecord]| s.iter().map(|r| r.total).sum::<f64>() / s.len() as f64;
    let n = log.len();
    let prev = mean(&log[n - 2 * window..n - window]);
    let last = mean(&log[n - window..]);
    (prev - last) < tolerance * prev.abs()
}

fn pick_window(rng: &mut ChaCha8Rng, corpus: &[PreparedSequence], window: usize) -> (usize, usize, usize) {
    let seq = rng.gen_range(0..corpus.len());
    let frames = corpus[seq].len();
    let len = window.min(frames);
    let start = rng.gen_range(0..=frames - len);
    (seq, start, len)
}

/// Adds the phase-1 gradient of one window to `grads`; returns the mean
/// kinematic loss and the pose loss.
fn phase1_window_grads(
    model: &ModelParams,
    body: &BodyModel,
    data: &PreparedSequence,
    start: usize,
    len: usize,
    config: &TrainConfig,
    grads: &mut [Tensor],
) -> Result<(f64, f64)> {
    let gt = data.gt.window(start, len);
    let mut nodes: Vec<(Session, Var, Var)> = (0..JOINT_COUNT)
        .into_par_iter()
        .map(|j| -> Result<(Session, Var, Var)> {
            let mut s = Session::new(model, true);
            let track = window_track(&data.joint_tracks[j], start, len);
            let out = node_forward(&mut s, j, &track, body)?;
            let kin = kinematic_loss(&mut s.g, &out.preds, &gt, j)?;
            Ok((s, out.z, kin))
        })
        .collect::<Result<_>>()?;

    let mut pr = Session::new(model, true);
    let zs: Vec<Var> = nodes.iter().map(|(s, z, _)| pr.g.leaf(s.g.value(*z).clone(), true)).collect();
    let pose_out = pr_forward(&mut pr, &zs)?;
    let pose = pose_loss(&mut pr.g, pose_out, &matrix(len, 144, gt.global_pose()))?;
    let weighted = pr.g.scale(pose, config.lambda_pose);
    pr.g.backward(weighted)?;
    let upstream: Vec<Tensor> = zs.iter().map(|z| pr.g.grad(*z).cloned().expect("feature gradient")).collect();

    let kin_scale = config.lambda_kinematic / JOINT_COUNT as f64;
    nodes
        .par_iter_mut()
        .zip(upstream.into_par_iter())
        .try_for_each(|((s, z, kin), up)| -> Result<()> {
            let up = s.g.constant(up);
            let inj = s.g.hadamard(*z, up)?;
            let inj = s.g.sum(inj);
            let k = s.g.scale(*kin, kin_scale);
            let loss = s.g.add(k, inj)?;
            s.g.backward(loss)
        })?;

    pr.accumulate_grads(grads);
    let mut kin_sum = 0.0;
    for (s, _, kin) in &nodes {
        s.accumulate_grads(grads);
        kin_sum += s.g.value(*kin).item();
    }
    Ok((kin_sum / JOINT_COUNT as f64, pr.g.value(pose).item()))
}

/// Joint-IMU training with kinematic and pose losses. Each step draws one
/// window per sequence, runs all 24 nodes and the pose regressor on each,
/// and applies one Adam update with the gradient averaged over sequences. Per-node graphs run in parallel; the pose-loss gradient with
/// respect to each node feature is injected back into that node's graph.
pub fn train_phase1(
    state: &TrainState,
    body: &BodyModel,
    corpus: &[PreparedSequence],
    config: &TrainConfig,
) -> Result<(TrainState, Vec<LossRecord>)> {
    ensure!(!corpus.is_empty(), "training corpus is empty");
    config.validate()?;
    let mut state = state.clone();
    if config.phase1_steps == 0 {
        return Ok((state, Vec::new()));
    }
    let mut adam = state.optimizer.take().unwrap_or_else(|| config.new_optimizer(&state.model));
    adam.lr = config.lr;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5045_3101 ^ state.phase1_steps_done.wrapping_mul(0x9E37_79B9));
    let mut log = Vec::with_capacity(config.phase1_steps);
    for _ in 0..config.phase1_steps {
        let windows: Vec<(usize, usize)> = corpus
            .iter()
            .map(|data| {
                let len = config.bptt_window.min(data.len());
                (rng.gen_range(0..=data.len() - len), len)
            })
            .collect();
        let mut grads: Vec<Tensor> = state.model.tensors.iter().map(|t| Tensor::zeros(t.shape())).collect();
        let (mut kin_mean, mut pose_v) = (0.0, 0.0);
        for (data, &(start, len)) in corpus.iter().zip(&windows) {
            let (k, p) = phase1_window_grads(&state.model, body, data, start, len, config, &mut grads)?;
            kin_mean += k;
            pose_v += p;
        }
        let n = corpus.len() as f64;
        grads.iter_mut().for_each(|g| g.data_mut().iter_mut().for_each(|x| *x /= n));
        kin_mean /= n;
        pose_v /= n;

        adam_step(&mut state.model.tensors, &grads, &mut adam, None)?;
        state.phase1_steps_done += 1;
        log.push(LossRecord {
            step: state.phase1_steps_done,
            kinematic: kin_mean,
            pose: pose_v,
            align: 0.0,
            total: config.lambda_kinematic * kin_mean + config.lambda_pose * pose_v,
        });
        if plateaued(&log, config.plateau_window, config.plateau_tolerance) {
            log::info!("phase 1 plateaued after {} steps", log.len());
            break;
        }
    }
    state.optimizer = Some(adam);
    Ok((state, log))
}

/// Mesh-IMU training. Each round draws one window, fills the buffer and
/// the reference set from the joint IMUs, then visits the 24 nodes in
/// order; each visit is one optimizer step over that node's mesh samples
/// plus its joint-IMU kinematic term, with kinematic-head parameters
/// frozen. The visited slot then holds the detached mesh feature.
pub fn train_phase2(
    state: &TrainState,
    body: &BodyModel,
    corpus: &[PreparedSequence],
    config: &TrainConfig,
) -> Result<(TrainState, Vec<LossRecord>)> {
    ensure!(!corpus.is_empty(), "training corpus is empty");
    ensure!(
        state.phase1_steps_done > 0,
        "phase 2 requires a phase-1 checkpoint; run `train --phase 1` first"
    );
    config.validate()?;
    let mut state = state.clone();
    if config.phase2_steps == 0 {
        return Ok((state, Vec::new()));
    }
    let frozen: Vec<bool> = (0..state.model.tensors.len()).map(|i| state.model.is_kinematic_head(i)).collect();
    let mut adam = state.optimizer.take().unwrap_or_else(|| config.new_optimizer(&state.model));
    adam.lr = config.lr;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5045_3202 ^ state.phase2_steps_done.wrapping_mul(0x9E37_79B9));
    let per_node = (config.mesh_samples / JOINT_COUNT).max(1);
    let mut log = Vec::with_capacity(config.phase2_steps);
    'rounds: loop {
        let (seq, start, len) = pick_window(&mut rng, corpus, config.bptt_window);
        let data = &corpus[seq];
        let gt = data.gt.window(start, len);
        let joint_tracks: Vec<ImuTrack> = data.joint_tracks.iter().map(|t| window_track(t, start, len)).collect();
        let refs: Vec<Tensor> = (0..JOINT_COUNT)
            .into_par_iter()
            .map(|j| evaluate_node(&state.model, j, &joint_tracks[j], body, ForwardOptions::default()).map(|v| v.z))
            .collect::<Result<_>>()?;
        let mut buffer = NodeBuffer::from_features(refs.clone())?;
        let round_seed: u64 = rng.gen();
        for j in 0..JOINT_COUNT {
            let ids = sample_mesh_vertices(body, j, per_node, round_seed ^ j as u64, config.hop_decay);
            let tracks = ids
                .iter()
                .map(|&v| synthesize_mesh_imu_posed(body, &data.posed, v).map(|t| window_track(&t, start, len)))
                .collect::<Result<Vec<_>>>()?;
            let model = &state.model;
            let mut s = Session::new(model, true);
            let mut terms = Vec::with_capacity(tracks.len());
            for t in &tracks {
                terms.push(total_node_loss(&mut s, j, t, &gt, &buffer, Some(&refs[j]), config, body)?);
            }
            let mut loss = terms[0].total;
            for t in &terms[1..] {
                loss = s.g.add(loss, t.total)?;
            }
            loss = s.g.scale(loss, 1.0 / terms.len() as f64);
            let joint_out = node_forward(&mut s, j, &joint_tracks[j], body)?;
            let joint_kin = kinematic_loss(&mut s.g, &joint_out.preds, &gt, j)?;
            let jk = s.g.scale(joint_kin, config.lambda_kinematic);
            loss = s.g.add(loss, jk)?;
            s.g.backward(loss)?;
            let grads = s.param_grads();
            let avg = |f: &dyn Fn(&NodeLossTerms) -> Option<Var>| {
                terms.iter().map(|t| f(t).map_or(0.0, |v| s.g.value(v).item())).sum::<f64>() / terms.len() as f64
            };
            let record_kin = avg(&|t| Some(t.kinematic));
            let record_pose = avg(&|t| Some(t.pose));
            let record_align = avg(&|t| t.align);
            let total = s.g.value(loss).item();
            let mesh_feature = s.g.value(terms[0].z).clone();
            drop(s);

            adam_step(&mut state.model.tensors, &grads, &mut adam, Some(&frozen))?;
            buffer.set(j, mesh_feature, Provenance::MeshImu);
            state.phase2_steps_done += 1;
            log.push(LossRecord {
                step: state.phase2_steps_done,
                kinematic: record_kin,
                pose: record_pose,
                align: record_align,
                total,
            });
            if log.len() >= config.phase2_steps {
                break 'rounds;
            }
        }
    }
    state.optimizer = Some(adam);
    Ok((state, log))
}

/// Phase-1 objective on fixed windows: every sequence is cut into
/// consecutive `bptt_window`-frame windows (the last may be shorter) and
/// the loss is averaged over all of them.
pub fn phase1_eval_loss(
    model: &ModelParams,
    body: &BodyModel,
    corpus: &[PreparedSequence],
    config: &TrainConfig,
) -> Result<LossRecord> {
    ensure!(!corpus.is_empty(), "evaluation corpus is empty");
    let mut windows = Vec::new();
    for (i, data) in corpus.iter().enumerate() {
        let mut start = 0;
        while start < data.len() {
            let len = config.bptt_window.min(data.len() - start);
            windows.push((i, start, len));
            start += len;
        }
    }
    let records = windows
        .par_iter()
        .map(|&(i, start, len)| -> Result<(f64, f64)> {
            let data = &corpus[i];
            let gt = data.gt.window(start, len);
            let mut kin = 0.0;
            let mut features = Vec::with_capacity(JOINT_COUNT);
            for j in 0..JOINT_COUNT {
                let track = window_track(&data.joint_tracks[j], start, len);
                let out = evaluate_node(model, j, &track, body, ForwardOptions::default())?;
                let mut g = Graph::new();
                let preds = KinematicPreds {
                    velocity: g.constant(out.velocity),
                    position: g.constant(out.position),
                    local_orientation: g.constant(out.local_orientation),
                    global_orientation: g.constant(out.global_orientation),
                    root_velocity: g.constant(out.root_velocity),
                };
                let k = kinematic_loss(&mut g, &preds, &gt, j)?;
                kin += g.value(k).item();
                features.push(out.z);
            }
            let pose = crate::net::evaluate_pose(model, &features)?;
            let mut g = Graph::new();
            let p = g.constant(pose);
            let l = pose_loss(&mut g, p, &matrix(len, 144, gt.global_pose()))?;
            Ok((kin / JOINT_COUNT as f64, g.value(l).item()))
        })
        .collect::<Result<Vec<_>>>()?;
    let n = records.len() as f64;
    let kinematic = records.iter().map(|r| r.0).sum::<f64>() / n;
    let pose = records.iter().map(|r| r.1).sum::<f64>() / n;
    Ok(LossRecord {
        step: 0,
        kinematic,
        pose,
        align: 0.0,
        total: config.lambda_kinematic * kinematic + config.lambda_pose * pose,
    })
}

/// Mean alignment loss of node features for mesh placements against the
/// joint-IMU reference features, over `(joint, vertex)` pairs and every
/// sequence of `corpus`.
pub fn mean_alignment_loss(
    model: &ModelParams,
    body: &BodyModel,
    corpus: &[PreparedSequence],
    pairs: &[(usize, usize)],
) -> Result<f64> {
    ensure!(!pairs.is_empty() && !corpus.is_empty(), "mean_alignment_loss needs pairs and sequences");
    let losses: Vec<f64> = pairs
        .par_iter()
        .map(|&(j, v)| -> Result<f64> {
            let mut acc = 0.0;
            for data in corpus {
                let z_ref = evaluate_node(model, j, &data.joint_tracks[j], body, ForwardOptions::default())?.z;
                let track = synthesize_mesh_imu_posed(body, &data.posed, v)?;
                let z = evaluate_node(model, j, &track, body, ForwardOptions::default())?.z;
                let mut g = Graph::new();
                let zv = g.constant(z);
                let (a, _) = alignment_loss(&mut g, zv, &z_ref)?;
                acc += g.value(a).item();
            }
            Ok(acc / corpus.len() as f64)
        })
        .collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}
