//! Metrics, end-to-end inference from arbitrary placements and placement
//! sweeps.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;

use crate::body_model::{BodyModel, JOINT_COUNT};
use crate::checkpoint::model_fingerprint;
use crate::error::{ensure, Error, Result};
use crate::math::{Mat3, Vec3};
use crate::matchmaker::{assign_devices, Device, DeviceSet, DeviceSource, LossTable};
use crate::net::{evaluate_node, evaluate_pose, ForwardOptions, ModelParams};
use crate::trainer::PreparedSequence;
use crate::vimu_synth::{synthesize_joint_imu_posed, synthesize_mesh_imu_posed, ImuTrack};

/// Joints excluded from the angular error: root, feet, wrists and hands.
pub const DEFAULT_GAE_MASK: [usize; 7] = [0, 10, 11, 20, 21, 22, 23];

pub type Rotations = [Mat3; JOINT_COUNT];

/// Geodesic angle between two rotations in degrees.
///
/// Equal to `arccos((trace(gtᵀ·pred) − 1) / 2)`, evaluated through the
/// skew part as well so it stays accurate near 0° and 180°.
pub fn rotation_angle_deg(pred: &Mat3, gt: &Mat3) -> f64 {
    let m = (gt.transpose() * *pred).0;
    let c = ((m[0][0] + m[1][1] + m[2][2] - 1.0) / 2.0).clamp(-1.0, 1.0);
    let s = 0.5 * ((m[2][1] - m[1][2]).powi(2) + (m[0][2] - m[2][0]).powi(2) + (m[1][0] - m[0][1]).powi(2)).sqrt();
    s.atan2(c).to_degrees()
}

/// Mean geodesic angle in degrees over frames and joints not in `mask`.
pub fn global_angular_error(pred: &[Rotations], gt: &[Rotations], mask: &[usize]) -> Result<f64> {
    ensure!(
        pred.len() == gt.len(),
        "angular error: {} predicted frames, {} ground-truth frames",
        pred.len(),
        gt.len()
    );
    ensure!(!pred.is_empty(), "angular error needs at least one frame");
    let joints: Vec<usize> = (0..JOINT_COUNT).filter(|j| !mask.contains(j)).collect();
    ensure!(!joints.is_empty(), "angular error mask excludes every joint");
    let mut total = 0.0;
    for (p, g) in pred.iter().zip(gt) {
        for &j in &joints {
            total += rotation_angle_deg(&p[j], &g[j]);
        }
    }
    Ok(total / (joints.len() * pred.len()) as f64)
}

/// `‖pred[t] − gt[t]‖` after shifting both series to start at the origin.
pub fn cumulative_translation_error(pred: &[Vec3], gt: &[Vec3]) -> Result<Vec<f64>> {
    ensure!(
        pred.len() == gt.len(),
        "translation error: {} predicted frames, {} ground-truth frames",
        pred.len(),
        gt.len()
    );
    let (Some(&p0), Some(&g0)) = (pred.first(), gt.first()) else {
        return Ok(Vec::new());
    };
    Ok(pred.iter().zip(gt).map(|(p, g)| ((*p - p0) - (*g - g0)).norm()).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoseEstimate {
    pub orientations: Vec<Rotations>,
    pub translation: Vec<Vec3>,
    pub fps: u32,
}

impl PoseEstimate {
    pub fn len(&self) -> usize {
        self.orientations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.orientations.is_empty()
    }
}

pub fn ground_truth_rotations(data: &PreparedSequence) -> Vec<Rotations> {
    (0..data.gt.frames)
        .map(|t| std::array::from_fn(|j| data.gt.global_rotation(t, j)))
        .collect()
}

/// Assigns devices, runs each node on its device's track, regresses the
/// pose and integrates the mean root velocity.
pub fn infer_pose(
    model: &ModelParams,
    body: &BodyModel,
    table: &LossTable,
    devices: &DeviceSet,
    tracks: &[ImuTrack],
    opts: ForwardOptions,
) -> Result<PoseEstimate> {
    table.verify(body, &model_fingerprint(model))?;
    infer_pose_unchecked(model, body, table, devices, tracks, opts)
}

fn infer_pose_unchecked(
    model: &ModelParams,
    body: &BodyModel,
    table: &LossTable,
    devices: &DeviceSet,
    tracks: &[ImuTrack],
    opts: ForwardOptions,
) -> Result<PoseEstimate> {
    ensure!(
        tracks.len() == devices.devices.len(),
        "{} tracks for {} devices",
        tracks.len(),
        devices.devices.len()
    );
    let fps = tracks[0].fps;
    let frames = tracks[0].len();
    for t in tracks {
        if t.fps != fps {
            return Err(Error::Validation(format!("track frame rates differ: {} vs {fps}", t.fps)));
        }
        ensure!(t.len() == frames, "track lengths differ: {} vs {frames}", t.len());
    }
    let assignment = assign_devices(table, body, devices)?;
    let nodes = (0..JOINT_COUNT)
        .into_par_iter()
        .map(|j| {
            let k = devices
                .devices
                .iter()
                .position(|d| d.id == assignment[j])
                .expect("assigned id comes from the set");
            let mut track = tracks[k].clone();
            track.placement = devices.devices[k].placement;
            evaluate_node(model, j, &track, body, opts)
        })
        .collect::<Result<Vec<_>>>()?;
    let features: Vec<_> = nodes.iter().map(|n| n.z.clone()).collect();
    let pose = evaluate_pose(model, &features)?;
    let orientations = (0..frames)
        .map(|t| std::array::from_fn(|j| Mat3::from_6d(&pose.row_slice(t)[6 * j..6 * j + 6])))
        .collect();
    let mut translation = Vec::with_capacity(frames);
    let mut pos = Vec3::ZERO;
    for t in 0..frames {
        if t > 0 {
            let mut v = Vec3::ZERO;
            for n in &nodes {
                v = v + Vec3(n.root_velocity.row_slice(t).try_into().expect("3 columns"));
            }
            pos = pos + v.scale(1.0 / (JOINT_COUNT as f64 * fps as f64));
        }
        translation.push(pos);
    }
    Ok(PoseEstimate {
        orientations,
        translation,
        fps,
    })
}

pub fn device_track(body: &BodyModel, data: &PreparedSequence, device: &Device) -> Result<ImuTrack> {
    let mut track = match device.source {
        DeviceSource::Vertex(v) => synthesize_mesh_imu_posed(body, &data.posed, v)?,
        DeviceSource::Joint(j) => synthesize_joint_imu_posed(body, &data.posed, j)?,
    };
    track.placement = device.placement;
    Ok(track)
}

/// Vertex on the bone from `joint` to its primary child closest to the
/// point at `fraction` of the way along it.
pub fn bone_station(body: &BodyModel, joint: usize, fraction: f64) -> Result<usize> {
    let child = body
        .skeleton
        .primary_child(joint)
        .ok_or_else(|| Error::Validation(format!("joint {joint} has no child bone")))?;
    let (a, b) = (body.tpose_joint_pos[joint], body.tpose_joint_pos[child]);
    let target = a + (b - a).scale(fraction);
    let mut best = (f64::INFINITY, usize::MAX);
    for v in 0..body.vertex_count() {
        let bone = &body.mesh.bones[body.mesh.bone_of_vertex[v]];
        if bone.proximal != joint || bone.distal != Some(child) {
            continue;
        }
        let d = (body.mesh.vertices_rest[v] - target).norm();
        if d < best.0 {
            best = (d, v);
        }
    }
    ensure!(best.1 != usize::MAX, "no vertices on bone {joint}→{child}");
    Ok(best.1)
}

/// Six devices at conventional spots: pelvis, head, both wrists, both shanks.
pub fn conventional_devices(body: &BodyModel) -> Result<DeviceSet> {
    let spots = [(0usize, 0.3), (15, 0.5), (18, 0.85), (19, 0.85), (4, 0.5), (5, 0.5)];
    let devices = spots
        .iter()
        .enumerate()
        .map(|(id, &(j, f))| {
            let v = if j == 15 {
                head_vertex(body)
            } else {
                bone_station(body, j, f)?
            };
            Ok(Device::at_vertex(id, body, v))
        })
        .collect::<Result<Vec<_>>>()?;
    DeviceSet::new(devices)
}

fn head_vertex(body: &BodyModel) -> usize {
    let ext = body.leaf_extensions.iter().find(|e| e.joint == 15).expect("head extension");
    let mut best = (f64::INFINITY, 0);
    for v in 0..body.vertex_count() {
        if body.mesh.region[v] != 15 || v == ext.vertex {
            continue;
        }
        let d = (body.mesh.vertices_rest[v] - ext.rest_position).norm();
        if d < best.0 {
            best = (d, v);
        }
    }
    best.1
}

/// The same six spots as joint-coincident devices.
pub fn joint_devices(body: &BodyModel) -> DeviceSet {
    let devices = [0usize, 15, 18, 19, 4, 5]
        .iter()
        .enumerate()
        .map(|(id, &j)| Device::at_joint(id, body, j))
        .collect();
    DeviceSet { devices }
}

/// One placement variant of a sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepVariant {
    pub label: String,
    pub devices: DeviceSet,
}

/// Conventional set with device `slot` moved to `stations` evenly spaced
/// points along the bone starting at `joint`.
pub fn limb_sweep(body: &BodyModel, slot: usize, joint: usize, stations: usize) -> Result<Vec<SweepVariant>> {
    let base = conventional_devices(body)?;
    (0..stations)
        .map(|k| {
            let f = (k as f64 + 0.5) / stations as f64;
            let v = bone_station(body, joint, f)?;
            let mut devices = base.clone();
            devices.devices[slot] = Device::at_vertex(devices.devices[slot].id, body, v);
            Ok(SweepVariant {
                label: format!("{}@{:.2}", crate::body_model::JOINT_NAMES[joint], f),
                devices,
            })
        })
        .collect()
}

/// Ten variants: five stations on the left forearm, five on the right shank.
pub fn default_sweep(body: &BodyModel) -> Result<Vec<SweepVariant>> {
    let mut v = limb_sweep(body, 2, 18, 5)?;
    v.extend(limb_sweep(body, 5, 5, 5)?);
    Ok(v)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub label: String,
    pub gae_deg: f64,
    pub final_translation_error_m: f64,
}

pub fn evaluate_devices(
    model: &ModelParams,
    body: &BodyModel,
    table: &LossTable,
    corpus: &[PreparedSequence],
    devices: &DeviceSet,
    opts: ForwardOptions,
) -> Result<(f64, f64)> {
    ensure!(!corpus.is_empty(), "evaluation corpus is empty");
    let mut gae = 0.0;
    let mut drift = 0.0;
    for data in corpus {
        let tracks = devices
            .devices
            .iter()
            .map(|d| device_track(body, data, d))
            .collect::<Result<Vec<_>>>()?;
        let est = infer_pose_unchecked(model, body, table, devices, &tracks, opts)?;
        gae += global_angular_error(&est.orientations, &ground_truth_rotations(data), &DEFAULT_GAE_MASK)?;
        let err = cumulative_translation_error(&est.translation, &data.gt.root_translation)?;
        drift += err.last().copied().unwrap_or(0.0);
    }
    let n = corpus.len() as f64;
    Ok((gae / n, drift / n))
}

/// Angular error per placement variant, averaged over the corpus.
pub fn placement_sweep(
    model: &ModelParams,
    body: &BodyModel,
    table: &LossTable,
    corpus: &[PreparedSequence],
    variants: &[SweepVariant],
    opts: ForwardOptions,
) -> Result<Vec<SweepRow>> {
    table.verify(body, &model_fingerprint(model))?;
    variants
        .iter()
        .map(|v| {
            let (gae, drift) = evaluate_devices(model, body, table, corpus, &v.devices, opts)?;
            Ok(SweepRow {
                label: v.label.clone(),
                gae_deg: gae,
                final_translation_error_m: drift,
            })
        })
        .collect()
}

pub fn report_text(rows: &[SweepRow]) -> String {
    let mut out = String::from("# placement gae_deg final_translation_error_m\n");
    for r in rows {
        let _ = writeln!(out, "{} {:.2} {:.3}", r.label, r.gae_deg, r.final_translation_error_m);
    }
    out
}

pub fn pose_to_text(p: &PoseEstimate) -> String {
    let mut out = format!("fps {} frames {}\n", p.fps, p.len());
    for (rots, tr) in p.orientations.iter().zip(&p.translation) {
        let mut vals: Vec<String> = Vec::with_capacity(JOINT_COUNT * 9 + 3);
        for r in rots {
            for row in r.0 {
                vals.extend(row.iter().map(|x| format!("{x:?}")));
            }
        }
        vals.extend(tr.0.iter().map(|x| format!("{x:?}")));
        let _ = writeln!(out, "{}", vals.join(" "));
    }
    out
}

pub fn pose_from_text(text: &str, origin: &str) -> Result<PoseEstimate> {
    let mut lines = text.lines();
    let head: Vec<&str> = lines.next().unwrap_or("").split_whitespace().collect();
    if head.len() != 4 || head[0] != "fps" || head[2] != "frames" {
        return Err(Error::parse(origin, 1, "expected `fps N frames T`"));
    }
    let fps: u32 = head[1].parse().map_err(|_| Error::parse(origin, 1, "bad fps"))?;
    let frames: usize = head[3].parse().map_err(|_| Error::parse(origin, 1, "bad frame count"))?;
    let mut orientations = Vec::with_capacity(frames);
    let mut translation = Vec::with_capacity(frames);
    for t in 0..frames {
        let ln = t + 2;
        let line = lines.next().ok_or_else(|| Error::parse(origin, ln, "missing frame"))?;
        let v = line
            .split_whitespace()
            .map(|x| x.parse::<f64>().map_err(|_| Error::parse(origin, ln, format!("bad value '{x}'"))))
            .collect::<Result<Vec<_>>>()?;
        if v.len() != JOINT_COUNT * 9 + 3 {
            return Err(Error::parse(origin, ln, format!("expected {} values, got {}", JOINT_COUNT * 9 + 3, v.len())));
        }
        orientations.push(std::array::from_fn(|j| {
            let b = &v[9 * j..9 * j + 9];
            Mat3([[b[0], b[1], b[2]], [b[3], b[4], b[5]], [b[6], b[7], b[8]]])
        }));
        let o = JOINT_COUNT * 9;
        translation.push(Vec3::new(v[o], v[o + 1], v[o + 2]));
    }
    Ok(PoseEstimate {
        orientations,
        translation,
        fps,
    })
}

pub fn write_pose(p: &PoseEstimate, path: &Path) -> Result<()> {
    std::fs::write(path, pose_to_text(p)).map_err(|e| Error::io(path, e))
}

pub fn read_pose(path: &Path) -> Result<PoseEstimate> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    pose_from_text(&text, &path.display().to_string())
}
