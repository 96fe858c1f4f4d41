//! Virtual IMU synthesis from posed body trajectories.
//!
//! Mesh IMUs sit on a vertex: position comes from linear blend skinning and
//! orientation from the incident face normals and the underlying bone. Joint
//! IMUs borrow the child joint's trajectory and keep the joint's own
//! orientation. Accelerations are central second differences in the world
//! frame without gravity; orientations are T-pose calibrated.

use std::fmt::Write as _;
use std::path::Path;

use crate::body_model::{forward_kinematics, skin_vertex, BodyModel, Transform, JOINT_COUNT};
use crate::error::{ensure, Error, Result};
use crate::math::{any_orthogonal, Mat3, Quat, Vec3};
use crate::motion_gen::MotionSequence;

/// Acceleration scale applied when packing network channels, m/s².
pub const ACCEL_SCALE: f64 = 9.81;
pub const CHANNELS: usize = 9;
/// Placements may sit this far outside the rest-vertex bounding box.
pub const BOUNDS_TOLERANCE: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlacementCoordinate {
    pub r: Vec3,
    pub region: usize,
}

impl PlacementCoordinate {
    /// Placement at an arbitrary point; the region is that of the nearest
    /// rest vertex.
    pub fn at_point(body: &BodyModel, r: Vec3) -> Result<Self> {
        let v = crate::matchmaker::nearest_vertex(body, r)?;
        Ok(PlacementCoordinate {
            r,
            region: body.mesh.region[v],
        })
    }

    pub fn at_vertex(body: &BodyModel, v: usize) -> Self {
        PlacementCoordinate {
            r: body.mesh.vertices_rest[v],
            region: body.mesh.region[v],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImuTrack {
    pub placement: PlacementCoordinate,
    /// World-frame acceleration, m/s².
    pub accel: Vec<Vec3>,
    pub orient: Vec<Quat>,
    pub fps: u32,
    /// Frames where the face normal was parallel to the bone and the
    /// orientation fell back to the previous frame's axis.
    pub degenerate_frames: usize,
}

impl ImuTrack {
    pub fn len(&self) -> usize {
        self.accel.len()
    }

    pub fn is_empty(&self) -> bool {
        self.accel.is_empty()
    }
}

/// Forward kinematics for every frame of a motion, computed once and shared
/// by all placements synthesized from it.
#[derive(Debug, Clone)]
pub struct PosedMotion {
    pub fps: u32,
    pub transforms: Vec<[Transform; JOINT_COUNT]>,
    pub calibration_frame: usize,
}

impl PosedMotion {
    pub fn new(body: &BodyModel, motion: &MotionSequence) -> Result<Self> {
        motion.validate()?;
        let transforms = motion
            .frames
            .iter()
            .map(|f| forward_kinematics(&body.skeleton, f))
            .collect::<Result<Vec<_>>>()?;
        Ok(PosedMotion {
            fps: motion.fps,
            transforms,
            calibration_frame: motion.calibration_frame(),
        })
    }

    pub fn len(&self) -> usize {
        self.transforms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transforms.is_empty()
    }
}

/// `(p[t+1] − 2p[t] + p[t−1])·fps²`; endpoints copy the nearest interior value.
pub fn second_difference(p: &[Vec3], fps: f64) -> Vec<Vec3> {
    let n = p.len();
    assert!(n >= 3, "second difference needs 3 samples");
    let mut out = vec![Vec3::ZERO; n];
    for t in 1..n - 1 {
        out[t] = (p[t + 1] - p[t].scale(2.0) + p[t - 1]).scale(fps * fps);
    }
    out[0] = out[1];
    out[n - 1] = out[n - 2];
    out
}

/// `(p[t+1] − p[t−1])·fps/2`; endpoints copy the nearest interior value.
pub fn first_difference(p: &[Vec3], fps: f64) -> Vec<Vec3> {
    let n = p.len();
    assert!(n >= 3, "first difference needs 3 samples");
    let mut out = vec![Vec3::ZERO; n];
    for t in 1..n - 1 {
        out[t] = (p[t + 1] - p[t - 1]).scale(0.5 * fps);
    }
    out[0] = out[1];
    out[n - 1] = out[n - 2];
    out
}

/// Surface frame at a vertex: `y` is the mean incident face normal, `z` is
/// perpendicular to the bone direction and `y`, `x = y × z`. Columns are
/// `[x, y, z]`. Returns `None` when the bone is parallel to the normal.
fn surface_frame(body: &BodyModel, v: usize, transforms: &[Transform; JOINT_COUNT]) -> (Vec3, Option<Vec3>) {
    let mesh = &body.mesh;
    let mut normal = Vec3::ZERO;
    for &f in mesh.incident_faces(v) {
        let [a, b, c] = mesh.faces[f];
        let (pa, pb, pc) = (
            skin_vertex(body, a, transforms),
            skin_vertex(body, b, transforms),
            skin_vertex(body, c, transforms),
        );
        normal = normal + (pb - pa).cross(pc - pa).normalized();
    }
    let y = normal.normalized();
    let bone = mesh.bones[mesh.bone_of_vertex[v]];
    let b = transforms[bone.proximal].rot.mul_vec(bone.rest_direction());
    let zc = b.cross(y);
    if zc.norm() < 1e-8 {
        (y, None)
    } else {
        (y, Some(zc.normalized()))
    }
}

fn complete_frame(y: Vec3, z: Vec3) -> Mat3 {
    Mat3::from_cols(y.cross(z), y, z)
}

/// Orientation frame of a vertex for one pose.
pub fn vertex_orientation_frame(body: &BodyModel, v: usize, transforms: &[Transform; JOINT_COUNT]) -> Mat3 {
    let (y, z) = surface_frame(body, v, transforms);
    complete_frame(y, z.unwrap_or_else(|| any_orthogonal(y)))
}

/// `out[t] = raw[t] · tpose⁻¹`.
pub fn calibrate(raw: &[Quat], tpose: Quat) -> Vec<Quat> {
    let inv = tpose.conj();
    raw.iter().map(|&q| q * inv).collect()
}

fn check_vertex(body: &BodyModel, v: usize) -> Result<()> {
    ensure!(v < body.vertex_count(), "vertex {v} out of range (V = {})", body.vertex_count());
    Ok(())
}

/// Uncalibrated mesh IMU at vertex `v`.
pub fn synthesize_mesh_imu_raw(body: &BodyModel, posed: &PosedMotion, v: usize) -> Result<ImuTrack> {
    check_vertex(body, v)?;
    let positions: Vec<Vec3> = posed.transforms.iter().map(|g| skin_vertex(body, v, g)).collect();
    let mut orient = Vec::with_capacity(posed.len());
    let mut prev_z: Option<Vec3> = None;
    let mut degenerate = 0;
    for g in &posed.transforms {
        let (y, z) = surface_frame(body, v, g);
        let z = match z {
            Some(z) => z,
            None => {
                degenerate += 1;
                let fallback = prev_z.map(|pz| pz - y.scale(pz.dot(y))).filter(|pz| pz.norm() > 1e-8);
                fallback.map_or_else(|| any_orthogonal(y), Vec3::normalized)
            }
        };
        prev_z = Some(z);
        orient.push(Quat::from_mat3(&complete_frame(y, z)));
    }
    Ok(ImuTrack {
        placement: PlacementCoordinate::at_vertex(body, v),
        accel: second_difference(&positions, posed.fps as f64),
        orient,
        fps: posed.fps,
        degenerate_frames: degenerate,
    })
}

pub fn synthesize_mesh_imu_posed(body: &BodyModel, posed: &PosedMotion, v: usize) -> Result<ImuTrack> {
    let mut track = synthesize_mesh_imu_raw(body, posed, v)?;
    track.orient = calibrate(&track.orient, track.orient[posed.calibration_frame]);
    Ok(track)
}

pub fn synthesize_mesh_imu(body: &BodyModel, motion: &MotionSequence, v: usize) -> Result<ImuTrack> {
    synthesize_mesh_imu_posed(body, &PosedMotion::new(body, motion)?, v)
}

/// Where a joint node's IMU trajectory is sampled from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum JointSource {
    Joint(usize),
    Vertex(usize),
}

pub fn joint_source(body: &BodyModel, j: usize) -> JointSource {
    match body.skeleton.primary_child(j) {
        Some(c) => JointSource::Joint(c),
        None => {
            let ext = body
                .leaf_extensions
                .iter()
                .find(|e| e.joint == j)
                .expect("every leaf joint has an extension vertex");
            JointSource::Vertex(ext.vertex)
        }
    }
}

/// Rest position of a joint node's sampling point.
pub fn joint_placement_point(body: &BodyModel, j: usize) -> Vec3 {
    match joint_source(body, j) {
        JointSource::Joint(c) => body.tpose_joint_pos[c],
        JointSource::Vertex(v) => body.mesh.vertices_rest[v],
    }
}

pub fn joint_placement(body: &BodyModel, j: usize) -> PlacementCoordinate {
    PlacementCoordinate::at_point(body, joint_placement_point(body, j))
        .expect("joint sampling points lie inside the body bounds")
}

/// World positions of joint node `j`'s sampling point over the motion.
pub fn joint_trajectory(body: &BodyModel, posed: &PosedMotion, j: usize) -> Vec<Vec3> {
    match joint_source(body, j) {
        JointSource::Joint(c) => posed.transforms.iter().map(|g| g[c].pos).collect(),
        JointSource::Vertex(v) => posed.transforms.iter().map(|g| skin_vertex(body, v, g)).collect(),
    }
}

pub fn synthesize_joint_imu_raw(body: &BodyModel, posed: &PosedMotion, j: usize) -> Result<ImuTrack> {
    ensure!(j < JOINT_COUNT, "joint {j} out of range");
    let positions = joint_trajectory(body, posed, j);
    Ok(ImuTrack {
        placement: joint_placement(body, j),
        accel: second_difference(&positions, posed.fps as f64),
        orient: posed.transforms.iter().map(|g| g[j].quat).collect(),
        fps: posed.fps,
        degenerate_frames: 0,
    })
}

pub fn synthesize_joint_imu_posed(body: &BodyModel, posed: &PosedMotion, j: usize) -> Result<ImuTrack> {
    let mut track = synthesize_joint_imu_raw(body, posed, j)?;
    track.orient = calibrate(&track.orient, track.orient[posed.calibration_frame]);
    Ok(track)
}

pub fn synthesize_joint_imu(body: &BodyModel, motion: &MotionSequence, j: usize) -> Result<ImuTrack> {
    synthesize_joint_imu_posed(body, &PosedMotion::new(body, motion)?, j)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LeafVertex {
    pub joint: usize,
    pub vertex: usize,
    pub rest_position: Vec3,
}

/// Head top, fingertips and toe tips: leaf joint position plus the leaf bone
/// direction times the configured extension length, skinned with weight one
/// on the leaf joint.
pub fn leaf_extension_vertices(body: &BodyModel) -> [LeafVertex; 5] {
    body.leaf_extensions.map(|e| LeafVertex {
        joint: e.joint,
        vertex: e.vertex,
        rest_position: e.rest_position,
    })
}

/// Packs a calibrated track into `T × 9` network channels: scaled
/// acceleration then the 6D rotation.
pub fn encode_channels(track: &ImuTrack) -> Vec<f64> {
    let mut out = Vec::with_capacity(track.len() * CHANNELS);
    for (a, q) in track.accel.iter().zip(&track.orient) {
        out.extend(a.0.iter().map(|v| v / ACCEL_SCALE));
        out.extend(q.to_mat3().to_6d());
    }
    out
}

/// Per-joint kinematic targets, row-major per frame.
#[derive(Debug, Clone, PartialEq)]
pub struct JointKinematics {
    pub velocity: Vec<f64>,
    pub position: Vec<f64>,
    pub local_orientation: Vec<f64>,
    pub global_orientation: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KinematicsGT {
    pub frames: usize,
    pub fps: u32,
    pub joints: Vec<JointKinematics>,
    pub root_velocity: Vec<f64>,
    pub root_translation: Vec<Vec3>,
}

impl KinematicsGT {
    /// `T × 144` global 6D orientations in joint order.
    pub fn global_pose(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.frames * 6 * JOINT_COUNT);
        for t in 0..self.frames {
            for jk in &self.joints {
                out.extend_from_slice(&jk.global_orientation[6 * t..6 * t + 6]);
            }
        }
        out
    }

    /// Global rotation of joint `j` at frame `t`.
    pub fn global_rotation(&self, t: usize, j: usize) -> Mat3 {
        Mat3::from_6d(&self.joints[j].global_orientation[6 * t..6 * t + 6])
    }

    /// Copy restricted to frames `start..start + len`.
    pub fn window(&self, start: usize, len: usize) -> KinematicsGT {
        let cut = |v: &Vec<f64>, w: usize| v[start * w..(start + len) * w].to_vec();
        KinematicsGT {
            frames: len,
            fps: self.fps,
            joints: self
                .joints
                .iter()
                .map(|j| JointKinematics {
                    velocity: cut(&j.velocity, 3),
                    position: cut(&j.position, 3),
                    local_orientation: cut(&j.local_orientation, 6),
                    global_orientation: cut(&j.global_orientation, 6),
                })
                .collect(),
            root_velocity: cut(&self.root_velocity, 3),
            root_translation: self.root_translation[start..start + len].to_vec(),
        }
    }
}

pub fn kinematics_ground_truth_posed(body: &BodyModel, posed: &PosedMotion, motion: &MotionSequence) -> KinematicsGT {
    let fps = posed.fps as f64;
    let flat = |v: &[Vec3]| v.iter().flat_map(|p| p.0).collect::<Vec<f64>>();
    let roots: Vec<Vec3> = posed.transforms.iter().map(|g| g[0].pos).collect();
    let joints = (0..JOINT_COUNT)
        .map(|j| {
            let traj = joint_trajectory(body, posed, j);
            let rel: Vec<Vec3> = traj.iter().zip(&roots).map(|(p, r)| *p - *r).collect();
            JointKinematics {
                velocity: flat(&first_difference(&traj, fps)),
                position: flat(&rel),
                local_orientation: motion
                    .frames
                    .iter()
                    .flat_map(|f| f.local_rotation[j].to_mat3().to_6d())
                    .collect(),
                global_orientation: posed.transforms.iter().flat_map(|g| g[j].rot.to_6d()).collect(),
            }
        })
        .collect();
    let translation: Vec<Vec3> = motion.frames.iter().map(|f| f.root_translation).collect();
    KinematicsGT {
        frames: posed.len(),
        fps: posed.fps,
        joints,
        root_velocity: flat(&first_difference(&translation, fps)),
        root_translation: translation,
    }
}

pub fn kinematics_ground_truth(body: &BodyModel, motion: &MotionSequence) -> Result<KinematicsGT> {
    let posed = PosedMotion::new(body, motion)?;
    Ok(kinematics_ground_truth_posed(body, &posed, motion))
}

pub fn track_to_text(track: &ImuTrack) -> String {
    let mut s = String::new();
    let r = track.placement.r;
    writeln!(s, "fps {}", track.fps).unwrap();
    writeln!(s, "T {}", track.len()).unwrap();
    writeln!(s, "placement {:.16e} {:.16e} {:.16e}", r.x(), r.y(), r.z()).unwrap();
    writeln!(s, "region {}", track.placement.region).unwrap();
    for (a, q) in track.accel.iter().zip(&track.orient) {
        let vals: Vec<String> = a.0.iter().chain(q.to_array().iter()).map(|v| format!("{v:.16e}")).collect();
        s.push_str(&vals.join(" "));
        s.push('\n');
    }
    s
}

pub fn track_from_text(text: &str, origin: &str) -> Result<ImuTrack> {
    let lines: Vec<&str> = text.lines().collect();
    let field = |i: usize, key: &str| -> Result<Vec<&str>> {
        let line = lines.get(i).ok_or_else(|| Error::parse(origin, i + 1, format!("missing `{key}` line")))?;
        let mut toks = line.split_whitespace();
        if toks.next() != Some(key) {
            return Err(Error::parse(origin, i + 1, format!("expected `{key}`")));
        }
        Ok(toks.collect())
    };
    let num = |s: &str, line: usize| s.parse::<f64>().map_err(|_| Error::parse(origin, line, "bad number"));
    let fps: u32 = field(0, "fps")?
        .first()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::parse(origin, 1, "bad fps"))?;
    let count: usize = field(1, "T")?
        .first()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::parse(origin, 2, "bad frame count"))?;
    let p = field(2, "placement")?;
    if p.len() != 3 {
        return Err(Error::parse(origin, 3, "expected 3 placement values"));
    }
    let r = Vec3::new(num(p[0], 3)?, num(p[1], 3)?, num(p[2], 3)?);
    let region: usize = field(3, "region")?
        .first()
        .and_then(|s| s.parse().ok())
        .filter(|&k: &usize| k < JOINT_COUNT)
        .ok_or_else(|| Error::parse(origin, 4, "bad region"))?;
    let mut accel = Vec::with_capacity(count);
    let mut orient = Vec::with_capacity(count);
    for (i, line) in lines.iter().enumerate().skip(4) {
        if line.trim().is_empty() {
            continue;
        }
        let v: Vec<f64> = line.split_whitespace().map(|s| num(s, i + 1)).collect::<Result<_>>()?;
        if v.len() != 7 {
            return Err(Error::parse(origin, i + 1, format!("expected 7 values, got {}", v.len())));
        }
        accel.push(Vec3::new(v[0], v[1], v[2]));
        orient.push(Quat::new(v[3], v[4], v[5], v[6]));
    }
    if accel.len() != count {
        return Err(Error::parse(
            origin,
            accel.len() + 5,
            format!("truncated: expected {count} frames, found {}", accel.len()),
        ));
    }
    Ok(ImuTrack {
        placement: PlacementCoordinate { r, region },
        accel,
        orient,
        fps,
        degenerate_frames: 0,
    })
}

pub fn write_track(track: &ImuTrack, path: &Path) -> Result<()> {
    std::fs::write(path, track_to_text(track)).map_err(|e| Error::io(path, e))
}

pub fn read_track(path: &Path) -> Result<ImuTrack> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    track_from_text(&text, &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::body_model::{build_canonical_body, BodyConfig, PoseFrame};
    use crate::motion_gen::{generate_motion, MotionKind};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn body() -> BodyModel {
        build_canonical_body(&BodyConfig::default()).unwrap()
    }

    fn translated(n: usize, f: impl Fn(f64) -> Vec3) -> MotionSequence {
        let frames = (0..n)
            .map(|i| {
                let mut p = PoseFrame::tpose();
                p.root_translation = f(i as f64 / 60.0);
                p
            })
            .collect();
        MotionSequence {
            fps: 60,
            frames,
            label: None,
        }
    }

    #[test]
    fn axis_aligned_surface_frame() {
        // Bone along +Z, outward normal along +X.
        let y = Vec3::new(1.0, 0.0, 0.0);
        let b = Vec3::new(0.0, 0.0, 1.0);
        let m = complete_frame(y, b.cross(y).normalized());
        assert_eq!(m.col(1), Vec3::new(1.0, 0.0, 0.0));
        assert_eq!(m.col(2), Vec3::new(0.0, 1.0, 0.0));
        assert_eq!(m.col(0), Vec3::new(0.0, 0.0, 1.0));
        assert!((m.det() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn orientation_frames_are_rotations() {
        let b = body();
        let m = generate_motion(2, 1.0, MotionKind::Mixed).unwrap();
        let posed = PosedMotion::new(&b, &m).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..1000 {
            let v = rng.gen_range(0..b.vertex_count());
            let t = rng.gen_range(0..posed.len());
            let f = vertex_orientation_frame(&b, v, &posed.transforms[t]);
            assert!((f.det() - 1.0).abs() < 1e-6);
            assert!(f.orthonormality_error() < 1e-6);
        }
    }

    #[test]
    fn orientation_frame_equivariance() {
        let b = body();
        let m = generate_motion(5, 1.0, MotionKind::ArmSwing).unwrap();
        let posed = PosedMotion::new(&b, &m).unwrap();
        let r = Quat::from_axis_angle(Vec3::new(1.0, 1.0, 0.0), 0.7);
        let rot = PosedMotion::new(&b, &m.rotated(r)).unwrap();
        for v in (0..b.vertex_count()).step_by(97) {
            let a = r.to_mat3() * vertex_orientation_frame(&b, v, &posed.transforms[30]);
            let c = vertex_orientation_frame(&b, v, &rot.transforms[30]);
            for i in 0..3 {
                for k in 0..3 {
                    assert!((a.0[i][k] - c.0[i][k]).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn idle_mesh_imu_is_static() {
        let b = body();
        let m = generate_motion(0, 1.0, MotionKind::Idle).unwrap();
        for v in [0, 100, 777, b.vertex_count() - 1] {
            let t = synthesize_mesh_imu(&b, &m, v).unwrap();
            assert_eq!(t.len(), m.len());
            for (a, q) in t.accel.iter().zip(&t.orient) {
                assert!(a.norm() < 1e-9);
                assert!(q.angle_to(Quat::IDENTITY) < 1e-6);
            }
        }
        assert!(synthesize_mesh_imu(&b, &m, b.vertex_count()).is_err());
    }

    #[test]
    fn central_difference_exact_on_quadratic_root_path() {
        let b = body();
        let acc = Vec3::new(0.7, -1.3, 2.1);
        let m = translated(40, |t| acc.scale(0.5 * t * t));
        let track = synthesize_mesh_imu(&b, &m, 321).unwrap();
        for a in &track.accel {
            assert!(a.dist(acc) < 1e-9, "{a:?}");
        }
        let lin = translated(40, |t| Vec3::new(1.0, 2.0, -0.5).scale(t));
        for a in synthesize_mesh_imu(&b, &lin, 5).unwrap().accel {
            assert!(a.norm() < 1e-9);
        }
    }

    #[test]
    fn joint_imu_samples_child_and_keeps_own_orientation() {
        let b = body();
        let m = generate_motion(1, 1.0, MotionKind::ArmSwing).unwrap();
        let posed = PosedMotion::new(&b, &m).unwrap();
        let r_elbow = 19;
        let raw = synthesize_joint_imu_raw(&b, &posed, r_elbow).unwrap();
        let wrist: Vec<Vec3> = posed.transforms.iter().map(|g| g[21].pos).collect();
        let expected = second_difference(&wrist, 60.0);
        for t in 0..m.len() {
            assert_eq!(raw.accel[t], expected[t]);
            assert_eq!(raw.orient[t], posed.transforms[t][r_elbow].quat);
        }
        assert_eq!(raw.placement.r, b.tpose_joint_pos[21]);
    }

    #[test]
    fn leaf_joint_imu_uses_extension_vertex() {
        let b = body();
        let m = generate_motion(3, 1.0, MotionKind::ArmSwing).unwrap();
        let posed = PosedMotion::new(&b, &m).unwrap();
        let hand = 22;
        let ext = leaf_extension_vertices(&b).into_iter().find(|e| e.joint == hand).unwrap();
        let traj = joint_trajectory(&b, &posed, hand);
        let oracle: Vec<Vec3> = posed.transforms.iter().map(|g| skin_vertex(&b, ext.vertex, g)).collect();
        assert_eq!(traj, oracle);
        let t = synthesize_joint_imu_posed(&b, &posed, hand).unwrap();
        assert_eq!(t.accel, second_difference(&oracle, 60.0));
    }

    #[test]
    fn idle_joint_imus_are_static() {
        let b = body();
        let m = generate_motion(0, 0.5, MotionKind::Idle).unwrap();
        for j in 0..JOINT_COUNT {
            let t = synthesize_joint_imu(&b, &m, j).unwrap();
            assert!(t.accel.iter().all(|a| a.norm() < 1e-9));
            assert!(t.orient.iter().all(|q| q.angle_to(Quat::IDENTITY) < 1e-9));
        }
    }

    #[test]
    fn leaf_extensions_at_rest() {
        let b = body();
        let leaves = leaf_extension_vertices(&b);
        let head = leaves[0];
        assert_eq!(head.joint, 15);
        let expected = b.tpose_joint_pos[15] + Vec3::new(0.0, b.config.extension_length, 0.0);
        assert!(head.rest_position.dist(expected) < 1e-15);
        let g = forward_kinematics(&b.skeleton, &PoseFrame::tpose()).unwrap();
        for l in leaves {
            assert_eq!(b.mesh.skin_weights[l.vertex], vec![(l.joint, 1.0)]);
            assert!(skin_vertex(&b, l.vertex, &g).dist(l.rest_position) < 1e-15);
        }
    }

    #[test]
    fn calibration_identities() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut rq = || {
            Quat::from_rotvec(Vec3::new(rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)))
        };
        let tpose = rq();
        let out = calibrate(&[tpose; 4], tpose);
        assert!(out.iter().all(|q| q.angle_to(Quat::IDENTITY) < 1e-9));
        let r = rq();
        assert!(calibrate(&[r * tpose], tpose)[0].angle_to(r) < 1e-9);
        let raw: Vec<Quat> = (0..50).map(|_| rq()).collect();
        for (c, q) in calibrate(&raw, tpose).iter().zip(&raw) {
            let back = *c * tpose;
            assert!((back.w - q.w).abs() < 1e-9 && (back.x - q.x).abs() < 1e-9);
            assert!((back.y - q.y).abs() < 1e-9 && (back.z - q.z).abs() < 1e-9);
        }
        // Idempotence with an identity reference.
        let cal = calibrate(&raw, tpose);
        assert_eq!(calibrate(&cal, Quat::IDENTITY), cal);
    }

    #[test]
    fn channel_encoding() {
        let mut t = ImuTrack {
            placement: PlacementCoordinate { r: Vec3::ZERO, region: 0 },
            accel: vec![Vec3::ZERO],
            orient: vec![Quat::IDENTITY],
            fps: 60,
            degenerate_frames: 0,
        };
        assert_eq!(encode_channels(&t), vec![0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        t.orient[0] = Quat::from_axis_angle(Vec3::new(0.0, 0.0, 1.0), std::f64::consts::FRAC_PI_2);
        let c = encode_channels(&t);
        let expected = [0.0, 0.0, 0.0, 0.0, 1.0, 0.0, -1.0, 0.0, 0.0];
        for (a, e) in c.iter().zip(expected) {
            assert!((a - e).abs() < 1e-15);
        }
    }

    #[test]
    fn channel_6d_decodes_to_rotation() {
        let b = body();
        let m = generate_motion(8, 1.0, MotionKind::Mixed).unwrap();
        let t = synthesize_mesh_imu(&b, &m, 444).unwrap();
        let c = encode_channels(&t);
        for (i, q) in t.orient.iter().enumerate() {
            let d = Mat3::from_6d(&c[i * 9 + 3..i * 9 + 9]);
            let e = q.to_mat3();
            for r in 0..3 {
                for k in 0..3 {
                    assert!((d.0[r][k] - e.0[r][k]).abs() < 1e-9);
                }
            }
            assert!((d.det() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn ground_truth_cases() {
        let b = body();
        let idle = generate_motion(0, 0.5, MotionKind::Idle).unwrap();
        let gt = kinematics_ground_truth(&b, &idle).unwrap();
        for (j, jk) in gt.joints.iter().enumerate() {
            assert!(jk.velocity.iter().all(|v| v.abs() < 1e-12));
            let rest = joint_placement_point(&b, j);
            assert!((jk.position[0] - rest.x()).abs() < 1e-12);
            assert_eq!(&jk.global_orientation[..6], &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        }
        let v = Vec3::new(0.4, 0.0, -1.1);
        let lin = translated(30, |t| v.scale(t));
        let gt = kinematics_ground_truth(&b, &lin).unwrap();
        for t in 1..29 {
            for a in 0..3 {
                assert!((gt.root_velocity[3 * t + a] - v.0[a]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn ground_truth_orientations_are_6d_rotations() {
        let b = body();
        let m = generate_motion(4, 1.0, MotionKind::Walk).unwrap();
        let gt = kinematics_ground_truth(&b, &m).unwrap();
        for jk in &gt.joints {
            for six in jk.global_orientation.chunks(6).chain(jk.local_orientation.chunks(6)) {
                let a = Vec3::new(six[0], six[1], six[2]);
                let c = Vec3::new(six[3], six[4], six[5]);
                assert!((a.norm() - 1.0).abs() < 1e-6 && (c.norm() - 1.0).abs() < 1e-6);
                assert!(a.dot(c).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn walk_root_velocity_integrates_to_displacement() {
        let b = body();
        let m = generate_motion(2, 6.0, MotionKind::Walk).unwrap();
        let gt = kinematics_ground_truth(&b, &m).unwrap();
        let dt = 1.0 / 60.0;
        let mut acc = Vec3::ZERO;
        let mut vmax: f64 = 0.0;
        for t in 0..gt.frames {
            let v = Vec3::new(gt.root_velocity[3 * t], gt.root_velocity[3 * t + 1], gt.root_velocity[3 * t + 2]);
            vmax = vmax.max(v.norm());
            if t + 1 < gt.frames {
                let w = Vec3::new(
                    gt.root_velocity[3 * t + 3],
                    gt.root_velocity[3 * t + 4],
                    gt.root_velocity[3 * t + 5],
                );
                acc = acc + (v + w).scale(0.5 * dt);
            }
        }
        let disp = m.frames.last().unwrap().root_translation - m.frames[0].root_translation;
        assert!(acc.dist(disp) <= 2.0 * dt * vmax, "{acc:?} vs {disp:?}");
    }

    #[test]
    fn synthesis_equivariance_under_world_rotation() {
        let b = body();
        let m = generate_motion(6, 1.0, MotionKind::Walk).unwrap();
        let r = Quat::from_axis_angle(Vec3::new(0.3, 1.0, 0.1), 1.1);
        let p1 = PosedMotion::new(&b, &m).unwrap();
        let p2 = PosedMotion::new(&b, &m.rotated(r)).unwrap();
        for v in [12, 400, 1200] {
            let a = synthesize_mesh_imu_raw(&b, &p1, v).unwrap();
            let c = synthesize_mesh_imu_raw(&b, &p2, v).unwrap();
            for t in 0..a.len() {
                assert!(r.rotate(a.accel[t]).dist(c.accel[t]) < 1e-6);
                assert!((r * a.orient[t]).angle_to(c.orient[t]) < 1e-6);
            }
        }
    }

    #[test]
    fn second_difference_is_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut rv = || Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        let a: Vec<Vec3> = (0..20).map(|_| rv()).collect();
        let c: Vec<Vec3> = (0..20).map(|_| rv()).collect();
        let sum: Vec<Vec3> = a.iter().zip(&c).map(|(x, y)| *x + *y).collect();
        let (da, dc, ds) = (second_difference(&a, 60.0), second_difference(&c, 60.0), second_difference(&sum, 60.0));
        for t in 0..20 {
            assert!((da[t] + dc[t]).dist(ds[t]) < 1e-9);
        }
    }

    #[test]
    fn track_text_round_trip() {
        let b = body();
        let m = generate_motion(1, 0.3, MotionKind::Walk).unwrap();
        let t = synthesize_mesh_imu(&b, &m, 60).unwrap();
        let back = track_from_text(&track_to_text(&t), "t").unwrap();
        assert_eq!(back.accel, t.accel);
        assert_eq!(back.orient, t.orient);
        assert_eq!(back.placement, t.placement);
        let text = track_to_text(&t);
        let cut: String = text.lines().take(7).map(|l| format!("{l}\n")).collect();
        assert!(track_from_text(&cut, "t").is_err());
    }
}
