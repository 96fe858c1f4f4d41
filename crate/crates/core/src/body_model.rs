//! Canonical articulated body: a 24-joint skeleton in SMPL topology, forward
//! kinematics, a procedurally generated skinned mesh and its region labels.
//!
//! Coordinates are meters, `+Y` up, `+X` toward the body's left, `+Z`
//! forward. At T-pose every local rotation is the identity, so rest offsets
//! alone place the joints.

use std::collections::VecDeque;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{ensure, Error, Result};
use crate::math::{Mat3, Quat, Vec3};

pub const JOINT_COUNT: usize = 24;

pub const JOINT_NAMES: [&str; JOINT_COUNT] = [
    "pelvis",
    "l_hip",
    "r_hip",
    "spine1",
    "l_knee",
    "r_knee",
    "spine2",
    "l_ankle",
    "r_ankle",
    "spine3",
    "l_foot",
    "r_foot",
    "neck",
    "l_collar",
    "r_collar",
    "head",
    "l_shoulder",
    "r_shoulder",
    "l_elbow",
    "r_elbow",
    "l_wrist",
    "r_wrist",
    "l_hand",
    "r_hand",
];

pub const PARENTS: [Option<usize>; JOINT_COUNT] = [
    None,
    Some(0),
    Some(0),
    Some(0),
    Some(1),
    Some(2),
    Some(3),
    Some(4),
    Some(5),
    Some(6),
    Some(7),
    Some(8),
    Some(9),
    Some(9),
    Some(9),
    Some(12),
    Some(13),
    Some(14),
    Some(16),
    Some(17),
    Some(18),
    Some(19),
    Some(20),
    Some(21),
];

/// Leaf joints in the order their extension vertices are appended:
/// head top, left/right fingertip, left/right toe tip.
pub const LEAF_JOINTS: [usize; 5] = [15, 22, 23, 10, 11];

pub fn joint_index(name: &str) -> Option<usize> {
    JOINT_NAMES.iter().position(|n| *n == name)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Skeleton {
    pub parent: [Option<usize>; JOINT_COUNT],
    pub rest_offset: [Vec3; JOINT_COUNT],
}

impl Skeleton {
    pub fn new(rest_offset: [Vec3; JOINT_COUNT]) -> Self {
        Skeleton {
            parent: PARENTS,
            rest_offset,
        }
    }

    pub fn children(&self, j: usize) -> impl Iterator<Item = usize> + '_ {
        (0..JOINT_COUNT).filter(move |&c| self.parent[c] == Some(j))
    }

    pub fn is_leaf(&self, j: usize) -> bool {
        self.children(j).next().is_none()
    }

    /// The child whose trajectory stands in for joint `j` when synthesizing a
    /// joint IMU: the spine chain for the pelvis and spine3, the unique child
    /// otherwise, `None` for leaves.
    pub fn primary_child(&self, j: usize) -> Option<usize> {
        match j {
            0 => Some(3),
            9 => Some(12),
            _ => self.children(j).next(),
        }
    }

    pub fn depth(&self, mut j: usize) -> usize {
        let mut d = 0;
        while let Some(p) = self.parent[j] {
            j = p;
            d += 1;
        }
        d
    }

    /// T-pose joint positions relative to the root.
    pub fn tpose_positions(&self) -> [Vec3; JOINT_COUNT] {
        let mut pos = [Vec3::ZERO; JOINT_COUNT];
        for j in 1..JOINT_COUNT {
            let p = self.parent[j].expect("non-root joint has a parent");
            pos[j] = pos[p] + self.rest_offset[j];
        }
        pos
    }
}

/// Number of parent links on the tree path between `a` and `b`.
pub fn hop_distance(skeleton: &Skeleton, a: usize, b: usize) -> Result<usize> {
    ensure!(a < JOINT_COUNT && b < JOINT_COUNT, "joint index out of range: ({a}, {b})");
    let (mut a, mut b) = (a, b);
    let (mut da, mut db) = (skeleton.depth(a), skeleton.depth(b));
    let mut hops = 0;
    while da > db {
        a = skeleton.parent[a].unwrap();
        da -= 1;
        hops += 1;
    }
    while db > da {
        b = skeleton.parent[b].unwrap();
        db -= 1;
        hops += 1;
    }
    while a != b {
        a = skeleton.parent[a].unwrap();
        b = skeleton.parent[b].unwrap();
        hops += 2;
    }
    Ok(hops)
}

/// Breadth-first hop counts from `start` over the undirected kinematic tree.
pub fn bfs_hops(skeleton: &Skeleton, start: usize) -> [usize; JOINT_COUNT] {
    let mut dist = [usize::MAX; JOINT_COUNT];
    dist[start] = 0;
    let mut queue = VecDeque::from([start]);
    while let Some(j) = queue.pop_front() {
        let neighbours = skeleton.parent[j].into_iter().chain(skeleton.children(j));
        for n in neighbours.collect::<Vec<_>>() {
            if dist[n] == usize::MAX {
                dist[n] = dist[j] + 1;
                queue.push_back(n);
            }
        }
    }
    dist
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseFrame {
    pub local_rotation: [Quat; JOINT_COUNT],
    pub root_translation: Vec3,
}

impl PoseFrame {
    pub fn tpose() -> Self {
        PoseFrame {
            local_rotation: [Quat::IDENTITY; JOINT_COUNT],
            root_translation: Vec3::ZERO,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (j, q) in self.local_rotation.iter().enumerate() {
            ensure!(
                (q.norm() - 1.0).abs() <= 1e-6,
                "joint {j} rotation is not unit (norm {})",
                q.norm()
            );
        }
        Ok(())
    }
}

/// Rigid transform `x ↦ rot·x + pos`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transform {
    pub rot: Mat3,
    pub quat: Quat,
    pub pos: Vec3,
}

impl Transform {
    pub const IDENTITY: Transform = Transform {
        rot: Mat3::IDENTITY,
        quat: Quat::IDENTITY,
        pos: Vec3::ZERO,
    };

    pub fn apply(&self, x: Vec3) -> Vec3 {
        self.rot.mul_vec(x) + self.pos
    }
}

/// Global joint transforms for one frame.
pub fn forward_kinematics(skeleton: &Skeleton, frame: &PoseFrame) -> Result<[Transform; JOINT_COUNT]> {
    frame.validate()?;
    let mut out = [Transform::IDENTITY; JOINT_COUNT];
    let q0 = frame.local_rotation[0];
    out[0] = Transform {
        rot: q0.to_mat3(),
        quat: q0,
        pos: frame.root_translation,
    };
    for j in 1..JOINT_COUNT {
        let parent = out[skeleton.parent[j].unwrap()];
        let quat = parent.quat * frame.local_rotation[j];
        out[j] = Transform {
            rot: quat.to_mat3(),
            quat,
            pos: parent.apply(skeleton.rest_offset[j]),
        };
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BodyConfig {
    pub rest_offset: [Vec3; JOINT_COUNT],
    /// Radius of the limb segment that ends at each joint (entry 0 unused).
    pub radius: [f64; JOINT_COUNT],
    pub ring_vertices: usize,
    pub segments: usize,
    pub extension_length: f64,
    pub weight_power: f64,
}

/// Vertex count of the default body.
pub const DEFAULT_VERTEX_COUNT: usize = 1573;

impl Default for BodyConfig {
    fn default() -> Self {
        let v = Vec3::new;
        let rest_offset = [
            v(0.0, 0.0, 0.0),
            v(0.09, -0.08, 0.0),
            v(-0.09, -0.08, 0.0),
            v(0.0, 0.11, 0.0),
            v(0.0, -0.40, 0.0),
            v(0.0, -0.40, 0.0),
            v(0.0, 0.13, 0.0),
            v(0.0, -0.40, 0.0),
            v(0.0, -0.40, 0.0),
            v(0.0, 0.06, 0.0),
            v(0.0, -0.05, 0.12),
            v(0.0, -0.05, 0.12),
            v(0.0, 0.21, 0.0),
            v(0.07, 0.12, 0.0),
            v(-0.07, 0.12, 0.0),
            v(0.0, 0.09, 0.0),
            v(0.11, 0.03, 0.0),
            v(-0.11, 0.03, 0.0),
            v(0.28, 0.0, 0.0),
            v(-0.28, 0.0, 0.0),
            v(0.26, 0.0, 0.0),
            v(-0.26, 0.0, 0.0),
            v(0.08, 0.0, 0.0),
            v(-0.08, 0.0, 0.0),
        ];
        let radius = [
            0.0, 0.08, 0.08, 0.11, 0.075, 0.075, 0.12, 0.055, 0.055, 0.12, 0.045, 0.045, 0.06, 0.05,
            0.05, 0.09, 0.05, 0.05, 0.045, 0.045, 0.038, 0.038, 0.03, 0.03,
        ];
        BodyConfig {
            rest_offset,
            radius,
            ring_vertices: 8,
            segments: 6,
            extension_length: 0.10,
            weight_power: 2.0,
        }
    }
}

impl BodyConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.ring_vertices < 3 {
            return bad(format!("ring_vertices must be >= 3, got {}", self.ring_vertices));
        }
        if self.segments < 3 {
            return bad(format!("segments must be >= 3, got {}", self.segments));
        }
        for j in 1..JOINT_COUNT {
            if !(self.radius[j] > 0.0 && self.radius[j].is_finite()) {
                return bad(format!("radius.{} must be > 0", JOINT_NAMES[j]));
            }
            if !(self.rest_offset[j].norm() > 1e-6) {
                return bad(format!("offset.{} must be non-zero", JOINT_NAMES[j]));
            }
        }
        if self.rest_offset[0] != Vec3::ZERO {
            return bad("offset.pelvis must be zero".into());
        }
        if !(self.extension_length > 0.0) {
            return bad("extension_length must be > 0".into());
        }
        if !(self.weight_power > 0.0) {
            return bad("weight_power must be > 0".into());
        }
        Ok(())
    }

    /// Applies one `key = value` entry. Unknown keys are configuration errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let num = |s: &str| -> Result<f64> {
            s.trim()
                .parse::<f64>()
                .map_err(|_| Error::Config(format!("{key}: not a number: {s:?}")))
        };
        let int = |s: &str| -> Result<usize> {
            s.trim()
                .parse::<usize>()
                .map_err(|_| Error::Config(format!("{key}: not an integer: {s:?}")))
        };
        let joint = |name: &str| {
            joint_index(name).ok_or_else(|| Error::Config(format!("unknown joint name {name:?}")))
        };
        match key {
            "ring_vertices" => self.ring_vertices = int(value)?,
            "segments" => self.segments = int(value)?,
            "extension_length" => self.extension_length = num(value)?,
            "weight_power" => self.weight_power = num(value)?,
            _ => {
                if let Some(name) = key.strip_prefix("radius.") {
                    self.radius[joint(name)?] = num(value)?;
                } else if let Some(name) = key.strip_prefix("offset.") {
                    let parts: Vec<f64> = value.split_whitespace().map(num).collect::<Result<_>>()?;
                    if parts.len() != 3 {
                        return Err(Error::Config(format!("{key}: expected 3 numbers")));
                    }
                    self.rest_offset[joint(name)?] = Vec3::new(parts[0], parts[1], parts[2]);
                } else {
                    return Err(Error::Config(format!("unknown body key {key:?}")));
                }
            }
        }
        Ok(())
    }

    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut cfg = BodyConfig::default();
        for (key, value, line) in crate::config::key_values(text, origin)? {
            cfg.set(&key, &value).map_err(|e| Error::parse(origin, line, e.to_string()))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    /// Canonical text form; also the input to the body fingerprint.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "ring_vertices = {}", self.ring_vertices).unwrap();
        writeln!(s, "segments = {}", self.segments).unwrap();
        writeln!(s, "extension_length = {:?}", self.extension_length).unwrap();
        writeln!(s, "weight_power = {:?}", self.weight_power).unwrap();
        for j in 1..JOINT_COUNT {
            let o = self.rest_offset[j];
            writeln!(s, "offset.{} = {:?} {:?} {:?}", JOINT_NAMES[j], o.x(), o.y(), o.z()).unwrap();
        }
        for j in 1..JOINT_COUNT {
            writeln!(s, "radius.{} = {:?}", JOINT_NAMES[j], self.radius[j]).unwrap();
        }
        s
    }

    pub fn fingerprint(&self) -> String {
        crate::config::sha256_hex(self.to_text().as_bytes())
    }
}

/// A generated limb segment. `distal` is `None` for the five leaf extensions,
/// whose far end is the extension point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bone {
    pub proximal: usize,
    pub distal: Option<usize>,
    pub rest_start: Vec3,
    pub rest_end: Vec3,
    pub radius: f64,
}

impl Bone {
    pub fn rest_direction(&self) -> Vec3 {
        self.rest_end - self.rest_start
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BodyMesh {
    pub vertices_rest: Vec<Vec3>,
    pub faces: Vec<[usize; 3]>,
    /// At most two `(joint, weight)` pairs per vertex; weights sum to one.
    pub skin_weights: Vec<Vec<(usize, f64)>>,
    pub region: Vec<usize>,
    /// Index into `bones` of the segment each vertex was generated on.
    pub bone_of_vertex: Vec<usize>,
    pub bones: Vec<Bone>,
    incident_offsets: Vec<usize>,
    incident_faces: Vec<usize>,
}

impl BodyMesh {
    pub fn vertex_count(&self) -> usize {
        self.vertices_rest.len()
    }

    pub fn incident_faces(&self, v: usize) -> &[usize] {
        &self.incident_faces[self.incident_offsets[v]..self.incident_offsets[v + 1]]
    }

    pub fn weight(&self, v: usize, j: usize) -> f64 {
        self.skin_weights[v]
            .iter()
            .find(|(jj, _)| *jj == j)
            .map_or(0.0, |(_, w)| *w)
    }

    /// Dense `V × 24` weight matrix.
    pub fn dense_weights(&self) -> Vec<[f64; JOINT_COUNT]> {
        self.skin_weights
            .iter()
            .map(|ws| {
                let mut row = [0.0; JOINT_COUNT];
                for &(j, w) in ws {
                    row[j] += w;
                }
                row
            })
            .collect()
    }

    /// Outward unit normal of a face at rest or for the supplied positions.
    pub fn face_normal(&self, f: usize, positions: &[Vec3]) -> Vec3 {
        let [a, b, c] = self.faces[f];
        (positions[b] - positions[a]).cross(positions[c] - positions[a]).normalized()
    }

    /// One third of the summed area of incident faces.
    pub fn vertex_area(&self, v: usize) -> f64 {
        self.incident_faces(v)
            .iter()
            .map(|&f| {
                let [a, b, c] = self.faces[f];
                let p = &self.vertices_rest;
                0.5 * (p[b] - p[a]).cross(p[c] - p[a]).norm() / 3.0
            })
            .sum()
    }

    fn build_incidence(&mut self) {
        let n = self.vertices_rest.len();
        let mut counts = vec![0usize; n + 1];
        for f in &self.faces {
            for &v in f {
                counts[v + 1] += 1;
            }
        }
        for i in 0..n {
            counts[i + 1] += counts[i];
        }
        let mut fill = counts.clone();
        let mut faces = vec![0usize; counts[n]];
        for (fi, f) in self.faces.iter().enumerate() {
            for &v in f {
                faces[fill[v]] = fi;
                fill[v] += 1;
            }
        }
        self.incident_offsets = counts;
        self.incident_faces = faces;
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LeafExtension {
    pub joint: usize,
    pub vertex: usize,
    pub rest_position: Vec3,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BodyModel {
    pub config: BodyConfig,
    pub skeleton: Skeleton,
    pub mesh: BodyMesh,
    pub tpose_joint_pos: [Vec3; JOINT_COUNT],
    pub r_min: Vec3,
    pub r_max: Vec3,
    pub leaf_extensions: [LeafExtension; 5],
}

impl BodyModel {
    pub fn joint_count(&self) -> usize {
        JOINT_COUNT
    }

    pub fn vertex_count(&self) -> usize {
        self.mesh.vertex_count()
    }

    pub fn fingerprint(&self) -> String {
        self.config.fingerprint()
    }

    /// Whether `r` lies within the rest-vertex bounds expanded by `tol`; on
    /// failure, returns the offending axis.
    pub fn check_bounds(&self, r: Vec3, tol: f64) -> std::result::Result<(), usize> {
        for axis in 0..3 {
            let x = r.0[axis];
            if !(x >= self.r_min.0[axis] - tol && x <= self.r_max.0[axis] + tol) {
                return Err(axis);
            }
        }
        Ok(())
    }
}

pub fn build_canonical_body(config: &BodyConfig) -> Result<BodyModel> {
    config.validate()?;
    let skeleton = Skeleton::new(config.rest_offset);
    let tpose = skeleton.tpose_positions();

    let mut bones = Vec::new();
    for j in 1..JOINT_COUNT {
        let p = skeleton.parent[j].unwrap();
        bones.push(Bone {
            proximal: p,
            distal: Some(j),
            rest_start: tpose[p],
            rest_end: tpose[j],
            radius: config.radius[j],
        });
    }
    let mut tips = [Vec3::ZERO; 5];
    for (i, &leaf) in LEAF_JOINTS.iter().enumerate() {
        let dir = config.rest_offset[leaf].normalized();
        tips[i] = tpose[leaf] + dir.scale(config.extension_length);
        bones.push(Bone {
            proximal: leaf,
            distal: None,
            rest_start: tpose[leaf],
            rest_end: tips[i],
            radius: 0.8 * config.radius[leaf],
        });
    }

    let ring = config.ring_vertices;
    let rings = config.segments + 1;
    let mut vertices = Vec::new();
    let mut faces = Vec::new();
    let mut bone_of_vertex = Vec::new();
    let mut last_ring_start = [0usize; 5];
    for (b, bone) in bones.iter().enumerate() {
        let axis = bone.rest_direction().normalized();
        let e1 = crate::math::any_orthogonal(axis);
        let e2 = axis.cross(e1);
        let base = vertices.len();
        for k in 0..rings {
            let s = k as f64 / config.segments as f64;
            let centre = bone.rest_start + bone.rest_direction().scale(s);
            for i in 0..ring {
                let theta = std::f64::consts::TAU * i as f64 / ring as f64;
                let radial = e1.scale(theta.cos()) + e2.scale(theta.sin());
                vertices.push(centre + radial.scale(bone.radius));
                bone_of_vertex.push(b);
            }
        }
        for k in 0..rings - 1 {
            for i in 0..ring {
                let a = base + k * ring + i;
                let bb = base + k * ring + (i + 1) % ring;
                let c = base + (k + 1) * ring + (i + 1) % ring;
                let d = base + (k + 1) * ring + i;
                faces.push([a, bb, c]);
                faces.push([a, c, d]);
            }
        }
        if bone.distal.is_none() {
            let tip = b - (JOINT_COUNT - 1);
            last_ring_start[tip] = base + (rings - 1) * ring;
        }
    }

    let mut leaf_extensions = [LeafExtension {
        joint: 0,
        vertex: 0,
        rest_position: Vec3::ZERO,
    }; 5];
    for (i, &leaf) in LEAF_JOINTS.iter().enumerate() {
        let apex = vertices.len();
        vertices.push(tips[i]);
        bone_of_vertex.push(JOINT_COUNT - 1 + i);
        let start = last_ring_start[i];
        for k in 0..ring {
            faces.push([start + k, start + (k + 1) % ring, apex]);
        }
        leaf_extensions[i] = LeafExtension {
            joint: leaf,
            vertex: apex,
            rest_position: tips[i],
        };
    }

    // Influence segments: each joint owns the segments to its children (or
    // to its extension point for leaves).
    let mut influence: Vec<Vec<(Vec3, Vec3)>> = vec![Vec::new(); JOINT_COUNT];
    for bone in &bones {
        influence[bone.proximal].push((bone.rest_start, bone.rest_end));
    }
    let apex_ids: Vec<usize> = leaf_extensions.iter().map(|l| l.vertex).collect();
    let skin_weights: Vec<Vec<(usize, f64)>> = vertices
        .iter()
        .enumerate()
        .map(|(v, &x)| {
            if let Some(i) = apex_ids.iter().position(|&a| a == v) {
                return vec![(LEAF_JOINTS[i], 1.0)];
            }
            two_nearest_weights(x, &influence, config.weight_power)
        })
        .collect();

    let mut mesh = BodyMesh {
        region: vec![0; vertices.len()],
        vertices_rest: vertices,
        faces,
        skin_weights,
        bone_of_vertex,
        bones,
        incident_offsets: Vec::new(),
        incident_faces: Vec::new(),
    };
    mesh.build_incidence();

    let mut r_min = Vec3::new(f64::INFINITY, f64::INFINITY, f64::INFINITY);
    let mut r_max = -r_min;
    for p in &mesh.vertices_rest {
        for a in 0..3 {
            r_min.0[a] = r_min.0[a].min(p.0[a]);
            r_max.0[a] = r_max.0[a].max(p.0[a]);
        }
    }

    let mut body = BodyModel {
        config: config.clone(),
        skeleton,
        mesh,
        tpose_joint_pos: tpose,
        r_min,
        r_max,
        leaf_extensions,
    };
    body.mesh.region = assign_regions(&body);
    Ok(body)
}

fn segment_distance(x: Vec3, a: Vec3, b: Vec3) -> f64 {
    let ab = b - a;
    let t = ((x - a).dot(ab) / ab.dot(ab)).clamp(0.0, 1.0);
    x.dist(a + ab.scale(t))
}

fn two_nearest_weights(x: Vec3, influence: &[Vec<(Vec3, Vec3)>], power: f64) -> Vec<(usize, f64)> {
    let mut dists: Vec<(f64, usize)> = influence
        .iter()
        .enumerate()
        .filter(|(_, segs)| !segs.is_empty())
        .map(|(j, segs)| {
            let d = segs
                .iter()
                .map(|&(a, b)| segment_distance(x, a, b))
                .fold(f64::INFINITY, f64::min);
            (d, j)
        })
        .collect();
    dists.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let raw: Vec<(usize, f64)> = dists[..2]
        .iter()
        .map(|&(d, j)| (j, 1.0 / (d + 1e-4).powf(power)))
        .collect();
    let total: f64 = raw.iter().map(|(_, w)| w).sum();
    raw.into_iter().map(|(j, w)| (j, w / total)).collect()
}

/// Region label per vertex: the joint with the largest skin weight, ties to
/// the lower joint index.
pub fn assign_regions(body: &BodyModel) -> Vec<usize> {
    body.mesh
        .skin_weights
        .iter()
        .map(|ws| {
            let mut best = (usize::MAX, f64::NEG_INFINITY);
            for &(j, w) in ws {
                if w > best.1 || (w == best.1 && j < best.0) {
                    best = (j, w);
                }
            }
            best.0
        })
        .collect()
}

/// Linear blend skinning of every vertex.
pub fn skin_vertices(body: &BodyModel, transforms: &[Transform; JOINT_COUNT]) -> Vec<Vec3> {
    (0..body.vertex_count())
        .map(|v| skin_vertex(body, v, transforms))
        .collect()
}

/// `Σ_j w_vj · G_j · G_j(T-pose)⁻¹ · v_rest`. T-pose global rotations are the
/// identity, so the inverse rest transform is a translation by `-r_j`.
pub fn skin_vertex(body: &BodyModel, v: usize, transforms: &[Transform; JOINT_COUNT]) -> Vec3 {
    let rest = body.mesh.vertices_rest[v];
    let mut out = Vec3::ZERO;
    for &(j, w) in &body.mesh.skin_weights[v] {
        let local = rest - body.tpose_joint_pos[j];
        out = out + transforms[j].apply(local).scale(w);
    }
    out
}
