//! Transfer-loss table and test-time device assignment.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;

use crate::body_model::{BodyModel, JOINT_COUNT};
use crate::config::sha256_hex;
use crate::error::{ensure, Error, Result};
use crate::math::Vec3;
use crate::net::{node_forward, ModelParams, Session};
use crate::trainer::{alignment_loss, kinematic_loss, PreparedSequence};
use crate::vimu_synth::{synthesize_joint_imu_posed, synthesize_mesh_imu_posed, PlacementCoordinate, BOUNDS_TOLERANCE};

const AXES: [&str; 3] = ["x", "y", "z"];
const TABLE_MAGIC: &str = "imucoco-losstable 1";

/// Closest rest vertex to `r`; ties go to the lowest id.
pub fn nearest_vertex(body: &BodyModel, r: Vec3) -> Result<usize> {
    if let Err(axis) = body.check_bounds(r, BOUNDS_TOLERANCE) {
        return Err(Error::Validation(format!(
            "placement {:?} lies outside the body bounds on the {} axis ({} .. {})",
            r.0, AXES[axis], body.r_min.0[axis], body.r_max.0[axis]
        )));
    }
    Ok(nearest_in(&body.mesh.vertices_rest, r, 0..body.vertex_count()))
}

fn nearest_in(points: &[Vec3], r: Vec3, candidates: impl Iterator<Item = usize>) -> usize {
    let mut best = (f64::INFINITY, usize::MAX);
    for v in candidates {
        let d = (points[v] - r).dot(points[v] - r);
        if d < best.0 || (d == best.0 && v < best.1) {
            best = (d, v);
        }
    }
    best.1
}

/// `24 × V` transfer losses with provenance fingerprints.
#[derive(Debug, Clone, PartialEq)]
pub struct LossTable {
    pub vertex_count: usize,
    pub values: Vec<f64>,
    pub stride: usize,
    pub body_fingerprint: String,
    pub model_fingerprint: String,
}

impl LossTable {
    pub fn get(&self, j: usize, v: usize) -> f64 {
        self.values[j * self.vertex_count + v]
    }

    pub fn row(&self, j: usize) -> &[f64] {
        &self.values[j * self.vertex_count..(j + 1) * self.vertex_count]
    }

    /// Fails unless the table was built for this body and model.
    pub fn verify(&self, body: &BodyModel, model_fingerprint: &str) -> Result<()> {
        let body_fp = body.fingerprint();
        if self.body_fingerprint != body_fp {
            return Err(Error::Fingerprint(format!(
                "loss table was built for body {} but the session body is {}; rebuild the table",
                self.body_fingerprint, body_fp
            )));
        }
        if self.model_fingerprint != model_fingerprint {
            return Err(Error::Fingerprint(format!(
                "loss table was built for model {} but the session model is {}; rebuild the table",
                self.model_fingerprint, model_fingerprint
            )));
        }
        ensure!(
            self.vertex_count == body.vertex_count(),
            "loss table has {} vertices, body has {}",
            self.vertex_count,
            body.vertex_count()
        );
        Ok(())
    }
}

/// Transfer loss for a virtual IMU at vertex `v` fed to node `j`, averaged
/// over the corpus: kinematic loss plus alignment to the joint-IMU feature.
pub fn vertex_transfer_loss(
    model: &ModelParams,
    body: &BodyModel,
    corpus: &[PreparedSequence],
    j: usize,
    v: usize,
) -> Result<f64> {
    ensure!(!corpus.is_empty(), "validation corpus is empty");
    let mut total = 0.0;
    for data in corpus {
        let joint = synthesize_joint_imu_posed(body, &data.posed, j)?;
        let mut s = Session::new(model, false);
        let z_ref = node_forward(&mut s, j, &joint, body)?.z;
        let z_ref = s.g.value(z_ref).clone();
        let track = synthesize_mesh_imu_posed(body, &data.posed, v)?;
        total += transfer_loss_with_ref(model, body, data, j, &track, &z_ref)?;
    }
    Ok(total / corpus.len() as f64)
}

fn transfer_loss_with_ref(
    model: &ModelParams,
    body: &BodyModel,
    data: &PreparedSequence,
    j: usize,
    track: &crate::vimu_synth::ImuTrack,
    z_ref: &crate::autodiff::Tensor,
) -> Result<f64> {
    let mut s = Session::new(model, false);
    let out = node_forward(&mut s, j, track, body)?;
    let kin = kinematic_loss(&mut s.g, &out.preds, &data.gt, j)?;
    let (align, _) = alignment_loss(&mut s.g, out.z, z_ref)?;
    Ok(s.g.value(kin).item() + s.g.value(align).item())
}

/// Evaluates every `stride`-th vertex and fills the rest from the nearest
/// evaluated vertex (by rest position, ties to the lowest id).
pub fn build_loss_table(
    model: &ModelParams,
    model_fingerprint: &str,
    body: &BodyModel,
    corpus: &[PreparedSequence],
    stride: usize,
) -> Result<LossTable> {
    ensure!(!corpus.is_empty(), "validation corpus is empty");
    ensure!(stride >= 1, "subsample stride must be at least 1");
    let n = body.vertex_count();
    let evaluated: Vec<usize> = (0..n).step_by(stride).collect();
    let refs: Vec<Vec<crate::autodiff::Tensor>> = corpus
        .par_iter()
        .map(|data| {
            (0..JOINT_COUNT)
                .map(|j| {
                    let mut s = Session::new(model, false);
                    let z = node_forward(&mut s, j, &data.joint_tracks[j], body)?.z;
                    Ok(s.g.value(z).clone())
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    let columns: Vec<[f64; JOINT_COUNT]> = evaluated
        .par_iter()
        .map(|&v| -> Result<[f64; JOINT_COUNT]> {
            let mut col = [0.0; JOINT_COUNT];
            for (data, zr) in corpus.iter().zip(&refs) {
                let track = synthesize_mesh_imu_posed(body, &data.posed, v)?;
                for (j, c) in col.iter_mut().enumerate() {
                    *c += transfer_loss_with_ref(model, body, data, j, &track, &zr[j])?;
                }
            }
            col.iter_mut().for_each(|c| *c /= corpus.len() as f64);
            Ok(col)
        })
        .collect::<Result<_>>()?;
    let mut values = vec![0.0; JOINT_COUNT * n];
    let pts = &body.mesh.vertices_rest;
    for v in 0..n {
        let k = if v % stride == 0 {
            v / stride
        } else {
            let src = nearest_in(pts, pts[v], evaluated.iter().copied());
            src / stride
        };
        for j in 0..JOINT_COUNT {
            values[j * n + v] = columns[k][j];
        }
    }
    ensure!(
        values.iter().all(|x| x.is_finite() && *x >= 0.0),
        "loss table contains non-finite or negative entries"
    );
    Ok(LossTable {
        vertex_count: n,
        values,
        stride,
        body_fingerprint: body.fingerprint(),
        model_fingerprint: model_fingerprint.to_string(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DeviceSource {
    Vertex(usize),
    Joint(usize),
}

/// A worn device: its id, T-pose placement and how its signal is synthesized.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Device {
    pub id: usize,
    pub placement: PlacementCoordinate,
    pub source: DeviceSource,
}

impl Device {
    pub fn at_vertex(id: usize, body: &BodyModel, v: usize) -> Self {
        Device {
            id,
            placement: PlacementCoordinate::at_vertex(body, v),
            source: DeviceSource::Vertex(v),
        }
    }

    pub fn at_joint(id: usize, body: &BodyModel, j: usize) -> Self {
        Device {
            id,
            placement: crate::vimu_synth::joint_placement(body, j),
            source: DeviceSource::Joint(j),
        }
    }

    /// Device at an arbitrary point; its signal comes from the nearest vertex.
    pub fn at_point(id: usize, body: &BodyModel, r: Vec3) -> Result<Self> {
        let v = nearest_vertex(body, r)?;
        Ok(Device {
            id,
            placement: PlacementCoordinate {
                r,
                region: body.mesh.region[v],
            },
            source: DeviceSource::Vertex(v),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeviceSet {
    pub devices: Vec<Device>,
}

impl DeviceSet {
    pub fn new(devices: Vec<Device>) -> Result<Self> {
        ensure!(!devices.is_empty(), "a device set needs at least one device");
        Ok(DeviceSet { devices })
    }

    pub fn validate(&self, body: &BodyModel) -> Result<()> {
        ensure!(!self.devices.is_empty(), "a device set needs at least one device");
        for d in &self.devices {
            nearest_vertex(body, d.placement.r)?;
        }
        Ok(())
    }

    /// Parses lines `id x y z`; `#` starts a comment.
    pub fn parse(text: &str, origin: &str, body: &BodyModel) -> Result<Self> {
        let mut devices = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 4 {
                return Err(Error::parse(origin, i + 1, "expected `id x y z`"));
            }
            let id = f[0].parse().map_err(|_| Error::parse(origin, i + 1, "bad device id"))?;
            let mut r = [0.0; 3];
            for a in 0..3 {
                r[a] = f[a + 1].parse().map_err(|_| Error::parse(origin, i + 1, "bad coordinate"))?;
            }
            devices.push(Device::at_point(id, body, Vec3(r)).map_err(|e| Error::parse(origin, i + 1, e.to_string()))?);
        }
        DeviceSet::new(devices)
    }

    pub fn to_text(&self) -> String {
        self.devices
            .iter()
            .map(|d| format!("{} {} {} {}\n", d.id, d.placement.r.x(), d.placement.r.y(), d.placement.r.z()))
            .collect()
    }
}

/// For each joint the device id whose table column gives the lowest loss;
/// ties go to the lowest device id. `devices` pairs ids with vertices.
pub fn assign_by_vertex(table: &LossTable, devices: &[(usize, usize)]) -> Result<[usize; JOINT_COUNT]> {
    ensure!(!devices.is_empty(), "assignment needs at least one device");
    let mut out = [0; JOINT_COUNT];
    for (j, slot) in out.iter_mut().enumerate() {
        let mut best = (f64::INFINITY, usize::MAX);
        for &(id, v) in devices {
            let loss = table.get(j, v);
            if loss < best.0 || (loss == best.0 && id < best.1) {
                best = (loss, id);
            }
        }
        *slot = best.1;
    }
    Ok(out)
}

pub fn assign_devices(table: &LossTable, body: &BodyModel, devices: &DeviceSet) -> Result<[usize; JOINT_COUNT]> {
    let pairs = devices
        .devices
        .iter()
        .map(|d| Ok((d.id, nearest_vertex(body, d.placement.r)?)))
        .collect::<Result<Vec<_>>>()?;
    assign_by_vertex(table, &pairs)
}

fn table_body(t: &LossTable) -> String {
    let mut out = format!(
        "{TABLE_MAGIC}\nbody {}\nmodel {}\nstride {}\nvertices {}\n",
        t.body_fingerprint, t.model_fingerprint, t.stride, t.vertex_count
    );
    for j in 0..JOINT_COUNT {
        let row: Vec<String> = t.row(j).iter().map(|x| format!("{x:?}")).collect();
        let _ = writeln!(out, "{}", row.join(" "));
    }
    out
}

pub fn table_to_text(t: &LossTable) -> String {
    let body = table_body(t);
    format!("{body}checksum {}\n", sha256_hex(body.as_bytes()))
}

pub fn table_from_text(text: &str, origin: &str) -> Result<LossTable> {
    let Some(idx) = text.rfind("checksum ") else {
        return Err(Error::Fingerprint(format!("{origin}: checksum line missing")));
    };
    let (body, tail) = text.split_at(idx);
    let sum = tail["checksum ".len()..].trim();
    if sha256_hex(body.as_bytes()) != sum {
        return Err(Error::Fingerprint(format!(
            "{origin}: checksum mismatch, the table was modified or truncated; rebuild it"
        )));
    }
    let mut lines = body.lines().enumerate();
    let mut next = |what: &str| -> Result<(usize, &str)> {
        lines
            .next()
            .map(|(i, l)| (i + 1, l))
            .ok_or_else(|| Error::parse(origin, 0, format!("missing {what}")))
    };
    let (ln, magic) = next("header")?;
    if magic != TABLE_MAGIC {
        return Err(Error::parse(origin, ln, format!("expected '{TABLE_MAGIC}'")));
    }
    let mut field = |key: &str| -> Result<String> {
        let (ln, l) = next(key)?;
        match l.strip_prefix(key).and_then(|r| r.strip_prefix(' ')) {
            Some(v) if !v.trim().is_empty() => Ok(v.trim().to_string()),
            _ => Err(Error::Fingerprint(format!("{origin} line {ln}: '{key}' field absent"))),
        }
    };
    let body_fingerprint = field("body")?;
    let model_fingerprint = field("model")?;
    let stride: usize = field("stride")?
        .parse()
        .map_err(|_| Error::parse(origin, 4, "bad stride"))?;
    let vertex_count: usize = field("vertices")?
        .parse()
        .map_err(|_| Error::parse(origin, 5, "bad vertex count"))?;
    let mut values = Vec::with_capacity(JOINT_COUNT * vertex_count);
    for j in 0..JOINT_COUNT {
        let (ln, l) = next("table row")?;
        let row = l
            .split_whitespace()
            .map(|x| x.parse::<f64>().map_err(|_| Error::parse(origin, ln, format!("bad value '{x}'"))))
            .collect::<Result<Vec<_>>>()?;
        if row.len() != vertex_count {
            return Err(Error::parse(origin, ln, format!("row {j} has {} values, expected {vertex_count}", row.len())));
        }
        values.extend(row);
    }
    Ok(LossTable {
        vertex_count,
        values,
        stride,
        body_fingerprint,
        model_fingerprint,
    })
}

pub fn write_table(t: &LossTable, path: &Path) -> Result<()> {
    std::fs::write(path, table_to_text(t)).map_err(|e| Error::io(path, e))
}

pub fn read_table(path: &Path) -> Result<LossTable> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    table_from_text(&text, &path.display().to_string())
}

pub fn column_median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}
