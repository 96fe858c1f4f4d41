//! Deterministic procedural motion: band-limited joint-angle trajectories that
//! start and end in T-pose, plus the `.motion` text format.

use std::f64::consts::{PI, TAU};
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::body_model::{PoseFrame, JOINT_COUNT};
use crate::error::{ensure, Error, Result};
use crate::math::{Quat, Vec3};

pub const DEFAULT_FPS: u32 = 60;
/// Length of the T-pose blend at each end of a sequence, seconds.
pub const BLEND_SECONDS: f64 = 0.5;
/// Forward speed of the `walk` root trajectory, m/s.
pub const WALK_SPEED: f64 = 1.2;
pub const MAX_FREQUENCY_HZ: f64 = 2.0;
pub const MAX_TERMS_PER_JOINT: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MotionKind {
    Idle,
    Walk,
    ArmSwing,
    Squat,
    Mixed,
}

impl MotionKind {
    pub const ALL: [MotionKind; 5] = [
        MotionKind::Idle,
        MotionKind::Walk,
        MotionKind::ArmSwing,
        MotionKind::Squat,
        MotionKind::Mixed,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MotionKind::Idle => "idle",
            MotionKind::Walk => "walk",
            MotionKind::ArmSwing => "arm_swing",
            MotionKind::Squat => "squat",
            MotionKind::Mixed => "mixed",
        }
    }
}

impl FromStr for MotionKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        MotionKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Validation(format!("unknown motion kind {s:?}")))
    }
}

impl std::fmt::Display for MotionKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MotionSequence {
    pub fps: u32,
    pub frames: Vec<PoseFrame>,
    pub label: Option<String>,
}

impl MotionSequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn dt(&self) -> f64 {
        1.0 / self.fps as f64
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.fps > 0, "fps must be positive");
        ensure!(self.frames.len() >= 3, "motion needs at least 3 frames, got {}", self.frames.len());
        for (t, f) in self.frames.iter().enumerate() {
            f.validate().map_err(|e| Error::Validation(format!("frame {t}: {e}")))?;
        }
        Ok(())
    }

    /// First frame whose local rotations are all the identity; frame 0 when
    /// the sequence never passes through T-pose.
    pub fn calibration_frame(&self) -> usize {
        self.frames
            .iter()
            .position(|f| f.local_rotation.iter().all(|q| q.angle_to(Quat::IDENTITY) < 1e-9))
            .unwrap_or(0)
    }

    /// Applies a fixed world rotation to every frame (root rotation and
    /// translation).
    pub fn rotated(&self, r: Quat) -> MotionSequence {
        let mut out = self.clone();
        for f in &mut out.frames {
            f.local_rotation[0] = r * f.local_rotation[0];
            f.root_translation = r.rotate(f.root_translation);
        }
        out
    }
}

/// Smooth 0→1 ramp over the first and last blend window.
pub fn envelope(t: f64, span: f64) -> f64 {
    let b = blend_length(span);
    let s = |u: f64| {
        let u = u.clamp(0.0, 1.0);
        u * u * (3.0 - 2.0 * u)
    };
    if t < b {
        s(t / b)
    } else if t > span - b {
        s((span - t) / b)
    } else {
        1.0
    }
}

pub fn blend_length(span: f64) -> f64 {
    BLEND_SECONDS.min(span / 2.0)
}

/// `∫₀ᵗ envelope`, closed form.
pub fn envelope_integral(t: f64, span: f64) -> f64 {
    let b = blend_length(span);
    let f = |u: f64| u * u * u - 0.5 * u * u * u * u;
    if t <= b {
        b * f(t / b)
    } else if t <= span - b {
        0.5 * b + (t - b)
    } else {
        0.5 * b + (span - 2.0 * b) + b * (0.5 - f((span - t) / b))
    }
}

#[derive(Debug, Clone, Copy)]
struct Term {
    joint: usize,
    axis: usize,
    amplitude: f64,
    freq: f64,
    phase: f64,
}

fn kind_terms(kind: MotionKind, rng: &mut ChaCha8Rng) -> Vec<Term> {
    let t = |joint, axis, amplitude, freq, phase| Term {
        joint,
        axis,
        amplitude,
        freq,
        phase,
    };
    let (x, y, z) = (0, 1, 2);
    let mut base = match kind {
        MotionKind::Idle => return Vec::new(),
        MotionKind::Walk => vec![
            t(1, x, 0.45, 1.0, 0.0),
            t(2, x, 0.45, 1.0, PI),
            t(4, x, 0.50, 1.0, 0.6),
            t(5, x, 0.50, 1.0, PI + 0.6),
            t(7, x, 0.15, 1.0, 1.2),
            t(8, x, 0.15, 1.0, PI + 1.2),
            t(3, y, 0.08, 1.0, 0.0),
            t(0, z, 0.05, 1.0, 0.5),
            t(16, y, 0.30, 1.0, PI),
            t(17, y, 0.30, 1.0, 0.0),
            t(18, y, 0.20, 1.0, PI + 0.3),
            t(19, y, 0.20, 1.0, 0.3),
            t(12, x, 0.05, 2.0, 0.0),
        ],
        MotionKind::ArmSwing => vec![
            t(16, z, 0.80, 0.5, 0.0),
            t(17, z, 0.80, 0.5, PI),
            t(16, y, 0.50, 0.7, 0.4),
            t(17, y, 0.50, 0.7, 0.4),
            t(18, y, 0.70, 0.6, 0.0),
            t(19, y, 0.70, 0.6, 1.0),
            t(20, x, 0.30, 1.0, 0.0),
            t(21, x, 0.30, 1.0, 0.5),
            t(13, z, 0.15, 0.5, 0.0),
            t(14, z, 0.15, 0.5, PI),
            t(6, y, 0.10, 0.5, 0.0),
        ],
        MotionKind::Squat => vec![
            t(1, x, 0.70, 0.4, 0.0),
            t(2, x, 0.70, 0.4, 0.0),
            t(4, x, 0.90, 0.4, PI),
            t(5, x, 0.90, 0.4, PI),
            t(7, x, 0.30, 0.4, 0.0),
            t(8, x, 0.30, 0.4, 0.0),
            t(3, x, 0.20, 0.4, 0.0),
            t(16, z, 0.40, 0.4, 0.0),
            t(17, z, 0.40, 0.4, PI),
        ],
        MotionKind::Mixed => {
            let mut terms = Vec::new();
            for joint in 0..JOINT_COUNT {
                if rng.gen_bool(0.4) {
                    continue;
                }
                for _ in 0..rng.gen_range(1..=3) {
                    terms.push(t(
                        joint,
                        rng.gen_range(0..3),
                        rng.gen_range(0.05..0.2),
                        rng.gen_range(0.2..MAX_FREQUENCY_HZ),
                        rng.gen_range(0.0..TAU),
                    ));
                }
            }
            return terms;
        }
    };
    for term in &mut base {
        term.amplitude *= rng.gen_range(0.85..1.15);
        term.phase += rng.gen_range(-0.3..0.3);
    }
    // One small seeded perturbation per moving joint, within the per-joint budget.
    let mut joints: Vec<usize> = base.iter().map(|t| t.joint).collect();
    joints.sort_unstable();
    joints.dedup();
    for joint in joints {
        if base.iter().filter(|t| t.joint == joint).count() < MAX_TERMS_PER_JOINT {
            base.push(t(
                joint,
                rng.gen_range(0..3),
                rng.gen_range(0.01..0.05),
                rng.gen_range(0.2..MAX_FREQUENCY_HZ),
                rng.gen_range(0.0..TAU),
            ));
        }
    }
    base
}

pub fn generate_motion(seed: u64, duration_s: f64, kind: MotionKind) -> Result<MotionSequence> {
    generate_motion_at(seed, duration_s, kind, DEFAULT_FPS)
}

pub fn generate_motion_at(seed: u64, duration_s: f64, kind: MotionKind, fps: u32) -> Result<MotionSequence> {
    ensure!(duration_s.is_finite() && duration_s >= 0.1, "duration must be >= 0.1 s, got {duration_s}");
    ensure!(fps > 0, "fps must be positive");
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (kind as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let n = ((duration_s * fps as f64).round() as usize).max(3);
    let span = (n - 1) as f64 / fps as f64;
    let terms = kind_terms(kind, &mut rng);
    let sway_phase = rng.gen_range(0.0..TAU);

    let frames = (0..n)
        .map(|i| {
            let t = i as f64 / fps as f64;
            let env = envelope(t, span);
            let mut rotvec = [Vec3::ZERO; JOINT_COUNT];
            for term in &terms {
                rotvec[term.joint].0[term.axis] +=
                    env * term.amplitude * (TAU * term.freq * t + term.phase).sin();
            }
            let mut frame = PoseFrame::tpose();
            for j in 0..JOINT_COUNT {
                frame.local_rotation[j] = Quat::from_rotvec(rotvec[j]);
            }
            frame.root_translation = match kind {
                MotionKind::Idle | MotionKind::ArmSwing => Vec3::ZERO,
                MotionKind::Walk => Vec3::new(
                    0.02 * env * (TAU * t + sway_phase).sin(),
                    0.02 * env * (TAU * 2.0 * t).sin(),
                    WALK_SPEED * envelope_integral(t, span),
                ),
                MotionKind::Squat => Vec3::new(0.0, -0.12 * env * 0.5 * (1.0 - (TAU * 0.4 * t).cos()), 0.0),
                MotionKind::Mixed => Vec3::new(
                    0.1 * env * (TAU * 0.3 * t + sway_phase).sin(),
                    0.0,
                    0.1 * env * (TAU * 0.25 * t).sin(),
                ),
            };
            frame
        })
        .collect();
    Ok(MotionSequence {
        fps,
        frames,
        label: Some(kind.name().to_string()),
    })
}

/// Motion kinds of the small fixed training corpus.
pub const DESK_KINDS: [MotionKind; 4] = [MotionKind::Idle, MotionKind::Walk, MotionKind::ArmSwing, MotionKind::Squat];

/// One sequence per desk kind, seeded `seed, seed + 1, ...`.
pub fn desk_corpus(seed: u64, duration_s: f64) -> Result<Vec<MotionSequence>> {
    DESK_KINDS
        .iter()
        .enumerate()
        .map(|(i, &k)| generate_motion(seed.wrapping_add(i as u64), duration_s, k))
        .collect()
}

pub fn motion_to_text(seq: &MotionSequence) -> String {
    let mut s = String::new();
    let label = seq.label.as_deref().unwrap_or("");
    writeln!(s, "fps {} frames {} label {}", seq.fps, seq.frames.len(), label).unwrap();
    for f in &seq.frames {
        let mut parts: Vec<String> = f.root_translation.0.iter().map(|v| format!("{v:.16e}")).collect();
        for q in &f.local_rotation {
            parts.extend(q.to_array().iter().map(|v| format!("{v:.16e}")));
        }
        s.push_str(&parts.join(" "));
        s.push('\n');
    }
    s
}

pub fn motion_from_text(text: &str, origin: &str) -> Result<MotionSequence> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::parse(origin, 1, "empty file"))?;
    let toks: Vec<&str> = header.splitn(6, ' ').collect();
    if toks.len() < 5 || toks[0] != "fps" || toks[2] != "frames" || toks[4] != "label" {
        return Err(Error::parse(origin, 1, "expected header `fps <int> frames <int> label <text>`"));
    }
    let fps: u32 = toks[1].parse().map_err(|_| Error::parse(origin, 1, "bad fps"))?;
    let count: usize = toks[3].parse().map_err(|_| Error::parse(origin, 1, "bad frame count"))?;
    let label = toks.get(5).map(|s| s.to_string()).filter(|s| !s.is_empty());

    let mut frames = Vec::with_capacity(count);
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::parse(origin, i + 1, "non-numeric value"))?;
        if vals.len() != 3 + 4 * JOINT_COUNT {
            return Err(Error::parse(origin, i + 1, format!("expected 99 values, got {}", vals.len())));
        }
        let mut f = PoseFrame::tpose();
        f.root_translation = Vec3::new(vals[0], vals[1], vals[2]);
        for j in 0..JOINT_COUNT {
            let o = 3 + 4 * j;
            f.local_rotation[j] = Quat::new(vals[o], vals[o + 1], vals[o + 2], vals[o + 3]);
        }
        f.validate().map_err(|e| Error::parse(origin, i + 1, e.to_string()))?;
        frames.push(f);
    }
    if frames.len() != count {
        return Err(Error::parse(
            origin,
            frames.len() + 2,
            format!("truncated: header declares {count} frames, found {}", frames.len()),
        ));
    }
    let seq = MotionSequence { fps, frames, label };
    seq.validate().map_err(|e| Error::parse(origin, 1, e.to_string()))?;
    Ok(seq)
}

pub fn write_motion(seq: &MotionSequence, path: &Path) -> Result<()> {
    std::fs::write(path, motion_to_text(seq)).map_err(|e| Error::io(path, e))
}

pub fn read_motion(path: &Path) -> Result<MotionSequence> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    motion_from_text(&text, &path.display().to_string())
}
