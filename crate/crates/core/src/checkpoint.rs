//! Text checkpoints with bit-exact tensors and a content hash.
//!
//! Layout:
//!
//! ```text
//! imucoco-checkpoint <version>
//! sha256 <hex digest of everything after this line>
//! [body]      body config lines
//! [net]       network config lines
//! [train]     training config lines
//! [progress]  phase1 <n> / phase2 <n>
//! [tensors] <count>
//! <name> <dims,comma,separated> <hex f64 bits ...>
//! [adam] <step> <lr> <beta1> <beta2> <eps>     (optional)
//! m <name> <hex ...>
//! v <name> <hex ...>
//! ```

use std::fmt::Write as _;
use std::path::Path;

use crate::autodiff::{AdamState, Tensor};
use crate::body_model::BodyConfig;
use crate::config::{key_values, sha256_hex};
use crate::error::{Error, Result};
use crate::net::{ModelParams, NetConfig};
use crate::trainer::{TrainConfig, TrainState};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &str = "imucoco-checkpoint";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub body: BodyConfig,
    pub train: TrainConfig,
    pub state: TrainState,
}

fn hex_values(data: &[f64]) -> String {
    let words: Vec<String> = data.iter().map(|x| format!("{:016x}", x.to_bits())).collect();
    words.join(" ")
}

fn tensor_line(out: &mut String, prefix: &str, name: &str, t: &Tensor) {
    let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
    let dims = if dims.is_empty() { "-".to_string() } else { dims.join(",") };
    let _ = writeln!(out, "{prefix}{name} {dims} {}", hex_values(t.data()));
}

fn tensors_text(model: &ModelParams) -> String {
    let mut out = format!("[tensors] {}\n", model.tensors.len());
    for (name, t) in model.names.iter().zip(&model.tensors) {
        tensor_line(&mut out, "", name, t);
    }
    out
}

/// Hash of the network config and every parameter bit.
pub fn model_fingerprint(model: &ModelParams) -> String {
    sha256_hex(format!("{}{}", model.config.to_text(), tensors_text(model)).as_bytes())
}

fn payload(ck: &Checkpoint) -> String {
    let mut out = String::new();
    let _ = write!(out, "[body]\n{}", ck.body.to_text());
    let _ = write!(out, "[net]\n{}", ck.state.model.config.to_text());
    let _ = write!(out, "[train]\n{}", ck.train.to_text());
    let _ = writeln!(
        out,
        "[progress]\nphase1 {}\nphase2 {}",
        ck.state.phase1_steps_done, ck.state.phase2_steps_done
    );
    out.push_str(&tensors_text(&ck.state.model));
    if let Some(a) = &ck.state.optimizer {
        let _ = writeln!(
            out,
            "[adam] {} {:016x} {:016x} {:016x} {:016x}",
            a.step,
            a.lr.to_bits(),
            a.beta1.to_bits(),
            a.beta2.to_bits(),
            a.eps.to_bits()
        );
        for (name, t) in ck.state.model.names.iter().zip(&a.m) {
            tensor_line(&mut out, "m ", name, t);
        }
        for (name, t) in ck.state.model.names.iter().zip(&a.v) {
            tensor_line(&mut out, "v ", name, t);
        }
    }
    out
}

pub fn checkpoint_to_text(ck: &Checkpoint) -> String {
    let body = payload(ck);
    format!("{MAGIC} {CHECKPOINT_VERSION}\nsha256 {}\n{body}", sha256_hex(body.as_bytes()))
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn parse_hex(word: &str) -> Result<f64> {
    u64::from_str_radix(word, 16)
        .map(f64::from_bits)
        .map_err(|_| bad(format!("bad tensor word '{word}'")))
}

fn parse_tensor(fields: &[&str]) -> Result<(String, Tensor)> {
    if fields.len() < 2 {
        return Err(bad("truncated tensor line"));
    }
    let shape: Vec<usize> = if fields[1] == "-" {
        Vec::new()
    } else {
        fields[1]
            .split(',')
            .map(|d| d.parse().map_err(|_| bad(format!("bad shape '{}'", fields[1]))))
            .collect::<Result<_>>()?
    };
    let data = fields[2..].iter().map(|w| parse_hex(w)).collect::<Result<Vec<_>>>()?;
    let t = Tensor::new(shape, data).map_err(|e| bad(format!("tensor '{}': {e}", fields[0])))?;
    Ok((fields[0].to_string(), t))
}

fn section<'a>(text: &'a str, name: &str, next: &str) -> Result<&'a str> {
    let start = text
        .find(&format!("[{name}]\n"))
        .ok_or_else(|| bad(format!("section [{name}] missing")))?
        + name.len()
        + 3;
    let end = text[start..]
        .find(&format!("[{next}]"))
        .map(|e| start + e)
        .ok_or_else(|| bad(format!("section [{next}] missing")))?;
    Ok(&text[start..end])
}

pub fn checkpoint_from_text(text: &str, origin: &str) -> Result<Checkpoint> {
    let mut parts = text.splitn(3, '\n');
    let header = parts.next().unwrap_or("");
    let version = header
        .strip_prefix(MAGIC)
        .map(str::trim)
        .ok_or_else(|| bad(format!("{origin} is not a checkpoint file")))?;
    let version: u32 = version.parse().map_err(|_| bad(format!("{origin}: unreadable version '{version}'")))?;
    if version != CHECKPOINT_VERSION {
        return Err(bad(format!(
            "{origin}: unsupported checkpoint version {version} (this build reads version {CHECKPOINT_VERSION}); \
             retrain or re-save the model with this build"
        )));
    }
    let digest = parts
        .next()
        .and_then(|l| l.strip_prefix("sha256 "))
        .ok_or_else(|| bad(format!("{origin}: hash line missing")))?;
    let body = parts.next().unwrap_or("");
    if sha256_hex(body.as_bytes()) != digest.trim() {
        return Err(bad(format!(
            "{origin}: content hash mismatch, the file is corrupted or was edited; restore it from the original run"
        )));
    }

    let mut bc = BodyConfig::default();
    for (k, v, _) in key_values(section(body, "body", "net")?, origin)? {
        bc.set(&k, &v)?;
    }
    let mut nc = NetConfig::default();
    for (k, v, _) in key_values(section(body, "net", "train")?, origin)? {
        nc.set(&k, &v)?;
    }
    let mut tc = TrainConfig::default();
    for (k, v, _) in key_values(section(body, "train", "progress")?, origin)? {
        tc.set(&k, &v)?;
    }
    let progress = section(body, "progress", "tensors")?;
    let mut counts = [0u64; 2];
    for (i, key) in ["phase1", "phase2"].iter().enumerate() {
        counts[i] = progress
            .lines()
            .find_map(|l| l.strip_prefix(key).map(str::trim))
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| bad(format!("progress field {key} missing")))?;
    }

    let tstart = body.find("[tensors] ").ok_or_else(|| bad("section [tensors] missing"))?;
    let mut lines = body[tstart..].lines();
    let count: usize = lines
        .next()
        .and_then(|l| l.strip_prefix("[tensors] "))
        .and_then(|c| c.trim().parse().ok())
        .ok_or_else(|| bad("bad tensor count"))?;
    let mut named = Vec::with_capacity(count);
    for _ in 0..count {
        let line = lines.next().ok_or_else(|| bad("truncated tensor list"))?;
        let fields: Vec<&str> = line.split(' ').collect();
        named.push(parse_tensor(&fields)?);
    }
    let model = ModelParams::from_named(&nc, named).map_err(|e| bad(e.to_string()))?;

    let optimizer = match lines.next() {
        None => None,
        Some(head) => {
            let f: Vec<&str> = head.split(' ').collect();
            if f.len() != 6 || f[0] != "[adam]" {
                return Err(bad("bad optimizer header"));
            }
            let step = f[1].parse().map_err(|_| bad("bad optimizer step"))?;
            let mut m = Vec::with_capacity(count);
            let mut v = Vec::with_capacity(count);
            for (dst, tag) in [(&mut m, "m"), (&mut v, "v")] {
                for i in 0..count {
                    let line = lines.next().ok_or_else(|| bad("truncated optimizer state"))?;
                    let fields: Vec<&str> = line.split(' ').collect();
                    if fields[0] != tag {
                        return Err(bad(format!("expected '{tag}' moment line")));
                    }
                    let (name, t) = parse_tensor(&fields[1..])?;
                    if name != model.names[i] || t.shape() != model.tensors[i].shape() {
                        return Err(bad(format!("moment '{name}' does not match parameter '{}'", model.names[i])));
                    }
                    dst.push(t);
                }
            }
            Some(AdamState {
                lr: parse_hex(f[2])?,
                beta1: parse_hex(f[3])?,
                beta2: parse_hex(f[4])?,
                eps: parse_hex(f[5])?,
                step,
                m,
                v,
            })
        }
    };
    Ok(Checkpoint {
        body: bc,
        train: tc,
        state: TrainState {
            model,
            optimizer,
            phase1_steps_done: counts[0],
            phase2_steps_done: counts[1],
        },
    })
}

pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    std::fs::write(path, checkpoint_to_text(ck)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    checkpoint_from_text(&text, &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(with_adam: bool) -> Checkpoint {
        let model = ModelParams::init(&NetConfig::tiny(), 3).unwrap();
        let mut state = TrainState::fresh(model);
        state.phase1_steps_done = 12;
        if with_adam {
            let mut a = TrainConfig::default().new_optimizer(&state.model);
            a.step = 12;
            a.m[3].data_mut()[0] = -1.5e-7;
            a.v[7].data_mut()[1] = f64::MIN_POSITIVE;
            state.optimizer = Some(a);
        }
        Checkpoint {
            body: BodyConfig {
                segments: 4,
                ..BodyConfig::default()
            },
            train: TrainConfig {
                lambda_align: 10.0,
                ..TrainConfig::default()
            },
            state,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        for with_adam in [false, true] {
            let ck = sample(with_adam);
            let back = checkpoint_from_text(&checkpoint_to_text(&ck), "x").unwrap();
            assert_eq!(back, ck);
            for (a, b) in back.state.model.tensors.iter().zip(&ck.state.model.tensors) {
                for (x, y) in a.data().iter().zip(b.data()) {
                    assert_eq!(x.to_bits(), y.to_bits());
                }
            }
        }
    }

    #[test]
    fn corruption_and_version_errors() {
        let text = checkpoint_to_text(&sample(true));
        let idx = text.find("[tensors]").unwrap() + 40;
        let mut bytes = text.clone().into_bytes();
        bytes[idx] = if bytes[idx] == b'0' { b'1' } else { b'0' };
        let err = checkpoint_from_text(&String::from_utf8(bytes).unwrap(), "x").unwrap_err().to_string();
        assert!(err.contains("hash mismatch"), "{err}");
        let old = text.replacen("imucoco-checkpoint 1", "imucoco-checkpoint 0", 1);
        let err = checkpoint_from_text(&old, "x").unwrap_err().to_string();
        assert!(err.contains("unsupported checkpoint version 0"), "{err}");
        assert!(checkpoint_from_text("hello\n", "x").is_err());
    }

    #[test]
    fn fingerprint_tracks_parameters() {
        let ck = sample(false);
        let a = model_fingerprint(&ck.state.model);
        let mut m = ck.state.model.clone();
        let x = &mut m.tensors[0].data_mut()[0];
        *x = f64::from_bits(x.to_bits() ^ 1);
        assert_ne!(a, model_fingerprint(&m));
        assert_eq!(a, model_fingerprint(&ck.state.model.clone()));
    }
}
