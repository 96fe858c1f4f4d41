//! Plain-text `key = value` configuration files.
//!
//! `#` starts a comment; blank lines are ignored. Keys prefixed `body.` are
//! routed to [`BodyConfig`]; the rest configure the network and trainer.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::body_model::BodyConfig;
use crate::error::{Error, Result};
use crate::net::NetConfig;
use crate::trainer::TrainConfig;

/// Splits `text` into `(key, value, line_number)` triples.
pub fn key_values(text: &str, origin: &str) -> Result<Vec<(String, String, usize)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::parse(origin, i + 1, format!("expected `key = value`, got {line:?}")))?;
        out.push((k.trim().to_string(), v.trim().to_string(), i + 1));
    }
    Ok(out)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Everything a run needs, loaded from one file.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub body: BodyConfig,
    pub net: NetConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (key, value, line) in key_values(text, origin)? {
            let res = if let Some(k) = key.strip_prefix("body.") {
                cfg.body.set(k, &value)
            } else if NetConfig::KEYS.contains(&key.as_str()) {
                cfg.net.set(&key, &value)
            } else {
                cfg.train.set(&key, &value)
            };
            res.map_err(|e| Error::parse(origin, line, e.to_string()))?;
        }
        cfg.body.validate()?;
        cfg.net.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_reports_lines() {
        let kv = key_values("# c\n\na = 1 # trailing\n b=two \n", "x").unwrap();
        assert_eq!(kv, vec![("a".into(), "1".into(), 3), ("b".into(), "two".into(), 4)]);
        match key_values("a = 1\nnonsense\n", "x") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn routes_keys() {
        let cfg = RunConfig::parse("body.segments = 4\nd_h = 8\nlambda_align = 2.5\n", "x").unwrap();
        assert_eq!(cfg.body.segments, 4);
        assert_eq!(cfg.net.d_h, 8);
        assert_eq!(cfg.train.lambda_align, 2.5);
        assert!(RunConfig::parse("what = 1\n", "x").is_err());
    }
}
