//! Named-tensor container: a plain-text manifest followed by a little-endian
//! `f64` payload.
//!
//! ```text
//! mac-checkpoint v1
//! meta <key> <value>
//! config <n>
//! <n lines of TOML>
//! tensor <name> f64 <d0>x<d1>... <byte offset> <byte length>
//! end
//! <payload>
//! ```
//!
//! A scalar has the shape `-`. Offsets are relative to the first payload byte,
//! tensors are packed in manifest order, and the payload length must equal the
//! sum of all tensor lengths.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const MAGIC: &str = "mac-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    /// Configuration snapshot (TOML).
    pub config: String,
    pub tensors: BTreeMap<String, Tensor>,
}

fn err(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn valid_token(s: &str) -> bool {
    !s.is_empty() && !s.chars().any(char::is_whitespace)
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_meta(mut self, key: &str, value: impl ToString) -> Self {
        self.meta.insert(key.to_string(), value.to_string());
        self
    }

    pub fn meta_usize(&self, key: &str) -> Result<usize> {
        let v = self
            .meta
            .get(key)
            .ok_or_else(|| Error::Metadata(format!("missing key `{key}`")))?;
        v.parse()
            .map_err(|_| Error::Metadata(format!("key `{key}` is not an integer: {v}")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut head = format!("{MAGIC} v{VERSION}\n");
        for (k, v) in &self.meta {
            if !valid_token(k) || v.contains('\n') {
                return Err(err(format!("unencodable meta entry `{k}`")));
            }
            head.push_str(&format!("meta {k} {v}\n"));
        }
        let config_lines: Vec<&str> = if self.config.is_empty() { Vec::new() } else { self.config.lines().collect() };
        head.push_str(&format!("config {}\n", config_lines.len()));
        for l in &config_lines {
            head.push_str(l);
            head.push('\n');
        }
        let mut payload = Vec::new();
        for (name, t) in &self.tensors {
            if !valid_token(name) {
                return Err(err(format!("unencodable tensor name `{name}`")));
            }
            let shape = if t.shape().is_empty() {
                "-".to_string()
            } else {
                t.shape().iter().map(usize::to_string).collect::<Vec<_>>().join("x")
            };
            let len = t.len() * 8;
            head.push_str(&format!("tensor {name} f64 {shape} {} {len}\n", payload.len()));
            for v in t.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        head.push_str("end\n");
        let mut out = head.into_bytes();
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0usize;
        let mut next_line = || -> Result<&str> {
            let rest = &bytes[pos..];
            let nl = rest.iter().position(|&b| b == b'\n').ok_or_else(|| err("manifest ends without `end`"))?;
            let line = std::str::from_utf8(&rest[..nl]).map_err(|_| err(format!("non-UTF-8 manifest at byte {pos}")))?;
            pos += nl + 1;
            Ok(line)
        };
        let header = next_line()?;
        let version = header
            .strip_prefix(MAGIC)
            .and_then(|v| v.trim().strip_prefix('v'))
            .ok_or_else(|| err(format!("not a checkpoint (header `{header}`)")))?;
        if version != VERSION.to_string() {
            return Err(err(format!("unsupported version v{version}, expected v{VERSION}")));
        }
        let mut ck = Checkpoint::new();
        let mut entries = Vec::new();
        loop {
            let line = next_line()?;
            let mut parts = line.splitn(2, ' ');
            match (parts.next(), parts.next()) {
                (Some("end"), None) => break,
                (Some("meta"), Some(rest)) => {
                    let (k, v) = rest.split_once(' ').unwrap_or((rest, ""));
                    ck.meta.insert(k.to_string(), v.to_string());
                }
                (Some("config"), Some(n)) => {
                    let n: usize = n.parse().map_err(|_| err(format!("bad config line count `{n}`")))?;
                    let lines: Vec<String> = (0..n).map(|_| next_line().map(str::to_string)).collect::<Result<_>>()?;
                    ck.config = lines.join("\n");
                    if n > 0 {
                        ck.config.push('\n');
                    }
                }
                (Some("tensor"), Some(rest)) => {
                    let f: Vec<&str> = rest.split(' ').collect();
                    let [name, dtype, shape, off, len] = f[..] else {
                        return Err(err(format!("malformed tensor entry `{line}`")));
                    };
                    if dtype != "f64" {
                        return Err(err(format!("unsupported dtype `{dtype}` for `{name}`")));
                    }
                    let shape: Vec<usize> = if shape == "-" {
                        Vec::new()
                    } else {
                        shape
                            .split('x')
                            .map(|d| d.parse().map_err(|_| err(format!("bad shape for `{name}`"))))
                            .collect::<Result<_>>()?
                    };
                    let off: usize = off.parse().map_err(|_| err(format!("bad offset for `{name}`")))?;
                    let len: usize = len.parse().map_err(|_| err(format!("bad length for `{name}`")))?;
                    if shape.iter().product::<usize>() * 8 != len {
                        return Err(err(format!("`{name}`: shape {shape:?} does not match {len} bytes")));
                    }
                    entries.push((name.to_string(), shape, off, len));
                }
                _ => return Err(err(format!("unrecognized manifest line `{line}`"))),
            }
        }
        let payload = &bytes[pos..];
        let expected: usize = entries.iter().map(|e| e.3).sum();
        if payload.len() != expected {
            return Err(err(format!(
                "payload is {} bytes, manifest declares {expected}",
                payload.len()
            )));
        }
        for (name, shape, off, len) in entries {
            let raw = payload
                .get(off..off + len)
                .ok_or_else(|| err(format!("`{name}` lies outside the payload")))?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            ck.tensors.insert(name, Tensor::new(&shape, data)?);
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn sample() -> Checkpoint {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let mut ck = Checkpoint::new().with_meta("kind", "test").with_meta("note", "two words");
        ck.config = "[model]\npreset = \"nano\"\n".to_string();
        ck.tensors.insert("a.weight".into(), Tensor::randn(&[3, 4], 1.0, &mut rng));
        ck.tensors.insert("b".into(), Tensor::scalar(f64::MIN_POSITIVE));
        ck.tensors.insert("c".into(), Tensor::from_vec(vec![-0.0, 1e300, 5e-324]));
        ck
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ck = sample();
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        assert_eq!(back.meta, ck.meta);
        assert_eq!(back.config, ck.config);
        for (k, t) in &ck.tensors {
            assert!(t.bit_eq(&back.tensors[k]), "{k}");
        }
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let mut bytes = sample().to_bytes().unwrap();
        bytes.pop();
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Checkpoint(m)) if m.contains("payload")));
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let bytes = sample().to_bytes().unwrap();
        let text = String::from_utf8_lossy(&bytes).replacen("v1", "v9", 1);
        let e = Checkpoint::from_bytes(text.as_bytes()).unwrap_err();
        assert!(e.to_string().contains("version"));
    }

    #[test]
    fn shape_and_length_must_agree() {
        let bytes = sample().to_bytes().unwrap();
        let text = String::from_utf8_lossy(&bytes).replacen("3x4", "3x5", 1);
        assert!(Checkpoint::from_bytes(text.as_bytes()).is_err());
    }

    #[test]
    fn missing_meta_key_is_a_metadata_error() {
        assert!(matches!(sample().meta_usize("grid_t"), Err(Error::Metadata(_))));
        assert!(matches!(sample().meta_usize("kind"), Err(Error::Metadata(_))));
    }
}
