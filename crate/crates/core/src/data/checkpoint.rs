//! Binary checkpoint container.
//!
//! ```text
//! magic     8 bytes  "MSDCKPT\0"
//! version   u32 LE
//! meta_len  u32 LE
//! meta      meta_len bytes of UTF-8 "key=value\n" lines
//! count     u64 LE   number of payload values
//! payload   count × f64 LE
//! ```
//!
//! The metadata always carries `role`, `arch`, `seed` and `iteration`.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: [u8; 8] = *b"MSDCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

const RESERVED: [&str; 4] = ["role", "arch", "seed", "iteration"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Teacher,
    Generator,
    Fake,
    DiscHead,
    TsmStudent,
    Optimizer,
    Paired,
    Histogram,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Teacher => "teacher",
            Role::Generator => "generator",
            Role::Fake => "fake",
            Role::DiscHead => "disc_head",
            Role::TsmStudent => "tsm_student",
            Role::Optimizer => "optimizer",
            Role::Paired => "paired",
            Role::Histogram => "histogram",
        }
    }
}

impl FromStr for Role {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "teacher" => Role::Teacher,
            "generator" => Role::Generator,
            "fake" => Role::Fake,
            "disc_head" => Role::DiscHead,
            "tsm_student" => Role::TsmStudent,
            "optimizer" => Role::Optimizer,
            "paired" => Role::Paired,
            "histogram" => Role::Histogram,
            other => return Err(Error::CorruptHeader(format!("unknown role `{other}`"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub role: Role,
    pub arch: String,
    pub seed: u64,
    pub iteration: u64,
    pub meta: BTreeMap<String, String>,
    pub payload: Vec<f64>,
}

impl Checkpoint {
    pub fn expect_role(&self, role: Role) -> Result<()> {
        if self.role != role {
            return Err(Error::RoleMismatch {
                expected: role.as_str().into(),
                found: self.role.as_str().into(),
            });
        }
        Ok(())
    }

    pub fn meta_str(&self, key: &str) -> Result<&str> {
        self.meta
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::CorruptHeader(format!("missing metadata key `{key}`")))
    }

    pub fn meta_parse<T: FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.meta_str(key)?;
        raw.parse()
            .map_err(|_| Error::CorruptHeader(format!("bad value `{raw}` for `{key}`")))
    }
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let mut meta = String::new();
    meta.push_str(&format!("role={}\n", ckpt.role.as_str()));
    meta.push_str(&format!("arch={}\n", ckpt.arch));
    meta.push_str(&format!("seed={}\n", ckpt.seed));
    meta.push_str(&format!("iteration={}\n", ckpt.iteration));
    for (k, v) in &ckpt.meta {
        if RESERVED.contains(&k.as_str()) || k.contains(['=', '\n']) || v.contains('\n') {
            return Err(Error::InvalidArgument(format!(
                "metadata entry `{k}` is not encodable"
            )));
        }
        meta.push_str(&format!("{k}={v}\n"));
    }
    let mut out = Vec::with_capacity(24 + meta.len() + ckpt.payload.len() * 8);
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(meta.as_bytes());
    out.extend_from_slice(&(ckpt.payload.len() as u64).to_le_bytes());
    for v in &ckpt.payload {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

fn take<'a>(bytes: &'a [u8], pos: &mut usize, n: usize, what: &str) -> Result<&'a [u8]> {
    if bytes.len() < *pos + n {
        return Err(Error::CorruptHeader(format!("file ends inside {what}")));
    }
    let s = &bytes[*pos..*pos + n];
    *pos += n;
    Ok(s)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut pos = 0;
    let magic = take(bytes, &mut pos, 8, "magic")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::CorruptHeader("bad magic".into()));
    }
    let version = u32::from_le_bytes(take(bytes, &mut pos, 4, "version")?.try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let meta_len = u32::from_le_bytes(take(bytes, &mut pos, 4, "metadata length")?.try_into().unwrap());
    let meta_raw = take(bytes, &mut pos, meta_len as usize, "metadata")?;
    let meta_text =
        std::str::from_utf8(meta_raw).map_err(|_| Error::CorruptHeader("metadata is not UTF-8".into()))?;
    let mut meta = BTreeMap::new();
    for line in meta_text.lines() {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::CorruptHeader(format!("malformed metadata line `{line}`")))?;
        meta.insert(k.to_string(), v.to_string());
    }
    let count = u64::from_le_bytes(take(bytes, &mut pos, 8, "payload length")?.try_into().unwrap());
    let need = (count as usize)
        .checked_mul(8)
        .ok_or_else(|| Error::CorruptHeader("payload length overflows".into()))?;
    let rest = &bytes[pos..];
    if rest.len() < need {
        return Err(Error::Truncated {
            expected: need,
            found: rest.len(),
        });
    }
    if rest.len() > need {
        return Err(Error::CorruptHeader(format!(
            "{} trailing bytes after payload",
            rest.len() - need
        )));
    }
    let payload = rest
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();

    let mut take_meta = |k: &str| {
        meta.remove(k)
            .ok_or_else(|| Error::CorruptHeader(format!("missing metadata key `{k}`")))
    };
    let role: Role = take_meta("role")?.parse()?;
    let arch = take_meta("arch")?;
    let seed = take_meta("seed")?
        .parse()
        .map_err(|_| Error::CorruptHeader("bad seed".into()))?;
    let iteration = take_meta("iteration")?
        .parse()
        .map_err(|_| Error::CorruptHeader("bad iteration".into()))?;
    let ckpt = Checkpoint {
        role,
        arch,
        seed,
        iteration,
        meta,
        payload,
    };
    if let Some(count) = mlp_param_count(&ckpt.arch) {
        if ckpt.payload.len() != count {
            return Err(Error::CorruptHeader(format!(
                "architecture {} needs {count} parameters, payload has {}",
                ckpt.arch,
                ckpt.payload.len()
            )));
        }
    }
    Ok(ckpt)
}

/// Parameter count for an `a-b-c:silu` network descriptor.
pub(crate) fn mlp_param_count(arch: &str) -> Option<usize> {
    let sizes = parse_mlp_descriptor(arch)?;
    Some(sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum())
}

pub(crate) fn parse_mlp_descriptor(arch: &str) -> Option<Vec<usize>> {
    let body = arch.strip_suffix(":silu")?;
    let sizes: Option<Vec<usize>> = body.split('-').map(|s| s.parse().ok()).collect();
    sizes.filter(|s| s.len() >= 2 && s.iter().all(|&d| d > 0))
}

/// Writes to a temporary sibling and renames it into place.
pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let bytes = encode_checkpoint(ckpt)?;
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::InvalidArgument(format!("{} is not a file path", path.display())))?;
    let tmp = path.with_file_name(format!(
        ".{}.tmp{}",
        file_name.to_string_lossy(),
        std::process::id()
    ));
    let write = || -> std::io::Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    };
    write().map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

pub fn load_checkpoint_as(path: &Path, role: Role) -> Result<Checkpoint> {
    let ckpt = load_checkpoint(path)?;
    ckpt.expect_role(role)?;
    Ok(ckpt)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut meta = BTreeMap::new();
        meta.insert("num_classes".into(), "8".into());
        Checkpoint {
            role: Role::Teacher,
            arch: "3-2-1:silu".into(),
            seed: 17,
            iteration: 250,
            meta,
            payload: vec![
                0.1,
                -2.5,
                f64::MIN_POSITIVE,
                1e300,
                -0.0,
                3.0,
                4.0,
                5.0,
                6.0,
                7.0,
                8.0,
            ],
        }
    }

    #[test]
    fn round_trip_is_bitwise() {
        let c = sample();
        let back = decode_checkpoint(&encode_checkpoint(&c).unwrap()).unwrap();
        assert_eq!(back.role, c.role);
        assert_eq!(back.meta, c.meta);
        let a: Vec<u64> = c.payload.iter().map(|v| v.to_bits()).collect();
        let b: Vec<u64> = back.payload.iter().map(|v| v.to_bits()).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn truncated_payload_is_detected() {
        let bytes = encode_checkpoint(&sample()).unwrap();
        let err = decode_checkpoint(&bytes[..bytes.len() - 3]).unwrap_err();
        assert!(matches!(err, Error::Truncated { .. }));
    }

    #[test]
    fn bad_magic_and_version() {
        let mut bytes = encode_checkpoint(&sample()).unwrap();
        bytes[0] = b'X';
        assert!(matches!(decode_checkpoint(&bytes), Err(Error::CorruptHeader(_))));
        let mut bytes = encode_checkpoint(&sample()).unwrap();
        bytes[8..12].copy_from_slice(&7u32.to_le_bytes());
        assert!(matches!(
            decode_checkpoint(&bytes),
            Err(Error::UnsupportedVersion(7))
        ));
        assert!(matches!(
            decode_checkpoint(&bytes[..5]),
            Err(Error::CorruptHeader(_))
        ));
    }

    #[test]
    fn role_mismatch_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.ckpt");
        save_checkpoint(&p, &sample()).unwrap();
        let err = load_checkpoint_as(&p, Role::Generator).unwrap_err();
        assert!(matches!(err, Error::RoleMismatch { .. }));
        assert!(load_checkpoint_as(&p, Role::Teacher).is_ok());
    }

    #[test]
    fn architecture_count_is_checked() {
        let mut c = sample();
        c.payload.pop();
        let bytes = encode_checkpoint(&c).unwrap();
        assert!(matches!(decode_checkpoint(&bytes), Err(Error::CorruptHeader(_))));
    }

    #[test]
    fn descriptor_parsing() {
        assert_eq!(parse_mlp_descriptor("26-128-2:silu"), Some(vec![26, 128, 2]));
        assert_eq!(mlp_param_count("3-2-1:silu"), Some(3 * 2 + 2 + 2 + 1));
        assert_eq!(parse_mlp_descriptor("pairs:2+1+2"), None);
    }
}
