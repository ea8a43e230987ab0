//! Binary checkpoint plus a plain-text manifest.
//!
//! Layout (little-endian):
//!
//! | bytes | field |
//! |-------|-------|
//! | 4     | magic `FPPF` |
//! | 4     | format version, u32 |
//! | 5 × 8 | input_len, pred_len, stages, patch_size, embed_dim as u64 |
//! | 8     | dropout, f64 |
//! | 1     | variant code |
//! | 1     | feed-forward flag |
//! | 8     | number of parameter scalars, u64 |
//! | 8 × n | parameters in declaration order, f64 |

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use super::{Fppformer, ModelConfig, Variant};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"FPPF";
pub const CHECKPOINT_VERSION: u32 = 1;

const HEADER_LEN: usize = 4 + 4 + 5 * 8 + 8 + 1 + 1 + 8;

/// Sidecar manifest path for a checkpoint.
pub fn manifest_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".manifest");
    PathBuf::from(s)
}

fn encode(model: &Fppformer) -> Vec<u8> {
    let c = model.config();
    let data = model.params().data();
    let mut buf = Vec::with_capacity(HEADER_LEN + 8 * data.len());
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    for v in [c.input_len, c.pred_len, c.stages, c.patch_size, c.embed_dim] {
        buf.extend_from_slice(&(v as u64).to_le_bytes());
    }
    buf.extend_from_slice(&c.dropout.to_le_bytes());
    buf.push(c.variant.code());
    buf.push(c.feed_forward as u8);
    buf.extend_from_slice(&(data.len() as u64).to_le_bytes());
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf
}

fn manifest(model: &Fppformer) -> String {
    let mut out = String::from("# name\tshape\toffset\tbyte_offset\tlen\n");
    for spec in model.params().specs() {
        let shape: Vec<String> = spec.shape.iter().map(|d| d.to_string()).collect();
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\n",
            spec.name,
            shape.join("x"),
            spec.offset,
            HEADER_LEN + 8 * spec.offset,
            spec.len()
        ));
    }
    out
}

pub fn save_checkpoint(model: &Fppformer, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&encode(model))?;
    fs::write(manifest_path(path), manifest(model))?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        if end > self.buf.len() {
            return Err(Error::Checkpoint(format!("truncated file ({} bytes)", self.buf.len())));
        }
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Fppformer> {
    let bytes = fs::read(path)?;
    let mut r = Reader { buf: &bytes, pos: 0 };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint(format!("{} is not a checkpoint (bad magic)", path.display())));
    }
    let version = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported checkpoint version {}", version)));
    }
    let mut dims = [0usize; 5];
    for d in &mut dims {
        *d = r.u64()? as usize;
    }
    let dropout = r.f64()?;
    let code = r.u8()?;
    let variant = Variant::from_code(code).ok_or_else(|| Error::Checkpoint(format!("unknown variant code {}", code)))?;
    let feed_forward = r.u8()? != 0;
    let config = ModelConfig {
        input_len: dims[0],
        pred_len: dims[1],
        stages: dims[2],
        patch_size: dims[3],
        embed_dim: dims[4],
        dropout,
        variant,
        feed_forward,
    };
    let mut model = Fppformer::new(config, 0)?;
    let n = r.u64()? as usize;
    if n != model.params().len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {} parameters, configuration needs {}",
            n,
            model.params().len()
        )));
    }
    let data: Vec<f64> = (0..n).map(|_| r.f64()).collect::<Result<_>>()?;
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes after parameters".into()));
    }
    model.params_mut().load(&data)?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig {
            input_len: 24,
            pred_len: 24,
            stages: 2,
            patch_size: 6,
            embed_dim: 4,
            dropout: 0.1,
            variant: Variant::NoDM,
            feed_forward: true,
        }
    }

    #[test]
    fn round_trip_preserves_everything() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let model = Fppformer::new(small(), 77).unwrap();
        save_checkpoint(&model, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.config(), model.config());
        assert_eq!(back.params(), model.params());

        let bytes = fs::read(&path).unwrap();
        assert_eq!(&bytes[..4], b"FPPF");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(bytes.len(), HEADER_LEN + 8 * model.params().len());
    }

    #[test]
    fn manifest_lists_every_parameter() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let model = Fppformer::new(small(), 1).unwrap();
        save_checkpoint(&model, &path).unwrap();
        let text = fs::read_to_string(manifest_path(&path)).unwrap();
        let lines: Vec<_> = text.lines().filter(|l| !l.starts_with('#')).collect();
        assert_eq!(lines.len(), model.params().specs().len());
        let first: Vec<_> = lines[0].split('\t').collect();
        assert_eq!(first, vec!["embed.weight", "1x4", "0", &HEADER_LEN.to_string(), "4"]);

        // byte offsets point at the stored values
        let bytes = fs::read(&path).unwrap();
        let last: Vec<_> = lines.last().unwrap().split('\t').collect();
        let off: usize = last[3].parse().unwrap();
        let id = model.params().find(last[0]).unwrap();
        let want = model.params().values(id)[0];
        assert_eq!(f64::from_le_bytes(bytes[off..off + 8].try_into().unwrap()), want);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let model = Fppformer::new(small(), 1).unwrap();
        save_checkpoint(&model, &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 3);
        fs::write(&path, &bytes).unwrap();
        assert!(load_checkpoint(&path).is_err());
        fs::write(&path, b"NOPE0000").unwrap();
        assert!(load_checkpoint(&path).is_err());
    }
}
