//! Binary descriptor store: magic `LOGD`, `u16` version, `u32` count,
//! `u32` dim, `u32`-length-prefixed UTF-8 method tag, then `count * dim`
//! little-endian `f32` values row by row. Ids live in a sidecar text file,
//! one per line, in row order.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use crate::error::{shape_mismatch, Error, IoContext, Result};

pub const STORE_MAGIC: &[u8; 4] = b"LOGD";
pub const STORE_VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct StoredDescriptors {
    pub tag: String,
    pub dim: usize,
    pub ids: Vec<String>,
    /// `ids.len() * dim` values, row-major.
    pub values: Vec<f32>,
}

impl StoredDescriptors {
    pub fn row(&self, i: usize) -> &[f32] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }
}

/// `descriptors.logd` -> `descriptors.logd.ids`.
pub fn ids_path(path: &Path) -> PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(".ids");
    PathBuf::from(name)
}

pub fn write_store(path: &Path, tag: &str, dim: usize, ids: &[String], values: &[f32]) -> Result<()> {
    if values.len() != ids.len() * dim {
        return Err(shape_mismatch(ids.len() * dim, values.len()));
    }
    if let Some(bad) = ids.iter().find(|id| id.is_empty() || id.contains('\n')) {
        return Err(Error::InvalidInput(format!("id {bad:?} cannot be stored")));
    }
    let count = u32::try_from(ids.len()).map_err(|_| Error::InvalidInput("too many descriptors".into()))?;
    let dim32 = u32::try_from(dim).map_err(|_| Error::InvalidInput("dimension too large".into()))?;
    let ctx = || format!("writing {}", path.display());

    // write to temporaries and rename so a crash never leaves a torn store
    let tmp = path.with_extension("logd.tmp");
    {
        let mut out = BufWriter::new(File::create(&tmp).context(ctx)?);
        out.write_all(STORE_MAGIC).context(ctx)?;
        out.write_all(&STORE_VERSION.to_le_bytes()).context(ctx)?;
        out.write_all(&count.to_le_bytes()).context(ctx)?;
        out.write_all(&dim32.to_le_bytes()).context(ctx)?;
        out.write_all(&(tag.len() as u32).to_le_bytes()).context(ctx)?;
        out.write_all(tag.as_bytes()).context(ctx)?;
        for v in values {
            out.write_all(&v.to_le_bytes()).context(ctx)?;
        }
        out.flush().context(ctx)?;
    }
    let ids_tmp = ids_path(&tmp);
    let mut listing = ids.join("\n");
    if !ids.is_empty() {
        listing.push('\n');
    }
    fs::write(&ids_tmp, listing).context(ctx)?;
    fs::rename(&ids_tmp, ids_path(path)).context(ctx)?;
    fs::rename(&tmp, path).context(ctx)?;
    Ok(())
}

pub fn read_store(path: &Path) -> Result<StoredDescriptors> {
    let bad = |reason: &str| Error::Format {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    let ctx = || format!("reading {}", path.display());
    let mut input = BufReader::new(File::open(path).context(ctx)?);
    let mut header = [0u8; 18];
    input.read_exact(&mut header).map_err(|_| bad("truncated header"))?;
    if &header[..4] != STORE_MAGIC {
        return Err(bad("bad magic"));
    }
    let version = u16::from_le_bytes([header[4], header[5]]);
    if version != STORE_VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let word = |i: usize| u32::from_le_bytes(header[i..i + 4].try_into().expect("4 bytes")) as usize;
    let (count, dim, tag_len) = (word(6), word(10), word(14));
    let mut tag = vec![0u8; tag_len];
    input.read_exact(&mut tag).map_err(|_| bad("truncated tag"))?;
    let tag = String::from_utf8(tag).map_err(|_| bad("tag is not UTF-8"))?;

    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes).context(ctx)?;
    if bytes.len() != count * dim * 4 {
        return Err(bad(&format!(
            "expected {} value bytes, found {}",
            count * dim * 4,
            bytes.len()
        )));
    }
    let values = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();

    let ids_file = ids_path(path);
    let listing = fs::read_to_string(&ids_file).context(|| format!("reading {}", ids_file.display()))?;
    let ids: Vec<String> = listing.lines().map(str::to_string).collect();
    if ids.len() != count {
        return Err(bad(&format!("{} ids for {count} descriptors", ids.len())));
    }
    Ok(StoredDescriptors { tag, dim, ids, values })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_layout() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.logd");
        let ids = vec!["a".to_string(), "b".to_string()];
        write_store(&path, "MAC", 2, &ids, &[1.0, -2.0, 0.5, 3.25]).unwrap();
        let bytes = fs::read(&path).unwrap();
        assert_eq!(&bytes[..4], b"LOGD");
        assert_eq!(&bytes[4..6], &[1, 0]);
        assert_eq!(&bytes[6..10], &[2, 0, 0, 0]);
        assert_eq!(&bytes[14..18], &[3, 0, 0, 0]);
        assert_eq!(&bytes[18..21], b"MAC");
        assert_eq!(&bytes[21..25], &1.0f32.to_le_bytes());
        assert_eq!(fs::read_to_string(ids_path(&path)).unwrap(), "a\nb\n");
        let back = read_store(&path).unwrap();
        assert_eq!(back.ids, ids);
        assert_eq!(back.row(1), &[0.5, 3.25]);
        assert_eq!(back.tag, "MAC");
    }

    #[test]
    fn corrupt_files_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.logd");
        write_store(&path, "MAC", 1, &["a".to_string()], &[1.0]).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes.pop();
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(read_store(&path), Err(Error::Format { .. })));
        fs::write(&path, b"NOPE").unwrap();
        assert!(read_store(&path).is_err());
    }

    #[test]
    fn mismatched_lengths_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.logd");
        assert!(write_store(&path, "MAC", 2, &["a".to_string()], &[1.0]).is_err());
    }
}
