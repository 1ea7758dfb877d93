//! Fixed binary embedding cache.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! bytes 0..8    magic  b"IDLKEMB1"
//! bytes 8..12   u32 version (1)
//! bytes 12..16  u32 dim
//! bytes 16..20  u32 count
//! bytes 20..    count * dim * 4 bytes of f32 rows, row-major
//! ```
//!
//! A text sidecar at `<path>.idx` maps `sample_id<TAB>row<TAB>label?` lines
//! onto rows; the label column is empty for unlabeled entries.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use crate::{Error, Float, Result};

const MAGIC: &[u8; 8] = b"IDLKEMB1";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct CacheIndexEntry {
    pub sample_id: String,
    pub row: usize,
    pub label: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingCache {
    pub dim: usize,
    pub rows: Vec<Vec<f32>>,
    pub index: Vec<CacheIndexEntry>,
}

fn idx_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(".idx");
    PathBuf::from(s)
}

impl EmbeddingCache {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            rows: Vec::new(),
            index: Vec::new(),
        }
    }

    /// Append one embedding; returns its row number.
    pub fn push<T: Float>(
        &mut self,
        sample_id: impl Into<String>,
        label: Option<usize>,
        values: &[T],
    ) -> Result<usize> {
        if values.len() != self.dim {
            return Err(Error::DimensionMismatch {
                left: values.len(),
                right: self.dim,
            });
        }
        let row = self.rows.len();
        self.rows.push(
            values
                .iter()
                .map(|&x| x.to_f64().unwrap_or(f64::NAN) as f32)
                .collect(),
        );
        self.index.push(CacheIndexEntry {
            sample_id: sample_id.into(),
            row,
            label,
        });
        Ok(row)
    }

    pub fn row<T: Float>(&self, row: usize) -> Result<Vec<T>> {
        let values = self.rows.get(row).ok_or_else(|| Error::MalformedFile {
            path: "embedding cache".into(),
            detail: format!("row {row} out of range ({} rows)", self.rows.len()),
        })?;
        Ok(values
            .iter()
            .map(|&x| T::from(x).expect("f32 converts into the scalar type"))
            .collect())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut buf: Vec<u8> =
            Vec::with_capacity(20 + self.rows.len() * self.dim * 4);
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.dim as u32).to_le_bytes());
        buf.extend_from_slice(&(self.rows.len() as u32).to_le_bytes());
        for row in &self.rows {
            for &x in row {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::File::create(path)?.write_all(&buf)?;

        let mut sidecar = String::new();
        for e in &self.index {
            match e.label {
                Some(l) => sidecar.push_str(&format!("{}\t{}\t{}\n", e.sample_id, e.row, l)),
                None => sidecar.push_str(&format!("{}\t{}\t\n", e.sample_id, e.row)),
            }
        }
        std::fs::File::create(idx_path(path))?.write_all(sidecar.as_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .map_err(|_| Error::MissingFile(path.display().to_string()))?
            .read_to_end(&mut bytes)?;
        let malformed = |detail: &str| Error::MalformedFile {
            path: path.display().to_string(),
            detail: detail.to_string(),
        };
        if bytes.len() < 20 || &bytes[0..8] != MAGIC {
            return Err(malformed("bad magic or truncated header"));
        }
        let read_u32 =
            |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"));
        if read_u32(8) != VERSION {
            return Err(malformed("unsupported version"));
        }
        let dim = read_u32(12) as usize;
        let count = read_u32(16) as usize;
        if bytes.len() != 20 + count * dim * 4 {
            return Err(malformed("body length does not match count * dim"));
        }
        let mut rows = Vec::with_capacity(count);
        let mut at = 20;
        for _ in 0..count {
            let mut row = Vec::with_capacity(dim);
            for _ in 0..dim {
                row.push(f32::from_le_bytes(
                    bytes[at..at + 4].try_into().expect("4 bytes"),
                ));
                at += 4;
            }
            rows.push(row);
        }

        let sidecar = std::fs::read_to_string(idx_path(path))
            .map_err(|_| Error::MissingFile(idx_path(path).display().to_string()))?;
        let mut index = Vec::new();
        for (lineno, line) in sidecar.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let mut parts = line.splitn(3, '\t');
            let sample_id = parts
                .next()
                .ok_or_else(|| malformed(&format!("index line {}", lineno + 1)))?
                .to_string();
            let row: usize = parts
                .next()
                .and_then(|r| r.parse().ok())
                .ok_or_else(|| malformed(&format!("index line {}", lineno + 1)))?;
            if row >= count {
                return Err(malformed(&format!(
                    "index line {} references row {row} of {count}",
                    lineno + 1
                )));
            }
            let label = match parts.next() {
                None | Some("") => None,
                Some(l) => Some(l.parse().map_err(|_| {
                    malformed(&format!("index line {} has a bad label", lineno + 1))
                })?),
            };
            index.push(CacheIndexEntry {
                sample_id,
                row,
                label,
            });
        }
        Ok(Self { dim, rows, index })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn roundtrip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.bin");
        let mut cache = EmbeddingCache::new(3);
        cache.push::<f64>("a", Some(1), &[0.1, -0.2, 0.3]).unwrap();
        cache.push::<f64>("b", None, &[1.0, 2.0, f64::MIN_POSITIVE]).unwrap();
        cache.write(&path).unwrap();
        let back = EmbeddingCache::read(&path).unwrap();
        assert_eq!(back, cache);
        for (row, expect) in cache.rows.iter().enumerate() {
            assert_eq!(&back.rows[row], expect);
        }
    }

    #[test]
    fn rejects_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.bin");
        let mut cache = EmbeddingCache::new(2);
        cache.push::<f64>("a", None, &[0.5, 0.5]).unwrap();
        cache.write(&path).unwrap();

        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 1);
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            EmbeddingCache::read(&path),
            Err(Error::MalformedFile { .. })
        ));
    }

    #[test]
    fn push_checks_dimension() {
        let mut cache = EmbeddingCache::new(4);
        assert!(matches!(
            cache.push::<f64>("a", None, &[0.0; 3]),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    proptest! {
        #[test]
        fn roundtrip_random_payloads(
            dim in 1usize..6,
            count in 0usize..8,
            seed in 0u64..1000,
        ) {
            let mut rng = crate::rng::stream_rng(seed, 3, 0);
            let mut cache = EmbeddingCache::new(dim);
            for i in 0..count {
                let values: Vec<f64> = (0..dim)
                    .map(|_| rand::Rng::gen_range(&mut rng, -10.0..10.0))
                    .collect();
                let label = if i % 2 == 0 { Some(i) } else { None };
                cache.push("sample", label, &values).unwrap();
            }
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("e.bin");
            cache.write(&path).unwrap();
            prop_assert_eq!(EmbeddingCache::read(&path).unwrap(), cache);
        }
    }
}
