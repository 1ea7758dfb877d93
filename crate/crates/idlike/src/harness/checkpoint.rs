//! Prompt checkpoint file.
//!
//! Layout (integers and floats little-endian):
//!
//! ```text
//! bytes 0..8   magic b"IDLKCKPT"
//! u32 version (1)
//! u32 K, u32 C, u32 L, u32 ctx_dim
//! u64 training step count
//! K class names, each u32 byte-length + utf-8 bytes
//! u32 byte-length + utf-8 config snapshot (canonical key = value text)
//! K * L * ctx_dim f32: ID context vectors, row-major (prompt, position, dim)
//! C * L * ctx_dim f32: OOD context vectors, same order
//! ```
//!
//! Class tokens are not stored; they are frozen backend lookups and are
//! rebuilt from the class names at load time.

use std::io::{Read, Write};
use std::path::Path;

use crate::encoder::Backend;
use crate::prompt::{IdPrompt, OodPrompt, PromptSet};
use crate::{Error, Float, Result};

const MAGIC: &[u8; 8] = b"IDLKCKPT";
const VERSION: u32 = 1;

pub struct Checkpoint<T: Float> {
    pub prompts: PromptSet<T>,
    pub class_names: Vec<String>,
    pub step_count: u64,
    pub config_snapshot: String,
}

pub fn save_checkpoint<T: Float>(
    path: &Path,
    prompts: &PromptSet<T>,
    step_count: u64,
    config_snapshot: &str,
) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(prompts.num_classes() as u32).to_le_bytes());
    buf.extend_from_slice(&(prompts.num_ood() as u32).to_le_bytes());
    buf.extend_from_slice(&(prompts.token_len as u32).to_le_bytes());
    buf.extend_from_slice(&(prompts.ctx_dim as u32).to_le_bytes());
    buf.extend_from_slice(&step_count.to_le_bytes());
    for p in &prompts.id_prompts {
        let bytes = p.class_name.as_bytes();
        buf.extend_from_slice(&(bytes.len() as u32).to_le_bytes());
        buf.extend_from_slice(bytes);
    }
    let snapshot = config_snapshot.as_bytes();
    buf.extend_from_slice(&(snapshot.len() as u32).to_le_bytes());
    buf.extend_from_slice(snapshot);
    for value in prompts.pack_context() {
        buf.extend_from_slice(&(value.to_f64().unwrap_or(f64::NAN) as f32).to_le_bytes());
    }
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::File::create(path)?.write_all(&buf)?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
    path: String,
}

impl<'a> Cursor<'a> {
    fn malformed(&self, detail: impl Into<String>) -> Error {
        Error::MalformedFile {
            path: self.path.clone(),
            detail: detail.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.at + n > self.bytes.len() {
            return Err(self.malformed(format!("truncated at byte {}", self.at)));
        }
        let slice = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(slice)
    }

    fn read_u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn read_u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn read_f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn read_string(&mut self) -> Result<String> {
        let len = self.read_u32()? as usize;
        String::from_utf8(self.take(len)?.to_vec())
            .map_err(|_| self.malformed("string is not utf-8"))
    }
}

pub fn load_checkpoint<T: Float>(path: &Path, backend: &dyn Backend<T>) -> Result<Checkpoint<T>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .map_err(|_| Error::MissingFile(path.display().to_string()))?
        .read_to_end(&mut bytes)?;
    let mut cur = Cursor {
        bytes: &bytes,
        at: 0,
        path: path.display().to_string(),
    };
    if cur.take(8)? != MAGIC {
        return Err(cur.malformed("bad magic"));
    }
    if cur.read_u32()? != VERSION {
        return Err(cur.malformed("unsupported version"));
    }
    let num_classes = cur.read_u32()? as usize;
    let num_ood = cur.read_u32()? as usize;
    let token_len = cur.read_u32()? as usize;
    let ctx_dim = cur.read_u32()? as usize;
    let step_count = cur.read_u64()?;
    if ctx_dim != backend.text_context_dim() {
        return Err(cur.malformed(format!(
            "checkpoint ctx_dim {ctx_dim} does not match backend {}",
            backend.text_context_dim()
        )));
    }

    let mut class_names = Vec::with_capacity(num_classes);
    for _ in 0..num_classes {
        class_names.push(cur.read_string()?);
    }
    let config_snapshot = cur.read_string()?;

    let read_context = |cur: &mut Cursor<'_>, count: usize| -> Result<Vec<Vec<Vec<T>>>> {
        (0..count)
            .map(|_| {
                (0..token_len)
                    .map(|_| {
                        (0..ctx_dim)
                            .map(|_| {
                                let raw = cur.read_f32()?;
                                Ok(T::from(raw).expect("f32 converts into the scalar type"))
                            })
                            .collect()
                    })
                    .collect()
            })
            .collect()
    };
    let id_contexts = read_context(&mut cur, num_classes)?;
    let ood_contexts = read_context(&mut cur, num_ood)?;
    if cur.at != bytes.len() {
        return Err(cur.malformed("trailing bytes after context vectors"));
    }

    let id_prompts = class_names
        .iter()
        .zip(id_contexts)
        .map(|(name, context)| {
            Ok(IdPrompt {
                context,
                class_token: backend.token_embedding(name)?,
                class_name: name.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let ood_prompts = ood_contexts
        .into_iter()
        .map(|context| OodPrompt { context })
        .collect();

    Ok(Checkpoint {
        prompts: PromptSet {
            id_prompts,
            ood_prompts,
            token_len,
            ctx_dim,
        },
        class_names,
        step_count,
        config_snapshot,
    })
}
