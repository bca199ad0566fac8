//! `PCCCKPT v1` checkpoints.
//!
//! ```text
//! PCCCKPT v1\n
//! <tensor count>\n
//! <name>\t<dim>,<dim>,...\n      (one line per tensor)
//! <f64 little-endian values, tensors in manifest order>
//! ```
//!
//! Generator tensors carry a `gen.` prefix and come first, then the
//! discriminator's under `disc.`.

use std::fs;
use std::path::Path;

use super::config::ModelConfig;
use super::model::{HeadInit, ModelParams};
use super::params::ParamStore;
use crate::diffcore::Tensor;
use crate::error::{Error, Result};

const MAGIC: &str = "PCCCKPT v1";

fn stores(params: &ModelParams) -> [(&'static str, &ParamStore); 2] {
    [("gen.", &params.generator), ("disc.", &params.discriminator)]
}

pub fn encode_checkpoint(params: &ModelParams) -> Vec<u8> {
    let entries: Vec<(String, &Tensor)> = stores(params)
        .into_iter()
        .flat_map(|(prefix, store)| store.iter().map(move |(n, t)| (format!("{prefix}{n}"), t)))
        .collect();
    let mut out = format!("{MAGIC}\n{}\n", entries.len()).into_bytes();
    for (name, t) in &entries {
        let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
        out.extend_from_slice(format!("{name}\t{}\n", dims.join(",")).as_bytes());
    }
    for (_, t) in &entries {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn save_checkpoint(path: &Path, params: &ModelParams) -> Result<()> {
    fs::write(path, encode_checkpoint(params)).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn fail(&self, detail: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            offset: self.pos as u64,
            detail: detail.into(),
        }
    }

    fn line(&mut self) -> Result<&str> {
        let rest = &self.bytes[self.pos..];
        let end = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| self.fail("unterminated header line"))?;
        let text = std::str::from_utf8(&rest[..end]).map_err(|_| self.fail("header is not UTF-8"))?;
        self.pos += end + 1;
        Ok(text)
    }
}

/// Parses a checkpoint into a model built from `config`; every tensor name
/// and shape must match that model exactly.
pub fn decode_checkpoint(path: &Path, bytes: &[u8], config: ModelConfig) -> Result<ModelParams> {
    let mut params = ModelParams::init(config, 0, HeadInit::Zero)?;
    let mut r = Reader { path, bytes, pos: 0 };
    let start = r.pos;
    if r.line()? != MAGIC {
        r.pos = start;
        return Err(r.fail(format!("missing {MAGIC:?} magic")));
    }
    let at = r.pos;
    let count: usize = r.line()?.trim().parse().map_err(|_| {
        let mut e = r.fail("tensor count is not an integer");
        if let Error::Format { offset, .. } = &mut e {
            *offset = at as u64;
        }
        e
    })?;
    let expected: Vec<(String, Vec<usize>)> = stores(&params)
        .into_iter()
        .flat_map(|(prefix, store)| {
            store
                .iter()
                .map(move |(n, t)| (format!("{prefix}{n}"), t.shape().to_vec()))
        })
        .collect();
    if count != expected.len() {
        r.pos = at;
        return Err(r.fail(format!(
            "checkpoint holds {count} tensors, the configured model has {}",
            expected.len()
        )));
    }
    for (name, shape) in &expected {
        let at = r.pos;
        let line = r.line()?.to_string();
        let want = format!(
            "{name}\t{}",
            shape.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
        );
        if line != want {
            r.pos = at;
            return Err(r.fail(format!("manifest entry {line:?}, expected {want:?}")));
        }
    }
    let total: usize = expected.iter().map(|(_, s)| s.iter().product::<usize>()).sum();
    let payload = &bytes[r.pos..];
    if payload.len() != total * 8 {
        let detail = format!("payload of {} bytes, expected {}", payload.len(), total * 8);
        r.pos = bytes.len().min(r.pos + total * 8);
        return Err(r.fail(detail));
    }
    let mut values = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")));
    for store in [&mut params.generator, &mut params.discriminator] {
        for t in store.tensors_mut() {
            for v in t.data_mut() {
                *v = values.next().expect("payload length checked");
            }
        }
    }
    Ok(params)
}

pub fn load_checkpoint(path: &Path, config: ModelConfig) -> Result<ModelParams> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(path, &bytes, config)
}
