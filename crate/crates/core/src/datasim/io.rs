//! `PCCVOL v1` volume files and subject manifests.
//!
//! A volume file is the ASCII line `PCCVOL v1 <H> <W> <D>\n` followed by
//! `H * W * D` little-endian `f32` values, x fastest. A manifest has one
//! `<spet_path>\t<lpet_path>` line per subject; relative paths resolve
//! against the manifest's directory.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::pointspace::Volume;

const MAGIC: &str = "PCCVOL v1";
/// Longest header accepted before giving up on finding its newline.
const MAX_HEADER: usize = 256;

fn format_err(path: &Path, offset: usize, detail: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        offset: offset as u64,
        detail: detail.into(),
    }
}

pub fn encode_volume(volume: &Volume) -> Vec<u8> {
    let [h, w, d] = volume.shape();
    let mut out = format!("{MAGIC} {h} {w} {d}\n").into_bytes();
    out.reserve(4 * volume.len());
    for &v in volume.voxels() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn decode_volume(path: &Path, bytes: &[u8]) -> Result<Volume> {
    let window = &bytes[..bytes.len().min(MAX_HEADER)];
    let end = window
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| format_err(path, window.len(), "header line not terminated"))?;
    let header = std::str::from_utf8(&bytes[..end]).map_err(|_| format_err(path, 0, "header is not ASCII"))?;
    let Some(dims) = header.strip_prefix(MAGIC).and_then(|r| r.strip_prefix(' ')) else {
        return Err(format_err(path, 0, format!("expected {MAGIC:?} magic")));
    };
    let mut shape = [0usize; 3];
    let mut fields = dims.split(' ');
    let mut offset = MAGIC.len() + 1;
    for extent in shape.iter_mut() {
        let field = fields
            .next()
            .ok_or_else(|| format_err(path, end, "header has fewer than three extents"))?;
        *extent = field
            .parse()
            .ok()
            .filter(|&e| e > 0)
            .ok_or_else(|| format_err(path, offset, format!("extent {field:?} is not a positive integer")))?;
        offset += field.len() + 1;
    }
    if fields.next().is_some() {
        return Err(format_err(path, offset - 1, "header has more than three extents"));
    }
    let count = shape
        .iter()
        .try_fold(1usize, |acc, &e| acc.checked_mul(e))
        .and_then(|n| n.checked_mul(4).map(|b| (n, b)));
    let Some((count, payload_len)) = count else {
        return Err(format_err(path, MAGIC.len() + 1, format!("shape {shape:?} overflows")));
    };
    let payload = &bytes[end + 1..];
    if payload.len() < payload_len {
        return Err(format_err(
            path,
            bytes.len(),
            format!("payload truncated: {} of {payload_len} bytes", payload.len()),
        ));
    }
    if payload.len() > payload_len {
        return Err(format_err(path, end + 1 + payload_len, "trailing bytes after payload"));
    }
    let voxels = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")) as f64)
        .collect::<Vec<_>>();
    debug_assert_eq!(voxels.len(), count);
    Volume::new(shape, voxels)
}

pub fn write_volume(path: &Path, volume: &Volume) -> Result<()> {
    fs::write(path, encode_volume(volume)).map_err(|e| Error::io(path, e))
}

pub fn read_volume(path: &Path) -> Result<Volume> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_volume(path, &bytes)
}

/// One subject: standard-dose target and low-dose input.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub spet: PathBuf,
    pub lpet: PathBuf,
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new(""));
    let mut offset = 0;
    let mut out = Vec::new();
    for line in text.split_inclusive('\n') {
        let body = line.trim_end_matches(['\n', '\r']);
        if !body.trim().is_empty() {
            let mut cols = body.split('\t');
            match (cols.next(), cols.next(), cols.next()) {
                (Some(s), Some(l), None) if !s.is_empty() && !l.is_empty() => out.push(ManifestEntry {
                    spet: base.join(s),
                    lpet: base.join(l),
                }),
                _ => {
                    return Err(format_err(
                        path,
                        offset,
                        "manifest line must be <spet_path>\\t<lpet_path>",
                    ))
                }
            }
        }
        offset += line.len();
    }
    if out.is_empty() {
        return Err(format_err(path, 0, "manifest lists no subjects"));
    }
    Ok(out)
}

/// Writes entries verbatim; pass paths relative to the manifest's directory
/// to keep the dataset relocatable.
pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut text = String::new();
    for e in entries {
        text.push_str(&format!("{}\t{}\n", e.spet.display(), e.lpet.display()));
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp() -> Volume {
        Volume::from_fn([2, 2, 2], |x, y, z| (x + 2 * y + 4 * z) as f64).unwrap()
    }

    #[test]
    fn byte_layout() {
        let bytes = encode_volume(&ramp());
        assert_eq!(&bytes[..16], b"PCCVOL v1 2 2 2\n");
        assert_eq!(bytes.len(), 16 + 32);
        assert_eq!(&bytes[16 + 4..16 + 8], &1.0f32.to_le_bytes());
    }

    #[test]
    fn round_trip_narrows() {
        let v = Volume::from_fn([3, 2, 4], |x, y, z| 0.1 * (x + y + z) as f64).unwrap();
        let back = decode_volume(Path::new("m"), &encode_volume(&v)).unwrap();
        for (a, b) in back.voxels().iter().zip(v.voxels()) {
            assert_eq!(*a, *b as f32 as f64);
        }
        assert_eq!(encode_volume(&back), encode_volume(&v));
    }

    #[test]
    fn rejects_malformed() {
        let mut bad = encode_volume(&ramp());
        bad[0] = b'Q';
        assert!(matches!(decode_volume(Path::new("m"), &bad), Err(Error::Format { offset: 0, .. })));
        let good = encode_volume(&ramp());
        let cut = &good[..good.len() - 1];
        assert!(matches!(decode_volume(Path::new("m"), cut), Err(Error::Format { offset: 47, .. })));
        let huge = b"PCCVOL v1 99999999999 99999999999 99999999999\n";
        assert!(matches!(decode_volume(Path::new("m"), huge), Err(Error::Format { .. })));
        let zero = b"PCCVOL v1 2 0 2\n";
        assert!(matches!(decode_volume(Path::new("m"), zero), Err(Error::Format { offset: 12, .. })));
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.txt");
        let entries = vec![
            ManifestEntry {
                spet: "a_s.pccvol".into(),
                lpet: "a_l.pccvol".into(),
            },
            ManifestEntry {
                spet: "b_s.pccvol".into(),
                lpet: "b_l.pccvol".into(),
            },
        ];
        write_manifest(&path, &entries).unwrap();
        let back = read_manifest(&path).unwrap();
        assert_eq!(back[1].lpet, dir.path().join("b_l.pccvol"));
        std::fs::write(&path, "only_one_column\n").unwrap();
        assert!(read_manifest(&path).is_err());
    }
}
