//! AVSF per-sample feature files and the comma-separated manifest that indexes them.
//!
//! Layout (little-endian): `"AVSF"`, `u32` version (1), `u32` level count `L`,
//! `L × (u32 c, u32 h, u32 w)`, then each level's row-major `f32` payload, then a
//! trailing `u32` label.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::Array3;

use crate::codec::{dim_u32, put_u32, ByteReader};
use crate::error::{Error, ParseErrorKind, Result};
use crate::feature::{FeatureMap, FeaturePyramid};

pub const MAGIC: &[u8; 4] = b"AVSF";
pub const VERSION: u32 = 1;

pub fn encode_pyramid(p: &FeaturePyramid) -> Result<Vec<u8>> {
    let payload: usize = p.levels().iter().map(|m| m.data().len() * 4).sum();
    let mut out = Vec::with_capacity(16 + 12 * p.num_levels() + payload);
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    put_u32(&mut out, dim_u32(p.num_levels(), "level count")?);
    for m in p.levels() {
        let (c, h, w) = m.dims();
        put_u32(&mut out, dim_u32(c, "channels")?);
        put_u32(&mut out, dim_u32(h, "rows")?);
        put_u32(&mut out, dim_u32(w, "cols")?);
    }
    for m in p.levels() {
        for v in m.data().iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    put_u32(&mut out, p.label);
    Ok(out)
}

pub fn decode_pyramid(bytes: &[u8], sample_id: impl Into<String>) -> Result<FeaturePyramid> {
    let mut r = ByteReader::new(bytes);
    r.magic(MAGIC)?;
    r.version(VERSION)?;
    let at = r.offset();
    let levels = r.u32()? as usize;
    if levels == 0 {
        return Err(Error::Parse {
            offset: at,
            kind: ParseErrorKind::ZeroDimension,
        });
    }
    // the header alone must fit before we allocate anything per level
    r.require(levels as u64 * 12)?;
    let mut dims = Vec::with_capacity(levels);
    let mut total: u64 = 0;
    for _ in 0..levels {
        let at = r.offset();
        let (c, h, w) = (r.u32()? as u64, r.u32()? as u64, r.u32()? as u64);
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::Parse {
                offset: at,
                kind: ParseErrorKind::ZeroDimension,
            });
        }
        let n = c
            .checked_mul(h)
            .and_then(|v| v.checked_mul(w))
            .and_then(|v| v.checked_mul(4))
            .filter(|&v| v <= usize::MAX as u64 / 2);
        let n = n.ok_or(Error::Parse {
            offset: at,
            kind: ParseErrorKind::DimOverflow,
        })?;
        total = total.checked_add(n).ok_or(Error::Parse {
            offset: at,
            kind: ParseErrorKind::DimOverflow,
        })?;
        dims.push((c as usize, h as usize, w as usize));
    }
    r.require(total + 4)?;
    let mut maps = Vec::with_capacity(levels);
    for (i, &(c, h, w)) in dims.iter().enumerate() {
        let at = r.offset();
        let data = r.f32_vec(c * h * w)?;
        let arr = Array3::from_shape_vec((c, h, w), data).expect("length checked");
        let map = FeatureMap::new(arr, i + 1).map_err(|e| Error::Parse {
            offset: at,
            kind: ParseErrorKind::Invalid(e.to_string()),
        })?;
        maps.push(map);
    }
    let label = r.u32()?;
    r.finish()?;
    FeaturePyramid::new(maps, sample_id, label)
}

pub fn write_pyramid_file(path: &Path, p: &FeaturePyramid) -> Result<()> {
    let bytes = encode_pyramid(p)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads a pyramid; the sample id defaults to the file stem.
pub fn read_pyramid_file(path: &Path) -> Result<FeaturePyramid> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    decode_pyramid(&bytes, id)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub sample_id: String,
    pub path: PathBuf,
    pub label: u32,
}

/// Parses `sample_id,path,label` lines. Relative paths resolve against `base`.
pub fn parse_manifest(text: &str, base: &Path) -> Result<Vec<ManifestEntry>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 3 {
            return Err(Error::config(format!(
                "manifest line {}: expected `sample_id,path,label`",
                n + 1
            )));
        }
        let label = fields[2].parse::<u32>().map_err(|_| {
            Error::config(format!("manifest line {}: bad label {:?}", n + 1, fields[2]))
        })?;
        let p = PathBuf::from(fields[1]);
        out.push(ManifestEntry {
            sample_id: fields[0].to_string(),
            path: if p.is_absolute() { p } else { base.join(p) },
            label,
        });
    }
    Ok(out)
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_manifest(&text, path.parent().unwrap_or(Path::new(".")))
}

/// Writes entries with paths relative to the manifest's directory when possible.
pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let base = path.parent().unwrap_or(Path::new("."));
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for e in entries {
        let rel = e.path.strip_prefix(base).unwrap_or(&e.path);
        writeln!(f, "{},{},{}", e.sample_id, rel.display(), e.label)
            .map_err(|err| Error::io(path, err))?;
    }
    Ok(())
}

/// Loads every pyramid named by a manifest; ids and labels come from the manifest.
pub fn load_manifest_pyramids(path: &Path) -> Result<Vec<FeaturePyramid>> {
    read_manifest(path)?
        .into_iter()
        .map(|e| {
            let bytes = fs::read(&e.path).map_err(|err| Error::io(&e.path, err))?;
            let mut p = decode_pyramid(&bytes, e.sample_id)?;
            if p.label != e.label {
                return Err(Error::config(format!(
                    "{}: file label {} disagrees with manifest label {}",
                    e.path.display(),
                    p.label,
                    e.label
                )));
            }
            p.label = e.label;
            Ok(p)
        })
        .collect()
}
