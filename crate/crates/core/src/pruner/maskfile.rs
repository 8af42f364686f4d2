//! Binary mask container.
//!
//! Layout, little-endian: magic `PLMK`, `u32` version, `u32` record count, then
//! per record the matrix name, `u32` rows, `u32` cols, `u8` pattern
//! (0 unstructured + `f64` ratio, 1 N:M + `u32` n + `u32` m), `u8` group
//! (0 per-row, 1 whole-matrix), the provenance (`u32` language count, each
//! language string, `u64` seed, tag string) and the keep flags packed
//! LSB-first in row-major order with 1 meaning keep. Strings are a `u32`
//! byte length followed by UTF-8 bytes.

use std::io::{Read, Write};

use super::model::{MaskBundle, NamedMask};
use super::{ComparisonGroup, KeepMatrix, Provenance, PruningMask, SparsityPattern, SparsitySpec};
use crate::error::{Error, Result};
use crate::toymodel::LinearKind;

pub const MASK_MAGIC: &[u8; 4] = b"PLMK";
pub const MASK_VERSION: u32 = 1;

fn bad(detail: impl Into<String>) -> Error {
    Error::format("mask file", detail)
}

fn put_u32(w: &mut impl Write, v: u32) -> Result<()> {
    Ok(w.write_all(&v.to_le_bytes())?)
}

fn put_str(w: &mut impl Write, s: &str) -> Result<()> {
    put_u32(w, s.len() as u32)?;
    Ok(w.write_all(s.as_bytes())?)
}

fn take<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => bad("truncated"),
        _ => Error::Io(e),
    })?;
    Ok(buf)
}

fn get_u32(r: &mut impl Read) -> Result<u32> {
    Ok(u32::from_le_bytes(take(r)?))
}

fn get_str(r: &mut impl Read) -> Result<String> {
    let len = get_u32(r)? as usize;
    if len > 1 << 20 {
        return Err(bad(format!("string length {len} too large")));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf).map_err(|_| bad("truncated"))?;
    String::from_utf8(buf).map_err(|_| bad("string is not UTF-8"))
}

fn parse_name(name: &str) -> Result<(usize, LinearKind)> {
    let rest = name
        .strip_prefix("layers.")
        .ok_or_else(|| bad(format!("unexpected matrix name {name:?}")))?;
    let (layer, kind) = rest
        .split_once('.')
        .ok_or_else(|| bad(format!("unexpected matrix name {name:?}")))?;
    let layer = layer
        .parse()
        .map_err(|_| bad(format!("bad layer index in {name:?}")))?;
    let kind = LinearKind::from_name(kind).ok_or_else(|| bad(format!("unknown matrix kind in {name:?}")))?;
    Ok((layer, kind))
}

pub fn write_masks(mut w: impl Write, bundle: &MaskBundle) -> Result<()> {
    w.write_all(MASK_MAGIC)?;
    put_u32(&mut w, MASK_VERSION)?;
    put_u32(&mut w, bundle.len() as u32)?;
    for named in bundle.iter() {
        let mask = &named.mask;
        put_str(&mut w, &named.name())?;
        let (rows, cols) = mask.shape();
        put_u32(&mut w, rows as u32)?;
        put_u32(&mut w, cols as u32)?;
        match mask.spec.pattern {
            SparsityPattern::Unstructured { ratio } => {
                w.write_all(&[0])?;
                w.write_all(&ratio.to_le_bytes())?;
            }
            SparsityPattern::NofM { n, m } => {
                w.write_all(&[1])?;
                put_u32(&mut w, n as u32)?;
                put_u32(&mut w, m as u32)?;
            }
        }
        w.write_all(&[match mask.spec.group {
            ComparisonGroup::PerRow => 0,
            ComparisonGroup::WholeMatrix => 1,
        }])?;
        let p = &mask.provenance;
        put_u32(&mut w, p.languages.len() as u32)?;
        for l in &p.languages {
            put_str(&mut w, l)?;
        }
        w.write_all(&p.seed.to_le_bytes())?;
        put_str(&mut w, &p.tag)?;

        let mut packed = vec![0u8; (rows * cols).div_ceil(8)];
        for (i, &k) in mask.keep.as_slice().iter().enumerate() {
            if k {
                packed[i / 8] |= 1 << (i % 8);
            }
        }
        w.write_all(&packed)?;
    }
    Ok(())
}

pub fn read_masks(mut r: impl Read) -> Result<MaskBundle> {
    if &take::<4>(&mut r)? != MASK_MAGIC {
        return Err(bad("bad magic"));
    }
    let version = get_u32(&mut r)?;
    if version != MASK_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let count = get_u32(&mut r)? as usize;
    let mut masks = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let (layer, kind) = parse_name(&get_str(&mut r)?)?;
        let rows = get_u32(&mut r)? as usize;
        let cols = get_u32(&mut r)? as usize;
        let pattern = match take::<1>(&mut r)?[0] {
            0 => SparsityPattern::Unstructured {
                ratio: f64::from_le_bytes(take(&mut r)?),
            },
            1 => SparsityPattern::NofM {
                n: get_u32(&mut r)? as usize,
                m: get_u32(&mut r)? as usize,
            },
            t => return Err(bad(format!("unknown pattern tag {t}"))),
        };
        let group = match take::<1>(&mut r)?[0] {
            0 => ComparisonGroup::PerRow,
            1 => ComparisonGroup::WholeMatrix,
            t => return Err(bad(format!("unknown group tag {t}"))),
        };
        let spec = SparsitySpec { pattern, group };
        spec.validate().map_err(|e| bad(e.to_string()))?;
        let n_langs = get_u32(&mut r)? as usize;
        let languages = (0..n_langs).map(|_| get_str(&mut r)).collect::<Result<Vec<_>>>()?;
        let seed = u64::from_le_bytes(take(&mut r)?);
        let tag = get_str(&mut r)?;

        let n = rows
            .checked_mul(cols)
            .filter(|&n| n <= 1 << 32)
            .ok_or_else(|| bad("matrix too large"))?;
        let mut packed = vec![0u8; n.div_ceil(8)];
        r.read_exact(&mut packed).map_err(|_| bad("truncated"))?;
        let keep = (0..n).map(|i| packed[i / 8] >> (i % 8) & 1 == 1).collect();
        masks.push(NamedMask {
            layer,
            kind,
            mask: PruningMask {
                keep: KeepMatrix::from_vec(rows, cols, keep)?,
                spec,
                provenance: Provenance { languages, seed, tag },
            },
        });
    }
    let mut extra = [0u8; 1];
    if r.read(&mut extra)? != 0 {
        return Err(bad("trailing bytes"));
    }
    Ok(MaskBundle { masks })
}
