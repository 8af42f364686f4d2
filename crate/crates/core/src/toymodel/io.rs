//! Binary model file.
//!
//! Layout, all little-endian:
//!
//! ```text
//! magic "PLAB" | version u32
//! vocab_size d_model n_layers n_heads d_ffn max_seq seed_lo seed_hi activation_signal   (u32 each)
//! tag_len u32 | tag bytes (UTF-8, free-form provenance such as a config hash)
//! f64 payload: token_embedding, position_embedding,
//!              per layer: attn_norm wq wk wv wo ffn_norm w_gate w_up w_down,
//!              final_norm
//! ```

use std::io::{Read, Write};

use super::{ActivationSignal, Layer, ModelConfig, ToyModel};
use crate::error::{Error, Result};
use crate::numerics::Matrix;

pub const MODEL_MAGIC: &[u8; 4] = b"PLAB";
pub const MODEL_VERSION: u32 = 1;

fn u32_of(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::arg(format!("{what} = {v} does not fit in u32")))
}

/// Serialises `model` with the provenance `tag`.
pub fn write_model(mut w: impl Write, model: &ToyModel, tag: &str) -> Result<()> {
    model.validate()?;
    let c = &model.config;
    let mut buf = Vec::new();
    buf.extend_from_slice(MODEL_MAGIC);
    buf.extend_from_slice(&MODEL_VERSION.to_le_bytes());
    let fields = [
        u32_of(c.vocab_size, "vocab_size")?,
        u32_of(c.d_model, "d_model")?,
        u32_of(c.n_layers, "n_layers")?,
        u32_of(c.n_heads, "n_heads")?,
        u32_of(c.d_ffn, "d_ffn")?,
        u32_of(c.max_seq, "max_seq")?,
        c.seed as u32,
        (c.seed >> 32) as u32,
        match c.activation_signal {
            ActivationSignal::Up => 0,
            ActivationSignal::Gated => 1,
        },
    ];
    for f in fields {
        buf.extend_from_slice(&f.to_le_bytes());
    }
    buf.extend_from_slice(&u32_of(tag.len(), "tag length")?.to_le_bytes());
    buf.extend_from_slice(tag.as_bytes());

    let mut put = |vals: &[f64]| {
        for v in vals {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    };
    put(model.token_embedding.as_slice());
    put(model.position_embedding.as_slice());
    for l in &model.layers {
        put(&l.attn_norm);
        put(l.wq.as_slice());
        put(l.wk.as_slice());
        put(l.wv.as_slice());
        put(l.wo.as_slice());
        put(&l.ffn_norm);
        put(l.w_gate.as_slice());
        put(l.w_up.as_slice());
        put(l.w_down.as_slice());
    }
    put(&model.final_norm);
    w.write_all(&buf)?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::format("model file", format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| {
            Error::format("model file", "payload size overflow")
        })?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn matrix(&mut self, rows: usize, cols: usize) -> Result<Matrix> {
        Matrix::from_vec(rows, cols, self.f64s(rows * cols)?)
            .map_err(|e| Error::format("model file", e.to_string()))
    }
}

/// Reads a model file, returning the model and its provenance tag.
pub fn read_model(mut r: impl Read) -> Result<(ToyModel, String)> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    let mut cur = Cursor { buf: &buf, pos: 0 };
    if cur.take(4)? != MODEL_MAGIC {
        return Err(Error::format("model file", "bad magic"));
    }
    let version = cur.u32()?;
    if version != MODEL_VERSION {
        return Err(Error::format("model file", format!("unsupported version {version}")));
    }
    let mut f = [0u32; 9];
    for v in &mut f {
        *v = cur.u32()?;
    }
    let config = ModelConfig {
        vocab_size: f[0] as usize,
        d_model: f[1] as usize,
        n_layers: f[2] as usize,
        n_heads: f[3] as usize,
        d_ffn: f[4] as usize,
        max_seq: f[5] as usize,
        seed: f[6] as u64 | ((f[7] as u64) << 32),
        activation_signal: match f[8] {
            0 => ActivationSignal::Up,
            1 => ActivationSignal::Gated,
            other => {
                return Err(Error::format("model file", format!("activation signal {other}")))
            }
        },
    };
    config
        .validate()
        .map_err(|e| Error::format("model file", e.to_string()))?;
    let tag_len = cur.u32()? as usize;
    let tag = String::from_utf8(cur.take(tag_len)?.to_vec())
        .map_err(|_| Error::format("model file", "tag is not UTF-8"))?;

    let (d, ffn) = (config.d_model, config.d_ffn);
    let token_embedding = cur.matrix(config.vocab_size, d)?;
    let position_embedding = cur.matrix(config.max_seq, d)?;
    let mut layers = Vec::with_capacity(config.n_layers);
    for _ in 0..config.n_layers {
        layers.push(Layer {
            attn_norm: cur.f64s(d)?,
            wq: cur.matrix(d, d)?,
            wk: cur.matrix(d, d)?,
            wv: cur.matrix(d, d)?,
            wo: cur.matrix(d, d)?,
            ffn_norm: cur.f64s(d)?,
            w_gate: cur.matrix(ffn, d)?,
            w_up: cur.matrix(ffn, d)?,
            w_down: cur.matrix(d, ffn)?,
        });
    }
    let final_norm = cur.f64s(d)?;
    if cur.pos != buf.len() {
        return Err(Error::format(
            "model file",
            format!("{} trailing bytes", buf.len() - cur.pos),
        ));
    }
    let model = ToyModel {
        config,
        token_embedding,
        position_embedding,
        layers,
        final_norm,
    };
    model
        .validate()
        .map_err(|e| Error::format("model file", e.to_string()))?;
    Ok((model, tag))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_is_bit_exact() {
        let m = ToyModel::init(ModelConfig {
            seed: u64::MAX - 5,
            activation_signal: ActivationSignal::Gated,
            ..ModelConfig::default()
        })
        .unwrap();
        let mut bytes = Vec::new();
        write_model(&mut bytes, &m, "cfg:abc").unwrap();
        let (back, tag) = read_model(bytes.as_slice()).unwrap();
        assert_eq!(tag, "cfg:abc");
        assert_eq!(back, m);
        let mut again = Vec::new();
        write_model(&mut again, &back, &tag).unwrap();
        assert_eq!(bytes, again);
        assert_eq!(&bytes[..4], b"PLAB");
    }

    #[test]
    fn rejects_corruption() {
        let m = ToyModel::init(ModelConfig {
            n_layers: 1,
            ..ModelConfig::default()
        })
        .unwrap();
        let mut bytes = Vec::new();
        write_model(&mut bytes, &m, "").unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(read_model(bad.as_slice()), Err(Error::Format { .. })));
        assert!(read_model(&bytes[..bytes.len() - 1]).is_err());
        let mut long = bytes.clone();
        long.push(0);
        assert!(read_model(long.as_slice()).is_err());
    }
}
