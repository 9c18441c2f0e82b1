//! Binary weight files.
//!
//! Layout (all integers `u32` little-endian, all reals `f32` little-endian):
//!
//! ```text
//! "TXW1"  layer_count
//! repeat layer_count:
//!     name_len  name(utf-8)
//!     weight_count  weights...
//!     bias_count    biases...
//! ```
//!
//! Layers named `conv*` come first in network order; the final layer is the
//! dense head. Channel counts are recovered from the element counts.

use std::path::Path;

use super::micro::{ConvLayer, DenseLayer, MicroNet};
use crate::error::{Error, Result};

pub const WEIGHT_MAGIC: &[u8; 4] = b"TXW1";

pub fn encode_weights(net: &MicroNet) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(WEIGHT_MAGIC);
    put_u32(&mut out, (net.convs().len() + 1) as u32);
    for conv in net.convs() {
        put_layer(&mut out, conv.name(), conv.weights(), conv.bias());
    }
    let d = net.dense();
    put_layer(&mut out, d.name(), d.weights(), d.bias());
    out
}

pub fn save_weights(net: &MicroNet, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, encode_weights(net))?;
    Ok(())
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<MicroNet> {
    let bytes = std::fs::read(path)?;
    decode_weights(&bytes)
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_layer(out: &mut Vec<u8>, name: &str, weights: &[f64], bias: &[f64]) {
    put_u32(out, name.len() as u32);
    out.extend_from_slice(name.as_bytes());
    for block in [weights, bias] {
        put_u32(out, block.len() as u32);
        for &v in block {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn fail<T>(&self, reason: impl Into<String>) -> Result<T> {
        Err(Error::MalformedWeights {
            offset: self.pos,
            reason: reason.into(),
        })
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return self.fail(format!("truncated: need {n} bytes"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn floats(&mut self) -> Result<Vec<f64>> {
        let n = self.u32()? as usize;
        if n.checked_mul(4).is_none_or(|len| len > self.bytes.len() - self.pos) {
            return self.fail(format!("truncated: {n} floats declared"));
        }
        let start = self.pos;
        let raw = self.take(n * 4)?;
        let vals: Vec<f64> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        if let Some(i) = vals.iter().position(|v| !v.is_finite()) {
            return Err(Error::MalformedWeights {
                offset: start + 4 * i,
                reason: "non-finite weight".into(),
            });
        }
        Ok(vals)
    }
}

pub fn decode_weights(bytes: &[u8]) -> Result<MicroNet> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != WEIGHT_MAGIC {
        r.pos = 0;
        return r.fail("bad magic");
    }
    let count = r.u32()? as usize;
    if count < 2 {
        return r.fail(format!("need at least 2 layers, found {count}"));
    }
    let mut convs = Vec::new();
    let mut in_ch = 3usize;
    for l in 0..count {
        let layer_start = r.pos;
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::MalformedWeights {
                offset: layer_start + 4,
                reason: "layer name is not utf-8".into(),
            })?
            .to_string();
        let weights = r.floats()?;
        let bias = r.floats()?;
        let is_last = l + 1 == count;
        if !is_last {
            if !name.starts_with("conv") {
                return Err(Error::MalformedWeights {
                    offset: layer_start,
                    reason: format!("expected conv layer, found `{name}`"),
                });
            }
            let out_ch = bias.len();
            if out_ch == 0 || weights.len() != out_ch * in_ch * 9 {
                return Err(Error::MalformedWeights {
                    offset: layer_start,
                    reason: format!(
                        "conv `{name}` has {} weights for {in_ch}->{out_ch} channels",
                        weights.len()
                    ),
                });
            }
            convs.push(ConvLayer::new(name, in_ch, out_ch, weights, bias));
            in_ch = out_ch;
        } else {
            let classes = bias.len();
            if classes == 0 || weights.len() != classes * in_ch {
                return Err(Error::MalformedWeights {
                    offset: layer_start,
                    reason: format!("dense `{name}` has {} weights for {in_ch}->{classes}", weights.len()),
                });
            }
            if r.pos != bytes.len() {
                return r.fail("trailing bytes");
            }
            let dense = DenseLayer::new(name, in_ch, classes, weights, bias);
            return Ok(MicroNet::from_layers(convs, dense));
        }
    }
    unreachable!("loop returns on the last layer")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{MicroNetSpec, ModelBackend};
    use crate::numeric::ImageRgb;

    #[test]
    fn round_trip_is_bit_exact() {
        let net = MicroNet::build(7, &MicroNetSpec::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.txw");
        save_weights(&net, &path).unwrap();
        let back = load_weights(&path).unwrap();
        assert_eq!(back.convs(), net.convs());
        assert_eq!(back.dense(), net.dense());
        let img = ImageRgb::filled(12, 12, [0.2, 0.7, 0.4]);
        assert_eq!(net.forward(&img).unwrap(), back.forward(&img).unwrap());
        assert_eq!(encode_weights(&back), std::fs::read(&path).unwrap());
    }

    #[test]
    fn header_layout() {
        let net = MicroNet::build(1, &MicroNetSpec { conv_channels: vec![2], num_classes: 3 }).unwrap();
        let b = encode_weights(&net);
        assert_eq!(&b[..4], b"TXW1");
        assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(b[8..12].try_into().unwrap()), 5);
        assert_eq!(&b[12..17], b"conv1");
        assert_eq!(u32::from_le_bytes(b[17..21].try_into().unwrap()), 2 * 3 * 9);
    }

    #[test]
    fn truncated_file_reports_offset() {
        let net = MicroNet::build(7, &MicroNetSpec::default()).unwrap();
        let b = encode_weights(&net);
        let err = decode_weights(&b[..b.len() - 3]).unwrap_err();
        assert!(matches!(err, Error::MalformedWeights { offset, .. } if offset > 0));
        assert!(decode_weights(&b[..6]).is_err());
    }

    #[test]
    fn wrong_magic_is_rejected() {
        let net = MicroNet::build(7, &MicroNetSpec::default()).unwrap();
        let mut b = encode_weights(&net);
        b[0] = b'X';
        assert_eq!(
            decode_weights(&b).unwrap_err(),
            Error::MalformedWeights {
                offset: 0,
                reason: "bad magic".into()
            }
        );
    }
}
