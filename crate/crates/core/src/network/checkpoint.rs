//! Binary checkpoint format.
//!
//! ```text
//! offset  size  content
//! 0       4     magic "SDN1"
//! 4       4     format version, u32 little-endian
//! 8       4     spec length L, u32 little-endian
//! 12      L     model spec as UTF-8 JSON
//! 12+L    4*P   for each linear layer in order: weight (row-major), then
//!               bias if present, as little-endian f32
//! end-4   4     CRC32 (IEEE) of bytes 8..end-4, u32 little-endian
//! ```
//!
//! Parameters are stored in single precision and widened to `f64` on load.

use std::fs;
use std::path::Path;

use super::{LayerSpec, LinearParams, ModelSpec, Network};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"SDN1";
pub const FORMAT_VERSION: u32 = 1;

const HEADER: usize = 12;

pub fn to_bytes(net: &Network) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(net.spec())?;
    let floats = net.param_count();
    let mut out = Vec::with_capacity(HEADER + json.len() + 4 * floats + 4);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for p in net.params() {
        let bias = p.bias.iter().flat_map(|b| b.data());
        for &v in p.weight.data().iter().chain(bias) {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out[8..]);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

fn u32_at(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"))
}

fn checksum(bytes: &[u8]) -> Result<()> {
    let end = bytes.len() - 4;
    let stored = u32_at(bytes, end);
    let computed = crc32fast::hash(&bytes[8..end]);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }
    Ok(())
}

pub fn from_bytes(bytes: &[u8]) -> Result<Network> {
    if bytes.len() < 8 {
        return Err(Error::Truncated(format!("{} bytes, header needs 8", bytes.len())));
    }
    if bytes[..4] != MAGIC {
        return Err(Error::BadMagic {
            expected: u32::from_be_bytes(MAGIC),
            found: u32::from_be_bytes(bytes[..4].try_into().expect("4 bytes")),
        });
    }
    let version = u32_at(bytes, 4);
    if version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    if bytes.len() < HEADER + 4 {
        return Err(Error::Truncated("missing spec length or checksum".into()));
    }
    let json_len = u32_at(bytes, 8) as usize;
    if bytes.len() < HEADER + json_len + 4 {
        return Err(Error::Truncated(format!(
            "spec of {json_len} bytes does not fit in {} byte file",
            bytes.len()
        )));
    }
    let spec: ModelSpec = match serde_json::from_slice(&bytes[HEADER..HEADER + json_len]) {
        Ok(spec) => spec,
        Err(e) => {
            // a damaged spec is more usefully reported as corruption
            checksum(bytes)?;
            return Err(e.into());
        }
    };
    spec.validate()?;

    let shapes: Vec<(usize, usize, bool)> = spec
        .layers
        .iter()
        .filter_map(|l| match *l {
            LayerSpec::Linear {
                input,
                output,
                bias,
            } => Some((output, input, bias)),
            _ => None,
        })
        .collect();
    let floats: usize = shapes
        .iter()
        .map(|&(o, i, b)| o * i + if b { o } else { 0 })
        .sum();
    let expected = HEADER + json_len + 4 * floats + 4;
    if bytes.len() < expected {
        return Err(Error::Truncated(format!(
            "expected {expected} bytes, found {}",
            bytes.len()
        )));
    }
    if bytes.len() > expected {
        return Err(Error::Data(format!(
            "{} trailing bytes after checkpoint",
            bytes.len() - expected
        )));
    }
    checksum(bytes)?;

    let mut cursor = HEADER + json_len;
    let mut take = |n: usize| -> Vec<f64> {
        let vals = bytes[cursor..cursor + 4 * n]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        cursor += 4 * n;
        vals
    };
    let mut params = Vec::with_capacity(shapes.len());
    for (out, inp, bias) in shapes {
        let weight = Tensor::from_vec(out, inp, take(out * inp))?;
        let bias = if bias {
            Some(Tensor::column(take(out)))
        } else {
            None
        };
        params.push(LinearParams { weight, bias });
    }
    Network::from_parts(spec, params)
}

pub fn save(net: &Network, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, to_bytes(net)?).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<Network> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::Widths;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn net() -> Network {
        let spec = ModelSpec::mlp(
            "ckpt",
            5,
            &[8, 6],
            3,
            crate::network::Activation::LeakyRelu { slope: 0.01 },
            Some(crate::network::DropoutSettings::with_p(0.5)),
        )
        .unwrap();
        Network::init(spec, &mut ChaCha8Rng::seed_from_u64(0)).unwrap()
    }

    #[test]
    fn round_trip_preserves_eval_outputs() {
        let net = net();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.sdn");
        save(&net, &path).unwrap();
        let back = load(&path).unwrap();
        assert_eq!(back.spec(), net.spec());

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::from_vec(5, 4, (0..20).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        for k in [1, 3, 6] {
            let a = net.forward_eval(&x, &Widths::Shared(k)).unwrap();
            let b = back.forward_eval(&x, &Widths::Shared(k)).unwrap();
            assert!(a.max_rel_diff(&b, 1e-3) <= 1e-6, "k={k}");
        }
    }

    #[test]
    fn layout_is_stable() {
        let bytes = to_bytes(&net()).unwrap();
        assert_eq!(&bytes[..4], b"SDN1");
        assert_eq!(u32_at(&bytes, 4), 1);
        let json_len = u32_at(&bytes, 8) as usize;
        let floats = net().param_count();
        assert_eq!(bytes.len(), 12 + json_len + 4 * floats + 4);
        assert_eq!(to_bytes(&net()).unwrap(), bytes);
    }

    #[test]
    fn truncation_is_reported() {
        let bytes = to_bytes(&net()).unwrap();
        for cut in [0, 3, 7, 11, 40, bytes.len() - 10, bytes.len() - 1] {
            let err = from_bytes(&bytes[..cut]).unwrap_err();
            assert!(matches!(err, Error::Truncated(_)), "cut {cut}: {err}");
        }
    }

    #[test]
    fn corrupted_payload_fails_checksum() {
        let bytes = to_bytes(&net()).unwrap();
        let json_len = u32_at(&bytes, 8) as usize;
        for at in [HEADER + json_len + 5, bytes.len() - 9, HEADER + 3] {
            let mut bad = bytes.clone();
            bad[at] ^= 0x40;
            let err = from_bytes(&bad).unwrap_err();
            assert!(matches!(err, Error::Checksum { .. }), "byte {at}: {err}");
        }
    }

    #[test]
    fn bad_magic_and_version() {
        let mut bytes = to_bytes(&net()).unwrap();
        bytes[4] = 9;
        assert!(matches!(from_bytes(&bytes), Err(Error::UnsupportedVersion(9))));
        bytes[0] = b'X';
        assert!(matches!(from_bytes(&bytes), Err(Error::BadMagic { .. })));
    }
}
