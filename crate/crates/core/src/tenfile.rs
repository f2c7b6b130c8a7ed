//! `TEN1` binary tensor files and manifest-described parameter bundles.
//!
//! A `TEN1` record is the 4-byte magic `TEN1`, a little-endian `u32` rank
//! (always 4), four little-endian `u32` dims and then the `f32` payload in
//! little-endian order. A file may hold several records back to back.
//!
//! A bundle is a directory holding `params.ten` (records concatenated) and
//! `manifest.txt`, one line per record in file order:
//! `<name> <role> <n>x<c>x<h>x<w>`. Lines starting with `#` are comments.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor4;

pub const MAGIC: &[u8; 4] = b"TEN1";
pub const BUNDLE_DATA: &str = "params.ten";
pub const BUNDLE_MANIFEST: &str = "manifest.txt";

pub fn write_tensor<W: Write>(mut out: W, tensor: &Tensor4) -> Result<()> {
    out.write_all(MAGIC)?;
    out.write_all(&4u32.to_le_bytes())?;
    for d in tensor.dims() {
        let d = u32::try_from(d).map_err(|_| Error::Format(format!("dim {d} exceeds u32")))?;
        out.write_all(&d.to_le_bytes())?;
    }
    let mut payload = Vec::with_capacity(tensor.len() * 4);
    for v in tensor.data() {
        payload.extend_from_slice(&v.to_le_bytes());
    }
    out.write_all(&payload)?;
    Ok(())
}

pub fn encode(tensor: &Tensor4) -> Vec<u8> {
    let mut buf = Vec::with_capacity(24 + tensor.len() * 4);
    write_tensor(&mut buf, tensor).expect("writing to a Vec cannot fail");
    buf
}

/// Decodes every record in `bytes`.
pub fn decode_all(bytes: &[u8]) -> Result<Vec<Tensor4>> {
    let mut rest = bytes;
    let mut tensors = Vec::new();
    while !rest.is_empty() {
        let (t, used) = decode_one(rest)?;
        tensors.push(t);
        rest = &rest[used..];
    }
    Ok(tensors)
}

/// Decodes exactly one record; trailing bytes are an error.
pub fn decode(bytes: &[u8]) -> Result<Tensor4> {
    let (t, used) = decode_one(bytes)?;
    if used != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after tensor record",
            bytes.len() - used
        )));
    }
    Ok(t)
}

fn read_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Format("truncated header".into()))
}

fn decode_one(bytes: &[u8]) -> Result<(Tensor4, usize)> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::Format("missing TEN1 magic".into()));
    }
    let rank = read_u32(bytes, 4)?;
    if rank != 4 {
        return Err(Error::Format(format!("rank must be 4, got {rank}")));
    }
    let mut dims = [0usize; 4];
    for (i, d) in dims.iter_mut().enumerate() {
        *d = read_u32(bytes, 8 + 4 * i)? as usize;
    }
    let count = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Format("dims overflow".into()))?;
    let start = 24;
    let end = count
        .checked_mul(4)
        .and_then(|b| b.checked_add(start))
        .ok_or_else(|| Error::Format("payload size overflow".into()))?;
    let payload = bytes
        .get(start..end)
        .ok_or_else(|| Error::Format(format!("payload truncated: need {count} values")))?;
    let data = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Ok((Tensor4::new(dims, data)?, end))
}

pub fn read_tensor<R: Read>(mut input: R) -> Result<Tensor4> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    decode(&bytes)
}

pub fn load(path: impl AsRef<Path>) -> Result<Tensor4> {
    decode(&fs::read(path)?)
}

pub fn save(path: impl AsRef<Path>, tensor: &Tensor4) -> Result<()> {
    fs::write(path, encode(tensor))?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct BundleEntry {
    pub name: String,
    pub role: String,
    pub tensor: Tensor4,
}

/// Concatenated records in entry order, as stored in `params.ten`.
pub fn encode_bundle(entries: &[BundleEntry]) -> Vec<u8> {
    entries.iter().flat_map(|e| encode(&e.tensor)).collect()
}

pub fn manifest_text(entries: &[BundleEntry]) -> String {
    let mut text = String::from("# name role dims\n");
    for e in entries {
        let [n, c, h, w] = e.tensor.dims();
        text.push_str(&format!("{} {} {n}x{c}x{h}x{w}\n", e.name, e.role));
    }
    text
}

/// Pairs manifest lines with the records in `data`, checking counts and dims.
pub fn decode_bundle(manifest: &str, data: &[u8]) -> Result<Vec<BundleEntry>> {
    let tensors = decode_all(data)?;
    let mut lines = Vec::new();
    for (i, line) in manifest.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let [name, role, dims] = fields[..] else {
            return Err(Error::Parse {
                line: i + 1,
                message: "expected `<name> <role> <n>x<c>x<h>x<w>`".into(),
            });
        };
        let parsed: std::result::Result<Vec<usize>, _> = dims.split('x').map(str::parse).collect();
        let dims = match parsed.as_deref() {
            Ok(&[n, c, h, w]) => [n, c, h, w],
            _ => {
                return Err(Error::Parse {
                    line: i + 1,
                    message: format!("bad dims `{dims}`"),
                })
            }
        };
        lines.push((i + 1, name.to_string(), role.to_string(), dims));
    }
    if lines.len() != tensors.len() {
        return Err(Error::Format(format!(
            "manifest lists {} tensors, data holds {}",
            lines.len(),
            tensors.len()
        )));
    }
    lines
        .into_iter()
        .zip(tensors)
        .map(|((line, name, role, dims), tensor)| {
            if tensor.dims() != dims {
                return Err(Error::Parse {
                    line,
                    message: format!("manifest dims {dims:?} but record has {:?}", tensor.dims()),
                });
            }
            Ok(BundleEntry { name, role, tensor })
        })
        .collect()
}

pub fn save_bundle(dir: impl AsRef<Path>, entries: &[BundleEntry]) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    fs::write(dir.join(BUNDLE_DATA), encode_bundle(entries))?;
    fs::write(dir.join(BUNDLE_MANIFEST), manifest_text(entries))?;
    Ok(())
}

pub fn load_bundle(dir: impl AsRef<Path>) -> Result<Vec<BundleEntry>> {
    let dir = dir.as_ref();
    let manifest = fs::read_to_string(dir.join(BUNDLE_MANIFEST))?;
    let data = fs::read(dir.join(BUNDLE_DATA))?;
    decode_bundle(&manifest, &data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_exact() {
        let t = Tensor4::new([1, 2, 1, 1], vec![1.0, -2.5]).unwrap();
        let bytes = encode(&t);
        let mut expected = b"TEN1".to_vec();
        for v in [4u32, 1, 2, 1, 1] {
            expected.extend_from_slice(&v.to_le_bytes());
        }
        expected.extend_from_slice(&1.0f32.to_le_bytes());
        expected.extend_from_slice(&(-2.5f32).to_le_bytes());
        assert_eq!(bytes, expected);
    }

    #[test]
    fn rejects_bad_headers() {
        let t = Tensor4::zeros([1, 1, 2, 2]);
        let mut bytes = encode(&t);
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        bytes[4] = 3;
        assert!(decode(&bytes).is_err());
        assert!(decode(b"TEN2").is_err());
        let mut two = encode(&t);
        two.extend(encode(&t));
        assert!(decode(&two).is_err());
        assert_eq!(decode_all(&two).unwrap().len(), 2);
    }

    #[test]
    fn bundle_roundtrip_and_validation() {
        let mut rng = Rng::new(1);
        let entries = vec![
            BundleEntry {
                name: "w".into(),
                role: "projector.0.weight".into(),
                tensor: Tensor4::random_normal([2, 2, 3, 3], &mut rng, 1.0),
            },
            BundleEntry {
                name: "b".into(),
                role: "projector.0.bias".into(),
                tensor: Tensor4::random_normal([1, 2, 1, 1], &mut rng, 1.0),
            },
        ];
        let dir = tempfile::tempdir().unwrap();
        save_bundle(dir.path(), &entries).unwrap();
        assert_eq!(load_bundle(dir.path()).unwrap(), entries);

        let data = encode_bundle(&entries);
        assert!(decode_bundle("w r 2x2x3x3\n", &data).is_err());
        assert!(decode_bundle("w r 2x2x3x3\nb r 1x3x1x1\n", &data).is_err());
    }

    proptest! {
        #[test]
        fn roundtrip(dims in (0usize..3, 0usize..3, 0usize..4, 0usize..4), seed in any::<u64>()) {
            let dims = [dims.0, dims.1, dims.2, dims.3];
            let t = Tensor4::random_normal(dims, &mut Rng::new(seed), 3.0);
            prop_assert_eq!(decode(&encode(&t)).unwrap(), t);
        }
    }
}
