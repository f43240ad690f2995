//! `EPTN` binary tensor dumps: magic, `u32` rank, `u64` dims, little-endian `f64` payload.

use std::io::{Read, Write};
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"EPTN";

/// Bytes occupied by `tensor` once encoded.
pub fn encoded_len(tensor: &Tensor) -> usize {
    4 + 4 + 8 * tensor.rank() + 8 * tensor.numel()
}

pub fn encode(tensor: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(encoded_len(tensor));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(tensor.rank() as u32).to_le_bytes());
    for &d in tensor.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in tensor.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn write_tensor<W: Write>(w: &mut W, tensor: &Tensor) -> std::io::Result<()> {
    w.write_all(&encode(tensor))
}

/// Decodes one tensor from the front of `bytes`, returning it and the bytes consumed.
/// `origin` only labels errors.
pub fn decode(bytes: &[u8], origin: &Path, base_offset: usize) -> Result<(Tensor, usize)> {
    let err = |offset: usize, message: &str| Error::Format {
        path: origin.to_path_buf(),
        offset: base_offset + offset,
        message: message.to_string(),
    };
    if bytes.len() < 8 {
        return Err(err(0, "truncated tensor header"));
    }
    if &bytes[..4] != MAGIC {
        return Err(err(0, "bad magic, expected EPTN"));
    }
    let rank = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let mut pos = 8;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let chunk = bytes
            .get(pos..pos + 8)
            .ok_or_else(|| err(pos, "truncated dimension list"))?;
        let d = u64::from_le_bytes(chunk.try_into().unwrap());
        if d == 0 {
            return Err(err(pos, "zero-length dimension"));
        }
        shape.push(d as usize);
        pos += 8;
    }
    let numel: usize = shape.iter().product();
    let end = pos + numel * 8;
    let payload = bytes
        .get(pos..end)
        .ok_or_else(|| err(pos, "truncated payload"))?;
    let data = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let tensor = Tensor::new(&shape, data).map_err(|e| err(0, &e.to_string()))?;
    Ok((tensor, end))
}

pub fn save(path: &Path, tensor: &Tensor) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_tensor(&mut f, tensor).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Tensor> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let (t, used) = decode(&bytes, path, 0)?;
    if used != bytes.len() {
        return Err(Error::Format {
            path: path.to_path_buf(),
            offset: used,
            message: "trailing bytes after tensor".into(),
        });
    }
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout() {
        let t = Tensor::new(&[2, 1], vec![1.5, -2.0]).unwrap();
        let b = encode(&t);
        assert_eq!(&b[..4], b"EPTN");
        assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), 2);
        assert_eq!(u64::from_le_bytes(b[8..16].try_into().unwrap()), 2);
        assert_eq!(u64::from_le_bytes(b[16..24].try_into().unwrap()), 1);
        assert_eq!(f64::from_le_bytes(b[24..32].try_into().unwrap()), 1.5);
        assert_eq!(b.len(), encoded_len(&t));
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let t = Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        let mut b = encode(&t);
        let p = Path::new("fixture");
        assert!(decode(&b[..b.len() - 1], p, 0).is_err());
        b[0] = b'X';
        match decode(&b, p, 10) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 10),
            other => panic!("unexpected {other:?}"),
        }
    }

    proptest::proptest! {
        #[test]
        fn roundtrip(shape in proptest::collection::vec(1usize..4, 1..4), seed in 0u64..1000) {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = (0..n).map(|i| (i as f64 + seed as f64) * 0.37 - 3.0).collect();
            let t = Tensor::new(&shape, data).unwrap();
            let (back, used) = decode(&encode(&t), Path::new("mem"), 0).unwrap();
            proptest::prop_assert_eq!(used, encoded_len(&t));
            proptest::prop_assert_eq!(back, t);
        }
    }
}
