//! File formats: the tensor record container used for parameters, and the
//! binary PGM (P5) image writer used for cluster and score maps.
//!
//! Tensor container layout, little-endian, one record after another:
//! name length (u32), UTF-8 name bytes, magic `CAST1`, rank (u32), one u64
//! extent per axis, then the row-major f32 payload.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{CastError, Result};
use crate::layer::CastParams;
use crate::tensor::Tensor;

const MAGIC: &[u8; 5] = b"CAST1";

fn write_record<W: Write>(w: &mut W, name: &str, t: &Tensor<f32>) -> Result<()> {
    w.write_all(&(name.len() as u32).to_le_bytes())?;
    w.write_all(name.as_bytes())?;
    w.write_all(MAGIC)?;
    w.write_all(&(t.rank() as u32).to_le_bytes())?;
    for &e in t.shape() {
        w.write_all(&(e as u64).to_le_bytes())?;
    }
    for &v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_exact_or_eof<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<bool> {
    let mut read = 0;
    while read < buf.len() {
        let n = r.read(&mut buf[read..])?;
        if n == 0 {
            if read == 0 {
                return Ok(false);
            }
            return Err(CastError::Format("truncated tensor record".into()));
        }
        read += n;
    }
    Ok(true)
}

fn read_record<R: Read>(r: &mut R) -> Result<Option<(String, Tensor<f32>)>> {
    let mut u32b = [0u8; 4];
    if !read_exact_or_eof(r, &mut u32b)? {
        return Ok(None);
    }
    let name_len = u32::from_le_bytes(u32b) as usize;
    if name_len > 4096 {
        return Err(CastError::Format(format!("implausible name length {}", name_len)));
    }
    let mut name = vec![0u8; name_len];
    if !read_exact_or_eof(r, &mut name)? {
        return Err(CastError::Format("truncated tensor record".into()));
    }
    let name = String::from_utf8(name).map_err(|_| CastError::Format("name is not UTF-8".into()))?;
    let mut magic = [0u8; 5];
    read_exact_or_eof(r, &mut magic)?;
    if &magic != MAGIC {
        return Err(CastError::Format(format!("bad record magic for {:?}", name)));
    }
    read_exact_or_eof(r, &mut u32b)?;
    let rank = u32::from_le_bytes(u32b) as usize;
    if rank > 8 {
        return Err(CastError::Format(format!("implausible rank {}", rank)));
    }
    let mut shape = Vec::with_capacity(rank);
    let mut u64b = [0u8; 8];
    for _ in 0..rank {
        read_exact_or_eof(r, &mut u64b)?;
        shape.push(u64::from_le_bytes(u64b) as usize);
    }
    let len: usize = shape.iter().product();
    let mut data = Vec::with_capacity(len);
    for _ in 0..len {
        if !read_exact_or_eof(r, &mut u32b)? {
            return Err(CastError::Format("truncated tensor payload".into()));
        }
        data.push(f32::from_le_bytes(u32b));
    }
    Ok(Some((name, Tensor::from_vec(shape, data))))
}

/// Writes named tensors in the order given.
pub fn write_tensors(path: &Path, tensors: &[(&str, &Tensor<f32>)]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for (name, t) in tensors {
        write_record(&mut w, name, t)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads every record of a tensor container, keyed by name.
pub fn read_tensors(path: &Path) -> Result<BTreeMap<String, Tensor<f32>>> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = BTreeMap::new();
    while let Some((name, t)) = read_record(&mut r)? {
        if out.insert(name.clone(), t).is_some() {
            return Err(CastError::Format(format!("duplicate record {:?}", name)));
        }
    }
    Ok(out)
}

/// Saves a parameter set under the canonical names, plus an `h` scalar record
/// carrying the head count.
pub fn write_params(path: &Path, params: &CastParams<f32>, heads: usize) -> Result<()> {
    let h = Tensor::from_vec(vec![1], vec![heads as f32]);
    let mut records = params.named();
    records.push(("h", &h));
    write_tensors(path, &records)
}

/// Loads a parameter set written by [`write_params`]; returns the parameters
/// and the stored head count.
pub fn read_params(path: &Path) -> Result<(CastParams<f32>, usize)> {
    let mut map = read_tensors(path)?;
    let mut take = |name: &str| -> Result<Tensor<f32>> {
        map.remove(name).ok_or_else(|| CastError::Format(format!("missing record {:?}", name)))
    };
    let params = CastParams {
        w_q: take("W_q")?,
        w_k: take("W_k")?,
        w_v: take("W_v")?,
        w_o: take("W_o")?,
        s: take("S")?,
        w_phi: take("W_phi")?,
        b_phi: take("b_phi")?,
    };
    let h = take("h")?;
    let heads = h.data()[0] as usize;
    if heads == 0 {
        return Err(CastError::Format("head count record is zero".into()));
    }
    Ok((params, heads))
}

/// Binary PGM (P5), maxval 255. `pixels` is row-major, `width * height` long.
pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    if pixels.len() != width * height {
        return Err(CastError::Shape(format!(
            "{} pixels for {}x{} image",
            pixels.len(),
            width,
            height
        )));
    }
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(w, "P5\n{} {}\n255\n", width, height)?;
    w.write_all(pixels)?;
    w.flush()?;
    Ok(())
}

/// Min-max normalizes values to 0..=255; a constant map becomes all zeros.
pub fn quantize_minmax(values: &[f32]) -> Vec<u8> {
    let lo = values.iter().cloned().fold(f32::INFINITY, f32::min);
    let hi = values.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    if !(hi > lo) {
        return vec![0; values.len()];
    }
    values
        .iter()
        .map(|&v| (((v - lo) / (hi - lo)) * 255.0).floor().clamp(0.0, 255.0) as u8)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clustering::Mechanism;
    use crate::layer::{AttentionFn, CastConfig};

    #[test]
    fn tensor_roundtrip_preserves_bits() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.bin");
        let a = Tensor::from_vec(vec![2, 3], vec![1.5f32, -0.25, 3.0, 0.0, f32::MIN_POSITIVE, 9.75]);
        let b = Tensor::from_vec(vec![4], vec![1.0f32, 2.0, 3.0, 4.0]);
        write_tensors(&path, &[("a", &a), ("b", &b)]).unwrap();
        let back = read_tensors(&path).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back["a"], a);
        assert_eq!(back["b"], b);
    }

    #[test]
    fn params_roundtrip() {
        let config = CastConfig::new(8, 2, 2, 4, AttentionFn::Softmax, Mechanism::TopK).unwrap();
        let params: CastParams<f32> = CastParams::init(&config, 5);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.bin");
        write_params(&path, &params, 2).unwrap();
        let (loaded, heads) = read_params(&path).unwrap();
        assert_eq!(heads, 2);
        for ((_, a), (_, b)) in params.named().iter().zip(loaded.named().iter()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn missing_record_and_bad_magic_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.bin");
        let a = Tensor::from_vec(vec![1], vec![1.0f32]);
        write_tensors(&path, &[("W_q", &a)]).unwrap();
        assert!(matches!(read_params(&path), Err(CastError::Format(_))));

        let garbage = dir.path().join("garbage.bin");
        std::fs::write(&garbage, [3u8, 0, 0, 0, b'a', b'b', b'c', b'X', b'X', b'X', b'X', b'X'])
            .unwrap();
        assert!(matches!(read_tensors(&garbage), Err(CastError::Format(_))));
    }

    #[test]
    fn pgm_bytes_are_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.pgm");
        let p2 = dir.path().join("b.pgm");
        let px = quantize_minmax(&[0.0, 0.5, 1.0, 0.25]);
        write_pgm(&p1, 2, 2, &px).unwrap();
        write_pgm(&p2, 2, 2, &px).unwrap();
        let b1 = std::fs::read(&p1).unwrap();
        let b2 = std::fs::read(&p2).unwrap();
        assert_eq!(b1, b2);
        assert!(b1.starts_with(b"P5\n2 2\n255\n"));
        assert_eq!(&b1[b1.len() - 4..], &[0, 127, 255, 63]);
    }

    #[test]
    fn quantize_constant_map_is_zero() {
        assert_eq!(quantize_minmax(&[0.7, 0.7, 0.7]), vec![0, 0, 0]);
    }
}
