//! Portable tensor files: magic `PTF1`, little-endian `u32` rank and
//! extents, then a row-major `f32` payload. Round-trips are bitwise lossless
//! for values exactly representable in `f32`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::HarnessError;
use crate::autodiff::Tensor;

const MAGIC: &[u8; 4] = b"PTF1";
/// Sanity cap while reading: refuse absurd element counts instead of
/// attempting the allocation.
const MAX_ELEMENTS: usize = 1 << 28;

pub fn write_ptf<W: Write>(out: &mut W, tensor: &Tensor) -> Result<(), HarnessError> {
    out.write_all(MAGIC)?;
    let rank = tensor.shape().len() as u32;
    out.write_all(&rank.to_le_bytes())?;
    for &extent in tensor.shape() {
        out.write_all(&(extent as u32).to_le_bytes())?;
    }
    for &value in tensor.data() {
        out.write_all(&(value as f32).to_le_bytes())?;
    }
    Ok(())
}

pub fn read_ptf<R: Read>(input: &mut R) -> Result<Tensor, HarnessError> {
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(HarnessError::Format {
            detail: format!("bad magic {magic:?}, expected {MAGIC:?}"),
        });
    }
    let mut word = [0u8; 4];
    input.read_exact(&mut word)?;
    let rank = u32::from_le_bytes(word) as usize;
    if rank > 16 {
        return Err(HarnessError::Format { detail: format!("rank {rank} is implausible") });
    }
    let mut shape = Vec::with_capacity(rank);
    let mut elements = 1usize;
    for _ in 0..rank {
        input.read_exact(&mut word)?;
        let extent = u32::from_le_bytes(word) as usize;
        elements = elements.saturating_mul(extent);
        shape.push(extent);
    }
    if elements > MAX_ELEMENTS {
        return Err(HarnessError::Format { detail: format!("{elements} elements exceed the cap") });
    }
    let mut data = Vec::with_capacity(elements);
    for _ in 0..elements {
        input.read_exact(&mut word)?;
        data.push(f32::from_le_bytes(word) as f64);
    }
    Tensor::new(shape, data)
        .map_err(|e| HarnessError::Format { detail: format!("invalid payload: {e}") })
}

pub fn write_ptf_file<P: AsRef<Path>>(path: P, tensor: &Tensor) -> Result<(), HarnessError> {
    let mut out = BufWriter::new(File::create(path)?);
    write_ptf(&mut out, tensor)?;
    out.flush()?;
    Ok(())
}

pub fn read_ptf_file<P: AsRef<Path>>(path: P) -> Result<Tensor, HarnessError> {
    read_ptf(&mut BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn round_trip(t: &Tensor) -> Tensor {
        let mut buf = Vec::new();
        write_ptf(&mut buf, t).unwrap();
        read_ptf(&mut buf.as_slice()).unwrap()
    }

    #[test]
    fn round_trip_is_bitwise_for_f32_values() {
        let t = Tensor::new(
            vec![2, 3],
            vec![0.5, -1.25, 3.0, 0.0, 1e-20f32 as f64, 6.02e23f32 as f64],
        )
        .unwrap();
        assert_eq!(round_trip(&t), t);
    }

    #[test]
    fn scalar_and_empty_shapes_survive() {
        let s = Tensor::scalar(2.5).unwrap();
        assert_eq!(round_trip(&s), s);
        let e = Tensor::new(vec![0, 4], vec![]).unwrap();
        assert_eq!(round_trip(&e), e);
    }

    #[test]
    fn bad_magic_is_rejected() {
        let err = read_ptf(&mut &b"NOPE\x00\x00\x00\x00"[..]).unwrap_err();
        assert!(matches!(err, HarnessError::Format { .. }));
    }

    #[test]
    fn truncated_payload_is_an_io_error() {
        let t = Tensor::vector(&[1.0, 2.0, 3.0]).unwrap();
        let mut buf = Vec::new();
        write_ptf(&mut buf, &t).unwrap();
        buf.truncate(buf.len() - 2);
        assert!(matches!(read_ptf(&mut buf.as_slice()), Err(HarnessError::Io(_))));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ptf");
        let t = Tensor::new(vec![4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        write_ptf_file(&path, &t).unwrap();
        assert_eq!(read_ptf_file(&path).unwrap(), t);
    }
}
