//! Flat binary tensor records: u32 LE rank, u32 LE extents, f64 LE values.

use std::io::{Read, Write};

use super::Tensor;
use crate::error::{Error, Result};

pub(crate) fn write_u32<W: Write>(w: &mut W, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub(crate) fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)
        .map_err(|e| Error::Format(format!("truncated record: {e}")))?;
    Ok(u32::from_le_bytes(buf))
}

pub(crate) fn write_u64<W: Write>(w: &mut W, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub(crate) fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)
        .map_err(|e| Error::Format(format!("truncated record: {e}")))?;
    Ok(u64::from_le_bytes(buf))
}

/// Serialize one tensor as (rank, extents, values), all little-endian.
pub fn write_tensor_record<W: Write>(w: &mut W, t: &Tensor) -> Result<()> {
    write_u32(w, t.rank() as u32)?;
    for &d in t.shape() {
        write_u32(w, d as u32)?;
    }
    let mut bytes = Vec::with_capacity(t.numel() * 8);
    for v in t.values() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&bytes)?;
    Ok(())
}

/// Deserialize one tensor record written by [`write_tensor_record`].
pub fn read_tensor_record<R: Read>(r: &mut R) -> Result<Tensor> {
    let rank = read_u32(r)? as usize;
    if rank == 0 || rank > 8 {
        return Err(Error::Format(format!("implausible tensor rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let d = read_u32(r)? as usize;
        if d == 0 {
            return Err(Error::Format("zero extent in tensor record".into()));
        }
        shape.push(d);
    }
    let numel: usize = shape.iter().product();
    let mut bytes = vec![0u8; numel * 8];
    r.read_exact(&mut bytes)
        .map_err(|e| Error::Format(format!("truncated tensor record: {e}")))?;
    let values = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::new(&shape, values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn record_roundtrip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let t = Tensor::randn(&[3, 4, 5], 2.0, &mut rng);
        let mut buf = Vec::new();
        write_tensor_record(&mut buf, &t).unwrap();
        let back = read_tensor_record(&mut buf.as_slice()).unwrap();
        assert_eq!(back.shape(), t.shape());
        // bit-exact, not approximately equal
        for (a, b) in t.values().iter().zip(back.values()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn truncated_record_is_format_error() {
        let t = Tensor::ones(&[4, 4]);
        let mut buf = Vec::new();
        write_tensor_record(&mut buf, &t).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(matches!(
            read_tensor_record(&mut buf.as_slice()),
            Err(Error::Format(_))
        ));
    }
}
