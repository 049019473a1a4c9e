//! `PPWT` weight checkpoints.
//!
//! Layout (little-endian): magic `PPWT`, version `u32`, tensor count `u32`,
//! then per tensor: name length `u16`, UTF-8 name, rank `u8`, `rank` × `u32`
//! dims, `f32` data.

use std::io::{self, Read, Write};

use thiserror::Error;

use super::{Tensor, TensorError};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PPWT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("bad checkpoint magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("tensor name is not valid UTF-8")]
    Name,
    #[error("tensor name longer than 65535 bytes")]
    NameTooLong,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub fn write_checkpoint<'a, W: Write>(
    mut w: W,
    tensors: impl IntoIterator<Item = (&'a str, &'a Tensor<f32>)>,
) -> Result<(), CheckpointError> {
    let tensors: Vec<_> = tensors.into_iter().collect();
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, t) in tensors {
        let len = u16::try_from(name.len()).map_err(|_| CheckpointError::NameTooLong)?;
        w.write_all(&len.to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&[t.shape().len() as u8])?;
        for &d in t.shape() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        let mut bytes = Vec::with_capacity(t.numel() * 4);
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&bytes)?;
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Vec<(String, Tensor<f32>)>, CheckpointError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic(magic));
    }
    let version = read_u32(&mut r)?;
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::Version(version));
    }
    let count = read_u32(&mut r)?;
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let mut lb = [0u8; 2];
        r.read_exact(&mut lb)?;
        let mut name = vec![0u8; u16::from_le_bytes(lb) as usize];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| CheckpointError::Name)?;
        let mut rank = [0u8; 1];
        r.read_exact(&mut rank)?;
        let mut shape = Vec::with_capacity(rank[0] as usize);
        for _ in 0..rank[0] {
            shape.push(read_u32(&mut r)? as usize);
        }
        let n: usize = shape.iter().product();
        let mut bytes = vec![0u8; n * 4];
        r.read_exact(&mut bytes)?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        out.push((name, Tensor::new(&shape, data)?));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn layout_is_exact() {
        let t = Tensor::new(&[2], vec![1.0f32, -0.5]).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, [("ab", &t)]).unwrap();
        let mut expect = b"PPWT".to_vec();
        expect.extend_from_slice(&1u32.to_le_bytes());
        expect.extend_from_slice(&1u32.to_le_bytes());
        expect.extend_from_slice(&2u16.to_le_bytes());
        expect.extend_from_slice(b"ab");
        expect.push(1);
        expect.extend_from_slice(&2u32.to_le_bytes());
        expect.extend_from_slice(&1.0f32.to_le_bytes());
        expect.extend_from_slice(&(-0.5f32).to_le_bytes());
        assert_eq!(buf, expect);
    }

    #[test]
    fn bad_magic_and_truncation() {
        assert!(matches!(
            read_checkpoint(&b"NOPE\x01\0\0\0\0\0\0\0"[..]),
            Err(CheckpointError::BadMagic(_))
        ));
        assert!(matches!(
            read_checkpoint(&b"PPWT\x02\0\0\0\0\0\0\0"[..]),
            Err(CheckpointError::Version(2))
        ));
        let t = Tensor::new(&[3], vec![1.0f32, 2.0, 3.0]).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, [("w", &t)]).unwrap();
        buf.truncate(buf.len() - 1);
        assert!(matches!(read_checkpoint(&buf[..]), Err(CheckpointError::Io(_))));
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            dims in prop::collection::vec(1usize..5, 1..4),
            seed in any::<u32>(),
            name in "[a-z_.0-9]{1,12}",
        ) {
            let n: usize = dims.iter().product();
            let data: Vec<f32> = (0..n)
                .map(|i| f32::from_bits(seed.wrapping_mul(2654435761).wrapping_add(i as u32) & 0x7f7f_ffff))
                .collect();
            let t = Tensor::new(&dims, data).unwrap();
            let mut buf = Vec::new();
            write_checkpoint(&mut buf, [(name.as_str(), &t)]).unwrap();
            let back = read_checkpoint(&buf[..]).unwrap();
            prop_assert_eq!(&back[0].0, &name);
            prop_assert_eq!(back[0].1.shape(), t.shape());
            let bits = |x: &Tensor<f32>| x.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(bits(&back[0].1), bits(&t));
            let mut again = Vec::new();
            write_checkpoint(&mut again, back.iter().map(|(n, t)| (n.as_str(), t))).unwrap();
            prop_assert_eq!(again, buf);
        }
    }
}
