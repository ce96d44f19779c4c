//! Flat little-endian parameter files shared by the policy and the critic.
//!
//! Layout: magic `SWRK`, format version (u32), kind (u32), header word count
//! (u32) and words (u64 each), scalar count (u32) and scalars (f64 each),
//! value count (u64) and values (f64 each).

use std::io::{Read, Write};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"SWRK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u32)]
pub enum CheckpointKind {
    Policy = 1,
    Critic = 2,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlatCheckpoint {
    pub kind: CheckpointKind,
    pub header: Vec<u64>,
    pub scalars: Vec<f64>,
    pub values: Vec<f64>,
}

impl FlatCheckpoint {
    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(self.kind as u32).to_le_bytes())?;
        w.write_all(&(self.header.len() as u32).to_le_bytes())?;
        for h in &self.header {
            w.write_all(&h.to_le_bytes())?;
        }
        w.write_all(&(self.scalars.len() as u32).to_le_bytes())?;
        for s in &self.scalars {
            w.write_all(&s.to_le_bytes())?;
        }
        w.write_all(&(self.values.len() as u64).to_le_bytes())?;
        for v in &self.values {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(32 + 8 * (self.header.len() + self.scalars.len() + self.values.len()));
        self.write(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn read<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = read_u32(&mut r)?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let kind = match read_u32(&mut r)? {
            1 => CheckpointKind::Policy,
            2 => CheckpointKind::Critic,
            k => return Err(Error::Checkpoint(format!("unknown kind {k}"))),
        };
        let n = read_u32(&mut r)? as usize;
        let header = (0..n).map(|_| read_u64(&mut r)).collect::<Result<_>>()?;
        let n = read_u32(&mut r)? as usize;
        let scalars = (0..n).map(|_| read_f64(&mut r)).collect::<Result<_>>()?;
        let n = read_u64(&mut r)? as usize;
        let values = (0..n).map(|_| read_f64(&mut r)).collect::<Result<_>>()?;
        Ok(Self {
            kind,
            header,
            scalars,
            values,
        })
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    Ok(f64::from_bits(read_u64(r)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let ck = FlatCheckpoint {
            kind: CheckpointKind::Policy,
            header: vec![3, 11],
            scalars: vec![0.1],
            values: vec![-0.0, f64::MIN_POSITIVE, 1.0 / 3.0, f64::MAX],
        };
        let bytes = ck.to_bytes();
        let back = FlatCheckpoint::read(&bytes[..]).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.values[0].to_bits(), (-0.0f64).to_bits());
    }

    #[test]
    fn rejects_garbage() {
        assert!(matches!(FlatCheckpoint::read(&b"NOPE...."[..]), Err(Error::Checkpoint(_))));
        let mut bytes = FlatCheckpoint {
            kind: CheckpointKind::Critic,
            header: vec![],
            scalars: vec![],
            values: vec![],
        }
        .to_bytes();
        bytes[4] = 9;
        assert!(FlatCheckpoint::read(&bytes[..]).is_err());
    }
}
