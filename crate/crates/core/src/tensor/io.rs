//! Raw little-endian tensor blobs: magic `FTSP1`, u32 rank, u32 extents,
//! f64 payload. Used for golden fixtures and checkpoints.

use std::io::{Read, Write};

use super::Tensor;
use crate::{Error, Real, Result};

const MAGIC: &[u8; 5] = b"FTSP1";

impl Tensor {
    pub fn write_blob(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&(self.rank() as u32).to_le_bytes())?;
        for &e in self.shape() {
            w.write_all(&(e as u32).to_le_bytes())?;
        }
        for &v in self.data().iter() {
            w.write_all(&(v as f64).to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_blob(r: &mut impl Read) -> Result<Tensor> {
        let mut magic = [0u8; 5];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format(format!("bad tensor magic {magic:?}")));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)?;
        let rank = u32::from_le_bytes(b4) as usize;
        if rank > 16 {
            return Err(Error::Format(format!("implausible tensor rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            r.read_exact(&mut b4)?;
            shape.push(u32::from_le_bytes(b4) as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        let mut b8 = [0u8; 8];
        for _ in 0..n {
            r.read_exact(&mut b8)?;
            data.push(f64::from_le_bytes(b8) as Real);
        }
        Ok(Tensor::from_vec(&shape, data))
    }
}
