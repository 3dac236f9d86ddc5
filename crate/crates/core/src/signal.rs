//! Per-pixel feature vectors over a HEALPix grid, plus their binary format.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"OSPH";
const VERSION: u16 = 1;
const DTYPE_F64: u8 = 0;

/// A dense signal on the sphere: `n_pix` rows of `channels` values in
/// nested index order.
#[derive(Debug, Clone, PartialEq)]
pub struct SphereSignal {
    n_side: u32,
    values: Tensor,
}

impl SphereSignal {
    pub fn new(n_side: u32, values: Tensor) -> Result<Self> {
        let n_pix = 12 * (n_side as usize) * (n_side as usize);
        if values.rows() != n_pix {
            return Err(Error::ShapeMismatch(format!(
                "signal has {} rows, grid n_side={} needs {}",
                values.rows(),
                n_side,
                n_pix
            )));
        }
        if !values.all_finite() {
            return Err(Error::InvalidInput("non-finite sample".into()));
        }
        Ok(Self { n_side, values })
    }

    pub fn zeros(n_side: u32, channels: usize) -> Self {
        let n_pix = 12 * (n_side as usize) * (n_side as usize);
        Self {
            n_side,
            values: Tensor::zeros(n_pix, channels),
        }
    }

    pub fn n_side(&self) -> u32 {
        self.n_side
    }

    pub fn n_pix(&self) -> usize {
        self.values.rows()
    }

    pub fn channels(&self) -> usize {
        self.values.cols()
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut Tensor {
        &mut self.values
    }

    pub fn into_values(self) -> Tensor {
        self.values
    }

    /// Little-endian binary dump: magic, version, n_side, channels, dtype,
    /// then row-major f64 samples.
    pub fn write_to<W: Write>(&self, mut out: W) -> Result<()> {
        out.write_all(MAGIC)?;
        out.write_all(&VERSION.to_le_bytes())?;
        out.write_all(&self.n_side.to_le_bytes())?;
        out.write_all(&(self.channels() as u32).to_le_bytes())?;
        out.write_all(&[DTYPE_F64])?;
        for v in self.values.data() {
            out.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut input: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        input.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::CorruptStream {
                offset: 0,
                reason: "bad OSPH magic".into(),
            });
        }
        let version = read_u16(&mut input)?;
        if version != VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let n_side = read_u32(&mut input)?;
        let channels = read_u32(&mut input)? as usize;
        let mut dtype = [0u8; 1];
        input.read_exact(&mut dtype)?;
        if dtype[0] != DTYPE_F64 {
            return Err(Error::CorruptStream {
                offset: 14,
                reason: format!("unknown dtype tag {}", dtype[0]),
            });
        }
        if n_side == 0 || !n_side.is_power_of_two() {
            return Err(Error::InvalidResolution(n_side));
        }
        let n_pix = 12 * (n_side as usize) * (n_side as usize);
        let mut data = vec![0.0f64; n_pix * channels];
        let mut buf = [0u8; 8];
        for v in data.iter_mut() {
            input.read_exact(&mut buf)?;
            *v = f64::from_le_bytes(buf);
        }
        Self::new(n_side, Tensor::from_vec(n_pix, channels, data))
    }
}

pub(crate) fn read_u16<R: Read>(input: &mut R) -> Result<u16> {
    let mut buf = [0u8; 2];
    input.read_exact(&mut buf)?;
    Ok(u16::from_le_bytes(buf))
}

pub(crate) fn read_u32<R: Read>(input: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    input.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

pub(crate) fn read_u64<R: Read>(input: &mut R) -> Result<u64> {
    let mut buf = [0u8; 8];
    input.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}
