//! Dense `(channels, length)` sequence feature maps.

use std::io::{Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Magic bytes of the headered binary feature format.
pub const FSEQ_MAGIC: [u8; 4] = *b"FSEQ";

/// A real-valued feature sequence stored row-major: one row per channel.
///
/// Values are `f64` and are validated finite on construction and on every
/// deserialization path; operations in this crate preserve finiteness for
/// finite inputs and parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSeq {
    channels: usize,
    len: usize,
    data: Vec<f64>,
}

impl FeatureSeq {
    /// Build from row-major data of size `channels * len`.
    pub fn new(channels: usize, len: usize, data: Vec<f64>) -> Result<Self> {
        if channels == 0 || len == 0 {
            return Err(Error::usage(format!(
                "feature map dims must be positive, got ({channels}, {len})"
            )));
        }
        if data.len() != channels * len {
            return Err(Error::usage(format!(
                "feature data size {} does not match ({channels}, {len})",
                data.len()
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::usage("feature data contains non-finite values".to_string()));
        }
        Ok(FeatureSeq { channels, len, data })
    }

    pub fn zeros(channels: usize, len: usize) -> Self {
        assert!(channels > 0 && len > 0, "feature map dims must be positive");
        FeatureSeq { channels, len, data: vec![0.0; channels * len] }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::usage("feature map needs at least one channel".to_string()));
        }
        let len = rows[0].len();
        if rows.iter().any(|r| r.len() != len) {
            return Err(Error::usage("all channels must have the same length".to_string()));
        }
        FeatureSeq::new(rows.len(), len, rows.concat())
    }

    /// Standard-normal entries from a seeded generator.
    pub fn random_normal(channels: usize, len: usize, rng: &mut Rng) -> Self {
        let data = (0..channels * len).map(|_| rng.normal()).collect();
        FeatureSeq { channels, len, data }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        false // dims are validated positive
    }

    #[inline]
    pub fn get(&self, c: usize, t: usize) -> f64 {
        self.data[c * self.len + t]
    }

    #[inline]
    pub fn set(&mut self, c: usize, t: usize, v: f64) {
        self.data[c * self.len + t] = v;
    }

    #[inline]
    pub fn row(&self, c: usize) -> &[f64] {
        &self.data[c * self.len..(c + 1) * self.len]
    }

    pub fn row_mut(&mut self, c: usize) -> &mut [f64] {
        &mut self.data[c * self.len..(c + 1) * self.len]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub(crate) fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Zero-padded read: `data[c][k]` when `0 <= k < len`, else `0.0`.
    pub fn read_padded(&self, c: usize, k: i64) -> Result<f64> {
        if c >= self.channels {
            return Err(Error::usage(format!(
                "channel {c} out of range for {} channels",
                self.channels
            )));
        }
        Ok(crate::interp::padded(self.row(c), k))
    }

    /// Elementwise `self + scale * other`; shapes must match.
    pub fn axpy(&self, scale: f64, other: &FeatureSeq) -> Result<FeatureSeq> {
        if self.channels != other.channels || self.len != other.len {
            return Err(Error::usage(format!(
                "shape mismatch: ({}, {}) vs ({}, {})",
                self.channels, self.len, other.channels, other.len
            )));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + scale * b)
            .collect();
        Ok(FeatureSeq { channels: self.channels, len: self.len, data })
    }

    pub(crate) fn add_assign(&mut self, other: &FeatureSeq) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Write in the `FSEQ` binary format: magic, `C` and `T` as `u32`
    /// little-endian, then `C*T` little-endian `f64` values row-major.
    pub fn write_fseq<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(&FSEQ_MAGIC)?;
        w.write_u32::<LittleEndian>(self.channels as u32)?;
        w.write_u32::<LittleEndian>(self.len as u32)?;
        for v in &self.data {
            w.write_f64::<LittleEndian>(*v)?;
        }
        Ok(())
    }

    pub fn read_fseq<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)
            .map_err(|_| Error::usage("feature file truncated before header".to_string()))?;
        if magic != FSEQ_MAGIC {
            return Err(Error::usage("not a FSEQ feature file (bad magic)".to_string()));
        }
        let channels = r.read_u32::<LittleEndian>()? as usize;
        let len = r.read_u32::<LittleEndian>()? as usize;
        if channels == 0 || len == 0 {
            return Err(Error::usage("FSEQ header has zero dimension".to_string()));
        }
        let mut data = vec![0.0f64; channels * len];
        for v in data.iter_mut() {
            *v = r
                .read_f64::<LittleEndian>()
                .map_err(|_| Error::usage("FSEQ file truncated".to_string()))?;
        }
        FeatureSeq::new(channels, len, data)
    }

    pub fn write_fseq_file(&self, path: &std::path::Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_fseq(std::io::BufWriter::new(f))
    }

    pub fn read_fseq_file(path: &std::path::Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        FeatureSeq::read_fseq(std::io::BufReader::new(f))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_validates_size_and_finiteness() {
        assert!(FeatureSeq::new(2, 3, vec![0.0; 6]).is_ok());
        assert!(FeatureSeq::new(2, 3, vec![0.0; 5]).is_err());
        assert!(FeatureSeq::new(0, 3, vec![]).is_err());
        assert!(FeatureSeq::new(1, 2, vec![0.0, f64::NAN]).is_err());
        assert!(FeatureSeq::new(1, 2, vec![0.0, f64::INFINITY]).is_err());
    }

    #[test]
    fn read_padded_in_and_out_of_range() {
        let x = FeatureSeq::from_rows(&[vec![1.0, 2.0, 3.0]]).unwrap();
        assert_eq!(x.read_padded(0, 1).unwrap(), 2.0);
        assert_eq!(x.read_padded(0, -1).unwrap(), 0.0);
        assert_eq!(x.read_padded(0, 3).unwrap(), 0.0);
        assert!(x.read_padded(1, 0).is_err());
    }

    #[test]
    fn fseq_round_trip_is_bit_exact() {
        let mut rng = Rng::seeded(3);
        let x = FeatureSeq::random_normal(4, 9, &mut rng);
        let mut buf = Vec::new();
        x.write_fseq(&mut buf).unwrap();
        let y = FeatureSeq::read_fseq(buf.as_slice()).unwrap();
        assert_eq!(x.channels(), y.channels());
        assert_eq!(x.len(), y.len());
        for (a, b) in x.as_slice().iter().zip(y.as_slice()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn fseq_rejects_truncation_and_bad_magic() {
        let x = FeatureSeq::zeros(2, 2);
        let mut buf = Vec::new();
        x.write_fseq(&mut buf).unwrap();
        assert!(FeatureSeq::read_fseq(&buf[..buf.len() - 3]).is_err());
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(FeatureSeq::read_fseq(bad.as_slice()).is_err());
    }
}
