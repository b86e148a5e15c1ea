//! Volume and mask types with their binary on-disk formats.
//!
//! `MVOL` files hold a `C x H x W x D` intensity tensor; `MSEG` files hold a
//! `H x W x D` label mask. Both use a fixed little-endian header followed by
//! the raw payload, no compression. Voxel spacing is carried in the volume
//! header but otherwise unused.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MVOL_MAGIC: &[u8; 4] = b"MVOL";
const MSEG_MAGIC: &[u8; 4] = b"MSEG";
const FORMAT_VERSION: u32 = 1;

/// Payload element type codes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    U8 = 1,
    F32 = 2,
    F64 = 3,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::U8 => 1,
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }

    fn from_code(code: u32) -> Result<Self> {
        match code {
            1 => Ok(DType::U8),
            2 => Ok(DType::F32),
            3 => Ok(DType::F64),
            other => Err(Error::BadDtype(other)),
        }
    }
}

/// Multi-modality intensity volume. Data is held as f64 in memory; the
/// `dtype` records the on-disk precision.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub channels: usize,
    pub shape: (usize, usize, usize),
    pub dtype: DType,
    pub spacing: [f32; 3],
    pub data: Vec<f64>,
}

impl Volume {
    pub fn new(channels: usize, shape: (usize, usize, usize), dtype: DType) -> Self {
        let n = channels * shape.0 * shape.1 * shape.2;
        Volume {
            channels,
            shape,
            dtype,
            spacing: [1.0; 3],
            data: vec![0.0; n],
        }
    }

    pub fn voxels(&self) -> usize {
        self.shape.0 * self.shape.1 * self.shape.2
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(
            &[self.channels, self.shape.0, self.shape.1, self.shape.2],
            self.data.clone(),
        )
    }

    #[inline]
    pub fn index(&self, c: usize, x: usize, y: usize, z: usize) -> usize {
        ((c * self.shape.0 + x) * self.shape.1 + y) * self.shape.2 + z
    }
}

/// Integer label mask with values in `[0, K)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SegMask {
    pub shape: (usize, usize, usize),
    pub data: Vec<u8>,
}

impl SegMask {
    pub fn new(shape: (usize, usize, usize)) -> Self {
        SegMask {
            shape,
            data: vec![0; shape.0 * shape.1 * shape.2],
        }
    }

    pub fn voxels(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (x * self.shape.1 + y) * self.shape.2 + z
    }

    pub fn validate_labels(&self, num_classes: usize) -> Result<()> {
        for &l in &self.data {
            if l as usize >= num_classes {
                return Err(Error::LabelOutOfRange {
                    label: l,
                    classes: num_classes,
                });
            }
        }
        Ok(())
    }
}

/// One training example.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub volume: Volume,
    pub mask: SegMask,
}

impl Sample {
    pub fn validate(&self) -> Result<()> {
        if self.volume.shape != self.mask.shape {
            return Err(Error::ShapeError(format!(
                "volume shape {:?} != mask shape {:?}",
                self.volume.shape, self.mask.shape
            )));
        }
        Ok(())
    }
}

/// Expected payload length in bytes for a volume header.
pub fn volume_payload_len(channels: u64, h: u64, w: u64, d: u64, dtype: DType) -> Result<u64> {
    channels
        .checked_mul(h)
        .and_then(|v| v.checked_mul(w))
        .and_then(|v| v.checked_mul(d))
        .and_then(|v| v.checked_mul(dtype.size() as u64))
        .ok_or_else(|| {
            Error::DimOverflow(format!("{channels} x {h} x {w} x {d} x {}", dtype.size()))
        })
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_f32<R: Read>(r: &mut R) -> Result<f32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(f32::from_le_bytes(buf))
}

fn check_dim(v: u32) -> Result<usize> {
    if v == 0 || v > (1 << 24) {
        return Err(Error::DimOverflow(format!("dimension {v} out of range")));
    }
    Ok(v as usize)
}

/// Read the full remaining payload, diagnosing truncation and trailing data.
fn read_payload<R: Read>(r: &mut R, expected: u64) -> Result<Vec<u8>> {
    let mut payload = Vec::with_capacity(expected.min(1 << 30) as usize);
    let got = r.take(expected).read_to_end(&mut payload)? as u64;
    if got < expected {
        return Err(Error::TruncatedPayload { expected, got });
    }
    let extra = std::io::copy(&mut r.take(1 << 16), &mut std::io::sink())?;
    if extra > 0 {
        return Err(Error::TrailingData(extra));
    }
    Ok(payload)
}

pub fn write_volume(volume: &Volume, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MVOL_MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(volume.dtype as u32).to_le_bytes())?;
    for dim in [
        volume.channels,
        volume.shape.0,
        volume.shape.1,
        volume.shape.2,
    ] {
        w.write_all(&(dim as u32).to_le_bytes())?;
    }
    for s in volume.spacing {
        w.write_all(&s.to_le_bytes())?;
    }
    match volume.dtype {
        DType::F32 => {
            for &v in &volume.data {
                w.write_all(&(v as f32).to_le_bytes())?;
            }
        }
        DType::F64 => {
            for &v in &volume.data {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        DType::U8 => {
            return Err(Error::BadDtype(DType::U8 as u32));
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_volume(path: &Path) -> Result<Volume> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MVOL_MAGIC {
        return Err(Error::BadMagic {
            expected: "MVOL",
            found: magic,
        });
    }
    let version = read_u32(&mut r)?;
    if version != FORMAT_VERSION {
        return Err(Error::BadVersion(version));
    }
    let dtype = DType::from_code(read_u32(&mut r)?)?;
    if dtype == DType::U8 {
        return Err(Error::BadDtype(DType::U8 as u32));
    }
    let c = check_dim(read_u32(&mut r)?)?;
    let h = check_dim(read_u32(&mut r)?)?;
    let w = check_dim(read_u32(&mut r)?)?;
    let d = check_dim(read_u32(&mut r)?)?;
    let spacing = [read_f32(&mut r)?, read_f32(&mut r)?, read_f32(&mut r)?];
    let expected = volume_payload_len(c as u64, h as u64, w as u64, d as u64, dtype)?;
    let payload = read_payload(&mut r, expected)?;
    let n = c * h * w * d;
    let mut data = Vec::with_capacity(n);
    match dtype {
        DType::F32 => {
            for chunk in payload.chunks_exact(4) {
                data.push(f32::from_le_bytes(chunk.try_into().unwrap()) as f64);
            }
        }
        DType::F64 => {
            for chunk in payload.chunks_exact(8) {
                data.push(f64::from_le_bytes(chunk.try_into().unwrap()));
            }
        }
        DType::U8 => unreachable!(),
    }
    Ok(Volume {
        channels: c,
        shape: (h, w, d),
        dtype,
        spacing,
        data,
    })
}

pub fn write_mask(mask: &SegMask, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MSEG_MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(DType::U8 as u32).to_le_bytes())?;
    for dim in [mask.shape.0, mask.shape.1, mask.shape.2] {
        w.write_all(&(dim as u32).to_le_bytes())?;
    }
    w.write_all(&mask.data)?;
    w.flush()?;
    Ok(())
}

pub fn read_mask(path: &Path) -> Result<SegMask> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MSEG_MAGIC {
        return Err(Error::BadMagic {
            expected: "MSEG",
            found: magic,
        });
    }
    let version = read_u32(&mut r)?;
    if version != FORMAT_VERSION {
        return Err(Error::BadVersion(version));
    }
    let dtype = DType::from_code(read_u32(&mut r)?)?;
    if dtype != DType::U8 {
        return Err(Error::BadDtype(dtype as u32));
    }
    let h = check_dim(read_u32(&mut r)?)?;
    let w = check_dim(read_u32(&mut r)?)?;
    let d = check_dim(read_u32(&mut r)?)?;
    let expected = volume_payload_len(1, h as u64, w as u64, d as u64, DType::U8)?;
    let data = read_payload(&mut r, expected)?;
    Ok(SegMask {
        shape: (h, w, d),
        data,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn volume_roundtrip_identity() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("v.mvol");
        let v = Volume::new(2, (8, 8, 8), DType::F32);
        write_volume(&v, &path).unwrap();
        let back = read_volume(&path).unwrap();
        assert_eq!(v, back);
    }

    #[test]
    fn payload_length_formula() {
        // 4 modalities at 128^3, f32.
        let n = volume_payload_len(4, 128, 128, 128, DType::F32).unwrap();
        assert_eq!(n, 33_554_432);
    }

    #[test]
    fn payload_length_overflow_detected() {
        assert!(matches!(
            volume_payload_len(u64::MAX / 2, 128, 128, 128, DType::F32),
            Err(Error::DimOverflow(_))
        ));
    }

    #[test]
    fn truncated_payload_is_detected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("t.mvol");
        let v = Volume::new(1, (8, 8, 8), DType::F32);
        write_volume(&v, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 10]).unwrap();
        assert!(matches!(
            read_volume(&path),
            Err(Error::TruncatedPayload { .. })
        ));
    }

    #[test]
    fn trailing_bytes_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("t.mvol");
        let v = Volume::new(1, (8, 8, 8), DType::F32);
        write_volume(&v, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.extend_from_slice(&[0u8; 3]);
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(read_volume(&path), Err(Error::TrailingData(3))));
    }

    #[test]
    fn bad_magic_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.mvol");
        std::fs::write(&path, b"NOPE....").unwrap();
        assert!(matches!(read_volume(&path), Err(Error::BadMagic { .. })));
        // A mask file is not a volume file.
        let mask_path = dir.path().join("m.mseg");
        write_mask(&SegMask::new((4, 4, 4)), &mask_path).unwrap();
        assert!(matches!(
            read_volume(&mask_path),
            Err(Error::BadMagic { .. })
        ));
    }

    #[test]
    fn mask_roundtrip_and_label_check() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("m.mseg");
        let mut m = SegMask::new((4, 5, 6));
        m.data[17] = 3;
        write_mask(&m, &path).unwrap();
        let back = read_mask(&path).unwrap();
        assert_eq!(m, back);
        assert!(back.validate_labels(4).is_ok());
        assert!(matches!(
            back.validate_labels(3),
            Err(Error::LabelOutOfRange { label: 3, .. })
        ));
    }
}
