//! Raster types and the AHD1 binary tensor format.
//!
//! AHD1 layout: magic `"AHD1"`, dtype byte (1 = f32 LE, 2 = u8,
//! 3 = f64 LE for parameter blobs), channel byte, height/width as u32 LE,
//! spacing (dy, dx) as two f32 LE, then the payload row-major and
//! channel-last. Round-trips are byte-exact.

use crate::{Error, Result};
use std::fs;
use std::path::Path;

pub const MAGIC: &[u8; 4] = b"AHD1";

pub const DTYPE_F32: u8 = 1;
pub const DTYPE_U8: u8 = 2;
pub const DTYPE_F64: u8 = 3;

/// A 2D single-channel (or few-channel) real-valued raster with spacing
/// metadata. Carrier for images, probability maps and feature maps.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorImage {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Row-major, channel-last: `values[(y * width + x) * channels + c]`.
    pub values: Vec<f32>,
    /// (dy, dx) in mm per pixel.
    pub spacing: (f32, f32),
}

impl TensorImage {
    pub fn new(height: usize, width: usize, channels: usize, values: Vec<f32>) -> Result<Self> {
        let t = TensorImage { height, width, channels, values, spacing: (1.0, 1.0) };
        t.validate()?;
        Ok(t)
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        TensorImage {
            height,
            width,
            channels: 1,
            values: vec![0.0; height * width],
            spacing: (1.0, 1.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.channels == 0 {
            return Err(Error::invalid("tensor dimensions must be positive"));
        }
        if self.values.len() != self.height * self.width * self.channels {
            return Err(Error::invalid(format!(
                "value buffer length {} does not match {}x{}x{}",
                self.values.len(),
                self.height,
                self.width,
                self.channels
            )));
        }
        if self.spacing.0 <= 0.0 || self.spacing.1 <= 0.0 {
            return Err(Error::invalid("spacing must be positive"));
        }
        if !self.values.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("tensor contains non-finite values"));
        }
        Ok(())
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.values[(y * self.width + x) * self.channels + c]
    }

    /// Per-image min-max normalization to [0, 1].
    ///
    /// Errors on a (near-)constant image: the affine map is undefined.
    pub fn normalize(&self) -> Result<TensorImage> {
        let mut lo = f32::INFINITY;
        let mut hi = f32::NEG_INFINITY;
        for &v in &self.values {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        let range = hi - lo;
        if !(range > 1e-12) {
            return Err(Error::invalid("degenerate intensity range"));
        }
        let mut out = self.clone();
        for v in &mut out.values {
            *v = (*v - lo) / range;
        }
        out.validate()?;
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.validate()?;
        write_file(path, &self.encode())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut buf = header(DTYPE_F32, self.channels as u8, self.height, self.width, self.spacing);
        for v in &self.values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf
    }

    pub fn load(path: &Path) -> Result<TensorImage> {
        match load_tensor(path)? {
            TensorData::Image(t) => Ok(t),
            TensorData::Mask(_) => Err(Error::format(path, "expected image dtype, found mask")),
        }
    }
}

/// A 2D binary raster aligned to a [`TensorImage`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMask {
    pub height: usize,
    pub width: usize,
    /// Row-major, values in {0, 1}.
    pub values: Vec<u8>,
}

impl LabelMask {
    pub fn new(height: usize, width: usize, values: Vec<u8>) -> Result<Self> {
        let m = LabelMask { height, width, values };
        m.validate()?;
        Ok(m)
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        LabelMask { height, width, values: vec![0; height * width] }
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::invalid("mask dimensions must be positive"));
        }
        if self.values.len() != self.height * self.width {
            return Err(Error::invalid(format!(
                "mask buffer length {} does not match {}x{}",
                self.values.len(),
                self.height,
                self.width
            )));
        }
        if let Some(v) = self.values.iter().find(|v| **v > 1) {
            return Err(Error::invalid(format!("mask value {v} outside {{0,1}}")));
        }
        Ok(())
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.values[y * self.width + x]
    }

    pub fn foreground_count(&self) -> usize {
        self.values.iter().filter(|v| **v == 1).count()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.validate()?;
        write_file(path, &self.encode())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut buf = header(DTYPE_U8, 1, self.height, self.width, (1.0, 1.0));
        buf.extend_from_slice(&self.values);
        buf
    }

    pub fn load(path: &Path) -> Result<LabelMask> {
        match load_tensor(path)? {
            TensorData::Mask(m) => Ok(m),
            TensorData::Image(_) => Err(Error::format(path, "expected mask dtype, found image")),
        }
    }
}

/// Either payload of an AHD1 file.
#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    Image(TensorImage),
    Mask(LabelMask),
}

pub fn save_tensor(path: &Path, data: &TensorData) -> Result<()> {
    match data {
        TensorData::Image(t) => t.save(path),
        TensorData::Mask(m) => m.save(path),
    }
}

pub fn load_tensor(path: &Path) -> Result<TensorData> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_tensor(&bytes).map_err(|e| match e {
        Error::Invalid(msg) => Error::format(path, msg),
        other => other,
    })
}

pub fn decode_tensor(bytes: &[u8]) -> Result<TensorData> {
    let (dtype, channels, height, width, spacing, payload) = decode_header(bytes)?;
    match dtype {
        DTYPE_F32 => {
            let n = height * width * channels;
            if payload.len() != n * 4 {
                return Err(Error::invalid(format!(
                    "payload is {} bytes, expected {}",
                    payload.len(),
                    n * 4
                )));
            }
            let values: Vec<f32> = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let mut t = TensorImage::new(height, width, channels, values)?;
            t.spacing = spacing;
            t.validate()?;
            Ok(TensorData::Image(t))
        }
        DTYPE_U8 => {
            if channels != 1 {
                return Err(Error::invalid("mask files must be single-channel"));
            }
            if payload.len() != height * width {
                return Err(Error::invalid(format!(
                    "payload is {} bytes, expected {}",
                    payload.len(),
                    height * width
                )));
            }
            Ok(TensorData::Mask(LabelMask::new(height, width, payload.to_vec())?))
        }
        other => Err(Error::invalid(format!("unknown dtype {other}"))),
    }
}

/// Flat f64 parameter blob in the same header layout (dtype 3), used by
/// checkpoint archives. Shape is carried externally.
pub fn encode_f64_blob(data: &[f64]) -> Vec<u8> {
    let mut buf = header(DTYPE_F64, 1, data.len(), 1, (1.0, 1.0));
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf
}

pub fn decode_f64_blob(bytes: &[u8]) -> Result<Vec<f64>> {
    let (dtype, _channels, height, width, _spacing, payload) = decode_header(bytes)?;
    if dtype != DTYPE_F64 {
        return Err(Error::invalid(format!("expected f64 blob, found dtype {dtype}")));
    }
    let n = height * width;
    if payload.len() != n * 8 {
        return Err(Error::invalid(format!("payload is {} bytes, expected {}", payload.len(), n * 8)));
    }
    Ok(payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]]))
        .collect())
}

fn header(dtype: u8, channels: u8, height: usize, width: usize, spacing: (f32, f32)) -> Vec<u8> {
    let mut buf = Vec::with_capacity(22);
    buf.extend_from_slice(MAGIC);
    buf.push(dtype);
    buf.push(channels);
    buf.extend_from_slice(&(height as u32).to_le_bytes());
    buf.extend_from_slice(&(width as u32).to_le_bytes());
    buf.extend_from_slice(&spacing.0.to_le_bytes());
    buf.extend_from_slice(&spacing.1.to_le_bytes());
    buf
}

#[allow(clippy::type_complexity)]
fn decode_header(bytes: &[u8]) -> Result<(u8, usize, usize, usize, (f32, f32), &[u8])> {
    if bytes.len() < 22 {
        return Err(Error::invalid("file shorter than AHD1 header"));
    }
    if &bytes[0..4] != MAGIC {
        return Err(Error::invalid("bad magic, not an AHD1 file"));
    }
    let dtype = bytes[4];
    let channels = bytes[5] as usize;
    let height = u32::from_le_bytes([bytes[6], bytes[7], bytes[8], bytes[9]]) as usize;
    let width = u32::from_le_bytes([bytes[10], bytes[11], bytes[12], bytes[13]]) as usize;
    let dy = f32::from_le_bytes([bytes[14], bytes[15], bytes[16], bytes[17]]);
    let dx = f32::from_le_bytes([bytes[18], bytes[19], bytes[20], bytes[21]]);
    Ok((dtype, channels, height, width, (dy, dx), &bytes[22..]))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn zero_tensor_layout() {
        let t = TensorImage::zeros(2, 2);
        let bytes = t.encode();
        assert_eq!(&bytes[0..4], b"AHD1");
        assert_eq!(bytes[4], DTYPE_F32);
        assert_eq!(bytes.len(), 22 + 16);
        assert!(bytes[22..].iter().all(|b| *b == 0));
    }

    #[test]
    fn round_trip_random_image() {
        let mut rng = crate::rng::stream(7, "tensor-test");
        let values: Vec<f32> = (0..64 * 64).map(|_| rng.random::<f32>()).collect();
        let mut t = TensorImage::new(64, 64, 1, values).unwrap();
        t.spacing = (0.5, 2.0);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ahd1");
        t.save(&path).unwrap();
        let back = TensorImage::load(&path).unwrap();
        assert_eq!(t, back);
        // byte-exact on re-encode
        assert_eq!(t.encode(), back.encode());
    }

    #[test]
    fn mask_round_trip_and_rejection() {
        let m = LabelMask::new(3, 3, vec![0, 1, 0, 1, 1, 0, 0, 0, 1]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ahd1");
        m.save(&path).unwrap();
        assert_eq!(LabelMask::load(&path).unwrap(), m);

        // value 2 rejected before any write
        let bad = LabelMask { height: 1, width: 2, values: vec![0, 2] };
        let path2 = dir.path().join("bad.ahd1");
        assert!(bad.save(&path2).is_err());
        assert!(!path2.exists());
    }

    #[test]
    fn normalize_affine_map() {
        let t = TensorImage::new(1, 3, 1, vec![0.0, 5.0, 10.0]).unwrap();
        let n = t.normalize().unwrap();
        assert_eq!(n.values, vec![0.0, 0.5, 1.0]);
    }

    #[test]
    fn normalize_full_range_unchanged() {
        let t = TensorImage::new(1, 4, 1, vec![0.0, 0.25, 0.75, 1.0]).unwrap();
        let n = t.normalize().unwrap();
        assert_eq!(n.values, t.values);
    }

    #[test]
    fn normalize_constant_errors() {
        let t = TensorImage::new(2, 2, 1, vec![0.3; 4]).unwrap();
        let err = t.normalize().unwrap_err();
        assert!(err.to_string().contains("degenerate intensity range"));
    }

    #[test]
    fn normalize_idempotent() {
        let mut rng = crate::rng::stream(3, "norm-idem");
        let values: Vec<f32> = (0..256).map(|_| rng.random_range(-4.0..9.0)).collect();
        let t = TensorImage::new(16, 16, 1, values).unwrap();
        let n1 = t.normalize().unwrap();
        let n2 = n1.normalize().unwrap();
        for (a, b) in n1.values.iter().zip(&n2.values) {
            assert!((a - b).abs() <= 1e-7);
        }
    }

    #[test]
    fn f64_blob_round_trip() {
        let data = vec![1.5, -2.25, 3.875, 0.0, f64::MIN_POSITIVE];
        let bytes = encode_f64_blob(&data);
        assert_eq!(decode_f64_blob(&bytes).unwrap(), data);
    }

    #[test]
    fn truncated_file_rejected() {
        let t = TensorImage::zeros(4, 4);
        let mut bytes = t.encode();
        bytes.truncate(30);
        assert!(decode_tensor(&bytes).is_err());
    }
}
