use std::path::Path;

use crate::error::{invalid, io_err, Error, Result};
use crate::io::atomic_write;

/// H'×W'×C feature grid of one frame and viewpoint at one denoising step.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureVolume {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub frame: usize,
    pub view: usize,
    pub step: usize,
    /// Row-major cells, channels innermost.
    pub data: Vec<f64>,
}

/// Feature grid size for an image, which must divide by `stride`.
pub fn grid_size(width: usize, height: usize, stride: usize) -> Result<(usize, usize)> {
    if stride == 0 || width % stride != 0 || height % stride != 0 || width == 0 || height == 0 {
        return Err(invalid(format!("image {width}x{height} is not divisible by stride {stride}")));
    }
    Ok((width / stride, height / stride))
}

impl FeatureVolume {
    pub fn zeros(width: usize, height: usize, channels: usize, frame: usize, view: usize, step: usize) -> Self {
        Self {
            width,
            height,
            channels,
            frame,
            view,
            step,
            data: vec![0.0; width * height * channels],
        }
    }

    pub fn cell(&self, x: usize, y: usize) -> &[f64] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    pub fn cell_mut(&mut self, x: usize, y: usize) -> &mut [f64] {
        let i = (y * self.width + x) * self.channels;
        &mut self.data[i..i + self.channels]
    }

    pub fn same_grid(&self, o: &FeatureVolume) -> bool {
        self.width == o.width && self.height == o.height && self.channels == o.channels
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

const MAGIC: &[u8; 4] = b"FTV1";

/// `FTV1`, u32 H', W', C, n, k, t, then f32 values, all little-endian.
pub fn encode_ftv1(v: &FeatureVolume) -> Vec<u8> {
    let mut out = Vec::with_capacity(28 + 4 * v.data.len());
    out.extend_from_slice(MAGIC);
    for h in [v.height, v.width, v.channels, v.frame, v.view, v.step] {
        out.extend_from_slice(&(h as u32).to_le_bytes());
    }
    for x in &v.data {
        out.extend_from_slice(&(*x as f32).to_le_bytes());
    }
    out
}

pub fn decode_ftv1(bytes: &[u8]) -> Result<FeatureVolume> {
    let bad = |m: &str| Error::Format(format!("FTV1: {m}"));
    if bytes.len() < 28 || &bytes[..4] != MAGIC {
        return Err(bad("bad magic or short header"));
    }
    let u = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    let (height, width, channels) = (u(0), u(1), u(2));
    let count = height
        .checked_mul(width)
        .and_then(|v| v.checked_mul(channels))
        .ok_or_else(|| bad("size overflow"))?;
    if bytes.len() != 28 + 4 * count {
        return Err(bad("payload length does not match header"));
    }
    let data = bytes[28..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect::<Vec<_>>();
    let v = FeatureVolume {
        width,
        height,
        channels,
        frame: u(3),
        view: u(4),
        step: u(5),
        data,
    };
    if !v.is_finite() {
        return Err(bad("non-finite value"));
    }
    Ok(v)
}

pub fn write_ftv1(v: &FeatureVolume, path: &Path) -> Result<()> {
    atomic_write(path, &encode_ftv1(v))
}

pub fn read_ftv1(path: &Path) -> Result<FeatureVolume> {
    decode_ftv1(&std::fs::read(path).map_err(io_err(path))?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ftv1_round_trip() {
        let mut v = FeatureVolume::zeros(3, 2, 4, 5, 2, 17);
        for (i, x) in v.data.iter_mut().enumerate() {
            *x = i as f64 * 0.25 - 1.0;
        }
        let bytes = encode_ftv1(&v);
        assert_eq!(&bytes[..4], b"FTV1");
        assert_eq!(decode_ftv1(&bytes).unwrap(), v);
        assert!(decode_ftv1(&bytes[..bytes.len() - 1]).is_err());
        assert!(grid_size(128, 128, 8).unwrap() == (16, 16));
        assert!(grid_size(100, 128, 8).is_err());
    }
}
