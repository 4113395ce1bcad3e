//! Float images and binary PPM/PGM I/O.

use std::path::Path;

use thiserror::Error;

use crate::neural::{Result as NeuralResult, Scalar, Tensor};

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("unsupported or malformed netpbm data: {0}")]
    Format(String),
    #[error("image shape mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Interleaved `H x W x C` image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f32>) -> Result<Self, ImageError> {
        if data.len() != width * height * channels {
            return Err(ImageError::Shape(format!(
                "{width}x{height}x{channels} needs {} values, got {}",
                width * height * channels,
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, pixel: &[f32]) -> Self {
        let data = (0..width * height).flat_map(|_| pixel.iter().copied()).collect();
        Self {
            width,
            height,
            channels: pixel.len(),
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[f32] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        (self.width, self.height, self.channels) == (other.width, other.height, other.channels)
    }

    /// Channel-first `[1, C, H, W]` tensor.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let hw = self.width * self.height;
        let mut out = vec![T::zero(); self.data.len()];
        for p in 0..hw {
            for c in 0..self.channels {
                out[c * hw + p] = T::lit(self.data[p * self.channels + c] as f64);
            }
        }
        Tensor::new(vec![1, self.channels, self.height, self.width], out)
            .expect("length matches shape")
    }

    /// Inverse of [`Image::to_tensor`] for item `index` of a `[N, C, H, W]`
    /// batch, clamping to `[0, 1]`.
    pub fn from_tensor<T: Scalar>(t: &Tensor<T>, index: usize) -> NeuralResult<Self> {
        let (_, c, h, w) = t.dims4("image from tensor")?;
        let hw = h * w;
        let base = index * c * hw;
        let mut data = vec![0.0f32; c * hw];
        for p in 0..hw {
            for ch in 0..c {
                data[p * c + ch] = t.data()[base + ch * hw + p].as_f32().clamp(0.0, 1.0);
            }
        }
        Ok(Self {
            width: w,
            height: h,
            channels: c,
            data,
        })
    }

    /// Rounds every value to the nearest 8-bit level.
    pub fn quantize(&mut self) {
        for v in &mut self.data {
            *v = (v.clamp(0.0, 1.0) * 255.0).round() / 255.0;
        }
    }

    /// Binary PPM (3 channels) or PGM (1 channel), 8 bits per sample.
    pub fn to_netpbm(&self) -> Result<Vec<u8>, ImageError> {
        let tag = match self.channels {
            1 => "P5",
            3 => "P6",
            c => return Err(ImageError::Shape(format!("{c} channels cannot be written as netpbm"))),
        };
        let mut out = format!("{tag}\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(
            self.data
                .iter()
                .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
        );
        Ok(out)
    }

    pub fn from_netpbm(bytes: &[u8]) -> Result<Self, ImageError> {
        let mut pos = 0;
        let mut tokens = Vec::with_capacity(4);
        while tokens.len() < 4 {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(ImageError::Format("truncated header".into()));
            }
            tokens.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
        }
        // Exactly one whitespace byte separates the header from the raster.
        pos += 1;
        let channels = match tokens[0].as_str() {
            "P5" => 1,
            "P6" => 3,
            other => return Err(ImageError::Format(format!("magic {other:?}"))),
        };
        let parse = |s: &str| {
            s.parse::<usize>()
                .map_err(|e| ImageError::Format(format!("{s:?}: {e}")))
        };
        let (width, height, maxval) = (parse(&tokens[1])?, parse(&tokens[2])?, parse(&tokens[3])?);
        if maxval != 255 {
            return Err(ImageError::Format(format!("maxval {maxval}, only 255 supported")));
        }
        let n = width * height * channels;
        let raster = bytes
            .get(pos..pos + n)
            .ok_or_else(|| ImageError::Format("truncated raster".into()))?;
        Self::new(
            width,
            height,
            channels,
            raster.iter().map(|&b| b as f32 / 255.0).collect(),
        )
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ImageError> {
        std::fs::write(path, self.to_netpbm()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ImageError> {
        Self::from_netpbm(&std::fs::read(path)?)
    }
}
