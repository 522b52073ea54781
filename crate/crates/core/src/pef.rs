//! Perturbation extraction filters and two-branch feature enhancement.
//!
//! Image fixture layout (little-endian): `u32 height`, `u32 width`, then the
//! three channel planes, each `height * width` `f64` values in row-major order.

use std::fs;
use std::path::Path;

use crate::domains::ByteReader;
use crate::error::{Error, Result};
use crate::nnkit::Mlp;
use crate::numerics::Matrix;

pub const CHANNELS: usize = 3;
pub const KERNEL_SIZE: usize = 5;
const PAD: usize = KERNEL_SIZE / 2;

/// A 5×5 integer kernel and its divisor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PefKernel {
    pub name: &'static str,
    pub taps: [[i32; KERNEL_SIZE]; KERNEL_SIZE],
    pub divisor: f64,
}

impl PefKernel {
    pub fn weight(&self, u: usize, v: usize) -> f64 {
        self.taps[u][v] as f64 / self.divisor
    }

    pub fn tap_sum(&self) -> i32 {
        self.taps.iter().flatten().sum()
    }
}

pub const FIRST_ORDER: PefKernel = PefKernel {
    name: "first-order",
    taps: [
        [0, 0, 0, 0, 0],
        [0, 0, 0, 0, 0],
        [0, 1, -2, 1, 0],
        [0, 0, 0, 0, 0],
        [0, 0, 0, 0, 0],
    ],
    divisor: 2.0,
};

pub const SECOND_ORDER: PefKernel = PefKernel {
    name: "second-order",
    taps: [
        [0, 0, 0, 0, 0],
        [0, -1, 2, -1, 0],
        [0, 2, -4, 2, 0],
        [0, -1, 2, -1, 0],
        [0, 0, 0, 0, 0],
    ],
    divisor: 4.0,
};

pub const SQUARE_5X5: PefKernel = PefKernel {
    name: "square-5x5",
    taps: [
        [-1, 2, -2, 2, -1],
        [2, -6, 8, -6, 2],
        [-2, 8, -12, 8, -2],
        [2, -6, 8, -6, 2],
        [-1, 2, -2, 2, -1],
    ],
    divisor: 12.0,
};

/// The fixed filter bank; output channel `c` uses `PEF_KERNELS[c]`.
pub const PEF_KERNELS: [PefKernel; CHANNELS] = [FIRST_ORDER, SECOND_ORDER, SQUARE_5X5];

/// Fails if any kernel of the bank is not high-pass.
pub fn check_kernels() -> Result<()> {
    for k in &PEF_KERNELS {
        if k.tap_sum() != 0 {
            return Err(Error::InvalidInput(format!(
                "kernel {} sums to {}",
                k.name,
                k.tap_sum()
            )));
        }
    }
    Ok(())
}

/// Three channel planes of equal size.
#[derive(Debug, Clone, PartialEq)]
pub struct Planes {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Planes {
    pub fn zeros(height: usize, width: usize) -> Self {
        Planes {
            height,
            width,
            data: vec![0.0; CHANNELS * height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    /// Interleaved `(y, x, c)` order.
    pub fn flatten_hwc(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.data.len());
        for y in 0..self.height {
            for x in 0..self.width {
                for c in 0..CHANNELS {
                    out.push(self.at(c, y, x));
                }
            }
        }
        out
    }

    pub fn max_abs_diff(&self, other: &Planes) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// An RGB image with values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor(Planes);

impl ImageTensor {
    /// `data` holds the three planes back to back.
    pub fn from_planes(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height < KERNEL_SIZE || width < KERNEL_SIZE {
            return Err(Error::ImageTooSmall { height, width });
        }
        if data.len() != CHANNELS * height * width {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a {height}x{width}x3 image",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidInput(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(ImageTensor(Planes { height, width, data }))
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize, usize) -> f64) -> Result<Self> {
        let mut data = Vec::with_capacity(CHANNELS * height * width);
        for c in 0..CHANNELS {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        ImageTensor::from_planes(height, width, data)
    }

    pub fn planes(&self) -> &Planes {
        &self.0
    }

    pub fn height(&self) -> usize {
        self.0.height
    }

    pub fn width(&self) -> usize {
        self.0.width
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.0.at(c, y, x)
    }

    pub fn flatten_hwc(&self) -> Vec<f64> {
        self.0.flatten_hwc()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + 8 * self.0.data.len());
        out.extend((self.height() as u32).to_le_bytes());
        out.extend((self.width() as u32).to_le_bytes());
        for v in &self.0.data {
            out.extend(v.to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        let h = r.u32()? as usize;
        let w = r.u32()? as usize;
        let n = CHANNELS
            .checked_mul(h)
            .and_then(|v| v.checked_mul(w))
            .ok_or_else(|| Error::FormatViolation("image dimensions overflow".into()))?;
        if bytes.len() != 8 + 8 * n {
            return Err(Error::FormatViolation(format!(
                "{} bytes for a {h}x{w}x3 image",
                bytes.len()
            )));
        }
        let data = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        ImageTensor::from_planes(h, w, data)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        ImageTensor::decode(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

/// Residual map: output channel `c` is the sum over input channels of the
/// zero-padded, stride-1 convolution with `PEF_KERNELS[c]`.
pub fn pef_filter(img: &ImageTensor) -> Planes {
    let (h, w) = (img.height(), img.width());
    // kernels are applied identically to every input channel, so the channel
    // sum can be taken first
    let mut summed = vec![0.0; h * w];
    for c in 0..CHANNELS {
        for (s, v) in summed.iter_mut().zip(img.planes().plane(c)) {
            *s += v;
        }
    }
    let mut out = Planes::zeros(h, w);
    for (c, k) in PEF_KERNELS.iter().enumerate() {
        for y in 0..h {
            for x in 0..w {
                // offset by the centre pixel so flat neighbourhoods give exactly 0
                let centre = summed[y * w + x];
                let mut acc = 0.0;
                for u in 0..KERNEL_SIZE {
                    let iy = (y + PAD).checked_sub(u).filter(|&iy| iy < h);
                    for v in 0..KERNEL_SIZE {
                        let t = k.taps[u][v];
                        if t == 0 {
                            continue;
                        }
                        let ix = (x + PAD).checked_sub(v).filter(|&ix| ix < w);
                        let p = match (iy, ix) {
                            (Some(iy), Some(ix)) => summed[iy * w + ix],
                            _ => 0.0,
                        };
                        acc += t as f64 * (p - centre);
                    }
                }
                let acc = acc / k.divisor;
                out.set(c, y, x, acc);
            }
        }
    }
    out
}

/// `[S(flatten(img)), F(flatten(pef_filter(img)))]`.
pub fn afe_features(img: &ImageTensor, enc_spatial: &Mlp, enc_freq: &Mlp) -> Result<Vec<f64>> {
    let raw = img.flatten_hwc();
    let residual = pef_filter(img).flatten_hwc();
    let s = enc_spatial.forward(&Matrix::from_vec(1, raw.len(), raw)?)?;
    let f = enc_freq.forward(&Matrix::from_vec(1, residual.len(), residual)?)?;
    let mut out = s.into_vec();
    out.extend(f.into_vec());
    Ok(out)
}
