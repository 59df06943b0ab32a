//! Dense rasters shared by every stage: RGB images, label maps and
//! per-pixel class distributions. All buffers are planar (channel-major).

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub, SubAssign};

use crate::error::{Error, Result};

/// Floating point element type for network compute.
///
/// Training runs in `f32`; finite-difference gradient checks run the very
/// same code in `f64`.
pub trait Scalar:
    Copy
    + Debug
    + Default
    + PartialOrd
    + Send
    + Sync
    + Sum
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
    + 'static
{
    const ZERO: Self;
    const ONE: Self;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn max_val(self, other: Self) -> Self;
    fn tiny() -> Self;

    /// `c = alpha * a * b + beta * c` for row-major `a` (m×k), `b` (k×n),
    /// `c` (m×n). `ta` / `tb` read the operand transposed from its stored
    /// row-major layout (k×m / n×k respectively).
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        ta: bool,
        b: &[Self],
        tb: bool,
        beta: Self,
        c: &mut [Self],
    );
}

macro_rules! impl_scalar {
    ($t:ty, $gemm:path, $tiny:expr) => {
        impl Scalar for $t {
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;
            #[inline]
            fn from_f64(v: f64) -> Self {
                v as $t
            }
            #[inline]
            fn to_f64(self) -> f64 {
                self as f64
            }
            #[inline]
            fn exp(self) -> Self {
                <$t>::exp(self)
            }
            #[inline]
            fn ln(self) -> Self {
                <$t>::ln(self)
            }
            #[inline]
            fn sqrt(self) -> Self {
                <$t>::sqrt(self)
            }
            #[inline]
            fn max_val(self, other: Self) -> Self {
                <$t>::max(self, other)
            }
            #[inline]
            fn tiny() -> Self {
                $tiny
            }

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                ta: bool,
                b: &[Self],
                tb: bool,
                beta: Self,
                c: &mut [Self],
            ) {
                assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
                let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
                let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
                // SAFETY: the asserted lengths cover every index reachable from
                // the dimensions and strides handed to the kernel.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }
        }
    };
}

impl_scalar!(f32, matrixmultiply::sgemm, 1e-30);
impl_scalar!(f64, matrixmultiply::dgemm, 1e-300);

/// Planar RGB image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    /// `data[c * h * w + y * w + x]`
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; 3 * height * width],
        }
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let mut img = Self::new(height, width);
        for (c, v) in rgb.iter().enumerate() {
            img.channel_mut(c).fill(*v);
        }
        img
    }

    pub fn from_data(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != 3 * height * width {
            return Err(Error::Shape(format!(
                "image buffer has {} values, expected 3x{height}x{width}",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    #[inline]
    pub fn area(&self) -> usize {
        self.height * self.width
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let a = self.area();
        &self.data[c * a..(c + 1) * a]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f32] {
        let a = self.area();
        &mut self.data[c * a..(c + 1) * a]
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[c * self.area() + y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        let a = self.area();
        self.data[c * a + y * self.width + x] = v;
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        [self.get(0, y, x), self.get(1, y, x), self.get(2, y, x)]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f32; 3]) {
        for (c, v) in rgb.iter().enumerate() {
            self.set(c, y, x, *v);
        }
    }

    pub fn clamp_unit(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    /// Rounds every value to the nearest 8-bit level, as stored on disk.
    pub fn quantize_u8(&mut self) {
        for v in &mut self.data {
            *v = (v.clamp(0.0, 1.0) * 255.0).round() / 255.0;
        }
    }

    pub fn channel_means(&self) -> [f64; 3] {
        let mut out = [0.0; 3];
        for (c, m) in out.iter_mut().enumerate() {
            *m = self.channel(c).iter().map(|&v| v as f64).sum::<f64>() / self.area() as f64;
        }
        out
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.height == other.height && self.width == other.width
    }
}

/// Per-pixel class ids; one reserved value marks "ignore".
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, fill: u8) -> Self {
        Self {
            height,
            width,
            data: vec![fill; height * width],
        }
    }

    pub fn from_data(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!(
                "label buffer has {} values, expected {height}x{width}",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: u8) {
        self.data[y * self.width + x] = v;
    }

    pub fn same_shape(&self, other: &LabelMap) -> bool {
        self.height == other.height && self.width == other.width
    }

    /// Sorted distinct ids, ignoring `ignore_id`.
    pub fn classes_present(&self, ignore_id: u8) -> Vec<u8> {
        let mut seen = [false; 256];
        for &v in &self.data {
            if v != ignore_id {
                seen[v as usize] = true;
            }
        }
        (0..=255u8).filter(|&k| seen[k as usize]).collect()
    }

    /// Nearest-neighbour subsampling by an integer stride, sampling the
    /// pixel at offset `stride / 2` within each cell.
    pub fn downsample_nearest(&self, stride: usize) -> LabelMap {
        let h = self.height / stride;
        let w = self.width / stride;
        let off = stride / 2;
        let mut out = LabelMap::new(h, w, 0);
        for y in 0..h {
            for x in 0..w {
                out.set(y, x, self.get(y * stride + off, x * stride + off));
            }
        }
        out
    }

    /// Nearest-neighbour replication by an integer factor.
    pub fn upsample_nearest(&self, factor: usize) -> LabelMap {
        let mut out = LabelMap::new(self.height * factor, self.width * factor, 0);
        for y in 0..out.height {
            for x in 0..out.width {
                out.set(y, x, self.get(y / factor, x / factor));
            }
        }
        out
    }
}

/// Per-pixel class distributions, `C×H×W`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbMap<T: Scalar = f32> {
    pub classes: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> ProbMap<T> {
    pub fn from_data(classes: usize, height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != classes * height * width {
            return Err(Error::Shape(format!(
                "prob buffer has {} values, expected {classes}x{height}x{width}",
                data.len()
            )));
        }
        Ok(Self {
            classes,
            height,
            width,
            data,
        })
    }

    pub fn uniform(classes: usize, height: usize, width: usize) -> Self {
        let v = T::ONE / T::from_f64(classes as f64);
        Self {
            classes,
            height,
            width,
            data: vec![v; classes * height * width],
        }
    }

    /// Builds a map from a per-pixel closure returning `classes` values.
    pub fn from_fn(
        classes: usize,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize) -> Vec<T>,
    ) -> Self {
        let area = height * width;
        let mut data = vec![T::ZERO; classes * area];
        for p in 0..area {
            let v = f(p);
            for c in 0..classes {
                data[c * area + p] = v[c];
            }
        }
        Self {
            classes,
            height,
            width,
            data,
        }
    }

    #[inline]
    pub fn area(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn at(&self, c: usize, pixel: usize) -> T {
        self.data[c * self.area() + pixel]
    }

    pub fn same_shape(&self, other: &ProbMap<T>) -> bool {
        self.classes == other.classes && self.height == other.height && self.width == other.width
    }

    /// Per-pixel argmax; ties resolve to the smallest class id.
    pub fn argmax(&self) -> LabelMap {
        let area = self.area();
        let mut out = LabelMap::new(self.height, self.width, 0);
        for p in 0..area {
            let mut best = 0;
            let mut best_v = self.at(0, p);
            for c in 1..self.classes {
                let v = self.at(c, p);
                if v > best_v {
                    best = c;
                    best_v = v;
                }
            }
            out.data[p] = best as u8;
        }
        out
    }

    /// Per-pixel maximum probability.
    pub fn max_prob(&self) -> Vec<T> {
        let area = self.area();
        (0..area)
            .map(|p| {
                (1..self.classes).fold(self.at(0, p), |m, c| m.max_val(self.at(c, p)))
            })
            .collect()
    }

    pub fn cast<U: Scalar>(&self) -> ProbMap<U> {
        ProbMap {
            classes: self.classes,
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|v| U::from_f64(v.to_f64())).collect(),
        }
    }
}

/// Numerically stable softmax over the channel axis of a planar `C×area` buffer.
pub fn softmax_channels<T: Scalar>(logits: &[T], classes: usize, area: usize) -> Vec<T> {
    let mut out = vec![T::ZERO; classes * area];
    for p in 0..area {
        let mut m = logits[p];
        for c in 1..classes {
            m = m.max_val(logits[c * area + p]);
        }
        let mut sum = T::ZERO;
        for c in 0..classes {
            let e = (logits[c * area + p] - m).exp();
            out[c * area + p] = e;
            sum += e;
        }
        let inv = T::ONE / sum;
        for c in 0..classes {
            out[c * area + p] *= inv;
        }
    }
    out
}
