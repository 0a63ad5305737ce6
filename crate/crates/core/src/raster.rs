//! Dense 2-D grids and multi-channel float rasters, plus the resampling,
//! cropping and blurring primitives shared by training and inference.

use crate::datamodel::BBox;
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Row-major `height x width` grid of scalar cells.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Grid<T> {
    height: usize,
    width: usize,
    data: Vec<T>,
}

impl<T: Copy> Grid<T> {
    pub fn filled(height: usize, width: usize, value: T) -> Self {
        Self { height, width, data: vec![value; height * width] }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!(
                "grid data has {} cells, expected {}x{}",
                data.len(),
                height,
                width
            )));
        }
        Ok(Self { height, width, data })
    }

    /// Builds a grid from nested rows; panics on ragged input (test helper).
    pub fn from_rows(rows: &[Vec<T>]) -> Self {
        let height = rows.len();
        let width = rows.first().map_or(0, |r| r.len());
        assert!(rows.iter().all(|r| r.len() == width), "ragged rows");
        Self { height, width, data: rows.iter().flatten().copied().collect() }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x));
            }
        }
        Self { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> T {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: T) {
        self.data[y * self.width + x] = v;
    }

    /// Value at signed coordinates, or `None` outside the grid.
    #[inline]
    pub fn get_signed(&self, y: i64, x: i64) -> Option<T> {
        if y < 0 || x < 0 || y >= self.height as i64 || x >= self.width as i64 {
            None
        } else {
            Some(self.get(y as usize, x as usize))
        }
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn map<U: Copy>(&self, f: impl Fn(T) -> U) -> Grid<U> {
        Grid { height: self.height, width: self.width, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    /// Crop to `bbox`, filling out-of-bounds cells with `pad`.
    pub fn crop_with_padding(&self, bbox: &BBox, pad: T) -> Grid<T> {
        let (h, w) = (bbox.height() as usize, bbox.width() as usize);
        Grid::from_fn(h, w, |y, x| {
            self.get_signed(bbox.y0 + y as i64, bbox.x0 + x as i64).unwrap_or(pad)
        })
    }

    /// Nearest-neighbour resampling; never introduces values absent from the input.
    pub fn resize_nearest(&self, out_h: usize, out_w: usize) -> Grid<T> {
        if (out_h, out_w) == self.dims() {
            return self.clone();
        }
        let ys: Vec<usize> = (0..out_h).map(|i| nearest_index(i, out_h, self.height)).collect();
        let xs: Vec<usize> = (0..out_w).map(|i| nearest_index(i, out_w, self.width)).collect();
        Grid::from_fn(out_h, out_w, |y, x| self.get(ys[y], xs[x]))
    }
}

fn nearest_index(dst: usize, dst_len: usize, src_len: usize) -> usize {
    let s = ((dst as f64 + 0.5) * src_len as f64 / dst_len as f64).floor() as usize;
    s.min(src_len - 1)
}

/// Binary mask over a grid.
pub type Mask = Grid<bool>;

impl Mask {
    pub fn count(&self) -> usize {
        self.as_slice().iter().filter(|&&b| b).count()
    }
}

/// Interpolation used by [`Raster::resize`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResizeMode {
    Bilinear,
    Nearest,
}

/// Interleaved (HWC) multi-channel float raster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Raster {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl Raster {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self::filled(height, width, channels, 0.0)
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Self {
        Self { height, width, channels, data: vec![value; height * width * channels] }
    }

    pub fn from_vec(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::Shape(format!(
                "raster data has {} values, expected {}x{}x{}",
                data.len(),
                height,
                width,
                channels
            )));
        }
        Ok(Self { height, width, channels, data })
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Self {
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(y, x, c));
                }
            }
        }
        Self { height, width, channels, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    #[inline]
    fn offset(&self, y: usize, x: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[self.offset(y, x, c)]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f32) {
        let o = self.offset(y, x, c);
        self.data[o] = v;
    }

    pub fn pixel(&self, y: usize, x: usize) -> &[f32] {
        let o = self.offset(y, x, 0);
        &self.data[o..o + self.channels]
    }

    pub fn pixel_mut(&mut self, y: usize, x: usize) -> &mut [f32] {
        let o = self.offset(y, x, 0);
        let c = self.channels;
        &mut self.data[o..o + c]
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Raster {
        Raster {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Crop to `bbox`; out-of-bounds pixels take `pad` in every channel.
    pub fn crop_with_padding(&self, bbox: &BBox, pad: f32) -> Raster {
        let (h, w) = (bbox.height() as usize, bbox.width() as usize);
        let mut out = Raster::filled(h, w, self.channels, pad);
        for y in 0..h {
            let sy = bbox.y0 + y as i64;
            if sy < 0 || sy >= self.height as i64 {
                continue;
            }
            for x in 0..w {
                let sx = bbox.x0 + x as i64;
                if sx < 0 || sx >= self.width as i64 {
                    continue;
                }
                out.pixel_mut(y, x).copy_from_slice(self.pixel(sy as usize, sx as usize));
            }
        }
        out
    }

    /// Write `src` with its top-left corner at `(y0, x0)`, clipping to bounds.
    pub fn paste(&mut self, src: &Raster, y0: i64, x0: i64) {
        assert_eq!(src.channels, self.channels, "channel mismatch in paste");
        for y in 0..src.height {
            let ty = y0 + y as i64;
            if ty < 0 || ty >= self.height as i64 {
                continue;
            }
            for x in 0..src.width {
                let tx = x0 + x as i64;
                if tx < 0 || tx >= self.width as i64 {
                    continue;
                }
                self.pixel_mut(ty as usize, tx as usize).copy_from_slice(src.pixel(y, x));
            }
        }
    }

    pub fn resize(&self, out_h: usize, out_w: usize, mode: ResizeMode) -> Result<Raster> {
        if out_h == 0 || out_w == 0 {
            return Err(Error::InvalidArgument(format!("resize to {out_h}x{out_w}")));
        }
        if (out_h, out_w) == self.dims() {
            return Ok(self.clone());
        }
        Ok(match mode {
            ResizeMode::Nearest => {
                let ys: Vec<usize> = (0..out_h).map(|i| nearest_index(i, out_h, self.height)).collect();
                let xs: Vec<usize> = (0..out_w).map(|i| nearest_index(i, out_w, self.width)).collect();
                Raster::from_fn(out_h, out_w, self.channels, |y, x, c| self.get(ys[y], xs[x], c))
            }
            ResizeMode::Bilinear => {
                let ys = bilinear_taps(out_h, self.height);
                let xs = bilinear_taps(out_w, self.width);
                let mut out = Raster::zeros(out_h, out_w, self.channels);
                for (y, &(y0, y1, fy)) in ys.iter().enumerate() {
                    for (x, &(x0, x1, fx)) in xs.iter().enumerate() {
                        for c in 0..self.channels {
                            let top = self.get(y0, x0, c) * (1.0 - fx) + self.get(y0, x1, c) * fx;
                            let bot = self.get(y1, x0, c) * (1.0 - fx) + self.get(y1, x1, c) * fx;
                            out.set(y, x, c, top * (1.0 - fy) + bot * fy);
                        }
                    }
                }
                out
            }
        })
    }

    /// Separable Gaussian blur with replicated borders. `sigma <= 0` is the identity.
    pub fn gaussian_blur(&self, sigma: f32) -> Raster {
        if sigma <= 0.0 {
            return self.clone();
        }
        let kernel = gaussian_kernel(sigma);
        let r = (kernel.len() / 2) as i64;
        let (h, w, ch) = (self.height as i64, self.width as i64, self.channels);
        let mut tmp = Raster::zeros(self.height, self.width, ch);
        for y in 0..self.height {
            for x in 0..w {
                for c in 0..ch {
                    let mut acc = 0.0f32;
                    for (k, &kv) in kernel.iter().enumerate() {
                        let sx = (x + k as i64 - r).clamp(0, w - 1) as usize;
                        acc += kv * self.get(y, sx, c);
                    }
                    tmp.set(y, x as usize, c, acc);
                }
            }
        }
        let mut out = Raster::zeros(self.height, self.width, ch);
        for y in 0..h {
            for x in 0..self.width {
                for c in 0..ch {
                    let mut acc = 0.0f32;
                    for (k, &kv) in kernel.iter().enumerate() {
                        let sy = (y + k as i64 - r).clamp(0, h - 1) as usize;
                        acc += kv * tmp.get(sy, x, c);
                    }
                    out.set(y as usize, x, c, acc);
                }
            }
        }
        out
    }

    /// Single-channel raster from a mask (1.0 where set).
    pub fn from_mask(mask: &Mask) -> Raster {
        Raster::from_fn(mask.height(), mask.width(), 1, |y, x, _| if mask.get(y, x) { 1.0 } else { 0.0 })
    }

    pub fn clamp01(&self) -> Raster {
        self.map(|v| v.clamp(0.0, 1.0))
    }

    /// Mean per channel over pixels where `mask` is set; `None` when the mask is empty.
    pub fn masked_mean(&self, mask: &Mask) -> Option<Vec<f64>> {
        let mut acc = vec![0.0f64; self.channels];
        let mut n = 0usize;
        for y in 0..self.height {
            for x in 0..self.width {
                if mask.get(y, x) {
                    n += 1;
                    for (a, &v) in acc.iter_mut().zip(self.pixel(y, x)) {
                        *a += v as f64;
                    }
                }
            }
        }
        (n > 0).then(|| acc.into_iter().map(|a| a / n as f64).collect())
    }
}

/// Source taps for half-pixel-centred bilinear resampling with edge clamping.
fn bilinear_taps(dst_len: usize, src_len: usize) -> Vec<(usize, usize, f32)> {
    let scale = src_len as f64 / dst_len as f64;
    (0..dst_len)
        .map(|i| {
            let s = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (s.floor() as usize).min(src_len - 1);
            let i1 = (i0 + 1).min(src_len - 1);
            let f = if i1 == i0 { 0.0 } else { (s - i0 as f64) as f32 };
            (i0, i1, f)
        })
        .collect()
}

/// Normalised 1-D Gaussian kernel with radius `ceil(3 sigma)`.
pub fn gaussian_kernel(sigma: f32) -> Vec<f32> {
    let r = (3.0 * sigma).ceil().max(1.0) as i64;
    let mut k: Vec<f32> = (-r..=r).map(|i| (-(i * i) as f32 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f32 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bilinear_same_dims_is_bit_identical() {
        let r = Raster::from_fn(5, 7, 3, |y, x, c| (y * 31 + x * 7 + c) as f32 * 0.013);
        assert_eq!(r.resize(5, 7, ResizeMode::Bilinear).unwrap(), r);
    }

    #[test]
    fn bilinear_round_trip_of_smooth_gradient() {
        let r = Raster::from_fn(16, 16, 1, |y, x, _| (x as f32 + 0.5 * y as f32) / 24.0);
        let up = r.resize(32, 32, ResizeMode::Bilinear).unwrap();
        let back = up.resize(16, 16, ResizeMode::Bilinear).unwrap();
        let linf = r.as_slice().iter().zip(back.as_slice()).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max);
        assert!(linf < 0.05, "linf {linf}");
    }

    #[test]
    fn nearest_preserves_label_set() {
        let g = Grid::from_fn(7, 9, |y, x| ((y * 3 + x) % 4) as u16 * 10);
        let r = g.resize_nearest(13, 5);
        assert!(r.as_slice().iter().all(|v| v % 10 == 0 && *v <= 30));
    }

    #[test]
    fn blur_of_constant_is_constant() {
        let r = Raster::filled(9, 6, 3, 0.25);
        let b = r.gaussian_blur(1.7);
        assert!(b.as_slice().iter().all(|v| (v - 0.25).abs() < 1e-6));
    }

    #[test]
    fn zero_dims_rejected() {
        assert!(Raster::zeros(2, 2, 1).resize(0, 3, ResizeMode::Bilinear).is_err());
    }
}
