//! Pixel containers shared by every stage.
//!
//! All float rasters are stored row-major in HWC order. [`ImageTensor`] is
//! always three channels, [`EdgeMap`] and [`Heatmap`] are single channel,
//! and [`RegionMask`] holds strict 0/1 bytes.

use std::path::Path;

use image::{GrayImage, Luma, Rgb, RgbImage};

use crate::error::{Error, Result};

/// Dense HWC float raster.
#[derive(Clone, Debug, PartialEq)]
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
        Raster {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    pub fn from_vec(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::Contract(format!(
                "raster buffer has {} values, expected {height}x{width}x{channels}",
                data.len()
            )));
        }
        Ok(Raster {
            height,
            width,
            channels,
            data,
        })
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
        Raster {
            height,
            width,
            channels,
            data,
        }
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn index(&self, y: usize, x: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[self.index(y, x, c)]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f32) {
        let i = self.index(y, x, c);
        self.data[i] = v;
    }

    pub fn same_shape(&self, other: &Raster) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }

    pub fn clamp01(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    /// Bilinear sample at continuous pixel-center coordinates, clamping to the border.
    pub fn sample_clamped(&self, y: f32, x: f32, c: usize) -> f32 {
        let h = self.height as isize;
        let w = self.width as isize;
        let y0f = y.floor();
        let x0f = x.floor();
        let fy = y - y0f;
        let fx = x - x0f;
        let y0 = y0f as isize;
        let x0 = x0f as isize;
        let at = |yy: isize, xx: isize| {
            let yy = yy.clamp(0, h - 1) as usize;
            let xx = xx.clamp(0, w - 1) as usize;
            self.get(yy, xx, c)
        };
        let top = at(y0, x0) * (1.0 - fx) + at(y0, x0 + 1) * fx;
        let bottom = at(y0 + 1, x0) * (1.0 - fx) + at(y0 + 1, x0 + 1) * fx;
        top * (1.0 - fy) + bottom * fy
    }

    /// Bilinear sample where taps outside the raster read `pad`.
    pub fn sample_padded(&self, y: f32, x: f32, c: usize, pad: f32) -> f32 {
        let y0f = y.floor();
        let x0f = x.floor();
        let fy = y - y0f;
        let fx = x - x0f;
        let y0 = y0f as isize;
        let x0 = x0f as isize;
        let at = |yy: isize, xx: isize| {
            if yy < 0 || xx < 0 || yy >= self.height as isize || xx >= self.width as isize {
                pad
            } else {
                self.get(yy as usize, xx as usize, c)
            }
        };
        let top = at(y0, x0) * (1.0 - fx) + at(y0, x0 + 1) * fx;
        let bottom = at(y0 + 1, x0) * (1.0 - fx) + at(y0 + 1, x0 + 1) * fx;
        top * (1.0 - fy) + bottom * fy
    }

    /// Nearest sample where taps outside the raster read `pad`.
    pub fn sample_nearest_padded(&self, y: f32, x: f32, c: usize, pad: f32) -> f32 {
        let yy = y.round();
        let xx = x.round();
        if yy < 0.0 || xx < 0.0 || yy >= self.height as f32 || xx >= self.width as f32 {
            pad
        } else {
            self.get(yy as usize, xx as usize, c)
        }
    }

    /// Half-pixel-centered bilinear resize.
    pub fn resize_bilinear(&self, height: usize, width: usize) -> Raster {
        if height == self.height && width == self.width {
            return self.clone();
        }
        let sy = self.height as f32 / height as f32;
        let sx = self.width as f32 / width as f32;
        Raster::from_fn(height, width, self.channels, |y, x, c| {
            let src_y = (y as f32 + 0.5) * sy - 0.5;
            let src_x = (x as f32 + 0.5) * sx - 0.5;
            self.sample_clamped(src_y, src_x, c)
        })
    }

    pub fn resize_nearest(&self, height: usize, width: usize) -> Raster {
        if height == self.height && width == self.width {
            return self.clone();
        }
        Raster::from_fn(height, width, self.channels, |y, x, c| {
            let sy = (((y as f64 + 0.5) * self.height as f64 / height as f64) as usize)
                .min(self.height - 1);
            let sx = (((x as f64 + 0.5) * self.width as f64 / width as f64) as usize)
                .min(self.width - 1);
            self.get(sy, sx, c)
        })
    }

    pub fn flip_left_right(&self) -> Raster {
        Raster::from_fn(self.height, self.width, self.channels, |y, x, c| {
            self.get(y, self.width - 1 - x, c)
        })
    }

    pub fn flip_top_bottom(&self) -> Raster {
        Raster::from_fn(self.height, self.width, self.channels, |y, x, c| {
            self.get(self.height - 1 - y, x, c)
        })
    }

    /// Single channel `c` as its own raster.
    pub fn channel(&self, c: usize) -> Raster {
        Raster::from_fn(self.height, self.width, 1, |y, x, _| self.get(y, x, c))
    }
}

macro_rules! float_plane {
    ($(#[$meta:meta])* $name:ident, $channels:expr) => {
        $(#[$meta])*
        #[derive(Clone, Debug, PartialEq)]
        pub struct $name(Raster);

        impl $name {
            pub const CHANNELS: usize = $channels;

            pub fn zeros(height: usize, width: usize) -> Self {
                $name(Raster::zeros(height, width, $channels))
            }

            pub fn filled(height: usize, width: usize, value: f32) -> Self {
                $name(Raster::filled(height, width, $channels, value))
            }

            /// Wraps a raster, clamping every value into `[0, 1]`.
            pub fn from_raster(mut raster: Raster) -> Result<Self> {
                if raster.channels() != $channels {
                    return Err(Error::Contract(format!(
                        "{} needs {} channel(s), got {}",
                        stringify!($name),
                        $channels,
                        raster.channels()
                    )));
                }
                raster.clamp01();
                Ok($name(raster))
            }

            pub fn from_fn(
                height: usize,
                width: usize,
                f: impl FnMut(usize, usize, usize) -> f32,
            ) -> Self {
                let mut r = Raster::from_fn(height, width, $channels, f);
                r.clamp01();
                $name(r)
            }

            #[inline]
            pub fn raster(&self) -> &Raster {
                &self.0
            }

            pub fn into_raster(self) -> Raster {
                self.0
            }

            #[inline]
            pub fn height(&self) -> usize {
                self.0.height()
            }

            #[inline]
            pub fn width(&self) -> usize {
                self.0.width()
            }

            #[inline]
            pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
                self.0.get(y, x, c)
            }

            #[inline]
            pub fn data(&self) -> &[f32] {
                self.0.data()
            }

            pub fn mean(&self) -> f64 {
                self.0.mean()
            }

            pub fn dims(&self) -> (usize, usize) {
                (self.0.height(), self.0.width())
            }
        }
    };
}

float_plane!(
    /// RGB image with values in `[0, 1]`.
    ImageTensor,
    3
);
float_plane!(
    /// Single-channel edge strength aligned with an image.
    EdgeMap,
    1
);
float_plane!(
    /// Per-pixel anomaly weight in `[0, 1]`.
    Heatmap,
    1
);

impl ImageTensor {
    pub fn from_rgb(img: &RgbImage) -> Self {
        let (w, h) = img.dimensions();
        ImageTensor::from_fn(h as usize, w as usize, |y, x, c| {
            img.get_pixel(x as u32, y as u32)[c] as f32 / 255.0
        })
    }

    pub fn to_rgb(&self) -> RgbImage {
        RgbImage::from_fn(self.width() as u32, self.height() as u32, |x, y| {
            let p = |c| to_u8(self.get(y as usize, x as usize, c));
            Rgb([p(0), p(1), p(2)])
        })
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|source| Error::Decode {
            path: path.to_path_buf(),
            source,
        })?;
        Ok(Self::from_rgb(&img.to_rgb8()))
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        save_image(path, |p| self.to_rgb().save(p))
    }

    pub fn resize(&self, height: usize, width: usize) -> Self {
        ImageTensor(self.0.resize_bilinear(height, width))
    }

    /// Rec. 601 luma.
    pub fn luma(&self) -> Raster {
        Raster::from_fn(self.height(), self.width(), 1, |y, x, _| {
            0.299 * self.get(y, x, 0) + 0.587 * self.get(y, x, 1) + 0.114 * self.get(y, x, 2)
        })
    }
}

macro_rules! gray_io {
    ($name:ident) => {
        impl $name {
            pub fn from_gray(img: &GrayImage) -> Self {
                let (w, h) = img.dimensions();
                $name::from_fn(h as usize, w as usize, |y, x, _| {
                    img.get_pixel(x as u32, y as u32)[0] as f32 / 255.0
                })
            }

            pub fn to_gray(&self) -> GrayImage {
                GrayImage::from_fn(self.width() as u32, self.height() as u32, |x, y| {
                    Luma([to_u8(self.get(y as usize, x as usize, 0))])
                })
            }

            pub fn load_png(path: &Path) -> Result<Self> {
                let img = image::open(path).map_err(|source| Error::Decode {
                    path: path.to_path_buf(),
                    source,
                })?;
                Ok(Self::from_gray(&img.to_luma8()))
            }

            pub fn save_png(&self, path: &Path) -> Result<()> {
                save_image(path, |p| self.to_gray().save(p))
            }
        }
    };
}

gray_io!(EdgeMap);
gray_io!(Heatmap);

impl EdgeMap {
    pub fn resize_nearest(&self, height: usize, width: usize) -> Self {
        EdgeMap(self.0.resize_nearest(height, width))
    }
}

/// Strictly binary mask; the edited region that supervises the heatmap.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct RegionMask {
    height: usize,
    width: usize,
    bits: Vec<u8>,
}

impl RegionMask {
    pub fn empty(height: usize, width: usize) -> Self {
        RegionMask {
            height,
            width,
            bits: vec![0; height * width],
        }
    }

    pub fn full(height: usize, width: usize) -> Self {
        RegionMask {
            height,
            width,
            bits: vec![1; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                bits.push(f(y, x) as u8);
            }
        }
        RegionMask {
            height,
            width,
            bits,
        }
    }

    pub fn from_bits(height: usize, width: usize, bits: Vec<u8>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::Contract(format!(
                "mask buffer has {} values, expected {height}x{width}",
                bits.len()
            )));
        }
        if bits.iter().any(|&b| b > 1) {
            return Err(Error::Contract("mask values must be 0 or 1".into()));
        }
        Ok(RegionMask {
            height,
            width,
            bits,
        })
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    #[inline]
    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    #[inline]
    pub fn contains(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x] != 0
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, on: bool) {
        self.bits[y * self.width + x] = on as u8;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().map(|&b| b as usize).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.iter().all(|&b| b == 0)
    }

    pub fn area_fraction(&self) -> f64 {
        let n = self.height * self.width;
        if n == 0 {
            return 0.0;
        }
        self.count() as f64 / n as f64
    }

    pub fn union(&self, other: &RegionMask) -> RegionMask {
        debug_assert_eq!(self.dims(), other.dims());
        RegionMask {
            height: self.height,
            width: self.width,
            bits: self
                .bits
                .iter()
                .zip(&other.bits)
                .map(|(&a, &b)| a | b)
                .collect(),
        }
    }

    pub fn intersection_count(&self, other: &RegionMask) -> usize {
        self.bits
            .iter()
            .zip(&other.bits)
            .filter(|(&a, &b)| a & b != 0)
            .count()
    }

    pub fn iou(&self, other: &RegionMask) -> f64 {
        let inter = self.intersection_count(other);
        let uni = self.count() + other.count() - inter;
        if uni == 0 {
            0.0
        } else {
            inter as f64 / uni as f64
        }
    }

    /// Inclusive bounding box `(y0, x0, y1, x1)`, `None` for an empty mask.
    pub fn bbox(&self) -> Option<(usize, usize, usize, usize)> {
        let mut bb: Option<(usize, usize, usize, usize)> = None;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.contains(y, x) {
                    bb = Some(match bb {
                        None => (y, x, y, x),
                        Some((y0, x0, y1, x1)) => (y0.min(y), x0.min(x), y1.max(y), x1.max(x)),
                    });
                }
            }
        }
        bb
    }

    pub fn centroid(&self) -> Option<(f64, f64)> {
        let mut sy = 0.0;
        let mut sx = 0.0;
        let mut n = 0usize;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.contains(y, x) {
                    sy += y as f64;
                    sx += x as f64;
                    n += 1;
                }
            }
        }
        (n > 0).then(|| (sy / n as f64, sx / n as f64))
    }

    pub fn resize_nearest(&self, height: usize, width: usize) -> RegionMask {
        if height == self.height && width == self.width {
            return self.clone();
        }
        RegionMask::from_fn(height, width, |y, x| {
            let sy = (((y as f64 + 0.5) * self.height as f64 / height as f64) as usize)
                .min(self.height - 1);
            let sx = (((x as f64 + 0.5) * self.width as f64 / width as f64) as usize)
                .min(self.width - 1);
            self.contains(sy, sx)
        })
    }

    /// Mask as a 0/1 float plane, the target of the heatmap loss.
    pub fn to_heatmap(&self) -> Heatmap {
        Heatmap::from_fn(self.height, self.width, |y, x, _| {
            self.contains(y, x) as u8 as f32
        })
    }

    pub fn to_gray(&self) -> GrayImage {
        GrayImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            Luma([if self.contains(y as usize, x as usize) {
                255
            } else {
                0
            }])
        })
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        save_image(path, |p| self.to_gray().save(p))
    }
}

#[inline]
fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn save_image(path: &Path, save: impl FnOnce(&Path) -> image::ImageResult<()>) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    save(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Decode {
            path: path.to_path_buf(),
            source: other,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nearest_resize_keeps_mask_binary() {
        let m = RegionMask::from_fn(10, 10, |y, x| (y + x) % 3 == 0);
        let r = m.resize_nearest(7, 13);
        assert_eq!(r.dims(), (7, 13));
        assert!(r.bits().iter().all(|&b| b <= 1));
    }

    #[test]
    fn bilinear_resize_of_constant_is_constant() {
        let r = Raster::filled(8, 8, 3, 0.25).resize_bilinear(5, 11);
        assert!(r.data().iter().all(|&v| (v - 0.25).abs() < 1e-6));
    }

    #[test]
    fn iou_and_bbox() {
        let a = RegionMask::from_fn(8, 8, |y, x| y < 4 && x < 4);
        let b = RegionMask::from_fn(8, 8, |y, x| y < 4 && x < 2);
        assert!((a.iou(&b) - 0.5).abs() < 1e-12);
        assert_eq!(a.bbox(), Some((0, 0, 3, 3)));
        assert_eq!(RegionMask::empty(4, 4).bbox(), None);
        assert!((a.area_fraction() - 0.25).abs() < 1e-12);
    }

    #[test]
    fn from_raster_clamps() {
        let r = Raster::from_vec(1, 2, 1, vec![-0.5, 1.5]).unwrap();
        let e = EdgeMap::from_raster(r).unwrap();
        assert_eq!(e.data(), &[0.0, 1.0]);
        assert!(ImageTensor::from_raster(Raster::zeros(2, 2, 1)).is_err());
    }

    #[test]
    fn png_roundtrip_is_quantized_identity() {
        let dir = tempfile::tempdir().unwrap();
        let img = ImageTensor::from_fn(5, 6, |y, x, c| ((y * 6 + x) * 3 + c) as f32 / 255.0);
        let p = dir.path().join("a.png");
        img.save_png(&p).unwrap();
        let back = ImageTensor::load_png(&p).unwrap();
        assert_eq!(img, back);
    }
}
