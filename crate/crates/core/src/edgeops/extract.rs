use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{EdgeMap, ImageTensor, Raster};

/// Edge extractor selection. `sobel` is the only built-in extractor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EdgeExtractorConfig {
    pub name: String,
    /// Hysteresis thresholds on the normalized gradient magnitude.
    pub low_threshold: f32,
    pub high_threshold: f32,
    pub non_max_suppression: bool,
}

impl Default for EdgeExtractorConfig {
    fn default() -> Self {
        EdgeExtractorConfig {
            name: "sobel".into(),
            low_threshold: 0.08,
            high_threshold: 0.16,
            non_max_suppression: true,
        }
    }
}

/// Anything that turns an image into an aligned edge map.
pub trait EdgeExtractor {
    fn extract(&self, image: &ImageTensor) -> EdgeMap;
}

/// Sobel gradient magnitude, optional non-maximum suppression, hysteresis.
#[derive(Clone, Debug)]
pub struct SobelHysteresis {
    pub low: f32,
    pub high: f32,
    pub nms: bool,
}

pub fn build_extractor(
    config: &EdgeExtractorConfig,
) -> Result<Box<dyn EdgeExtractor + Send + Sync>> {
    match config.name.as_str() {
        "sobel" => {
            if !(config.low_threshold <= config.high_threshold) {
                return Err(Error::Config(
                    "low edge threshold exceeds high threshold".into(),
                ));
            }
            Ok(Box::new(SobelHysteresis {
                low: config.low_threshold,
                high: config.high_threshold,
                nms: config.non_max_suppression,
            }))
        }
        other => Err(Error::Config(format!("unknown edge extractor {other:?}"))),
    }
}

pub fn extract_edges(image: &ImageTensor, config: &EdgeExtractorConfig) -> Result<EdgeMap> {
    Ok(build_extractor(config)?.extract(image))
}

/// Sobel responses `(gy, gx)` of a single-channel raster with clamped borders,
/// scaled so a unit step yields magnitude 1.
pub fn sobel(r: &Raster) -> (Raster, Raster) {
    let (h, w) = (r.height() as isize, r.width() as isize);
    let at = |y: isize, x: isize| r.get(y.clamp(0, h - 1) as usize, x.clamp(0, w - 1) as usize, 0);
    let gx = Raster::from_fn(r.height(), r.width(), 1, |y, x, _| {
        let (y, x) = (y as isize, x as isize);
        (at(y - 1, x + 1) + 2.0 * at(y, x + 1) + at(y + 1, x + 1)
            - at(y - 1, x - 1)
            - 2.0 * at(y, x - 1)
            - at(y + 1, x - 1))
            / 4.0
    });
    let gy = Raster::from_fn(r.height(), r.width(), 1, |y, x, _| {
        let (y, x) = (y as isize, x as isize);
        (at(y + 1, x - 1) + 2.0 * at(y + 1, x) + at(y + 1, x + 1)
            - at(y - 1, x - 1)
            - 2.0 * at(y - 1, x)
            - at(y - 1, x + 1))
            / 4.0
    });
    (gy, gx)
}

impl EdgeExtractor for SobelHysteresis {
    fn extract(&self, image: &ImageTensor) -> EdgeMap {
        let (h, w) = image.dims();
        // Max over channels picks up chroma-only boundaries that luma misses.
        let mut mag = Raster::zeros(h, w, 1);
        let mut dir = Raster::zeros(h, w, 1);
        for c in 0..3 {
            let (gy, gx) = sobel(&image.raster().channel(c));
            for y in 0..h {
                for x in 0..w {
                    let m = gy.get(y, x, 0).hypot(gx.get(y, x, 0));
                    if m > mag.get(y, x, 0) {
                        mag.set(y, x, 0, m);
                        dir.set(y, x, 0, gy.get(y, x, 0).atan2(gx.get(y, x, 0)));
                    }
                }
            }
        }
        let thin = if self.nms {
            non_max_suppress(&mag, &dir)
        } else {
            mag
        };
        hysteresis(&thin, self.low, self.high)
    }
}

fn non_max_suppress(mag: &Raster, dir: &Raster) -> Raster {
    let (h, w) = (mag.height() as isize, mag.width() as isize);
    let at = |y: isize, x: isize| {
        if y < 0 || x < 0 || y >= h || x >= w {
            0.0
        } else {
            mag.get(y as usize, x as usize, 0)
        }
    };
    Raster::from_fn(mag.height(), mag.width(), 1, |y, x, _| {
        let m = mag.get(y, x, 0);
        if m == 0.0 {
            return 0.0;
        }
        let mut angle = dir.get(y, x, 0).to_degrees();
        if angle < 0.0 {
            angle += 180.0;
        }
        let (dy, dx) = if !(22.5..157.5).contains(&angle) {
            (0, 1)
        } else if angle < 67.5 {
            (1, 1)
        } else if angle < 112.5 {
            (1, 0)
        } else {
            (1, -1)
        };
        let (yi, xi) = (y as isize, x as isize);
        if m >= at(yi + dy, xi + dx) && m >= at(yi - dy, xi - dx) {
            m
        } else {
            0.0
        }
    })
}

fn hysteresis(mag: &Raster, low: f32, high: f32) -> EdgeMap {
    let (h, w) = (mag.height(), mag.width());
    let mut out = vec![0u8; h * w];
    let mut stack = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if mag.get(y, x, 0) >= high && out[y * w + x] == 0 {
                out[y * w + x] = 1;
                stack.push((y, x));
                while let Some((cy, cx)) = stack.pop() {
                    for ny in cy.saturating_sub(1)..=(cy + 1).min(h - 1) {
                        for nx in cx.saturating_sub(1)..=(cx + 1).min(w - 1) {
                            if out[ny * w + nx] == 0 && mag.get(ny, nx, 0) >= low {
                                out[ny * w + nx] = 1;
                                stack.push((ny, nx));
                            }
                        }
                    }
                }
            }
        }
    }
    EdgeMap::from_fn(h, w, |y, x, _| out[y * w + x] as f32)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_image_has_no_edges() {
        let img = ImageTensor::filled(16, 16, 0.7);
        let e = extract_edges(&img, &EdgeExtractorConfig::default()).unwrap();
        assert!(e.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn vertical_step_edges_confined_to_step_columns() {
        let img = ImageTensor::from_fn(32, 32, |_, x, _| if x >= 16 { 1.0 } else { 0.0 });
        for nms in [true, false] {
            let cfg = EdgeExtractorConfig {
                non_max_suppression: nms,
                ..Default::default()
            };
            let e = extract_edges(&img, &cfg).unwrap();
            let mut cols = std::collections::BTreeSet::new();
            for y in 0..32 {
                for x in 0..32 {
                    if e.get(y, x, 0) > 0.0 {
                        cols.insert(x);
                    }
                }
            }
            assert!(!cols.is_empty());
            assert!(cols.iter().all(|c| (15..=17).contains(c)), "{cols:?}");
            // every row carries the step
            for y in 0..32 {
                assert!((15..=17).any(|x| e.get(y, x, 0) > 0.0));
            }
        }
    }

    #[test]
    fn deterministic_and_binary() {
        let img = ImageTensor::from_fn(20, 20, |y, x, c| ((y * 7 + x * 3 + c) % 5) as f32 / 4.0);
        let cfg = EdgeExtractorConfig::default();
        let a = extract_edges(&img, &cfg).unwrap();
        let b = extract_edges(&img, &cfg).unwrap();
        assert_eq!(a, b);
        assert!(a.data().iter().all(|&v| v == 0.0 || v == 1.0));
    }

    #[test]
    fn unknown_extractor_is_config_error() {
        let cfg = EdgeExtractorConfig {
            name: "pidinet".into(),
            ..Default::default()
        };
        let img = ImageTensor::zeros(4, 4);
        assert!(matches!(extract_edges(&img, &cfg), Err(Error::Config(_))));
    }
}
