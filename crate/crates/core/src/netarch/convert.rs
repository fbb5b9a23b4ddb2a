//! Raster <-> NCHW tensor conversion.

use candle_core::{DType, Device, Tensor};

use crate::error::{Error, Result};
use crate::raster::{EdgeMap, Heatmap, ImageTensor, Raster};

pub fn rasters_to_tensor(rasters: &[&Raster], dtype: DType, device: &Device) -> Result<Tensor> {
    let first = rasters
        .first()
        .ok_or_else(|| Error::Contract("empty batch".into()))?;
    let (h, w, c) = (first.height(), first.width(), first.channels());
    let mut buf = Vec::with_capacity(rasters.len() * h * w * c);
    for r in rasters {
        if !r.same_shape(first) {
            return Err(Error::Contract("batch members differ in shape".into()));
        }
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    buf.push(r.get(y, x, ch));
                }
            }
        }
    }
    Ok(Tensor::from_vec(buf, (rasters.len(), c, h, w), device)?.to_dtype(dtype)?)
}

pub fn tensor_to_rasters(t: &Tensor) -> Result<Vec<Raster>> {
    let (n, c, h, w) = t.dims4()?;
    let flat = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    (0..n)
        .map(|i| {
            let base = i * c * h * w;
            Ok(Raster::from_fn(h, w, c, |y, x, ch| {
                flat[base + (ch * h + y) * w + x]
            }))
        })
        .collect()
}

pub fn images_to_tensor(images: &[&ImageTensor], dtype: DType, device: &Device) -> Result<Tensor> {
    let r: Vec<&Raster> = images.iter().map(|i| i.raster()).collect();
    rasters_to_tensor(&r, dtype, device)
}

pub fn edges_to_tensor(edges: &[&EdgeMap], dtype: DType, device: &Device) -> Result<Tensor> {
    let r: Vec<&Raster> = edges.iter().map(|i| i.raster()).collect();
    rasters_to_tensor(&r, dtype, device)
}

pub fn heatmaps_to_tensor(maps: &[&Heatmap], dtype: DType, device: &Device) -> Result<Tensor> {
    let r: Vec<&Raster> = maps.iter().map(|i| i.raster()).collect();
    rasters_to_tensor(&r, dtype, device)
}

pub fn tensor_to_images(t: &Tensor) -> Result<Vec<ImageTensor>> {
    tensor_to_rasters(t)?
        .into_iter()
        .map(ImageTensor::from_raster)
        .collect()
}

pub fn tensor_to_heatmaps(t: &Tensor) -> Result<Vec<Heatmap>> {
    tensor_to_rasters(t)?
        .into_iter()
        .map(Heatmap::from_raster)
        .collect()
}
