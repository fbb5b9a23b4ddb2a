use candle_core::Tensor;

use super::manip::{apply_edit_spec, EditSpec};
use crate::error::Result;
use crate::netarch::convert::{
    edges_to_tensor, images_to_tensor, tensor_to_heatmaps, tensor_to_images,
};
use crate::netarch::{generator_forward, Stage, StageWeights};
use crate::raster::{EdgeMap, Heatmap, ImageTensor, RegionMask};

/// Applies `spec` to `edge` and renders the anomaly with the flare
/// generator: `(anomaly image, FH, M)`.
pub fn generate_anomaly(
    flare: &StageWeights,
    edge: &EdgeMap,
    reference: &ImageTensor,
    spec: &EditSpec,
    noise_seed: u64,
) -> Result<(ImageTensor, Heatmap, RegionMask)> {
    flare.expect_stage(Stage::Flare)?;
    let (edited, mask) = apply_edit_spec(edge, spec)?;
    let (_, heat, image) = generator_forward(&edited, reference, Some(noise_seed), flare)?;
    Ok((image, heat, mask))
}

/// Noise-free blaze pass: `(reconstructed normal image, BH)`.
pub fn detect(
    blaze: &StageWeights,
    edge: &EdgeMap,
    image: &ImageTensor,
) -> Result<(ImageTensor, Heatmap)> {
    blaze.expect_stage(Stage::Blaze)?;
    let (_, heat, recon) = generator_forward(edge, image, None, blaze)?;
    Ok((recon, heat))
}

/// Batched [`detect`], `chunk` samples per forward pass.
pub fn detect_batch(
    blaze: &StageWeights,
    edges: &[&EdgeMap],
    images: &[&ImageTensor],
    chunk: usize,
) -> Result<Vec<(ImageTensor, Heatmap)>> {
    blaze.expect_stage(Stage::Blaze)?;
    run_batched(blaze, edges, images, chunk, None)
}

/// Batched generator pass for any stage: `(fused image, heatmap)` per input.
pub fn run_batched(
    weights: &StageWeights,
    edges: &[&EdgeMap],
    images: &[&ImageTensor],
    chunk: usize,
    noise_seed: Option<u64>,
) -> Result<Vec<(ImageTensor, Heatmap)>> {
    if edges.len() != images.len() {
        return Err(crate::Error::Contract(format!(
            "{} edge maps for {} images",
            edges.len(),
            images.len()
        )));
    }
    let g = weights.generator()?;
    let mut out = Vec::with_capacity(images.len());
    for (k, (e, i)) in edges
        .chunks(chunk.max(1))
        .zip(images.chunks(chunk.max(1)))
        .enumerate()
    {
        let et: Tensor = edges_to_tensor(e, weights.dtype(), weights.device())?;
        let it = images_to_tensor(i, weights.dtype(), weights.device())?;
        let o = g.forward(
            &et,
            &it,
            noise_seed.map(|s| super::derive_seed(s, &[k as u64])),
        )?;
        out.extend(
            tensor_to_images(&o.fused)?
                .into_iter()
                .zip(tensor_to_heatmaps(&o.heatmap)?),
        );
    }
    Ok(out)
}
