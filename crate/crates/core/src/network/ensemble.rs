use super::{model_forward, ModelConfig, ModelParameters};
use crate::error::Result;
use crate::image::ImageBuffer;
use crate::tensor::Tensor;

/// Rotation self-ensemble without the final clamp.
///
/// Each quarter-turn rotation of the input goes through the network and is
/// rotated back. The four outputs are summed as `(t0 + t2) + (t1 + t3)` and
/// divided by four; the pairing makes the result exactly equivariant under
/// quarter turns of the input.
pub fn self_ensemble_raw(
    config: &ModelConfig,
    params: &ModelParameters,
    image: &ImageBuffer,
) -> Result<ImageBuffer> {
    let x = image.to_tensor::<f32>();
    let mut outs: Vec<Tensor<f32>> = Vec::with_capacity(4);
    for k in 0..4 {
        let y = model_forward(config, params, &x.rotate90(k))?;
        outs.push(y.rotate90(-k));
    }
    let data: Vec<f32> = (0..x.len())
        .map(|i| {
            let even = outs[0].data()[i] + outs[2].data()[i];
            let odd = outs[1].data()[i] + outs[3].data()[i];
            (even + odd) * 0.25
        })
        .collect();
    ImageBuffer::from_tensor(&Tensor::from_vec(x.shape(), data)?)
}

/// [`self_ensemble_raw`] clamped to the unit range.
pub fn self_ensemble_infer(
    config: &ModelConfig,
    params: &ModelParameters,
    image: &ImageBuffer,
) -> Result<ImageBuffer> {
    Ok(self_ensemble_raw(config, params, image)?.clamped())
}

/// Inference on one image, with or without the self-ensemble, clamped.
pub fn infer(
    config: &ModelConfig,
    params: &ModelParameters,
    image: &ImageBuffer,
    ensemble: bool,
) -> Result<ImageBuffer> {
    if ensemble {
        return self_ensemble_infer(config, params, image);
    }
    let y = model_forward(config, params, &image.to_tensor::<f32>())?;
    Ok(ImageBuffer::from_tensor(&y)?.clamped())
}
