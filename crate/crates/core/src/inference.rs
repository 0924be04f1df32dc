//! Prediction and dataset evaluation with a trained model.

use crate::data::{normalize, Mask, Normalization, Sample};
use crate::error::Result;
use crate::keyval::Document;
use crate::metrics::ConfusionMatrix;
use crate::model::{Checkpoint, Model};
use crate::tensor::{Float, Tensor};
use crate::training::config::normalization_from_document;

/// Normalization stored with a checkpoint, or the default when absent.
pub fn checkpoint_normalization(ck: &Checkpoint) -> Result<Normalization> {
    let mut doc = Document::parse(&ck.config_text)?;
    normalization_from_document(&mut doc)
}

/// Per-pixel argmax over classes of `(1, C, H, W)` logits; ties go to the
/// lower class id.
pub fn argmax_mask<T: Float>(logits: &Tensor<T>) -> Mask {
    let [_, c, h, w] = logits.dims();
    let plane = h * w;
    let x = logits.item(0);
    let data = (0..plane)
        .map(|p| {
            let mut best = 0;
            for j in 1..c {
                if x[j * plane + p] > x[best * plane + p] {
                    best = j;
                }
            }
            best as u8
        })
        .collect();
    Mask {
        height: h,
        width: w,
        data,
    }
}

/// `image` is `(1, 3, H, W)` in `[0, 1]`.
pub fn predict_mask<T: Float>(model: &Model<T>, image: &Tensor<f32>, norm: &Normalization) -> Result<Mask> {
    let x = normalize(image, norm).cast::<T>();
    Ok(argmax_mask(&model.infer(&x)?))
}

/// One confusion matrix accumulated over every pixel of every sample.
pub fn evaluate<T: Float>(model: &Model<T>, samples: &[Sample], norm: &Normalization) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::default();
    for s in samples {
        let pred = predict_mask(model, &s.image, norm)?;
        cm.update(&pred.data, &s.mask.data)?;
    }
    Ok(cm)
}

/// Crack pixels blended halfway towards pure red.
pub fn overlay(image: &Tensor<f32>, mask: &Mask) -> Tensor<f32> {
    const RED: [f32; 3] = [1.0, 0.0, 0.0];
    Tensor::from_fn(image.dims(), |[n, c, y, x]| {
        let v = image.get([n, c, y, x]);
        if mask.get(y, x) == 1 {
            0.5 * v + 0.5 * RED[c]
        } else {
            v
        }
    })
}
