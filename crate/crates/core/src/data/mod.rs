//! Samples, on-disk datasets, the synthetic crack generator and the
//! augmentation pipeline.

pub mod augment;
pub mod io;
pub mod synthetic;

pub use augment::{augment, hflip, denormalize, normalize, AugmentParams, Normalization};
pub use io::{
    decode_image, decode_mask, encode_image, encode_mask, load_dataset, read_image, read_mask, write_image,
    write_mask, Dataset,
};
pub use synthetic::{gen_synthetic, synth_sample, Manifest};

use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

/// `(1, 1, H, W)` map of class ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(shape_err!("mask of {height}x{width} needs {} ids, got {}", height * width, data.len()));
        }
        Ok(Mask { height, width, data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Mask {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn crack_fraction(&self) -> f64 {
        self.data.iter().filter(|&&v| v == 1).count() as f64 / self.data.len().max(1) as f64
    }
}

/// An RGB image in `[0, 1]` (or normalized, after augmentation) and its mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `(1, 3, H, W)`.
    pub image: Tensor<f32>,
    pub mask: Mask,
}

impl Sample {
    pub fn new(image: Tensor<f32>, mask: Mask) -> Result<Self> {
        let [n, c, h, w] = image.dims();
        if n != 1 || c != 3 || (h, w) != (mask.height, mask.width) {
            return Err(shape_err!(
                "image {n}x{c}x{h}x{w} does not pair with a {}x{} mask",
                mask.height,
                mask.width
            ));
        }
        Ok(Sample { image, mask })
    }

    pub fn height(&self) -> usize {
        self.mask.height
    }

    pub fn width(&self) -> usize {
        self.mask.width
    }
}
