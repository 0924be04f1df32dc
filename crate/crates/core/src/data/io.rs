//! PNG coding and the `image_XXXX.png` / `mask_XXXX.png` directory layout.

use std::collections::BTreeMap;
use std::fs;
use std::io::Cursor;
use std::path::{Path, PathBuf};

use image::codecs::png::PngEncoder;
use image::{DynamicImage, ExtendedColorType, ImageEncoder, ImageFormat, ImageReader, Limits};

use super::{Mask, Sample};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAX_SIDE: u32 = 16384;

fn decode_png(bytes: &[u8]) -> std::result::Result<DynamicImage, String> {
    let mut reader = ImageReader::with_format(Cursor::new(bytes), ImageFormat::Png);
    let mut limits = Limits::default();
    limits.max_image_width = Some(MAX_SIDE);
    limits.max_image_height = Some(MAX_SIDE);
    limits.max_alloc = Some(1 << 30);
    reader.limits(limits);
    reader.decode().map_err(|e| e.to_string())
}

fn encode_png(width: usize, height: usize, buf: &[u8], color: ExtendedColorType) -> Vec<u8> {
    let mut out = Vec::new();
    PngEncoder::new(&mut out)
        .write_image(buf, width as u32, height as u32, color)
        .expect("in-memory PNG encoding of a well-sized buffer");
    out
}

/// Decodes any PNG into a `(1, 3, H, W)` tensor in `[0, 1]`.
pub fn decode_image(bytes: &[u8]) -> std::result::Result<Tensor<f32>, String> {
    let rgb = decode_png(bytes)?.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let raw = rgb.as_raw();
    Ok(Tensor::from_fn([1, 3, h, w], |[_, c, y, x]| raw[(y * w + x) * 3 + c] as f32 / 255.0))
}

/// Quantizes a `(1, 3, H, W)` tensor in `[0, 1]` to 8-bit RGB PNG bytes.
pub fn encode_image(image: &Tensor<f32>) -> Vec<u8> {
    let [_, _, h, w] = image.dims();
    let mut buf = vec![0u8; h * w * 3];
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                buf[(y * w + x) * 3 + c] = (image.get([0, c, y, x]).clamp(0.0, 1.0) * 255.0).round() as u8;
            }
        }
    }
    encode_png(w, h, &buf, ExtendedColorType::Rgb8)
}

/// Decodes an 8-bit grayscale PNG with values 0/255 into class ids 0/1.
pub fn decode_mask(bytes: &[u8]) -> std::result::Result<Mask, String> {
    let img = match decode_png(bytes)? {
        DynamicImage::ImageLuma8(m) => m,
        other => return Err(format!("mask must be 8-bit grayscale, found {:?}", other.color())),
    };
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img
        .into_raw()
        .into_iter()
        .map(|v| match v {
            0 => Ok(0),
            255 => Ok(1),
            other => Err(format!("mask value {other} is neither 0 nor 255")),
        })
        .collect::<std::result::Result<Vec<u8>, String>>()?;
    Ok(Mask {
        height: h,
        width: w,
        data,
    })
}

pub fn encode_mask(mask: &Mask) -> Vec<u8> {
    let buf: Vec<u8> = mask.data.iter().map(|&v| if v == 0 { 0 } else { 255 }).collect();
    encode_png(mask.width, mask.height, &buf, ExtendedColorType::L8)
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads an image file; undecodable content is reported as an I/O error.
pub fn read_image(path: &Path) -> Result<Tensor<f32>> {
    decode_image(&read_bytes(path)?)
        .map_err(|msg| Error::io(path, std::io::Error::new(std::io::ErrorKind::InvalidData, msg)))
}

pub fn write_image(path: &Path, image: &Tensor<f32>) -> Result<()> {
    write_bytes(path, &encode_image(image))
}

pub fn read_mask(path: &Path) -> Result<Mask> {
    decode_mask(&read_bytes(path)?).map_err(|msg| Error::Dataset(format!("{}: {msg}", path.display())))
}

pub fn write_mask(path: &Path, mask: &Mask) -> Result<()> {
    write_bytes(path, &encode_mask(mask))
}

/// Paired files of a dataset directory, ordered by index.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub dir: PathBuf,
    pub entries: Vec<(u32, PathBuf, PathBuf)>,
}

fn parse_index(name: &str, prefix: &str) -> Option<u32> {
    let digits = name.strip_prefix(prefix)?.strip_suffix(".png")?;
    if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    digits.parse().ok()
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let mut images = BTreeMap::new();
    let mut masks = BTreeMap::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if let Some(i) = parse_index(&name, "image_") {
            images.insert(i, entry.path());
        } else if let Some(i) = parse_index(&name, "mask_") {
            masks.insert(i, entry.path());
        }
    }
    let unmatched: Vec<String> = images
        .keys()
        .filter(|i| !masks.contains_key(i))
        .map(|i| format!("{i} (image without mask)"))
        .chain(masks.keys().filter(|i| !images.contains_key(i)).map(|i| format!("{i} (mask without image)")))
        .collect();
    if !unmatched.is_empty() {
        return Err(Error::Dataset(format!(
            "{}: unmatched pairs at index {}",
            dir.display(),
            unmatched.join(", ")
        )));
    }
    if images.is_empty() {
        return Err(Error::Dataset(format!("{}: no image_XXXX.png / mask_XXXX.png pairs", dir.display())));
    }
    let entries = images
        .into_iter()
        .map(|(i, img)| {
            let mask = masks.remove(&i).expect("pairs checked");
            (i, img, mask)
        })
        .collect();
    Ok(Dataset {
        dir: dir.to_path_buf(),
        entries,
    })
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, i: usize) -> Result<Sample> {
        let (_, img_path, mask_path) = &self.entries[i];
        let image = decode_image(&read_bytes(img_path)?)
            .map_err(|msg| Error::Dataset(format!("{}: {msg}", img_path.display())))?;
        let mask = read_mask(mask_path)?;
        Sample::new(image, mask).map_err(|e| Error::Dataset(format!("{}: {e}", mask_path.display())))
    }

    pub fn load_all(&self) -> Result<Vec<Sample>> {
        (0..self.len()).map(|i| self.get(i)).collect()
    }
}
