//! Dataset ingestion, synthetic data, image output and checkpoints.
//!
//! On-disk layout of a dataset root:
//!
//! ```text
//! <root>/images/<stem>.png      RGB (or grayscale) road image
//! <root>/masks/<stem>.png       label mask, 0 = road, nonzero = pothole
//! <root>/disparity/<stem>.png   optional single-channel disparity image
//! ```
//!
//! 8-bit PNG is the primary format; binary PGM/PPM files are accepted as
//! well. Images are scaled to `[0, 1]` and reflect-padded on the bottom and
//! right to the next multiple of 8; masks are padded with class 0 and the
//! original extent is kept in [`Sample::original`].

mod checkpoint;
mod render;
mod synth;

pub use checkpoint::{
    decode as decode_checkpoint, encode as encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use render::{mask_to_image, overlay, save_mask_png, save_overlay_png};
pub use synth::{synth_generate, Ellipse, SynthScene};

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::{DynamicImage, GenericImageView};

use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::tensor::Tensor;

pub const IMAGE_EXTENSIONS: &[&str] = &["png", "pgm", "ppm", "pnm"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Modality {
    Rgb,
    Disparity,
}

impl Modality {
    pub fn channels(self) -> usize {
        match self {
            Modality::Rgb => 3,
            Modality::Disparity => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::Rgb => "rgb",
            Modality::Disparity => "disparity",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Modality {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rgb" => Ok(Modality::Rgb),
            "disparity" => Ok(Modality::Disparity),
            _ => Err(Error::Argument(format!("unknown modality {s:?}; expected rgb or disparity"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Sample {
    pub id: String,
    /// `C x H' x W'`, values in `[0, 1]`, extents padded to multiples of 8.
    pub image: Tensor,
    pub mask: Mask,
    /// `(height, width)` before padding.
    pub original: (usize, usize),
}

impl Sample {
    /// Builds a sample from unpadded planar data, padding as the loader does.
    pub fn from_planes(id: impl Into<String>, channels: usize, height: usize, width: usize, data: Vec<f64>, mask: Mask) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::Dimension(format!(
                "{channels}x{height}x{width} image needs {} values, got {}",
                channels * height * width,
                data.len()
            )));
        }
        if mask.height() != height || mask.width() != width {
            return Err(Error::Data(format!(
                "mask {}x{} does not match image {height}x{width}",
                mask.height(),
                mask.width()
            )));
        }
        let (ph, pw) = (padded_extent(height), padded_extent(width));
        let mut padded = Vec::with_capacity(channels * ph * pw);
        for c in 0..channels {
            let plane = &data[c * height * width..(c + 1) * height * width];
            for y in 0..ph {
                let sy = reflect_index(y, height);
                for x in 0..pw {
                    padded.push(plane[sy * width + reflect_index(x, width)]);
                }
            }
        }
        let mut padded_mask = Mask::filled(ph, pw, 0);
        for y in 0..height {
            for x in 0..width {
                padded_mask.set(y, x, mask.get(y, x));
            }
        }
        Ok(Self {
            id: id.into(),
            image: Tensor::new(vec![channels, ph, pw], padded),
            mask: padded_mask,
            original: (height, width),
        })
    }

    pub fn channels(&self) -> usize {
        self.image.shape()[0]
    }

    /// Truth mask restricted to the unpadded region.
    pub fn original_mask(&self) -> Result<Mask> {
        self.mask.crop(self.original.0, self.original.1)
    }
}

/// Smallest multiple of 8 that is `>= n`.
pub fn padded_extent(n: usize) -> usize {
    n.div_ceil(8) * 8
}

/// Mirror index without repeating the edge sample (`... 2 1 0 1 2 ...`).
pub fn reflect_index(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let m = i % period;
    if m < n {
        m
    } else {
        period - m
    }
}

fn find_with_stem(dir: &Path, stem: &str) -> Option<PathBuf> {
    IMAGE_EXTENSIONS.iter().map(|e| dir.join(format!("{stem}.{e}"))).find(|p| p.is_file())
}

fn list_stems(dir: &Path) -> Result<Vec<String>> {
    if !dir.is_dir() {
        return Err(Error::Data(format!("missing directory {}", dir.display())));
    }
    let mut stems = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if ext.as_deref().is_some_and(|e| IMAGE_EXTENSIONS.contains(&e)) {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                stems.push(stem.to_string());
            }
        }
    }
    stems.sort();
    stems.dedup();
    Ok(stems)
}

/// Decodes an 8-bit image file; anything else is a format error.
pub fn read_image(path: &Path) -> Result<DynamicImage> {
    let img = image::ImageReader::open(path)?
        .with_guessed_format()?
        .decode()
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    match img {
        DynamicImage::ImageLuma8(_) | DynamicImage::ImageLumaA8(_) | DynamicImage::ImageRgb8(_) | DynamicImage::ImageRgba8(_) => Ok(img),
        other => Err(Error::Format(format!(
            "{}: expected an 8-bit image, found {:?}",
            path.display(),
            other.color()
        ))),
    }
}

/// Planar `[0, 1]` values with the requested channel count.
pub fn image_planes(img: &DynamicImage, channels: usize) -> Vec<f64> {
    let (w, h) = img.dimensions();
    let (w, h) = (w as usize, h as usize);
    let mut out = vec![0.0; channels * h * w];
    if channels == 3 {
        let rgb = img.to_rgb8();
        for (i, px) in rgb.pixels().enumerate() {
            for c in 0..3 {
                out[c * h * w + i] = px.0[c] as f64 / 255.0;
            }
        }
    } else {
        for (i, px) in img.to_luma8().pixels().enumerate() {
            out[i] = px.0[0] as f64 / 255.0;
        }
    }
    out
}

/// Binarised mask: any nonzero colour channel is class 1.
pub fn image_to_mask(img: &DynamicImage) -> Mask {
    let (w, h) = img.dimensions();
    let labels = img.to_rgba8().pixels().map(|p| u8::from(p.0[..3].iter().any(|&v| v != 0))).collect();
    Mask::new(h as usize, w as usize, labels).expect("dimensions from image")
}

/// Loads every `images/<stem>` + `masks/<stem>` pair under `root`.
///
/// RGB samples read `images/`. Disparity samples read `disparity/` when
/// that directory exists and fall back to a grayscale conversion of
/// `images/` otherwise.
pub fn load_dataset(root: &Path, modality: Modality) -> Result<Vec<Sample>> {
    let image_dir = match modality {
        Modality::Disparity if root.join("disparity").is_dir() => root.join("disparity"),
        _ => root.join("images"),
    };
    let mask_dir = root.join("masks");
    let stems = list_stems(&image_dir)?;
    if stems.is_empty() {
        return Err(Error::Data(format!("no images found in {}", image_dir.display())));
    }
    let mut samples = Vec::with_capacity(stems.len());
    for stem in stems {
        let mask_path = find_with_stem(&mask_dir, &stem)
            .ok_or_else(|| Error::Data(format!("image {stem:?} has no mask in {}", mask_dir.display())))?;
        let image_path = find_with_stem(&image_dir, &stem).expect("listed stem");
        samples.push(load_pair(&stem, &image_path, &mask_path, modality)?);
    }
    Ok(samples)
}

fn load_pair(stem: &str, image_path: &Path, mask_path: &Path, modality: Modality) -> Result<Sample> {
    let img = read_image(image_path)?;
    let mask_img = read_image(mask_path)?;
    if img.dimensions() != mask_img.dimensions() {
        return Err(Error::Data(format!(
            "{stem}: image is {:?} but mask is {:?}",
            img.dimensions(),
            mask_img.dimensions()
        )));
    }
    let (w, h) = img.dimensions();
    let c = modality.channels();
    Sample::from_planes(stem, c, h as usize, w as usize, image_planes(&img, c), image_to_mask(&mask_img))
}

/// Loads a single image (no mask) for prediction, padded like a sample.
pub fn load_image(path: &Path, modality: Modality) -> Result<Sample> {
    let img = read_image(path)?;
    let (w, h) = img.dimensions();
    let c = modality.channels();
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
    Sample::from_planes(stem, c, h as usize, w as usize, image_planes(&img, c), Mask::filled(h as usize, w as usize, 0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reflect_index_mirrors_without_edge_repeat() {
        let got: Vec<usize> = (0..8).map(|i| reflect_index(i, 4)).collect();
        assert_eq!(got, vec![0, 1, 2, 3, 2, 1, 0, 1]);
        assert_eq!(reflect_index(5, 1), 0);
    }

    #[test]
    fn padding_arithmetic() {
        assert_eq!(padded_extent(100), 104);
        assert_eq!(padded_extent(64), 64);
        assert_eq!(padded_extent(1), 8);
    }

    #[test]
    fn from_planes_pads_and_records_extent() {
        let data: Vec<f64> = (0..6).map(|v| v as f64 / 10.0).collect();
        let mask = Mask::new(2, 3, vec![1, 0, 1, 0, 1, 0]).unwrap();
        let s = Sample::from_planes("a", 1, 2, 3, data, mask.clone()).unwrap();
        assert_eq!(s.image.shape(), &[1, 8, 8]);
        assert_eq!(s.original, (2, 3));
        assert_eq!(s.original_mask().unwrap(), mask);
        assert_eq!(s.mask.count(1), 3);
        // row 2 reflects row 0, column 3 reflects column 1
        let d = s.image.to_vec();
        assert_eq!(d[2 * 8], d[0]);
        assert_eq!(d[3], d[1]);
    }

    #[test]
    fn modality_parsing() {
        assert_eq!("rgb".parse::<Modality>().unwrap(), Modality::Rgb);
        assert!("depth".parse::<Modality>().is_err());
    }
}
