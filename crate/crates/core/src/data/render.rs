//! Mask and overlay images.

use std::path::Path;

use image::{GrayImage, Luma, Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::tensor::Tensor;

const TINT: [u8; 3] = [255, 0, 0];

/// Class `c` of `k` maps to gray level `255 * c / (k - 1)`.
pub fn mask_to_image(mask: &Mask, num_classes: usize) -> GrayImage {
    let top = num_classes.max(2) as u32 - 1;
    GrayImage::from_fn(mask.width() as u32, mask.height() as u32, |x, y| {
        let c = mask.get(y as usize, x as usize) as u32;
        Luma([(255 * c.min(top) / top) as u8])
    })
}

/// Input image with every nonzero mask pixel blended 50/50 with pure red.
///
/// `image` is `C x H' x W'` in `[0, 1]` with `C` 1 or 3; only the top-left
/// region covered by `mask` is rendered.
pub fn overlay(image: &Tensor, mask: &Mask) -> Result<RgbImage> {
    let s = image.shape();
    if s.len() != 3 || !(s[0] == 1 || s[0] == 3) {
        return Err(Error::Dimension(format!("overlay needs a 1- or 3-channel CxHxW image, got {s:?}")));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    if mask.height() > h || mask.width() > w {
        return Err(Error::Dimension(format!(
            "mask {}x{} exceeds image {h}x{w}",
            mask.height(),
            mask.width()
        )));
    }
    let data = image.data();
    Ok(RgbImage::from_fn(mask.width() as u32, mask.height() as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        let mut px = [0u8; 3];
        for (ch, p) in px.iter_mut().enumerate() {
            let plane = if c == 3 { ch } else { 0 };
            let v = (data[plane * h * w + y * w + x].clamp(0.0, 1.0) * 255.0).round() as u16;
            *p = if mask.get(y, x) != 0 {
                (v + TINT[ch] as u16).div_ceil(2) as u8
            } else {
                v as u8
            };
        }
        Rgb(px)
    }))
}

fn save_err(path: &Path) -> impl Fn(image::ImageError) -> Error + '_ {
    move |e| Error::Format(format!("writing {}: {e}", path.display()))
}

pub fn save_mask_png(mask: &Mask, num_classes: usize, path: &Path) -> Result<()> {
    mask_to_image(mask, num_classes).save(path).map_err(save_err(path))
}

pub fn save_overlay_png(image: &Tensor, mask: &Mask, path: &Path) -> Result<()> {
    overlay(image, mask)?.save(path).map_err(save_err(path))
}
