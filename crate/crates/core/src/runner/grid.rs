use std::path::Path;

use image::{DynamicImage, GrayImage, RgbImage};
use tch::{Kind, Tensor};

use crate::error::{Error, Result};

const BORDER: u32 = 1;

/// Lays out images with one row per class in label order and up to `columns`
/// samples per row, separated by a one-pixel black frame. Pixels are clamped
/// to `[0, 1]`; grayscale or RGB follows the channel count.
pub fn render_grid(images: &Tensor, labels: &[i64], num_classes: usize, columns: usize) -> Result<DynamicImage> {
    let size = images.size();
    if size.len() != 4 || size[0] as usize != labels.len() {
        return Err(Error::Argument(format!(
            "grid needs a (B, C, H, W) batch with one label per image, got {size:?} and {} labels",
            labels.len()
        )));
    }
    let (c, h, w) = (size[1] as usize, size[2] as u32, size[3] as u32);
    if c != 1 && c != 3 {
        return Err(Error::Argument(format!("grid images need 1 or 3 channels, got {c}")));
    }
    if columns == 0 || num_classes == 0 {
        return Err(Error::Argument("grid needs at least one row and one column".into()));
    }
    let mut rows: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (i, &l) in labels.iter().enumerate() {
        match rows.get_mut(l as usize) {
            Some(row) if l >= 0 => {
                if row.len() < columns {
                    row.push(i);
                }
            }
            _ => return Err(Error::Argument(format!("label {l} outside [0, {num_classes})"))),
        }
    }
    let missing: Vec<usize> = (0..num_classes).filter(|&k| rows[k].is_empty()).collect();
    if !missing.is_empty() {
        return Err(Error::Argument(format!("no images for labels {missing:?}")));
    }

    let pixels = Vec::<f32>::try_from(images.to_kind(Kind::Float).clamp(0.0, 1.0).flatten(0, -1))
        .map_err(|e| Error::Argument(format!("grid pixels: {e}")))?;
    let width = columns as u32 * (w + BORDER) + BORDER;
    let height = num_classes as u32 * (h + BORDER) + BORDER;
    let mut canvas = vec![0u8; (width * height) as usize * c];
    let plane = (h * w) as usize;
    for (r, row) in rows.iter().enumerate() {
        for (col, &img) in row.iter().enumerate() {
            let x0 = BORDER + col as u32 * (w + BORDER);
            let y0 = BORDER + r as u32 * (h + BORDER);
            for y in 0..h {
                for x in 0..w {
                    let dst = (((y0 + y) * width + x0 + x) as usize) * c;
                    for ch in 0..c {
                        let v = pixels[img * c * plane + ch * plane + (y * w + x) as usize];
                        canvas[dst + ch] = (v * 255.0).round() as u8;
                    }
                }
            }
        }
    }
    Ok(if c == 1 {
        DynamicImage::ImageLuma8(GrayImage::from_raw(width, height, canvas).expect("canvas size"))
    } else {
        DynamicImage::ImageRgb8(RgbImage::from_raw(width, height, canvas).expect("canvas size"))
    })
}

pub fn save_grid(path: &Path, images: &Tensor, labels: &[i64], num_classes: usize, columns: usize) -> Result<()> {
    render_grid(images, labels, num_classes, columns)?.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use tch::Device;

    #[test]
    fn ten_by_five_layout() {
        let labels: Vec<i64> = (0..50).map(|i| i % 10).collect();
        let x = Tensor::rand([50, 1, 28, 28], (Kind::Float, Device::Cpu));
        let g = render_grid(&x, &labels, 10, 5).unwrap();
        assert_eq!((g.width(), g.height()), (5 * 29 + 1, 10 * 29 + 1));
        assert!(matches!(g, DynamicImage::ImageLuma8(_)));
    }

    #[test]
    fn single_cell_is_framed_and_clamped() {
        let x = Tensor::from_slice(&[-1.0f32, 0.5, 2.0, 1.0]).view([1, 1, 2, 2]);
        let g = render_grid(&x, &[0], 1, 1).unwrap().into_luma8();
        assert_eq!(g.dimensions(), (4, 4));
        assert_eq!(g.get_pixel(0, 0).0[0], 0);
        let inner: Vec<u8> = [(1, 1), (2, 1), (1, 2), (2, 2)].iter().map(|&(x, y)| g.get_pixel(x, y).0[0]).collect();
        assert_eq!(inner, vec![0, 128, 255, 255]);
    }

    #[test]
    fn rgb_follows_channels() {
        let x = Tensor::rand([2, 3, 4, 4], (Kind::Float, Device::Cpu));
        assert!(matches!(render_grid(&x, &[0, 1], 2, 1).unwrap(), DynamicImage::ImageRgb8(_)));
    }

    #[test]
    fn missing_classes_are_listed() {
        let x = Tensor::rand([2, 1, 4, 4], (Kind::Float, Device::Cpu));
        match render_grid(&x, &[0, 2], 4, 1) {
            Err(Error::Argument(msg)) => assert!(msg.contains("[1, 3]"), "{msg}"),
            other => panic!("{other:?}"),
        }
    }
}
