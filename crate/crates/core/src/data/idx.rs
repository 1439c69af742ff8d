//! IDX reader for the MNIST family.

use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;

use super::Split;
use crate::error::{Error, Result};

fn read_maybe_gz(dir: &Path, stem: &str) -> Result<(PathBuf, Vec<u8>)> {
    let plain = dir.join(stem);
    if plain.exists() {
        let bytes = std::fs::read(&plain).map_err(|e| Error::Ingestion {
            path: plain.clone(),
            reason: e.to_string(),
        })?;
        return Ok((plain, bytes));
    }
    let gz = dir.join(format!("{stem}.gz"));
    if gz.exists() {
        let file = std::fs::File::open(&gz).map_err(|e| Error::Ingestion {
            path: gz.clone(),
            reason: e.to_string(),
        })?;
        let mut bytes = Vec::new();
        GzDecoder::new(file)
            .read_to_end(&mut bytes)
            .map_err(|e| Error::Ingestion {
                path: gz.clone(),
                reason: format!("gzip: {e}"),
            })?;
        return Ok((gz, bytes));
    }
    Err(Error::Ingestion {
        path: plain,
        reason: "file not found (also tried .gz)".into(),
    })
}

/// Parses an unsigned-byte IDX payload into its dimensions and data.
pub(crate) fn parse(bytes: &[u8]) -> std::result::Result<(Vec<usize>, &[u8]), String> {
    if bytes.len() < 4 || bytes[0] != 0 || bytes[1] != 0 {
        return Err("bad IDX magic".into());
    }
    if bytes[2] != 0x08 {
        return Err(format!("unsupported IDX element type 0x{:02x}", bytes[2]));
    }
    let ndim = bytes[3] as usize;
    let header = 4 + 4 * ndim;
    if bytes.len() < header {
        return Err("truncated IDX header".into());
    }
    let dims: Vec<usize> = (0..ndim)
        .map(|i| {
            let o = 4 + 4 * i;
            u32::from_be_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]) as usize
        })
        .collect();
    let expected: usize = dims.iter().product();
    let data = &bytes[header..];
    if data.len() != expected {
        return Err(format!("IDX payload has {} bytes, header promises {expected}", data.len()));
    }
    Ok((dims, data))
}

pub(crate) fn load(dir: &Path, split: Split) -> Result<(Vec<f32>, Vec<i64>)> {
    let prefix = match split {
        Split::Train => "train",
        Split::Test => "t10k",
    };
    let (img_path, img_bytes) = read_maybe_gz(dir, &format!("{prefix}-images-idx3-ubyte"))?;
    let (lbl_path, lbl_bytes) = read_maybe_gz(dir, &format!("{prefix}-labels-idx1-ubyte"))?;

    let (img_dims, pixels) = parse(&img_bytes).map_err(|reason| Error::Ingestion {
        path: img_path.clone(),
        reason,
    })?;
    let (lbl_dims, labels) = parse(&lbl_bytes).map_err(|reason| Error::Ingestion {
        path: lbl_path.clone(),
        reason,
    })?;
    if img_dims.len() != 3 || img_dims[1] != 28 || img_dims[2] != 28 {
        return Err(Error::Ingestion {
            path: img_path,
            reason: format!("image dims {img_dims:?}, expected Nx28x28"),
        });
    }
    if lbl_dims.len() != 1 || lbl_dims[0] != img_dims[0] {
        return Err(Error::Ingestion {
            path: lbl_path,
            reason: format!("label dims {lbl_dims:?} do not match {} images", img_dims[0]),
        });
    }
    let images = pixels.iter().map(|&p| p as f32 / 255.0).collect();
    let labels = labels.iter().map(|&l| l as i64).collect();
    Ok((images, labels))
}
