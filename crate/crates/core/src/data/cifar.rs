//! CIFAR-10 binary batches: one label byte followed by 3072 channel-major pixels.

use std::path::Path;

use super::Split;
use crate::error::{Error, Result};

const RECORD: usize = 1 + 3 * 32 * 32;

pub(crate) fn load(dir: &Path, split: Split) -> Result<(Vec<f32>, Vec<i64>)> {
    let base = if dir.join("cifar-10-batches-bin").is_dir() {
        dir.join("cifar-10-batches-bin")
    } else {
        dir.to_path_buf()
    };
    let files: Vec<String> = match split {
        Split::Train => (1..=5).map(|i| format!("data_batch_{i}.bin")).collect(),
        Split::Test => vec!["test_batch.bin".to_string()],
    };
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for f in files {
        let path = base.join(f);
        let bytes = std::fs::read(&path).map_err(|e| Error::Ingestion {
            path: path.clone(),
            reason: e.to_string(),
        })?;
        if bytes.is_empty() || bytes.len() % RECORD != 0 {
            return Err(Error::Ingestion {
                path,
                reason: format!("{} bytes is not a whole number of records", bytes.len()),
            });
        }
        for rec in bytes.chunks_exact(RECORD) {
            if rec[0] > 9 {
                return Err(Error::Ingestion {
                    path,
                    reason: format!("label byte {} out of range", rec[0]),
                });
            }
            labels.push(rec[0] as i64);
            images.extend(rec[1..].iter().map(|&p| p as f32 / 255.0));
        }
    }
    Ok((images, labels))
}
