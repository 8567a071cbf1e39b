//! CIFAR-10 binary batches: records of one label byte followed by 3072 pixel
//! bytes (three channel-planar 32 x 32 planes, row-major).

use std::path::Path;

use freqsense::data::Dataset;

use crate::error::{HarnessError, Result};

pub const RECORD_LEN: usize = 3073;
const SIDE: usize = 32;
const CLASSES: usize = 10;

/// Parses up to `max_samples` records from raw bytes.
pub fn parse_cifar_binary(bytes: &[u8], max_samples: usize, provenance: &str) -> Result<Dataset> {
    if bytes.len() % RECORD_LEN != 0 {
        let offset = (bytes.len() / RECORD_LEN * RECORD_LEN) as u64;
        return Err(HarnessError::Format {
            offset,
            detail: format!("truncated record: {} trailing bytes of {RECORD_LEN}", bytes.len() % RECORD_LEN),
        });
    }
    let mut data = Dataset::new(3, SIDE, CLASSES).with_meta("train", provenance);
    for (i, rec) in bytes.chunks_exact(RECORD_LEN).take(max_samples).enumerate() {
        let label = rec[0] as usize;
        if label >= CLASSES {
            return Err(HarnessError::Format {
                offset: (i * RECORD_LEN) as u64,
                detail: format!("label byte {label} is not a CIFAR-10 class"),
            });
        }
        data.push(rec[1..].iter().map(|&b| b as f64 / 255.0).collect(), label)?;
    }
    Ok(data)
}

pub fn load_cifar_binary(path: &Path, max_samples: usize) -> Result<Dataset> {
    let bytes = std::fs::read(path)?;
    parse_cifar_binary(&bytes, max_samples, &path.display().to_string())
}
