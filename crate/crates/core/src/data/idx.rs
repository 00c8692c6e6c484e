//! IDX (MNIST-style) file reader: big-endian magic and dimensions followed by
//! unsigned bytes.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::dataset::{LabeledDataset, TaskStream};
use super::split::{make_split_stream, ClassOrder, SplitOptions};
use crate::error::{Error, Result};
use crate::Tensor;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

/// Environment variable naming the directory relative data paths resolve against.
pub const DATA_ENV: &str = "CONTILEARN_DATA";

fn be_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| Error::Data(format!("{what}: truncated header")))
}

fn parse_images(bytes: &[u8]) -> Result<(usize, usize, &[u8])> {
    let magic = be_u32(bytes, 0, "images")?;
    if magic != IMAGES_MAGIC {
        return Err(Error::Data(format!("images: bad magic {magic:#010x}")));
    }
    let n = be_u32(bytes, 4, "images")? as usize;
    let rows = be_u32(bytes, 8, "images")? as usize;
    let cols = be_u32(bytes, 12, "images")? as usize;
    let pixels = rows * cols;
    let body = &bytes[16..];
    if body.len() != n * pixels {
        return Err(Error::Data(format!(
            "images: header promises {n}x{rows}x{cols} bytes, file has {}",
            body.len()
        )));
    }
    Ok((n, pixels, body))
}

fn parse_labels(bytes: &[u8]) -> Result<&[u8]> {
    let magic = be_u32(bytes, 0, "labels")?;
    if magic != LABELS_MAGIC {
        return Err(Error::Data(format!("labels: bad magic {magic:#010x}")));
    }
    let n = be_u32(bytes, 4, "labels")? as usize;
    let body = &bytes[8..];
    if body.len() != n {
        return Err(Error::Data(format!(
            "labels: header promises {n} labels, file has {}",
            body.len()
        )));
    }
    Ok(body)
}

/// Decodes an image/label pair already in memory; pixels scale to `[0, 1]`.
pub fn decode_idx(images: &[u8], labels: &[u8]) -> Result<LabeledDataset> {
    let (n, pixels, body) = parse_images(images)?;
    let labels = parse_labels(labels)?;
    if labels.len() != n {
        return Err(Error::Data(format!(
            "{n} images but {} labels",
            labels.len()
        )));
    }
    if n == 0 || pixels == 0 {
        return Err(Error::Data("empty IDX file".into()));
    }
    let data = body.iter().map(|&b| b as f64 / 255.0).collect();
    LabeledDataset::new(
        Tensor::new(vec![n, pixels], data)?,
        labels.iter().map(|&l| l as usize).collect(),
    )
}

pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<LabeledDataset> {
    let images = fs::read(images_path).map_err(|e| Error::io(images_path, e))?;
    let labels = fs::read(labels_path).map_err(|e| Error::io(labels_path, e))?;
    decode_idx(&images, &labels)
}

/// Resolves a relative path against `$CONTILEARN_DATA` when it is set.
pub fn data_path(p: &Path) -> PathBuf {
    match std::env::var_os(DATA_ENV) {
        Some(root) if p.is_relative() => Path::new(&root).join(p),
        _ => p.to_path_buf(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdxSpec {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
    pub num_tasks: usize,
    #[serde(default)]
    pub class_order: ClassOrder,
}

impl IdxSpec {
    pub fn load(&self, fewshot_fraction: f64, seed: u64) -> Result<TaskStream> {
        let train = load_idx(&data_path(&self.train_images), &data_path(&self.train_labels))?;
        let test = load_idx(&data_path(&self.test_images), &data_path(&self.test_labels))?;
        make_split_stream(
            &train,
            &test,
            self.num_tasks,
            SplitOptions {
                fewshot_fraction,
                class_order: self.class_order,
                seed,
            },
        )
    }
}
