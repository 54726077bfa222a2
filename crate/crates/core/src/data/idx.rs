//! IDX reader and writer (optionally gzip-compressed) and the per-client
//! directory layout `clients/<id>/{train,val,test}-{images,labels}.idx`.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;

use super::dataset::{ClientDataset, Dataset};
use crate::error::DataError;
use crate::nn::Tensor;

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

fn ingestion(path: &Path, reason: impl Into<String>) -> DataError {
    DataError::Ingestion {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn read_bytes(path: &Path) -> Result<Vec<u8>, DataError> {
    let raw = fs::read(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| ingestion(path, format!("bad gzip stream: {e}")))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32, DataError> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| ingestion(path, "truncated header"))
}

fn parse_images(path: &Path) -> Result<(usize, [usize; 3], Vec<f64>), DataError> {
    let bytes = read_bytes(path)?;
    let magic = be_u32(&bytes, 0, path)?;
    if magic != IMAGES_MAGIC {
        return Err(ingestion(
            path,
            format!("bad magic {magic:#010x}, expected {IMAGES_MAGIC:#010x} for images"),
        ));
    }
    let n = be_u32(&bytes, 4, path)? as usize;
    let rows = be_u32(&bytes, 8, path)? as usize;
    let cols = be_u32(&bytes, 12, path)? as usize;
    let need = 16 + n * rows * cols;
    if bytes.len() < need {
        return Err(ingestion(
            path,
            format!("truncated: {n} images of {rows}x{cols} need {need} bytes, file has {}", bytes.len()),
        ));
    }
    let data = bytes[16..need].iter().map(|&b| f64::from(b) / 255.0).collect();
    Ok((n, [rows, cols, 1], data))
}

fn parse_labels(path: &Path) -> Result<Vec<usize>, DataError> {
    let bytes = read_bytes(path)?;
    let magic = be_u32(&bytes, 0, path)?;
    if magic != LABELS_MAGIC {
        return Err(ingestion(
            path,
            format!("bad magic {magic:#010x}, expected {LABELS_MAGIC:#010x} for labels"),
        ));
    }
    let n = be_u32(&bytes, 4, path)? as usize;
    if bytes.len() < 8 + n {
        return Err(ingestion(
            path,
            format!("truncated: {n} labels need {} bytes, file has {}", 8 + n, bytes.len()),
        ));
    }
    Ok(bytes[8..8 + n].iter().map(|&b| b as usize).collect())
}

/// Loads an image/label IDX pair. Gzip-compressed files are detected by
/// their magic bytes. `n_classes` is one past the largest label.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset, DataError> {
    load_idx_with_classes(images_path.as_ref(), labels_path.as_ref(), None)
}

fn load_idx_with_classes(images_path: &Path, labels_path: &Path, n_classes: Option<usize>) -> Result<Dataset, DataError> {
    let (n, shape, data) = parse_images(images_path)?;
    let labels = parse_labels(labels_path)?;
    if labels.len() != n {
        return Err(ingestion(
            labels_path,
            format!("{} labels but {} has {n} images", labels.len(), images_path.display()),
        ));
    }
    let n_classes = n_classes.unwrap_or_else(|| labels.iter().max().map_or(0, |m| m + 1));
    let images = Tensor::new(vec![n, shape[0], shape[1], shape[2]], data).map_err(|e| ingestion(images_path, e.to_string()))?;
    Dataset::new(images, labels, n_classes).map_err(|e| ingestion(labels_path, e.to_string()))
}

/// Writes an uncompressed IDX pair. Pixels are rounded to bytes and the
/// images must be single-channel.
pub fn write_idx(dataset: &Dataset, images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<(), DataError> {
    let [h, w, c] = dataset.image_shape();
    if c != 1 {
        return Err(DataError::Invalid(format!("IDX images must have one channel, got {c}")));
    }
    let mut img = Vec::with_capacity(16 + dataset.images.len());
    img.extend_from_slice(&IMAGES_MAGIC.to_be_bytes());
    for v in [dataset.len(), h, w] {
        img.extend_from_slice(&(v as u32).to_be_bytes());
    }
    img.extend(
        dataset
            .images
            .data()
            .iter()
            .map(|&p| (p.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    let mut lab = Vec::with_capacity(8 + dataset.len());
    lab.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    lab.extend_from_slice(&(dataset.len() as u32).to_be_bytes());
    for &l in &dataset.labels {
        let b = u8::try_from(l).map_err(|_| DataError::Invalid(format!("label {l} does not fit in a byte")))?;
        lab.push(b);
    }
    write_file(images_path.as_ref(), &img)?;
    write_file(labels_path.as_ref(), &lab)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), DataError> {
    let io = |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    };
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io)?;
    }
    fs::File::create(path).and_then(|mut f| f.write_all(bytes)).map_err(io)
}

fn split_paths(dir: &Path, split: &str) -> (PathBuf, PathBuf) {
    (
        dir.join(format!("{split}-images.idx")),
        dir.join(format!("{split}-labels.idx")),
    )
}

/// Loads pre-partitioned clients from `root/clients/<id>/`. Client ids are
/// the numeric directory names; they are renumbered densely in ascending order.
pub fn load_client_dirs(root: impl AsRef<Path>, n_classes: usize) -> Result<Vec<ClientDataset>, DataError> {
    let base = root.as_ref().join("clients");
    let entries = fs::read_dir(&base).map_err(|source| DataError::Io {
        path: base.clone(),
        source,
    })?;
    let mut ids = Vec::new();
    for e in entries {
        let e = e.map_err(|source| DataError::Io {
            path: base.clone(),
            source,
        })?;
        if let Some(id) = e.file_name().to_str().and_then(|s| s.parse::<usize>().ok()) {
            ids.push(id);
        }
    }
    ids.sort_unstable();
    if ids.is_empty() {
        return Err(ingestion(&base, "no numeric client directories"));
    }
    let mut clients = Vec::with_capacity(ids.len());
    for (dense, id) in ids.into_iter().enumerate() {
        let dir = base.join(id.to_string());
        let load = |split: &str| {
            let (i, l) = split_paths(&dir, split);
            load_idx_with_classes(&i, &l, Some(n_classes))
        };
        clients.push(ClientDataset {
            client_id: dense,
            train: load("train")?,
            val: load("val")?,
            test: load("test")?,
            source: None,
        });
    }
    Ok(clients)
}

/// Writes clients in the layout read by [`load_client_dirs`].
pub fn write_client_dirs(root: impl AsRef<Path>, clients: &[ClientDataset]) -> Result<(), DataError> {
    for c in clients {
        let dir = root.as_ref().join("clients").join(c.client_id.to_string());
        for (name, ds) in [("train", &c.train), ("val", &c.val), ("test", &c.test)] {
            let (i, l) = split_paths(&dir, name);
            write_idx(ds, i, l)?;
        }
    }
    Ok(())
}
