//! CIFAR-10 binary batches: each record is one label byte followed by
//! 1024 red, 1024 green and 1024 blue pixel bytes in row-major order.

use std::fs;
use std::path::{Path, PathBuf};

use rwenas_core::data::{DataError, ImageDataset};

pub const LABEL_BYTES: usize = 1;
pub const IMAGE_BYTES: usize = 3 * 32 * 32;
pub const RECORD_BYTES: usize = LABEL_BYTES + IMAGE_BYTES;
pub const RECORDS_PER_BATCH: usize = 10_000;
pub const CLASSES: usize = 10;

pub const TRAIN_BATCHES: [&str; 5] =
    ["data_batch_1.bin", "data_batch_2.bin", "data_batch_3.bin", "data_batch_4.bin", "data_batch_5.bin"];
pub const TEST_BATCH: &str = "test_batch.bin";

#[derive(Debug, thiserror::Error)]
pub enum CifarError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: truncated record at byte offset {offset} (file is {len} bytes)")]
    Truncated { path: PathBuf, offset: usize, len: usize },
    #[error("{path}: expected {RECORDS_PER_BATCH} records, found {found}")]
    RecordCount { path: PathBuf, found: usize },
    #[error("{path}: record {record} has label {label}")]
    Label { path: PathBuf, record: usize, label: u8 },
    #[error(transparent)]
    Data(#[from] DataError),
}

/// Raw decoded records.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Records {
    pub labels: Vec<u8>,
    /// `IMAGE_BYTES` per record, channel-major.
    pub pixels: Vec<u8>,
}

impl Records {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[u8] {
        &self.pixels[i * IMAGE_BYTES..(i + 1) * IMAGE_BYTES]
    }
}

/// Decodes any whole number of records. On a partial trailing record returns
/// the byte offset where it starts.
pub fn decode_records(bytes: &[u8]) -> Result<Records, usize> {
    if !bytes.len().is_multiple_of(RECORD_BYTES) {
        return Err(bytes.len() - bytes.len() % RECORD_BYTES);
    }
    let n = bytes.len() / RECORD_BYTES;
    let mut out = Records { labels: Vec::with_capacity(n), pixels: Vec::with_capacity(n * IMAGE_BYTES) };
    for record in bytes.chunks_exact(RECORD_BYTES) {
        out.labels.push(record[0]);
        out.pixels.extend_from_slice(&record[LABEL_BYTES..]);
    }
    Ok(out)
}

/// Reads one batch file, which must hold exactly `RECORDS_PER_BATCH` records.
pub fn read_batch(path: &Path) -> Result<Records, CifarError> {
    let bytes = fs::read(path).map_err(|source| CifarError::Io { path: path.to_owned(), source })?;
    let records = decode_records(&bytes)
        .map_err(|offset| CifarError::Truncated { path: path.to_owned(), offset, len: bytes.len() })?;
    if records.len() != RECORDS_PER_BATCH {
        return Err(CifarError::RecordCount { path: path.to_owned(), found: records.len() });
    }
    if let Some((record, &label)) = records.labels.iter().enumerate().find(|(_, &l)| usize::from(l) >= CLASSES) {
        return Err(CifarError::Label { path: path.to_owned(), record, label });
    }
    Ok(records)
}

/// Scales bytes to `[0, 1]`.
pub fn to_dataset(records: Records) -> Result<ImageDataset, DataError> {
    let pixels = records.pixels.iter().map(|&b| f32::from(b) / 255.0).collect();
    ImageDataset::new(pixels, records.labels, (3, 32, 32), CLASSES)
}

/// The 50,000 training images (or the first `limit` of them, in file order).
/// The dataset is returned without a validation split.
pub fn load_cifar10_binary(dir: &Path, limit: Option<usize>) -> Result<ImageDataset, CifarError> {
    let mut all = Records::default();
    for name in TRAIN_BATCHES {
        if limit.is_some_and(|l| all.len() >= l) {
            break;
        }
        let batch = read_batch(&dir.join(name))?;
        all.labels.extend_from_slice(&batch.labels);
        all.pixels.extend_from_slice(&batch.pixels);
    }
    if let Some(l) = limit {
        all.labels.truncate(l);
        all.pixels.truncate(l * IMAGE_BYTES);
    }
    Ok(to_dataset(all)?)
}

/// The 10,000 held-out test images.
pub fn load_cifar10_test(dir: &Path) -> Result<ImageDataset, CifarError> {
    Ok(to_dataset(read_batch(&dir.join(TEST_BATCH))?)?)
}
