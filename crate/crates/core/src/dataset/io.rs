//! Dataset files: `images.bin` holds the pixels, `labels.csv` the labels and
//! group ids, `splits.csv` the fold of each sample.
//!
//! `images.bin` layout (little-endian): the 8 magic bytes `MSMD0001`, then
//! `u32` sample count, channels, height and width, then every image as
//! `f32` values in sample order.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{Fold, Sample, SplitIndices};
use crate::error::{Error, Result};
use crate::losses::LabelVector;
use crate::tensor::Tensor;

pub const IMAGES_MAGIC: &[u8; 8] = b"MSMD0001";
pub const IMAGES_FILE: &str = "images.bin";
pub const LABELS_FILE: &str = "labels.csv";
pub const SPLITS_FILE: &str = "splits.csv";

const HEADER_LEN: usize = 8 + 4 * 4;

/// Writes through a sibling temporary file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn encode_images(samples: &[Sample]) -> Result<Vec<u8>> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Data("no samples to save".into()))?;
    let shape = first.image.shape().to_vec();
    if shape.len() != 3 {
        return Err(Error::dim(format!("images must be [C, H, W], got {shape:?}")));
    }
    let mut out = Vec::with_capacity(HEADER_LEN + samples.len() * first.image.len() * 4);
    out.extend_from_slice(IMAGES_MAGIC);
    for v in [samples.len(), shape[0], shape[1], shape[2]] {
        let v = u32::try_from(v).map_err(|_| Error::Data(format!("{v} does not fit the u32 header")))?;
        out.extend_from_slice(&v.to_le_bytes());
    }
    for s in samples {
        if s.image.shape() != shape.as_slice() {
            return Err(Error::dim(format!(
                "image shapes differ: {:?} vs {shape:?}",
                s.image.shape()
            )));
        }
        for &v in s.image.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

fn encode_labels(samples: &[Sample]) -> String {
    let c = samples.first().map_or(0, |s| s.labels.len());
    let mut out = String::from("sample_id,group_id");
    for k in 0..c {
        let _ = write!(out, ",class_{k}");
    }
    out.push('\n');
    for (i, s) in samples.iter().enumerate() {
        let _ = write!(out, "{i},{}", s.group_id);
        for b in s.labels.bits() {
            let _ = write!(out, ",{b}");
        }
        out.push('\n');
    }
    out
}

/// Writes `images.bin` and `labels.csv` into `dir`.
pub fn save(samples: &[Sample], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let images = encode_images(samples)?;
    write_atomic(&dir.join(IMAGES_FILE), &images)?;
    write_atomic(&dir.join(LABELS_FILE), encode_labels(samples).as_bytes())?;
    Ok(())
}

fn read_u32(bytes: &[u8], offset: usize) -> u32 {
    u32::from_le_bytes(bytes[offset..offset + 4].try_into().expect("4 bytes"))
}

fn decode_images(bytes: &[u8]) -> Result<Vec<Tensor>> {
    if bytes.len() < IMAGES_MAGIC.len() {
        return Err(Error::format(bytes.len() as u64, "file too short for magic bytes"));
    }
    if &bytes[..8] != IMAGES_MAGIC {
        return Err(Error::format(0, "bad magic; not an image file"));
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::format(bytes.len() as u64, "truncated header"));
    }
    let dims: Vec<usize> = (0..4).map(|k| read_u32(bytes, 8 + 4 * k) as usize).collect();
    let (n, shape) = (dims[0], dims[1..].to_vec());
    if shape.contains(&0) {
        return Err(Error::format(12, format!("zero image dimension in {shape:?}")));
    }
    let per_image = shape.iter().product::<usize>();
    let expected = per_image
        .checked_mul(n)
        .and_then(|v| v.checked_mul(4))
        .and_then(|v| v.checked_add(HEADER_LEN))
        .ok_or_else(|| Error::format(8, "header dimensions overflow"))?;
    if bytes.len() < expected {
        return Err(Error::format(
            bytes.len() as u64,
            format!("truncated image data; expected {expected} bytes"),
        ));
    }
    if bytes.len() > expected {
        return Err(Error::format(expected as u64, "trailing bytes after image data"));
    }
    bytes[HEADER_LEN..]
        .chunks_exact(per_image * 4)
        .map(|chunk| {
            let data = chunk
                .chunks_exact(4)
                .map(|b| f64::from(f32::from_le_bytes(b.try_into().expect("4 bytes"))))
                .collect();
            Tensor::new(shape.clone(), data)
        })
        .collect()
}

/// Splits CSV text into `(byte offset, line)` pairs, skipping blank lines.
fn csv_lines(text: &str) -> impl Iterator<Item = (u64, &str)> {
    let mut offset = 0u64;
    text.split_inclusive('\n').filter_map(move |raw| {
        let start = offset;
        offset += raw.len() as u64;
        let line = raw.trim_end_matches(['\n', '\r']);
        (!line.is_empty()).then_some((start, line))
    })
}

fn parse_field<T: std::str::FromStr>(offset: u64, field: &str, what: &str) -> Result<T> {
    field
        .trim()
        .parse()
        .map_err(|_| Error::format(offset, format!("invalid {what} {field:?}")))
}

fn decode_labels(text: &str) -> Result<Vec<(u32, LabelVector)>> {
    let mut lines = csv_lines(text);
    let (_, header) = lines.next().ok_or_else(|| Error::format(0, "empty label file"))?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.len() < 3 || cols[0] != "sample_id" || cols[1] != "group_id" {
        return Err(Error::format(0, format!("unexpected label header {header:?}")));
    }
    let classes = cols.len() - 2;
    let mut rows = Vec::new();
    for (offset, line) in lines {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != classes + 2 {
            return Err(Error::format(
                offset,
                format!("expected {} fields, found {}", classes + 2, fields.len()),
            ));
        }
        let id: usize = parse_field(offset, fields[0], "sample id")?;
        if id != rows.len() {
            return Err(Error::format(offset, format!("sample id {id} out of order")));
        }
        let group: u32 = parse_field(offset, fields[1], "group id")?;
        let bits = fields[2..]
            .iter()
            .map(|f| parse_field::<u8>(offset, f, "label"))
            .collect::<Result<Vec<_>>>()?;
        let labels = LabelVector::new(bits).map_err(|e| Error::format(offset, e.to_string()))?;
        rows.push((group, labels));
    }
    Ok(rows)
}

/// Reads the samples written by `save`.
pub fn load(dir: &Path) -> Result<Vec<Sample>> {
    let images = decode_images(&fs::read(dir.join(IMAGES_FILE))?)?;
    let text = fs::read_to_string(dir.join(LABELS_FILE))?;
    let labels = decode_labels(&text)?;
    if labels.len() != images.len() {
        return Err(Error::format(
            text.len() as u64,
            format!("{} label rows for {} images", labels.len(), images.len()),
        ));
    }
    Ok(images
        .into_iter()
        .zip(labels)
        .map(|(image, (group_id, labels))| Sample {
            image,
            labels,
            group_id,
        })
        .collect())
}

pub fn write_splits(indices: &SplitIndices, num_samples: usize, dir: &Path) -> Result<()> {
    let mut out = String::from("sample_id,fold\n");
    for (i, fold) in indices.assignments(num_samples).into_iter().enumerate() {
        let fold = fold.ok_or_else(|| Error::Data(format!("sample {i} has no fold")))?;
        let _ = writeln!(out, "{i},{}", fold.name());
    }
    write_atomic(&dir.join(SPLITS_FILE), out.as_bytes())
}

pub fn read_splits(dir: &Path) -> Result<SplitIndices> {
    let text = fs::read_to_string(dir.join(SPLITS_FILE))?;
    let mut lines = csv_lines(&text);
    match lines.next() {
        Some((_, "sample_id,fold")) => {}
        _ => return Err(Error::format(0, "unexpected split header")),
    }
    let mut out = SplitIndices::default();
    for (n, (offset, line)) in lines.enumerate() {
        let (id, fold) = line
            .split_once(',')
            .ok_or_else(|| Error::format(offset, "expected sample_id,fold"))?;
        let id: usize = parse_field(offset, id, "sample id")?;
        if id != n {
            return Err(Error::format(offset, format!("sample id {id} out of order")));
        }
        let fold: Fold = fold.parse().map_err(|e: Error| Error::format(offset, e.to_string()))?;
        match fold {
            Fold::Train => out.train.push(id),
            Fold::Val => out.val.push(id),
            Fold::Test => out.test.push(id),
        }
    }
    Ok(out)
}
