//! Big-endian IDX3/IDX1 decoders (the MNIST container format).

use std::path::Path;

use byteorder::{BigEndian, ByteOrder};

use crate::data::{Dataset, Sample};
use crate::error::{Error, Result};

const IDX3_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX1_LABELS_MAGIC: u32 = 0x0000_0801;

fn read_u32(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(BigEndian::read_u32)
        .ok_or_else(|| Error::Format(format!("truncated header: missing {what}")))
}

/// Decode an IDX3 image file: returns (count, flattened dimension, pixels
/// scaled to [0,1], row-major per image).
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, Vec<f64>)> {
    let magic = read_u32(bytes, 0, "image magic")?;
    if magic != IDX3_IMAGES_MAGIC {
        return Err(Error::Format(format!(
            "bad image magic 0x{magic:08x}, expected 0x{IDX3_IMAGES_MAGIC:08x}"
        )));
    }
    let count = read_u32(bytes, 4, "image count")? as u64;
    let rows = read_u32(bytes, 8, "row count")? as u64;
    let cols = read_u32(bytes, 12, "column count")? as u64;
    let dim = rows
        .checked_mul(cols)
        .ok_or_else(|| Error::Format("image dimensions overflow".into()))?;
    if dim == 0 {
        return Err(Error::Format("zero image dimensions".into()));
    }
    let expected = count
        .checked_mul(dim)
        .and_then(|n| n.checked_add(16))
        .ok_or_else(|| Error::Format("pixel payload size overflows".into()))?;
    if bytes.len() as u64 != expected {
        return Err(Error::Format(format!(
            "payload is {} bytes, header implies {expected}",
            bytes.len()
        )));
    }
    let pixels = bytes[16..].iter().map(|&p| p as f64 / 255.0).collect();
    Ok((count as usize, dim as usize, pixels))
}

/// Decode an IDX1 label file into raw label bytes.
pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let magic = read_u32(bytes, 0, "label magic")?;
    if magic != IDX1_LABELS_MAGIC {
        return Err(Error::Format(format!(
            "bad label magic 0x{magic:08x}, expected 0x{IDX1_LABELS_MAGIC:08x}"
        )));
    }
    let count = read_u32(bytes, 4, "label count")? as u64;
    if bytes.len() as u64 != count + 8 {
        return Err(Error::Format(format!(
            "payload is {} bytes, header implies {}",
            bytes.len(),
            count + 8
        )));
    }
    Ok(bytes[8..].to_vec())
}

/// Combine decoded images and labels into a dataset.
pub fn dataset_from_idx(images: &[u8], labels: &[u8]) -> Result<Dataset> {
    let (count, dim, pixels) = parse_idx_images(images)?;
    let label_bytes = parse_idx_labels(labels)?;
    if label_bytes.len() != count {
        return Err(Error::Format(format!(
            "{count} images but {} labels",
            label_bytes.len()
        )));
    }
    let mut ds = Dataset::new(dim)?;
    for (i, &label) in label_bytes.iter().enumerate() {
        ds.push(Sample {
            features: pixels[i * dim..(i + 1) * dim].to_vec(),
            label: label as usize,
        })?;
    }
    Ok(ds)
}

/// Load an IDX image/label file pair from disk.
pub fn load_idx_dataset(
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
) -> Result<Dataset> {
    let images = std::fs::read(images_path.as_ref())?;
    let labels = std::fs::read(labels_path.as_ref())?;
    dataset_from_idx(&images, &labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image_bytes(count: u32, rows: u32, cols: u32, pixels: &[u8]) -> Vec<u8> {
        let mut b = Vec::new();
        for v in [IDX3_IMAGES_MAGIC, count, rows, cols] {
            b.extend_from_slice(&v.to_be_bytes());
        }
        b.extend_from_slice(pixels);
        b
    }

    fn label_bytes(labels: &[u8]) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(&IDX1_LABELS_MAGIC.to_be_bytes());
        b.extend_from_slice(&(labels.len() as u32).to_be_bytes());
        b.extend_from_slice(labels);
        b
    }

    #[test]
    fn pixels_scale_to_unit_interval() {
        let images = image_bytes(2, 2, 2, &[0, 255, 255, 0, 255, 255, 0, 0]);
        let labels = label_bytes(&[1, 0]);
        let ds = dataset_from_idx(&images, &labels).unwrap();
        assert_eq!(ds.dim(), 4);
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.samples()[0].features, vec![0.0, 1.0, 1.0, 0.0]);
        assert_eq!(ds.samples()[1].features, vec![1.0, 1.0, 0.0, 0.0]);
        assert_eq!(ds.samples()[0].label, 1);
    }

    #[test]
    fn count_mismatch_is_a_format_error() {
        let images = image_bytes(2, 2, 2, &[0; 8]);
        let labels = label_bytes(&[1]);
        assert!(matches!(
            dataset_from_idx(&images, &labels),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn big_endian_dimension_fields_honored() {
        // Header: 00 00 08 03 | 00 00 00 02 | 00 00 00 02 | 00 00 00 02.
        let mut b = vec![
            0x00, 0x00, 0x08, 0x03, 0x00, 0x00, 0x00, 0x02, 0x00, 0x00, 0x00, 0x02, 0x00, 0x00,
            0x00, 0x02,
        ];
        b.extend_from_slice(&[10; 8]);
        let (count, dim, pixels) = parse_idx_images(&b).unwrap();
        assert_eq!(count, 2);
        assert_eq!(dim, 4);
        assert_eq!(pixels.len(), 8);
    }

    #[test]
    fn bad_magic_and_truncation_rejected() {
        assert!(matches!(parse_idx_images(&[0, 0]), Err(Error::Format(_))));
        let mut wrong = image_bytes(1, 1, 1, &[7]);
        wrong[3] = 0x01;
        assert!(matches!(parse_idx_images(&wrong), Err(Error::Format(_))));
        let truncated = image_bytes(2, 2, 2, &[0; 7]);
        assert!(matches!(
            parse_idx_images(&truncated),
            Err(Error::Format(_))
        ));
        let trailing = image_bytes(1, 1, 1, &[7, 8]);
        assert!(matches!(parse_idx_images(&trailing), Err(Error::Format(_))));
        assert!(matches!(parse_idx_labels(&[0, 0, 8]), Err(Error::Format(_))));
    }
}
