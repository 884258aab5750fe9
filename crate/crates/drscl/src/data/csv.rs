//! Strictly numeric CSV reader: comma-separated, UTF-8, '.' decimal,
//! no quoting. One column holds an integral class label.

use std::path::Path;

use crate::data::{Dataset, Sample};
use crate::error::{Error, Result};

/// Parse CSV text into a dataset. `label_column` is a 0-based column index;
/// the remaining columns become features in file order. Blank lines are
/// skipped. Errors name the offending 1-based line.
pub fn parse_csv(text: &str, label_column: usize, skip_header: bool) -> Result<Dataset> {
    let mut dataset: Option<Dataset> = None;
    let mut width: Option<usize> = None;
    let mut skipped_header = !skip_header;

    for (lineno, line) in text.lines().enumerate() {
        let lineno = lineno + 1;
        if line.trim().is_empty() {
            continue;
        }
        if !skipped_header {
            skipped_header = true;
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        match width {
            None => {
                if fields.len() < 2 {
                    return Err(Error::Parse(format!(
                        "line {lineno}: need at least 2 columns, found {}",
                        fields.len()
                    )));
                }
                if label_column >= fields.len() {
                    return Err(Error::Parse(format!(
                        "line {lineno}: label column {label_column} out of range for {} columns",
                        fields.len()
                    )));
                }
                width = Some(fields.len());
                dataset = Some(Dataset::new(fields.len() - 1)?);
            }
            Some(w) if fields.len() != w => {
                return Err(Error::Parse(format!(
                    "line {lineno}: expected {w} columns, found {}",
                    fields.len()
                )));
            }
            _ => {}
        }

        let mut features = Vec::with_capacity(fields.len() - 1);
        let mut label = None;
        for (col, field) in fields.iter().enumerate() {
            let value: f64 = field.trim().parse().map_err(|_| {
                Error::Parse(format!(
                    "line {lineno}: non-numeric token {:?} in column {col}",
                    field.trim()
                ))
            })?;
            if !value.is_finite() {
                return Err(Error::Parse(format!(
                    "line {lineno}: non-finite value in column {col}"
                )));
            }
            if col == label_column {
                if value.fract() != 0.0 || value < 0.0 || value > u32::MAX as f64 {
                    return Err(Error::Parse(format!(
                        "line {lineno}: label {value} is not a non-negative integer"
                    )));
                }
                label = Some(value as usize);
            } else {
                features.push(value);
            }
        }
        dataset
            .as_mut()
            .expect("dataset initialized with width")
            .push(Sample {
                features,
                label: label.expect("label column within width"),
            })?;
    }

    dataset.ok_or_else(|| Error::Parse("no data rows".into()))
}

/// Load a CSV dataset from disk.
pub fn load_csv_dataset(
    path: impl AsRef<Path>,
    label_column: usize,
    skip_header: bool,
) -> Result<Dataset> {
    let text = std::fs::read_to_string(path.as_ref()).map_err(|e| {
        Error::Io(std::io::Error::new(
            e.kind(),
            format!("{}: {e}", path.as_ref().display()),
        ))
    })?;
    parse_csv(&text, label_column, skip_header)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reads_three_row_file() {
        let ds = parse_csv("1.0,2.0,0\n3.0,4.0,1\n5.0,6.0,0\n", 2, false).unwrap();
        assert_eq!(ds.dim(), 2);
        assert_eq!(ds.len(), 3);
        let labels: Vec<usize> = ds.samples().iter().map(|s| s.label).collect();
        assert_eq!(labels, vec![0, 1, 0]);
        assert_eq!(ds.samples()[1].features, vec![3.0, 4.0]);
    }

    #[test]
    fn empty_file_is_a_parse_error() {
        assert!(matches!(parse_csv("", 0, false), Err(Error::Parse(_))));
        assert!(matches!(parse_csv("\n\n", 0, false), Err(Error::Parse(_))));
    }

    #[test]
    fn non_numeric_token_names_line() {
        let err = parse_csv("1.0,2.0,0\n3.0,oops,1\n", 2, false).unwrap_err();
        match err {
            Error::Parse(msg) => assert!(msg.contains("line 2"), "{msg}"),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn inconsistent_width_names_line() {
        let err = parse_csv("1.0,2.0,0\n3.0,1\n", 2, false).unwrap_err();
        match err {
            Error::Parse(msg) => assert!(msg.contains("line 2"), "{msg}"),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn header_skipping_is_opt_in() {
        let ds = parse_csv("x,y,label\n1.0,2.0,0\n", 2, true).unwrap();
        assert_eq!(ds.len(), 1);
        assert!(parse_csv("x,y,label\n1.0,2.0,0\n", 2, false).is_err());
    }

    #[test]
    fn fractional_label_rejected() {
        assert!(matches!(
            parse_csv("1.0,2.0,0.5\n", 2, false),
            Err(Error::Parse(_))
        ));
    }
}
