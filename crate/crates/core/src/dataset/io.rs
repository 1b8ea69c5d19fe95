use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array2;

use super::{AlarmDataset, BinnedDataset, FailureClass, WINDOW_SECONDS};
use crate::error::{Error, Result};

/// Column layout of an alarm CSV. Every column other than the label column is
/// an alarm feature.
#[derive(Clone, Debug)]
pub struct CsvSchema {
    pub label_column: String,
}

impl Default for CsvSchema {
    fn default() -> Self {
        Self { label_column: "label".to_string() }
    }
}

pub fn load_csv(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<AlarmDataset> {
    let file = File::open(path.as_ref())?;
    read_csv(file, schema)
}

/// Parses an alarm CSV. Rows reported in errors are 1-based file lines, so the
/// first data row is line 2.
pub fn read_csv<R: Read>(reader: R, schema: &CsvSchema) -> Result<AlarmDataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
    let label_col = headers
        .iter()
        .position(|h| *h == schema.label_column)
        .ok_or_else(|| Error::MissingLabel(schema.label_column.clone()))?;
    let feature_cols: Vec<usize> = (0..headers.len()).filter(|&c| c != label_col).collect();
    let feature_names: Vec<String> = feature_cols.iter().map(|&c| headers[c].clone()).collect();

    let mut cells = Vec::new();
    let mut labels = Vec::new();
    for (i, record) in rdr.records().enumerate() {
        let record = record?;
        let line = i + 2;
        if record.len() != headers.len() {
            return Err(Error::Parse {
                row: line,
                column: "*".into(),
                message: format!("expected {} fields, found {}", headers.len(), record.len()),
            });
        }
        for &c in &feature_cols {
            let field = record[c].trim();
            let value: i64 = field.parse().map_err(|_| Error::Parse {
                row: line,
                column: headers[c].clone(),
                message: format!("`{field}` is not an integer"),
            })?;
            if !(0..=i64::from(WINDOW_SECONDS)).contains(&value) {
                return Err(Error::Parse {
                    row: line,
                    column: headers[c].clone(),
                    message: format!("value {value} outside [0, {WINDOW_SECONDS}]"),
                });
            }
            cells.push(value as u16);
        }
        let field = record[label_col].trim();
        let label = field.parse::<u8>().ok().and_then(FailureClass::from_label).ok_or_else(|| Error::Parse {
            row: line,
            column: schema.label_column.clone(),
            message: format!("`{field}` is not a label in 1..=4"),
        })?;
        labels.push(label);
    }
    let raw = Array2::from_shape_vec((labels.len(), feature_names.len()), cells)
        .map_err(|e| Error::InvalidDataset(e.to_string()))?;
    AlarmDataset::new(feature_names, raw, labels)
}

fn write_rows<W: Write, T: ToString + Copy>(
    writer: W,
    names: &[String],
    cells: &Array2<T>,
    labels: &[FailureClass],
) -> Result<()> {
    let mut wtr = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(writer);
    let mut header: Vec<&str> = names.iter().map(String::as_str).collect();
    header.push("label");
    wtr.write_record(&header)?;
    for (row, label) in cells.rows().into_iter().zip(labels) {
        let mut rec: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        rec.push(label.label().to_string());
        wtr.write_record(&rec)?;
    }
    wtr.flush()?;
    Ok(())
}

/// Writes the raw dataset with a trailing `label` column.
pub fn write_csv<W: Write>(writer: W, d: &AlarmDataset) -> Result<()> {
    write_rows(writer, d.feature_names(), d.raw(), d.labels())
}

pub fn write_binned_csv<W: Write>(writer: W, d: &BinnedDataset) -> Result<()> {
    write_rows(writer, d.feature_names(), d.cells(), d.labels())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<AlarmDataset> {
        read_csv(text.as_bytes(), &CsvSchema::default())
    }

    #[test]
    fn header_only_is_empty_dataset() {
        let d = parse("A_1,A_2,label\n").unwrap();
        assert_eq!(d.shape(), (0, 2));
    }

    #[test]
    fn parses_rows_and_labels() {
        let d = parse("A_1,label,A_2\n0,1,900\n30,4,2\n").unwrap();
        assert_eq!(d.feature_names(), &["A_1".to_string(), "A_2".to_string()]);
        assert_eq!(d.raw()[[0, 1]], 900);
        assert_eq!(d.labels(), &[FailureClass::Idu, FailureClass::Power]);
    }

    #[test]
    fn out_of_range_cell_names_location() {
        match parse("A_1,A_2,label\n0,0,1\n3,901,2\n") {
            Err(Error::Parse { row, column, message }) => {
                assert_eq!(row, 3);
                assert_eq!(column, "A_2");
                assert!(message.contains("901"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn rejects_missing_label_and_bad_cells() {
        assert!(matches!(parse("A_1,A_2\n1,2\n"), Err(Error::MissingLabel(_))));
        assert!(matches!(parse("A_1,label\nx,1\n"), Err(Error::Parse { .. })));
        assert!(matches!(parse("A_1,label\n-1,1\n"), Err(Error::Parse { .. })));
        assert!(matches!(parse("A_1,label\n1,5\n"), Err(Error::Parse { .. })));
    }

    #[test]
    fn write_then_read() {
        let d = parse("A_1,A_2,label\n0,17,3\n450,0,2\n").unwrap();
        let mut buf = Vec::new();
        write_csv(&mut buf, &d).unwrap();
        assert_eq!(String::from_utf8(buf.clone()).unwrap(), "A_1,A_2,label\n0,17,3\n450,0,2\n");
        assert_eq!(parse(std::str::from_utf8(&buf).unwrap()).unwrap(), d);
    }
}
