use std::io::Write;

use super::EcgRecord;
use crate::{Error, Result};

/// Parses a single-lead CSV export: one mV value per line, or
/// `index,value` pairs. A non-numeric first row is taken as a header.
pub fn parse_csv_record(text: &str, fs: f64, record_id: &str) -> Result<EcgRecord> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());

    let mut samples = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let row_no = i + 1;
        let row = row.map_err(|e| Error::Csv {
            row: row_no,
            message: e.to_string(),
        })?;
        if row.iter().all(str::is_empty) {
            continue;
        }
        let cell = match row.len() {
            1 => &row[0],
            2 => &row[1],
            n => {
                return Err(Error::Csv {
                    row: row_no,
                    message: format!("expected 1 or 2 columns, found {n}"),
                })
            }
        };
        match cell.parse::<f64>() {
            Ok(v) if v.is_finite() => samples.push(v),
            _ if row_no == 1 => continue,
            _ => {
                return Err(Error::Csv {
                    row: row_no,
                    message: format!("non-numeric value {cell:?}"),
                })
            }
        }
    }
    if samples.is_empty() {
        return Err(Error::Csv {
            row: 0,
            message: "no samples".into(),
        });
    }
    EcgRecord::single(record_id, samples, fs)
}

/// Writes `sample,<channel...>` rows. A single-lead dump reads back
/// through [`parse_csv_record`] as `index,value` pairs.
pub fn write_record_csv<W: Write>(record: &EcgRecord, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["sample".to_string()];
    header.extend(record.channels.iter().map(|c| c.name.clone()));
    w.write_record(&header)
        .map_err(|e| Error::Serialization(e.to_string()))?;
    for t in 0..record.len() {
        let mut row = vec![t.to_string()];
        row.extend(record.signal.iter().map(|ch| format!("{}", ch[t])));
        w.write_record(&row).map_err(|e| Error::Serialization(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}
