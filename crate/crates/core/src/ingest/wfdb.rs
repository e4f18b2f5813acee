use std::fs;
use std::path::Path;

use super::{
    decode_format16_adu, decode_format212_adu, encode_format16, encode_format212, parse_wfdb_annotations,
    parse_wfdb_header, write_wfdb_annotations, ChannelInfo, EcgRecord, SignalFormat, SignalSpec, WfdbHeader,
};
use crate::{Error, Result};

/// Reads `<dir>/<name>.hea`, its signal file(s), and `<name>.<ann_ext>`
/// when that annotation file exists.
pub fn read_wfdb_record(dir: &Path, name: &str, ann_ext: Option<&str>) -> Result<EcgRecord> {
    let header = parse_wfdb_header(&fs::read(dir.join(format!("{name}.hea")))?)?;

    let channels: Vec<ChannelInfo> = header
        .signals
        .iter()
        .enumerate()
        .map(|(i, s)| ChannelInfo {
            name: if s.description.is_empty() {
                format!("ch{i}")
            } else {
                s.description.clone()
            },
            gain: s.gain,
            baseline: s.baseline,
            resolution_bits: s.adc_resolution,
        })
        .collect();

    // Signals sharing a file are interleaved in header order.
    let mut signal = vec![Vec::new(); header.n_signals];
    let mut i = 0;
    while i < header.signals.len() {
        let spec = &header.signals[i];
        let group: Vec<usize> = (i..header.signals.len())
            .take_while(|&j| header.signals[j].file_name == spec.file_name)
            .collect();
        if group.iter().any(|&j| header.signals[j].format != spec.format) {
            return Err(Error::Record(format!(
                "{}: mixed formats within one signal file",
                spec.file_name
            )));
        }
        let bytes = fs::read(dir.join(&spec.file_name))?;
        let n_ch = group.len();
        let n_samples = match header.n_samples {
            Some(n) => n,
            None => match spec.format {
                SignalFormat::Format212 => bytes.len() * 2 / 3 / n_ch,
                SignalFormat::Format16 => bytes.len() / 2 / n_ch,
            },
        };
        let adu = match spec.format {
            SignalFormat::Format212 => decode_format212_adu(&bytes, n_samples * n_ch)?,
            SignalFormat::Format16 => decode_format16_adu(&bytes, n_samples * n_ch)?,
        };
        for (slot, &j) in group.iter().enumerate() {
            signal[j] = (0..n_samples)
                .map(|t| channels[j].to_mv(adu[t * n_ch + slot]))
                .collect();
        }
        i += n_ch;
    }

    let annotations = match ann_ext {
        Some(ext) => {
            let path = dir.join(format!("{name}.{ext}"));
            if path.exists() {
                parse_wfdb_annotations(&fs::read(path)?)?
            } else {
                Vec::new()
            }
        }
        None => Vec::new(),
    };

    EcgRecord::new(header.record_name, channels, signal, header.fs, annotations)
}

/// Writes `<record_id>.hea`, `.dat` (all channels interleaved), and `.atr`
/// when the record has annotations.
pub fn write_wfdb_record(dir: &Path, record: &EcgRecord, format: SignalFormat) -> Result<()> {
    record.validate()?;
    let name = &record.record_id;
    let dat_name = format!("{name}.dat");
    let n_ch = record.channels.len();
    let (lo, hi) = format.adu_range();

    let mut adu = Vec::with_capacity(record.len() * n_ch);
    for t in 0..record.len() {
        for (c, ch) in record.channels.iter().enumerate() {
            let v = ch.to_adu(record.signal[c][t]);
            if !(lo..=hi).contains(&v) {
                return Err(Error::SampleRange {
                    value: v,
                    min: lo,
                    max: hi,
                });
            }
            adu.push(v);
        }
    }
    let bytes = match format {
        SignalFormat::Format212 => encode_format212(&adu)?.bytes,
        SignalFormat::Format16 => encode_format16(&adu)?,
    };
    fs::write(dir.join(&dat_name), bytes)?;

    let header = WfdbHeader {
        record_name: name.clone(),
        n_signals: n_ch,
        fs: record.fs,
        n_samples: Some(record.len()),
        signals: record
            .channels
            .iter()
            .enumerate()
            .map(|(c, ch)| SignalSpec {
                file_name: dat_name.clone(),
                format,
                gain: ch.gain,
                baseline: ch.baseline,
                units: "mV".into(),
                adc_resolution: match format {
                    SignalFormat::Format212 => 12,
                    SignalFormat::Format16 => 16,
                },
                adc_zero: ch.baseline,
                initial_value: adu.get(c).copied(),
                checksum: Some(
                    adu.iter()
                        .skip(c)
                        .step_by(n_ch)
                        .fold(0i32, |acc, &v| acc.wrapping_add(v)) as i16 as i32,
                ),
                block_size: 0,
                description: ch.name.clone(),
            })
            .collect(),
    };
    fs::write(dir.join(format!("{name}.hea")), header.to_text())?;

    if !record.annotations.is_empty() {
        fs::write(
            dir.join(format!("{name}.atr")),
            write_wfdb_annotations(&record.annotations)?,
        )?;
    }
    Ok(())
}
