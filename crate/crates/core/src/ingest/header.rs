use serde::{Deserialize, Serialize};

use super::DEFAULT_GAIN;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SignalFormat {
    /// 12-bit two's complement, two samples packed into three bytes.
    Format212,
    /// 16-bit two's complement, little-endian.
    Format16,
}

impl SignalFormat {
    pub fn from_code(code: u16) -> Result<Self> {
        match code {
            212 => Ok(Self::Format212),
            16 => Ok(Self::Format16),
            other => Err(Error::UnsupportedFormat { code: other }),
        }
    }

    pub fn code(self) -> u16 {
        match self {
            Self::Format212 => 212,
            Self::Format16 => 16,
        }
    }

    pub fn adu_range(self) -> (i32, i32) {
        match self {
            Self::Format212 => (-2048, 2047),
            Self::Format16 => (i16::MIN as i32, i16::MAX as i32),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignalSpec {
    pub file_name: String,
    pub format: SignalFormat,
    pub gain: f64,
    pub baseline: i32,
    pub units: String,
    pub adc_resolution: u32,
    pub adc_zero: i32,
    pub initial_value: Option<i32>,
    pub checksum: Option<i32>,
    pub block_size: u32,
    pub description: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WfdbHeader {
    pub record_name: String,
    pub n_signals: usize,
    pub fs: f64,
    pub n_samples: Option<usize>,
    pub signals: Vec<SignalSpec>,
}

fn header_err(line: usize, message: impl Into<String>) -> Error {
    Error::Header {
        line,
        message: message.into(),
    }
}

/// Leading decimal digits of `field` parsed as an integer.
fn leading_int(field: &str) -> Option<u16> {
    let end = field
        .char_indices()
        .find(|(_, c)| !c.is_ascii_digit())
        .map_or(field.len(), |(i, _)| i);
    field[..end].parse().ok()
}

/// Parses a WFDB `.hea` header (single-segment records only).
pub fn parse_wfdb_header(bytes: &[u8]) -> Result<WfdbHeader> {
    let text = std::str::from_utf8(bytes).map_err(|e| header_err(0, format!("not UTF-8: {e}")))?;
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));

    let (lineno, record_line) = lines.next().ok_or_else(|| header_err(1, "empty header"))?;
    let fields: Vec<&str> = record_line.split_whitespace().collect();
    if fields.len() < 2 {
        return Err(header_err(lineno, "record line needs a name and a signal count"));
    }
    let record_name = fields[0];
    if record_name.contains('/') {
        return Err(header_err(lineno, "multi-segment records are not supported"));
    }
    let n_signals: usize = fields[1]
        .parse()
        .map_err(|_| header_err(lineno, format!("bad signal count {:?}", fields[1])))?;
    if n_signals == 0 {
        return Err(header_err(lineno, "record declares 0 signals"));
    }
    let fs = match fields.get(2) {
        Some(f) => {
            // "360", "360/720", "360(0)"
            let end = f.find(['/', '(']).unwrap_or(f.len());
            let fs: f64 = f[..end]
                .parse()
                .map_err(|_| header_err(lineno, format!("bad sampling frequency {f:?}")))?;
            if fs.is_nan() || fs <= 0.0 {
                return Err(header_err(
                    lineno,
                    format!("sampling frequency must be positive, got {fs}"),
                ));
            }
            fs
        }
        None => 250.0,
    };
    let n_samples = match fields.get(3) {
        Some(f) => Some(
            f.parse()
                .map_err(|_| header_err(lineno, format!("bad sample count {f:?}")))?,
        ),
        None => None,
    };

    let mut signals = Vec::with_capacity(n_signals);
    for _ in 0..n_signals {
        let (lineno, line) = lines.next().ok_or_else(|| {
            header_err(
                lineno,
                format!("header declares {n_signals} signals but has {}", signals.len()),
            )
        })?;
        signals.push(parse_signal_line(lineno, line)?);
    }

    Ok(WfdbHeader {
        record_name: record_name.to_string(),
        n_signals,
        fs,
        n_samples,
        signals,
    })
}

fn parse_signal_line(lineno: usize, line: &str) -> Result<SignalSpec> {
    let fields: Vec<&str> = line.split_whitespace().collect();
    if fields.len() < 2 {
        return Err(header_err(lineno, "signal line needs a file name and a format"));
    }
    let code = leading_int(fields[1]).ok_or_else(|| header_err(lineno, format!("bad format field {:?}", fields[1])))?;
    let format = SignalFormat::from_code(code)?;

    let int_field = |idx: usize, what: &str| -> Result<Option<i32>> {
        match fields.get(idx) {
            Some(f) => f
                .parse()
                .map(Some)
                .map_err(|_| header_err(lineno, format!("bad {what} {f:?}"))),
            None => Ok(None),
        }
    };

    let adc_resolution = int_field(3, "ADC resolution")?.unwrap_or(12) as u32;
    let adc_zero = int_field(4, "ADC zero")?.unwrap_or(0);
    let initial_value = int_field(5, "initial value")?;
    let checksum = int_field(6, "checksum")?;
    let block_size = int_field(7, "block size")?.unwrap_or(0) as u32;
    let description = fields.get(8..).map(|d| d.join(" ")).unwrap_or_default();

    // gain[(baseline)][/units]
    let (mut gain, mut baseline, mut units) = (0.0, adc_zero, String::from("mV"));
    if let Some(field) = fields.get(2) {
        let (num_part, unit_part) = match field.split_once('/') {
            Some((n, u)) => (n, Some(u)),
            None => (*field, None),
        };
        let (gain_part, base_part) = match num_part.split_once('(') {
            Some((g, b)) => (g, Some(b.trim_end_matches(')'))),
            None => (num_part, None),
        };
        gain = gain_part
            .parse()
            .map_err(|_| header_err(lineno, format!("bad gain {field:?}")))?;
        if let Some(b) = base_part {
            baseline = b
                .parse()
                .map_err(|_| header_err(lineno, format!("bad baseline {field:?}")))?;
        }
        if let Some(u) = unit_part {
            units = u.to_string();
        }
    }
    if gain == 0.0 {
        log::info!("line {lineno}: no gain given, using {DEFAULT_GAIN} adu/mV");
        gain = DEFAULT_GAIN;
    }

    Ok(SignalSpec {
        file_name: fields[0].to_string(),
        format,
        gain,
        baseline,
        units,
        adc_resolution,
        adc_zero,
        initial_value,
        checksum,
        block_size,
        description,
    })
}

impl WfdbHeader {
    /// Renders the header back to `.hea` text.
    pub fn to_text(&self) -> String {
        let mut out = format!("{} {} {}", self.record_name, self.n_signals, self.fs);
        if let Some(n) = self.n_samples {
            out.push_str(&format!(" {n}"));
        }
        out.push('\n');
        for s in &self.signals {
            out.push_str(&format!(
                "{} {} {}({})/{} {} {} {} {} {}",
                s.file_name,
                s.format.code(),
                s.gain,
                s.baseline,
                s.units,
                s.adc_resolution,
                s.adc_zero,
                s.initial_value.unwrap_or(0),
                s.checksum.unwrap_or(0),
                s.block_size
            ));
            if !s.description.is_empty() {
                out.push(' ');
                out.push_str(&s.description);
            }
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const RECORD_100: &str = "100 2 360 650000\n\
        100.dat 212 200 11 1024 995 -22131 0 MLII\n\
        100.dat 212 200 11 1024 1011 20052 0 V5\n\
        # 69 M 1085 1629 x1\n\
        # Aldomet, Inderal\n";

    #[test]
    fn mitbih_record_100() {
        let h = parse_wfdb_header(RECORD_100.as_bytes()).unwrap();
        assert_eq!(h.record_name, "100");
        assert_eq!(h.n_signals, 2);
        assert_eq!(h.fs, 360.0);
        assert_eq!(h.n_samples, Some(650000));
        assert_eq!(h.signals.len(), 2);
        for s in &h.signals {
            assert_eq!(s.format, SignalFormat::Format212);
            assert_eq!(s.gain, 200.0);
            assert_eq!(s.adc_resolution, 11);
            assert_eq!(s.baseline, 1024);
        }
        assert_eq!(h.signals[0].description, "MLII");
        assert_eq!(h.signals[1].initial_value, Some(1011));
        assert_eq!(h.signals[1].checksum, Some(20052));
    }

    #[test]
    fn field_echo() {
        let text = "rec 2 360 650000\nrec.dat 16 100 16 0\nrec.dat 16 100 16 0\n";
        let h = parse_wfdb_header(text.as_bytes()).unwrap();
        assert_eq!(h.fs, 360.0);
        assert_eq!(h.n_samples, Some(650000));
        assert_eq!(h.signals[0].format, SignalFormat::Format16);
    }

    #[test]
    fn zero_channels_rejected() {
        let err = parse_wfdb_header(b"rec 0 360 1000\n").unwrap_err();
        assert!(matches!(err, Error::Header { line: 1, .. }), "{err}");
    }

    #[test]
    fn unsupported_format_named() {
        let err = parse_wfdb_header(b"rec 1 250 10\nrec.dat 310 200\n").unwrap_err();
        assert!(matches!(err, Error::UnsupportedFormat { code: 310 }));
        assert!(err.to_string().contains("310"));
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let err = parse_wfdb_header(b"# comment\nrec 1 abc 10\n").unwrap_err();
        assert!(matches!(err, Error::Header { line: 2, .. }), "{err}");
        let err = parse_wfdb_header(b"rec 1 250 10\nrec.dat 212 xx\n").unwrap_err();
        assert!(matches!(err, Error::Header { line: 2, .. }), "{err}");
    }

    #[test]
    fn missing_signal_lines() {
        let err = parse_wfdb_header(b"rec 2 250 10\nrec.dat 212 200\n").unwrap_err();
        assert!(matches!(err, Error::Header { .. }));
    }

    #[test]
    fn gain_with_baseline_and_units_and_default_gain() {
        let h = parse_wfdb_header(b"r 2 250.5\nr.dat 16 400(-12)/uV 16 0\nr.dat 16\n").unwrap();
        assert_eq!(h.fs, 250.5);
        assert_eq!(h.n_samples, None);
        assert_eq!(h.signals[0].gain, 400.0);
        assert_eq!(h.signals[0].baseline, -12);
        assert_eq!(h.signals[0].units, "uV");
        assert_eq!(h.signals[1].gain, DEFAULT_GAIN);
    }

    #[test]
    fn text_round_trip() {
        let h = parse_wfdb_header(RECORD_100.as_bytes()).unwrap();
        let again = parse_wfdb_header(h.to_text().as_bytes()).unwrap();
        assert_eq!(h, again);
    }
}
