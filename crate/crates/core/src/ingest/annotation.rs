//! MIT annotation format.
//!
//! Each annotation is a little-endian 16-bit word: the top 6 bits hold the
//! annotation code, the low 10 bits the sample interval since the previous
//! annotation. Pseudo-codes extend the stream: SKIP (59) carries a 32-bit
//! interval in the next four bytes (high half first), NUM/SUB/CHN set fields
//! of the preceding annotation, AUX (63) attaches the following bytes
//! (length in the interval field, padded to even) to the preceding one.

use super::Annotation;
use crate::{Error, Result};

const SKIP: u16 = 59;
const NUM: u16 = 60;
const SUB: u16 = 61;
const CHN: u16 = 62;
const AUX: u16 = 63;

const SYMBOLS: [&str; 42] = [
    "", "N", "L", "R", "a", "V", "F", "J", "A", "S", "E", "j", "/", "Q", "~", "", "|", "", "s", "T", "*", "D", "\"",
    "=", "p", "B", "^", "t", "+", "u", "?", "!", "[", "]", "e", "x", "f", "(", ")", "r", "", "",
];

/// MIT mnemonic for an annotation code (`[n]` for codes without one).
pub fn annotation_symbol(code: u8) -> String {
    match SYMBOLS.get(code as usize) {
        Some(s) if !s.is_empty() => (*s).to_string(),
        _ => format!("[{code}]"),
    }
}

/// Inverse of [`annotation_symbol`].
pub fn annotation_code(symbol: &str) -> Option<u8> {
    if let Some(pos) = SYMBOLS.iter().position(|s| !s.is_empty() && *s == symbol) {
        return Some(pos as u8);
    }
    symbol
        .strip_prefix('[')
        .and_then(|s| s.strip_suffix(']'))
        .and_then(|s| s.parse::<u8>().ok())
        .filter(|&c| (1..SKIP as u8).contains(&c))
}

fn read_u16(bytes: &[u8], at: usize) -> u16 {
    u16::from_le_bytes([bytes[at], bytes[at + 1]])
}

pub fn parse_wfdb_annotations(bytes: &[u8]) -> Result<Vec<Annotation>> {
    let mut out: Vec<Annotation> = Vec::new();
    let mut time: i64 = 0;
    let mut i = 0;
    while i + 2 <= bytes.len() {
        let word = read_u16(bytes, i);
        let code = word >> 10;
        let interval = word & 0x03FF;
        match code {
            0 if interval == 0 => break,
            0 => {
                time += interval as i64;
                i += 2;
            }
            SKIP => {
                if i + 6 > bytes.len() {
                    return Err(Error::Annotation {
                        offset: i,
                        message: "SKIP without its 4-byte interval".into(),
                    });
                }
                let hi = read_u16(bytes, i + 2) as u32;
                let lo = read_u16(bytes, i + 4) as u32;
                time += ((hi << 16) | lo) as i32 as i64;
                i += 6;
            }
            NUM | SUB | CHN | AUX => {
                let Some(last) = out.last_mut() else {
                    return Err(Error::Annotation {
                        offset: i,
                        message: format!("pseudo-annotation {code} before any annotation"),
                    });
                };
                match code {
                    NUM => last.num = interval as u8 as i8,
                    SUB => last.subtype = interval as u8 as i8,
                    CHN => last.channel = interval as u8,
                    _ => {
                        let len = interval as usize;
                        let start = i + 2;
                        if start + len > bytes.len() {
                            return Err(Error::Annotation {
                                offset: i,
                                message: format!(
                                    "AUX length {len} runs past end of stream ({} bytes left)",
                                    bytes.len() - start
                                ),
                            });
                        }
                        let raw = &bytes[start..start + len];
                        let text = String::from_utf8_lossy(raw).trim_end_matches('\0').to_string();
                        last.aux = Some(text);
                        i = start + len + (len & 1);
                        continue;
                    }
                }
                i += 2;
            }
            _ => {
                time += interval as i64;
                if time < 0 {
                    return Err(Error::Annotation {
                        offset: i,
                        message: format!("negative sample time {time}"),
                    });
                }
                out.push(Annotation::new(time as usize, annotation_symbol(code as u8)));
                i += 2;
            }
        }
    }
    Ok(out)
}

fn push_word(out: &mut Vec<u8>, code: u16, interval: u16) {
    out.extend_from_slice(&((code << 10) | (interval & 0x03FF)).to_le_bytes());
}

/// Encodes annotations (sorted by sample) into the MIT format.
pub fn write_wfdb_annotations(annotations: &[Annotation]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    let mut time: usize = 0;
    for (n, a) in annotations.iter().enumerate() {
        let code = annotation_code(&a.symbol)
            .ok_or_else(|| Error::InvalidArgument(format!("annotation {n}: unknown symbol {:?}", a.symbol)))?;
        if a.sample < time {
            return Err(Error::InvalidArgument(format!(
                "annotation {n}: sample {} precedes {time}",
                a.sample
            )));
        }
        let mut delta = a.sample - time;
        if delta > 0x03FF {
            let skip = i32::try_from(delta)
                .map_err(|_| Error::InvalidArgument(format!("annotation {n}: interval {delta} too large")))?
                as u32;
            push_word(&mut out, SKIP, 0);
            out.extend_from_slice(&((skip >> 16) as u16).to_le_bytes());
            out.extend_from_slice(&((skip & 0xFFFF) as u16).to_le_bytes());
            delta = 0;
        }
        push_word(&mut out, code as u16, delta as u16);
        time = a.sample;
        if a.subtype != 0 {
            push_word(&mut out, SUB, a.subtype as u8 as u16);
        }
        if a.channel != 0 {
            push_word(&mut out, CHN, a.channel as u16);
        }
        if a.num != 0 {
            push_word(&mut out, NUM, a.num as u8 as u16);
        }
        if let Some(aux) = &a.aux {
            let raw = aux.as_bytes();
            if raw.len() > 0x03FF {
                return Err(Error::InvalidArgument(format!("annotation {n}: aux text too long")));
            }
            push_word(&mut out, AUX, raw.len() as u16);
            out.extend_from_slice(raw);
            if raw.len() % 2 == 1 {
                out.push(0);
            }
        }
    }
    push_word(&mut out, 0, 0);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn three_beats_round_trip() {
        let anns = vec![
            Annotation::new(100, "N"),
            Annotation::new(300, "N"),
            Annotation::new(500, "V"),
        ];
        let bytes = write_wfdb_annotations(&anns).unwrap();
        assert_eq!(parse_wfdb_annotations(&bytes).unwrap(), anns);
    }

    #[test]
    fn empty_stream() {
        assert!(parse_wfdb_annotations(&[]).unwrap().is_empty());
        assert!(parse_wfdb_annotations(&[0, 0]).unwrap().is_empty());
    }

    #[test]
    fn rhythm_aux_and_long_gaps() {
        let anns = vec![
            Annotation::new(0, "+").with_aux("(N"),
            Annotation::new(2000, "N"),
            Annotation::new(70000, "+").with_aux("(AFIB"),
            Annotation::new(70001, "A"),
        ];
        let bytes = write_wfdb_annotations(&anns).unwrap();
        assert_eq!(parse_wfdb_annotations(&bytes).unwrap(), anns);
    }

    #[test]
    fn hand_encoded_stream() {
        // N at 18, then '+' at 20 with aux "(N\0"
        let mut b = Vec::new();
        push_word(&mut b, 1, 18);
        push_word(&mut b, 28, 2);
        push_word(&mut b, AUX, 3);
        b.extend_from_slice(b"(N\0\0");
        push_word(&mut b, 0, 0);
        let anns = parse_wfdb_annotations(&b).unwrap();
        assert_eq!(anns.len(), 2);
        assert_eq!(anns[0], Annotation::new(18, "N"));
        assert_eq!(anns[1].sample, 20);
        assert_eq!(anns[1].symbol, "+");
        assert_eq!(anns[1].aux.as_deref(), Some("(N"));
    }

    #[test]
    fn dangling_aux_length() {
        let mut b = Vec::new();
        push_word(&mut b, 1, 10);
        push_word(&mut b, AUX, 40);
        b.extend_from_slice(b"(AF");
        let err = parse_wfdb_annotations(&b).unwrap_err();
        assert!(matches!(err, Error::Annotation { offset: 2, .. }), "{err}");
    }

    #[test]
    fn aux_before_any_annotation() {
        let mut b = Vec::new();
        push_word(&mut b, AUX, 2);
        b.extend_from_slice(b"ab");
        assert!(parse_wfdb_annotations(&b).is_err());
    }

    #[test]
    fn symbol_table_inverse() {
        for code in 1..50u8 {
            let s = annotation_symbol(code);
            if code < SKIP as u8 {
                assert_eq!(annotation_code(&s), Some(code), "{code} {s}");
            }
        }
    }

    fn symbol_strategy() -> impl Strategy<Value = String> {
        prop::sample::select(vec!["N", "V", "A", "L", "R", "/", "f", "Q", "+", "~", "|"]).prop_map(String::from)
    }

    proptest! {
        #[test]
        fn annotation_stream_identity(
            gaps in prop::collection::vec(0usize..5000, 0..40),
            syms in prop::collection::vec(symbol_strategy(), 40),
            nums in prop::collection::vec(-3i8..3, 40),
        ) {
            let mut t = 0;
            let anns: Vec<Annotation> = gaps.iter().enumerate().map(|(i, g)| {
                t += g;
                let mut a = Annotation::new(t, syms[i].clone());
                a.num = nums[i];
                if a.symbol == "+" { a.aux = Some(format!("(R{i}")); }
                a
            }).collect();
            let bytes = write_wfdb_annotations(&anns).unwrap();
            prop_assert_eq!(parse_wfdb_annotations(&bytes).unwrap(), anns);
        }
    }
}
