//! Event file formats.
//!
//! CSV: UTF-8, header `x,y,t,p`, decimal integers, `p` in {0, 1} (1 = ON).
//!
//! Binary: a 16-byte header (`EVST`, u16 version = 1, u16 width, u16 height,
//! u32 record count, 2 pad bytes) followed by packed little-endian records
//! of `(u16 x, u16 y, i64 t, u8 p)`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{EventPoint, EventStream, Polarity, Resolution};
use crate::error::{Error, Result};

pub const BINARY_MAGIC: &[u8; 4] = b"EVST";
pub const BINARY_VERSION: u16 = 1;
const HEADER_LEN: usize = 16;
const RECORD_LEN: usize = 13;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EventFormat {
    #[default]
    Csv,
    Binary,
}

impl EventFormat {
    pub fn extension(self) -> &'static str {
        match self {
            EventFormat::Csv => "csv",
            EventFormat::Binary => "evst",
        }
    }
}

pub fn write_csv(stream: &EventStream) -> String {
    let mut out = String::with_capacity(16 + stream.len() * 16);
    out.push_str("x,y,t,p\n");
    for e in stream.events() {
        out.push_str(&format!("{},{},{},{}\n", e.x, e.y, e.t, e.p.as_bit()));
    }
    out
}

/// Parses CSV text. Record numbers in errors are 1-based line numbers.
pub fn read_csv(text: &str, resolution: Resolution) -> Result<EventStream> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header.trim() == "x,y,t,p" => {}
        Some((_, header)) => {
            return Err(Error::Parse {
                record: 1,
                message: format!("expected header `x,y,t,p`, found `{header}`"),
            })
        }
        None => {
            return Err(Error::Parse {
                record: 1,
                message: "missing header".into(),
            })
        }
    }
    let mut events = Vec::new();
    for (i, line) in lines {
        let line_no = i + 1;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let bad = |message: String| Error::Parse {
            record: line_no,
            message,
        };
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 4 {
            return Err(bad(format!("expected 4 fields, found {}", fields.len())));
        }
        let x = fields[0].parse::<u16>().map_err(|e| bad(format!("x: {e}")))?;
        let y = fields[1].parse::<u16>().map_err(|e| bad(format!("y: {e}")))?;
        let t = fields[2].parse::<i64>().map_err(|e| bad(format!("t: {e}")))?;
        let bit = fields[3].parse::<u8>().map_err(|e| bad(format!("p: {e}")))?;
        let p = Polarity::from_bit(bit).ok_or_else(|| bad(format!("polarity must be 0 or 1, got {bit}")))?;
        events.push(EventPoint { x, y, t, p });
    }
    EventStream::new(resolution, events)
}

pub fn write_binary(stream: &EventStream) -> Result<Vec<u8>> {
    let count = u32::try_from(stream.len())
        .map_err(|_| Error::contract("too many events for the binary format"))?;
    let (w, h) = stream.resolution();
    let mut out = Vec::with_capacity(HEADER_LEN + stream.len() * RECORD_LEN);
    out.extend_from_slice(BINARY_MAGIC);
    out.extend_from_slice(&BINARY_VERSION.to_le_bytes());
    out.extend_from_slice(&w.to_le_bytes());
    out.extend_from_slice(&h.to_le_bytes());
    out.extend_from_slice(&count.to_le_bytes());
    out.extend_from_slice(&[0, 0]);
    for e in stream.events() {
        out.extend_from_slice(&e.x.to_le_bytes());
        out.extend_from_slice(&e.y.to_le_bytes());
        out.extend_from_slice(&e.t.to_le_bytes());
        out.push(e.p.as_bit());
    }
    Ok(out)
}

/// Parses the binary format. Record numbers in errors are 1-based; record 0
/// denotes the header.
pub fn read_binary(bytes: &[u8]) -> Result<EventStream> {
    let header_err = |message: &str| Error::Parse {
        record: 0,
        message: message.into(),
    };
    if bytes.len() < HEADER_LEN {
        return Err(header_err("truncated header"));
    }
    if &bytes[0..4] != BINARY_MAGIC {
        return Err(header_err("bad magic, expected EVST"));
    }
    let u16_at = |at: usize| u16::from_le_bytes([bytes[at], bytes[at + 1]]);
    let version = u16_at(4);
    if version != BINARY_VERSION {
        return Err(header_err(&format!("unsupported version {version}")));
    }
    let resolution = (u16_at(6), u16_at(8));
    let count = u32::from_le_bytes(bytes[10..14].try_into().expect("4 bytes")) as usize;
    let body = &bytes[HEADER_LEN..];
    if body.len() != count * RECORD_LEN {
        let complete = body.len() / RECORD_LEN;
        return Err(Error::Parse {
            record: complete + 1,
            message: format!(
                "header declares {count} records but body holds {} bytes",
                body.len()
            ),
        });
    }
    let mut events = Vec::with_capacity(count);
    for (i, rec) in body.chunks_exact(RECORD_LEN).enumerate() {
        let p = Polarity::from_bit(rec[12]).ok_or_else(|| Error::Parse {
            record: i + 1,
            message: format!("polarity must be 0 or 1, got {}", rec[12]),
        })?;
        events.push(EventPoint {
            x: u16::from_le_bytes([rec[0], rec[1]]),
            y: u16::from_le_bytes([rec[2], rec[3]]),
            t: i64::from_le_bytes(rec[4..12].try_into().expect("8 bytes")),
            p,
        });
    }
    EventStream::new(resolution, events)
}

pub fn write_events(stream: &EventStream, path: &Path, format: EventFormat) -> Result<()> {
    let bytes = match format {
        EventFormat::Csv => write_csv(stream).into_bytes(),
        EventFormat::Binary => write_binary(stream)?,
    };
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads an event file. For the binary format the header's resolution must
/// equal `resolution`.
pub fn parse_events(path: &Path, format: EventFormat, resolution: Resolution) -> Result<EventStream> {
    match format {
        EventFormat::Csv => {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            read_csv(&text, resolution)
        }
        EventFormat::Binary => {
            let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
            let stream = read_binary(&bytes)?;
            if stream.resolution() != resolution {
                return Err(Error::Validation(format!(
                    "file declares resolution {:?}, expected {resolution:?}",
                    stream.resolution()
                )));
            }
            Ok(stream)
        }
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn header_only_csv_is_empty_stream() {
        let s = read_csv("x,y,t,p\n", (8, 8)).unwrap();
        assert!(s.is_empty());
    }

    #[test]
    fn csv_rows_are_sorted_by_time() {
        let s = read_csv("x,y,t,p\n3,4,100,1\n3,4,50,0\n", (8, 8)).unwrap();
        let ts: Vec<i64> = s.events().iter().map(|e| e.t).collect();
        assert_eq!(ts, vec![50, 100]);
        assert_eq!(s.events()[0].p, Polarity::Off);
    }

    #[test]
    fn malformed_csv_reports_line_number() {
        let err = read_csv("x,y,t,p\n1,1,5,1\n1,oops,6,0\n", (8, 8)).unwrap_err();
        match err {
            Error::Parse { record, .. } => assert_eq!(record, 3),
            other => panic!("unexpected {other:?}"),
        }
        let err = read_csv("x,y,t,p\n1,1,5,2\n", (8, 8)).unwrap_err();
        assert!(matches!(err, Error::Parse { record: 2, .. }));
    }

    #[test]
    fn out_of_bounds_coordinates_fail_validation() {
        let err = read_csv("x,y,t,p\n8,0,5,1\n", (8, 8)).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
    }

    #[test]
    fn binary_header_layout() {
        let s = EventStream::new(
            (640, 480),
            vec![EventPoint {
                x: 1,
                y: 2,
                t: 3,
                p: Polarity::On,
            }],
        )
        .unwrap();
        let b = write_binary(&s).unwrap();
        assert_eq!(b.len(), 16 + 13);
        assert_eq!(&b[0..4], b"EVST");
        assert_eq!(&b[4..6], &[1, 0]);
        assert_eq!(&b[6..8], &640u16.to_le_bytes());
        assert_eq!(&b[8..10], &480u16.to_le_bytes());
        assert_eq!(&b[10..14], &1u32.to_le_bytes());
        assert_eq!(&b[14..16], &[0, 0]);
        assert_eq!(&b[16..], &[1, 0, 2, 0, 3, 0, 0, 0, 0, 0, 0, 0, 1]);
    }

    #[test]
    fn truncated_binary_names_the_record() {
        let s = EventStream::new(
            (4, 4),
            (0..3)
                .map(|i| EventPoint {
                    x: i,
                    y: 0,
                    t: i as i64,
                    p: Polarity::Off,
                })
                .collect(),
        )
        .unwrap();
        let b = write_binary(&s).unwrap();
        let err = read_binary(&b[..b.len() - 5]).unwrap_err();
        assert!(matches!(err, Error::Parse { record: 3, .. }));
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(matches!(read_binary(&bad), Err(Error::Parse { record: 0, .. })));
    }

    fn arb_stream() -> impl Strategy<Value = EventStream> {
        proptest::collection::vec((0u16..64, 0u16..48, 0i64..1_000_000, any::<bool>()), 0..400).prop_map(
            |raw| {
                let events = raw
                    .into_iter()
                    .map(|(x, y, t, on)| EventPoint {
                        x,
                        y,
                        t,
                        p: if on { Polarity::On } else { Polarity::Off },
                    })
                    .collect();
                EventStream::new((64, 48), events).unwrap()
            },
        )
    }

    proptest! {
        #[test]
        fn csv_and_binary_roundtrip(stream in arb_stream()) {
            prop_assert_eq!(&read_csv(&write_csv(&stream), (64, 48)).unwrap(), &stream);
            prop_assert_eq!(&read_binary(&write_binary(&stream).unwrap()).unwrap(), &stream);
        }
    }
}
