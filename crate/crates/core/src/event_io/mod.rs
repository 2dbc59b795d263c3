//! Event data model and the two on-disk stream formats.
//!
//! CSV: first line `width,height`, then one `x,y,t,p` row per event with
//! `p` in `{1,-1}`. Binary: a 16-byte little-endian header (`EVG1`, u16
//! width, u16 height, u64 count) followed by 16-byte records (u16 x, u16 y,
//! u64 t, i8 p, 3 pad bytes).

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{invalid, Error, Result};

pub mod synth;

pub use synth::{synth_dataset, ClassSpec, Motion, PolarityMode, Shape, SynthSpec};

/// Sign of the brightness change that triggered an event.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Polarity {
    On,
    Off,
}

impl Polarity {
    pub fn from_i8(p: i8) -> Option<Polarity> {
        match p {
            1 => Some(Polarity::On),
            -1 => Some(Polarity::Off),
            _ => None,
        }
    }

    pub fn as_i8(self) -> i8 {
        match self {
            Polarity::On => 1,
            Polarity::Off => -1,
        }
    }

    pub fn sign(self) -> f64 {
        f64::from(self.as_i8())
    }
}

/// One address-event: pixel column `x`, pixel row `y`, timestamp `t` in
/// microseconds and polarity `p`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Event {
    pub x: u16,
    pub y: u16,
    pub t: u64,
    pub p: Polarity,
}

impl Event {
    pub fn new(x: u16, y: u16, t: u64, p: Polarity) -> Self {
        Event { x, y, t, p }
    }
}

/// Time-ordered events from one sensor of known geometry.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EventStream {
    events: Vec<Event>,
    width: u16,
    height: u16,
    pub label: Option<usize>,
}

impl EventStream {
    /// Validates coordinates against the geometry and sorts by timestamp
    /// (stable, so simultaneous events keep their input order).
    pub fn new(
        width: u16,
        height: u16,
        mut events: Vec<Event>,
        label: Option<usize>,
    ) -> Result<Self> {
        if let Some(e) = events.iter().find(|e| e.x >= width || e.y >= height) {
            return Err(invalid!(
                "event ({}, {}) outside {}x{} sensor",
                e.x,
                e.y,
                width,
                height
            ));
        }
        events.sort_by_key(|e| e.t);
        Ok(EventStream {
            events,
            width,
            height,
            label,
        })
    }

    pub fn empty(width: u16, height: u16) -> Self {
        EventStream {
            events: Vec::new(),
            width,
            height,
            label: None,
        }
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn width(&self) -> u16 {
        self.width
    }

    pub fn height(&self) -> u16 {
        self.height
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// First and last timestamp, if any events exist.
    pub fn time_span(&self) -> Option<(u64, u64)> {
        Some((self.events.first()?.t, self.events.last()?.t))
    }

    /// Events with `t_start <= t < t_end`.
    pub fn window(&self, t_start: f64, t_end: f64) -> &[Event] {
        let lo = self.events.partition_point(|e| (e.t as f64) < t_start);
        let hi = self.events.partition_point(|e| (e.t as f64) < t_end);
        &self.events[lo..hi.max(lo)]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StreamFormat {
    Csv,
    Bin,
}

impl StreamFormat {
    /// `.csv` maps to CSV; `.bin` and `.evt` map to the binary format.
    pub fn from_path(path: &Path) -> Option<StreamFormat> {
        match path.extension()?.to_str()? {
            "csv" => Some(StreamFormat::Csv),
            "bin" | "evt" => Some(StreamFormat::Bin),
            _ => None,
        }
    }

    pub fn extension(self) -> &'static str {
        match self {
            StreamFormat::Csv => "csv",
            StreamFormat::Bin => "bin",
        }
    }
}

const BIN_MAGIC: &[u8; 4] = b"EVG1";

pub fn read_stream(path: &Path, format: StreamFormat) -> Result<EventStream> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    match format {
        StreamFormat::Csv => parse_csv(reader),
        StreamFormat::Bin => parse_bin(reader),
    }
}

pub fn write_stream(stream: &EventStream, path: &Path, format: StreamFormat) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    match format {
        StreamFormat::Csv => encode_csv(stream, &mut w),
        StreamFormat::Bin => encode_bin(stream, &mut w),
    }
    .and_then(|_| w.flush())
    .map_err(|e| Error::io(path, e))
}

pub fn parse_csv<R: BufRead>(reader: R) -> Result<EventStream> {
    let mut lines = reader.lines().enumerate();
    let (width, height) = match lines.next() {
        Some((_, line)) => {
            let line = line?;
            let fields: Vec<&str> = line.trim_end().split(',').collect();
            if fields.len() != 2 {
                return Err(Error::MalformedLine {
                    line: 1,
                    msg: format!("expected header `width,height`, got {line:?}"),
                });
            }
            (
                parse_field::<u16>(fields[0], 1, "width")?,
                parse_field::<u16>(fields[1], 1, "height")?,
            )
        }
        None => {
            return Err(Error::MalformedLine {
                line: 1,
                msg: "missing header".into(),
            })
        }
    };
    let mut events = Vec::new();
    for (idx, line) in lines {
        let line = line?;
        let lineno = idx + 1;
        let line = line.trim_end();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            return Err(Error::MalformedLine {
                line: lineno,
                msg: format!("expected 4 fields, got {}", fields.len()),
            });
        }
        let x = parse_field::<u16>(fields[0], lineno, "x")?;
        let y = parse_field::<u16>(fields[1], lineno, "y")?;
        let t = parse_field::<u64>(fields[2], lineno, "t")?;
        let p = parse_field::<i8>(fields[3], lineno, "p")?;
        let p = Polarity::from_i8(p).ok_or_else(|| Error::MalformedLine {
            line: lineno,
            msg: format!("polarity {p} not in {{1,-1}}"),
        })?;
        if x >= width || y >= height {
            return Err(Error::MalformedLine {
                line: lineno,
                msg: format!("coordinate ({x}, {y}) outside {width}x{height} sensor"),
            });
        }
        events.push(Event { x, y, t, p });
    }
    EventStream::new(width, height, events, None)
}

fn parse_field<T: std::str::FromStr>(s: &str, line: usize, name: &str) -> Result<T> {
    s.trim().parse().map_err(|_| Error::MalformedLine {
        line,
        msg: format!("cannot parse {name} from {s:?}"),
    })
}

fn encode_csv<W: Write>(stream: &EventStream, w: &mut W) -> std::io::Result<()> {
    writeln!(w, "{},{}", stream.width, stream.height)?;
    for e in &stream.events {
        writeln!(w, "{},{},{},{}", e.x, e.y, e.t, e.p.as_i8())?;
    }
    Ok(())
}

pub fn parse_bin<R: Read>(mut reader: R) -> Result<EventStream> {
    let mut header = [0u8; 16];
    reader
        .read_exact(&mut header)
        .map_err(|_| Error::MalformedBytes {
            offset: 0,
            msg: "truncated header".into(),
        })?;
    if &header[0..4] != BIN_MAGIC {
        return Err(Error::MalformedBytes {
            offset: 0,
            msg: "bad magic, expected EVG1".into(),
        });
    }
    let width = u16::from_le_bytes([header[4], header[5]]);
    let height = u16::from_le_bytes([header[6], header[7]]);
    let count = u64::from_le_bytes(header[8..16].try_into().unwrap());
    let mut events = Vec::with_capacity(count.min(1 << 24) as usize);
    let mut rec = [0u8; 16];
    for i in 0..count {
        let offset = 16 + 16 * i;
        reader
            .read_exact(&mut rec)
            .map_err(|_| Error::MalformedBytes {
                offset,
                msg: format!("truncated record {i} of {count}"),
            })?;
        let x = u16::from_le_bytes([rec[0], rec[1]]);
        let y = u16::from_le_bytes([rec[2], rec[3]]);
        let t = u64::from_le_bytes(rec[4..12].try_into().unwrap());
        let p = Polarity::from_i8(rec[12] as i8).ok_or_else(|| Error::MalformedBytes {
            offset,
            msg: format!("polarity {} not in {{1,-1}}", rec[12] as i8),
        })?;
        if x >= width || y >= height {
            return Err(Error::MalformedBytes {
                offset,
                msg: format!("coordinate ({x}, {y}) outside {width}x{height} sensor"),
            });
        }
        events.push(Event { x, y, t, p });
    }
    EventStream::new(width, height, events, None)
}

fn encode_bin<W: Write>(stream: &EventStream, w: &mut W) -> std::io::Result<()> {
    w.write_all(BIN_MAGIC)?;
    w.write_all(&stream.width.to_le_bytes())?;
    w.write_all(&stream.height.to_le_bytes())?;
    w.write_all(&(stream.events.len() as u64).to_le_bytes())?;
    for e in &stream.events {
        let mut rec = [0u8; 16];
        rec[0..2].copy_from_slice(&e.x.to_le_bytes());
        rec[2..4].copy_from_slice(&e.y.to_le_bytes());
        rec[4..12].copy_from_slice(&e.t.to_le_bytes());
        rec[12] = e.p.as_i8() as u8;
        w.write_all(&rec)?;
    }
    Ok(())
}
