//! Detector events and the `cqed-clicks v1` text format.
//!
//! ```text
//! # cqed-clicks v1, tau_period_ns=4000, tau_pump_ns=2000, pulses_per_cycle=2000, cycles=3, seed=7
//! 0,1,1534
//! 0,2,90211
//! ```
//!
//! Rows are `cycle_id,detector,timestamp_ns`, sorted by cycle and then time.

use std::fmt;
use std::io::{BufRead, Write};

use thiserror::Error;

use crate::source::PulseSchedule;

pub const FORMAT_TAG: &str = "cqed-clicks";
pub const FORMAT_VERSION: &str = "v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Detector {
    One,
    Two,
}

impl Detector {
    pub fn index(self) -> usize {
        match self {
            Detector::One => 0,
            Detector::Two => 1,
        }
    }

    pub fn label(self) -> u8 {
        self.index() as u8 + 1
    }

    pub fn from_label(label: u8) -> Option<Self> {
        match label {
            1 => Some(Detector::One),
            2 => Some(Detector::Two),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ClickRecord {
    pub cycle_id: u32,
    pub detector: Detector,
    /// Nanoseconds from the start of the cycle window.
    pub timestamp_ns: u64,
}

impl ClickRecord {
    fn order_key(&self) -> (u32, u64, Detector) {
        (self.cycle_id, self.timestamp_ns, self.detector)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StreamHeader {
    pub tau_period_ns: u64,
    pub tau_pump_ns: u64,
    pub pulses_per_cycle: u32,
    pub cycles: u32,
    pub seed: u64,
}

impl StreamHeader {
    pub fn schedule(&self) -> PulseSchedule {
        PulseSchedule {
            tau_pump_ns: self.tau_pump_ns,
            tau_recycle_ns: self.tau_period_ns - self.tau_pump_ns,
            pulses_per_cycle: self.pulses_per_cycle,
        }
    }
}

impl fmt::Display for StreamHeader {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "# {FORMAT_TAG} {FORMAT_VERSION}, tau_period_ns={}, tau_pump_ns={}, pulses_per_cycle={}, cycles={}, seed={}",
            self.tau_period_ns, self.tau_pump_ns, self.pulses_per_cycle, self.cycles, self.seed
        )
    }
}

/// A complete click stream: header metadata plus all clicks in file order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClickStream {
    pub header: StreamHeader,
    pub clicks: Vec<ClickRecord>,
}

impl ClickStream {
    pub fn new(header: StreamHeader, mut clicks: Vec<ClickRecord>) -> Self {
        clicks.sort_by_key(ClickRecord::order_key);
        Self { header, clicks }
    }

    pub fn schedule(&self) -> PulseSchedule {
        self.header.schedule()
    }

    /// Total observation time in seconds (all cycles, full windows).
    pub fn observation_time(&self) -> f64 {
        self.header.cycles as f64 * self.schedule().cycle_window_ns() as f64 * 1e-9
    }

    pub fn count(&self, detector: Detector) -> usize {
        self.clicks.iter().filter(|c| c.detector == detector).count()
    }

    /// Contiguous runs of clicks sharing a cycle id, in order. Cycles
    /// without clicks are absent.
    pub fn cycles(&self) -> impl Iterator<Item = (u32, &[ClickRecord])> {
        self.clicks
            .chunk_by(|a, b| a.cycle_id == b.cycle_id)
            .map(|chunk| (chunk[0].cycle_id, chunk))
    }
}

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("missing or malformed header: {0}")]
    BadHeader(String),
    #[error("unsupported format {found:?} (expected {FORMAT_TAG} {FORMAT_VERSION})")]
    Version { found: String },
    #[error("line {line}: {reason}")]
    MalformedRow { line: usize, reason: String },
}

pub fn write_clicks<W: Write>(mut out: W, stream: &ClickStream) -> std::io::Result<()> {
    writeln!(out, "{}", stream.header)?;
    for c in &stream.clicks {
        writeln!(out, "{},{},{}", c.cycle_id, c.detector.label(), c.timestamp_ns)?;
    }
    out.flush()
}

pub fn parse_header(line: &str) -> Result<StreamHeader, FormatError> {
    let body = line
        .strip_prefix('#')
        .ok_or_else(|| FormatError::BadHeader("first line must start with '#'".into()))?
        .trim();
    let mut parts = body.split(',').map(str::trim);
    let tag = parts.next().unwrap_or_default();
    if tag != format!("{FORMAT_TAG} {FORMAT_VERSION}") {
        return Err(FormatError::Version {
            found: tag.to_string(),
        });
    }
    let mut fields = std::collections::HashMap::new();
    for part in parts {
        let (k, v) = part
            .split_once('=')
            .ok_or_else(|| FormatError::BadHeader(format!("expected key=value, got {part:?}")))?;
        fields.insert(k.trim(), v.trim());
    }
    fn field<T: std::str::FromStr>(
        fields: &std::collections::HashMap<&str, &str>,
        key: &str,
    ) -> Result<T, FormatError> {
        let raw = fields
            .get(key)
            .ok_or_else(|| FormatError::BadHeader(format!("missing {key}")))?;
        raw.parse()
            .map_err(|_| FormatError::BadHeader(format!("bad value for {key}: {raw:?}")))
    }
    let header = StreamHeader {
        tau_period_ns: field(&fields, "tau_period_ns")?,
        tau_pump_ns: field(&fields, "tau_pump_ns")?,
        pulses_per_cycle: field(&fields, "pulses_per_cycle")?,
        cycles: field(&fields, "cycles")?,
        seed: field(&fields, "seed")?,
    };
    if header.tau_pump_ns == 0 || header.tau_pump_ns >= header.tau_period_ns {
        return Err(FormatError::BadHeader(
            "need 0 < tau_pump_ns < tau_period_ns".into(),
        ));
    }
    if header.pulses_per_cycle == 0 {
        return Err(FormatError::BadHeader("pulses_per_cycle must be > 0".into()));
    }
    Ok(header)
}

pub fn read_clicks<R: BufRead>(input: R) -> Result<ClickStream, FormatError> {
    let mut lines = input.lines();
    let first = lines
        .next()
        .ok_or_else(|| FormatError::BadHeader("empty input".into()))??;
    let header = parse_header(&first)?;
    let window = header.schedule().cycle_window_ns();

    let mut clicks = Vec::new();
    let mut prev: Option<(u32, u64, Detector)> = None;
    for (i, line) in lines.enumerate() {
        let line = line?;
        let lineno = i + 2;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let bad = |reason: String| FormatError::MalformedRow {
            line: lineno,
            reason,
        };
        let cols: Vec<&str> = trimmed.split(',').map(str::trim).collect();
        if cols.len() != 3 {
            return Err(bad(format!("expected 3 columns, got {}", cols.len())));
        }
        let cycle_id: u32 = cols[0]
            .parse()
            .map_err(|_| bad(format!("bad cycle_id {:?}", cols[0])))?;
        let detector = cols[1]
            .parse::<u8>()
            .ok()
            .and_then(Detector::from_label)
            .ok_or_else(|| bad(format!("detector must be 1 or 2, got {:?}", cols[1])))?;
        let timestamp_ns: u64 = cols[2]
            .parse()
            .map_err(|_| bad(format!("bad timestamp {:?}", cols[2])))?;
        if cycle_id >= header.cycles {
            return Err(bad(format!(
                "cycle_id {cycle_id} outside header range (cycles={})",
                header.cycles
            )));
        }
        if timestamp_ns >= window {
            return Err(bad(format!(
                "timestamp {timestamp_ns} ns outside cycle window {window} ns"
            )));
        }
        let record = ClickRecord {
            cycle_id,
            detector,
            timestamp_ns,
        };
        let key = record.order_key();
        if prev.is_some_and(|p| (p.0, p.1) > (key.0, key.1)) {
            return Err(bad("rows not sorted by (cycle_id, timestamp_ns)".into()));
        }
        prev = Some(key);
        clicks.push(record);
    }
    Ok(ClickStream::new(header, clicks))
}
