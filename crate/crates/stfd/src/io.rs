//! On-disk artifacts: trace CSV, event CSV, prediction CSV and the
//! binary checkpoint format. Parse/emit round-trips are byte-identical.

use std::io::{BufRead, BufReader, Read, Write};

use crate::autodiff::{ParamStore, Scalar, Tensor};
use crate::error::{Error, Result};

/// Raw 3-axis acceleration record at a fixed sample rate.
#[derive(Debug, Clone, PartialEq)]
pub struct AccelTrace {
    pub sample_rate_hz: u32,
    pub samples: Vec<[f32; 3]>,
}

impl AccelTrace {
    pub fn new(sample_rate_hz: u32, samples: Vec<[f32; 3]>) -> Result<Self> {
        if sample_rate_hz == 0 {
            return Err(Error::Format("sample_rate_hz must be positive".into()));
        }
        if samples.is_empty() {
            return Err(Error::Data("trace has no samples".into()));
        }
        for (i, s) in samples.iter().enumerate() {
            if s.iter().any(|v| !v.is_finite()) {
                return Err(Error::Data(format!("non-finite sample at row {}", i + 1)));
            }
        }
        Ok(AccelTrace {
            sample_rate_hz,
            samples,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.len() as f64 / self.sample_rate_hz as f64
    }

    /// Single axis as f64 (0 = x, 1 = y, 2 = z).
    pub fn axis(&self, axis: usize) -> Vec<f64> {
        self.samples.iter().map(|s| s[axis] as f64).collect()
    }

    /// Contiguous sample range as a sub-trace.
    pub fn slice(&self, start: usize, len: usize) -> Result<AccelTrace> {
        if start + len > self.len() || len == 0 {
            return Err(Error::Data(format!(
                "slice [{start}, {}) out of range for trace of {} samples",
                start + len,
                self.len()
            )));
        }
        AccelTrace::new(self.sample_rate_hz, self.samples[start..start + len].to_vec())
    }
}

/// `sample_rate_hz=<int>` header, then one `x,y,z` row per sample.
pub fn parse_trace(reader: impl Read) -> Result<AccelTrace> {
    let mut lines = BufReader::new(reader).lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Format("empty trace file".into()))?
        .map_err(|e| Error::Format(format!("read failure: {e}")))?;
    let rate_str = header
        .strip_prefix("sample_rate_hz=")
        .ok_or_else(|| Error::Format(format!("bad trace header `{header}`")))?;
    let sample_rate_hz: u32 = rate_str
        .trim()
        .parse()
        .map_err(|_| Error::Format(format!("bad sample rate `{rate_str}`")))?;
    if sample_rate_hz == 0 {
        return Err(Error::Format("sample_rate_hz must be positive".into()));
    }
    let mut samples = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line.map_err(|e| Error::Format(format!("read failure: {e}")))?;
        if line.is_empty() {
            continue;
        }
        let row = i + 2; // 1-based, after header
        let mut vals = [0.0f32; 3];
        let mut parts = line.split(',');
        for v in vals.iter_mut() {
            let field = parts
                .next()
                .ok_or_else(|| Error::Data(format!("line {row}: expected 3 fields")))?;
            let parsed: f64 = field
                .trim()
                .parse()
                .map_err(|_| Error::Data(format!("line {row}: non-numeric field `{field}`")))?;
            if !parsed.is_finite() {
                return Err(Error::Data(format!("line {row}: non-finite value")));
            }
            *v = parsed as f32;
        }
        if parts.next().is_some() {
            return Err(Error::Data(format!("line {row}: expected 3 fields")));
        }
        samples.push(vals);
    }
    if samples.is_empty() {
        return Err(Error::Data("trace has no samples".into()));
    }
    AccelTrace::new(sample_rate_hz, samples)
}

pub fn emit_trace(trace: &AccelTrace, mut writer: impl Write) -> Result<()> {
    let w = |e: std::io::Error| Error::Format(format!("write failure: {e}"));
    writeln!(writer, "sample_rate_hz={}", trace.sample_rate_hz).map_err(w)?;
    for s in &trace.samples {
        writeln!(writer, "{},{},{}", s[0], s[1], s[2]).map_err(w)?;
    }
    Ok(())
}

/// `emit_trace` into an owned string.
pub fn trace_to_string(trace: &AccelTrace) -> String {
    let mut buf = Vec::new();
    emit_trace(trace, &mut buf).expect("in-memory write");
    String::from_utf8(buf).expect("ascii output")
}

/// Ordered, disjoint "in bed" intervals in seconds.
#[derive(Debug, Clone, PartialEq)]
pub struct EventList {
    events: Vec<(f64, f64)>,
}

impl EventList {
    /// Sorts and validates: 0 <= onset < offset, strictly increasing,
    /// non-overlapping.
    pub fn new(mut events: Vec<(f64, f64)>) -> Result<Self> {
        events.sort_by(|a, b| a.0.total_cmp(&b.0));
        for (i, &(on, off)) in events.iter().enumerate() {
            if !on.is_finite() || !off.is_finite() {
                return Err(Error::Data(format!("event {i}: non-finite boundary")));
            }
            if on < 0.0 {
                return Err(Error::Data(format!("event {i}: negative onset {on}")));
            }
            if on >= off {
                return Err(Error::Data(format!(
                    "event {i}: onset {on} not before offset {off}"
                )));
            }
            if i > 0 && events[i - 1].1 > on {
                return Err(Error::Data(format!(
                    "event {i}: overlaps previous event ending at {}",
                    events[i - 1].1
                )));
            }
        }
        Ok(EventList { events })
    }

    pub fn empty() -> Self {
        EventList { events: Vec::new() }
    }

    pub fn events(&self) -> &[(f64, f64)] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn contains(&self, t: f64) -> bool {
        self.events.iter().any(|&(on, off)| t >= on && t < off)
    }

    /// Total covered time.
    pub fn total_duration(&self) -> f64 {
        self.events.iter().map(|(on, off)| off - on).sum()
    }
}

/// One `onset_s,offset_s` row per event.
pub fn parse_events(reader: impl Read) -> Result<EventList> {
    let mut events = Vec::new();
    for (i, line) in BufReader::new(reader).lines().enumerate() {
        let line = line.map_err(|e| Error::Format(format!("read failure: {e}")))?;
        if line.is_empty() {
            continue;
        }
        let row = i + 1;
        let (a, b) = line
            .split_once(',')
            .ok_or_else(|| Error::Data(format!("line {row}: expected 2 fields")))?;
        let onset: f64 = a
            .trim()
            .parse()
            .map_err(|_| Error::Data(format!("line {row}: non-numeric onset `{a}`")))?;
        let offset: f64 = b
            .trim()
            .parse()
            .map_err(|_| Error::Data(format!("line {row}: non-numeric offset `{b}`")))?;
        events.push((onset, offset));
    }
    EventList::new(events)
}

pub fn emit_events(events: &EventList, mut writer: impl Write) -> Result<()> {
    for (on, off) in events.events() {
        writeln!(writer, "{on},{off}").map_err(|e| Error::Format(format!("write failure: {e}")))?;
    }
    Ok(())
}

/// `emit_events` into an owned string.
pub fn events_to_string(events: &EventList) -> String {
    let mut buf = Vec::new();
    emit_events(events, &mut buf).expect("in-memory write");
    String::from_utf8(buf).expect("ascii output")
}

/// Per-frame binary occupancy at a fixed frame period.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameLabels {
    pub hop_s: f64,
    pub labels: Vec<u8>,
}

/// Frame t is labeled 1 iff its center time (t + 0.5) * hop_s lies
/// inside any event.
pub fn events_to_frames(events: &EventList, hop_s: f64, n_frames: usize) -> Result<FrameLabels> {
    if hop_s <= 0.0 || !hop_s.is_finite() {
        return Err(Error::Config(format!("hop_s must be positive, got {hop_s}")));
    }
    if n_frames == 0 {
        return Err(Error::Config("n_frames must be >= 1".into()));
    }
    let labels = (0..n_frames)
        .map(|t| {
            let center = (t as f64 + 0.5) * hop_s;
            u8::from(events.contains(center))
        })
        .collect();
    Ok(FrameLabels { hop_s, labels })
}

/// One emitted frame of the streaming detector.
#[derive(Debug, Clone, PartialEq)]
pub struct FramePrediction {
    pub frame_index: usize,
    pub time_s: f64,
    pub prob: f32,
    pub label: u8,
}

/// Lines `frame_index,time_s,prob,label`; time_s = frame_index * hop_s.
pub fn emit_predictions(preds: &[FramePrediction], mut writer: impl Write) -> Result<()> {
    for p in preds {
        writeln!(
            writer,
            "{},{},{},{}",
            p.frame_index, p.time_s, p.prob, p.label
        )
        .map_err(|e| Error::Format(format!("write failure: {e}")))?;
    }
    Ok(())
}

pub fn parse_predictions(reader: impl Read) -> Result<Vec<FramePrediction>> {
    let mut preds: Vec<FramePrediction> = Vec::new();
    for (i, line) in BufReader::new(reader).lines().enumerate() {
        let line = line.map_err(|e| Error::Format(format!("read failure: {e}")))?;
        if line.is_empty() {
            continue;
        }
        let row = i + 1;
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            return Err(Error::Data(format!("line {row}: expected 4 fields")));
        }
        let frame_index: usize = fields[0]
            .trim()
            .parse()
            .map_err(|_| Error::Data(format!("line {row}: bad frame index")))?;
        let time_s: f64 = fields[1]
            .trim()
            .parse()
            .map_err(|_| Error::Data(format!("line {row}: bad time")))?;
        let prob: f32 = fields[2]
            .trim()
            .parse()
            .map_err(|_| Error::Data(format!("line {row}: bad probability")))?;
        let label: u8 = fields[3]
            .trim()
            .parse()
            .map_err(|_| Error::Data(format!("line {row}: bad label")))?;
        if !(0.0..=1.0).contains(&prob) || label > 1 {
            return Err(Error::Data(format!("line {row}: value out of range")));
        }
        if let Some(prev) = preds.last() {
            if frame_index != prev.frame_index + 1 {
                return Err(Error::Data(format!(
                    "line {row}: frame index {frame_index} not consecutive"
                )));
            }
        }
        preds.push(FramePrediction {
            frame_index,
            time_s,
            prob,
            label,
        });
    }
    Ok(preds)
}

// ---------------------------------------------------------------------------
// checkpoint binary format
// ---------------------------------------------------------------------------

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"STFD";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Layout: magic, version u32 LE, entry count u32 LE, then per entry
/// name_len u16 LE, UTF-8 name, rank u8, dims u32 LE each, f32 LE payload.
pub fn write_checkpoint<T: Scalar>(params: &ParamStore<T>, mut writer: impl Write) -> Result<()> {
    let w = |e: std::io::Error| Error::Format(format!("write failure: {e}"));
    writer.write_all(CHECKPOINT_MAGIC).map_err(w)?;
    writer.write_all(&CHECKPOINT_VERSION.to_le_bytes()).map_err(w)?;
    writer
        .write_all(&(params.len() as u32).to_le_bytes())
        .map_err(w)?;
    for (name, t) in params.iter() {
        let name_bytes = name.as_bytes();
        if name_bytes.len() > u16::MAX as usize {
            return Err(Error::Format(format!("parameter name too long: `{name}`")));
        }
        let shape = t.shape();
        if shape.len() > u8::MAX as usize {
            return Err(Error::Format(format!("tensor rank too large for `{name}`")));
        }
        writer
            .write_all(&(name_bytes.len() as u16).to_le_bytes())
            .map_err(w)?;
        writer.write_all(name_bytes).map_err(w)?;
        writer.write_all(&[shape.len() as u8]).map_err(w)?;
        for d in &shape {
            writer.write_all(&(*d as u32).to_le_bytes()).map_err(w)?;
        }
        let data = t.to_vec();
        for v in &data {
            let f = Scalar::to_f32(*v);
            if !f.is_finite() {
                return Err(Error::Data(format!("non-finite value in `{name}`")));
            }
            writer.write_all(&f.to_le_bytes()).map_err(w)?;
        }
    }
    Ok(())
}

pub fn read_checkpoint<T: Scalar>(mut reader: impl Read) -> Result<ParamStore<T>> {
    fn take<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        r.read_exact(&mut buf)
            .map_err(|_| Error::Format("truncated checkpoint".into()))?;
        Ok(buf)
    }
    let magic: [u8; 4] = take(&mut reader)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Format(format!("bad checkpoint magic {magic:?}")));
    }
    let version = u32::from_le_bytes(take(&mut reader)?);
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let count = u32::from_le_bytes(take(&mut reader)?);
    let mut store = ParamStore::new();
    for _ in 0..count {
        let name_len = u16::from_le_bytes(take(&mut reader)?) as usize;
        let mut name_buf = vec![0u8; name_len];
        reader
            .read_exact(&mut name_buf)
            .map_err(|_| Error::Format("truncated checkpoint".into()))?;
        let name = String::from_utf8(name_buf)
            .map_err(|_| Error::Format("non-UTF-8 parameter name".into()))?;
        let rank = take::<1>(&mut reader)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u32::from_le_bytes(take(&mut reader)?) as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(T::from_f32(f32::from_le_bytes(take(&mut reader)?)));
        }
        store.insert(name, Tensor::from_vec(shape, data)?)?;
    }
    let mut extra = [0u8; 1];
    if reader.read(&mut extra).unwrap_or(0) != 0 {
        return Err(Error::Format("trailing bytes after checkpoint payload".into()));
    }
    Ok(store)
}

pub fn save_checkpoint<T: Scalar>(params: &ParamStore<T>, path: &std::path::Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    write_checkpoint(params, std::io::BufWriter::new(file))
}

pub fn load_checkpoint<T: Scalar>(path: &std::path::Path) -> Result<ParamStore<T>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    read_checkpoint(std::io::BufReader::new(file))
}
