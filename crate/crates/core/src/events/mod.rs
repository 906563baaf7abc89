//! Event-stream parsing, event-frame stacking, and paired dataset IO.
//!
//! On-disk layout: `root/<split>/<class>/<sample>/` holding 8-bit RGB frames
//! `frame_000.png..`, an `events.csv` with one `t,x,y,p` quadruple per line
//! (t in microseconds, p in {0,1}), and a `meta` file of `key=value` lines.

pub mod synth;

use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use thiserror::Error;

use crate::tensor::{Element, Tensor};

#[derive(Debug, Error)]
pub enum EventError {
    #[error("{path}: line {line}: malformed event `{content}`")]
    ParseLine {
        path: String,
        line: usize,
        content: String,
    },
    #[error("{path}: line {line}: {what} out of range")]
    FieldRange {
        path: String,
        line: usize,
        what: &'static str,
    },
    #[error("event ({x},{y}) outside sensor {w}x{h}")]
    OutOfBounds { x: u16, y: u16, w: usize, h: usize },
    #[error("timestamps must be strictly increasing")]
    BadTimestamps,
    #[error("meta: missing or invalid key `{0}`")]
    BadMeta(String),
    #[error("{0}: missing file")]
    Missing(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("image: {0}")]
    Image(String),
    #[error(transparent)]
    Tensor(#[from] crate::tensor::TensorError),
}

pub type EventResult<T> = Result<T, EventError>;

/// One asynchronous camera event.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EventPoint {
    /// Microsecond timestamp.
    pub t: u64,
    pub x: u16,
    pub y: u16,
    /// Polarity, +1 or -1.
    pub p: i8,
}

/// Time-sorted event sequence.
#[derive(Debug, Clone, Default)]
pub struct EventStream {
    pub points: Vec<EventPoint>,
    /// True when the source file was not time-sorted and had to be sorted.
    pub needed_sort: bool,
}

impl EventStream {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn check_bounds(&self, w: usize, h: usize) -> EventResult<()> {
        for e in &self.points {
            if e.x as usize >= w || e.y as usize >= h {
                return Err(EventError::OutOfBounds { x: e.x, y: e.y, w, h });
            }
        }
        Ok(())
    }
}

/// Parses `t,x,y,p` lines (header optional, p in {0,1} mapped to -1/+1) and
/// returns a time-sorted stream. Unsorted input is sorted with a warning
/// recorded on the stream.
pub fn parse_events(path: &Path) -> EventResult<EventStream> {
    let file = fs::File::open(path).map_err(|_| EventError::Missing(path.display().to_string()))?;
    let reader = BufReader::new(file);
    let pname = path.display().to_string();
    let mut points = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        // optional canonical header
        if idx == 0 && trimmed.eq_ignore_ascii_case("t,x,y,p") {
            continue;
        }
        let fields: Vec<&str> = trimmed.split(',').map(str::trim).collect();
        if fields.len() != 4 {
            return Err(EventError::ParseLine {
                path: pname,
                line: idx + 1,
                content: trimmed.to_string(),
            });
        }
        let parse_err = |_| EventError::ParseLine {
            path: pname.clone(),
            line: idx + 1,
            content: trimmed.to_string(),
        };
        let t: u64 = fields[0].parse().map_err(parse_err)?;
        let x: u16 = fields[1].parse().map_err(parse_err)?;
        let y: u16 = fields[2].parse().map_err(parse_err)?;
        let p_raw: u8 = fields[3].parse().map_err(parse_err)?;
        let p = match p_raw {
            0 => -1i8,
            1 => 1i8,
            _ => {
                return Err(EventError::FieldRange {
                    path: pname,
                    line: idx + 1,
                    what: "polarity",
                })
            }
        };
        points.push(EventPoint { t, x, y, p });
    }
    let sorted = points.windows(2).all(|w| w[0].t <= w[1].t);
    if !sorted {
        points.sort_by_key(|e| e.t);
        eprintln!("warning: {pname}: events were not time-sorted; sorted {} points", points.len());
    }
    Ok(EventStream {
        points,
        needed_sort: !sorted,
    })
}

/// Raw per-window polarity counts plus the number of dropped (out-of-window)
/// events. Counts are laid out [T,2,H,W] with channel 0 = positive events.
pub fn stack_event_counts(
    stream: &EventStream,
    timestamps: &[u64],
    h: usize,
    w: usize,
) -> EventResult<(Vec<u32>, usize)> {
    if timestamps.is_empty() || timestamps.windows(2).any(|p| p[0] >= p[1]) {
        return Err(EventError::BadTimestamps);
    }
    stream.check_bounds(w, h)?;
    let t_frames = timestamps.len();
    let mut counts = vec![0u32; t_frames * 2 * h * w];
    let mut dropped = 0usize;
    for e in &stream.points {
        // window i covers (ts[i-1], ts[i]]; window 0 covers [0, ts[0]]
        let win = match timestamps.iter().position(|&ts| e.t <= ts) {
            Some(i) => i,
            None => {
                dropped += 1;
                continue;
            }
        };
        let ch = if e.p > 0 { 0 } else { 1 };
        let idx = ((win * 2 + ch) * h + e.y as usize) * w + e.x as usize;
        counts[idx] += 1;
    }
    if dropped > 0 {
        eprintln!("warning: {dropped} events after the last frame timestamp were dropped");
    }
    Ok((counts, dropped))
}

/// Event frames aligned to the RGB timestamps: channel 0 counts positive
/// events, channel 1 negative, channel 2 the total, each max-normalized per
/// frame and channel into [0,1] (all-zero channels stay zero).
pub struct StackedFrames<T: Element> {
    pub frames: Tensor<T>,
    pub counts: Vec<u32>,
    pub dropped: usize,
}

pub fn stack_events<T: Element>(
    stream: &EventStream,
    timestamps: &[u64],
    h: usize,
    w: usize,
) -> EventResult<StackedFrames<T>> {
    let (counts, dropped) = stack_event_counts(stream, timestamps, h, w)?;
    let t_frames = timestamps.len();
    let hw = h * w;
    let mut data = vec![T::ZERO; t_frames * 3 * hw];
    for f in 0..t_frames {
        let pos = &counts[(f * 2) * hw..(f * 2 + 1) * hw];
        let neg = &counts[(f * 2 + 1) * hw..(f * 2 + 2) * hw];
        let total: Vec<u32> = pos.iter().zip(neg).map(|(a, b)| a + b).collect();
        for (ch, plane) in [pos, neg, &total[..]].into_iter().enumerate() {
            let max = plane.iter().copied().max().unwrap_or(0);
            if max == 0 {
                continue;
            }
            let inv = 1.0 / max as f64;
            let dst = &mut data[(f * 3 + ch) * hw..(f * 3 + ch + 1) * hw];
            for (&c, o) in plane.iter().zip(dst.iter_mut()) {
                *o = T::from_f64(c as f64 * inv);
            }
        }
    }
    Ok(StackedFrames {
        frames: Tensor::new(vec![t_frames, 3, h, w], data)?,
        counts,
        dropped,
    })
}

/// Parsed per-sample metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleMeta {
    pub label: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub timestamps: Vec<u64>,
}

pub fn parse_meta(path: &Path) -> EventResult<SampleMeta> {
    let text = fs::read_to_string(path).map_err(|_| EventError::Missing(path.display().to_string()))?;
    let mut label = None;
    let mut frames = None;
    let mut height = None;
    let mut width = None;
    let mut timestamps = None;
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| EventError::BadMeta(line.to_string()))?;
        match k {
            "label" => label = v.parse().ok(),
            "T" => frames = v.parse().ok(),
            "H" => height = v.parse().ok(),
            "W" => width = v.parse().ok(),
            "rgb_timestamps" => {
                timestamps = v
                    .split(',')
                    .map(|s| s.trim().parse::<u64>().ok())
                    .collect::<Option<Vec<u64>>>();
            }
            _ => {}
        }
    }
    let meta = SampleMeta {
        label: label.ok_or_else(|| EventError::BadMeta("label".into()))?,
        frames: frames.ok_or_else(|| EventError::BadMeta("T".into()))?,
        height: height.ok_or_else(|| EventError::BadMeta("H".into()))?,
        width: width.ok_or_else(|| EventError::BadMeta("W".into()))?,
        timestamps: timestamps.ok_or_else(|| EventError::BadMeta("rgb_timestamps".into()))?,
    };
    if meta.timestamps.len() != meta.frames {
        return Err(EventError::BadMeta("rgb_timestamps length".into()));
    }
    Ok(meta)
}

pub fn write_meta(path: &Path, meta: &SampleMeta) -> EventResult<()> {
    let ts: Vec<String> = meta.timestamps.iter().map(u64::to_string).collect();
    fs::write(
        path,
        format!(
            "label={}\nT={}\nH={}\nW={}\nrgb_timestamps={}\n",
            meta.label,
            meta.frames,
            meta.height,
            meta.width,
            ts.join(",")
        ),
    )?;
    Ok(())
}

/// Both modalities of one sample, ready for the backbone: values in [0,1],
/// same frame count on both streams.
#[derive(Debug, Clone)]
pub struct PairedSample<T: Element> {
    pub rgb: Tensor<T>,
    pub events: Tensor<T>,
    pub label: usize,
    pub timestamps: Vec<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn dir(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Split> {
        match s {
            "train" => Some(Split::Train),
            "val" => Some(Split::Val),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SampleEntry {
    pub class_idx: usize,
    pub class_name: String,
    pub id: String,
    pub dir: PathBuf,
}

/// A listed split: sample directories in deterministic (sorted) order.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub split: Split,
    pub classes: Vec<String>,
    pub entries: Vec<SampleEntry>,
}

/// Lists `root/<split>/<class>/<sample>` in sorted order. Returns an empty
/// dataset (with a log line) when the split directory is missing.
pub fn load_dataset(root: &Path, split: Split) -> EventResult<Dataset> {
    let dir = root.join(split.dir());
    let mut classes: Vec<String> = match fs::read_dir(&dir) {
        Ok(rd) => rd
            .filter_map(|e| e.ok())
            .filter(|e| e.path().is_dir())
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .collect(),
        Err(_) => {
            eprintln!("{}: 0 samples (missing split directory)", dir.display());
            return Ok(Dataset {
                split,
                classes: vec![],
                entries: vec![],
            });
        }
    };
    classes.sort();
    let mut entries = Vec::new();
    for (class_idx, class_name) in classes.iter().enumerate() {
        let cdir = dir.join(class_name);
        let mut ids: Vec<String> = fs::read_dir(&cdir)?
            .filter_map(|e| e.ok())
            .filter(|e| e.path().is_dir())
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .collect();
        ids.sort();
        for id in ids {
            entries.push(SampleEntry {
                class_idx,
                class_name: class_name.clone(),
                id: id.clone(),
                dir: cdir.join(&id),
            });
        }
    }
    if entries.is_empty() {
        eprintln!("{}: 0 samples", dir.display());
    }
    Ok(Dataset {
        split,
        classes,
        entries,
    })
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Loads one sample: decodes the RGB frames, parses and stacks events.
    pub fn load<T: Element>(&self, idx: usize) -> EventResult<PairedSample<T>> {
        let entry = &self.entries[idx];
        let meta = parse_meta(&entry.dir.join("meta"))?;
        if meta.label != entry.class_idx {
            return Err(EventError::BadMeta(format!(
                "label {} does not match class dir index {}",
                meta.label, entry.class_idx
            )));
        }
        let (h, w, t) = (meta.height, meta.width, meta.frames);
        let mut rgb = vec![T::ZERO; t * 3 * h * w];
        for f in 0..t {
            let path = entry.dir.join(format!("frame_{f:03}.png"));
            let img = image::open(&path)
                .map_err(|e| EventError::Image(format!("{}: {e}", path.display())))?
                .to_rgb8();
            if img.width() as usize != w || img.height() as usize != h {
                return Err(EventError::Image(format!("{}: unexpected dimensions", path.display())));
            }
            for y in 0..h {
                for x in 0..w {
                    let px = img.get_pixel(x as u32, y as u32);
                    for c in 0..3 {
                        rgb[((f * 3 + c) * h + y) * w + x] = T::from_f64(px[c] as f64 / 255.0);
                    }
                }
            }
        }
        let stream = parse_events(&entry.dir.join("events.csv"))?;
        stream.check_bounds(w, h)?;
        let stacked = stack_events::<T>(&stream, &meta.timestamps, h, w)?;
        Ok(PairedSample {
            rgb: Tensor::new(vec![t, 3, h, w], rgb)?,
            events: stacked.frames,
            label: meta.label,
            timestamps: meta.timestamps,
        })
    }

    /// Loads every sample in parallel; unloadable samples are skipped with a
    /// logged path. Order is preserved.
    pub fn load_all<T: Element>(&self) -> Vec<PairedSample<T>> {
        let loaded: Vec<Option<PairedSample<T>>> = (0..self.len())
            .into_par_iter()
            .map(|i| match self.load::<T>(i) {
                Ok(s) => Some(s),
                Err(e) => {
                    eprintln!("skipping {}: {e}", self.entries[i].dir.display());
                    None
                }
            })
            .collect();
        loaded.into_iter().flatten().collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn tmp_dir(tag: &str) -> PathBuf {
        let d = std::env::temp_dir().join(format!(
            "heatnet-test-{tag}-{}-{}",
            std::process::id(),
            std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .unwrap()
                .as_nanos()
        ));
        fs::create_dir_all(&d).unwrap();
        d
    }

    #[test]
    fn parse_empty_file() {
        let dir = tmp_dir("empty");
        let path = dir.join("events.csv");
        fs::File::create(&path).unwrap();
        let s = parse_events(&path).unwrap();
        assert_eq!(s.len(), 0);
        fs::remove_dir_all(dir).ok();
    }

    #[test]
    fn parse_well_formed_preserves_fields() {
        let dir = tmp_dir("ok");
        let path = dir.join("events.csv");
        let mut f = fs::File::create(&path).unwrap();
        writeln!(f, "t,x,y,p").unwrap();
        writeln!(f, "10,3,4,1").unwrap();
        writeln!(f, "20,0,0,0").unwrap();
        writeln!(f, "30,7,2,1").unwrap();
        drop(f);
        let s = parse_events(&path).unwrap();
        assert_eq!(s.len(), 3);
        assert_eq!(s.points[0], EventPoint { t: 10, x: 3, y: 4, p: 1 });
        assert_eq!(s.points[1], EventPoint { t: 20, x: 0, y: 0, p: -1 });
        assert!(!s.needed_sort);
        fs::remove_dir_all(dir).ok();
    }

    #[test]
    fn parse_error_names_line() {
        let dir = tmp_dir("bad");
        let path = dir.join("events.csv");
        fs::write(&path, "abc\n").unwrap();
        let err = parse_events(&path).unwrap_err().to_string();
        assert!(err.contains("line 1"), "got {err}");
        fs::remove_dir_all(dir).ok();
    }

    #[test]
    fn parse_unsorted_auto_sorts() {
        let dir = tmp_dir("unsorted");
        let path = dir.join("events.csv");
        fs::write(&path, "30,1,1,1\n10,2,2,0\n20,3,3,1\n").unwrap();
        let s = parse_events(&path).unwrap();
        assert!(s.needed_sort);
        assert!(s.points.windows(2).all(|w| w[0].t <= w[1].t));
        fs::remove_dir_all(dir).ok();
    }

    #[test]
    fn stack_empty_stream_zero_tensor() {
        let s = EventStream::default();
        let out = stack_events::<f64>(&s, &[100, 200], 4, 4).unwrap();
        assert_eq!(out.frames.shape(), &[2, 3, 4, 4]);
        assert_eq!(out.frames.max_abs(), 0.0);
    }

    #[test]
    fn stack_counts_and_normalization() {
        // 5 positive events at one pixel in window 0
        let points = (0..5)
            .map(|i| EventPoint { t: 10 + i, x: 1, y: 2, p: 1 })
            .collect();
        let s = EventStream { points, needed_sort: false };
        let out = stack_events::<f64>(&s, &[100, 200], 4, 4).unwrap();
        // raw count 5 retrievable
        assert_eq!(out.counts[(0 * 2) * 16 + 2 * 4 + 1], 5);
        // normalized channel-0 value 1.0
        assert_eq!(out.frames.at(&[0, 0, 2, 1]), 1.0);
        // channel 1 empty, channel 2 also 1.0 at that pixel
        assert_eq!(out.frames.at(&[0, 1, 2, 1]), 0.0);
        assert_eq!(out.frames.at(&[0, 2, 2, 1]), 1.0);
    }

    #[test]
    fn stack_conserves_event_count() {
        let points = vec![
            EventPoint { t: 5, x: 0, y: 0, p: 1 },
            EventPoint { t: 100, x: 1, y: 1, p: -1 },
            EventPoint { t: 150, x: 2, y: 3, p: 1 },
            EventPoint { t: 201, x: 3, y: 3, p: 1 }, // dropped
        ];
        let s = EventStream { points, needed_sort: false };
        let (counts, dropped) = stack_event_counts(&s, &[100, 200], 4, 4).unwrap();
        let total: u32 = counts.iter().sum();
        assert_eq!(total, 3);
        assert_eq!(dropped, 1);
    }

    #[test]
    fn stack_window_boundaries_inclusive_right() {
        let points = vec![
            EventPoint { t: 100, x: 0, y: 0, p: 1 }, // exactly ts[0] -> window 0
            EventPoint { t: 101, x: 0, y: 0, p: 1 }, // window 1
        ];
        let s = EventStream { points, needed_sort: false };
        let (counts, _) = stack_event_counts(&s, &[100, 200], 1, 1).unwrap();
        assert_eq!(counts[0], 1);
        assert_eq!(counts[2], 1);
    }

    #[test]
    fn stack_rejects_non_monotone_timestamps() {
        let s = EventStream::default();
        assert!(stack_event_counts(&s, &[200, 100], 2, 2).is_err());
        assert!(stack_event_counts(&s, &[100, 100], 2, 2).is_err());
    }

    #[test]
    fn stack_values_in_unit_interval() {
        let points = (0..50)
            .map(|i| EventPoint {
                t: i * 3,
                x: (i % 4) as u16,
                y: (i % 3) as u16,
                p: if i % 2 == 0 { 1 } else { -1 },
            })
            .collect();
        let s = EventStream { points, needed_sort: false };
        let out = stack_events::<f64>(&s, &[60, 120, 180], 3, 4).unwrap();
        for &v in out.frames.data() {
            assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn empty_root_lists_nothing() {
        let dir = tmp_dir("emptyroot");
        let ds = load_dataset(&dir, Split::Train).unwrap();
        assert!(ds.is_empty());
        fs::remove_dir_all(dir).ok();
    }
}
