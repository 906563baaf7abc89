//! Synthetic moving-bar dataset generator.
//!
//! Four classes: a bar sweeping left, right, up, or down. RGB frames render
//! the bar (plus configurable noise); events fire at the pixels whose
//! brightness changes between consecutive frames, with positive polarity
//! where the bar arrives and negative where it leaves. Per-sample corruption
//! knobs make one or the other modality unreliable, which is what the fusion
//! ablations train on.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{write_meta, EventResult, SampleMeta, Split};

/// Microseconds between consecutive RGB frames (~30 fps).
pub const FRAME_DT: u64 = 33_333;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MotionClass {
    Left,
    Right,
    Up,
    Down,
}

impl MotionClass {
    pub const ALL: [MotionClass; 4] = [
        MotionClass::Left,
        MotionClass::Right,
        MotionClass::Up,
        MotionClass::Down,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MotionClass::Left => "bar_left",
            MotionClass::Right => "bar_right",
            MotionClass::Up => "bar_up",
            MotionClass::Down => "bar_down",
        }
    }

    fn horizontal(self) -> bool {
        matches!(self, MotionClass::Left | MotionClass::Right)
    }
}

#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub out_root: PathBuf,
    pub samples_per_class: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    /// Bar thickness in pixels.
    pub thickness: usize,
    /// Bar speed in pixels per frame.
    pub speed: usize,
    /// Start-position jitter amplitude in pixels (0 gives exactly
    /// mirror-symmetric left/right pairs).
    pub jitter: usize,
    /// Gaussian noise added to every RGB frame.
    pub rgb_noise_std: f64,
    /// Fraction of samples whose RGB frames carry no usable signal: the bar
    /// is omitted and only dark noise remains.
    pub rgb_destroy_frac: f64,
    /// Fraction of samples whose event stream is decimated.
    pub event_degrade_frac: f64,
    /// Probability of keeping an event when the stream is degraded.
    pub event_keep_prob: f64,
    /// Spurious events injected per corrupted window, as a fraction of the
    /// pixel count.
    pub event_noise_rate: f64,
    /// Train/val/test fractions per class.
    pub split_fractions: (f64, f64, f64),
}

impl SynthConfig {
    /// Clean, easily learnable data.
    pub fn clean(out_root: &Path, samples_per_class: usize, frames: usize, side: usize) -> Self {
        SynthConfig {
            out_root: out_root.to_path_buf(),
            samples_per_class,
            frames,
            height: side,
            width: side,
            thickness: (side / 12).max(2),
            speed: (side / 8).max(1),
            jitter: (side / 16).max(1),
            rgb_noise_std: 0.02,
            rgb_destroy_frac: 0.0,
            event_degrade_frac: 0.0,
            event_keep_prob: 1.0,
            event_noise_rate: 0.0,
            split_fractions: (0.6, 0.1, 0.3),
        }
    }

    /// Complementary-corruption benchmark: every sample carries RGB noise,
    /// most samples have their RGB contrast destroyed (near-dark frames, so
    /// the stream resembles the zeroed-stream ablation), and an independent
    /// fraction has its events decimated. Neither modality suffices alone.
    pub fn noisy_rgb(out_root: &Path, samples_per_class: usize, frames: usize, side: usize) -> Self {
        SynthConfig {
            thickness: (side / 6).max(3),
            speed: (side / 6).max(2),
            rgb_noise_std: 0.15,
            rgb_destroy_frac: 0.6,
            event_degrade_frac: 0.4,
            event_keep_prob: 0.0,
            event_noise_rate: 0.05,
            ..SynthConfig::clean(out_root, samples_per_class, frames, side)
        }
    }

    pub fn num_classes(&self) -> usize {
        MotionClass::ALL.len()
    }
}

#[derive(Debug, Clone, Default)]
pub struct SynthSummary {
    pub samples: usize,
    pub events: usize,
    pub per_split: [usize; 3],
}

struct BarTrack {
    /// Bar-occupied pixel interval start per frame (along the motion axis).
    positions: Vec<i64>,
    horizontal: bool,
    thickness: usize,
}

impl BarTrack {
    fn new(class: MotionClass, cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Self {
        let extent = if class.horizontal() { cfg.width } else { cfg.height };
        let max_start = (extent - cfg.thickness) as i64;
        let j = if cfg.jitter > 0 {
            rng.random_range(0..=cfg.jitter) as i64
        } else {
            0
        };
        let (start, step): (i64, i64) = match class {
            MotionClass::Right | MotionClass::Down => (j, cfg.speed as i64),
            MotionClass::Left | MotionClass::Up => (max_start - j, -(cfg.speed as i64)),
        };
        let positions = (0..cfg.frames)
            .map(|i| (start + step * i as i64).clamp(0, max_start))
            .collect();
        BarTrack {
            positions,
            horizontal: class.horizontal(),
            thickness: cfg.thickness,
        }
    }

    /// True when the bar covers pixel (x, y) at frame i.
    fn covers(&self, i: usize, x: usize, y: usize) -> bool {
        let along = if self.horizontal { x as i64 } else { y as i64 };
        let p = self.positions[i];
        along >= p && along < p + self.thickness as i64
    }
}

const BG: f64 = 0.08;
const FG: f64 = 0.92;

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.random::<f64>().max(1e-12);
    let u2: f64 = rng.random::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

fn render_rgb(
    track: &BarTrack,
    frame: usize,
    cfg: &SynthConfig,
    destroyed: bool,
    rng: &mut ChaCha8Rng,
) -> image::RgbImage {
    let (h, w) = (cfg.height, cfg.width);
    let (bg, fg, noise) = if destroyed {
        // no bar at all: the frame is dark noise with zero class signal
        (0.04, 0.04, 0.08)
    } else {
        (BG, FG, cfg.rgb_noise_std)
    };
    let mut img = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let base = if track.covers(frame, x, y) { fg } else { bg };
            let mut px = [0u8; 3];
            for c in &mut px {
                let v = (base + noise * gauss(rng)).clamp(0.0, 1.0);
                *c = (v * 255.0).round() as u8;
            }
            img.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    img
}

/// Events for the transition into frame `i`: +1 where the bar arrives, -1
/// where it leaves. All events of the transition share the window midpoint
/// timestamp, which keeps mirrored classes exactly mirror-symmetric.
fn transition_events(
    track: &BarTrack,
    i: usize,
    timestamps: &[u64],
    cfg: &SynthConfig,
) -> Vec<(u64, u16, u16, u8)> {
    let mut out = Vec::new();
    if i == 0 {
        return out;
    }
    let t_lo = timestamps[i - 1];
    let t_hi = timestamps[i];
    let t_mid = t_lo + (t_hi - t_lo) / 2;
    for y in 0..cfg.height {
        for x in 0..cfg.width {
            let before = track.covers(i - 1, x, y);
            let after = track.covers(i, x, y);
            if after && !before {
                out.push((t_mid, x as u16, y as u16, 1));
            } else if before && !after {
                out.push((t_mid, x as u16, y as u16, 0));
            }
        }
    }
    out
}

fn degrade_events(
    events: Vec<(u64, u16, u16, u8)>,
    cfg: &SynthConfig,
    timestamps: &[u64],
    rng: &mut ChaCha8Rng,
) -> Vec<(u64, u16, u16, u8)> {
    let mut kept: Vec<(u64, u16, u16, u8)> = events
        .into_iter()
        .filter(|_| rng.random::<f64>() < cfg.event_keep_prob)
        .collect();
    let spurious_per_window = (cfg.event_noise_rate * (cfg.height * cfg.width) as f64) as usize;
    for win in 1..timestamps.len() {
        for _ in 0..spurious_per_window {
            let t = rng.random_range(timestamps[win - 1] + 1..=timestamps[win]);
            kept.push((
                t,
                rng.random_range(0..cfg.width) as u16,
                rng.random_range(0..cfg.height) as u16,
                rng.random_range(0..2u8),
            ));
        }
    }
    kept.sort_by_key(|e| e.0);
    kept
}

fn split_of(index: usize, total: usize, fractions: (f64, f64, f64)) -> Split {
    let train_end = (total as f64 * fractions.0).round() as usize;
    let val_end = train_end + (total as f64 * fractions.1).round().max(1.0) as usize;
    if index < train_end {
        Split::Train
    } else if index < val_end.min(total) {
        Split::Val
    } else {
        Split::Test
    }
}

/// Writes the dataset tree under `cfg.out_root`. Fully deterministic for a
/// given (config, seed): every sample derives its own RNG stream.
pub fn synth_generate(cfg: &SynthConfig, seed: u64) -> EventResult<SynthSummary> {
    let mut summary = SynthSummary::default();
    // labels follow the loader's convention: alphabetical class order
    let mut sorted_names: Vec<&str> = MotionClass::ALL.iter().map(|c| c.name()).collect();
    sorted_names.sort_unstable();
    for (class_idx, class) in MotionClass::ALL.iter().enumerate() {
        let label = sorted_names.iter().position(|n| *n == class.name()).unwrap();
        for j in 0..cfg.samples_per_class {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream((class_idx * cfg.samples_per_class + j) as u64 + 1);
            let split = split_of(j, cfg.samples_per_class, cfg.split_fractions);
            let dir = cfg
                .out_root
                .join(split.dir())
                .join(class.name())
                .join(format!("sample_{j:04}"));
            fs::create_dir_all(&dir)?;

            let track = BarTrack::new(*class, cfg, &mut rng);
            let timestamps: Vec<u64> = (0..cfg.frames).map(|i| (i as u64 + 1) * FRAME_DT).collect();
            let rgb_destroyed = rng.random::<f64>() < cfg.rgb_destroy_frac;
            let events_degraded = rng.random::<f64>() < cfg.event_degrade_frac;

            for f in 0..cfg.frames {
                let img = render_rgb(&track, f, cfg, rgb_destroyed, &mut rng);
                img.save(dir.join(format!("frame_{f:03}.png")))
                    .map_err(|e| super::EventError::Image(e.to_string()))?;
            }

            let mut events = Vec::new();
            for f in 0..cfg.frames {
                events.extend(transition_events(&track, f, &timestamps, cfg));
            }
            if events_degraded {
                events = degrade_events(events, cfg, &timestamps, &mut rng);
            }
            let mut csv = String::with_capacity(events.len() * 16 + 16);
            csv.push_str("t,x,y,p\n");
            for (t, x, y, p) in &events {
                csv.push_str(&format!("{t},{x},{y},{p}\n"));
            }
            fs::write(dir.join("events.csv"), csv)?;
            write_meta(
                &dir.join("meta"),
                &SampleMeta {
                    label,
                    frames: cfg.frames,
                    height: cfg.height,
                    width: cfg.width,
                    timestamps,
                },
            )?;
            summary.samples += 1;
            summary.events += events.len();
            summary.per_split[match split {
                Split::Train => 0,
                Split::Val => 1,
                Split::Test => 2,
            }] += 1;
        }
    }
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::events::{load_dataset, parse_events, stack_events};
    use std::collections::HashSet;

    fn tmp_dir(tag: &str) -> PathBuf {
        let d = std::env::temp_dir().join(format!(
            "heatnet-synth-{tag}-{}-{}",
            std::process::id(),
            std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .unwrap()
                .as_nanos()
        ));
        fs::create_dir_all(&d).unwrap();
        d
    }

    fn tiny_cfg(dir: &Path) -> SynthConfig {
        let mut c = SynthConfig::clean(dir, 4, 3, 16);
        c.jitter = 0;
        c.rgb_noise_std = 0.0;
        c
    }

    #[test]
    fn mirror_symmetric_left_right_event_frames() {
        let dir = tmp_dir("mirror");
        let cfg = tiny_cfg(&dir);
        synth_generate(&cfg, 7).unwrap();
        let train = load_dataset(&dir, Split::Train).unwrap();
        let left = train
            .entries
            .iter()
            .position(|e| e.class_name == "bar_left" && e.id == "sample_0000")
            .unwrap();
        let right = train
            .entries
            .iter()
            .position(|e| e.class_name == "bar_right" && e.id == "sample_0000")
            .unwrap();
        let l = train.load::<f64>(left).unwrap();
        let r = train.load::<f64>(right).unwrap();
        let (t, h, w) = (cfg.frames, cfg.height, cfg.width);
        for f in 0..t {
            for c in 0..3 {
                for y in 0..h {
                    for x in 0..w {
                        let lv = l.events.at(&[f, c, y, x]);
                        let rv = r.events.at(&[f, c, y, w - 1 - x]);
                        assert_eq!(lv, rv, "frame {f} ch {c} ({x},{y})");
                    }
                }
            }
        }
        fs::remove_dir_all(dir).ok();
    }

    #[test]
    fn events_fire_whenever_bar_moves() {
        let dir = tmp_dir("fire");
        let cfg = tiny_cfg(&dir);
        synth_generate(&cfg, 9).unwrap();
        let train = load_dataset(&dir, Split::Train).unwrap();
        let s = train.load::<f64>(0).unwrap();
        // every frame after the first must contain events
        for f in 1..cfg.frames {
            let mut any = false;
            for c in 0..2 {
                for y in 0..cfg.height {
                    for x in 0..cfg.width {
                        if s.events.at(&[f, c, y, x]) > 0.0 {
                            any = true;
                        }
                    }
                }
            }
            assert!(any, "frame {f} has no events");
        }
        fs::remove_dir_all(dir).ok();
    }

    #[test]
    fn fixed_seed_reproduces_byte_identical_csv() {
        let d1 = tmp_dir("repro1");
        let d2 = tmp_dir("repro2");
        synth_generate(&SynthConfig::noisy_rgb(&d1, 2, 3, 16), 42).unwrap();
        synth_generate(&SynthConfig::noisy_rgb(&d2, 2, 3, 16), 42).unwrap();
        let f1 = fs::read(d1.join("train/bar_left/sample_0000/events.csv")).unwrap();
        let f2 = fs::read(d2.join("train/bar_left/sample_0000/events.csv")).unwrap();
        assert_eq!(f1, f2);
        fs::remove_dir_all(d1).ok();
        fs::remove_dir_all(d2).ok();
    }

    #[test]
    fn splits_are_disjoint_and_stratified() {
        let dir = tmp_dir("splits");
        let cfg = SynthConfig::clean(&dir, 10, 2, 16);
        synth_generate(&cfg, 3).unwrap();
        let mut seen = HashSet::new();
        let mut totals = [0usize; 3];
        for (i, split) in [Split::Train, Split::Val, Split::Test].into_iter().enumerate() {
            let ds = load_dataset(&dir, split).unwrap();
            assert_eq!(ds.classes.len(), 4);
            for e in &ds.entries {
                let key = (e.class_name.clone(), e.id.clone());
                assert!(seen.insert(key), "duplicate sample across splits");
            }
            totals[i] = ds.len();
        }
        assert_eq!(totals.iter().sum::<usize>(), 40);
        assert_eq!(totals[0], 24); // 60% of 10 per class
        fs::remove_dir_all(dir).ok();
    }

    #[test]
    fn disk_round_trip_events_bit_exact() {
        let dir = tmp_dir("roundtrip");
        let cfg = tiny_cfg(&dir);
        synth_generate(&cfg, 11).unwrap();
        let train = load_dataset(&dir, Split::Train).unwrap();
        let entry = &train.entries[0];
        // parse -> stack -> compare against a second parse of the same bytes
        let s1 = parse_events(&entry.dir.join("events.csv")).unwrap();
        let s2 = parse_events(&entry.dir.join("events.csv")).unwrap();
        assert_eq!(s1.points, s2.points);
        let meta = crate::events::parse_meta(&entry.dir.join("meta")).unwrap();
        let a = stack_events::<f64>(&s1, &meta.timestamps, meta.height, meta.width).unwrap();
        let b = stack_events::<f64>(&s2, &meta.timestamps, meta.height, meta.width).unwrap();
        assert_eq!(a.counts, b.counts);
        fs::remove_dir_all(dir).ok();
    }

    #[test]
    fn rgb_round_trip_within_one_255th() {
        let dir = tmp_dir("rgbround");
        let cfg = tiny_cfg(&dir);
        synth_generate(&cfg, 13).unwrap();
        let train = load_dataset(&dir, Split::Train).unwrap();
        let s = train.load::<f64>(0).unwrap();
        // noiseless frames hold only BG or FG values; quantization error < 1/255
        for &v in s.rgb.data() {
            let near_bg = (v - BG).abs() <= 1.0 / 255.0;
            let near_fg = (v - FG).abs() <= 1.0 / 255.0;
            assert!(near_bg || near_fg, "value {v}");
        }
        fs::remove_dir_all(dir).ok();
    }
}
