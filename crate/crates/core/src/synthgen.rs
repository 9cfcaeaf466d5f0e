//! Class-conditional synthetic dataset generator. Samples carry short
//! coherent keypoint drifts in a class-biased group, a class bump in the
//! visual stream, and class-skewed token draws, so every stage of the
//! pipeline can be exercised end to end without real data.

use crate::datamodel::{
    save_manifest, DatasetManifest, Label, LabelSource, SampleRecord, Split,
};
use crate::error::{Error, Result};
use crate::featio::{write_keypoints_binary, write_text_tokens, write_visual_binary};
use crate::graph_topology::Group;
use crate::keypoint_features::{GroupSpec, KEYPOINT_COUNT};
use crate::seeding::{derive_sample_seed, seeded_rng};
use rand::Rng;
use std::fmt::Write as _;
use std::fs;
use std::ops::Range;
use std::path::Path;

/// Which keypoint group carries the micro-event signal for each class.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GroupBias {
    pub win: Group,
    pub loss: Group,
}

impl Default for GroupBias {
    fn default() -> Self {
        GroupBias {
            win: Group::Face,
            loss: Group::Hands,
        }
    }
}

impl GroupBias {
    pub fn group_for(&self, label: Label) -> Group {
        match label {
            Label::Win => self.win,
            Label::Loss => self.loss,
        }
    }
}

/// The shortest lag-offset horizon that downstream features rely on; the
/// generator refuses to emit sequences shorter than this.
pub const MIN_FRAMES: usize = 24;

/// Hard cap on event length: under half a second at 25 fps.
pub const MAX_EVENT_FRAMES: usize = 12;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub sample_count: usize,
    /// Probability a sample is labeled win.
    pub class_prior: f64,
    pub frames_min: usize,
    pub frames_max: usize,
    /// Injected micro-events per sample.
    pub event_count: usize,
    pub event_duration_frames: usize,
    /// Peak keypoint drift in normalized coordinate units.
    pub event_magnitude: f64,
    pub event_group_bias: GroupBias,
    pub visual_width: usize,
    /// Peak class-bump amplitude added to the visual stream in event windows.
    pub visual_magnitude: f64,
    pub vocab_size: usize,
    pub text_length: usize,
    /// Probability a token is drawn from the class zone rather than the
    /// shared zone of the vocabulary.
    pub text_separation: f64,
    /// Amplitude of the per-frame keypoint jitter and visual walk steps.
    pub noise_floor: f64,
    /// Sample ids are `{id_prefix}{index:04}`; distinct prefixes keep
    /// separately generated sets mergeable.
    pub id_prefix: String,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            sample_count: 80,
            class_prior: 0.75,
            frames_min: 600,
            frames_max: 3000,
            event_count: 6,
            event_duration_frames: 10,
            event_magnitude: 0.15,
            event_group_bias: GroupBias::default(),
            visual_width: 768,
            visual_magnitude: 0.5,
            vocab_size: 64,
            text_length: 24,
            text_separation: 0.7,
            noise_floor: 0.01,
            id_prefix: "synth".to_string(),
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sample_count == 0 {
            return Err(Error::validation("sample_count must be positive".to_string()));
        }
        if !(self.class_prior > 0.0 && self.class_prior < 1.0) {
            return Err(Error::validation(format!(
                "class_prior must lie strictly inside (0, 1), got {}",
                self.class_prior
            )));
        }
        if self.frames_min < MIN_FRAMES {
            return Err(Error::validation(format!(
                "frames_min must be at least {MIN_FRAMES}, got {}",
                self.frames_min
            )));
        }
        if self.frames_max < self.frames_min {
            return Err(Error::validation(format!(
                "frames_max {} is below frames_min {}",
                self.frames_max, self.frames_min
            )));
        }
        if self.event_duration_frames == 0 || self.event_duration_frames > MAX_EVENT_FRAMES {
            return Err(Error::validation(format!(
                "event_duration_frames must lie in 1..={MAX_EVENT_FRAMES}, got {}",
                self.event_duration_frames
            )));
        }
        for (name, v) in [
            ("event_magnitude", self.event_magnitude),
            ("visual_magnitude", self.visual_magnitude),
            ("noise_floor", self.noise_floor),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::validation(format!(
                    "{name} must be finite and non-negative, got {v}"
                )));
            }
        }
        if !(0.0..=1.0).contains(&self.text_separation) {
            return Err(Error::validation(format!(
                "text_separation must lie in [0, 1], got {}",
                self.text_separation
            )));
        }
        if self.visual_width == 0 {
            return Err(Error::validation("visual_width must be positive".to_string()));
        }
        if self.vocab_size < 4 {
            return Err(Error::validation(format!(
                "vocab_size must be at least 4 to hold shared and class zones, got {}",
                self.vocab_size
            )));
        }
        if self.text_length == 0 {
            return Err(Error::validation("text_length must be positive".to_string()));
        }
        if self.id_prefix.is_empty() || self.id_prefix.chars().any(char::is_whitespace) {
            return Err(Error::validation(format!(
                "id_prefix must be non-empty without whitespace, got '{}'",
                self.id_prefix
            )));
        }
        Ok(())
    }

    /// Key-value echo of every field, written next to generated data so a
    /// dataset directory is regenerable from its own contents.
    pub fn echo(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "sample_count = {}", self.sample_count);
        let _ = writeln!(s, "class_prior = {}", self.class_prior);
        let _ = writeln!(s, "frames_min = {}", self.frames_min);
        let _ = writeln!(s, "frames_max = {}", self.frames_max);
        let _ = writeln!(s, "event_count = {}", self.event_count);
        let _ = writeln!(s, "event_duration_frames = {}", self.event_duration_frames);
        let _ = writeln!(s, "event_magnitude = {}", self.event_magnitude);
        let _ = writeln!(s, "event_group_bias.win = {}", self.event_group_bias.win.name());
        let _ = writeln!(s, "event_group_bias.loss = {}", self.event_group_bias.loss.name());
        let _ = writeln!(s, "visual_width = {}", self.visual_width);
        let _ = writeln!(s, "visual_magnitude = {}", self.visual_magnitude);
        let _ = writeln!(s, "vocab_size = {}", self.vocab_size);
        let _ = writeln!(s, "text_length = {}", self.text_length);
        let _ = writeln!(s, "text_separation = {}", self.text_separation);
        let _ = writeln!(s, "noise_floor = {}", self.noise_floor);
        let _ = writeln!(s, "id_prefix = {}", self.id_prefix);
        let _ = writeln!(s, "seed = {}", self.seed);
        s
    }
}

/// One injected micro-event: frames `start..end` drift a contiguous run
/// of keypoints inside `group`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EventWindow {
    pub start: usize,
    pub end: usize,
    pub group: Group,
}

impl EventWindow {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start == self.end
    }
}

/// A generated record plus its ground-truth event windows for diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSample {
    pub record: SampleRecord,
    pub events: Vec<EventWindow>,
}

fn group_range(spec: &GroupSpec, group: Group) -> Range<usize> {
    match group {
        Group::Skeleton => spec.skeleton.clone(),
        Group::Face => spec.face.clone(),
        Group::Hands => spec.hands.clone(),
    }
}

/// Deterministic rest position for a keypoint: each group sits on its own
/// ellipse so the three streams occupy distinct screen regions.
fn rest_position(k: usize) -> (f64, f64) {
    let spec = GroupSpec::default();
    let (group, center) = if spec.skeleton.contains(&k) {
        (Group::Skeleton, (0.50, 0.55))
    } else if spec.face.contains(&k) {
        (Group::Face, (0.50, 0.20))
    } else {
        (Group::Hands, (0.50, 0.80))
    };
    let range = group_range(&spec, group);
    let i = k - range.start;
    let n = range.len();
    let angle = i as f64 / n as f64 * std::f64::consts::TAU;
    let radius = 0.06 + 0.015 * ((i * 7) % 5) as f64;
    let x = center.0 + radius * angle.cos();
    let y = center.1 + 0.6 * radius * angle.sin();
    (x.clamp(0.0, 1.0), y.clamp(0.0, 1.0))
}

/// Triangular ramp over an event window: zero at both ends, one at the
/// middle, so the motion is a drift rather than a jump.
fn triangle(t: usize, start: usize, len: usize) -> f64 {
    if len <= 1 {
        return 1.0;
    }
    let pos = (t - start) as f64 / (len - 1) as f64;
    1.0 - (2.0 * pos - 1.0).abs()
}

struct PlannedEvent {
    start: usize,
    len: usize,
    keypoints: Range<usize>,
    direction: (f64, f64),
}

/// Per-class bump direction for the visual stream; entries are ±1/√width
/// so the bump has unit norm at peak amplitude one.
fn visual_bump(seed: u64, label: Label, width: usize) -> Vec<f64> {
    let mut rng = seeded_rng(derive_sample_seed(seed, "visual_bump", &label.to_string(), &[]));
    let scale = 1.0 / (width as f64).sqrt();
    (0..width)
        .map(|_| if rng.gen_bool(0.5) { scale } else { -scale })
        .collect()
}

fn token_zones(vocab: usize) -> (Range<usize>, Range<usize>, Range<usize>) {
    let shared_end = vocab / 2;
    let win_end = shared_end + (vocab - shared_end) / 2;
    (0..shared_end, shared_end..win_end, win_end..vocab)
}

/// Generate `cfg.sample_count` labeled trimodal samples under `out_dir`,
/// writing feature files, `manifest.jsonl`, and `synth_config.txt`. Returns
/// the manifest plus per-sample event windows for diagnostics.
pub fn generate_dataset(cfg: &SynthConfig, out_dir: &Path) -> Result<(DatasetManifest, Vec<SynthSample>)> {
    cfg.validate()?;
    fs::create_dir_all(out_dir)?;
    let spec = GroupSpec::default();
    let bump_win = visual_bump(cfg.seed, Label::Win, cfg.visual_width);
    let bump_loss = visual_bump(cfg.seed, Label::Loss, cfg.visual_width);
    let (shared_zone, win_zone, loss_zone) = token_zones(cfg.vocab_size);

    let mut records = Vec::with_capacity(cfg.sample_count);
    let mut samples = Vec::with_capacity(cfg.sample_count);
    for idx in 0..cfg.sample_count {
        let sample_id = format!("{}{idx:04}", cfg.id_prefix);
        let mut rng = seeded_rng(derive_sample_seed(cfg.seed, "synth_sample", &sample_id, &[]));
        let label = if rng.gen_bool(cfg.class_prior) {
            Label::Win
        } else {
            Label::Loss
        };
        let frames = rng.gen_range(cfg.frames_min..=cfg.frames_max);
        let group = cfg.event_group_bias.group_for(label);
        let krange = group_range(&spec, group);

        let mut planned = Vec::with_capacity(cfg.event_count);
        for _ in 0..cfg.event_count {
            let len = cfg.event_duration_frames;
            let start = rng.gen_range(0..=frames - len);
            let subset_len = (krange.len() / 3).max(1);
            let k0 = krange.start + rng.gen_range(0..=krange.len() - subset_len);
            let angle = rng.gen_range(0.0..std::f64::consts::TAU);
            planned.push(PlannedEvent {
                start,
                len,
                keypoints: k0..k0 + subset_len,
                direction: (angle.cos(), angle.sin()),
            });
        }

        let mut kp = vec![0.0f32; frames * KEYPOINT_COUNT * 2];
        for t in 0..frames {
            for k in 0..KEYPOINT_COUNT {
                let (rx, ry) = rest_position(k);
                let mut x = rx + cfg.noise_floor * rng.gen_range(-1.0..=1.0);
                let mut y = ry + cfg.noise_floor * rng.gen_range(-1.0..=1.0);
                for ev in &planned {
                    if (ev.start..ev.start + ev.len).contains(&t) && ev.keypoints.contains(&k) {
                        let ramp = cfg.event_magnitude * triangle(t, ev.start, ev.len);
                        x += ramp * ev.direction.0;
                        y += ramp * ev.direction.1;
                    }
                }
                kp[(t * KEYPOINT_COUNT + k) * 2] = x.clamp(0.0, 1.0) as f32;
                kp[(t * KEYPOINT_COUNT + k) * 2 + 1] = y.clamp(0.0, 1.0) as f32;
            }
        }
        let kp_path = format!("{sample_id}.kpt");
        write_keypoints_binary(&out_dir.join(&kp_path), &kp)?;

        let bump = if label == Label::Win { &bump_win } else { &bump_loss };
        let mut vis = vec![0.0f32; frames * cfg.visual_width];
        let mut walk = vec![0.0f64; cfg.visual_width];
        for t in 0..frames {
            let ramp: f64 = planned
                .iter()
                .filter(|ev| (ev.start..ev.start + ev.len).contains(&t))
                .map(|ev| triangle(t, ev.start, ev.len))
                .sum();
            for (d, w) in walk.iter_mut().enumerate() {
                *w += cfg.noise_floor * rng.gen_range(-1.0..=1.0);
                vis[t * cfg.visual_width + d] =
                    (*w + cfg.visual_magnitude * ramp * bump[d]) as f32;
            }
        }
        let vis_path = format!("{sample_id}.vis");
        write_visual_binary(&out_dir.join(&vis_path), frames, cfg.visual_width, &vis)?;

        let class_zone = if label == Label::Win { &win_zone } else { &loss_zone };
        let tokens: Vec<usize> = (0..cfg.text_length)
            .map(|_| {
                let zone = if rng.gen_bool(cfg.text_separation) {
                    class_zone
                } else {
                    &shared_zone
                };
                rng.gen_range(zone.clone())
            })
            .collect();
        let text_path = format!("{sample_id}.txt");
        write_text_tokens(&out_dir.join(&text_path), &tokens)?;

        let record = SampleRecord {
            sample_id,
            keypoint_path: kp_path.into(),
            visual_path: vis_path.into(),
            text_path: text_path.into(),
            label: Some(label),
            label_source: LabelSource::Gold,
            frame_count: frames,
        };
        let events = planned
            .iter()
            .map(|ev| EventWindow {
                start: ev.start,
                end: ev.start + ev.len,
                group,
            })
            .collect();
        samples.push(SynthSample {
            record: record.clone(),
            events,
        });
        records.push(record);
    }

    let manifest = DatasetManifest::new(records, Split::Train, out_dir.to_path_buf())?;
    save_manifest(&manifest, &out_dir.join("manifest.jsonl"))?;
    fs::write(out_dir.join("synth_config.txt"), cfg.echo())?;
    Ok((manifest, samples))
}

#[derive(Debug, Clone, PartialEq)]
pub struct HistogramBin {
    pub lo: usize,
    pub hi: usize,
    pub count: usize,
}

/// Frame-count distribution and class balance of a manifest.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetDescription {
    pub sample_count: usize,
    pub win_count: usize,
    pub loss_count: usize,
    pub unlabeled_count: usize,
    pub frames_min: usize,
    pub frames_max: usize,
    pub histogram: Vec<HistogramBin>,
}

pub const HISTOGRAM_BINS: usize = 8;

pub fn describe(manifest: &DatasetManifest) -> Result<DatasetDescription> {
    if manifest.records.is_empty() {
        return Err(Error::validation("cannot describe an empty manifest".to_string()));
    }
    let frames: Vec<usize> = manifest.records.iter().map(|r| r.frame_count).collect();
    let lo = *frames.iter().min().expect("non-empty");
    let hi = *frames.iter().max().expect("non-empty");
    let histogram = if lo == hi {
        vec![HistogramBin {
            lo,
            hi,
            count: frames.len(),
        }]
    } else {
        let width = (hi - lo).div_ceil(HISTOGRAM_BINS);
        let mut bins: Vec<HistogramBin> = (0..HISTOGRAM_BINS)
            .map(|b| HistogramBin {
                lo: lo + b * width,
                hi: (lo + (b + 1) * width - 1).min(hi),
                count: 0,
            })
            .collect();
        for &f in &frames {
            let b = ((f - lo) / width).min(HISTOGRAM_BINS - 1);
            bins[b].count += 1;
        }
        bins.retain(|b| b.lo <= hi);
        bins
    };
    Ok(DatasetDescription {
        sample_count: manifest.records.len(),
        win_count: manifest.count_class(Label::Win),
        loss_count: manifest.count_class(Label::Loss),
        unlabeled_count: manifest.records.iter().filter(|r| r.label.is_none()).count(),
        frames_min: lo,
        frames_max: hi,
        histogram,
    })
}

impl DatasetDescription {
    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "samples: {} (win {}, loss {}, unlabeled {})",
            self.sample_count, self.win_count, self.loss_count, self.unlabeled_count
        );
        let _ = writeln!(s, "frames: min {} max {}", self.frames_min, self.frames_max);
        let _ = writeln!(s, "frame-count histogram:");
        let peak = self.histogram.iter().map(|b| b.count).max().unwrap_or(1).max(1);
        for b in &self.histogram {
            let bar = "#".repeat(b.count * 40 / peak);
            let _ = writeln!(s, "  {:>6}-{:<6} {:>4}  {bar}", b.lo, b.hi, b.count);
        }
        s
    }
}
