//! Core sample/dataset types and manifest-driven ingestion.
//!
//! A dataset is a line-delimited manifest; each line is a JSON record
//! referencing the three per-sample feature files (paths relative to the
//! manifest's directory). Loading validates existence and frame-count
//! agreement but never mutates feature files.

use crate::error::{Error, Result};
use crate::featio;
use crate::seeding::derive_seed;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

/// Binary match-outcome label. `Win` is the positive/majority class
/// (the dataset prior is roughly 3:1 win:loss).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Win,
    Loss,
}

impl Label {
    /// Class index used by the output head: win = 0, loss = 1.
    pub fn index(self) -> usize {
        match self {
            Label::Win => 0,
            Label::Loss => 1,
        }
    }

    pub fn from_index(i: usize) -> Result<Label> {
        match i {
            0 => Ok(Label::Win),
            1 => Ok(Label::Loss),
            _ => Err(Error::validation(format!("label index {i} out of range"))),
        }
    }

    pub fn flipped(self) -> Label {
        match self {
            Label::Win => Label::Loss,
            Label::Loss => Label::Win,
        }
    }
}

impl std::fmt::Display for Label {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Label::Win => write!(f, "win"),
            Label::Loss => write!(f, "loss"),
        }
    }
}

/// Where a record's label came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelSource {
    Gold,
    Pseudo,
}

/// Which portion of the corpus a manifest describes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
    Synthetic,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Split::Train => write!(f, "train"),
            Split::Test => write!(f, "test"),
            Split::Synthetic => write!(f, "synthetic"),
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Split> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            "synthetic" => Ok(Split::Synthetic),
            other => Err(Error::parse(format!("unknown split '{other}'"))),
        }
    }
}

/// One sample: id, the three feature file references, and labeling state.
/// Paths are stored as written in the manifest (relative); `resolve_*`
/// joins them onto the manifest directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub sample_id: String,
    pub keypoint_path: PathBuf,
    pub visual_path: PathBuf,
    pub text_path: PathBuf,
    pub label: Option<Label>,
    pub label_source: LabelSource,
    pub frame_count: usize,
}

impl SampleRecord {
    pub fn resolve_keypoint(&self, base: &Path) -> PathBuf {
        base.join(&self.keypoint_path)
    }
    pub fn resolve_visual(&self, base: &Path) -> PathBuf {
        base.join(&self.visual_path)
    }
    pub fn resolve_text(&self, base: &Path) -> PathBuf {
        base.join(&self.text_path)
    }
}

/// An ordered collection of sample records plus split metadata.
/// `base_dir` is the directory feature paths are relative to.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub records: Vec<SampleRecord>,
    pub split: Split,
    pub class_prior: f64,
    pub base_dir: PathBuf,
}

/// Empirical fraction of `win` among labeled records (0.0 when none labeled).
fn empirical_prior(records: &[SampleRecord]) -> f64 {
    let labeled: Vec<Label> = records.iter().filter_map(|r| r.label).collect();
    if labeled.is_empty() {
        return 0.0;
    }
    let wins = labeled.iter().filter(|l| **l == Label::Win).count();
    wins as f64 / labeled.len() as f64
}

impl DatasetManifest {
    /// Build a manifest from records, computing the class prior. Validates
    /// id uniqueness and the pseudo-implies-labeled invariant but does not
    /// touch the filesystem (use [`load_manifest`] for ingestion checks).
    pub fn new(records: Vec<SampleRecord>, split: Split, base_dir: PathBuf) -> Result<Self> {
        let mut seen = HashSet::new();
        for r in &records {
            if !seen.insert(r.sample_id.clone()) {
                return Err(Error::validation(format!(
                    "duplicate sample_id '{}'",
                    r.sample_id
                )));
            }
            if r.label_source == LabelSource::Pseudo && r.label.is_none() {
                return Err(Error::validation(format!(
                    "sample '{}' has label_source=pseudo but no label",
                    r.sample_id
                )));
            }
        }
        let class_prior = empirical_prior(&records);
        Ok(DatasetManifest {
            records,
            split,
            class_prior,
            base_dir,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Records carrying a label, with the label unwrapped.
    pub fn labeled(&self) -> impl Iterator<Item = (&SampleRecord, Label)> {
        self.records.iter().filter_map(|r| r.label.map(|l| (r, l)))
    }

    pub fn count_class(&self, label: Label) -> usize {
        self.records.iter().filter(|r| r.label == Some(label)).count()
    }

    /// Restrict to a subset of records (same split/base_dir), recomputing the prior.
    pub fn subset(&self, keep: impl Fn(&SampleRecord) -> bool) -> Result<DatasetManifest> {
        let records: Vec<SampleRecord> = self.records.iter().filter(|r| keep(r)).cloned().collect();
        DatasetManifest::new(records, self.split, self.base_dir.clone())
    }
}

fn check_feature_files(record: &SampleRecord, base: &Path) -> Result<()> {
    let kp = record.resolve_keypoint(base);
    if !kp.is_file() {
        return Err(Error::ingestion(
            &record.sample_id,
            format!("missing keypoint file {}", kp.display()),
        ));
    }
    let vis = record.resolve_visual(base);
    if !vis.is_file() {
        return Err(Error::ingestion(
            &record.sample_id,
            format!("missing visual file {}", vis.display()),
        ));
    }
    let txt = record.resolve_text(base);
    if !txt.is_file() {
        return Err(Error::ingestion(
            &record.sample_id,
            format!("missing text file {}", txt.display()),
        ));
    }
    let kp_frames = featio::peek_keypoint_frames(&kp)
        .map_err(|e| Error::ingestion(&record.sample_id, e.to_string()))?;
    if kp_frames != record.frame_count {
        return Err(Error::ingestion(
            &record.sample_id,
            format!(
                "frame_count {} != keypoint stream frames {kp_frames}",
                record.frame_count
            ),
        ));
    }
    let (vis_frames, _) = featio::peek_visual_dims(&vis)
        .map_err(|e| Error::ingestion(&record.sample_id, e.to_string()))?;
    if vis_frames != record.frame_count {
        return Err(Error::ingestion(
            &record.sample_id,
            format!(
                "frame_count {} != visual stream frames {vis_frames}",
                record.frame_count
            ),
        ));
    }
    Ok(())
}

/// Serialized record line. `label: none` marks unlabeled pool samples.
#[derive(Serialize, Deserialize)]
struct RecordLine {
    sample_id: String,
    keypoint_path: String,
    visual_path: String,
    text_path: String,
    label: String,
    label_source: LabelSource,
    frame_count: usize,
}

/// Load a manifest file: one JSON record per line, with an optional leading
/// `# split=<train|test|synthetic>` comment (defaults to `synthetic`).
/// Verifies that every referenced feature file exists and agrees with the
/// declared frame count; records are returned in file order.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(path)?;
    let base = path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    let mut split = Split::Synthetic;
    let mut records = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('#') {
            let rest = rest.trim();
            if let Some(value) = rest.strip_prefix("split=") {
                split = value.trim().parse()?;
            }
            continue;
        }
        let parsed: RecordLine = serde_json::from_str(line).map_err(|e| {
            Error::parse(format!("{} line {}: {e}", path.display(), lineno + 1))
        })?;
        let label = match parsed.label.as_str() {
            "win" => Some(Label::Win),
            "loss" => Some(Label::Loss),
            "none" => None,
            other => {
                return Err(Error::parse(format!(
                    "{} line {}: unknown label '{other}'",
                    path.display(),
                    lineno + 1
                )))
            }
        };
        records.push(SampleRecord {
            sample_id: parsed.sample_id,
            keypoint_path: PathBuf::from(parsed.keypoint_path),
            visual_path: PathBuf::from(parsed.visual_path),
            text_path: PathBuf::from(parsed.text_path),
            label,
            label_source: parsed.label_source,
            frame_count: parsed.frame_count,
        });
    }
    let manifest = DatasetManifest::new(records, split, base.clone())?;
    for record in &manifest.records {
        check_feature_files(record, &base)?;
    }
    Ok(manifest)
}

/// Write a manifest (records in order, paths as stored).
pub fn save_manifest(manifest: &DatasetManifest, path: &Path) -> Result<()> {
    let file = fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    writeln!(w, "# split={}", manifest.split)?;
    for r in &manifest.records {
        let line = RecordLine {
            sample_id: r.sample_id.clone(),
            keypoint_path: r.keypoint_path.to_string_lossy().into_owned(),
            visual_path: r.visual_path.to_string_lossy().into_owned(),
            text_path: r.text_path.to_string_lossy().into_owned(),
            label: match r.label {
                Some(l) => l.to_string(),
                None => "none".to_string(),
            },
            label_source: r.label_source,
            frame_count: r.frame_count,
        };
        writeln!(w, "{}", serde_json::to_string(&line).expect("record serializes"))?;
    }
    w.flush()?;
    Ok(())
}

/// Stratified train/validation split, deterministic per seed. Within each
/// class, membership is shuffled and `round(n_class * val_fraction)` samples
/// go to validation, clamped so neither side of a non-empty class is empty.
pub fn split_train_val(
    manifest: &DatasetManifest,
    val_fraction: f64,
    seed: u64,
) -> Result<(DatasetManifest, DatasetManifest)> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(Error::validation(format!(
            "val_fraction must be in (0,1), got {val_fraction}"
        )));
    }
    if manifest.records.iter().any(|r| r.label.is_none()) {
        return Err(Error::validation(
            "split_train_val requires a fully labeled manifest".to_string(),
        ));
    }
    let mut val_ids: HashSet<String> = HashSet::new();
    for class in [Label::Win, Label::Loss] {
        let mut ids: Vec<&str> = manifest
            .records
            .iter()
            .filter(|r| r.label == Some(class))
            .map(|r| r.sample_id.as_str())
            .collect();
        if ids.is_empty() {
            continue;
        }
        let class_seed = derive_seed(seed, "split", &[class.index() as u64]);
        ids.shuffle(&mut crate::seeding::seeded_rng(class_seed));
        let n = ids.len();
        // A singleton class cannot appear on both sides; keep it in train.
        let n_val = if n >= 2 {
            ((n as f64 * val_fraction).round() as usize).clamp(1, n - 1)
        } else {
            0
        };
        for id in ids.into_iter().take(n_val) {
            val_ids.insert(id.to_string());
        }
    }
    let val = manifest.subset(|r| val_ids.contains(&r.sample_id))?;
    let train = manifest.subset(|r| !val_ids.contains(&r.sample_id))?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::validation(format!(
            "val_fraction {val_fraction} produced an empty split ({} train / {} val)",
            train.len(),
            val.len()
        )));
    }
    Ok((train, val))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::featio::{
        write_keypoints_binary, write_text_tokens, write_visual_binary, KEYPOINT_FRAME_FLOATS,
    };
    use tempfile::TempDir;

    /// Writes minimal feature files for `n` samples and returns the records.
    pub(crate) fn fake_records(dir: &Path, labels: &[Option<Label>]) -> Vec<SampleRecord> {
        let frames = 30usize;
        labels
            .iter()
            .enumerate()
            .map(|(i, label)| {
                let id = format!("s{i:03}");
                let kp = format!("{id}.kpt");
                let vis = format!("{id}.vis");
                let txt = format!("{id}.txt");
                let kp_data = vec![0.5f32; frames * KEYPOINT_FRAME_FLOATS];
                write_keypoints_binary(&dir.join(&kp), &kp_data).unwrap();
                write_visual_binary(&dir.join(&vis), frames, 4, &vec![0.0f32; frames * 4]).unwrap();
                write_text_tokens(&dir.join(&txt), &[1, 2, 3]).unwrap();
                SampleRecord {
                    sample_id: id,
                    keypoint_path: PathBuf::from(kp),
                    visual_path: PathBuf::from(vis),
                    text_path: PathBuf::from(txt),
                    label: *label,
                    label_source: LabelSource::Gold,
                    frame_count: frames,
                }
            })
            .collect()
    }

    fn labels(win: usize, loss: usize) -> Vec<Option<Label>> {
        let mut v = vec![Some(Label::Win); win];
        v.extend(vec![Some(Label::Loss); loss]);
        v
    }

    #[test]
    fn load_two_records() {
        let dir = TempDir::new().unwrap();
        let records = fake_records(dir.path(), &labels(1, 1));
        let manifest =
            DatasetManifest::new(records, Split::Train, dir.path().to_path_buf()).unwrap();
        let path = dir.path().join("manifest.jsonl");
        save_manifest(&manifest, &path).unwrap();
        let loaded = load_manifest(&path).unwrap();
        assert_eq!(loaded.len(), 2);
        assert_eq!(loaded.split, Split::Train);
        assert_eq!(loaded.records, manifest.records);
    }

    #[test]
    fn missing_keypoint_file_names_sample() {
        let dir = TempDir::new().unwrap();
        let mut records = fake_records(dir.path(), &labels(1, 1));
        std::fs::remove_file(dir.path().join("s001.kpt")).unwrap();
        records[1].frame_count = 30;
        let manifest =
            DatasetManifest::new(records, Split::Train, dir.path().to_path_buf()).unwrap();
        let path = dir.path().join("manifest.jsonl");
        save_manifest(&manifest, &path).unwrap();
        match load_manifest(&path) {
            Err(Error::Ingestion { sample_id, .. }) => assert_eq!(sample_id, "s001"),
            other => panic!("expected ingestion error, got {other:?}"),
        }
    }

    #[test]
    fn class_prior_is_win_fraction() {
        // 40 samples, 30 win: mirrors the ~3:1 dataset imbalance.
        let dir = TempDir::new().unwrap();
        let records = fake_records(dir.path(), &labels(30, 10));
        let manifest =
            DatasetManifest::new(records, Split::Synthetic, dir.path().to_path_buf()).unwrap();
        assert!((manifest.class_prior - 0.75).abs() < 1e-9);
    }

    #[test]
    fn duplicate_sample_id_rejected() {
        let dir = TempDir::new().unwrap();
        let mut records = fake_records(dir.path(), &labels(2, 0));
        records[1].sample_id = records[0].sample_id.clone();
        let err = DatasetManifest::new(records, Split::Train, dir.path().to_path_buf());
        assert!(matches!(err, Err(Error::Validation(_))));
    }

    #[test]
    fn stratified_split_counts() {
        let dir = TempDir::new().unwrap();
        let records = fake_records(dir.path(), &labels(30, 10));
        let manifest =
            DatasetManifest::new(records, Split::Train, dir.path().to_path_buf()).unwrap();
        let (train, val) = split_train_val(&manifest, 0.2, 7).unwrap();
        assert_eq!(train.len(), 32);
        assert_eq!(val.len(), 8);
        assert_eq!(train.count_class(Label::Win), 24);
        assert_eq!(train.count_class(Label::Loss), 8);
        assert_eq!(val.count_class(Label::Win), 6);
        assert_eq!(val.count_class(Label::Loss), 2);
        // Disjoint, union equals input.
        let mut all: Vec<String> = train
            .records
            .iter()
            .chain(val.records.iter())
            .map(|r| r.sample_id.clone())
            .collect();
        all.sort();
        let mut expected: Vec<String> =
            manifest.records.iter().map(|r| r.sample_id.clone()).collect();
        expected.sort();
        assert_eq!(all, expected);
    }

    #[test]
    fn smallest_stratified_case() {
        // Two samples per class: the smallest input where each class can
        // land on both sides of the split.
        let dir = TempDir::new().unwrap();
        let records = fake_records(dir.path(), &labels(2, 2));
        let manifest =
            DatasetManifest::new(records, Split::Train, dir.path().to_path_buf()).unwrap();
        let (train, val) = split_train_val(&manifest, 0.5, 0).unwrap();
        for side in [&train, &val] {
            assert_eq!(side.len(), 2);
            assert_eq!(side.count_class(Label::Win), 1);
            assert_eq!(side.count_class(Label::Loss), 1);
        }
    }

    #[test]
    fn split_is_deterministic() {
        let dir = TempDir::new().unwrap();
        let records = fake_records(dir.path(), &labels(12, 4));
        let manifest =
            DatasetManifest::new(records, Split::Train, dir.path().to_path_buf()).unwrap();
        let (t1, v1) = split_train_val(&manifest, 0.25, 42).unwrap();
        let (t2, v2) = split_train_val(&manifest, 0.25, 42).unwrap();
        assert_eq!(t1.records, t2.records);
        assert_eq!(v1.records, v2.records);
    }

    #[test]
    fn empty_split_rejected() {
        let dir = TempDir::new().unwrap();
        let records = fake_records(dir.path(), &labels(1, 0));
        let manifest =
            DatasetManifest::new(records, Split::Train, dir.path().to_path_buf()).unwrap();
        assert!(matches!(
            split_train_val(&manifest, 0.5, 0),
            Err(Error::Validation(_))
        ));
    }
}
