//! Landmark samples, the JSON Lines landmark format, subject splits and the
//! synthetic gesture generator.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const N_LANDMARKS: usize = 21;
/// Index of the wrist landmark.
pub const WRIST: usize = 0;
/// Accepted range for the x and y coordinates. Detectors extrapolate slightly
/// outside the image, anything beyond this is treated as corrupt.
pub const COORD_RANGE: (f64, f64) = (-0.5, 1.5);

pub type Landmarks = [[f64; 3]; N_LANDMARKS];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Handedness {
    Left,
    Right,
}

/// One labelled hand pose: 21 `(x, y, z)` landmarks, wrist first.
#[derive(Debug, Clone, PartialEq)]
pub struct HandFrame {
    landmarks: Landmarks,
    pub handedness: Handedness,
    pub subject: String,
    pub label: String,
}

impl HandFrame {
    pub fn new(
        landmarks: Landmarks,
        handedness: Handedness,
        subject: impl Into<String>,
        label: impl Into<String>,
    ) -> Result<Self> {
        validate_landmarks(&landmarks)?;
        Ok(HandFrame {
            landmarks,
            handedness,
            subject: subject.into(),
            label: label.into(),
        })
    }

    pub fn landmarks(&self) -> &Landmarks {
        &self.landmarks
    }

    /// Mirrors the frame horizontally (`x -> 1 - x`) and marks it as a right
    /// hand.
    pub fn mirrored(&self) -> Self {
        let mut out = self.clone();
        for p in out.landmarks.iter_mut() {
            p[0] = 1.0 - p[0];
        }
        out.handedness = match self.handedness {
            Handedness::Left => Handedness::Right,
            Handedness::Right => Handedness::Left,
        };
        out
    }
}

fn validate_landmarks(landmarks: &Landmarks) -> Result<()> {
    for (j, p) in landmarks.iter().enumerate() {
        if p.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidFrame(format!(
                "landmark {j} has a non-finite coordinate"
            )));
        }
        for (axis, v) in ["x", "y"].iter().zip(&p[..2]) {
            if *v < COORD_RANGE.0 || *v > COORD_RANGE.1 {
                return Err(Error::InvalidFrame(format!(
                    "landmark {j} {axis}={v} outside [{}, {}]",
                    COORD_RANGE.0, COORD_RANGE.1
                )));
            }
        }
    }
    Ok(())
}

/// Class names mapped to dense ids in first-appearance order.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct ClassRegistry {
    names: Vec<String>,
    ids: HashMap<String, usize>,
}

impl ClassRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Returns the id of `name`, registering it if unseen.
    pub fn intern(&mut self, name: &str) -> usize {
        if let Some(&id) = self.ids.get(name) {
            return id;
        }
        let id = self.names.len();
        self.names.push(name.to_string());
        self.ids.insert(name.to_string(), id);
        id
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.ids.get(name).copied()
    }

    pub fn name(&self, id: usize) -> Option<&str> {
        self.names.get(id).map(String::as_str)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }
}

impl From<Vec<String>> for ClassRegistry {
    fn from(names: Vec<String>) -> Self {
        let mut reg = ClassRegistry::new();
        for n in &names {
            reg.intern(n);
        }
        reg
    }
}

impl From<ClassRegistry> for Vec<String> {
    fn from(reg: ClassRegistry) -> Self {
        reg.names
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GestureDataset {
    frames: Vec<HandFrame>,
    classes: ClassRegistry,
    subjects: BTreeSet<String>,
}

impl GestureDataset {
    pub fn from_frames(frames: Vec<HandFrame>) -> Self {
        let mut classes = ClassRegistry::new();
        for f in &frames {
            classes.intern(&f.label);
        }
        Self::with_registry(frames, classes)
    }

    /// Builds a dataset that keeps `classes` as its registry. Labels missing
    /// from the registry are appended.
    fn with_registry(frames: Vec<HandFrame>, mut classes: ClassRegistry) -> Self {
        let subjects = frames.iter().map(|f| f.subject.clone()).collect();
        for f in &frames {
            classes.intern(&f.label);
        }
        GestureDataset {
            frames,
            classes,
            subjects,
        }
    }

    pub fn frames(&self) -> &[HandFrame] {
        &self.frames
    }

    pub fn classes(&self) -> &ClassRegistry {
        &self.classes
    }

    pub fn subjects(&self) -> &BTreeSet<String> {
        &self.subjects
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Class id of every frame, in frame order.
    pub fn label_ids(&self) -> Vec<usize> {
        self.frames
            .iter()
            .map(|f| self.classes.id(&f.label).expect("registry covers every label"))
            .collect()
    }

    /// Concatenates datasets; class ids follow first appearance across the
    /// concatenation.
    pub fn concat(parts: impl IntoIterator<Item = GestureDataset>) -> Self {
        let frames = parts.into_iter().flat_map(|d| d.frames).collect();
        Self::from_frames(frames)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LoadOptions {
    /// Mirror left hands into right hands (`x -> 1 - x`).
    pub mirror_left: bool,
}

#[derive(Serialize)]
struct RecordOut<'a> {
    subject: &'a str,
    label: &'a str,
    hand: Handedness,
    landmarks: &'a Landmarks,
}

#[derive(Deserialize)]
struct RecordIn {
    subject: String,
    label: String,
    hand: Handedness,
    landmarks: Vec<Vec<f64>>,
}

fn parse_record(line: &str) -> std::result::Result<HandFrame, String> {
    let rec: RecordIn = serde_json::from_str(line).map_err(|e| e.to_string())?;
    if rec.landmarks.len() != N_LANDMARKS {
        return Err(format!(
            "expected {N_LANDMARKS} landmarks, found {}",
            rec.landmarks.len()
        ));
    }
    let mut landmarks = [[0.0; 3]; N_LANDMARKS];
    for (j, (dst, src)) in landmarks.iter_mut().zip(&rec.landmarks).enumerate() {
        if src.len() != 3 {
            return Err(format!(
                "landmark {j} has {} coordinates, expected 3",
                src.len()
            ));
        }
        dst.copy_from_slice(src);
    }
    HandFrame::new(landmarks, rec.hand, rec.subject, rec.label).map_err(|e| e.to_string())
}

/// Reads a landmark JSON Lines file. Blank lines are skipped.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<GestureDataset> {
    load_dataset_with(path, LoadOptions::default())
}

pub fn load_dataset_with(path: impl AsRef<Path>, opts: LoadOptions) -> Result<GestureDataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_dataset(BufReader::new(file), path, opts)
}

pub fn read_dataset(reader: impl BufRead, path: &Path, opts: LoadOptions) -> Result<GestureDataset> {
    let mut frames = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let frame = parse_record(&line).map_err(|message| Error::Record {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        })?;
        frames.push(if opts.mirror_left && frame.handedness == Handedness::Left {
            frame.mirrored()
        } else {
            frame
        });
    }
    Ok(GestureDataset::from_frames(frames))
}

pub fn write_dataset(dataset: &GestureDataset, mut out: impl Write) -> std::io::Result<()> {
    for f in &dataset.frames {
        let rec = RecordOut {
            subject: &f.subject,
            label: &f.label,
            hand: f.handedness,
            landmarks: &f.landmarks,
        };
        serde_json::to_writer(&mut out, &rec)?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

pub fn save_dataset(dataset: &GestureDataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    write_dataset(dataset, &mut buf).map_err(|e| Error::io(path, e))?;
    crate::harness::write_atomic(path, &buf)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Part {
    Train,
    Val,
    Test,
}

impl fmt::Display for Part {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Part::Train => "train",
            Part::Val => "val",
            Part::Test => "test",
        })
    }
}

/// Assignment of subjects to train/val/test.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SubjectSplit {
    pub assignment: BTreeMap<String, Part>,
}

impl SubjectSplit {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn assign(mut self, subject: impl Into<String>, part: Part) -> Self {
        self.assignment.insert(subject.into(), part);
        self
    }

    /// Default split used when a scenario gives none: subjects sorted by id,
    /// the last `max(1, round(n / 5))` go to test, the rest to train.
    pub fn holdout_last<'a>(subjects: impl IntoIterator<Item = &'a String>) -> Result<Self> {
        let subjects: BTreeSet<&String> = subjects.into_iter().collect();
        let n = subjects.len();
        if n < 2 {
            return Err(Error::Config(format!(
                "a subject split needs at least 2 subjects, dataset has {n}"
            )));
        }
        let n_test = ((n as f64 / 5.0).round() as usize).max(1);
        let assignment = subjects
            .into_iter()
            .enumerate()
            .map(|(i, s)| {
                let part = if i >= n - n_test { Part::Test } else { Part::Train };
                (s.clone(), part)
            })
            .collect();
        Ok(SubjectSplit { assignment })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitDatasets {
    pub train: GestureDataset,
    pub val: GestureDataset,
    pub test: GestureDataset,
}

/// Routes every frame by its subject. All three outputs share the input's
/// class registry.
pub fn split_by_subject(dataset: &GestureDataset, split: &SubjectSplit) -> Result<SplitDatasets> {
    let missing: Vec<String> = dataset
        .subjects
        .iter()
        .filter(|s| !split.assignment.contains_key(*s))
        .cloned()
        .collect();
    if !missing.is_empty() {
        return Err(Error::UnassignedSubjects(missing));
    }
    let (mut train, mut val, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for f in &dataset.frames {
        match split.assignment[&f.subject] {
            Part::Train => train.push(f.clone()),
            Part::Val => val.push(f.clone()),
            Part::Test => test.push(f.clone()),
        }
    }
    let reg = &dataset.classes;
    Ok(SplitDatasets {
        train: GestureDataset::with_registry(train, reg.clone()),
        val: GestureDataset::with_registry(val, reg.clone()),
        test: GestureDataset::with_registry(test, reg.clone()),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_classes: usize,
    pub samples_per_class: usize,
    pub jitter_std: f64,
    pub n_subjects: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_classes: 10,
            samples_per_class: 30,
            jitter_std: 0.02,
            n_subjects: 3,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 {
            return Err(Error::Config("n_classes must be at least 2".into()));
        }
        if self.samples_per_class < 1 {
            return Err(Error::Config("samples_per_class must be at least 1".into()));
        }
        if self.n_subjects < 1 {
            return Err(Error::Config("n_subjects must be at least 1".into()));
        }
        if !(self.jitter_std >= 0.0 && self.jitter_std.is_finite()) {
            return Err(Error::Config("jitter_std must be finite and >= 0".into()));
        }
        Ok(())
    }
}

/// Generates a synthetic gesture dataset.
///
/// Every class gets a prototype of 21 points drawn uniformly from
/// `[0.1, 0.9]^2` with `z = 0`; samples add independent Gaussian noise to
/// every coordinate and clamp to `[-0.5, 1.5]`. Frames are emitted class by
/// class, subjects `s0, s1, ...` assigned round-robin within each class.
pub fn synth_gestures(config: &SynthConfig) -> Result<GestureDataset> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let prototypes: Vec<Landmarks> = (0..config.n_classes)
        .map(|_| {
            let mut p = [[0.0; 3]; N_LANDMARKS];
            for pt in p.iter_mut() {
                pt[0] = rng.random_range(0.1..=0.9);
                pt[1] = rng.random_range(0.1..=0.9);
            }
            p
        })
        .collect();
    let noise = (config.jitter_std > 0.0)
        .then(|| Normal::new(0.0, config.jitter_std).expect("validated std"));

    let mut frames = Vec::with_capacity(config.n_classes * config.samples_per_class);
    for (c, proto) in prototypes.iter().enumerate() {
        for k in 0..config.samples_per_class {
            let mut lm = *proto;
            if let Some(noise) = &noise {
                for v in lm.iter_mut().flatten() {
                    *v = (*v + noise.sample(&mut rng)).clamp(COORD_RANGE.0, COORD_RANGE.1);
                }
            }
            frames.push(HandFrame::new(
                lm,
                Handedness::Right,
                format!("s{}", k % config.n_subjects),
                format!("g{c:02}"),
            )?);
        }
    }
    Ok(GestureDataset::from_frames(frames))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frame(label: &str, subject: &str, offset: f64) -> HandFrame {
        let mut lm = [[0.0; 3]; N_LANDMARKS];
        for (j, p) in lm.iter_mut().enumerate() {
            *p = [0.3 + 0.01 * j as f64 + offset, 0.5 - 0.01 * j as f64, 0.001 * j as f64];
        }
        HandFrame::new(lm, Handedness::Right, subject, label).unwrap()
    }

    fn record(n_points: usize) -> String {
        let pts: Vec<String> = (0..n_points).map(|_| "[0.5,0.5,0.0]".to_string()).collect();
        format!(
            r#"{{"subject": "s1", "label": "fist", "hand": "Right", "landmarks": [{}]}}"#,
            pts.join(",")
        )
    }

    fn parse(text: &str) -> Result<GestureDataset> {
        read_dataset(text.as_bytes(), Path::new("mem.jsonl"), LoadOptions::default())
    }

    #[test]
    fn two_records_parse() {
        let text = format!("{}\n{}\n", record(21), record(21).replace("fist", "palm"));
        let ds = parse(&text).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.classes().names(), ["fist", "palm"]);
    }

    #[test]
    fn short_record_names_line() {
        let text = format!("{}\n{}\n", record(21), record(20));
        let err = parse(&text).unwrap_err();
        match err {
            Error::Record { line, message, .. } => {
                assert_eq!(line, 2);
                assert!(message.contains("21"), "{message}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn out_of_range_and_key_order() {
        let bad = record(21).replacen("[0.5,0.5,0.0]", "[1.7,0.5,0.0]", 1);
        assert!(matches!(parse(&bad), Err(Error::Record { line: 1, .. })));
        let pts = vec!["[0.5,0.5,0.0]"; 21].join(",");
        let reordered = format!(r#"{{"landmarks": [{pts}], "hand": "Left", "label": "a", "subject": "x"}}"#);
        let ds = parse(&reordered).unwrap();
        assert_eq!(ds.frames()[0].handedness, Handedness::Left);
    }

    #[test]
    fn malformed_json_reports_line() {
        let text = format!("{}\n\n{{oops\n", record(21));
        assert!(matches!(parse(&text), Err(Error::Record { line: 3, .. })));
    }

    #[test]
    fn missing_file() {
        assert!(matches!(load_dataset("/nonexistent/x.jsonl"), Err(Error::Io { .. })));
    }

    #[test]
    fn save_load_round_trip() {
        let ds = synth_gestures(&SynthConfig {
            n_classes: 3,
            samples_per_class: 4,
            ..Default::default()
        })
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        save_dataset(&ds, &path).unwrap();
        assert_eq!(load_dataset(&path).unwrap(), ds);
    }

    #[test]
    fn mirror_left_option() {
        let pts = vec!["[0.2,0.5,0.0]"; 21].join(",");
        let text = format!(r#"{{"subject": "a", "label": "x", "hand": "Left", "landmarks": [{pts}]}}"#);
        let opts = LoadOptions { mirror_left: true };
        let ds = read_dataset(text.as_bytes(), Path::new("m"), opts).unwrap();
        assert!((ds.frames()[0].landmarks()[3][0] - 0.8).abs() < 1e-15);
        assert_eq!(ds.frames()[0].handedness, Handedness::Right);
    }

    #[test]
    fn split_partitions_subjects() {
        let frames = ["a", "b", "c", "d"]
            .iter()
            .enumerate()
            .flat_map(|(i, s)| [frame("x", s, 0.0), frame(if i % 2 == 0 { "y" } else { "z" }, s, 0.01)])
            .collect();
        let ds = GestureDataset::from_frames(frames);
        let split = SubjectSplit::new()
            .assign("a", Part::Train)
            .assign("b", Part::Train)
            .assign("c", Part::Val)
            .assign("d", Part::Test);
        let out = split_by_subject(&ds, &split).unwrap();
        assert_eq!(out.train.subjects().len(), 2);
        assert!(out.train.subjects().is_disjoint(out.val.subjects()));
        assert!(out.val.subjects().is_disjoint(out.test.subjects()));
        assert_eq!(out.train.len() + out.val.len() + out.test.len(), ds.len());
        assert_eq!(out.test.classes(), ds.classes());
        assert_eq!(out.val.classes(), ds.classes());
    }

    #[test]
    fn split_all_train_and_unknown_subject() {
        let ds = GestureDataset::from_frames(vec![frame("x", "a", 0.0), frame("y", "b", 0.0)]);
        let all = SubjectSplit::new().assign("a", Part::Train).assign("b", Part::Train);
        let out = split_by_subject(&ds, &all).unwrap();
        assert_eq!(out.train, ds);
        assert!(out.val.is_empty() && out.test.is_empty());

        let partial = SubjectSplit::new().assign("a", Part::Train);
        match split_by_subject(&ds, &partial) {
            Err(Error::UnassignedSubjects(s)) => assert_eq!(s, ["b"]),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn holdout_default_split() {
        let subjects: Vec<String> = ["s0", "s1", "s2"].map(String::from).to_vec();
        let split = SubjectSplit::holdout_last(&subjects).unwrap();
        assert_eq!(split.assignment["s2"], Part::Test);
        assert_eq!(split.assignment["s0"], Part::Train);
        assert!(SubjectSplit::holdout_last(&subjects[..1]).is_err());
    }

    #[test]
    fn synth_counts_and_determinism() {
        let cfg = SynthConfig {
            n_classes: 10,
            samples_per_class: 30,
            ..Default::default()
        };
        let a = synth_gestures(&cfg).unwrap();
        assert_eq!(a.len(), 300);
        assert_eq!(a.classes().len(), 10);
        assert_eq!(a.subjects().len(), 3);
        assert_eq!(a, synth_gestures(&cfg).unwrap());
    }

    #[test]
    fn synth_zero_jitter_is_prototype() {
        let cfg = SynthConfig {
            jitter_std: 0.0,
            samples_per_class: 5,
            ..Default::default()
        };
        let ds = synth_gestures(&cfg).unwrap();
        for chunk in ds.frames().chunks(5) {
            assert!(chunk.iter().all(|f| f.landmarks() == chunk[0].landmarks()));
            for p in chunk[0].landmarks() {
                assert!((0.1..=0.9).contains(&p[0]) && (0.1..=0.9).contains(&p[1]));
                assert_eq!(p[2], 0.0);
            }
        }
    }

    #[test]
    fn synth_rejects_invalid() {
        let bad = SynthConfig {
            n_classes: 1,
            ..Default::default()
        };
        assert!(synth_gestures(&bad).is_err());
        let bad = SynthConfig {
            jitter_std: -1.0,
            ..Default::default()
        };
        assert!(synth_gestures(&bad).is_err());
    }
}
