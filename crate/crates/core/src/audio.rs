//! Raw-audio ingestion for the two-word keyword task and a synthetic
//! stand-in dataset.
//!
//! Every recording becomes 871 samples: peak-normalize, zero-pad or truncate
//! to `871 · 64` raw samples, then average each block of 64.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, seeded};

pub const SEQUENCE_LENGTH: usize = 871;
pub const DOWNSAMPLE: usize = 64;
pub const RAW_LENGTH: usize = SEQUENCE_LENGTH * DOWNSAMPLE;
pub const DATASET_VERSION: u32 = 1;
pub const LABELS: [&str; 2] = ["zero", "one"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sequence {
    pub samples: Vec<f64>,
    pub label: usize,
    pub source_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Dataset {
    pub version: u32,
    pub label_names: Vec<String>,
    pub train: Vec<Sequence>,
    pub test: Vec<Sequence>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub train: BTreeMap<usize, usize>,
    pub test: BTreeMap<usize, usize>,
}

impl Dataset {
    pub fn class_counts(&self) -> ClassCounts {
        let count = |xs: &[Sequence]| {
            let mut m = BTreeMap::new();
            for s in xs {
                *m.entry(s.label).or_insert(0) += 1;
            }
            m
        };
        ClassCounts {
            train: count(&self.train),
            test: count(&self.test),
        }
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ds: Dataset = serde_json::from_str(text)?;
        if ds.version != DATASET_VERSION {
            return Err(Error::Dataset(format!("unsupported dataset version {}", ds.version)));
        }
        Ok(ds)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|_| Error::MissingArtifact(path.to_path_buf()))?;
        Dataset::from_json(&text)
    }
}

/// Peak normalization, fixed-length padding and block-mean downsampling.
pub fn preprocess(raw: &[f64]) -> Vec<f64> {
    let peak = raw.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let gain = if peak > 0.0 { 1.0 / peak } else { 0.0 };
    let mut out = vec![0.0; SEQUENCE_LENGTH];
    let kept = &raw[..raw.len().min(RAW_LENGTH)];
    for (block, chunk) in kept.chunks(DOWNSAMPLE).enumerate() {
        // the tail beyond the recording is zero padding
        out[block] = chunk.iter().map(|&x| x * gain).sum::<f64>() / DOWNSAMPLE as f64;
    }
    out
}

/// Reads a 16-bit PCM mono WAV file. FLAC sources must be converted first,
/// e.g. `ffmpeg -i in.flac -ac 1 -c:a pcm_s16le out.wav`.
pub fn ingest_wav(path: &Path, label: usize) -> Result<Sequence> {
    let fail = |reason: String| Error::Ingest {
        path: path.to_path_buf(),
        reason,
    };
    let mut reader = hound::WavReader::open(path).map_err(|e| fail(e.to_string()))?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(fail(format!("expected mono audio, found {} channels", spec.channels)));
    }
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(fail(format!(
            "expected 16-bit PCM, found {} bits {:?}",
            spec.bits_per_sample, spec.sample_format
        )));
    }
    let raw = reader
        .samples::<i16>()
        .map(|s| s.map(|v| v as f64 / 32768.0))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| fail(e.to_string()))?;
    Ok(Sequence {
        samples: preprocess(&raw),
        label,
        source_id: path.to_string_lossy().into_owned(),
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub label: String,
    #[serde(default)]
    pub split: String,
}

/// List of recordings with labels and optional split tags (`train`, `test`
/// or empty for a seeded stratified split).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    /// Parses a `path,label,split` CSV. Relative paths resolve against the
    /// manifest's directory.
    pub fn from_csv(path: &Path) -> Result<Self> {
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let mut reader = csv::Reader::from_path(path).map_err(|e| Error::Ingest {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        let mut entries = Vec::new();
        for row in reader.deserialize() {
            let mut entry: ManifestEntry = row?;
            if entry.path.is_relative() {
                entry.path = base.join(&entry.path);
            }
            entries.push(entry);
        }
        Ok(DatasetManifest { entries })
    }
}

pub fn label_id(name: &str) -> Option<usize> {
    LABELS.iter().position(|l| l.eq_ignore_ascii_case(name.trim()))
}

/// Ingests every manifest entry. Entries without a split tag are assigned by
/// a stratified 80/20 split seeded with `seed`.
pub fn build_dataset(manifest: &DatasetManifest, seed: u64) -> Result<Dataset> {
    if manifest.entries.is_empty() {
        return Err(Error::Dataset("manifest is empty".into()));
    }
    let mut failures = Vec::new();
    let mut tagged: Vec<(String, Sequence)> = Vec::new();
    for entry in &manifest.entries {
        let Some(label) = label_id(&entry.label) else {
            failures.push(format!("{}: unknown label '{}'", entry.path.display(), entry.label));
            continue;
        };
        let split = entry.split.trim().to_ascii_lowercase();
        if !matches!(split.as_str(), "" | "train" | "test") {
            failures.push(format!("{}: unknown split '{}'", entry.path.display(), entry.split));
            continue;
        }
        match ingest_wav(&entry.path, label) {
            Ok(seq) => tagged.push((split, seq)),
            Err(e) => failures.push(e.to_string()),
        }
    }
    if !failures.is_empty() {
        return Err(Error::Dataset(format!(
            "{} file(s) failed:\n  {}",
            failures.len(),
            failures.join("\n  ")
        )));
    }
    tagged.sort_by(|a, b| a.1.source_id.cmp(&b.1.source_id));
    let mut seen = std::collections::HashSet::new();
    if let Some((_, dup)) = tagged.iter().find(|(_, s)| !seen.insert(s.source_id.clone())) {
        return Err(Error::Dataset(format!("{} listed twice; splits must be disjoint", dup.source_id)));
    }

    let mut train = Vec::new();
    let mut test = Vec::new();
    let mut untagged = Vec::new();
    for (split, seq) in tagged {
        match split.as_str() {
            "train" => train.push(seq),
            "test" => test.push(seq),
            _ => untagged.push(seq),
        }
    }
    let (extra_train, extra_test) = stratified_split(untagged, seed, 0.2);
    train.extend(extra_train);
    test.extend(extra_test);
    train.sort_by(|a, b| a.source_id.cmp(&b.source_id));
    test.sort_by(|a, b| a.source_id.cmp(&b.source_id));
    Ok(Dataset {
        version: DATASET_VERSION,
        label_names: LABELS.iter().map(|s| s.to_string()).collect(),
        train,
        test,
    })
}

/// Splits per class, rounding the test share and keeping at least one
/// training sample per class.
pub fn stratified_split(seqs: Vec<Sequence>, seed: u64, test_fraction: f64) -> (Vec<Sequence>, Vec<Sequence>) {
    let mut by_class: BTreeMap<usize, Vec<Sequence>> = BTreeMap::new();
    for s in seqs {
        by_class.entry(s.label).or_default().push(s);
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (label, mut group) in by_class {
        let mut rng = seeded(derive_seed(seed, &[0x5b, label as u64]));
        group.shuffle(&mut rng);
        let n_test = ((group.len() as f64 * test_fraction).round() as usize).min(group.len().saturating_sub(1));
        let rest = group.split_off(n_test);
        test.extend(group);
        train.extend(rest);
    }
    (train, test)
}

/// Shape of the synthetic two-class task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    /// Tone frequency band per class, in cycles per sequence.
    pub cycles: [(f64, f64); 2],
    /// Standard deviation of additive white noise relative to a unit tone.
    pub noise: f64,
    /// Amplitude of a class-independent interfering tone (0 disables it).
    pub distractor: f64,
    /// Band of the interfering tone in cycles per sequence.
    pub distractor_cycles: (f64, f64),
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            cycles: [(2.0, 4.0), (8.0, 12.0)],
            noise: 0.05,
            distractor: 1.0,
            distractor_cycles: (40.0, 80.0),
        }
    }
}

/// Two-class stand-in for the keyword task with the default [`SynthSpec`]:
/// class 0 is a decaying low-frequency tone, class 1 a decaying
/// higher-frequency tone, both over a class-independent interfering tone
/// well above either band.
pub fn synth_dataset(n_per_class: usize, seed: u64) -> Result<Dataset> {
    synth_dataset_with(&SynthSpec::default(), n_per_class, seed)
}

/// Amplitude, phase, onset, decay and frequency are jittered per sample.
pub fn synth_dataset_with(spec: &SynthSpec, n_per_class: usize, seed: u64) -> Result<Dataset> {
    if n_per_class == 0 {
        return Err(Error::InvalidConfig("n_per_class must be at least 1".into()));
    }
    let l = SEQUENCE_LENGTH as f64;
    let uniform = |lo: f64, hi: f64| {
        Uniform::new_inclusive(lo, hi).map_err(|e| Error::InvalidConfig(format!("bad synthetic range: {e}")))
    };
    let noise = Normal::new(0.0, spec.noise).map_err(|e| Error::InvalidConfig(format!("bad noise level: {e}")))?;
    let mut all = Vec::with_capacity(2 * n_per_class);
    for (label, &(lo, hi)) in spec.cycles.iter().enumerate() {
        let band = uniform(lo, hi)?;
        let distractor_band = uniform(spec.distractor_cycles.0, spec.distractor_cycles.1)?;
        for i in 0..n_per_class {
            let mut rng = seeded(derive_seed(seed, &[0x5c, label as u64, i as u64]));
            let freq = rng.sample(band) / l;
            let amp = rng.sample(uniform(0.5, 1.0)?);
            let phase = rng.sample(uniform(0.0, std::f64::consts::TAU)?);
            let onset = rng.sample(uniform(0.0, 0.25 * l)?);
            let tau = rng.sample(uniform(0.15, 0.4)?) * l;
            let d_freq = rng.sample(distractor_band) / l;
            let d_phase = rng.sample(uniform(0.0, std::f64::consts::TAU)?);
            let raw: Vec<f64> = (0..SEQUENCE_LENGTH)
                .map(|t| {
                    let t = t as f64;
                    let tone = if t >= onset {
                        let dt = t - onset;
                        amp * (-dt / tau).exp() * (std::f64::consts::TAU * freq * dt + phase).sin()
                    } else {
                        0.0
                    };
                    let interference = spec.distractor * (std::f64::consts::TAU * d_freq * t + d_phase).sin();
                    tone + interference + noise.sample(&mut rng)
                })
                .collect();
            let peak = raw.iter().fold(0.0f64, |m, x| m.max(x.abs()));
            let gain = if peak > 0.0 { 1.0 / peak } else { 0.0 };
            all.push(Sequence {
                samples: raw.iter().map(|x| x * gain).collect(),
                label,
                source_id: format!("synth-{label}-{i:05}"),
            });
        }
    }
    let (mut train, mut test) = stratified_split(all, seed, 0.2);
    train.sort_by(|a, b| a.source_id.cmp(&b.source_id));
    test.sort_by(|a, b| a.source_id.cmp(&b.source_id));
    Ok(Dataset {
        version: DATASET_VERSION,
        label_names: LABELS.iter().map(|s| s.to_string()).collect(),
        train,
        test,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn write_wav(dir: &Path, name: &str, samples: &[i16], channels: u16) -> PathBuf {
        let path = dir.join(name);
        let spec = hound::WavSpec {
            channels,
            sample_rate: 48_000,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(&path, spec).unwrap();
        for &s in samples {
            w.write_sample(s).unwrap();
        }
        w.finalize().unwrap();
        path
    }

    #[test]
    fn silent_file_gives_zeros() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_wav(dir.path(), "z.wav", &[0; 500], 1);
        let s = ingest_wav(&p, 0).unwrap();
        assert_eq!(s.samples, vec![0.0; SEQUENCE_LENGTH]);
    }

    #[test]
    fn constant_file_normalizes_to_one() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_wav(dir.path(), "c.wav", &vec![8192; RAW_LENGTH], 1);
        let s = ingest_wav(&p, 1).unwrap();
        assert_eq!(s.samples.len(), SEQUENCE_LENGTH);
        assert!(s.samples.iter().all(|&v| v == 1.0));
        assert_eq!(s.label, 1);
    }

    #[test]
    fn short_file_is_zero_padded() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_wav(dir.path(), "s.wav", &[1000; 100], 1);
        let s = ingest_wav(&p, 0).unwrap();
        assert_eq!(s.samples[0], 1.0);
        assert!((s.samples[1] - 36.0 / 64.0).abs() < 1e-15);
        assert!(s.samples[2..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn long_file_is_truncated() {
        let dir = tempfile::tempdir().unwrap();
        let mut raw = vec![100i16; RAW_LENGTH];
        raw.extend(vec![-30000i16; 640]);
        let p = write_wav(dir.path(), "l.wav", &raw, 1);
        let s = ingest_wav(&p, 0).unwrap();
        // the loud tail sets the peak but is cut before downsampling
        assert!(s.samples.iter().all(|&v| v > 0.0 && v < 0.01));
    }

    #[test]
    fn stereo_and_garbage_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_wav(dir.path(), "st.wav", &[0; 64], 2);
        assert!(matches!(ingest_wav(&p, 0), Err(Error::Ingest { .. })));
        let junk = dir.path().join("junk.wav");
        fs::write(&junk, b"not a wav").unwrap();
        let err = ingest_wav(&junk, 0).unwrap_err();
        assert!(err.to_string().contains("junk.wav"));
    }

    #[test]
    fn doubling_the_gain_changes_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let raw: Vec<i16> = (0..3000).map(|i| ((i as f64 * 0.05).sin() * 8000.0) as i16).collect();
        let loud: Vec<i16> = raw.iter().map(|v| v * 2).collect();
        let a = ingest_wav(&write_wav(dir.path(), "a.wav", &raw, 1), 0).unwrap();
        let b = ingest_wav(&write_wav(dir.path(), "b.wav", &loud, 1), 0).unwrap();
        assert_eq!(a.samples, b.samples);
    }

    proptest! {
        #[test]
        fn preprocess_shape_and_gain_invariance(
            raw in prop::collection::vec(-1.0f64..1.0, 1..3000),
            alpha in 0.01f64..50.0,
        ) {
            let a = preprocess(&raw);
            prop_assert_eq!(a.len(), SEQUENCE_LENGTH);
            prop_assert!(a.iter().all(|v| v.abs() <= 1.0));
            let scaled: Vec<f64> = raw.iter().map(|x| x * alpha).collect();
            let b = preprocess(&scaled);
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }

    fn manifest_fixture(dir: &Path) -> PathBuf {
        write_wav(dir, "a0.wav", &[500; 200], 1);
        write_wav(dir, "a1.wav", &[-300; 900], 1);
        let m = dir.join("m.csv");
        fs::write(&m, "path,label,split\na0.wav,zero,train\na1.wav,one,test\n").unwrap();
        m
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = DatasetManifest::from_csv(&manifest_fixture(dir.path())).unwrap();
        let ds = build_dataset(&m, 1).unwrap();
        assert_eq!(ds.len(), 2);
        let counts = ds.class_counts();
        assert_eq!(counts.train.get(&0), Some(&1));
        assert_eq!(counts.test.get(&1), Some(&1));
    }

    #[test]
    fn empty_manifest_is_an_error() {
        assert!(build_dataset(&DatasetManifest { entries: vec![] }, 0).is_err());
    }

    #[test]
    fn bad_files_are_all_reported() {
        let dir = tempfile::tempdir().unwrap();
        let m = DatasetManifest {
            entries: vec![
                ManifestEntry {
                    path: dir.path().join("missing1.wav"),
                    label: "zero".into(),
                    split: "train".into(),
                },
                ManifestEntry {
                    path: dir.path().join("missing2.wav"),
                    label: "one".into(),
                    split: "test".into(),
                },
            ],
        };
        let msg = build_dataset(&m, 0).unwrap_err().to_string();
        assert!(msg.contains("missing1.wav") && msg.contains("missing2.wav"));
    }

    #[test]
    fn untagged_entries_are_split_stratified() {
        let dir = tempfile::tempdir().unwrap();
        let mut entries = Vec::new();
        for i in 0..10 {
            for (label, name) in LABELS.iter().enumerate() {
                let p = write_wav(dir.path(), &format!("{name}{i}.wav"), &[(i as i16 + 1) * 10 * (label as i16 + 1); 64], 1);
                entries.push(ManifestEntry {
                    path: p,
                    label: name.to_string(),
                    split: String::new(),
                });
            }
        }
        let entries_copy = entries.clone();
        let ds = build_dataset(&DatasetManifest { entries }, 3).unwrap();
        let c = ds.class_counts();
        assert_eq!(c.test.values().copied().collect::<Vec<_>>(), vec![2, 2]);
        assert_eq!(c.train.values().copied().collect::<Vec<_>>(), vec![8, 8]);
        let again = build_dataset(&DatasetManifest { entries: entries_copy }, 3).unwrap();
        assert_eq!(ds, again);
    }

    #[test]
    fn synth_is_deterministic_and_bounded() {
        let a = synth_dataset(1, 9).unwrap();
        assert_eq!(a, synth_dataset(1, 9).unwrap());
        assert_eq!(a.len(), 2);
        for s in a.train.iter().chain(&a.test) {
            assert_eq!(s.samples.len(), SEQUENCE_LENGTH);
            let peak = s.samples.iter().fold(0.0f64, |m, x| m.max(x.abs()));
            assert!((peak - 1.0).abs() < 1e-12);
        }
        assert!(synth_dataset(0, 1).is_err());
    }

    /// Discrete Fourier magnitude at integer bin `k`, evaluated directly.
    fn dft_mag(x: &[f64], k: usize) -> f64 {
        let n = x.len() as f64;
        let (mut re, mut im) = (0.0, 0.0);
        for (t, v) in x.iter().enumerate() {
            let w = std::f64::consts::TAU * k as f64 * t as f64 / n;
            re += v * w.cos();
            im -= v * w.sin();
        }
        (re * re + im * im).sqrt()
    }

    #[test]
    fn synth_classes_have_distinct_spectral_peaks() {
        let ds = synth_dataset(10, 4).unwrap();
        for s in ds.train.iter().chain(&ds.test) {
            let strongest = |bins: std::ops::Range<usize>| {
                bins.max_by(|&a, &b| dft_mag(&s.samples, a).total_cmp(&dft_mag(&s.samples, b)))
                    .unwrap()
            };
            // below the interfering band
            let peak_bin = strongest(1..30);
            if s.label == 0 {
                assert!(peak_bin <= 5, "class 0 peak at {peak_bin}");
            } else {
                assert!((7..=14).contains(&peak_bin), "class 1 peak at {peak_bin}");
            }
            let overall = strongest(1..120);
            assert!((38..=82).contains(&overall), "interference peak at {overall}");
        }
    }
}
