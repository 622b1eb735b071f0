//! Simulated training sets: one event file per sample plus a JSON manifest
//! binding each file to its source truth.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{decode_events, encode_events, FormatError};
use crate::events::EventList;
use crate::imaging::Grid;
use crate::labels::DEFAULT_LABEL_SIGMA_DEG;
use crate::rng::{derive_seed, stream_rng};
use crate::simulator::{simulate, CameraModel, SimError, SimOptions, SourceSpec};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MIN_EVENTS: usize = 50;
pub const MAX_EVENTS: usize = 20_000;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Manifest { path: PathBuf, message: String },
    #[error("{path}: {source}")]
    Format {
        path: PathBuf,
        #[source]
        source: FormatError,
    },
    #[error("sample {index}: {source}")]
    Simulation {
        index: usize,
        #[source]
        source: SimError,
    },
    #[error("invalid dataset request: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRecord {
    /// Event file, relative to the manifest directory.
    pub path: String,
    pub sources: Vec<SourceSpec>,
    pub n_events: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub samples: Vec<SampleRecord>,
    pub grid: Grid,
    #[serde(default = "default_sigma")]
    pub label_sigma_deg: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_sigma() -> f64 {
    DEFAULT_LABEL_SIGMA_DEG
}

/// How per-sample truths and event counts are drawn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleGenerator {
    pub sources_min: usize,
    pub sources_max: usize,
    pub events_min: usize,
    pub events_max: usize,
    /// Fraction of the azimuth and polar-cosine ranges kept clear at each edge.
    pub edge_margin: f64,
    /// Relative intensities of extra sources are drawn from `[min, 1]`.
    pub min_intensity: f64,
}

impl Default for SampleGenerator {
    fn default() -> Self {
        Self {
            sources_min: 1,
            sources_max: 1,
            events_min: 67,
            events_max: 4096,
            edge_margin: 0.05,
            min_intensity: 0.5,
        }
    }
}

impl SampleGenerator {
    pub fn validate(&self) -> Result<(), DatasetError> {
        let bad = |m: String| Err(DatasetError::Invalid(m));
        if self.sources_min == 0 || self.sources_min > self.sources_max {
            return bad(format!(
                "source count range [{}, {}] must be non-empty and start at 1 or more",
                self.sources_min, self.sources_max
            ));
        }
        if self.events_min < MIN_EVENTS || self.events_max > MAX_EVENTS || self.events_min > self.events_max {
            return bad(format!(
                "event range [{}, {}] must lie within [{MIN_EVENTS}, {MAX_EVENTS}]",
                self.events_min, self.events_max
            ));
        }
        if !(0.0..0.5).contains(&self.edge_margin) {
            return bad(format!("edge_margin {} must lie in [0, 0.5)", self.edge_margin));
        }
        if !(self.min_intensity > 0.0 && self.min_intensity <= 1.0) {
            return bad(format!("min_intensity {} must lie in (0, 1]", self.min_intensity));
        }
        Ok(())
    }

    /// Truth and event count of sample `index`, independent of every other sample.
    pub fn draw(&self, seed: u64, index: usize) -> (Vec<SourceSpec>, usize) {
        let mut rng = stream_rng(derive_seed(seed, 0x6473), index as u64);
        let k = rng.random_range(self.sources_min..=self.sources_max);
        let m = self.edge_margin;
        let sources = (0..k)
            .map(|i| {
                // open intervals keep sources strictly inside the grid
                let phi = std::f64::consts::PI * (m + (1.0 - 2.0 * m) * open01(&mut rng));
                let c = (1.0 - 2.0 * m) * (2.0 * open01(&mut rng) - 1.0);
                let mut s = SourceSpec::new(phi, c);
                if i > 0 {
                    s.intensity = rng.random_range(self.min_intensity..=1.0);
                }
                s
            })
            .collect();
        let n = rng.random_range(self.events_min..=self.events_max);
        (sources, n)
    }
}

fn open01(rng: &mut crate::rng::Rng) -> f64 {
    loop {
        let u: f64 = rng.random();
        if u > 0.0 {
            return u;
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Simulates `n_samples` event files into `out_dir` and writes the manifest.
pub fn build_dataset(
    camera: &CameraModel,
    generator: &SampleGenerator,
    n_samples: usize,
    opts: &SimOptions,
    grid: Grid,
    label_sigma_deg: f64,
    out_dir: &Path,
) -> Result<DatasetManifest, DatasetError> {
    generator.validate()?;
    if n_samples == 0 {
        return Err(DatasetError::Invalid("n_samples must be positive".into()));
    }
    if !(label_sigma_deg > 0.0) {
        return Err(DatasetError::Invalid(format!("label sigma {label_sigma_deg} must be positive")));
    }
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let mut samples = Vec::with_capacity(n_samples);
    for index in 0..n_samples {
        let (sources, n_events) = generator.draw(opts.seed, index);
        let seed = derive_seed(opts.seed, index as u64);
        let sim = SimOptions { seed, ..opts.clone() };
        let list = simulate(camera, &sources, n_events, &sim).map_err(|source| DatasetError::Simulation { index, source })?;
        let name = format!("sample_{index:05}.ccev");
        let path = out_dir.join(&name);
        fs::write(&path, encode_events(&list)).map_err(io_err(&path))?;
        samples.push(SampleRecord {
            path: name,
            sources,
            n_events,
            seed,
        });
    }
    let manifest = DatasetManifest {
        samples,
        grid,
        label_sigma_deg,
        seed: opts.seed,
    };
    save_manifest(&manifest, &out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

pub fn save_manifest(manifest: &DatasetManifest, path: &Path) -> Result<(), DatasetError> {
    let text = serde_json::to_string_pretty(manifest).map_err(|e| DatasetError::Manifest {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    fs::write(path, text + "\n").map_err(io_err(path))
}

/// Reads a manifest and checks that every referenced event file exists.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest, DatasetError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let manifest: DatasetManifest = serde_json::from_str(&text).map_err(|e| DatasetError::Manifest {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    if !(manifest.label_sigma_deg > 0.0) {
        return Err(DatasetError::Manifest {
            path: path.to_path_buf(),
            message: format!("label_sigma_deg {} must be positive", manifest.label_sigma_deg),
        });
    }
    let dir = path.parent().unwrap_or(Path::new("."));
    for s in &manifest.samples {
        let p = dir.join(&s.path);
        if !p.is_file() {
            return Err(DatasetError::Manifest {
                path: path.to_path_buf(),
                message: format!("sample file {} does not exist", p.display()),
            });
        }
    }
    Ok(manifest)
}

/// Loads the events of one sample.
pub fn load_sample(manifest_path: &Path, record: &SampleRecord) -> Result<EventList, DatasetError> {
    let path = manifest_path.parent().unwrap_or(Path::new(".")).join(&record.path);
    let bytes = fs::read(&path).map_err(io_err(&path))?;
    decode_events(&bytes).map_err(|source| DatasetError::Format { path, source })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(gen: SampleGenerator, seed: u64, dir: &Path) -> DatasetManifest {
        build_dataset(
            &CameraModel::default(),
            &gen,
            10,
            &SimOptions {
                seed,
                ..SimOptions::default()
            },
            Grid::square(32),
            5.0,
            dir,
        )
        .unwrap()
    }

    #[test]
    fn counts_within_range() {
        let dir = tempfile::tempdir().unwrap();
        let gen = SampleGenerator {
            events_min: 67,
            events_max: 200,
            ..SampleGenerator::default()
        };
        let m = small(gen, 4, dir.path());
        assert_eq!(m.samples.len(), 10);
        let loaded = load_manifest(&dir.path().join(MANIFEST_FILE)).unwrap();
        assert_eq!(loaded, m);
        for s in &m.samples {
            assert!((67..=200).contains(&s.n_events));
            let list = load_sample(&dir.path().join(MANIFEST_FILE), s).unwrap();
            assert_eq!(list.len(), s.n_events);
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let gen = SampleGenerator {
            events_min: 67,
            events_max: 120,
            ..SampleGenerator::default()
        };
        assert_eq!(small(gen.clone(), 9, a.path()), small(gen, 9, b.path()));
        for k in 0..10 {
            let name = format!("sample_{k:05}.ccev");
            assert_eq!(fs::read(a.path().join(&name)).unwrap(), fs::read(b.path().join(&name)).unwrap());
        }
    }

    #[test]
    fn multi_source_counts() {
        let dir = tempfile::tempdir().unwrap();
        let gen = SampleGenerator {
            sources_min: 2,
            sources_max: 3,
            events_min: 60,
            events_max: 80,
            ..SampleGenerator::default()
        };
        let m = small(gen, 1, dir.path());
        assert!(m.samples.iter().all(|s| (2..=3).contains(&s.sources.len())));
    }

    #[test]
    fn rejects_bad_ranges_and_missing_files() {
        let gen = SampleGenerator {
            events_min: 10,
            ..SampleGenerator::default()
        };
        assert!(gen.validate().is_err());
        let dir = tempfile::tempdir().unwrap();
        let m = small(SampleGenerator { events_max: 100, ..SampleGenerator::default() }, 2, dir.path());
        fs::remove_file(dir.path().join(&m.samples[3].path)).unwrap();
        let err = load_manifest(&dir.path().join(MANIFEST_FILE)).unwrap_err();
        assert!(err.to_string().contains("sample_00003"), "{err}");
    }
}
