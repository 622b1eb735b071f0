//! Run configuration: one JSON document holding every module's settings,
//! merged from a file, `--set` overrides and dedicated flags, in that order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use ccir_core::dataset::SampleGenerator;
use ccir_core::events::LineWindow;
use ccir_core::imaging::ReconConfig;
use ccir_core::labels::DEFAULT_LABEL_SIGMA_DEG;
use ccir_core::{CameraModel, Grid, SimOptions};
use ccir_net::config::NetworkConfig;
use ccir_net::train::TrainConfig;

use crate::CliError;

/// Photopeak windows applied to events before classical reconstruction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterConfig {
    pub enabled: bool,
    pub lines_kev: Vec<f64>,
    /// Half-width of each window in energy standard deviations.
    pub n_sigma: f64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            lines_kev: vec![511.0, 1275.0],
            n_sigma: 3.0,
        }
    }
}

impl FilterConfig {
    pub fn windows(&self, camera: &CameraModel) -> Vec<LineWindow> {
        self.lines_kev
            .iter()
            .map(|&e| {
                let w = LineWindow::three_sigma(e, camera.e_res_absorber_511);
                LineWindow {
                    energy_kev: e,
                    tol_kev: w.tol_kev * self.n_sigma / 3.0,
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Seeds every random stream; copied into the module seeds on load.
    pub seed: u64,
    pub workers: usize,
    pub camera: CameraModel,
    pub sim: SimOptions,
    pub recon: ReconConfig,
    pub filter: FilterConfig,
    pub grid: Grid,
    pub label_sigma_deg: f64,
    pub dataset: SampleGenerator,
    pub network: NetworkConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            workers: 1,
            camera: CameraModel::default(),
            sim: SimOptions::default(),
            recon: ReconConfig::default(),
            filter: FilterConfig::default(),
            grid: Grid::square(128),
            label_sigma_deg: DEFAULT_LABEL_SIGMA_DEG,
            dataset: SampleGenerator::default(),
            network: NetworkConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

fn invalid(pointer: String, message: impl Into<String>) -> CliError {
    CliError::Config {
        pointer,
        message: message.into(),
    }
}

/// Turns `a.b.c` or `/a/b/c` into a JSON pointer.
fn to_pointer(path: &str) -> String {
    if path.starts_with('/') {
        path.to_string()
    } else {
        format!("/{}", path.replace('.', "/"))
    }
}

/// Sets `pointer` inside `root`, creating objects along the way.
pub fn set_pointer(root: &mut Value, pointer: &str, value: Value) -> Result<(), CliError> {
    let mut cur = root;
    let parts: Vec<&str> = pointer.trim_start_matches('/').split('/').collect();
    for (i, part) in parts.iter().enumerate() {
        if part.is_empty() {
            return Err(invalid(pointer.into(), "empty path segment"));
        }
        let obj = match cur {
            Value::Object(map) => map,
            other if other.is_null() => {
                *other = Value::Object(Default::default());
                other.as_object_mut().expect("just created")
            }
            _ => return Err(invalid(pointer.into(), "path runs through a non-object value")),
        };
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        cur = obj.entry(part.to_string()).or_insert(Value::Null);
    }
    Ok(())
}

/// Parses a `PATH=VALUE` override; values that are not JSON are taken as strings.
pub fn parse_override(text: &str) -> Result<(String, Value), CliError> {
    let (path, raw) = text
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("--set expects PATH=VALUE, got {text:?}")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok((to_pointer(path.trim()), value))
}

/// Loads, merges and validates the run configuration.
pub fn load_config(path: Option<&Path>, overrides: &[(String, Value)]) -> Result<RunConfig, CliError> {
    let mut root = match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| CliError::Data(format!("{}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", p.display())))?
        }
        None => Value::Object(Default::default()),
    };
    if !root.is_object() {
        return Err(invalid("".into(), "config must be a JSON object"));
    }
    for (pointer, value) in overrides {
        set_pointer(&mut root, pointer, value.clone())?;
    }
    let mut cfg: RunConfig = serde_path_to_error::deserialize(root).map_err(|e| {
        let pointer = e
            .path()
            .iter()
            .filter_map(|seg| match seg {
                serde_path_to_error::Segment::Map { key } => Some(key.clone()),
                serde_path_to_error::Segment::Seq { index } => Some(index.to_string()),
                _ => None,
            })
            .fold(String::new(), |acc, s| acc + "/" + &s);
        invalid(pointer, e.into_inner().to_string())
    })?;
    cfg.sim.seed = cfg.seed;
    cfg.recon.seed = cfg.seed;
    cfg.train.seed = cfg.seed;
    validate(&cfg)?;
    Ok(cfg)
}

fn first<'a>(prefix: &str, errs: impl IntoIterator<Item = (&'a str, String)>) -> Result<(), CliError> {
    match errs.into_iter().next() {
        Some((field, msg)) => Err(invalid(format!("{prefix}/{}", field.replace('.', "/")), msg)),
        None => Ok(()),
    }
}

pub fn validate(cfg: &RunConfig) -> Result<(), CliError> {
    if cfg.workers == 0 {
        return Err(invalid("/workers".into(), "must be at least 1"));
    }
    first("/camera", cfg.camera.validate())?;
    let fc = cfg.sim.false_coincidence_fraction;
    if !(0.0..1.0).contains(&fc) {
        return Err(invalid("/sim/false_coincidence_fraction".into(), format!("{fc} must lie in [0, 1)")));
    }
    first("/recon", cfg.recon.validate())?;
    if cfg.filter.lines_kev.iter().any(|&e| !(e > 0.0)) || !(cfg.filter.n_sigma > 0.0) {
        return Err(invalid("/filter".into(), "lines and n_sigma must be positive"));
    }
    Grid::new(cfg.grid.width, cfg.grid.height).map_err(|e| invalid("/grid".into(), e.to_string()))?;
    if !(cfg.label_sigma_deg > 0.0) {
        return Err(invalid("/label_sigma_deg".into(), format!("{} must be positive", cfg.label_sigma_deg)));
    }
    cfg.dataset.validate().map_err(|e| invalid("/dataset".into(), e.to_string()))?;
    first("/network", cfg.network.validate())?;
    first("/train", cfg.train.validate())?;
    first("/train/loss", cfg.train.loss.validate())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        assert_eq!(load_config(None, &[]).unwrap(), RunConfig::default());
    }

    #[test]
    fn errors_carry_json_pointers() {
        let err = load_config(None, &[("/recon/mlem_iters".into(), Value::from(0))]).unwrap_err();
        assert!(matches!(err, CliError::Config { ref pointer, .. } if pointer == "/recon/mlem_iters"), "{err}");
        let err = load_config(None, &[("/recon/bogus".into(), Value::from(1))]).unwrap_err();
        assert!(matches!(err, CliError::Config { ref pointer, .. } if pointer == "/recon/bogus"), "{err}");
        let err = load_config(None, &[("/network/heads".into(), Value::from("four"))]).unwrap_err();
        assert!(matches!(err, CliError::Config { ref pointer, .. } if pointer == "/network/heads"), "{err}");
        let err = load_config(None, &[("/train/augment/merge_max".into(), Value::from(1))]).unwrap_err();
        assert!(
            matches!(err, CliError::Config { ref pointer, .. } if pointer == "/train/augment/merge_max"),
            "{err}"
        );
    }

    #[test]
    fn overrides_apply_in_order_and_seed_propagates() {
        let o = vec![
            parse_override("recon.mlem_iters=12").unwrap(),
            parse_override("/recon/mlem_iters=15").unwrap(),
            parse_override("seed=9").unwrap(),
        ];
        let cfg = load_config(None, &o).unwrap();
        assert_eq!(cfg.recon.mlem_iters, 15);
        assert_eq!((cfg.sim.seed, cfg.recon.seed, cfg.train.seed), (9, 9, 9));
        assert!(parse_override("no_equals").is_err());
    }
}
