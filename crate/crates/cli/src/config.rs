use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use voltstab::cpflow::ContinuationOptions;
use voltstab::grid::GridCase;
use voltstab::pipeline::{DatasetRecipe, EvalConfig};
use voltstab::pmu::{NoiseModel, PmuPlacement};
use voltstab::powerflow::SolverOptions;
use voltstab::stability::TemperatureConfig;
use voltstab::vae::TrainConfig;
use voltstab::{Error, Result};

/// Everything a run can be configured with. Every field is optional in the
/// JSON file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub case: Option<PathBuf>,
    /// Preset name or explicit bus list.
    pub placement: Option<PlacementSpec>,
    pub seed: Option<u64>,
    pub solver: SolverOptions,
    pub continuation: ContinuationOptions,
    pub recipe: DatasetRecipe,
    pub train: TrainConfig,
    pub encoder: Option<Vec<usize>>,
    pub decoder: Option<Vec<usize>>,
    pub temperature: Option<TemperatureConfig>,
    pub intercept: Option<bool>,
    /// Measurement noise for schedule replay and VCP evaluation.
    pub noise: Option<NoiseModel>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PlacementSpec {
    Preset(String),
    Buses(Vec<i64>),
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            Some(p) => Ok(serde_json::from_str(&std::fs::read_to_string(p)?)?),
            None => Ok(RunConfig::default()),
        }
    }

    pub fn case_path(&self, flag: Option<&PathBuf>) -> Result<PathBuf> {
        flag.or(self.case.as_ref())
            .cloned()
            .ok_or_else(|| Error::Config("no case given (use --case or `case` in the config)".into()))
    }

    pub fn load_case(&self, flag: Option<&PathBuf>) -> Result<(PathBuf, GridCase)> {
        let p = self.case_path(flag)?;
        let case = GridCase::from_file(&p)?;
        Ok((p, case))
    }

    /// Placement from the flag, the config, or the preset named after the
    /// case file.
    pub fn placement(&self, flag: Option<&str>, case_path: &Path) -> Result<PmuPlacement> {
        let spec = match flag {
            Some(s) => Some(parse_placement(s)),
            None => self.placement.clone(),
        };
        match spec {
            Some(PlacementSpec::Buses(b)) => PmuPlacement::new(b),
            Some(PlacementSpec::Preset(name)) => PmuPlacement::preset(&name)
                .ok_or_else(|| Error::Config(format!("unknown placement preset `{name}`"))),
            None => {
                let stem = case_path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
                PmuPlacement::preset(stem).ok_or_else(|| {
                    Error::Config(format!("no placement preset for `{stem}`; pass --placement"))
                })
            }
        }
    }

    pub fn seed(&self, flag: Option<u64>) -> u64 {
        flag.or(self.seed).unwrap_or(0)
    }

    pub fn temperature(&self, phi: Option<f64>, default: f64) -> Result<TemperatureConfig> {
        let t = match phi {
            Some(p) => TemperatureConfig::new(p)?,
            None => self.temperature.unwrap_or(TemperatureConfig { phi: default }),
        };
        t.validate()?;
        Ok(t)
    }

    pub fn eval_config(&self, phi: Option<f64>, seed: u64) -> Result<EvalConfig> {
        Ok(EvalConfig {
            temperature: self.temperature(phi, 0.0)?,
            seed,
            noise: self.noise.unwrap_or_else(NoiseModel::none),
            continuation: self.continuation,
        })
    }
}

fn parse_placement(s: &str) -> PlacementSpec {
    let buses: std::result::Result<Vec<i64>, _> = s.split(',').map(|b| b.trim().parse()).collect();
    match buses {
        Ok(b) => PlacementSpec::Buses(b),
        Err(_) => PlacementSpec::Preset(s.to_string()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn placement_flag_accepts_lists_and_presets() {
        assert_eq!(parse_placement("2, 4,9"), PlacementSpec::Buses(vec![2, 4, 9]));
        assert_eq!(parse_placement("case57"), PlacementSpec::Preset("case57".into()));
    }

    #[test]
    fn partial_config_fills_defaults() {
        let c: RunConfig = serde_json::from_str(r#"{"seed": 7, "train": {"max_steps": 10}}"#).unwrap();
        assert_eq!(c.seed(None), 7);
        assert_eq!(c.seed(Some(3)), 3);
        assert_eq!(c.train.max_steps, 10);
        assert_eq!(c.train.batch_size, TrainConfig::default().batch_size);
        assert!(serde_json::from_str::<RunConfig>(r#"{"sead": 1}"#).is_err());
    }
}
