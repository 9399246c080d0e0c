//! Versioned JSON container for a trained model and its monitoring setup.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pmu::PmuPlacement;
use crate::stability::{AlignmentMap, TemperatureConfig};
use crate::vae::{TrainConfig, VaeModel};

pub const FORMAT: &str = "voltstab-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub model: VaeModel,
    #[serde(default)]
    pub placement: Option<PmuPlacement>,
    #[serde(default)]
    pub train_config: Option<TrainConfig>,
    #[serde(default)]
    pub alignment: Option<AlignmentMap>,
    #[serde(default)]
    pub temperature: Option<TemperatureConfig>,
}

impl Checkpoint {
    pub fn new(model: VaeModel) -> Self {
        Checkpoint {
            format: FORMAT.into(),
            version: VERSION,
            model,
            placement: None,
            train_config: None,
            alignment: None,
            temperature: None,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: Checkpoint = serde_json::from_str(text)?;
        if c.format != FORMAT {
            return Err(Error::Config(format!("not a checkpoint file (format `{}`)", c.format)));
        }
        if c.version != VERSION {
            return Err(Error::Config(format!(
                "checkpoint version {} is not supported (expected {VERSION})",
                c.version
            )));
        }
        c.model.validate()?;
        if let Some(p) = &c.placement {
            if p.vector_len() != c.model.input_dim() {
                return Err(Error::DimensionMismatch {
                    expected: c.model.input_dim(),
                    got: p.vector_len(),
                });
            }
        }
        if let Some(a) = &c.alignment {
            a.validate()?;
        }
        if let Some(t) = &c.temperature {
            t.validate()?;
        }
        Ok(c)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn alignment(&self) -> Result<&AlignmentMap> {
        self.alignment
            .as_ref()
            .ok_or_else(|| Error::Config("checkpoint has no fitted alignment".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vae::{Arch, InitScheme, Likelihood};
    use rand::SeedableRng;

    #[test]
    fn json_round_trip_is_exact() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let arch = Arch::from_unit_lists(&[6, 4], &[6, 3], 3).unwrap();
        let model = VaeModel::new(3, &arch, Likelihood::Bernoulli, InitScheme::Scaled, &mut rng).unwrap();
        let mut c = Checkpoint::new(model);
        c.alignment = Some(AlignmentMap::identity());
        c.temperature = Some(TemperatureConfig { phi: 0.05 });
        let back = Checkpoint::from_json(&c.to_json().unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn wrong_version_is_rejected() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let arch = Arch::from_unit_lists(&[6, 4], &[6, 3], 3).unwrap();
        let model = VaeModel::new(3, &arch, Likelihood::Gaussian, InitScheme::Scaled, &mut rng).unwrap();
        let mut c = Checkpoint::new(model);
        c.version = 99;
        let text = serde_json::to_string(&c).unwrap();
        assert!(matches!(Checkpoint::from_json(&text), Err(Error::Config(_))));
    }
}
