//! Scenario files: one TOML document describing the scene, the simulator
//! parameters, and optional sweep/ablation settings.
//!
//! ```toml
//! seed = 7
//! slots = 30
//!
//! [scene]
//! source = "synth"
//! n_vehicles = 20
//!
//! [dp]
//! epsilon = 0.5
//!
//! [sweep]
//! param = "dp.epsilon"
//! values = [0.1, 0.5, 1.0]
//! ```

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::federation::{DpSettings, DrlConfig, FlConfig, Mode, RepConfig, SimConfig};
use crate::scene::{load_csv, synthesize_traffic, CsvFormat, Scene, SynthConfig};

fn default_frame_rate() -> f64 {
    10.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase")]
pub enum SceneSource {
    /// Generated traffic; unspecified fields take the standard 20-vehicle
    /// defaults. The scenario seed replaces `seed`.
    Synth(SynthConfig),
    /// `frame_id,vehicle_id,x,y[,lane_id]` file; `scene_index` picks one
    /// scene when the file holds several.
    Csv {
        path: PathBuf,
        #[serde(default = "default_frame_rate")]
        frame_rate: f64,
        #[serde(default)]
        scene_index: usize,
    },
}

impl Default for SceneSource {
    fn default() -> Self {
        SceneSource::Synth(SynthConfig::default())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    /// Dotted path into the scenario, e.g. `dp.epsilon` or `fl.bad_fraction`.
    pub param: String,
    pub values: Vec<f64>,
    #[serde(default = "one")]
    pub repeats: usize,
}

fn one() -> usize {
    1
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        if self.values.is_empty() {
            return Err(Error::Config("sweep needs at least one value".into()));
        }
        if self.repeats == 0 {
            return Err(Error::Config("sweep repeats must be at least 1".into()));
        }
        if let Some(v) = self.values.iter().find(|v| !v.is_finite()) {
            return Err(Error::Config(format!("sweep value {v} is not finite")));
        }
        Ok(())
    }
}

/// Ablation variants; each disables or inverts one component.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Base,
    NoDrl,
    NoDp,
    NoAfl,
    LowR,
}

impl Variant {
    pub const ALL: [Variant; 5] = [Variant::Base, Variant::NoDrl, Variant::NoDp, Variant::NoAfl, Variant::LowR];

    pub fn mode(self) -> Mode {
        match self {
            Variant::Base => Mode::Afl,
            Variant::NoDrl => Mode::NoDrl,
            Variant::NoDp => Mode::NoDp,
            Variant::NoAfl => Mode::Sfl,
            Variant::LowR => Mode::LowRPriority,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Base => "base",
            Variant::NoDrl => "no-drl",
            Variant::NoDp => "no-dp",
            Variant::NoAfl => "no-afl",
            Variant::LowR => "low-r",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s.trim())
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}; expected one of base, no-drl, no-dp, no-afl, low-r")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblateSpec {
    pub variants: Vec<Variant>,
}

fn default_slots() -> usize {
    30
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub seed: u64,
    #[serde(default = "default_slots")]
    pub slots: usize,
    #[serde(default)]
    pub mode: Mode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    #[serde(default)]
    pub scene: SceneSource,
    #[serde(default)]
    pub fl: FlConfig,
    #[serde(default)]
    pub dp: DpSettings,
    #[serde(default)]
    pub drl: DrlConfig,
    #[serde(default)]
    pub reputation: RepConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ablate: Option<AblateSpec>,
}

impl ScenarioConfig {
    /// Standard scenario with every default and the given seed.
    pub fn standard(seed: u64) -> Self {
        Self {
            seed,
            slots: default_slots(),
            mode: Mode::default(),
            out_dir: None,
            scene: SceneSource::default(),
            fl: FlConfig::default(),
            dp: DpSettings::default(),
            drl: DrlConfig::default(),
            reputation: RepConfig::default(),
            sweep: None,
            ablate: None,
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => Error::Config(format!("{}: {other}", path.display())),
        })
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.slots == 0 {
            return Err(Error::Config("slots must be at least 1".into()));
        }
        self.sim_config().validate().map_err(|e| Error::Config(e.to_string()))?;
        if let SceneSource::Csv { frame_rate, .. } = &self.scene {
            if !(frame_rate.is_finite() && *frame_rate > 0.0) {
                return Err(Error::Config(format!("scene frame_rate must be positive, got {frame_rate}")));
            }
        }
        if let Some(sweep) = &self.sweep {
            sweep.validate()?;
        }
        Ok(())
    }

    pub fn sim_config(&self) -> SimConfig {
        SimConfig {
            fl: self.fl.clone(),
            dp: self.dp.clone(),
            drl: self.drl.clone(),
            reputation: self.reputation.clone(),
        }
    }

    /// Scene for a run seeded with `seed`.
    pub fn build_scene(&self, seed: u64) -> Result<Scene> {
        match &self.scene {
            SceneSource::Synth(synth) => synthesize_traffic(&SynthConfig { seed, ..synth.clone() }),
            SceneSource::Csv {
                path,
                frame_rate,
                scene_index,
            } => {
                let mut scenes = load_csv(path, CsvFormat::NgsimLike { frame_rate: *frame_rate })?;
                let count = scenes.len();
                if *scene_index >= count {
                    return Err(Error::Config(format!(
                        "scene_index {scene_index} out of range: {} holds {count} scene(s)",
                        path.display()
                    )));
                }
                Ok(scenes.swap_remove(*scene_index))
            }
        }
    }

    /// Copy with the numeric field at the dotted `path` set to `value`.
    /// Integer fields accept only integral values; booleans accept 0 and 1.
    pub fn with_param(&self, path: &str, value: f64) -> Result<Self> {
        let mut doc = toml::Value::try_from(self).map_err(|e| Error::Config(e.to_string()))?;
        let mut slot = &mut doc;
        for key in path.split('.') {
            slot = slot
                .get_mut(key)
                .ok_or_else(|| Error::Config(format!("parameter path {path:?} does not resolve")))?;
        }
        *slot = match slot {
            toml::Value::Float(_) => toml::Value::Float(value),
            toml::Value::Integer(_) if value.fract() == 0.0 && value.abs() < 9.0e15 => {
                toml::Value::Integer(value as i64)
            }
            toml::Value::Boolean(_) if value == 0.0 || value == 1.0 => toml::Value::Boolean(value == 1.0),
            other => {
                return Err(Error::Config(format!(
                    "parameter {path:?} holds {} and cannot take the value {value}",
                    other.type_str()
                )))
            }
        };
        let cfg: Self = doc.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_is_mandatory() {
        assert!(matches!(ScenarioConfig::from_toml_str("slots = 3"), Err(Error::Config(_))));
        let cfg = ScenarioConfig::from_toml_str("seed = 4").unwrap();
        assert_eq!(cfg, ScenarioConfig::standard(4));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(ScenarioConfig::from_toml_str("seed = 1\nslotz = 3").is_err());
        assert!(ScenarioConfig::from_toml_str("seed = 1\n[dp]\nepsilonn = 0.3").is_err());
    }

    #[test]
    fn toml_round_trip() {
        let mut cfg = ScenarioConfig::standard(9);
        cfg.sweep = Some(SweepSpec {
            param: "dp.epsilon".into(),
            values: vec![0.1, 0.2],
            repeats: 2,
        });
        cfg.ablate = Some(AblateSpec {
            variants: vec![Variant::Base, Variant::LowR],
        });
        let text = cfg.to_toml_string().unwrap();
        assert_eq!(ScenarioConfig::from_toml_str(&text).unwrap(), cfg);
    }

    #[test]
    fn csv_scene_source_parses() {
        let cfg = ScenarioConfig::from_toml_str("seed = 1\n[scene]\nsource = \"csv\"\npath = \"a.csv\"").unwrap();
        assert_eq!(
            cfg.scene,
            SceneSource::Csv {
                path: "a.csv".into(),
                frame_rate: 10.0,
                scene_index: 0
            }
        );
    }

    #[test]
    fn with_param_sets_floats_and_integers() {
        let cfg = ScenarioConfig::standard(1);
        assert_eq!(cfg.with_param("dp.epsilon", 0.7).unwrap().dp.epsilon, 0.7);
        assert_eq!(cfg.with_param("fl.local_epochs", 3.0).unwrap().fl.local_epochs, 3);
        assert_eq!(cfg.with_param("scene.n_vehicles", 8.0).unwrap().scene, {
            SceneSource::Synth(SynthConfig {
                n_vehicles: 8,
                ..SynthConfig::default()
            })
        });
        assert!(!cfg.with_param("dp.enabled", 0.0).unwrap().dp.enabled);
        assert!(cfg.with_param("fl.local_epochs", 2.5).is_err());
        assert!(cfg.with_param("dp.nope", 1.0).is_err());
        assert!(cfg.with_param("dp.epsilon", -1.0).is_err());
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert!("no-rl".parse::<Variant>().is_err());
    }
}
