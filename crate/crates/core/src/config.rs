//! TOML run configuration.
//!
//! Only `[model]` is required; every other section has defaults. Unknown keys
//! are rejected with the offending line and key.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::coefficients::{CoefficientSet, LawSpec};
use crate::error::{Error, Result};
use crate::field::{check_levels, default_levels, FieldProbes};
use crate::grid::{GridSpec, TimeGrid};
use crate::verify::{Corruption, Tolerances};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: CoefficientSet,
    #[serde(default)]
    pub grid: GridSpec,
    #[serde(default)]
    pub ladder: LadderSpec,
    #[serde(default)]
    pub law: LawSpec,
    #[serde(default)]
    pub probes: ProbeSpec,
    #[serde(default)]
    pub tolerances: Tolerances,
    #[serde(default)]
    pub output: OutputSpec,
    #[serde(default)]
    pub fixture: FixtureSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LadderSpec {
    #[serde(default = "default_levels")]
    pub levels: Vec<f64>,
}

impl Default for LadderSpec {
    fn default() -> Self {
        Self { levels: default_levels() }
    }
}

/// Probe axes; `times` defaults to {0, T/4, T/2, 3T/4, T - eps_T}.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeSpec {
    #[serde(default)]
    pub times: Option<Vec<f64>>,
    #[serde(default = "default_axis")]
    pub xs: Vec<f64>,
    #[serde(default = "default_axis")]
    pub nus: Vec<f64>,
}

fn default_axis() -> Vec<f64> {
    vec![0.0, 0.5, 1.0, 2.0]
}

impl Default for ProbeSpec {
    fn default() -> Self {
        Self { times: None, xs: default_axis(), nus: default_axis() }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSpec {
    #[serde(default)]
    pub dir: Option<PathBuf>,
    /// Add one X column per sample to the level CSVs.
    #[serde(default)]
    pub per_sample: bool,
}

/// Negative-control hook: perturb the input of one verification check.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FixtureSpec {
    #[serde(default)]
    pub corrupt: Option<Corruption>,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.check()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    fn check(&self) -> Result<()> {
        self.model.check_well_formed()?;
        check_levels(&self.ladder.levels).map_err(|e| Error::Config(format!("ladder.levels: {e}")))?;
        let g = self.time_grid().map_err(|e| Error::Config(format!("grid: {e}")))?;
        self.field_probes(&g).validate(&g)?;
        Ok(())
    }

    pub fn time_grid(&self) -> Result<TimeGrid> {
        TimeGrid::graded(self.model.horizon, &self.grid)
    }

    pub fn field_probes(&self, g: &TimeGrid) -> FieldProbes {
        let mut p = FieldProbes::default_for(g);
        if let Some(t) = &self.probes.times {
            p.times = t.clone();
        }
        p.xs = self.probes.xs.clone();
        p.nus = self.probes.nus.clone();
        p
    }

    /// SHA-256 of the canonical JSON form of the effective configuration.
    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
[model]
A = { kind = "constant", value = 0.0 }
B = { kind = "constant", value = 1.0 }
Q = { kind = "constant", value = 1.0 }
R = { kind = "constant", value = 1.0 }
K = 1.0
delta = 1.0
eps0 = 1.0
T = 1.0
"#;

    #[test]
    fn minimal_config_takes_defaults() {
        let cfg = RunConfig::parse(MINIMAL).unwrap();
        assert_eq!(cfg.model, CoefficientSet::unit(1.0));
        assert_eq!(cfg.ladder.levels, default_levels());
        assert_eq!(cfg.law, LawSpec::default());
        assert_eq!(cfg.fixture.corrupt, None);
        assert_eq!(cfg.digest(), RunConfig::parse(MINIMAL).unwrap().digest());
    }

    #[test]
    fn unknown_key_names_line_and_key() {
        let text = format!("{MINIMAL}\n[grid]\nnodes = 5\n");
        let msg = RunConfig::parse(&text).unwrap_err().to_string();
        assert!(msg.contains("nodes") && msg.contains("line"), "{msg}");
    }

    #[test]
    fn decreasing_ladder_is_rejected() {
        let text = format!("{MINIMAL}\n[ladder]\nlevels = [10.0, 1.0]\n");
        assert!(matches!(RunConfig::parse(&text), Err(Error::Config(_))));
    }

    #[test]
    fn fixture_names_parse() {
        let text = format!("{MINIMAL}\n[fixture]\ncorrupt = \"u_pinned\"\n");
        assert_eq!(RunConfig::parse(&text).unwrap().fixture.corrupt, Some(Corruption::UPinned));
        let bad = format!("{MINIMAL}\n[fixture]\ncorrupt = \"nope\"\n");
        assert!(RunConfig::parse(&bad).is_err());
    }

    #[test]
    fn digest_tracks_content() {
        let a = RunConfig::parse(MINIMAL).unwrap();
        let mut b = a.clone();
        b.law = b.law.with_seed(9);
        assert_ne!(a.digest(), b.digest());
    }
}
