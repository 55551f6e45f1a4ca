//! Single-file configuration for the odometry pipeline.

use serde::{Deserialize, Serialize};

use crate::estimator::RegistrationConfig;
use crate::scc::SccConfig;
use crate::voxel_map::{StaticRecordConfig, VoxelMapConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FrontendConfig {
    /// Frames registered from the IMU alone to seed the maps.
    pub n_bootstrap: usize,
    /// Voxel size used to thin each scan before registration, m.
    pub downsample: f64,
    /// Temporal map window length, s.
    pub window: f64,
    /// Worker threads; 0 lets the runtime decide. Outputs do not depend on it.
    pub threads: usize,
    /// Largest tolerated spacing between IMU samples, s.
    pub max_imu_gap: f64,
    /// Consecutive degenerate frames after which the run aborts.
    pub max_degenerate_run: usize,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        Self { n_bootstrap: 5, downsample: 0.25, window: 2.0, threads: 0, max_imu_gap: 0.05, max_degenerate_run: 50 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Timestamp association tolerance, s.
    pub max_dt: f64,
    /// Registered frames skipped before map labels are scored.
    pub warmup_frames: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { max_dt: 0.01, warmup_frames: 10 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub frontend: FrontendConfig,
    pub registration: RegistrationConfig,
    pub voxel_map: VoxelMapConfig,
    pub static_record: StaticRecordConfig,
    pub scc: SccConfig,
    pub eval: EvalConfig,
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot parse configuration: {0}")]
    Parse(String),
    #[error("invalid override `{0}`: expected key=value")]
    Override(String),
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration is always representable")
    }

    /// Applies dotted `key=value` overrides such as `registration.mode=full`
    /// or `frontend.window=1.5`. Values are parsed as TOML, falling back to a
    /// bare string.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self, ConfigError> {
        if overrides.is_empty() {
            return Ok(*self);
        }
        let mut doc: toml::Table = toml::from_str(&self.to_toml()).map_err(|e| ConfigError::Parse(e.to_string()))?;
        for o in overrides {
            let o = o.as_ref();
            let (key, raw) = o.split_once('=').ok_or_else(|| ConfigError::Override(o.to_string()))?;
            let value = parse_value(raw.trim());
            let path: Vec<&str> = key.trim().split('.').collect();
            if path.iter().any(|p| p.is_empty()) {
                return Err(ConfigError::Override(o.to_string()));
            }
            let mut table = &mut doc;
            for part in &path[..path.len() - 1] {
                table = table
                    .entry(part.to_string())
                    .or_insert_with(|| toml::Value::Table(toml::Table::new()))
                    .as_table_mut()
                    .ok_or_else(|| ConfigError::Invalid(format!("`{part}` in `{key}` is not a section")))?;
            }
            table.insert(path[path.len() - 1].to_string(), value);
        }
        let text = toml::to_string(&doc).map_err(|e| ConfigError::Parse(e.to_string()))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let f = &self.frontend;
        if !(f.downsample > 0.0 && f.window > 0.0 && f.max_imu_gap > 0.0) {
            return Err(ConfigError::Invalid("frontend downsample, window and max_imu_gap must be positive".into()));
        }
        if f.n_bootstrap == 0 || f.max_degenerate_run == 0 {
            return Err(ConfigError::Invalid("frontend n_bootstrap and max_degenerate_run must be at least 1".into()));
        }
        let v = &self.voxel_map;
        if !(v.voxel_size > 0.0 && v.max_corr_dist > 0.0) || v.max_points_per_voxel < 3 {
            return Err(ConfigError::Invalid(
                "voxel_map needs positive voxel_size and max_corr_dist and at least 3 points per voxel".into(),
            ));
        }
        if !(v.fit.plane_eps > 0.0 && v.fit.plane_ratio > 0.0) {
            return Err(ConfigError::Invalid("voxel_map.fit thresholds must be positive".into()));
        }
        let s = &self.static_record;
        if !(s.voxel_size > 0.0 && s.horizon > 0.0) {
            return Err(ConfigError::Invalid("static_record voxel_size and horizon must be positive".into()));
        }
        if !(self.eval.max_dt > 0.0) {
            return Err(ConfigError::Invalid("eval.max_dt must be positive".into()));
        }
        self.registration.validate().map_err(ConfigError::Invalid)?;
        self.scc.validate().map_err(ConfigError::Invalid)
    }
}

fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimator::RegistrationMode;

    #[test]
    fn defaults_are_valid_and_round_trip() {
        let cfg = PipelineConfig::default();
        cfg.validate().unwrap();
        assert_eq!(PipelineConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
        assert_eq!(PipelineConfig::from_toml("").unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(PipelineConfig::from_toml("[frontend]\nwindoww = 2.0"), Err(ConfigError::Parse(_))));
        assert!(PipelineConfig::from_toml("[nope]").is_err());
    }

    #[test]
    fn overrides_apply_with_types() {
        let cfg = PipelineConfig::default()
            .with_overrides(&["registration.mode=sequential", "frontend.window=1.5", "scc.dbscan_min_pts=7"])
            .unwrap();
        assert_eq!(cfg.registration.mode, RegistrationMode::Sequential);
        assert_eq!(cfg.frontend.window, 1.5);
        assert_eq!(cfg.scc.dbscan_min_pts, 7);
        assert!(PipelineConfig::default().with_overrides(&["frontend.window"]).is_err());
        assert!(PipelineConfig::default().with_overrides(&["frontend.window=-1"]).is_err());
        assert!(PipelineConfig::default().with_overrides(&["frontend.bogus=1"]).is_err());
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(PipelineConfig::from_toml("[registration]\ntheta_thr_deg = 95.0").is_err());
        assert!(PipelineConfig::from_toml("[frontend]\ndownsample = 0.0").is_err());
    }
}
