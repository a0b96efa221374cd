//! Run configuration files: every flag of every subcommand may also be given
//! as a key of a JSON object. Flags take precedence over file values.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Deserialize;

use mocae_core::calib::{CalibrationMethod, CalibrationMode};
use mocae_core::fuse::NmsKind;
use mocae_core::geometry::GeometryKind;
use mocae_core::metrics::{AceDenominator, ApRule, ReliabilityFormat, SweepParam};

use crate::CliError;

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dets: Option<Vec<PathBuf>>,
    pub gt: Option<PathBuf>,
    pub cal: Option<Vec<String>>,
    pub out: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub report: Option<PathBuf>,
    pub spec: Option<PathBuf>,
    pub preset: Option<Preset>,
    pub geometry: Option<GeometryKind>,

    pub nms: Option<NmsKind>,
    pub iou_nms: Option<f64>,
    pub sigma_nms: Option<f64>,
    pub score_voting: Option<bool>,
    pub sigma_sv: Option<f64>,
    pub background_threshold: Option<f64>,
    pub top_k: Option<usize>,
    pub prune_after_soft: Option<f64>,

    pub method: Option<MethodArg>,
    pub mode: Option<ModeArg>,

    pub taus: Option<Vec<f64>>,
    pub max_dets: Option<usize>,
    pub bins: Option<usize>,
    pub ap_rule: Option<ApRule>,
    pub ace: Option<AceDenominator>,
    pub weighting: Option<WeightingArg>,
    pub tau: Option<f64>,
    pub format: Option<ReliabilityFormat>,

    pub param: Option<SweepParam>,
    pub values: Option<Vec<f64>>,

    pub scenes: Option<usize>,
    pub seed: Option<u64>,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))
    }
}

/// The flag if given, else the config value, else the default.
pub fn pick<T>(flag: Option<T>, config: Option<T>, default: T) -> T {
    flag.or(config).unwrap_or(default)
}

/// Like [`pick`] for list-valued flags, where "not given" is an empty list.
pub fn pick_list<T>(flag: Vec<T>, config: Option<Vec<T>>) -> Vec<T> {
    if flag.is_empty() {
        config.unwrap_or_default()
    } else {
        flag
    }
}

pub fn required<T>(value: Option<T>, name: &str) -> Result<T, CliError> {
    value.ok_or_else(|| CliError::Usage(format!("missing required option --{name}")))
}

/// Parses a flag value through its serde name.
pub fn serde_value<T: DeserializeOwned>(s: &str) -> Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|e| e.to_string())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Theorem,
    Demo,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MethodArg {
    Ir,
    Lr,
    Identity,
}

impl From<MethodArg> for CalibrationMethod {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Ir => CalibrationMethod::Isotonic,
            MethodArg::Lr => CalibrationMethod::Linear,
            MethodArg::Identity => CalibrationMethod::Identity,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModeArg {
    Ca,
    Cw,
}

impl From<ModeArg> for CalibrationMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Ca => CalibrationMode::ClassAgnostic,
            ModeArg::Cw => CalibrationMode::ClassWise,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightingArg {
    Reduced,
    Precision,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"iou_nms": 0.5}"#).is_ok());
        assert!(serde_json::from_str::<RunConfig>(r#"{"iou_nmss": 0.5}"#).is_err());
    }

    #[test]
    fn flags_win_over_config() {
        assert_eq!(pick(Some(1), Some(2), 3), 1);
        assert_eq!(pick(None, Some(2), 3), 2);
        assert_eq!(pick(None, None, 3), 3);
        assert_eq!(pick_list(vec![], Some(vec![1])), vec![1]);
        assert_eq!(pick_list(vec![2], Some(vec![1])), vec![2]);
    }

    #[test]
    fn enum_flags_use_serde_names() {
        assert_eq!(
            serde_value::<NmsKind>("soft-gaussian"),
            Ok(NmsKind::SoftGaussian)
        );
        assert_eq!(serde_value::<MethodArg>("ir"), Ok(MethodArg::Ir));
        assert!(serde_value::<ModeArg>("xx").is_err());
    }
}
