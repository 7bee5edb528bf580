use std::path::{Path, PathBuf};

use mcdm::diffusion::{make_schedule, NoiseSchedule, ScheduleKind};
use mcdm::features::ExtractorSpec;
use mcdm::masks::MaskGenParams;
use mcdm::model::DenoiserConfig;
use mcdm::seed;
use mcdm::TrainingConfig;
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::error::CliError;

pub const OUT_DIR_ENV: &str = "MCDM_OUT_DIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub image_size: usize,
    pub global_seed: u64,
    pub schedule: ScheduleSection,
    pub model: ModelSection,
    pub training: TrainingConfig,
    pub mask: MaskSection,
    pub extractor: ExtractorSpec,
    pub augment: AugmentSection,
    pub paths: PathsSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSection {
    #[serde(rename = "T")]
    pub steps: usize,
    pub kind: ScheduleKind,
    pub beta_min: f64,
    pub beta_max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub base_width: usize,
    pub depth: usize,
    pub time_embed_dim: usize,
    pub channel_multipliers: Vec<usize>,
    pub attention: bool,
}

/// Mask generator settings. `length` defaults to an eighth of the image side.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub length: Option<f64>,
    pub max_angle: f64,
    pub coverage_bounds: [f64; 2],
    pub max_strokes: usize,
    pub square_side_bounds: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentSection {
    /// Augmented samples generated per real source image.
    pub per_image: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data_dir: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifest: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let model = DenoiserConfig::default();
        let mask = MaskGenParams::for_image(256, 256, 0);
        Self {
            image_size: 256,
            global_seed: 0,
            schedule: ScheduleSection {
                steps: 1000,
                kind: ScheduleKind::Linear,
                beta_min: 1e-4,
                beta_max: 0.02,
            },
            model: ModelSection {
                base_width: model.base_width,
                depth: model.depth,
                time_embed_dim: model.time_embed_dim,
                channel_multipliers: model.channel_multipliers,
                attention: model.attention,
            },
            training: TrainingConfig::default(),
            mask: MaskSection {
                length: None,
                max_angle: mask.max_angle,
                coverage_bounds: [mask.coverage_bounds.0, mask.coverage_bounds.1],
                max_strokes: mask.max_strokes,
                square_side_bounds: [mask.square_side_bounds.0, mask.square_side_bounds.1],
            },
            extractor: ExtractorSpec::default(),
            augment: AugmentSection { per_image: 1 },
            paths: PathsSection::default(),
        }
    }
}

/// Builds the effective config: defaults, then `file`, then each `key=value`
/// override in order, then `seed`.
pub fn load(
    file: Option<&Path>,
    overrides: &[String],
    seed: Option<u64>,
) -> Result<RunConfig, CliError> {
    let mut tree = Value::try_from(RunConfig::default())
        .map_err(|e| CliError::config("<defaults>", e.to_string()))?
        .as_table()
        .cloned()
        .unwrap_or_default();
    if let Some(path) = file {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::config("--config", format!("{}: {e}", path.display())))?;
        let user: Table = text
            .parse()
            .map_err(|e: toml::de::Error| CliError::config("--config", e.message().to_string()))?;
        merge(&mut tree, user);
    }
    for ov in overrides {
        let (key, raw) = ov
            .split_once('=')
            .ok_or_else(|| CliError::config(ov, "override must look like key=value"))?;
        set_path(&mut tree, key.trim(), parse_value(raw.trim()))?;
    }
    if let Some(s) = seed {
        tree.insert("global_seed".into(), Value::Integer(s as i64));
    }
    let de = toml::Value::Table(tree);
    let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let field = e.path().to_string();
        CliError::config(field, e.into_inner().to_string())
    })?;
    cfg.validate()?;
    Ok(cfg)
}

fn merge(base: &mut Table, over: Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Parses an override value as a TOML literal, falling back to a string.
fn parse_value(raw: &str) -> Value {
    format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

fn set_path(tree: &mut Table, key: &str, value: Value) -> Result<(), CliError> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::config(key, "malformed key"));
    }
    let mut node = tree;
    for p in &parts[..parts.len() - 1] {
        let entry = node
            .entry(p.to_string())
            .or_insert_with(|| Value::Table(Table::new()));
        node = entry
            .as_table_mut()
            .ok_or_else(|| CliError::config(key, format!("`{p}` is not a table")))?;
    }
    node.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        if self.image_size == 0 {
            return Err(CliError::config("image_size", "must be positive"));
        }
        self.schedule()?;
        self.denoiser_config()
            .validate()
            .map_err(|e| CliError::from_param("model", e))?;
        self.training
            .validate()
            .map_err(|e| CliError::from_param("training", e))?;
        self.mask_params()
            .validate()
            .map_err(|e| CliError::from_param("mask", e))?;
        if self.extractor.dim == 0 {
            return Err(CliError::config("extractor.dim", "must be positive"));
        }
        if self.augment.per_image == 0 {
            return Err(CliError::config("augment.per_image", "must be positive"));
        }
        Ok(())
    }

    pub fn schedule(&self) -> Result<NoiseSchedule, CliError> {
        let s = &self.schedule;
        make_schedule(s.steps, s.kind, s.beta_min, s.beta_max)
            .map_err(|e| CliError::from_param("schedule", e))
    }

    pub fn stage_seed(&self, stage: &str) -> u64 {
        seed::derive_tag(self.global_seed, stage)
    }

    pub fn denoiser_config(&self) -> DenoiserConfig {
        DenoiserConfig {
            image_channels: 3,
            image_size: self.image_size,
            base_width: self.model.base_width,
            depth: self.model.depth,
            time_embed_dim: self.model.time_embed_dim,
            channel_multipliers: self.model.channel_multipliers.clone(),
            attention: self.model.attention,
            seed: self.stage_seed("model"),
        }
    }

    pub fn training_seed(&self) -> u64 {
        self.training
            .seed
            .unwrap_or_else(|| self.stage_seed("training"))
    }

    pub fn extractor_seed(&self) -> u64 {
        self.extractor
            .seed
            .unwrap_or_else(|| self.stage_seed("extractor"))
    }

    /// Mask parameters; the per-mask seed is filled in by the caller.
    pub fn mask_params(&self) -> MaskGenParams {
        let mut p =
            MaskGenParams::for_image(self.image_size, self.image_size, self.stage_seed("mask"));
        if let Some(len) = self.mask.length {
            p.length = len;
        }
        p.max_angle = self.mask.max_angle;
        p.coverage_bounds = (self.mask.coverage_bounds[0], self.mask.coverage_bounds[1]);
        p.max_strokes = self.mask.max_strokes;
        p.square_side_bounds = (
            self.mask.square_side_bounds[0],
            self.mask.square_side_bounds[1],
        );
        p
    }

    /// `paths.out_dir`, else `$MCDM_OUT_DIR`, else `./out`.
    pub fn out_dir(&self) -> PathBuf {
        self.paths
            .out_dir
            .clone()
            .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("out"))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ov(items: &[&str]) -> Vec<String> {
        items.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn defaults_roundtrip() {
        let cfg = load(None, &[], None).unwrap();
        assert_eq!(cfg, RunConfig::default());
        let back: RunConfig = toml::from_str(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn precedence() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("c.toml");
        std::fs::write(
            &file,
            "image_size = 32\n[schedule]\nT = 20\n[training]\nbatch_size = 2\n",
        )
        .unwrap();
        let cfg = load(
            Some(&file),
            &ov(&["schedule.T=30", "training.lambda2=0.5"]),
            Some(9),
        )
        .unwrap();
        assert_eq!(cfg.image_size, 32);
        assert_eq!(cfg.schedule.steps, 30);
        assert_eq!(cfg.training.batch_size, 2);
        assert_eq!(cfg.training.lambda2, 0.5);
        assert_eq!(cfg.training.lambda1, 1.0);
        assert_eq!(cfg.global_seed, 9);
        let cfg = load(Some(&file), &ov(&["global_seed=4"]), None).unwrap();
        assert_eq!(cfg.global_seed, 4);
    }

    #[test]
    fn errors_name_fields() {
        let field = |r: Result<RunConfig, CliError>| match r {
            Err(CliError::Config { field, .. }) => field,
            other => panic!("{other:?}"),
        };
        assert_eq!(
            field(load(None, &ov(&["schedule.beta_max=1.5"]), None)),
            "schedule.beta"
        );
        assert!(field(load(None, &ov(&["schedule.nope=1"]), None)).starts_with("schedule"));
        assert_eq!(
            field(load(None, &ov(&["training.batch_size=\"x\""]), None)),
            "training.batch_size"
        );
        assert_eq!(
            field(load(None, &ov(&["image_size=0"]), None)),
            "image_size"
        );
        assert_eq!(field(load(None, &ov(&["noequals"]), None)), "noequals");
    }

    #[test]
    fn string_fallback() {
        let cfg = load(
            None,
            &ov(&["paths.out_dir=/tmp/x y", "schedule.kind=cosine"]),
            None,
        )
        .unwrap();
        assert_eq!(cfg.paths.out_dir.as_deref(), Some(Path::new("/tmp/x y")));
        assert_eq!(cfg.schedule.kind, ScheduleKind::Cosine);
    }
}
