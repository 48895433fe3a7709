use std::path::{Path, PathBuf};

use anyhow::Context;
use salvit::geom::{make_layout, GridCache, LayoutKind, TangentLayout};
use salvit::model::ModelConfig;
use salvit::train::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::UsageError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LayoutSpec {
    pub kind: LayoutKind,
    pub planes: usize,
    pub fov_deg: f64,
    /// Layout JSON; overrides the three fields above.
    pub file: Option<PathBuf>,
}

impl Default for LayoutSpec {
    fn default() -> Self {
        Self {
            kind: LayoutKind::Ring,
            planes: 10,
            fov_deg: 120.0,
            file: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Directory for cached resampling grids.
    pub cache: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// When set, replaces both `model.seed` and `train.seed`.
    pub seed: Option<u64>,
    pub layout: LayoutSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Trailing manifest clips held out for early stopping.
    pub val_clips: usize,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: None,
            layout: LayoutSpec::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            val_clips: 1,
            paths: Paths::default(),
        }
    }
}

impl RunConfig {
    /// Defaults, then the optional JSON file, then each `key=value`.
    pub fn resolve(file: Option<&Path>, overrides: &[String]) -> anyhow::Result<Self> {
        let mut value = serde_json::to_value(RunConfig::default())?;
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)
                .map_err(|e| UsageError(format!("config file {}: {e}", path.display())))?;
            let user: Value = serde_json::from_str(&text)
                .map_err(|e| UsageError(format!("config file {}: {e}", path.display())))?;
            merge(&mut value, user);
        }
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let mut cfg: RunConfig =
            serde_json::from_value(value).map_err(|e| UsageError(format!("invalid configuration: {e}")))?;
        if let Some(seed) = cfg.seed {
            cfg.model.seed = seed;
            cfg.train.seed = seed;
        }
        cfg.model
            .validate()
            .map_err(|e| UsageError(format!("invalid model configuration: {e}")))?;
        Ok(cfg)
    }

    pub fn tangent_layout(&self) -> anyhow::Result<TangentLayout> {
        let patch = self.model.patch_px;
        match &self.layout.file {
            Some(path) => {
                if !path.exists() {
                    return Err(UsageError(format!("layout file not found: {}", path.display())).into());
                }
                let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                let layout = TangentLayout::from_json(&text)
                    .map_err(|e| UsageError(format!("layout file {}: {e}", path.display())))?;
                if layout.patch_px() != patch {
                    return Err(UsageError(format!(
                        "layout file {} has patch {} but the model uses {patch}",
                        path.display(),
                        layout.patch_px()
                    ))
                    .into());
                }
                Ok(layout)
            }
            None => make_layout(self.layout.kind, self.layout.planes, self.layout.fov_deg, patch)
                .map_err(|e| UsageError(format!("layout: {e}")).into()),
        }
    }

    pub fn grid_cache(&self) -> anyhow::Result<Option<GridCache>> {
        self.paths
            .cache
            .as_ref()
            .map(|d| GridCache::new(d.clone()).with_context(|| format!("grid cache {}", d.display())))
            .transpose()
    }
}

fn merge(base: &mut Value, user: Value) {
    match (base, user) {
        (Value::Object(b), Value::Object(u)) => {
            for (k, v) in u {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// `a.b.c=value`; the value is parsed as JSON, else taken as a string.
/// Only keys present in the defaults or the file may be set.
pub fn apply_override(root: &mut Value, spec: &str) -> anyhow::Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| UsageError(format!("--set expects key=value, got {spec:?}")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut slot = root;
    for part in key.split('.') {
        slot = match slot {
            Value::Object(map) if map.contains_key(part) => map.get_mut(part).expect("checked"),
            _ => return Err(UsageError(format!("unknown configuration key {key:?}")).into()),
        };
    }
    *slot = value;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips() {
        let cfg = RunConfig::resolve(None, &["train.vac.enabled=true".into(), "seed=9".into()]).unwrap();
        let text = serde_json::to_string(&cfg).unwrap();
        let back: RunConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, cfg);
        assert!(cfg.train.vac.enabled);
        assert_eq!((cfg.model.seed, cfg.train.seed), (9, 9));
    }

    #[test]
    fn overrides_reach_nested_fields() {
        let cfg = RunConfig::resolve(
            None,
            &[
                "train.optim.lr=0.001".into(),
                "layout.kind=icosahedral".into(),
                "layout.planes=20".into(),
                "layout.fov_deg=80".into(),
                "model.scheme=joint".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.train.optim.lr, 1e-3);
        assert_eq!(cfg.tangent_layout().unwrap().planes(), 20);
    }

    #[test]
    fn unknown_keys_are_usage_errors() {
        for bad in ["train.nope=1", "lr", "model.dim.x=2"] {
            let err = RunConfig::resolve(None, &[bad.into()]).unwrap_err();
            assert!(err.downcast_ref::<UsageError>().is_some(), "{bad}");
        }
    }

    #[test]
    fn missing_layout_names_path() {
        let cfg = RunConfig::resolve(None, &["layout.file=/no/such/layout.json".into()]).unwrap();
        let err = cfg.tangent_layout().unwrap_err();
        assert!(err.to_string().contains("/no/such/layout.json"));
        assert!(err.downcast_ref::<UsageError>().is_some());
    }

    #[test]
    fn file_then_overrides() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.json");
        std::fs::write(&path, r#"{"model": {"dim": 32}, "val_clips": 0}"#).unwrap();
        let cfg = RunConfig::resolve(Some(&path), &["model.dim=16".into()]).unwrap();
        assert_eq!(cfg.model.dim, 16);
        assert_eq!(cfg.val_clips, 0);
    }
}
