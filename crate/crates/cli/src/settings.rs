use serde_json::Value;

use dptempcoh::{Config, Error, Result};

use crate::{Cli, Preset};

/// Preset or file, then `--set` overrides, then the seed.
pub fn resolve(cli: &Cli) -> Result<Config> {
    let mut cfg = match &cli.config {
        Some(p) => Config::load(&cli.workdir.join(p))?,
        None => match cli.preset {
            Preset::Default => Config::default(),
            Preset::Toy => Config::toy(),
        },
    };
    if !cli.overrides.is_empty() {
        cfg = apply_overrides(&cfg, &cli.overrides)?;
    }
    cfg.resolve_seed(cli.seed)?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn apply_overrides(cfg: &Config, overrides: &[String]) -> Result<Config> {
    let mut doc = serde_json::to_value(cfg)?;
    for o in overrides {
        let (key, raw) = o
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {o:?} is not KEY=VALUE")))?;
        let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        let mut slot = &mut doc;
        for part in key.split('.') {
            slot = slot
                .as_object_mut()
                .and_then(|m| m.get_mut(part))
                .ok_or_else(|| Error::Config(format!("unknown config key {key:?}")))?;
        }
        *slot = value;
    }
    serde_json::from_value(doc).map_err(|e| Error::Config(format!("override: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_nested_keys() {
        let c = apply_overrides(
            &Config::toy(),
            &["train.iterations=7".into(), "predictor.mode=spatial_only".into(), "degradation.ranges.rho_range.hi=2".into()],
        )
        .unwrap();
        assert_eq!(c.train.iterations, 7);
        assert_eq!(c.predictor.mode, dptempcoh::PredictorMode::SpatialOnly);
        assert_eq!(c.degradation.ranges.rho_range.hi, 2.0);
        for bad in ["train.nope=1", "train.iterations", "train.iterations=-1"] {
            assert!(matches!(apply_overrides(&Config::toy(), &[bad.into()]), Err(Error::Config(_))), "{bad}");
        }
    }
}
