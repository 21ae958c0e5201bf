//! Config file loading and flag overrides.

use std::path::Path;

use anyhow::{bail, Context, Result};

use aend::config;
use aend::datagen::CorpusConfig;
use aend::trainer::TrainConfig;

use crate::Common;

/// Training and corpus configs from defaults, then the config file, then
/// the seed flag.
pub fn load(common: &Common) -> Result<(TrainConfig, CorpusConfig)> {
    let mut train = TrainConfig::default();
    let mut corpus = CorpusConfig::default();
    if let Some(path) = &common.config {
        let entries = config::read(path)?;
        config::apply(&entries, path, &mut [&mut train, &mut corpus])?;
    }
    if let Some(seed) = common.seed {
        train.seed = seed;
        corpus.seed = seed;
    }
    Ok((train, corpus))
}

/// Applies the training flags common to `train` and `ablate`.
pub fn override_train(cfg: &mut TrainConfig, variant: Option<u32>, epochs: Option<usize>) -> Result<()> {
    if let Some(v) = variant {
        aend::model::variant_spec(v)?;
        cfg.model.variant = v;
    }
    if let Some(e) = epochs {
        cfg.epochs = e;
    }
    cfg.validate()?;
    Ok(())
}

pub fn require_dir(path: &Path, what: &str) -> Result<()> {
    if !path.is_dir() {
        bail!("{what} `{}` is not a directory", path.display());
    }
    Ok(())
}

pub fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_flag_overrides_both_configs() {
        let common = Common { config: None, seed: Some(42) };
        let (train, corpus) = load(&common).unwrap();
        assert_eq!((train.seed, corpus.seed), (42, 42));
    }

    #[test]
    fn config_file_then_seed() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.conf");
        std::fs::write(&path, "epochs = 3\nseed = 9\np_on = 0.2\n").unwrap();
        let (train, corpus) = load(&Common { config: Some(path.clone()), seed: None }).unwrap();
        assert_eq!((train.epochs, train.seed, corpus.p_on), (3, 9, 0.2));
        let (train, _) = load(&Common { config: Some(path), seed: Some(1) }).unwrap();
        assert_eq!(train.seed, 1);
    }

    #[test]
    fn override_rejects_unknown_variant() {
        let mut cfg = TrainConfig::default();
        assert!(override_train(&mut cfg, Some(8), None).is_err());
        override_train(&mut cfg, Some(4), Some(2)).unwrap();
        assert_eq!((cfg.model.variant, cfg.epochs), (4, 2));
    }

    #[test]
    fn require_dir_rejects_files() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("f");
        std::fs::write(&file, "").unwrap();
        assert!(require_dir(dir.path(), "corpus").is_ok());
        assert!(require_dir(&file, "corpus").is_err());
    }
}
