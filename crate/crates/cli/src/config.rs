//! Line-based `key = value` run configuration.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use aird::counterfeiter::MgConfig;
use aird::detector::CvConfig;
use aird::evaluation::MpConfig;
use aird::synthbench::BenchConfig;
use aird::training::{MgLoss, TrainConfig, TrainMode};
use aird::vecindex::{IndexParams, ProbeConfig};

use crate::UsageError;

/// Every recognised key with its default value.
fn defaults() -> Vec<(&'static str, String)> {
    let b = BenchConfig::default();
    let i = IndexParams::default();
    let p = ProbeConfig::default();
    let t = TrainConfig::default();
    let m = MpConfig::default();
    let list = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
    vec![
        ("seed", "0".into()),
        ("synth.dim", b.dim.to_string()),
        ("synth.families", b.families.to_string()),
        ("synth.entities_per_family", b.entities_per_family.to_string()),
        ("synth.min_images", b.min_images.to_string()),
        ("synth.max_images", b.max_images.to_string()),
        ("synth.size_exponent", b.size_exponent.to_string()),
        ("synth.theta_fam_deg", b.theta_fam_deg.to_string()),
        ("synth.sigma_in", b.sigma_in.to_string()),
        ("split.train_fraction", "0.8".into()),
        ("index.nlist", "auto".into()),
        ("index.m_sub", i.m_sub.to_string()),
        ("index.bits", i.bits.to_string()),
        ("index.kmeans_iters", i.kmeans_iters.to_string()),
        ("index.pq_train_per_code", i.pq_train_per_code.to_string()),
        ("search.nprobe", p.nprobe.to_string()),
        ("search.shortlist_factor", p.shortlist_factor.to_string()),
        ("train.k", t.k.to_string()),
        ("train.tau", t.tau.to_string()),
        ("train.epochs", t.epochs.to_string()),
        ("train.batch_size", t.batch_size.to_string()),
        ("train.cv_lr", t.cv_lr.to_string()),
        ("train.mg_lr", t.mg_lr.to_string()),
        ("train.encoder_lr", t.encoder_lr.to_string()),
        ("train.mode", "adversarial".into()),
        ("train.mg_loss", "nonsaturating".into()),
        ("train.meta_dim", t.meta_dim.to_string()),
        ("train.cv_agg_hidden", t.cv.agg_hidden.to_string()),
        ("train.cv_agg_out", t.cv.agg_out.to_string()),
        ("train.cv_fuse", t.cv.fuse.to_string()),
        ("train.mg_hidden", list(&t.mg.hidden)),
        ("train.cv_steps_per_mg", t.cv_steps_per_mg.to_string()),
        ("train.val_fraction", t.val_fraction.to_string()),
        ("train.patience", t.patience.to_string()),
        ("mp.hidden", m.hidden.to_string()),
        ("mp.epochs", m.epochs.to_string()),
        ("mp.batch_size", m.batch_size.to_string()),
        ("mp.lr", m.lr.to_string()),
    ]
}

/// Merged configuration: defaults, then a config file, then `--set` overrides.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            values: defaults().into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
        }
    }
}

impl RunConfig {
    pub fn keys() -> Vec<&'static str> {
        defaults().into_iter().map(|(k, _)| k).collect()
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), UsageError> {
        let key = key.trim();
        match self.values.get_mut(key) {
            Some(v) => {
                *v = value.trim().to_string();
                Ok(())
            }
            None => Err(UsageError(format!("unknown config key `{key}`"))),
        }
    }

    /// Applies a `key=value` override.
    pub fn apply_assignment(&mut self, assignment: &str) -> Result<(), UsageError> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| UsageError(format!("expected key=value, got `{assignment}`")))?;
        self.set(k, v)
    }

    /// Applies every `key = value` line of `text`; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<(), UsageError> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| UsageError(format!("config line {}: expected `key = value`", n + 1)))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<(), UsageError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| UsageError(format!("cannot read config {}: {e}", path.display())))?;
        self.apply_text(&text)
    }

    pub fn raw(&self, key: &str) -> &str {
        &self.values[key]
    }

    fn get<T: FromStr>(&self, key: &str) -> Result<T, UsageError>
    where
        T::Err: Display,
    {
        let raw = self.raw(key);
        raw.parse()
            .map_err(|e| UsageError(format!("invalid value `{raw}` for `{key}`: {e}")))
    }

    pub fn seed(&self) -> Result<u64, UsageError> {
        self.get("seed")
    }

    pub fn bench(&self) -> Result<BenchConfig, UsageError> {
        let cfg = BenchConfig {
            dim: self.get("synth.dim")?,
            families: self.get("synth.families")?,
            entities_per_family: self.get("synth.entities_per_family")?,
            min_images: self.get("synth.min_images")?,
            max_images: self.get("synth.max_images")?,
            size_exponent: self.get("synth.size_exponent")?,
            theta_fam_deg: self.get("synth.theta_fam_deg")?,
            sigma_in: self.get("synth.sigma_in")?,
            seed: self.seed()?,
        };
        cfg.validate().map_err(usage)?;
        Ok(cfg)
    }

    pub fn train_fraction(&self) -> Result<f64, UsageError> {
        let f: f64 = self.get("split.train_fraction")?;
        if !(f > 0.0 && f < 1.0) {
            return Err(UsageError("split.train_fraction must lie in (0, 1)".into()));
        }
        Ok(f)
    }

    pub fn index_params(&self) -> Result<IndexParams, UsageError> {
        let nlist = match self.raw("index.nlist") {
            "auto" => None,
            _ => Some(self.get("index.nlist")?),
        };
        let p = IndexParams {
            nlist,
            m_sub: self.get("index.m_sub")?,
            bits: self.get("index.bits")?,
            kmeans_iters: self.get("index.kmeans_iters")?,
            pq_train_per_code: self.get("index.pq_train_per_code")?,
            seed: self.seed()?,
        };
        if p.nlist == Some(0) || p.m_sub == 0 || !(1..=8).contains(&p.bits) {
            return Err(UsageError("index needs nlist >= 1, m_sub >= 1 and bits in 1..=8".into()));
        }
        Ok(p)
    }

    pub fn probe(&self) -> Result<ProbeConfig, UsageError> {
        let p = ProbeConfig {
            nprobe: self.get("search.nprobe")?,
            shortlist_factor: self.get("search.shortlist_factor")?,
        };
        if p.nprobe == 0 || p.shortlist_factor == 0 {
            return Err(UsageError("search.nprobe and search.shortlist_factor must be positive".into()));
        }
        Ok(p)
    }

    pub fn train_mode(&self) -> Result<TrainMode, UsageError> {
        match self.raw("train.mode") {
            "adversarial" | "aird" => Ok(TrainMode::Adversarial),
            "nad" => Ok(TrainMode::Nad),
            other => Err(UsageError(format!("invalid value `{other}` for `train.mode`: expected adversarial or nad"))),
        }
    }

    pub fn train_config(&self) -> Result<TrainConfig, UsageError> {
        let mg_loss = match self.raw("train.mg_loss") {
            "saturating" => MgLoss::Saturating,
            "nonsaturating" => MgLoss::NonSaturating,
            other => {
                return Err(UsageError(format!(
                    "invalid value `{other}` for `train.mg_loss`: expected saturating or nonsaturating"
                )))
            }
        };
        let hidden = self
            .raw("train.mg_hidden")
            .split(',')
            .map(|s| s.trim().parse::<usize>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| UsageError(format!("invalid value for `train.mg_hidden`: {e}")))?;
        let cfg = TrainConfig {
            k: self.get("train.k")?,
            tau: self.get("train.tau")?,
            epochs: self.get("train.epochs")?,
            batch_size: self.get("train.batch_size")?,
            cv_lr: self.get("train.cv_lr")?,
            mg_lr: self.get("train.mg_lr")?,
            encoder_lr: self.get("train.encoder_lr")?,
            seed: self.seed()?,
            mode: self.train_mode()?,
            mg_loss,
            meta_dim: self.get("train.meta_dim")?,
            cv: CvConfig {
                agg_hidden: self.get("train.cv_agg_hidden")?,
                agg_out: self.get("train.cv_agg_out")?,
                fuse: self.get("train.cv_fuse")?,
            },
            mg: MgConfig { hidden },
            cv_steps_per_mg: self.get("train.cv_steps_per_mg")?,
            val_fraction: self.get("train.val_fraction")?,
            patience: self.get("train.patience")?,
            probe: self.probe()?,
        };
        cfg.validate().map_err(usage)?;
        if cfg.cv.agg_hidden == 0 || cfg.cv.agg_out == 0 || cfg.cv.fuse == 0 || cfg.mg.hidden.contains(&0) {
            return Err(UsageError("layer widths must be positive".into()));
        }
        Ok(cfg)
    }

    pub fn mp_config(&self) -> Result<MpConfig, UsageError> {
        let cfg = MpConfig {
            hidden: self.get("mp.hidden")?,
            epochs: self.get("mp.epochs")?,
            batch_size: self.get("mp.batch_size")?,
            lr: self.get("mp.lr")?,
            seed: self.seed()?,
        };
        if cfg.hidden == 0 || cfg.batch_size == 0 || !(cfg.lr > 0.0) {
            return Err(UsageError("mp.hidden, mp.batch_size and mp.lr must be positive".into()));
        }
        Ok(cfg)
    }

    /// Parses every section so bad values surface before any work starts.
    pub fn validate(&self) -> Result<(), UsageError> {
        self.bench()?;
        self.train_fraction()?;
        self.index_params()?;
        self.train_config()?;
        self.mp_config()?;
        Ok(())
    }

    /// The merged configuration as a config file.
    pub fn render(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

fn usage(e: aird::AirdError) -> UsageError {
    UsageError(e.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_then_override() {
        let mut c = RunConfig::default();
        c.apply_text("# experiment\ntrain.epochs = 3   # short\n\nsynth.families=2\n").unwrap();
        c.apply_assignment("train.epochs=4").unwrap();
        assert_eq!(c.train_config().unwrap().epochs, 4);
        assert_eq!(c.bench().unwrap().families, 2);
    }

    #[test]
    fn unknown_key_is_named() {
        let mut c = RunConfig::default();
        let e = c.apply_text("train.epoch = 3").unwrap_err();
        assert!(e.0.contains("train.epoch"), "{}", e.0);
    }

    #[test]
    fn bad_values_rejected() {
        let mut c = RunConfig::default();
        c.set("train.tau", "2").unwrap();
        assert!(c.validate().is_err());
        let mut c = RunConfig::default();
        c.set("train.mode", "gan").unwrap();
        assert!(c.train_config().is_err());
        let mut c = RunConfig::default();
        c.set("index.nlist", "many").unwrap();
        assert!(c.index_params().unwrap_err().0.contains("index.nlist"));
    }

    #[test]
    fn render_round_trips() {
        let mut c = RunConfig::default();
        c.set("mp.epochs", "7").unwrap();
        let mut d = RunConfig::default();
        d.apply_text(&c.render()).unwrap();
        assert_eq!(c, d);
        assert!(RunConfig::default().validate().is_ok());
    }
}
