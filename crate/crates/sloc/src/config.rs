//! Run configuration: model parameters, mesh, horizon, tolerances, and
//! output location. Values merge in the order defaults < config file <
//! `SLOC_OUTDIR` environment override < command-line flags.

use crate::bvp::BvpOptions;
use crate::cansys::SystemOps;
use crate::css::ContinuationOptions;
use crate::error::{Error, Result};
use crate::fem::Mesh1d;
use crate::model::ModelParams;
use crate::path::{HorizonPolicy, IscontOptions};
use std::path::{Path, PathBuf};

pub const DEFAULT_HALF_LEN: f64 = 2.0 * std::f64::consts::PI / 0.44;

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub r: f64,
    pub gamma: f64,
    /// Degradation rate; commands that need a single value require it via
    /// `--b` or the config file.
    pub b: Option<f64>,
    pub d: f64,
    pub l: f64,
    pub n: usize,
    pub t_horizon: f64,
    pub m0: usize,
    pub newton_tol: f64,
    pub bvp_tol: f64,
    pub center_tol: f64,
    /// Jacobian lumping threshold; zero disables the approximate Jacobian.
    pub lump_delta: f64,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            r: 0.03,
            gamma: 0.5,
            b: None,
            d: 0.5,
            l: DEFAULT_HALF_LEN,
            n: 101,
            t_horizon: 100.0,
            m0: 20,
            newton_tol: 1e-10,
            bvp_tol: 1e-8,
            center_tol: 1e-8,
            lump_delta: 0.0,
            out_dir: PathBuf::from("out"),
        }
    }
}

impl RunConfig {
    /// Reads a `key=value` config file (lines starting with `#` are
    /// comments) over the defaults.
    pub fn from_file(path: &Path) -> Result<Self> {
        let mut cfg = Self::default();
        let text = std::fs::read_to_string(path)?;
        cfg.apply_file_text(&text)?;
        Ok(cfg)
    }

    pub fn apply_file_text(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key=value, got `{line}`", lineno + 1))
            })?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let fnum = || -> Result<f64> {
            value
                .parse()
                .map_err(|_| Error::Config(format!("value for `{key}` is not a number: `{value}`")))
        };
        match key {
            "r" => self.r = fnum()?,
            "gamma" => self.gamma = fnum()?,
            "b" => self.b = Some(fnum()?),
            "D" => self.d = fnum()?,
            "L" => self.l = fnum()?,
            "n" => {
                self.n = value
                    .parse()
                    .map_err(|_| Error::Config(format!("value for `n` is not an integer: `{value}`")))?
            }
            "T" => self.t_horizon = fnum()?,
            "m0" => {
                self.m0 = value
                    .parse()
                    .map_err(|_| Error::Config(format!("value for `m0` is not an integer: `{value}`")))?
            }
            "newton_tol" => self.newton_tol = fnum()?,
            "bvp_tol" => self.bvp_tol = fnum()?,
            "center_tol" => self.center_tol = fnum()?,
            "delta" => self.lump_delta = fnum()?,
            "outdir" => self.out_dir = PathBuf::from(value),
            other => return Err(Error::Config(format!("unknown configuration key `{other}`"))),
        }
        Ok(())
    }

    /// Applies the `SLOC_OUTDIR` override if present.
    pub fn apply_env(&mut self) {
        if let Ok(dir) = std::env::var("SLOC_OUTDIR") {
            if !dir.is_empty() {
                self.out_dir = PathBuf::from(dir);
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("r", self.r),
            ("gamma", self.gamma),
            ("L", self.l),
            ("T", self.t_horizon),
            ("newton_tol", self.newton_tol),
            ("bvp_tol", self.bvp_tol),
            ("center_tol", self.center_tol),
        ];
        for (name, v) in positive {
            if !(v > 0.0) {
                return Err(Error::Config(format!("`{name}` must be positive, got {v}")));
            }
        }
        if self.d < 0.0 {
            return Err(Error::Config(format!("`D` must be non-negative, got {}", self.d)));
        }
        if self.lump_delta < 0.0 {
            return Err(Error::Config(format!("`delta` must be non-negative, got {}", self.lump_delta)));
        }
        if let Some(b) = self.b {
            if !(b > 0.0) {
                return Err(Error::Config(format!("`b` must be positive, got {b}")));
            }
        }
        if self.n < 3 {
            return Err(Error::Config(format!("`n` must be at least 3, got {}", self.n)));
        }
        if self.m0 < 2 {
            return Err(Error::Config(format!("`m0` must be at least 2, got {}", self.m0)));
        }
        Ok(())
    }

    pub fn require_b(&self) -> Result<f64> {
        self.b
            .ok_or_else(|| Error::Usage("this command needs `--b <value>` (or `b=` in the config file)".into()))
    }

    pub fn params(&self, b: f64) -> Result<ModelParams> {
        ModelParams::new(self.r, self.gamma, b, self.d)
    }

    pub fn system(&self, b: f64) -> Result<SystemOps> {
        let mesh = Mesh1d::uniform(self.l, self.n)?;
        Ok(SystemOps::new(self.params(b)?, mesh))
    }

    pub fn continuation_options(&self) -> ContinuationOptions {
        ContinuationOptions {
            newton_tol: self.newton_tol,
            center_tol: self.center_tol,
            ..ContinuationOptions::default()
        }
    }

    pub fn bvp_options(&self) -> BvpOptions {
        BvpOptions {
            newton_tol: self.bvp_tol,
            lump_delta: if self.lump_delta > 0.0 { Some(self.lump_delta) } else { None },
            ..BvpOptions::default()
        }
    }

    pub fn iscont_options(&self) -> IscontOptions {
        IscontOptions {
            bvp: self.bvp_options(),
            horizon: HorizonPolicy { t_init: self.t_horizon, m0: self.m0, ..HorizonPolicy::default() },
            ..IscontOptions::default()
        }
    }

    /// Config echo written into every output file header.
    pub fn echo_pairs(&self) -> Vec<(String, String)> {
        let mut pairs = vec![
            ("r".into(), format!("{}", self.r)),
            ("gamma".into(), format!("{}", self.gamma)),
            ("D".into(), format!("{}", self.d)),
            ("L".into(), format!("{}", self.l)),
            ("n".into(), format!("{}", self.n)),
            ("T".into(), format!("{}", self.t_horizon)),
            ("m0".into(), format!("{}", self.m0)),
            ("newton_tol".into(), format!("{}", self.newton_tol)),
            ("bvp_tol".into(), format!("{}", self.bvp_tol)),
            ("center_tol".into(), format!("{}", self.center_tol)),
            ("delta".into(), format!("{}", self.lump_delta)),
        ];
        if let Some(b) = self.b {
            pairs.push(("b".into(), format!("{b}")));
        }
        pairs
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.n, 101);
        assert!((cfg.l - 14.279966607226333).abs() < 1e-12);
    }

    #[test]
    fn file_text_overrides_and_bad_keys() {
        let mut cfg = RunConfig::default();
        cfg.apply_file_text("# comment\nb=0.65\nn=31\noutdir=results\n").unwrap();
        assert_eq!(cfg.b, Some(0.65));
        assert_eq!(cfg.n, 31);
        assert_eq!(cfg.out_dir, PathBuf::from("results"));
        assert!(cfg.apply_file_text("zzz=1\n").is_err());
        assert!(cfg.apply_file_text("n=abc\n").is_err());
    }

    #[test]
    fn validation_rejects_nonpositive_tolerances() {
        let mut cfg = RunConfig::default();
        cfg.bvp_tol = 0.0;
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.n = 2;
        assert!(cfg.validate().is_err());
    }
}
