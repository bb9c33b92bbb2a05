//! Pipeline configuration: `key = value` text files over the defaults
//! pinned in each module. Unknown keys are rejected and every value is
//! range-checked at load time.

use thiserror::Error;

use crate::ba::BAOptions;
use crate::resection::ResectionParams;
use crate::sfm::SfmConfig;
use crate::triangulate::TriangulationGates;
use crate::two_view::RansacParams;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {0}: expected `key = value`, got `{1}`")]
    Malformed(usize, String),
    #[error("line {0}: unknown key `{1}`")]
    UnknownKey(usize, String),
    #[error("line {0}: invalid value for `{1}`: {2}")]
    BadValue(usize, String, String),
    #[error("line {0}: `{1}` = {2} out of range ({3})")]
    OutOfRange(usize, String, f64, &'static str),
}

/// All tunables, flat. `to_sfm_config` assembles the per-module structs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Config {
    pub grid_cell_px: f64,
    pub ransac_threshold_rad: f64,
    pub ransac_max_iters: usize,
    pub ransac_confidence: f64,
    pub ransac_min_inliers: usize,
    pub resection_threshold_rad: f64,
    pub resection_min_inliers: usize,
    pub min_tri_angle_deg: f64,
    pub max_reproj_rad: f64,
    pub init_min_median_angle_deg: f64,
    pub local_ba_min_shared: usize,
    pub global_ba_cadence: usize,
    pub ba_max_iters: usize,
    pub ba_f_tol: f64,
    pub ba_g_tol: f64,
    pub robust_scale: f64,
    pub seed: u64,
    pub threads: usize,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            grid_cell_px: 4.0,
            ransac_threshold_rad: 0.01,
            ransac_max_iters: 10_000,
            ransac_confidence: 0.9999,
            ransac_min_inliers: 15,
            resection_threshold_rad: 0.01,
            resection_min_inliers: 12,
            min_tri_angle_deg: 1.5,
            max_reproj_rad: 0.02,
            init_min_median_angle_deg: 2.0,
            local_ba_min_shared: 20,
            global_ba_cadence: 5,
            ba_max_iters: 100,
            ba_f_tol: 1e-10,
            ba_g_tol: 1e-10,
            robust_scale: 0.02,
            seed: 0,
            threads: 0,
        }
    }
}

impl Config {
    /// Parses `key = value` lines; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Config, ConfigError> {
        let mut cfg = Config::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let lineno = lineno + 1;
            let Some((key, value)) = line.split_once('=') else {
                return Err(ConfigError::Malformed(lineno, raw.to_string()));
            };
            let key = key.trim();
            let value = value.trim();
            cfg.set(lineno, key, value)?;
        }
        Ok(cfg)
    }

    fn set(&mut self, lineno: usize, key: &str, value: &str) -> Result<(), ConfigError> {
        let f = |v: &str| -> Result<f64, ConfigError> {
            v.parse::<f64>()
                .map_err(|e| ConfigError::BadValue(lineno, key.to_string(), e.to_string()))
        };
        let u = |v: &str| -> Result<usize, ConfigError> {
            v.parse::<usize>()
                .map_err(|e| ConfigError::BadValue(lineno, key.to_string(), e.to_string()))
        };
        let check = |val: f64, ok: bool, what: &'static str| -> Result<f64, ConfigError> {
            if ok {
                Ok(val)
            } else {
                Err(ConfigError::OutOfRange(lineno, key.to_string(), val, what))
            }
        };
        match key {
            "grid_cell_px" => {
                let v = f(value)?;
                self.grid_cell_px = check(v, v > 0.0, "must be > 0")?;
            }
            "ransac_threshold_rad" => {
                let v = f(value)?;
                self.ransac_threshold_rad =
                    check(v, v > 0.0 && v < std::f64::consts::PI, "must be in (0, pi)")?;
            }
            "ransac_max_iters" => self.ransac_max_iters = u(value)?.max(1),
            "ransac_confidence" => {
                let v = f(value)?;
                self.ransac_confidence = check(v, v > 0.0 && v < 1.0, "must be in (0, 1)")?;
            }
            "ransac_min_inliers" => self.ransac_min_inliers = u(value)?,
            "resection_threshold_rad" => {
                let v = f(value)?;
                self.resection_threshold_rad =
                    check(v, v > 0.0 && v < std::f64::consts::PI, "must be in (0, pi)")?;
            }
            "resection_min_inliers" => self.resection_min_inliers = u(value)?,
            "min_tri_angle_deg" => {
                let v = f(value)?;
                self.min_tri_angle_deg = check(v, v >= 0.0 && v < 180.0, "must be in [0, 180)")?;
            }
            "max_reproj_rad" => {
                let v = f(value)?;
                self.max_reproj_rad = check(v, v > 0.0, "must be > 0")?;
            }
            "init_min_median_angle_deg" => {
                let v = f(value)?;
                self.init_min_median_angle_deg =
                    check(v, v >= 0.0 && v < 180.0, "must be in [0, 180)")?;
            }
            "local_ba_min_shared" => self.local_ba_min_shared = u(value)?,
            "global_ba_cadence" => self.global_ba_cadence = u(value)?.max(1),
            "ba_max_iters" => self.ba_max_iters = u(value)?,
            "ba_f_tol" => {
                let v = f(value)?;
                self.ba_f_tol = check(v, v > 0.0, "must be > 0")?;
            }
            "ba_g_tol" => {
                let v = f(value)?;
                self.ba_g_tol = check(v, v > 0.0, "must be > 0")?;
            }
            "robust_scale" => {
                let v = f(value)?;
                self.robust_scale = check(v, v > 0.0, "must be > 0")?;
            }
            "seed" => {
                self.seed = value
                    .parse::<u64>()
                    .map_err(|e| ConfigError::BadValue(lineno, key.to_string(), e.to_string()))?;
            }
            "threads" => self.threads = u(value)?,
            other => return Err(ConfigError::UnknownKey(lineno, other.to_string())),
        }
        Ok(())
    }

    pub fn to_sfm_config(&self) -> SfmConfig {
        SfmConfig {
            ransac: RansacParams {
                threshold_rad: self.ransac_threshold_rad,
                max_iters: self.ransac_max_iters,
                confidence: self.ransac_confidence,
                min_inliers: self.ransac_min_inliers,
            },
            resection: ResectionParams {
                threshold_rad: self.resection_threshold_rad,
                max_iters: self.ransac_max_iters,
                confidence: self.ransac_confidence,
                min_inliers: self.resection_min_inliers,
            },
            gates: TriangulationGates {
                min_angle_rad: self.min_tri_angle_deg.to_radians(),
                max_reproj_rad: self.max_reproj_rad,
            },
            init_min_median_angle_rad: self.init_min_median_angle_deg.to_radians(),
            local_ba_min_shared: self.local_ba_min_shared,
            global_ba_cadence: self.global_ba_cadence,
            ba: BAOptions {
                max_iters: self.ba_max_iters,
                f_tol: self.ba_f_tol,
                g_tol: self.ba_g_tol,
                robust_scale: self.robust_scale,
            },
            seed: self.seed,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = Config::parse("").unwrap();
        assert_eq!(cfg, Config::default());
    }

    #[test]
    fn parses_values_and_comments() {
        let cfg = Config::parse(
            "# pipeline\ngrid_cell_px = 2.5\nseed = 42   # fixture seed\n\nransac_min_inliers = 20\n",
        )
        .unwrap();
        assert_eq!(cfg.grid_cell_px, 2.5);
        assert_eq!(cfg.seed, 42);
        assert_eq!(cfg.ransac_min_inliers, 20);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_ranges() {
        assert!(matches!(
            Config::parse("not_a_key = 3"),
            Err(ConfigError::UnknownKey(1, _))
        ));
        assert!(matches!(
            Config::parse("grid_cell_px = -1"),
            Err(ConfigError::OutOfRange(1, _, _, _))
        ));
        assert!(matches!(
            Config::parse("ransac_confidence = 1.5"),
            Err(ConfigError::OutOfRange(1, _, _, _))
        ));
        assert!(matches!(
            Config::parse("grid_cell_px"),
            Err(ConfigError::Malformed(1, _))
        ));
        assert!(matches!(
            Config::parse("seed = abc"),
            Err(ConfigError::BadValue(1, _, _))
        ));
    }
}
