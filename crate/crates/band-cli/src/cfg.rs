//! Flag/file/default resolution. Precedence: command-line flag, then
//! `--config` file value, then built-in default.

use band_core::config::Profile;
use band_core::{Error, Result};
use serde::Deserialize;
use std::path::PathBuf;

use crate::Cli;

/// Optional values accepted from a `--config` JSON file. Field names are
/// the flag names with `-` replaced by `_`.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub profile: Option<String>,
    pub workers: Option<usize>,
    pub data: Option<PathBuf>,
    pub model: Option<String>,
    pub k: Option<i64>,
    pub heads: Option<usize>,
    pub layers: Option<usize>,
    pub head: Option<String>,
    pub regime: Option<String>,
    pub epochs: Option<usize>,
    pub batch: Option<usize>,
    pub accum: Option<usize>,
    pub lr: Option<f64>,
    pub lr_min: Option<f64>,
    pub fractions: Option<[f64; 3]>,
}

/// Settings shared by every subcommand, fully resolved.
pub struct Common {
    pub seed: u64,
    pub profile: Profile,
    /// 0 = leave the pool at its default size.
    pub workers: usize,
    pub file: FileConfig,
}

impl Common {
    pub fn resolve(cli: &Cli) -> Result<Common> {
        let file = match &cli.config {
            None => FileConfig::default(),
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| Error::Config(format!("--config {}: {e}", path.display())))?;
                serde_json::from_str(&text)
                    .map_err(|e| Error::Config(format!("--config {}: {e}", path.display())))?
            }
        };
        let profile_name = cli
            .profile
            .clone()
            .or_else(|| file.profile.clone())
            .unwrap_or_else(|| "desk".to_string());
        Ok(Common {
            seed: cli.seed.or(file.seed).unwrap_or(1),
            profile: Profile::parse(&profile_name)?,
            workers: cli.workers.or(file.workers).unwrap_or(0),
            file,
        })
    }
}

/// `--fractions a,b,c` (or the file's 3-element array).
pub fn parse_fractions(flag: &Option<String>, file: &FileConfig) -> Result<(f64, f64, f64)> {
    if let Some(s) = flag {
        let parts: Vec<f64> = s
            .split(',')
            .map(|p| p.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Config(format!("--fractions {s:?}: {e}")))?;
        if parts.len() != 3 {
            return Err(Error::Config(format!(
                "--fractions needs exactly three comma-separated values, got {}",
                parts.len()
            )));
        }
        return Ok((parts[0], parts[1], parts[2]));
    }
    if let Some([a, b, c]) = file.fractions {
        return Ok((a, b, c));
    }
    Ok((0.7, 0.1, 0.2))
}

/// Clip length: flags accept any integer so that out-of-range values fail
/// our validation (usage error) rather than the flag parser.
pub fn resolve_k(flag: Option<i64>, file: &FileConfig, default: usize) -> Result<usize> {
    let k = flag.or(file.k);
    match k {
        None => Ok(default),
        Some(v) if v >= 1 => Ok(v as usize),
        Some(v) => Err(Error::Config(format!("k must be >= 1, got {v}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fractions_parse_and_default() {
        let file = FileConfig::default();
        assert_eq!(parse_fractions(&None, &file).unwrap(), (0.7, 0.1, 0.2));
        let flag = Some("0.6, 0.2,0.2".to_string());
        assert_eq!(parse_fractions(&flag, &file).unwrap(), (0.6, 0.2, 0.2));
        assert!(parse_fractions(&Some("0.5,0.5".into()), &file).is_err());
        let filed = FileConfig { fractions: Some([0.8, 0.1, 0.1]), ..Default::default() };
        assert_eq!(parse_fractions(&None, &filed).unwrap(), (0.8, 0.1, 0.1));
    }

    #[test]
    fn k_resolution_rejects_nonpositive() {
        let file = FileConfig::default();
        assert_eq!(resolve_k(None, &file, 16).unwrap(), 16);
        assert_eq!(resolve_k(Some(28), &file, 16).unwrap(), 28);
        assert!(resolve_k(Some(0), &file, 16).is_err());
        assert!(resolve_k(Some(-3), &file, 16).is_err());
    }

    #[test]
    fn unknown_config_keys_rejected() {
        let bad: std::result::Result<FileConfig, _> = serde_json::from_str(r#"{"sede": 3}"#);
        assert!(bad.is_err());
        let ok: FileConfig = serde_json::from_str(r#"{"seed": 3, "k": 28}"#).unwrap();
        assert_eq!(ok.seed, Some(3));
        assert_eq!(ok.k, Some(28));
    }
}
