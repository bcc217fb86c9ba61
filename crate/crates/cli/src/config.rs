use std::path::Path;

use serde::Deserialize;

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum OutputFormat {
    #[default]
    Json,
    Csv,
}

/// Settings shared by every subcommand.
#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub tol: f64,
    /// Sample period for trace files [h].
    pub dt: f64,
    pub format: OutputFormat,
    pub seed: u64,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            tol: dlr_core::TOL,
            dt: 1.0 / 60.0,
            format: OutputFormat::Json,
            seed: 0,
        }
    }
}

/// Contents of a `--config` TOML file; every key is optional.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub tol: Option<f64>,
    pub dt: Option<f64>,
    pub format: Option<OutputFormat>,
    pub seed: Option<u64>,
}

/// Values given on the command line.
#[derive(Debug, Default, Clone)]
pub struct Overrides {
    pub tol: Option<f64>,
    pub dt: Option<f64>,
    pub format: Option<OutputFormat>,
    pub seed: Option<u64>,
}

impl Config {
    /// Layers: defaults, then the config file, then `DLR_TOL`, then flags.
    pub fn resolve(file: Option<&Path>, env_tol: Option<&str>, flags: &Overrides) -> Result<Config, CliError> {
        let mut c = Config::default();
        if let Some(path) = file {
            let text = crate::read_file(path)?;
            let f: ConfigFile = toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            c.tol = f.tol.unwrap_or(c.tol);
            c.dt = f.dt.unwrap_or(c.dt);
            c.format = f.format.unwrap_or(c.format);
            c.seed = f.seed.unwrap_or(c.seed);
        }
        if let (Some(v), None) = (env_tol, flags.tol) {
            c.tol = v
                .trim()
                .parse()
                .map_err(|_| CliError::Config(format!("DLR_TOL='{v}' is not a number")))?;
        }
        c.tol = flags.tol.unwrap_or(c.tol);
        c.dt = flags.dt.unwrap_or(c.dt);
        c.format = flags.format.unwrap_or(c.format);
        c.seed = flags.seed.unwrap_or(c.seed);
        if !(c.tol.is_finite() && c.tol > 0.0) {
            return Err(CliError::Config(format!("tolerance must be positive, got {}", c.tol)));
        }
        if !(c.dt.is_finite() && c.dt > 0.0) {
            return Err(CliError::Config(format!("dt must be positive, got {}", c.dt)));
        }
        Ok(c)
    }
}
