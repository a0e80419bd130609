use std::path::{Path, PathBuf};

use geomamba::eval::Protocol;
use geomamba::synthdata::SynthConfig;
use geomamba::trainer::{RunConfig, DEFAULT_SWEEP};
use serde::{Deserialize, Serialize};

use crate::{CliError, Overrides};

/// Config file layout; every command-line flag has a key here.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CliConfig {
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    /// Restrict reported metrics to one protocol.
    pub protocol: Option<Protocol>,
    pub seeds: Vec<u64>,
    pub lambdas: Vec<f64>,
    pub run: RunConfig,
    pub synth: SynthConfig,
}

impl Default for CliConfig {
    fn default() -> Self {
        Self {
            data: None,
            out: None,
            protocol: None,
            seeds: vec![0, 1, 2],
            lambdas: DEFAULT_SWEEP.to_vec(),
            run: RunConfig::default(),
            synth: SynthConfig::default(),
        }
    }
}

impl CliConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
    }

    /// Command-line values win over the file.
    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.run.seed = s;
            self.synth.seed = s;
        }
        if let Some(d) = &o.out {
            self.out = Some(d.clone());
        }
        if let Some(d) = &o.data {
            self.data = Some(d.clone());
        }
        if let Some(n) = o.image_size {
            self.run.image_size = n;
            self.synth.image_size = n;
        }
        if let Some(e) = o.epochs {
            self.run.epochs = e;
        }
        if let Some(l) = o.lambda_gcc {
            self.run.loss.lambda_gcc = l;
        }
        if o.no_gfi {
            self.run.model.gfi_enabled = false;
        }
        if o.no_gcc {
            self.run.loss.lambda_gcc = 0.0;
        }
        if let Some(p) = o.protocol {
            self.protocol = Some(p);
        }
        if o.deterministic {
            self.run.deterministic = true;
        }
        if self.run.deterministic {
            self.run.data.threads = 1;
            self.synth.threads = 1;
        }
    }

    pub fn out_dir(&self) -> Result<&Path, CliError> {
        self.out
            .as_deref()
            .ok_or_else(|| CliError::Usage("--out (or `out` in the config file) is required".into()))
    }

    pub fn data_dir(&self) -> Result<&Path, CliError> {
        self.data
            .as_deref()
            .ok_or_else(|| CliError::Usage("--data (or `data` in the config file) is required".into()))
    }

    pub fn protocols(&self) -> Vec<Protocol> {
        match self.protocol {
            Some(p) => vec![p],
            None => Protocol::ALL.to_vec(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_file_values() {
        let mut c: CliConfig = toml::from_str("protocol = \"o2s\"\n[run]\nepochs = 3\nseed = 1\n[run.loss]\nlambda_gcc = 4.0\n").unwrap();
        assert_eq!(c.protocol, Some(Protocol::OptToSar));
        c.apply(&Overrides {
            epochs: Some(7),
            seed: Some(11),
            no_gcc: true,
            deterministic: true,
            ..Overrides::default()
        });
        assert_eq!(c.run.epochs, 7);
        assert_eq!((c.run.seed, c.synth.seed), (11, 11));
        assert_eq!(c.run.loss.lambda_gcc, 0.0);
        assert_eq!((c.run.data.threads, c.synth.threads), (1, 1));
        assert_eq!(c.protocols(), vec![Protocol::OptToSar]);
    }

    #[test]
    fn untouched_values_come_from_the_file() {
        let mut c: CliConfig = toml::from_str("[run]\nepochs = 3\n").unwrap();
        c.apply(&Overrides::default());
        assert_eq!(c.run.epochs, 3);
        assert!(c.run.model.gfi_enabled);
        assert_eq!(c.protocols().len(), 3);
        assert!(c.out_dir().is_err());
    }
}
