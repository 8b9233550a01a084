//! JSON configuration files.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::data::DatasetSpec;
use crate::error::{Error, Result};
use crate::oracle::OracleConfig;
use crate::pipeline::{ChildConfig, SearchConfig};
use crate::supernet::SuperNetSpec;

/// Parses JSON text. Errors name the offending key path, e.g.
/// `search.temperature.t0`.
pub fn from_json_str<T: DeserializeOwned>(text: &str, origin: &str) -> Result<T> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        Error::Config {
            path: if path == "." {
                origin.to_string()
            } else {
                format!("{origin}: {path}")
            },
            msg: e.into_inner().to_string(),
        }
    })
}

pub fn load_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::File {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    from_json_str(&text, &path.display().to_string())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::File {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}

/// Everything a run needs: the network, the data and the settings of each
/// stage. Missing stage sections take their defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub network: SuperNetSpec,
    pub data: DatasetSpec,
    #[serde(default)]
    pub search: SearchConfig,
    #[serde(default)]
    pub child: ChildConfig,
    #[serde(default)]
    pub oracle: OracleConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.search.validate()?;
        self.child.validate()?;
        self.oracle.validate()?;
        Ok(())
    }
}
