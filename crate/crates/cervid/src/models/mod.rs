//! Bundled dynamics models, random initializers, and model (de)serialization.
//!
//! Every model carries analytic Jacobians and Jacobian diagonals and absorbs
//! its inputs/noise at construction, so a `(kind, dims, seed)` triple pins
//! the entire problem instance. Models serialize to a versioned JSON
//! document with explicit weight/noise arrays for bit-exact reproduction
//! across machines.

mod affine;
mod argru;
pub mod fd;
mod gru;
mod math;

pub use affine::{Affine, TanhDynamics};
pub use argru::ArGru;
pub use gru::{Gru, GruCell};

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dynamics::DynamicsModel;
use crate::{Error, Real, Result};

/// A dynamics model behind a trait object, as built from a [`ModelSpec`].
pub type BoxedModel = Box<dyn DynamicsModel + Send + Sync>;

fn default_sr() -> Real {
    0.5
}
fn default_gain() -> Real {
    5.0
}

/// Inline model selector used by run configs.
///
/// Dimensions and the seed come from the surrounding config (`t`, `d`,
/// `seed`), so a spec stays a one-liner; `file` points at a serialized
/// [`ModelFile`] with explicit weights instead.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ModelSpec {
    /// Untrained GRU with exogenous standard-normal inputs of width `d`.
    Gru {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        input_dim: Option<usize>,
    },
    /// Untrained autoregressive GRU; `d` is the expanded state `N_h + 1`.
    Argru,
    /// AR-GRU desk-fitted to a noisy sine (stiff; `d` must be 4).
    ArgruSine,
    /// Random affine dynamics rescaled to a spectral radius.
    Affine {
        #[serde(default = "default_sr")]
        spectral_radius: Real,
    },
    /// Saturating `tanh(gain (W s + b))` dynamics (stiff for `gain > 1`).
    Tanh {
        #[serde(default = "default_gain")]
        gain: Real,
    },
    /// Load a serialized model document; dims must match the config.
    File { path: String },
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec::Gru { input_dim: None }
    }
}

impl ModelSpec {
    /// Construct the model for sequence length `t`, state dimension `d`,
    /// and `seed`. Deterministic: the same arguments give bit-identical
    /// weights and noise.
    pub fn build(&self, t: usize, d: usize, seed: u64) -> Result<BoxedModel> {
        if t == 0 || d == 0 {
            return Err(Error::InvalidParameter("t and d must be >= 1".into()));
        }
        match self {
            ModelSpec::Gru { input_dim } => {
                let input = input_dim.unwrap_or(d);
                Ok(Box::new(Gru::random(d, input, t, seed)))
            }
            ModelSpec::Argru => {
                if d < 2 {
                    return Err(Error::InvalidParameter(
                        "argru needs d >= 2 (expanded state is N_h + 1)".into(),
                    ));
                }
                Ok(Box::new(ArGru::random(d - 1, t, seed)))
            }
            ModelSpec::ArgruSine => {
                if d != 4 {
                    return Err(Error::InvalidParameter(
                        "argru-sine has a fixed expanded state of 4 (N_h = 3)".into(),
                    ));
                }
                Ok(Box::new(ArGru::fitted_noisy_sine(t, seed)))
            }
            ModelSpec::Affine { spectral_radius } => {
                if !spectral_radius.is_finite() || *spectral_radius < 0.0 {
                    return Err(Error::InvalidParameter("bad spectral radius".into()));
                }
                Ok(Box::new(Affine::random(d, *spectral_radius, seed)))
            }
            ModelSpec::Tanh { gain } => Ok(Box::new(TanhDynamics::random(d, *gain, seed))),
            ModelSpec::File { path } => {
                let file = read_model_file(Path::new(path))?;
                let model = file.into_model();
                if model.state_dim() != d {
                    return Err(Error::Config(format!(
                        "model file has state dim {}, config says {d}",
                        model.state_dim()
                    )));
                }
                Ok(model)
            }
        }
    }
}

/// A fully resolved model with explicit weights, inputs, and noise.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ModelDocument {
    Gru(Gru),
    Argru(ArGru),
    Affine(Affine),
    Tanh(TanhDynamics),
}

/// Versioned on-disk wrapper for [`ModelDocument`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelFile {
    pub schema_version: u32,
    #[serde(flatten)]
    pub model: ModelDocument,
}

pub const MODEL_SCHEMA_VERSION: u32 = 1;

impl ModelFile {
    pub fn new(model: ModelDocument) -> Self {
        ModelFile {
            schema_version: MODEL_SCHEMA_VERSION,
            model,
        }
    }

    pub fn into_model(self) -> BoxedModel {
        match self.model {
            ModelDocument::Gru(m) => Box::new(m),
            ModelDocument::Argru(m) => Box::new(m),
            ModelDocument::Affine(m) => Box::new(m),
            ModelDocument::Tanh(m) => Box::new(m),
        }
    }
}

pub fn write_model_file(path: &Path, file: &ModelFile) -> Result<()> {
    let json = serde_json::to_string_pretty(file)?;
    std::fs::write(path, json)?;
    Ok(())
}

pub fn read_model_file(path: &Path) -> Result<ModelFile> {
    let text = std::fs::read_to_string(path)?;
    let file: ModelFile = serde_json::from_str(&text)?;
    if file.schema_version != MODEL_SCHEMA_VERSION {
        return Err(Error::Config(format!(
            "unsupported model schema version {}",
            file.schema_version
        )));
    }
    Ok(file)
}
