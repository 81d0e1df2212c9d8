use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Where a class embedding enters the spatial sequence.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConditionMode {
    /// The class embedding takes the place of the start embedding.
    #[default]
    Replace,
    /// The class embedding is an extra first position before the start
    /// embedding.
    Prepend,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub n_spatial: usize,
    pub n_depth: usize,
    pub n_e: usize,
    pub heads: usize,
    /// Spatial positions `T = H·W`.
    pub t: usize,
    /// Quantization depth `D`.
    pub d: usize,
    /// Codes per codebook.
    pub k: usize,
    pub n_z: usize,
    /// 1 for a shared codebook, `D` for per-depth codebooks.
    pub code_tables: usize,
    pub dropout: f64,
    pub condition_classes: Option<usize>,
    pub condition_mode: ConditionMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_spatial: 2,
            n_depth: 2,
            n_e: 64,
            heads: 4,
            t: 64,
            d: 4,
            k: 256,
            n_z: 16,
            code_tables: 1,
            dropout: 0.0,
            condition_classes: None,
            condition_mode: ConditionMode::Replace,
        }
    }
}

pub(crate) fn check_width(n_e: usize, heads: usize) -> Result<()> {
    if n_e == 0 || heads == 0 || !n_e.is_multiple_of(heads) {
        return Err(Error::Config(format!(
            "n_e={n_e} must be a positive multiple of heads={heads}"
        )));
    }
    Ok(())
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        check_width(self.n_e, self.heads)?;
        if self.t == 0 || self.d == 0 || self.k == 0 || self.n_z == 0 {
            return Err(Error::Config("T, D, K and n_z must all be >= 1".into()));
        }
        if self.code_tables != 1 && self.code_tables != self.d {
            return Err(Error::Config(format!(
                "code_tables must be 1 or D={}, got {}",
                self.d, self.code_tables
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} not in [0, 1)", self.dropout)));
        }
        if self.condition_classes == Some(0) {
            return Err(Error::Config("condition_classes must be >= 1".into()));
        }
        Ok(())
    }

    /// Spatial sequence length including a prepended class position.
    pub fn spatial_len(&self) -> usize {
        match (self.condition_classes, self.condition_mode) {
            (Some(_), ConditionMode::Prepend) => self.t + 1,
            _ => self.t,
        }
    }
}

/// Single-axis causal transformer over the depth-minor sequence of `T·D`
/// codes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NaiveConfig {
    pub n_layers: usize,
    pub n_e: usize,
    pub heads: usize,
    pub t: usize,
    pub d: usize,
    pub k: usize,
    pub condition_classes: Option<usize>,
}

impl NaiveConfig {
    /// Same width, heads and total block count `N = N_spatial + N_depth`.
    pub fn matched(cfg: &ModelConfig) -> Self {
        Self {
            n_layers: cfg.n_spatial + cfg.n_depth,
            n_e: cfg.n_e,
            heads: cfg.heads,
            t: cfg.t,
            d: cfg.d,
            k: cfg.k,
            condition_classes: cfg.condition_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_width(self.n_e, self.heads)?;
        if self.t == 0 || self.d == 0 || self.k == 0 {
            return Err(Error::Config("T, D and K must all be >= 1".into()));
        }
        Ok(())
    }

    pub fn seq_len(&self) -> usize {
        self.t * self.d
    }
}
