use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Dims;

/// Which losses drive training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    /// Caption loss only.
    Cap2cap,
    /// Grounding loss only.
    Cap2img,
    /// Sum of both.
    Cap2all,
}

impl Objective {
    pub fn uses_caption(self) -> bool {
        matches!(self, Objective::Cap2cap | Objective::Cap2all)
    }

    pub fn uses_grounding(self) -> bool {
        matches!(self, Objective::Cap2img | Objective::Cap2all)
    }

    pub fn name(self) -> &'static str {
        match self {
            Objective::Cap2cap => "cap2cap",
            Objective::Cap2img => "cap2img",
            Objective::Cap2all => "cap2all",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub objective: Objective,
    pub d_e: usize,
    pub d_cell: usize,
    pub d_a: usize,
    pub n_a: usize,
    /// Image-feature width; must equal the corpus `d_img`.
    pub d_img: usize,
    /// Hidden width of the projection head. `None` means `d_img`.
    pub d_p: Option<usize>,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Elementwise gradient clip bound.
    pub clip: f64,
    pub epochs: usize,
    pub seed: u64,
    pub dropout: f64,
    pub min_count: usize,
    /// Optional GloVe-format file for initial word embeddings.
    pub embeddings: Option<String>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            objective: Objective::Cap2all,
            d_e: 32,
            d_cell: 32,
            d_a: 16,
            n_a: 4,
            d_img: 64,
            d_p: None,
            batch_size: 32,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            clip: 5.0,
            epochs: 10,
            seed: 0,
            dropout: 0.3,
            min_count: 1,
            embeddings: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.clip <= 0.0 {
            return Err(Error::Config(format!(
                "clip bound must be > 0, got {}",
                self.clip
            )));
        }
        if self.batch_size < 2 {
            return Err(Error::Config(format!(
                "batch size must be >= 2, got {}",
                self.batch_size
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout must be in [0, 1), got {}",
                self.dropout
            )));
        }
        if self.lr.is_nan() || self.lr <= 0.0 {
            return Err(Error::Config("learning rate must be > 0".into()));
        }
        Ok(())
    }

    pub fn dims(&self, vocab: usize) -> Dims {
        Dims {
            vocab,
            d_e: self.d_e,
            d_cell: self.d_cell,
            d_a: self.d_a,
            n_a: self.n_a,
            d_img: self.d_img,
            d_p: self.d_p.unwrap_or(self.d_img),
        }
    }
}
