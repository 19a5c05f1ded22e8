//! Network blocks: spatial attention, the waveform estimator, and the
//! generator that turns a reference pulse into a noise-free PixelMap.

mod estimator;
mod generator;
mod layers;
mod sab;

pub use estimator::Estimator;
pub use generator::{pretrain_autoencoder, Autoencoder, Generator, PretrainConfig, FROZEN_PREFIX_DS, FROZEN_PREFIX_ES};
pub use layers::{apply_bn_updates, BatchNorm, Conv, Mode, Pass, BN_EPS, BN_MOMENTUM};
pub use sab::SpatialAttention;

use rand::Rng;

use crate::autodiff::{ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::maps::CHANNELS;

/// Layer sizes. Every width is configurable so tests and small-scale runs can
/// shrink the network.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ModelConfig {
    pub rows: usize,
    pub frames: usize,
    /// Stem width followed by one entry per attention block.
    pub widths: Vec<usize>,
    pub sab_reduction: usize,
    pub ae_channels: [usize; 3],
    pub ae_kernel: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            rows: 32,
            frames: 256,
            widths: vec![32, 64, 64, 64],
            sab_reduction: 4,
            ae_channels: [8, 16, 16],
            ae_kernel: 5,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rows == 0 {
            return Err(Error::invalid("rows must be positive".to_string()));
        }
        if self.frames == 0 || !self.frames.is_multiple_of(8) {
            return Err(Error::invalid(format!(
                "frames must be a positive multiple of 8, got {}",
                self.frames
            )));
        }
        if self.widths.len() < 2 {
            return Err(Error::invalid("widths needs a stem and at least one block".to_string()));
        }
        if self.sab_reduction == 0 || self.widths.iter().any(|&w| w < self.sab_reduction) {
            return Err(Error::invalid(format!(
                "every width must be at least the attention reduction {}",
                self.sab_reduction
            )));
        }
        if self.ae_kernel.is_multiple_of(2) || self.ae_channels.contains(&0) {
            return Err(Error::invalid(
                "autoencoder kernel must be odd and channels positive".to_string(),
            ));
        }
        Ok(())
    }
}

/// Estimator plus generator sharing one parameter store.
#[derive(Clone, Debug)]
pub struct Drnet {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub ep: Estimator,
    pub gp: Generator,
}

impl Drnet {
    pub fn new<R: Rng + ?Sized>(cfg: ModelConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let ep = Estimator::new(&mut store, rng, "ep", &cfg)?;
        let gp = Generator::new(&mut store, rng, "gp", &cfg)?;
        store.set_trainable(generator::FROZEN_PREFIX_ES, false);
        store.set_trainable(generator::FROZEN_PREFIX_DS, false);
        Ok(Self { cfg, store, ep, gp })
    }

    /// Runs the estimator in eval mode on raw STMap tensors `[B,C,n,T]`.
    pub fn predict(&self, stmaps: &crate::autodiff::Tensor) -> Result<Vec<Vec<f64>>> {
        let s = stmaps.shape();
        if s.len() != 4 || s[1] != CHANNELS {
            return Err(Error::shape(format!("predict expects [B,3,n,T], got {s:?}")));
        }
        let mut tape = Tape::new();
        let mut pass = Pass::new(&mut tape, &self.store, Mode::Eval);
        let x = pass.tape.constant(stmaps.clone());
        let y: Var = self.ep.forward(&mut pass, x)?;
        let out = tape.value(y);
        let t = s[3];
        Ok(out.data().chunks_exact(t).map(<[f64]>::to_vec).collect())
    }
}
