use rand::Rng;

use super::layers::{BatchNorm, Conv, Pass};
use super::sab::SpatialAttention;
use super::ModelConfig;
use crate::autodiff::{ParamStore, Var};
use crate::error::{Error, Result};
use crate::maps::CHANNELS;

const KERNEL: usize = 3;

#[derive(Clone, Debug)]
struct Block {
    conv: Conv,
    bn: BatchNorm,
    sab: SpatialAttention,
}

/// STMap `[B,3,n,T]` (values in `[0,255]`) → waveform `[B,T]`.
///
/// Stem conv/BN/ReLU, then conv/BN/ReLU/attention blocks, a mean over rows
/// and a linear `1×3` head.
#[derive(Clone, Debug)]
pub struct Estimator {
    rows: usize,
    stem_conv: Conv,
    stem_bn: BatchNorm,
    blocks: Vec<Block>,
    head: Conv,
}

impl Estimator {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, name: &str, cfg: &ModelConfig) -> Result<Self> {
        let w = &cfg.widths;
        let stem_conv = Conv::new(store, rng, &format!("{name}.stem.conv"), CHANNELS, w[0], KERNEL, false)?;
        let stem_bn = BatchNorm::new(store, &format!("{name}.stem.bn"), w[0])?;
        let mut blocks = Vec::new();
        for (i, pair) in w.windows(2).enumerate() {
            let p = format!("{name}.block{i}");
            blocks.push(Block {
                conv: Conv::new(store, rng, &format!("{p}.conv"), pair[0], pair[1], KERNEL, false)?,
                bn: BatchNorm::new(store, &format!("{p}.bn"), pair[1])?,
                sab: SpatialAttention::new(
                    store,
                    rng,
                    &format!("{name}.sab{i}"),
                    pair[1],
                    cfg.rows,
                    cfg.sab_reduction,
                )?,
            });
        }
        let head = Conv::new(
            store,
            rng,
            &format!("{name}.head.conv"),
            *w.last().unwrap(),
            1,
            KERNEL,
            true,
        )?;
        Ok(Self {
            rows: cfg.rows,
            stem_conv,
            stem_bn,
            blocks,
            head,
        })
    }

    pub fn attention_blocks(&self) -> impl Iterator<Item = &SpatialAttention> {
        self.blocks.iter().map(|b| &b.sab)
    }

    pub fn forward(&self, pass: &mut Pass, stmap: Var) -> Result<Var> {
        let s = pass.tape.value(stmap).shape().to_vec();
        if s.len() != 4 || s[1] != CHANNELS || s[2] != self.rows {
            return Err(Error::shape(format!(
                "estimator expects [B,{CHANNELS},{},T], got {s:?}",
                self.rows
            )));
        }
        let (b, t) = (s[0], s[3]);
        let x = pass.tape.affine(stmap, 1.0 / 127.5, -1.0);
        let x = self.stem_conv.forward(pass, x)?;
        let x = self.stem_bn.forward(pass, x)?;
        let mut x = pass.tape.relu(x);
        for blk in &self.blocks {
            let y = blk.conv.forward(pass, x)?;
            let y = blk.bn.forward(pass, y)?;
            let y = pass.tape.relu(y);
            x = blk.sab.forward(pass, y)?;
        }
        let pooled = pass.tape.pool_rows_mean(x)?;
        let y = self.head.forward(pass, pooled)?;
        pass.tape.reshape(y, &[b, t])
    }
}
