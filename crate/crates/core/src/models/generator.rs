use rand::seq::SliceRandom;
use rand::Rng;

use super::layers::{Conv, Mode, Pass};
use super::ModelConfig;
use crate::autodiff::{AdamState, ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::maps::CHANNELS;

pub const FROZEN_PREFIX_ES: &str = "gp.es.";
pub const FROZEN_PREFIX_DS: &str = "gp.ds.";

/// 1-D convolutional autoencoder over `[B,1,1,T]`: three conv/pool stages
/// down to `T/8` latent steps, mirrored by upsample/conv stages.
#[derive(Clone, Debug)]
pub struct Autoencoder {
    enc: [Conv; 3],
    dec: [Conv; 3],
    prefixes: [String; 2],
}

impl Autoencoder {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, name: &str, cfg: &ModelConfig) -> Result<Self> {
        let [c1, c2, c3] = cfg.ae_channels;
        let k = cfg.ae_kernel;
        let (es, ds) = (format!("{name}.es"), format!("{name}.ds"));
        let enc = [
            Conv::new(store, rng, &format!("{es}.conv1"), 1, c1, k, true)?,
            Conv::new(store, rng, &format!("{es}.conv2"), c1, c2, k, true)?,
            Conv::new(store, rng, &format!("{es}.conv3"), c2, c3, k, true)?,
        ];
        let dec = [
            Conv::new(store, rng, &format!("{ds}.conv1"), c3, c2, k, true)?,
            Conv::new(store, rng, &format!("{ds}.conv2"), c2, c1, k, true)?,
            Conv::new(store, rng, &format!("{ds}.conv3"), c1, 1, k, true)?,
        ];
        Ok(Self {
            enc,
            dec,
            prefixes: [format!("{es}."), format!("{ds}.")],
        })
    }

    /// `[B,T]` → latent `[B,C3,1,T/8]`.
    pub fn encode(&self, pass: &mut Pass, x: Var) -> Result<Var> {
        let s = pass.tape.value(x).shape().to_vec();
        if s.len() != 2 || !s[1].is_multiple_of(8) {
            return Err(Error::shape(format!(
                "autoencoder expects [B,T] with T a multiple of 8, got {s:?}"
            )));
        }
        let mut h = pass.tape.reshape(x, &[s[0], 1, 1, s[1]])?;
        for (i, conv) in self.enc.iter().enumerate() {
            h = conv.forward(pass, h)?;
            if i < 2 {
                h = pass.tape.activation(h, crate::autodiff::Activation::Elu);
            }
            h = pass.tape.pool_w(h, 2)?;
        }
        Ok(h)
    }

    /// Latent `[B,C3,1,T/8]` → `[B,T]`.
    pub fn decode(&self, pass: &mut Pass, z: Var) -> Result<Var> {
        let mut h = z;
        for (i, conv) in self.dec.iter().enumerate() {
            h = pass.tape.upsample_w(h, 2)?;
            h = conv.forward(pass, h)?;
            if i < 2 {
                h = pass.tape.activation(h, crate::autodiff::Activation::Elu);
            }
        }
        let s = pass.tape.value(h).shape().to_vec();
        pass.tape.reshape(h, &[s[0], s[3]])
    }

    pub fn forward(&self, pass: &mut Pass, x: Var) -> Result<Var> {
        let z = self.encode(pass, x)?;
        self.decode(pass, z)
    }

    pub fn set_trainable(&self, store: &mut ParamStore, trainable: bool) {
        for p in &self.prefixes {
            store.set_trainable(p, trainable);
        }
    }

    /// Mean squared reconstruction error over the rows of `signals[B,T]`.
    pub fn reconstruction_mse(&self, store: &ParamStore, signals: &Tensor) -> Result<f64> {
        let mut tape = Tape::new();
        let mut pass = Pass::new(&mut tape, store, Mode::Eval);
        let x = pass.tape.constant(signals.clone());
        let loss = mse(&mut pass, self, x)?;
        tape.value(loss).item()
    }
}

fn mse(pass: &mut Pass, ae: &Autoencoder, x: Var) -> Result<Var> {
    let y = ae.forward(pass, x)?;
    let d = pass.tape.sub(y, x)?;
    let sq = pass.tape.mul(d, d)?;
    pass.tape.mean_all(sq)
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            lr: 3e-3,
            batch: 16,
        }
    }
}

/// Fits the autoencoder to standardized waveforms (each of length `T`),
/// returning the mean training loss per epoch. The autoencoder is frozen again
/// on return.
pub fn pretrain_autoencoder<R: Rng + ?Sized>(
    ae: &Autoencoder,
    store: &mut ParamStore,
    signals: &[Vec<f64>],
    cfg: PretrainConfig,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if signals.is_empty() || cfg.batch == 0 || cfg.epochs == 0 {
        return Err(Error::invalid(
            "pretraining needs signals, epochs and a batch size".to_string(),
        ));
    }
    let t = signals[0].len();
    if signals.iter().any(|s| s.len() != t) {
        return Err(Error::shape("pretraining signals differ in length".to_string()));
    }
    ae.set_trainable(store, true);
    let result = (|| {
        let mut adam = AdamState::new(cfg.lr);
        let mut order: Vec<usize> = (0..signals.len()).collect();
        let mut history = Vec::with_capacity(cfg.epochs);
        for epoch in 0..cfg.epochs {
            order.shuffle(rng);
            let mut total = 0.0;
            let mut batches = 0;
            for chunk in order.chunks(cfg.batch) {
                let data: Vec<f64> = chunk.iter().flat_map(|&i| signals[i].iter().copied()).collect();
                let x = Tensor::new(&[chunk.len(), t], data)?;
                let mut tape = Tape::new();
                let mut pass = Pass::new(&mut tape, store, Mode::Train);
                let xv = pass.tape.constant(x);
                let loss = mse(&mut pass, ae, xv)?;
                let value = tape.value(loss).item()?;
                if !value.is_finite() {
                    return Err(Error::Numerical(format!(
                        "autoencoder loss became {value} in epoch {epoch}"
                    )));
                }
                let grads = tape.backward(loss)?;
                store.accumulate(&tape, &grads);
                adam.step(store);
                total += value;
                batches += 1;
            }
            history.push(total / batches as f64);
        }
        Ok(history)
    })();
    ae.set_trainable(store, false);
    result
}

/// Reference pulse `[B,T]` → noise-free PixelMap `[B,C,n,T]`:
/// `exp(log_amp[c,i]) · D(E(s)) + offset[c,i]`.
#[derive(Clone, Debug)]
pub struct Generator {
    pub ae: Autoencoder,
    pub log_amp: ParamId,
    pub offset: ParamId,
    rows: usize,
}

impl Generator {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, name: &str, cfg: &ModelConfig) -> Result<Self> {
        let ae = Autoencoder::new(store, rng, name, cfg)?;
        let shape = [1, CHANNELS, cfg.rows, 1];
        let log_amp = store.register(&format!("{name}.mod.log_amp"), Tensor::zeros(&shape)?, true)?;
        let offset = store.register(&format!("{name}.mod.offset"), Tensor::zeros(&shape)?, true)?;
        Ok(Self {
            ae,
            log_amp,
            offset,
            rows: cfg.rows,
        })
    }

    pub fn forward(&self, pass: &mut Pass, s: Var) -> Result<Var> {
        let shape = pass.tape.value(s).shape().to_vec();
        if shape.len() != 2 {
            return Err(Error::shape(format!("generator expects [B,T], got {shape:?}")));
        }
        let (b, t) = (shape[0], shape[1]);
        let w = self.ae.forward(pass, s)?;
        let w = pass.tape.reshape(w, &[b, 1, 1, t])?;
        let w = pass.tape.expand(w, &[b, CHANNELS, self.rows, t])?;
        let log_amp = pass.param(self.log_amp);
        let amp = pass.tape.exp(log_amp);
        let scaled = pass.tape.mul(w, amp)?;
        let offset = pass.param(self.offset);
        pass.tape.add(scaled, offset)
    }
}
