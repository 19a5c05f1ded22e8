use rand::Rng;

use super::layers::{Dense, Pass};
use crate::autodiff::{ParamStore, Var};
use crate::error::{Error, Result};

/// Channel and row recalibration: `y = x + x ⊙ w_c ⊙ w_s`.
///
/// `w_c[B,C]` comes from global pooling through a `C → C/r → C` bottleneck,
/// `w_s[B,H]` from the per-row mean over channels and time through `H → H`.
#[derive(Clone, Debug)]
pub struct SpatialAttention {
    pub channels: usize,
    pub rows: usize,
    pub fc1: Dense,
    pub fc2: Dense,
    pub row_fc: Dense,
}

impl SpatialAttention {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        channels: usize,
        rows: usize,
        reduction: usize,
    ) -> Result<Self> {
        let hidden = channels / reduction;
        if hidden == 0 {
            return Err(Error::invalid(format!(
                "attention: {channels} channels with reduction {reduction}"
            )));
        }
        Ok(Self {
            channels,
            rows,
            fc1: Dense::new(store, rng, &format!("{name}.fc1"), channels, hidden)?,
            fc2: Dense::new(store, rng, &format!("{name}.fc2"), hidden, channels)?,
            row_fc: Dense::new(store, rng, &format!("{name}.row_fc"), rows, rows)?,
        })
    }

    pub fn forward(&self, pass: &mut Pass, x: Var) -> Result<Var> {
        let s = pass.tape.value(x).shape().to_vec();
        if s.len() != 4 || s[1] != self.channels || s[2] != self.rows {
            return Err(Error::shape(format!(
                "attention expects [B,{},{},W], got {s:?}",
                self.channels, self.rows
            )));
        }
        let b = s[0];
        let t = &mut *pass;
        let pooled = t.tape.global_avg(x)?;
        let h = self.fc1.forward(t, pooled)?;
        let h = t.tape.relu(h);
        let h = self.fc2.forward(t, h)?;
        let wc = t.tape.sigmoid(h);
        let wc = t.tape.reshape(wc, &[b, self.channels, 1, 1])?;

        let over_c = t.tape.mean_axis(x, 1)?;
        let over_cw = t.tape.mean_axis(over_c, 3)?;
        let rows = t.tape.reshape(over_cw, &[b, self.rows])?;
        let g = self.row_fc.forward(t, rows)?;
        let ws = t.tape.sigmoid(g);
        let ws = t.tape.reshape(ws, &[b, 1, self.rows, 1])?;

        let scaled = t.tape.mul(x, wc)?;
        let scaled = t.tape.mul(scaled, ws)?;
        t.tape.add(x, scaled)
    }

    pub fn param_count(&self, store: &ParamStore) -> usize {
        [self.fc1, self.fc2, self.row_fc]
            .iter()
            .map(|d| store.get(d.weight).value.len() + store.get(d.bias).value.len())
            .sum()
    }
}
