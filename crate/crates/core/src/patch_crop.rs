//! Patch Cropping: probabilistic replacement of an STMap by a contiguous row
//! band of its enlarged (sub-ROI) counterpart.

use rand::Rng;

use crate::error::{Error, Result};
use crate::maps::StMap;

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PcConfig {
    pub gamma: usize,
    pub rho: f64,
}

impl Default for PcConfig {
    fn default() -> Self {
        Self { gamma: 2, rho: 0.5 }
    }
}

impl PcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.gamma == 0 {
            return Err(Error::invalid("gamma must be at least 1".to_string()));
        }
        check_rho(self.rho)
    }
}

fn check_rho(rho: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&rho) {
        return Err(Error::invalid(format!("rho must lie in [0, 1], got {rho}")));
    }
    Ok(())
}

/// The random part of a crop: `None` keeps the original map, `Some(y)` takes
/// enlarged rows `y..y + n`. Draws `u ~ U[0,1)` and crops when `u < rho`,
/// then `y ~ U{0, ..., n_e - n}`.
pub fn crop_decision<R: Rng + ?Sized>(rng: &mut R, rho: f64, n: usize, n_e: usize) -> Result<Option<usize>> {
    check_rho(rho)?;
    if n_e < n {
        return Err(Error::invalid(format!(
            "enlarged map has {n_e} rows, fewer than the {n} required"
        )));
    }
    let u: f64 = rng.gen();
    if u >= rho {
        return Ok(None);
    }
    Ok(Some(rng.gen_range(0..=n_e - n)))
}

/// Returns `m` unchanged, or with probability `rho` the band
/// `m_e[:, y..y + n, :]`. No interpolation is involved.
pub fn patch_crop<R: Rng + ?Sized>(m: &StMap, m_e: &StMap, rho: f64, rng: &mut R) -> Result<StMap> {
    if m.frames() != m_e.frames() {
        return Err(Error::shape(format!(
            "STMap has {} frames, enlarged map {}",
            m.frames(),
            m_e.frames()
        )));
    }
    match crop_decision(rng, rho, m.rows(), m_e.rows())? {
        None => Ok(m.clone()),
        Some(y) => m_e.row_band(y, m.rows()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn map(rows: usize, frames: usize, base: f64) -> StMap {
        let data = (0..3 * rows * frames).map(|v| base + v as f64).collect();
        StMap::new(rows, frames, data).unwrap()
    }

    #[test]
    fn rho_zero_never_crops() {
        let (m, me) = (map(4, 6, 0.0), map(16, 6, 1000.0));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..200 {
            assert_eq!(patch_crop(&m, &me, 0.0, &mut rng).unwrap(), m);
        }
    }

    #[test]
    fn rho_one_always_crops_verbatim_rows() {
        let (m, me) = (map(4, 6, 0.0), map(16, 6, 1000.0));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let c = patch_crop(&m, &me, 1.0, &mut rng).unwrap();
            assert_eq!(c.shape(), m.shape());
            for ch in 0..3 {
                for r in 0..4 {
                    assert!((0..16).any(|er| me.series(ch, er) == c.series(ch, r)));
                }
            }
        }
    }

    #[test]
    fn invalid_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        assert!(patch_crop(&map(8, 6, 0.0), &map(4, 6, 0.0), 1.0, &mut rng).is_err());
        assert!(patch_crop(&map(4, 6, 0.0), &map(8, 5, 0.0), 1.0, &mut rng).is_err());
        assert!(patch_crop(&map(4, 6, 0.0), &map(8, 6, 0.0), 1.5, &mut rng).is_err());
        assert!(PcConfig { gamma: 0, rho: 0.5 }.validate().is_err());
        assert!(PcConfig::default().validate().is_ok());
    }

    #[test]
    fn same_seed_same_crop() {
        let (m, me) = (map(4, 6, 0.0), map(16, 6, 1000.0));
        let a: Vec<_> = {
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            (0..20).map(|_| patch_crop(&m, &me, 0.5, &mut rng).unwrap()).collect()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for prev in a {
            assert_eq!(patch_crop(&m, &me, 0.5, &mut rng).unwrap(), prev);
        }
    }
}
