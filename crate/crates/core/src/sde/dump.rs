//! `SPE1` binary trajectory dump.
//!
//! Layout, all little-endian: magic `b"SPE1"`, then `n, ℓ, m, N, K` as `u64`,
//! `dt` as `f64`, then the arrays `states (N·(K+1)·n)`, `noise (N·K·m)`,
//! `controls (N·K·ℓ)`, `path_costs (N)` as `f64`.

use std::io::{Read, Write};

use super::TrajectoryEnsemble;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"SPE1";

#[derive(Debug, Clone, PartialEq)]
pub struct Spe1Dump {
    pub state_dim: usize,
    pub control_dim: usize,
    pub noise_dim: usize,
    pub trajectories: usize,
    pub steps: usize,
    pub dt: f64,
    pub states: Vec<f64>,
    pub noise: Vec<f64>,
    pub controls: Vec<f64>,
    pub path_costs: Vec<f64>,
}

pub fn write_spe1<W: Write>(ens: &TrajectoryEnsemble, mut w: W) -> Result<()> {
    let paths = ens
        .paths
        .as_ref()
        .ok_or_else(|| Error::invalid("SPE1 dump needs an ensemble recorded with Record::Full"))?;
    w.write_all(MAGIC)?;
    for v in [ens.state_dim, ens.control_dim, ens.noise_dim, ens.len(), ens.grid.steps] {
        w.write_all(&(v as u64).to_le_bytes())?;
    }
    w.write_all(&ens.grid.dt.to_le_bytes())?;
    for arr in [&paths.states, &paths.noise, &paths.controls, &ens.path_costs] {
        for v in arr.iter() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_spe1<R: Read>(mut r: R) -> Result<Spe1Dump> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::invalid("not an SPE1 file"));
    }
    let mut dims = [0usize; 5];
    for d in dims.iter_mut() {
        let mut b = [0u8; 8];
        r.read_exact(&mut b)?;
        *d = usize::try_from(u64::from_le_bytes(b))
            .map_err(|_| Error::invalid("SPE1 dimension overflows usize"))?;
    }
    let [n, l, m, count, k] = dims;
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    let dt = f64::from_le_bytes(b);
    let mut read_vec = |len: usize| -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(len);
        for _ in 0..len {
            r.read_exact(&mut b)?;
            out.push(f64::from_le_bytes(b));
        }
        Ok(out)
    };
    let states = read_vec(count * (k + 1) * n)?;
    let noise = read_vec(count * k * m)?;
    let controls = read_vec(count * k * l)?;
    let path_costs = read_vec(count)?;
    Ok(Spe1Dump {
        state_dim: n,
        control_dim: l,
        noise_dim: m,
        trajectories: count,
        steps: k,
        dt,
        states,
        noise,
        controls,
        path_costs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sde::*;
    use nalgebra::DMatrix;

    #[test]
    fn round_trip() {
        let d = FnDynamics::constant(DMatrix::from_row_slice(2, 1, &[0.0, 1.0]), DMatrix::identity(2, 2));
        let cost = FnCost::new(1.0, DMatrix::identity(1, 1), |_, x| x[0].abs());
        let grid = TimeGrid::new(0.0, 1.0, 0.1).unwrap();
        let u = ConstantPolicy(vec![0.5]);
        let ens = rollout_batch(
            &d,
            &cost,
            &grid,
            &[0.0, 1.0],
            &u,
            &ZeroPolicy(2),
            5,
            &SeedSpec::new(2),
            RolloutOptions { sampling: Sampling::Independent, record: Record::Full },
        )
        .unwrap();
        let mut buf = Vec::new();
        write_spe1(&ens, &mut buf).unwrap();
        assert_eq!(&buf[..4], b"SPE1");
        let back = read_spe1(buf.as_slice()).unwrap();
        assert_eq!((back.state_dim, back.control_dim, back.noise_dim), (2, 1, 2));
        assert_eq!((back.trajectories, back.steps, back.dt), (5, 10, 0.1));
        let p = ens.paths.unwrap();
        assert_eq!(back.states, p.states);
        assert_eq!(back.noise, p.noise);
        assert_eq!(back.controls, p.controls);
        assert_eq!(back.path_costs, ens.path_costs);
    }

    #[test]
    fn summary_ensemble_is_rejected() {
        let d = ScalarLinearDynamics { drift_coef: 0.0, control_gain: 1.0, noise_gain: 1.0 };
        let cost = FnCost::new(1.0, DMatrix::identity(1, 1), |_, _| 0.0);
        let grid = TimeGrid::new(0.0, 1.0, 0.5).unwrap();
        let ens = rollout_batch(&d, &cost, &grid, &[0.0], &ZeroPolicy(1), &ZeroPolicy(1), 1, &SeedSpec::new(0), Default::default()).unwrap();
        assert!(write_spe1(&ens, Vec::new()).is_err());
        assert!(read_spe1(&b"XXXX"[..]).is_err());
    }
}
