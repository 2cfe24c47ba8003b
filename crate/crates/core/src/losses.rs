//! Masked-prediction loss, variance/covariance regularisation and the
//! level-weighted total.

use crate::error::{Error, Result};
use crate::tensor::{Tape, Var};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub lambda: f64,
    pub mu: f64,
    pub nu: f64,
    pub smooth_l1_beta: f64,
    pub vicreg_eps: f64,
    pub vicreg: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: 0.05,
            mu: 0.15,
            nu: 0.8,
            smooth_l1_beta: 1.0,
            vicreg_eps: 1e-4,
            vicreg: true,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if [self.lambda, self.mu, self.nu]
            .iter()
            .any(|w| !(*w >= 0.0 && w.is_finite()))
        {
            return Err(Error::Config("level weights must be finite and non-negative".into()));
        }
        if !(self.smooth_l1_beta > 0.0) || !(self.vicreg_eps > 0.0) {
            return Err(Error::Config("smooth_l1_beta and vicreg_eps must be positive".into()));
        }
        Ok(())
    }

    pub fn weights(&self) -> [f64; 3] {
        [self.lambda, self.mu, self.nu]
    }
}

/// SmoothL1 summed over positions and channels, averaged over the
/// `masks · batch` prediction pairs.
pub fn jepa_loss(
    tape: &mut Tape,
    predictions: &[Var],
    targets: &[Var],
    masks: usize,
    batch: usize,
    beta: f64,
) -> Result<Var> {
    if predictions.len() != targets.len() || predictions.is_empty() {
        return Err(Error::Length(format!(
            "{} predictions for {} targets",
            predictions.len(),
            targets.len()
        )));
    }
    if predictions.len() != masks * batch {
        return Err(Error::Length(format!(
            "{} pairs but M·B = {}",
            predictions.len(),
            masks * batch
        )));
    }
    let mut total: Option<Var> = None;
    for (&p, &t) in predictions.iter().zip(targets) {
        let e = tape.smooth_l1(p, t, beta)?;
        let s = tape.sum(e);
        total = Some(match total {
            Some(acc) => tape.add(acc, s)?,
            None => s,
        });
    }
    Ok(tape.scale(total.expect("non-empty"), 1.0 / (masks * batch) as f64))
}

/// `(variance hinge, off-diagonal covariance)` over the rows of `z`.
pub fn vicreg(tape: &mut Tape, z: Var, eps: f64) -> Result<(Var, Var)> {
    let (n, dim) = (tape.value(z).rows(), tape.value(z).cols());
    if n < 2 {
        return Err(Error::Length(format!(
            "variance terms need at least 2 samples, got {n}"
        )));
    }
    let mu = tape.col_mean(z)?;
    let c = tape.sub_row(z, mu)?;
    let sq = tape.mul(c, c)?;
    let var = tape.col_mean(sq)?;
    let var = tape.scale(var, n as f64 / (n - 1) as f64);
    let std = tape.add_const(var, eps);
    let std = tape.sqrt(std);
    let hinge = tape.scale(std, -1.0);
    let hinge = tape.add_const(hinge, 1.0);
    let hinge = tape.relu(hinge);
    let var_loss = tape.mean(hinge);
    let ct = tape.transpose(c)?;
    let cov = tape.matmul(ct, c)?;
    let cov = tape.scale(cov, 1.0 / (n - 1) as f64);
    let cov_sq = tape.mul(cov, cov)?;
    let all = tape.sum(cov_sq);
    let diag_sq = tape.mul(var, var)?;
    let diag = tape.sum(diag_sq);
    let off = tape.sub(all, diag)?;
    let cov_loss = tape.scale(off, 1.0 / dim as f64);
    Ok((var_loss, cov_loss))
}

/// `λ·L1 + μ·L2 + ν·L3`; missing levels count as zero.
pub fn total_loss(levels: &[f64], weights: [f64; 3]) -> f64 {
    levels.iter().zip(weights).map(|(l, w)| w * l).sum()
}

/// Same weighting on the tape.
pub fn total_loss_var(tape: &mut Tape, levels: &[Var], weights: [f64; 3]) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for (&l, w) in levels.iter().zip(weights) {
        let t = tape.scale(l, w);
        acc = Some(match acc {
            Some(a) => tape.add(a, t)?,
            None => t,
        });
    }
    acc.ok_or_else(|| Error::Length("no level losses".into()))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LevelLoss {
    pub jepa: f64,
    pub var_tar: f64,
    pub var_ctx: f64,
    pub cov_tar: f64,
    pub cov_ctx: f64,
    pub total_level: f64,
}

impl LevelLoss {
    pub fn components(&self) -> [(&'static str, f64); 6] {
        [
            ("jepa", self.jepa),
            ("var_tar", self.var_tar),
            ("var_ctx", self.var_ctx),
            ("cov_tar", self.cov_tar),
            ("cov_ctx", self.cov_ctx),
            ("total_level", self.total_level),
        ]
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub levels: Vec<LevelLoss>,
    pub weights: [f64; 3],
    pub total: f64,
}

impl LossReport {
    pub fn is_finite(&self) -> bool {
        self.total.is_finite()
            && self
                .levels
                .iter()
                .all(|l| l.components().iter().all(|(_, v)| v.is_finite()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn eval_vicreg(z: Tensor) -> (f64, f64) {
        let mut tape = Tape::new();
        let v = tape.constant(z);
        let (a, b) = vicreg(&mut tape, v, 1e-4).unwrap();
        (tape.value(a).item(), tape.value(b).item())
    }

    fn vicreg_oracle(z: &[Vec<f64>], eps: f64) -> (f64, f64) {
        let n = z.len();
        let d = z[0].len();
        let mean: Vec<f64> = (0..d).map(|j| z.iter().map(|r| r[j]).sum::<f64>() / n as f64).collect();
        let cov =
            |j: usize, k: usize| z.iter().map(|r| (r[j] - mean[j]) * (r[k] - mean[k])).sum::<f64>() / (n - 1) as f64;
        let var = (0..d).map(|j| (1.0 - (cov(j, j) + eps).sqrt()).max(0.0)).sum::<f64>() / d as f64;
        let mut off = 0.0;
        for j in 0..d {
            for k in 0..d {
                if j != k {
                    off += cov(j, k).powi(2);
                }
            }
        }
        (var, off / d as f64)
    }

    #[test]
    fn jepa_closed_forms() {
        let mut tape = Tape::new();
        let p = tape.constant(Tensor::scalar(3.0));
        let t = tape.constant(Tensor::scalar(1.0));
        let l = jepa_loss(&mut tape, &[p], &[t], 1, 1, 1.0).unwrap();
        assert_eq!(tape.value(l).item(), 1.5);
        let z = jepa_loss(&mut tape, &[p], &[p], 1, 1, 1.0).unwrap();
        assert_eq!(tape.value(z).item(), 0.0);
        let two = jepa_loss(&mut tape, &[p, p], &[t, t], 2, 1, 1.0).unwrap();
        assert_eq!(tape.value(two).item(), 1.5);
        assert!(jepa_loss(&mut tape, &[p], &[t, t], 1, 1, 1.0).is_err());
        let wide = tape.constant(Tensor::zeros(&[1, 2]));
        assert!(jepa_loss(&mut tape, &[wide], &[t], 1, 1, 1.0).is_err());
    }

    #[test]
    fn vicreg_closed_forms() {
        let z = Tensor::from_rows(&[vec![1.0, 1.0], vec![-1.0, 1.0], vec![1.0, -1.0], vec![-1.0, -1.0]]);
        // Each column has unbiased variance 4/3, so the hinge is inactive.
        let (v, c) = eval_vicreg(z);
        assert_eq!(v, 0.0);
        assert!(c.abs() < 1e-15);
        let (v, c) = eval_vicreg(Tensor::from_rows(&vec![vec![2.0, 3.0]; 5]));
        assert!((v - (1.0 - 1e-2)).abs() < 1e-12);
        assert_eq!(c, 0.0);
        let mut tape = Tape::new();
        let one = tape.constant(Tensor::zeros(&[1, 3]));
        assert!(vicreg(&mut tape, one, 1e-4).is_err());
    }

    #[test]
    fn vicreg_matches_direct_definition() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let z = Tensor::randn(&[64, 8], 0.7, &mut rng);
            let rows: Vec<Vec<f64>> = (0..64).map(|i| z.row(i).to_vec()).collect();
            let (v, c) = eval_vicreg(z);
            let (ov, oc) = vicreg_oracle(&rows, 1e-4);
            assert!((v - ov).abs() < 1e-10);
            assert!((c - oc).abs() < 1e-10);
        }
    }

    #[test]
    fn total_examples() {
        let w = LossConfig::default().weights();
        assert!((total_loss(&[1.0, 1.0, 1.0], w) - 1.0).abs() < 1e-15);
        assert_eq!(total_loss(&[2.0, 5.0, 7.0], [0.05, 0.0, 0.0]), 0.1);
        assert_eq!(total_loss(&[0.0; 3], w), 0.0);
        assert_eq!(total_loss(&[3.0], w), 0.05 * 3.0);
    }

    proptest! {
        #[test]
        fn jepa_is_permutation_invariant(vals in prop::collection::vec(-5.0f64..5.0, 8), shift in 0usize..4) {
            let mut tape = Tape::new();
            let ps: Vec<Var> = vals[..4].iter().map(|&v| tape.constant(Tensor::scalar(v))).collect();
            let ts: Vec<Var> = vals[4..].iter().map(|&v| tape.constant(Tensor::scalar(v))).collect();
            let a = jepa_loss(&mut tape, &ps, &ts, 2, 2, 1.0).unwrap();
            let mut pr = ps.clone();
            let mut tr = ts.clone();
            pr.rotate_left(shift);
            tr.rotate_left(shift);
            let b = jepa_loss(&mut tape, &pr, &tr, 2, 2, 1.0).unwrap();
            prop_assert!((tape.value(a).item() - tape.value(b).item()).abs() < 1e-12);
        }

        #[test]
        fn wide_columns_have_no_variance_penalty(scale in 1.2f64..10.0, seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut z = Tensor::randn(&[32, 4], 1.0, &mut rng);
            // Rescale every column to sample std >= 1.
            for j in 0..4 {
                let col: Vec<f64> = (0..32).map(|i| z.get(i, j)).collect();
                let m = col.iter().sum::<f64>() / 32.0;
                let sd = (col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / 31.0).sqrt();
                for i in 0..32 {
                    z.data_mut()[i * 4 + j] = (col[i] - m) / sd * scale;
                }
            }
            prop_assert_eq!(eval_vicreg(z).0, 0.0);
        }

        #[test]
        fn total_is_linear(a in 0.0f64..10.0, b in 0.0f64..10.0, c in 0.0f64..10.0, k in 0.0f64..5.0) {
            let w = LossConfig::default().weights();
            let base = total_loss(&[a, b, c], w);
            let bumped = total_loss(&[a + k, b, c], w);
            prop_assert!((bumped - base - w[0] * k).abs() < 1e-9);
        }
    }
}
