//! Target and context sampling.

use crate::error::{Error, Result};
use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskConfig {
    pub ratios: Vec<f64>,
    /// Target masks per level and item.
    pub masks: usize,
    pub p_successive: f64,
    pub context_min: f64,
    pub context_max: f64,
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self {
            ratios: vec![0.10, 0.15, 0.20, 0.25, 0.30],
            masks: 4,
            p_successive: 0.5,
            context_min: 0.85,
            context_max: 1.0,
        }
    }
}

impl MaskConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ratios.is_empty() || self.ratios.iter().any(|r| !(*r > 0.0 && *r < 1.0)) {
            return Err(Error::Config("mask ratios must be non-empty and inside (0, 1)".into()));
        }
        if self.masks == 0 {
            return Err(Error::Config("need at least one target mask".into()));
        }
        if !(0.0..=1.0).contains(&self.p_successive) {
            return Err(Error::Config("p_successive must lie in [0, 1]".into()));
        }
        if !(self.context_min > 0.0 && self.context_min <= self.context_max && self.context_max <= 1.0) {
            return Err(Error::Config("context range must satisfy 0 < min <= max <= 1".into()));
        }
        Ok(())
    }
}

/// Target and context positions for one item at one level.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskPlan {
    /// Sorted index sets, one per mask.
    pub targets: Vec<Vec<usize>>,
    /// Sorted context positions with every target removed.
    pub context: Vec<usize>,
    pub ratios: Vec<f64>,
    pub successive: Vec<bool>,
}

impl MaskPlan {
    /// Every position is context and there are no targets.
    pub fn full(n: usize) -> Self {
        Self {
            targets: Vec::new(),
            context: (0..n).collect(),
            ratios: Vec::new(),
            successive: Vec::new(),
        }
    }

    /// Panics if a context position is also a target.
    pub fn assert_disjoint(&self) {
        for m in &self.targets {
            for j in m {
                assert!(
                    self.context.binary_search(j).is_err(),
                    "context leaks target position {j}"
                );
            }
        }
    }
}

/// `max(1, round(r·n))`, rejecting masks that would cover the whole sequence.
pub fn mask_len(n: usize, r: f64) -> Result<usize> {
    let len = (r * n as f64).round() as usize;
    if len >= n {
        return Err(Error::MaskTooLarge { len, n });
    }
    Ok(len.max(1))
}

#[derive(Clone, Debug, PartialEq)]
pub struct TargetMasks {
    pub masks: Vec<Vec<usize>>,
    pub ratios: Vec<f64>,
    pub successive: Vec<bool>,
}

pub fn sample_target_masks(n: usize, cfg: &MaskConfig, rng: &mut impl Rng) -> Result<TargetMasks> {
    if n < 2 {
        return Err(Error::Length(format!("target masking needs n >= 2, got {n}")));
    }
    let mut out = TargetMasks {
        masks: Vec::with_capacity(cfg.masks),
        ratios: Vec::with_capacity(cfg.masks),
        successive: Vec::with_capacity(cfg.masks),
    };
    for _ in 0..cfg.masks {
        let r = cfg.ratios[rng.random_range(0..cfg.ratios.len())];
        let len = mask_len(n, r)?;
        let successive = rng.random_bool(cfg.p_successive);
        let mask = if successive {
            let start = rng.random_range(0..=n - len);
            (start..start + len).collect()
        } else {
            let mut idx = index::sample(rng, n, len).into_vec();
            idx.sort_unstable();
            idx
        };
        out.masks.push(mask);
        out.ratios.push(r);
        out.successive.push(successive);
    }
    Ok(out)
}

pub fn sample_context(n: usize, range: (f64, f64), targets: &[Vec<usize>], rng: &mut impl Rng) -> Result<Vec<usize>> {
    let p = rng.random_range(range.0..=range.1);
    let k = ((p * n as f64).round() as usize).clamp(1, n);
    let mut is_target = vec![false; n];
    for m in targets {
        for &j in m {
            is_target[j] = true;
        }
    }
    let mut ctx: Vec<usize> = index::sample(rng, n, k)
        .into_iter()
        .filter(|&j| !is_target[j])
        .collect();
    ctx.sort_unstable();
    if ctx.is_empty() {
        match is_target.iter().position(|t| !t) {
            Some(j) => ctx.push(j),
            None => return Err(Error::DegenerateContext(n)),
        }
    }
    Ok(ctx)
}

/// Draws a full plan, redrawing when the targets cover every position.
pub fn sample_plan(n: usize, cfg: &MaskConfig, rng: &mut impl Rng) -> Result<MaskPlan> {
    const ATTEMPTS: usize = 64;
    for _ in 0..ATTEMPTS {
        let t = sample_target_masks(n, cfg, rng)?;
        match sample_context(n, (cfg.context_min, cfg.context_max), &t.masks, rng) {
            Ok(context) => {
                return Ok(MaskPlan {
                    targets: t.masks,
                    context,
                    ratios: t.ratios,
                    successive: t.successive,
                })
            }
            Err(Error::DegenerateContext(_)) => continue,
            Err(e) => return Err(e),
        }
    }
    Err(Error::DegenerateContext(n))
}
