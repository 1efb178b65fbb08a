//! Analytic transformer inference cost.

use std::fmt;
use std::str::FromStr;

use crate::error::{bail, MsfError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CostModelParams {
    pub depth: u64,
    pub width: u64,
    /// Per-token, per-layer FLOPs of the projections and MLP.
    pub a: u64,
    /// Per-token-pair, per-layer FLOPs of attention scores and value mixing.
    pub b: u64,
}

impl CostModelParams {
    /// `a = 24·d²`, `b = 4·d`.
    pub fn transformer(depth: u64, width: u64) -> Result<Self> {
        if depth == 0 || width == 0 {
            bail!(InvalidArgument, "depth and width must be positive");
        }
        Ok(Self {
            depth,
            width,
            a: 24 * width * width,
            b: 4 * width,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CostStage {
    pub tokens: u64,
    pub steps: u64,
    /// Guidance doubles the evaluations per step.
    pub cfg: bool,
}

impl FromStr for CostStage {
    type Err = MsfError;

    /// `tokens:steps` or `tokens:steps:cfg`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.trim().split(':').map(str::trim).collect();
        let num = |p: &str| {
            p.parse::<u64>()
                .map_err(|_| MsfError::Config(format!("bad number {p:?} in cost stage {s:?}")))
        };
        match parts.as_slice() {
            [t, n] => Ok(Self { tokens: num(t)?, steps: num(n)?, cfg: false }),
            [t, n, "cfg"] => Ok(Self { tokens: num(t)?, steps: num(n)?, cfg: true }),
            _ => bail!(Config, "cost stage {s:?} is not tokens:steps[:cfg]"),
        }
    }
}

impl fmt::Display for CostStage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.tokens, self.steps)?;
        if self.cfg {
            f.write_str(":cfg")?;
        }
        Ok(())
    }
}

pub fn parse_stages(s: &str) -> Result<Vec<CostStage>> {
    s.split(',').map(str::parse).collect()
}

/// `Σ s·(2 if cfg else 1)·L·(a·T + b·T²)`, exact in integers.
pub fn flops_cost(cost: &CostModelParams, stages: &[CostStage]) -> Result<u128> {
    let mut total = 0u128;
    for st in stages {
        if st.tokens == 0 || st.steps == 0 {
            bail!(InvalidArgument, "stage {st} needs at least one token and one step");
        }
        let t = st.tokens as u128;
        let per_layer = cost.a as u128 * t + cost.b as u128 * t * t;
        let evals = st.steps as u128 * if st.cfg { 2 } else { 1 };
        total += evals * cost.depth as u128 * per_layer;
    }
    Ok(total)
}

/// Ratio of the cost of `baseline` to that of `stages`.
pub fn speedup(cost: &CostModelParams, baseline: &[CostStage], stages: &[CostStage]) -> Result<f64> {
    Ok(flops_cost(cost, baseline)? as f64 / flops_cost(cost, stages)? as f64)
}

/// Tokens for a square image: `(size / codec_ratio / patch)²`.
pub fn token_count(image_size: u64, codec_ratio: u64, patch: u64) -> Result<u64> {
    if codec_ratio == 0 || patch == 0 || image_size % (codec_ratio * patch) != 0 {
        bail!(
            InvalidArgument,
            "image size {image_size} is not divisible by codec ratio {codec_ratio} times patch {patch}"
        );
    }
    let side = image_size / codec_ratio / patch;
    Ok(side * side)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn st(tokens: u64, steps: u64, cfg: bool) -> CostStage {
        CostStage { tokens, steps, cfg }
    }

    #[test]
    fn unit_stage_costs_l_times_a_plus_b() {
        let c = CostModelParams::transformer(3, 8).unwrap();
        assert_eq!(flops_cost(&c, &[st(1, 1, false)]).unwrap(), 3 * (c.a + c.b) as u128);
    }

    #[test]
    fn linear_in_steps_and_depth() {
        let c = CostModelParams::transformer(4, 16).unwrap();
        let one = flops_cost(&c, &[st(37, 1, true)]).unwrap();
        assert_eq!(flops_cost(&c, &[st(37, 9, true)]).unwrap(), 9 * one);
        let deep = CostModelParams::transformer(12, 16).unwrap();
        assert_eq!(flops_cost(&deep, &[st(37, 1, true)]).unwrap(), 3 * one);
        assert_eq!(flops_cost(&c, &[st(37, 1, false)]).unwrap() * 2, one);
    }

    #[test]
    fn second_difference_in_tokens_is_2bl() {
        let c = CostModelParams::transformer(5, 32).unwrap();
        let f = |t| flops_cost(&c, &[st(t, 1, false)]).unwrap() as i128;
        for t in [2u64, 10, 100] {
            assert_eq!(f(t + 1) - 2 * f(t) + f(t - 1), 2 * (c.b * c.depth) as i128);
        }
    }

    #[test]
    fn dit_xl_scale_token_count() {
        assert_eq!(token_count(512, 8, 4).unwrap(), 256);
        assert_eq!(token_count(512, 8, 2).unwrap(), 1024);
        assert_eq!(token_count(192, 8, 2).unwrap(), 144);
        assert!(token_count(100, 8, 2).is_err());
    }

    #[test]
    fn ratio_depends_on_width() {
        let base = [st(1024, 100, true)];
        let ms = [st(144, 100, true), st(1024, 20, false)];
        let a = speedup(&CostModelParams::transformer(28, 1152).unwrap(), &base, &ms).unwrap();
        let b = speedup(&CostModelParams::transformer(28, 64).unwrap(), &base, &ms).unwrap();
        assert!((a - b).abs() > 1e-3);
    }

    #[test]
    fn stage_parsing() {
        assert_eq!(parse_stages("144:100:cfg, 1024:20").unwrap(), vec![st(144, 100, true), st(1024, 20, false)]);
        assert!(parse_stages("144").is_err());
        assert!(parse_stages("144:1:guided").is_err());
        assert!(flops_cost(&CostModelParams::transformer(1, 1).unwrap(), &[st(0, 1, false)]).is_err());
    }
}
