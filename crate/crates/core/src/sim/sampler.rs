//! Token selection from logits: temperature, top-k and top-p.
//!
//! Probabilities are computed in f64 so a 50k-entry softmax does not
//! underflow. The random draw is seeded from `(seed, position)`, which keeps
//! the chosen token independent of execution order and device.

use half::f16;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingParams {
    /// `0` selects the arg-max.
    pub temperature: f32,
    pub top_k: usize,
    pub top_p: f32,
    pub seed: u64,
    /// Token that sets the end-of-sequence flag.
    pub eos_token: Option<u32>,
}

impl Default for SamplingParams {
    fn default() -> Self {
        Self::greedy()
    }
}

impl SamplingParams {
    pub fn greedy() -> Self {
        SamplingParams {
            temperature: 0.0,
            top_k: usize::MAX,
            top_p: 1.0,
            seed: 0,
            eos_token: None,
        }
    }

    /// Sampling from the full distribution at temperature 1.
    pub fn full(seed: u64) -> Self {
        SamplingParams {
            temperature: 1.0,
            seed,
            ..Self::greedy()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.top_k < 1 {
            return Err(Error::InvalidSamplingParams(format!("top_k {} < 1", self.top_k)));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(Error::InvalidSamplingParams(format!("top_p {} outside (0, 1]", self.top_p)));
        }
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return Err(Error::InvalidSamplingParams(format!("temperature {} < 0", self.temperature)));
        }
        Ok(())
    }
}

fn key(x: f16) -> f64 {
    let v = x.to_f64();
    if v.is_nan() {
        f64::NEG_INFINITY
    } else {
        v
    }
}

/// Index of the largest logit; ties go to the lower id.
pub fn argmax(logits: &[f16]) -> u32 {
    let mut best = 0;
    for (i, &x) in logits.iter().enumerate() {
        if key(x) > key(logits[best]) {
            best = i;
        }
    }
    best as u32
}

/// Survivors after top-k / top-p truncation with their renormalised
/// probabilities, in descending order.
pub fn distribution(logits: &[f16], params: &SamplingParams) -> Result<Vec<(u32, f64)>> {
    params.validate()?;
    let mut order: Vec<u32> = (0..logits.len() as u32).collect();
    order.sort_by(|&a, &b| {
        key(logits[b as usize])
            .total_cmp(&key(logits[a as usize]))
            .then(a.cmp(&b))
    });
    order.truncate(params.top_k.min(logits.len()));
    let t = params.temperature as f64;
    let m = key(logits[order[0] as usize]);
    let w: Vec<f64> = order
        .iter()
        .map(|&i| ((key(logits[i as usize]) - m) / t).exp())
        .collect();
    let total: f64 = w.iter().sum();
    let mut cum = 0.0;
    let mut keep = order.len();
    for (n, x) in w.iter().enumerate() {
        cum += x / total;
        if cum >= params.top_p as f64 {
            keep = n + 1;
            break;
        }
    }
    let kept: f64 = w[..keep].iter().sum();
    Ok(order[..keep].iter().zip(&w).map(|(&i, &x)| (i, x / kept)).collect())
}

/// Choose a token for `position`.
pub fn sample(logits: &[f16], params: &SamplingParams, position: usize) -> Result<u32> {
    params.validate()?;
    if logits.is_empty() {
        return Err(Error::InvalidSamplingParams("empty logits".into()));
    }
    if params.temperature == 0.0 || params.top_k == 1 {
        return Ok(argmax(logits));
    }
    let dist = distribution(logits, params)?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    rng.set_stream(position as u64);
    let u: f64 = rng.gen();
    let mut cum = 0.0;
    for &(tok, p) in &dist {
        cum += p;
        if u < cum {
            return Ok(tok);
        }
    }
    Ok(dist.last().map(|d| d.0).unwrap_or(0))
}

/// Bitonic sort cost in VXE cycles for `n` keys on `v` lanes.
pub fn sort_cycles(n: usize, v: usize) -> u64 {
    if n <= 1 {
        return 0;
    }
    let k = (n as f64).log2().ceil() as u64;
    let padded = 1u64 << k;
    k * (k + 1) / 2 * padded.div_ceil(v as u64)
}
