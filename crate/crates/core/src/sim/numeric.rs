//! Arithmetic of the SXE and VXE.
//!
//! Values are stored as FP16. A MAC tree multiplies `v` FP16 pairs exactly
//! in f32, reduces them with a balanced binary tree, and accumulates
//! successive row tiles in f32 in stream order. The result is rounded to
//! FP16 once, after the optional bias is added at writeback. VXE operations
//! compute in f32 and round each output once.

use half::f16;

pub const NORM_EPS: f32 = 1e-5;
pub const ROPE_BASE: f32 = 10000.0;

/// Balanced pairwise sum; `lanes.len()` must be a power of two.
pub fn tree_sum(lanes: &mut [f32]) -> f32 {
    let mut n = lanes.len();
    debug_assert!(n.is_power_of_two());
    while n > 1 {
        n /= 2;
        for i in 0..n {
            lanes[i] = lanes[2 * i] + lanes[2 * i + 1];
        }
    }
    lanes.first().copied().unwrap_or(0.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum VxeOp {
    /// Max-subtracted softmax of `scale * x`.
    Softmax { scale: f32 },
    LayerNorm,
    RmsNorm,
    Add,
    Mul,
    Gelu,
    Relu,
    Silu,
    /// Rotate-half positional rotation applied per head.
    Rope { position: usize, head_dim: usize },
    /// Token row plus optional positional row.
    Embed,
}

fn round(x: f32) -> f16 {
    f16::from_f32(x)
}

pub fn softmax(x: &[f16], scale: f32) -> Vec<f16> {
    let s: Vec<f32> = x.iter().map(|v| v.to_f32() * scale).collect();
    let m = s.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let e: Vec<f32> = s.iter().map(|v| (v - m).exp()).collect();
    let sum: f32 = e.iter().sum();
    e.iter().map(|v| round(v / sum)).collect()
}

/// `params` holds gamma followed by beta.
pub fn layernorm(x: &[f16], params: &[f16]) -> Vec<f16> {
    let n = x.len();
    let xs: Vec<f32> = x.iter().map(|v| v.to_f32()).collect();
    let mean = xs.iter().sum::<f32>() / n as f32;
    let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / n as f32;
    let inv = 1.0 / (var + NORM_EPS).sqrt();
    (0..n)
        .map(|i| round((xs[i] - mean) * inv * params[i].to_f32() + params[n + i].to_f32()))
        .collect()
}

pub fn rmsnorm(x: &[f16], gamma: &[f16]) -> Vec<f16> {
    let n = x.len();
    let ms = x.iter().map(|v| v.to_f32() * v.to_f32()).sum::<f32>() / n as f32;
    let inv = 1.0 / (ms + NORM_EPS).sqrt();
    (0..n).map(|i| round(x[i].to_f32() * inv * gamma[i].to_f32())).collect()
}

pub fn gelu(x: f32) -> f32 {
    const C: f32 = 0.797_884_6; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

pub fn silu(x: f32) -> f32 {
    x / (1.0 + (-x).exp())
}

pub fn rope(x: &[f16], position: usize, head_dim: usize) -> Vec<f16> {
    let half = head_dim / 2;
    let mut out = x.to_vec();
    for (hi, head) in x.chunks(head_dim).enumerate() {
        let off = hi * head_dim;
        for i in 0..half {
            let theta = position as f32 * ROPE_BASE.powf(-2.0 * i as f32 / head_dim as f32);
            let (s, c) = theta.sin_cos();
            let a = head[i].to_f32();
            let b = head[i + half].to_f32();
            out[off + i] = round(a * c - b * s);
            out[off + i + half] = round(b * c + a * s);
        }
    }
    out
}

fn zip(a: &[f16], b: &[f16], f: impl Fn(f32, f32) -> f32) -> Vec<f16> {
    a.iter().zip(b).map(|(x, y)| round(f(x.to_f32(), y.to_f32()))).collect()
}

fn map(a: &[f16], f: impl Fn(f32) -> f32) -> Vec<f16> {
    a.iter().map(|x| round(f(x.to_f32()))).collect()
}

/// Execute one VXE operation. `b` is the second operand where the op has one.
pub fn vxe_exec(op: VxeOp, a: &[f16], b: Option<&[f16]>) -> Vec<f16> {
    match op {
        VxeOp::Softmax { scale } => softmax(a, scale),
        VxeOp::LayerNorm => layernorm(a, b.expect("layernorm parameters")),
        VxeOp::RmsNorm => rmsnorm(a, b.expect("rmsnorm parameters")),
        VxeOp::Add => zip(a, b.expect("add operand"), |x, y| x + y),
        VxeOp::Mul => zip(a, b.expect("mul operand"), |x, y| x * y),
        VxeOp::Gelu => map(a, gelu),
        VxeOp::Relu => map(a, |x| x.max(0.0)),
        VxeOp::Silu => map(a, silu),
        VxeOp::Rope { position, head_dim } => rope(a, position, head_dim),
        VxeOp::Embed => match b {
            Some(p) => zip(a, p, |x, y| x + y),
            None => a.to_vec(),
        },
    }
}

/// VXE cycles for an `n`-element operation.
pub fn vxe_cycles(n: usize, v: usize, fixed: u64) -> u64 {
    n.div_ceil(v) as u64 + fixed
}
