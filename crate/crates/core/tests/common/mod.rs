//! Test-only oracles, written from the model definition without reusing any
//! simulator code.

#![allow(dead_code)]

pub mod props;

use half::f16;
use lpu_core::model::{Activation, NormKind, ParamStore, PosEncoding, Role, TensorId};

/// A plain transformer computed in f64. With `fp16` set, every operation's
/// output is rounded to FP16, which mimics the storage precision of the
/// hardware without copying its accumulation order.
pub struct Oracle<'a> {
    p: &'a ParamStore,
    fp16: bool,
    keys: Vec<Vec<Vec<f64>>>,
    values: Vec<Vec<Vec<f64>>>,
}

fn get(p: &ParamStore, id: TensorId) -> Option<Vec<f64>> {
    p.get(id).map(|t| t.data.iter().map(|x| x.to_f64()).collect())
}

impl<'a> Oracle<'a> {
    pub fn new(p: &'a ParamStore, fp16: bool) -> Self {
        let n = p.config.num_layers;
        Oracle {
            p,
            fp16,
            keys: vec![Vec::new(); n],
            values: vec![Vec::new(); n],
        }
    }

    fn r(&self, mut x: Vec<f64>) -> Vec<f64> {
        if self.fp16 {
            for v in x.iter_mut() {
                *v = f16::from_f64(*v).to_f64();
            }
        }
        x
    }

    fn linear(&self, x: &[f64], w: TensorId, b: TensorId) -> Vec<f64> {
        let t = self.p.get(w).expect("weight");
        let cols = t.shape.cols;
        let mut y = get(self.p, b).unwrap_or_else(|| vec![0.0; cols]);
        for (i, xi) in x.iter().enumerate() {
            for (j, yj) in y.iter_mut().enumerate() {
                *yj += xi * t.at(i, j).to_f64();
            }
        }
        self.r(y)
    }

    fn norm(&self, x: &[f64], id: TensorId) -> Vec<f64> {
        let g = get(self.p, id).expect("norm params");
        let n = x.len() as f64;
        let y: Vec<f64> = match self.p.config.norm_kind {
            NormKind::LayerNorm => {
                let mean = x.iter().sum::<f64>() / n;
                let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
                let s = (var + 1e-5).sqrt();
                x.iter().enumerate().map(|(i, v)| (v - mean) / s * g[i] + g[x.len() + i]).collect()
            }
            NormKind::RmsNorm => {
                let s = (x.iter().map(|v| v * v).sum::<f64>() / n + 1e-5).sqrt();
                x.iter().enumerate().map(|(i, v)| v / s * g[i]).collect()
            }
        };
        self.r(y)
    }

    fn rotate(&self, x: &mut [f64], pos: usize, hd: usize) {
        for head in x.chunks_mut(hd) {
            let half = hd / 2;
            for i in 0..half {
                let theta = pos as f64 / 10000f64.powf(2.0 * i as f64 / hd as f64);
                let (a, b) = (head[i], head[i + half]);
                head[i] = a * theta.cos() - b * theta.sin();
                head[i + half] = b * theta.cos() + a * theta.sin();
            }
        }
    }

    /// Feed `token` at `pos`; returns the logits.
    pub fn step(&mut self, token: u32, pos: usize) -> Vec<f64> {
        let c = self.p.config.clone();
        let (d, hd) = (c.d_model, c.head_dim());
        let e = self.p.get(TensorId::global(Role::Embed)).unwrap();
        let mut x: Vec<f64> = e.row(token as usize).iter().map(|v| v.to_f64()).collect();
        if c.pos_encoding == PosEncoding::Learned {
            let pt = self.p.get(TensorId::global(Role::Pos)).unwrap();
            for (xi, pi) in x.iter_mut().zip(pt.row(pos)) {
                *xi += pi.to_f64();
            }
            x = self.r(x);
        }
        for l in 0..c.num_layers {
            let t = |r| TensorId::layer(l, r);
            let h = self.norm(&x, t(Role::Norm1));
            let mut q = self.linear(&h, t(Role::Q), t(Role::QBias));
            let mut k = self.linear(&h, t(Role::K), t(Role::KBias));
            let v = self.linear(&h, t(Role::V), t(Role::VBias));
            if c.pos_encoding == PosEncoding::Rotary {
                self.rotate(&mut q, pos, hd);
                self.rotate(&mut k, pos, hd);
                q = self.r(q);
                k = self.r(k);
            }
            self.keys[l].truncate(pos);
            self.values[l].truncate(pos);
            self.keys[l].push(k);
            self.values[l].push(v);
            let mut ctx = vec![0.0; d];
            for head in 0..c.num_heads {
                let o = head * hd;
                let s: Vec<f64> = self.keys[l]
                    .iter()
                    .map(|kr| (0..hd).map(|i| q[o + i] * kr[o + i]).sum())
                    .collect();
                let s: Vec<f64> = self.r(s).iter().map(|v| v / (hd as f64).sqrt()).collect();
                let m = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = s.iter().map(|v| (v - m).exp()).sum();
                let pr = self.r(s.iter().map(|v| (v - m).exp() / z).collect());
                for i in 0..hd {
                    ctx[o + i] = pr.iter().zip(&self.values[l]).map(|(a, vr)| a * vr[o + i]).sum();
                }
            }
            let ctx = self.r(ctx);
            let a = self.linear(&ctx, t(Role::O), t(Role::OBias));
            let x1 = self.r(x.iter().zip(&a).map(|(p, q)| p + q).collect());
            let h2 = self.norm(&x1, t(Role::Norm2));
            let f = self.linear(&h2, t(Role::Fc1), t(Role::Fc1Bias));
            let f = self.r(
                f.iter()
                    .map(|&u| match c.activation {
                        Activation::Relu => u.max(0.0),
                        Activation::Gelu => {
                            0.5 * u * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (u + 0.044715 * u.powi(3))).tanh())
                        }
                        Activation::Silu => u / (1.0 + (-u).exp()),
                    })
                    .collect(),
            );
            let y = self.linear(&f, t(Role::Fc2), t(Role::Fc2Bias));
            x = self.r(x1.iter().zip(&y).map(|(p, q)| p + q).collect());
        }
        let z = self.norm(&x, TensorId::global(Role::FinalNorm));
        let logits = (0..c.vocab_size)
            .map(|j| z.iter().enumerate().map(|(i, zi)| zi * self.p.lm_head_at(i, j).to_f64()).sum())
            .collect();
        self.r(logits)
    }
}

pub fn argmax(x: &[f64]) -> u32 {
    let mut best = 0;
    for (i, v) in x.iter().enumerate() {
        if *v > x[best] {
            best = i;
        }
    }
    best as u32
}

/// Greedy generation with the oracle.
pub fn greedy(p: &ParamStore, input: &[u32], n_out: usize, fp16: bool) -> Vec<u32> {
    let mut o = Oracle::new(p, fp16);
    let (last, prompt) = input.split_last().expect("prompt");
    for (pos, &t) in prompt.iter().enumerate() {
        o.step(t, pos);
    }
    let (mut tok, mut pos) = (*last, prompt.len());
    let mut out = Vec::new();
    for _ in 0..n_out {
        tok = argmax(&o.step(tok, pos));
        out.push(tok);
        pos += 1;
    }
    out
}

/// `||a - b|| / ||b||`.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    num / den.max(f64::MIN_POSITIVE)
}
