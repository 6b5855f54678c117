//! Straightforward FP16 transformer over a parameter store.
//!
//! No tiling, memory map or ISA is involved: matrix products accumulate in
//! f32 in plain row order and every operation rounds its result to FP16
//! once. Used to cross-check the compiled pipeline.

use half::f16;

use crate::error::Result;
use crate::model::{Activation, NormKind, ParamStore, PosEncoding, Role, TensorId};
use crate::sim::numeric::{gelu, layernorm, rmsnorm, rope, silu, softmax};
use crate::sim::sampler::{sample, SamplingParams};

fn round(x: f32) -> f16 {
    f16::from_f32(x)
}

pub struct Reference<'a> {
    params: &'a ParamStore,
    /// Per layer, per position: full-width Key and Value rows.
    keys: Vec<Vec<Vec<f16>>>,
    values: Vec<Vec<Vec<f16>>>,
}

impl<'a> Reference<'a> {
    pub fn new(params: &'a ParamStore) -> Self {
        let n = params.config.num_layers;
        Reference {
            params,
            keys: vec![Vec::new(); n],
            values: vec![Vec::new(); n],
        }
    }

    fn vmm(&self, x: &[f16], id: TensorId, bias: Option<TensorId>) -> Result<Vec<f16>> {
        let w = self.params.tensor(id)?;
        let cols = w.shape.cols;
        let mut acc = vec![0f32; cols];
        for (r, xv) in x.iter().enumerate() {
            let xv = xv.to_f32();
            for (a, wv) in acc.iter_mut().zip(w.row(r)) {
                *a += xv * wv.to_f32();
            }
        }
        if let Some(b) = bias.and_then(|b| self.params.get(b)) {
            for (a, bv) in acc.iter_mut().zip(&b.data) {
                *a += bv.to_f32();
            }
        }
        Ok(acc.into_iter().map(round).collect())
    }

    fn norm(&self, x: &[f16], id: TensorId) -> Result<Vec<f16>> {
        let p = &self.params.tensor(id)?.data;
        Ok(match self.params.config.norm_kind {
            NormKind::LayerNorm => layernorm(x, p),
            NormKind::RmsNorm => rmsnorm(x, p),
        })
    }

    /// Run one token at `position` through the decoder stack and return the
    /// final hidden state.
    pub fn forward(&mut self, token: u32, position: usize) -> Result<Vec<f16>> {
        let c = self.params.config.clone();
        let (d, hd) = (c.d_model, c.head_dim());
        let emb = self.params.tensor(TensorId::global(Role::Embed))?.row(token as usize).to_vec();
        let mut x = match c.pos_encoding {
            PosEncoding::Learned => {
                let p = self.params.tensor(TensorId::global(Role::Pos))?.row(position);
                emb.iter().zip(p).map(|(a, b)| round(a.to_f32() + b.to_f32())).collect()
            }
            PosEncoding::Rotary => emb,
        };
        for layer in 0..c.num_layers {
            let t = |r| TensorId::layer(layer, r);
            let h = self.norm(&x, t(Role::Norm1))?;
            let mut q = self.vmm(&h, t(Role::Q), Some(t(Role::QBias)))?;
            let mut k = self.vmm(&h, t(Role::K), Some(t(Role::KBias)))?;
            let v = self.vmm(&h, t(Role::V), Some(t(Role::VBias)))?;
            if c.pos_encoding == PosEncoding::Rotary {
                q = rope(&q, position, hd);
                k = rope(&k, position, hd);
            }
            self.keys[layer].truncate(position);
            self.values[layer].truncate(position);
            self.keys[layer].push(k);
            self.values[layer].push(v);
            let mut ctx = vec![f16::ZERO; d];
            let scale = 1.0 / (hd as f32).sqrt();
            for head in 0..c.num_heads {
                let o = head * hd;
                let scores: Vec<f16> = self.keys[layer]
                    .iter()
                    .map(|kr| {
                        let s: f32 = (0..hd).map(|e| q[o + e].to_f32() * kr[o + e].to_f32()).sum();
                        round(s)
                    })
                    .collect();
                let p = softmax(&scores, scale);
                for e in 0..hd {
                    let s: f32 = p
                        .iter()
                        .zip(&self.values[layer])
                        .map(|(pv, vr)| pv.to_f32() * vr[o + e].to_f32())
                        .sum();
                    ctx[o + e] = round(s);
                }
            }
            let attn = self.vmm(&ctx, t(Role::O), Some(t(Role::OBias)))?;
            let x1: Vec<f16> = x.iter().zip(&attn).map(|(a, b)| round(a.to_f32() + b.to_f32())).collect();
            let h2 = self.norm(&x1, t(Role::Norm2))?;
            let f = self.vmm(&h2, t(Role::Fc1), Some(t(Role::Fc1Bias)))?;
            let f: Vec<f16> = f
                .iter()
                .map(|v| {
                    let v = v.to_f32();
                    round(match c.activation {
                        Activation::Relu => v.max(0.0),
                        Activation::Gelu => gelu(v),
                        Activation::Silu => silu(v),
                    })
                })
                .collect();
            let y = self.vmm(&f, t(Role::Fc2), Some(t(Role::Fc2Bias)))?;
            x = x1.iter().zip(&y).map(|(a, b)| round(a.to_f32() + b.to_f32())).collect();
        }
        Ok(x)
    }

    pub fn logits(&self, hidden: &[f16]) -> Result<Vec<f16>> {
        let z = self.norm(hidden, TensorId::global(Role::FinalNorm))?;
        let c = &self.params.config;
        let mut acc = vec![0f32; c.vocab_size];
        for (r, zv) in z.iter().enumerate() {
            let zv = zv.to_f32();
            for (col, a) in acc.iter_mut().enumerate() {
                *a += zv * self.params.lm_head_at(r, col).to_f32();
            }
        }
        Ok(acc.into_iter().map(round).collect())
    }
}

/// Generate up to `n_out` tokens after `input` with the reference model.
pub fn generate(params: &ParamStore, input: &[u32], n_out: usize, sampling: &SamplingParams) -> Result<Vec<u32>> {
    let mut m = Reference::new(params);
    let mut out = Vec::with_capacity(n_out);
    let Some((&last, prompt)) = input.split_last() else {
        return Ok(out);
    };
    for (pos, &tok) in prompt.iter().enumerate() {
        m.forward(tok, pos)?;
    }
    let (mut tok, mut pos) = (last, prompt.len());
    while out.len() < n_out {
        let h = m.forward(tok, pos)?;
        tok = sample(&m.logits(&h)?, sampling, pos)?;
        out.push(tok);
        pos += 1;
        if sampling.eos_token == Some(tok) {
            break;
        }
    }
    Ok(out)
}
