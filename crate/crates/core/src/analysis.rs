//! Closed-form parameter and FLOP counts for a [`ModelSpec`].
//!
//! FLOP convention: 2 FLOPs per multiply-accumulate. Counted: patch
//! embedding, fused qkv projection, `QKᵀ`, attention·V, attention output
//! projection, and every FFN / token-wise matmul. Not counted: layer norm,
//! softmax, GELU, bias adds and the regression head. Attention products are
//! counted at full width `D` summed over heads.

use serde::Serialize;

use crate::model::{Architecture, ModelSpec};

pub const FLOP_CONVENTION: &str = "2 FLOPs per multiply-accumulate; counts patch embedding, qkv, QK^T, attention*V, \
     attention projection, FFN and token-wise matmuls; excludes layer norm, softmax, GELU, bias adds and the MLP head";

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct CostItem {
    pub component: String,
    pub params: u64,
    pub flops: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct CostReport {
    pub model: String,
    pub params: u64,
    /// Per single forward sample.
    pub flops: u64,
    pub breakdown: Vec<CostItem>,
    pub convention: &'static str,
}

impl CostReport {
    /// FLOPs in G, rounded to two decimals.
    pub fn gflops_rounded(&self) -> f64 {
        round_to_hundredths(self.flops, 1e7)
    }

    /// Parameters in M, rounded to two decimals.
    pub fn mparams_rounded(&self) -> f64 {
        round_to_hundredths(self.params, 1e4)
    }

    /// e.g. `"1.26 G / 1.46 M"`.
    pub fn summary(&self) -> String {
        format!("{:.2} G / {:.2} M", self.gflops_rounded(), self.mparams_rounded())
    }
}

fn round_to_hundredths(count: u64, unit: f64) -> f64 {
    (count as f64 / unit).round() / 100.0
}

fn u(v: usize) -> u64 {
    v as u64
}

/// Parameters of one pre-LN block of width `d` with FFN hidden `hidden`.
pub fn block_params(d: usize, hidden: usize) -> u64 {
    let (d, h) = (u(d), u(hidden));
    let norms = 2 * (2 * d);
    let qkv = d * 3 * d + 3 * d;
    let proj = d * d + d;
    let ffn = d * h + h + h * d + d;
    norms + qkv + proj + ffn
}

pub fn attention_params(d: usize) -> u64 {
    let d = u(d);
    2 * d + d * 3 * d + 3 * d + d * d + d
}

pub fn ffn_params(d: usize, hidden: usize) -> u64 {
    let (d, h) = (u(d), u(hidden));
    2 * d + d * h + h + h * d + d
}

/// qkv + `QKᵀ` + attention·V + output projection over `t` tokens.
pub fn attention_flops(t: usize, d: usize) -> u64 {
    let (t, d) = (u(t), u(d));
    2 * t * d * 3 * d + 2 * t * t * d + 2 * t * t * d + 2 * t * d * d
}

pub fn ffn_flops(t: usize, d: usize, hidden: usize) -> u64 {
    let (t, d, h) = (u(t), u(d), u(hidden));
    2 * t * d * h + 2 * t * h * d
}

/// Matmul FLOPs of the head, which the reported totals leave out.
pub fn head_flops(spec: &ModelSpec) -> u64 {
    let k = u(spec.head_input());
    match spec.head_hidden {
        0 => 2 * k,
        h => 2 * k * u(h) + 2 * u(h),
    }
}

pub fn count_params(spec: &ModelSpec) -> u64 {
    cost_report(spec).params
}

pub fn count_flops(spec: &ModelSpec) -> u64 {
    cost_report(spec).flops
}

pub fn cost_report(spec: &ModelSpec) -> CostReport {
    let mut items = Vec::new();
    let mut push = |component: String, params: u64, flops: u64| {
        items.push(CostItem {
            component,
            params,
            flops,
        })
    };

    for (k, e) in spec.encoders.iter().enumerate() {
        let (n, d, pd) = (e.patch_count(), e.embed_dim, e.patch_dim());
        let t = e.seq_len();
        let hidden = e.ffn_ratio * d;
        push(
            format!("encoder{k}.patch_embed"),
            u(pd * d + d),
            2 * u(n) * u(pd) * u(d),
        );
        push(format!("encoder{k}.cls_pos_embed"), u(t * d + d), 0);
        for i in 0..e.depth {
            push(
                format!("encoder{k}.blocks.{i}.attention"),
                attention_params(d),
                attention_flops(t, d),
            );
            push(
                format!("encoder{k}.blocks.{i}.ffn"),
                ffn_params(d, hidden),
                ffn_flops(t, d, hidden),
            );
        }
    }

    let d = spec.embed_dim();
    let fused_tokens: usize = spec.encoders.iter().map(|e| e.seq_len()).sum();
    match spec.architecture {
        Architecture::SinVit => {}
        Architecture::MulVitTf => {
            let hidden = spec.fusion_ffn_ratio * d;
            for i in 0..spec.fusion_depth {
                push(
                    format!("fusion.blocks.{i}.attention"),
                    attention_params(d),
                    attention_flops(fused_tokens, d),
                );
                push(
                    format!("fusion.blocks.{i}.ffn"),
                    ffn_params(d, hidden),
                    ffn_flops(fused_tokens, d, hidden),
                );
            }
        }
        Architecture::MulVitTwdnn => {
            push("twdnn.segments".into(), u(spec.encoders.len() * d), 0);
            let h = spec.twdnn_hidden;
            for i in 0..spec.twdnn_blocks {
                let params = u(2 * d) + u(d * h + h) + u(h * h + h) + u(h * d + d);
                let flops = 2 * u(fused_tokens) * (u(d * h) + u(h * h) + u(h * d));
                push(format!("twdnn.blocks.{i}"), params, flops);
            }
        }
    }

    let k = spec.head_input();
    let head_params = match spec.head_hidden {
        0 => u(k + 1),
        h => u(k * h + h + h + 1),
    };
    push("head".into(), head_params, 0);

    CostReport {
        model: spec.name.clone(),
        params: items.iter().map(|i| i.params).sum(),
        flops: items.iter().map(|i| i.flops).sum(),
        breakdown: items,
        convention: FLOP_CONVENTION,
    }
}
