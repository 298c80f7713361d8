//! Closed-form parameter and multiply-accumulate counts.
//!
//! Counts are for one image. Normalisation, activation, pooling and bias
//! additions are free; only products are counted.

use serde::Serialize;

use crate::config::ModelConfig;
use crate::encoder::AttentionSpec;
use crate::error::Result;

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct CostEntry {
    pub module: String,
    pub layer: String,
    pub params: usize,
    pub macs: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct CostReport {
    pub params_total: usize,
    pub params_by_module: Vec<(String, usize)>,
    pub macs_total: usize,
    pub flops_total: usize,
    pub breakdown: Vec<CostEntry>,
}

struct Ledger {
    module: String,
    entries: Vec<CostEntry>,
}

impl Ledger {
    fn add(&mut self, layer: impl Into<String>, params: usize, macs: usize) {
        self.entries.push(CostEntry {
            module: self.module.clone(),
            layer: layer.into(),
            params,
            macs,
        });
    }

    fn module(&mut self, name: impl Into<String>) {
        self.module = name.into();
    }
}

/// Score and value-mix products of attention over `n` patch tokens.
pub fn attention_core_macs(spec: &AttentionSpec, n: usize, d: usize) -> usize {
    let m = spec.block_size(n);
    let blocks = n / m;
    if spec.append_cls {
        2 * blocks * (m + 1) * (m + 1) * d
    } else {
        2 * blocks * m * m * d + 2 * (n + 1) * d
    }
}

pub fn count_costs(cfg: &ModelConfig) -> Result<CostReport> {
    let geo = cfg.geometry()?;
    let mut l = Ledger {
        module: "tokenizer".into(),
        entries: Vec::new(),
    };

    let tok = &geo.tokenizer;
    for stage in &tok.stages {
        for c in &stage.convs {
            l.add(c.name.clone(), c.params(), c.macs());
        }
        if let Some(ch) = stage.bn {
            l.add(format!("bn_{}", stage.name), 2 * ch, 0);
        }
    }
    let n = tok.patches();
    let d2 = cfg.stage_dims[0];
    l.add("proj", cfg.d0 * d2 + d2, n * cfg.d0 * d2);
    l.add("pos", n * d2, 0);
    l.add("cls", d2, 0);

    for s in 0..2 {
        let g = geo.stages[s];
        let (n, d, k) = (g.patches(), g.dim, cfg.ffn_kernel);
        let spec = AttentionSpec {
            heads: cfg.heads(s),
            partition: cfg.partition(s),
            append_cls: cfg.append_cls,
        };
        for i in 0..cfg.depths[s] {
            l.module(format!("stage{}", s + 2));
            let p = format!("{i}.");
            l.add(p.clone() + "ln1", 2 * d, 0);
            l.add(p.clone() + "attn.qkv", 3 * d * d, (n + 1) * d * 3 * d);
            l.add(p.clone() + "attn.core", 0, attention_core_macs(&spec, n, d));
            l.add(p.clone() + "attn.out", d * d + d, (n + 1) * d * d);
            l.add(p.clone() + "ln2", 2 * d, 0);
            l.add(p.clone() + "ffn.dw_row", k * d, k * d * n);
            l.add(p.clone() + "ffn.dw_col", k * d, k * d * n);
            l.add(p + "ffn.bn", 2 * d, 0);
        }
        if s == 0 {
            l.module("merge");
            let d3 = cfg.stage_dims[1];
            let out_tokens = geo.stages[1].patches() + 1;
            l.add("linear", d * d3 + d3, out_tokens * d * d3);
        }
    }

    l.module("head");
    let (d3, c) = (cfg.stage_dims[1], cfg.num_classes);
    l.add("ln", 2 * d3, 0);
    l.add("linear", d3 * c + c, d3 * c);

    let mut params_by_module: Vec<(String, usize)> = Vec::new();
    for e in &l.entries {
        match params_by_module.last_mut() {
            Some((m, p)) if *m == e.module => *p += e.params,
            _ => params_by_module.push((e.module.clone(), e.params)),
        }
    }
    let params_total = l.entries.iter().map(|e| e.params).sum();
    let macs_total: usize = l.entries.iter().map(|e| e.macs).sum();
    Ok(CostReport {
        params_total,
        params_by_module,
        macs_total,
        flops_total: 2 * macs_total,
        breakdown: l.entries,
    })
}

impl CostReport {
    /// Aligned human-readable table.
    pub fn table(&self) -> String {
        let w = self
            .breakdown
            .iter()
            .map(|e| e.module.len() + e.layer.len() + 1)
            .max()
            .unwrap_or(5)
            .max(5);
        let mut s = format!("{:<w$}  {:>12}  {:>14}\n", "layer", "params", "MACs");
        for e in &self.breakdown {
            let name = format!("{}.{}", e.module, e.layer);
            s += &format!("{name:<w$}  {:>12}  {:>14}\n", e.params, e.macs);
        }
        s += &format!("{:-<1$}\n", "", w + 30);
        for (m, p) in &self.params_by_module {
            s += &format!("{m:<w$}  {p:>12}\n");
        }
        s += &format!("{:<w$}  {:>12}  {:>14}\n", "total", self.params_total, self.macs_total);
        s += &format!("{:<w$}  {:>12}  {:>14}\n", "FLOPs (2*MACs)", "", self.flops_total);
        s
    }
}
