//! Attention maps and expert selections of one input as CSV grids.
//!
//! Files written to the output directory:
//! - `tokens.txt`: one token label per line (row and column order of the grids)
//! - `layer{l}_head{h}.csv`: attention matrix of head `h`, queries by sources
//! - `layer{l}_max.csv`: elementwise maximum over all heads of the layer
//! - `layer{l}_head{h}_source.csv`, `layer{l}_head{h}_destination.csv`:
//!   SwitchHead selection weights (positions by experts, zero if unselected)
//!   of the value/key side and of the query/output side
//! - `layer{l}_router.csv`: head gates of head-gated or MoA attention

use std::fmt::Write as _;
use std::path::Path;

use switchhead_core::model::RunOpts;
use switchhead_core::numerics::{Graph, Tensor};
use switchhead_core::Error;

use crate::checkpoint;
use crate::config::ensure_out;
use crate::{CliResult, Common};

/// Comma-separated rows with round-trip float formatting.
pub fn to_csv(t: &Tensor) -> String {
    let mut s = String::new();
    for r in 0..t.rows() {
        let row: Vec<String> = t.row(r).iter().map(|v| format!("{v:?}")).collect();
        s.push_str(&row.join(","));
        s.push('\n');
    }
    s
}

pub fn parse_csv(text: &str) -> switchhead_core::Result<Vec<Vec<f64>>> {
    text.lines()
        .filter(|l| !l.is_empty())
        .map(|l| l.split(',').map(|v| v.parse().map_err(|_| Error::Parse(format!("bad number `{v}`")))).collect())
        .collect()
}

/// Elementwise maximum of equally shaped matrices.
pub fn max_over(maps: &[Tensor]) -> Tensor {
    let mut out = maps[0].clone();
    for m in &maps[1..] {
        for (o, v) in out.data_mut().iter_mut().zip(m.data()) {
            *o = o.max(*v);
        }
    }
    out
}

/// Per-layer, per-matrix attention and selection grids of one sequence.
pub struct AttentionExport {
    pub tokens: Vec<String>,
    /// `[layer][head]`.
    pub heads: Vec<Vec<Tensor>>,
    pub max: Vec<Tensor>,
    pub source: Vec<Vec<Option<Tensor>>>,
    pub destination: Vec<Vec<Option<Tensor>>>,
    pub router: Vec<Option<Tensor>>,
}

pub fn collect(model: &switchhead_core::model::Model, tokens: &[usize], labels: Vec<String>) -> switchhead_core::Result<AttentionExport> {
    if tokens.is_empty() {
        return Err(Error::Contract("the input has no tokens".into()));
    }
    let mut g = Graph::new();
    let out = model.forward(&mut g, tokens, &[tokens.len()], None, RunOpts { trace: true, ..Default::default() })?;
    let mut e = AttentionExport { tokens: labels, heads: vec![], max: vec![], source: vec![], destination: vec![], router: vec![] };
    for tr in out.traces {
        let maps = tr.attention.into_iter().next().unwrap_or_default();
        e.max.push(max_over(&maps));
        e.heads.push(maps);
        e.source.push(tr.source.iter().map(|s| s.as_ref().map(|r| r.dense())).collect());
        e.destination.push(tr.destination.iter().map(|s| s.as_ref().map(|r| r.dense())).collect());
        e.router.push(tr.router.as_ref().map(|r| r.dense()));
    }
    Ok(e)
}

pub fn export_attn(common: &Common, checkpoint_path: &Path, input: &str, head: Option<usize>) -> CliResult<()> {
    let (model, tokenizer) = checkpoint::load(checkpoint_path)?;
    let tokens = tokenizer.encode(input)?;
    let labels = tokens.iter().map(|&t| tokenizer.label(t)).collect();
    let e = collect(&model, &tokens, labels)?;
    let n_heads = e.heads.first().map_or(0, Vec::len);
    if let Some(h) = head {
        if h >= n_heads {
            return Err(Error::Contract(format!("head {h} out of range: layers have {n_heads} attention matrices")).into());
        }
    }
    ensure_out(common)?;
    let out = &common.out;
    std::fs::write(out.join("tokens.txt"), e.tokens.iter().fold(String::new(), |mut s, t| {
        writeln!(s, "{t}").unwrap();
        s
    }))?;
    let wanted = |h: usize| head.is_none_or(|w| w == h);
    for (l, maps) in e.heads.iter().enumerate() {
        for (h, m) in maps.iter().enumerate().filter(|(h, _)| wanted(*h)) {
            std::fs::write(out.join(format!("layer{l}_head{h}.csv")), to_csv(m))?;
        }
        std::fs::write(out.join(format!("layer{l}_max.csv")), to_csv(&e.max[l]))?;
        for (side, grids) in [("source", &e.source[l]), ("destination", &e.destination[l])] {
            for (h, grid) in grids.iter().enumerate().filter(|(h, _)| wanted(*h)) {
                if let Some(grid) = grid {
                    std::fs::write(out.join(format!("layer{l}_head{h}_{side}.csv")), to_csv(grid))?;
                }
            }
        }
        if let Some(r) = &e.router[l] {
            std::fs::write(out.join(format!("layer{l}_router.csv")), to_csv(r))?;
        }
    }
    println!("{} layers x {} heads over {} tokens written to {}", e.heads.len(), n_heads, tokens.len(), out.display());
    Ok(())
}
