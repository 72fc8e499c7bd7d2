//! Relative position tables and per-query source ranges.

use std::rc::Rc;

use crate::numerics::{RowRanges, Tensor};

/// Sinusoidal encodings of the `2S` relative distances `-S..S`, row `i`
/// holding distance `i - S`. The first half of the columns are sines, the
/// second half cosines.
pub fn relative_table(sources: usize, d_model: usize) -> Tensor {
    let rows = 2 * sources;
    let n_sin = d_model.div_ceil(2);
    let n_cos = d_model / 2;
    let freqs: Vec<f64> = (0..n_sin).map(|c| inv_freq(c, d_model)).collect();
    let mut data = Vec::with_capacity(rows * d_model);
    for i in 0..rows {
        let dist = i as f64 - sources as f64;
        data.extend(freqs.iter().map(|f| (dist * f).sin()));
        data.extend(freqs[..n_cos].iter().map(|f| (dist * f).cos()));
    }
    Tensor::from_raw(vec![rows, d_model], data)
}

fn inv_freq(c: usize, d_model: usize) -> f64 {
    10000f64.powf(-((2 * c) as f64) / d_model as f64)
}

/// Row offset into [`relative_table`] such that `base + t - j` indexes the
/// distance between query `t` (preceded by `cached` positions) and source `j`.
pub fn relative_base(cached: usize, sources: usize) -> usize {
    cached + sources
}

/// Restricts every query to sources starting at `(p / chunk) * chunk - memory`,
/// where `p` is its position among the sources. Applied to a whole sequence
/// it reproduces the sources seen by chunked processing with a cache.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Window {
    pub chunk: usize,
    pub memory: usize,
}

/// Allowed `[lo, hi)` source range of each of `queries` rows that follow
/// `cached` positions.
pub fn source_ranges(queries: usize, cached: usize, causal: bool, window: Option<Window>) -> RowRanges {
    let sources = cached + queries;
    Rc::new(
        (0..queries)
            .map(|t| {
                let p = cached + t;
                let hi = if causal { p + 1 } else { sources };
                let lo = window.map_or(0, |w| ((p / w.chunk) * w.chunk).saturating_sub(w.memory));
                (lo, hi)
            })
            .collect(),
    )
}
