use crate::error::{ensure, Result};

/// Indices of the `k` largest values, ties broken towards the lower index,
/// returned in ascending index order.
pub fn argtopk(logits: &[f64], k: usize) -> Result<Vec<usize>> {
    ensure!(
        k >= 1 && k <= logits.len(),
        Contract,
        "argtopk needs 1 <= k <= {}, got k = {}",
        logits.len(),
        k
    );
    let mut order: Vec<usize> = (0..logits.len()).collect();
    // Stable sort keeps lower indices first among equal values.
    order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]));
    let mut picked = order[..k].to_vec();
    picked.sort_unstable();
    Ok(picked)
}

/// Per-row expert assignment: `k` ascending expert indices for each of
/// `rows` tokens.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Route {
    rows: usize,
    k: usize,
    n_experts: usize,
    indices: Vec<usize>,
}

impl Route {
    /// Top-`k` routing of every row of a `rows x n_experts` logit matrix.
    pub fn from_logits(logits: &[f64], rows: usize, n_experts: usize, k: usize) -> Result<Self> {
        ensure!(
            logits.len() == rows * n_experts,
            Dimension,
            "routing logits have {} values, expected {}x{}",
            logits.len(),
            rows,
            n_experts
        );
        let mut indices = Vec::with_capacity(rows * k);
        for r in 0..rows {
            indices.extend(argtopk(&logits[r * n_experts..(r + 1) * n_experts], k)?);
        }
        Ok(Self { rows, k, n_experts, indices })
    }

    /// Explicit routing table; validates ranges.
    pub fn from_indices(rows: usize, k: usize, n_experts: usize, indices: Vec<usize>) -> Result<Self> {
        ensure!(
            indices.len() == rows * k,
            Dimension,
            "route has {} indices, expected {}x{}",
            indices.len(),
            rows,
            k
        );
        if let Some(bad) = indices.iter().find(|&&e| e >= n_experts) {
            return Err(crate::error::Error::Contract(format!(
                "expert index {} out of range for {} experts",
                bad, n_experts
            )));
        }
        Ok(Self { rows, k, n_experts, indices })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn n_experts(&self) -> usize {
        self.n_experts
    }

    /// All chosen indices, row-major `[rows x k]`.
    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn row(&self, r: usize) -> &[usize] {
        &self.indices[r * self.k..(r + 1) * self.k]
    }

    pub fn contains(&self, r: usize, e: usize) -> bool {
        self.row(r).contains(&e)
    }

    /// Single-slot route made of the `slot`-th selection of every row.
    pub fn slot(&self, slot: usize) -> Route {
        assert!(slot < self.k);
        Route {
            rows: self.rows,
            k: 1,
            n_experts: self.n_experts,
            indices: (0..self.rows).map(|r| self.row(r)[slot]).collect(),
        }
    }

    /// Rows `[start, start+len)`.
    pub fn slice_rows(&self, start: usize, len: usize) -> Route {
        Route {
            rows: len,
            k: self.k,
            n_experts: self.n_experts,
            indices: self.indices[start * self.k..(start + len) * self.k].to_vec(),
        }
    }

    /// For every expert, the `(row, slot)` pairs routed to it.
    pub fn by_expert(&self) -> Vec<Vec<(usize, usize)>> {
        let mut groups = vec![Vec::new(); self.n_experts];
        for r in 0..self.rows {
            for (s, &e) in self.row(r).iter().enumerate() {
                groups[e].push((r, s));
            }
        }
        groups
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn picks_largest_sorted() {
        assert_eq!(argtopk(&[0.1, 0.9, 0.5], 2).unwrap(), vec![1, 2]);
    }

    #[test]
    fn ties_go_to_lowest_index() {
        assert_eq!(argtopk(&[0.5, 0.5, 0.1], 1).unwrap(), vec![0]);
        assert_eq!(argtopk(&[1.0, 1.0, 1.0, 1.0], 2).unwrap(), vec![0, 1]);
    }

    #[test]
    fn invalid_k_is_rejected() {
        assert!(argtopk(&[1.0, 2.0], 0).is_err());
        assert!(argtopk(&[1.0, 2.0], 3).is_err());
    }

    #[test]
    fn route_index_out_of_range() {
        assert!(Route::from_indices(1, 1, 3, vec![3]).is_err());
    }
}
