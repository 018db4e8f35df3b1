//! Model structures (which library terms enter which equation) and the
//! strategies that derive them from a causation-entropy matrix.

use crate::causal::CausationMatrix;
use crate::error::{Error, Result};
use crate::registry::{expect_params, Registry};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelStructure {
    n: usize,
    m: usize,
    /// Row-major `n x M`; flat index `i * M + m`.
    mask: Vec<bool>,
    /// Strategy and thresholds that produced the mask.
    pub record: String,
}

impl ModelStructure {
    pub fn new(n: usize, m: usize, mask: Vec<bool>, record: impl Into<String>) -> Self {
        assert_eq!(mask.len(), n * m);
        Self {
            n,
            m,
            mask,
            record: record.into(),
        }
    }

    pub fn full(n: usize, m: usize) -> Self {
        Self::new(n, m, vec![true; n * m], "all terms")
    }

    pub fn with_record(mut self, record: impl Into<String>) -> Self {
        self.record = record.into();
        self
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn get(&self, i: usize, m: usize) -> bool {
        self.mask[i * self.m + m]
    }

    pub fn set(&mut self, i: usize, m: usize, on: bool) {
        self.mask[i * self.m + m] = on;
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn count(&self) -> usize {
        self.mask.iter().filter(|b| **b).count()
    }

    pub fn row_count(&self, i: usize) -> usize {
        self.row_terms(i).len()
    }

    /// Selected library indices of equation `i`.
    pub fn row_terms(&self, i: usize) -> Vec<usize> {
        (0..self.m).filter(|&m| self.get(i, m)).collect()
    }

    pub fn is_subset_of(&self, other: &ModelStructure) -> bool {
        self.n == other.n && self.m == other.m && self.mask.iter().zip(&other.mask).all(|(a, b)| !a || *b)
    }

    /// Number of entries selected in both structures.
    pub fn overlap(&self, other: &ModelStructure) -> usize {
        self.mask.iter().zip(&other.mask).filter(|(a, b)| **a && **b).count()
    }
}

/// `ceil((1 - f) * total)`, guarded against roundoff just above an integer.
pub fn kept_count(sparsity_fraction: f64, total: usize) -> usize {
    let raw = (1.0 - sparsity_fraction) * total as f64;
    ((raw - 1e-9).ceil().max(0.0) as usize).min(total)
}

/// Indices sorted by descending value; equal values keep ascending index order.
pub fn rank_descending(values: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx
}

pub trait SelectionStrategy: Send + Sync {
    fn name(&self) -> &'static str;
    fn select(&self, cem: &CausationMatrix) -> ModelStructure;
}

/// Keep entries strictly above `theta`.
pub struct GlobalThreshold(pub f64);

impl SelectionStrategy for GlobalThreshold {
    fn name(&self) -> &'static str {
        "global_threshold"
    }
    fn select(&self, cem: &CausationMatrix) -> ModelStructure {
        let flat = cem.flat();
        let mask = flat.iter().map(|v| *v > self.0).collect();
        ModelStructure::new(cem.n(), cem.m(), mask, format!("global_threshold theta={}", self.0))
    }
}

/// Keep the top `(1 - f) n M` entries overall.
pub struct GlobalSparsity(pub f64);

impl SelectionStrategy for GlobalSparsity {
    fn name(&self) -> &'static str {
        "global_sparsity"
    }
    fn select(&self, cem: &CausationMatrix) -> ModelStructure {
        let flat = cem.flat();
        let keep = kept_count(self.0, flat.len());
        let mut mask = vec![false; flat.len()];
        for k in rank_descending(&flat).into_iter().take(keep) {
            mask[k] = true;
        }
        ModelStructure::new(cem.n(), cem.m(), mask, format!("global_sparsity fraction={}", self.0))
    }
}

/// Keep the top `(1 - f) M` entries of every equation.
pub struct PerEquationSparsity(pub f64);

impl SelectionStrategy for PerEquationSparsity {
    fn name(&self) -> &'static str {
        "per_equation_sparsity"
    }
    fn select(&self, cem: &CausationMatrix) -> ModelStructure {
        let (n, m) = (cem.n(), cem.m());
        let keep = kept_count(self.0, m);
        let mut mask = vec![false; n * m];
        for i in 0..n {
            let row: Vec<f64> = (0..m).map(|k| cem.values[(i, k)]).collect();
            for k in rank_descending(&row).into_iter().take(keep) {
                mask[i * m + k] = true;
            }
        }
        ModelStructure::new(n, m, mask, format!("per_equation_sparsity fraction={}", self.0))
    }
}

/// Threshold placed in the widest gap (on a log scale) between consecutive
/// sorted values, searching only among values at or above `floor`.
pub struct LargestGap {
    pub floor: f64,
}

impl LargestGap {
    /// The threshold this strategy would use.
    pub fn threshold(&self, cem: &CausationMatrix) -> f64 {
        let mut v: Vec<f64> = cem.flat().into_iter().filter(|x| *x >= self.floor && *x > 0.0).collect();
        v.sort_by(|a, b| b.total_cmp(a));
        let mut best = (0.0, f64::INFINITY);
        for w in v.windows(2) {
            let ratio = (w[0] / w[1]).ln();
            if ratio > best.0 {
                best = (ratio, (w[0] * w[1]).sqrt());
            }
        }
        if best.1.is_finite() {
            best.1
        } else {
            // fewer than two candidates: keep whatever lies above the floor
            self.floor
        }
    }
}

impl SelectionStrategy for LargestGap {
    fn name(&self) -> &'static str {
        "largest_gap"
    }
    fn select(&self, cem: &CausationMatrix) -> ModelStructure {
        let theta = self.threshold(cem);
        GlobalThreshold(theta)
            .select(cem)
            .with_record(format!("largest_gap floor={} theta={theta}", self.floor))
    }
}

fn fraction(name: &str, p: &[f64]) -> Result<f64> {
    expect_params(name, p, 1)?;
    if !(0.0..1.0).contains(&p[0]) {
        return Err(Error::invalid(format!("`{name}` fraction must lie in [0, 1), got {}", p[0])));
    }
    Ok(p[0])
}

pub fn strategy_registry() -> Registry<dyn SelectionStrategy> {
    let mut reg: Registry<dyn SelectionStrategy> = Registry::new("selection strategy");
    reg.register("global_threshold", |p| {
        expect_params("global_threshold", p, 1)?;
        if !p[0].is_finite() {
            return Err(Error::invalid("threshold must be finite"));
        }
        Ok(Box::new(GlobalThreshold(p[0])))
    });
    reg.register("global_sparsity", |p| Ok(Box::new(GlobalSparsity(fraction("global_sparsity", p)?))));
    reg.register("per_equation_sparsity", |p| {
        Ok(Box::new(PerEquationSparsity(fraction("per_equation_sparsity", p)?)))
    });
    reg.register("largest_gap", |p| {
        expect_params("largest_gap", p, 1)?;
        Ok(Box::new(LargestGap { floor: p[0] }))
    });
    reg
}

pub fn select_structure(cem: &CausationMatrix, strategy: &str, params: &[f64]) -> Result<ModelStructure> {
    Ok(strategy_registry().create(strategy, params)?.select(cem))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;

    fn cem() -> CausationMatrix {
        CausationMatrix {
            values: DMatrix::from_row_slice(2, 3, &[0.5, 2.0, 0.01, 3.0, 0.5, 0.02]),
            min_raw: 0.0,
        }
    }

    #[test]
    fn threshold_above_max_is_empty() {
        assert_eq!(GlobalThreshold(10.0).select(&cem()).count(), 0);
        assert_eq!(GlobalThreshold(0.5).select(&cem()).count(), 2);
    }

    #[test]
    fn sparsity_ties_prefer_lower_index() {
        // 50% of 6 keeps 3: 3.0, 2.0 and the first 0.5 (flat index 0)
        let s = GlobalSparsity(0.5).select(&cem());
        assert_eq!(s.count(), 3);
        assert!(s.get(0, 0) && !s.get(1, 1));
        let p = PerEquationSparsity(0.5).select(&cem());
        assert_eq!(p.row_terms(0), vec![0, 1]);
        assert_eq!(p.row_terms(1), vec![0, 1]);
    }

    #[test]
    fn kept_count_ceiling() {
        assert_eq!(kept_count(0.9, 4600), 460);
        assert_eq!(kept_count(0.9, 230), 23);
        assert_eq!(kept_count(0.999, 2), 1);
        assert_eq!(kept_count(0.0, 7), 7);
    }

    #[test]
    fn gap_threshold_splits_clusters() {
        let g = LargestGap { floor: 1e-3 };
        let t = g.threshold(&cem());
        assert!(t > 0.02 && t < 0.5);
        assert_eq!(g.select(&cem()).count(), 4);
    }

    #[test]
    fn registry_names_and_validation() {
        let reg = strategy_registry();
        let names: Vec<&str> = reg.names().collect();
        assert_eq!(names, vec!["global_sparsity", "global_threshold", "largest_gap", "per_equation_sparsity"]);
        assert!(select_structure(&cem(), "global_sparsity", &[1.5]).is_err());
        assert_eq!(select_structure(&cem(), "global_threshold", &[1.0]).unwrap().count(), 2);
    }
}
