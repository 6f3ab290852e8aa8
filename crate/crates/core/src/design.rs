//! Individual-level design matrices built from a dataset and an [`AnalysisSpec`].

use std::ops::Range;

use nalgebra::DMatrix;

use crate::data::{AnalysisSpec, TrialDataset};
use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Rows {
    /// Individuals with an observed outcome only.
    Observed,
    /// Every individual; missing outcomes appear as `NaN`.
    All,
}

#[derive(Debug, Clone)]
pub struct Design {
    pub x: DMatrix<f64>,
    pub y: Vec<f64>,
    pub columns: Vec<String>,
    /// Row range of each cluster contributing at least one row, with its index in
    /// `dataset.clusters`.
    pub groups: Vec<(usize, Range<usize>)>,
    pub arm_column: Option<usize>,
}

impl Design {
    pub fn n_rows(&self) -> usize {
        self.y.len()
    }

    pub fn n_cols(&self) -> usize {
        self.columns.len()
    }
}

/// Columns: intercept, optional intervention indicator, adjustment covariates
/// (centred at the grand mean over all individuals when requested) and, with
/// `include_interaction`, intervention-by-covariate products.
pub fn build_design(dataset: &TrialDataset, spec: &AnalysisSpec, include_arm: bool, rows: Rows) -> Result<Design> {
    spec.check()?;
    let cov_idx: Vec<usize> = spec.adjust_for.iter().map(|n| dataset.covariate_index(n)).collect::<Result<_>>()?;
    let centres: Vec<f64> =
        cov_idx.iter().map(|&c| if spec.center_covariates { dataset.grand_mean(c) } else { 0.0 }).collect();

    let mut columns = vec!["(Intercept)".to_string()];
    let arm_column = include_arm.then(|| {
        columns.push("arm".to_string());
        1
    });
    columns.extend(spec.adjust_for.iter().cloned());
    let interaction = include_arm && spec.include_interaction;
    if interaction {
        columns.extend(spec.adjust_for.iter().map(|n| format!("arm:{n}")));
    }
    let p = columns.len();

    let mut data = Vec::new();
    let mut y = Vec::new();
    let mut groups = Vec::new();
    for (j, cluster) in dataset.clusters.iter().enumerate() {
        let start = y.len();
        let arm = cluster.arm.indicator();
        for (l, outcome) in cluster.outcomes.iter().enumerate() {
            if rows == Rows::Observed && outcome.is_none() {
                continue;
            }
            let row = cluster.covariate_row(l);
            data.push(1.0);
            if include_arm {
                data.push(arm);
            }
            for (&c, &centre) in cov_idx.iter().zip(&centres) {
                data.push(row[c] - centre);
            }
            if interaction {
                for (&c, &centre) in cov_idx.iter().zip(&centres) {
                    data.push(arm * (row[c] - centre));
                }
            }
            y.push(outcome.map_or(f64::NAN, f64::from));
        }
        if y.len() > start {
            groups.push((j, start..y.len()));
        }
    }
    let x = DMatrix::from_row_slice(y.len(), p, &data);
    Ok(Design { x, y, columns, groups, arm_column })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Arm, ClusterRecord};

    #[test]
    fn centring_uses_all_individuals() {
        let d = TrialDataset::new(
            vec![
                ClusterRecord::new("a", Arm::Control, vec![Some(1), None], vec![vec![1.0], vec![5.0]]),
                ClusterRecord::new("b", Arm::Intervention, vec![Some(0), Some(1)], vec![vec![2.0], vec![4.0]]),
            ],
            vec!["x".into()],
        );
        let spec = AnalysisSpec::adjusted(&["x"]).with_interaction();
        let des = build_design(&d, &spec, true, Rows::Observed).unwrap();
        assert_eq!(des.columns, vec!["(Intercept)", "arm", "x", "arm:x"]);
        assert_eq!(des.n_rows(), 3);
        // grand mean 3.0 includes the individual with a missing outcome
        assert_eq!(des.x[(0, 2)], -2.0);
        assert_eq!(des.x[(2, 3)], 1.0);
        assert_eq!(des.groups, vec![(0, 0..1), (1, 1..3)]);
        let all = build_design(&d, &spec, true, Rows::All).unwrap();
        assert!(all.y[1].is_nan());
    }
}
