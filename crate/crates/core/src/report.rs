//! Summaries of a fitted model: support ratios, relative frequencies,
//! membership point estimates and their correlations.

use serde::{Deserialize, Serialize};

use crate::driver::FitResult;
use crate::error::{Error, Result};
use crate::model::{ModelParams, VariationalParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub relative_frequencies: Vec<f64>,
    /// `theta_jkv * V_j`, indexed `[variable][subgroup][alternative]`.
    pub support_ratios: Vec<Vec<Vec<f64>>>,
    pub log10_support_ratios: Vec<Vec<Vec<f64>>>,
    /// `phi_i / sum(phi_i)` per individual.
    pub memberships: Vec<Vec<f64>>,
    pub modal_subgroup: Vec<usize>,
    pub modal_membership: Vec<f64>,
    /// Pearson correlations between membership columns. `NaN` where a column is constant.
    pub membership_correlation: Vec<Vec<f64>>,
}

pub fn relative_frequencies(alpha: &[f64]) -> Vec<f64> {
    let total: f64 = alpha.iter().sum();
    alpha.iter().map(|a| a / total).collect()
}

pub fn support_ratios(params: &ModelParams) -> Vec<Vec<Vec<f64>>> {
    params
        .theta
        .iter()
        .map(|row| {
            row.iter()
                .map(|sv| sv.as_slice().iter().map(|t| t * sv.len() as f64).collect())
                .collect()
        })
        .collect()
}

pub fn correlation_matrix(rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let k = rows.first().map_or(0, Vec::len);
    let n = rows.len() as f64;
    let means: Vec<f64> = (0..k).map(|c| rows.iter().map(|r| r[c]).sum::<f64>() / n).collect();
    let mut cov = vec![vec![0.0; k]; k];
    for r in rows {
        for a in 0..k {
            for b in 0..k {
                cov[a][b] += (r[a] - means[a]) * (r[b] - means[b]);
            }
        }
    }
    (0..k)
        .map(|a| {
            (0..k)
                .map(|b| {
                    let denom = (cov[a][a] * cov[b][b]).sqrt();
                    if denom > 0.0 { cov[a][b] / denom } else { f64::NAN }
                })
                .collect()
        })
        .collect()
}

fn modal(rows: &[Vec<f64>]) -> (Vec<usize>, Vec<f64>) {
    rows.iter()
        .map(|r| {
            r.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (k, &m)| if m > best.1 { (k, m) } else { best })
        })
        .unzip()
}

pub fn summarize(params: &ModelParams, var: &VariationalParams) -> Report {
    let k = var.n_subgroups();
    let phi: Vec<Vec<f64>> = var.phi().chunks(k).map(<[f64]>::to_vec).collect();
    summarize_memberships(params, &phi)
}

/// Like [`summarize`], from per-individual `phi` rows.
pub fn summarize_memberships(params: &ModelParams, phi: &[Vec<f64>]) -> Report {
    let ratios = support_ratios(params);
    let log10 = ratios.iter().map(|r| r.iter().map(|s| s.iter().map(|x| x.log10()).collect()).collect()).collect();
    let memberships: Vec<Vec<f64>> = phi
        .iter()
        .map(|row| {
            let total: f64 = row.iter().sum();
            row.iter().map(|p| p / total).collect()
        })
        .collect();
    let (modal_subgroup, modal_membership) = modal(&memberships);
    Report {
        relative_frequencies: relative_frequencies(&params.alpha),
        support_ratios: ratios,
        log10_support_ratios: log10,
        membership_correlation: correlation_matrix(&memberships),
        memberships,
        modal_subgroup,
        modal_membership,
    }
}

pub fn report_summaries(fitted: &FitResult) -> Report {
    summarize(&fitted.params, &fitted.var)
}

/// Memberships renormalized over `subset`, keeping only individuals whose
/// total membership in the subset exceeds `threshold`. Returns the kept
/// individual indices with their renormalized rows.
pub fn conditional_memberships(
    memberships: &[Vec<f64>],
    subset: &[usize],
    threshold: f64,
) -> Result<Vec<(usize, Vec<f64>)>> {
    let k = memberships.first().map_or(0, Vec::len);
    if subset.is_empty() || subset.iter().any(|&s| s >= k) {
        return Err(Error::Config(format!("subgroup subset {subset:?} is not within 0..{k}")));
    }
    Ok(memberships
        .iter()
        .enumerate()
        .filter_map(|(i, row)| {
            let mass: f64 = subset.iter().map(|&s| row[s]).sum();
            (mass > threshold).then(|| (i, subset.iter().map(|&s| row[s] / mass).collect()))
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::plackett_luce::SupportVector;

    #[test]
    fn uniform_support_ratios_are_one() {
        let params =
            ModelParams::new(vec![1.0], vec![vec![SupportVector::uniform(7)]], vec![false]).unwrap();
        let r = support_ratios(&params);
        assert!(r[0][0].iter().all(|x| (x - 1.0).abs() < 1e-15));
    }

    #[test]
    fn correlation_of_two_columns() {
        let rows = vec![vec![0.9, 0.1], vec![0.2, 0.8], vec![0.5, 0.5]];
        let c = correlation_matrix(&rows);
        assert!((c[0][1] + 1.0).abs() < 1e-12);
        assert!((c[0][0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn conditional_filter() {
        let rows = vec![vec![0.6, 0.3, 0.1], vec![0.1, 0.2, 0.7]];
        let kept = conditional_memberships(&rows, &[0, 1], 0.5).unwrap();
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].0, 0);
        assert!((kept[0].1[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!(conditional_memberships(&rows, &[3], 0.5).is_err());
    }

    #[test]
    fn modal_values() {
        let (k, m) = modal(&[vec![0.2, 0.7, 0.1], vec![0.5, 0.25, 0.25]]);
        assert_eq!(k, vec![1, 0]);
        assert_eq!(m, vec![0.7, 0.5]);
    }
}
