//! Plackett-Luce distribution over (partial) rankings.
//!
//! A ranking of length `N <= V` is scored level by level: the alternative
//! chosen at level `n` has probability `theta[a(n)] / (1 - sum_{c<n} theta[a(c)])`.
//! Alternatives that were never ranked are marginalized out by construction.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Below this, a denominator `1 - sum(prefix)` is treated as a broken support vector.
pub const DENOMINATOR_FLOOR: f64 = 1e-14;

const SUM_TOLERANCE: f64 = 1e-10;

/// An ordered selection of distinct alternatives, best first.
///
/// Alternatives are stored 0-based; files and the CLI use 1-based labels.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Ranking {
    items: Vec<usize>,
    n_alternatives: usize,
}

impl Ranking {
    pub fn new(items: Vec<usize>, n_alternatives: usize) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::InvalidRanking("a ranking needs at least one level".into()));
        }
        if items.len() > n_alternatives {
            return Err(Error::InvalidRanking(format!(
                "{} levels exceed the {} alternatives",
                items.len(),
                n_alternatives
            )));
        }
        let mut seen = vec![false; n_alternatives];
        for &item in &items {
            if item >= n_alternatives {
                return Err(Error::InvalidRanking(format!(
                    "alternative {} is outside 1..={}",
                    item + 1,
                    n_alternatives
                )));
            }
            if std::mem::replace(&mut seen[item], true) {
                return Err(Error::InvalidRanking(format!("alternative {} is ranked twice", item + 1)));
            }
        }
        Ok(Ranking { items, n_alternatives })
    }

    pub fn from_one_based(items: &[usize], n_alternatives: usize) -> Result<Self> {
        let zero_based = items
            .iter()
            .map(|&a| {
                a.checked_sub(1)
                    .ok_or_else(|| Error::InvalidRanking("alternatives are numbered from 1".into()))
            })
            .collect::<Result<Vec<_>>>()?;
        Ranking::new(zero_based, n_alternatives)
    }

    /// 0-based alternatives, best first.
    pub fn items(&self) -> &[usize] {
        &self.items
    }

    pub fn to_one_based(&self) -> Vec<usize> {
        self.items.iter().map(|a| a + 1).collect()
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn n_alternatives(&self) -> usize {
        self.n_alternatives
    }
}

/// Support parameters of one Plackett-Luce distribution: a point on the simplex.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct SupportVector(Vec<f64>);

impl SupportVector {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::InvalidSupport("empty support vector".into()));
        }
        if let Some(w) = weights.iter().find(|w| !(w.is_finite() && **w >= 0.0)) {
            return Err(Error::InvalidSupport(format!("weight {w} is not a non-negative number")));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > SUM_TOLERANCE {
            return Err(Error::InvalidSupport(format!("weights sum to {total}, not 1")));
        }
        Ok(SupportVector(weights))
    }

    /// Scales non-negative weights onto the simplex.
    pub fn normalized(mut weights: Vec<f64>) -> Result<Self> {
        let total: f64 = weights.iter().sum();
        if !(total > 0.0 && total.is_finite()) {
            return Err(Error::InvalidSupport(format!("cannot normalize weights summing to {total}")));
        }
        weights.iter_mut().for_each(|w| *w /= total);
        SupportVector::new(weights)
    }

    pub fn uniform(n_alternatives: usize) -> Self {
        SupportVector(vec![1.0 / n_alternatives as f64; n_alternatives])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl TryFrom<Vec<f64>> for SupportVector {
    type Error = Error;

    fn try_from(weights: Vec<f64>) -> Result<Self> {
        SupportVector::new(weights)
    }
}

impl From<SupportVector> for Vec<f64> {
    fn from(v: SupportVector) -> Self {
        v.0
    }
}

/// Writes `ln theta[a(n)] - ln(1 - sum_{c<n} theta[a(c)])` for each level into `out`.
///
/// Works on raw weights so it can be shared with the estimation code.
pub(crate) fn level_log_terms(theta: &[f64], items: &[usize], out: &mut Vec<f64>) -> Result<()> {
    out.clear();
    let mut prefix = 0.0;
    for (level, &item) in items.iter().enumerate() {
        let denominator = 1.0 - prefix;
        if level > 0 && denominator < DENOMINATOR_FLOOR {
            return Err(Error::Structural { level: level + 1, denominator });
        }
        let weight = theta[item];
        let term = if weight > 0.0 { weight.ln() - denominator.ln() } else { f64::NEG_INFINITY };
        out.push(term);
        prefix += weight;
    }
    Ok(())
}

/// Log-probability of a (partial) ranking under Plackett-Luce support `theta`.
///
/// Returns `-inf` when a ranked alternative has zero weight.
pub fn pl_log_mass(theta: &SupportVector, ranking: &Ranking) -> Result<f64> {
    if theta.len() != ranking.n_alternatives() {
        return Err(Error::InvalidRanking(format!(
            "ranking over {} alternatives scored against {} weights",
            ranking.n_alternatives(),
            theta.len()
        )));
    }
    let mut terms = Vec::with_capacity(ranking.len());
    level_log_terms(theta.as_slice(), ranking.items(), &mut terms)?;
    Ok(terms.iter().sum())
}

/// Draws `n_levels` alternatives sequentially without replacement, each level
/// choosing among the remaining alternatives in proportion to their weights.
pub fn pl_sample<R: Rng + ?Sized>(theta: &SupportVector, n_levels: usize, rng: &mut R) -> Result<Ranking> {
    let weights = theta.as_slice();
    let available = weights.iter().filter(|w| **w > 0.0).count();
    if n_levels == 0 || n_levels > weights.len() || available < n_levels {
        return Err(Error::InsufficientSupport { requested: n_levels, available });
    }
    let mut taken = vec![false; weights.len()];
    let mut items = Vec::with_capacity(n_levels);
    for _ in 0..n_levels {
        let remaining: f64 = weights.iter().zip(&taken).filter(|(_, t)| !**t).map(|(w, _)| w).sum();
        let target = rng.random::<f64>() * remaining;
        let mut cumulative = 0.0;
        let mut chosen = None;
        for (v, (&w, &t)) in weights.iter().zip(&taken).enumerate() {
            if t || w <= 0.0 {
                continue;
            }
            cumulative += w;
            // the last positive candidate absorbs any rounding shortfall
            chosen = Some(v);
            if target < cumulative {
                break;
            }
        }
        let v = chosen.expect("a positive-weight alternative remains");
        taken[v] = true;
        items.push(v);
    }
    Ranking::new(items, weights.len())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sv(w: &[f64]) -> SupportVector {
        SupportVector::new(w.to_vec()).unwrap()
    }

    /// All ordered selections of `len` distinct items out of `n`.
    fn partial_permutations(n: usize, len: usize) -> Vec<Vec<usize>> {
        if len == 0 {
            return vec![vec![]];
        }
        let mut out = Vec::new();
        for prefix in partial_permutations(n, len - 1) {
            for v in 0..n {
                if !prefix.contains(&v) {
                    let mut p = prefix.clone();
                    p.push(v);
                    out.push(p);
                }
            }
        }
        out
    }

    #[test]
    fn uniform_full_ranking() {
        let theta = SupportVector::uniform(3);
        let x = Ranking::from_one_based(&[1, 2, 3], 3).unwrap();
        assert!((pl_log_mass(&theta, &x).unwrap() - (1.0f64 / 6.0).ln()).abs() < 1e-14);
    }

    #[test]
    fn two_level_hand_value() {
        let theta = sv(&[0.5, 0.3, 0.2]);
        let x = Ranking::from_one_based(&[2, 1], 3).unwrap();
        let expected = (0.3f64 * 0.5 / 0.7).ln();
        assert!((pl_log_mass(&theta, &x).unwrap() - expected).abs() < 1e-14);
    }

    #[test]
    fn normalizes_over_partial_permutations() {
        let supports = [vec![0.5, 0.3, 0.2], vec![0.1, 0.2, 0.3, 0.4], vec![0.05, 0.15, 0.2, 0.25, 0.35]];
        for w in &supports {
            let theta = sv(w);
            for len in 1..=w.len() {
                let total: f64 = partial_permutations(w.len(), len)
                    .into_iter()
                    .map(|p| pl_log_mass(&theta, &Ranking::new(p, w.len()).unwrap()).unwrap().exp())
                    .sum();
                assert!((total - 1.0).abs() < 1e-10, "V={} N={len}: {total}", w.len());
            }
        }
    }

    #[test]
    fn first_choice_probability_is_support() {
        let theta = sv(&[0.1, 0.2, 0.3, 0.4]);
        for v in 0..4 {
            let lp = pl_log_mass(&theta, &Ranking::new(vec![v], 4).unwrap()).unwrap();
            assert!((lp.exp() - theta.as_slice()[v]).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_weight_and_structural_errors() {
        let theta = sv(&[0.5, 0.5, 0.0]);
        let x = Ranking::from_one_based(&[3, 1], 3).unwrap();
        assert_eq!(pl_log_mass(&theta, &x).unwrap(), f64::NEG_INFINITY);
        let theta = sv(&[1.0, 0.0, 0.0]);
        let x = Ranking::from_one_based(&[1, 2], 3).unwrap();
        assert!(matches!(pl_log_mass(&theta, &x), Err(Error::Structural { level: 2, .. })));
    }

    #[test]
    fn ranking_validation() {
        assert!(Ranking::from_one_based(&[1, 1], 3).is_err());
        assert!(Ranking::from_one_based(&[4], 3).is_err());
        assert!(Ranking::from_one_based(&[0], 3).is_err());
        assert!(Ranking::new(vec![], 3).is_err());
        assert!(SupportVector::new(vec![0.5, 0.6]).is_err());
        assert!(SupportVector::new(vec![-0.1, 1.1]).is_err());
    }

    #[test]
    fn degenerate_sampling() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let theta = sv(&[1.0, 0.0, 0.0]);
        for _ in 0..100 {
            assert_eq!(pl_sample(&theta, 1, &mut rng).unwrap().items(), &[0]);
        }
        assert!(matches!(
            pl_sample(&theta, 2, &mut rng),
            Err(Error::InsufficientSupport { requested: 2, available: 1 })
        ));
    }

    #[test]
    fn sampled_pair_frequency_matches_mass() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let theta = sv(&[0.5, 0.3, 0.2]);
        let draws = 100_000;
        let hits = (0..draws)
            .filter(|_| pl_sample(&theta, 2, &mut rng).unwrap().items() == [1, 0])
            .count();
        let p = 0.3 * 0.5 / 0.7;
        let se = (p * (1.0 - p) / draws as f64).sqrt();
        assert!((hits as f64 / draws as f64 - p).abs() < 3.0 * se);
    }

    #[test]
    fn uniform_permutation_frequencies() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let theta = SupportVector::uniform(3);
        let draws = 60_000;
        let mut counts = std::collections::BTreeMap::new();
        for _ in 0..draws {
            *counts.entry(pl_sample(&theta, 3, &mut rng).unwrap().items().to_vec()).or_insert(0usize) += 1;
        }
        assert_eq!(counts.len(), 6);
        let p = 1.0 / 6.0;
        let se = (p * (1.0 - p) / draws as f64).sqrt();
        for c in counts.values() {
            assert!((*c as f64 / draws as f64 - p).abs() < 3.0 * se);
        }
    }
}
