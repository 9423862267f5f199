//! Percentiles, the Wilcoxon rank-sum test, the Vargha–Delaney A12 effect
//! size, and assembly of the scaler comparison table.

use serde::Serialize;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};

/// Largest pooled sample size for which [`wilcoxon_rank_sum`] enumerates the
/// exact null distribution.
pub const EXACT_LIMIT: usize = 12;

/// p-value below which a comparison counts as significant.
pub const SIGNIFICANCE_LEVEL: f64 = 0.01;

/// Nearest-rank percentile: the `ceil(p * n)`-th smallest value. Sorts
/// `values` in place. `None` for an empty slice.
pub fn percentile_nearest_rank(values: &mut [f64], p: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let rank = (p * values.len() as f64).ceil() as usize;
    Some(values[rank.clamp(1, values.len()) - 1])
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Alternative {
    #[default]
    TwoSided,
    /// `a` tends to be smaller than `b`.
    Less,
    /// `a` tends to be larger than `b`.
    Greater,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    Exact,
    NormalApprox,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RankSumTest {
    /// Sum of the midranks of `a` in the pooled sample.
    pub rank_sum: f64,
    pub p_value: f64,
    pub method: Method,
}

/// Two-sided Wilcoxon rank-sum p-value. Exact for pooled size up to
/// [`EXACT_LIMIT`], normal approximation with tie and continuity correction
/// beyond that.
pub fn wilcoxon_rank_sum(a: &[f64], b: &[f64]) -> Result<f64> {
    Ok(rank_sum_test(a, b, Alternative::TwoSided)?.p_value)
}

pub fn rank_sum_test(a: &[f64], b: &[f64], alt: Alternative) -> Result<RankSumTest> {
    if a.len() + b.len() <= EXACT_LIMIT {
        rank_sum_exact(a, b, alt)
    } else {
        rank_sum_normal(a, b, alt)
    }
}

fn check_samples(a: &[f64], b: &[f64]) -> Result<()> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Stats("rank-sum test needs two non-empty samples".into()));
    }
    if a.iter().chain(b).any(|x| x.is_nan()) {
        return Err(Error::Stats("samples contain NaN".into()));
    }
    Ok(())
}

/// Doubled midranks of the pooled sample (integers, so ties stay exact),
/// plus the tie-group sizes.
fn doubled_midranks(pooled: &[f64]) -> (Vec<u64>, Vec<u64>) {
    let mut order: Vec<usize> = (0..pooled.len()).collect();
    order.sort_by(|&i, &j| pooled[i].total_cmp(&pooled[j]));
    let mut ranks = vec![0u64; pooled.len()];
    let mut ties = Vec::new();
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && pooled[order[j + 1]] == pooled[order[i]] {
            j += 1;
        }
        // positions i..=j hold ranks i+1..=j+1; doubled midrank = i + j + 2
        for &k in &order[i..=j] {
            ranks[k] = (i + j + 2) as u64;
        }
        ties.push((j - i + 1) as u64);
        i = j + 1;
    }
    (ranks, ties)
}

/// Exact permutation p-value of the rank-sum statistic, counting subsets of
/// the pooled midranks by dynamic programming over their sums.
pub fn rank_sum_exact(a: &[f64], b: &[f64], alt: Alternative) -> Result<RankSumTest> {
    check_samples(a, b)?;
    let n = a.len();
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let big_n = pooled.len();
    if big_n > 60 {
        return Err(Error::Stats("exact rank-sum limited to 60 pooled observations".into()));
    }
    let (ranks, _) = doubled_midranks(&pooled);
    let observed: u64 = ranks[..n].iter().sum();
    let max_sum: u64 = ranks.iter().sum();

    // ways[k][s]: subsets of size k with doubled rank sum s
    let mut ways = vec![vec![0u128; max_sum as usize + 1]; n + 1];
    ways[0][0] = 1;
    for &r in &ranks {
        for k in (1..=n).rev() {
            for s in (r as usize..=max_sum as usize).rev() {
                let add = ways[k - 1][s - r as usize];
                if add != 0 {
                    ways[k][s] += add;
                }
            }
        }
    }
    let expected2 = (n * (big_n + 1)) as i128; // 2 * E[W], same scale as the doubled sums
    let obs_dev = (observed as i128 - expected2).abs();
    let mut total: u128 = 0;
    let mut extreme: u128 = 0;
    for (s, &w) in ways[n].iter().enumerate() {
        if w == 0 {
            continue;
        }
        total += w;
        let hit = match alt {
            Alternative::TwoSided => (s as i128 - expected2).abs() >= obs_dev,
            Alternative::Less => s as u64 <= observed,
            Alternative::Greater => s as u64 >= observed,
        };
        if hit {
            extreme += w;
        }
    }
    Ok(RankSumTest {
        rank_sum: observed as f64 / 2.0,
        p_value: (extreme as f64 / total as f64).min(1.0),
        method: Method::Exact,
    })
}

/// Normal approximation with tie-corrected variance and continuity correction.
pub fn rank_sum_normal(a: &[f64], b: &[f64], alt: Alternative) -> Result<RankSumTest> {
    check_samples(a, b)?;
    let (n, m) = (a.len() as f64, b.len() as f64);
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let big_n = n + m;
    let (ranks, ties) = doubled_midranks(&pooled);
    let w = ranks[..a.len()].iter().sum::<u64>() as f64 / 2.0;
    let expected = n * (big_n + 1.0) / 2.0;
    let tie_term: f64 = ties.iter().map(|&t| (t * t * t - t) as f64).sum::<f64>() / (big_n * (big_n - 1.0));
    let var = n * m / 12.0 * ((big_n + 1.0) - tie_term);
    if var <= 0.0 {
        return Ok(RankSumTest { rank_sum: w, p_value: 1.0, method: Method::NormalApprox });
    }
    let sd = var.sqrt();
    let std_normal = Normal::standard();
    let d = w - expected;
    let p = match alt {
        Alternative::TwoSided => {
            let z = ((d.abs() - 0.5).max(0.0)) / sd;
            2.0 * std_normal.sf(z)
        }
        Alternative::Less => std_normal.cdf((d + 0.5) / sd),
        Alternative::Greater => std_normal.sf((d - 0.5) / sd),
    };
    Ok(RankSumTest { rank_sum: w, p_value: p.min(1.0), method: Method::NormalApprox })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Magnitude {
    #[serde(rename = "N")]
    Negligible,
    #[serde(rename = "S")]
    Small,
    #[serde(rename = "M")]
    Medium,
    #[serde(rename = "L")]
    Large,
}

impl Magnitude {
    pub fn letter(self) -> char {
        match self {
            Magnitude::Negligible => 'N',
            Magnitude::Small => 'S',
            Magnitude::Medium => 'M',
            Magnitude::Large => 'L',
        }
    }
}

/// Vargha–Delaney A12: probability that a value from `a` exceeds one from
/// `b`, ties counting half. Label thresholds on `|A12 - 0.5|` are 0.06,
/// 0.14 and 0.21, compared in exact integer arithmetic.
pub fn vargha_delaney_a12(a: &[f64], b: &[f64]) -> Result<(f64, Magnitude)> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Stats("A12 needs two non-empty samples".into()));
    }
    let (mut greater, mut equal) = (0u64, 0u64);
    for x in a {
        for y in b {
            if x > y {
                greater += 1;
            } else if x == y {
                equal += 1;
            }
        }
    }
    let nm = (a.len() * b.len()) as u64;
    let a12 = (2 * greater + equal) as f64 / (2 * nm) as f64;
    // |A12 - 0.5| = |2g + e - nm| / (2nm); compare against k/100
    let dev = (2 * greater + equal).abs_diff(nm) * 100;
    let label = if dev >= 21 * 2 * nm {
        Magnitude::Large
    } else if dev >= 14 * 2 * nm {
        Magnitude::Medium
    } else if dev >= 6 * 2 * nm {
        Magnitude::Small
    } else {
        Magnitude::Negligible
    };
    Ok((a12, label))
}

/// Per-run outcomes of one scaler on one case study.
#[derive(Clone, Debug, PartialEq)]
pub struct ScalerRuns {
    pub scaler: String,
    pub pods: Vec<f64>,
    pub violations: Vec<f64>,
}

/// One comparison of AutoSLO against a baseline on one metric.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub case: String,
    pub metric: String,
    pub baseline: String,
    pub autoslo_mean: f64,
    pub hpa_mean: f64,
    pub ran_mean: f64,
    pub p_value: f64,
    pub a12: f64,
    pub magnitude: Magnitude,
    pub significant: bool,
}

/// Builds the (pods, violations) x (vs HPA, vs Ran) rows for one case study.
pub fn build_table(case: &str, autoslo: &ScalerRuns, hpa: &ScalerRuns, ran: &ScalerRuns) -> Result<Vec<ComparisonRow>> {
    let n = autoslo.pods.len();
    for r in [autoslo, hpa, ran] {
        if r.pods.len() != n || r.violations.len() != n || n == 0 {
            return Err(Error::Stats(format!(
                "scaler `{}` has {} runs, expected {n} with matching metrics",
                r.scaler,
                r.pods.len()
            )));
        }
    }
    let mut rows = Vec::with_capacity(4);
    for metric in ["pods", "violations"] {
        let pick = |r: &ScalerRuns| -> Vec<f64> {
            if metric == "pods" {
                r.pods.clone()
            } else {
                r.violations.clone()
            }
        };
        let ours = pick(autoslo);
        for baseline in [hpa, ran] {
            let theirs = pick(baseline);
            let p = wilcoxon_rank_sum(&ours, &theirs)?;
            let (a12, magnitude) = vargha_delaney_a12(&ours, &theirs)?;
            rows.push(ComparisonRow {
                case: case.to_string(),
                metric: metric.to_string(),
                baseline: baseline.scaler.clone(),
                autoslo_mean: mean(&ours),
                hpa_mean: mean(&pick(hpa)),
                ran_mean: mean(&pick(ran)),
                p_value: p,
                a12,
                magnitude,
                significant: p < SIGNIFICANCE_LEVEL,
            });
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn nearest_rank_p90() {
        let mut v: Vec<f64> = (1..=10).rev().map(|k| f64::from(k) * 10.0).collect();
        assert_eq!(percentile_nearest_rank(&mut v, 0.9), Some(90.0));
        assert_eq!(percentile_nearest_rank(&mut [5.0], 0.9), Some(5.0));
        assert_eq!(percentile_nearest_rank(&mut [], 0.9), None);
    }

    #[test]
    fn identical_samples_give_p_one() {
        let p = wilcoxon_rank_sum(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap();
        assert!((p - 1.0).abs() < 1e-9);
    }

    #[test]
    fn separated_triples_exact_p() {
        // 2 of the C(6,3) = 20 rank assignments are as extreme
        let p = wilcoxon_rank_sum(&[1.0, 2.0, 3.0], &[10.0, 11.0, 12.0]).unwrap();
        assert!((p - 0.1).abs() < 1e-12);
    }

    #[test]
    fn separated_tens_are_significant() {
        let a: Vec<f64> = (0..10).map(f64::from).collect();
        let b: Vec<f64> = (20..30).map(f64::from).collect();
        let approx = wilcoxon_rank_sum(&a, &b).unwrap();
        let exact = rank_sum_exact(&a, &b, Alternative::TwoSided).unwrap().p_value;
        assert!(approx < 0.01 && exact < 0.01);
        assert!((exact - 2.0 / 184_756.0).abs() < 1e-15);
    }

    #[test]
    fn one_sided_variants() {
        let a = [1.0, 2.0, 3.0];
        let b = [10.0, 11.0, 12.0];
        let less = rank_sum_test(&a, &b, Alternative::Less).unwrap().p_value;
        let greater = rank_sum_test(&a, &b, Alternative::Greater).unwrap().p_value;
        assert!((less - 0.05).abs() < 1e-12);
        assert!((greater - 1.0).abs() < 1e-12);
    }

    #[test]
    fn all_tied_normal_approx() {
        let a = vec![3.0; 10];
        let b = vec![3.0; 10];
        assert_eq!(wilcoxon_rank_sum(&a, &b).unwrap(), 1.0);
    }

    #[test]
    fn empty_sample_errors() {
        assert!(wilcoxon_rank_sum(&[], &[1.0]).is_err());
        assert!(vargha_delaney_a12(&[1.0], &[]).is_err());
    }

    #[test]
    fn a12_examples() {
        assert_eq!(vargha_delaney_a12(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), (0.5, Magnitude::Negligible));
        assert_eq!(vargha_delaney_a12(&[5.0, 6.0], &[1.0, 2.0]).unwrap(), (1.0, Magnitude::Large));
        // pairs: (1,2) <, (1,3) <, (2,2) tie, (2,3) <  -> 0.5 / 4
        assert_eq!(vargha_delaney_a12(&[1.0, 2.0], &[2.0, 3.0]).unwrap(), (0.125, Magnitude::Large));
    }

    #[test]
    fn a12_label_boundaries() {
        // 100 x 1 samples give A12 in steps of 0.01
        let b = [0.5];
        let label_for = |k: usize| {
            let a: Vec<f64> = (0..100).map(|i| if i < k { 1.0 } else { 0.0 }).collect();
            vargha_delaney_a12(&a, &b).unwrap().1
        };
        assert_eq!(label_for(55), Magnitude::Negligible);
        assert_eq!(label_for(56), Magnitude::Small);
        assert_eq!(label_for(63), Magnitude::Small);
        assert_eq!(label_for(64), Magnitude::Medium);
        assert_eq!(label_for(70), Magnitude::Medium);
        assert_eq!(label_for(71), Magnitude::Large);
        assert_eq!(label_for(29), Magnitude::Large);
        assert_eq!(label_for(44), Magnitude::Small);
    }

    fn runs(name: &str, pods: &[f64], viol: &[f64]) -> ScalerRuns {
        ScalerRuns { scaler: name.into(), pods: pods.to_vec(), violations: viol.to_vec() }
    }

    #[test]
    fn table_of_equal_inputs() {
        let r = [3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0, 10.0, 11.0, 12.0];
        let rows = build_table("shop", &runs("autoslo", &r, &r), &runs("hpa", &r, &r), &runs("ran", &r, &r)).unwrap();
        assert_eq!(rows.len(), 4);
        for row in rows {
            assert!((row.p_value - 1.0).abs() < 1e-12);
            assert_eq!(row.a12, 0.5);
            assert!(!row.significant);
        }
    }

    #[test]
    fn table_flags_known_orderings() {
        let low: Vec<f64> = (0..10).map(f64::from).collect();
        let high: Vec<f64> = (100..110).map(f64::from).collect();
        let rows =
            build_table("shop", &runs("autoslo", &low, &high), &runs("hpa", &high, &low), &runs("ran", &low, &high))
                .unwrap();
        let get = |m: &str, b: &str| rows.iter().find(|r| r.metric == m && r.baseline == b).unwrap();
        assert!(get("pods", "hpa").significant);
        assert_eq!(get("pods", "hpa").a12, 0.0);
        assert!(get("violations", "hpa").significant);
        assert_eq!(get("violations", "hpa").a12, 1.0);
        assert!(!get("pods", "ran").significant);
    }

    #[test]
    fn table_rejects_unequal_repetitions() {
        let r = [1.0, 2.0];
        assert!(build_table("x", &runs("a", &r, &r), &runs("h", &[1.0], &[1.0]), &runs("r", &r, &r)).is_err());
    }

    proptest! {
        #[test]
        fn a12_is_antisymmetric(a in prop::collection::vec(0u8..6, 1..12), b in prop::collection::vec(0u8..6, 1..12)) {
            let a: Vec<f64> = a.into_iter().map(f64::from).collect();
            let b: Vec<f64> = b.into_iter().map(f64::from).collect();
            let (ab, _) = vargha_delaney_a12(&a, &b).unwrap();
            let (ba, _) = vargha_delaney_a12(&b, &a).unwrap();
            prop_assert!((ab + ba - 1.0).abs() < 1e-12);
        }

        #[test]
        fn rank_sum_invariant_under_monotone_maps(a in prop::collection::vec(-50i32..50, 1..15), b in prop::collection::vec(-50i32..50, 1..15)) {
            let a: Vec<f64> = a.into_iter().map(f64::from).collect();
            let b: Vec<f64> = b.into_iter().map(f64::from).collect();
            let f = |x: &f64| (x / 10.0).exp() * 3.0 + 1.0;
            let p1 = wilcoxon_rank_sum(&a, &b).unwrap();
            let p2 = wilcoxon_rank_sum(&a.iter().map(f).collect::<Vec<_>>(), &b.iter().map(f).collect::<Vec<_>>()).unwrap();
            prop_assert!((p1 - p2).abs() < 1e-12);
        }

        #[test]
        fn exact_and_normal_agree_for_ten_by_ten(perm in Just((0..20).collect::<Vec<u32>>()).prop_shuffle()) {
            let a: Vec<f64> = perm[..10].iter().map(|&x| f64::from(x)).collect();
            let b: Vec<f64> = perm[10..].iter().map(|&x| f64::from(x)).collect();
            let exact = rank_sum_exact(&a, &b, Alternative::TwoSided).unwrap().p_value;
            let approx = rank_sum_normal(&a, &b, Alternative::TwoSided).unwrap().p_value;
            prop_assert!((exact - approx).abs() <= 0.02, "exact {} approx {}", exact, approx);
        }
    }
}
