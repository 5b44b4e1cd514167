//! Client-vs-global target divergence on shared histograms, and the
//! permutation baseline that sets the IID threshold.

use std::collections::BTreeMap;
use std::f64::consts::LN_2;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::partition::ClientPartition;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeterogeneityConfig {
    pub bins: usize,
    pub n_permutations: usize,
    pub seed: u64,
}

impl Default for HeterogeneityConfig {
    fn default() -> Self {
        HeterogeneityConfig {
            bins: 50,
            n_permutations: 200,
            seed: 0,
        }
    }
}

impl HeterogeneityConfig {
    pub fn validate(&self) -> Result<()> {
        if self.bins == 0 {
            return Err(Error::config("bins", "must be > 0"));
        }
        if self.n_permutations < 2 {
            return Err(Error::config("n_permutations", "must be >= 2"));
        }
        Ok(())
    }
}

/// Equal-width bins over the global target range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinEdges {
    pub edges: Vec<f64>,
}

impl BinEdges {
    pub fn equal_width(targets: &[f64], bins: usize) -> Result<BinEdges> {
        if targets.is_empty() {
            return Err(Error::Empty("targets"));
        }
        if bins == 0 {
            return Err(Error::config("bins", "must be > 0"));
        }
        let lo = targets.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = targets.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let (lo, hi) = if hi > lo { (lo, hi) } else { (lo - 0.5, lo + 0.5) };
        let w = (hi - lo) / bins as f64;
        let mut edges: Vec<f64> = (0..bins).map(|b| lo + w * b as f64).collect();
        edges.push(hi);
        Ok(BinEdges { edges })
    }

    pub fn bins(&self) -> usize {
        self.edges.len() - 1
    }

    /// Bin holding `x`; the upper edge belongs to the last bin and values
    /// outside the range fall in the nearest end bin.
    pub fn bin_of(&self, x: f64) -> usize {
        let b = self.edges.partition_point(|e| *e <= x);
        b.saturating_sub(1).min(self.bins() - 1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramDensity {
    pub edges: BinEdges,
    pub probabilities: Vec<f64>,
}

pub fn fit_histogram(targets: &[f64], edges: &BinEdges) -> Result<HistogramDensity> {
    if targets.is_empty() {
        return Err(Error::Empty("client targets"));
    }
    let mut counts = vec![0usize; edges.bins()];
    for &t in targets {
        counts[edges.bin_of(t)] += 1;
    }
    let n = targets.len() as f64;
    Ok(HistogramDensity {
        edges: edges.clone(),
        probabilities: counts.into_iter().map(|c| c as f64 / n).collect(),
    })
}

fn kl_terms(p: &[f64], q: &[f64]) -> Result<f64> {
    let mut acc = 0.0;
    for (b, (&pb, &qb)) in p.iter().zip(q).enumerate() {
        if pb > 0.0 {
            if qb <= 0.0 {
                return Err(Error::UnboundedKl { bin: b });
            }
            acc += pb * (pb / qb).ln();
        }
    }
    Ok(acc.max(0.0))
}

/// `Σ p_b ln(p_b / q_b)` over bins where `p_b > 0`, natural log.
pub fn kl_divergence(p: &HistogramDensity, q: &HistogramDensity) -> Result<f64> {
    if p.edges != q.edges {
        return Err(Error::EdgeMismatch);
    }
    kl_terms(&p.probabilities, &q.probabilities)
}

fn js_probs(pk: &[f64], p: &[f64]) -> f64 {
    let m: Vec<f64> = pk.iter().zip(p).map(|(a, b)| 0.5 * (a + b)).collect();
    // M is positive wherever either argument is, so both terms are finite.
    let js = 0.5 * kl_terms(pk, &m).unwrap_or(f64::NAN) + 0.5 * kl_terms(p, &m).unwrap_or(f64::NAN);
    js.clamp(0.0, LN_2)
}

/// Jensen–Shannon divergence against the bin-wise mixture, in `[0, ln 2]`.
pub fn js_divergence(pk: &HistogramDensity, p: &HistogramDensity) -> Result<f64> {
    if pk.edges != p.edges {
        return Err(Error::EdgeMismatch);
    }
    Ok(js_probs(&pk.probabilities, &p.probabilities))
}

/// Sample-size weighted mean of per-client divergences.
pub fn weighted_js(partition: &ClientPartition, per_client_js: &[f64]) -> Result<f64> {
    if partition.is_empty() {
        return Err(Error::Empty("partition"));
    }
    if per_client_js.len() != partition.len() {
        return Err(Error::DimensionMismatch {
            expected: partition.len(),
            actual: per_client_js.len(),
        });
    }
    Ok(partition
        .weights()
        .iter()
        .zip(per_client_js)
        .map(|(w, js)| w * js)
        .sum())
}

fn histogram_probs(values: &[f64], edges: &BinEdges, counts: &mut [usize]) -> Vec<f64> {
    counts.iter_mut().for_each(|c| *c = 0);
    for &v in values {
        counts[edges.bin_of(v)] += 1;
    }
    let n = values.len() as f64;
    counts.iter().map(|&c| c as f64 / n).collect()
}

/// Weighted JS of consecutive chunks of `targets` (sized by `sizes`) against
/// the global histogram.
fn weighted_js_of_chunks(targets: &[f64], sizes: &[usize], edges: &BinEdges, global: &[f64]) -> f64 {
    let total: usize = sizes.iter().sum();
    let mut counts = vec![0usize; edges.bins()];
    let mut start = 0;
    let mut acc = 0.0;
    for &n in sizes {
        let chunk = &targets[start..start + n];
        start += n;
        if n == 0 {
            continue;
        }
        let pk = histogram_probs(chunk, edges, &mut counts);
        acc += (n as f64 / total as f64) * js_probs(&pk, global);
    }
    acc
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NullStats {
    pub mu_iid: f64,
    pub sigma_iid: f64,
    pub tau_iid: f64,
}

/// Mean, population std and `mean + 2·std` of the weighted divergence under
/// uniformly shuffled target-to-client assignments that keep client sizes.
/// Each replicate draws from its own seeded stream and replicates are
/// reduced in index order.
pub fn permutation_null(
    targets: &[f64],
    client_sizes: &[usize],
    edges: &BinEdges,
    n_permutations: usize,
    seed: u64,
) -> Result<NullStats> {
    let total: usize = client_sizes.iter().sum();
    if total != targets.len() {
        return Err(Error::DimensionMismatch {
            expected: targets.len(),
            actual: total,
        });
    }
    if n_permutations < 2 {
        return Err(Error::config("n_permutations", "must be >= 2"));
    }
    let global = fit_histogram(targets, edges)?.probabilities;
    let values: Vec<f64> = (0..n_permutations)
        .into_par_iter()
        .map(|i| {
            let mut shuffled = targets.to_vec();
            let mut r = rng::stream(seed, &[rng::tag::PERMUTATION, i as u64]);
            shuffled.shuffle(&mut r);
            weighted_js_of_chunks(&shuffled, client_sizes, edges, &global)
        })
        .collect();
    let n = values.len() as f64;
    let mu = values.iter().sum::<f64>() / n;
    let sigma = (values.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n).sqrt();
    Ok(NullStats {
        mu_iid: mu,
        sigma_iid: sigma,
        tau_iid: mu + 2.0 * sigma,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Classification {
    #[serde(rename = "IID")]
    Iid,
    #[serde(rename = "non-IID")]
    NonIid,
}

impl Classification {
    pub fn as_str(&self) -> &'static str {
        match self {
            Classification::Iid => "IID",
            Classification::NonIid => "non-IID",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientDivergence {
    pub client_id: String,
    pub n_samples: usize,
    pub js: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeterogeneityReport {
    pub per_client_js: BTreeMap<String, f64>,
    /// Clients by descending divergence.
    pub ranked: Vec<ClientDivergence>,
    pub js_weighted: f64,
    pub js_max: f64,
    pub mu_iid: f64,
    pub sigma_iid: f64,
    pub tau_iid: f64,
    pub classification: Classification,
    pub bins: usize,
    pub n_permutations: usize,
    pub seed: u64,
}

/// Non-IID iff the observed weighted divergence strictly exceeds the threshold.
pub fn classify(js_weighted: f64, tau_iid: f64) -> Classification {
    if js_weighted > tau_iid {
        Classification::NonIid
    } else {
        Classification::Iid
    }
}

/// Full analysis of `targets` partitioned into `partition`'s clients.
pub fn analyze(
    targets: &[f64],
    partition: &ClientPartition,
    cfg: &HeterogeneityConfig,
) -> Result<HeterogeneityReport> {
    cfg.validate()?;
    if partition.total() != targets.len() {
        return Err(Error::DimensionMismatch {
            expected: targets.len(),
            actual: partition.total(),
        });
    }
    let edges = BinEdges::equal_width(targets, cfg.bins)?;
    let global = fit_histogram(targets, &edges)?;
    let mut per_client = Vec::with_capacity(partition.len());
    for c in &partition.clients {
        let t: Vec<f64> = c.indices.iter().map(|&i| targets[i]).collect();
        per_client.push(js_divergence(&fit_histogram(&t, &edges)?, &global)?);
    }
    let js_weighted = weighted_js(partition, &per_client)?;
    let js_max = per_client.iter().copied().fold(0.0, f64::max);
    let null = permutation_null(targets, &partition.sizes(), &edges, cfg.n_permutations, cfg.seed)?;

    let mut ranked: Vec<ClientDivergence> = partition
        .clients
        .iter()
        .zip(&per_client)
        .map(|(c, &js)| ClientDivergence {
            client_id: c.id.clone(),
            n_samples: c.indices.len(),
            js,
        })
        .collect();
    ranked.sort_by(|a, b| b.js.total_cmp(&a.js).then_with(|| a.client_id.cmp(&b.client_id)));

    Ok(HeterogeneityReport {
        per_client_js: partition
            .clients
            .iter()
            .zip(&per_client)
            .map(|(c, &js)| (c.id.clone(), js))
            .collect(),
        ranked,
        js_weighted,
        js_max,
        mu_iid: null.mu_iid,
        sigma_iid: null.sigma_iid,
        tau_iid: null.tau_iid,
        classification: classify(js_weighted, null.tau_iid),
        bins: cfg.bins,
        n_permutations: cfg.n_permutations,
        seed: cfg.seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn density(p: &[f64]) -> HistogramDensity {
        HistogramDensity {
            edges: BinEdges {
                edges: (0..=p.len()).map(|i| i as f64).collect(),
            },
            probabilities: p.to_vec(),
        }
    }

    #[test]
    fn histogram_examples() {
        let edges = BinEdges::equal_width(&[0.0, 10.0], 5).unwrap();
        let h = fit_histogram(&[4.1, 4.5, 5.9], &edges).unwrap();
        assert_eq!(h.probabilities, vec![0.0, 0.0, 1.0, 0.0, 0.0]);
        // Uniform grid: two points per bin, upper edge in the last bin.
        let grid = [0.5, 1.5, 2.5, 3.5, 4.5, 5.5, 6.5, 7.5, 8.5, 10.0];
        let h = fit_histogram(&grid, &edges).unwrap();
        for p in &h.probabilities {
            assert_abs_diff_eq!(*p, 0.2, epsilon = 1e-15);
        }
        assert!(fit_histogram(&[], &edges).is_err());
    }

    #[test]
    fn kl_examples() {
        let p = density(&[0.2, 0.3, 0.5]);
        assert_eq!(kl_divergence(&p, &p).unwrap(), 0.0);
        let kl = kl_divergence(&density(&[1.0, 0.0]), &density(&[0.5, 0.5])).unwrap();
        assert_abs_diff_eq!(kl, LN_2, epsilon = 1e-15);
        assert!(matches!(
            kl_divergence(&density(&[0.5, 0.5]), &density(&[1.0, 0.0])),
            Err(Error::UnboundedKl { bin: 1 })
        ));
    }

    #[test]
    fn js_examples() {
        let p = density(&[0.1, 0.4, 0.5]);
        assert_eq!(js_divergence(&p, &p).unwrap(), 0.0);
        let js = js_divergence(&density(&[1.0, 0.0]), &density(&[0.0, 1.0])).unwrap();
        assert_abs_diff_eq!(js, LN_2, epsilon = 1e-15);
        let other = HistogramDensity {
            edges: BinEdges { edges: vec![0.0, 0.5, 1.0, 9.0] },
            probabilities: vec![0.2, 0.3, 0.5],
        };
        assert!(matches!(js_divergence(&p, &other), Err(Error::EdgeMismatch)));
    }

    #[test]
    fn weighted_examples() {
        let p = ClientPartition::by_station(&["a", "b", "b", "b"]).unwrap();
        assert_abs_diff_eq!(weighted_js(&p, &[0.4, 0.0]).unwrap(), 0.1, epsilon = 1e-15);
        assert_abs_diff_eq!(weighted_js(&p, &[0.2, 0.2]).unwrap(), 0.2, epsilon = 1e-15);
        let empty = ClientPartition { clients: vec![] };
        assert!(weighted_js(&empty, &[]).is_err());
    }

    #[test]
    fn null_of_identical_targets_is_zero() {
        let t = vec![7.5; 40];
        let edges = BinEdges::equal_width(&t, 50).unwrap();
        let n = permutation_null(&t, &[10, 20, 10], &edges, 20, 1).unwrap();
        assert_eq!((n.mu_iid, n.sigma_iid, n.tau_iid), (0.0, 0.0, 0.0));
    }

    #[test]
    fn null_is_seeded_and_checks_sizes() {
        let t: Vec<f64> = (0..60).map(|i| ((i * 37) % 23) as f64).collect();
        let edges = BinEdges::equal_width(&t, 10).unwrap();
        let a = permutation_null(&t, &[20, 25, 15], &edges, 30, 9).unwrap();
        let b = permutation_null(&t, &[20, 25, 15], &edges, 30, 9).unwrap();
        assert_eq!(a, b);
        assert!(permutation_null(&t, &[20, 20], &edges, 30, 9).is_err());
        assert!(permutation_null(&t, &[20, 25, 15], &edges, 1, 9).is_err());
    }

    #[test]
    fn classification_boundaries() {
        assert_eq!(classify(0.0169, 0.0069), Classification::NonIid);
        assert_eq!(classify(0.0, 0.0069), Classification::Iid);
        assert_eq!(classify(0.0069, 0.0069), Classification::Iid);
        assert_eq!(classify(0.0, 0.0), Classification::Iid);
    }

    #[test]
    fn report_is_consistent() {
        let ids: Vec<String> = (0..120).map(|i| format!("c{}", i % 6)).collect();
        let targets: Vec<f64> = (0..120).map(|i| ((i * 31) % 17) as f64 + (i % 6) as f64).collect();
        let p = ClientPartition::by_station(&ids).unwrap();
        let r = analyze(&targets, &p, &HeterogeneityConfig { bins: 8, n_permutations: 50, seed: 3 }).unwrap();
        assert_abs_diff_eq!(r.tau_iid, r.mu_iid + 2.0 * r.sigma_iid, epsilon = 1e-15);
        assert_eq!(r.classification == Classification::NonIid, r.js_weighted > r.tau_iid);
        assert_eq!(r.ranked.len(), 6);
        assert!(r.ranked.windows(2).all(|w| w[0].js >= w[1].js));
        assert_eq!(r.js_max, r.ranked[0].js);
        // brute-force Σ w_k JS_k
        let brute: f64 = p
            .clients
            .iter()
            .map(|c| c.indices.len() as f64 / 120.0 * r.per_client_js[&c.id])
            .sum();
        assert_abs_diff_eq!(r.js_weighted, brute, epsilon = 1e-12);
    }

    fn simplex(n: usize) -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(0.0f64..1.0, n).prop_filter_map("nonzero mass", |v| {
            let s: f64 = v.iter().sum();
            (s > 1e-6).then(|| v.iter().map(|x| x / s).collect())
        })
    }

    proptest! {
        #[test]
        fn js_bounds_and_symmetry(p in simplex(6), q in simplex(6)) {
            let (dp, dq) = (density(&p), density(&q));
            let a = js_divergence(&dp, &dq).unwrap();
            let b = js_divergence(&dq, &dp).unwrap();
            prop_assert!((0.0..=LN_2).contains(&a));
            prop_assert!((a - b).abs() < 1e-12);
        }

        #[test]
        fn kl_nonnegative(p in simplex(5), q in simplex(5)) {
            let q: Vec<f64> = q.iter().map(|x| 0.5 * x + 0.1).collect();
            let s: f64 = q.iter().sum();
            let q: Vec<f64> = q.iter().map(|x| x / s).collect();
            prop_assert!(kl_divergence(&density(&p), &density(&q)).unwrap() >= 0.0);
        }

        #[test]
        fn histogram_normalized(t in proptest::collection::vec(-50.0f64..50.0, 1..100), bins in 1usize..60) {
            let edges = BinEdges::equal_width(&t, bins).unwrap();
            let h = fit_histogram(&t, &edges).unwrap();
            prop_assert!((h.probabilities.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn weighted_within_bounds(js in proptest::collection::vec(0.0f64..LN_2, 1..8), seed in 0u64..1000) {
            let ids: Vec<String> = (0..js.len() * 3 + seed as usize % 5)
                .map(|i| format!("c{}", i % js.len()))
                .collect();
            let p = ClientPartition::by_station(&ids).unwrap();
            let w = weighted_js(&p, &js).unwrap();
            let lo = js.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = js.iter().copied().fold(0.0, f64::max);
            prop_assert!(w >= lo - 1e-12 && w <= hi + 1e-12);
        }
    }
}
