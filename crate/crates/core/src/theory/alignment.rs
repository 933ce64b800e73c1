//! How far the singular vectors of fine-tuned weights drift from those of
//! the base weights: entry statistics of `E^P = UᵀU* − I`, `E^Q = VᵀV* − I`
//! and the diagonal similarity of the top-r block.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{svd, Matrix};

pub const HISTOGRAM_BINS: usize = 101;
const HISTOGRAM_HALF_WIDTH_STDS: f64 = 5.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    /// `HISTOGRAM_BINS` counts; entries outside `[lo, hi]` are clamped into
    /// the edge bins.
    pub counts: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntryStats {
    pub count: usize,
    pub mean: f64,
    pub std: f64,
    pub mean_abs: f64,
    pub max_abs: f64,
    pub histogram: Histogram,
}

impl EntryStats {
    pub fn from_values(values: &[f64]) -> Self {
        let count = values.len();
        if count == 0 {
            return Self {
                count,
                mean: 0.0,
                std: 0.0,
                mean_abs: 0.0,
                max_abs: 0.0,
                histogram: Histogram {
                    lo: 0.0,
                    hi: 0.0,
                    counts: vec![0; HISTOGRAM_BINS],
                },
            };
        }
        let k = count as f64;
        let mean = values.iter().sum::<f64>() / k;
        let std = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / k).sqrt();
        let mean_abs = values.iter().map(|v| v.abs()).sum::<f64>() / k;
        let max_abs = values.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        let half = HISTOGRAM_HALF_WIDTH_STDS * std;
        let (lo, hi) = (-half, half);
        let mut counts = vec![0u64; HISTOGRAM_BINS];
        for v in values {
            let bin = if half > 0.0 {
                let x = ((v - lo) / (hi - lo) * HISTOGRAM_BINS as f64).floor();
                x.clamp(0.0, (HISTOGRAM_BINS - 1) as f64) as usize
            } else {
                HISTOGRAM_BINS / 2
            };
            counts[bin] += 1;
        }
        Self {
            count,
            mean,
            std,
            mean_abs,
            max_abs,
            histogram: Histogram { lo, hi, counts },
        }
    }
}

/// `E^P`, `E^Q` (both `k x k`, `k = min(m, n)`) and the diagonal similarity
/// over the leading `r` indices for one weight pair.
#[derive(Clone, Debug, PartialEq)]
pub struct PairAlignment {
    pub ep: Matrix,
    pub eq: Matrix,
    pub diagonal_similarity: f64,
}

pub fn pair_alignment(w0: &Matrix, w_star: &Matrix, r: usize) -> Result<PairAlignment> {
    if w0.shape() != w_star.shape() {
        return Err(Error::mismatch(
            "pair_alignment",
            format!("{:?}", w0.shape()),
            format!("{:?}", w_star.shape()),
        ));
    }
    let a = svd(w0)?;
    let b = svd(w_star)?;
    let k = a.s.len();
    if r == 0 || r > k {
        return Err(Error::RankOutOfRange {
            rank: r,
            max: k,
            context: Some("diagonal similarity".into()),
        });
    }
    let mut cross_u = a.u.t_matmul(&b.u);
    let mut cross_v = a.v.t_matmul(&b.v);
    // The largest-entry sign rule is per matrix; a near-tie can flip one
    // column of U* relative to U. Flipping a (u*, v*) pair together leaves
    // W* unchanged, so pair the signs against the base factors.
    for j in 0..k {
        if cross_u[(j, j)] < 0.0 {
            for i in 0..k {
                cross_u[(i, j)] = -cross_u[(i, j)];
                cross_v[(i, j)] = -cross_v[(i, j)];
            }
        }
    }
    let diagonal_similarity = (0..r).map(|i| cross_u[(i, i)].abs()).sum::<f64>() / r as f64;
    let eye = Matrix::identity(k);
    Ok(PairAlignment {
        ep: &cross_u - &eye,
        eq: &cross_v - &eye,
        diagonal_similarity,
    })
}

/// Largest entrywise `|E^P|`, `|E^Q|`: the measured `ε` of an external pair.
pub fn measured_eps(w0: &Matrix, w_star: &Matrix) -> Result<f64> {
    let k = w0.rows().min(w0.cols());
    let pa = pair_alignment(w0, w_star, k)?;
    Ok(pa.ep.max_abs().max(pa.eq.max_abs()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupSimilarity {
    pub group: String,
    pub layers: usize,
    pub mean: f64,
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentReport {
    pub rank: usize,
    pub ep: EntryStats,
    pub eq: EntryStats,
    pub groups: Vec<GroupSimilarity>,
}

impl AlignmentReport {
    pub fn min_group_similarity(&self) -> f64 {
        self.groups.iter().map(|g| g.mean).fold(f64::INFINITY, f64::min)
    }
}

/// Pools `E^P`/`E^Q` entries over all pairs and reports diagonal
/// similarity per group, in order of first appearance.
pub fn alignment_stats<'a, I>(pairs: I, r: usize) -> Result<AlignmentReport>
where
    I: IntoIterator<Item = (&'a str, &'a Matrix, &'a Matrix)>,
{
    let mut ep = Vec::new();
    let mut eq = Vec::new();
    let mut per_group: Vec<(String, Vec<f64>)> = Vec::new();
    for (group, w0, w_star) in pairs {
        let pa = pair_alignment(w0, w_star, r)?;
        ep.extend_from_slice(pa.ep.as_slice());
        eq.extend_from_slice(pa.eq.as_slice());
        match per_group.iter_mut().find(|(g, _)| g == group) {
            Some((_, v)) => v.push(pa.diagonal_similarity),
            None => per_group.push((group.to_string(), vec![pa.diagonal_similarity])),
        }
    }
    let groups = per_group
        .into_iter()
        .map(|(group, v)| {
            let k = v.len() as f64;
            let mean = v.iter().sum::<f64>() / k;
            let std = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / k).sqrt();
            GroupSimilarity {
                group,
                layers: v.len(),
                mean,
                std,
            }
        })
        .collect();
    Ok(AlignmentReport {
        rank: r,
        ep: EntryStats::from_values(&ep),
        eq: EntryStats::from_values(&eq),
        groups,
    })
}
