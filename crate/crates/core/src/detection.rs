//! Blind extraction, hard-threshold decoding and colluder identification.
//!
//! Extraction sees only the suspect marked tensor and the owner's secrets
//! (`X`, `U`, codebook); nothing here takes the unmarked model.

use std::collections::BTreeSet;

use ndarray::ArrayView1;
use serde::{Deserialize, Serialize};

use crate::bits::BitSet;
use crate::codebook::AccCodebook;
use crate::error::{Error, Result};
use crate::fingerprint::{OrthonormalBasis, ProjectionMatrix};
use crate::host::{flatten_average, MarkedTensor};

/// Default threshold for orthogonal colluder detection.
pub const DEFAULT_TAU_ORTHOGONAL: f64 = 0.3;

/// `f~ = X * flatten_average(W~)`.
pub fn extract_fingerprint(tensor: &MarkedTensor, x: &ProjectionMatrix) -> Result<Vec<f64>> {
    if tensor.flat_len() != x.n_weights() {
        return Err(Error::Dimension(format!(
            "tensor flattens to {} weights, projection has {} columns",
            tensor.flat_len(),
            x.n_weights()
        )));
    }
    x.project(flatten_average(tensor).as_slice())
}

/// Raw inner products of an extracted fingerprint with each basis column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationScores {
    pub values: Vec<f64>,
}

pub fn correlation_scores(f: &[f64], basis: &OrthonormalBasis) -> Result<CorrelationScores> {
    if f.len() != basis.v() {
        return Err(Error::Dimension(format!(
            "fingerprint has length {}, basis dimension is {}",
            f.len(),
            basis.v()
        )));
    }
    let values = basis.matrix().t().dot(&ArrayView1::from(f)).to_vec();
    if values.iter().any(|s| !s.is_finite()) {
        return Err(Error::InvalidParams("non-finite correlation score".into()));
    }
    Ok(CorrelationScores { values })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodedCode {
    pub bits: Vec<u8>,
    pub tau: f64,
}

/// `bit_i = 1` iff `score_i > tau` (strict).
pub fn decode_codevector(scores: &CorrelationScores, tau: f64) -> DecodedCode {
    DecodedCode {
        bits: scores.values.iter().map(|&s| u8::from(s > tau)).collect(),
        tau,
    }
}

/// 1-based user whose code-vector equals `code`, if any.
pub fn identify_user(code: &DecodedCode, codebook: &AccCodebook) -> Option<usize> {
    if code.bits.len() != codebook.v() {
        return None;
    }
    (0..codebook.n())
        .find(|&j| (0..codebook.v()).all(|i| codebook.codevector_bit(i, j) == code.bits[i]))
        .map(|j| j + 1)
}

/// All minimal colluder sets consistent with a decoded code.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColluderVerdict {
    pub decoded_bits: Vec<u8>,
    pub tau: f64,
    /// 1-based user sets, each sorted, listed in lexicographic order.
    pub feasible_sets: Vec<Vec<usize>>,
    pub unique: bool,
}

/// Finds every minimal set `S` of at most `k_cap` users whose code-vectors
/// AND to `code`.
///
/// A column can take part only if it has ones wherever the code has ones.
/// Each candidate then "covers" the zero positions of the code where its
/// own code-vector is zero, and feasible sets are exactly the covers of the
/// code's zero positions. Covers are grown by always branching on the
/// lowest uncovered position, which reaches every minimal cover, and the
/// non-minimal ones are filtered out afterwards.
pub fn detect_colluders(code: &DecodedCode, codebook: &AccCodebook, k_cap: usize) -> Result<ColluderVerdict> {
    if k_cap == 0 {
        return Err(Error::InvalidParams("k_cap must be at least 1".into()));
    }
    if code.bits.len() != codebook.v() {
        return Err(Error::Dimension(format!(
            "decoded code has length {}, codebook has v = {}",
            code.bits.len(),
            codebook.v()
        )));
    }
    let target = BitSet::from_bits(&code.bits);
    let zeros = target.complement();
    let candidates: Vec<(usize, BitSet)> = (0..codebook.n())
        .filter(|&j| target.is_subset_of(codebook.column_bits(j)))
        .map(|j| (j, codebook.column_bits(j).complement()))
        .collect();

    let mut found: BTreeSet<Vec<usize>> = BTreeSet::new();
    if zeros.count_ones() == 0 {
        // Only an all-ones code: any single candidate equal to it suffices.
        for (j, cover) in &candidates {
            if cover.count_ones() == 0 {
                found.insert(vec![*j]);
            }
        }
    } else {
        let max_cover = candidates.iter().map(|(_, c)| c.count_ones()).max().unwrap_or(0);
        let mut chosen = Vec::with_capacity(k_cap);
        grow_covers(
            &candidates,
            &zeros,
            &BitSet::zeros(codebook.v()),
            k_cap,
            max_cover,
            &mut chosen,
            &mut found,
        );
    }

    let feasible_sets: Vec<Vec<usize>> = found
        .into_iter()
        .filter(|set| is_minimal_cover(set, &candidates, &zeros))
        .map(|set| {
            let mut users: Vec<usize> = set.iter().map(|&c| candidates[c].0 + 1).collect();
            users.sort_unstable();
            users
        })
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let unique = feasible_sets.len() == 1;
    Ok(ColluderVerdict {
        decoded_bits: code.bits.clone(),
        tau: code.tau,
        feasible_sets,
        unique,
    })
}

/// `chosen` holds indices into `candidates`.
fn grow_covers(
    candidates: &[(usize, BitSet)],
    zeros: &BitSet,
    covered: &BitSet,
    budget: usize,
    max_cover: usize,
    chosen: &mut Vec<usize>,
    found: &mut BTreeSet<Vec<usize>>,
) {
    let uncovered = zeros.and_not(covered);
    let Some(e) = uncovered.first_set() else {
        let mut set = chosen.clone();
        set.sort_unstable();
        found.insert(set);
        return;
    };
    if budget == 0 || uncovered.count_ones() > budget * max_cover {
        return;
    }
    for (c, (_, cover)) in candidates.iter().enumerate() {
        if !cover.get(e) || chosen.contains(&c) {
            continue;
        }
        let mut next = covered.clone();
        next.or_assign(cover);
        chosen.push(c);
        grow_covers(candidates, zeros, &next, budget - 1, max_cover, chosen, found);
        chosen.pop();
    }
}

/// Minimal iff every member covers some zero position no other member does.
fn is_minimal_cover(set: &[usize], candidates: &[(usize, BitSet)], zeros: &BitSet) -> bool {
    if zeros.count_ones() == 0 {
        return set.len() == 1;
    }
    set.iter().all(|&c| {
        let mut others = BitSet::zeros(zeros.len());
        for &o in set.iter().filter(|&&o| o != c) {
            others.or_assign(&candidates[o].1);
        }
        candidates[c].1.and(zeros).and_not(&others).count_ones() > 0
    })
}

/// Orthogonal-scheme colluders: 1-based indices whose score exceeds `tau`.
pub fn detect_orthogonal(scores: &CorrelationScores, tau: f64) -> Vec<usize> {
    scores
        .values
        .iter()
        .enumerate()
        .filter(|(_, &s)| s > tau)
        .map(|(i, _)| i + 1)
        .collect()
}
