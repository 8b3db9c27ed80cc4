//! Owner key material and per-user fingerprint vectors.

use ndarray::{Array1, Array2, ArrayView1};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::codebook::AccCodebook;
use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};

/// Columns whose residual norm after projection falls below this fraction of
/// their drawn norm count as linearly dependent, forcing a redraw.
const RANK_TOLERANCE: f64 = 1e-8;

/// A `v x v` matrix with orthonormal columns, regenerated from `(v, seed)`.
#[derive(Debug, Clone, PartialEq)]
pub struct OrthonormalBasis {
    seed: u64,
    redraws: u32,
    columns: Array2<f64>,
}

impl OrthonormalBasis {
    pub fn v(&self) -> usize {
        self.columns.nrows()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Number of rank-deficient draws that were discarded.
    pub fn redraws(&self) -> u32 {
        self.redraws
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.columns
    }

    /// Basis column `u_i`, 0-based.
    pub fn column(&self, i: usize) -> ArrayView1<'_, f64> {
        self.columns.column(i)
    }
}

/// Draws an i.i.d. standard-normal `v x v` matrix and orthonormalizes it
/// with modified Gram-Schmidt (two passes).
pub fn generate_basis(v: usize, seed: u64) -> Result<OrthonormalBasis> {
    if v < 2 {
        return Err(Error::InvalidParams(format!("basis dimension must be >= 2, got {v}")));
    }
    let mut counter = 0u32;
    loop {
        let mut rng = stream_rng(seed, Stream::Basis, counter);
        let mut m = Array2::<f64>::zeros((v, v));
        for x in m.iter_mut() {
            *x = rng.sample(StandardNormal);
        }
        if modified_gram_schmidt(&mut m) {
            return Ok(OrthonormalBasis {
                seed,
                redraws: counter,
                columns: m,
            });
        }
        counter += 1;
    }
}

/// Orthonormalizes the columns in place; false if any column is numerically
/// dependent on its predecessors.
fn modified_gram_schmidt(m: &mut Array2<f64>) -> bool {
    let n = m.ncols();
    for j in 0..n {
        let drawn = m.column(j).dot(&m.column(j)).sqrt();
        for _pass in 0..2 {
            for i in 0..j {
                let proj = m.column(i).dot(&m.column(j));
                let ui = m.column(i).to_owned();
                m.column_mut(j).scaled_add(-proj, &ui);
            }
        }
        let norm = m.column(j).dot(&m.column(j)).sqrt();
        if !(norm > RANK_TOLERANCE * drawn) {
            return false;
        }
        m.column_mut(j).mapv_inplace(|x| x / norm);
    }
    true
}

/// The owner's secret `v x N` projection `X` with i.i.d. standard-normal
/// entries.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionMatrix {
    seed: u64,
    entries: Array2<f64>,
}

impl ProjectionMatrix {
    pub fn v(&self) -> usize {
        self.entries.nrows()
    }

    pub fn n_weights(&self) -> usize {
        self.entries.ncols()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.entries
    }

    /// `X w`.
    pub fn project(&self, w: &[f64]) -> Result<Vec<f64>> {
        if w.len() != self.n_weights() {
            return Err(Error::Dimension(format!(
                "projection expects {} weights, got {}",
                self.n_weights(),
                w.len()
            )));
        }
        Ok(self.entries.dot(&ArrayView1::from(w)).to_vec())
    }

    /// `X^T r`.
    pub fn project_transpose(&self, r: &[f64]) -> Result<Vec<f64>> {
        if r.len() != self.v() {
            return Err(Error::Dimension(format!(
                "transpose projection expects {} entries, got {}",
                self.v(),
                r.len()
            )));
        }
        Ok(self.entries.t().dot(&ArrayView1::from(r)).to_vec())
    }
}

pub fn generate_projection(v: usize, n_weights: usize, seed: u64) -> Result<ProjectionMatrix> {
    if v > n_weights {
        return Err(Error::InvalidParams(format!(
            "projection needs v <= N for a well-posed embedding, got v = {v}, N = {n_weights}"
        )));
    }
    let mut rng = stream_rng(seed, Stream::Projection, 0);
    let mut entries = Array2::<f64>::zeros((v, n_weights));
    for x in entries.iter_mut() {
        *x = rng.sample(StandardNormal);
    }
    Ok(ProjectionMatrix { seed, entries })
}

/// Basis and projection regenerated from a single master seed.
#[derive(Debug, Clone)]
pub struct OwnerKeys {
    pub basis: OrthonormalBasis,
    pub projection: ProjectionMatrix,
}

impl OwnerKeys {
    pub fn generate(v: usize, n_weights: usize, master_seed: u64) -> Result<Self> {
        Ok(Self {
            basis: generate_basis(v, master_seed)?,
            projection: generate_projection(v, n_weights, master_seed)?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    Orthogonal,
    Coded,
}

/// A user's fingerprint `f_j`, together with the coefficient vector that
/// generated it and the code-vector it should decode to.
#[derive(Debug, Clone, PartialEq)]
pub struct Fingerprint {
    pub user_id: usize,
    pub scheme: Scheme,
    pub values: Vec<f64>,
    pub coefficients: Vec<f64>,
    pub code: Vec<u8>,
}

impl Fingerprint {
    pub fn norm(&self) -> f64 {
        self.values.iter().map(|x| x * x).sum::<f64>().sqrt()
    }
}

/// `f_j = u_j` for the 1-based user `j`.
pub fn orthogonal_fingerprint(basis: &OrthonormalBasis, j: usize) -> Result<Fingerprint> {
    let v = basis.v();
    if j == 0 || j > v {
        return Err(Error::UserOutOfRange { index: j, max: v });
    }
    let mut coefficients = vec![0.0; v];
    coefficients[j - 1] = 1.0;
    let mut code = vec![0u8; v];
    code[j - 1] = 1;
    Ok(Fingerprint {
        user_id: j,
        scheme: Scheme::Orthogonal,
        values: basis.column(j - 1).to_vec(),
        coefficients,
        code,
    })
}

/// `f_j = sum_i b_ij u_i` for the 1-based user `j`.
pub fn coded_fingerprint(
    basis: &OrthonormalBasis,
    codebook: &AccCodebook,
    j: usize,
) -> Result<Fingerprint> {
    if basis.v() != codebook.v() {
        return Err(Error::Dimension(format!(
            "basis has dimension {}, codebook has code length {}",
            basis.v(),
            codebook.v()
        )));
    }
    if j == 0 || j > codebook.n() {
        return Err(Error::UserOutOfRange { index: j, max: codebook.n() });
    }
    let coefficients = codebook.coefficients(j - 1);
    let values = basis.matrix().dot(&Array1::from(coefficients.clone())).to_vec();
    Ok(Fingerprint {
        user_id: j,
        scheme: Scheme::Coded,
        values,
        coefficients,
        code: codebook.codevector(j - 1),
    })
}

/// Fingerprint for user `j` under whichever scheme the codebook implies.
pub fn fingerprint_for(
    basis: &OrthonormalBasis,
    codebook: &AccCodebook,
    j: usize,
) -> Result<Fingerprint> {
    if codebook.design().is_none() {
        if basis.v() != codebook.v() {
            return Err(Error::Dimension("basis and codebook dimensions differ".into()));
        }
        orthogonal_fingerprint(basis, j)
    } else {
        coded_fingerprint(basis, codebook, j)
    }
}

/// Elementwise mean of equal-length vectors (the averaging collusion).
pub fn compose_average<V: AsRef<[f64]>>(fingerprints: &[V]) -> Result<Vec<f64>> {
    let first = fingerprints.first().ok_or(Error::Empty("fingerprint list"))?;
    let v = first.as_ref().len();
    let mut acc = vec![0.0; v];
    for f in fingerprints {
        let f = f.as_ref();
        if f.len() != v {
            return Err(Error::Dimension(format!(
                "fingerprints of length {v} and {} cannot be averaged",
                f.len()
            )));
        }
        for (a, x) in acc.iter_mut().zip(f) {
            *a += x;
        }
    }
    let k = fingerprints.len() as f64;
    acc.iter_mut().for_each(|a| *a /= k);
    Ok(acc)
}

impl AsRef<[f64]> for Fingerprint {
    fn as_ref(&self) -> &[f64] {
        &self.values
    }
}
