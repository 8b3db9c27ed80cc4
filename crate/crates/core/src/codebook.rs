//! Balanced incomplete block designs and the AND anti-collusion codebooks
//! derived from them.
//!
//! A `(v, k, 1)` design yields a codebook of `b` code-vectors of length `v`:
//! each code-vector is the bit complement of one incidence column, and the
//! logical AND of any `k - 1` or fewer code-vectors is unique.

use std::collections::HashMap;
use std::fmt;

use num_rational::Ratio;
use serde::{Deserialize, Serialize};

use crate::bits::BitSet;
use crate::error::{Error, Result};

/// Parameters of a `(v, k, lambda)` design together with the derived block
/// count `b` and replication number `r`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BibdParams {
    pub v: usize,
    pub k: usize,
    pub lambda: usize,
    pub b: usize,
    pub r: usize,
}

impl BibdParams {
    pub fn new(v: usize, k: usize, lambda: usize) -> Result<Self> {
        if k < 2 || k >= v {
            return Err(Error::InvalidParams(format!(
                "need 2 <= k < v, got v = {v}, k = {k}"
            )));
        }
        if lambda == 0 {
            return Err(Error::InvalidParams("lambda must be at least 1".into()));
        }
        let b_num = lambda * v * (v - 1);
        let b_den = k * (k - 1);
        let r_num = lambda * (v - 1);
        let r_den = k - 1;
        if b_num % b_den != 0 || r_num % r_den != 0 {
            return Err(Error::InvalidParams(format!(
                "({v},{k},{lambda}) fails the divisibility conditions"
            )));
        }
        Ok(Self {
            v,
            k,
            lambda,
            b: b_num / b_den,
            r: r_num / r_den,
        })
    }

    /// Number of users a codebook built on this design supports (`n = b`).
    pub fn max_users(&self) -> usize {
        self.b
    }
}

impl fmt::Display for BibdParams {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{},{})", self.v, self.k, self.lambda)
    }
}

/// Binary `v x b` incidence matrix, row-major: entry `(i, j)` is 1 iff
/// point `i` lies in block `j`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IncidenceMatrix {
    params: BibdParams,
    construction: String,
    bits: Vec<u8>,
}

impl IncidenceMatrix {
    pub fn new(params: BibdParams, construction: impl Into<String>, bits: Vec<u8>) -> Result<Self> {
        if bits.len() != params.v * params.b {
            return Err(Error::Dimension(format!(
                "incidence payload has {} entries, expected {} x {}",
                bits.len(),
                params.v,
                params.b
            )));
        }
        if bits.iter().any(|&x| x > 1) {
            return Err(Error::InvalidParams("incidence entries must be 0 or 1".into()));
        }
        Ok(Self {
            params,
            construction: construction.into(),
            bits,
        })
    }

    pub fn from_rows(
        params: BibdParams,
        construction: impl Into<String>,
        rows: &[Vec<u8>],
    ) -> Result<Self> {
        if rows.len() != params.v || rows.iter().any(|r| r.len() != params.b) {
            return Err(Error::Dimension(format!(
                "expected a {} x {} matrix",
                params.v, params.b
            )));
        }
        Self::new(params, construction, rows.concat())
    }

    /// Builds the matrix from a block list; blocks hold 0-based point indices.
    pub fn from_blocks(
        params: BibdParams,
        construction: impl Into<String>,
        blocks: &[Vec<usize>],
    ) -> Result<Self> {
        if blocks.len() != params.b {
            return Err(Error::Dimension(format!(
                "expected {} blocks, got {}",
                params.b,
                blocks.len()
            )));
        }
        let mut bits = vec![0u8; params.v * params.b];
        for (j, block) in blocks.iter().enumerate() {
            for &i in block {
                if i >= params.v {
                    return Err(Error::Dimension(format!("point {i} out of range")));
                }
                bits[i * params.b + j] = 1;
            }
        }
        Self::new(params, construction, bits)
    }

    pub fn params(&self) -> BibdParams {
        self.params
    }

    pub fn construction(&self) -> &str {
        &self.construction
    }

    pub fn get(&self, i: usize, j: usize) -> u8 {
        self.bits[i * self.params.b + j]
    }

    pub fn row(&self, i: usize) -> &[u8] {
        &self.bits[i * self.params.b..(i + 1) * self.params.b]
    }

    pub fn rows(&self) -> Vec<Vec<u8>> {
        (0..self.params.v).map(|i| self.row(i).to_vec()).collect()
    }

    pub fn column(&self, j: usize) -> Vec<u8> {
        (0..self.params.v).map(|i| self.get(i, j)).collect()
    }

    /// Bitwise complement of every entry, keeping the parameters.
    pub fn complemented(&self) -> Self {
        Self {
            params: self.params,
            construction: self.construction.clone(),
            bits: self.bits.iter().map(|b| 1 - b).collect(),
        }
    }
}

fn is_prime(p: u64) -> bool {
    if p < 2 {
        return false;
    }
    let mut d = 2;
    while d * d <= p {
        if p % d == 0 {
            return false;
        }
        d += 1;
    }
    true
}

/// Normalized homogeneous coordinates of PG(2, p) in lexicographic order:
/// nonzero triples whose first nonzero coordinate is 1.
fn projective_points(p: u64) -> Vec<[u64; 3]> {
    let mut pts = Vec::new();
    for a in 0..p {
        for b in 0..p {
            for c in 0..p {
                let t = [a, b, c];
                if t.iter().find(|&&x| x != 0) == Some(&1) {
                    pts.push(t);
                }
            }
        }
    }
    pts
}

/// The projective plane of prime order `p`: a `(p^2+p+1, p+1, 1)` design.
///
/// Points are the 1-D subspaces of GF(p)^3 and blocks the 2-D subspaces,
/// each named by its normal vector; both lists are sorted lexicographically
/// on normalized coordinates.
pub fn construct_projective_plane(p: u64) -> Result<IncidenceMatrix> {
    if !is_prime(p) {
        return Err(Error::NotPrime(p));
    }
    let pts = projective_points(p);
    let n = pts.len();
    let params = BibdParams::new(n, p as usize + 1, 1)?;
    let mut bits = vec![0u8; n * n];
    for (i, x) in pts.iter().enumerate() {
        for (j, normal) in pts.iter().enumerate() {
            let dot = (0..3).map(|t| x[t] * normal[t]).sum::<u64>() % p;
            if dot == 0 {
                bits[i * n + j] = 1;
            }
        }
    }
    IncidenceMatrix::new(params, format!("projective-plane(p={p})"), bits)
}

/// A `(v, 3, 1)` Steiner triple system: Bose construction for v = 3 (mod 6),
/// Skolem construction for v = 1 (mod 6). Blocks are sorted lexicographically.
pub fn construct_steiner_triple(v: usize) -> Result<IncidenceMatrix> {
    if v < 7 || !matches!(v % 6, 1 | 3) {
        return Err(Error::SteinerOrder(v));
    }
    let (mut blocks, name) = if v % 6 == 3 {
        (bose_blocks(v), "steiner-bose")
    } else {
        (skolem_blocks(v), "steiner-skolem")
    };
    for b in &mut blocks {
        b.sort_unstable();
    }
    blocks.sort();
    let params = BibdParams::new(v, 3, 1)?;
    IncidenceMatrix::from_blocks(params, format!("{name}(v={v})"), &blocks)
}

fn bose_blocks(v: usize) -> Vec<Vec<usize>> {
    // Idempotent commutative quasigroup of odd order q: x o y = (x + y)(q + 1)/2.
    let q = v / 3;
    let half = q.div_ceil(2);
    let op = |x: usize, y: usize| ((x + y) * half) % q;
    let pt = |x: usize, i: usize| x + (i % 3) * q;
    let mut blocks = Vec::with_capacity(v * (v - 1) / 6);
    for x in 0..q {
        blocks.push(vec![pt(x, 0), pt(x, 1), pt(x, 2)]);
    }
    for i in 0..3 {
        for x in 0..q {
            for y in x + 1..q {
                blocks.push(vec![pt(x, i), pt(y, i), pt(op(x, y), i + 1)]);
            }
        }
    }
    blocks
}

fn skolem_blocks(v: usize) -> Vec<Vec<usize>> {
    // Half-idempotent commutative quasigroup of order 2m obtained by renaming
    // the symbols of (Z_2m, +): s -> s/2 for even s, m + (s-1)/2 for odd s.
    let q = (v - 1) / 3;
    let m = q / 2;
    let op = |x: usize, y: usize| {
        let s = (x + y) % q;
        if s % 2 == 0 {
            s / 2
        } else {
            m + (s - 1) / 2
        }
    };
    let pt = |x: usize, i: usize| x + (i % 3) * q;
    let inf = 3 * q;
    let mut blocks = Vec::with_capacity(v * (v - 1) / 6);
    for x in 0..m {
        blocks.push(vec![pt(x, 0), pt(x, 1), pt(x, 2)]);
        for i in 0..3 {
            blocks.push(vec![inf, pt(x + m, i), pt(x, i + 1)]);
        }
    }
    for i in 0..3 {
        for x in 0..q {
            for y in x + 1..q {
                blocks.push(vec![pt(x, i), pt(y, i), pt(op(x, y), i + 1)]);
            }
        }
    }
    blocks
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Violation {
    ColumnWeight { column: usize, expected: usize, found: usize },
    RowWeight { row: usize, expected: usize, found: usize },
    PairConcurrence { rows: (usize, usize), expected: usize, found: usize },
}

/// Outcome of [`validate_bibd`]; empty iff the matrix is a valid design for
/// its claimed parameters.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

pub fn validate_bibd(m: &IncidenceMatrix) -> ValidationReport {
    let BibdParams { v, k, lambda, b, r } = m.params;
    let mut violations = Vec::new();
    for j in 0..b {
        let found = (0..v).map(|i| m.get(i, j) as usize).sum();
        if found != k {
            violations.push(Violation::ColumnWeight { column: j, expected: k, found });
        }
    }
    for i in 0..v {
        let found = m.row(i).iter().map(|&x| x as usize).sum();
        if found != r {
            violations.push(Violation::RowWeight { row: i, expected: r, found });
        }
    }
    for i in 0..v {
        for i2 in i + 1..v {
            let found = m
                .row(i)
                .iter()
                .zip(m.row(i2))
                .filter(|(a, b)| **a == 1 && **b == 1)
                .count();
            if found != lambda {
                violations.push(Violation::PairConcurrence {
                    rows: (i, i2),
                    expected: lambda,
                    found,
                });
            }
        }
    }
    ValidationReport { violations }
}

/// How code bits map to basis coefficients.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modulation {
    /// `b = 2c - 1`, used by BIBD codebooks.
    Antipodal,
    /// `b = c`, used by the identity (orthogonal) codebook so that user `j`
    /// carries exactly the basis column `u_j`.
    OnOff,
}

/// A binary anti-collusion codebook: `v x n` code-vectors (one column per
/// user) and their coefficient matrix.
#[derive(Debug, Clone)]
pub struct AccCodebook {
    design: Option<BibdParams>,
    construction: String,
    v: usize,
    n: usize,
    modulation: Modulation,
    incidence: Option<IncidenceMatrix>,
    codevectors: Vec<u8>,
    columns: Vec<BitSet>,
}

impl AccCodebook {
    fn from_codevectors(
        design: Option<BibdParams>,
        construction: String,
        v: usize,
        n: usize,
        modulation: Modulation,
        incidence: Option<IncidenceMatrix>,
        codevectors: Vec<u8>,
    ) -> Self {
        let columns = (0..n)
            .map(|j| BitSet::from_bits(&(0..v).map(|i| codevectors[i * n + j]).collect::<Vec<_>>()))
            .collect();
        Self {
            design,
            construction,
            v,
            n,
            modulation,
            incidence,
            codevectors,
            columns,
        }
    }

    /// The identity codebook of orthogonal fingerprinting: `n = v` users,
    /// user `j` owns only bit `j`.
    pub fn identity(v: usize) -> Result<Self> {
        if v < 2 {
            return Err(Error::InvalidParams("identity codebook needs v >= 2".into()));
        }
        let mut bits = vec![0u8; v * v];
        for i in 0..v {
            bits[i * v + i] = 1;
        }
        Ok(Self::from_codevectors(
            None,
            format!("identity(v={v})"),
            v,
            v,
            Modulation::OnOff,
            None,
            bits,
        ))
    }

    pub fn design(&self) -> Option<BibdParams> {
        self.design
    }

    pub fn construction(&self) -> &str {
        &self.construction
    }

    pub fn incidence(&self) -> Option<&IncidenceMatrix> {
        self.incidence.as_ref()
    }

    pub fn modulation(&self) -> Modulation {
        self.modulation
    }

    /// Code length (fingerprint dimension).
    pub fn v(&self) -> usize {
        self.v
    }

    /// Number of users.
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn codevector_bit(&self, i: usize, j: usize) -> u8 {
        self.codevectors[i * self.n + j]
    }

    /// Code-vector of the 0-based column `j`.
    pub fn codevector(&self, j: usize) -> Vec<u8> {
        (0..self.v).map(|i| self.codevector_bit(i, j)).collect()
    }

    pub(crate) fn column_bits(&self, j: usize) -> &BitSet {
        &self.columns[j]
    }

    pub fn coefficient(&self, i: usize, j: usize) -> f64 {
        let c = f64::from(self.codevector_bit(i, j));
        match self.modulation {
            Modulation::Antipodal => 2.0 * c - 1.0,
            Modulation::OnOff => c,
        }
    }

    /// Coefficient column `b_j` of the 0-based column `j`.
    pub fn coefficients(&self, j: usize) -> Vec<f64> {
        (0..self.v).map(|i| self.coefficient(i, j)).collect()
    }

    /// Largest colluder count the codebook resolves uniquely.
    pub fn resilience(&self) -> usize {
        match self.design {
            Some(p) => p.k - 1,
            None => 1,
        }
    }

    /// Users per basis vector, `n / v`.
    pub fn efficiency(&self) -> Ratio<u64> {
        Ratio::new(self.n as u64, self.v as u64)
    }

    /// AND-composition of the given 0-based columns.
    pub fn and_composition(&self, columns: &[usize]) -> BitSet {
        let mut acc = BitSet::ones(self.v);
        for &j in columns {
            acc = acc.and(&self.columns[j]);
        }
        acc
    }

    /// Exhaustively checks that all AND-compositions of at most `k_max`
    /// columns are distinct.
    pub fn check_and_resilience(&self, k_max: usize) -> Result<()> {
        let mut seen: HashMap<BitSet, ()> = HashMap::new();
        let mut stack: Vec<usize> = Vec::with_capacity(k_max);
        fn walk(
            book: &AccCodebook,
            start: usize,
            acc: &BitSet,
            depth_left: usize,
            stack: &mut Vec<usize>,
            seen: &mut HashMap<BitSet, ()>,
            k_max: usize,
        ) -> Result<()> {
            for j in start..book.n {
                let next = acc.and(&book.columns[j]);
                stack.push(j);
                if seen.insert(next.clone(), ()).is_some() {
                    return Err(Error::NotResilient {
                        k: k_max,
                        composition: format!("{:?}", next.to_bits()),
                    });
                }
                if depth_left > 1 {
                    walk(book, j + 1, &next, depth_left - 1, stack, seen, k_max)?;
                }
                stack.pop();
            }
            Ok(())
        }
        if k_max == 0 {
            return Ok(());
        }
        walk(self, 0, &BitSet::ones(self.v), k_max, &mut stack, &mut seen, k_max)
    }

    pub fn export(&self) -> CodebookExport {
        let rows = |bits: &[u8], cols: usize| -> Vec<Vec<u8>> {
            bits.chunks(cols).map(|r| r.to_vec()).collect()
        };
        let (k, lambda, b) = match self.design {
            Some(p) => (p.k, p.lambda, p.b),
            None => (1, 0, self.n),
        };
        CodebookExport {
            v: self.v,
            k,
            lambda,
            b,
            construction: self.construction.clone(),
            incidence: self
                .incidence
                .as_ref()
                .map(|m| m.rows())
                .unwrap_or_else(|| rows(&self.codevectors, self.n)),
            codevectors: rows(&self.codevectors, self.n),
        }
    }
}

/// Derives the AND-ACC codebook from a `(v, k, 1)` design. For `v <= 31`
/// the `(k-1)`-resilience property is verified exhaustively.
pub fn to_acc_codebook(m: &IncidenceMatrix) -> Result<AccCodebook> {
    let params = m.params();
    if params.lambda != 1 {
        return Err(Error::InvalidDesign(format!(
            "AND-ACC derivation needs lambda = 1, got {}",
            params.lambda
        )));
    }
    let report = validate_bibd(m);
    if !report.is_valid() {
        return Err(Error::InvalidDesign(format!(
            "{} violation(s), first: {:?}",
            report.violations.len(),
            report.violations[0]
        )));
    }
    let code = m.complemented();
    let book = AccCodebook::from_codevectors(
        Some(params),
        m.construction().to_string(),
        params.v,
        params.b,
        Modulation::Antipodal,
        Some(m.clone()),
        code.bits,
    );
    if params.v <= 31 {
        book.check_and_resilience(params.k - 1)?;
    }
    Ok(book)
}

/// Users per basis vector of a `(v, k, 1)` AND-ACC, `(v - 1) / (k (k - 1))`.
pub fn codebook_efficiency(params: &BibdParams) -> Ratio<u64> {
    Ratio::new(
        (params.v - 1) as u64,
        (params.k * (params.k - 1)) as u64,
    )
}

/// JSON export of a codebook, matrices row-major.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodebookExport {
    pub v: usize,
    pub k: usize,
    pub lambda: usize,
    pub b: usize,
    pub construction: String,
    pub incidence: Vec<Vec<u8>>,
    pub codevectors: Vec<Vec<u8>>,
}

/// Named codebook constructions, as used in configs and the registry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum CodebookSpec {
    Projective { p: u64 },
    Steiner { v: usize },
    Orthogonal { v: usize },
}

impl CodebookSpec {
    pub fn build(&self) -> Result<AccCodebook> {
        match *self {
            CodebookSpec::Projective { p } => to_acc_codebook(&construct_projective_plane(p)?),
            CodebookSpec::Steiner { v } => to_acc_codebook(&construct_steiner_triple(v)?),
            CodebookSpec::Orthogonal { v } => AccCodebook::identity(v),
        }
    }
}

impl std::str::FromStr for CodebookSpec {
    type Err = Error;

    /// Parses `projective:P`, `steiner:V` or `orthogonal:V`.
    fn from_str(s: &str) -> Result<Self> {
        let (kind, arg) = s
            .split_once(':')
            .ok_or_else(|| Error::Config(format!("codebook spec {s:?} must look like kind:N")))?;
        let n: u64 = arg
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("bad number in codebook spec {s:?}")))?;
        match kind.trim() {
            "projective" => Ok(CodebookSpec::Projective { p: n }),
            "steiner" => Ok(CodebookSpec::Steiner { v: n as usize }),
            "orthogonal" => Ok(CodebookSpec::Orthogonal { v: n as usize }),
            other => Err(Error::Config(format!("unknown codebook kind {other:?}"))),
        }
    }
}

impl fmt::Display for CodebookSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CodebookSpec::Projective { p } => write!(f, "projective:{p}"),
            CodebookSpec::Steiner { v } => write!(f, "steiner:{v}"),
            CodebookSpec::Orthogonal { v } => write!(f, "orthogonal:{v}"),
        }
    }
}

/// True when `b` equals `a` after permuting rows and permuting columns.
/// Backtracking over row bijections; intended for small matrices.
pub fn equivalent_up_to_permutation(a: &[Vec<u8>], b: &[Vec<u8>]) -> bool {
    if a.len() != b.len() || a.iter().zip(b).any(|(x, y)| x.len() != y.len()) {
        return false;
    }
    let rows = a.len();
    let cols = a.first().map_or(0, Vec::len);
    let weight = |r: &Vec<u8>| r.iter().filter(|&&x| x == 1).count();
    let col_sorted = |m: &[Vec<u8>], order: &[usize]| {
        let mut cs: Vec<Vec<u8>> = (0..cols)
            .map(|j| order.iter().map(|&i| m[i][j]).collect())
            .collect();
        cs.sort();
        cs
    };
    let target = col_sorted(b, &(0..rows).collect::<Vec<_>>());

    fn search(
        a: &[Vec<u8>],
        b: &[Vec<u8>],
        order: &mut Vec<usize>,
        used: &mut [bool],
        weight: &dyn Fn(&Vec<u8>) -> usize,
        done: &mut dyn FnMut(&[usize]) -> bool,
    ) -> bool {
        let pos = order.len();
        if pos == b.len() {
            return done(order);
        }
        for i in 0..a.len() {
            if used[i] || weight(&a[i]) != weight(&b[pos]) {
                continue;
            }
            used[i] = true;
            order.push(i);
            if search(a, b, order, used, weight, done) {
                return true;
            }
            order.pop();
            used[i] = false;
        }
        false
    }

    let mut used = vec![false; rows];
    let mut order = Vec::with_capacity(rows);
    search(a, b, &mut order, &mut used, &weight, &mut |order| {
        col_sorted(a, order) == target
    })
}

/// Code-vectors of the textbook (7,3,1) example, one column per user.
///
/// The commonly printed version of this matrix has a 1 at row 2, column 4,
/// which breaks both the row and column weights; the entry is 0 here.
pub const REFERENCE_FANO_CODEVECTORS: [[u8; 7]; 7] = [
    [0, 0, 0, 1, 1, 1, 1],
    [0, 1, 1, 0, 0, 1, 1],
    [1, 0, 1, 0, 1, 0, 1],
    [0, 1, 1, 1, 1, 0, 0],
    [1, 1, 0, 0, 1, 1, 0],
    [1, 0, 1, 1, 0, 1, 0],
    [1, 1, 0, 1, 0, 0, 1],
];

/// The (7,3,1) codebook in the column order of the textbook example, so
/// users 1, 6 and 7 carry the code-vectors used there.
pub fn reference_fano_codebook() -> AccCodebook {
    let params = BibdParams::new(7, 3, 1).expect("valid parameters");
    let rows: Vec<Vec<u8>> = REFERENCE_FANO_CODEVECTORS.iter().map(|r| r.to_vec()).collect();
    let code = IncidenceMatrix::from_rows(params, "reference-fano", &rows).expect("7 x 7");
    to_acc_codebook(&code.complemented()).expect("reference matrix is a valid design")
}
