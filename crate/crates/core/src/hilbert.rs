//! Dense complex linear algebra on small Hilbert spaces.
//!
//! Joint amplitudes are stored row-major over `(a, e)`: the amplitude of the
//! product basis state `|a>|e>` lives at index `a * dim_e + e`.

use nalgebra::{Complex, DMatrix, DVector, SymmetricEigen};

use crate::error::{validation, Error, Result};
use crate::scalar::{abs, cplx, phase, Real};

pub type CVector<T> = DVector<Complex<T>>;
pub type CMatrix<T> = DMatrix<Complex<T>>;

/// Default ceiling on the total Hilbert-space dimension.
pub const DEFAULT_MAX_DIM: usize = 4096;

const NORM_TOL: f64 = 1e-10;
const HERMITIAN_TOL: f64 = 1e-12;

fn norm_sqr<T: Real>(v: &CVector<T>) -> T {
    v.iter().fold(T::zero(), |acc, z| acc + z.norm_sqr())
}

/// `<a|b>`.
pub fn inner<T: Real>(a: &CVector<T>, b: &CVector<T>) -> Complex<T> {
    a.dotc(b)
}

fn normalize<T: Real>(mut v: CVector<T>) -> Result<CVector<T>> {
    let n = norm_sqr(&v).sqrt();
    if n <= T::zero() || !n.is_finite() {
        return Err(validation("cannot normalize a zero or non-finite vector"));
    }
    let inv = T::one() / n;
    v.iter_mut().for_each(|z| *z = z.scale(inv));
    Ok(v)
}

fn check_norm<T: Real>(v: &CVector<T>, what: &str) -> Result<()> {
    let n = norm_sqr(v);
    if (n - T::one()).abs() > T::tol(NORM_TOL) {
        return Err(validation(format!(
            "{what} is not normalized: squared norm {}",
            n.as_f64()
        )));
    }
    Ok(())
}

/// A normalized vector in a single Hilbert space.
#[derive(Debug, Clone, PartialEq)]
pub struct StateVector<T: Real> {
    amplitudes: CVector<T>,
}

impl<T: Real> StateVector<T> {
    /// Wraps amplitudes that must already be normalized.
    pub fn new(amplitudes: CVector<T>) -> Result<Self> {
        if amplitudes.is_empty() {
            return Err(validation("state vector must have positive dimension"));
        }
        check_norm(&amplitudes, "state vector")?;
        Ok(Self { amplitudes })
    }

    /// Normalizes the given amplitudes.
    pub fn normalized(amplitudes: CVector<T>) -> Result<Self> {
        Ok(Self {
            amplitudes: normalize(amplitudes)?,
        })
    }

    pub fn from_slice(amplitudes: &[Complex<T>]) -> Result<Self> {
        Self::normalized(CVector::from_column_slice(amplitudes))
    }

    /// Computational basis vector `e_k`.
    pub fn basis(dim: usize, k: usize) -> Self {
        assert!(k < dim, "basis index out of range");
        let mut v = CVector::zeros(dim);
        v[k] = Complex::new(T::one(), T::zero());
        Self { amplitudes: v }
    }

    pub(crate) fn from_raw(amplitudes: CVector<T>) -> Self {
        Self { amplitudes }
    }

    pub fn dim(&self) -> usize {
        self.amplitudes.len()
    }

    pub fn amplitudes(&self) -> &CVector<T> {
        &self.amplitudes
    }

    pub fn into_amplitudes(self) -> CVector<T> {
        self.amplitudes
    }

    pub fn norm_sqr(&self) -> T {
        norm_sqr(&self.amplitudes)
    }

    /// `<self|other>`.
    pub fn inner(&self, other: &Self) -> Complex<T> {
        inner(&self.amplitudes, &other.amplitudes)
    }

    /// Multiplies every amplitude by a unit-modulus factor.
    pub fn rephased(&self, factor: Complex<T>) -> Self {
        Self {
            amplitudes: self.amplitudes.map(|z| z * factor),
        }
    }
}

/// A normalized pure state of subsystem A and environment E.
#[derive(Debug, Clone, PartialEq)]
pub struct JointState<T: Real> {
    dim_a: usize,
    dim_e: usize,
    amplitudes: CVector<T>,
}

impl<T: Real> JointState<T> {
    pub fn new(dim_a: usize, dim_e: usize, amplitudes: CVector<T>) -> Result<Self> {
        Self::check_dims(dim_a, dim_e, amplitudes.len())?;
        check_norm(&amplitudes, "joint state")?;
        Ok(Self {
            dim_a,
            dim_e,
            amplitudes,
        })
    }

    /// Normalizes the amplitudes before wrapping them.
    pub fn normalized(dim_a: usize, dim_e: usize, amplitudes: CVector<T>) -> Result<Self> {
        Self::check_dims(dim_a, dim_e, amplitudes.len())?;
        Ok(Self {
            dim_a,
            dim_e,
            amplitudes: normalize(amplitudes)?,
        })
    }

    fn check_dims(dim_a: usize, dim_e: usize, len: usize) -> Result<()> {
        if dim_a == 0 || dim_e == 0 {
            return Err(validation("subsystem dimensions must be positive"));
        }
        if dim_a.checked_mul(dim_e) != Some(len) {
            return Err(validation(format!(
                "amplitude length {len} does not equal {dim_a} x {dim_e}"
            )));
        }
        Ok(())
    }

    pub(crate) fn from_raw(dim_a: usize, dim_e: usize, amplitudes: CVector<T>) -> Self {
        debug_assert_eq!(dim_a * dim_e, amplitudes.len());
        Self {
            dim_a,
            dim_e,
            amplitudes,
        }
    }

    pub fn dim_a(&self) -> usize {
        self.dim_a
    }

    pub fn dim_e(&self) -> usize {
        self.dim_e
    }

    pub fn dim(&self) -> usize {
        self.amplitudes.len()
    }

    pub fn amplitudes(&self) -> &CVector<T> {
        &self.amplitudes
    }

    pub fn amplitude(&self, a: usize, e: usize) -> Complex<T> {
        self.amplitudes[a * self.dim_e + e]
    }

    pub fn norm_sqr(&self) -> T {
        norm_sqr(&self.amplitudes)
    }

    /// Coefficient matrix `M[(a, e)] = Psi[(a, e)]`.
    pub fn coefficient_matrix(&self) -> CMatrix<T> {
        CMatrix::from_fn(self.dim_a, self.dim_e, |a, e| self.amplitude(a, e))
    }

    /// Same amplitudes viewed under a different bipartition.
    pub fn with_split(&self, dim_a: usize, dim_e: usize) -> Result<Self> {
        Self::check_dims(dim_a, dim_e, self.dim())?;
        Ok(Self::from_raw(dim_a, dim_e, self.amplitudes.clone()))
    }

    pub fn as_state_vector(&self) -> StateVector<T> {
        StateVector::from_raw(self.amplitudes.clone())
    }

    pub fn inner(&self, other: &Self) -> Complex<T> {
        inner(&self.amplitudes, &other.amplitudes)
    }
}

/// Compressed row storage for operators that are mostly zero.
#[derive(Debug, Clone, PartialEq)]
struct SparseRows<T: Real> {
    row_start: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<Complex<T>>,
}

impl<T: Real> SparseRows<T> {
    fn from_dense(m: &CMatrix<T>) -> Option<Self> {
        let n = m.nrows();
        let nnz = m.iter().filter(|z| !is_zero(**z)).count();
        if nnz * 4 > n * n {
            return None;
        }
        let mut row_start = Vec::with_capacity(n + 1);
        let mut cols = Vec::with_capacity(nnz);
        let mut vals = Vec::with_capacity(nnz);
        for i in 0..n {
            row_start.push(cols.len());
            for j in 0..n {
                let z = m[(i, j)];
                if !is_zero(z) {
                    cols.push(j);
                    vals.push(z);
                }
            }
        }
        row_start.push(cols.len());
        Some(Self {
            row_start,
            cols,
            vals,
        })
    }

    fn apply(&self, v: &CVector<T>) -> CVector<T> {
        let n = self.row_start.len() - 1;
        CVector::from_fn(n, |i, _| {
            let mut acc = Complex::new(T::zero(), T::zero());
            for k in self.row_start[i]..self.row_start[i + 1] {
                acc += self.vals[k] * v[self.cols[k]];
            }
            acc
        })
    }
}

fn is_zero<T: Real>(z: Complex<T>) -> bool {
    z.re == T::zero() && z.im == T::zero()
}

/// A Hermitian operator stored densely, with a sparse copy when profitable.
#[derive(Debug, Clone, PartialEq)]
pub struct HermitianOperator<T: Real> {
    entries: CMatrix<T>,
    sparse: Option<SparseRows<T>>,
}

impl<T: Real> HermitianOperator<T> {
    /// Validates Hermiticity within `1e-12` and symmetrizes the residue away.
    pub fn new(entries: CMatrix<T>) -> Result<Self> {
        if !entries.is_square() || entries.nrows() == 0 {
            return Err(validation(format!(
                "operator must be square and non-empty, got {}x{}",
                entries.nrows(),
                entries.ncols()
            )));
        }
        let tol = T::tol(HERMITIAN_TOL);
        let n = entries.nrows();
        for i in 0..n {
            for j in i..n {
                let d = entries[(i, j)] - entries[(j, i)].conj();
                if abs(d) > tol
                    || !entries[(i, j)].re.is_finite()
                    || !entries[(i, j)].im.is_finite()
                {
                    return Err(validation(format!(
                        "operator is not Hermitian at ({i}, {j}): deviation {}",
                        abs(d).as_f64()
                    )));
                }
            }
        }
        let half = T::lit(0.5);
        let sym = CMatrix::from_fn(n, n, |i, j| {
            if i == j {
                cplx(entries[(i, i)].re, T::zero())
            } else {
                (entries[(i, j)] + entries[(j, i)].conj()).scale(half)
            }
        });
        Ok(Self::from_hermitian(sym))
    }

    fn from_hermitian(entries: CMatrix<T>) -> Self {
        let sparse = SparseRows::from_dense(&entries);
        Self { entries, sparse }
    }

    pub fn zeros(dim: usize) -> Self {
        Self::from_hermitian(CMatrix::zeros(dim, dim))
    }

    pub fn identity(dim: usize) -> Self {
        Self::from_hermitian(CMatrix::identity(dim, dim))
    }

    pub fn from_real_diagonal(diag: &[T]) -> Self {
        let n = diag.len();
        Self::from_hermitian(CMatrix::from_fn(n, n, |i, j| {
            if i == j {
                cplx(diag[i], T::zero())
            } else {
                Complex::new(T::zero(), T::zero())
            }
        }))
    }

    pub fn dim(&self) -> usize {
        self.entries.nrows()
    }

    pub fn entries(&self) -> &CMatrix<T> {
        &self.entries
    }

    /// `H v`.
    pub fn apply(&self, v: &CVector<T>) -> CVector<T> {
        match &self.sparse {
            Some(s) => s.apply(v),
            None => &self.entries * v,
        }
    }

    /// `<v|H|v>`, which is real.
    pub fn expectation(&self, v: &CVector<T>) -> T {
        inner(v, &self.apply(v)).re
    }

    /// Largest entry modulus.
    pub fn max_abs(&self) -> T {
        self.entries
            .iter()
            .fold(T::zero(), |m, z| if abs(*z) > m { abs(*z) } else { m })
    }

    pub fn is_zero(&self) -> bool {
        self.entries.iter().all(|z| is_zero(*z))
    }

    /// `self (x) other`.
    pub fn kron(&self, other: &Self) -> Self {
        Self::from_hermitian(self.entries.kronecker(&other.entries))
    }

    pub fn scaled(&self, s: T) -> Self {
        Self::from_hermitian(self.entries.map(|z| z.scale(s)))
    }

    /// Sum of operators of equal dimension.
    pub fn sum(&self, other: &Self) -> Result<Self> {
        if self.dim() != other.dim() {
            return Err(validation("operator dimensions differ"));
        }
        Ok(Self::from_hermitian(&self.entries + &other.entries))
    }
}

/// A reduced density matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityMatrix<T: Real> {
    entries: CMatrix<T>,
}

impl<T: Real> DensityMatrix<T> {
    /// Validates Hermiticity, unit trace and positivity.
    pub fn new(entries: CMatrix<T>) -> Result<Self> {
        let h = HermitianOperator::new(entries)?;
        let tr = trace(h.entries());
        if (tr - T::one()).abs() > T::tol(NORM_TOL) {
            return Err(validation(format!(
                "density matrix trace is {}",
                tr.as_f64()
            )));
        }
        let spec = eigh(&h);
        if let Some(min) = spec.values.iter().next() {
            if *min < -T::tol(NORM_TOL) {
                return Err(validation(format!(
                    "density matrix has negative eigenvalue {}",
                    min.as_f64()
                )));
            }
        }
        Ok(Self { entries: h.entries })
    }

    pub(crate) fn from_raw(entries: CMatrix<T>) -> Self {
        Self { entries }
    }

    /// `|v><v|` for a normalized vector.
    pub fn pure(v: &StateVector<T>) -> Self {
        let a = v.amplitudes();
        Self {
            entries: a * a.adjoint(),
        }
    }

    pub fn dim(&self) -> usize {
        self.entries.nrows()
    }

    pub fn entries(&self) -> &CMatrix<T> {
        &self.entries
    }

    pub fn trace(&self) -> T {
        trace(&self.entries)
    }

    /// `<v|rho|v>`.
    pub fn expectation(&self, v: &CVector<T>) -> T {
        inner(v, &(&self.entries * v)).re
    }

    /// Largest entrywise modulus of `self - other`.
    pub fn max_abs_diff(&self, other: &Self) -> T {
        max_abs_diff(&self.entries, &other.entries)
    }

    pub fn as_operator(&self) -> HermitianOperator<T> {
        HermitianOperator::from_hermitian(self.entries.clone())
    }
}

pub(crate) fn trace<T: Real>(m: &CMatrix<T>) -> T {
    (0..m.nrows()).fold(T::zero(), |acc, i| acc + m[(i, i)].re)
}

/// Largest entrywise modulus of `a - b`.
pub fn max_abs_diff<T: Real>(a: &CMatrix<T>, b: &CMatrix<T>) -> T {
    a.iter().zip(b.iter()).fold(T::zero(), |m, (x, y)| {
        let d = abs(*x - *y);
        if d > m {
            d
        } else {
            m
        }
    })
}

/// `a (x) b` with the default dimension ceiling.
pub fn tensor_product<T: Real>(a: &StateVector<T>, b: &StateVector<T>) -> Result<JointState<T>> {
    tensor_product_with_limit(a, b, DEFAULT_MAX_DIM)
}

/// `a (x) b`, failing with [`Error::Size`] above `max_dim`.
pub fn tensor_product_with_limit<T: Real>(
    a: &StateVector<T>,
    b: &StateVector<T>,
    max_dim: usize,
) -> Result<JointState<T>> {
    let total = a
        .dim()
        .checked_mul(b.dim())
        .filter(|&d| d <= max_dim)
        .ok_or_else(|| {
            Error::Size(format!(
                "{} x {} exceeds the maximum dimension {max_dim}",
                a.dim(),
                b.dim()
            ))
        })?;
    let amps = a.amplitudes().kronecker(b.amplitudes());
    debug_assert_eq!(amps.len(), total);
    Ok(JointState::from_raw(a.dim(), b.dim(), amps))
}

/// `rho_A = Tr_E |Psi><Psi|`.
pub fn partial_trace_env<T: Real>(psi: &JointState<T>) -> DensityMatrix<T> {
    let m = psi.coefficient_matrix();
    DensityMatrix::from_raw(&m * m.adjoint())
}

/// Eigendecomposition of a Hermitian operator.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum<T: Real> {
    /// Eigenvalues in ascending order.
    pub values: DVector<T>,
    /// Orthonormal eigenvectors as columns, matching `values`.
    pub vectors: CMatrix<T>,
}

impl<T: Real> Spectrum<T> {
    /// `max |H - V diag(values) V^dagger|`.
    pub fn reconstruction_residual(&self, h: &CMatrix<T>) -> T {
        let lam = CMatrix::from_diagonal(&self.values.map(|x| cplx(x, T::zero())));
        let rebuilt = &self.vectors * lam * self.vectors.adjoint();
        max_abs_diff(&rebuilt, h)
    }

    /// `max |V^dagger V - 1|`.
    pub fn orthonormality_error(&self) -> T {
        let n = self.vectors.ncols();
        let g = self.vectors.adjoint() * &self.vectors;
        max_abs_diff(&g, &CMatrix::identity(n, n))
    }
}

fn find(parent: &mut [usize], mut i: usize) -> usize {
    while parent[i] != i {
        parent[i] = parent[parent[i]];
        i = parent[i];
    }
    i
}

/// Groups indices that are coupled by a nonzero entry.
fn coupled_blocks<T: Real>(m: &CMatrix<T>) -> Vec<Vec<usize>> {
    let n = m.nrows();
    let mut parent: Vec<usize> = (0..n).collect();
    for j in 0..n {
        for i in 0..j {
            if !is_zero(m[(i, j)]) {
                let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
                if ri != rj {
                    parent[ri.max(rj)] = ri.min(rj);
                }
            }
        }
    }
    let mut blocks: Vec<Vec<usize>> = Vec::new();
    let mut slot = vec![usize::MAX; n];
    for i in 0..n {
        let r = find(&mut parent, i);
        if slot[r] == usize::MAX {
            slot[r] = blocks.len();
            blocks.push(Vec::new());
        }
        blocks[slot[r]].push(i);
    }
    blocks
}

/// Hermitian eigendecomposition with ascending eigenvalues.
///
/// Decoupled blocks of the matrix are diagonalized independently, which is
/// exact and makes symmetry-resolved Hamiltonians cheap.
pub fn eigh<T: Real>(h: &HermitianOperator<T>) -> Spectrum<T> {
    let m = h.entries();
    let n = m.nrows();
    let mut pairs: Vec<(T, CVector<T>)> = Vec::with_capacity(n);
    for block in coupled_blocks(m) {
        let k = block.len();
        let sub = CMatrix::from_fn(k, k, |i, j| m[(block[i], block[j])]);
        let eig = SymmetricEigen::new(sub);
        for c in 0..k {
            let mut v = CVector::zeros(n);
            for (r, &g) in block.iter().enumerate() {
                v[g] = eig.eigenvectors[(r, c)];
            }
            pairs.push((eig.eigenvalues[c], v));
        }
    }
    pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(std::cmp::Ordering::Equal));
    let values = DVector::from_iterator(n, pairs.iter().map(|p| p.0));
    let mut vectors = CMatrix::zeros(n, n);
    for (c, (_, v)) in pairs.iter().enumerate() {
        vectors.set_column(c, v);
    }
    Spectrum { values, vectors }
}

/// Exact propagator `exp(-i H t)` built from one spectral decomposition.
#[derive(Debug, Clone)]
pub struct Propagator<T: Real> {
    spectrum: Spectrum<T>,
    sparse_vectors: Option<SparseRows<T>>,
}

impl<T: Real> Propagator<T> {
    pub fn new(h_total: &HermitianOperator<T>) -> Self {
        let spectrum = eigh(h_total);
        let sparse_vectors = SparseRows::from_dense(&spectrum.vectors);
        Self {
            spectrum,
            sparse_vectors,
        }
    }

    pub fn dim(&self) -> usize {
        self.spectrum.values.len()
    }

    pub fn spectrum(&self) -> &Spectrum<T> {
        &self.spectrum
    }

    fn check(&self, psi: &JointState<T>) -> Result<()> {
        if psi.dim() != self.dim() {
            return Err(validation(format!(
                "state dimension {} does not match Hamiltonian dimension {}",
                psi.dim(),
                self.dim()
            )));
        }
        Ok(())
    }

    /// `exp(-i H t) psi`.
    pub fn evolve(&self, psi: &JointState<T>, t: T) -> Result<JointState<T>> {
        let c = self.coefficients(psi)?;
        Ok(self.rebuild(psi, &c, t))
    }

    /// Eigenbasis coefficients `V^dagger psi`.
    pub fn coefficients(&self, psi: &JointState<T>) -> Result<CVector<T>> {
        self.check(psi)?;
        Ok(self.spectrum.vectors.adjoint() * psi.amplitudes())
    }

    /// `V (e^{-i E t} * c)`, with the bipartition of `like`.
    pub fn rebuild(&self, like: &JointState<T>, c: &CVector<T>, t: T) -> JointState<T> {
        let rotated = CVector::from_fn(c.len(), |i, _| c[i] * phase(-self.spectrum.values[i] * t));
        let amps = match &self.sparse_vectors {
            Some(v) => v.apply(&rotated),
            None => &self.spectrum.vectors * rotated,
        };
        JointState::from_raw(like.dim_a(), like.dim_e(), amps)
    }

    /// States at `t = k * eta` for `k = 0..=n_steps`, each computed directly
    /// from the initial state so no error accumulates.
    pub fn trajectory(
        &self,
        psi: &JointState<T>,
        eta: T,
        n_steps: usize,
    ) -> Result<Vec<JointState<T>>> {
        let c = self.coefficients(psi)?;
        Ok((0..=n_steps)
            .map(|k| {
                if k == 0 {
                    psi.clone()
                } else {
                    self.rebuild(psi, &c, eta * T::from_usize(k).expect("step index"))
                }
            })
            .collect())
    }
}

/// One exact step `exp(-i H eta) psi`.
///
/// Diagonalizes `h_total` on every call; use [`Propagator`] for repeated steps.
pub fn evolve_step<T: Real>(
    psi: &JointState<T>,
    h_total: &HermitianOperator<T>,
    eta: T,
) -> Result<JointState<T>> {
    if h_total.dim() != psi.dim() {
        return Err(validation(format!(
            "Hamiltonian dimension {} does not match state dimension {}",
            h_total.dim(),
            psi.dim()
        )));
    }
    if eta <= T::zero() {
        return Err(validation("step size must be positive"));
    }
    Propagator::new(h_total).evolve(psi, eta)
}

/// Pauli matrices and small operator helpers.
pub mod pauli {
    use super::*;

    pub fn x<T: Real>() -> CMatrix<T> {
        let (o, z) = (cplx(T::one(), T::zero()), cplx(T::zero(), T::zero()));
        CMatrix::from_row_slice(2, 2, &[z, o, o, z])
    }

    pub fn y<T: Real>() -> CMatrix<T> {
        let (i, z) = (cplx(T::zero(), T::one()), cplx(T::zero(), T::zero()));
        CMatrix::from_row_slice(2, 2, &[z, -i, i, z])
    }

    pub fn z<T: Real>() -> CMatrix<T> {
        let (o, z) = (cplx(T::one(), T::zero()), cplx(T::zero(), T::zero()));
        CMatrix::from_row_slice(2, 2, &[o, z, z, -o])
    }

    /// `op` acting on qubit `k` of `n` (qubit 0 is the most significant).
    pub fn on_qubit<T: Real>(n: usize, k: usize, op: &CMatrix<T>) -> CMatrix<T> {
        let left = 1usize << k;
        let right = 1usize << (n - k - 1);
        CMatrix::<T>::identity(left, left)
            .kronecker(op)
            .kronecker(&CMatrix::<T>::identity(right, right))
    }
}
