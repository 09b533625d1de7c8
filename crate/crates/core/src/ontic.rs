//! The ontic-state Markov chain: one-step transition matrices, sampling,
//! composition and the flow check against the Schmidt weights.

use nalgebra::DMatrix;

use crate::error::{validation, Error, Result};
use crate::hilbert::{inner, HermitianOperator};
use crate::rng::ChainRng;
use crate::scalar::Real;
use crate::schmidt::SchmidtFrame;

const STOCHASTIC_TOL: f64 = 1e-12;
const ABUT_TOL: f64 = 1e-9;

/// Conditional probabilities `p_cond[(i, j)] = p(i at t + eta | j at t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionMatrix<T: Real> {
    labels: Vec<u64>,
    t: T,
    eta: T,
    p_cond: DMatrix<T>,
}

impl<T: Real> TransitionMatrix<T> {
    /// Builds a matrix from explicit entries, checking that it is stochastic.
    pub fn from_parts(labels: Vec<u64>, t: T, eta: T, p_cond: DMatrix<T>) -> Result<Self> {
        let n = labels.len();
        if p_cond.nrows() != n || p_cond.ncols() != n {
            return Err(validation("transition matrix shape does not match labels"));
        }
        if labels.windows(2).any(|w| w[0] >= w[1]) {
            return Err(validation("transition labels must be strictly ascending"));
        }
        let tm = Self {
            labels,
            t,
            eta,
            p_cond,
        };
        if tm.stochasticity_error() > T::tol(STOCHASTIC_TOL) {
            return Err(validation("transition matrix is not column stochastic"));
        }
        Ok(tm)
    }

    pub fn identity(labels: Vec<u64>, t: T, eta: T) -> Self {
        let n = labels.len();
        Self {
            labels,
            t,
            eta,
            p_cond: DMatrix::identity(n, n),
        }
    }

    pub fn labels(&self) -> &[u64] {
        &self.labels
    }

    pub fn t(&self) -> T {
        self.t
    }

    pub fn eta(&self) -> T {
        self.eta
    }

    pub fn p_cond(&self) -> &DMatrix<T> {
        &self.p_cond
    }

    pub fn index_of(&self, label: u64) -> Option<usize> {
        self.labels.binary_search(&label).ok()
    }

    /// `p(to | from)` by label.
    pub fn get(&self, to: u64, from: u64) -> Option<T> {
        Some(self.p_cond[(self.index_of(to)?, self.index_of(from)?)])
    }

    /// Largest violation of `0 <= p <= 1` and unit column sums.
    pub fn stochasticity_error(&self) -> T {
        let mut worst = T::zero();
        for j in 0..self.labels.len() {
            let mut s = T::zero();
            for i in 0..self.labels.len() {
                let x = self.p_cond[(i, j)];
                s += x;
                let out = if x < T::zero() {
                    -x
                } else if x > T::one() {
                    x - T::one()
                } else {
                    T::zero()
                };
                worst = worst.max(out);
            }
            worst = worst.max((s - T::one()).abs());
        }
        worst
    }

    /// For every pair `i != j`, at least one of `p(i|j)`, `p(j|i)` is exactly zero.
    pub fn is_one_sided(&self) -> bool {
        let n = self.labels.len();
        (0..n).all(|j| {
            (j + 1..n).all(|i| self.p_cond[(i, j)] == T::zero() || self.p_cond[(j, i)] == T::zero())
        })
    }

    /// `sum_{i != j} p(i|j)` for column `j`.
    pub fn off_diagonal_mass(&self, j: usize) -> T {
        (0..self.labels.len())
            .filter(|&i| i != j)
            .fold(T::zero(), |a, i| a + self.p_cond[(i, j)])
    }

    /// `p(t + eta) = P p(t)` for weights given in label order.
    pub fn propagate(&self, p: &[T]) -> Vec<T> {
        let n = self.labels.len();
        (0..n)
            .map(|i| (0..n).fold(T::zero(), |a, j| a + self.p_cond[(i, j)] * p[j]))
            .collect()
    }

    /// Re-expresses the matrix over a larger label set; absent labels stay put.
    pub fn embedded(&self, labels: &[u64]) -> Result<Self> {
        let idx: Vec<Option<usize>> = labels.iter().map(|&l| self.index_of(l)).collect();
        if idx.iter().filter(|i| i.is_some()).count() != self.labels.len() {
            return Err(Error::Composition(
                "target label set does not contain every label".into(),
            ));
        }
        let n = labels.len();
        let p_cond = DMatrix::from_fn(n, n, |r, c| match (idx[r], idx[c]) {
            (Some(i), Some(j)) => self.p_cond[(i, j)],
            (_, None) if r == c => T::one(),
            _ => T::zero(),
        });
        Self::from_parts(labels.to_vec(), self.t, self.eta, p_cond)
    }
}

/// Transition matrix together with the columns whose diagonal went negative.
#[derive(Debug, Clone, PartialEq)]
pub struct RawTransition<T: Real> {
    pub matrix: TransitionMatrix<T>,
    /// `(label, diagonal)` of every column with a negative diagonal.
    pub broken: Vec<(u64, T)>,
}

/// Builds the one-step matrix and reports broken columns instead of failing.
pub fn transition_matrix_raw<T: Real>(
    frame: &SchmidtFrame<T>,
    h_int: &HermitianOperator<T>,
    eta: T,
) -> Result<RawTransition<T>> {
    let d = frame.dim_a() * frame.dim_e();
    if h_int.dim() != d {
        return Err(validation(format!(
            "interaction dimension {} does not match frame dimension {d}",
            h_int.dim()
        )));
    }
    if eta <= T::zero() {
        return Err(validation("step size must be positive"));
    }
    if frame.p().iter().any(|&p| p <= T::zero()) {
        return Err(validation("every frame weight must be positive"));
    }
    let n = frame.len();
    let chi: Vec<_> = (0..n).map(|i| frame.product_vector(i)).collect();
    let h_chi: Vec<_> = chi.iter().map(|v| h_int.apply(v)).collect();
    let two_eta = eta + eta;
    let p = frame.p();
    let mut m = DMatrix::zeros(n, n);
    for j in 0..n {
        for i in 0..j {
            // Only the upper triangle is evaluated; Im M_ji = -Im M_ij exactly.
            let im = inner(&chi[i], &h_chi[j]).im;
            if im > T::zero() {
                m[(i, j)] = two_eta * (p[i] / p[j]).sqrt() * im;
            } else if im < T::zero() {
                m[(j, i)] = two_eta * (p[j] / p[i]).sqrt() * (-im);
            }
        }
    }
    let mut broken = Vec::new();
    for j in 0..n {
        let off = (0..n)
            .filter(|&i| i != j)
            .fold(T::zero(), |a, i| a + m[(i, j)]);
        let diag = T::one() - off;
        if diag < T::zero() {
            broken.push((frame.labels()[j], diag));
        }
        m[(j, j)] = diag;
    }
    Ok(RawTransition {
        matrix: TransitionMatrix {
            labels: frame.labels().to_vec(),
            t: frame.time(),
            eta,
            p_cond: m,
        },
        broken,
    })
}

/// One-step conditional probabilities `p(i|j) = 2 eta sqrt(p_i / p_j) max(Im M_ij, 0)`
/// with `M_ij = <psi_i mirror_i| H_int |psi_j mirror_j>` and `hbar = 1`.
///
/// Fails with [`Error::Breakdown`] when a column's off-diagonal mass exceeds one.
pub fn transition_matrix<T: Real>(
    frame: &SchmidtFrame<T>,
    h_int: &HermitianOperator<T>,
    eta: T,
) -> Result<TransitionMatrix<T>> {
    let raw = transition_matrix_raw(frame, h_int, eta)?;
    if let Some(&(label, diagonal)) = raw.broken.first() {
        return Err(Error::Breakdown {
            time: frame.time().as_f64(),
            label,
            diagonal: diagonal.as_f64(),
        });
    }
    Ok(raw.matrix)
}

/// `tau = eta / max_j sum_{i != j} p(i|j)`, infinite when nothing moves.
pub fn decoherence_scale<T: Real>(tm: &TransitionMatrix<T>) -> T {
    let worst = (0..tm.labels.len())
        .map(|j| tm.off_diagonal_mass(j))
        .fold(T::zero(), |a, b| a.max(b));
    if worst > T::zero() {
        tm.eta / worst
    } else {
        T::lit(f64::INFINITY)
    }
}

/// The occupied label and the generator that drives it.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainState {
    pub label: u64,
    pub rng: ChainRng,
}

impl ChainState {
    pub fn new(label: u64, rng: ChainRng) -> Self {
        Self { label, rng }
    }
}

/// Inverse-CDF draw over entries in ascending label order.
pub fn sample_index<T: Real>(weights: impl IntoIterator<Item = T>, u: f64) -> Option<usize> {
    let u = T::lit(u);
    let mut acc = T::zero();
    let mut last = None;
    for (i, w) in weights.into_iter().enumerate() {
        if w > T::zero() {
            acc += w;
            last = Some(i);
            if u < acc {
                return Some(i);
            }
        }
    }
    last
}

/// Advances the chain by one step of `tm`.
pub fn chain_step<T: Real>(mut state: ChainState, tm: &TransitionMatrix<T>) -> Result<ChainState> {
    let j = tm.index_of(state.label).ok_or_else(|| {
        validation(format!(
            "label {} is not in the transition matrix",
            state.label
        ))
    })?;
    let u = state.rng.uniform();
    let i = sample_index(tm.p_cond.column(j).iter().copied(), u)
        .ok_or_else(|| validation("transition column has no positive entry"))?;
    state.label = tm.labels[i];
    Ok(state)
}

/// Product `P_N ... P_1` of consecutive one-step matrices.
pub fn compose_chain<T: Real>(tms: &[TransitionMatrix<T>]) -> Result<TransitionMatrix<T>> {
    let first = tms
        .first()
        .ok_or_else(|| Error::Composition("no matrices to compose".into()))?;
    let mut acc = first.p_cond.clone();
    let mut end = first.t + first.eta;
    for (k, tm) in tms.iter().enumerate().skip(1) {
        if tm.labels != first.labels {
            return Err(Error::Composition(format!(
                "labels of matrix {k} differ from those of the first matrix"
            )));
        }
        if (tm.t - end).abs() > T::tol(ABUT_TOL) {
            return Err(Error::Composition(format!(
                "matrix {k} starts at {} but the previous one ends at {}",
                tm.t.as_f64(),
                end.as_f64()
            )));
        }
        acc = &tm.p_cond * acc;
        end = tm.t + tm.eta;
    }
    Ok(TransitionMatrix {
        labels: first.labels.clone(),
        t: first.t,
        eta: end - first.t,
        p_cond: acc,
    })
}

/// `max_i |p_i(t + eta) - sum_j p(i|j) p_j(t)|` for frames with identical labels.
pub fn verify_flow<T: Real>(
    frame_t: &SchmidtFrame<T>,
    frame_next: &SchmidtFrame<T>,
    tm: &TransitionMatrix<T>,
) -> Result<T> {
    if frame_t.labels() != frame_next.labels() || frame_t.labels() != tm.labels() {
        return Err(validation(
            "flow check needs frames and matrix with identical labels",
        ));
    }
    let pred = tm.propagate(frame_t.p());
    Ok(pred
        .iter()
        .zip(frame_next.p())
        .fold(T::zero(), |m, (a, b)| m.max((*a - *b).abs())))
}

/// Flow residual over the union of labels, counting absent labels as zero
/// weight. Agrees with [`verify_flow`] when the labels match.
pub fn flow_residual_union<T: Real>(
    frame_t: &SchmidtFrame<T>,
    frame_next: &SchmidtFrame<T>,
    tm: &TransitionMatrix<T>,
) -> T {
    let pred = tm.propagate(frame_t.p());
    let mut labels: Vec<u64> = tm
        .labels()
        .iter()
        .chain(frame_next.labels())
        .copied()
        .collect();
    labels.sort_unstable();
    labels.dedup();
    labels.iter().fold(T::zero(), |m, &l| {
        let a = tm.index_of(l).map_or(T::zero(), |i| pred[i]);
        let b = frame_next.weight(l).unwrap_or(T::zero());
        m.max((a - b).abs())
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hilbert::{CMatrix, CVector, JointState, StateVector};
    use crate::schmidt::extract_frame;
    use nalgebra::Complex;
    use proptest::prelude::*;

    type C = Complex<f64>;

    fn basis_frame() -> SchmidtFrame<f64> {
        SchmidtFrame::from_parts(
            0.0,
            vec![0, 1],
            vec![0.5, 0.5],
            vec![StateVector::basis(2, 0), StateVector::basis(2, 1)],
            vec![StateVector::basis(2, 0), StateVector::basis(2, 1)],
            0.0,
        )
        .unwrap()
    }

    fn random_case(seed: u64, da: usize, de: usize) -> (SchmidtFrame<f64>, HermitianOperator<f64>) {
        let mut rng = ChainRng::new(seed, 0);
        let mut g = || C::new(rng.normal(), rng.normal());
        let v = CVector::from_fn(da * de, |_, _| g());
        let a = CMatrix::from_fn(da * de, da * de, |_, _| g());
        let psi = JointState::normalized(da, de, v).unwrap();
        let h = HermitianOperator::new(&a + a.adjoint()).unwrap();
        (extract_frame(&psi, 1e-8, 0.0).unwrap(), h)
    }

    #[test]
    fn zero_coupling_gives_identity() {
        let f = basis_frame();
        let tm = transition_matrix(&f, &HermitianOperator::zeros(4), 0.01).unwrap();
        assert_eq!(tm.p_cond(), &DMatrix::identity(2, 2));
        assert_eq!(decoherence_scale(&tm), f64::INFINITY);
    }

    #[test]
    fn real_elements_give_identity() {
        let f = basis_frame();
        let m = CMatrix::from_fn(4, 4, |i, j| C::new(1.0 + (i + j) as f64, 0.0));
        let tm = transition_matrix(&f, &HermitianOperator::new(m).unwrap(), 0.01).unwrap();
        assert_eq!(tm.p_cond(), &DMatrix::identity(2, 2));
    }

    #[test]
    fn two_label_hand_example() {
        // Label 0 = |00>, label 1 = |11>; <00|H|11> = 0.1 i.
        let f = basis_frame();
        let mut m = CMatrix::zeros(4, 4);
        m[(0, 3)] = C::new(0.0, 0.1);
        m[(3, 0)] = C::new(0.0, -0.1);
        let tm = transition_matrix(&f, &HermitianOperator::new(m).unwrap(), 0.01).unwrap();
        assert!((tm.get(0, 1).unwrap() - 0.002).abs() < 1e-15);
        assert_eq!(tm.get(1, 0).unwrap(), 0.0);
        assert_eq!(tm.get(0, 0).unwrap(), 1.0);
        assert!((tm.get(1, 1).unwrap() - 0.998).abs() < 1e-15);
        assert!((decoherence_scale(&tm) - 5.0).abs() < 1e-12);
    }

    #[test]
    fn large_step_breaks_down() {
        let f = basis_frame();
        let mut m = CMatrix::zeros(4, 4);
        m[(0, 3)] = C::new(0.0, 10.0);
        m[(3, 0)] = C::new(0.0, -10.0);
        let h = HermitianOperator::new(m).unwrap();
        assert!(matches!(
            transition_matrix(&f, &h, 0.1),
            Err(Error::Breakdown { label: 1, .. })
        ));
        assert_eq!(transition_matrix_raw(&f, &h, 0.1).unwrap().broken.len(), 1);
    }

    #[test]
    fn rejects_mismatched_interaction() {
        assert!(matches!(
            transition_matrix(&basis_frame(), &HermitianOperator::zeros(3), 0.01),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn identity_chain_stays() {
        let tm = TransitionMatrix::<f64>::identity(vec![0, 1, 2], 0.0, 0.1);
        let mut s = ChainState::new(1, ChainRng::new(3, 3));
        for _ in 0..50 {
            s = chain_step(s, &tm).unwrap();
            assert_eq!(s.label, 1);
        }
    }

    #[test]
    fn deterministic_column_always_moves() {
        let p = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]);
        let tm = TransitionMatrix::from_parts(vec![0, 1], 0.0, 0.1, p).unwrap();
        let mut s = ChainState::new(0, ChainRng::new(1, 0));
        for k in 0..20 {
            s = chain_step(s, &tm).unwrap();
            assert_eq!(s.label, if k % 2 == 0 { 1 } else { 0 });
        }
    }

    #[test]
    fn binomial_column_frequency() {
        let p = DMatrix::from_row_slice(2, 2, &[0.3, 0.3, 0.7, 0.7]);
        let tm = TransitionMatrix::from_parts(vec![0, 1], 0.0, 0.1, p).unwrap();
        let mut rng = ChainRng::new(2024, 0);
        let n = 100_000;
        let mut hits = 0;
        for _ in 0..n {
            let s = chain_step(ChainState::new(0, rng.clone()), &tm).unwrap();
            rng = s.rng;
            if s.label == 0 {
                hits += 1;
            }
        }
        let f = hits as f64 / n as f64;
        assert!((f - 0.3).abs() <= 0.0046, "frequency {f}");
    }

    #[test]
    fn unknown_label_is_rejected() {
        let tm = TransitionMatrix::<f64>::identity(vec![0, 1], 0.0, 0.1);
        assert!(chain_step(ChainState::new(5, ChainRng::new(0, 0)), &tm).is_err());
    }

    #[test]
    fn composition_matches_path_sum() {
        let a = DMatrix::from_row_slice(3, 3, &[0.5, 0.1, 0.0, 0.3, 0.9, 0.2, 0.2, 0.0, 0.8]);
        let b = DMatrix::from_row_slice(3, 3, &[0.7, 0.0, 0.4, 0.1, 1.0, 0.0, 0.2, 0.0, 0.6]);
        let ta = TransitionMatrix::from_parts(vec![0, 1, 2], 0.0, 0.1, a.clone()).unwrap();
        let tb = TransitionMatrix::from_parts(vec![0, 1, 2], 0.1, 0.1, b.clone()).unwrap();
        let c = compose_chain(&[ta.clone(), tb]).unwrap();
        for i in 0..3 {
            for k in 0..3 {
                let paths: f64 = (0..3).map(|j| b[(i, j)] * a[(j, k)]).sum();
                assert!((c.p_cond()[(i, k)] - paths).abs() < 1e-15);
            }
        }
        assert!((c.eta() - 0.2).abs() < 1e-15);
        assert_eq!(compose_chain(std::slice::from_ref(&ta)).unwrap(), ta);
        let ids: Vec<_> = (0..4)
            .map(|k| TransitionMatrix::<f64>::identity(vec![0, 1, 2], 0.1 * k as f64, 0.1))
            .collect();
        assert_eq!(
            compose_chain(&ids).unwrap().p_cond(),
            &DMatrix::identity(3, 3)
        );
    }

    #[test]
    fn composition_errors() {
        let a = TransitionMatrix::<f64>::identity(vec![0, 1], 0.0, 0.1);
        let gap = TransitionMatrix::<f64>::identity(vec![0, 1], 0.3, 0.1);
        let other = TransitionMatrix::<f64>::identity(vec![0, 2], 0.1, 0.1);
        assert!(matches!(
            compose_chain(&[a.clone(), gap]),
            Err(Error::Composition(_))
        ));
        assert!(matches!(
            compose_chain(&[a, other]),
            Err(Error::Composition(_))
        ));
        assert!(compose_chain::<f64>(&[]).is_err());
    }

    #[test]
    fn static_flow_is_exact() {
        let f = basis_frame();
        let tm = transition_matrix(&f, &HermitianOperator::zeros(4), 0.01).unwrap();
        assert!(verify_flow(&f, &f, &tm).unwrap() <= 1e-12);
    }

    #[test]
    fn flow_needs_matching_labels() {
        let f = basis_frame();
        let tm = TransitionMatrix::identity(vec![0, 1], 0.0, 0.01);
        let g = SchmidtFrame::from_parts(
            0.01,
            vec![0, 2],
            vec![0.5, 0.5],
            f.psi().to_vec(),
            f.mirror().to_vec(),
            0.0,
        )
        .unwrap();
        assert!(matches!(
            verify_flow(&f, &g, &tm),
            Err(Error::Validation(_))
        ));
        assert!((flow_residual_union(&f, &g, &tm) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn embedding_keeps_absent_labels_fixed() {
        let p = DMatrix::from_row_slice(2, 2, &[0.9, 0.0, 0.1, 1.0]);
        let tm = TransitionMatrix::from_parts(vec![1, 3], 0.0, 0.1, p).unwrap();
        let big = tm.embedded(&[0, 1, 2, 3]).unwrap();
        assert_eq!(big.get(0, 0), Some(1.0));
        assert_eq!(big.get(3, 1), Some(0.1));
        assert_eq!(big.get(2, 2), Some(1.0));
        assert!(tm.embedded(&[1, 2]).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn generated_matrices_are_stochastic_and_one_sided(seed in any::<u64>(), da in 2usize..5, de in 2usize..9) {
            let (f, h) = random_case(seed, da, de);
            let eta = 0.2 / h.max_abs() / (da * de) as f64;
            let tm = transition_matrix(&f, &h, eta).unwrap();
            prop_assert!(tm.stochasticity_error() <= 1e-12);
            prop_assert!(tm.is_one_sided());
            prop_assert!(decoherence_scale(&tm) >= eta);
        }

        #[test]
        fn gauge_rotations_leave_matrix_unchanged(seed in any::<u64>(), da in 2usize..5, de in 2usize..9) {
            let (f, h) = random_case(seed, da, de);
            let mut rng = ChainRng::new(seed, 1);
            let thetas: Vec<f64> = (0..f.len()).map(|_| rng.uniform_in(-3.2, 3.2)).collect();
            let g = f.rephased(&thetas);
            let a = transition_matrix_raw(&f, &h, 0.001).unwrap().matrix;
            let b = transition_matrix_raw(&g, &h, 0.001).unwrap().matrix;
            let diff = (a.p_cond() - b.p_cond()).amax();
            prop_assert!(diff <= 1e-12);
        }
    }
}
