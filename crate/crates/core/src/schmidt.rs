//! Labeled Schmidt frames and label tracking between time steps.

use nalgebra::Complex;

use crate::assignment;
use crate::error::{validation, Error, Result};
use crate::hilbert::{eigh, inner, partial_trace_env, CVector, JointState, StateVector};
use crate::scalar::{abs, phase, Real};

/// Default cutoff below which Schmidt weights count as null.
pub const DEFAULT_EPS_NULL: f64 = 1e-8;

/// Weights closer than this are reported as degenerate.
pub const DEGENERACY_GAP: f64 = 1e-9;

const ORTHO_TOL: f64 = 1e-8;
const SUM_TOL: f64 = 1e-10;

/// Schmidt decomposition of a joint state at one time, with stable labels.
///
/// Entries are kept in ascending label order.
#[derive(Debug, Clone, PartialEq)]
pub struct SchmidtFrame<T: Real> {
    time: T,
    labels: Vec<u64>,
    p: Vec<T>,
    psi: Vec<StateVector<T>>,
    mirror: Vec<StateVector<T>>,
    null_weight: T,
    next_label: u64,
}

impl<T: Real> SchmidtFrame<T> {
    /// Assembles a frame from explicit parts, checking the frame invariants.
    pub fn from_parts(
        time: T,
        labels: Vec<u64>,
        p: Vec<T>,
        psi: Vec<StateVector<T>>,
        mirror: Vec<StateVector<T>>,
        null_weight: T,
    ) -> Result<Self> {
        let n = labels.len();
        if n == 0 || p.len() != n || psi.len() != n || mirror.len() != n {
            return Err(validation(
                "frame parts must be nonempty and of equal length",
            ));
        }
        if p.iter().any(|&x| x <= T::zero()) || null_weight < T::zero() {
            return Err(validation("frame weights must be positive"));
        }
        let total = p.iter().fold(null_weight, |a, &b| a + b);
        if (total - T::one()).abs() > T::tol(SUM_TOL) {
            return Err(validation(format!(
                "frame weights sum to {}",
                total.as_f64()
            )));
        }
        let (da, de) = (psi[0].dim(), mirror[0].dim());
        if psi.iter().any(|v| v.dim() != da) || mirror.iter().any(|v| v.dim() != de) {
            return Err(validation("frame vectors have inconsistent dimensions"));
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by_key(|&i| labels[i]);
        if order.windows(2).any(|w| labels[w[0]] == labels[w[1]]) {
            return Err(validation("frame labels must be distinct"));
        }
        let next_label = labels.iter().max().map_or(0, |m| m + 1);
        let frame = Self {
            time,
            labels: order.iter().map(|&i| labels[i]).collect(),
            p: order.iter().map(|&i| p[i]).collect(),
            psi: order.iter().map(|&i| psi[i].clone()).collect(),
            mirror: order.iter().map(|&i| mirror[i].clone()).collect(),
            null_weight,
            next_label,
        };
        let (e_psi, e_mirror) = frame.orthonormality_error();
        if e_psi > T::tol(ORTHO_TOL) || e_mirror > T::tol(ORTHO_TOL) {
            return Err(validation("frame vectors are not orthonormal"));
        }
        Ok(frame)
    }

    pub fn time(&self) -> T {
        self.time
    }

    pub fn labels(&self) -> &[u64] {
        &self.labels
    }

    pub fn p(&self) -> &[T] {
        &self.p
    }

    pub fn psi(&self) -> &[StateVector<T>] {
        &self.psi
    }

    pub fn mirror(&self) -> &[StateVector<T>] {
        &self.mirror
    }

    pub fn null_weight(&self) -> T {
        self.null_weight
    }

    /// Smallest label never used along this frame's history.
    pub fn next_label(&self) -> u64 {
        self.next_label
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim_a(&self) -> usize {
        self.psi[0].dim()
    }

    pub fn dim_e(&self) -> usize {
        self.mirror[0].dim()
    }

    pub fn index_of(&self, label: u64) -> Option<usize> {
        self.labels.binary_search(&label).ok()
    }

    /// Weight of `label`, if present.
    pub fn weight(&self, label: u64) -> Option<T> {
        self.index_of(label).map(|i| self.p[i])
    }

    /// `psi_i (x) mirror_i` for the entry at position `i`.
    pub fn product_vector(&self, i: usize) -> CVector<T> {
        self.psi[i]
            .amplitudes()
            .kronecker(self.mirror[i].amplitudes())
    }

    /// `sum_i sqrt(p_i) psi_i (x) mirror_i`.
    pub fn reconstruct(&self) -> CVector<T> {
        let mut out = CVector::zeros(self.dim_a() * self.dim_e());
        for i in 0..self.len() {
            out += self.product_vector(i).map(|z| z.scale(self.p[i].sqrt()));
        }
        out
    }

    /// `|| Psi - sum_i sqrt(p_i) psi_i (x) mirror_i ||`.
    pub fn reconstruction_residual(&self, psi: &JointState<T>) -> T {
        let d = psi.amplitudes() - self.reconstruct();
        d.iter().fold(T::zero(), |a, z| a + z.norm_sqr()).sqrt()
    }

    /// Largest deviations of the subsystem and mirror Gram matrices from identity.
    pub fn orthonormality_error(&self) -> (T, T) {
        let gram = |vs: &[StateVector<T>]| {
            let mut worst = T::zero();
            for (i, a) in vs.iter().enumerate() {
                for (j, b) in vs.iter().enumerate() {
                    let target = if i == j { T::one() } else { T::zero() };
                    let d = abs(a.inner(b) - Complex::new(target, T::zero()));
                    if d > worst {
                        worst = d;
                    }
                }
            }
            worst
        };
        (gram(&self.psi), gram(&self.mirror))
    }

    /// Applies `psi_i -> e^{i theta_i} psi_i`, `mirror_i -> e^{-i theta_i} mirror_i`.
    pub fn rephased(&self, thetas: &[T]) -> Self {
        assert_eq!(thetas.len(), self.len(), "one phase per label");
        let mut out = self.clone();
        for (i, &th) in thetas.iter().enumerate() {
            out.psi[i] = self.psi[i].rephased(phase(th));
            out.mirror[i] = self.mirror[i].rephased(phase(-th));
        }
        out
    }

    /// Copy with a different time stamp.
    pub fn at_time(mut self, time: T) -> Self {
        self.time = time;
        self
    }
}

/// Schmidt decomposition of `psi` with fresh labels in descending weight order.
pub fn extract_frame<T: Real>(
    psi: &JointState<T>,
    eps_null: T,
    time: T,
) -> Result<SchmidtFrame<T>> {
    if !(eps_null >= T::zero() && eps_null < T::one()) {
        return Err(validation("eps_null must lie in [0, 1)"));
    }
    let rho = partial_trace_env(psi);
    let spec = eigh(&rho.as_operator());
    let m = psi.coefficient_matrix();
    let mut p = Vec::new();
    let mut vs = Vec::new();
    let mut ms = Vec::new();
    for c in (0..spec.values.len()).rev() {
        let w = spec.values[c];
        if w <= eps_null {
            break;
        }
        let v = spec.vectors.column(c).into_owned();
        let mirror = m.transpose() * v.conjugate();
        p.push(w);
        ms.push(StateVector::normalized(mirror)?);
        vs.push(StateVector::from_raw(v));
    }
    if p.is_empty() {
        return Err(Error::DegenerateState(format!(
            "all Schmidt weight lies below the cutoff {}",
            eps_null.as_f64()
        )));
    }
    let kept = p.iter().fold(T::zero(), |a, &b| a + b);
    let null_weight = if kept < T::one() {
        T::one() - kept
    } else {
        T::zero()
    };
    let n = p.len() as u64;
    Ok(SchmidtFrame {
        time,
        labels: (0..n).collect(),
        p,
        psi: vs,
        mirror: ms,
        null_weight,
        next_label: n,
    })
}

/// How the raw eigenvectors of one step were identified with earlier labels.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameMatch<T: Real> {
    /// Label given to each raw entry of the current frame, in raw order.
    pub permutation: Vec<u64>,
    /// `|<psi_i(t + eta)|psi_i(t)>|` for every label present on both sides.
    pub overlaps: Vec<(u64, T)>,
    pub births: Vec<u64>,
    pub deaths: Vec<u64>,
    /// Some pair of current weights lies within [`DEGENERACY_GAP`].
    pub degeneracy_flag: bool,
}

impl<T: Real> FrameMatch<T> {
    /// Smallest overlap over continuing labels.
    pub fn min_overlap(&self) -> Option<T> {
        self.overlaps.iter().map(|o| o.1).fold(None, |m, x| {
            Some(m.map_or(x, |m: T| if x < m { x } else { m }))
        })
    }
}

/// Relabels `cur_raw` to continue the labels of `prev`.
///
/// The assignment maximizes the total squared overlap. Continuing labels are
/// rephased so `<psi_prev|psi_cur>` is real and non-negative, with the mirror
/// taking the opposite phase.
pub fn match_frames<T: Real>(
    prev: &SchmidtFrame<T>,
    cur_raw: &SchmidtFrame<T>,
) -> Result<(SchmidtFrame<T>, FrameMatch<T>)> {
    if prev.dim_a() != cur_raw.dim_a() || prev.dim_e() != cur_raw.dim_e() {
        return Err(validation(format!(
            "frame dimensions differ: ({}, {}) vs ({}, {})",
            prev.dim_a(),
            prev.dim_e(),
            cur_raw.dim_a(),
            cur_raw.dim_e()
        )));
    }
    let (n, m) = (prev.len(), cur_raw.len());
    let ov: Vec<Complex<T>> = (0..n)
        .flat_map(|i| (0..m).map(move |k| (i, k)))
        .map(|(i, k)| inner(prev.psi[i].amplitudes(), cur_raw.psi[k].amplitudes()))
        .collect();
    let weights: Vec<f64> = ov.iter().map(|z| z.norm_sqr().as_f64()).collect();
    let assigned = assignment::maximize(&weights, n, m);

    let mut owner: Vec<Option<usize>> = vec![None; m];
    for (i, a) in assigned.iter().enumerate() {
        if let Some(k) = *a {
            owner[k] = Some(i);
        }
    }
    let mut next = prev.next_label;
    let mut permutation = Vec::with_capacity(m);
    let mut births = Vec::new();
    let mut overlaps = Vec::new();
    let mut psi = Vec::with_capacity(m);
    let mut mirror = Vec::with_capacity(m);
    for k in 0..m {
        match owner[k] {
            Some(i) => {
                let z = ov[i * m + k];
                let r = abs(z);
                let (a, b) = if r > T::zero() {
                    let u = Complex::new(z.re / r, z.im / r);
                    (
                        cur_raw.psi[k].rephased(u.conj()),
                        cur_raw.mirror[k].rephased(u),
                    )
                } else {
                    (cur_raw.psi[k].clone(), cur_raw.mirror[k].clone())
                };
                permutation.push(prev.labels[i]);
                overlaps.push((prev.labels[i], if r > T::one() { T::one() } else { r }));
                psi.push(a);
                mirror.push(b);
            }
            None => {
                permutation.push(next);
                births.push(next);
                next += 1;
                psi.push(cur_raw.psi[k].clone());
                mirror.push(cur_raw.mirror[k].clone());
            }
        }
    }
    let deaths: Vec<u64> = assigned
        .iter()
        .enumerate()
        .filter(|(_, a)| a.is_none())
        .map(|(i, _)| prev.labels[i])
        .collect();
    let mut degeneracy_flag = false;
    for i in 0..m {
        for j in i + 1..m {
            if (cur_raw.p[i] - cur_raw.p[j]).abs() < T::lit(DEGENERACY_GAP) {
                degeneracy_flag = true;
            }
        }
    }

    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by_key(|&k| permutation[k]);
    overlaps.sort_by_key(|o| o.0);
    let frame = SchmidtFrame {
        time: cur_raw.time,
        labels: order.iter().map(|&k| permutation[k]).collect(),
        p: order.iter().map(|&k| cur_raw.p[k]).collect(),
        psi: order.iter().map(|&k| psi[k].clone()).collect(),
        mirror: order.iter().map(|&k| mirror[k].clone()).collect(),
        null_weight: cur_raw.null_weight,
        next_label: next,
    };
    Ok((
        frame,
        FrameMatch {
            permutation,
            overlaps,
            births,
            deaths,
            degeneracy_flag,
        },
    ))
}
