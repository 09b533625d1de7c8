//! Concrete models: spin-bath equilibration, a two-outcome measurement with
//! a pointer device, a tripartite setup for factorization checks, and custom
//! Hamiltonians loaded from JSON.

use std::f64::consts::PI;
use std::path::Path;

use nalgebra::Complex;
use serde::{Deserialize, Serialize};

use crate::error::{validation, Error, Result};
use crate::hilbert::{
    partial_trace_env, pauli, CMatrix, CVector, DensityMatrix, HermitianOperator, JointState,
    Propagator, StateVector, DEFAULT_MAX_DIM,
};
use crate::rng::ChainRng;
use crate::schmidt::DEFAULT_EPS_NULL;

type C64 = Complex<f64>;

/// Largest bath supported by the builders.
pub const MAX_ENV_QUBITS: usize = 11;

/// Branch-mixture residual above which the identity is considered violated.
pub const MIXTURE_TOL: f64 = 1e-8;

const DEFAULT_ETA: f64 = 0.01;
const DEFAULT_STEPS: usize = 100;
const DEFAULT_MARGIN: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Model {
    SpinBath,
    Measurement,
    Tripartite,
    Custom,
}

impl Model {
    pub fn name(self) -> &'static str {
        match self {
            Model::SpinBath => "spin_bath",
            Model::Measurement => "measurement",
            Model::Tripartite => "tripartite",
            Model::Custom => "custom",
        }
    }
}

/// Amplitudes and pointer parameters of a two-outcome measurement.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementSpec {
    pub c_plus: C64,
    pub c_minus: C64,
    pub pointer_dim: usize,
    /// Width of the Gaussian ready state; `0` gives a pointer localized at site 0.
    pub pointer_width: f64,
    /// Place the measured qubit in A (with the device) instead of in E.
    pub qubit_in_system: bool,
}

impl MeasurementSpec {
    /// Real amplitudes `(sqrt(w), sqrt(1 - w))` for outcome weight `w = |c_+|^2`.
    pub fn with_weight(weight_plus: f64, pointer_dim: usize) -> Self {
        Self {
            c_plus: C64::new(weight_plus.sqrt(), 0.0),
            c_minus: C64::new((1.0 - weight_plus).max(0.0).sqrt(), 0.0),
            pointer_dim,
            pointer_width: 0.0,
            qubit_in_system: false,
        }
    }

    pub fn weight_plus(&self) -> f64 {
        self.c_plus.norm_sqr()
    }

    pub fn weight_minus(&self) -> f64 {
        self.c_minus.norm_sqr()
    }

    pub fn validate(&self) -> Result<()> {
        let w = self.weight_plus() + self.weight_minus();
        if (w - 1.0).abs() > 1e-10 {
            return Err(validation(format!("|c_+|^2 + |c_-|^2 = {w}, expected 1")));
        }
        if self.pointer_dim < 2 {
            return Err(validation("pointer_dim must be at least 2"));
        }
        if !(self.pointer_width >= 0.0 && self.pointer_width.is_finite()) {
            return Err(validation("pointer_width must be finite and non-negative"));
        }
        Ok(())
    }
}

/// Measurement data derived at build time.
///
/// The flat amplitude order is always `device (x) qubit (x) bath`; only the
/// A/E split depends on [`MeasurementSpec::qubit_in_system`].
#[derive(Debug, Clone, PartialEq)]
pub struct Measurement {
    pub spec: MeasurementSpec,
    /// Device ready state times bath state, split as (device, bath).
    pub branch_phi0: JointState<f64>,
    /// `|z+> |Phi_0>` and `|z-> |Phi_0>` in the scenario's bipartition.
    pub start_plus: JointState<f64>,
    pub start_minus: JointState<f64>,
    pub t_measure: f64,
    pub n_bath: usize,
}

/// Inputs to [`Scenario::assemble`].
#[derive(Debug, Clone)]
pub struct ScenarioParts {
    pub model: Model,
    pub dim_a: usize,
    pub dim_e: usize,
    pub h_a: HermitianOperator<f64>,
    pub h_e: HermitianOperator<f64>,
    pub h_int: HermitianOperator<f64>,
    pub eta: f64,
    pub n_steps: usize,
    pub initial: JointState<f64>,
    pub eps_null: f64,
    pub metadata: String,
    pub is_static: bool,
    pub seed: u64,
}

/// A fully specified, immutable simulation setup.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub model: Model,
    pub dim_a: usize,
    pub dim_e: usize,
    pub h_a: HermitianOperator<f64>,
    pub h_e: HermitianOperator<f64>,
    pub h_int: HermitianOperator<f64>,
    pub eta: f64,
    pub n_steps: usize,
    pub initial: JointState<f64>,
    pub eps_null: f64,
    pub metadata: String,
    pub is_static: bool,
    pub seed: u64,
    pub measurement: Option<Measurement>,
    /// `(d_A, d_B, d_E)` when A itself is a composite of two factors.
    pub factor_dims: Option<[usize; 3]>,
    /// Trailing window (time units) for the ergodicity diagnostic; whole run if unset.
    pub window: Option<f64>,
    pub margin_min: f64,
    pub warnings: Vec<String>,
}

impl Scenario {
    /// Checks the scenario invariants and records soft warnings.
    pub fn assemble(parts: ScenarioParts) -> Result<Self> {
        let d = parts.dim_a * parts.dim_e;
        if d > DEFAULT_MAX_DIM {
            return Err(Error::Size(format!(
                "total dimension {d} exceeds {DEFAULT_MAX_DIM}"
            )));
        }
        if parts.h_a.dim() != parts.dim_a
            || parts.h_e.dim() != parts.dim_e
            || parts.h_int.dim() != d
        {
            return Err(validation("Hamiltonian parts do not match the bipartition"));
        }
        if parts.initial.dim_a() != parts.dim_a || parts.initial.dim_e() != parts.dim_e {
            return Err(validation("initial state does not match the bipartition"));
        }
        if !(parts.eta > 0.0 && parts.eta.is_finite()) {
            return Err(validation("eta must be positive"));
        }
        if parts.n_steps == 0 {
            return Err(validation("n_steps must be positive"));
        }
        if !(0.0..1.0).contains(&parts.eps_null) {
            return Err(validation("eps_null must lie in [0, 1)"));
        }
        if parts.h_int.is_zero() && !parts.is_static {
            return Err(validation(
                "h_int vanishes; mark the scenario static to run it",
            ));
        }
        let mut s = Scenario {
            model: parts.model,
            dim_a: parts.dim_a,
            dim_e: parts.dim_e,
            h_a: parts.h_a,
            h_e: parts.h_e,
            h_int: parts.h_int,
            eta: parts.eta,
            n_steps: parts.n_steps,
            initial: parts.initial,
            eps_null: parts.eps_null,
            metadata: parts.metadata,
            is_static: parts.is_static,
            seed: parts.seed,
            measurement: None,
            factor_dims: None,
            window: None,
            margin_min: DEFAULT_MARGIN,
            warnings: Vec::new(),
        };
        s.refresh_warnings();
        Ok(s)
    }

    fn refresh_warnings(&mut self) {
        self.warnings.clear();
        let hmax = self.h_total().max_abs();
        if self.eta * hmax > 0.5 {
            self.warnings
                .push(format!("eta * max|H| = {} exceeds 0.5", self.eta * hmax));
        }
        if self.dim_e < 4 * self.dim_a {
            self.warnings.push(format!(
                "environment dimension {} is below 4 x {}",
                self.dim_e, self.dim_a
            ));
        }
    }

    /// `H_A (x) 1 + 1 (x) H_E + H_int`.
    pub fn h_total(&self) -> HermitianOperator<f64> {
        let a = self.h_a.kron(&HermitianOperator::identity(self.dim_e));
        let e = HermitianOperator::identity(self.dim_a).kron(&self.h_e);
        a.sum(&e)
            .and_then(|x| x.sum(&self.h_int))
            .expect("dimensions checked at assembly")
    }

    pub fn t_final(&self) -> f64 {
        self.eta * self.n_steps as f64
    }

    pub fn with_eta(mut self, eta: f64) -> Result<Self> {
        if !(eta > 0.0 && eta.is_finite()) {
            return Err(validation("eta must be positive"));
        }
        self.eta = eta;
        self.update_t_measure();
        self.refresh_warnings();
        Ok(self)
    }

    pub fn with_steps(mut self, n_steps: usize) -> Result<Self> {
        if n_steps == 0 {
            return Err(validation("n_steps must be positive"));
        }
        self.n_steps = n_steps;
        self.update_t_measure();
        Ok(self)
    }

    pub fn with_eps_null(mut self, eps_null: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&eps_null) {
            return Err(validation("eps_null must lie in [0, 1)"));
        }
        self.eps_null = eps_null;
        Ok(self)
    }

    pub fn with_window(mut self, window: Option<f64>) -> Self {
        self.window = window;
        self
    }

    fn update_t_measure(&mut self) {
        let t = self.t_final();
        if let Some(m) = self.measurement.as_mut() {
            m.t_measure = t;
        }
    }
}

fn op(m: CMatrix<f64>) -> HermitianOperator<f64> {
    HermitianOperator::new(m).expect("builder operators are Hermitian")
}

fn eye(n: usize) -> CMatrix<f64> {
    CMatrix::identity(n, n)
}

fn random_qubit(rng: &mut ChainRng) -> StateVector<f64> {
    let v = CVector::from_fn(2, |_, _| C64::new(rng.normal(), rng.normal()));
    StateVector::normalized(v).expect("nonzero Gaussian vector")
}

fn random_product(rng: &mut ChainRng, n: usize) -> CVector<f64> {
    let mut v = CVector::from_element(1, C64::new(1.0, 0.0));
    for _ in 0..n {
        v = v.kronecker(random_qubit(rng).amplitudes());
    }
    v
}

fn check_bath(n: usize, min: usize) -> Result<()> {
    if n < min || n > MAX_ENV_QUBITS {
        return Err(Error::Size(format!(
            "n_env_qubits must lie in [{min}, {MAX_ENV_QUBITS}], got {n}"
        )));
    }
    Ok(())
}

/// `sum_k h_k sigma_z^(k)` with `h_k ~ U[0.5, 1.5]`.
fn bath_fields(rng: &mut ChainRng, n: usize) -> CMatrix<f64> {
    let mut h = CMatrix::zeros(1 << n, 1 << n);
    for k in 0..n {
        h += pauli::on_qubit(n, k, &pauli::z()) * C64::new(rng.uniform_in(0.5, 1.5), 0.0);
    }
    h
}

/// A qubit coupled to `n` bath qubits through `sum_k g_k sigma_x (x) sigma_x^(k)`.
///
/// `h_a = diag(1, -1) / 2`, bath fields and couplings are drawn from the
/// seeded stream (`g_k ~ U[0.5, 1.5] * coupling_scale`), and the initial
/// state is a random product state.
pub fn build_spin_bath(n_env_qubits: usize, coupling_scale: f64, seed: u64) -> Result<Scenario> {
    check_bath(n_env_qubits, 1)?;
    let n = n_env_qubits;
    let de = 1usize << n;
    let mut rng = ChainRng::for_scenario(seed);
    let h_e = bath_fields(&mut rng, n);
    let mut h_int = CMatrix::zeros(2 * de, 2 * de);
    for k in 0..n {
        let g = rng.uniform_in(0.5, 1.5) * coupling_scale;
        h_int +=
            pauli::x::<f64>().kronecker(&pauli::on_qubit(n, k, &pauli::x())) * C64::new(g, 0.0);
    }
    let a = random_qubit(&mut rng);
    let e = random_product(&mut rng, n);
    let initial = JointState::new(2, de, a.amplitudes().kronecker(&e))?;
    Scenario::assemble(ScenarioParts {
        model: Model::SpinBath,
        dim_a: 2,
        dim_e: de,
        h_a: op(pauli::z::<f64>() * C64::new(0.5, 0.0)),
        h_e: op(h_e),
        h_int: op(h_int),
        eta: DEFAULT_ETA,
        n_steps: DEFAULT_STEPS,
        initial,
        eps_null: DEFAULT_EPS_NULL,
        metadata: format!(
            "spin bath: {n} bath qubits, coupling scale {coupling_scale}, seed {seed}"
        ),
        is_static: coupling_scale == 0.0,
        seed,
    })
}

/// Generator `G` of the cyclic shift, `exp(-i G) |x> = |x + 1 mod P>`.
pub fn shift_generator(p: usize) -> CMatrix<f64> {
    let norm = 1.0 / (p as f64).sqrt();
    let f = CMatrix::from_fn(p, p, |x, k| {
        let th = 2.0 * PI * (x * k) as f64 / p as f64;
        C64::new(th.cos() * norm, th.sin() * norm)
    });
    let freq = CMatrix::from_fn(p, p, |i, j| {
        if i != j {
            return C64::new(0.0, 0.0);
        }
        let k = if 2 * i > p {
            i as f64 - p as f64
        } else {
            i as f64
        };
        C64::new(2.0 * PI * k / p as f64, 0.0)
    });
    &f * freq * f.adjoint()
}

/// Pointer ready state: localized at 0 or a Gaussian on the ring.
fn ready_state(p: usize, width: f64) -> CVector<f64> {
    let mut v = CVector::zeros(p);
    if width == 0.0 {
        v[0] = C64::new(1.0, 0.0);
        return v;
    }
    for x in 0..p {
        let xc = ((x + p / 2) % p) as f64 - (p / 2) as f64;
        v[x] = C64::new((-xc * xc / (4.0 * width * width)).exp(), 0.0);
    }
    let n = v.norm();
    v / C64::new(n, 0.0)
}

/// Premeasurement of a qubit by a pointer on a ring of `pointer_dim` sites,
/// with the pointer decohered by a bath of `n_env_qubits` qubits.
///
/// ```text
/// H = g_p G (x) sigma_z(qubit) (x) 1
///   + sum_k g_k cos(2 pi x / P + phi_k) (x) 1 (x) sigma_z^(k)
///   + 1 (x) 1 (x) sum_k h_k sigma_z^(k)
/// ```
///
/// with `g_p = pointer_coupling`, `g_k ~ U[0.5, 1.5] * coupling_scale`,
/// `phi_k ~ U[0, 2 pi)`, and `h_k ~ U[0.5, 1.5]`. The bath starts in a random
/// product state. By default A is the device and E is the qubit plus the bath.
pub fn build_measurement(
    spec: MeasurementSpec,
    n_env_qubits: usize,
    pointer_coupling: f64,
    coupling_scale: f64,
    seed: u64,
) -> Result<Scenario> {
    spec.validate()?;
    check_bath(n_env_qubits, 0)?;
    let (p, n) = (spec.pointer_dim, n_env_qubits);
    let nb = 1usize << n;
    let total = p * 2 * nb;
    if total > DEFAULT_MAX_DIM {
        return Err(Error::Size(format!(
            "total dimension {total} exceeds {DEFAULT_MAX_DIM}"
        )));
    }
    let mut rng = ChainRng::for_scenario(seed);
    let fields = bath_fields(&mut rng, n);
    let g: Vec<f64> = (0..n)
        .map(|_| rng.uniform_in(0.5, 1.5) * coupling_scale)
        .collect();
    let phi: Vec<f64> = (0..n).map(|_| rng.uniform_in(0.0, 2.0 * PI)).collect();
    let bath = random_product(&mut rng, n);

    let pointer = shift_generator(p).kronecker(&pauli::z()) * C64::new(pointer_coupling, 0.0);
    let mut decohere = CMatrix::zeros(total, total);
    for k in 0..n {
        let profile = CMatrix::from_fn(p, p, |i, j| {
            if i == j {
                C64::new(g[k] * (2.0 * PI * i as f64 / p as f64 + phi[k]).cos(), 0.0)
            } else {
                C64::new(0.0, 0.0)
            }
        });
        decohere += profile
            .kronecker(&eye(2))
            .kronecker(&pauli::on_qubit(n, k, &pauli::z()));
    }

    let (dim_a, dim_e, h_a, h_e, h_int) = if spec.qubit_in_system {
        (2 * p, nb, pointer, fields, decohere)
    } else {
        (
            p,
            2 * nb,
            CMatrix::zeros(p, p),
            eye(2).kronecker(&fields),
            pointer.kronecker(&eye(nb)) + decohere,
        )
    };

    let ready = ready_state(p, spec.pointer_width);
    let qubit = CVector::from_vec(vec![spec.c_plus, spec.c_minus]);
    let with_qubit = |q: &CVector<f64>| ready.kronecker(q).kronecker(&bath);
    let initial = JointState::new(dim_a, dim_e, with_qubit(&qubit))?;
    let z_plus = CVector::from_vec(vec![C64::new(1.0, 0.0), C64::new(0.0, 0.0)]);
    let z_minus = CVector::from_vec(vec![C64::new(0.0, 0.0), C64::new(1.0, 0.0)]);
    let measurement = Measurement {
        branch_phi0: JointState::new(p, nb, ready.kronecker(&bath))?,
        start_plus: JointState::new(dim_a, dim_e, with_qubit(&z_plus))?,
        start_minus: JointState::new(dim_a, dim_e, with_qubit(&z_minus))?,
        t_measure: DEFAULT_ETA * DEFAULT_STEPS as f64,
        n_bath: n,
        spec: spec.clone(),
    };
    let h_int = op(h_int);
    let mut s = Scenario::assemble(ScenarioParts {
        model: Model::Measurement,
        dim_a,
        dim_e,
        h_a: op(h_a),
        h_e: op(h_e),
        is_static: h_int.is_zero(),
        h_int,
        eta: DEFAULT_ETA,
        n_steps: DEFAULT_STEPS,
        initial,
        eps_null: DEFAULT_EPS_NULL,
        metadata: format!(
            "measurement: |c+|^2 = {}, pointer {p}, {n} bath qubits, pointer coupling {pointer_coupling}, bath coupling {coupling_scale}, qubit in {}, seed {seed}",
            spec.weight_plus(),
            if spec.qubit_in_system { "A" } else { "E" }
        ),
        seed,
    })?;
    s.measurement = Some(measurement);
    Ok(s)
}

/// Two qubits A and B, each coupled to its own half of an `n`-qubit bath,
/// with an optional direct `inter_coupling * sigma_x (x) sigma_x` term.
///
/// The scenario's subsystem is the composite AB (`d_A = 4`); `factor_dims`
/// records `(2, 2, 2^n)` for factorization checks. With zero inter-coupling
/// the joint state stays an exact product of (A + first half) and
/// (B + second half).
pub fn build_tripartite(
    n_env_qubits: usize,
    coupling_scale: f64,
    inter_coupling: f64,
    seed: u64,
) -> Result<Scenario> {
    check_bath(n_env_qubits, 2)?;
    let n = n_env_qubits;
    let de = 1usize << n;
    let split = n.div_ceil(2);
    let mut rng = ChainRng::for_scenario(seed);
    let h_e = bath_fields(&mut rng, n);
    let sx = pauli::x::<f64>();
    let sz = pauli::z::<f64>();
    let omega_b = rng.uniform_in(0.5, 1.5);
    let h_a = sz.kronecker(&eye(2)) * C64::new(0.5, 0.0)
        + eye(2).kronecker(&sz) * C64::new(0.5 * omega_b, 0.0)
        + sx.kronecker(&sx) * C64::new(inter_coupling, 0.0);
    let mut h_int = CMatrix::zeros(4 * de, 4 * de);
    for k in 0..n {
        let g = rng.uniform_in(0.5, 1.5) * coupling_scale;
        let on_ab = if k < split {
            sx.kronecker(&eye(2))
        } else {
            eye(2).kronecker(&sx)
        };
        h_int += on_ab.kronecker(&pauli::on_qubit(n, k, &sx)) * C64::new(g, 0.0);
    }
    let a = random_qubit(&mut rng);
    let b = random_qubit(&mut rng);
    let e = random_product(&mut rng, n);
    let initial = JointState::new(
        4,
        de,
        a.amplitudes().kronecker(b.amplitudes()).kronecker(&e),
    )?;
    let mut s = Scenario::assemble(ScenarioParts {
        model: Model::Tripartite,
        dim_a: 4,
        dim_e: de,
        h_a: op(h_a),
        h_e: op(h_e),
        h_int: op(h_int),
        eta: DEFAULT_ETA,
        n_steps: DEFAULT_STEPS,
        initial,
        eps_null: DEFAULT_EPS_NULL,
        metadata: format!(
            "tripartite: {n} bath qubits, coupling scale {coupling_scale}, inter-coupling {inter_coupling}, seed {seed}"
        ),
        is_static: coupling_scale == 0.0,
        seed,
    })?;
    s.factor_dims = Some([2, 2, de]);
    Ok(s)
}

/// Reduced density matrices of the two measurement branches at `t_measure`.
#[derive(Debug, Clone)]
pub struct BranchDensities {
    /// `Tr_E` of the initial superposition.
    pub rho_0: DensityMatrix<f64>,
    pub rho_plus: DensityMatrix<f64>,
    pub rho_minus: DensityMatrix<f64>,
    /// `Tr_E` of the superposition evolved to `t_measure`.
    pub rho_t: DensityMatrix<f64>,
    /// `max |rho_t - |c+|^2 rho_plus - |c-|^2 rho_minus|`.
    pub mixture_residual: f64,
}

impl BranchDensities {
    pub fn mixture_holds(&self) -> bool {
        self.mixture_residual <= MIXTURE_TOL
    }
}

fn measurement_of(scenario: &Scenario) -> Result<&Measurement> {
    scenario
        .measurement
        .as_ref()
        .ok_or_else(|| validation("scenario has no measurement data"))
}

/// Evolves each branch separately to `t_measure` and traces out E.
///
/// The mixture identity is evaluated and reported in
/// [`BranchDensities::mixture_residual`]; see [`BranchDensities::mixture_holds`].
pub fn branch_density_matrices(scenario: &Scenario) -> Result<BranchDensities> {
    let prop = Propagator::new(&scenario.h_total());
    branch_density_matrices_with(scenario, &prop, measurement_of(scenario)?.t_measure)
}

/// As [`branch_density_matrices`] with a prepared propagator and time.
pub fn branch_density_matrices_with(
    scenario: &Scenario,
    prop: &Propagator<f64>,
    t: f64,
) -> Result<BranchDensities> {
    let m = measurement_of(scenario)?;
    let plus = prop.evolve(&m.start_plus, t)?;
    let minus = prop.evolve(&m.start_minus, t)?;
    let full = prop.evolve(&scenario.initial, t)?;
    let rho_plus = partial_trace_env(&plus);
    let rho_minus = partial_trace_env(&minus);
    let rho_t = partial_trace_env(&full);
    let (wp, wm) = (m.spec.weight_plus(), m.spec.weight_minus());
    let mix = rho_plus.entries() * C64::new(wp, 0.0) + rho_minus.entries() * C64::new(wm, 0.0);
    let mixture_residual = crate::hilbert::max_abs_diff(rho_t.entries(), &mix);
    Ok(BranchDensities {
        rho_0: partial_trace_env(&scenario.initial),
        rho_plus,
        rho_minus,
        rho_t,
        mixture_residual,
    })
}

/// `|<Phi_+(t)|Phi_-(t)>|` of the device-plus-bath branch states at every step.
pub fn branch_overlaps(scenario: &Scenario) -> Result<Vec<f64>> {
    let m = measurement_of(scenario)?;
    let prop = Propagator::new(&scenario.h_total());
    let plus = prop.trajectory(&m.start_plus, scenario.eta, scenario.n_steps)?;
    let minus = prop.trajectory(&m.start_minus, scenario.eta, scenario.n_steps)?;
    let (p, nb) = (m.spec.pointer_dim, 1usize << m.n_bath);
    Ok(plus
        .iter()
        .zip(&minus)
        .map(|(a, b)| {
            let mut acc = C64::new(0.0, 0.0);
            for x in 0..p {
                for e in 0..nb {
                    // Qubit component 0 of the plus branch against component 1 of the minus branch.
                    let ia = (x * 2) * nb + e;
                    let ib = (x * 2 + 1) * nb + e;
                    acc += a.amplitudes()[ia].conj() * b.amplitudes()[ib];
                }
            }
            acc.norm()
        })
        .collect())
}

/// Parameters of the macroscopic-distinctness estimate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeltaParams {
    /// Number of degrees of freedom `N`.
    pub n_dof: f64,
    /// Separation `L` in meters.
    pub sep: f64,
    /// Microscopic length `l` in meters.
    pub micro: f64,
}

impl DeltaParams {
    /// `N` and `l` must be positive; `L` may be zero.
    pub fn new(n_dof: f64, sep: f64, micro: f64) -> Result<Self> {
        let ok = |x: f64| x.is_finite() && x > 0.0;
        if !ok(n_dof) || !ok(micro) || !(sep.is_finite() && sep >= 0.0) {
            return Err(validation(
                "delta parameters must be finite, N and l positive, L non-negative",
            ));
        }
        Ok(Self { n_dof, sep, micro })
    }
}

/// `ln Delta = -N (L / l)^2`, kept in log space since `Delta` underflows.
pub fn delta_estimate(params: DeltaParams) -> f64 {
    let r = params.sep / params.micro;
    -(r * r) * params.n_dof
}

/// One upper-triangle Hamiltonian entry in a custom scenario file.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatrixEntry {
    pub row: usize,
    pub col: usize,
    #[serde(default)]
    pub re: f64,
    #[serde(default)]
    pub im: f64,
}

/// One initial-state amplitude at flat index `a * d_E + e`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AmplitudeEntry {
    pub index: usize,
    #[serde(default)]
    pub re: f64,
    #[serde(default)]
    pub im: f64,
}

fn default_eps_null() -> f64 {
    DEFAULT_EPS_NULL
}

/// On-disk scenario description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    pub model: Model,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dims: Option<Vec<usize>>,
    pub eta: f64,
    pub n_steps: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_eps_null")]
    pub eps_null: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c_plus_re: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c_plus_im: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c_minus_re: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c_minus_im: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_env_qubits: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coupling_scale: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pointer_dim: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pointer_coupling: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pointer_width: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub qubit_in_system: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inter_coupling: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub window: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub margin_min: Option<f64>,
    #[serde(rename = "static", default, skip_serializing_if = "Option::is_none")]
    pub is_static: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub h_a: Option<Vec<MatrixEntry>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub h_e: Option<Vec<MatrixEntry>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub h_int: Option<Vec<MatrixEntry>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial: Option<Vec<AmplitudeEntry>>,
}

impl ScenarioFile {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| validation(format!("scenario JSON: {e}")))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario files serialize")
    }

    fn forbid(&self, names: &[(&str, bool)]) -> Result<()> {
        for (name, present) in names {
            if *present {
                return Err(validation(format!(
                    "field `{name}` is not used by model `{}`",
                    self.model.name()
                )));
            }
        }
        Ok(())
    }

    fn require<T: Copy>(&self, name: &str, v: Option<T>) -> Result<T> {
        v.ok_or_else(|| {
            validation(format!(
                "model `{}` requires field `{name}`",
                self.model.name()
            ))
        })
    }

    fn check_dims(&self, actual: &[usize]) -> Result<()> {
        match &self.dims {
            Some(d) if d.as_slice() != actual => Err(validation(format!(
                "field `dims` is {d:?} but the model has dimensions {actual:?}"
            ))),
            _ => Ok(()),
        }
    }

    /// Builds and validates the scenario.
    pub fn build(&self) -> Result<Scenario> {
        let f = self;
        let has_amps = f.c_plus_re.is_some()
            || f.c_plus_im.is_some()
            || f.c_minus_re.is_some()
            || f.c_minus_im.is_some();
        let has_pointer = f.pointer_dim.is_some()
            || f.pointer_coupling.is_some()
            || f.pointer_width.is_some()
            || f.qubit_in_system.is_some();
        let has_custom =
            f.h_a.is_some() || f.h_e.is_some() || f.h_int.is_some() || f.initial.is_some();
        let scenario = match f.model {
            Model::SpinBath => {
                f.forbid(&[
                    ("c_plus_re/c_plus_im/c_minus_re/c_minus_im", has_amps),
                    ("pointer_*", has_pointer),
                    ("inter_coupling", f.inter_coupling.is_some()),
                    ("h_a/h_e/h_int/initial", has_custom),
                    ("static", f.is_static.is_some()),
                ])?;
                let n = f.require("n_env_qubits", f.n_env_qubits)?;
                let s = build_spin_bath(n, f.require("coupling_scale", f.coupling_scale)?, f.seed)?;
                f.check_dims(&[s.dim_a, s.dim_e])?;
                s
            }
            Model::Measurement => {
                f.forbid(&[
                    ("inter_coupling", f.inter_coupling.is_some()),
                    ("h_a/h_e/h_int/initial", has_custom),
                    ("static", f.is_static.is_some()),
                ])?;
                let c_plus = C64::new(
                    f.require("c_plus_re", f.c_plus_re)?,
                    f.c_plus_im.unwrap_or(0.0),
                );
                let c_minus = if f.c_minus_re.is_none() && f.c_minus_im.is_none() {
                    C64::new((1.0 - c_plus.norm_sqr()).max(0.0).sqrt(), 0.0)
                } else {
                    C64::new(f.c_minus_re.unwrap_or(0.0), f.c_minus_im.unwrap_or(0.0))
                };
                let spec = MeasurementSpec {
                    c_plus,
                    c_minus,
                    pointer_dim: f.require("pointer_dim", f.pointer_dim)?,
                    pointer_width: f.pointer_width.unwrap_or(0.0),
                    qubit_in_system: f.qubit_in_system.unwrap_or(false),
                };
                let s = build_measurement(
                    spec,
                    f.require("n_env_qubits", f.n_env_qubits)?,
                    f.require("pointer_coupling", f.pointer_coupling)?,
                    f.require("coupling_scale", f.coupling_scale)?,
                    f.seed,
                )?;
                f.check_dims(&[s.dim_a, s.dim_e])?;
                s
            }
            Model::Tripartite => {
                f.forbid(&[
                    ("c_plus_re/c_plus_im/c_minus_re/c_minus_im", has_amps),
                    ("pointer_*", has_pointer),
                    ("h_a/h_e/h_int/initial", has_custom),
                    ("static", f.is_static.is_some()),
                ])?;
                let s = build_tripartite(
                    f.require("n_env_qubits", f.n_env_qubits)?,
                    f.require("coupling_scale", f.coupling_scale)?,
                    f.inter_coupling.unwrap_or(0.0),
                    f.seed,
                )?;
                let [a, b, e] = s.factor_dims.expect("tripartite dims");
                f.check_dims(&[a, b, e])?;
                s
            }
            Model::Custom => {
                f.forbid(&[
                    ("c_plus_re/c_plus_im/c_minus_re/c_minus_im", has_amps),
                    ("pointer_*", has_pointer),
                    ("inter_coupling", f.inter_coupling.is_some()),
                    ("n_env_qubits", f.n_env_qubits.is_some()),
                    ("coupling_scale", f.coupling_scale.is_some()),
                ])?;
                f.build_custom()?
            }
        };
        let mut s = scenario
            .with_eta(f.eta)?
            .with_steps(f.n_steps)?
            .with_eps_null(f.eps_null)?
            .with_window(f.window);
        if let Some(w) = f.window {
            if !(w > 0.0 && w.is_finite()) {
                return Err(validation("window must be positive"));
            }
        }
        if let Some(m) = f.margin_min {
            if !(0.0..=1.0).contains(&m) {
                return Err(validation("margin_min must lie in [0, 1]"));
            }
            s.margin_min = m;
        }
        if let Some(d) = &f.description {
            s.metadata = format!("{d} ({})", s.metadata);
        }
        Ok(s)
    }

    fn build_custom(&self) -> Result<Scenario> {
        let dims = self.require("dims", self.dims.as_ref())?;
        let (da, de, factor) = match dims.as_slice() {
            [a, e] => (*a, *e, None),
            [a, b, e] => (a * b, *e, Some([*a, *b, *e])),
            _ => {
                return Err(validation(
                    "custom `dims` must be [d_A, d_E] or [d_A, d_B, d_E]",
                ))
            }
        };
        if da == 0 || de == 0 || da.saturating_mul(de) > DEFAULT_MAX_DIM {
            return Err(Error::Size(format!(
                "custom dimensions {dims:?} are out of range"
            )));
        }
        let h_a = hermitian_from_entries("h_a", self.h_a.as_deref().unwrap_or(&[]), da)?;
        let h_e = hermitian_from_entries("h_e", self.h_e.as_deref().unwrap_or(&[]), de)?;
        let h_int = hermitian_from_entries("h_int", self.h_int.as_deref().unwrap_or(&[]), da * de)?;
        let amps = self.require("initial", self.initial.as_ref())?;
        let mut v = CVector::zeros(da * de);
        for a in amps {
            if a.index >= da * de {
                return Err(validation(format!(
                    "initial index {} is out of range",
                    a.index
                )));
            }
            v[a.index] += C64::new(a.re, a.im);
        }
        let initial = JointState::normalized(da, de, v)
            .map_err(|_| validation("custom initial state is zero"))?;
        let mut s = Scenario::assemble(ScenarioParts {
            model: Model::Custom,
            dim_a: da,
            dim_e: de,
            h_a,
            h_e,
            h_int,
            eta: self.eta,
            n_steps: self.n_steps,
            initial,
            eps_null: self.eps_null,
            metadata: "custom".into(),
            is_static: self.is_static.unwrap_or(false),
            seed: self.seed,
        })?;
        s.factor_dims = factor;
        Ok(s)
    }
}

fn hermitian_from_entries(
    name: &str,
    entries: &[MatrixEntry],
    dim: usize,
) -> Result<HermitianOperator<f64>> {
    let mut m = CMatrix::zeros(dim, dim);
    for e in entries {
        if e.row >= dim || e.col >= dim {
            return Err(validation(format!(
                "{name} entry ({}, {}) is outside dimension {dim}",
                e.row, e.col
            )));
        }
        if e.row > e.col {
            return Err(validation(format!(
                "{name} entry ({}, {}) is below the diagonal; give the upper triangle only",
                e.row, e.col
            )));
        }
        if e.row == e.col && e.im != 0.0 {
            return Err(validation(format!(
                "{name} diagonal entry ({}, {}) must be real",
                e.row, e.col
            )));
        }
        m[(e.row, e.col)] += C64::new(e.re, e.im);
        if e.row != e.col {
            m[(e.col, e.row)] += C64::new(e.re, -e.im);
        }
    }
    HermitianOperator::new(m)
}

/// Reads and builds a scenario file.
pub fn load_scenario(path: &Path) -> Result<Scenario> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| validation(format!("cannot read {}: {e}", path.display())))?;
    ScenarioFile::from_json(&text)?.build()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hilbert::max_abs_diff;
    use crate::ontic::transition_matrix;
    use crate::schmidt::extract_frame;

    #[test]
    fn spin_bath_dimensions() {
        let s = build_spin_bath(3, 1.0, 1).unwrap();
        assert_eq!((s.dim_a, s.dim_e), (2, 8));
        assert_eq!(s.h_total().dim(), 16);
        assert!(!s.is_static);
        assert!(check_bath(12, 1).is_err());
        assert!(matches!(build_spin_bath(12, 1.0, 1), Err(Error::Size(_))));
    }

    #[test]
    fn spin_bath_is_deterministic() {
        let a = build_spin_bath(4, 0.7, 9).unwrap();
        let b = build_spin_bath(4, 0.7, 9).unwrap();
        let c = build_spin_bath(4, 0.7, 10).unwrap();
        assert_eq!(a.h_int.entries(), b.h_int.entries());
        assert_eq!(a.initial, b.initial);
        assert_ne!(a.h_int.entries(), c.h_int.entries());
    }

    #[test]
    fn zero_coupling_is_static_with_identity_steps() {
        let s = build_spin_bath(3, 0.0, 1).unwrap();
        assert!(s.is_static);
        let prop = Propagator::new(&s.h_total());
        for psi in prop.trajectory(&s.initial, s.eta, 10).unwrap() {
            let f = extract_frame(&psi, s.eps_null, 0.0).unwrap();
            let tm = transition_matrix(&f, &s.h_int, s.eta).unwrap();
            assert_eq!(tm.p_cond(), &nalgebra::DMatrix::identity(f.len(), f.len()));
        }
    }

    #[test]
    fn h_total_is_hermitian() {
        for s in [
            build_spin_bath(3, 1.0, 2).unwrap(),
            build_measurement(MeasurementSpec::with_weight(0.3, 4), 2, 1.0, 0.1, 2).unwrap(),
            build_tripartite(4, 0.3, 0.1, 2).unwrap(),
        ] {
            let h = s.h_total();
            assert!(max_abs_diff(h.entries(), &h.entries().adjoint()) <= 1e-12);
        }
    }

    #[test]
    fn shift_generator_exponentiates_to_shift() {
        let p = 5;
        let g = HermitianOperator::new(shift_generator(p)).unwrap();
        let prop = Propagator::new(&g);
        let psi = JointState::new(p, 1, StateVector::basis(p, 2).into_amplitudes()).unwrap();
        let out = prop.evolve(&psi, 1.0).unwrap();
        assert!((out.amplitudes()[3].norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn single_branch_matches_plus_density() {
        let spec = MeasurementSpec::with_weight(1.0, 4);
        let s = build_measurement(spec, 3, 1.0, 0.1, 4).unwrap();
        let b = branch_density_matrices(&s).unwrap();
        assert!(b.rho_t.max_abs_diff(&b.rho_plus) <= 1e-8);
    }

    #[test]
    fn c_plus_zero_gives_minus_density() {
        let s = build_measurement(MeasurementSpec::with_weight(0.0, 4), 3, 1.0, 0.1, 4).unwrap();
        let b = branch_density_matrices(&s).unwrap();
        assert!(b.rho_t.max_abs_diff(&b.rho_minus) <= 1e-10);
    }

    #[test]
    fn uncoupled_measurement_stays_product() {
        let spec = MeasurementSpec {
            c_plus: C64::new(0.5f64.sqrt(), 0.0),
            c_minus: C64::new(0.5f64.sqrt(), 0.0),
            pointer_dim: 4,
            pointer_width: 0.0,
            qubit_in_system: false,
        };
        let s = build_measurement(spec, 3, 0.0, 0.0, 1).unwrap();
        assert!(s.is_static);
        let psi = Propagator::new(&s.h_total())
            .evolve(&s.initial, s.t_final())
            .unwrap();
        assert_eq!(extract_frame(&psi, s.eps_null, 0.0).unwrap().len(), 1);
    }

    #[test]
    fn mixture_identity_and_linearity() {
        let s = build_measurement(MeasurementSpec::with_weight(0.3, 4), 4, 1.0, 0.1, 3).unwrap();
        let b = branch_density_matrices(&s).unwrap();
        assert!(b.mixture_holds(), "residual {}", b.mixture_residual);
        let m = s.measurement.as_ref().unwrap();
        let prop = Propagator::new(&s.h_total());
        let full = prop.trajectory(&s.initial, s.eta, 20).unwrap();
        let plus = prop.trajectory(&m.start_plus, s.eta, 20).unwrap();
        let minus = prop.trajectory(&m.start_minus, s.eta, 20).unwrap();
        for k in 0..=20 {
            let sum = plus[k].amplitudes() * m.spec.c_plus + minus[k].amplitudes() * m.spec.c_minus;
            let d = (full[k].amplitudes() - sum).map(|z| z.norm()).max();
            assert!(d <= 1e-10);
        }
    }

    #[test]
    fn branch_density_at_time_zero_has_orthogonal_qubits() {
        let mut spec = MeasurementSpec::with_weight(0.3, 4);
        spec.qubit_in_system = true;
        let s = build_measurement(spec, 3, 1.0, 0.1, 5).unwrap();
        let prop = Propagator::new(&s.h_total());
        let b = branch_density_matrices_with(&s, &prop, 0.0).unwrap();
        // A = device (x) qubit; the branch densities live on orthogonal qubit sectors.
        let overlap = (b.rho_plus.entries() * b.rho_minus.entries())
            .map(|z| z.norm())
            .max();
        assert!(overlap < 1e-15);
        assert!((b.rho_plus.trace() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn branch_overlap_decreases() {
        let mut spec = MeasurementSpec::with_weight(0.3, 32);
        spec.pointer_width = 1.2;
        let s = build_measurement(spec, 2, 1.0, 0.1, 3)
            .unwrap()
            .with_eta(0.05)
            .unwrap()
            .with_steps(140)
            .unwrap();
        let ov = branch_overlaps(&s).unwrap();
        assert!((ov[0] - 1.0).abs() < 1e-12);
        assert!(
            ov.windows(2).all(|w| w[1] <= w[0] + 1e-9),
            "{:?}",
            ov.iter().step_by(10).collect::<Vec<_>>()
        );
        assert!(*ov.last().unwrap() < 1e-6);
    }

    #[test]
    fn non_measurement_scenarios_reject_branch_queries() {
        let s = build_spin_bath(2, 1.0, 1).unwrap();
        assert!(matches!(
            branch_density_matrices(&s),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn invalid_measurement_amplitudes() {
        let mut spec = MeasurementSpec::with_weight(0.3, 4);
        spec.c_minus = C64::new(0.1, 0.0);
        assert!(build_measurement(spec, 2, 1.0, 0.1, 1).is_err());
    }

    #[test]
    fn delta_examples() {
        assert_eq!(
            delta_estimate(DeltaParams::new(1e20, 1e-4, 1e-10).unwrap()),
            -1e32
        );
        assert_eq!(
            delta_estimate(DeltaParams::new(1e20, 0.0, 1e-10).unwrap()),
            0.0
        );
        assert_eq!(
            delta_estimate(DeltaParams::new(10.0, 1e-10, 1e-10).unwrap()),
            -10.0
        );
        assert!(DeltaParams::new(-1.0, 1.0, 1.0).is_err());
        assert!(DeltaParams::new(1.0, 1.0, 0.0).is_err());
    }

    #[test]
    fn factorized_tripartite_without_inter_coupling() {
        let s = build_tripartite(4, 0.5, 0.0, 1).unwrap();
        let psi = Propagator::new(&s.h_total())
            .evolve(&s.initial, 1.0)
            .unwrap();
        // Reorder (a, b, e1, e2) -> (a, e1, b, e2) and check rank one across the cut.
        let m = CMatrix::from_fn(8, 8, |r, c| {
            let (a, e1) = (r / 4, r % 4);
            let (b, e2) = (c / 4, c % 4);
            psi.amplitudes()[((a * 2 + b) * 4 + e1) * 4 + e2]
        });
        let sv = m.singular_values();
        assert!(sv[1] < 1e-12);
    }

    #[test]
    fn json_round_trip_and_validation() {
        let text = r#"{"model": "spin_bath", "eta": 0.005, "n_steps": 10, "seed": 2,
                       "n_env_qubits": 3, "coupling_scale": 1.0, "dims": [2, 8]}"#;
        let f = ScenarioFile::from_json(text).unwrap();
        let s = f.build().unwrap();
        assert_eq!(s.n_steps, 10);
        assert_eq!(ScenarioFile::from_json(&f.to_json()).unwrap(), f);

        let unknown = r#"{"model": "spin_bath", "eta": 0.01, "n_steps": 1, "bogus": 1}"#;
        assert!(ScenarioFile::from_json(unknown)
            .unwrap_err()
            .to_string()
            .contains("bogus"));
        let missing = r#"{"model": "spin_bath", "eta": 0.01, "n_steps": 1, "n_env_qubits": 2}"#;
        assert!(ScenarioFile::from_json(missing).unwrap().build().is_err());
        let wrong_dims = r#"{"model": "spin_bath", "eta": 0.01, "n_steps": 1, "n_env_qubits": 2,
                             "coupling_scale": 1.0, "dims": [2, 2]}"#;
        assert!(ScenarioFile::from_json(wrong_dims)
            .unwrap()
            .build()
            .is_err());
        let foreign = r#"{"model": "spin_bath", "eta": 0.01, "n_steps": 1, "n_env_qubits": 2,
                          "coupling_scale": 1.0, "pointer_dim": 4}"#;
        assert!(ScenarioFile::from_json(foreign).unwrap().build().is_err());
    }

    #[test]
    fn custom_scenarios() {
        let text = r#"{"model": "custom", "dims": [2, 2], "eta": 0.01, "n_steps": 5,
            "h_int": [{"row": 0, "col": 3, "im": 0.1}],
            "initial": [{"index": 0, "re": 1.0}, {"index": 3, "re": 1.0}]}"#;
        let s = ScenarioFile::from_json(text).unwrap().build().unwrap();
        assert_eq!(s.h_int.entries()[(3, 0)], C64::new(0.0, -0.1));
        assert!((s.initial.norm_sqr() - 1.0).abs() < 1e-15);

        let lower = text.replace(r#""row": 0, "col": 3"#, r#""row": 3, "col": 0"#);
        assert!(ScenarioFile::from_json(&lower).unwrap().build().is_err());
        let zero = r#"{"model": "custom", "dims": [2, 2], "eta": 0.01, "n_steps": 5,
            "initial": [{"index": 0, "re": 1.0}]}"#;
        assert!(ScenarioFile::from_json(zero).unwrap().build().is_err());
        let marked = zero.replace(r#""n_steps": 5"#, r#""n_steps": 5, "static": true"#);
        assert!(
            ScenarioFile::from_json(&marked)
                .unwrap()
                .build()
                .unwrap()
                .is_static
        );
    }

    #[test]
    fn warnings_flag_small_environment_and_large_step() {
        let s = build_spin_bath(1, 1.0, 1).unwrap().with_eta(1.0).unwrap();
        assert_eq!(s.warnings.len(), 2);
    }
}
