//! Trajectory ensembles over a precomputed frame timeline, and the reports
//! built from them.
//!
//! The joint wavefunction is deterministic, so frames and transition matrices
//! are computed once per scenario in a [`Timeline`]. Trajectories only sample
//! the chain, each from its own `(master_seed, index)` stream, which makes
//! every report independent of the worker count.

use std::collections::BTreeMap;
use std::sync::Arc;

use nalgebra::Complex;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::assignment;
use crate::error::{validation, Error, Result};
use crate::hilbert::{inner, CMatrix, CVector, DensityMatrix, JointState, Propagator};
use crate::ontic::{
    compose_chain, decoherence_scale, flow_residual_union, sample_index, transition_matrix_raw,
    RawTransition, TransitionMatrix,
};
use crate::rng::ChainRng;
use crate::scenarios::{branch_density_matrices_with, BranchDensities, MeasurementSpec, Scenario};
use crate::schmidt::{extract_frame, match_frames, SchmidtFrame};

/// Default classification margin.
pub const DEFAULT_MARGIN_MIN: f64 = 0.9;

/// Column distance at or below which a window counts as equilibrated.
pub const EQUILIBRIUM_TV: f64 = 0.05;

const FROZEN_TOL: f64 = 1e-6;
const CHUNK: usize = 32;

/// Labels and weights of one frame; the vectors are dropped after use.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FrameSummary {
    pub time: f64,
    pub labels: Vec<u64>,
    pub p: Vec<f64>,
    pub null_weight: f64,
}

impl FrameSummary {
    fn of(frame: &SchmidtFrame<f64>) -> Self {
        Self {
            time: frame.time(),
            labels: frame.labels().to_vec(),
            p: frame.p().to_vec(),
            null_weight: frame.null_weight(),
        }
    }

    pub fn weight(&self, label: u64) -> Option<f64> {
        self.labels.binary_search(&label).ok().map(|i| self.p[i])
    }
}

/// Per-step health of the effective description, for the step `t -> t + eta`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepDiagnostics {
    pub step: usize,
    pub t: f64,
    /// Decoherence scale of the step; infinite when nothing moves.
    #[serde(serialize_with = "serialize_real")]
    pub tau: f64,
    pub flow_residual: f64,
    /// Smallest overlap between consecutive eigenvectors of continuing labels.
    pub min_overlap: Option<f64>,
    pub degeneracy: bool,
    pub births: Vec<u64>,
    pub deaths: Vec<u64>,
    /// Labels whose column has a negative diagonal.
    pub broken: Vec<u64>,
    pub n_labels: usize,
    pub null_weight: f64,
}

/// Serializes non-finite reals as the strings `"inf"`, `"-inf"` and `"nan"`.
pub fn serialize_real<S: serde::Serializer>(x: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if x.is_finite() {
        s.serialize_f64(*x)
    } else if x.is_nan() {
        s.serialize_str("nan")
    } else if *x > 0.0 {
        s.serialize_str("inf")
    } else {
        s.serialize_str("-inf")
    }
}

/// Frames and transition matrices of one scenario, shared by all trajectories.
#[derive(Debug, Clone)]
pub struct Timeline {
    pub eta: f64,
    pub n_steps: usize,
    /// `n_steps + 1` frame summaries.
    pub frames: Vec<FrameSummary>,
    /// One-step matrices for steps `0..n_steps`.
    pub transitions: Vec<RawTransition<f64>>,
    pub diagnostics: Vec<StepDiagnostics>,
    pub flow_residuals: Arc<[f64]>,
    pub final_frame: SchmidtFrame<f64>,
    pub final_state: JointState<f64>,
    /// Measurement scenarios only.
    pub branches: Option<BranchDensities>,
    pub partition: Option<EnsemblePartition>,
}

impl Timeline {
    /// Evolves the scenario and builds every frame and transition matrix.
    pub fn compute(scenario: &Scenario) -> Result<Self> {
        let prop = Propagator::new(&scenario.h_total());
        let c0 = prop.coefficients(&scenario.initial)?;
        let (eta, n) = (scenario.eta, scenario.n_steps);
        let eps = scenario.eps_null;
        let h_int = &scenario.h_int;

        let mut frames = Vec::with_capacity(n + 1);
        let mut transitions: Vec<RawTransition<f64>> = Vec::with_capacity(n);
        let mut matches = Vec::with_capacity(n);
        let mut flow = Vec::with_capacity(n);
        let mut prev: Option<SchmidtFrame<f64>> = None;
        let mut last_state = scenario.initial.clone();

        let mut start = 0;
        while start <= n {
            let end = (start + CHUNK).min(n + 1);
            let raw: Vec<(JointState<f64>, SchmidtFrame<f64>)> = (start..end)
                .into_par_iter()
                .map(|k| {
                    let t = k as f64 * eta;
                    let psi = prop.rebuild(&scenario.initial, &c0, t);
                    let frame = extract_frame(&psi, eps, t)?;
                    Ok((psi, frame))
                })
                .collect::<Result<_>>()?;
            let carry = prev.clone();
            let mut chunk = Vec::with_capacity(raw.len());
            for (psi, frame) in raw {
                let frame = match &prev {
                    None => frame,
                    Some(p) => {
                        let (f, m) = match_frames(p, &frame)?;
                        matches.push(m);
                        f
                    }
                };
                last_state = psi;
                prev = Some(frame.clone());
                chunk.push(frame);
            }
            let tms: Vec<RawTransition<f64>> = chunk
                .par_iter()
                .enumerate()
                .filter(|(i, _)| start + i < n)
                .map(|(_, f)| transition_matrix_raw(f, h_int, eta))
                .collect::<Result<_>>()?;
            // Residuals of the steps that end inside this chunk.
            let pairs: Vec<_> = (0..chunk.len())
                .filter(|&i| start + i > 0)
                .map(|i| {
                    let before = if i == 0 {
                        carry.as_ref()
                    } else {
                        chunk.get(i - 1)
                    };
                    let tm = if i == 0 {
                        transitions.last()
                    } else {
                        tms.get(i - 1)
                    };
                    (
                        before.expect("previous frame"),
                        &chunk[i],
                        &tm.expect("previous matrix").matrix,
                    )
                })
                .collect();
            flow.extend(
                pairs
                    .par_iter()
                    .map(|(a, b, tm)| flow_residual_union(a, b, tm))
                    .collect::<Vec<_>>(),
            );
            frames.extend(chunk.iter().map(FrameSummary::of));
            transitions.extend(tms);
            start = end;
        }
        let final_frame = prev.expect("at least one frame");

        let diagnostics = (0..n)
            .map(|k| {
                let tm = &transitions[k];
                let m = &matches[k];
                StepDiagnostics {
                    step: k,
                    t: k as f64 * eta,
                    tau: decoherence_scale(&tm.matrix),
                    flow_residual: flow[k],
                    min_overlap: m.min_overlap(),
                    degeneracy: m.degeneracy_flag,
                    births: m.births.clone(),
                    deaths: m.deaths.clone(),
                    broken: tm.broken.iter().map(|b| b.0).collect(),
                    n_labels: frames[k + 1].labels.len(),
                    null_weight: frames[k + 1].null_weight,
                }
            })
            .collect();

        let (branches, partition) = match &scenario.measurement {
            Some(m) => {
                let b = branch_density_matrices_with(scenario, &prop, m.t_measure)?;
                let w = (m.spec.weight_plus(), m.spec.weight_minus());
                let part = classify_weighted(
                    &final_frame,
                    &b.rho_plus,
                    &b.rho_minus,
                    w,
                    scenario.margin_min,
                )?;
                (Some(b), Some(part))
            }
            None => (None, None),
        };

        Ok(Self {
            eta,
            n_steps: n,
            frames,
            transitions,
            diagnostics,
            flow_residuals: flow.into(),
            final_frame,
            final_state: last_state,
            branches,
            partition,
        })
    }

    /// Largest flow residual over all steps.
    pub fn max_flow_residual(&self) -> f64 {
        self.flow_residuals.iter().copied().fold(0.0, f64::max)
    }

    /// Smallest decoherence scale over all steps.
    pub fn min_tau(&self) -> f64 {
        self.diagnostics
            .iter()
            .map(|d| d.tau)
            .fold(f64::INFINITY, f64::min)
    }

    /// Smallest overlap of continuing labels over all steps.
    pub fn min_overlap(&self) -> Option<f64> {
        self.diagnostics
            .iter()
            .filter_map(|d| d.min_overlap)
            .fold(None, |m, x| Some(m.map_or(x, |m: f64| m.min(x))))
    }

    /// Steps with at least one broken column.
    pub fn broken_steps(&self) -> usize {
        self.diagnostics
            .iter()
            .filter(|d| !d.broken.is_empty())
            .count()
    }

    /// Trailing one-step matrices covering `window`, embedded on the union of
    /// their labels.
    pub fn aligned_window(&self, window: f64) -> Result<Vec<TransitionMatrix<f64>>> {
        if window.is_nan() || window <= 0.0 {
            return Err(validation("window must be positive"));
        }
        let count = (window / self.eta - 1e-9).ceil() as usize;
        if count > self.transitions.len() {
            return Err(Error::Composition(format!(
                "window {window} needs {count} steps but the run has {}",
                self.transitions.len()
            )));
        }
        let tail = &self.transitions[self.transitions.len() - count..];
        let mut labels: Vec<u64> = tail
            .iter()
            .flat_map(|r| r.matrix.labels().iter().copied())
            .collect();
        labels.sort_unstable();
        labels.dedup();
        tail.iter().map(|r| r.matrix.embedded(&labels)).collect()
    }
}

/// Measurement outcome read off the final label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Plus,
    Minus,
    Null,
}

/// One sampled history of the ontic chain.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub seed_index: u64,
    /// Occupied label at every step; truncated after a breakdown.
    pub labels: Vec<u64>,
    /// Per-step flow residuals of the shared timeline.
    pub flow_residuals: Arc<[f64]>,
    /// Step whose matrix broke down in the occupied column.
    pub breakdown: Option<usize>,
    /// Times the occupied label disappeared and the chain was resampled.
    pub death_events: usize,
    /// `None` without a partition or after a breakdown.
    pub outcome: Option<Outcome>,
}

impl Trajectory {
    pub fn initial_label(&self) -> u64 {
        self.labels[0]
    }

    pub fn final_label(&self) -> u64 {
        *self.labels.last().expect("nonempty trajectory")
    }
}

fn sample_from(summary: &FrameSummary, rng: &mut ChainRng) -> Result<u64> {
    let total: f64 = summary.p.iter().sum();
    let u = rng.uniform() * total;
    sample_index(summary.p.iter().copied(), u)
        .map(|i| summary.labels[i])
        .ok_or_else(|| validation("frame has no positive weight"))
}

/// Samples trajectory `index` of `master_seed` over the shared timeline.
pub fn sample_trajectory(timeline: &Timeline, master_seed: u64, index: u64) -> Result<Trajectory> {
    let mut rng = ChainRng::new(master_seed, index);
    let mut labels = Vec::with_capacity(timeline.n_steps + 1);
    let mut label = sample_from(&timeline.frames[0], &mut rng)?;
    labels.push(label);
    let mut breakdown = None;
    let mut death_events = 0;
    for (k, raw) in timeline.transitions.iter().enumerate() {
        if raw.broken.iter().any(|b| b.0 == label) {
            breakdown = Some(k);
            break;
        }
        let tm = &raw.matrix;
        let j = tm
            .index_of(label)
            .ok_or_else(|| validation(format!("label {label} missing at step {k}")))?;
        let u = rng.uniform();
        let i = sample_index(tm.p_cond().column(j).iter().copied(), u)
            .ok_or_else(|| validation("transition column has no positive entry"))?;
        label = tm.labels()[i];
        let next = &timeline.frames[k + 1];
        if next.weight(label).is_none() {
            death_events += 1;
            label = sample_from(next, &mut rng)?;
        }
        labels.push(label);
    }
    let outcome = match (&timeline.partition, breakdown) {
        (Some(part), None) => Some(part.outcome_of(label)),
        _ => None,
    };
    Ok(Trajectory {
        seed_index: index,
        labels,
        flow_residuals: Arc::clone(&timeline.flow_residuals),
        breakdown,
        death_events,
        outcome,
    })
}

/// Builds the timeline and samples a single trajectory.
pub fn run_trajectory(scenario: &Scenario, master_seed: u64, index: u64) -> Result<Trajectory> {
    sample_trajectory(&Timeline::compute(scenario)?, master_seed, index)
}

/// Samples trajectories `0..n` on `workers` threads (`0` picks automatically).
///
/// The result is ordered by index and does not depend on `workers`.
pub fn run_ensemble(
    timeline: &Timeline,
    master_seed: u64,
    n: u64,
    workers: usize,
) -> Result<Vec<Trajectory>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| validation(format!("cannot start worker pool: {e}")))?;
    pool.install(|| {
        (0..n)
            .into_par_iter()
            .map(|i| sample_trajectory(timeline, master_seed, i))
            .collect()
    })
}

/// Final-frame labels split by measurement branch.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EnsemblePartition {
    pub plus_labels: Vec<u64>,
    pub minus_labels: Vec<u64>,
    pub null_labels: Vec<u64>,
    /// `(label, |s+ - s-| / (s+ + s-))` for every label.
    pub margins: Vec<(u64, f64)>,
}

impl EnsemblePartition {
    pub fn outcome_of(&self, label: u64) -> Outcome {
        if self.plus_labels.binary_search(&label).is_ok() {
            Outcome::Plus
        } else if self.minus_labels.binary_search(&label).is_ok() {
            Outcome::Minus
        } else {
            Outcome::Null
        }
    }

    pub fn labels_of(&self, outcome: Outcome) -> &[u64] {
        match outcome {
            Outcome::Plus => &self.plus_labels,
            Outcome::Minus => &self.minus_labels,
            Outcome::Null => &self.null_labels,
        }
    }
}

/// Scores each label by `s(a) = <psi_a|rho|psi_a>` against both branches and
/// assigns it to the larger score when the relative margin reaches `margin_min`.
pub fn classify_ensembles(
    frame: &SchmidtFrame<f64>,
    rho_plus: &DensityMatrix<f64>,
    rho_minus: &DensityMatrix<f64>,
    margin_min: f64,
) -> Result<EnsemblePartition> {
    classify_weighted(frame, rho_plus, rho_minus, (1.0, 1.0), margin_min)
}

/// As [`classify_ensembles`] with scores `w_+ s_+(a)` and `w_- s_-(a)`.
///
/// With the branch weights `|c_+|^2, |c_-|^2` the two scores are the shares of
/// `p_a` contributed by each branch, so a branch of zero weight claims nothing.
pub fn classify_weighted(
    frame: &SchmidtFrame<f64>,
    rho_plus: &DensityMatrix<f64>,
    rho_minus: &DensityMatrix<f64>,
    weights: (f64, f64),
    margin_min: f64,
) -> Result<EnsemblePartition> {
    if rho_plus.dim() != frame.dim_a() || rho_minus.dim() != frame.dim_a() {
        return Err(validation("branch matrices and frame differ in dimension"));
    }
    let mut part = EnsemblePartition {
        plus_labels: Vec::new(),
        minus_labels: Vec::new(),
        null_labels: Vec::new(),
        margins: Vec::new(),
    };
    for (i, &label) in frame.labels().iter().enumerate() {
        let v = frame.psi()[i].amplitudes();
        let sp = weights.0 * rho_plus.expectation(v).max(0.0);
        let sm = weights.1 * rho_minus.expectation(v).max(0.0);
        let margin = if sp + sm > 0.0 {
            (sp - sm).abs() / (sp + sm)
        } else {
            0.0
        };
        part.margins.push((label, margin));
        if margin >= margin_min && sp != sm {
            if sp > sm {
                part.plus_labels.push(label);
            } else {
                part.minus_labels.push(label);
            }
        } else {
            part.null_labels.push(label);
        }
    }
    Ok(part)
}

/// `(sum of p_a over plus, minus, null labels)` of a frame.
pub fn branch_weights(frame: &SchmidtFrame<f64>, partition: &EnsemblePartition) -> (f64, f64, f64) {
    let sum = |ls: &[u64]| ls.iter().filter_map(|&l| frame.weight(l)).sum::<f64>();
    (
        sum(&partition.plus_labels),
        sum(&partition.minus_labels),
        sum(&partition.null_labels),
    )
}

/// Outcome counts of the trajectories that started from one label.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InitialLabelStats {
    pub label: u64,
    pub n: usize,
    pub n_plus: usize,
    pub n_minus: usize,
    /// `None` when no trajectory from this label was classified.
    pub f_plus: Option<f64>,
}

/// Empirical outcome frequencies against `|c+|^2`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BornReport {
    pub n_total: usize,
    pub n_plus: usize,
    pub n_minus: usize,
    pub n_null: usize,
    pub n_breakdown: usize,
    pub f_plus: f64,
    pub f_minus: f64,
    pub expected_plus: f64,
    /// Three binomial standard deviations at the expected frequency.
    pub half_width_3sigma: f64,
    pub within_3sigma: bool,
    /// Null and breakdown trajectories over all trajectories.
    pub excluded_fraction: f64,
    pub per_initial_label: Vec<InitialLabelStats>,
}

/// Outcome frequencies of classified trajectories, with nulls and breakdowns
/// counted but excluded.
pub fn born_statistics(trajectories: &[Trajectory], spec: &MeasurementSpec) -> Result<BornReport> {
    let mut n_plus = 0;
    let mut n_minus = 0;
    let mut n_null = 0;
    let mut n_breakdown = 0;
    let mut per: BTreeMap<u64, (usize, usize, usize)> = BTreeMap::new();
    for t in trajectories {
        let e = per.entry(t.initial_label()).or_default();
        e.0 += 1;
        if t.breakdown.is_some() {
            n_breakdown += 1;
            continue;
        }
        match t.outcome {
            Some(Outcome::Plus) => {
                n_plus += 1;
                e.1 += 1;
            }
            Some(Outcome::Minus) => {
                n_minus += 1;
                e.2 += 1;
            }
            Some(Outcome::Null) | None => n_null += 1,
        }
    }
    let classified = n_plus + n_minus;
    if classified == 0 {
        return Err(Error::EmptyEnsemble(format!(
            "none of {} trajectories has a classified outcome",
            trajectories.len()
        )));
    }
    let q = spec.weight_plus();
    let f_plus = n_plus as f64 / classified as f64;
    let half = 3.0 * (q * (1.0 - q) / classified as f64).sqrt();
    Ok(BornReport {
        n_total: trajectories.len(),
        n_plus,
        n_minus,
        n_null,
        n_breakdown,
        f_plus,
        f_minus: n_minus as f64 / classified as f64,
        expected_plus: q,
        half_width_3sigma: half,
        within_3sigma: (f_plus - q).abs() <= half,
        excluded_fraction: (n_null + n_breakdown) as f64 / trajectories.len() as f64,
        per_initial_label: per
            .into_iter()
            .map(|(label, (n, p, m))| InitialLabelStats {
                label,
                n,
                n_plus: p,
                n_minus: m,
                f_plus: (p + m > 0).then(|| p as f64 / (p + m) as f64),
            })
            .collect(),
    })
}

/// Equilibrium verdict of a composed window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    /// Columns agree within [`EQUILIBRIUM_TV`].
    Equilibrated,
    /// The composed matrix is the identity to within `1e-6`.
    Frozen,
    /// Some pair of columns has disjoint support.
    Disconnected,
    Mixing,
}

/// Column agreement of the chain composed over a window.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ErgodicityReport {
    pub t_start: f64,
    pub t_end: f64,
    pub steps: usize,
    pub labels: Vec<u64>,
    /// Largest total-variation distance between two columns.
    pub max_tv: f64,
    pub worst_pair: Option<(u64, u64)>,
    pub verdict: Verdict,
    /// Largest off-diagonal mass of a composed column.
    pub max_off_diagonal: f64,
    /// `sum over i in plus, j in minus of p(i|j) + p(j|i)`.
    pub cross_mass: Option<f64>,
    /// Off-diagonal mass between distinct labels of the same branch.
    pub intra_mass: Option<f64>,
}

/// Composes the trailing matrices spanning `window` and compares columns.
pub fn ergodicity_diagnostic(
    tms: &[TransitionMatrix<f64>],
    window: f64,
    partition: Option<&EnsemblePartition>,
) -> Result<ErgodicityReport> {
    let last = tms
        .last()
        .ok_or_else(|| Error::Composition("no matrices to compose".into()))?;
    let end = last.t() + last.eta();
    let mut first = tms.len();
    while first > 0 && end - tms[first - 1].t() < window - 1e-9 * window.abs().max(1.0) {
        first -= 1;
    }
    if first == 0 {
        if end - tms[0].t() < window - 1e-9 * window.abs().max(1.0) {
            return Err(Error::Composition(format!(
                "matrices span {} which is shorter than the window {window}",
                end - tms[0].t()
            )));
        }
    } else {
        first -= 1;
    }
    let composed = compose_chain(&tms[first..])?;
    let p = composed.p_cond();
    let labels = composed.labels().to_vec();
    let n = labels.len();

    let mut max_tv = 0.0;
    let mut worst = None;
    for j in 0..n {
        for k in j + 1..n {
            let tv = 0.5 * (0..n).map(|i| (p[(i, j)] - p[(i, k)]).abs()).sum::<f64>();
            if tv > max_tv {
                max_tv = tv;
                worst = Some((labels[j], labels[k]));
            }
        }
    }
    let max_off = (0..n)
        .map(|j| composed.off_diagonal_mass(j))
        .fold(0.0, f64::max);
    let verdict = if max_tv <= EQUILIBRIUM_TV {
        Verdict::Equilibrated
    } else if max_off <= FROZEN_TOL {
        Verdict::Frozen
    } else if max_tv >= 1.0 - FROZEN_TOL {
        Verdict::Disconnected
    } else {
        Verdict::Mixing
    };

    let (cross_mass, intra_mass) = match partition {
        Some(part) => {
            let idx = |ls: &[u64]| -> Vec<usize> {
                ls.iter().filter_map(|&l| composed.index_of(l)).collect()
            };
            let (plus, minus) = (idx(&part.plus_labels), idx(&part.minus_labels));
            let mut cross = 0.0;
            for &i in &plus {
                for &j in &minus {
                    cross += p[(i, j)] + p[(j, i)];
                }
            }
            let mut intra = 0.0;
            for set in [&plus, &minus] {
                for &i in set.iter() {
                    for &j in set.iter() {
                        if i != j {
                            intra += p[(i, j)];
                        }
                    }
                }
            }
            (Some(cross), Some(intra))
        }
        None => (None, None),
    };

    Ok(ErgodicityReport {
        t_start: composed.t(),
        t_end: composed.t() + composed.eta(),
        steps: tms.len() - first,
        labels,
        max_tv,
        worst_pair: worst,
        verdict,
        max_off_diagonal: max_off,
        cross_mass,
        intra_mass,
    })
}

/// A composite label matched to a product of factor labels.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FactorPair {
    pub m: u64,
    pub i: u64,
    pub a: u64,
    /// `min over phases of || Phi_m - psi_i (x) phi_a ||`.
    pub residual: f64,
    pub p_m: f64,
    pub p_ia: f64,
}

/// Correspondence between the frame of A+B and products of the frames of A and B.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FactorizationMap {
    pub pairs: Vec<FactorPair>,
    /// Composite labels left without a product partner.
    pub unmatched: Vec<u64>,
    pub max_residual: f64,
    /// `max |p_ia - p_m|` over the pairs.
    pub max_prob_gap: f64,
}

/// Compares the composite frame of A+B with products of the A and B frames.
///
/// Amplitudes are ordered `a * d_B * d_E + b * d_E + e`.
pub fn factorization_check(
    psi: &JointState<f64>,
    dims: [usize; 3],
    eps_null: f64,
) -> Result<FactorizationMap> {
    let [da, db, de] = dims;
    if da * db * de != psi.dim() || da == 0 || db == 0 || de == 0 {
        return Err(validation(format!(
            "dimensions {da} x {db} x {de} do not match state dimension {}",
            psi.dim()
        )));
    }
    let amps = psi.amplitudes();
    let t = 0.0;
    let ab = extract_frame(
        &JointState::from_raw(da * db, de, amps.clone()),
        eps_null,
        t,
    )?;
    let fa = extract_frame(
        &JointState::from_raw(da, db * de, amps.clone()),
        eps_null,
        t,
    )?;
    let mut perm = CVector::zeros(amps.len());
    for a in 0..da {
        for b in 0..db {
            for e in 0..de {
                perm[b * da * de + a * de + e] = amps[a * db * de + b * de + e];
            }
        }
    }
    let fb = extract_frame(&JointState::from_raw(db, da * de, perm), eps_null, t)?;

    let (nm, ni, na) = (ab.len(), fa.len(), fb.len());
    let products: Vec<CVector<f64>> = (0..ni)
        .flat_map(|i| (0..na).map(move |a| (i, a)))
        .map(|(i, a)| fa.psi()[i].amplitudes().kronecker(fb.psi()[a].amplitudes()))
        .collect();
    let ov: Vec<Complex<f64>> = (0..nm)
        .flat_map(|m| products.iter().map(move |v| (m, v)))
        .map(|(m, v)| inner(v, ab.psi()[m].amplitudes()))
        .collect();
    let weights: Vec<f64> = ov.iter().map(|z| z.norm_sqr()).collect();
    let assigned = assignment::maximize(&weights, nm, ni * na);

    let mut pairs = Vec::new();
    let mut unmatched = Vec::new();
    for (m, col) in assigned.into_iter().enumerate() {
        let label = ab.labels()[m];
        match col {
            Some(c) => {
                let (i, a) = (c / na, c % na);
                let z = ov[m * ni * na + c];
                let u = if z.norm() > 0.0 {
                    z / z.norm()
                } else {
                    Complex::new(1.0, 0.0)
                };
                let residual = (ab.psi()[m].amplitudes() - &products[c] * u).norm();
                pairs.push(FactorPair {
                    m: label,
                    i: fa.labels()[i],
                    a: fb.labels()[a],
                    residual,
                    p_m: ab.p()[m],
                    p_ia: fa.p()[i] * fb.p()[a],
                });
            }
            None => unmatched.push(label),
        }
    }
    let max_residual = pairs.iter().map(|p| p.residual).fold(0.0, f64::max);
    let max_prob_gap = pairs
        .iter()
        .map(|p| (p.p_ia - p.p_m).abs())
        .fold(0.0, f64::max);
    Ok(FactorizationMap {
        pairs,
        unmatched,
        max_residual,
        max_prob_gap,
    })
}

/// Keeps only the branch of `outcome`: `sum_{a in E} p_a |psi_a><psi_a|`
/// renormalized to unit trace.
///
/// This is bookkeeping. The discarded branch is dynamically inaccessible, so
/// the chain never needs it.
pub fn collapse(
    rho_t: &DensityMatrix<f64>,
    frame: &SchmidtFrame<f64>,
    partition: &EnsemblePartition,
    outcome: Outcome,
) -> Result<DensityMatrix<f64>> {
    if rho_t.dim() != frame.dim_a() {
        return Err(validation("density matrix and frame differ in dimension"));
    }
    let labels = partition.labels_of(outcome);
    let mut acc = CMatrix::zeros(frame.dim_a(), frame.dim_a());
    let mut total = 0.0;
    for &l in labels {
        if let Some(i) = frame.index_of(l) {
            let v = frame.psi()[i].amplitudes();
            acc += v * v.adjoint() * Complex::new(frame.p()[i], 0.0);
            total += frame.p()[i];
        }
    }
    if total <= 0.0 {
        return Err(Error::EmptyEnsemble(format!(
            "no labels in the {outcome:?} branch"
        )));
    }
    Ok(DensityMatrix::from_raw(acc / Complex::new(total, 0.0)))
}

/// Number of trajectories occupying each label at `step`; truncated
/// trajectories are skipped.
pub fn occupancy(trajectories: &[Trajectory], step: usize) -> BTreeMap<u64, usize> {
    let mut out = BTreeMap::new();
    for t in trajectories {
        if let Some(&l) = t.labels.get(step) {
            *out.entry(l).or_insert(0) += 1;
        }
    }
    out
}

/// Largest deviation of the empirical occupancy at `step` from the frame
/// weights, in units of the binomial standard deviation.
pub fn occupancy_z_score(timeline: &Timeline, trajectories: &[Trajectory], step: usize) -> f64 {
    let counts = occupancy(trajectories, step);
    let n: usize = counts.values().sum();
    let frame = &timeline.frames[step];
    let total: f64 = frame.p.iter().sum();
    let mut worst: f64 = 0.0;
    for (k, &label) in frame.labels.iter().enumerate() {
        let q = frame.p[k] / total;
        let sd = (q * (1.0 - q) / n as f64).sqrt();
        let f = counts.get(&label).copied().unwrap_or(0) as f64 / n as f64;
        if sd > 0.0 {
            worst = worst.max((f - q).abs() / sd);
        }
    }
    worst
}
