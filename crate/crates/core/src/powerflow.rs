//! Full Newton–Raphson AC power flow in polar coordinates, with
//! discrete PV→PQ switching for generator reactive limits.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, NotConvergedReason, Result};
use crate::grid::{AdmittanceMatrix, BusKind, GridCase};

/// Outer reactive-limit switching rounds before giving up.
pub const MAX_Q_LIMIT_ROUNDS: usize = 10;

const DIVERGED_MISMATCH: f64 = 1e10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverOptions {
    pub tolerance: f64,
    pub max_iterations: usize,
    pub enforce_q_limits: bool,
    pub flat_start: bool,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            tolerance: 1e-8,
            max_iterations: 30,
            enforce_q_limits: true,
            flat_start: false,
        }
    }
}

impl SolverOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.tolerance > 0.0) {
            return Err(Error::Config("solver tolerance must be positive".into()));
        }
        if self.max_iterations == 0 {
            return Err(Error::Config("max_iterations must be at least 1".into()));
        }
        Ok(())
    }
}

/// A PV bus held at a reactive limit (and therefore solved as PQ).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QLimitHit {
    pub bus: i64,
    /// Total generator reactive output pinned at the bus, MVAr.
    pub q_mvar: f64,
    pub upper: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerFlowSolution {
    pub bus_ids: Vec<i64>,
    pub v_mag: Vec<f64>,
    pub v_ang: Vec<f64>,
    /// Computed net injections, per-unit.
    pub p_inj: Vec<f64>,
    pub q_inj: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub max_mismatch: f64,
    pub q_limited: Vec<QLimitHit>,
}

impl PowerFlowSolution {
    pub fn voltage(&self, bus: i64) -> Result<(f64, f64)> {
        let i = self
            .bus_ids
            .iter()
            .position(|&b| b == bus)
            .ok_or(Error::UnknownBus(bus))?;
        Ok((self.v_mag[i], self.v_ang[i]))
    }
}

/// Effective bus classification plus reactive-limit state for one solve.
#[derive(Debug, Clone, PartialEq)]
pub struct OperatingSpec {
    pub kinds: Vec<BusKind>,
    /// Voltage set-point of regulating buses (PV / slack); unused elsewhere.
    pub v_set: Vec<f64>,
    /// Summed (q_min, q_max) of in-service generators at PV buses, MVAr.
    pub q_limits: Vec<Option<(f64, f64)>>,
    /// Reactive generation pinned at a limit, MVAr.
    pub q_pin: Vec<Option<f64>>,
}

impl OperatingSpec {
    pub fn new(case: &GridCase) -> Self {
        let n = case.buses.len();
        let index = case.index_map();
        let mut has_gen = vec![false; n];
        let mut v_set: Vec<f64> = case.buses.iter().map(|b| b.v_mag_init).collect();
        let mut set_seen = vec![false; n];
        let mut q_range = vec![(0.0, 0.0); n];
        for g in case.gens.iter().filter(|g| g.status) {
            let i = index[&g.bus];
            has_gen[i] = true;
            if !set_seen[i] {
                v_set[i] = g.v_set;
                set_seen[i] = true;
            }
            q_range[i].0 += g.q_min;
            q_range[i].1 += g.q_max;
        }
        let kinds: Vec<BusKind> = case
            .buses
            .iter()
            .zip(&has_gen)
            .map(|(b, &g)| match b.kind {
                BusKind::Pv if !g => BusKind::Pq,
                k => k,
            })
            .collect();
        let q_limits = kinds
            .iter()
            .zip(q_range)
            .map(|(k, r)| (*k == BusKind::Pv).then_some(r))
            .collect();
        OperatingSpec {
            kinds,
            v_set,
            q_limits,
            q_pin: vec![None; n],
        }
    }

    pub fn pvpq(&self) -> Vec<usize> {
        (0..self.kinds.len())
            .filter(|&i| self.kinds[i] != BusKind::Slack)
            .collect()
    }

    pub fn pq(&self) -> Vec<usize> {
        (0..self.kinds.len())
            .filter(|&i| self.kinds[i] == BusKind::Pq)
            .collect()
    }

    /// Specified complex injections in per-unit for the demand and generation
    /// currently in `case`. Reactive parts at PV/slack buses are irrelevant.
    pub fn injections(&self, case: &GridCase) -> Vec<Complex64> {
        let index = case.index_map();
        let mut p_gen = vec![0.0; case.buses.len()];
        let mut q_gen = vec![0.0; case.buses.len()];
        for g in case.gens.iter().filter(|g| g.status) {
            let i = index[&g.bus];
            p_gen[i] += g.p_out;
            q_gen[i] += g.q_out;
        }
        case.buses
            .iter()
            .enumerate()
            .map(|(i, b)| {
                let qg = self.q_pin[i].unwrap_or(q_gen[i]);
                Complex64::new(p_gen[i] - b.p_demand, qg - b.q_demand) / case.base_mva
            })
            .collect()
    }

    /// Switch violated PV buses to PQ at the binding limit, and release pinned
    /// buses whose voltage set-point became attainable again. Returns whether
    /// any bus changed type.
    fn update_q_limits(
        &mut self,
        case: &GridCase,
        s_calc: &[Complex64],
        vm: &mut [f64],
        tol_mvar: f64,
    ) -> bool {
        let mut changed = false;
        for i in 0..self.kinds.len() {
            let Some((q_min, q_max)) = self.q_limits[i] else {
                continue;
            };
            match self.q_pin[i] {
                None => {
                    let qg = s_calc[i].im * case.base_mva + case.buses[i].q_demand;
                    if qg > q_max + tol_mvar {
                        self.q_pin[i] = Some(q_max);
                    } else if qg < q_min - tol_mvar {
                        self.q_pin[i] = Some(q_min);
                    } else {
                        continue;
                    }
                    self.kinds[i] = BusKind::Pq;
                    changed = true;
                }
                Some(pin) => {
                    let at_upper = pin == q_max;
                    let release = if at_upper {
                        vm[i] > self.v_set[i]
                    } else {
                        vm[i] < self.v_set[i]
                    };
                    if release {
                        self.q_pin[i] = None;
                        self.kinds[i] = BusKind::Pv;
                        vm[i] = self.v_set[i];
                        changed = true;
                    }
                }
            }
        }
        changed
    }

    /// Pin every bus in `hits` without a solve (used when resuming a trace).
    pub fn apply_hits(&mut self, case: &GridCase, hits: &[QLimitHit]) -> Result<()> {
        for h in hits {
            let i = case.bus_position(h.bus)?;
            self.q_pin[i] = Some(h.q_mvar);
            self.kinds[i] = BusKind::Pq;
        }
        Ok(())
    }

    pub fn hits(&self, case: &GridCase) -> Vec<QLimitHit> {
        (0..self.kinds.len())
            .filter_map(|i| {
                let pin = self.q_pin[i]?;
                let (_, q_max) = self.q_limits[i]?;
                Some(QLimitHit {
                    bus: case.buses[i].id,
                    q_mvar: pin,
                    upper: pin == q_max,
                })
            })
            .collect()
    }
}

/// `S = V ⊙ conj(Y V)` for the given polar voltages.
pub fn power_injections(y: &AdmittanceMatrix, vm: &[f64], va: &[f64]) -> Vec<Complex64> {
    let v = polar(vm, va);
    let ybus = y.matrix();
    let n = v.len();
    (0..n)
        .map(|i| {
            let mut current = Complex64::new(0.0, 0.0);
            for k in 0..n {
                current += ybus[(i, k)] * v[k];
            }
            v[i] * current.conj()
        })
        .collect()
}

fn polar(vm: &[f64], va: &[f64]) -> Vec<Complex64> {
    vm.iter()
        .zip(va)
        .map(|(&m, &a)| Complex64::from_polar(m, a))
        .collect()
}

/// Mismatch vector `[ΔP(pvpq); ΔQ(pq)]` = computed − specified.
pub fn mismatch(
    s_calc: &[Complex64],
    s_spec: &[Complex64],
    pvpq: &[usize],
    pq: &[usize],
) -> DVector<f64> {
    let mut f = DVector::zeros(pvpq.len() + pq.len());
    for (r, &i) in pvpq.iter().enumerate() {
        f[r] = s_calc[i].re - s_spec[i].re;
    }
    for (r, &i) in pq.iter().enumerate() {
        f[pvpq.len() + r] = s_calc[i].im - s_spec[i].im;
    }
    f
}

/// Polar Jacobian of the mismatch with respect to `[θ(pvpq); |V|(pq)]`.
pub fn jacobian(
    y: &AdmittanceMatrix,
    vm: &[f64],
    va: &[f64],
    pvpq: &[usize],
    pq: &[usize],
) -> DMatrix<f64> {
    let ybus = y.matrix();
    let v = polar(vm, va);
    let n = v.len();
    let vnorm: Vec<Complex64> = va.iter().map(|&a| Complex64::from_polar(1.0, a)).collect();
    let ibus: Vec<Complex64> = (0..n)
        .map(|i| (0..n).map(|k| ybus[(i, k)] * v[k]).sum())
        .collect();
    let j = Complex64::new(0.0, 1.0);

    let ds_dva = |i: usize, k: usize| {
        let diag = if i == k { ibus[i] } else { Complex64::new(0.0, 0.0) };
        j * v[i] * (diag - ybus[(i, k)] * v[k]).conj()
    };
    let ds_dvm = |i: usize, k: usize| {
        let mut d = v[i] * (ybus[(i, k)] * vnorm[k]).conj();
        if i == k {
            d += ibus[i].conj() * vnorm[i];
        }
        d
    };

    let np = pvpq.len();
    let nq = pq.len();
    let mut jac = DMatrix::zeros(np + nq, np + nq);
    for (r, &i) in pvpq.iter().enumerate() {
        for (c, &k) in pvpq.iter().enumerate() {
            jac[(r, c)] = ds_dva(i, k).re;
        }
        for (c, &k) in pq.iter().enumerate() {
            jac[(r, np + c)] = ds_dvm(i, k).re;
        }
    }
    for (r, &i) in pq.iter().enumerate() {
        for (c, &k) in pvpq.iter().enumerate() {
            jac[(np + r, c)] = ds_dva(i, k).im;
        }
        for (c, &k) in pq.iter().enumerate() {
            jac[(np + r, np + c)] = ds_dvm(i, k).im;
        }
    }
    jac
}

/// LU solve that treats a vanishing pivot ratio as singular.
pub(crate) fn solve_linear(a: DMatrix<f64>, b: &DVector<f64>) -> Option<DVector<f64>> {
    let lu = a.lu();
    let u = lu.u();
    let (mut lo, mut hi) = (f64::INFINITY, 0.0_f64);
    for d in u.diagonal().iter() {
        lo = lo.min(d.abs());
        hi = hi.max(d.abs());
    }
    if !(hi > 0.0) || lo / hi < 1e-14 {
        return None;
    }
    lu.solve(b)
}

fn max_abs(f: &DVector<f64>) -> f64 {
    f.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
}

/// Plain Newton loop on a fixed `OperatingSpec`. Returns passes used.
fn newton(
    y: &AdmittanceMatrix,
    spec: &OperatingSpec,
    s_spec: &[Complex64],
    vm: &mut [f64],
    va: &mut [f64],
    opts: &SolverOptions,
) -> Result<usize> {
    let pvpq = spec.pvpq();
    let pq = spec.pq();
    let np = pvpq.len();
    for pass in 1..=opts.max_iterations {
        let s_calc = power_injections(y, vm, va);
        let f = mismatch(&s_calc, s_spec, &pvpq, &pq);
        let norm = max_abs(&f);
        if !norm.is_finite() {
            return Err(Error::Numerical("non-finite power mismatch".into()));
        }
        if norm <= opts.tolerance {
            return Ok(pass);
        }
        if pass == opts.max_iterations || norm > DIVERGED_MISMATCH {
            let reason = if norm > DIVERGED_MISMATCH {
                NotConvergedReason::Diverged
            } else {
                NotConvergedReason::IterationLimit
            };
            return Err(Error::NotConverged {
                reason,
                iterations: pass,
                mismatch: norm,
            });
        }
        let jac = jacobian(y, vm, va, &pvpq, &pq);
        let dx = solve_linear(jac, &(-f)).ok_or(Error::NotConverged {
            reason: NotConvergedReason::SingularJacobian,
            iterations: pass,
            mismatch: norm,
        })?;
        for (r, &i) in pvpq.iter().enumerate() {
            va[i] += dx[r];
        }
        for (r, &i) in pq.iter().enumerate() {
            vm[i] += dx[np + r];
        }
        if vm.iter().chain(va.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite voltage iterate".into()));
        }
    }
    unreachable!("loop returns on its last pass")
}

fn initial_point(case: &GridCase, spec: &OperatingSpec, flat: bool) -> (Vec<f64>, Vec<f64>) {
    let slack = case.slack_position();
    let mut vm: Vec<f64> = if flat {
        vec![1.0; case.buses.len()]
    } else {
        case.buses.iter().map(|b| b.v_mag_init).collect()
    };
    let mut va: Vec<f64> = if flat {
        vec![0.0; case.buses.len()]
    } else {
        case.buses.iter().map(|b| b.v_ang_init).collect()
    };
    va[slack] = case.buses[slack].v_ang_init;
    for (i, k) in spec.kinds.iter().enumerate() {
        if *k != BusKind::Pq {
            vm[i] = spec.v_set[i];
        }
    }
    (vm, va)
}

/// Solve with an explicit `OperatingSpec` and starting point. Used by the
/// continuation corrector's fallback and by `solve_newton`.
pub fn solve_with_spec(
    case: &GridCase,
    y: &AdmittanceMatrix,
    spec: &mut OperatingSpec,
    vm: &mut Vec<f64>,
    va: &mut Vec<f64>,
    opts: &SolverOptions,
) -> Result<usize> {
    opts.validate()?;
    let mut iterations = 0;
    let tol_mvar = opts.tolerance * case.base_mva;
    for round in 0..=MAX_Q_LIMIT_ROUNDS {
        let s_spec = spec.injections(case);
        iterations += newton(y, spec, &s_spec, vm, va, opts).map_err(|e| match e {
            Error::NotConverged {
                reason,
                iterations: it,
                mismatch,
            } => Error::NotConverged {
                reason,
                iterations: iterations + it,
                mismatch,
            },
            other => other,
        })?;
        if !opts.enforce_q_limits {
            return Ok(iterations);
        }
        let s_calc = power_injections(y, vm, va);
        if !spec.update_q_limits(case, &s_calc, vm, tol_mvar) {
            return Ok(iterations);
        }
        if round == MAX_Q_LIMIT_ROUNDS {
            break;
        }
    }
    Err(Error::NotConverged {
        reason: NotConvergedReason::QLimitCycling,
        iterations,
        mismatch: f64::NAN,
    })
}

pub(crate) fn assemble_solution(
    case: &GridCase,
    y: &AdmittanceMatrix,
    spec: &OperatingSpec,
    vm: Vec<f64>,
    va: Vec<f64>,
    iterations: usize,
) -> PowerFlowSolution {
    let s_calc = power_injections(y, &vm, &va);
    let s_spec = spec.injections(case);
    let f = mismatch(&s_calc, &s_spec, &spec.pvpq(), &spec.pq());
    PowerFlowSolution {
        bus_ids: case.buses.iter().map(|b| b.id).collect(),
        p_inj: s_calc.iter().map(|s| s.re).collect(),
        q_inj: s_calc.iter().map(|s| s.im).collect(),
        v_mag: vm,
        v_ang: va,
        converged: true,
        iterations,
        max_mismatch: max_abs(&f),
        q_limited: spec.hits(case),
    }
}

pub fn solve_newton(
    case: &GridCase,
    y: &AdmittanceMatrix,
    opts: &SolverOptions,
) -> Result<PowerFlowSolution> {
    let mut spec = OperatingSpec::new(case);
    let (mut vm, mut va) = initial_point(case, &spec, opts.flat_start);
    let iterations = solve_with_spec(case, y, &mut spec, &mut vm, &mut va, opts)?;
    Ok(assemble_solution(case, y, &spec, vm, va, iterations))
}

/// Recompute the largest mismatch of `sol` against `case` from scratch,
/// honouring the reactive limits recorded on the solution.
pub fn residual_check(
    case: &GridCase,
    y: &AdmittanceMatrix,
    sol: &PowerFlowSolution,
) -> Result<f64> {
    let mut spec = OperatingSpec::new(case);
    spec.apply_hits(case, &sol.q_limited)?;
    let s_calc = power_injections(y, &sol.v_mag, &sol.v_ang);
    let f = mismatch(&s_calc, &spec.injections(case), &spec.pvpq(), &spec.pq());
    Ok(max_abs(&f))
}

/// Copy of `case` whose stored bus voltages are the given solution, so a
/// non-flat solve starts from it.
pub fn warm_start(case: &GridCase, sol: &PowerFlowSolution) -> GridCase {
    let mut out = case.clone();
    for (bus, (&m, &a)) in out.buses.iter_mut().zip(sol.v_mag.iter().zip(&sol.v_ang)) {
        bus.v_mag_init = m;
        bus.v_ang_init = a;
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenOutput {
    pub p_mw: f64,
    pub q_mvar: f64,
}

/// Generator dispatch implied by a solution. Slack active power goes to the
/// first in-service unit at the slack bus; reactive output at regulating buses
/// is shared in proportion to each unit's reactive range.
pub fn generator_outputs(case: &GridCase, sol: &PowerFlowSolution) -> Vec<GenOutput> {
    let index = case.index_map();
    let base = case.base_mva;
    let mut out: Vec<GenOutput> = case
        .gens
        .iter()
        .map(|g| GenOutput {
            p_mw: if g.status { g.p_out } else { 0.0 },
            q_mvar: if g.status { g.q_out } else { 0.0 },
        })
        .collect();

    for (i, bus) in case.buses.iter().enumerate() {
        let units: Vec<usize> = case
            .gens
            .iter()
            .enumerate()
            .filter(|(_, g)| g.status && index[&g.bus] == i)
            .map(|(k, _)| k)
            .collect();
        if units.is_empty() {
            continue;
        }
        let pinned = sol.q_limited.iter().any(|h| h.bus == bus.id);
        if bus.kind == BusKind::Slack {
            let p_bus = sol.p_inj[i] * base + bus.p_demand;
            let others: f64 = units[1..].iter().map(|&k| case.gens[k].p_out).sum();
            out[units[0]].p_mw = p_bus - others;
        }
        if bus.kind == BusKind::Pq && !pinned {
            continue;
        }
        let q_bus = sol.q_inj[i] * base + bus.q_demand;
        let q_lo: f64 = units.iter().map(|&k| case.gens[k].q_min).sum();
        let span: f64 = units
            .iter()
            .map(|&k| case.gens[k].q_max - case.gens[k].q_min)
            .sum();
        for &k in &units {
            let g = &case.gens[k];
            out[k].q_mvar = if span > 0.0 {
                g.q_min + (q_bus - q_lo) * (g.q_max - g.q_min) / span
            } else {
                q_bus / units.len() as f64
            };
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::build_ybus;
    use crate::testutil::two_bus;

    #[test]
    fn zero_load_flat_start_is_a_fixed_point() {
        let case = two_bus(0.1, 0.0);
        let y = build_ybus(&case);
        let opts = SolverOptions {
            flat_start: true,
            ..Default::default()
        };
        let sol = solve_newton(&case, &y, &opts).unwrap();
        assert_eq!(sol.v_mag, vec![1.0, 1.0]);
        assert_eq!(sol.v_ang, vec![0.0, 0.0]);
        assert_eq!(sol.iterations, 1);
        assert!(sol.converged);
    }

    #[test]
    fn two_bus_load_matches_closed_form() {
        // Lossless line, purely active load P at the far end:
        // P = V1 V2 sin(δ)/x and Q balance 0 = (V2² - V1 V2 cos δ)/x.
        let mut case = two_bus(0.1, 0.0);
        case.buses[1].p_demand = 50.0;
        let y = build_ybus(&case);
        let sol = solve_newton(&case, &y, &SolverOptions::default()).unwrap();
        let (v2, d) = (sol.v_mag[1], -sol.v_ang[1]);
        assert!((v2 * d.sin() / 0.1 - 0.5).abs() < 1e-9);
        assert!((v2 * v2 - v2 * d.cos()).abs() < 1e-9);
    }

    #[test]
    fn rejects_bad_options() {
        let case = two_bus(0.1, 0.0);
        let y = build_ybus(&case);
        let opts = SolverOptions {
            max_iterations: 0,
            ..Default::default()
        };
        assert!(matches!(
            solve_newton(&case, &y, &opts),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn overload_does_not_converge() {
        // Maximum transfer over x = 0.1 from 1 pu is 5 pu.
        let mut case = two_bus(0.1, 0.0);
        case.buses[1].p_demand = 800.0;
        let y = build_ybus(&case);
        let err = solve_newton(&case, &y, &SolverOptions::default()).unwrap_err();
        assert!(matches!(err, Error::NotConverged { .. }), "{err}");
    }
}
