//! Continuation power flow: traces P-V curves along a load-increment
//! direction with a tangent predictor and a locally parameterized Newton
//! corrector, then locates the voltage collapse point.

use std::collections::BTreeMap;
use std::io::Write;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{AdmittanceMatrix, BusKind, GridCase};
use crate::powerflow::{
    assemble_solution, jacobian, mismatch, power_injections, solve_linear, solve_newton,
    OperatingSpec, PowerFlowSolution, QLimitHit, SolverOptions,
};

/// Multiplicative growth rates per bus demand and per generator output:
/// `P = P0 (1 + λ k_p)`, `Q = Q0 (1 + λ k_q)`, `G = G0 (1 + λ k_g)`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LoadDirection {
    /// Bus id -> active demand factor.
    #[serde(default)]
    pub k_p: BTreeMap<i64, f64>,
    /// Bus id -> reactive demand factor.
    #[serde(default)]
    pub k_q: BTreeMap<i64, f64>,
    /// Generator index (position in the case) -> active output factor.
    #[serde(default)]
    pub k_g: BTreeMap<usize, f64>,
}

impl LoadDirection {
    /// Only bus `bus`'s active demand grows, at rate `k`.
    pub fn single_active(bus: i64, k: f64) -> Self {
        LoadDirection {
            k_p: BTreeMap::from([(bus, k)]),
            ..Default::default()
        }
    }

    /// All `buses` grow their active demand at one common rate, chosen so
    /// that λ = 1 adds `mw_per_lambda` MW in total.
    pub fn uniform_active(case: &GridCase, buses: &[i64], mw_per_lambda: f64) -> Result<Self> {
        let mut base = 0.0;
        for &b in buses {
            base += case.buses[case.bus_position(b)?].p_demand;
        }
        if base == 0.0 {
            return Err(Error::Config(format!(
                "buses {buses:?} carry no active demand to scale"
            )));
        }
        let k = mw_per_lambda / base;
        Ok(LoadDirection {
            k_p: buses.iter().map(|&b| (b, k)).collect(),
            ..Default::default()
        })
    }

    pub fn scaled(&self, c: f64) -> Self {
        let scale = |m: &BTreeMap<_, f64>| m.iter().map(|(k, v)| (*k, v * c)).collect();
        LoadDirection {
            k_p: scale(&self.k_p),
            k_q: scale(&self.k_q),
            k_g: self.k_g.iter().map(|(k, v)| (*k, v * c)).collect(),
        }
    }

    pub fn validate(&self, case: &GridCase) -> Result<()> {
        let factors = self
            .k_p
            .values()
            .chain(self.k_q.values())
            .chain(self.k_g.values());
        let mut any = false;
        for f in factors {
            if !f.is_finite() {
                return Err(Error::Config("load direction has a non-finite factor".into()));
            }
            any |= *f != 0.0;
        }
        if !any {
            return Err(Error::Config("load direction has no nonzero factor".into()));
        }
        for id in self.k_p.keys().chain(self.k_q.keys()) {
            case.bus_position(*id)?;
        }
        if let Some(g) = self.k_g.keys().find(|&&g| g >= case.gens.len()) {
            return Err(Error::Config(format!("generator index {g} out of range")));
        }
        Ok(())
    }
}

/// Case with demand and generation moved `lambda` along `dir`. Entries of
/// `dir` that do not name a bus or generator of `case` are ignored.
pub fn apply_lambda(case: &GridCase, dir: &LoadDirection, lambda: f64) -> GridCase {
    let mut out = case.clone();
    for bus in &mut out.buses {
        if let Some(k) = dir.k_p.get(&bus.id) {
            bus.p_demand *= 1.0 + lambda * k;
        }
        if let Some(k) = dir.k_q.get(&bus.id) {
            bus.q_demand *= 1.0 + lambda * k;
        }
    }
    for (j, g) in out.gens.iter_mut().enumerate() {
        if let Some(k) = dir.k_g.get(&j) {
            g.p_out *= 1.0 + lambda * k;
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ContinuationOptions {
    pub initial_step: f64,
    pub min_step: f64,
    pub max_points: usize,
    pub trace_lower_branch: bool,
    /// Lower-branch tracing stops once λ falls below this fraction of λ_max.
    pub lower_branch_stop: f64,
    pub enforce_q_limits: bool,
    /// Steps are shortened until a reactive-limit switch is located to
    /// within this change of the continuation parameter.
    pub event_step: f64,
    pub solver: SolverOptions,
}

impl Default for ContinuationOptions {
    fn default() -> Self {
        ContinuationOptions {
            initial_step: 0.05,
            min_step: 1e-4,
            max_points: 500,
            trace_lower_branch: true,
            lower_branch_stop: 0.25,
            enforce_q_limits: true,
            event_step: 1e-3,
            solver: SolverOptions::default(),
        }
    }
}

impl ContinuationOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.min_step > 0.0 && self.min_step <= self.initial_step) {
            return Err(Error::Config(
                "continuation steps must satisfy 0 < min_step <= initial_step".into(),
            ));
        }
        if self.max_points < 2 {
            return Err(Error::Config("max_points must be at least 2".into()));
        }
        self.solver.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub lambda: f64,
    pub solution: PowerFlowSolution,
    /// Generators that reached a reactive limit on the way to this point.
    pub q_limit_events: Vec<QLimitHit>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PVCurve {
    pub points: Vec<CurvePoint>,
    pub nose_index: usize,
    pub direction: LoadDirection,
}

impl PVCurve {
    pub fn lambda_max(&self) -> f64 {
        self.points[self.nose_index].lambda
    }

    pub fn lambdas(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.lambda).collect()
    }

    /// Bus whose voltage magnitude is lowest at the nose.
    pub fn critical_bus(&self) -> i64 {
        let nose = &self.points[self.nose_index].solution;
        let (i, _) = nose
            .v_mag
            .iter()
            .enumerate()
            .fold((0, f64::INFINITY), |acc, (i, &v)| if v < acc.1 { (i, v) } else { acc });
        nose.bus_ids[i]
    }

    /// CSV with columns `lambda, bus_<id>_vm..., bus_<id>_va...`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let ids = &self.points[0].solution.bus_ids;
        let mut header = vec!["lambda".to_string()];
        header.extend(ids.iter().map(|id| format!("bus_{id}_vm")));
        header.extend(ids.iter().map(|id| format!("bus_{id}_va")));
        w.write_record(&header)?;
        for p in &self.points {
            let mut row = vec![p.lambda.to_string()];
            row.extend(p.solution.v_mag.iter().map(f64::to_string));
            row.extend(p.solution.v_ang.iter().map(f64::to_string));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Loading margin and voltage magnitude of `bus` at the curve's nose.
pub fn nose_point(curve: &PVCurve, bus: i64) -> Result<(f64, f64)> {
    let point = curve
        .points
        .get(curve.nose_index)
        .ok_or_else(|| Error::EmptyRequest("curve has no points".into()))?;
    let (vm, _) = point.solution.voltage(bus)?;
    Ok((point.lambda, vm))
}

/// Which coordinate the corrector holds fixed.
#[derive(Debug, Clone, Copy, PartialEq)]
enum Pin {
    Lambda,
    /// Voltage magnitude at bus position `i`.
    Voltage(usize),
}

/// Continuation state for one fixed reactive-limit configuration.
struct Tracer<'a> {
    case: &'a GridCase,
    dir: &'a LoadDirection,
    y: &'a AdmittanceMatrix,
    opts: &'a ContinuationOptions,
    spec: OperatingSpec,
    s0: Vec<Complex64>,
    ds: Vec<Complex64>,
    pvpq: Vec<usize>,
    pq: Vec<usize>,
}

#[derive(Debug, Clone)]
struct State {
    vm: Vec<f64>,
    va: Vec<f64>,
    lambda: f64,
}

const CORRECTOR_PASSES: usize = 12;
const EASY_PASSES: usize = 4;

impl<'a> Tracer<'a> {
    fn new(
        case: &'a GridCase,
        dir: &'a LoadDirection,
        y: &'a AdmittanceMatrix,
        opts: &'a ContinuationOptions,
        spec: OperatingSpec,
    ) -> Self {
        let mut t = Tracer {
            case,
            dir,
            y,
            opts,
            spec,
            s0: Vec::new(),
            ds: Vec::new(),
            pvpq: Vec::new(),
            pq: Vec::new(),
        };
        t.refresh();
        t
    }

    fn refresh(&mut self) {
        self.s0 = self.spec.injections(self.case);
        let s1 = self.spec.injections(&apply_lambda(self.case, self.dir, 1.0));
        self.ds = s1.iter().zip(&self.s0).map(|(a, b)| a - b).collect();
        self.pvpq = self.spec.pvpq();
        self.pq = self.spec.pq();
    }

    fn dim(&self) -> usize {
        self.pvpq.len() + self.pq.len()
    }

    fn residual(&self, st: &State) -> DVector<f64> {
        let s_spec: Vec<Complex64> = self
            .s0
            .iter()
            .zip(&self.ds)
            .map(|(a, d)| a + d * st.lambda)
            .collect();
        mismatch(
            &power_injections(self.y, &st.vm, &st.va),
            &s_spec,
            &self.pvpq,
            &self.pq,
        )
    }

    /// `[J  ∂F/∂λ]` with an extra last row left zero for the caller.
    fn augmented(&self, st: &State) -> DMatrix<f64> {
        let n = self.dim();
        let np = self.pvpq.len();
        let jac = jacobian(self.y, &st.vm, &st.va, &self.pvpq, &self.pq);
        let mut a = DMatrix::zeros(n + 1, n + 1);
        a.view_mut((0, 0), (n, n)).copy_from(&jac);
        for (r, &i) in self.pvpq.iter().enumerate() {
            a[(r, n)] = -self.ds[i].re;
        }
        for (r, &i) in self.pq.iter().enumerate() {
            a[(np + r, n)] = -self.ds[i].im;
        }
        a
    }

    fn to_vector(&self, st: &State) -> DVector<f64> {
        let np = self.pvpq.len();
        let mut w = DVector::zeros(self.dim() + 1);
        for (r, &i) in self.pvpq.iter().enumerate() {
            w[r] = st.va[i];
        }
        for (r, &i) in self.pq.iter().enumerate() {
            w[np + r] = st.vm[i];
        }
        w[self.dim()] = st.lambda;
        w
    }

    fn apply_vector(&self, st: &mut State, w: &DVector<f64>) {
        let np = self.pvpq.len();
        for (r, &i) in self.pvpq.iter().enumerate() {
            st.va[i] = w[r];
        }
        for (r, &i) in self.pq.iter().enumerate() {
            st.vm[i] = w[np + r];
        }
        st.lambda = w[self.dim()];
    }

    fn pin_index(&self, pin: Pin) -> Option<usize> {
        match pin {
            Pin::Lambda => Some(self.dim()),
            Pin::Voltage(bus) => self
                .pq
                .iter()
                .position(|&i| i == bus)
                .map(|r| self.pvpq.len() + r),
        }
    }

    fn per_bus(&self, w: &DVector<f64>) -> State {
        let nb = self.spec.kinds.len();
        let mut d = State {
            vm: vec![0.0; nb],
            va: vec![0.0; nb],
            lambda: 0.0,
        };
        self.apply_vector(&mut d, w);
        d
    }

    /// Unit tangent oriented along `prev` (or increasing λ when absent).
    fn tangent(&self, st: &State, prev: Option<&DVector<f64>>) -> Option<DVector<f64>> {
        let n = self.dim();
        let mut a = self.augmented(st);
        let mut rhs = DVector::zeros(n + 1);
        rhs[n] = 1.0;
        match prev {
            Some(p) if p.len() == n + 1 => {
                for c in 0..=n {
                    a[(n, c)] = p[c];
                }
            }
            _ => a[(n, n)] = 1.0,
        }
        let t = solve_linear(a, &rhs)?;
        let norm = t.norm();
        (norm.is_finite() && norm > 0.0).then(|| t / norm)
    }

    /// Continuation parameter for a tangent: λ while it dominates the
    /// voltage-magnitude components, else the fastest-moving magnitude
    /// (the fastest-falling one on the upper branch).
    fn choose_pin(&self, t: &DVector<f64>) -> Pin {
        let np = self.pvpq.len();
        let t_lambda = t[self.dim()].abs();
        let falling = self
            .pq
            .iter()
            .enumerate()
            .map(|(r, &i)| (i, t[np + r]))
            .fold(None, |best: Option<(usize, f64)>, (i, d)| match best {
                Some((_, bd)) if bd.abs() >= d.abs() => best,
                _ => Some((i, d)),
            });
        match falling {
            Some((i, d)) if d.abs() > t_lambda => Pin::Voltage(i),
            _ => Pin::Lambda,
        }
    }

    /// Newton on `[F(x, λ); w_pin − target]`. Returns passes used.
    fn correct(&self, st: &mut State, pin: Pin) -> Option<usize> {
        let k = self.pin_index(pin)?;
        let n = self.dim();
        for pass in 1..=CORRECTOR_PASSES {
            let f = self.residual(st);
            let norm = f.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
            if !norm.is_finite() || norm > 1e6 {
                return None;
            }
            if norm <= self.opts.solver.tolerance {
                return Some(pass);
            }
            if pass == CORRECTOR_PASSES {
                return None;
            }
            let mut a = self.augmented(st);
            a[(n, k)] = 1.0;
            let mut rhs = DVector::zeros(n + 1);
            rhs.rows_mut(0, n).copy_from(&(-f));
            let dw = solve_linear(a, &rhs)?;
            let w = self.to_vector(st) + dw;
            self.apply_vector(st, &w);
            if st.vm.iter().any(|v| !(*v > 0.0)) || !st.lambda.is_finite() {
                return None;
            }
        }
        None
    }

    fn predict(&self, st: &State, t: &DVector<f64>, pin: Pin, h: f64) -> Option<State> {
        let k = self.pin_index(pin)?;
        let scale = h / t[k].abs();
        let w = self.to_vector(st) + t * scale;
        let mut next = st.clone();
        self.apply_vector(&mut next, &w);
        Some(next)
    }

    /// PV buses currently violating their reactive range.
    fn violations(&self, st: &State) -> Vec<(usize, f64)> {
        let case_l = apply_lambda(self.case, self.dir, st.lambda);
        let s_calc = power_injections(self.y, &st.vm, &st.va);
        let tol = self.opts.solver.tolerance * self.case.base_mva;
        let mut out = Vec::new();
        for i in 0..self.spec.kinds.len() {
            if self.spec.kinds[i] != BusKind::Pv {
                continue;
            }
            let Some((q_min, q_max)) = self.spec.q_limits[i] else {
                continue;
            };
            let qg = s_calc[i].im * self.case.base_mva + case_l.buses[i].q_demand;
            if qg > q_max + tol {
                out.push((i, q_max));
            } else if qg < q_min - tol {
                out.push((i, q_min));
            }
        }
        out
    }

    fn point(&self, st: &State, iterations: usize, events: Vec<QLimitHit>) -> CurvePoint {
        let case_l = apply_lambda(self.case, self.dir, st.lambda);
        CurvePoint {
            lambda: st.lambda,
            solution: assemble_solution(
                &case_l,
                self.y,
                &self.spec,
                st.vm.clone(),
                st.va.clone(),
                iterations,
            ),
            q_limit_events: events,
        }
    }
}

/// Trace the P-V curve of `case` along `dir` from λ = 0 through the nose.
pub fn trace_pv_curve(
    case: &GridCase,
    dir: &LoadDirection,
    opts: &ContinuationOptions,
) -> Result<PVCurve> {
    opts.validate()?;
    dir.validate(case)?;
    let y = crate::grid::build_ybus(case);
    let solver = SolverOptions {
        enforce_q_limits: opts.enforce_q_limits,
        ..opts.solver
    };
    let base = solve_newton(case, &y, &solver).map_err(|e| Error::BaseCaseInfeasible(Box::new(e)))?;

    let mut spec = OperatingSpec::new(case);
    spec.apply_hits(case, &base.q_limited)?;
    let mut tracer = Tracer::new(case, dir, &y, opts, spec);

    let mut st = State {
        vm: base.v_mag.clone(),
        va: base.v_ang.clone(),
        lambda: 0.0,
    };
    let mut points = vec![CurvePoint {
        lambda: 0.0,
        solution: base,
        q_limit_events: Vec::new(),
    }];
    // Last tangent in per-bus form, so it survives bus-type switches.
    let mut heading: Option<State> = None;
    let mut h = opts.initial_step;
    let mut easy_streak = 0;
    let mut nose: Option<usize> = None;
    let mut lambda_peak = 0.0_f64;

    while points.len() < opts.max_points {
        let prev = heading.as_ref().map(|d| tracer.to_vector(d));
        let Some(t) = tracer.tangent(&st, prev.as_ref()) else {
            if nose.is_some() {
                break;
            }
            return Err(Error::TraceStalled {
                lambda: st.lambda,
                min_step: opts.min_step,
            });
        };
        let pin = tracer.choose_pin(&t);
        let t_full = tracer.per_bus(&t);

        let attempt = tracer
            .predict(&st, &t, pin, h)
            .and_then(|mut next| tracer.correct(&mut next, pin).map(|it| (next, it)));

        let Some((mut next, mut passes)) = attempt else {
            h *= 0.5;
            easy_streak = 0;
            if h < opts.min_step {
                if nose.is_some() {
                    break;
                }
                return Err(Error::TraceStalled {
                    lambda: st.lambda,
                    min_step: opts.min_step,
                });
            }
            continue;
        };

        let mut events = Vec::new();
        if opts.enforce_q_limits {
            let violated = tracer.violations(&next);
            if !violated.is_empty() {
                if h > opts.event_step && h * 0.5 >= opts.min_step {
                    h *= 0.5;
                    easy_streak = 0;
                    continue;
                }
                let saved = tracer.spec.clone();
                for &(i, q) in &violated {
                    tracer.spec.q_pin[i] = Some(q);
                    tracer.spec.kinds[i] = BusKind::Pq;
                }
                tracer.refresh();
                let retry = recorrect_after_switch(&tracer, &next, &st);
                match retry {
                    Some((fixed, it)) => {
                        next = fixed;
                        passes += it;
                        events = violated
                            .iter()
                            .map(|&(i, q)| QLimitHit {
                                bus: case.buses[i].id,
                                q_mvar: q,
                                upper: Some(q) == tracer.spec.q_limits[i].map(|r| r.1),
                            })
                            .collect();
                    }
                    None => {
                        tracer.spec = saved;
                        tracer.refresh();
                        if nose.is_none() && points.len() >= 2 {
                            // Limit-induced collapse: no solution survives the
                            // switch, so the last point is the maximum.
                            nose = Some(points.len() - 1);
                        }
                        break;
                    }
                }
            }
        }

        let descended = next.lambda < st.lambda;
        if nose.is_none() && descended {
            let peak = points.len() - 1;
            nose = Some(peak);
            if events.is_empty() && points[peak].q_limit_events.is_empty() && peak >= 1 {
                if let Some((refined, bus)) = refine_nose(&tracer, &points, peak, &next) {
                    if refined.lambda > points[peak].lambda {
                        // Keep points ordered along the curve.
                        let at = if refined.solution.v_mag[bus] > points[peak].solution.v_mag[bus] {
                            peak
                        } else {
                            peak + 1
                        };
                        points.insert(at, refined);
                        nose = Some(at);
                    }
                }
            }
            lambda_peak = points[nose.unwrap()].lambda;
            if !opts.trace_lower_branch {
                break;
            }
        }

        st = next;
        points.push(tracer.point(&st, passes, events));
        heading = Some(t_full);

        if passes <= EASY_PASSES {
            easy_streak += 1;
            if easy_streak >= 2 {
                h = (h * 1.5).min(opts.initial_step);
                easy_streak = 0;
            }
        } else {
            easy_streak = 0;
        }

        if let Some(_) = nose {
            if st.lambda < opts.lower_branch_stop * lambda_peak || st.lambda <= 0.0 {
                break;
            }
        } else {
            lambda_peak = lambda_peak.max(st.lambda);
        }
    }

    let nose_index = match nose {
        Some(i) => i,
        None => {
            return Err(Error::TraceStalled {
                lambda: st.lambda,
                min_step: opts.min_step,
            })
        }
    };
    if !opts.trace_lower_branch {
        points.truncate(nose_index + 1);
    }
    Ok(PVCurve {
        points,
        nose_index,
        direction: dir.clone(),
    })
}

/// After PV→PQ switching, pull the point back onto the new solution set:
/// first at the same λ, else holding the most depressed voltage.
fn recorrect_after_switch(tracer: &Tracer, next: &State, prev: &State) -> Option<(State, usize)> {
    let mut at_lambda = next.clone();
    if let Some(it) = tracer.correct(&mut at_lambda, Pin::Lambda) {
        return Some((at_lambda, it));
    }
    let weakest = tracer
        .pq
        .iter()
        .copied()
        .max_by(|&a, &b| {
            let da = prev.vm[a] - next.vm[a];
            let db = prev.vm[b] - next.vm[b];
            da.total_cmp(&db)
        })?;
    let mut at_voltage = next.clone();
    tracer
        .correct(&mut at_voltage, Pin::Voltage(weakest))
        .map(|it| (at_voltage, it))
}

/// Golden-section search for the λ maximum between the points either side
/// of `peak`, parameterized by the fastest-falling voltage magnitude.
fn refine_nose(
    tracer: &Tracer,
    points: &[CurvePoint],
    peak: usize,
    after: &State,
) -> Option<(CurvePoint, usize)> {
    let before = &points[peak - 1].solution;
    let top = &points[peak].solution;
    let bus = tracer
        .pq
        .iter()
        .copied()
        .max_by(|&a, &b| (before.v_mag[a] - after.vm[a]).total_cmp(&(before.v_mag[b] - after.vm[b])))?;

    let seed = State {
        vm: top.v_mag.clone(),
        va: top.v_ang.clone(),
        lambda: points[peak].lambda,
    };
    let eval = |v: f64, from: &State| -> Option<State> {
        let mut s = from.clone();
        s.vm[bus] = v;
        tracer.correct(&mut s, Pin::Voltage(bus))?;
        Some(s)
    };

    let (mut lo, mut hi) = (after.vm[bus], before.v_mag[bus]);
    if !(hi > lo) {
        return None;
    }
    let g = (5.0_f64.sqrt() - 1.0) / 2.0;
    let mut x1 = hi - g * (hi - lo);
    let mut x2 = lo + g * (hi - lo);
    let mut s1 = eval(x1, &seed)?;
    let mut s2 = eval(x2, &seed)?;
    while hi - lo > 1e-9 {
        if s1.lambda > s2.lambda {
            hi = x2;
            x2 = x1;
            s2 = s1.clone();
            x1 = hi - g * (hi - lo);
            s1 = eval(x1, &s2)?;
        } else {
            lo = x1;
            x1 = x2;
            s1 = s2.clone();
            x2 = lo + g * (hi - lo);
            s2 = eval(x2, &s1)?;
        }
    }
    let best = if s1.lambda > s2.lambda { s1 } else { s2 };
    Some((tracer.point(&best, 0, Vec::new()), bus))
}
