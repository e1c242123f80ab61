//! Gradient-based parameter identification: multi-rate voltage-RMSE
//! objective, adjoint gradients chained through the design-variable scaling,
//! two-stage initial-value search, and a bounded limited-memory quasi-Newton
//! loop with the stagnation rule.

use crate::adjoint::{self, ObjectivePartials};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::params::{ParamId, ScalingSpec};
use crate::solver::{self, DriveProtocol, SolutionTape, SolverSettings};

/// Which identification stage a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    /// Initial stoichiometries; identified on the lowest rate first.
    Thermodynamic,
    /// Transport/kinetics parameters; identified on the higher rates.
    Kinetic,
}

/// One drive condition with its reference voltage trace.
#[derive(Debug, Clone)]
pub struct RateCase {
    pub label: String,
    pub protocol: DriveProtocol,
    /// (time_s, voltage_V) samples, strictly increasing in time.
    pub reference: Vec<(f64, f64)>,
}

impl RateCase {
    fn validate(&self) -> Result<()> {
        if self.reference.is_empty() {
            return Err(Error::Config(format!(
                "rate {} has an empty reference trace",
                self.label
            )));
        }
        if self.reference.windows(2).any(|w| w[1].0 <= w[0].0) {
            return Err(Error::Config(format!(
                "rate {}: reference times must be strictly increasing",
                self.label
            )));
        }
        Ok(())
    }
}

/// Optimizer knobs for the bounded quasi-Newton loop.
#[derive(Debug, Clone)]
pub struct OptimizerSettings {
    pub max_iterations: usize,
    /// Stop when the objective falls below this value (V).
    pub objective_tolerance: f64,
    /// Stagnation rule: mean |change| vs the previous `window` iterations.
    pub stagnation_window: usize,
    pub stagnation_threshold: f64,
    /// Limited-memory curvature pairs.
    pub memory: usize,
    /// Projected-gradient infinity-norm convergence threshold.
    pub pg_tolerance: f64,
    pub max_line_search_halvings: usize,
    /// Budget of failed objective evaluations before giving up.
    pub max_objective_failures: usize,
}

impl Default for OptimizerSettings {
    fn default() -> Self {
        Self {
            max_iterations: 200,
            objective_tolerance: 1e-6,
            stagnation_window: 9,
            stagnation_threshold: 0.09e-3,
            memory: 10,
            pg_tolerance: 1e-12,
            max_line_search_halvings: 25,
            max_objective_failures: 20,
        }
    }
}

/// Full description of one identification run.
#[derive(Clone)]
pub struct IdentificationProblem {
    /// Base model carrying the non-identified parameter values.
    pub model: Model,
    pub scaling: ScalingSpec,
    /// Stage assignment per scaling entry.
    pub stages: Vec<Stage>,
    pub rates: Vec<RateCase>,
    pub optimizer: OptimizerSettings,
    pub solver: SolverSettings,
    /// Residual charged to reference samples past an early cutoff (V).
    pub penalty_voltage: f64,
    /// Iteration cap of each initialization stage.
    pub stage_iteration_cap: usize,
    /// Early-exit objective for the initialization stages (V).
    pub stage_objective_tolerance: f64,
}

impl IdentificationProblem {
    pub fn validate(&self) -> Result<()> {
        if self.rates.is_empty() {
            return Err(Error::Config("identification needs at least one rate".into()));
        }
        for r in &self.rates {
            r.validate()?;
        }
        if self.stages.len() != self.scaling.len() {
            return Err(Error::Config(
                "stage assignments must match the identified-parameter list".into(),
            ));
        }
        Ok(())
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.scaling.entries.iter().map(|e| e.id).collect()
    }

    /// Index of the lowest-magnitude rate (stage-1 data).
    fn lowest_rate(&self) -> usize {
        let mut best = 0;
        for (i, r) in self.rates.iter().enumerate() {
            if r.protocol.current_density.abs() < self.rates[best].protocol.current_density.abs() {
                best = i;
            }
        }
        best
    }
}

/// One objective evaluation: value, per-rate RMSE, and the tapes that
/// produced it (kept for the paired gradient evaluation).
pub struct EvalOutcome {
    pub objective: f64,
    pub per_rate_rmse: Vec<f64>,
    pub tapes: Vec<SolutionTape>,
    /// Design-variable components clamped during scaling.
    pub clamped: Vec<usize>,
}

/// Objective/gradient evaluator with forward-prediction accounting.
/// One adjoint sweep is booked as two forward-equivalents.
pub struct Evaluator<'a> {
    pub problem: &'a IdentificationProblem,
    pub forward_runs: usize,
    pub sweeps: usize,
    pub clamp_events: usize,
}

impl<'a> Evaluator<'a> {
    pub fn new(problem: &'a IdentificationProblem) -> Self {
        Self {
            problem,
            forward_runs: 0,
            sweeps: 0,
            clamp_events: 0,
        }
    }

    /// Number of forward predictions, adjoint sweeps included at 2x.
    pub fn nf(&self) -> usize {
        self.forward_runs + 2 * self.sweeps
    }

    fn model_at(&self, w: &[f64]) -> Result<(Model, Vec<f64>, Vec<usize>)> {
        let (theta, clamped) = self.problem.scaling.scale(w)?;
        let params = self.problem.scaling.apply(&self.problem.model.params, &theta);
        Ok((self.problem.model.with_params(params)?, theta, clamped))
    }

    /// Average voltage RMSE across the selected rates for an explicit model
    /// (used by gradient checking, which perturbs parameters directly).
    pub fn objective_for_model(&mut self, model: &Model, rate_set: &[usize]) -> Result<EvalOutcome> {
        let mut tapes = Vec::with_capacity(rate_set.len());
        let mut rmse = Vec::with_capacity(rate_set.len());
        for &ri in rate_set {
            let rate = &self.problem.rates[ri];
            let tape = solver::run_forward(model, &rate.protocol, &self.problem.solver)?;
            self.forward_runs += 1;
            let mut sq = 0.0;
            for &(t, v_ref) in &rate.reference {
                let e = match interpolate_voltage(&tape, t) {
                    Some(v) => v - v_ref,
                    None => self.problem.penalty_voltage,
                };
                sq += e * e;
            }
            rmse.push((sq / rate.reference.len() as f64).sqrt());
            tapes.push(tape);
        }
        let objective = rmse.iter().sum::<f64>() / rmse.len() as f64;
        Ok(EvalOutcome {
            objective,
            per_rate_rmse: rmse,
            tapes,
            clamped: Vec::new(),
        })
    }

    /// Average voltage RMSE across the selected rates.
    pub fn objective_on(&mut self, w: &[f64], rate_set: &[usize]) -> Result<EvalOutcome> {
        let (model, _, clamped) = self.model_at(w)?;
        self.clamp_events += usize::from(!clamped.is_empty());
        let mut out = self.objective_for_model(&model, rate_set)?;
        out.clamped = clamped;
        Ok(out)
    }

    pub fn objective(&mut self, w: &[f64]) -> Result<EvalOutcome> {
        let all: Vec<usize> = (0..self.problem.rates.len()).collect();
        self.objective_on(w, &all)
    }

    /// Gradient of the objective with respect to the design variables,
    /// via one adjoint sweep per rate and the scaling chain.
    pub fn gradient_on(
        &mut self,
        w: &[f64],
        rate_set: &[usize],
        outcome: &EvalOutcome,
    ) -> Result<Vec<f64>> {
        let (model, theta, _) = self.model_at(w)?;
        let params = self.problem.param_ids();
        let n_rates = rate_set.len() as f64;
        let mut grad_theta = vec![0.0; params.len()];
        for (k, &ri) in rate_set.iter().enumerate() {
            let rate = &self.problem.rates[ri];
            let tape = &outcome.tapes[k];
            let rmse = outcome.per_rate_rmse[k];
            if rmse == 0.0 {
                continue;
            }
            let n_samples = rate.reference.len() as f64;
            let mut partials = ObjectivePartials::zeros(&model, tape.states.len(), params.len());
            for &(t, v_ref) in &rate.reference {
                let Some((i0, alpha)) = bracket(&tape.times, t) else {
                    continue; // penalty samples carry no state gradient
                };
                let v_pred = (1.0 - alpha) * tape.voltages[i0] + alpha * tape.voltages[i0 + 1];
                let de = (v_pred - v_ref) / (n_rates * n_samples * rmse);
                for &(dof, wgt) in model.voltage_gradient() {
                    partials.du[i0][dof] += de * (1.0 - alpha) * wgt;
                    partials.du[i0 + 1][dof] += de * alpha * wgt;
                }
            }
            let sweep =
                adjoint::backward_sweep(&model, tape, &params, &partials, &self.problem.solver)?;
            self.sweeps += 1;
            for (g, s) in grad_theta.iter_mut().zip(&sweep.gradient) {
                *g += s;
            }
        }
        let chain = self.problem.scaling.dtheta_dw(&theta);
        Ok(grad_theta.iter().zip(&chain).map(|(g, c)| g * c).collect())
    }

    pub fn gradient(&mut self, w: &[f64], outcome: &EvalOutcome) -> Result<Vec<f64>> {
        let all: Vec<usize> = (0..self.problem.rates.len()).collect();
        self.gradient_on(w, &all, outcome)
    }
}

/// Linear interpolation of the tape voltage at a sample time; `None` past
/// the end of the computed trace.
pub fn interpolate_voltage(tape: &SolutionTape, t: f64) -> Option<f64> {
    let (i0, alpha) = bracket(&tape.times, t)?;
    Some((1.0 - alpha) * tape.voltages[i0] + alpha * tape.voltages[i0 + 1])
}

fn bracket(times: &[f64], t: f64) -> Option<(usize, f64)> {
    let t_end = *times.last()?;
    if t < 0.0 || t > t_end * (1.0 + 1e-12) {
        return None;
    }
    if times.len() == 1 {
        return if t == 0.0 { Some((0, 0.0)) } else { None };
    }
    let t = t.min(t_end);
    let mut i = match times.binary_search_by(|x| x.partial_cmp(&t).unwrap()) {
        Ok(k) => k,
        Err(k) => k.saturating_sub(1),
    };
    if i >= times.len() - 1 {
        i = times.len() - 2;
    }
    let h = times[i + 1] - times[i];
    Some((i, (t - times[i]) / h))
}

// ---------------------------------------------------------------------------
// Bounded limited-memory quasi-Newton loop
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptTermination {
    ProjectedGradient,
    ObjectiveTolerance,
    Stagnated,
    IterationCap,
    FailureBudget,
}

#[derive(Debug, Clone)]
pub struct OptimRun {
    pub w: Vec<f64>,
    pub objective: f64,
    /// Accepted-iterate objective history (index 0 = start point).
    pub history: Vec<f64>,
    pub iterations: usize,
    pub termination: OptTermination,
}

/// Projected L-BFGS on the unit box with backtracking Armijo line search.
/// `mask[i] = false` freezes a component (used by the staged initializer).
fn lbfgs_box<F>(
    mut eval: F,
    w0: Vec<f64>,
    mask: &[bool],
    opts: &OptimizerSettings,
) -> Result<OptimRun>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let n = w0.len();
    let project = |w: &mut [f64]| {
        for x in w.iter_mut() {
            *x = x.clamp(0.0, 1.0);
        }
    };
    let mut w = w0;
    project(&mut w);
    let mut failures = 0usize;

    let (mut f, mut g) = eval(&w)?;
    let mut history = vec![f];
    let mut pairs: std::collections::VecDeque<(Vec<f64>, Vec<f64>, f64)> = Default::default();
    let mut termination = OptTermination::IterationCap;
    let mut iterations = 0usize;

    for _ in 0..opts.max_iterations {
        if f <= opts.objective_tolerance {
            termination = OptTermination::ObjectiveTolerance;
            break;
        }
        // stagnation: mean |f - f_prev_j| over the trailing window
        if history.len() > opts.stagnation_window {
            let k = history.len() - 1;
            let mean: f64 = (1..=opts.stagnation_window)
                .map(|j| (history[k] - history[k - j]).abs())
                .sum::<f64>()
                / opts.stagnation_window as f64;
            if mean < opts.stagnation_threshold {
                termination = OptTermination::Stagnated;
                break;
            }
        }
        // projected gradient convergence
        let pg_norm = (0..n)
            .filter(|&i| mask[i])
            .map(|i| (w[i] - (w[i] - g[i]).clamp(0.0, 1.0)).abs())
            .fold(0.0f64, f64::max);
        if pg_norm <= opts.pg_tolerance {
            termination = OptTermination::ProjectedGradient;
            break;
        }

        // free set: masked-in variables not pinned at an active bound
        let free: Vec<bool> = (0..n)
            .map(|i| {
                mask[i]
                    && !((w[i] <= 0.0 && g[i] > 0.0) || (w[i] >= 1.0 && g[i] < 0.0))
            })
            .collect();

        // two-loop recursion on the free subspace
        let mut d: Vec<f64> = g.iter().zip(&free).map(|(gi, &fr)| if fr { -gi } else { 0.0 }).collect();
        let mut alphas = Vec::with_capacity(pairs.len());
        for (s, y, rho) in pairs.iter().rev() {
            let a = rho * dot_masked(s, &d, &free);
            for i in 0..n {
                if free[i] {
                    d[i] -= a * y[i];
                }
            }
            alphas.push(a);
        }
        if let Some((s, y, _)) = pairs.back() {
            let sy = dot_masked(s, y, &free);
            let yy = dot_masked(y, y, &free);
            if sy > 0.0 && yy > 0.0 {
                let scale = sy / yy;
                for i in 0..n {
                    if free[i] {
                        d[i] *= scale;
                    }
                }
            }
        }
        for ((s, y, rho), a) in pairs.iter().zip(alphas.iter().rev()) {
            let b = rho * dot_masked(y, &d, &free);
            for i in 0..n {
                if free[i] {
                    d[i] += s[i] * (a - b);
                }
            }
        }
        // the quasi-Newton direction may push an at-bound variable outward
        // even when its gradient points inward; zero those components
        for i in 0..n {
            if (w[i] >= 1.0 && d[i] > 0.0) || (w[i] <= 0.0 && d[i] < 0.0) {
                d[i] = 0.0;
            }
        }
        // safeguard: descent direction required
        if dot_masked(&g, &d, &free) >= 0.0 {
            for i in 0..n {
                d[i] = if free[i] { -g[i] } else { 0.0 };
            }
            for i in 0..n {
                if (w[i] >= 1.0 && d[i] > 0.0) || (w[i] <= 0.0 && d[i] < 0.0) {
                    d[i] = 0.0;
                }
            }
        }
        if d.iter().all(|x| x.abs() < 1e-300) {
            termination = OptTermination::ProjectedGradient;
            break;
        }
        // cold start: without curvature information the raw gradient can be
        // many orders off in scale, so size the first trial step to a fixed
        // fraction of the unit box
        if pairs.is_empty() {
            let dn = dot_masked(&d, &d, &free).sqrt();
            if dn > 0.0 {
                let target = 0.1;
                for x in d.iter_mut() {
                    *x *= target / dn;
                }
            }
        }

        // Line search. Inside the box the 1D function is smooth and a
        // strong-Wolfe search applies; when the direction runs into a bound
        // early, a projected full step (clamped, Armijo-only) is tried first
        // so one nearly active coordinate cannot strangle the whole move.
        let mut alpha_max = f64::INFINITY;
        for i in 0..n {
            if d[i] > 1e-300 {
                alpha_max = alpha_max.min((1.0 - w[i]) / d[i]);
            } else if d[i] < -1e-300 {
                alpha_max = alpha_max.min(-w[i] / d[i]);
            }
        }
        if !alpha_max.is_finite() || alpha_max <= 0.0 {
            termination = OptTermination::ProjectedGradient;
            break;
        }
        let dphi0 = dot_masked(&g, &d, &free);
        let mut accepted: Option<(Vec<f64>, f64, Vec<f64>)> = None;
        if alpha_max < 1.0 {
            let mut w_try: Vec<f64> = w.iter().zip(&d).map(|(wi, di)| wi + di).collect();
            for x in w_try.iter_mut() {
                *x = x.clamp(0.0, 1.0);
            }
            let step: Vec<f64> = w_try.iter().zip(&w).map(|(a, b)| a - b).collect();
            if step.iter().any(|s| s.abs() > 1e-16) {
                match eval(&w_try) {
                    Ok((f_try, g_try)) => {
                        let slope: f64 = g.iter().zip(&step).map(|(gi, si)| gi * si).sum();
                        if f_try <= f + 1e-4 * slope.min(0.0) && f_try < f {
                            accepted = Some((w_try, f_try, g_try));
                        }
                    }
                    Err(_) => {
                        failures += 1;
                        if failures > opts.max_objective_failures {
                            return Ok(OptimRun {
                                w,
                                objective: f,
                                history,
                                iterations,
                                termination: OptTermination::FailureBudget,
                            });
                        }
                    }
                }
            }
        }
        if accepted.is_none() {
            let search = wolfe_search(
                &mut eval,
                &w,
                &d,
                f,
                dphi0,
                alpha_max,
                opts.max_line_search_halvings,
                &mut failures,
                opts.max_objective_failures,
            );
            accepted = match search {
                WolfeOutcome::Accepted(x) => Some(x),
                WolfeOutcome::FailureBudget => {
                    return Ok(OptimRun {
                        w,
                        objective: f,
                        history,
                        iterations,
                        termination: OptTermination::FailureBudget,
                    })
                }
                WolfeOutcome::NoProgress => None,
            };
        }
        let Some((mut w_new, f_new, g_new)) = accepted else {
            // no progress possible along this direction
            if std::env::var_os("DFN_OPT_TRACE").is_some() {
                let dn = dot_masked(&d, &d, &free).sqrt();
                let gn = dot_masked(&g, &g, &free).sqrt();
                eprintln!(
                    "lbfgs: line search made no progress at f {f:.6e} (|g| {gn:.3e}, |d| {dn:.3e})"
                );
            }
            termination = OptTermination::ProjectedGradient;
            break;
        };
        if std::env::var_os("DFN_OPT_TRACE").is_some() {
            let dn = dot_masked(&d, &d, &free).sqrt();
            let sn: f64 = w_new
                .iter()
                .zip(&w)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            let gn = dot_masked(&g, &g, &free).sqrt();
            eprintln!(
                "lbfgs it {iterations}: f {f:.6e} -> {f_new:.6e}, |g| {gn:.3e}, |d| {dn:.3e}, |step| {sn:.3e}, pairs {}",
                pairs.len()
            );
        }
        // snap onto bounds so the active-set logic sees them exactly
        for x in w_new.iter_mut() {
            if *x < 1e-12 {
                *x = 0.0;
            } else if *x > 1.0 - 1e-12 {
                *x = 1.0;
            }
        }
        let s: Vec<f64> = w_new.iter().zip(&w).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy: f64 = s.iter().zip(&y).map(|(a, b)| a * b).sum();
        let ss: f64 = s.iter().map(|a| a * a).sum::<f64>().sqrt();
        let yy: f64 = y.iter().map(|a| a * a).sum::<f64>().sqrt();
        if sy > 1e-10 * ss * yy {
            if pairs.len() == opts.memory {
                pairs.pop_front();
            }
            pairs.push_back((s, y, 1.0 / sy));
        }
        w = w_new;
        f = f_new;
        g = g_new;
        history.push(f);
        iterations += 1;
    }

    Ok(OptimRun {
        w,
        objective: f,
        history,
        iterations,
        termination,
    })
}

fn dot_masked(a: &[f64], b: &[f64], mask: &[bool]) -> f64 {
    a.iter()
        .zip(b)
        .zip(mask)
        .filter(|&(_, &m)| m)
        .map(|((x, y), _)| x * y)
        .sum()
}

enum WolfeOutcome {
    Accepted((Vec<f64>, f64, Vec<f64>)),
    NoProgress,
    FailureBudget,
}

/// Strong-Wolfe line search (bracketing plus bisection zoom), c1 = 1e-4,
/// c2 = 0.9. Objective failures shrink the trial step and draw on the
/// failure budget.
#[allow(clippy::too_many_arguments)]
fn wolfe_search<F>(
    eval: &mut F,
    w: &[f64],
    d: &[f64],
    f0: f64,
    dphi0: f64,
    alpha_max: f64,
    max_trials: usize,
    failures: &mut usize,
    failure_budget: usize,
) -> WolfeOutcome
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    const C1: f64 = 1e-4;
    const C2: f64 = 0.9;
    let at = |alpha: f64| -> Vec<f64> {
        w.iter()
            .zip(d)
            .map(|(wi, di)| (wi + alpha * di).clamp(0.0, 1.0))
            .collect()
    };
    let mut probe = |alpha: f64| -> Option<(f64, f64, Vec<f64>, Vec<f64>)> {
        let w_try = at(alpha);
        match eval(&w_try) {
            Ok((f, g)) => {
                let dphi = g.iter().zip(d).map(|(gi, di)| gi * di).sum::<f64>();
                Some((f, dphi, w_try, g))
            }
            Err(_) => None,
        }
    };

    let trace = std::env::var_os("DFN_OPT_TRACE").is_some();
    let mut alpha_prev = 0.0;
    let mut f_prev = f0;
    let mut alpha = alpha_max.min(1.0);
    let mut bracket: Option<(f64, f64, f64)> = None; // (lo, f_lo, hi)

    for trial in 0..max_trials {
        if *failures > failure_budget {
            return WolfeOutcome::FailureBudget;
        }
        match probe(alpha) {
            None => {
                // evaluation failed: retreat toward the last good point
                *failures += 1;
                alpha = 0.5 * (alpha_prev + alpha);
                if alpha < 1e-16 {
                    if trace {
                        eprintln!("wolfe: trial evaluations kept failing down to alpha ~ 0");
                    }
                    return WolfeOutcome::NoProgress;
                }
                continue;
            }
            Some((fa, dphia, w_try, g_try)) => {
                if fa > f0 + C1 * alpha * dphi0 || (trial > 0 && fa >= f_prev) {
                    bracket = Some((alpha_prev, f_prev, alpha));
                    break;
                }
                if dphia.abs() <= -C2 * dphi0 {
                    return WolfeOutcome::Accepted((w_try, fa, g_try));
                }
                if dphia >= 0.0 {
                    bracket = Some((alpha, fa, alpha_prev));
                    break;
                }
                if alpha >= alpha_max * (1.0 - 1e-12) {
                    // boundary reached while still descending: take it
                    return if fa < f0 {
                        WolfeOutcome::Accepted((w_try, fa, g_try))
                    } else {
                        WolfeOutcome::NoProgress
                    };
                }
                alpha_prev = alpha;
                f_prev = fa;
                alpha = (2.0 * alpha).min(alpha_max);
            }
        }
    }

    let Some((mut lo, mut f_lo, mut hi)) = bracket else {
        if trace {
            eprintln!("wolfe: no bracket found (f0 {f0:.6e}, dphi0 {dphi0:.3e}, alpha_max {alpha_max:.3e})");
        }
        return WolfeOutcome::NoProgress;
    };
    let mut best: Option<(Vec<f64>, f64, Vec<f64>)> = None;
    for _ in 0..max_trials {
        if *failures > failure_budget {
            return WolfeOutcome::FailureBudget;
        }
        let mid = 0.5 * (lo + hi);
        if (hi - lo).abs() < 1e-16 {
            break;
        }
        match probe(mid) {
            None => {
                *failures += 1;
                hi = mid;
                continue;
            }
            Some((fm, dphim, w_try, g_try)) => {
                if fm > f0 + C1 * mid * dphi0 || fm >= f_lo {
                    hi = mid;
                } else {
                    if dphim.abs() <= -C2 * dphi0 {
                        return WolfeOutcome::Accepted((w_try, fm, g_try));
                    }
                    if fm < f0 {
                        best = Some((w_try.clone(), fm, g_try.clone()));
                    }
                    if dphim * (hi - lo) >= 0.0 {
                        hi = lo;
                    }
                    lo = mid;
                    f_lo = fm;
                }
            }
        }
    }
    match best {
        Some(b) => WolfeOutcome::Accepted(b),
        None => {
            if trace {
                eprintln!(
                    "wolfe: zoom exhausted without progress (f0 {f0:.6e}, dphi0 {dphi0:.3e}, lo {lo:.3e}, hi {hi:.3e}, f_lo {f_lo:.6e})"
                );
            }
            WolfeOutcome::NoProgress
        }
    }
}

// ---------------------------------------------------------------------------
// Two-stage initialization and the identification driver
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct StageReport {
    pub iterations: usize,
    pub objective: f64,
    pub termination: OptTermination,
}

#[derive(Debug, Clone)]
pub struct InitializationReport {
    pub w: Vec<f64>,
    pub stage1: Option<StageReport>,
    pub stage2: Option<StageReport>,
    /// Set when a stage failed and the initializer fell back to w = 0.5.
    pub fallback: bool,
}

/// Two-stage initial-value search: thermodynamic parameters on the lowest
/// rate, then kinetic parameters on the remaining rates, both from w = 0.5,
/// capped at `stage_iteration_cap` iterations and stopping early below
/// `stage_objective_tolerance`.
pub fn two_stage_initialize(
    problem: &IdentificationProblem,
    evaluator: &mut Evaluator,
) -> Result<InitializationReport> {
    problem.validate()?;
    let l = problem.scaling.len();
    let w0 = vec![0.5; l];
    let low = problem.lowest_rate();
    let stage_opts = OptimizerSettings {
        max_iterations: problem.stage_iteration_cap,
        objective_tolerance: problem.stage_objective_tolerance,
        ..problem.optimizer.clone()
    };

    let run_stage = |evaluator: &mut Evaluator,
                     w_start: &[f64],
                     mask: Vec<bool>,
                     rates: Vec<usize>|
     -> Result<OptimRun> {
        lbfgs_box(
            |w| {
                let out = evaluator.objective_on(w, &rates)?;
                let g = evaluator.gradient_on(w, &rates, &out)?;
                Ok((out.objective, g))
            },
            w_start.to_vec(),
            &mask,
            &stage_opts,
        )
    };

    let thermo_mask: Vec<bool> = problem.stages.iter().map(|s| *s == Stage::Thermodynamic).collect();
    let kinetic_mask: Vec<bool> = problem.stages.iter().map(|s| *s == Stage::Kinetic).collect();
    let high_rates: Vec<usize> = (0..problem.rates.len()).filter(|&i| i != low).collect();

    let mut report = InitializationReport {
        w: w0.clone(),
        stage1: None,
        stage2: None,
        fallback: false,
    };

    if thermo_mask.iter().any(|&m| m) {
        match run_stage(evaluator, &report.w, thermo_mask, vec![low]) {
            Ok(run) => {
                report.stage1 = Some(StageReport {
                    iterations: run.iterations,
                    objective: run.objective,
                    termination: run.termination,
                });
                report.w = run.w;
            }
            Err(_) => {
                report.fallback = true;
                report.w = w0.clone();
            }
        }
    }
    if !report.fallback && kinetic_mask.iter().any(|&m| m) && !high_rates.is_empty() {
        match run_stage(evaluator, &report.w, kinetic_mask, high_rates) {
            Ok(run) => {
                report.stage2 = Some(StageReport {
                    iterations: run.iterations,
                    objective: run.objective,
                    termination: run.termination,
                });
                report.w = run.w;
            }
            Err(_) => {
                report.fallback = true;
                report.w = w0;
            }
        }
    }
    Ok(report)
}

#[derive(Debug, Clone)]
pub struct IdentificationResult {
    pub w: Vec<f64>,
    pub theta: Vec<f64>,
    pub objective: f64,
    pub per_rate_rmse: Vec<f64>,
    pub objective_history: Vec<f64>,
    /// Forward predictions, adjoint sweeps counted as two each.
    pub nf: usize,
    pub iterations: usize,
    pub termination: OptTermination,
    pub initialization: InitializationReport,
    pub clamp_events: usize,
}

/// Runs the two-stage initializer followed by the bounded quasi-Newton loop
/// on the full multi-rate objective.
pub fn identify(problem: &IdentificationProblem) -> Result<IdentificationResult> {
    problem.validate()?;
    let mut evaluator = Evaluator::new(problem);
    let init = two_stage_initialize(problem, &mut evaluator)?;

    let mask = vec![true; problem.scaling.len()];
    let run = lbfgs_box(
        |w| {
            let out = evaluator.objective(w)?;
            let g = evaluator.gradient(w, &out)?;
            Ok((out.objective, g))
        },
        init.w.clone(),
        &mask,
        &problem.optimizer,
    )?;

    // final bookkeeping evaluation is free of charge: reuse scaling only
    let (theta, _) = problem.scaling.scale(&run.w)?;
    let mut final_eval = Evaluator::new(problem);
    let final_out = final_eval.objective(&run.w)?;

    Ok(IdentificationResult {
        w: run.w,
        theta,
        objective: run.objective,
        per_rate_rmse: final_out.per_rate_rmse,
        objective_history: run.history,
        nf: evaluator.nf() + final_eval.nf(),
        iterations: run.iterations,
        termination: run.termination,
        initialization: init,
        clamp_events: evaluator.clamp_events,
    })
}
