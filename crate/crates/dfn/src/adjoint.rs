//! Reverse sweep over a solution tape: per-step transposed solves,
//! product-vector recursion, parameter-gradient accumulation, and the
//! initial-condition term.
//!
//! The sweep works on the full coupled system (micro states included) but
//! eliminates the microscopic blocks exactly, so each step performs one
//! transposed solve of the condensed macroscopic system plus cheap
//! tridiagonal solves per particle. The per-step equations are
//!
//! `(dR^i/dU^i)^T lambda^i = -v^i`,
//! `v^i = dL/dU^i + (lambda^{i+1})^T dR^{i+1}/dU^i`,
//! `dL/dtheta = dL/dtheta|exp + sum_i (lambda^i)^T dR^i/dtheta
//!             + (lambda^0)^T dg/dtheta`,
//!
//! with the initial-value term closed by implicit differentiation of the
//! initialization solve (one extra transposed solve of that system).

use crate::assembly::{self, AssemblyInputs, AssemblyMode, SurfaceClosure};
use crate::error::{Error, Result};
use crate::linalg::{SparseLu, SparseMatrix};
use crate::microsolver::MicroOperator;
use crate::model::Model;
use crate::params::{Electrode, ParamId};
use crate::solver::{SolutionTape, SolveCounters, SolverSettings};
use crate::state::Field;

/// Objective derivatives fed into the sweep: dense per-state macroscopic
/// partials (voltage objectives touch only cathode-tab phi_s entries) plus
/// the explicit parameter partial.
#[derive(Debug, Clone)]
pub struct ObjectivePartials {
    /// `dL/dU^i` for i = 0..=N, each of macroscopic length.
    pub du: Vec<Vec<f64>>,
    /// Explicit `dL/dtheta`, one entry per identified parameter.
    pub dtheta: Vec<f64>,
}

impl ObjectivePartials {
    pub fn zeros(model: &Model, n_states: usize, n_params: usize) -> Self {
        Self {
            du: vec![vec![0.0; model.layout.n_macro()]; n_states],
            dtheta: vec![0.0; n_params],
        }
    }
}

/// Result of one backward sweep.
#[derive(Debug, Clone)]
pub struct SweepResult {
    pub gradient: Vec<f64>,
    pub counters: SolveCounters,
}

struct StepContext {
    ops: [std::sync::Arc<MicroOperator>; 2],
    /// Fast-path closure at the tape state (matches the forward assembly).
    base: Vec<f64>,
    slope: Vec<f64>,
}

fn step_context(
    model: &Model,
    cache: &mut crate::solver::MicroOpCache,
    tape: &SolutionTape,
    step: usize,
) -> Result<StepContext> {
    let layout = &model.layout;
    let dt = tape.steps[step - 1].dt;
    let ops = [
        cache.get(model, Electrode::Anode, dt)?,
        cache.get(model, Electrode::Cathode, dt)?,
    ];
    let prev = &tape.states[step - 1];
    let mut base = vec![0.0; layout.n_slots()];
    let mut slope = vec![0.0; layout.n_slots()];
    for slot in 0..layout.n_slots() {
        let op = &ops[layout.slot_electrode(slot).index()];
        base[slot] = op.precompute_surface(prev.micro_slice(layout, slot));
        slope[slot] = op.flux_sensitivity();
    }
    Ok(StepContext { ops, base, slope })
}

fn step_inputs<'a>(
    model: &'a Model,
    tape: &'a SolutionTape,
    step: usize,
    ctx: &'a StepContext,
    settings: &SolverSettings,
) -> AssemblyInputs<'a> {
    AssemblyInputs {
        model,
        u: &tape.states[step].macro_dofs,
        u_prev: &tape.states[step - 1].macro_dofs,
        surface: SurfaceClosure {
            base: &ctx.base,
            slope: &ctx.slope,
        },
        dt: tape.steps[step - 1].dt,
        i_app: tape.tab_datum,
        mode: AssemblyMode::Step,
        kinetics_cap: settings.kinetics_cap,
    }
}

/// Solves the transposed macroscopic system at a tape state:
/// `(dR^i/dU^i)^T lambda = -v`, with the same Dirichlet elimination as the
/// forward solve. The Jacobian is re-assembled at the tape state.
pub fn adjoint_step(
    model: &Model,
    tape: &SolutionTape,
    step: usize,
    v: &[f64],
    settings: &SolverSettings,
    counters: &mut SolveCounters,
) -> Result<Vec<f64>> {
    let mut cache = crate::solver::MicroOpCache::new();
    let ctx = step_context(model, &mut cache, tape, step)?;
    let inputs = step_inputs(model, tape, step, &ctx, settings);
    let (_, jac) = assembly::assemble_jacobian(&inputs)?;
    solve_transposed(&jac, v, step, counters)
}

fn solve_transposed(
    jac: &SparseMatrix,
    v: &[f64],
    step: usize,
    counters: &mut SolveCounters,
) -> Result<Vec<f64>> {
    let lu = SparseLu::factorize(jac).map_err(|e| Error::AdjointFailed {
        step,
        reason: e.to_string(),
    })?;
    counters.factorizations += 1;
    let rhs: Vec<f64> = v.iter().map(|x| -x).collect();
    counters.transposed_solves += 1;
    Ok(lu.solve_transpose(&rhs))
}

/// Contracts an adjoint vector with a step residual's parameter tangent,
/// `(lambda)^T dR^i/dtheta`, for every identified parameter.
///
/// Macroscopic dependencies are evaluated element-locally with the surface
/// concentrations fixed at their stored values; the micro path carries its
/// own tangent through the micro adjoint states.
pub fn parameter_tangent_product(
    model: &Model,
    tape: &SolutionTape,
    step: usize,
    lambda: &[f64],
    params: &[ParamId],
    settings: &SolverSettings,
) -> Result<Vec<f64>> {
    let layout = &model.layout;
    let stored_base: Vec<f64> = (0..layout.n_slots())
        .map(|s| tape.states[step].surface_concentration(layout, s))
        .collect();
    let zero_slope = vec![0.0; layout.n_slots()];
    let inputs = AssemblyInputs {
        model,
        u: &tape.states[step].macro_dofs,
        u_prev: &tape.states[step - 1].macro_dofs,
        surface: SurfaceClosure {
            base: &stored_base,
            slope: &zero_slope,
        },
        dt: tape.steps[step - 1].dt,
        i_app: tape.tab_datum,
        mode: AssemblyMode::Step,
        kinetics_cap: settings.kinetics_cap,
    };
    params
        .iter()
        .map(|p| assembly::parameter_tangent(&inputs, lambda, *p))
        .collect()
}

/// Reverse sweep: iterates i = N down to 1, forms the product vector from
/// the objective partial and the upstream adjoint, solves the transposed
/// step system, accumulates parameter tangents, and finishes with the
/// initial-condition term.
pub fn backward_sweep(
    model: &Model,
    tape: &SolutionTape,
    params: &[ParamId],
    partials: &ObjectivePartials,
    settings: &SolverSettings,
) -> Result<SweepResult> {
    let layout = &model.layout;
    let n = tape.n_steps();
    if partials.du.len() != n + 1 {
        return Err(Error::Structural(format!(
            "objective partials cover {} states, tape has {}",
            partials.du.len(),
            n + 1
        )));
    }
    for (i, du) in partials.du.iter().enumerate() {
        if du.len() != layout.n_macro() {
            return Err(Error::Structural(format!(
                "objective partial {i} has length {}, expected {}",
                du.len(),
                layout.n_macro()
            )));
        }
    }
    if partials.dtheta.len() != params.len() {
        return Err(Error::Structural(
            "explicit parameter partial length mismatch".into(),
        ));
    }

    let mut counters = SolveCounters::default();
    let mut cache = crate::solver::MicroOpCache::new();
    let mut gradient = partials.dtheta.clone();
    let ce_mass = assembly::assemble_ce_mass(model);

    // Adjoint of the step above the current one; zero above the last step.
    let mut lambda_mac: Vec<f64> = vec![0.0; layout.n_macro()];
    let mut lambda_mic: Vec<f64> = vec![0.0; layout.n_micro()];

    for i in (1..=n).rev() {
        let ctx = step_context(model, &mut cache, tape, i)?;

        // Product vector v^i = dL/dU^i + (lambda^{i+1})^T dR^{i+1}/dU^i.
        let mut v_mac = partials.du[i].clone();
        let mut v_mic = vec![0.0; layout.n_micro()];
        if i < n {
            let dt_next = tape.steps[i].dt;
            let mass_lambda = ce_mass.matvec(&lambda_mac);
            for (vm, ml) in v_mac.iter_mut().zip(&mass_lambda) {
                *vm -= ml / dt_next;
            }
            for slot in 0..layout.n_slots() {
                let e = layout.slot_electrode(slot);
                let m = ctx.ops[e.index()]
                    .mass
                    .matvec(&lambda_mic[slot * layout.m_r..(slot + 1) * layout.m_r]);
                for (k, mv) in m.iter().enumerate() {
                    v_mic[slot * layout.m_r + k] = -mv / dt_next;
                }
            }
        }

        // Eliminate the micro blocks: w = J_mic^{-1} v_mic per particle, then
        // fold the surface coupling into the macroscopic right-hand side.
        let mut w_all = vec![0.0; layout.n_micro()];
        let mut rhs: Vec<f64> = v_mac.iter().map(|x| -x).collect();
        for slot in 0..layout.n_slots() {
            let e = layout.slot_electrode(slot);
            let op = &ctx.ops[e.index()];
            let w = op.solve(&v_mic[slot * layout.m_r..(slot + 1) * layout.m_r]);
            let node = layout.slot_node(slot);
            let jd = layout.dof(Field::PoreWallFlux, node).unwrap();
            rhs[jd] += op.surface_load_scale() * w[layout.m_r - 1];
            w_all[slot * layout.m_r..(slot + 1) * layout.m_r].copy_from_slice(&w);
        }

        // One transposed solve of the condensed macroscopic system.
        let inputs = step_inputs(model, tape, i, &ctx, settings);
        let (_, jac) = assembly::assemble_jacobian(&inputs)?;
        let lu = SparseLu::factorize(&jac).map_err(|e| Error::AdjointFailed {
            step: i,
            reason: e.to_string(),
        })?;
        counters.factorizations += 1;
        counters.transposed_solves += 1;
        lambda_mac = lu.solve_transpose(&rhs);

        // Micro adjoints: lambda_x = -w - (dR_j/dc_surf * lambda_j) lambda_surf.
        let dbv = assembly::bv_surface_derivatives(&inputs)?;
        for slot in 0..layout.n_slots() {
            let e = layout.slot_electrode(slot);
            let op = &ctx.ops[e.index()];
            let node = layout.slot_node(slot);
            let jd = layout.dof(Field::PoreWallFlux, node).unwrap();
            let g = dbv[slot] * lambda_mac[jd];
            for k in 0..layout.m_r {
                lambda_mic[slot * layout.m_r + k] =
                    -w_all[slot * layout.m_r + k] - g * op.lambda_surf[k];
            }
        }

        // Parameter tangents: macroscopic terms element-locally, micro terms
        // through the stiffness derivative (solid diffusivity).
        let macro_terms = parameter_tangent_product(model, tape, i, &lambda_mac, params, settings)?;
        for (g, t) in gradient.iter_mut().zip(&macro_terms) {
            *g += t;
        }
        for (pi, p) in params.iter().enumerate() {
            if let ParamId::SolidDiffusivity(e) = p {
                let op = &ctx.ops[e.index()];
                for slot in 0..layout.n_slots() {
                    if layout.slot_electrode(slot) != *e {
                        continue;
                    }
                    let kx = op
                        .stiff_unit
                        .matvec(tape.states[i].micro_slice(layout, slot));
                    let lam = &lambda_mic[slot * layout.m_r..(slot + 1) * layout.m_r];
                    gradient[pi] += lam.iter().zip(&kx).map(|(l, k)| l * k).sum::<f64>();
                }
            }
        }
    }

    // lambda^0 = dL/dU^0 + (lambda^1)^T dR^1/dU^0.
    let mut lambda0_mac = partials.du[0].clone();
    let mut lambda0_mic = vec![0.0; layout.n_micro()];
    if n > 0 {
        let dt_1 = tape.steps[0].dt;
        let mass_lambda = ce_mass.matvec(&lambda_mac);
        for (vm, ml) in lambda0_mac.iter_mut().zip(&mass_lambda) {
            *vm -= ml / dt_1;
        }
        let ops1 = [
            cache.get(model, Electrode::Anode, dt_1)?,
            cache.get(model, Electrode::Cathode, dt_1)?,
        ];
        for slot in 0..layout.n_slots() {
            let e = layout.slot_electrode(slot);
            let m = ops1[e.index()]
                .mass
                .matvec(&lambda_mic[slot * layout.m_r..(slot + 1) * layout.m_r]);
            for (k, mv) in m.iter().enumerate() {
                lambda0_mic[slot * layout.m_r + k] = -mv / dt_1;
            }
        }
    }

    // Initial micro states are uniform at the electrode's initial
    // concentration, so dU_r^0/dc_s0 is an indicator vector.
    for (pi, p) in params.iter().enumerate() {
        if let ParamId::InitialConcentration(e) = p {
            for slot in 0..layout.n_slots() {
                if layout.slot_electrode(slot) != *e {
                    continue;
                }
                gradient[pi] += lambda0_mic[slot * layout.m_r..(slot + 1) * layout.m_r]
                    .iter()
                    .sum::<f64>();
            }
        }
    }

    // The macroscopic part of U^0 solves the initialization system H = 0;
    // implicit differentiation adds -mu^T dH/dtheta with H_U^T mu = lambda^0.
    let init_base: Vec<f64> = (0..layout.n_slots())
        .map(|s| {
            model
                .params
                .electrode(layout.slot_electrode(s))
                .initial_lithium_concentration
        })
        .collect();
    let zero_slope = vec![0.0; layout.n_slots()];
    let init_inputs = AssemblyInputs {
        model,
        u: &tape.states[0].macro_dofs,
        u_prev: &tape.states[0].macro_dofs,
        surface: SurfaceClosure {
            base: &init_base,
            slope: &zero_slope,
        },
        dt: 1.0,
        i_app: tape.tab_datum,
        mode: AssemblyMode::Initialization,
        kinetics_cap: settings.kinetics_cap,
    };
    let (_, h_jac) = assembly::assemble_jacobian(&init_inputs)?;
    let lu = SparseLu::factorize(&h_jac).map_err(|e| Error::AdjointFailed {
        step: 0,
        reason: e.to_string(),
    })?;
    counters.factorizations += 1;
    counters.init_transposed_solves += 1;
    let mu = lu.solve_transpose(&lambda0_mac);
    for (pi, p) in params.iter().enumerate() {
        gradient[pi] -= assembly::parameter_tangent(&init_inputs, &mu, *p)?;
    }

    Ok(SweepResult { gradient, counters })
}
