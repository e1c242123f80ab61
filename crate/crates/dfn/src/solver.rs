//! Newton iteration over the condensed macroscopic system, backward-Euler
//! time marching under a constant-current protocol, and tape recording.
//!
//! Each Newton iteration first updates every particle's surface concentration
//! through the precomputed fast path (a dot product per node), then assembles
//! and solves the macroscopic system whose pore-wall-flux rows see
//! `c_surf(j_s)`. After convergence the full radial profiles are recovered
//! with one factorized solve per node, so converged states coincide with a
//! monolithic solve of the coupled system.

use std::collections::HashMap;
use std::sync::Arc;

use crate::assembly::{self, AssemblyInputs, AssemblyMode, SurfaceClosure, DEFAULT_KINETICS_CAP};
use crate::error::{Error, Result};
use crate::linalg::{SparseLu, SparseMatrix};
use crate::microsolver::MicroOperator;
use crate::model::Model;
use crate::params::Electrode;
use crate::state::{Field, StateVector};

/// Constant-current drive description.
///
/// Sign convention: positive current density means discharge, negative means
/// charge. The assembly-level Neumann datum on the cathode tab is the negated
/// value (discharge draws current out of the cathode).
#[derive(Debug, Clone)]
pub struct DriveProtocol {
    /// Applied current density at the cathode tab (A/m^2), positive = discharge.
    pub current_density: f64,
    pub dt: f64,
    pub max_steps: usize,
    /// Lower cutoff for discharge, upper cutoff for charge.
    pub cutoff_voltage: Option<f64>,
    pub end_time: Option<f64>,
}

impl DriveProtocol {
    pub fn validate(&self) -> Result<()> {
        if self.dt <= 0.0 {
            return Err(Error::InvalidParameter {
                name: "dt",
                value: self.dt,
                reason: "time step must be positive",
            });
        }
        if self.max_steps == 0 {
            return Err(Error::InvalidParameter {
                name: "max_steps",
                value: 0.0,
                reason: "need at least one step",
            });
        }
        Ok(())
    }

    /// Signed Neumann datum handed to assembly.
    pub fn tab_datum(&self) -> f64 {
        -self.current_density
    }

    fn cutoff_crossed(&self, voltage: f64) -> bool {
        match self.cutoff_voltage {
            None => false,
            Some(vc) => {
                if self.current_density > 0.0 {
                    voltage <= vc
                } else if self.current_density < 0.0 {
                    voltage >= vc
                } else {
                    false
                }
            }
        }
    }
}

/// Newton solver knobs: scaled-residual tolerance 1e-8, iteration cap 25,
/// backtracking halving (max 8), up to 4 dt halvings per failed step.
#[derive(Debug, Clone)]
pub struct SolverSettings {
    pub newton_tol: f64,
    pub max_iterations: usize,
    pub max_halvings: usize,
    pub max_dt_halvings: usize,
    pub kinetics_cap: f64,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            newton_tol: 1e-8,
            max_iterations: 25,
            max_halvings: 8,
            max_dt_halvings: 4,
            kinetics_cap: DEFAULT_KINETICS_CAP,
        }
    }
}

/// Linear-algebra work counters (cost accounting).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SolveCounters {
    pub factorizations: usize,
    pub forward_solves: usize,
    /// Transposed solves of the per-step macroscopic system.
    pub transposed_solves: usize,
    /// Transposed solves of the initialization system.
    pub init_transposed_solves: usize,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct NewtonStats {
    pub iterations: usize,
    pub final_residual: f64,
    pub halvings: usize,
}

#[derive(Debug, Clone)]
pub struct StepRecord {
    pub time: f64,
    pub dt: f64,
    pub voltage: f64,
    pub newton: NewtonStats,
    /// How many times dt was halved before this step succeeded.
    pub dt_halvings: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    CutoffReached,
    EndTime,
    MaxSteps,
}

/// Ordered record of all converged states; input to the adjoint sweep.
#[derive(Clone)]
pub struct SolutionTape {
    /// U^0 .. U^N.
    pub states: Vec<StateVector>,
    /// Per-step metadata for steps 1..=N.
    pub steps: Vec<StepRecord>,
    /// Terminal voltage per stored state (length N+1).
    pub voltages: Vec<f64>,
    /// Time per stored state (length N+1, starting at 0).
    pub times: Vec<f64>,
    /// Signed tab datum applied on every step.
    pub tab_datum: f64,
    pub termination: Termination,
    pub counters: SolveCounters,
}

impl SolutionTape {
    pub fn n_steps(&self) -> usize {
        self.steps.len()
    }
}

/// Cache of micro operators keyed on (electrode, dt); a dt change rebuilds
/// the operator and its surface adjoint.
pub struct MicroOpCache {
    map: HashMap<(usize, u64), Arc<MicroOperator>>,
}

impl MicroOpCache {
    pub fn new() -> Self {
        Self {
            map: HashMap::new(),
        }
    }

    pub fn get(&mut self, model: &Model, e: Electrode, dt: f64) -> Result<Arc<MicroOperator>> {
        let key = (e.index(), dt.to_bits());
        if let Some(op) = self.map.get(&key) {
            return Ok(op.clone());
        }
        let op = Arc::new(model.build_micro_operator(e, dt)?);
        self.map.insert(key, op.clone());
        Ok(op)
    }
}

impl Default for MicroOpCache {
    fn default() -> Self {
        Self::new()
    }
}

/// Characteristic magnitudes used to nondimensionalize residual rows: the
/// initial electrolyte concentration for c_e, the thermal voltage for both
/// potentials, and the flux balancing the applied current for j_s.
fn unknown_scales(model: &Model, i_app: f64) -> Vec<f64> {
    let layout = &model.layout;
    let p = &model.params;
    let v_th = p.cell.rt() / p.cell.faraday;
    let i_ref = i_app.abs().max(1.0);
    let j_char = |e: Electrode| {
        let ep = p.electrode(e);
        i_ref / (ep.specific_surface_area() * p.cell.faraday * ep.thickness)
    };
    let mut s = vec![0.0; layout.n_macro()];
    for node in 0..layout.n_nodes {
        if let Some(d) = layout.dof(Field::ElectrolyteConcentration, node) {
            s[d] = p.cell.initial_electrolyte_concentration;
        }
        if let Some(d) = layout.dof(Field::ElectrolytePotential, node) {
            s[d] = v_th;
        }
        if let Some(d) = layout.dof(Field::SolidPotential, node) {
            s[d] = v_th;
        }
        if let Some(d) = layout.dof(Field::PoreWallFlux, node) {
            s[d] = j_char(model.mesh.membership(node).electrode.unwrap());
        }
    }
    s
}

/// Residual rows divided by |diagonal| times the unknown scale estimate the
/// Newton update each row still demands, in units of that unknown's scale.
fn scaled_norm(residual: &[f64], jac: &SparseMatrix, scales: &[f64]) -> f64 {
    let n = residual.len();
    let mut acc = 0.0;
    for m in 0..n {
        let d = jac.get(m, m).abs().max(1e-300);
        let r = residual[m] / (d * scales[m]);
        acc += r * r;
    }
    (acc / n as f64).sqrt()
}

struct NewtonProblem<'a> {
    model: &'a Model,
    u_prev: &'a [f64],
    surface_base: Vec<f64>,
    surface_slope: Vec<f64>,
    dt: f64,
    i_app: f64,
    mode: AssemblyMode,
}

impl NewtonProblem<'_> {
    fn inputs<'b>(&'b self, u: &'b [f64], cap: f64) -> AssemblyInputs<'b> {
        AssemblyInputs {
            model: self.model,
            u,
            u_prev: self.u_prev,
            surface: SurfaceClosure {
                base: &self.surface_base,
                slope: &self.surface_slope,
            },
            dt: self.dt,
            i_app: self.i_app,
            mode: self.mode,
            kinetics_cap: cap,
        }
    }
}

/// Damped Newton on the macroscopic unknowns. Convergence is error-oriented:
/// the iteration stops when the Newton update itself, measured in the
/// unknowns' characteristic units, falls below the tolerance; the final
/// (tiny) update is still applied.
fn newton_solve(
    problem: &NewtonProblem,
    u0: Vec<f64>,
    settings: &SolverSettings,
    counters: &mut SolveCounters,
) -> Result<(Vec<f64>, NewtonStats)> {
    let scales = unknown_scales(problem.model, problem.i_app);
    let wnorm = |x: &[f64]| -> f64 {
        let acc: f64 = x
            .iter()
            .zip(&scales)
            .map(|(v, s)| (v / s) * (v / s))
            .sum();
        (acc / x.len() as f64).sqrt()
    };
    let mut u = u0;
    let mut stats = NewtonStats::default();

    for iter in 0..=settings.max_iterations {
        let (residual, jac) =
            assembly::assemble_jacobian(&problem.inputs(&u, settings.kinetics_cap))?;
        stats.final_residual = scaled_norm(&residual, &jac, &scales);
        if iter == settings.max_iterations {
            break;
        }
        let lu = SparseLu::factorize(&jac)?;
        counters.factorizations += 1;
        let rhs: Vec<f64> = residual.iter().map(|r| -r).collect();
        let delta = lu.solve(&rhs);
        counters.forward_solves += 1;
        stats.iterations += 1;

        let merit = wnorm(&delta);
        if merit <= settings.newton_tol {
            for (ui, di) in u.iter_mut().zip(&delta) {
                *ui += di;
            }
            return Ok((u, stats));
        }

        // Backtracking halving on merit increase or kinetics failure; plain
        // Newton otherwise. The merit is the length of the next Newton
        // update under the frozen factorization (error-oriented damping),
        // scale-free across the very differently sized residual blocks.
        let mut alpha: f64 = 1.0;
        let mut accepted = false;
        for _ in 0..=settings.max_halvings {
            let trial: Vec<f64> = u
                .iter()
                .zip(&delta)
                .map(|(ui, di)| ui + alpha * di)
                .collect();
            match assembly::assemble_residual(&problem.inputs(&trial, settings.kinetics_cap)) {
                Ok(r_trial) => {
                    let rhs_trial: Vec<f64> = r_trial.iter().map(|r| -r).collect();
                    let delta_trial = lu.solve(&rhs_trial);
                    counters.forward_solves += 1;
                    if wnorm(&delta_trial) <= merit * (1.0 - 0.25 * alpha) + 1e-16 {
                        u = trial;
                        accepted = true;
                        break;
                    }
                }
                Err(
                    Error::Saturation { .. }
                    | Error::DivergedKinetics { .. }
                    | Error::SingularLog { .. }
                    | Error::DomainError { .. },
                ) => {}
                Err(e) => return Err(e),
            }
            alpha *= 0.5;
            stats.halvings += 1;
        }
        if !accepted {
            return Err(Error::StepFailed {
                step: 0,
                residual: stats.final_residual,
                iterations: stats.iterations,
            });
        }
    }
    Err(Error::StepFailed {
        step: 0,
        residual: stats.final_residual,
        iterations: stats.iterations,
    })
}

/// Initial state U^0 = g(theta): uniform concentrations plus the algebraic
/// closure of potentials and pore-wall fluxes under the protocol current.
pub fn initialize_state(
    model: &Model,
    protocol_current: f64,
    settings: &SolverSettings,
    counters: &mut SolveCounters,
) -> Result<StateVector> {
    let layout = &model.layout;
    let p = &model.params;
    let mats = &model.materials;

    let mut u = StateVector::zeros(layout);
    for slot in 0..layout.n_slots() {
        let c0 = p
            .electrode(layout.slot_electrode(slot))
            .initial_lithium_concentration;
        u.micro_slice_mut(layout, slot).fill(c0);
    }

    let th_a = p.anode.initial_lithium_concentration / p.anode.max_lithium_concentration;
    let th_c = p.cathode.initial_lithium_concentration / p.cathode.max_lithium_concentration;
    let u_oc_a = mats
        .ocp(Electrode::Anode, th_a)
        .map_err(|e| Error::InitFailed(format!("anode OCP at initial stoichiometry: {e}")))?;
    let u_oc_c = mats
        .ocp(Electrode::Cathode, th_c)
        .map_err(|e| Error::InitFailed(format!("cathode OCP at initial stoichiometry: {e}")))?;
    let rest_voltage = u_oc_c - u_oc_a;

    for node in 0..layout.n_nodes {
        let m = model.mesh.membership(node);
        if let Some(d) = layout.dof(Field::ElectrolyteConcentration, node) {
            u.macro_dofs[d] = p.cell.initial_electrolyte_concentration;
        }
        if let Some(d) = layout.dof(Field::ElectrolytePotential, node) {
            u.macro_dofs[d] = -u_oc_a;
        }
        if let Some(d) = layout.dof(Field::SolidPotential, node) {
            u.macro_dofs[d] = match m.solid_side {
                Some(Electrode::Cathode) => rest_voltage,
                _ => 0.0,
            };
        }
        // pore-wall fluxes start at zero
    }

    let base: Vec<f64> = (0..layout.n_slots())
        .map(|s| {
            p.electrode(layout.slot_electrode(s))
                .initial_lithium_concentration
        })
        .collect();
    let guess = u.macro_dofs.clone();
    let problem = NewtonProblem {
        model,
        u_prev: &guess,
        surface_base: base,
        surface_slope: vec![0.0; layout.n_slots()],
        dt: 1.0,
        i_app: -protocol_current,
        mode: AssemblyMode::Initialization,
    };
    let (macro_dofs, _stats) = newton_solve(&problem, guess.clone(), settings, counters)
        .map_err(|e| Error::InitFailed(format!("algebraic closure diverged: {e}")))?;
    u.macro_dofs = macro_dofs;
    Ok(u)
}

/// One backward-Euler step: fast-path surface concentrations, damped Newton
/// on the macroscopic system, then micro-state recovery.
pub fn solve_time_step(
    model: &Model,
    cache: &mut MicroOpCache,
    u_prev: &StateVector,
    dt: f64,
    tab_datum: f64,
    settings: &SolverSettings,
    counters: &mut SolveCounters,
) -> Result<(StateVector, NewtonStats)> {
    let layout = &model.layout;
    let ops = [
        cache.get(model, Electrode::Anode, dt)?,
        cache.get(model, Electrode::Cathode, dt)?,
    ];
    let mut base = vec![0.0; layout.n_slots()];
    let mut slope = vec![0.0; layout.n_slots()];
    for slot in 0..layout.n_slots() {
        let op = &ops[layout.slot_electrode(slot).index()];
        base[slot] = op.precompute_surface(u_prev.micro_slice(layout, slot));
        slope[slot] = op.flux_sensitivity();
    }
    let problem = NewtonProblem {
        model,
        u_prev: &u_prev.macro_dofs,
        surface_base: base,
        surface_slope: slope,
        dt,
        i_app: tab_datum,
        mode: AssemblyMode::Step,
    };
    let (macro_dofs, stats) =
        newton_solve(&problem, u_prev.macro_dofs.clone(), settings, counters)?;

    let mut u = StateVector {
        micro: vec![0.0; layout.n_micro()],
        macro_dofs,
    };
    for slot in 0..layout.n_slots() {
        let op = &ops[layout.slot_electrode(slot).index()];
        let node = layout.slot_node(slot);
        let j = u.macro_dofs[layout.dof(Field::PoreWallFlux, node).unwrap()];
        let profile = op.recover(u_prev.micro_slice(layout, slot), j);
        u.micro_slice_mut(layout, slot).copy_from_slice(&profile);
    }
    Ok((u, stats))
}

/// Marches the protocol until cutoff crossing, end time, or the step cap,
/// recording every converged state. A failed step retries with halved dt
/// (bounded); the tape keeps the exact step sizes for the adjoint replay.
pub fn run_forward(
    model: &Model,
    protocol: &DriveProtocol,
    settings: &SolverSettings,
) -> Result<SolutionTape> {
    protocol.validate()?;
    let mut counters = SolveCounters::default();
    let mut cache = MicroOpCache::new();
    let u0 = initialize_state(model, protocol.current_density, settings, &mut counters)?;
    let v0 = model.terminal_voltage(&u0);

    let mut tape = SolutionTape {
        states: vec![u0],
        steps: Vec::new(),
        voltages: vec![v0],
        times: vec![0.0],
        tab_datum: protocol.tab_datum(),
        termination: Termination::MaxSteps,
        counters,
    };

    let mut time = 0.0;
    for step in 1..=protocol.max_steps {
        let mut dt = protocol.dt;
        if let Some(t_end) = protocol.end_time {
            let remaining = t_end - time;
            if remaining <= protocol.dt * 1e-9 {
                tape.termination = Termination::EndTime;
                break;
            }
            dt = dt.min(remaining);
        }
        let u_prev = tape.states.last().unwrap().clone();
        let mut halvings = 0;
        let (u, stats) = loop {
            match solve_time_step(
                model,
                &mut cache,
                &u_prev,
                dt,
                tape.tab_datum,
                settings,
                &mut tape.counters,
            ) {
                Ok(ok) => break ok,
                Err(e) => {
                    if halvings >= settings.max_dt_halvings {
                        return Err(Error::ForwardFailed {
                            step,
                            reason: e.to_string(),
                        });
                    }
                    halvings += 1;
                    dt *= 0.5;
                }
            }
        };
        time += dt;
        let v = model.terminal_voltage(&u);
        tape.states.push(u);
        tape.voltages.push(v);
        tape.times.push(time);
        tape.steps.push(StepRecord {
            time,
            dt,
            voltage: v,
            newton: stats,
            dt_halvings: halvings,
        });
        if protocol.cutoff_crossed(v) {
            tape.termination = Termination::CutoffReached;
            break;
        }
        if let Some(t_end) = protocol.end_time {
            if time >= t_end * (1.0 - 1e-12) {
                tape.termination = Termination::EndTime;
                break;
            }
        }
    }
    Ok(tape)
}

/// Terminal voltage of a converged state (cathode-tab average of phi_s; the
/// anode tab is grounded).
pub fn terminal_voltage(model: &Model, u: &StateVector) -> f64 {
    model.terminal_voltage(u)
}

/// Total solid lithium: nodal electrode volumes times eps_s times the
/// volume-mean particle concentration at each node.
pub fn solid_lithium_content(
    model: &Model,
    cache: &mut MicroOpCache,
    u: &StateVector,
    dt: f64,
) -> Result<f64> {
    let layout = &model.layout;
    let volumes = assembly::electrode_nodal_volumes(model);
    let ops = [
        cache.get(model, Electrode::Anode, dt)?,
        cache.get(model, Electrode::Cathode, dt)?,
    ];
    let mut total = 0.0;
    for slot in 0..layout.n_slots() {
        let e = layout.slot_electrode(slot);
        let eps_s = model.params.electrode(e).active_material_volume_fraction;
        let mean = ops[e.index()].mean_concentration(u.micro_slice(layout, slot));
        total += volumes[slot] * eps_s * mean;
    }
    Ok(total)
}

/// Signed reaction-current totals per electrode, `integral(a_s F j_s dV)`,
/// indexed by [anode, cathode].
pub fn electrode_reaction_currents(model: &Model, u: &StateVector) -> [f64; 2] {
    let layout = &model.layout;
    let volumes = assembly::electrode_nodal_volumes(model);
    let mut totals = [0.0; 2];
    for slot in 0..layout.n_slots() {
        let e = layout.slot_electrode(slot);
        let node = layout.slot_node(slot);
        let a_s = model.params.electrode(e).specific_surface_area();
        let j = u.macro_dofs[layout.dof(Field::PoreWallFlux, node).unwrap()];
        totals[e.index()] += volumes[slot] * a_s * model.params.cell.faraday * j;
    }
    totals
}
