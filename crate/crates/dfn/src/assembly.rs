//! Macroscopic residual blocks and their sparse Jacobian.
//!
//! Element residuals are written once, generically over [`Real`]. The same
//! kernel gives the residual (`f64`), the element tangent (dual numbers
//! seeded on element unknowns), and the residual's parameter derivative
//! (dual numbers seeded on one model parameter). This keeps the Jacobian and
//! every directional derivative consistent with the residual by construction;
//! the binding contract is the finite-difference check in the tests.

use crate::error::{Error, Result};
use crate::linalg::SparseMatrix;
use crate::mesh::{MacroElement, Region};
use crate::model::Model;
use crate::params::{Electrode, MaterialFunctionSet, ParamId, ParameterSet};
use crate::real::{Dual, Real};
use crate::state::{Field, StateVector};

/// Default cap on the nondimensional overpotential |F eta / 2RT|; beyond it
/// the kinetics are treated as diverged and the Newton damping path engages.
pub const DEFAULT_KINETICS_CAP: f64 = 40.0;

const GAUSS2: [f64; 2] = [-0.5773502691896258, 0.5773502691896258];
const SX: [f64; 8] = [-1.0, 1.0, 1.0, -1.0, -1.0, 1.0, 1.0, -1.0];
const SY: [f64; 8] = [-1.0, -1.0, 1.0, 1.0, -1.0, -1.0, 1.0, 1.0];
const SZ: [f64; 8] = [-1.0, -1.0, -1.0, -1.0, 1.0, 1.0, 1.0, 1.0];

/// One quadrature point: weight (including the Jacobian determinant), shape
/// values, and physical shape gradients.
struct QPoint {
    w: f64,
    psi: [f64; 8],
    grad: [[f64; 3]; 8],
}

fn quad_points(dim: usize, coords: &[[f64; 3]], elem: &MacroElement) -> Vec<QPoint> {
    let p0 = coords[elem.nodes[0]];
    let hx = coords[elem.nodes[1]][0] - p0[0];
    let hy = if dim >= 2 {
        coords[elem.nodes[3]][1] - p0[1]
    } else {
        1.0
    };
    let hz = if dim == 3 {
        coords[elem.nodes[4]][2] - p0[2]
    } else {
        1.0
    };
    let nn = elem.nodes.len();
    let jac = match dim {
        1 => hx / 2.0,
        2 => hx * hy / 4.0,
        _ => hx * hy * hz / 8.0,
    };
    let mut points = Vec::with_capacity(1 << dim);
    let eta_range: &[f64] = if dim >= 2 { &GAUSS2 } else { &[0.0] };
    let zeta_range: &[f64] = if dim == 3 { &GAUSS2 } else { &[0.0] };
    for &zeta in zeta_range {
        for &eta in eta_range {
            for &xi in GAUSS2.iter() {
                let mut psi = [0.0; 8];
                let mut grad = [[0.0; 3]; 8];
                for a in 0..nn {
                    let fx = 0.5 * (1.0 + SX[a] * xi);
                    let fy = if dim >= 2 { 0.5 * (1.0 + SY[a] * eta) } else { 1.0 };
                    let fz = if dim == 3 { 0.5 * (1.0 + SZ[a] * zeta) } else { 1.0 };
                    psi[a] = fx * fy * fz;
                    grad[a][0] = SX[a] / hx * fy * fz;
                    if dim >= 2 {
                        grad[a][1] = fx * SY[a] / hy * fz;
                    }
                    if dim == 3 {
                        grad[a][2] = fx * fy * SZ[a] / hz;
                    }
                }
                points.push(QPoint { w: jac, psi, grad });
            }
        }
    }
    points
}

// ---------------------------------------------------------------------------
// Coefficient lifting
// ---------------------------------------------------------------------------

struct LayerCoeffs<R: Real> {
    eps_e: R,
    beta: R,
    t_plus: R,
    /// 3 eps_s / r_s; zero in the separator.
    a_s: f64,
    /// eps_s^beta sigma for electrodes, collector metal conductivity for CCs.
    sigma_eff: R,
    faraday: f64,
    /// 2RT/F.
    two_rt_over_f: f64,
}

fn lift_layer<R: Real>(params: &ParameterSet, region: Region, seed: Option<ParamId>) -> LayerCoeffs<R> {
    let seeded = |id: ParamId, v: f64| -> R {
        if seed == Some(id) {
            R::lane_variable(v, 0)
        } else {
            R::from_f64(v)
        }
    };
    let cell = &params.cell;
    let two_rt_over_f = 2.0 * cell.rt() / cell.faraday;
    let t_plus = seeded(ParamId::TransferenceNumber, cell.transference_number);
    match region {
        Region::Anode | Region::Cathode => {
            let e = region.electrode().unwrap();
            let ep = params.electrode(e);
            let layer = region.layer().unwrap();
            let beta = seeded(ParamId::Bruggeman(layer), ep.bruggeman);
            let sigma_eff =
                R::from_f64(ep.active_material_volume_fraction).powr(beta) * R::from_f64(ep.conductivity);
            LayerCoeffs {
                eps_e: R::from_f64(ep.electrolyte_volume_fraction),
                beta,
                t_plus,
                a_s: ep.specific_surface_area(),
                sigma_eff,
                faraday: cell.faraday,
                two_rt_over_f,
            }
        }
        Region::Separator => {
            let sp = &params.separator;
            let beta = seeded(
                ParamId::Bruggeman(crate::params::Layer::Separator),
                sp.bruggeman,
            );
            LayerCoeffs {
                eps_e: R::from_f64(sp.electrolyte_volume_fraction),
                beta,
                t_plus,
                a_s: 0.0,
                sigma_eff: R::from_f64(0.0),
                faraday: cell.faraday,
                two_rt_over_f,
            }
        }
        Region::AnodeCollector | Region::CathodeCollector => {
            let cc = params
                .collectors
                .as_ref()
                .expect("collector element without collector parameters");
            let sigma = if region == Region::AnodeCollector {
                cc.anode_conductivity
            } else {
                cc.cathode_conductivity
            };
            LayerCoeffs {
                eps_e: R::from_f64(0.0),
                beta: R::from_f64(0.0),
                t_plus,
                a_s: 0.0,
                sigma_eff: R::from_f64(sigma),
                faraday: cell.faraday,
                two_rt_over_f,
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Butler-Volmer point constraint
// ---------------------------------------------------------------------------

struct BvCoeffs<R: Real> {
    k_s: R,
    c_s_max: f64,
    faraday: f64,
    rt: f64,
    prescale: f64,
    cap: f64,
}

fn lift_bv<R: Real>(
    params: &ParameterSet,
    materials: &MaterialFunctionSet,
    electrode: Electrode,
    seed: Option<ParamId>,
    cap: f64,
) -> BvCoeffs<R> {
    let ep = params.electrode(electrode);
    let k_s = if seed == Some(ParamId::ReactionRate(electrode)) {
        R::lane_variable(ep.reaction_rate_constant, 0)
    } else {
        R::from_f64(ep.reaction_rate_constant)
    };
    BvCoeffs {
        k_s,
        c_s_max: ep.max_lithium_concentration,
        faraday: params.cell.faraday,
        rt: params.cell.rt(),
        prescale: match electrode {
            Electrode::Anode => 1.0,
            Electrode::Cathode => materials.cathode_stoichiometry_prescale,
        },
        cap,
    }
}

fn bv_kernel<R: Real>(
    j_s: R,
    c_surf: R,
    c_e: R,
    phi_e: R,
    phi_s: R,
    co: &BvCoeffs<R>,
    curve: &crate::params::OcpCurve,
    node: usize,
) -> Result<R> {
    let cs = c_surf.value();
    if !(cs > 0.0 && cs < co.c_s_max) {
        return Err(Error::Saturation {
            node,
            value: cs,
            max: co.c_s_max,
        });
    }
    if c_e.value() <= 0.0 {
        return Err(Error::SingularLog {
            element: node,
            value: c_e.value(),
        });
    }
    let theta = c_surf * R::from_f64(co.prescale / co.c_s_max);
    let (u_val, u_der) = curve.eval_d(theta.value())?;
    let u_oc = R::chain(theta, u_val, u_der);
    let eta = phi_s - phi_e - u_oc;
    let arg = eta * R::from_f64(co.faraday / (2.0 * co.rt));
    if arg.value().abs() > co.cap {
        return Err(Error::DivergedKinetics {
            node,
            arg: arg.value().abs(),
            cap: co.cap,
        });
    }
    let i0 = co.k_s
        * R::from_f64(co.faraday)
        * c_surf.sqrt()
        * (R::from_f64(co.c_s_max) - c_surf).sqrt()
        * c_e.sqrt();
    Ok(j_s - i0 * R::from_f64(2.0 / co.faraday) * arg.sinh())
}

/// Residual of the pointwise Butler-Volmer constraint,
/// `j_s - (2 i0 / F) sinh(F eta / 2RT)` with `eta = phi_s - phi_e - U_oc`.
#[allow(clippy::too_many_arguments)]
pub fn butler_volmer_residual(
    j_s: f64,
    c_s_surf: f64,
    c_e: f64,
    phi_s: f64,
    phi_e: f64,
    params: &ParameterSet,
    materials: &MaterialFunctionSet,
    electrode: Electrode,
    node: usize,
) -> Result<f64> {
    let co = lift_bv::<f64>(params, materials, electrode, None, DEFAULT_KINETICS_CAP);
    let curve = match electrode {
        Electrode::Anode => &materials.anode_ocp,
        Electrode::Cathode => &materials.cathode_ocp,
    };
    bv_kernel(j_s, c_s_surf, c_e, phi_e, phi_s, &co, curve, node)
}

// ---------------------------------------------------------------------------
// Element kernel
// ---------------------------------------------------------------------------

struct ElemVals<R> {
    ce: [R; 8],
    pe: [R; 8],
    ps: [R; 8],
    js: [R; 8],
    ce_prev: [f64; 8],
}

#[allow(clippy::too_many_arguments)]
fn element_kernel<R: Real>(
    qp: &[QPoint],
    nn: usize,
    vals: &ElemVals<R>,
    co: &LayerCoeffs<R>,
    materials: &MaterialFunctionSet,
    inv_dt: f64,
    time_term: bool,
    region: Region,
    elem_id: usize,
    dim: usize,
) -> Result<([R; 8], [R; 8], [R; 8])> {
    let zero = R::from_f64(0.0);
    let mut rc = [zero; 8];
    let mut rp = [zero; 8];
    let mut rs = [zero; 8];
    let is_electrode = region.electrode().is_some();
    let in_electrolyte = region.in_electrolyte();

    // eps_e^beta, hoisted out of the quadrature loop.
    let eff_scale = if in_electrolyte {
        co.eps_e.powr(co.beta)
    } else {
        zero
    };
    let one = R::from_f64(1.0);
    let one_m_tp = one - co.t_plus;

    for q in qp {
        if in_electrolyte {
            let mut ce_q = zero;
            let mut ce_prev_q = 0.0;
            let mut grad_ce = [zero; 3];
            let mut pe_grad = [zero; 3];
            for a in 0..nn {
                ce_q = ce_q + R::from_f64(q.psi[a]) * vals.ce[a];
                ce_prev_q += q.psi[a] * vals.ce_prev[a];
                for d in 0..dim {
                    grad_ce[d] = grad_ce[d] + R::from_f64(q.grad[a][d]) * vals.ce[a];
                    pe_grad[d] = pe_grad[d] + R::from_f64(q.grad[a][d]) * vals.pe[a];
                }
            }
            if ce_q.value() <= 0.0 {
                return Err(Error::SingularLog {
                    element: elem_id,
                    value: ce_q.value(),
                });
            }
            let (d_val, d_der) = materials.electrolyte_diffusivity.eval_d(ce_q.value())?;
            let d_eff = eff_scale * R::chain(ce_q, d_val, d_der);
            let (k_val, k_der) = materials.electrolyte_conductivity.eval_d(ce_q.value())?;
            let kappa_eff = eff_scale * R::chain(ce_q, k_val, k_der);
            // coefficient of the ln c_e migration term, evaluated at the
            // quadrature-point concentration
            let migr = kappa_eff * one_m_tp * R::from_f64(co.two_rt_over_f) / ce_q;

            let mut js_q = zero;
            if is_electrode {
                for a in 0..nn {
                    js_q = js_q + R::from_f64(q.psi[a]) * vals.js[a];
                }
            }

            for a in 0..nn {
                let mut dot_ce = zero;
                let mut dot_pe = zero;
                for d in 0..dim {
                    dot_ce = dot_ce + R::from_f64(q.grad[a][d]) * grad_ce[d];
                    dot_pe = dot_pe + R::from_f64(q.grad[a][d]) * pe_grad[d];
                }
                let mut c_acc = d_eff * dot_ce;
                if time_term {
                    c_acc = c_acc
                        + co.eps_e
                            * R::from_f64(q.psi[a] * inv_dt)
                            * (ce_q - R::from_f64(ce_prev_q));
                }
                let mut p_acc = kappa_eff * dot_pe - migr * dot_ce;
                if is_electrode {
                    let src = R::from_f64(co.a_s * q.psi[a]) * js_q;
                    c_acc = c_acc - one_m_tp * src;
                    p_acc = p_acc - R::from_f64(co.faraday) * src;
                }
                rc[a] = rc[a] + R::from_f64(q.w) * c_acc;
                rp[a] = rp[a] + R::from_f64(q.w) * p_acc;
            }
        }
        if region.in_solid() {
            let mut ps_grad = [zero; 3];
            for a in 0..nn {
                for d in 0..dim {
                    ps_grad[d] = ps_grad[d] + R::from_f64(q.grad[a][d]) * vals.ps[a];
                }
            }
            let mut js_q = zero;
            if is_electrode {
                for a in 0..nn {
                    js_q = js_q + R::from_f64(q.psi[a]) * vals.js[a];
                }
            }
            for a in 0..nn {
                let mut dot_ps = zero;
                for d in 0..dim {
                    dot_ps = dot_ps + R::from_f64(q.grad[a][d]) * ps_grad[d];
                }
                let mut s_acc = co.sigma_eff * dot_ps;
                if is_electrode {
                    s_acc = s_acc + R::from_f64(co.faraday * co.a_s * q.psi[a]) * js_q;
                }
                rs[a] = rs[a] + R::from_f64(q.w) * s_acc;
            }
        }
    }
    Ok((rc, rp, rs))
}

// ---------------------------------------------------------------------------
// Assembly drivers
// ---------------------------------------------------------------------------

/// Surface-concentration closure seen by the Butler-Volmer rows:
/// `c_surf(slot) = base[slot] + slope[slot] * j_s(slot)`.
///
/// The forward fast path supplies the per-step precomputed part and the
/// constant flux sensitivity; a zero slope treats the surface value as fixed.
#[derive(Debug, Clone, Copy)]
pub struct SurfaceClosure<'a> {
    pub base: &'a [f64],
    pub slope: &'a [f64],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AssemblyMode {
    /// One backward-Euler step: time terms active.
    Step,
    /// Algebraic initialization: no time terms, c_e rows pinned to c_e^0.
    Initialization,
}

/// Inputs shared by residual, Jacobian, and parameter-tangent assembly.
pub struct AssemblyInputs<'a> {
    pub model: &'a Model,
    /// Current macroscopic iterate.
    pub u: &'a [f64],
    /// Previous converged macroscopic state (unused terms in `Initialization`).
    pub u_prev: &'a [f64],
    pub surface: SurfaceClosure<'a>,
    pub dt: f64,
    /// Signed Neumann datum on the cathode tab (assembly-level sign
    /// convention; the drive protocol maps discharge to a negative datum).
    pub i_app: f64,
    pub mode: AssemblyMode,
    pub kinetics_cap: f64,
}

impl<'a> AssemblyInputs<'a> {
    fn check(&self) -> Result<()> {
        let n = self.model.layout.n_macro();
        if self.u.len() != n || self.u_prev.len() != n {
            return Err(Error::Structural(format!(
                "state length {} / {} does not match layout {}",
                self.u.len(),
                self.u_prev.len(),
                n
            )));
        }
        let slots = self.model.layout.n_slots();
        if self.surface.base.len() != slots || self.surface.slope.len() != slots {
            return Err(Error::Structural(format!(
                "surface closure length {} does not match {} electrode nodes",
                self.surface.base.len(),
                slots
            )));
        }
        if self.mode == AssemblyMode::Step && self.dt <= 0.0 {
            return Err(Error::InvalidParameter {
                name: "dt",
                value: self.dt,
                reason: "time step must be positive",
            });
        }
        Ok(())
    }
}

const FIELDS: [Field; 4] = [
    Field::ElectrolyteConcentration,
    Field::ElectrolytePotential,
    Field::SolidPotential,
    Field::PoreWallFlux,
];

fn gather<R: Real>(
    inp: &AssemblyInputs,
    elem: &MacroElement,
    seed_dofs: bool,
) -> ElemVals<R> {
    let layout = &inp.model.layout;
    let zero = R::from_f64(0.0);
    let mut vals = ElemVals {
        ce: [zero; 8],
        pe: [zero; 8],
        ps: [zero; 8],
        js: [zero; 8],
        ce_prev: [0.0; 8],
    };
    for (a, &node) in elem.nodes.iter().enumerate() {
        for (fi, f) in FIELDS.iter().enumerate() {
            if let Some(d) = layout.dof(*f, node) {
                let v = inp.u[d];
                let r = if seed_dofs {
                    R::lane_variable(v, a * 4 + fi)
                } else {
                    R::from_f64(v)
                };
                match f {
                    Field::ElectrolyteConcentration => {
                        vals.ce[a] = r;
                        vals.ce_prev[a] = inp.u_prev[d];
                    }
                    Field::ElectrolytePotential => vals.pe[a] = r,
                    Field::SolidPotential => vals.ps[a] = r,
                    Field::PoreWallFlux => vals.js[a] = r,
                }
            }
        }
    }
    vals
}

/// Evaluates the macroscopic residual vector.
pub fn assemble_residual(inp: &AssemblyInputs) -> Result<Vec<f64>> {
    inp.check()?;
    let layout = &inp.model.layout;
    let mut r = vec![0.0; layout.n_macro()];

    for (eid, elem) in inp.model.mesh.elements.iter().enumerate() {
        let qp = quad_points(inp.model.mesh.dim, &inp.model.mesh.coords, elem);
        let vals = gather::<f64>(inp, elem, false);
        let co = lift_layer::<f64>(&inp.model.params, elem.region, None);
        let (rc, rp, rs) = element_kernel(
            &qp,
            elem.nodes.len(),
            &vals,
            &co,
            &inp.model.materials,
            1.0 / inp.dt,
            inp.mode == AssemblyMode::Step,
            elem.region,
            eid,
            inp.model.mesh.dim,
        )?;
        for (a, &node) in elem.nodes.iter().enumerate() {
            if let Some(d) = layout.dof(Field::ElectrolyteConcentration, node) {
                r[d] += rc[a];
            }
            if let Some(d) = layout.dof(Field::ElectrolytePotential, node) {
                r[d] += rp[a];
            }
            if let Some(d) = layout.dof(Field::SolidPotential, node) {
                r[d] += rs[a];
            }
        }
    }

    // Butler-Volmer point rows.
    for slot in 0..layout.n_slots() {
        let node = layout.slot_node(slot);
        let e = layout.slot_electrode(slot);
        let co = lift_bv::<f64>(
            &inp.model.params,
            &inp.model.materials,
            e,
            None,
            inp.kinetics_cap,
        );
        let curve = match e {
            Electrode::Anode => &inp.model.materials.anode_ocp,
            Electrode::Cathode => &inp.model.materials.cathode_ocp,
        };
        let jd = layout.dof(Field::PoreWallFlux, node).unwrap();
        let j = inp.u[jd];
        let c_surf = inp.surface.base[slot] + inp.surface.slope[slot] * j;
        let ce = inp.u[layout.dof(Field::ElectrolyteConcentration, node).unwrap()];
        let pe = inp.u[layout.dof(Field::ElectrolytePotential, node).unwrap()];
        let ps = inp.u[layout.dof(Field::SolidPotential, node).unwrap()];
        r[jd] = bv_kernel(j, c_surf, ce, pe, ps, &co, curve, node)?;
    }

    // Applied-current load on the cathode tab.
    for f in &inp.model.mesh.cathode_tab {
        let w = inp.model.mesh.facet_shape_integrals(f);
        for (&node, wk) in f.nodes.iter().zip(w) {
            let d = layout.dof(Field::SolidPotential, node).unwrap();
            r[d] -= wk * inp.i_app;
        }
    }

    // Dirichlet grounding by row replacement.
    for &g in &layout.ground_dofs {
        r[g] = inp.u[g];
    }

    // Pinned concentration rows in initialization mode.
    if inp.mode == AssemblyMode::Initialization {
        let c0 = inp.model.params.cell.initial_electrolyte_concentration;
        for node in 0..layout.n_nodes {
            if let Some(d) = layout.dof(Field::ElectrolyteConcentration, node) {
                r[d] = inp.u[d] - c0;
            }
        }
    }

    Ok(r)
}

/// Assembles the macroscopic Jacobian (and residual) at the current iterate.
///
/// The surface closure's slope makes the pore-wall-flux rows see
/// `c_surf(j_s)`, which is exactly the sequential scheme's condensation of
/// the microscopic unknowns into the macroscopic system.
pub fn assemble_jacobian(inp: &AssemblyInputs) -> Result<(Vec<f64>, SparseMatrix)> {
    inp.check()?;
    let residual = assemble_residual(inp)?;
    let mut jac = SparseMatrix::zeros(inp.model.pattern.clone());
    match inp.model.mesh.dim {
        1 => fill_jacobian::<8>(inp, &mut jac)?,
        2 => fill_jacobian::<16>(inp, &mut jac)?,
        _ => fill_jacobian::<32>(inp, &mut jac)?,
    }
    Ok((residual, jac))
}

fn fill_jacobian<const NL: usize>(inp: &AssemblyInputs, jac: &mut SparseMatrix) -> Result<()> {
    let layout = &inp.model.layout;
    for (eid, elem) in inp.model.mesh.elements.iter().enumerate() {
        let qp = quad_points(inp.model.mesh.dim, &inp.model.mesh.coords, elem);
        let vals = gather::<Dual<NL>>(inp, elem, true);
        let co = lift_layer::<Dual<NL>>(&inp.model.params, elem.region, None);
        let (rc, rp, rs) = element_kernel(
            &qp,
            elem.nodes.len(),
            &vals,
            &co,
            &inp.model.materials,
            1.0 / inp.dt,
            inp.mode == AssemblyMode::Step,
            elem.region,
            eid,
            inp.model.mesh.dim,
        )?;
        let init = inp.mode == AssemblyMode::Initialization;
        for (a, &node) in elem.nodes.iter().enumerate() {
            let rows = [
                (layout.dof(Field::ElectrolyteConcentration, node), &rc[a]),
                (layout.dof(Field::ElectrolytePotential, node), &rp[a]),
                (layout.dof(Field::SolidPotential, node), &rs[a]),
            ];
            for (dof, val) in rows {
                let Some(row) = dof else { continue };
                if layout.is_ground(row) {
                    continue;
                }
                if init && row < layout.n_ce {
                    continue; // pinned rows written below
                }
                for (b, &col_node) in elem.nodes.iter().enumerate() {
                    for (fi, f) in FIELDS.iter().enumerate() {
                        if let Some(col) = layout.dof(*f, col_node) {
                            let der = val.der[b * 4 + fi];
                            if der != 0.0 {
                                jac.add(row, col, der);
                            }
                        }
                    }
                }
            }
        }
    }

    // Butler-Volmer point rows: duals over (c_e, phi_e, phi_s, j_s).
    for slot in 0..layout.n_slots() {
        let node = layout.slot_node(slot);
        let e = layout.slot_electrode(slot);
        let co = lift_bv::<Dual<4>>(
            &inp.model.params,
            &inp.model.materials,
            e,
            None,
            inp.kinetics_cap,
        );
        let curve = match e {
            Electrode::Anode => &inp.model.materials.anode_ocp,
            Electrode::Cathode => &inp.model.materials.cathode_ocp,
        };
        let cd = layout.dof(Field::ElectrolyteConcentration, node).unwrap();
        let pd = layout.dof(Field::ElectrolytePotential, node).unwrap();
        let sd = layout.dof(Field::SolidPotential, node).unwrap();
        let jd = layout.dof(Field::PoreWallFlux, node).unwrap();
        let ce = Dual::<4>::variable(inp.u[cd], 0);
        let pe = Dual::<4>::variable(inp.u[pd], 1);
        let ps = Dual::<4>::variable(inp.u[sd], 2);
        let j = Dual::<4>::variable(inp.u[jd], 3);
        let c_surf = Dual::constant(inp.surface.base[slot])
            + Dual::constant(inp.surface.slope[slot]) * j;
        let res = bv_kernel(j, c_surf, ce, pe, ps, &co, curve, node)?;
        for (col, lane) in [(cd, 0), (pd, 1), (sd, 2), (jd, 3)] {
            if res.der[lane] != 0.0 {
                jac.add(jd, col, res.der[lane]);
            }
        }
    }

    for &g in &layout.ground_dofs {
        jac.replace_row_with_diagonal(g, 1.0);
    }
    if inp.mode == AssemblyMode::Initialization {
        for node in 0..layout.n_nodes {
            if let Some(d) = layout.dof(Field::ElectrolyteConcentration, node) {
                jac.replace_row_with_diagonal(d, 1.0);
            }
        }
    }
    Ok(())
}

/// Contracts an adjoint vector with the residual's parameter derivative:
/// `lambda^T dR/d theta` for one identifiable parameter at the given state.
///
/// Initial-concentration parameters enter step residuals only through the
/// micro states (value 0 here); in initialization mode they enter through
/// the Butler-Volmer surface concentration.
pub fn parameter_tangent(inp: &AssemblyInputs, lambda: &[f64], param: ParamId) -> Result<f64> {
    inp.check()?;
    let layout = &inp.model.layout;
    if lambda.len() != layout.n_macro() {
        return Err(Error::Structural(format!(
            "adjoint length {} does not match layout {}",
            lambda.len(),
            layout.n_macro()
        )));
    }

    // Parameters with no macroscopic residual dependence.
    match param {
        ParamId::SolidDiffusivity(_) => return Ok(0.0),
        ParamId::InitialConcentration(_) if inp.mode == AssemblyMode::Step => return Ok(0.0),
        _ => {}
    }

    let mut acc = 0.0;
    let init = inp.mode == AssemblyMode::Initialization;

    let element_touched = |region: Region| -> bool {
        match param {
            ParamId::Bruggeman(l) => region.layer() == Some(l),
            ParamId::TransferenceNumber => region.in_electrolyte(),
            ParamId::ReactionRate(_) | ParamId::InitialConcentration(_) => false,
            ParamId::SolidDiffusivity(_) => false,
        }
    };

    for (eid, elem) in inp.model.mesh.elements.iter().enumerate() {
        if !element_touched(elem.region) {
            continue;
        }
        let qp = quad_points(inp.model.mesh.dim, &inp.model.mesh.coords, elem);
        let vals = gather::<Dual<1>>(inp, elem, false);
        let co = lift_layer::<Dual<1>>(&inp.model.params, elem.region, Some(param));
        let (rc, rp, rs) = element_kernel(
            &qp,
            elem.nodes.len(),
            &vals,
            &co,
            &inp.model.materials,
            1.0 / inp.dt,
            inp.mode == AssemblyMode::Step,
            elem.region,
            eid,
            inp.model.mesh.dim,
        )?;
        for (a, &node) in elem.nodes.iter().enumerate() {
            let rows = [
                (layout.dof(Field::ElectrolyteConcentration, node), &rc[a]),
                (layout.dof(Field::ElectrolytePotential, node), &rp[a]),
                (layout.dof(Field::SolidPotential, node), &rs[a]),
            ];
            for (dof, val) in rows {
                let Some(row) = dof else { continue };
                if layout.is_ground(row) || (init && row < layout.n_ce) {
                    continue;
                }
                acc += lambda[row] * val.der[0];
            }
        }
    }

    // Butler-Volmer rows: reaction-rate seeds, and in initialization mode the
    // surface concentration equals the seeded initial concentration.
    let bv_touched = |e: Electrode| -> bool {
        match param {
            ParamId::ReactionRate(pe) => pe == e,
            ParamId::InitialConcentration(pe) => init && pe == e,
            _ => false,
        }
    };
    for slot in 0..layout.n_slots() {
        let node = layout.slot_node(slot);
        let e = layout.slot_electrode(slot);
        if !bv_touched(e) {
            continue;
        }
        let co = lift_bv::<Dual<1>>(
            &inp.model.params,
            &inp.model.materials,
            e,
            Some(param),
            inp.kinetics_cap,
        );
        let curve = match e {
            Electrode::Anode => &inp.model.materials.anode_ocp,
            Electrode::Cathode => &inp.model.materials.cathode_ocp,
        };
        let jd = layout.dof(Field::PoreWallFlux, node).unwrap();
        let j = Dual::<1>::constant(inp.u[jd]);
        let c_surf = if param == ParamId::InitialConcentration(e) && init {
            Dual::variable(inp.surface.base[slot], 0)
        } else {
            Dual::constant(inp.surface.base[slot] + inp.surface.slope[slot] * j.val)
        };
        let ce =
            Dual::<1>::constant(inp.u[layout.dof(Field::ElectrolyteConcentration, node).unwrap()]);
        let pe = Dual::<1>::constant(inp.u[layout.dof(Field::ElectrolytePotential, node).unwrap()]);
        let ps = Dual::<1>::constant(inp.u[layout.dof(Field::SolidPotential, node).unwrap()]);
        let res = bv_kernel(j, c_surf, ce, pe, ps, &co, curve, node)?;
        acc += lambda[jd] * res.der[0];
    }

    Ok(acc)
}

/// Derivative of each Butler-Volmer row with respect to its surface
/// concentration, evaluated at `c_surf = base + slope * j_s`. One value per
/// electrode node (micro slot).
pub fn bv_surface_derivatives(inp: &AssemblyInputs) -> Result<Vec<f64>> {
    inp.check()?;
    let layout = &inp.model.layout;
    let mut out = vec![0.0; layout.n_slots()];
    for slot in 0..layout.n_slots() {
        let node = layout.slot_node(slot);
        let e = layout.slot_electrode(slot);
        let co = lift_bv::<Dual<1>>(
            &inp.model.params,
            &inp.model.materials,
            e,
            None,
            inp.kinetics_cap,
        );
        let curve = match e {
            Electrode::Anode => &inp.model.materials.anode_ocp,
            Electrode::Cathode => &inp.model.materials.cathode_ocp,
        };
        let jd = layout.dof(Field::PoreWallFlux, node).unwrap();
        let j = inp.u[jd];
        let c_surf = Dual::<1>::variable(inp.surface.base[slot] + inp.surface.slope[slot] * j, 0);
        let ce =
            Dual::<1>::constant(inp.u[layout.dof(Field::ElectrolyteConcentration, node).unwrap()]);
        let pe = Dual::<1>::constant(inp.u[layout.dof(Field::ElectrolytePotential, node).unwrap()]);
        let ps = Dual::<1>::constant(inp.u[layout.dof(Field::SolidPotential, node).unwrap()]);
        let res = bv_kernel(Dual::constant(j), c_surf, ce, pe, ps, &co, curve, node)?;
        out[slot] = res.der[0];
    }
    Ok(out)
}

/// The eps_e-weighted concentration mass matrix; `-M/dt` is the only
/// dependence of a step residual on the previous macroscopic state.
pub fn assemble_ce_mass(model: &Model) -> SparseMatrix {
    let layout = &model.layout;
    let mut m = SparseMatrix::zeros(model.pattern.clone());
    for elem in &model.mesh.elements {
        if !elem.region.in_electrolyte() {
            continue;
        }
        let eps = match elem.region.layer().unwrap() {
            crate::params::Layer::Anode => model.params.anode.electrolyte_volume_fraction,
            crate::params::Layer::Separator => model.params.separator.electrolyte_volume_fraction,
            crate::params::Layer::Cathode => model.params.cathode.electrolyte_volume_fraction,
        };
        let qp = quad_points(model.mesh.dim, &model.mesh.coords, elem);
        let nn = elem.nodes.len();
        for q in &qp {
            for a in 0..nn {
                let Some(row) = layout.dof(Field::ElectrolyteConcentration, elem.nodes[a]) else {
                    continue;
                };
                for b in 0..nn {
                    let col = layout
                        .dof(Field::ElectrolyteConcentration, elem.nodes[b])
                        .unwrap();
                    m.add(row, col, q.w * eps * q.psi[a] * q.psi[b]);
                }
            }
        }
    }
    m
}

/// Integral of `eps_e c_e` over the electrolyte domain (conservation checks).
pub fn electrolyte_lithium_content(model: &Model, u: &StateVector) -> f64 {
    let layout = &model.layout;
    let mut total = 0.0;
    for elem in &model.mesh.elements {
        if !elem.region.in_electrolyte() {
            continue;
        }
        let eps = match elem.region.layer().unwrap() {
            crate::params::Layer::Anode => model.params.anode.electrolyte_volume_fraction,
            crate::params::Layer::Separator => model.params.separator.electrolyte_volume_fraction,
            crate::params::Layer::Cathode => model.params.cathode.electrolyte_volume_fraction,
        };
        let qp = quad_points(model.mesh.dim, &model.mesh.coords, elem);
        for q in &qp {
            let mut ce_q = 0.0;
            for (a, &node) in elem.nodes.iter().enumerate() {
                let d = layout.dof(Field::ElectrolyteConcentration, node).unwrap();
                ce_q += q.psi[a] * u.macro_dofs[d];
            }
            total += q.w * eps * ce_q;
        }
    }
    total
}

/// Nodal volume weights `integral(psi_k dV)` over each electrode subdomain,
/// indexed by micro slot. Used for solid-lithium accounting.
pub fn electrode_nodal_volumes(model: &Model) -> Vec<f64> {
    let layout = &model.layout;
    let mut w = vec![0.0; layout.n_slots()];
    for elem in &model.mesh.elements {
        if elem.region.electrode().is_none() {
            continue;
        }
        let qp = quad_points(model.mesh.dim, &model.mesh.coords, elem);
        for q in &qp {
            for (a, &node) in elem.nodes.iter().enumerate() {
                let slot = layout.slot(node).unwrap();
                w[slot] += q.w * q.psi[a];
            }
        }
    }
    w
}

/// Full-system residual [micro | macro] treating the stored micro states and
/// macro unknowns as one coupled unknown vector (monolithic view).
pub fn full_residual(
    model: &Model,
    ops: [&crate::microsolver::MicroOperator; 2],
    u: &StateVector,
    u_prev: &StateVector,
    dt: f64,
    i_app: f64,
    kinetics_cap: f64,
) -> Result<Vec<f64>> {
    let layout = &model.layout;
    let mut out = Vec::with_capacity(layout.n_total());
    let mut base = vec![0.0; layout.n_slots()];
    for slot in 0..layout.n_slots() {
        let e = layout.slot_electrode(slot);
        let node = layout.slot_node(slot);
        let jd = layout.dof(Field::PoreWallFlux, node).unwrap();
        let r = ops[e.index()].residual(
            u.micro_slice(layout, slot),
            u_prev.micro_slice(layout, slot),
            u.macro_dofs[jd],
        );
        out.extend_from_slice(&r);
        base[slot] = u.surface_concentration(layout, slot);
    }
    let slope = vec![0.0; layout.n_slots()];
    let inp = AssemblyInputs {
        model,
        u: &u.macro_dofs,
        u_prev: &u_prev.macro_dofs,
        surface: SurfaceClosure {
            base: &base,
            slope: &slope,
        },
        dt,
        i_app,
        mode: AssemblyMode::Step,
        kinetics_cap,
    };
    out.extend(assemble_residual(&inp)?);
    Ok(out)
}
