//! Shared immutable context for one simulation setup: parameters, material
//! functions, meshes, unknown layout, Jacobian sparsity, and tab weights.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::linalg::SparsityPattern;
use crate::mesh::{GeometrySpec, MacroMesh, MicroMesh};
use crate::microsolver::MicroOperator;
use crate::params::{Electrode, MaterialFunctionSet, ParameterSet};
use crate::state::{DofLayout, Field, StateVector};

/// Everything fixed for the lifetime of one model instance. Cheap to clone
/// (meshes and index maps are shared); identification clones it with updated
/// parameters while reusing the discretization.
#[derive(Clone)]
pub struct Model {
    pub params: ParameterSet,
    pub materials: MaterialFunctionSet,
    pub mesh: Arc<MacroMesh>,
    pub layout: Arc<DofLayout>,
    pub micro_meshes: [MicroMesh; 2],
    pub pattern: Arc<SparsityPattern>,
    /// Normalized cathode-tab averaging weights (phi_s dof, weight).
    voltage_weights: Vec<(usize, f64)>,
}

impl Model {
    pub fn new(
        params: ParameterSet,
        materials: MaterialFunctionSet,
        geom: &GeometrySpec,
        micro_elements: usize,
    ) -> Result<Self> {
        params.validate()?;
        let mesh = Arc::new(MacroMesh::build(&params, geom)?);
        let micro_anode = MicroMesh::uniform(params.anode.particle_radius, micro_elements)?;
        let micro_cathode = MicroMesh::uniform(params.cathode.particle_radius, micro_elements)?;
        let layout = Arc::new(DofLayout::new(&mesh, micro_anode.n_nodes()));
        let pattern = Arc::new(build_pattern(&mesh, &layout));
        let voltage_weights = tab_average_weights(&mesh, &layout)?;
        Ok(Self {
            params,
            materials,
            mesh,
            layout,
            micro_meshes: [micro_anode, micro_cathode],
            pattern,
            voltage_weights,
        })
    }

    /// Same discretization, different parameter values. Particle radii are
    /// geometric and must not change between parameter sets.
    pub fn with_params(&self, params: ParameterSet) -> Result<Self> {
        params.validate()?;
        for e in Electrode::BOTH {
            if params.electrode(e).particle_radius
                != self.params.electrode(e).particle_radius
            {
                return Err(Error::Structural(
                    "particle radius is a mesh quantity and cannot be re-parameterized".into(),
                ));
            }
        }
        if params.anode.thickness != self.params.anode.thickness
            || params.separator.thickness != self.params.separator.thickness
            || params.cathode.thickness != self.params.cathode.thickness
        {
            return Err(Error::Structural(
                "layer thicknesses are mesh quantities and cannot be re-parameterized".into(),
            ));
        }
        let mut m = self.clone();
        m.params = params;
        Ok(m)
    }

    pub fn micro_mesh(&self, e: Electrode) -> &MicroMesh {
        &self.micro_meshes[e.index()]
    }

    pub fn build_micro_operator(&self, e: Electrode, dt: f64) -> Result<MicroOperator> {
        MicroOperator::build(
            self.micro_mesh(e),
            self.params.electrode(e).solid_diffusivity,
            dt,
        )
    }

    /// Terminal voltage: area-averaged phi_s over the cathode tab minus the
    /// grounded anode tab (zero by construction).
    pub fn terminal_voltage(&self, u: &StateVector) -> f64 {
        self.voltage_weights
            .iter()
            .map(|&(dof, w)| w * u.macro_dofs[dof])
            .sum()
    }

    /// Sparse gradient of the terminal voltage with respect to macro dofs.
    pub fn voltage_gradient(&self) -> &[(usize, f64)] {
        &self.voltage_weights
    }
}

fn build_pattern(mesh: &MacroMesh, layout: &DofLayout) -> SparsityPattern {
    let fields = [
        Field::ElectrolyteConcentration,
        Field::ElectrolytePotential,
        Field::SolidPotential,
        Field::PoreWallFlux,
    ];
    let mut pairs = Vec::new();
    for e in &mesh.elements {
        let mut dofs = Vec::with_capacity(e.nodes.len() * 4);
        for &n in &e.nodes {
            for f in fields {
                if let Some(d) = layout.dof(f, n) {
                    dofs.push(d);
                }
            }
        }
        for &a in &dofs {
            for &b in &dofs {
                pairs.push((a, b));
            }
        }
    }
    SparsityPattern::from_pairs(layout.n_macro(), &pairs)
}

fn tab_average_weights(mesh: &MacroMesh, layout: &DofLayout) -> Result<Vec<(usize, f64)>> {
    let mut acc: std::collections::BTreeMap<usize, f64> = Default::default();
    let mut total = 0.0;
    for f in &mesh.cathode_tab {
        let w = mesh.facet_shape_integrals(f);
        for (&node, wk) in f.nodes.iter().zip(w) {
            let dof = layout.dof(Field::SolidPotential, node).ok_or_else(|| {
                Error::Structural("cathode tab node without phi_s unknown".into())
            })?;
            *acc.entry(dof).or_insert(0.0) += wk;
            total += wk;
        }
    }
    if total <= 0.0 {
        return Err(Error::Structural("cathode tab has zero measure".into()));
    }
    Ok(acc.into_iter().map(|(d, w)| (d, w / total)).collect())
}
