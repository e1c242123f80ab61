//! Unknown layout and the block state vector.
//!
//! Macroscopic unknowns are numbered in field blocks [c_e | phi_e | phi_s |
//! j_s], each block ordered by node id. Microscopic concentrations are stored
//! per electrode node ("slot") with a fixed radial stride. The canonical flat
//! ordering of a full state is [micro | macro].

use crate::error::{Error, Result};
use crate::mesh::MacroMesh;
use crate::params::Electrode;

/// Macroscopic unknown kinds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Field {
    ElectrolyteConcentration,
    ElectrolytePotential,
    SolidPotential,
    PoreWallFlux,
}

/// Index maps between (field, node) pairs and flat vectors.
#[derive(Debug, Clone)]
pub struct DofLayout {
    pub n_nodes: usize,
    ce: Vec<Option<usize>>,
    pe: Vec<Option<usize>>,
    ps: Vec<Option<usize>>,
    js: Vec<Option<usize>>,
    pub n_ce: usize,
    pub n_pe: usize,
    pub n_ps: usize,
    pub n_js: usize,
    /// Micro slot of each node (electrode nodes only).
    micro_slot: Vec<Option<usize>>,
    slot_node: Vec<usize>,
    slot_electrode: Vec<Electrode>,
    /// Radial nodes per particle; identical for both electrodes.
    pub m_r: usize,
    /// phi_s dofs pinned to zero (anode tab grounding).
    pub ground_dofs: Vec<usize>,
}

impl DofLayout {
    pub fn new(mesh: &MacroMesh, m_r: usize) -> Self {
        let n = mesh.n_nodes();
        let mut ce = vec![None; n];
        let mut pe = vec![None; n];
        let mut ps = vec![None; n];
        let mut js = vec![None; n];
        let mut micro_slot = vec![None; n];
        let mut slot_node = Vec::new();
        let mut slot_electrode = Vec::new();

        let mut next = 0;
        for node in 0..n {
            if mesh.membership(node).in_electrolyte {
                ce[node] = Some(next);
                next += 1;
            }
        }
        let n_ce = next;
        for node in 0..n {
            if mesh.membership(node).in_electrolyte {
                pe[node] = Some(next);
                next += 1;
            }
        }
        let n_pe = next - n_ce;
        for node in 0..n {
            if mesh.membership(node).in_solid {
                ps[node] = Some(next);
                next += 1;
            }
        }
        let n_ps = next - n_ce - n_pe;
        for node in 0..n {
            if let Some(e) = mesh.membership(node).electrode {
                js[node] = Some(next);
                next += 1;
                micro_slot[node] = Some(slot_node.len());
                slot_node.push(node);
                slot_electrode.push(e);
            }
        }
        let n_js = next - n_ce - n_pe - n_ps;

        let mut ground_dofs = Vec::new();
        for f in &mesh.anode_tab {
            for &node in &f.nodes {
                if let Some(d) = ps[node] {
                    if !ground_dofs.contains(&d) {
                        ground_dofs.push(d);
                    }
                }
            }
        }
        ground_dofs.sort_unstable();

        Self {
            n_nodes: n,
            ce,
            pe,
            ps,
            js,
            n_ce,
            n_pe,
            n_ps,
            n_js,
            micro_slot,
            slot_node,
            slot_electrode,
            m_r,
            ground_dofs,
        }
    }

    /// Number of macroscopic unknowns.
    pub fn n_macro(&self) -> usize {
        self.n_ce + self.n_pe + self.n_ps + self.n_js
    }

    pub fn n_slots(&self) -> usize {
        self.slot_node.len()
    }

    /// Number of microscopic unknowns.
    pub fn n_micro(&self) -> usize {
        self.n_slots() * self.m_r
    }

    /// Total unknown count `M` (micro + macro).
    pub fn n_total(&self) -> usize {
        self.n_micro() + self.n_macro()
    }

    pub fn dof(&self, field: Field, node: usize) -> Option<usize> {
        match field {
            Field::ElectrolyteConcentration => self.ce[node],
            Field::ElectrolytePotential => self.pe[node],
            Field::SolidPotential => self.ps[node],
            Field::PoreWallFlux => self.js[node],
        }
    }

    pub fn slot(&self, node: usize) -> Option<usize> {
        self.micro_slot[node]
    }

    pub fn slot_node(&self, slot: usize) -> usize {
        self.slot_node[slot]
    }

    pub fn slot_electrode(&self, slot: usize) -> Electrode {
        self.slot_electrode[slot]
    }

    /// Field and node of a macroscopic dof (inverse index map).
    pub fn dof_info(&self, dof: usize) -> (Field, usize) {
        let field = if dof < self.n_ce {
            Field::ElectrolyteConcentration
        } else if dof < self.n_ce + self.n_pe {
            Field::ElectrolytePotential
        } else if dof < self.n_ce + self.n_pe + self.n_ps {
            Field::SolidPotential
        } else {
            Field::PoreWallFlux
        };
        let list = match field {
            Field::ElectrolyteConcentration => &self.ce,
            Field::ElectrolytePotential => &self.pe,
            Field::SolidPotential => &self.ps,
            Field::PoreWallFlux => &self.js,
        };
        for node in 0..self.n_nodes {
            if list[node] == Some(dof) {
                return (field, node);
            }
        }
        unreachable!("dof {dof} out of range")
    }

    pub fn is_ground(&self, dof: usize) -> bool {
        self.ground_dofs.binary_search(&dof).is_ok()
    }
}

/// Block vector U = [U_r, U_c, U_p, U_s, U_j] at one time step.
#[derive(Debug, Clone, PartialEq)]
pub struct StateVector {
    /// Microscopic concentrations, slot-major with stride `m_r`.
    pub micro: Vec<f64>,
    /// Macroscopic unknowns in block order [c_e | phi_e | phi_s | j_s].
    pub macro_dofs: Vec<f64>,
}

impl StateVector {
    pub fn zeros(layout: &DofLayout) -> Self {
        Self {
            micro: vec![0.0; layout.n_micro()],
            macro_dofs: vec![0.0; layout.n_macro()],
        }
    }

    pub fn micro_slice(&self, layout: &DofLayout, slot: usize) -> &[f64] {
        &self.micro[slot * layout.m_r..(slot + 1) * layout.m_r]
    }

    pub fn micro_slice_mut(&mut self, layout: &DofLayout, slot: usize) -> &mut [f64] {
        &mut self.micro[slot * layout.m_r..(slot + 1) * layout.m_r]
    }

    pub fn get(&self, layout: &DofLayout, field: Field, node: usize) -> Option<f64> {
        layout.dof(field, node).map(|d| self.macro_dofs[d])
    }

    pub fn set(&mut self, layout: &DofLayout, field: Field, node: usize, v: f64) {
        if let Some(d) = layout.dof(field, node) {
            self.macro_dofs[d] = v;
        }
    }

    /// Surface concentration stored for an electrode node's particle.
    pub fn surface_concentration(&self, layout: &DofLayout, slot: usize) -> f64 {
        self.micro[slot * layout.m_r + layout.m_r - 1]
    }

    /// Canonical flat view [micro | macro] of length `layout.n_total()`.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.micro.len() + self.macro_dofs.len());
        v.extend_from_slice(&self.micro);
        v.extend_from_slice(&self.macro_dofs);
        v
    }

    pub fn from_flat(layout: &DofLayout, flat: &[f64]) -> Result<Self> {
        if flat.len() != layout.n_total() {
            return Err(Error::Structural(format!(
                "flat state length {} does not match layout total {}",
                flat.len(),
                layout.n_total()
            )));
        }
        Ok(Self {
            micro: flat[..layout.n_micro()].to_vec(),
            macro_dofs: flat[layout.n_micro()..].to_vec(),
        })
    }
}
