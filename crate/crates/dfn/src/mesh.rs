//! Structured macroscopic meshes and the radial particle mesh.
//!
//! Layers are stacked along x in the order anode collector | anode |
//! separator | cathode | cathode collector (collector layers only in 3D).
//! 2D meshes extend in y, 3D meshes in y and z. All meshes are tensor
//! products of axis-aligned intervals: 2-node intervals, bilinear quads,
//! or eight-node hexahedra.

use crate::error::{Error, Result};
use crate::params::{Electrode, Layer, ParameterSet};

/// Subdomain tag of a macroscopic element.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Region {
    AnodeCollector,
    Anode,
    Separator,
    Cathode,
    CathodeCollector,
}

impl Region {
    /// The electrolyte-bearing layer, if any.
    pub fn layer(self) -> Option<Layer> {
        match self {
            Region::Anode => Some(Layer::Anode),
            Region::Separator => Some(Layer::Separator),
            Region::Cathode => Some(Layer::Cathode),
            _ => None,
        }
    }

    pub fn electrode(self) -> Option<Electrode> {
        match self {
            Region::Anode => Some(Electrode::Anode),
            Region::Cathode => Some(Electrode::Cathode),
            _ => None,
        }
    }

    /// Does the region carry electrolyte unknowns (c_e, phi_e)?
    pub fn in_electrolyte(self) -> bool {
        self.layer().is_some()
    }

    /// Does the region carry the solid potential phi_s?
    pub fn in_solid(self) -> bool {
        !matches!(self, Region::Separator)
    }
}

/// One element: connectivity plus subdomain tag.
#[derive(Debug, Clone)]
pub struct MacroElement {
    pub nodes: Vec<usize>,
    pub region: Region,
}

/// One boundary facet (a point in 1D, an edge in 2D, a quad face in 3D).
#[derive(Debug, Clone)]
pub struct Facet {
    pub nodes: Vec<usize>,
}

/// Mesh-construction request.
#[derive(Debug, Clone)]
pub struct GeometrySpec {
    pub dimension: usize,
    pub anode_elements: usize,
    pub separator_elements: usize,
    pub cathode_elements: usize,
    /// Collector element counts; used only when `dimension == 3`.
    pub anode_collector_elements: usize,
    pub cathode_collector_elements: usize,
    /// In-plane extent along y and its element count (2D and 3D).
    pub width: f64,
    pub width_elements: usize,
    /// In-plane extent along z and its element count (3D).
    pub depth: f64,
    pub depth_elements: usize,
    /// Tab extent along z on the collector top edge (3D); `None` = full edge.
    pub tab_extent: Option<(f64, f64)>,
}

impl GeometrySpec {
    pub fn one_dimensional(anode: usize, separator: usize, cathode: usize) -> Self {
        Self {
            dimension: 1,
            anode_elements: anode,
            separator_elements: separator,
            cathode_elements: cathode,
            anode_collector_elements: 0,
            cathode_collector_elements: 0,
            width: 0.0,
            width_elements: 0,
            depth: 0.0,
            depth_elements: 0,
            tab_extent: None,
        }
    }
}

/// Macroscopic cell mesh with subdomain and tab tags.
#[derive(Debug, Clone)]
pub struct MacroMesh {
    pub dim: usize,
    pub coords: Vec<[f64; 3]>,
    pub elements: Vec<MacroElement>,
    pub anode_tab: Vec<Facet>,
    pub cathode_tab: Vec<Facet>,
    /// Region of each node; interface nodes resolve to the more specific
    /// region in the order electrode > separator > collector, so a node on an
    /// electrode/separator interface belongs to the electrode.
    node_regions: Vec<NodeMembership>,
}

/// Which subdomains a node touches.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct NodeMembership {
    pub in_electrolyte: bool,
    pub in_solid: bool,
    /// Electrode owning the node's pore-wall flux unknown, if any. An
    /// electrode/separator interface node belongs to the electrode.
    pub electrode: Option<Electrode>,
    /// Half-cell side of the node's solid potential (collectors included).
    pub solid_side: Option<Electrode>,
}

impl MacroMesh {
    /// Builds a structured mesh realizing the requested layer resolution.
    pub fn build(params: &ParameterSet, geom: &GeometrySpec) -> Result<Self> {
        if geom.anode_elements == 0 || geom.cathode_elements == 0 {
            return Err(Error::Config(
                "both electrode layers need at least one element".into(),
            ));
        }
        if geom.separator_elements == 0 {
            return Err(Error::Config("separator layer needs at least one element".into()));
        }
        if !(1..=3).contains(&geom.dimension) {
            return Err(Error::Config(format!(
                "dimension must be 1, 2, or 3, got {}",
                geom.dimension
            )));
        }

        // x breakpoints per layer
        let mut layers: Vec<(Region, f64, usize)> = Vec::new();
        if geom.dimension == 3 {
            let cc = params.collectors.as_ref().ok_or_else(|| {
                Error::Config("3D meshes need collector parameters".into())
            })?;
            if geom.anode_collector_elements == 0 || geom.cathode_collector_elements == 0 {
                return Err(Error::Config(
                    "3D meshes need at least one element per collector layer".into(),
                ));
            }
            layers.push((
                Region::AnodeCollector,
                cc.anode_thickness,
                geom.anode_collector_elements,
            ));
        }
        layers.push((Region::Anode, params.anode.thickness, geom.anode_elements));
        layers.push((
            Region::Separator,
            params.separator.thickness,
            geom.separator_elements,
        ));
        layers.push((Region::Cathode, params.cathode.thickness, geom.cathode_elements));
        if geom.dimension == 3 {
            let cc = params.collectors.as_ref().unwrap();
            layers.push((
                Region::CathodeCollector,
                cc.cathode_thickness,
                geom.cathode_collector_elements,
            ));
        }

        let mut xs = vec![0.0];
        let mut col_regions = Vec::new();
        for &(region, thickness, n) in &layers {
            if thickness <= 0.0 {
                return Err(Error::Config(format!("{region:?} layer thickness must be positive")));
            }
            let x0 = *xs.last().unwrap();
            for k in 1..=n {
                xs.push(x0 + thickness * k as f64 / n as f64);
                col_regions.push(region);
            }
        }
        let nx = xs.len();

        let (ny, ys) = if geom.dimension >= 2 {
            if geom.width <= 0.0 || geom.width_elements == 0 {
                return Err(Error::Config("2D/3D meshes need a positive width and element count".into()));
            }
            let n = geom.width_elements;
            (
                n + 1,
                (0..=n).map(|k| geom.width * k as f64 / n as f64).collect(),
            )
        } else {
            (1, vec![0.0])
        };
        let (nz, zs) = if geom.dimension == 3 {
            if geom.depth <= 0.0 || geom.depth_elements == 0 {
                return Err(Error::Config("3D meshes need a positive depth and element count".into()));
            }
            let n = geom.depth_elements;
            (
                n + 1,
                (0..=n).map(|k| geom.depth * k as f64 / n as f64).collect(),
            )
        } else {
            (1, vec![0.0])
        };

        let node_id = |ix: usize, iy: usize, iz: usize| ix + nx * (iy + ny * iz);
        let mut coords = Vec::with_capacity(nx * ny * nz);
        for iz in 0..nz {
            for iy in 0..ny {
                for ix in 0..nx {
                    let _ = node_id;
                    coords.push([xs[ix], ys[iy], zs[iz]]);
                }
            }
        }

        let mut elements = Vec::new();
        for iz in 0..nz.max(2) - 1 {
            for iy in 0..ny.max(2) - 1 {
                for ix in 0..nx - 1 {
                    let region = col_regions[ix];
                    let nodes = match geom.dimension {
                        1 => vec![node_id(ix, 0, 0), node_id(ix + 1, 0, 0)],
                        2 => vec![
                            node_id(ix, iy, 0),
                            node_id(ix + 1, iy, 0),
                            node_id(ix + 1, iy + 1, 0),
                            node_id(ix, iy + 1, 0),
                        ],
                        _ => vec![
                            node_id(ix, iy, iz),
                            node_id(ix + 1, iy, iz),
                            node_id(ix + 1, iy + 1, iz),
                            node_id(ix, iy + 1, iz),
                            node_id(ix, iy, iz + 1),
                            node_id(ix + 1, iy, iz + 1),
                            node_id(ix + 1, iy + 1, iz + 1),
                            node_id(ix, iy + 1, iz + 1),
                        ],
                    };
                    elements.push(MacroElement { nodes, region });
                }
            }
        }

        // Tab facets.
        let mut anode_tab = Vec::new();
        let mut cathode_tab = Vec::new();
        match geom.dimension {
            1 => {
                anode_tab.push(Facet {
                    nodes: vec![node_id(0, 0, 0)],
                });
                cathode_tab.push(Facet {
                    nodes: vec![node_id(nx - 1, 0, 0)],
                });
            }
            2 => {
                for iy in 0..ny - 1 {
                    anode_tab.push(Facet {
                        nodes: vec![node_id(0, iy, 0), node_id(0, iy + 1, 0)],
                    });
                    cathode_tab.push(Facet {
                        nodes: vec![node_id(nx - 1, iy, 0), node_id(nx - 1, iy + 1, 0)],
                    });
                }
            }
            _ => {
                // Faces with outward normal +y on collector columns, restricted
                // to the configured z extent.
                let (z_lo, z_hi) = geom.tab_extent.unwrap_or((0.0, geom.depth));
                let iy = ny - 1;
                for iz in 0..nz - 1 {
                    let zc = 0.5 * (zs[iz] + zs[iz + 1]);
                    if zc < z_lo || zc > z_hi {
                        continue;
                    }
                    for ix in 0..nx - 1 {
                        let facet = Facet {
                            nodes: vec![
                                node_id(ix, iy, iz),
                                node_id(ix + 1, iy, iz),
                                node_id(ix + 1, iy, iz + 1),
                                node_id(ix, iy, iz + 1),
                            ],
                        };
                        match col_regions[ix] {
                            Region::AnodeCollector => anode_tab.push(facet),
                            Region::CathodeCollector => cathode_tab.push(facet),
                            _ => {}
                        }
                    }
                }
                if anode_tab.is_empty() || cathode_tab.is_empty() {
                    return Err(Error::Config(
                        "tab extent selects no collector facets".into(),
                    ));
                }
            }
        }

        // Node membership from touching elements.
        let mut node_regions = vec![NodeMembership::default(); coords.len()];
        for e in &elements {
            for &n in &e.nodes {
                let m = &mut node_regions[n];
                m.in_electrolyte |= e.region.in_electrolyte();
                m.in_solid |= e.region.in_solid();
                if let Some(el) = e.region.electrode() {
                    m.electrode = Some(el);
                }
                match e.region {
                    Region::Anode | Region::AnodeCollector => {
                        m.solid_side = Some(Electrode::Anode)
                    }
                    Region::Cathode | Region::CathodeCollector => {
                        m.solid_side = Some(Electrode::Cathode)
                    }
                    Region::Separator => {}
                }
            }
        }

        Ok(Self {
            dim: geom.dimension,
            coords,
            elements,
            anode_tab,
            cathode_tab,
            node_regions,
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.coords.len()
    }

    pub fn membership(&self, node: usize) -> NodeMembership {
        self.node_regions[node]
    }

    /// Measure (length/area/volume) of one element; exact for the
    /// axis-aligned tensor elements this module builds.
    pub fn element_measure(&self, e: &MacroElement) -> f64 {
        let p = |i: usize| self.coords[e.nodes[i]];
        match self.dim {
            1 => (p(1)[0] - p(0)[0]).abs(),
            2 => ((p(1)[0] - p(0)[0]) * (p(3)[1] - p(0)[1])).abs(),
            _ => {
                ((p(1)[0] - p(0)[0]) * (p(3)[1] - p(0)[1]) * (p(4)[2] - p(0)[2])).abs()
            }
        }
    }

    /// Measure of a facet (1 for a point, length for an edge, area for a face).
    pub fn facet_measure(&self, f: &Facet) -> f64 {
        match f.nodes.len() {
            1 => 1.0,
            2 => {
                let a = self.coords[f.nodes[0]];
                let b = self.coords[f.nodes[1]];
                ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
            }
            4 => {
                let p0 = self.coords[f.nodes[0]];
                let p1 = self.coords[f.nodes[1]];
                let p3 = self.coords[f.nodes[3]];
                let e1: Vec<f64> = (0..3).map(|k| p1[k] - p0[k]).collect();
                let e2: Vec<f64> = (0..3).map(|k| p3[k] - p0[k]).collect();
                let cx = e1[1] * e2[2] - e1[2] * e2[1];
                let cy = e1[2] * e2[0] - e1[0] * e2[2];
                let cz = e1[0] * e2[1] - e1[1] * e2[0];
                (cx * cx + cy * cy + cz * cz).sqrt()
            }
            n => panic!("unsupported facet with {n} nodes"),
        }
    }

    /// Nodal weights of `integral(psi_k dA)` over one facet; exact for the
    /// linear/bilinear facets of structured meshes.
    pub fn facet_shape_integrals(&self, f: &Facet) -> Vec<f64> {
        let m = self.facet_measure(f);
        let share = m / f.nodes.len() as f64;
        vec![share; f.nodes.len()]
    }

    /// Writes a plain-text node/element listing for inspection.
    pub fn export_listing(&self, w: &mut dyn std::io::Write) -> std::io::Result<()> {
        writeln!(w, "# nodes: {}", self.n_nodes())?;
        for (i, c) in self.coords.iter().enumerate() {
            writeln!(w, "node {i} {:.9e} {:.9e} {:.9e}", c[0], c[1], c[2])?;
        }
        writeln!(w, "# elements: {}", self.elements.len())?;
        for (i, e) in self.elements.iter().enumerate() {
            let ids: Vec<String> = e.nodes.iter().map(|n| n.to_string()).collect();
            writeln!(w, "element {i} {:?} {}", e.region, ids.join(" "))?;
        }
        Ok(())
    }
}

/// Radial particle mesh shared by all nodes of one electrode subdomain.
#[derive(Debug, Clone, PartialEq)]
pub struct MicroMesh {
    pub radii: Vec<f64>,
}

impl MicroMesh {
    pub fn uniform(particle_radius: f64, n_elements: usize) -> Result<Self> {
        if particle_radius <= 0.0 {
            return Err(Error::InvalidParameter {
                name: "particle_radius",
                value: particle_radius,
                reason: "must be positive",
            });
        }
        if n_elements == 0 {
            return Err(Error::InvalidParameter {
                name: "n_elements",
                value: 0.0,
                reason: "micro mesh needs at least one element",
            });
        }
        let radii = (0..=n_elements)
            .map(|k| particle_radius * k as f64 / n_elements as f64)
            .collect();
        Ok(Self { radii })
    }

    pub fn n_nodes(&self) -> usize {
        self.radii.len()
    }

    /// Index of the particle-surface node.
    pub fn surface_index(&self) -> usize {
        self.radii.len() - 1
    }

    pub fn particle_radius(&self) -> f64 {
        *self.radii.last().unwrap()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params_1d() -> ParameterSet {
        ParameterSet::marquis2019()
    }

    #[test]
    fn one_dimensional_benchmark_counts_and_tags() {
        let p = params_1d();
        let geom = GeometrySpec::one_dimensional(20, 5, 20);
        let m = MacroMesh::build(&p, &geom).unwrap();
        assert_eq!(m.n_nodes(), 46);
        assert_eq!(m.elements.len(), 45);
        // tags follow x position
        for e in &m.elements {
            let xc = 0.5 * (m.coords[e.nodes[0]][0] + m.coords[e.nodes[1]][0]);
            let expected = if xc < 100e-6 {
                Region::Anode
            } else if xc < 125e-6 {
                Region::Separator
            } else {
                Region::Cathode
            };
            assert_eq!(e.region, expected, "element centred at {xc}");
        }
        assert_eq!(m.anode_tab.len(), 1);
        assert_eq!(m.cathode_tab.len(), 1);
        assert_eq!(m.anode_tab[0].nodes[0], 0);
        assert_eq!(m.cathode_tab[0].nodes[0], 45);
    }

    #[test]
    fn layer_measures_match_prescribed_volumes() {
        let p = params_1d();
        // 2D: 20 columns x 3 rows = 60 quadrilaterals
        let geom = GeometrySpec {
            dimension: 2,
            anode_elements: 8,
            separator_elements: 4,
            cathode_elements: 8,
            anode_collector_elements: 0,
            cathode_collector_elements: 0,
            width: 10e-6,
            width_elements: 3,
            depth: 0.0,
            depth_elements: 0,
            tab_extent: None,
        };
        let m = MacroMesh::build(&p, &geom).unwrap();
        assert_eq!(m.elements.len(), 60);
        let mut areas = std::collections::HashMap::new();
        for e in &m.elements {
            *areas.entry(e.region).or_insert(0.0) += m.element_measure(e);
        }
        let expect = |l: f64| l * 10e-6;
        for (region, thickness) in [
            (Region::Anode, 100e-6),
            (Region::Separator, 25e-6),
            (Region::Cathode, 100e-6),
        ] {
            let got = areas[&region];
            assert!(
                ((got - expect(thickness)) / expect(thickness)).abs() < 1e-12,
                "{region:?}: {got} vs {}",
                expect(thickness)
            );
        }
    }

    #[test]
    fn degenerate_layer_requests_fail() {
        let p = params_1d();
        let geom = GeometrySpec::one_dimensional(0, 5, 20);
        assert!(MacroMesh::build(&p, &geom).is_err());
        let geom = GeometrySpec::one_dimensional(20, 0, 20);
        assert!(MacroMesh::build(&p, &geom).is_err());
    }

    #[test]
    fn micro_mesh_uniform_spacing() {
        let m = MicroMesh::uniform(10e-6, 10).unwrap();
        assert_eq!(m.n_nodes(), 11);
        assert_eq!(m.surface_index(), 10);
        for w in m.radii.windows(2) {
            assert!((w[1] - w[0] - 1e-6).abs() < 1e-18);
        }
        assert_eq!(m.radii[0], 0.0);
        assert!((m.particle_radius() - 10e-6).abs() < 1e-18);
    }

    #[test]
    fn minimal_micro_mesh() {
        let m = MicroMesh::uniform(5e-6, 1).unwrap();
        assert_eq!(m.radii, vec![0.0, 5e-6]);
    }

    #[test]
    fn per_electrode_micro_meshes_are_distinct_instances() {
        let p = params_1d();
        let a = MicroMesh::uniform(p.anode.particle_radius, 10).unwrap();
        let c = MicroMesh::uniform(p.cathode.particle_radius, 10).unwrap();
        assert_eq!(a, c); // equal radii in the reference set
        assert_ne!(&a as *const _, &c as *const _);
    }

    #[test]
    fn membership_resolves_interfaces_to_electrodes() {
        let p = params_1d();
        let m = MacroMesh::build(&p, &GeometrySpec::one_dimensional(2, 2, 2)).unwrap();
        // node 2 sits on the anode/separator interface
        let na = m.membership(2);
        assert_eq!(na.electrode, Some(Electrode::Anode));
        assert!(na.in_electrolyte && na.in_solid);
        // separator interior node has no solid or flux unknowns
        let ns = m.membership(3).electrode;
        assert_eq!(ns, None);
        assert!(!m.membership(3).in_solid);
        // separator/cathode interface node belongs to the cathode
        assert_eq!(m.membership(4).electrode, Some(Electrode::Cathode));
    }

    #[test]
    fn three_dimensional_mesh_with_collectors() {
        let p = params_1d().with_collectors(crate::params::CollectorParams {
            anode_thickness: 25e-6,
            cathode_thickness: 25e-6,
            anode_conductivity: 5.965e7,
            cathode_conductivity: 3.55e7,
        });
        let geom = GeometrySpec {
            dimension: 3,
            anode_elements: 1,
            separator_elements: 1,
            cathode_elements: 1,
            anode_collector_elements: 1,
            cathode_collector_elements: 1,
            width: 0.01,
            width_elements: 2,
            depth: 0.02,
            depth_elements: 2,
            tab_extent: None,
        };
        let m = MacroMesh::build(&p, &geom).unwrap();
        assert_eq!(m.elements.len(), 5 * 2 * 2);
        assert_eq!(m.n_nodes(), 6 * 3 * 3);
        // tab facets lie on the y = width boundary and on collector columns
        assert_eq!(m.anode_tab.len(), 2);
        assert_eq!(m.cathode_tab.len(), 2);
        for f in m.anode_tab.iter().chain(&m.cathode_tab) {
            for &n in &f.nodes {
                assert!((m.coords[n][1] - 0.01).abs() < 1e-15, "tab node off boundary");
            }
        }
        // collector nodes carry phi_s but no electrolyte unknowns
        let collector_node = m.elements[0].nodes[0]; // first anode-collector element
        assert_eq!(m.elements[0].region, Region::AnodeCollector);
        let mm = m.membership(collector_node);
        assert!(mm.in_solid && !mm.in_electrolyte);
        // facet weights sum to the facet area
        let f = &m.cathode_tab[0];
        let area = m.facet_measure(f);
        let sum: f64 = m.facet_shape_integrals(f).iter().sum();
        assert!((sum - area).abs() < 1e-18);
    }
}
