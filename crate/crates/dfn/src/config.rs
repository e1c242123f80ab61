//! Configuration files: a hierarchical TOML schema covering parameters,
//! materials, geometry, protocol, solver knobs, outputs, and the
//! identification block. Section and key names mirror the parameter-table
//! field names (`thickness`, `bruggeman`, `electrolyte_volume_fraction`, ...).

use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::ident::{
    IdentificationProblem, OptimizerSettings, RateCase, Stage,
};
use crate::mesh::GeometrySpec;
use crate::model::Model;
use crate::params::{
    CellParams, CollectorParams, ElectrodeParams, MaterialFunctionSet, OcpCurve, ParamId,
    ParameterSet, ScaleKind, ScaledParam, ScalingSpec, SeparatorParams, TabulatedCurve,
    TransportCurve,
};
use crate::solver::{DriveProtocol, SolverSettings};

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ElectrodeSection {
    thickness: f64,
    bruggeman: f64,
    electrolyte_volume_fraction: f64,
    active_material_volume_fraction: f64,
    particle_radius: f64,
    initial_lithium_concentration: f64,
    max_lithium_concentration: f64,
    solid_diffusivity: f64,
    reaction_rate_constant: f64,
    conductivity: f64,
}

impl From<&ElectrodeSection> for ElectrodeParams {
    fn from(s: &ElectrodeSection) -> Self {
        ElectrodeParams {
            thickness: s.thickness,
            bruggeman: s.bruggeman,
            electrolyte_volume_fraction: s.electrolyte_volume_fraction,
            active_material_volume_fraction: s.active_material_volume_fraction,
            particle_radius: s.particle_radius,
            initial_lithium_concentration: s.initial_lithium_concentration,
            max_lithium_concentration: s.max_lithium_concentration,
            solid_diffusivity: s.solid_diffusivity,
            reaction_rate_constant: s.reaction_rate_constant,
            conductivity: s.conductivity,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SeparatorSection {
    thickness: f64,
    bruggeman: f64,
    electrolyte_volume_fraction: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct CellSection {
    initial_electrolyte_concentration: f64,
    transference_number: f64,
    #[serde(default = "default_gas_constant")]
    gas_constant: f64,
    temperature: f64,
    #[serde(default = "default_faraday")]
    faraday_constant: f64,
}

fn default_gas_constant() -> f64 {
    8.314
}

fn default_faraday() -> f64 {
    96485.0
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct CollectorSection {
    anode_thickness: f64,
    cathode_thickness: f64,
    anode_conductivity: f64,
    cathode_conductivity: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParametersSection {
    anode: ElectrodeSection,
    separator: SeparatorSection,
    cathode: ElectrodeSection,
    cell: CellSection,
    collectors: Option<CollectorSection>,
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum OcpSpec {
    Named(String),
    Csv { csv: PathBuf },
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum TransportSpec {
    Constant {
        constant: f64,
    },
    Exponential {
        prefactor: f64,
        decay: f64,
    },
    Polynomial {
        polynomial: Vec<f64>,
    },
    PowerSeries {
        power_series: Vec<(f64, f64)>,
    },
    Csv {
        csv: PathBuf,
    },
}

#[derive(Debug, Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct MaterialsSection {
    /// Starting point: "marquis2019" (default) or "commercial-lco".
    preset: Option<String>,
    anode_ocp: Option<OcpSpec>,
    cathode_ocp: Option<OcpSpec>,
    cathode_stoichiometry_prescale: Option<f64>,
    electrolyte_diffusivity: Option<TransportSpec>,
    electrolyte_conductivity: Option<TransportSpec>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct GeometrySection {
    dimension: usize,
    anode_elements: usize,
    separator_elements: usize,
    cathode_elements: usize,
    #[serde(default)]
    anode_collector_elements: usize,
    #[serde(default)]
    cathode_collector_elements: usize,
    #[serde(default)]
    width: f64,
    #[serde(default)]
    width_elements: usize,
    #[serde(default)]
    depth: f64,
    #[serde(default)]
    depth_elements: usize,
    tab_extent: Option<(f64, f64)>,
    micro_elements: usize,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ProtocolSection {
    current_density: f64,
    dt: f64,
    max_steps: usize,
    cutoff_voltage: Option<f64>,
    end_time: Option<f64>,
}

impl From<&ProtocolSection> for DriveProtocol {
    fn from(p: &ProtocolSection) -> Self {
        DriveProtocol {
            current_density: p.current_density,
            dt: p.dt,
            max_steps: p.max_steps,
            cutoff_voltage: p.cutoff_voltage,
            end_time: p.end_time,
        }
    }
}

#[derive(Debug, Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct SolverSection {
    newton_tol: Option<f64>,
    max_iterations: Option<usize>,
    max_halvings: Option<usize>,
    max_dt_halvings: Option<usize>,
    kinetics_cap: Option<f64>,
}

#[derive(Debug, Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct OutputSection {
    directory: Option<PathBuf>,
    #[serde(default)]
    snapshots: bool,
    seed: Option<u64>,
    #[serde(default)]
    noise_sigma: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct IdentParamSection {
    name: String,
    lower: f64,
    upper: f64,
    scale: String,
    stage: String,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct IdentRateSection {
    label: Option<String>,
    current_density: f64,
    dt: f64,
    max_steps: usize,
    cutoff_voltage: Option<f64>,
    end_time: Option<f64>,
    /// Reference trace CSV (time_s, voltage_V), relative to the config file.
    reference: PathBuf,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct IdentSection {
    parameters: Vec<IdentParamSection>,
    rates: Vec<IdentRateSection>,
    #[serde(default = "default_penalty")]
    penalty_voltage: f64,
    #[serde(default = "default_stage_cap")]
    stage_iteration_cap: usize,
    #[serde(default = "default_stage_tol")]
    stage_objective_tolerance: f64,
    max_iterations: Option<usize>,
    objective_tolerance: Option<f64>,
    stagnation_window: Option<usize>,
    stagnation_threshold: Option<f64>,
    memory: Option<usize>,
}

fn default_penalty() -> f64 {
    0.05
}

fn default_stage_cap() -> usize {
    10
}

fn default_stage_tol() -> f64 {
    0.010
}

#[derive(Debug, Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct GradcheckSection {
    /// Relative central-difference step applied per parameter.
    fd_step: Option<f64>,
    /// Pass threshold on the relative adjoint-vs-FD error.
    threshold: Option<f64>,
    /// Offset applied alternately to each design variable from 0.5.
    w_offset: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    parameters: ParametersSection,
    #[serde(default)]
    materials: MaterialsSection,
    geometry: GeometrySection,
    protocol: Option<ProtocolSection>,
    #[serde(default)]
    solver: SolverSection,
    #[serde(default)]
    output: OutputSection,
    identification: Option<IdentSection>,
    #[serde(default)]
    gradcheck: GradcheckSection,
}

/// Fully resolved run configuration.
pub struct RunConfig {
    pub model: Model,
    pub protocol: Option<DriveProtocol>,
    pub solver: SolverSettings,
    pub output_dir: PathBuf,
    pub snapshots: bool,
    pub seed: u64,
    pub noise_sigma: f64,
    pub ident: Option<IdentBlock>,
    pub gradcheck_fd_step: f64,
    pub gradcheck_threshold: f64,
    pub gradcheck_w_offset: f64,
    /// FNV-1a hash of the configuration text, recorded in output headers.
    pub config_hash: u64,
}

/// Parsed identification block; reference traces are loaded lazily so that
/// reference generation can run before the files exist.
pub struct IdentBlock {
    pub scaling: ScalingSpec,
    pub stages: Vec<Stage>,
    pub protocols: Vec<(String, DriveProtocol)>,
    pub reference_paths: Vec<PathBuf>,
    pub optimizer: OptimizerSettings,
    pub penalty_voltage: f64,
    pub stage_iteration_cap: usize,
    pub stage_objective_tolerance: f64,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let base_dir = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        Self::from_str_with_base(&text, &base_dir)
    }

    pub fn from_str_with_base(text: &str, base_dir: &Path) -> Result<Self> {
        let file: ConfigFile =
            toml::from_str(text).map_err(|e| Error::Config(format!("parse error: {e}")))?;
        let config_hash = fnv1a(text.as_bytes());

        let params = ParameterSet {
            anode: (&file.parameters.anode).into(),
            separator: SeparatorParams {
                thickness: file.parameters.separator.thickness,
                bruggeman: file.parameters.separator.bruggeman,
                electrolyte_volume_fraction: file.parameters.separator.electrolyte_volume_fraction,
            },
            cathode: (&file.parameters.cathode).into(),
            cell: CellParams {
                initial_electrolyte_concentration: file
                    .parameters
                    .cell
                    .initial_electrolyte_concentration,
                transference_number: file.parameters.cell.transference_number,
                gas_constant: file.parameters.cell.gas_constant,
                temperature: file.parameters.cell.temperature,
                faraday: file.parameters.cell.faraday_constant,
            },
            collectors: file.parameters.collectors.as_ref().map(|c| CollectorParams {
                anode_thickness: c.anode_thickness,
                cathode_thickness: c.cathode_thickness,
                anode_conductivity: c.anode_conductivity,
                cathode_conductivity: c.cathode_conductivity,
            }),
        };

        let materials = build_materials(&file.materials, base_dir)?;

        let geom = GeometrySpec {
            dimension: file.geometry.dimension,
            anode_elements: file.geometry.anode_elements,
            separator_elements: file.geometry.separator_elements,
            cathode_elements: file.geometry.cathode_elements,
            anode_collector_elements: file.geometry.anode_collector_elements,
            cathode_collector_elements: file.geometry.cathode_collector_elements,
            width: file.geometry.width,
            width_elements: file.geometry.width_elements,
            depth: file.geometry.depth,
            depth_elements: file.geometry.depth_elements,
            tab_extent: file.geometry.tab_extent,
        };
        let model = Model::new(params, materials, &geom, file.geometry.micro_elements)?;

        let mut solver = SolverSettings::default();
        if let Some(v) = file.solver.newton_tol {
            solver.newton_tol = v;
        }
        if let Some(v) = file.solver.max_iterations {
            solver.max_iterations = v;
        }
        if let Some(v) = file.solver.max_halvings {
            solver.max_halvings = v;
        }
        if let Some(v) = file.solver.max_dt_halvings {
            solver.max_dt_halvings = v;
        }
        if let Some(v) = file.solver.kinetics_cap {
            solver.kinetics_cap = v;
        }

        let ident = match &file.identification {
            None => None,
            Some(section) => Some(build_ident_block(section, base_dir)?),
        };

        Ok(Self {
            model,
            protocol: file.protocol.as_ref().map(DriveProtocol::from),
            solver,
            output_dir: base_dir.join(
                file.output
                    .directory
                    .clone()
                    .unwrap_or_else(|| PathBuf::from("out")),
            ),
            snapshots: file.output.snapshots,
            seed: file.output.seed.unwrap_or(0),
            noise_sigma: file.output.noise_sigma,
            ident,
            gradcheck_fd_step: file.gradcheck.fd_step.unwrap_or(1e-4),
            gradcheck_threshold: file.gradcheck.threshold.unwrap_or(1e-4),
            gradcheck_w_offset: file.gradcheck.w_offset.unwrap_or(0.08),
            config_hash,
        })
    }

    /// Builds the identification problem, loading every reference trace.
    pub fn identification_problem(&self) -> Result<IdentificationProblem> {
        let block = self
            .ident
            .as_ref()
            .ok_or_else(|| Error::Config("config has no [identification] block".into()))?;
        let mut rates = Vec::new();
        for ((label, protocol), path) in block.protocols.iter().zip(&block.reference_paths) {
            let reference = crate::csvio::read_reference_csv(path)?;
            rates.push(RateCase {
                label: label.clone(),
                protocol: protocol.clone(),
                reference,
            });
        }
        Ok(IdentificationProblem {
            model: self.model.clone(),
            scaling: block.scaling.clone(),
            stages: block.stages.clone(),
            rates,
            optimizer: block.optimizer.clone(),
            solver: self.solver.clone(),
            penalty_voltage: block.penalty_voltage,
            stage_iteration_cap: block.stage_iteration_cap,
            stage_objective_tolerance: block.stage_objective_tolerance,
        })
    }
}

fn build_materials(section: &MaterialsSection, base_dir: &Path) -> Result<MaterialFunctionSet> {
    let mut mats = match section.preset.as_deref() {
        None | Some("marquis2019") => MaterialFunctionSet::marquis2019(),
        Some("commercial-lco") => MaterialFunctionSet::commercial_lco(),
        Some(other) => {
            return Err(Error::Config(format!("unknown materials preset `{other}`")))
        }
    };
    let ocp = |spec: &OcpSpec| -> Result<OcpCurve> {
        match spec {
            OcpSpec::Named(n) => match n.as_str() {
                "graphite-mcmb" => Ok(OcpCurve::GraphiteMcmb),
                "lco" => Ok(OcpCurve::LithiumCobaltOxide),
                "graphite-gaussian" => Ok(OcpCurve::GraphiteGaussian),
                "lco-gaussian" => Ok(OcpCurve::LcoGaussian),
                other => Err(Error::Config(format!("unknown OCP curve `{other}`"))),
            },
            OcpSpec::Csv { csv } => Ok(OcpCurve::Table(TabulatedCurve::from_csv(
                &base_dir.join(csv),
            )?)),
        }
    };
    if let Some(s) = &section.anode_ocp {
        mats.anode_ocp = ocp(s)?;
    }
    if let Some(s) = &section.cathode_ocp {
        mats.cathode_ocp = ocp(s)?;
    }
    if let Some(p) = section.cathode_stoichiometry_prescale {
        mats.cathode_stoichiometry_prescale = p;
    }
    let transport = |spec: &TransportSpec| -> Result<TransportCurve> {
        Ok(match spec {
            TransportSpec::Constant { constant } => TransportCurve::Constant(*constant),
            TransportSpec::Exponential { prefactor, decay } => TransportCurve::Exponential {
                prefactor: *prefactor,
                decay: *decay,
            },
            TransportSpec::Polynomial { polynomial } => {
                TransportCurve::Polynomial(polynomial.clone())
            }
            TransportSpec::PowerSeries { power_series } => {
                TransportCurve::PowerSeries(power_series.clone())
            }
            TransportSpec::Csv { csv } => {
                TransportCurve::Table(TabulatedCurve::from_csv(&base_dir.join(csv))?)
            }
        })
    };
    if let Some(s) = &section.electrolyte_diffusivity {
        mats.electrolyte_diffusivity = transport(s)?;
    }
    if let Some(s) = &section.electrolyte_conductivity {
        mats.electrolyte_conductivity = transport(s)?;
    }
    Ok(mats)
}

fn build_ident_block(section: &IdentSection, base_dir: &Path) -> Result<IdentBlock> {
    let mut entries = Vec::new();
    let mut stages = Vec::new();
    for p in &section.parameters {
        let id = ParamId::parse(&p.name)?;
        let kind = match p.scale.as_str() {
            "log" => ScaleKind::Log,
            "linear" => ScaleKind::Linear,
            other => {
                return Err(Error::Config(format!(
                    "parameter {}: unknown scale kind `{other}`",
                    p.name
                )))
            }
        };
        entries.push(ScaledParam {
            id,
            lower: p.lower,
            upper: p.upper,
            kind,
        });
        stages.push(match p.stage.as_str() {
            "thermodynamic" => Stage::Thermodynamic,
            "kinetic" => Stage::Kinetic,
            other => {
                return Err(Error::Config(format!(
                    "parameter {}: unknown stage `{other}`",
                    p.name
                )))
            }
        });
    }
    let scaling = ScalingSpec::new(entries)?;

    let mut protocols = Vec::new();
    let mut reference_paths = Vec::new();
    for (i, r) in section.rates.iter().enumerate() {
        let label = r.label.clone().unwrap_or_else(|| format!("rate{i}"));
        protocols.push((
            label,
            DriveProtocol {
                current_density: r.current_density,
                dt: r.dt,
                max_steps: r.max_steps,
                cutoff_voltage: r.cutoff_voltage,
                end_time: r.end_time,
            },
        ));
        reference_paths.push(base_dir.join(&r.reference));
    }

    let mut optimizer = OptimizerSettings::default();
    if let Some(v) = section.max_iterations {
        optimizer.max_iterations = v;
    }
    if let Some(v) = section.objective_tolerance {
        optimizer.objective_tolerance = v;
    }
    if let Some(v) = section.stagnation_window {
        optimizer.stagnation_window = v;
    }
    if let Some(v) = section.stagnation_threshold {
        optimizer.stagnation_threshold = v;
    }
    if let Some(v) = section.memory {
        optimizer.memory = v;
    }

    Ok(IdentBlock {
        scaling,
        stages,
        protocols,
        reference_paths,
        optimizer,
        penalty_voltage: section.penalty_voltage,
        stage_iteration_cap: section.stage_iteration_cap,
        stage_objective_tolerance: section.stage_objective_tolerance,
    })
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}
