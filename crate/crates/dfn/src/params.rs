//! Model parameters, material functions, and design-variable scaling.
//!
//! Everything here is immutable after construction and shareable across
//! threads. Derived quantities (effective transport coefficients, specific
//! surface area) are recomputed from their sources on demand rather than
//! stored, so there is a single source of truth.

use crate::error::{Error, Result};
use crate::real::{Dual, Real};

/// Electrolyte-bearing layers of the cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Layer {
    Anode,
    Separator,
    Cathode,
}

/// The two porous electrodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Electrode {
    Anode,
    Cathode,
}

impl Electrode {
    pub const BOTH: [Electrode; 2] = [Electrode::Anode, Electrode::Cathode];

    pub fn index(self) -> usize {
        match self {
            Electrode::Anode => 0,
            Electrode::Cathode => 1,
        }
    }
}

/// Per-electrode physical parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ElectrodeParams {
    /// Layer thickness L (m).
    pub thickness: f64,
    /// Bruggeman coefficient (dimensionless).
    pub bruggeman: f64,
    /// Electrolyte volume fraction (porosity).
    pub electrolyte_volume_fraction: f64,
    /// Active material volume fraction.
    pub active_material_volume_fraction: f64,
    /// Particle radius r_s (m).
    pub particle_radius: f64,
    /// Initial microscopic lithium concentration (mol/m^3).
    pub initial_lithium_concentration: f64,
    /// Maximum microscopic lithium concentration (mol/m^3).
    pub max_lithium_concentration: f64,
    /// Microscopic diffusivity D_s (m^2/s).
    pub solid_diffusivity: f64,
    /// Reaction rate constant k_s (m^2.5 / (mol^0.5 s)).
    pub reaction_rate_constant: f64,
    /// Solid-phase bulk conductivity (S/m).
    pub conductivity: f64,
}

impl ElectrodeParams {
    /// Specific surface area of active particles, a_s = 3 eps_s / r_s (1/m).
    pub fn specific_surface_area(&self) -> f64 {
        3.0 * self.active_material_volume_fraction / self.particle_radius
    }
}

/// Separator parameters. The separator carries no particle fields.
#[derive(Debug, Clone, PartialEq)]
pub struct SeparatorParams {
    pub thickness: f64,
    pub bruggeman: f64,
    pub electrolyte_volume_fraction: f64,
}

/// Cell-wide constants.
#[derive(Debug, Clone, PartialEq)]
pub struct CellParams {
    /// Initial electrolyte lithium concentration (mol/m^3).
    pub initial_electrolyte_concentration: f64,
    /// Transference number t_+ (dimensionless).
    pub transference_number: f64,
    /// Gas constant (J/(mol K)). Overridable for testing.
    pub gas_constant: f64,
    /// Temperature (K), constant.
    pub temperature: f64,
    /// Faraday constant (C/mol). Overridable for testing.
    pub faraday: f64,
}

impl CellParams {
    /// Thermal energy scale R*T (J/mol).
    pub fn rt(&self) -> f64 {
        self.gas_constant * self.temperature
    }
}

/// Current-collector layers, present only for 3D models.
#[derive(Debug, Clone, PartialEq)]
pub struct CollectorParams {
    pub anode_thickness: f64,
    pub cathode_thickness: f64,
    /// Bulk conductivity of the anode collector metal (S/m).
    pub anode_conductivity: f64,
    /// Bulk conductivity of the cathode collector metal (S/m).
    pub cathode_conductivity: f64,
}

/// The full parameter vector of the model.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterSet {
    pub anode: ElectrodeParams,
    pub separator: SeparatorParams,
    pub cathode: ElectrodeParams,
    pub cell: CellParams,
    pub collectors: Option<CollectorParams>,
}

impl ParameterSet {
    pub fn electrode(&self, e: Electrode) -> &ElectrodeParams {
        match e {
            Electrode::Anode => &self.anode,
            Electrode::Cathode => &self.cathode,
        }
    }

    pub fn electrode_mut(&mut self, e: Electrode) -> &mut ElectrodeParams {
        match e {
            Electrode::Anode => &mut self.anode,
            Electrode::Cathode => &mut self.cathode,
        }
    }

    /// Reference LCO-graphite cell parameters (Marquis et al. 2019 set).
    pub fn marquis2019() -> Self {
        Self {
            anode: ElectrodeParams {
                thickness: 100e-6,
                bruggeman: 1.5,
                electrolyte_volume_fraction: 0.3,
                active_material_volume_fraction: 0.6,
                particle_radius: 10e-6,
                initial_lithium_concentration: 19987.0,
                max_lithium_concentration: 24983.0,
                solid_diffusivity: 3.9e-14,
                reaction_rate_constant: 2.0729e-10,
                conductivity: 100.0,
            },
            separator: SeparatorParams {
                thickness: 25e-6,
                bruggeman: 1.5,
                electrolyte_volume_fraction: 1.0,
            },
            cathode: ElectrodeParams {
                thickness: 100e-6,
                bruggeman: 1.5,
                electrolyte_volume_fraction: 0.3,
                active_material_volume_fraction: 0.5,
                particle_radius: 10e-6,
                initial_lithium_concentration: 30731.0,
                max_lithium_concentration: 51218.0,
                solid_diffusivity: 1e-13,
                reaction_rate_constant: 6.2186e-12,
                conductivity: 10.0,
            },
            cell: CellParams {
                initial_electrolyte_concentration: 1000.0,
                transference_number: 0.4,
                gas_constant: 8.314,
                temperature: 298.15,
                faraday: 96485.0,
            },
            collectors: None,
        }
    }

    /// Adds copper/aluminium collector layers (used by 3D models).
    pub fn with_collectors(mut self, c: CollectorParams) -> Self {
        self.collectors = Some(c);
        self
    }

    pub fn validate(&self) -> Result<()> {
        fn positive(name: &'static str, v: f64) -> Result<()> {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::InvalidParameter {
                    name,
                    value: v,
                    reason: "must be positive and finite",
                })
            }
        }
        for (label, e) in [("anode", &self.anode), ("cathode", &self.cathode)] {
            positive("thickness", e.thickness)?;
            positive("particle_radius", e.particle_radius)?;
            positive("solid_diffusivity", e.solid_diffusivity)?;
            positive("reaction_rate_constant", e.reaction_rate_constant)?;
            positive("conductivity", e.conductivity)?;
            let eps_e = e.electrolyte_volume_fraction;
            let eps_s = e.active_material_volume_fraction;
            if !(eps_e > 0.0 && eps_e <= 1.0) {
                return Err(Error::InvalidParameter {
                    name: "electrolyte_volume_fraction",
                    value: eps_e,
                    reason: "must lie in (0, 1]",
                });
            }
            if !(eps_s >= 0.0 && eps_s < 1.0) {
                return Err(Error::InvalidParameter {
                    name: "active_material_volume_fraction",
                    value: eps_s,
                    reason: "must lie in [0, 1)",
                });
            }
            if eps_e + eps_s > 1.0 + 1e-12 {
                return Err(Error::InvalidParameter {
                    name: "volume_fractions",
                    value: eps_e + eps_s,
                    reason: "electrolyte + active material fractions exceed 1",
                });
            }
            if !(e.initial_lithium_concentration > 0.0
                && e.initial_lithium_concentration < e.max_lithium_concentration)
            {
                return Err(Error::InvalidParameter {
                    name: "initial_lithium_concentration",
                    value: e.initial_lithium_concentration,
                    reason: "must lie strictly inside (0, c_s_max)",
                });
            }
            let _ = label;
        }
        let sep_eps = self.separator.electrolyte_volume_fraction;
        if !(sep_eps > 0.0 && sep_eps <= 1.0) {
            return Err(Error::InvalidParameter {
                name: "separator electrolyte_volume_fraction",
                value: sep_eps,
                reason: "must lie in (0, 1]",
            });
        }
        positive("separator thickness", self.separator.thickness)?;
        positive(
            "initial_electrolyte_concentration",
            self.cell.initial_electrolyte_concentration,
        )?;
        let tp = self.cell.transference_number;
        if !(tp > 0.0 && tp < 1.0) {
            return Err(Error::InvalidParameter {
                name: "transference_number",
                value: tp,
                reason: "must lie in (0, 1)",
            });
        }
        positive("gas_constant", self.cell.gas_constant)?;
        positive("temperature", self.cell.temperature)?;
        positive("faraday", self.cell.faraday)?;
        if let Some(cc) = &self.collectors {
            positive("collector anode_thickness", cc.anode_thickness)?;
            positive("collector cathode_thickness", cc.cathode_thickness)?;
            positive("collector anode_conductivity", cc.anode_conductivity)?;
            positive("collector cathode_conductivity", cc.cathode_conductivity)?;
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Bruggeman relation and interfacial kinetics
// ---------------------------------------------------------------------------

/// Effective porous-medium transport coefficient, `eps^beta * bulk`.
pub fn effective_transport(volume_fraction: f64, beta: f64, bulk_value: f64) -> Result<f64> {
    if !(volume_fraction > 0.0 && volume_fraction <= 1.0) {
        return Err(Error::InvalidParameter {
            name: "volume_fraction",
            value: volume_fraction,
            reason: "must lie in (0, 1]",
        });
    }
    if bulk_value <= 0.0 {
        return Err(Error::InvalidParameter {
            name: "bulk_value",
            value: bulk_value,
            reason: "must be positive",
        });
    }
    Ok(volume_fraction.powf(beta) * bulk_value)
}

/// Exchange current density `i0 = k_s F sqrt(c_surf) sqrt(c_max - c_surf) sqrt(c_e)`.
///
/// `node` is carried into the saturation error so a failing particle can be
/// located; pass 0 when there is no meaningful node.
pub fn exchange_current(
    k_s: f64,
    c_s_surf: f64,
    c_s_max: f64,
    c_e: f64,
    faraday: f64,
    node: usize,
) -> Result<f64> {
    if c_s_surf < 0.0 || c_s_surf > c_s_max {
        return Err(Error::Saturation {
            node,
            value: c_s_surf,
            max: c_s_max,
        });
    }
    if c_e < 0.0 {
        return Err(Error::InvalidParameter {
            name: "c_e",
            value: c_e,
            reason: "must be non-negative",
        });
    }
    Ok(k_s * faraday * c_s_surf.sqrt() * (c_s_max - c_s_surf).sqrt() * c_e.sqrt())
}

// ---------------------------------------------------------------------------
// Material functions
// ---------------------------------------------------------------------------

/// Open-circuit potential as a function of surface stoichiometry.
#[derive(Debug, Clone, PartialEq)]
pub enum OcpCurve {
    /// Closed-form fit for an MCMB graphite anode (exp + tanh series).
    GraphiteMcmb,
    /// Closed-form fit for a lithium cobalt oxide cathode (tanh series).
    LithiumCobaltOxide,
    /// Gaussian-sum fit for the commercial graphite anode.
    GraphiteGaussian,
    /// Gaussian-sum fit for the commercial LCO cathode.
    LcoGaussian,
    /// User-supplied tabulated curve with monotone cubic interpolation.
    Table(TabulatedCurve),
}

impl OcpCurve {
    /// Validated stoichiometry range (after any pre-scaling).
    pub fn validated_range(&self) -> (f64, f64) {
        match self {
            OcpCurve::GraphiteMcmb | OcpCurve::GraphiteGaussian | OcpCurve::LcoGaussian => {
                (0.0, 1.0)
            }
            // The prescaled cathode stoichiometry can exceed 1 near full
            // intercalation; the fit stays well-behaved up to ~1.1.
            OcpCurve::LithiumCobaltOxide => (0.0, 1.1),
            OcpCurve::Table(t) => (t.xs[0], *t.xs.last().unwrap()),
        }
    }

    fn eval_generic<R: Real>(&self, th: R) -> R {
        fn c<R: Real>(x: f64) -> R {
            R::from_f64(x)
        }
        match self {
            OcpCurve::GraphiteMcmb => {
                let tanh_term = |a: f64, center: f64, scale: f64| -> R {
                    c::<R>(a) * ((th - c(center)) / c(scale)).tanh()
                };
                c::<R>(0.194)
                    + c::<R>(1.5) * (c::<R>(-120.0) * th).exp()
                    + tanh_term(0.0351, 0.286, 0.083)
                    - tanh_term(0.0045, 0.849, 0.119)
                    - tanh_term(0.035, 0.9233, 0.05)
                    - tanh_term(0.0147, 0.5, 0.034)
                    - tanh_term(0.102, 0.194, 0.142)
                    - tanh_term(0.022, 0.9, 0.0164)
                    - tanh_term(0.011, 0.124, 0.0226)
                    + tanh_term(0.0155, 0.105, 0.029)
            }
            OcpCurve::LithiumCobaltOxide => {
                let affine = |a: f64, b: f64, s: f64| -> R { c::<R>(a) * (c::<R>(b) - c::<R>(s) * th).tanh() };
                affine(0.07645, 30.834, 54.4806)
                    + affine(2.1581, 52.294, 50.294)
                    - affine(0.14169, 11.0923, 19.8543)
                    + affine(0.2051, 1.4684, 5.4888)
                    + c::<R>(0.2531) * ((c::<R>(0.56478) - th) / c::<R>(0.1316)).tanh()
                    - c::<R>(0.02167) * ((th - c::<R>(0.525)) / c::<R>(0.006)).tanh()
                    + c::<R>(2.16216)
            }
            OcpCurve::GraphiteGaussian => {
                let g = |a: f64, mu: f64, s: f64| -> R {
                    let z = (th - c::<R>(mu)) / c::<R>(s);
                    c::<R>(a) * (-(z * z)).exp()
                };
                g(2.673022, -0.034828, 0.032734)
                    + g(0.062721, 0.036085, 0.024854)
                    + g(0.159337, 0.078792, 0.112443)
                    + g(0.064161, 0.302060, 0.187485)
                    + g(0.019294, 0.487684, 0.068516)
                    + g(0.081550, 0.747598, 0.671913)
            }
            OcpCurve::LcoGaussian => {
                let g = |a: f64, mu: f64, s: f64| -> R {
                    let z = (th - c::<R>(mu)) / c::<R>(s);
                    c::<R>(a) * (-(z * z)).exp()
                };
                g(4.558259, 0.154080, 0.748906)
                    + g(1.561895, 0.861132, 0.328293)
                    + g(0.058271, 0.888260, 0.024912)
                    + g(0.620818, 0.940724, 0.147502)
            }
            OcpCurve::Table(_) => unreachable!("tables evaluate through eval_d"),
        }
    }

    /// Value and derivative with respect to stoichiometry.
    pub fn eval_d(&self, theta: f64) -> Result<(f64, f64)> {
        let (lo, hi) = self.validated_range();
        if !(theta >= lo && theta <= hi) || !theta.is_finite() {
            return Err(Error::DomainError {
                curve: format!("{self:?}").chars().take(24).collect::<String>(),
                value: theta,
                lo,
                hi,
            });
        }
        match self {
            OcpCurve::Table(t) => t.eval_d(theta),
            _ => {
                let d = self.eval_generic(Dual::<1>::variable(theta, 0));
                Ok((d.val, d.der[0]))
            }
        }
    }
}

/// Concentration-dependent electrolyte transport coefficient.
#[derive(Debug, Clone, PartialEq)]
pub enum TransportCurve {
    /// `prefactor * exp(-decay * c/1000)`.
    Exponential { prefactor: f64, decay: f64 },
    /// Polynomial in `c/1000`, lowest order first.
    Polynomial(Vec<f64>),
    /// Sum of `coeff * (c/1000)^power` terms.
    PowerSeries(Vec<(f64, f64)>),
    Constant(f64),
    Table(TabulatedCurve),
}

impl TransportCurve {
    /// Electrolyte diffusivity of the reference LCO-graphite cell.
    pub fn marquis2019_diffusivity() -> Self {
        TransportCurve::Exponential {
            prefactor: 5.34e-10,
            decay: 0.65,
        }
    }

    /// Electrolyte conductivity of the reference LCO-graphite cell.
    pub fn marquis2019_conductivity() -> Self {
        TransportCurve::Polynomial(vec![0.0911, 1.9101, -1.0520, 0.1554])
    }

    /// Electrolyte conductivity of the commercial LCO cell.
    pub fn commercial_conductivity() -> Self {
        TransportCurve::PowerSeries(vec![(2.915, 1.0), (-2.238, 1.5), (0.1147, 3.0)])
    }

    /// Value and derivative with respect to concentration (mol/m^3).
    pub fn eval_d(&self, c: f64) -> Result<(f64, f64)> {
        match self {
            TransportCurve::Exponential { prefactor, decay } => {
                let v = prefactor * (-decay * c / 1000.0).exp();
                Ok((v, v * (-decay / 1000.0)))
            }
            TransportCurve::Polynomial(coeffs) => {
                let x = c / 1000.0;
                let mut v = 0.0;
                let mut d = 0.0;
                for (k, a) in coeffs.iter().enumerate() {
                    v += a * x.powi(k as i32);
                    if k > 0 {
                        d += a * (k as f64) * x.powi(k as i32 - 1) / 1000.0;
                    }
                }
                Ok((v, d))
            }
            TransportCurve::PowerSeries(terms) => {
                let x = c / 1000.0;
                let mut v = 0.0;
                let mut d = 0.0;
                for &(a, p) in terms {
                    v += a * x.powf(p);
                    d += a * p * x.powf(p - 1.0) / 1000.0;
                }
                Ok((v, d))
            }
            TransportCurve::Constant(v) => Ok((*v, 0.0)),
            TransportCurve::Table(t) => t.eval_d(c),
        }
    }
}

/// Electrode OCPs and electrolyte transport functions for one chemistry.
#[derive(Debug, Clone, PartialEq)]
pub struct MaterialFunctionSet {
    pub anode_ocp: OcpCurve,
    pub cathode_ocp: OcpCurve,
    /// Stoichiometry pre-scale applied inside the cathode OCP. Dataset
    /// specific; defaults to 1 for chemistries that do not need one.
    pub cathode_stoichiometry_prescale: f64,
    pub electrolyte_diffusivity: TransportCurve,
    pub electrolyte_conductivity: TransportCurve,
}

impl MaterialFunctionSet {
    /// Material functions of the reference LCO-graphite cell.
    pub fn marquis2019() -> Self {
        Self {
            anode_ocp: OcpCurve::GraphiteMcmb,
            cathode_ocp: OcpCurve::LithiumCobaltOxide,
            cathode_stoichiometry_prescale: 1.062,
            electrolyte_diffusivity: TransportCurve::marquis2019_diffusivity(),
            electrolyte_conductivity: TransportCurve::marquis2019_conductivity(),
        }
    }

    /// Material functions of the commercial LCO cell (Gaussian OCP fits).
    pub fn commercial_lco() -> Self {
        Self {
            anode_ocp: OcpCurve::GraphiteGaussian,
            cathode_ocp: OcpCurve::LcoGaussian,
            cathode_stoichiometry_prescale: 1.0,
            electrolyte_diffusivity: TransportCurve::Constant(1.93e-10),
            electrolyte_conductivity: TransportCurve::commercial_conductivity(),
        }
    }

    fn prescale(&self, electrode: Electrode) -> f64 {
        match electrode {
            Electrode::Anode => 1.0,
            Electrode::Cathode => self.cathode_stoichiometry_prescale,
        }
    }

    fn curve(&self, electrode: Electrode) -> &OcpCurve {
        match electrode {
            Electrode::Anode => &self.anode_ocp,
            Electrode::Cathode => &self.cathode_ocp,
        }
    }

    /// Open-circuit potential at a raw surface stoichiometry `c_surf/c_max`.
    /// The cathode pre-scale is applied internally.
    pub fn ocp(&self, electrode: Electrode, surface_stoichiometry: f64) -> Result<f64> {
        let th = self.prescale(electrode) * surface_stoichiometry;
        Ok(self.curve(electrode).eval_d(th)?.0)
    }

    /// OCP value and derivative with respect to the raw stoichiometry.
    pub fn ocp_d(&self, electrode: Electrode, surface_stoichiometry: f64) -> Result<(f64, f64)> {
        let p = self.prescale(electrode);
        let (v, d) = self.curve(electrode).eval_d(p * surface_stoichiometry)?;
        Ok((v, d * p))
    }
}

// ---------------------------------------------------------------------------
// Tabulated curves
// ---------------------------------------------------------------------------

/// Monotone cubic Hermite interpolant (Fritsch-Carlson slopes).
///
/// Extrapolation is a hard error: silent extrapolation corrupts gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct TabulatedCurve {
    xs: Vec<f64>,
    ys: Vec<f64>,
    slopes: Vec<f64>,
}

impl TabulatedCurve {
    pub fn new(xs: Vec<f64>, ys: Vec<f64>) -> Result<Self> {
        if xs.len() != ys.len() || xs.len() < 2 {
            return Err(Error::Structural(format!(
                "tabulated curve needs >= 2 matched samples, got {} x {}",
                xs.len(),
                ys.len()
            )));
        }
        if xs.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Structural(
                "tabulated curve abscissae must be strictly increasing".into(),
            ));
        }
        let n = xs.len();
        let mut deltas = Vec::with_capacity(n - 1);
        for i in 0..n - 1 {
            deltas.push((ys[i + 1] - ys[i]) / (xs[i + 1] - xs[i]));
        }
        let mut slopes = vec![0.0; n];
        slopes[0] = deltas[0];
        slopes[n - 1] = deltas[n - 2];
        for i in 1..n - 1 {
            slopes[i] = if deltas[i - 1] * deltas[i] <= 0.0 {
                0.0
            } else {
                // Harmonic mean weighted by interval widths keeps monotonicity.
                let h0 = xs[i] - xs[i - 1];
                let h1 = xs[i + 1] - xs[i];
                let w1 = 2.0 * h1 + h0;
                let w2 = h1 + 2.0 * h0;
                (w1 + w2) / (w1 / deltas[i - 1] + w2 / deltas[i])
            };
        }
        // Fritsch-Carlson limiter on the endpoint slopes.
        for (i, d) in [(0, deltas[0]), (n - 1, deltas[n - 2])] {
            if d == 0.0 {
                slopes[i] = 0.0;
            } else if slopes[i] / d > 3.0 {
                slopes[i] = 3.0 * d;
            }
        }
        Ok(Self { xs, ys, slopes })
    }

    /// Reads a two-column CSV (x, value); lines starting with '#' and a
    /// non-numeric header row are skipped.
    pub fn from_csv(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut cols = line.split(',');
            let (Some(a), Some(b)) = (cols.next(), cols.next()) else {
                continue;
            };
            match (a.trim().parse::<f64>(), b.trim().parse::<f64>()) {
                (Ok(x), Ok(y)) => {
                    xs.push(x);
                    ys.push(y);
                }
                _ => continue, // header row
            }
        }
        Self::new(xs, ys)
    }

    pub fn eval_d(&self, x: f64) -> Result<(f64, f64)> {
        let n = self.xs.len();
        if !(x >= self.xs[0] && x <= self.xs[n - 1]) {
            return Err(Error::DomainError {
                curve: "tabulated".into(),
                value: x,
                lo: self.xs[0],
                hi: self.xs[n - 1],
            });
        }
        let i = match self.xs.binary_search_by(|v| v.partial_cmp(&x).unwrap()) {
            Ok(k) => k.min(n - 2),
            Err(k) => k - 1,
        };
        let h = self.xs[i + 1] - self.xs[i];
        let t = (x - self.xs[i]) / h;
        let (y0, y1) = (self.ys[i], self.ys[i + 1]);
        let (m0, m1) = (self.slopes[i] * h, self.slopes[i + 1] * h);
        let h00 = 2.0 * t * t * t - 3.0 * t * t + 1.0;
        let h10 = t * t * t - 2.0 * t * t + t;
        let h01 = -2.0 * t * t * t + 3.0 * t * t;
        let h11 = t * t * t - t * t;
        let v = h00 * y0 + h10 * m0 + h01 * y1 + h11 * m1;
        let dh00 = 6.0 * t * t - 6.0 * t;
        let dh10 = 3.0 * t * t - 4.0 * t + 1.0;
        let dh01 = -6.0 * t * t + 6.0 * t;
        let dh11 = 3.0 * t * t - 2.0 * t;
        let d = (dh00 * y0 + dh10 * m0 + dh01 * y1 + dh11 * m1) / h;
        Ok((v, d))
    }
}

// ---------------------------------------------------------------------------
// Identifiable parameter handles and design-variable scaling
// ---------------------------------------------------------------------------

/// Handle to one identifiable scalar inside a [`ParameterSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamId {
    Bruggeman(Layer),
    TransferenceNumber,
    ReactionRate(Electrode),
    InitialConcentration(Electrode),
    SolidDiffusivity(Electrode),
}

impl ParamId {
    pub fn name(&self) -> String {
        fn layer(l: Layer) -> &'static str {
            match l {
                Layer::Anode => "anode",
                Layer::Separator => "separator",
                Layer::Cathode => "cathode",
            }
        }
        fn elec(e: Electrode) -> &'static str {
            match e {
                Electrode::Anode => "anode",
                Electrode::Cathode => "cathode",
            }
        }
        match self {
            ParamId::Bruggeman(l) => format!("bruggeman_{}", layer(*l)),
            ParamId::TransferenceNumber => "transference_number".into(),
            ParamId::ReactionRate(e) => format!("reaction_rate_{}", elec(*e)),
            ParamId::InitialConcentration(e) => format!("initial_concentration_{}", elec(*e)),
            ParamId::SolidDiffusivity(e) => format!("solid_diffusivity_{}", elec(*e)),
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        let id = match name {
            "bruggeman_anode" => ParamId::Bruggeman(Layer::Anode),
            "bruggeman_separator" => ParamId::Bruggeman(Layer::Separator),
            "bruggeman_cathode" => ParamId::Bruggeman(Layer::Cathode),
            "transference_number" => ParamId::TransferenceNumber,
            "reaction_rate_anode" => ParamId::ReactionRate(Electrode::Anode),
            "reaction_rate_cathode" => ParamId::ReactionRate(Electrode::Cathode),
            "initial_concentration_anode" => ParamId::InitialConcentration(Electrode::Anode),
            "initial_concentration_cathode" => ParamId::InitialConcentration(Electrode::Cathode),
            "solid_diffusivity_anode" => ParamId::SolidDiffusivity(Electrode::Anode),
            "solid_diffusivity_cathode" => ParamId::SolidDiffusivity(Electrode::Cathode),
            other => {
                return Err(Error::Config(format!(
                    "unknown identifiable parameter `{other}`"
                )))
            }
        };
        Ok(id)
    }

    pub fn get(&self, p: &ParameterSet) -> f64 {
        match self {
            ParamId::Bruggeman(Layer::Anode) => p.anode.bruggeman,
            ParamId::Bruggeman(Layer::Separator) => p.separator.bruggeman,
            ParamId::Bruggeman(Layer::Cathode) => p.cathode.bruggeman,
            ParamId::TransferenceNumber => p.cell.transference_number,
            ParamId::ReactionRate(e) => p.electrode(*e).reaction_rate_constant,
            ParamId::InitialConcentration(e) => p.electrode(*e).initial_lithium_concentration,
            ParamId::SolidDiffusivity(e) => p.electrode(*e).solid_diffusivity,
        }
    }

    pub fn set(&self, p: &mut ParameterSet, v: f64) {
        match self {
            ParamId::Bruggeman(Layer::Anode) => p.anode.bruggeman = v,
            ParamId::Bruggeman(Layer::Separator) => p.separator.bruggeman = v,
            ParamId::Bruggeman(Layer::Cathode) => p.cathode.bruggeman = v,
            ParamId::TransferenceNumber => p.cell.transference_number = v,
            ParamId::ReactionRate(e) => p.electrode_mut(*e).reaction_rate_constant = v,
            ParamId::InitialConcentration(e) => {
                p.electrode_mut(*e).initial_lithium_concentration = v
            }
            ParamId::SolidDiffusivity(e) => p.electrode_mut(*e).solid_diffusivity = v,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScaleKind {
    Log,
    Linear,
}

/// One identified parameter with its bounds and scaling kind.
#[derive(Debug, Clone)]
pub struct ScaledParam {
    pub id: ParamId,
    pub lower: f64,
    pub upper: f64,
    pub kind: ScaleKind,
}

/// Bijective map between design variables `w` in [0,1]^L and parameters.
///
/// `w = 1` maps to the lower bound and `w = 0` to the upper bound, for both
/// scaling kinds.
#[derive(Debug, Clone)]
pub struct ScalingSpec {
    pub entries: Vec<ScaledParam>,
}

impl ScalingSpec {
    pub fn new(entries: Vec<ScaledParam>) -> Result<Self> {
        for e in &entries {
            if !(e.lower < e.upper) {
                return Err(Error::InvalidParameter {
                    name: "scaling bounds",
                    value: e.lower,
                    reason: "lower bound must be strictly below upper bound",
                });
            }
            if e.kind == ScaleKind::Log && e.lower <= 0.0 {
                return Err(Error::InvalidParameter {
                    name: "scaling bounds",
                    value: e.lower,
                    reason: "log scaling requires strictly positive bounds",
                });
            }
        }
        Ok(Self { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Maps design variables to parameter values. Components outside [0, 1]
    /// are clamped (optimizer line searches may probe slightly outside the
    /// box); the indices of clamped components are reported back.
    pub fn scale(&self, w: &[f64]) -> Result<(Vec<f64>, Vec<usize>)> {
        if w.len() != self.entries.len() {
            return Err(Error::Structural(format!(
                "design vector length {} does not match scaling spec {}",
                w.len(),
                self.entries.len()
            )));
        }
        let mut theta = Vec::with_capacity(w.len());
        let mut clamped = Vec::new();
        for (i, (wi, e)) in w.iter().zip(&self.entries).enumerate() {
            let mut v = *wi;
            if !(0.0..=1.0).contains(&v) {
                v = v.clamp(0.0, 1.0);
                clamped.push(i);
            }
            let t = match e.kind {
                ScaleKind::Log => (v * e.lower.ln() + (1.0 - v) * e.upper.ln()).exp(),
                ScaleKind::Linear => v * e.lower + (1.0 - v) * e.upper,
            };
            theta.push(t);
        }
        Ok((theta, clamped))
    }

    /// Exact inverse of [`ScalingSpec::scale`].
    pub fn unscale(&self, theta: &[f64]) -> Result<Vec<f64>> {
        if theta.len() != self.entries.len() {
            return Err(Error::Structural(format!(
                "parameter vector length {} does not match scaling spec {}",
                theta.len(),
                self.entries.len()
            )));
        }
        Ok(theta
            .iter()
            .zip(&self.entries)
            .map(|(t, e)| match e.kind {
                ScaleKind::Log => (e.upper.ln() - t.ln()) / (e.upper.ln() - e.lower.ln()),
                ScaleKind::Linear => (e.upper - t) / (e.upper - e.lower),
            })
            .collect())
    }

    /// Chain factors `d theta_i / d w_i` at the given parameter values.
    pub fn dtheta_dw(&self, theta: &[f64]) -> Vec<f64> {
        theta
            .iter()
            .zip(&self.entries)
            .map(|(t, e)| match e.kind {
                ScaleKind::Log => t * (e.lower.ln() - e.upper.ln()),
                ScaleKind::Linear => e.lower - e.upper,
            })
            .collect()
    }

    /// Applies `theta` onto a copy of the base parameter set.
    pub fn apply(&self, base: &ParameterSet, theta: &[f64]) -> ParameterSet {
        let mut p = base.clone();
        for (e, t) in self.entries.iter().zip(theta) {
            e.id.set(&mut p, *t);
        }
        p
    }
}

// ---------------------------------------------------------------------------

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn bruggeman_identity_at_full_porosity() {
        let kappa = 1.17;
        assert_eq!(effective_transport(1.0, 1.5, kappa).unwrap(), kappa);
    }

    #[test]
    fn bruggeman_benchmark_anode_factor() {
        // 0.3^1.5 computed directly as the oracle
        let d_e = 5.34e-10;
        let expected = 0.3_f64.powf(1.5) * d_e;
        let got = effective_transport(0.3, 1.5, d_e).unwrap();
        assert!((got - expected).abs() < 1e-25);
        assert!((got / d_e - 0.164317).abs() < 1e-6);
    }

    #[test]
    fn bruggeman_rejects_bad_inputs() {
        assert!(effective_transport(0.0, 1.5, 1.0).is_err());
        assert!(effective_transport(-0.1, 1.5, 1.0).is_err());
        assert!(effective_transport(0.5, 1.5, 0.0).is_err());
    }

    /// Independent term-by-term evaluation of the graphite OCP series,
    /// written out separately from the production formula.
    fn graphite_ocp_oracle(th: f64) -> f64 {
        let t = |x: f64| x.tanh();
        0.194 + 1.5 * (-120.0 * th).exp()
            + 0.0351 * t((th - 0.286) / 0.083)
            - 0.0045 * t((th - 0.849) / 0.119)
            - 0.035 * t((th - 0.9233) / 0.05)
            - 0.0147 * t((th - 0.5) / 0.034)
            - 0.102 * t((th - 0.194) / 0.142)
            - 0.022 * t((th - 0.9) / 0.0164)
            - 0.011 * t((th - 0.124) / 0.0226)
            + 0.0155 * t((th - 0.105) / 0.029)
    }

    fn lco_ocp_oracle(th: f64) -> f64 {
        let t = |x: f64| x.tanh();
        0.07645 * t(30.834 - 54.4806 * th) + 2.1581 * t(52.294 - 50.294 * th)
            - 0.14169 * t(11.0923 - 19.8543 * th)
            + 0.2051 * t(1.4684 - 5.4888 * th)
            + 0.2531 * t((0.56478 - th) / 0.1316)
            - 0.02167 * t((th - 0.525) / 0.006)
            + 2.16216
    }

    #[test]
    fn anode_ocp_at_benchmark_stoichiometry() {
        let mats = MaterialFunctionSet::marquis2019();
        let v = mats.ocp(Electrode::Anode, 0.8).unwrap();
        assert!((v - graphite_ocp_oracle(0.8)).abs() < 1e-14);
        assert!((v - 0.175).abs() < 5e-3, "U_oc,a(0.8) = {v}");
    }

    #[test]
    fn cathode_ocp_with_prescale() {
        let mats = MaterialFunctionSet::marquis2019();
        let stoich = 30731.0 / 51218.0;
        let v = mats.ocp(Electrode::Cathode, stoich).unwrap();
        assert!((v - lco_ocp_oracle(1.062 * stoich)).abs() < 1e-14);
        assert!((v - 4.027).abs() < 5e-3, "U_oc,c = {v}");
    }

    #[test]
    fn tanh_saturation_limit() {
        // Far along the curve every tanh term saturates; the sum approaches
        // the combination of limiting constants.
        let mats = MaterialFunctionSet::marquis2019();
        let v = mats.ocp(Electrode::Anode, 0.999).unwrap();
        let limit = 0.194 + 0.0351 - 0.0045 - 0.035 - 0.0147 - 0.102 - 0.022 - 0.011 + 0.0155;
        // th = 0.999 saturates all but the (0.9233, 0.05) and (0.9, 0.0164) terms.
        let residual_slack = 0.035 * (1.0 - ((0.999f64 - 0.9233) / 0.05).tanh())
            + 0.022 * (1.0 - ((0.999f64 - 0.9) / 0.0164).tanh());
        assert!((v - limit).abs() < residual_slack + 1e-3, "v = {v}, limit = {limit}");
    }

    #[test]
    fn ocp_domain_error_carries_value() {
        let mats = MaterialFunctionSet::marquis2019();
        match mats.ocp(Electrode::Anode, 1.7) {
            Err(Error::DomainError { value, .. }) => assert_eq!(value, 1.7),
            other => panic!("expected domain error, got {other:?}"),
        }
    }

    #[test]
    fn ocp_derivative_matches_finite_difference() {
        let mats = MaterialFunctionSet::marquis2019();
        for e in Electrode::BOTH {
            for &th in &[0.2, 0.5, 0.8] {
                let (_, d) = mats.ocp_d(e, th).unwrap();
                let h = 1e-6;
                let fd = (mats.ocp(e, th + h).unwrap() - mats.ocp(e, th - h).unwrap()) / (2.0 * h);
                assert!((d - fd).abs() < 1e-6, "{e:?} at {th}: {d} vs {fd}");
            }
        }
    }

    #[test]
    fn exchange_current_vanishes_at_stoichiometry_limits() {
        assert_eq!(exchange_current(1e-10, 0.0, 1000.0, 500.0, 96485.0, 0).unwrap(), 0.0);
        assert_eq!(
            exchange_current(1e-10, 1000.0, 1000.0, 500.0, 96485.0, 0).unwrap(),
            0.0
        );
    }

    #[test]
    fn exchange_current_benchmark_value() {
        let p = ParameterSet::marquis2019();
        let c_max = p.anode.max_lithium_concentration;
        let i0 = exchange_current(
            p.anode.reaction_rate_constant,
            c_max / 2.0,
            c_max,
            1000.0,
            p.cell.faraday,
            0,
        )
        .unwrap();
        // direct formula evaluation: k F (c/2) sqrt(c_e)
        let expected = 2.0729e-10 * 96485.0 * (c_max / 2.0) * 1000.0_f64.sqrt();
        assert!((i0 - expected).abs() < 1e-12);
        assert!((i0 - 7.90).abs() < 0.01, "i0 = {i0}");
    }

    #[test]
    fn exchange_current_saturation_error_names_node() {
        match exchange_current(1e-10, 1200.0, 1000.0, 500.0, 96485.0, 42) {
            Err(Error::Saturation { node, .. }) => assert_eq!(node, 42),
            other => panic!("expected saturation error, got {other:?}"),
        }
    }

    #[test]
    fn scaling_endpoints_and_midpoints() {
        let spec = ScalingSpec::new(vec![
            ScaledParam {
                id: ParamId::ReactionRate(Electrode::Anode),
                lower: 5e-12,
                upper: 5e-10,
                kind: ScaleKind::Log,
            },
            ScaledParam {
                id: ParamId::Bruggeman(Layer::Anode),
                lower: 1.2,
                upper: 2.5,
                kind: ScaleKind::Linear,
            },
        ])
        .unwrap();
        let (theta, clamped) = spec.scale(&[1.0, 1.0]).unwrap();
        assert!(clamped.is_empty());
        assert!((theta[0] - 5e-12).abs() / 5e-12 < 1e-14);
        assert!((theta[1] - 1.2).abs() < 1e-14);

        let (theta, _) = spec.scale(&[0.5, 0.5]).unwrap();
        assert!((theta[0] - 5e-11).abs() / 5e-11 < 1e-12, "geometric mean");
        assert!((theta[1] - 1.85).abs() < 1e-14, "arithmetic mean");
    }

    #[test]
    fn scaling_clamps_out_of_box_components() {
        let spec = ScalingSpec::new(vec![ScaledParam {
            id: ParamId::TransferenceNumber,
            lower: 0.2,
            upper: 0.5,
            kind: ScaleKind::Linear,
        }])
        .unwrap();
        let (theta, clamped) = spec.scale(&[1.05]).unwrap();
        assert_eq!(clamped, vec![0]);
        assert!((theta[0] - 0.2).abs() < 1e-14);
    }

    #[test]
    fn log_scaling_rejects_nonpositive_bounds() {
        assert!(ScalingSpec::new(vec![ScaledParam {
            id: ParamId::ReactionRate(Electrode::Anode),
            lower: -1e-12,
            upper: 5e-10,
            kind: ScaleKind::Log,
        }])
        .is_err());
    }

    #[test]
    fn material_functions_finite_over_operating_ranges() {
        let mats = MaterialFunctionSet::marquis2019();
        let mut c = 100.0;
        while c <= 3000.0 {
            let (d, _) = mats.electrolyte_diffusivity.eval_d(c).unwrap();
            let (k, _) = mats.electrolyte_conductivity.eval_d(c).unwrap();
            assert!(d > 0.0 && d.is_finite(), "D_e({c}) = {d}");
            assert!(k > 0.0 && k.is_finite(), "kappa({c}) = {k}");
            c += 50.0;
        }
        let mut th = 0.01;
        while th <= 0.99 {
            assert!(mats.ocp(Electrode::Anode, th).unwrap().is_finite());
            assert!(mats.ocp(Electrode::Cathode, th).unwrap().is_finite());
            th += 0.01;
        }
    }

    #[test]
    fn tabulated_curve_interpolates_and_refuses_extrapolation() {
        let t = TabulatedCurve::new(vec![0.0, 1.0, 2.0, 3.0], vec![1.0, 2.0, 2.5, 2.6]).unwrap();
        let (v, _) = t.eval_d(1.0).unwrap();
        assert!((v - 2.0).abs() < 1e-14);
        let (v, d) = t.eval_d(1.5).unwrap();
        assert!(v > 2.0 && v < 2.5, "monotone inside the cell: {v}");
        assert!(d > 0.0);
        assert!(t.eval_d(-0.1).is_err());
        assert!(t.eval_d(3.1).is_err());
    }

    #[test]
    fn derived_surface_area_tracks_sources() {
        let mut p = ParameterSet::marquis2019();
        let a0 = p.anode.specific_surface_area();
        assert!((a0 - 3.0 * 0.6 / 10e-6).abs() < 1e-6);
        p.anode.particle_radius = 5e-6;
        assert!((p.anode.specific_surface_area() - 2.0 * a0).abs() < 1e-3);
    }

    #[test]
    fn validate_accepts_benchmark_and_rejects_bad_fractions() {
        let mut p = ParameterSet::marquis2019();
        p.validate().unwrap();
        p.anode.electrolyte_volume_fraction = 0.9; // 0.9 + 0.6 > 1
        assert!(p.validate().is_err());
    }

    proptest! {
        #[test]
        fn scale_unscale_roundtrip(w in proptest::collection::vec(0.0f64..=1.0, 4)) {
            let spec = ScalingSpec::new(vec![
                ScaledParam { id: ParamId::ReactionRate(Electrode::Anode), lower: 5e-12, upper: 5e-10, kind: ScaleKind::Log },
                ScaledParam { id: ParamId::ReactionRate(Electrode::Cathode), lower: 1e-13, upper: 1e-9, kind: ScaleKind::Log },
                ScaledParam { id: ParamId::Bruggeman(Layer::Cathode), lower: 1.2, upper: 2.5, kind: ScaleKind::Linear },
                ScaledParam { id: ParamId::TransferenceNumber, lower: 0.2, upper: 0.5, kind: ScaleKind::Linear },
            ]).unwrap();
            let (theta, _) = spec.scale(&w).unwrap();
            let back = spec.unscale(&theta).unwrap();
            for (a, b) in w.iter().zip(&back) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn effective_transport_monotone_in_volume_fraction(
            eps in 0.05f64..0.95,
            delta in 0.001f64..0.05,
            beta in 0.5f64..3.0,
        ) {
            let lo = effective_transport(eps, beta, 1.0).unwrap();
            let hi = effective_transport(eps + delta, beta, 1.0).unwrap();
            prop_assert!(hi > lo);
            let full = effective_transport(1.0, beta, 1.0).unwrap();
            prop_assert!((full - 1.0).abs() < 1e-15);
        }

        #[test]
        fn exchange_current_symmetric_about_half_filling(c in 1.0f64..999.0) {
            let c_max = 1000.0;
            let a = exchange_current(1e-10, c, c_max, 800.0, 96485.0, 0).unwrap();
            let b = exchange_current(1e-10, c_max - c, c_max, 800.0, 96485.0, 0).unwrap();
            prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1e-30));
        }
    }
}
