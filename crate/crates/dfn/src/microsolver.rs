//! Microscopic particle diffusion: constant per-electrode operator, one-time
//! surface-adjoint precomputation, and the cheap per-iteration surface update.
//!
//! The radial weak form carries an r^2 weight, so the backward-Euler system
//! for one particle is `(M/dt + D_s K) (x - x_prev) = -(D_s K x_prev + load)`
//! with `load = r_s^2 j_s` at the surface node. The system is linear in x,
//! so a single factorized solve per node is exact; the surface adjoint
//! reduces it further to a dot product per Newton iteration.

use crate::error::Result;
use crate::linalg::{TriDiag, TriDiagFactor};
use crate::mesh::MicroMesh;

/// 3-point Gauss rule: exact for the degree-4 r^2-weighted mass integrand.
const GAUSS3: [(f64, f64); 3] = [
    (-0.774596669241483, 0.555555555555556),
    (0.0, 0.888888888888889),
    (0.774596669241483, 0.555555555555556),
];

/// Assembled micro operator for one electrode subdomain at one step size.
#[derive(Debug, Clone)]
pub struct MicroOperator {
    /// r^2-weighted mass matrix.
    pub mass: TriDiag,
    /// r^2-weighted stiffness with unit diffusivity.
    pub stiff_unit: TriDiag,
    /// Backward-Euler Jacobian `M/dt + D_s K`.
    pub jacobian: TriDiag,
    factor: TriDiagFactor,
    /// Surface adjoint: solves `J^T lambda = L_surf` once per electrode.
    pub lambda_surf: Vec<f64>,
    /// r^2-weighted content weights `M 1` (integrates r^2 c over the particle).
    pub content_weights: Vec<f64>,
    pub d_s: f64,
    pub dt: f64,
    r_s: f64,
}

impl MicroOperator {
    pub fn build(mesh: &MicroMesh, d_s: f64, dt: f64) -> Result<Self> {
        assert!(d_s > 0.0 && dt > 0.0, "need positive diffusivity and step");
        let n = mesh.n_nodes();
        let mut mass = TriDiag::zeros(n);
        let mut stiff = TriDiag::zeros(n);
        for e in 0..n - 1 {
            let (ra, rb) = (mesh.radii[e], mesh.radii[e + 1]);
            let h = rb - ra;
            let mut me = [[0.0; 2]; 2];
            let mut ke = [[0.0; 2]; 2];
            for &(xi, w) in &GAUSS3 {
                let r = 0.5 * (ra + rb) + 0.5 * h * xi;
                let psi = [0.5 * (1.0 - xi), 0.5 * (1.0 + xi)];
                let dpsi = [-1.0 / h, 1.0 / h];
                let wq = w * 0.5 * h * r * r;
                for a in 0..2 {
                    for b in 0..2 {
                        me[a][b] += wq * psi[a] * psi[b];
                        ke[a][b] += wq * dpsi[a] * dpsi[b];
                    }
                }
            }
            mass.diag[e] += me[0][0];
            mass.diag[e + 1] += me[1][1];
            mass.off[e] += me[0][1];
            stiff.diag[e] += ke[0][0];
            stiff.diag[e + 1] += ke[1][1];
            stiff.off[e] += ke[0][1];
        }
        let jacobian = mass.axpby(1.0 / dt, &stiff, d_s);
        let factor = jacobian.factorize_spd()?;
        // J is symmetric, so the transposed system shares the factorization.
        let mut locate = vec![0.0; n];
        locate[n - 1] = 1.0;
        let lambda_surf = factor.solve(&locate);
        let content_weights = mass.matvec(&vec![1.0; n]);
        Ok(Self {
            mass,
            stiff_unit: stiff,
            jacobian,
            factor,
            lambda_surf,
            content_weights,
            d_s,
            dt,
            r_s: mesh.particle_radius(),
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.mass.n()
    }

    pub fn particle_radius(&self) -> f64 {
        self.r_s
    }

    /// Coefficient of j_s in the surface flux load, `r_s^2`.
    pub fn surface_load_scale(&self) -> f64 {
        self.r_s * self.r_s
    }

    /// Micro residual `M (x - x_prev)/dt + D_s K x + e_surf r_s^2 j`.
    pub fn residual(&self, x: &[f64], x_prev: &[f64], j_s: f64) -> Vec<f64> {
        let n = self.n_nodes();
        let mx = self.mass.matvec(x);
        let mp = self.mass.matvec(x_prev);
        let kx = self.stiff_unit.matvec(x);
        let mut r: Vec<f64> = (0..n)
            .map(|i| (mx[i] - mp[i]) / self.dt + self.d_s * kx[i])
            .collect();
        r[n - 1] += self.surface_load_scale() * j_s;
        r
    }

    /// Per-step precomputation: the flux-independent part of the surface
    /// update, `L^T x_prev - lambda^T r_I(x_prev)`.
    pub fn precompute_surface(&self, x_prev: &[f64]) -> f64 {
        let r1 = self.stiff_unit.matvec(x_prev);
        let mut acc = x_prev[self.n_nodes() - 1];
        for (l, r) in self.lambda_surf.iter().zip(&r1) {
            acc -= l * (self.d_s * r);
        }
        acc
    }

    /// Surface concentration for a flux iterate, given the precomputed part.
    pub fn surface_fast(&self, precomputed: f64, j_s: f64) -> f64 {
        precomputed + self.flux_sensitivity() * j_s
    }

    /// Constant sensitivity `d c_surf / d j_s = -lambda_surf[surf] r_s^2`.
    pub fn flux_sensitivity(&self) -> f64 {
        -self.lambda_surf[self.n_nodes() - 1] * self.surface_load_scale()
    }

    /// Full radial profile at the new step by one factorized solve.
    pub fn recover(&self, x_prev: &[f64], j_s: f64) -> Vec<f64> {
        let rhs = self.residual(x_prev, x_prev, j_s);
        let dx = self.factor.solve(&rhs);
        x_prev.iter().zip(&dx).map(|(x, d)| x - d).collect()
    }

    /// Solves `J y = b` (J is symmetric, so this is also the transposed solve).
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        self.factor.solve(b)
    }

    /// r^2-weighted lithium content, `integral(r^2 c dr)`.
    pub fn content(&self, x: &[f64]) -> f64 {
        self.content_weights.iter().zip(x).map(|(w, c)| w * c).sum()
    }

    /// Volume-mean particle concentration, `3/r_s^3 integral(r^2 c dr)`.
    pub fn mean_concentration(&self, x: &[f64]) -> f64 {
        3.0 / (self.r_s * self.r_s * self.r_s) * self.content(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn benchmark_anode_op(dt: f64) -> MicroOperator {
        let mesh = MicroMesh::uniform(10e-6, 10).unwrap();
        MicroOperator::build(&mesh, 3.9e-14, dt).unwrap()
    }

    #[test]
    fn one_element_operator_matches_hand_integration() {
        // On [0, h]: M = h^3 [[1/30, 1/20], [1/20, 1/5]], K = D h/3 [[1,-1],[-1,1]]
        let h = 2e-6;
        let d = 1e-13;
        let dt = 7.0;
        let mesh = MicroMesh::uniform(h, 1).unwrap();
        let op = MicroOperator::build(&mesh, d, dt).unwrap();
        let h3 = h * h * h;
        let expect = [
            [h3 / (30.0 * dt) + d * h / 3.0, h3 / (20.0 * dt) - d * h / 3.0],
            [h3 / (20.0 * dt) - d * h / 3.0, h3 / (5.0 * dt) + d * h / 3.0],
        ];
        assert!((op.jacobian.diag[0] - expect[0][0]).abs() < 1e-30 + 1e-12 * expect[0][0].abs());
        assert!((op.jacobian.off[0] - expect[0][1]).abs() < 1e-30 + 1e-12 * expect[0][1].abs());
        assert!((op.jacobian.diag[1] - expect[1][1]).abs() < 1e-30 + 1e-12 * expect[1][1].abs());
    }

    #[test]
    fn surface_adjoint_satisfies_defining_equation() {
        let op = benchmark_anode_op(10.0);
        let jt_lambda = op.jacobian.matvec(&op.lambda_surf); // symmetric: J^T = J
        for (i, v) in jt_lambda.iter().enumerate() {
            let want = if i == op.n_nodes() - 1 { 1.0 } else { 0.0 };
            assert!(
                (v - want).abs() < 1e-12,
                "component {i}: {v} (residual above 1e-12)"
            );
        }
    }

    #[test]
    fn benchmark_operator_is_spd() {
        // LDL^T with all-positive pivots succeeding is the SPD certificate.
        let op = benchmark_anode_op(10.0);
        op.jacobian.factorize_spd().unwrap();
        assert!(op.flux_sensitivity() < 0.0, "outflow must lower the surface value");
    }

    #[test]
    fn equilibrium_particle_is_a_fixed_point() {
        let op = benchmark_anode_op(30.0);
        let x_prev = vec![19987.0; op.n_nodes()];
        let pre = op.precompute_surface(&x_prev);
        assert!((op.surface_fast(pre, 0.0) - 19987.0).abs() < 1e-9 * 19987.0);
        let x = op.recover(&x_prev, 0.0);
        for v in &x {
            assert!((v - 19987.0).abs() < 1e-8, "profile drifted: {v}");
        }
    }

    #[test]
    fn fast_path_matches_direct_solve() {
        let op = benchmark_anode_op(30.0);
        let mut seed = 0x9e3779b97f4a7c15u64;
        let mut rng = move || {
            seed ^= seed << 13;
            seed ^= seed >> 7;
            seed ^= seed << 17;
            (seed >> 11) as f64 / (1u64 << 53) as f64
        };
        for _ in 0..200 {
            let x_prev: Vec<f64> = (0..op.n_nodes()).map(|_| 1000.0 + 23000.0 * rng()).collect();
            let j = 2e-5 * (rng() - 0.5);
            let direct = op.recover(&x_prev, j);
            let fast = op.surface_fast(op.precompute_surface(&x_prev), j);
            let rel = (fast - direct[op.n_nodes() - 1]).abs() / direct[op.n_nodes() - 1].abs();
            assert!(rel <= 1e-10, "fast/direct mismatch: {rel}");
        }
    }

    #[test]
    fn flux_sensitivity_matches_finite_difference() {
        let op = benchmark_anode_op(30.0);
        let x_prev: Vec<f64> = (0..op.n_nodes()).map(|i| 18000.0 + 100.0 * i as f64).collect();
        let pre = op.precompute_surface(&x_prev);
        let j = 1.3e-5;
        let h = 1e-11;
        let fd = (op.surface_fast(pre, j + h) - op.surface_fast(pre, j - h)) / (2.0 * h);
        let rel = (op.flux_sensitivity() - fd).abs() / fd.abs();
        assert!(rel <= 1e-8, "sensitivity mismatch: {rel}");
    }

    #[test]
    fn discrete_particle_mass_balance() {
        let op = benchmark_anode_op(20.0);
        let mut x = vec![19987.0; op.n_nodes()];
        let j = 1.1e-5;
        for _ in 0..5 {
            let next = op.recover(&x, j);
            let change = op.content(&next) - op.content(&x);
            let expected = -op.surface_load_scale() * j * op.dt;
            assert!(
                ((change - expected) / expected).abs() < 1e-10,
                "content change {change} vs flux integral {expected}"
            );
            x = next;
        }
    }

    #[test]
    fn deintercalation_depletes_toward_surface() {
        let op = benchmark_anode_op(30.0);
        let x_prev = vec![19987.0; op.n_nodes()];
        let x = op.recover(&x_prev, 1e-5);
        for w in x.windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "profile must decrease outward: {w:?}");
        }
        assert!(x[op.n_nodes() - 1] < 19987.0);
    }

    #[test]
    fn step_size_changes_operator() {
        let a = benchmark_anode_op(10.0);
        let b = benchmark_anode_op(5.0);
        assert!((a.jacobian.diag[0] - b.jacobian.diag[0]).abs() > 0.0);
        assert_eq!(a.mass.diag, b.mass.diag); // mass itself is dt-independent
    }
}
