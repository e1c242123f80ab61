use dfn::ident::{Evaluator, IdentificationProblem, OptimizerSettings, RateCase, Stage};
use dfn::mesh::GeometrySpec;
use dfn::model::Model;
use dfn::params::*;
use dfn::solver::{self, DriveProtocol, SolverSettings};

fn main() {
    let model = Model::new(
        ParameterSet::marquis2019(),
        MaterialFunctionSet::marquis2019(),
        &GeometrySpec::one_dimensional(8, 4, 8),
        8,
    )
    .unwrap();
    let p = ParameterSet::marquis2019();
    let entries = vec![
        ScaledParam { id: ParamId::Bruggeman(Layer::Anode), lower: 1.2, upper: 2.5, kind: ScaleKind::Linear },
        ScaledParam { id: ParamId::Bruggeman(Layer::Cathode), lower: 1.2, upper: 2.5, kind: ScaleKind::Linear },
        ScaledParam { id: ParamId::TransferenceNumber, lower: 0.2, upper: 0.5, kind: ScaleKind::Linear },
        ScaledParam { id: ParamId::ReactionRate(Electrode::Anode), lower: 5e-12, upper: 5e-10, kind: ScaleKind::Log },
        ScaledParam { id: ParamId::ReactionRate(Electrode::Cathode), lower: 5e-12, upper: 5e-10, kind: ScaleKind::Log },
        ScaledParam { id: ParamId::InitialConcentration(Electrode::Anode), lower: 0.6 * p.anode.max_lithium_concentration, upper: 0.9 * p.anode.max_lithium_concentration, kind: ScaleKind::Linear },
        ScaledParam { id: ParamId::InitialConcentration(Electrode::Cathode), lower: 0.4 * p.cathode.max_lithium_concentration, upper: 0.7 * p.cathode.max_lithium_concentration, kind: ScaleKind::Linear },
    ];
    let scaling = ScalingSpec::new(entries).unwrap();
    let stages = vec![Stage::Kinetic, Stage::Kinetic, Stage::Kinetic, Stage::Kinetic, Stage::Kinetic, Stage::Thermodynamic, Stage::Thermodynamic];
    let settings = SolverSettings::default();
    let mut rates = Vec::new();
    for (label, rate) in [("0.5C", 0.5), ("1.0C", 1.0), ("1.5C", 1.5), ("2.0C", 2.0)] {
        let generation = DriveProtocol { current_density: 24.0 * rate, dt: 30.0, max_steps: 2000, cutoff_voltage: Some(3.105), end_time: None };
        let tape = solver::run_forward(&model, &generation, &settings).unwrap();
        let horizon = *tape.times.last().unwrap();
        rates.push(RateCase {
            label: label.into(),
            protocol: DriveProtocol { current_density: 24.0 * rate, dt: 30.0, max_steps: 2000, cutoff_voltage: Some(2.5), end_time: Some(horizon) },
            reference: tape.times.iter().zip(&tape.voltages).map(|(&t, &v)| (t, v)).collect(),
        });
    }
    let problem = IdentificationProblem {
        model: model.clone(), scaling, stages, rates,
        optimizer: OptimizerSettings { max_iterations: 200, objective_tolerance: 1e-6, ..Default::default() },
        solver: settings.clone(), penalty_voltage: 0.05, stage_iteration_cap: 10, stage_objective_tolerance: 0.010,
    };
    let w_stag = vec![0.4734214541466597, 0.9943831565428877, 0.2758709547617332, 0.8482178260109521, 0.4101635817905458, 0.4384583256408605, 0.33438406824940153];
    let mut eval = Evaluator::new(&problem);
    let out = eval.objective(&w_stag).unwrap();
    println!("objective at stagnation: {:.4e}", out.objective);
    for (k, rate) in problem.rates.iter().enumerate() {
        let tape = &out.tapes[k];
        let horizon = rate.protocol.end_time.unwrap();
        let t_end = *tape.times.last().unwrap();
        let missing = rate.reference.iter().filter(|(t, _)| *t > t_end * (1.0 + 1e-12)).count();
        println!(
            "{}: rmse {:.3} mV, tape_end {:.0}/{:.0} s, missing {}/{} samples, termination {:?}",
            rate.label, out.per_rate_rmse[k] * 1e3, t_end, horizon, missing, rate.reference.len(), tape.termination
        );
    }
}
