//! Command-line driver binding configuration files to forward simulation,
//! gradient checking, parameter identification, and reference-data export.
//!
//! Exit codes: 0 success, 1 usage/config error, 2 solver error,
//! 3 gradient-check threshold failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};

use dfn::config::RunConfig;
use dfn::csvio::{self, FileMeta, GradcheckRow};
use dfn::error::Error;
use dfn::ident::{self, Evaluator, IdentificationProblem, RateCase};
use dfn::solver;

#[derive(Parser)]
#[command(
    name = "dfnsim",
    version,
    about = "Finite-element DFN battery simulation with adjoint parameter gradients"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a constant-current simulation and write the voltage trace
    Forward {
        /// Configuration file (TOML)
        config: PathBuf,
        /// Override the applied current density (A/m^2, positive = discharge)
        #[arg(long)]
        current: Option<f64>,
        /// Override the time step (s)
        #[arg(long)]
        dt: Option<f64>,
        /// Override the output directory
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Compare adjoint gradients against central finite differences
    Gradcheck {
        config: PathBuf,
        /// Relative finite-difference step per parameter
        #[arg(long)]
        fd_step: Option<f64>,
        /// Pass threshold on the relative error
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Identify parameters against reference voltage traces
    Identify {
        config: PathBuf,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Generate reference voltage traces at the configured rates
    MakeReference {
        config: PathBuf,
        /// Additive Gaussian noise standard deviation (V)
        #[arg(long)]
        noise_sigma: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let code = match cli.cmd {
        Cmd::Forward {
            config,
            current,
            dt,
            output,
        } => cmd_forward(&config, current, dt, output),
        Cmd::Gradcheck {
            config,
            fd_step,
            threshold,
            output,
        } => cmd_gradcheck(&config, fd_step, threshold, output),
        Cmd::Identify { config, output } => cmd_identify(&config, output),
        Cmd::MakeReference {
            config,
            noise_sigma,
            seed,
        } => cmd_make_reference(&config, noise_sigma, seed),
    };
    match code {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) | Error::InvalidParameter { .. } | Error::Structural(_) => {
                    ExitCode::from(1)
                }
                _ => ExitCode::from(2),
            }
        }
    }
}

fn cmd_forward(
    config: &Path,
    current: Option<f64>,
    dt: Option<f64>,
    output: Option<PathBuf>,
) -> Result<ExitCode, Error> {
    let cfg = RunConfig::load(config)?;
    let mut protocol = cfg
        .protocol
        .clone()
        .ok_or_else(|| Error::Config("config has no [protocol] section".into()))?;
    if let Some(c) = current {
        protocol.current_density = c;
    }
    if let Some(d) = dt {
        protocol.dt = d;
    }
    let out_dir = output.unwrap_or_else(|| cfg.output_dir.clone());
    let meta = FileMeta {
        config_hash: cfg.config_hash,
        seed: cfg.seed,
    };
    let started = Instant::now();
    let tape = solver::run_forward(&cfg.model, &protocol, &cfg.solver)?;
    csvio::write_voltage_csv(&out_dir.join("voltage.csv"), &tape, &meta)?;
    if cfg.snapshots {
        csvio::write_snapshots_csv(&out_dir.join("snapshots.csv"), &cfg.model, &tape, &meta)?;
    }
    println!(
        "forward: {} steps, {:?}, final V = {:.4} V, {:.2} s",
        tape.n_steps(),
        tape.termination,
        tape.voltages.last().unwrap(),
        started.elapsed().as_secs_f64()
    );
    Ok(ExitCode::SUCCESS)
}

/// Identification problem whose references are generated from the config's
/// own parameter values; used by gradient checking, which needs a smooth
/// nonzero objective rather than external data.
fn self_referenced_problem(cfg: &RunConfig) -> Result<IdentificationProblem, Error> {
    let block = cfg
        .ident
        .as_ref()
        .ok_or_else(|| Error::Config("config has no [identification] block".into()))?;
    let mut rates = Vec::new();
    for (label, protocol) in &block.protocols {
        let tape = solver::run_forward(&cfg.model, protocol, &cfg.solver)?;
        rates.push(RateCase {
            label: label.clone(),
            protocol: protocol.clone(),
            reference: tape
                .times
                .iter()
                .zip(&tape.voltages)
                .map(|(&t, &v)| (t, v))
                .collect(),
        });
    }
    Ok(IdentificationProblem {
        model: cfg.model.clone(),
        scaling: block.scaling.clone(),
        stages: block.stages.clone(),
        rates,
        optimizer: block.optimizer.clone(),
        solver: cfg.solver.clone(),
        penalty_voltage: block.penalty_voltage,
        stage_iteration_cap: block.stage_iteration_cap,
        stage_objective_tolerance: block.stage_objective_tolerance,
    })
}

fn cmd_gradcheck(
    config: &Path,
    fd_step: Option<f64>,
    threshold: Option<f64>,
    output: Option<PathBuf>,
) -> Result<ExitCode, Error> {
    let cfg = RunConfig::load(config)?;
    let fd_step = fd_step.unwrap_or(cfg.gradcheck_fd_step);
    let threshold = threshold.unwrap_or(cfg.gradcheck_threshold);
    let out_dir = output.unwrap_or_else(|| cfg.output_dir.clone());
    let problem = self_referenced_problem(&cfg)?;
    let all_rates: Vec<usize> = (0..problem.rates.len()).collect();

    // Evaluation point: design variables offset alternately around 0.5 so
    // the objective sits away from its non-differentiable zero minimum.
    let l = problem.scaling.len();
    let w: Vec<f64> = (0..l)
        .map(|i| {
            let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
            (0.5 + sign * cfg.gradcheck_w_offset).clamp(0.02, 0.98)
        })
        .collect();

    let mut evaluator = Evaluator::new(&problem);
    let out = evaluator.objective(&w)?;
    let grad_w = evaluator.gradient(&w, &out)?;
    let (theta, _) = problem.scaling.scale(&w)?;
    let chain = problem.scaling.dtheta_dw(&theta);

    let mut rows = Vec::new();
    let mut all_pass = true;
    for (k, entry) in problem.scaling.entries.iter().enumerate() {
        let adjoint_theta = grad_w[k] / chain[k];
        let h = fd_step * theta[k].abs();
        let eval_theta = |tk: f64| -> Result<f64, Error> {
            let mut th = theta.clone();
            th[k] = tk;
            let params = problem.scaling.apply(&problem.model.params, &th);
            let model = problem.model.with_params(params)?;
            Ok(Evaluator::new(&problem)
                .objective_for_model(&model, &all_rates)?
                .objective)
        };
        let fd = (eval_theta(theta[k] + h)? - eval_theta(theta[k] - h)?) / (2.0 * h);
        let scale = adjoint_theta.abs().max(fd.abs());
        let rel = if scale <= 1e-30 {
            0.0
        } else {
            (adjoint_theta - fd).abs() / scale
        };
        if rel > threshold {
            all_pass = false;
        }
        rows.push(GradcheckRow {
            name: entry.id.name(),
            theta: theta[k],
            adjoint: adjoint_theta,
            fd,
            rel_error: rel,
        });
    }
    let meta = FileMeta {
        config_hash: cfg.config_hash,
        seed: cfg.seed,
    };
    csvio::write_gradcheck_csv(&out_dir.join("gradcheck.csv"), &rows, &meta)?;
    for r in &rows {
        println!(
            "{:32} adjoint {:+.6e}  fd {:+.6e}  rel {:.3e}",
            r.name, r.adjoint, r.fd, r.rel_error
        );
    }
    if all_pass {
        println!(
            "gradcheck: all {} parameters within {threshold:.1e}",
            rows.len()
        );
        Ok(ExitCode::SUCCESS)
    } else {
        let offenders: Vec<String> = rows
            .iter()
            .filter(|r| r.rel_error > threshold)
            .map(|r| format!("{} ({:.2e})", r.name, r.rel_error))
            .collect();
        eprintln!("gradcheck failed: {}", offenders.join(", "));
        Ok(ExitCode::from(3))
    }
}

fn cmd_identify(config: &Path, output: Option<PathBuf>) -> Result<ExitCode, Error> {
    let cfg = RunConfig::load(config)?;
    let out_dir = output.unwrap_or_else(|| cfg.output_dir.clone());
    let problem = cfg.identification_problem()?;
    let started = Instant::now();
    let result = ident::identify(&problem)?;
    let wall = started.elapsed().as_secs_f64();

    let mut hist = String::from("iteration,objective_V\n");
    for (i, f) in result.objective_history.iter().enumerate() {
        hist.push_str(&format!("{i},{f:.9e}\n"));
    }
    csvio::write_atomic(&out_dir.join("history.csv"), &hist)?;

    let mut report = String::new();
    report.push_str("{\n");
    report.push_str(&format!("  \"objective_V\": {:.9e},\n", result.objective));
    report.push_str(&format!(
        "  \"objective_mV\": {:.6},\n",
        result.objective * 1e3
    ));
    report.push_str("  \"per_rate_rmse_mV\": {");
    for (i, (rate, rmse)) in problem.rates.iter().zip(&result.per_rate_rmse).enumerate() {
        if i > 0 {
            report.push_str(", ");
        }
        report.push_str(&format!("\"{}\": {:.6}", rate.label, rmse * 1e3));
    }
    report.push_str("},\n");
    report.push_str(&format!("  \"nf\": {},\n", result.nf));
    report.push_str(&format!("  \"iterations\": {},\n", result.iterations));
    report.push_str(&format!(
        "  \"termination\": \"{:?}\",\n",
        result.termination
    ));
    report.push_str(&format!("  \"wall_time_s\": {wall:.2},\n"));
    report.push_str(&format!("  \"clamp_events\": {},\n", result.clamp_events));
    report.push_str(&format!(
        "  \"initialization_fallback\": {},\n",
        result.initialization.fallback
    ));
    report.push_str("  \"parameters\": [\n");
    for (i, entry) in problem.scaling.entries.iter().enumerate() {
        report.push_str(&format!(
            "    {{\"name\": \"{}\", \"value\": {:.9e}, \"w\": {:.9}}}{}\n",
            entry.id.name(),
            result.theta[i],
            result.w[i],
            if i + 1 < problem.scaling.len() { "," } else { "" }
        ));
    }
    report.push_str("  ]\n}\n");
    csvio::write_atomic(&out_dir.join("identification.json"), &report)?;

    println!(
        "identify: objective {:.4} mV, NF {}, {:?}, {:.1} s",
        result.objective * 1e3,
        result.nf,
        result.termination,
        wall
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_make_reference(
    config: &Path,
    noise_sigma: Option<f64>,
    seed: Option<u64>,
) -> Result<ExitCode, Error> {
    let cfg = RunConfig::load(config)?;
    let block = cfg
        .ident
        .as_ref()
        .ok_or_else(|| Error::Config("config has no [identification] block".into()))?;
    let sigma = noise_sigma.unwrap_or(cfg.noise_sigma);
    let seed = seed.unwrap_or(cfg.seed);
    for (i, ((label, protocol), path)) in block
        .protocols
        .iter()
        .zip(&block.reference_paths)
        .enumerate()
    {
        let tape = solver::run_forward(&cfg.model, protocol, &cfg.solver)?;
        let meta = FileMeta {
            config_hash: cfg.config_hash,
            seed: seed.wrapping_add(i as u64),
        };
        csvio::write_voltage_csv_noisy(path, &tape, sigma, &meta)?;
        println!(
            "make-reference: {} -> {} ({} samples)",
            label,
            path.display(),
            tape.states.len()
        );
    }
    Ok(ExitCode::SUCCESS)
}
