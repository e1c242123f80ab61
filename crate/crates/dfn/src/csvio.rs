//! CSV readers and writers for voltage traces, reference data, field
//! snapshots, and gradient tables. Every output file starts with comment
//! lines recording the tool version, config hash, and seed, and is written
//! atomically (temp file + rename).

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::Model;
use crate::solver::SolutionTape;
use crate::state::Field;

/// Provenance header stamped on every output file.
#[derive(Debug, Clone, Copy)]
pub struct FileMeta {
    pub config_hash: u64,
    pub seed: u64,
}

pub fn version() -> &'static str {
    env!("CARGO_PKG_VERSION")
}

fn header(meta: &FileMeta) -> String {
    format!(
        "# dfn {} config_hash={:016x} seed={}\n",
        version(),
        meta.config_hash,
        meta.seed
    )
}

/// Writes atomically: the content lands in a temp file that is renamed over
/// the target only after a successful flush.
pub fn write_atomic(path: &Path, content: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(content.as_bytes())?;
        f.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Voltage trace: `step,time_s,current_A_per_m2,voltage_V`. The recorded
/// current is the protocol-signed value (positive = discharge).
pub fn write_voltage_csv(path: &Path, tape: &SolutionTape, meta: &FileMeta) -> Result<()> {
    write_voltage_csv_noisy(path, tape, 0.0, meta)
}

/// Voltage trace with optional additive Gaussian noise of standard deviation
/// `sigma` (V), seeded from the file metadata for bit-identical reruns.
pub fn write_voltage_csv_noisy(
    path: &Path,
    tape: &SolutionTape,
    sigma: f64,
    meta: &FileMeta,
) -> Result<()> {
    use rand::{Rng, SeedableRng};
    let mut s = header(meta);
    s.push_str("step,time_s,current_A_per_m2,voltage_V\n");
    let current = -tape.tab_datum;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(meta.seed);
    let mut gauss = move || -> f64 {
        // Box-Muller transform; u1 in (0, 1] avoids log(0)
        let u1: f64 = 1.0 - rng.random::<f64>();
        let u2: f64 = rng.random::<f64>();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    };
    for (i, (t, v)) in tape.times.iter().zip(&tape.voltages).enumerate() {
        let v = if sigma > 0.0 { v + sigma * gauss() } else { *v };
        s.push_str(&format!("{i},{t:.6},{current:.6},{v:.9}\n"));
    }
    write_atomic(path, &s)
}

/// Reads a reference trace (columns `time_s,voltage_V`; extra columns such as
/// the full trace schema are accepted by name).
pub fn read_reference_csv(path: &Path) -> Result<Vec<(f64, f64)>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read reference {}: {e}", path.display())))?;
    let mut rows = Vec::new();
    let mut cols: Option<(usize, usize)> = None;
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if cols.is_none() {
            if let (Some(t), Some(v)) = (
                fields.iter().position(|f| *f == "time_s"),
                fields.iter().position(|f| *f == "voltage_V"),
            ) {
                cols = Some((t, v));
                continue;
            }
            // headerless two-column file
            cols = Some((0, 1));
        }
        let (tc, vc) = cols.unwrap();
        if fields.len() <= tc.max(vc) {
            continue;
        }
        match (fields[tc].parse::<f64>(), fields[vc].parse::<f64>()) {
            (Ok(t), Ok(v)) => rows.push((t, v)),
            _ => continue,
        }
    }
    if rows.is_empty() {
        return Err(Error::Config(format!(
            "reference {} contains no samples",
            path.display()
        )));
    }
    Ok(rows)
}

/// Per-step field snapshots matching the plotted state variables:
/// `step,node,x,y,z,c_e,phi_e,phi_s,j_s,c_s_surf` (missing unknowns blank).
pub fn write_snapshots_csv(
    path: &Path,
    model: &Model,
    tape: &SolutionTape,
    meta: &FileMeta,
) -> Result<()> {
    let layout = &model.layout;
    let mut s = header(meta);
    s.push_str("step,node,x,y,z,c_e,phi_e,phi_s,j_s,c_s_surf\n");
    let fmt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.9e}"));
    for (step, u) in tape.states.iter().enumerate() {
        for node in 0..layout.n_nodes {
            let c = model.mesh.coords[node];
            let cs = layout
                .slot(node)
                .map(|slot| u.surface_concentration(layout, slot));
            s.push_str(&format!(
                "{step},{node},{:.9e},{:.9e},{:.9e},{},{},{},{},{}\n",
                c[0],
                c[1],
                c[2],
                fmt(u.get(layout, Field::ElectrolyteConcentration, node)),
                fmt(u.get(layout, Field::ElectrolytePotential, node)),
                fmt(u.get(layout, Field::SolidPotential, node)),
                fmt(u.get(layout, Field::PoreWallFlux, node)),
                fmt(cs),
            ));
        }
    }
    write_atomic(path, &s)
}

/// One gradient-check row: adjoint vs central finite differences.
#[derive(Debug, Clone)]
pub struct GradcheckRow {
    pub name: String,
    pub theta: f64,
    pub adjoint: f64,
    pub fd: f64,
    pub rel_error: f64,
}

pub fn write_gradcheck_csv(path: &Path, rows: &[GradcheckRow], meta: &FileMeta) -> Result<()> {
    let mut s = header(meta);
    s.push_str("parameter,theta,adjoint,fd,rel_error\n");
    for r in rows {
        s.push_str(&format!(
            "{},{:.9e},{:.9e},{:.9e},{:.3e}\n",
            r.name, r.theta, r.adjoint, r.fd, r.rel_error
        ));
    }
    write_atomic(path, &s)
}

/// Gradient export: parameter name, value, dL/dtheta, dL/dw.
pub fn write_gradient_csv(
    path: &Path,
    rows: &[(String, f64, f64, f64)],
    meta: &FileMeta,
) -> Result<()> {
    let mut s = header(meta);
    s.push_str("parameter,value,dL_dtheta,dL_dw\n");
    for (name, value, dtheta, dw) in rows {
        s.push_str(&format!("{name},{value:.9e},{dtheta:.9e},{dw:.9e}\n"));
    }
    write_atomic(path, &s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_roundtrip_with_named_columns() {
        let dir = std::env::temp_dir().join(format!("dfn-csv-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("trace.csv");
        write_atomic(
            &path,
            "# dfn test\nstep,time_s,current_A_per_m2,voltage_V\n0,0.0,24.0,3.85\n1,30.0,24.0,3.80\n",
        )
        .unwrap();
        let rows = read_reference_csv(&path).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[1], (30.0, 3.80));
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn missing_reference_names_path() {
        let err = read_reference_csv(Path::new("/nonexistent/ref.csv")).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/ref.csv"));
    }
}
