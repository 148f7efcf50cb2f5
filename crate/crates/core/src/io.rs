//! File formats: snapshot CSV, truth sidecar JSON, log-weight matrix files,
//! belief-state JSON, and the sweep CSV.
//!
//! Every floating-point value is written with 17 significant digits, so a
//! write/read round trip reproduces the doubles bit for bit.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::Path;

use crate::bp::BeliefState;
use crate::error::{Error, Result};
use crate::flow::{FlowParams, SnapshotPair, Truth, WeightMatrix};
use crate::learning::{Method, SweepResult};

/// 17 significant digits: lossless for f64.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

fn parse_field(path: &str, line: usize, field: &str, raw: &str) -> Result<f64> {
    raw.trim().parse::<f64>().map_err(|_| Error::Parse {
        path: path.to_string(),
        line,
        msg: format!("field `{field}`: cannot parse `{raw}` as a number"),
    })
}

// ---------------------------------------------------------------------------
// Snapshot CSV: header `frame,id,x0[,x1,x2]`, frame in {0, 1}.

pub fn snapshot_to_csv(snap: &SnapshotPair) -> String {
    let d = snap.dims();
    let mut out = String::from("frame,id");
    for a in 0..d {
        let _ = write!(out, ",x{a}");
    }
    out.push('\n');
    for (frame, pos) in [(0, 0), (1, 1)] {
        for i in 0..snap.len() {
            let p = if pos == 0 { snap.x_pos(i) } else { snap.y_pos(i) };
            let _ = write!(out, "{frame},{i}");
            for c in p {
                let _ = write!(out, ",{}", fmt_f64(*c));
            }
            out.push('\n');
        }
    }
    out
}

pub fn write_snapshot_csv(path: &Path, snap: &SnapshotPair) -> Result<()> {
    std::fs::write(path, snapshot_to_csv(snap))?;
    Ok(())
}

pub fn read_snapshot_csv(path: &Path) -> Result<SnapshotPair> {
    let name = path.display().to_string();
    let text = std::fs::read_to_string(path)?;
    parse_snapshot_csv(&text, &name)
}

pub fn parse_snapshot_csv(text: &str, name: &str) -> Result<SnapshotPair> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| Error::Parse {
        path: name.into(),
        line: 1,
        msg: "empty file".into(),
    })?;
    let cols: Vec<&str> = header.trim().split(',').collect();
    if cols.len() < 3 || cols[0] != "frame" || cols[1] != "id" {
        return Err(Error::Parse {
            path: name.into(),
            line: 1,
            msg: format!("expected header `frame,id,x0[,x1,x2]`, got `{header}`"),
        });
    }
    let dims = cols.len() - 2;
    for (a, c) in cols[2..].iter().enumerate() {
        if *c != format!("x{a}") {
            return Err(Error::Parse {
                path: name.into(),
                line: 1,
                msg: format!("coordinate column {} named `{c}`, expected `x{a}`", a + 2),
            });
        }
    }

    let mut frames: [Vec<(usize, Vec<f64>)>; 2] = [Vec::new(), Vec::new()];
    for (idx, raw) in lines {
        let line_no = idx + 1;
        let row = raw.trim();
        if row.is_empty() {
            continue;
        }
        let fields: Vec<&str> = row.split(',').collect();
        if fields.len() != dims + 2 {
            return Err(Error::Parse {
                path: name.into(),
                line: line_no,
                msg: format!("expected {} fields, got {}", dims + 2, fields.len()),
            });
        }
        let frame = fields[0].trim().parse::<usize>().ok().filter(|f| *f <= 1).ok_or_else(|| {
            Error::Parse {
                path: name.into(),
                line: line_no,
                msg: format!("field `frame`: `{}` is not 0 or 1", fields[0]),
            }
        })?;
        let id = fields[1].trim().parse::<usize>().map_err(|_| Error::Parse {
            path: name.into(),
            line: line_no,
            msg: format!("field `id`: cannot parse `{}`", fields[1]),
        })?;
        let mut coords = Vec::with_capacity(dims);
        for (a, f) in fields[2..].iter().enumerate() {
            coords.push(parse_field(name, line_no, &format!("x{a}"), f)?);
        }
        frames[frame].push((id, coords));
    }

    for frame in frames.iter_mut() {
        frame.sort_by_key(|(id, _)| *id);
    }
    let n = frames[0].len();
    if n == 0 || frames[1].len() != n {
        return Err(Error::Parse {
            path: name.into(),
            line: 1,
            msg: format!(
                "frames must contain the same positive particle count (got {} and {})",
                n,
                frames[1].len()
            ),
        });
    }
    for frame in &frames {
        for (k, (id, _)) in frame.iter().enumerate() {
            if *id != k {
                return Err(Error::Parse {
                    path: name.into(),
                    line: 1,
                    msg: format!("particle ids must be 0..{} per frame; missing or duplicate id {k}", n - 1),
                });
            }
        }
    }
    let flat = |f: &[(usize, Vec<f64>)]| f.iter().flat_map(|(_, c)| c.clone()).collect::<Vec<f64>>();
    SnapshotPair::new(flat(&frames[0]), flat(&frames[1]), dims, None)
}

// ---------------------------------------------------------------------------
// Truth sidecar JSON: { "S": ..., "kappa": ..., "perm": [...] }

#[derive(Debug, Serialize, Deserialize)]
struct TruthFile {
    #[serde(rename = "S")]
    s: f64,
    kappa: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    perm: Option<Vec<usize>>,
}

pub fn truth_to_json(truth: &Truth) -> Result<String> {
    let file = TruthFile {
        s: truth.params.s,
        kappa: truth.params.kappa,
        perm: truth.perm.clone(),
    };
    Ok(serde_json::to_string_pretty(&file)?)
}

pub fn write_truth_json(path: &Path, truth: &Truth) -> Result<()> {
    std::fs::write(path, truth_to_json(truth)?)?;
    Ok(())
}

/// Read a truth sidecar; the spatial dimension comes from the snapshot.
pub fn read_truth_json(path: &Path, dims: usize) -> Result<Truth> {
    let text = std::fs::read_to_string(path)?;
    let file: TruthFile = serde_json::from_str(&text)?;
    Ok(Truth {
        params: FlowParams::with_dims(file.kappa, file.s, dims),
        perm: file.perm,
    })
}

// ---------------------------------------------------------------------------
// Matrix file: first line `n`, then n rows of n log-weights. Log space keeps
// extreme separations representable.

pub fn matrix_to_string(w: &WeightMatrix) -> String {
    let n = w.n();
    let mut out = format!("{n}\n");
    for i in 0..n {
        let row: Vec<String> = (0..n).map(|j| fmt_f64(w.log_entry(i, j))).collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
    out
}

pub fn write_matrix(path: &Path, w: &WeightMatrix) -> Result<()> {
    std::fs::write(path, matrix_to_string(w))?;
    Ok(())
}

pub fn read_matrix(path: &Path) -> Result<WeightMatrix> {
    let name = path.display().to_string();
    let text = std::fs::read_to_string(path)?;
    parse_matrix(&text, &name)
}

pub fn parse_matrix(text: &str, name: &str) -> Result<WeightMatrix> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, first) = lines.next().ok_or_else(|| Error::Parse {
        path: name.into(),
        line: 1,
        msg: "empty file".into(),
    })?;
    let n: usize = first.trim().parse().map_err(|_| Error::Parse {
        path: name.into(),
        line: 1,
        msg: format!("field `n`: cannot parse `{first}`"),
    })?;
    if n == 0 {
        return Err(Error::Parse {
            path: name.into(),
            line: 1,
            msg: "matrix size must be at least 1".into(),
        });
    }
    let mut log = DMatrix::zeros(n, n);
    for i in 0..n {
        let (idx, row) = lines.next().ok_or_else(|| Error::Parse {
            path: name.into(),
            line: i + 2,
            msg: format!("missing matrix row {i}"),
        })?;
        let fields: Vec<&str> = row.split_whitespace().collect();
        if fields.len() != n {
            return Err(Error::Parse {
                path: name.into(),
                line: idx + 1,
                msg: format!("row {i}: expected {n} entries, got {}", fields.len()),
            });
        }
        for (j, f) in fields.iter().enumerate() {
            let v = parse_field(name, idx + 1, &format!("w[{i}][{j}]"), f)?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    path: name.into(),
                    line: idx + 1,
                    msg: format!("field `w[{i}][{j}]`: log-weight must be finite"),
                });
            }
            log[(i, j)] = v;
        }
    }
    WeightMatrix::from_log(log)
}

// ---------------------------------------------------------------------------
// Belief-state JSON.

#[derive(Debug, Serialize, Deserialize)]
struct BeliefFile {
    f_bp: f64,
    beta: Vec<Vec<f64>>,
    residual: f64,
    iterations: usize,
    log_u: Vec<f64>,
    log_v: Vec<f64>,
    #[serde(default)]
    clamped: bool,
}

pub fn beliefs_to_json(state: &BeliefState) -> Result<String> {
    let n = state.beta.nrows();
    let beta: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| state.beta[(i, j)]).collect())
        .collect();
    let file = BeliefFile {
        f_bp: state.f_bp,
        beta,
        residual: state.residual,
        iterations: state.iterations,
        log_u: state.log_u.clone(),
        log_v: state.log_v.clone(),
        clamped: state.clamped,
    };
    Ok(serde_json::to_string_pretty(&file)?)
}

pub fn write_beliefs_json(path: &Path, state: &BeliefState) -> Result<()> {
    std::fs::write(path, beliefs_to_json(state)?)?;
    Ok(())
}

pub fn read_beliefs_json(path: &Path) -> Result<BeliefState> {
    let name = path.display().to_string();
    let text = std::fs::read_to_string(path)?;
    let file: BeliefFile = serde_json::from_str(&text)?;
    let n = file.beta.len();
    if n == 0 || file.beta.iter().any(|row| row.len() != n) {
        return Err(Error::Parse {
            path: name,
            line: 1,
            msg: "field `beta`: must be a non-empty square matrix".into(),
        });
    }
    if file.log_u.len() != n || file.log_v.len() != n {
        return Err(Error::Parse {
            path: name,
            line: 1,
            msg: "fields `log_u`/`log_v`: length must match beta".into(),
        });
    }
    let beta = DMatrix::from_fn(n, n, |i, j| file.beta[i][j]);
    Ok(BeliefState {
        beta,
        log_u: file.log_u,
        log_v: file.log_v,
        f_bp: file.f_bp,
        residual: file.residual,
        iterations: file.iterations,
        clamped: file.clamped,
        free_energy_trace: Vec::new(),
    })
}

// ---------------------------------------------------------------------------
// Sweep CSV, the plot-ready artifact.

pub const SWEEP_CSV_HEADER: &str = "param,lnZ_bp,lnZ_sp,lnZ_sp4,lnZ_mcmc,lnZ_exact,ratio_g4,seconds_bp,seconds_correct,seconds_mcmc,seconds_exact";

pub fn sweep_to_csv(result: &SweepResult) -> String {
    let mut out = String::from(SWEEP_CSV_HEADER);
    out.push('\n');
    let opt = |v: Option<f64>| v.map(fmt_f64).unwrap_or_default();
    for row in &result.rows {
        let cells = [
            fmt_f64(row.param),
            opt(row.ln_z_bp),
            opt(row.ln_z_sp),
            opt(row.ln_z_sp4),
            opt(row.ln_z_mcmc),
            opt(row.ln_z_exact),
            opt(row.ratio_g4),
            opt(row.seconds_bp),
            opt(row.seconds_correct),
            opt(row.seconds_mcmc),
            opt(row.seconds_exact),
        ];
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    for a in &result.argmax {
        let _ = write!(
            out,
            "# argmax {:?}: grid {} refined {}\n",
            a.method,
            fmt_f64(a.grid_value),
            fmt_f64(a.refined)
        );
    }
    out
}

/// Methods named on the command line / in specs.
pub fn parse_methods(raw: &str) -> Result<Vec<Method>> {
    let mut methods = Vec::new();
    for token in raw.split(',').map(str::trim).filter(|t| !t.is_empty()) {
        let m = match token {
            "bp" => Method::Bp,
            "sp" | "bp_sp" => Method::BpSp,
            "sp4" | "bp_sp4" => Method::BpSp4,
            "mcmc" => Method::Mcmc,
            "exact" => Method::Exact,
            other => {
                return Err(Error::domain(
                    "methods",
                    format!("unknown method `{other}` (use bp, sp, sp4, mcmc, exact)"),
                ))
            }
        };
        if !methods.contains(&m) {
            methods.push(m);
        }
    }
    if methods.is_empty() {
        return Err(Error::domain("methods", "no methods selected"));
    }
    Ok(methods)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::{build_weight_matrix, generate_snapshots};
    use tempfile::tempdir;

    #[test]
    fn snapshot_csv_round_trips_bitwise() {
        let params = FlowParams::with_dims(1.3, -0.4, 2);
        let snap = generate_snapshots(17, &params, 1.0, 5).unwrap();
        let text = snapshot_to_csv(&snap);
        let back = parse_snapshot_csv(&text, "mem").unwrap();
        assert_eq!(back.dims(), 2);
        assert_eq!(back.len(), 17);
        for i in 0..17 {
            assert_eq!(back.x_pos(i), snap.x_pos(i));
            assert_eq!(back.y_pos(i), snap.y_pos(i));
        }
    }

    #[test]
    fn matrix_file_round_trips_bitwise() {
        let params = FlowParams::new(0.7, 0.2);
        let snap = generate_snapshots(9, &params, 1.0, 8).unwrap();
        let w = build_weight_matrix(&snap, &params).unwrap();
        let text = matrix_to_string(&w);
        let back = parse_matrix(&text, "mem").unwrap();
        assert_eq!(back.log_entries(), w.log_entries());
    }

    #[test]
    fn parse_errors_name_line_and_field() {
        let bad = "frame,id,x0\n0,0,1.0\n0,1,zzz\n1,0,0.0\n1,1,0.5\n";
        let err = parse_snapshot_csv(bad, "test.csv").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("test.csv:3"), "{msg}");
        assert!(msg.contains("x0"), "{msg}");

        let err = parse_matrix("2\n1.0 2.0\n3.0", "m.txt").unwrap_err();
        assert!(err.to_string().contains("row 1"), "{err}");

        let err = parse_matrix("2\n1.0 inf\n3.0 1.0", "m.txt").unwrap_err();
        assert!(err.to_string().contains("finite"), "{err}");
    }

    #[test]
    fn truth_sidecar_round_trips() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("t.json");
        let truth = Truth {
            params: FlowParams::new(2.5, -1.0),
            perm: Some(vec![2, 0, 1]),
        };
        write_truth_json(&path, &truth).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.contains("\"S\""));
        let back = read_truth_json(&path, 1).unwrap();
        assert_eq!(back, truth);
    }

    #[test]
    fn beliefs_json_round_trips() {
        let params = FlowParams::new(1.0, 0.0);
        let snap = generate_snapshots(6, &params, 1.0, 3).unwrap();
        let w = build_weight_matrix(&snap, &params).unwrap();
        let state = crate::bp::solve(&w, &crate::bp::BpConfig::default()).unwrap();
        let text = beliefs_to_json(&state).unwrap();
        for key in ["f_bp", "beta", "residual", "iterations"] {
            assert!(text.contains(key), "missing {key}");
        }
        let dir = tempdir().unwrap();
        let path = dir.path().join("b.json");
        std::fs::write(&path, &text).unwrap();
        let back = read_beliefs_json(&path).unwrap();
        assert_eq!(back.f_bp, state.f_bp);
        assert_eq!(back.beta, state.beta);
        assert_eq!(back.log_u, state.log_u);
    }

    #[test]
    fn method_parsing() {
        let ms = parse_methods("bp, sp4,exact").unwrap();
        assert_eq!(ms, vec![Method::Bp, Method::BpSp4, Method::Exact]);
        assert!(parse_methods("bp,warp").is_err());
        assert!(parse_methods("").is_err());
    }
}
