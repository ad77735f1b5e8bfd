//! CSV and JSON serialization of profiles, transforms and time series.
//!
//! CSV files use a mandatory header row, `.` as the decimal separator and
//! exponent notation that round-trips through f64 parsing, so identical
//! inputs produce byte-identical files.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::baseline::BernsteinSamples;
use crate::dynamics::SeriesRow;
use crate::error::{CoagError, Result};
use crate::grid::SizeGrid;
use crate::kernel::KernelSpec;
use crate::profile::{MomentSummary, Profile};

/// Round-trippable text form of a float.
pub fn fmt_f64(x: f64) -> String {
    if x.is_nan() {
        "nan".to_string()
    } else {
        format!("{x:e}")
    }
}

/// Sidecar metadata stored next to every profile CSV.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProfileMeta {
    pub alpha: f64,
    pub w: f64,
    pub rho: f64,
    pub x_min: f64,
    pub x_max: f64,
    pub n_cells: usize,
    pub moments: MomentSummary,
}

impl ProfileMeta {
    pub fn of(p: &Profile) -> Self {
        let g = p.grid();
        Self {
            alpha: p.spec().alpha,
            w: p.spec().w,
            rho: p.spec().rho,
            x_min: g.x_min(),
            x_max: g.x_max(),
            n_cells: g.n_cells(),
            moments: p.moments(),
        }
    }
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    Ok(())
}

/// Writes `x,phi` rows for the profile nodes.
pub fn write_profile_csv(path: &Path, p: &Profile) -> Result<()> {
    ensure_parent(path)?;
    let mut out = String::from("x,phi\n");
    for (x, v) in p.grid().nodes().iter().zip(p.values().iter()) {
        out.push_str(&fmt_f64(*x));
        out.push(',');
        out.push_str(&fmt_f64(*v));
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

/// Writes the JSON sidecar of a profile CSV.
pub fn write_profile_meta(path: &Path, p: &Profile) -> Result<()> {
    write_json(path, &ProfileMeta::of(p))
}

/// Reads a profile back from its CSV and sidecar.
pub fn read_profile(csv_path: &Path, meta_path: &Path) -> Result<Profile> {
    let meta: ProfileMeta = serde_json::from_str(&fs::read_to_string(meta_path)?)?;
    let spec = KernelSpec::new(meta.alpha, meta.w, meta.rho)?;
    let grid = Arc::new(SizeGrid::geometric(meta.x_min, meta.x_max, meta.n_cells)?);
    let text = fs::read_to_string(csv_path)?;
    let display = csv_path.display().to_string();
    let mut lines = text.lines();
    match lines.next() {
        Some("x,phi") => {}
        other => {
            return Err(CoagError::CsvParse {
                path: display,
                message: format!("expected header 'x,phi', got {other:?}"),
            })
        }
    }
    let mut values = Vec::with_capacity(meta.n_cells);
    for (lineno, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split(',');
        let (x, v) = match (fields.next(), fields.next(), fields.next()) {
            (Some(x), Some(v), None) => (x, v),
            _ => {
                return Err(CoagError::CsvParse {
                    path: display,
                    message: format!("line {}: expected two fields", lineno + 2),
                })
            }
        };
        let x: f64 = x.parse().map_err(|e| CoagError::CsvParse {
            path: display.clone(),
            message: format!("line {}: {e}", lineno + 2),
        })?;
        let v: f64 = v.parse().map_err(|e| CoagError::CsvParse {
            path: display.clone(),
            message: format!("line {}: {e}", lineno + 2),
        })?;
        let i = values.len();
        if i >= meta.n_cells {
            return Err(CoagError::CsvParse {
                path: display,
                message: "more rows than n_cells in the sidecar".into(),
            });
        }
        let node = grid.nodes()[i];
        if (x - node).abs() > 1e-9 * node {
            return Err(CoagError::CsvParse {
                path: display,
                message: format!("row {} node {x} does not match the sidecar grid ({node})", i),
            });
        }
        values.push(v);
    }
    Profile::new(grid, values, spec)
}

/// Writes `xi,B` rows.
pub fn write_bernstein_csv(path: &Path, s: &BernsteinSamples) -> Result<()> {
    ensure_parent(path)?;
    let mut out = String::from("xi,B\n");
    for (x, v) in s.xi.iter().zip(s.values.iter()) {
        out.push_str(&fmt_f64(*x));
        out.push(',');
        out.push_str(&fmt_f64(*v));
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

/// Writes `xi,residual` rows.
pub fn write_xi_residual_csv(path: &Path, xi: &[f64], residual: &[f64]) -> Result<()> {
    ensure_parent(path)?;
    let mut out = String::from("xi,residual\n");
    for (x, r) in xi.iter().zip(residual.iter()) {
        out.push_str(&fmt_f64(*x));
        out.push(',');
        out.push_str(&fmt_f64(*r));
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

/// Writes `t,mass,distance` rows; a missing distance is written as nan.
pub fn write_series_csv(path: &Path, rows: &[SeriesRow]) -> Result<()> {
    ensure_parent(path)?;
    let mut out = String::from("t,mass,distance\n");
    for row in rows {
        out.push_str(&fmt_f64(row.t));
        out.push(',');
        out.push_str(&fmt_f64(row.mass));
        out.push(',');
        out.push_str(&fmt_f64(row.distance.unwrap_or(f64::NAN)));
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

/// Writes the pairwise distance matrix with init labels.
pub fn write_matrix_csv(
    path: &Path,
    labels: &[String],
    matrix: &[Vec<Option<f64>>],
) -> Result<()> {
    ensure_parent(path)?;
    let mut out = String::from("init");
    for l in labels {
        out.push(',');
        out.push_str(l);
    }
    out.push('\n');
    for (i, row) in matrix.iter().enumerate() {
        out.push_str(&labels[i]);
        for d in row {
            out.push(',');
            out.push_str(&fmt_f64(d.unwrap_or(f64::NAN)));
        }
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

/// Pretty JSON plus trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    ensure_parent(path)?;
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::baseline::explicit_profile;

    #[test]
    fn float_format_round_trips() {
        for x in [0.0, 1.0, -2.5e-17, 3.894718e300, 1e-6, std::f64::consts::PI] {
            let s = fmt_f64(x);
            let back: f64 = s.parse().unwrap();
            assert_eq!(back, x, "{s}");
        }
        assert_eq!(fmt_f64(f64::NAN), "nan");
    }

    #[test]
    fn profile_csv_round_trips() {
        let dir = std::env::temp_dir().join(format!("coagscale-io-{}", std::process::id()));
        let g = Arc::new(SizeGrid::geometric(1e-4, 1e2, 64).unwrap());
        let p = explicit_profile(2.0, 1.5, &g).unwrap();
        let csv = dir.join("profile.csv");
        let meta = dir.join("profile.meta.json");
        write_profile_csv(&csv, &p).unwrap();
        write_profile_meta(&meta, &p).unwrap();
        let q = read_profile(&csv, &meta).unwrap();
        assert_eq!(p.values(), q.values());
        assert_eq!(p.spec(), q.spec());
        fs::remove_dir_all(&dir).ok();
    }
}
