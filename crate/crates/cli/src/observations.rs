//! Observation CSV files.
//!
//! Two layouts are accepted, told apart by the first header column:
//! `u,Y_1,..,Y_m` holds node values `Y(u_m)` with `Y(0) = 0`, and
//! `cell,dY_1,..,dY_m` holds the increments over each cell.

use std::fs::File;
use std::io::Write;
use std::path::Path as FsPath;

use pathlangevin::{Grid, Observations};

use crate::error::{CliError, Result};

pub fn load_observations(path: &FsPath, grid: &Grid) -> Result<Observations> {
    let file = File::open(path).map_err(|e| CliError::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
    let header = reader.headers().map_err(|e| CliError::format(path, e.to_string()))?.clone();
    let first = header.get(0).unwrap_or("").to_ascii_lowercase();
    let width = header.len().saturating_sub(1);
    if width == 0 {
        return Err(CliError::format(path, "expected at least one observation column"));
    }
    let mut rows = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| CliError::format(path, e.to_string()))?;
        let vals: std::result::Result<Vec<f64>, _> = rec.iter().map(str::parse::<f64>).collect();
        let vals = vals.map_err(|_| CliError::format(path, format!("row {}: non-numeric value", i + 2)))?;
        if vals.len() != width + 1 {
            return Err(CliError::format(path, format!("row {} has {} columns, expected {}", i + 2, vals.len(), width + 1)));
        }
        rows.push(vals);
    }
    let m = grid.intervals();
    match first.as_str() {
        "u" => {
            for w in rows.windows(2) {
                if w[1][0] <= w[0][0] {
                    return Err(CliError::format(path, format!("u is not increasing at u = {}", w[1][0])));
                }
            }
            if rows.len() != m + 1 {
                return Err(CliError::format(path, format!("{} rows of node values, expected {}", rows.len(), m + 1)));
            }
            for (i, r) in rows.iter().enumerate() {
                if (r[0] - grid.node(i)).abs() > 1e-9 {
                    return Err(CliError::format(path, format!("u = {} does not match grid node {}", r[0], grid.node(i))));
                }
            }
            let values: Vec<f64> = rows.iter().flat_map(|r| r[1..].iter().copied()).collect();
            Observations::from_node_values(grid, width, &values).map_err(|e| CliError::format(path, e.to_string()))
        }
        "cell" => {
            if rows.len() != m {
                return Err(CliError::format(path, format!("{} rows of increments, expected {m}", rows.len())));
            }
            for (i, r) in rows.iter().enumerate() {
                if r[0] != i as f64 {
                    return Err(CliError::format(path, format!("cell column must count 0..{}, found {}", m - 1, r[0])));
                }
            }
            let incs: Vec<f64> = rows.iter().flat_map(|r| r[1..].iter().copied()).collect();
            Observations::from_increments(grid, width, incs).map_err(|e| CliError::format(path, e.to_string()))
        }
        other => Err(CliError::format(path, format!("first column must be `u` or `cell`, found `{other}`"))),
    }
}

/// Writes increments in the `cell` layout with round-trip float formatting.
pub fn save_observations(path: &FsPath, obs: &Observations) -> Result<()> {
    let mut out = String::from("cell");
    for j in 1..=obs.obs_dim() {
        out.push_str(&format!(",dY_{j}"));
    }
    out.push('\n');
    for cell in 0..obs.cells() {
        out.push_str(&cell.to_string());
        for v in obs.increment(cell) {
            out.push_str(&format!(",{v:?}"));
        }
        out.push('\n');
    }
    let mut f = File::create(path).map_err(|e| CliError::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| CliError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &tempfile::TempDir, name: &str, text: &str) -> std::path::PathBuf {
        let p = dir.path().join(name);
        std::fs::write(&p, text).unwrap();
        p
    }

    #[test]
    fn straight_line_node_values() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "y.csv", "u,Y_1\n0,0\n0.25,0.25\n0.5,0.5\n0.75,0.75\n1,1\n");
        let obs = load_observations(&p, &Grid::new(4).unwrap()).unwrap();
        for c in 0..4 {
            assert!((obs.increment(c)[0] - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn increments_pass_through() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "dy.csv", "cell,dY_1\n0,0.1\n1,-0.2\n2,0.3\n");
        let obs = load_observations(&p, &Grid::new(3).unwrap()).unwrap();
        assert_eq!(obs.increments(), &[0.1, -0.2, 0.3]);
    }

    #[test]
    fn shape_errors() {
        let dir = tempfile::tempdir().unwrap();
        let grid = Grid::new(4).unwrap();
        let p = write(&dir, "a.csv", "u,Y_1\n0,0\n0.5,0.5\n0.25,0.25\n0.75,0.75\n1,1\n");
        assert!(load_observations(&p, &grid).unwrap_err().to_string().contains("not increasing"));
        let p = write(&dir, "b.csv", "cell,dY_1\n0,0.1\n1,0.1\n");
        assert!(load_observations(&p, &grid).unwrap_err().to_string().contains("expected 4"));
        let p = write(&dir, "c.csv", "t,Y\n0,0\n");
        assert!(load_observations(&p, &grid).is_err());
    }
}
