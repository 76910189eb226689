//! Result files: CSV tables and `key = value` metadata.

use std::fs;
use std::path::{Path, PathBuf};

use vcplm::CurveSet;

use crate::error::{CliError, CliResult};

pub struct OutDir(PathBuf);

impl OutDir {
    pub fn create(path: &Path) -> CliResult<Self> {
        fs::create_dir_all(path).map_err(|e| CliError::io(path, e))?;
        Ok(Self(path.to_path_buf()))
    }

    pub fn path(&self, file: &str) -> PathBuf {
        self.0.join(file)
    }

    pub fn write_text(&self, file: &str, text: &str) -> CliResult<PathBuf> {
        let p = self.path(file);
        fs::write(&p, text).map_err(|e| CliError::io(&p, e))?;
        Ok(p)
    }

    pub fn write_csv(&self, file: &str, header: &[String], rows: &[Vec<String>]) -> CliResult<PathBuf> {
        let p = self.path(file);
        let io = |e: csv::Error| CliError::io(&p, e.into());
        let mut w = csv::Writer::from_path(&p).map_err(io)?;
        w.write_record(header).map_err(io)?;
        for r in rows {
            w.write_record(r).map_err(io)?;
        }
        w.flush().map_err(|e| CliError::io(&p, e))?;
        Ok(p)
    }

    /// `name,estimate` per linear coefficient.
    pub fn write_beta(&self, names: &[String], beta: &[f64]) -> CliResult<PathBuf> {
        let rows: Vec<Vec<String>> = names.iter().zip(beta).map(|(n, b)| vec![n.clone(), b.to_string()]).collect();
        self.write_csv("beta.csv", &["name".into(), "estimate".into()], &rows)
    }

    /// `grid,alpha0,alpha_1..alpha_d1`, where `alpha0` is the baseline.
    pub fn write_curves(&self, curves: &CurveSet) -> CliResult<PathBuf> {
        let mut header = vec!["grid".to_string(), "alpha0".to_string()];
        header.extend((1..=curves.d1()).map(|j| format!("alpha_{j}")));
        let base = curves.baseline();
        let rows: Vec<Vec<String>> = (0..curves.len())
            .map(|m| {
                let mut r = vec![curves.grid[m].to_string(), base[m].to_string()];
                r.extend(curves.alpha.iter().map(|a| a[m].to_string()));
                r
            })
            .collect();
        self.write_csv("curves.csv", &header, &rows)
    }

    /// `metric,value` rows.
    pub fn write_report(&self, entries: &[(String, String)]) -> CliResult<PathBuf> {
        let rows: Vec<Vec<String>> = entries.iter().map(|(k, v)| vec![k.clone(), v.clone()]).collect();
        self.write_csv("report.csv", &["metric".into(), "value".into()], &rows)
    }

    pub fn write_metadata(&self, entries: &[(String, String)]) -> CliResult<PathBuf> {
        self.write_text("metadata.txt", &key_value(entries))
    }
}

pub fn key_value(entries: &[(String, String)]) -> String {
    entries.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
}

/// Reads a CSV written by [`OutDir::write_csv`] back as header and rows.
pub fn read_csv(path: &Path) -> CliResult<(Vec<String>, Vec<Vec<String>>)> {
    let mut r = csv::Reader::from_path(path).map_err(|e| CliError::io(path, e.into()))?;
    let header = r
        .headers()
        .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?
        .iter()
        .map(str::to_string)
        .collect();
    let rows = r
        .records()
        .map(|rec| rec.map(|r| r.iter().map(str::to_string).collect()))
        .collect::<Result<Vec<Vec<String>>, _>>()
        .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    Ok((header, rows))
}

#[cfg(test)]
mod tests {
    use super::*;
    use vcplm::model::EvalMode;

    #[test]
    fn curves_and_beta_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let out = OutDir::create(dir.path()).unwrap();
        let c = CurveSet::new(
            vec![0.0, 0.1, 1.0 / 3.0],
            vec![vec![1.0 / 7.0, -2.5e-17, 3.0]],
            vec![vec![std::f64::consts::PI, 1e300, -0.0]],
            EvalMode::OnGrid,
        )
        .unwrap();
        let p = out.write_curves(&c).unwrap();
        let (h, rows) = read_csv(&p).unwrap();
        assert_eq!(h, vec!["grid", "alpha0", "alpha_1"]);
        for (m, r) in rows.iter().enumerate() {
            let v: Vec<f64> = r.iter().map(|s| s.parse().unwrap()).collect();
            assert_eq!(v[0].to_bits(), c.grid[m].to_bits());
            assert_eq!(v[1].to_bits(), c.alpha0_k[0][m].to_bits());
            assert_eq!(v[2].to_bits(), c.alpha[0][m].to_bits());
        }
        let beta = [0.1 + 0.2, -1e-310];
        let p = out.write_beta(&["a".into(), "b=x,y".into()], &beta).unwrap();
        let (_, rows) = read_csv(&p).unwrap();
        assert_eq!(rows[1][0], "b=x,y");
        for (r, b) in rows.iter().zip(beta) {
            assert_eq!(r[1].parse::<f64>().unwrap().to_bits(), b.to_bits());
        }
    }
}
