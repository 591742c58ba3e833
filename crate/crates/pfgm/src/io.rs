//! File formats: datasets and samples as CSV, checkpoints and reports as JSON.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use pfgm_core::model::TrainConfig;
use pfgm_core::ode::OdeRun;
use pfgm_core::{Dataset, Mlp, PerturbConfig};
use serde::{Deserialize, Serialize};

use crate::config::Derivations;
use crate::error::CliError;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CsvOptions {
    pub header: bool,
    /// Treat the last column as the charge of each point.
    pub charge_column: bool,
}

pub fn read_csv(text: &str, opts: CsvOptions) -> Result<Dataset, CliError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(opts.header)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut width = None;
    let mut flat = Vec::new();
    let mut charges = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 1;
        let rec = rec.map_err(|e| CliError::Parse(format!("row {row}: {e}")))?;
        if rec.iter().all(|f| f.is_empty()) {
            continue;
        }
        let w = *width.get_or_insert(rec.len());
        if rec.len() != w {
            return Err(CliError::Parse(format!("row {row}: expected {w} fields, found {}", rec.len())));
        }
        let mut vals = Vec::with_capacity(w);
        for (j, f) in rec.iter().enumerate() {
            let v: f64 = f
                .parse()
                .map_err(|_| CliError::Parse(format!("row {row}, column {}: `{f}` is not a number", j + 1)))?;
            if !v.is_finite() {
                return Err(CliError::Parse(format!("row {row}, column {}: non-finite value", j + 1)));
            }
            vals.push(v);
        }
        if opts.charge_column {
            let q = vals.pop().unwrap_or(0.0);
            if !(q > 0.0) {
                return Err(CliError::Parse(format!("row {row}: charge must be positive, got {q}")));
            }
            charges.push(q);
        }
        if vals.is_empty() {
            return Err(CliError::Parse(format!("row {row}: no coordinates")));
        }
        flat.extend(vals);
    }
    let n = width.ok_or_else(|| CliError::Parse("no data rows".into()))? - usize::from(opts.charge_column);
    let d = Dataset::from_flat(n, flat)?;
    if opts.charge_column {
        Ok(d.with_charges(charges)?)
    } else {
        Ok(d)
    }
}

pub fn load_csv(path: &Path, opts: CsvOptions) -> Result<Dataset, CliError> {
    let mut text = String::new();
    File::open(path)
        .map_err(|e| CliError::NotFound(format!("{}: {e}", path.display())))?
        .read_to_string(&mut text)?;
    read_csv(&text, opts).map_err(|e| match e {
        CliError::Parse(m) => CliError::Parse(format!("{}: {m}", path.display())),
        other => other,
    })
}

fn header_row(n: usize, charge: bool) -> Vec<String> {
    let mut h: Vec<String> = (1..=n).map(|i| format!("x{i}")).collect();
    if charge {
        h.push("charge".into());
    }
    h
}

pub fn write_csv<W: Write>(out: W, d: &Dataset, opts: CsvOptions) -> Result<(), CliError> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    let n = d.dim().n();
    if opts.header {
        w.write_record(header_row(n, opts.charge_column)).map_err(csv_err)?;
    }
    for (i, p) in d.iter().enumerate() {
        let mut row: Vec<String> = p.iter().map(|v| v.to_string()).collect();
        if opts.charge_column {
            row.push(d.charge(i).to_string());
        }
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_csv(path: &Path, d: &Dataset, opts: CsvOptions) -> Result<(), CliError> {
    write_csv(BufWriter::new(File::create(path)?), d, opts)
}

fn csv_err(e: csv::Error) -> CliError {
    CliError::Io(std::io::Error::other(e))
}

/// Generic table writer: one header row, then rows of numbers.
pub fn save_table(path: &Path, header: &[String], rows: impl IntoIterator<Item = Vec<f64>>) -> Result<(), CliError> {
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
    w.write_record(header).map_err(csv_err)?;
    for r in rows {
        w.write_record(r.iter().map(|v| v.to_string())).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Trajectory dump: `run, t', x_1..x_N, z, norm_x`.
pub fn save_trajectories(path: &Path, runs: &[OdeRun], n: usize) -> Result<(), CliError> {
    let mut header = vec!["run".to_string(), "t".to_string()];
    header.extend((1..=n).map(|i| format!("x{i}")));
    header.push("z".into());
    header.push("norm_x".into());
    let rows = runs.iter().enumerate().flat_map(|(k, r)| {
        r.trajectory.iter().map(move |p| {
            let mut row = vec![k as f64, p.t];
            row.extend_from_slice(&p.x);
            row.push(p.z);
            row.push(p.norm_x);
            row
        })
    });
    save_table(path, &header, rows)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::NotFound(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Parse(format!("{}: {e}", path.display())))
}

pub const CHECKPOINT_FORMAT: &str = "pfgm-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Trained network with the settings that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub data_dim: usize,
    pub ema: Mlp,
    pub raw: Mlp,
    pub perturb: PerturbConfig,
    pub train: TrainConfig,
    /// Schedule derived from the training data; sampling reuses it.
    pub derivations: Derivations,
    pub loss_final: Option<f64>,
}

impl Checkpoint {
    pub fn new(
        ema: Mlp,
        raw: Mlp,
        perturb: PerturbConfig,
        train: TrainConfig,
        derivations: Derivations,
        loss_final: Option<f64>,
    ) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            data_dim: ema.data_dim,
            ema,
            raw,
            perturb,
            train,
            derivations,
            loss_final,
        }
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let c: Checkpoint = read_json(path)?;
        if c.format != CHECKPOINT_FORMAT || c.version != CHECKPOINT_VERSION {
            return Err(CliError::Parse(format!(
                "{}: unsupported checkpoint {} v{}",
                path.display(),
                c.format,
                c.version
            )));
        }
        if c.ema.data_dim != c.data_dim || c.raw.data_dim != c.data_dim {
            return Err(CliError::Dimension {
                expected: c.data_dim,
                got: c.ema.data_dim,
            });
        }
        Ok(c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reads_simple_rows() {
        let d = read_csv("1.0,2.0\n3.0,4.0", CsvOptions::default()).unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d.point(1), &[3.0, 4.0]);
    }

    #[test]
    fn reports_bad_field_row() {
        let e = read_csv("1.0,x", CsvOptions::default()).unwrap_err();
        assert!(e.to_string().contains("row 1"), "{e}");
        let e = read_csv("1,2\n3,4\n5\n", CsvOptions::default()).unwrap_err();
        assert!(e.to_string().contains("row 3"), "{e}");
        let opts = CsvOptions {
            charge_column: true,
            ..Default::default()
        };
        let e = read_csv("1,2,1\n3,4,-1\n", opts).unwrap_err();
        assert!(e.to_string().contains("row 2") && e.to_string().contains("charge"), "{e}");
    }

    #[test]
    fn header_and_charges_roundtrip() {
        let opts = CsvOptions {
            header: true,
            charge_column: true,
        };
        let d = Dataset::from_rows(&[[0.1, -2.5], [1e-17, 3.0]]).unwrap().with_charges(vec![1.0, 2.5]).unwrap();
        let mut buf = Vec::new();
        write_csv(&mut buf, &d, opts).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("x1,x2,charge\n"));
        assert_eq!(read_csv(&text, opts).unwrap(), d);
    }
}
