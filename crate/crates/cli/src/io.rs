//! CSV layouts shared by every command.
//!
//! Data files are `id,x,y,<covariates>,y_obs`; prediction inputs may omit
//! `y_obs`. Samples are `chain,iteration,<parameters>,log_lik[,w_0,...]`.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use anyhow::Context;
use nalgebra::DMatrix;

use nngp::geo::{LocationSet, Point};
use nngp::mcmc::{Algorithm, ChainSamples, PosteriorSamples};
use nngp::model::{Dataset, ParamLayout};
use nngp::predict::LocationSummary;

use crate::error::CliError;

#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub ids: Vec<i64>,
    pub coords: Vec<Point>,
    pub covariates: Vec<String>,
    /// One row of covariates per location.
    pub x: Vec<Vec<f64>>,
    pub y: Option<Vec<f64>>,
}

impl Table {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn design(&self, intercept: bool) -> DMatrix<f64> {
        let off = usize::from(intercept);
        let p = self.covariates.len() + off;
        DMatrix::from_fn(self.len(), p, |i, j| if j < off { 1.0 } else { self.x[i][j - off] })
    }

    pub fn locations(&self) -> anyhow::Result<LocationSet> {
        Ok(LocationSet::new_allow_empty(self.coords.clone())?)
    }

    pub fn dataset(&self, intercept: bool) -> anyhow::Result<Dataset> {
        let y = self.y.clone().context("data file has no y_obs column").map_err(|e| CliError::validation(e.to_string()))?;
        Ok(Dataset::new(LocationSet::new(self.coords.clone())?, y, self.design(intercept))?)
    }
}

fn open_reader(path: &Path) -> anyhow::Result<csv::Reader<File>> {
    let f = File::open(path).map_err(|e| CliError::io(format!("cannot open {}: {e}", path.display())))?;
    Ok(csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(f))
}

pub fn create(path: &Path) -> anyhow::Result<BufWriter<File>> {
    let f = File::create(path).map_err(|e| CliError::io(format!("cannot create {}: {e}", path.display())))?;
    Ok(BufWriter::new(f))
}

fn parse_num(s: &str, path: &Path, row: usize, col: &str) -> anyhow::Result<f64> {
    s.parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| CliError::validation(format!("{}: row {row}, column {col}: '{s}' is not a finite number", path.display())).into())
}

pub fn read_table(path: &Path, require_y: bool) -> anyhow::Result<Table> {
    let mut rdr = open_reader(path)?;
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let bad = |msg: String| -> anyhow::Error { CliError::validation(format!("{}: {msg}", path.display())).into() };
    if header.len() < 3 || header[0] != "id" || header[1] != "x" || header[2] != "y" {
        return Err(bad("header must start with id,x,y".into()));
    }
    let has_y = header.last().is_some_and(|h| h == "y_obs");
    if require_y && !has_y {
        return Err(bad("header must end with y_obs".into()));
    }
    let cov_end = header.len() - usize::from(has_y);
    let covariates = header[3..cov_end].to_vec();
    if let Some(c) = covariates.iter().find(|c| c.as_str() == "y_obs") {
        return Err(bad(format!("column '{c}' must be last")));
    }
    let mut t = Table {
        ids: Vec::new(),
        coords: Vec::new(),
        covariates,
        x: Vec::new(),
        y: has_y.then(Vec::new),
    };
    let mut seen = std::collections::HashSet::new();
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = r + 1;
        if rec.len() != header.len() {
            return Err(bad(format!("row {row} has {} fields, expected {}", rec.len(), header.len())));
        }
        let id: i64 = rec[0].parse().map_err(|_| bad(format!("row {row}: id '{}' is not an integer", &rec[0])))?;
        if !seen.insert(id) {
            return Err(bad(format!("duplicate id {id}")));
        }
        t.ids.push(id);
        t.coords.push([parse_num(&rec[1], path, row, "x")?, parse_num(&rec[2], path, row, "y")?]);
        let mut xs = Vec::with_capacity(t.covariates.len());
        for (j, name) in t.covariates.iter().enumerate() {
            xs.push(parse_num(&rec[3 + j], path, row, name)?);
        }
        t.x.push(xs);
        if let Some(y) = t.y.as_mut() {
            y.push(parse_num(&rec[cov_end], path, row, "y_obs")?);
        }
    }
    Ok(t)
}

pub fn write_table(path: &Path, t: &Table) -> anyhow::Result<()> {
    let mut w = create(path)?;
    let mut head = vec!["id".to_string(), "x".into(), "y".into()];
    head.extend(t.covariates.iter().cloned());
    if t.y.is_some() {
        head.push("y_obs".into());
    }
    writeln!(w, "{}", head.join(","))?;
    for i in 0..t.len() {
        write!(w, "{},{},{}", t.ids[i], t.coords[i][0], t.coords[i][1])?;
        for v in &t.x[i] {
            write!(w, ",{v}")?;
        }
        if let Some(y) = &t.y {
            write!(w, ",{}", y[i])?;
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_samples(path: &Path, s: &PosteriorSamples) -> anyhow::Result<()> {
    let mut w = create(path)?;
    let w_len = s.chains.iter().find_map(|c| c.w.first().map(Vec::len)).unwrap_or(0);
    let mut head = vec!["chain".to_string(), "iteration".into()];
    head.extend(s.names.iter().cloned());
    head.push("log_lik".into());
    head.extend((0..w_len).map(|i| format!("w_{i}")));
    writeln!(w, "{}", head.join(","))?;
    for (c, chain) in s.chains.iter().enumerate() {
        for (d, row) in chain.params.iter().enumerate() {
            write!(w, "{c},{}", chain.iterations[d])?;
            for v in row {
                write!(w, ",{v}")?;
            }
            write!(w, ",{}", chain.log_lik[d])?;
            if let Some(wv) = chain.w.get(d) {
                for v in wv {
                    write!(w, ",{v}")?;
                }
            }
            writeln!(w)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads samples written by [`write_samples`]; the parameter columns must
/// match `layout`.
pub fn read_samples(path: &Path, algorithm: Algorithm, layout: ParamLayout, burn_in: usize) -> anyhow::Result<PosteriorSamples> {
    let mut rdr = open_reader(path)?;
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let names = layout.names();
    let np = names.len();
    let bad = |msg: String| -> anyhow::Error { CliError::validation(format!("{}: {msg}", path.display())).into() };
    if header.len() < np + 3 || header[0] != "chain" || header[1] != "iteration" || header[2..2 + np] != names[..] || header[2 + np] != "log_lik" {
        return Err(bad(format!("header does not match chain,iteration,{},log_lik", names.join(","))));
    }
    let w_len = header.len() - np - 3;
    let mut chains: Vec<ChainSamples> = Vec::new();
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = r + 1;
        if rec.len() != header.len() {
            return Err(bad(format!("row {row} has {} fields, expected {}", rec.len(), header.len())));
        }
        let chain: usize = rec[0].parse().map_err(|_| bad(format!("row {row}: bad chain index")))?;
        let iteration: usize = rec[1].parse().map_err(|_| bad(format!("row {row}: bad iteration")))?;
        let nums = (2..rec.len()).map(|j| parse_num(&rec[j], path, row, &header[j])).collect::<anyhow::Result<Vec<f64>>>()?;
        if chain > chains.len() {
            return Err(bad(format!("row {row}: chains must appear in order")));
        }
        if chain == chains.len() {
            chains.push(ChainSamples::default());
        }
        let c = &mut chains[chain];
        c.iterations.push(iteration);
        c.params.push(nums[..np].to_vec());
        c.log_lik.push(nums[np]);
        if w_len > 0 {
            c.w.push(nums[np + 1..].to_vec());
        }
    }
    Ok(PosteriorSamples { algorithm, layout, names, burn_in, chains })
}

pub fn write_predictions(path: &Path, ids: &[i64], s: &[LocationSummary]) -> anyhow::Result<()> {
    let mut w = create(path)?;
    writeln!(w, "id,mean,q025,q50,q975")?;
    for (id, p) in ids.iter().zip(s) {
        writeln!(w, "{id},{},{},{},{}", p.mean, p.q025, p.q50, p.q975)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_matrix_rows(path: &Path, header: &str, ids: &[i64], m: &DMatrix<f64>) -> anyhow::Result<()> {
    let mut w = create(path)?;
    writeln!(w, "{header}")?;
    for (i, id) in ids.iter().enumerate() {
        write!(w, "{id}")?;
        for v in m.row(i).iter() {
            write!(w, ",{v}")?;
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}
