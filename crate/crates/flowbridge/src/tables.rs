//! CSV outputs and schema-checked table input.

use std::collections::BTreeMap;
use std::path::Path;

use flowbridge_core::backbone::StepRecord;
use flowbridge_core::evaluation::{SampleTable, TableSchema};

use crate::error::CliError;

pub fn write_history(path: &Path, history: &[StepRecord]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["step", "epoch", "total", "coord", "chi", "atom", "bond", "grad_norm", "mean_sigma2"])?;
    for r in history {
        let l = &r.loss;
        w.write_record([
            r.step.to_string(),
            r.epoch.to_string(),
            l.total.to_string(),
            l.coord.to_string(),
            l.chi.to_string(),
            l.atom.to_string(),
            l.bond.to_string(),
            r.grad_norm.to_string(),
            r.mean_sigma2.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Rows of named string cells under a fixed header.
pub struct RowWriter {
    inner: csv::Writer<std::fs::File>,
}

impl RowWriter {
    pub fn create(path: &Path, header: &[&str]) -> Result<Self, CliError> {
        let mut inner = csv::Writer::from_path(path)?;
        inner.write_record(header)?;
        Ok(Self { inner })
    }

    pub fn row(&mut self, cells: &[String]) -> Result<(), CliError> {
        self.inner.write_record(cells)?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<(), CliError> {
        self.inner.flush()?;
        Ok(())
    }
}

/// Reads the schema's columns from a CSV file. Missing columns and unparsable
/// continuous cells are schema errors.
pub fn read_table(path: &Path, schema: &TableSchema) -> Result<SampleTable, CliError> {
    let mut r = csv::Reader::from_path(path)?;
    let header: BTreeMap<String, usize> = r.headers()?.iter().enumerate().map(|(i, h)| (h.to_string(), i)).collect();
    let index = |name: &String| {
        header
            .get(name)
            .copied()
            .ok_or_else(|| CliError::Schema(format!("{}: missing column `{name}`", path.display())))
    };
    let cont: Vec<(String, usize)> = schema.continuous.iter().map(|c| Ok((c.clone(), index(c)?))).collect::<Result<_, CliError>>()?;
    let cat: Vec<(String, usize)> = schema.categorical.iter().map(|c| Ok((c.clone(), index(c)?))).collect::<Result<_, CliError>>()?;
    let mut table = SampleTable::default();
    for (name, _) in &cont {
        table.continuous.insert(name.clone(), Vec::new());
    }
    for (name, _) in &cat {
        table.categorical.insert(name.clone(), Vec::new());
    }
    for (line, rec) in r.records().enumerate() {
        let rec = rec?;
        for (name, i) in &cont {
            let cell = rec.get(*i).unwrap_or("");
            let v: f64 = cell.trim().parse().map_err(|_| {
                CliError::Schema(format!("{}: row {}: column `{name}` is not a number: `{cell}`", path.display(), line + 1))
            })?;
            table.continuous.get_mut(name).expect("column inserted above").push(v);
        }
        for (name, i) in &cat {
            table.categorical.get_mut(name).expect("column inserted above").push(rec.get(*i).unwrap_or("").to_string());
        }
    }
    schema.check(&table).map_err(|e| CliError::Schema(format!("{}: {e}", path.display())))?;
    Ok(table)
}
