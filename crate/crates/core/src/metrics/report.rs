use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::{fsr, FsrSpec, MetricsError, ProbePoint, TestLossRecord};
use crate::fooling::FoolMethod;
use crate::interpreters::InterpreterKind;

#[derive(Debug, Serialize, Deserialize)]
struct CsvRow {
    sample_id: String,
    method: String,
    interpreter: String,
    t_i: f64,
    in_range: bool,
}

/// Writes records as `sample_id,method,interpreter,t_i,in_range`.
pub fn write_records_csv<W: Write>(
    out: W,
    method: FoolMethod,
    interpreter: InterpreterKind,
    records: &[TestLossRecord],
) -> Result<(), MetricsError> {
    let mut w = csv::Writer::from_writer(out);
    for r in records {
        w.serialize(CsvRow {
            sample_id: r.sample_id.clone(),
            method: method.name().into(),
            interpreter: interpreter.name().into(),
            t_i: r.t,
            in_range: r.in_range,
        })
        .map_err(|e| MetricsError::Csv(e.to_string()))?;
    }
    w.flush().map_err(|e| MetricsError::Csv(e.to_string()))
}

/// Parses a record dump. Every row must name the same method and
/// interpreter and carry a finite loss.
pub fn read_records_csv<R: Read>(input: R) -> Result<(FoolMethod, InterpreterKind, Vec<TestLossRecord>), MetricsError> {
    let mut rd = csv::Reader::from_reader(input);
    let mut head: Option<(FoolMethod, InterpreterKind)> = None;
    let mut records = Vec::new();
    for (line, row) in rd.deserialize::<CsvRow>().enumerate() {
        let row = row.map_err(|e| MetricsError::Csv(e.to_string()))?;
        let method: FoolMethod = row.method.parse().map_err(|_| MetricsError::Csv(format!("row {line}: unknown method `{}`", row.method)))?;
        let interp: InterpreterKind = row
            .interpreter
            .parse()
            .map_err(|_| MetricsError::Csv(format!("row {line}: unknown interpreter `{}`", row.interpreter)))?;
        match head {
            None => head = Some((method, interp)),
            Some(h) if h != (method, interp) => {
                return Err(MetricsError::Csv(format!("row {line}: mixed methods or interpreters")))
            }
            _ => {}
        }
        if !row.t_i.is_finite() {
            return Err(MetricsError::Csv(format!("row {line}: non-finite t_i")));
        }
        records.push(TestLossRecord { sample_id: row.sample_id, t: row.t_i, in_range: row.in_range });
    }
    let (m, i) = head.ok_or(MetricsError::Empty)?;
    Ok((m, i, records))
}

/// FSR values with rows for the interpreter used while fooling and columns
/// for the interpreter evaluated afterwards.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FsrTable {
    pub rows: Vec<String>,
    pub cols: Vec<String>,
    pub values: Vec<Vec<Option<f64>>>,
}

impl FsrTable {
    pub fn set(
        &mut self,
        fooled_with: InterpreterKind,
        evaluated: InterpreterKind,
        records: &[TestLossRecord],
        spec: &FsrSpec,
    ) -> Result<f64, MetricsError> {
        let v = fsr(records, spec)?;
        let r = index_of(&mut self.rows, fooled_with.name());
        let c = index_of(&mut self.cols, evaluated.name());
        let cols = self.cols.len();
        self.values.resize_with(self.rows.len(), Vec::new);
        for row in &mut self.values {
            row.resize(cols, None);
        }
        self.values[r][c] = Some(v);
        Ok(v)
    }

    pub fn get(&self, fooled_with: InterpreterKind, evaluated: InterpreterKind) -> Option<f64> {
        let r = self.rows.iter().position(|s| s == fooled_with.name())?;
        let c = self.cols.iter().position(|s| s == evaluated.name())?;
        self.values[r][c]
    }
}

fn index_of(names: &mut Vec<String>, name: &str) -> usize {
    match names.iter().position(|s| s == name) {
        Some(i) => i,
        None => {
            names.push(name.to_string());
            names.len() - 1
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub baseline_acc: f64,
    pub fooled_acc: f64,
    /// `baseline_acc − fooled_acc`.
    pub accuracy_delta: f64,
    pub fsr_table: FsrTable,
    pub aopc_curves: BTreeMap<String, Vec<f64>>,
    pub perturb_curves: BTreeMap<String, Vec<ProbePoint>>,
}

impl Report {
    pub fn new(baseline_acc: f64, fooled_acc: f64) -> Self {
        Self {
            baseline_acc,
            fooled_acc,
            accuracy_delta: baseline_acc - fooled_acc,
            fsr_table: FsrTable::default(),
            aopc_curves: BTreeMap::new(),
            perturb_curves: BTreeMap::new(),
        }
    }
}
