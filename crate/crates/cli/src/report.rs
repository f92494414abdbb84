//! Joins eval tables, epoch logs and sweep tables into one comparison table.

use vbp_core::table::Table;
use vbp_core::{FormatError, Result, VbpError};

pub struct ReportInputs {
    /// Tables written by `vbp eval`; the first row of the first is the dense reference.
    pub evals: Vec<Table>,
    /// `(model name, epoch log)`; the best `val_top1` becomes that model's final accuracy.
    pub logs: Vec<(String, Table)>,
    /// `(name, sweep table)`.
    pub sweeps: Vec<(String, Table)>,
}

fn col(t: &Table, name: &str, what: &str) -> Result<usize> {
    t.column(name)
        .ok_or_else(|| VbpError::Format(FormatError::Manifest(format!("{what} table has no `{name}` column"))))
}

fn num(cell: &str, what: &str) -> Result<f64> {
    cell.parse()
        .map_err(|_| VbpError::Format(FormatError::Manifest(format!("{what}: `{cell}` is not a number"))))
}

fn best_val(log: &Table) -> Result<f64> {
    let c = col(log, "val_top1", "epoch log")?;
    let mut best = f64::NEG_INFINITY;
    for row in &log.rows {
        best = best.max(num(&row[c], "epoch log")?);
    }
    if log.rows.is_empty() {
        return Err(VbpError::Format(FormatError::Manifest("epoch log has no rows".into())));
    }
    Ok(best)
}

/// `model, macs, params, top1, retention, final`.
pub fn build_report(inputs: &ReportInputs) -> Result<Table> {
    let mut out = Table::new(["model", "macs", "params", "top1", "retention", "final"]);
    let mut reference = None;
    for t in &inputs.evals {
        let (m, macs, params, top1) =
            (col(t, "model", "eval")?, col(t, "macs", "eval")?, col(t, "params", "eval")?, col(t, "top1", "eval")?);
        for row in &t.rows {
            let acc = num(&row[top1], "eval")?;
            let dense = *reference.get_or_insert(acc);
            let fin = match inputs.logs.iter().find(|(name, _)| name == &row[m]) {
                Some((_, log)) => format!("{:.6}", best_val(log)?),
                None => String::new(),
            };
            let ret = if dense > 0.0 { acc / dense } else { 0.0 };
            out.push([
                row[m].clone(),
                row[macs].clone(),
                row[params].clone(),
                row[top1].clone(),
                format!("{ret:.6}"),
                fin,
            ]);
        }
    }
    if let Some((name, _)) = inputs.logs.iter().find(|(name, _)| !out.rows.iter().any(|r| &r[0] == name)) {
        return Err(VbpError::Usage(format!("epoch log `{name}` matches no evaluated model")));
    }
    for (name, t) in &inputs.sweeps {
        let (rate, macs, params, ret, fin) = (
            col(t, "rate", "sweep")?,
            col(t, "macs", "sweep")?,
            col(t, "params", "sweep")?,
            col(t, "retention", "sweep")?,
            col(t, "final", "sweep")?,
        );
        for row in &t.rows {
            out.push([
                format!("{name}@{}", row[rate]),
                row[macs].clone(),
                row[params].clone(),
                String::new(),
                row[ret].clone(),
                row[fin].clone(),
            ]);
        }
    }
    Ok(out)
}
