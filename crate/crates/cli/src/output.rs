use std::collections::BTreeMap;
use std::io::Write;

use anyhow::Result;
use cireg_core::em::EmTraceRow;
use cireg_core::StepCumHaz;
use serde::Serialize;

/// Baseline table at the jump times. A single unlabelled stratum gives
/// `tau,cumhaz,var,lo,hi`; otherwise a `stratum` column leads.
pub fn write_baseline<W: Write>(writer: W, baseline: &BTreeMap<i64, StepCumHaz>, alpha: f64) -> Result<()> {
    let stratified = baseline.keys().any(|&s| s != 0);
    let mut w = csv::Writer::from_writer(writer);
    if stratified {
        w.write_record(["stratum", "tau", "cumhaz", "var", "lo", "hi"])?;
    } else {
        w.write_record(["tau", "cumhaz", "var", "lo", "hi"])?;
    }
    for (stratum, h) in baseline {
        for p in h.table(alpha) {
            let mut rec = Vec::with_capacity(6);
            if stratified {
                rec.push(stratum.to_string());
            }
            rec.extend([p.tau, p.cumhaz, p.var, p.lo, p.hi].map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_trace<W: Write>(writer: W, names: &[String], trace: &[EmTraceRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header: Vec<String> = [
        "iteration",
        "expected_loglik",
        "warm_start_loglik",
        "delta_loglik",
        "max_abs_delta_beta",
        "sup_delta_cumhaz",
        "newton_iterations",
    ]
    .map(String::from)
    .to_vec();
    header.extend(names.iter().map(|n| format!("beta_{n}")));
    w.write_record(&header)?;
    for row in trace {
        let mut rec = vec![
            row.iteration.to_string(),
            row.expected_loglik.to_string(),
            row.warm_start_loglik.to_string(),
            row.delta_loglik.to_string(),
            row.max_abs_delta_beta.to_string(),
            row.sup_delta_cumhaz.to_string(),
            row.newton_iterations.to_string(),
        ];
        rec.extend(row.beta.iter().map(f64::to_string));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_json<W: Write, T: Serialize>(mut writer: W, value: &T) -> Result<()> {
    serde_json::to_writer_pretty(&mut writer, value)?;
    writeln!(writer)?;
    Ok(())
}
