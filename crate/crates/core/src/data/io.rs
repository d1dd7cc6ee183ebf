//! CSV formats for line lists, contact pairs, and exported pair rows.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use super::{ContactSet, LineList, LineListRecord, PairRiskRow};
use crate::error::{Error, Result};

const LINE_LIST_FIXED: [&str; 7] = [
    "id",
    "group",
    "t_infection",
    "latent",
    "infectious_period",
    "obs_limit",
    "imported",
];
const INFECTOR_COLUMN: &str = "infector";
const PAIR_ROW_FIXED: [&str; 8] = ["i", "j", "start", "stop", "event", "candidate", "stratum", "weight"];

fn parse_number(cell: &str) -> std::result::Result<Option<f64>, String> {
    let cell = cell.trim();
    if cell.is_empty() {
        return Ok(None);
    }
    match cell {
        "inf" | "Inf" | "+inf" | "Infinity" => return Ok(Some(f64::INFINITY)),
        _ => {}
    }
    cell.parse::<f64>()
        .map(Some)
        .map_err(|_| format!("`{cell}` is not a number"))
}

fn parse_finite(cell: &str, what: &str) -> std::result::Result<Option<f64>, String> {
    match parse_number(cell)? {
        Some(v) if !v.is_finite() => Err(format!("{what} must be finite, got `{}`", cell.trim())),
        other => Ok(other),
    }
}

fn parse_id(cell: &str, what: &str) -> std::result::Result<u64, String> {
    cell.trim()
        .parse::<u64>()
        .map_err(|_| format!("{what} `{}` is not a non-negative integer", cell.trim()))
}

fn parse_flag(cell: &str) -> std::result::Result<bool, String> {
    match cell.trim() {
        "" | "0" | "false" | "FALSE" | "False" | "no" => Ok(false),
        "1" | "true" | "TRUE" | "True" | "yes" => Ok(true),
        other => Err(format!("`{other}` is not a boolean flag")),
    }
}

fn line_of(record: &csv::StringRecord) -> u64 {
    record.position().map(|p| p.line()).unwrap_or(0)
}

/// Reads a line list: `id,group,t_infection,latent,infectious_period,obs_limit,imported`,
/// an optional `infector` column, then covariate columns. Empty cells are missing.
pub fn read_line_list<R: Read>(reader: R, source_name: &str) -> Result<LineList> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    for (k, want) in LINE_LIST_FIXED.iter().enumerate() {
        if headers.get(k) != Some(want) {
            return Err(Error::row(
                source_name,
                1,
                format!("expected column {} to be `{want}`", k + 1),
            ));
        }
    }
    let has_infector = headers.get(LINE_LIST_FIXED.len()) == Some(INFECTOR_COLUMN);
    let first_cov = LINE_LIST_FIXED.len() + usize::from(has_infector);
    let covariate_names: Vec<String> = headers.iter().skip(first_cov).map(str::to_string).collect();

    let mut records = Vec::new();
    for result in rdr.records() {
        let row = result?;
        let line = line_of(&row);
        let fail = |m: String| Error::row(source_name, line, m);
        let cell = |k: usize| row.get(k).unwrap_or("");

        let id = parse_id(cell(0), "id").map_err(fail)?;
        let group = Some(cell(1).to_string()).filter(|g| !g.is_empty());
        let t_infection = parse_number(cell(2))
            .map_err(fail)?
            .ok_or_else(|| fail("t_infection is required (use `inf` if never infected)".into()))?;
        let infected = t_infection.is_finite();
        let latent = match parse_finite(cell(3), "latent").map_err(fail)? {
            Some(v) => v,
            None if !infected => 0.0,
            None => return Err(fail("latent period missing for an infected individual".into())),
        };
        let infectious_period = parse_finite(cell(4), "infectious_period").map_err(fail)?;
        let obs_limit = parse_number(cell(5))
            .map_err(fail)?
            .ok_or_else(|| fail("obs_limit is required".into()))?;
        let imported = parse_flag(cell(6)).map_err(fail)?;
        let infector = if has_infector && !cell(7).is_empty() {
            Some(parse_id(cell(7), "infector").map_err(fail)?)
        } else {
            None
        };
        let covariates = (first_cov..first_cov + covariate_names.len())
            .map(|k| parse_finite(cell(k), "covariate"))
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(fail)?;
        let rec = LineListRecord {
            id,
            group,
            t_infection,
            latent,
            infectious_period,
            obs_limit,
            imported,
            infector,
            covariates,
        };
        rec.validate().map_err(fail)?;
        records.push(rec);
    }
    LineList::new(covariate_names, records)
}

/// Reads an explicit contact file `i,j,<pair covariates>`.
pub fn read_pairs<R: Read>(reader: R, source_name: &str) -> Result<ContactSet> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    if headers.get(0) != Some("i") || headers.get(1) != Some("j") {
        return Err(Error::row(source_name, 1, "expected leading columns `i,j`"));
    }
    let names: Vec<String> = headers.iter().skip(2).map(str::to_string).collect();
    let mut set = ContactSet::new(names.clone());
    for result in rdr.records() {
        let row = result?;
        let line = line_of(&row);
        let fail = |m: String| Error::row(source_name, line, m);
        let i = parse_id(row.get(0).unwrap_or(""), "i").map_err(fail)?;
        let j = parse_id(row.get(1).unwrap_or(""), "j").map_err(fail)?;
        let covs = (2..2 + names.len())
            .map(|k| parse_finite(row.get(k).unwrap_or(""), "pair covariate"))
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(fail)?;
        set.insert(i, j, covs).map_err(|e| fail(e.to_string()))?;
    }
    Ok(set)
}

/// Loads a line list and its contact set. Contacts come from `pairs` when
/// given, otherwise from all ordered pairs within each `group`.
///
/// With `empty_set_imported`, infectees without any possible infector are
/// flagged as imported instead of rejected.
pub fn load_line_list(path: &Path, pairs: Option<&Path>, empty_set_imported: bool) -> Result<(LineList, ContactSet)> {
    let name = path.display().to_string();
    let mut line_list = read_line_list(File::open(path)?, &name)?;
    let contacts = match pairs {
        Some(p) => read_pairs(File::open(p)?, &p.display().to_string())?,
        None => ContactSet::from_groups(&line_list),
    };
    let sets = super::InfectiousSets::compute(&line_list, &contacts);
    let empty = sets.empty_ids();
    if !empty.is_empty() {
        if empty_set_imported {
            let marked = line_list.mark_unexplained_as_imported(&contacts);
            log::warn!("treating {} infectees without possible infectors as imported", marked.len());
        } else {
            return Err(Error::EmptyInfectiousSet(empty[0]));
        }
    }
    Ok((line_list, contacts))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt_num).unwrap_or_default()
}

fn fmt_num(v: f64) -> String {
    if v == f64::INFINITY {
        "inf".to_string()
    } else {
        v.to_string()
    }
}

pub fn write_line_list<W: Write>(writer: W, line_list: &LineList, with_infector: bool) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header: Vec<String> = LINE_LIST_FIXED.iter().map(|s| s.to_string()).collect();
    if with_infector {
        header.push(INFECTOR_COLUMN.into());
    }
    header.extend(line_list.covariate_names.iter().cloned());
    w.write_record(&header)?;
    for rec in &line_list.records {
        let mut out = vec![
            rec.id.to_string(),
            rec.group.clone().unwrap_or_default(),
            fmt_num(rec.t_infection),
            fmt_num(rec.latent),
            fmt_opt(rec.infectious_period),
            fmt_num(rec.obs_limit),
            if rec.imported { "1" } else { "0" }.to_string(),
        ];
        if with_infector {
            out.push(rec.infector.map(|v| v.to_string()).unwrap_or_default());
        }
        out.extend(rec.covariates.iter().map(|&c| fmt_opt(c)));
        w.write_record(&out)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_pairs<W: Write>(writer: W, contacts: &ContactSet) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["i".to_string(), "j".to_string()];
    header.extend(contacts.pair_covariate_names().iter().cloned());
    w.write_record(&header)?;
    for (i, j, covs) in contacts.iter() {
        let mut out = vec![i.to_string(), j.to_string()];
        out.extend(covs.iter().map(|&c| fmt_opt(c)));
        w.write_record(&out)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes `i,j,start,stop,event,candidate,stratum,weight,<covariates>`.
/// Floats use the shortest representation that parses back to the same bits.
pub fn write_pair_rows<W: Write>(writer: W, covariate_names: &[String], rows: &[PairRiskRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header: Vec<String> = PAIR_ROW_FIXED.iter().map(|s| s.to_string()).collect();
    header.extend(covariate_names.iter().cloned());
    w.write_record(&header)?;
    for r in rows {
        let mut out = vec![
            r.infector.to_string(),
            r.susceptible.to_string(),
            fmt_num(r.start),
            fmt_num(r.stop),
            u8::from(r.event).to_string(),
            u8::from(r.candidate).to_string(),
            r.stratum.to_string(),
            fmt_num(r.weight),
        ];
        out.extend(r.covariates.iter().map(|&c| fmt_num(c)));
        w.write_record(&out)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_pair_rows<R: Read>(reader: R, source_name: &str) -> Result<(Vec<String>, Vec<PairRiskRow>)> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    for (k, want) in PAIR_ROW_FIXED.iter().enumerate() {
        if headers.get(k) != Some(want) {
            return Err(Error::row(
                source_name,
                1,
                format!("expected column {} to be `{want}`", k + 1),
            ));
        }
    }
    let names: Vec<String> = headers.iter().skip(PAIR_ROW_FIXED.len()).map(str::to_string).collect();
    let mut rows = Vec::new();
    for result in rdr.records() {
        let row = result?;
        let line = line_of(&row);
        let fail = |m: String| Error::row(source_name, line, m);
        let cell = |k: usize| row.get(k).unwrap_or("");
        let num = |k: usize, what: &str| -> Result<f64> {
            parse_finite(cell(k), what)
                .map_err(fail)?
                .ok_or_else(|| fail(format!("{what} is required")))
        };
        let start = num(2, "start")?;
        let stop = num(3, "stop")?;
        if !(start >= 0.0 && stop > start) {
            return Err(fail(format!("interval ({start}, {stop}] is empty or negative")));
        }
        let weight = num(7, "weight")?;
        if !(0.0..=1.0).contains(&weight) {
            return Err(fail(format!("weight {weight} outside [0, 1]")));
        }
        let stratum = cell(6)
            .parse::<i64>()
            .map_err(|_| fail(format!("stratum `{}` is not an integer", cell(6))))?;
        let covariates = (0..names.len())
            .map(|k| num(PAIR_ROW_FIXED.len() + k, "covariate"))
            .collect::<Result<Vec<_>>>()?;
        rows.push(PairRiskRow {
            infector: parse_id(cell(0), "i").map_err(fail)?,
            susceptible: parse_id(cell(1), "j").map_err(fail)?,
            start,
            stop,
            event: parse_flag(cell(4)).map_err(fail)?,
            candidate: parse_flag(cell(5)).map_err(fail)?,
            covariates,
            stratum,
            weight,
        });
    }
    Ok((names, rows))
}
