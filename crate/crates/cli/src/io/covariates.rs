//! Covariate table CSV.
//!
//! Required columns: sample_id, subject_id, age, sex, apoe4, diagnosis.
//! Optional: converter (blank on non-MCI rows), visit. Columns prefixed
//! `cm_` are comorbidity indicators; anything else is retained as a
//! secondary variable.

use std::path::Path;

use msae_core::data::{CovariateTable, Diagnosis};

use super::{fmt_f64, read_to_string, write_string};
use crate::error::CliError;

const REQUIRED: [&str; 6] = ["sample_id", "subject_id", "age", "sex", "apoe4", "diagnosis"];

pub fn load_covariates(path: &Path) -> Result<CovariateTable, CliError> {
    let text = read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| CliError::validation(format!("{}: empty file", path.display())))?;
    let cols: Vec<&str> = header.split(',').collect();
    for required in REQUIRED {
        if !cols.contains(&required) {
            return Err(CliError::validation(format!(
                "{}: missing required column {required:?}",
                path.display()
            )));
        }
    }
    let idx_of = |name: &str| cols.iter().position(|c| *c == name);
    let sample_i = idx_of("sample_id").unwrap();
    let subject_i = idx_of("subject_id").unwrap();
    let age_i = idx_of("age").unwrap();
    let sex_i = idx_of("sex").unwrap();
    let apoe_i = idx_of("apoe4").unwrap();
    let dx_i = idx_of("diagnosis").unwrap();
    let conv_i = idx_of("converter");
    let visit_i = idx_of("visit");

    let mut cm_cols: Vec<(usize, String)> = Vec::new();
    let mut sec_cols: Vec<(usize, String)> = Vec::new();
    for (i, name) in cols.iter().enumerate() {
        if i == sample_i
            || i == subject_i
            || i == age_i
            || i == sex_i
            || i == apoe_i
            || i == dx_i
            || Some(i) == conv_i
            || Some(i) == visit_i
        {
            continue;
        }
        if let Some(stripped) = name.strip_prefix("cm_") {
            cm_cols.push((i, stripped.to_string()));
        } else {
            sec_cols.push((i, name.to_string()));
        }
    }

    let mut sample_ids = Vec::new();
    let mut subject_ids = Vec::new();
    let mut age = Vec::new();
    let mut sex = Vec::new();
    let mut apoe4 = Vec::new();
    let mut diagnosis = Vec::new();
    let mut converter = Vec::new();
    let mut visit = Vec::new();
    let mut cm_data: Vec<Vec<u8>> = vec![Vec::new(); cm_cols.len()];
    let mut sec_data: Vec<Vec<f64>> = vec![Vec::new(); sec_cols.len()];

    for (line_no, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let row_label = line_no + 2;
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != cols.len() {
            return Err(CliError::validation(format!(
                "{}: row {row_label} has {} fields, expected {}",
                path.display(),
                fields.len(),
                cols.len()
            )));
        }
        let parse_f64 = |i: usize, what: &str| -> Result<f64, CliError> {
            fields[i].parse::<f64>().map_err(|_| {
                CliError::validation(format!(
                    "{}: row {row_label}, column {what}: cannot parse {:?}",
                    path.display(),
                    fields[i]
                ))
            })
        };
        let parse_small = |i: usize, what: &str, max: i64| -> Result<u8, CliError> {
            let v: i64 = fields[i].parse().map_err(|_| {
                CliError::validation(format!(
                    "{}: row {row_label}, column {what}: cannot parse {:?}",
                    path.display(),
                    fields[i]
                ))
            })?;
            if v < 0 || v > max {
                return Err(CliError::validation(format!(
                    "{}: row {row_label}, column {what}: value {v} out of range 0..={max}",
                    path.display()
                )));
            }
            Ok(v as u8)
        };

        sample_ids.push(fields[sample_i].to_string());
        subject_ids.push(fields[subject_i].to_string());
        age.push(parse_f64(age_i, "age")?);
        sex.push(parse_small(sex_i, "sex", 1)?);
        apoe4.push(parse_small(apoe_i, "apoe4", 2)?);
        let dx_code: i64 = fields[dx_i].parse().map_err(|_| {
            CliError::validation(format!(
                "{}: row {row_label}, column diagnosis: cannot parse {:?}",
                path.display(),
                fields[dx_i]
            ))
        })?;
        let dx = Diagnosis::from_code(dx_code).ok_or_else(|| {
            CliError::validation(format!(
                "{}: row {row_label}: diagnosis {dx_code} not in {{0, 1, 2}}",
                path.display()
            ))
        })?;
        diagnosis.push(dx);
        match conv_i {
            Some(i) if !fields[i].is_empty() => {
                converter.push(Some(parse_small(i, "converter", 1)? != 0));
            }
            _ => converter.push(None),
        }
        if let Some(i) = visit_i {
            visit.push(parse_f64(i, "visit")?);
        }
        for ((i, name), out) in cm_cols.iter().zip(&mut cm_data) {
            out.push(parse_small(*i, &format!("cm_{name}"), 1)?);
        }
        for ((i, name), out) in sec_cols.iter().zip(&mut sec_data) {
            out.push(parse_f64(*i, name)?);
        }
    }

    let comorbidities = cm_cols
        .into_iter()
        .map(|(_, name)| name)
        .zip(cm_data)
        .collect();
    let secondary = sec_cols
        .into_iter()
        .map(|(_, name)| name)
        .zip(sec_data)
        .collect();
    CovariateTable::new(
        sample_ids,
        subject_ids,
        age,
        sex,
        apoe4,
        diagnosis,
        comorbidities,
        converter,
        if visit_i.is_some() { Some(visit) } else { None },
        secondary,
    )
    .map_err(|e| match e {
        msae_core::data::DataError::ConverterOnNonMci { row } => CliError::validation(format!(
            "{}: row {}: converter label on a non-MCI row",
            path.display(),
            row + 2
        )),
        other => CliError::validation(format!("{}: {}", path.display(), other)),
    })
}

pub fn write_covariates(path: &Path, table: &CovariateTable) -> Result<(), CliError> {
    let mut out = String::new();
    out.push_str("sample_id,subject_id,age,sex,apoe4,diagnosis,converter");
    let has_visit = table.visit().is_some();
    if has_visit {
        out.push_str(",visit");
    }
    for (name, _) in table.comorbidities() {
        out.push_str(&format!(",cm_{name}"));
    }
    for (name, _) in table.secondary() {
        out.push(',');
        out.push_str(name);
    }
    out.push('\n');
    for r in 0..table.len() {
        out.push_str(&table.sample_ids()[r]);
        out.push(',');
        out.push_str(&table.subject_ids()[r]);
        out.push_str(&format!(",{}", fmt_f64(table.age()[r])));
        out.push_str(&format!(",{}", table.sex()[r]));
        out.push_str(&format!(",{}", table.apoe4()[r]));
        out.push_str(&format!(",{}", table.diagnosis()[r].ordinal() as u8));
        match table.converter()[r] {
            Some(c) => out.push_str(&format!(",{}", u8::from(c))),
            None => out.push(','),
        }
        if let Some(visit) = table.visit() {
            out.push_str(&format!(",{}", fmt_f64(visit[r])));
        }
        for (_, col) in table.comorbidities() {
            out.push_str(&format!(",{}", col[r]));
        }
        for (_, col) in table.secondary() {
            out.push_str(&format!(",{}", fmt_f64(col[r])));
        }
        out.push('\n');
    }
    write_string(path, &out)
}
