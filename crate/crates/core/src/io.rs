//! CSV input and output for payoff tables, choice datasets and results.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use serde::Serialize;

use crate::error::DataError;
use crate::estimate::{MixtureEstimate, Param, RepresentativeEstimate};
use crate::model::{Frame, PayoffConfiguration, PayoffTable, ThresholdRow};
use crate::power::PowerResult;
use crate::regress::RegressionResult;
use crate::simulate::{Arm, ChoiceDataset, ChoiceRecord, SubjectTruth};

pub const PAYOFF_HEADER: [&str; 5] = ["id", "e1", "e2", "g", "l"];
pub const DATASET_HEADER: [&str; 8] = [
    "subject_id",
    "arm",
    "sequence",
    "payoff_id",
    "frame",
    "voi",
    "p_hat",
    "choice",
];

fn display(path: &Path) -> String {
    path.display().to_string()
}

fn file_err(path: &Path, message: impl ToString) -> DataError {
    DataError::File {
        path: display(path),
        message: message.to_string(),
    }
}

fn row_err(path: &Path, line: u64, message: impl ToString) -> DataError {
    DataError::Row {
        path: display(path),
        line,
        message: message.to_string(),
    }
}

fn reader<R: Read>(r: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(r)
}

fn check_header(path: &Path, found: &csv::StringRecord, expected: &[&str]) -> Result<(), DataError> {
    let got: Vec<String> = found.iter().map(|h| h.to_ascii_lowercase()).collect();
    if got.len() < expected.len() || got[..expected.len()] != *expected {
        return Err(row_err(
            path,
            1,
            format!("expected header starting with `{}`", expected.join(",")),
        ));
    }
    Ok(())
}

fn parse_field<T: std::str::FromStr>(
    path: &Path,
    line: u64,
    rec: &csv::StringRecord,
    idx: usize,
    name: &str,
) -> Result<T, DataError>
where
    T::Err: std::fmt::Display,
{
    let raw = rec.get(idx).unwrap_or("");
    raw.parse::<T>()
        .map_err(|e| row_err(path, line, format!("column `{name}`: cannot parse `{raw}`: {e}")))
}

fn parse_flag(path: &Path, line: u64, raw: &str, name: &str) -> Result<bool, DataError> {
    match raw.to_ascii_lowercase().as_str() {
        "1" | "true" => Ok(true),
        "0" | "false" => Ok(false),
        _ => Err(row_err(
            path,
            line,
            format!("column `{name}`: expected 0/1, got `{raw}`"),
        )),
    }
}

/// Reads a payoff table with header `id,e1,e2,g,l`.
pub fn read_payoffs_from<R: Read>(r: R, path: &Path) -> Result<PayoffTable, DataError> {
    let mut rdr = reader(r);
    let header = rdr.headers().map_err(|e| file_err(path, e))?.clone();
    check_header(path, &header, &PAYOFF_HEADER)?;
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            row_err(path, line, e)
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        let id: u32 = parse_field(path, line, &rec, 0, "id")?;
        let e1: f64 = parse_field(path, line, &rec, 1, "e1")?;
        let e2: f64 = parse_field(path, line, &rec, 2, "e2")?;
        let g: f64 = parse_field(path, line, &rec, 3, "g")?;
        let l: f64 = parse_field(path, line, &rec, 4, "l")?;
        let p = PayoffConfiguration::new(id, e1, e2, g, l).map_err(|e| row_err(path, line, e))?;
        out.push(p);
    }
    if out.is_empty() {
        return Err(file_err(path, "no payoff rows"));
    }
    PayoffTable::new(out).map_err(|e| file_err(path, e))
}

pub fn read_payoffs(path: &Path) -> Result<PayoffTable, DataError> {
    let f = File::open(path).map_err(|e| file_err(path, e))?;
    read_payoffs_from(f, path)
}

pub fn write_payoffs<W: Write>(w: W, table: &PayoffTable) -> Result<(), DataError> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(PAYOFF_HEADER).map_err(csv_io)?;
    for p in table.iter() {
        wtr.serialize((p.id, p.e1, p.e2, p.g, p.l)).map_err(csv_io)?;
    }
    wtr.flush()?;
    Ok(())
}

fn csv_io(e: csv::Error) -> DataError {
    DataError::Io(std::io::Error::other(e))
}

/// Reads a choice dataset. Columns after the eight fixed ones are kept as
/// opaque controls.
pub fn read_dataset_from<R: Read>(r: R, path: &Path, payoffs: PayoffTable) -> Result<ChoiceDataset, DataError> {
    let mut rdr = reader(r);
    let header = rdr.headers().map_err(|e| file_err(path, e))?.clone();
    check_header(path, &header, &DATASET_HEADER)?;
    let control_names: Vec<String> = header.iter().skip(DATASET_HEADER.len()).map(str::to_string).collect();
    let mut records = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            row_err(path, line, e)
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        let subject_id: u32 = parse_field(path, line, &rec, 0, "subject_id")?;
        let arm: Arm = parse_field(path, line, &rec, 1, "arm")?;
        let sequence: u8 = parse_field(path, line, &rec, 2, "sequence")?;
        if !(1..=2).contains(&sequence) {
            return Err(row_err(path, line, format!("sequence {sequence} not in {{1, 2}}")));
        }
        let payoff_id: u32 = parse_field(path, line, &rec, 3, "payoff_id")?;
        let frame: Frame = parse_field(path, line, &rec, 4, "frame")?;
        let voi = parse_flag(path, line, &rec[5], "voi")?;
        let p_hat: f64 = parse_field(path, line, &rec, 6, "p_hat")?;
        let choice = parse_flag(path, line, &rec[7], "choice")?;
        let expected = arm.conditions()[usize::from(sequence - 1)];
        if expected.frame != frame || expected.voi != voi {
            return Err(row_err(
                path,
                line,
                format!("arm {arm} sequence {sequence} is not ({frame}, voi={voi})"),
            ));
        }
        records.push(ChoiceRecord {
            subject_id,
            arm,
            sequence,
            payoff_id,
            frame,
            voi,
            p_hat,
            choice,
            controls: rec.iter().skip(DATASET_HEADER.len()).map(str::to_string).collect(),
        });
    }
    ChoiceDataset::new(payoffs, records, control_names).map_err(|e| file_err(path, e))
}

pub fn read_dataset(path: &Path, payoffs: PayoffTable) -> Result<ChoiceDataset, DataError> {
    let f = File::open(path).map_err(|e| file_err(path, e))?;
    read_dataset_from(f, path, payoffs)
}

pub fn write_dataset<W: Write>(w: W, ds: &ChoiceDataset) -> Result<(), DataError> {
    let mut wtr = csv::Writer::from_writer(w);
    let mut header: Vec<&str> = DATASET_HEADER.to_vec();
    header.extend(ds.control_names.iter().map(String::as_str));
    wtr.write_record(&header).map_err(csv_io)?;
    for r in &ds.records {
        let mut row = vec![
            r.subject_id.to_string(),
            r.arm.to_string(),
            r.sequence.to_string(),
            r.payoff_id.to_string(),
            r.frame.to_string(),
            u8::from(r.voi).to_string(),
            r.p_hat.to_string(),
            u8::from(r.choice).to_string(),
        ];
        row.extend(r.controls.iter().cloned());
        wtr.write_record(&row).map_err(csv_io)?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn write_truth<W: Write>(w: W, truth: &[SubjectTruth]) -> Result<(), DataError> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["subject_id", "component"]).map_err(csv_io)?;
    for t in truth {
        wtr.serialize((t.subject_id, t.component)).map_err(csv_io)?;
    }
    wtr.flush()?;
    Ok(())
}

/// Serialises any row type with a header.
pub fn write_rows<W: Write, T: Serialize>(w: W, rows: &[T]) -> Result<(), DataError> {
    let mut wtr = csv::Writer::from_writer(w);
    for r in rows {
        wtr.serialize(r).map_err(csv_io)?;
    }
    wtr.flush()?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct ThresholdCsv {
    id: u32,
    e1: f64,
    e2: f64,
    selfish_active: f64,
    selfish_passive: f64,
    z: f64,
    kappa_intercept: f64,
    kappa_slope: f64,
}

pub fn write_thresholds<W: Write>(w: W, rows: &[ThresholdRow]) -> Result<(), DataError> {
    let csv_rows: Vec<ThresholdCsv> = rows
        .iter()
        .map(|r| ThresholdCsv {
            id: r.id,
            e1: r.e1,
            e2: r.e2,
            selfish_active: r.selfish_active,
            selfish_passive: r.selfish_passive,
            z: r.z,
            kappa_intercept: r.kappa_intercept,
            kappa_slope: r.kappa_slope,
        })
        .collect();
    write_rows(w, &csv_rows)
}

/// Aligned text rendering of the threshold table; `kappa_bar = a + b * beta`.
pub fn thresholds_text(rows: &[ThresholdRow]) -> String {
    let mut out = format!(
        "{:>3} {:>10} {:>10} {:>7} {:>7}  kappa_bar\n",
        "id", "status quo", "selfish", "z", ""
    );
    for r in rows {
        out.push_str(&format!(
            "{:>3} {:>4}, {:<4} {:>4}, {:<4} {:>7.3} {:>7}  {:.3} - {:.3} beta\n",
            r.id, r.e1, r.e2, r.selfish_active, r.selfish_passive, r.z, "", r.kappa_intercept, -r.kappa_slope
        ));
    }
    out
}

#[derive(Debug, Serialize)]
struct EstimateRow {
    #[serde(rename = "type")]
    type_index: usize,
    share: f64,
    share_se_clustered: Option<f64>,
    parameter: &'static str,
    estimate: f64,
    se_plain: Option<f64>,
    se_clustered: Option<f64>,
}

pub fn write_representative<W: Write>(w: W, est: &RepresentativeEstimate) -> Result<(), DataError> {
    let rows: Vec<EstimateRow> = Param::ALL
        .iter()
        .map(|&p| EstimateRow {
            type_index: 1,
            share: 1.0,
            share_se_clustered: None,
            parameter: p.name(),
            estimate: p.value(&est.params),
            se_plain: Some(est.se_plain(p)),
            se_clustered: est.se_clustered(p),
        })
        .collect();
    write_rows(w, &rows)
}

pub fn write_mixture<W: Write>(w: W, est: &MixtureEstimate) -> Result<(), DataError> {
    let mut rows = Vec::new();
    for (k, t) in est.types.iter().enumerate() {
        for p in Param::ALL {
            rows.push(EstimateRow {
                type_index: k + 1,
                share: t.share,
                share_se_clustered: est.share_se_clustered(k),
                parameter: p.name(),
                estimate: p.value(&t.params),
                se_plain: est.se_plain(k, p),
                se_clustered: est.se_clustered(k, p),
            });
        }
    }
    write_rows(w, &rows)
}

pub fn write_posteriors<W: Write>(w: W, est: &MixtureEstimate) -> Result<(), DataError> {
    let mut wtr = csv::Writer::from_writer(w);
    let mut header = vec!["subject_id".to_string()];
    header.extend((1..=est.k()).map(|k| format!("tau_{k}")));
    wtr.write_record(&header).map_err(csv_io)?;
    for (i, id) in est.subject_ids.iter().enumerate() {
        let mut row = vec![id.to_string()];
        row.extend(est.posteriors.row(i).iter().map(|v| v.to_string()));
        wtr.write_record(&row).map_err(csv_io)?;
    }
    wtr.flush()?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct CoefficientRow<'a> {
    term: &'a str,
    estimate: f64,
    se: f64,
    t: f64,
    p_value: f64,
    stars: &'static str,
}

pub fn write_regression<W: Write>(w: W, r: &RegressionResult) -> Result<(), DataError> {
    let rows: Vec<CoefficientRow<'_>> = r
        .coefficients
        .iter()
        .map(|c| CoefficientRow {
            term: &c.name,
            estimate: c.estimate,
            se: c.se,
            t: c.t,
            p_value: c.p_value,
            stars: c.stars(),
        })
        .collect();
    write_rows(w, &rows)
}

pub fn write_power<W: Write>(w: W, r: &PowerResult) -> Result<(), DataError> {
    write_rows(w, &r.replications)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::PreferenceParameters;
    use crate::simulate::{simulate_experiment, PopulationSpec, TreatmentPlan};

    #[test]
    fn payoff_errors_cite_line() {
        let text = "id,e1,e2,g,l\n1,130,70,15,10\n2,130,70,15,-1\n";
        let err = read_payoffs_from(text.as_bytes(), Path::new("p.csv")).unwrap_err();
        match err {
            DataError::Row { line, .. } => assert_eq!(line, 3),
            e => panic!("{e}"),
        }
        let bad = "id,e1,e2,g,l\n1,130,x,15,10\n";
        let msg = read_payoffs_from(bad.as_bytes(), Path::new("p.csv"))
            .unwrap_err()
            .to_string();
        assert!(msg.contains("line 2") && msg.contains("e2"), "{msg}");
        let header = "id,a,b\n";
        assert!(read_payoffs_from(header.as_bytes(), Path::new("p.csv")).is_err());
    }

    #[test]
    fn payoff_round_trip() {
        let mut buf = Vec::new();
        write_payoffs(&mut buf, &PayoffTable::builtin()).unwrap();
        let back = read_payoffs_from(buf.as_slice(), Path::new("x")).unwrap();
        assert_eq!(back, PayoffTable::builtin());
    }

    #[test]
    fn dataset_round_trip() {
        let table = PayoffTable::builtin();
        let pop = PopulationSpec::single(PreferenceParameters::new(0.2, 0.3, 0.2)).unwrap();
        let plans: Vec<_> = Arm::ALL
            .iter()
            .map(|&a| (TreatmentPlan::for_table(a, &table), 3))
            .collect();
        let mut ds = simulate_experiment(&pop, &plans, &table, 3).unwrap();
        ds.truth.clear();
        let mut buf = Vec::new();
        write_dataset(&mut buf, &ds).unwrap();
        let back = read_dataset_from(buf.as_slice(), Path::new("d.csv"), table).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn dataset_controls_and_errors() {
        let table = PayoffTable::builtin();
        let text = "subject_id,arm,sequence,payoff_id,frame,voi,p_hat,choice,age,gender\n\
                    1,N,1,1,neutral,0,1,1,23,f\n\
                    1,N,2,1,neutral,1,0.5,0,23,f\n";
        let ds = read_dataset_from(text.as_bytes(), Path::new("d"), table.clone()).unwrap();
        assert_eq!(ds.control_names, vec!["age", "gender"]);
        assert_eq!(ds.records[1].controls, vec!["23", "f"]);
        let bad = "subject_id,arm,sequence,payoff_id,frame,voi,p_hat,choice\n\
                   1,N,1,1,neutral,0,1,1\n\
                   1,N,2,1,market,1,0.5,0\n";
        let msg = read_dataset_from(bad.as_bytes(), Path::new("d"), table)
            .unwrap_err()
            .to_string();
        assert!(msg.contains("line 3"), "{msg}");
    }
}
