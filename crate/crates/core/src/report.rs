//! Evaluation records and the three comparison tables: return-conditioned
//! baseline with and without returns, hierarchical agent with and without
//! returns, and the hierarchical agent against both baselines.

use std::collections::BTreeSet;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::DesiredReturn;
use crate::policy::PolicyKind;
use crate::train::csv_err;

/// One evaluation run, as written by `eval` and consumed by `report`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub env: String,
    pub policy: PolicyKind,
    /// Dataset label, for instance the demonstrator quality.
    pub dataset: String,
    /// Desired-return setting; empty for policies without returns.
    pub desired_return: Option<DesiredReturn>,
    pub desired_return_value: Option<f64>,
    pub episodes: usize,
    pub seed: u64,
    pub mean_return: f64,
    pub success_rate: f64,
    pub mean_length: f64,
    pub dataset_mean_return: f64,
    pub dataset_mean_length: f64,
}

pub fn write_records<W: Write>(records: &[EvalRecord], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in records {
        out.serialize(r).map_err(csv_err)?;
    }
    out.flush().map_err(|e| Error::io("<records>", e))
}

pub fn read_records<R: Read>(r: R) -> Result<Vec<EvalRecord>> {
    csv::Reader::from_reader(r)
        .deserialize()
        .map(|row| row.map_err(csv_err))
        .collect()
}

pub fn load_records(path: impl AsRef<Path>) -> Result<Vec<EvalRecord>> {
    let path = path.as_ref();
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_records(f)
}

/// CSV text of the three tables.
#[derive(Clone, Debug, PartialEq)]
pub struct Tables {
    pub desired_returns: String,
    pub hdt_returns: String,
    pub comparison: String,
}

pub const TABLE_FILES: [&str; 3] = ["table1_dt_returns.csv", "table2_hdt_returns.csv", "table3_comparison.csv"];

impl Tables {
    /// Writes the three files into `dir`, creating it if needed.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut paths = Vec::new();
        for (name, body) in TABLE_FILES
            .iter()
            .zip([&self.desired_returns, &self.hdt_returns, &self.comparison])
        {
            let p = dir.join(name);
            fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
            paths.push(p);
        }
        Ok(paths)
    }
}

pub fn table1_settings() -> [DesiredReturn; 3] {
    [
        DesiredReturn::HalfMax,
        DesiredReturn::MaxInDataset,
        DesiredReturn::Fixed(10000.0),
    ]
}

pub fn table2_settings() -> [DesiredReturn; 2] {
    [DesiredReturn::HalfMax, DesiredReturn::MaxInDataset]
}

struct Lookup<'a> {
    records: &'a [EvalRecord],
    missing: Vec<String>,
}

impl<'a> Lookup<'a> {
    fn find(&mut self, env: &str, policy: PolicyKind, setting: Option<DesiredReturn>) -> Option<&'a EvalRecord> {
        let hit = self.records.iter().rev().find(|r| {
            r.env == env && r.policy == policy && (setting.is_none() || r.desired_return == setting)
        });
        if hit.is_none() {
            self.missing.push(match setting {
                Some(s) => format!("{env}/{policy}/{s}"),
                None => format!("{env}/{policy}"),
            });
        }
        hit
    }

    /// The record of `policy` with the highest mean return over all
    /// desired-return settings.
    fn best(&mut self, env: &str, policy: PolicyKind) -> Option<&'a EvalRecord> {
        let best = self
            .records
            .iter()
            .filter(|r| r.env == env && r.policy == policy)
            .fold(None::<&EvalRecord>, |acc, r| match acc {
                Some(a) if a.mean_return >= r.mean_return => Some(a),
                _ => Some(r),
            });
        if best.is_none() {
            self.missing.push(format!("{env}/{policy}"));
        }
        best
    }
}

fn cell(r: Option<&EvalRecord>, f: impl Fn(&EvalRecord) -> f64) -> String {
    r.map(|r| f(r).to_string()).unwrap_or_default()
}

fn to_csv(header: &[&str], rows: Vec<Vec<String>>) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).map_err(csv_err)?;
    for r in rows {
        w.write_record(r).map_err(csv_err)?;
    }
    Ok(String::from_utf8(w.into_inner().map_err(|e| Error::InvalidArgument(e.to_string()))?).unwrap())
}

/// Builds the tables for every environment present in `records`. Each
/// environment must supply every cell; missing ones are listed in the error.
pub fn report_tables(records: &[EvalRecord]) -> Result<Tables> {
    if records.is_empty() {
        return Err(Error::EmptyResults);
    }
    let envs: BTreeSet<&str> = records.iter().map(|r| r.env.as_str()).collect();
    let mut look = Lookup {
        records,
        missing: Vec::new(),
    };
    let mut t1 = Vec::new();
    let mut t2 = Vec::new();
    let mut t3 = Vec::new();
    for env in envs {
        let no_rtg = look.find(env, PolicyKind::DtNoRtg, None);
        for s in table1_settings() {
            let dt = look.find(env, PolicyKind::Dt, Some(s));
            t1.push(vec![
                env.to_string(),
                s.to_string(),
                cell(dt, |r| r.desired_return_value.unwrap_or(f64::NAN)),
                cell(dt, |r| r.mean_return),
                cell(dt, |r| r.success_rate),
                cell(no_rtg, |r| r.mean_return),
                cell(no_rtg, |r| r.success_rate),
            ]);
        }
        let hdt = look.find(env, PolicyKind::Hdt, None);
        for s in table2_settings() {
            let plus = look.find(env, PolicyKind::HdtPlusRtg, Some(s));
            t2.push(vec![
                env.to_string(),
                s.to_string(),
                cell(plus, |r| r.desired_return_value.unwrap_or(f64::NAN)),
                cell(hdt, |r| r.mean_return),
                cell(hdt, |r| r.success_rate),
                cell(plus, |r| r.mean_return),
                cell(plus, |r| r.success_rate),
            ]);
        }
        let dt = look.best(env, PolicyKind::Dt);
        let bc = look.find(env, PolicyKind::Bc, None);
        let data = hdt.or(dt).or(bc);
        t3.push(vec![
            env.to_string(),
            data.map(|r| r.dataset.clone()).unwrap_or_default(),
            cell(data, |r| r.dataset_mean_length),
            cell(data, |r| r.dataset_mean_return),
            cell(hdt, |r| r.mean_return),
            cell(hdt, |r| r.success_rate),
            dt.and_then(|r| r.desired_return).map(|s| s.to_string()).unwrap_or_default(),
            cell(dt, |r| r.mean_return),
            cell(dt, |r| r.success_rate),
            cell(bc, |r| r.mean_return),
            cell(bc, |r| r.success_rate),
        ]);
    }
    if !look.missing.is_empty() {
        look.missing.dedup();
        return Err(Error::MissingCells(look.missing));
    }
    Ok(Tables {
        desired_returns: to_csv(
            &[
                "env",
                "desired_return",
                "desired_return_value",
                "dt_mean_return",
                "dt_success_rate",
                "dt_no_rtg_mean_return",
                "dt_no_rtg_success_rate",
            ],
            t1,
        )?,
        hdt_returns: to_csv(
            &[
                "env",
                "desired_return",
                "desired_return_value",
                "hdt_mean_return",
                "hdt_success_rate",
                "hdt_plus_rtg_mean_return",
                "hdt_plus_rtg_success_rate",
            ],
            t2,
        )?,
        comparison: to_csv(
            &[
                "env",
                "dataset",
                "avg_length",
                "avg_reward",
                "hdt_mean_return",
                "hdt_success_rate",
                "dt_desired_return",
                "dt_mean_return",
                "dt_success_rate",
                "bc_mean_return",
                "bc_success_rate",
            ],
            t3,
        )?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(policy: PolicyKind, setting: Option<DesiredReturn>, mean: f64) -> EvalRecord {
        EvalRecord {
            env: "chain-dense".into(),
            policy,
            dataset: "medium".into(),
            desired_return: setting,
            desired_return_value: setting.map(|s| s.resolve(50.0)),
            episodes: 10,
            seed: 0,
            mean_return: mean,
            success_rate: 0.5,
            mean_length: 40.0,
            dataset_mean_return: 30.0,
            dataset_mean_length: 45.0,
        }
    }

    fn grid() -> Vec<EvalRecord> {
        let mut v = vec![
            record(PolicyKind::Hdt, None, 41.0),
            record(PolicyKind::DtNoRtg, None, 20.0),
            record(PolicyKind::Bc, None, 30.0),
        ];
        for (s, m) in table1_settings().into_iter().zip([35.0, 40.0, 38.0]) {
            v.push(record(PolicyKind::Dt, Some(s), m));
        }
        for s in table2_settings() {
            v.push(record(PolicyKind::HdtPlusRtg, Some(s), 39.5));
        }
        v
    }

    #[test]
    fn empty_input_is_an_error() {
        assert!(matches!(report_tables(&[]), Err(Error::EmptyResults)));
    }

    #[test]
    fn full_grid_produces_three_tables() {
        let t = report_tables(&grid()).unwrap();
        let rows1: Vec<&str> = t.desired_returns.lines().collect();
        assert_eq!(rows1.len(), 4);
        assert!(rows1[1].starts_with("chain-dense,half-max,25,35,"));
        assert!(rows1[3].starts_with("chain-dense,10000,10000,38,"));
        assert_eq!(t.hdt_returns.lines().count(), 3);
        let rows3: Vec<&str> = t.comparison.lines().collect();
        assert_eq!(rows3[1], "chain-dense,medium,45,30,41,0.5,max,40,0.5,30,0.5");
    }

    #[test]
    fn missing_cells_are_named() {
        let mut g = grid();
        g.retain(|r| r.policy != PolicyKind::Bc);
        match report_tables(&g) {
            Err(Error::MissingCells(m)) => assert_eq!(m, vec!["chain-dense/bc".to_string()]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn records_round_trip_through_csv() {
        let g = grid();
        let mut buf = Vec::new();
        write_records(&g, &mut buf).unwrap();
        assert_eq!(read_records(&buf[..]).unwrap(), g);
    }
}
