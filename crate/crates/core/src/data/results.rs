use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

pub const RESULTS_HEADER: &str = "run_id,class,target,lambda,train_n,test_n,seed,metric,value";

/// One evaluated quantity of one experiment cell.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub run_id: String,
    /// Model class or baseline estimator name.
    pub class: String,
    pub target: String,
    pub lambda: f64,
    pub train_n: usize,
    pub test_n: usize,
    pub seed: u64,
    pub metric: String,
    pub value: f64,
}

/// Result table; serialized as CSV with [`RESULTS_HEADER`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<ReportRow>,
}

impl EvalReport {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, row: ReportRow) {
        self.rows.push(row);
    }

    pub fn extend(&mut self, other: EvalReport) {
        self.rows.extend(other.rows);
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Values matching the filter, in row order.
    pub fn values<'a>(&'a self, class: &'a str, target: &'a str, test_n: usize, metric: &'a str) -> impl Iterator<Item = f64> + 'a {
        self.rows
            .iter()
            .filter(move |r| r.class == class && r.target == target && r.test_n == test_n && r.metric == metric)
            .map(|r| r.value)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::with_capacity(64 * (self.rows.len() + 1));
        s.push_str(RESULTS_HEADER);
        s.push('\n');
        for r in &self.rows {
            // Debug formatting of f64 is the shortest string that parses back
            // to the same bits
            s.push_str(&format!(
                "{},{},{},{:?},{},{},{},{},{:?}\n",
                r.run_id, r.class, r.target, r.lambda, r.train_n, r.test_n, r.seed, r.metric, r.value
            ));
        }
        s
    }

    pub fn parse_csv(text: &str, source_name: &str) -> Result<Self> {
        let err = |line: usize, message: String| Error::Parse {
            source_name: source_name.to_string(),
            line,
            message,
        };
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h.trim_end() == RESULTS_HEADER => {}
            Some((_, h)) => return Err(err(1, format!("unexpected header `{h}`"))),
            None => return Err(err(1, "missing header".into())),
        }
        let mut rows = Vec::new();
        for (i, line) in lines {
            let lineno = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.trim_end().split(',').collect();
            if f.len() != 9 {
                return Err(err(lineno, format!("expected 9 fields, found {}", f.len())));
            }
            let num = |idx: usize, what: &str| -> Result<f64> {
                f[idx]
                    .parse::<f64>()
                    .map_err(|_| err(lineno, format!("bad {what} `{}`", f[idx])))
            };
            let int = |idx: usize, what: &str| -> Result<u64> {
                f[idx]
                    .parse::<u64>()
                    .map_err(|_| err(lineno, format!("bad {what} `{}`", f[idx])))
            };
            rows.push(ReportRow {
                run_id: f[0].to_string(),
                class: f[1].to_string(),
                target: f[2].to_string(),
                lambda: num(3, "lambda")?,
                train_n: int(4, "train_n")? as usize,
                test_n: int(5, "test_n")? as usize,
                seed: int(6, "seed")?,
                metric: f[7].to_string(),
                value: num(8, "value")?,
            });
        }
        Ok(EvalReport { rows })
    }
}

pub fn write_results(report: &EvalReport, path: &Path) -> Result<()> {
    for (i, r) in report.rows.iter().enumerate() {
        for field in [&r.run_id, &r.class, &r.target, &r.metric] {
            if field.contains([',', '\n', '\r']) {
                return Err(Error::usage(format!("row {i}: field `{field}` contains a separator")));
            }
        }
    }
    let mut f = fs::File::create(path)?;
    f.write_all(report.to_csv().as_bytes())?;
    Ok(())
}

pub fn read_results(path: &Path) -> Result<EvalReport> {
    let text = fs::read_to_string(path)?;
    EvalReport::parse_csv(&text, &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn row(value: f64, lambda: f64) -> ReportRow {
        ReportRow {
            run_id: "synthetic/S1/mean_inv/3".into(),
            class: "S1".into(),
            target: "mean_inv".into(),
            lambda,
            train_n: 4,
            test_n: 32,
            seed: 3,
            metric: "mse".into(),
            value,
        }
    }

    #[test]
    fn empty_report_is_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.csv");
        write_results(&EvalReport::new(), &p).unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap(), format!("{RESULTS_HEADER}\n"));
        assert_eq!(read_results(&p).unwrap(), EvalReport::new());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.csv");
        let rep = EvalReport {
            rows: vec![row(0.1 + 0.2, 1e-4), row(1.0 / 3.0, 0.0)],
        };
        write_results(&rep, &p).unwrap();
        assert_eq!(read_results(&p).unwrap(), rep);
    }

    #[test]
    fn malformed_row_names_line() {
        let text = format!("{RESULTS_HEADER}\na,S1,t,0,4,4,1,mse,0.5\nb,S1,t,zero,4,4,1,mse,0.5\n");
        match EvalReport::parse_csv(&text, "x.csv") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        let short = format!("{RESULTS_HEADER}\na,S1\n");
        assert!(matches!(EvalReport::parse_csv(&short, "x"), Err(Error::Parse { line: 2, .. })));
    }

    proptest! {
        #[test]
        fn floats_survive_the_text_format(value in any::<f64>().prop_filter("finite", |v| v.is_finite()),
                                          lambda in 0.0f64..1.0) {
            let rep = EvalReport { rows: vec![row(value, lambda)] };
            let back = EvalReport::parse_csv(&rep.to_csv(), "mem").unwrap();
            prop_assert_eq!(back.rows[0].value.to_bits(), value.to_bits());
            prop_assert_eq!(back.rows[0].lambda.to_bits(), lambda.to_bits());
        }
    }
}
