//! Survival / competing-risks samples: validation and CSV I/O.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::normal;

/// One subject.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurvivalRecord {
    pub time: f64,
    /// Event indicator δ.
    pub status: u8,
    /// 0 when censored, otherwise the failure type in 1..=m.
    pub cause: usize,
    pub treat: u8,
    pub covariates: Vec<f64>,
}

impl SurvivalRecord {
    pub fn is_event(&self) -> bool {
        self.status == 1
    }

    pub fn treated(&self) -> bool {
        self.treat == 1
    }

    /// Whether this record is an event of cause `j` (1-based).
    pub fn is_event_of(&self, j: usize) -> bool {
        self.status == 1 && self.cause == j
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    records: Vec<SurvivalRecord>,
    covariate_names: Vec<String>,
    n_causes: usize,
}

/// Column names used when reading a CSV file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvSchema {
    pub time: String,
    pub status: String,
    pub treat: String,
    /// Absent means a single cause with `cause := status`.
    pub cause: Option<String>,
    pub covariates: Vec<String>,
}

impl CsvSchema {
    pub fn new<S: Into<String>>(covariates: impl IntoIterator<Item = S>) -> Self {
        CsvSchema {
            time: "time".into(),
            status: "status".into(),
            treat: "treat".into(),
            cause: None,
            covariates: covariates.into_iter().map(Into::into).collect(),
        }
    }

    pub fn with_cause(mut self, column: impl Into<String>) -> Self {
        self.cause = Some(column.into());
        self
    }
}

fn check_record(row: usize, r: &SurvivalRecord, p: usize) -> Result<()> {
    let bad = |rule: &str| Err(Error::InvalidRecord { row, rule: rule.to_string() });
    if !(r.time.is_finite() && r.time > 0.0) {
        return bad("time > 0");
    }
    if r.status > 1 {
        return bad("status in {0,1}");
    }
    if r.treat > 1 {
        return bad("treat in {0,1}");
    }
    if (r.cause == 0) != (r.status == 0) {
        return bad("cause = 0 iff status = 0");
    }
    if r.covariates.len() != p {
        return bad("covariate count equals p");
    }
    if r.covariates.iter().any(|x| !x.is_finite()) {
        return bad("covariates finite");
    }
    Ok(())
}

impl Dataset {
    /// Validates and builds a dataset. The number of causes is the largest
    /// cause code; every code in 1..=m must occur at least once.
    pub fn new(records: Vec<SurvivalRecord>, covariate_names: Vec<String>) -> Result<Self> {
        let p = covariate_names.len();
        for (i, r) in records.iter().enumerate() {
            check_record(i + 1, r, p)?;
        }
        if records.len() < 2 {
            return Err(Error::InvalidDataset(format!(
                "need at least 2 records, got {}",
                records.len()
            )));
        }
        let n_causes = records.iter().map(|r| r.cause).max().unwrap_or(0);
        if n_causes == 0 {
            return Err(Error::InvalidDataset("no events in the sample".into()));
        }
        for j in 1..=n_causes {
            if !records.iter().any(|r| r.cause == j) {
                return Err(Error::InvalidDataset(format!(
                    "cause codes must be contiguous 1..{n_causes}; cause {j} never occurs"
                )));
            }
        }
        Ok(Dataset {
            records,
            covariate_names,
            n_causes,
        })
    }

    pub fn records(&self) -> &[SurvivalRecord] {
        &self.records
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    pub fn n(&self) -> usize {
        self.records.len()
    }

    pub fn p(&self) -> usize {
        self.covariate_names.len()
    }

    pub fn n_causes(&self) -> usize {
        self.n_causes
    }

    pub fn treatment(&self) -> Vec<bool> {
        self.records.iter().map(SurvivalRecord::treated).collect()
    }

    pub fn times(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.time).collect()
    }

    pub fn censored_fraction(&self) -> f64 {
        self.records.iter().filter(|r| r.status == 0).count() as f64 / self.n() as f64
    }

    pub fn event_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_causes];
        for r in self.records.iter().filter(|r| r.is_event()) {
            counts[r.cause - 1] += 1;
        }
        counts
    }

    /// Outcome-model design, columns `[x_1 .. x_p | z]`.
    pub fn cox_design(&self) -> DMatrix<f64> {
        let p = self.p();
        DMatrix::from_fn(self.n(), p + 1, |i, c| {
            let r = &self.records[i];
            if c < p {
                r.covariates[c]
            } else {
                f64::from(r.treat)
            }
        })
    }

    /// Treatment-model design, `[1 | x_1 .. x_p]` when `intercept`.
    pub fn probit_design(&self, intercept: bool) -> DMatrix<f64> {
        let shift = usize::from(intercept);
        DMatrix::from_fn(self.n(), self.p() + shift, |i, c| {
            if intercept && c == 0 {
                1.0
            } else {
                self.records[i].covariates[c - shift]
            }
        })
    }

    /// A new dataset with the same outcomes and treatment but covariates
    /// replaced by `columns` (one vector per covariate).
    pub fn with_covariates(&self, names: Vec<String>, columns: &[Vec<f64>]) -> Result<Self> {
        if names.len() != columns.len() || columns.iter().any(|c| c.len() != self.n()) {
            return Err(Error::InvalidArgument(
                "covariate columns must match names and sample size".into(),
            ));
        }
        let records = self
            .records
            .iter()
            .enumerate()
            .map(|(i, r)| SurvivalRecord {
                covariates: columns.iter().map(|c| c[i]).collect(),
                ..r.clone()
            })
            .collect();
        Dataset::new(records, names)
    }

    pub fn from_reader<R: Read>(reader: R, schema: &CsvSchema) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let headers = rdr.headers()?.clone();
        let col = |name: &str| -> Result<usize> {
            headers
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| Error::MissingColumn(name.to_string()))
        };
        let time_c = col(&schema.time)?;
        let status_c = col(&schema.status)?;
        let treat_c = col(&schema.treat)?;
        let cause_c = schema.cause.as_deref().map(col).transpose()?;
        let cov_c = schema
            .covariates
            .iter()
            .map(|c| col(c))
            .collect::<Result<Vec<_>>>()?;

        let mut records = Vec::new();
        for (i, row) in rdr.records().enumerate() {
            let row = row?;
            let num = |c: usize, name: &str| -> Result<f64> {
                let raw = row.get(c).unwrap_or("");
                raw.parse::<f64>().map_err(|_| Error::NonNumeric {
                    row: i + 1,
                    column: name.to_string(),
                    value: raw.to_string(),
                })
            };
            let code = |c: usize, name: &str, rule: &str| -> Result<i64> {
                let v = num(c, name)?;
                if v.fract() != 0.0 || !v.is_finite() {
                    return Err(Error::InvalidRecord {
                        row: i + 1,
                        rule: rule.to_string(),
                    });
                }
                Ok(v as i64)
            };
            let status = code(status_c, &schema.status, "status in {0,1}")?;
            let treat = code(treat_c, &schema.treat, "treat in {0,1}")?;
            let cause = match cause_c {
                Some(c) => code(c, schema.cause.as_deref().unwrap_or("cause"), "cause in 0..m")?,
                None => status,
            };
            if !(0..=1).contains(&status) {
                return Err(Error::InvalidRecord { row: i + 1, rule: "status in {0,1}".into() });
            }
            if !(0..=1).contains(&treat) {
                return Err(Error::InvalidRecord { row: i + 1, rule: "treat in {0,1}".into() });
            }
            if cause < 0 {
                return Err(Error::InvalidRecord { row: i + 1, rule: "cause in 0..m".into() });
            }
            records.push(SurvivalRecord {
                time: num(time_c, &schema.time)?,
                status: status as u8,
                cause: cause as usize,
                treat: treat as u8,
                covariates: cov_c
                    .iter()
                    .zip(&schema.covariates)
                    .map(|(&c, name)| num(c, name))
                    .collect::<Result<_>>()?,
            });
        }
        Dataset::new(records, schema.covariates.clone())
    }

    pub fn load_csv(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_reader(file, schema)
    }

    /// Schema matching the layout written by [`Dataset::write_csv`].
    pub fn default_schema(&self) -> CsvSchema {
        CsvSchema::new(self.covariate_names.clone()).with_cause("cause")
    }

    /// Writes `time,status,cause,treat,<covariates>` with round-trip float formatting.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["time".to_string(), "status".into(), "cause".into(), "treat".into()];
        header.extend(self.covariate_names.iter().cloned());
        w.write_record(&header)?;
        for r in &self.records {
            let mut row = vec![
                r.time.to_string(),
                r.status.to_string(),
                r.cause.to_string(),
                r.treat.to_string(),
            ];
            row.extend(r.covariates.iter().map(f64::to_string));
            w.write_record(&row)?;
        }
        w.flush().map_err(|source| Error::Io {
            path: "<csv writer>".into(),
            source,
        })?;
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        self.write_csv(std::io::BufWriter::new(file))
    }

    /// SHA-256 of the canonical CSV serialization, hex encoded.
    pub fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        Sha256::digest(&buf)
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

/// Maps propensity scores to the probit scale, `Φ⁻¹(ps)`.
pub fn transform_ps_covariate(ps: &[f64]) -> Result<Vec<f64>> {
    ps.iter()
        .enumerate()
        .map(|(i, &p)| {
            if p > 0.0 && p < 1.0 {
                Ok(normal::quantile(p))
            } else {
                Err(Error::InvalidArgument(format!(
                    "propensity score {p} at index {i} is outside (0, 1)"
                )))
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn parse(text: &str, schema: &CsvSchema) -> Result<Dataset> {
        Dataset::from_reader(text.as_bytes(), schema)
    }

    #[test]
    fn three_row_single_cause_file() {
        let d = parse("time,status,treat,x1\n1.5,1,0,0.2\n2,0,1,-1\n0.7,1,1,3\n", &CsvSchema::new(["x1"])).unwrap();
        assert_eq!(d.n(), 3);
        assert_eq!(d.p(), 1);
        assert_eq!(d.n_causes(), 1);
        assert_eq!(d.records()[1].cause, 0);
        assert_eq!(d.records()[2].cause, 1);
        assert_eq!(d.records()[0].time, 1.5);
    }

    #[test]
    fn negative_time_names_row_and_rule() {
        let err = parse("time,status,treat,x1\n1,1,0,0\n-1,1,0,0\n", &CsvSchema::new(["x1"])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("row 2"), "{msg}");
        assert!(msg.contains("time > 0"), "{msg}");
    }

    #[test]
    fn two_causes_from_cause_column() {
        let text = "time,status,cause,treat,x\n1,1,1,0,0\n2,1,2,1,0\n3,0,0,1,1\n";
        let d = parse(text, &CsvSchema::new(["x"]).with_cause("cause")).unwrap();
        assert_eq!(d.n_causes(), 2);
        assert_eq!(d.event_counts(), vec![1, 1]);
    }

    #[test]
    fn rejects_sparse_cause_codes_and_mismatched_status() {
        let sparse = "time,status,cause,treat,x\n1,1,1,0,0\n2,1,3,1,0\n";
        assert!(parse(sparse, &CsvSchema::new(["x"]).with_cause("cause")).is_err());
        let mismatch = "time,status,cause,treat,x\n1,0,1,0,0\n2,1,1,1,0\n";
        let err = parse(mismatch, &CsvSchema::new(["x"]).with_cause("cause")).unwrap_err();
        assert!(err.to_string().contains("cause = 0 iff status = 0"));
    }

    #[test]
    fn missing_column_and_non_numeric_cell() {
        let err = parse("time,status,treat\n1,1,0\n2,1,1\n", &CsvSchema::new(["x1"])).unwrap_err();
        assert!(matches!(err, Error::MissingColumn(ref c) if c == "x1"));
        let err = parse("time,status,treat,x1\n1,1,0,abc\n2,1,1,0\n", &CsvSchema::new(["x1"])).unwrap_err();
        assert!(matches!(err, Error::NonNumeric { row: 1, .. }));
        let err = parse("time,status,treat,x1\n1,1,0,\n2,1,1,0\n", &CsvSchema::new(["x1"])).unwrap_err();
        assert!(matches!(err, Error::NonNumeric { .. }));
    }

    #[test]
    fn ps_transform_examples() {
        assert_eq!(transform_ps_covariate(&[0.5]).unwrap()[0], 0.0);
        // bisection on Φ to 1e-12
        let (mut lo, mut hi) = (0.0f64, 5.0f64);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if normal::cdf(mid) < 0.975 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let q = transform_ps_covariate(&[0.975]).unwrap()[0];
        assert!((q - lo).abs() < 1e-9);
        assert!((q - 1.959964).abs() < 1e-6);
        assert!(transform_ps_covariate(&[0.0]).is_err());
        assert!(transform_ps_covariate(&[0.3, 1.0]).is_err());
    }

    // Above ~5.5 the CDF itself rounds to within 1e-16 of 1 and the
    // round trip cannot be resolved to 1e-8.
    proptest! {
        #[test]
        fn quantile_inverts_cdf(x in -8.0f64..5.0) {
            let back = transform_ps_covariate(&[normal::cdf(x)]).unwrap()[0];
            prop_assert!((back - x).abs() < 1e-8);
        }

        #[test]
        fn csv_round_trip(
            rows in prop::collection::vec(
                (1e-3f64..100.0, 0u8..3, any::<bool>(), -1e3f64..1e3, -1e3f64..1e3),
                2..30,
            )
        ) {
            let mut records: Vec<SurvivalRecord> = rows
                .iter()
                .map(|&(t, c, z, a, b)| SurvivalRecord {
                    time: t,
                    status: u8::from(c > 0),
                    cause: c as usize,
                    treat: u8::from(z),
                    covariates: vec![a, b],
                })
                .collect();
            records[0].status = 1;
            records[0].cause = 1;
            let d = match Dataset::new(records, vec!["a".into(), "b".into()]) {
                Ok(d) => d,
                Err(_) => return Ok(()),
            };
            let mut buf = Vec::new();
            d.write_csv(&mut buf).unwrap();
            let back = Dataset::from_reader(buf.as_slice(), &d.default_schema()).unwrap();
            prop_assert_eq!(back, d);
        }
    }
}
