//! CSV to JSONL insert streams, for bringing in real datasets.

use std::io::{Read, Write};

use anyhow::{bail, Context, Result};
use aqp_core::Tuple;

use crate::stream::{write_ops, Op};

#[derive(Debug, Clone)]
pub struct CsvSpec {
    pub agg_col: String,
    pub pred_cols: Vec<String>,
    /// Column holding tuple ids; row numbers are used when absent.
    pub id_col: Option<String>,
    /// Skip rows with empty or non-numeric fields instead of failing.
    pub skip_bad_rows: bool,
}

/// Returns the number of rows written.
pub fn convert_csv<R: Read, W: Write>(input: R, output: W, spec: &CsvSpec) -> Result<usize> {
    let mut rdr = csv::Reader::from_reader(input);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| -> Result<usize> {
        match headers.iter().position(|h| h.trim() == name) {
            Some(i) => Ok(i),
            None => bail!("no column named {name:?}; header has {}", headers.iter().collect::<Vec<_>>().join(", ")),
        }
    };
    let agg = col(&spec.agg_col)?;
    let preds: Vec<usize> = spec.pred_cols.iter().map(|c| col(c)).collect::<Result<_>>()?;
    let id_col = spec.id_col.as_deref().map(col).transpose()?;
    let mut ops = Vec::new();
    for (row, rec) in rdr.records().enumerate() {
        let line = row + 2;
        let rec = rec.with_context(|| format!("line {line}"))?;
        let num = |i: usize| -> Result<f64> {
            let s = rec.get(i).unwrap_or("").trim();
            let x: f64 = s.parse().with_context(|| format!("line {line}: {:?} in column {:?} is not a number", s, &headers[i]))?;
            if !x.is_finite() {
                bail!("line {line}: non-finite value in column {:?}", &headers[i]);
            }
            Ok(x)
        };
        let parsed = (|| -> Result<Tuple> {
            let coords = preds.iter().map(|&i| num(i)).collect::<Result<Vec<_>>>()?;
            let value = num(agg)?;
            let id = match id_col {
                Some(i) => {
                    let s = rec.get(i).unwrap_or("").trim();
                    s.parse().with_context(|| format!("line {line}: id {s:?} is not an unsigned integer"))?
                }
                None => row as u64,
            };
            Ok(Tuple::new(id, coords, value))
        })();
        match parsed {
            Ok(t) => ops.push(Op::Insert(t)),
            Err(_) if spec.skip_bad_rows => continue,
            Err(e) => return Err(e),
        }
    }
    write_ops(output, &ops)?;
    Ok(ops.len())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stream::read_ops;

    fn spec() -> CsvSpec {
        CsvSpec { agg_col: "price".into(), pred_cols: vec!["t".into(), "x".into()], id_col: None, skip_bad_rows: false }
    }

    #[test]
    fn converts_rows() {
        let csv = "t,x,price,name\n1,2.5,10,a\n2,3.5,-4,b\n";
        let mut out = Vec::new();
        assert_eq!(convert_csv(csv.as_bytes(), &mut out, &spec()).unwrap(), 2);
        let ops = read_ops(&out[..]).unwrap();
        assert_eq!(ops[1], Op::Insert(Tuple::new(1, vec![2.0, 3.5], -4.0)));
    }

    #[test]
    fn bad_rows() {
        let csv = "t,x,price\n1,2,3\n1,,3\n";
        let err = format!("{:#}", convert_csv(csv.as_bytes(), Vec::new(), &spec()).unwrap_err());
        assert!(err.contains("line 3"), "{err}");
        let lenient = CsvSpec { skip_bad_rows: true, ..spec() };
        assert_eq!(convert_csv(csv.as_bytes(), Vec::new(), &lenient).unwrap(), 1);
        let missing = CsvSpec { agg_col: "nope".into(), ..spec() };
        assert!(convert_csv(csv.as_bytes(), Vec::new(), &missing).is_err());
    }
}
