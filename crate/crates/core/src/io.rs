//! Count matrix files and their label / ground-truth manifests.
//!
//! Dense CSV: a header `cat_0,...,cat_{K-1}` and one row of counts per
//! observation. Sparse triplet: a header `row,col,count`, an optional
//! `# shape,R,K` line, then one `row,col,count` entry per line; duplicate
//! entries are summed and missing entries are zero. The manifest is a JSON
//! sidecar at `<data path>.manifest.json`.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::CountMatrix;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataFormat {
    #[default]
    DenseCsv,
    SparseTriplet,
}

impl fmt::Display for DataFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DataFormat::DenseCsv => "dense-csv",
            DataFormat::SparseTriplet => "sparse-triplet",
        })
    }
}

impl FromStr for DataFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dense-csv" | "dense" | "csv" => Ok(DataFormat::DenseCsv),
            "sparse-triplet" | "sparse" | "triplet" => Ok(DataFormat::SparseTriplet),
            other => Err(Error::Validation(format!("unknown data format `{other}`"))),
        }
    }
}

/// Optional row labels and per-label ground-truth populations.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    #[serde(default)]
    pub labels: Option<Vec<usize>>,
    /// One population vector per label value.
    #[serde(default)]
    pub ground_truth: Option<Vec<Vec<u64>>>,
}

impl Manifest {
    pub fn check(&self, counts: &CountMatrix) -> Result<()> {
        if let Some(labels) = &self.labels {
            if labels.len() != counts.n_rows() {
                return Err(Error::Validation(format!(
                    "manifest has {} labels for {} rows",
                    labels.len(),
                    counts.n_rows()
                )));
            }
        }
        if let Some(gt) = &self.ground_truth {
            if let Some(bad) = gt.iter().position(|g| g.len() != counts.n_cols()) {
                return Err(Error::Validation(format!(
                    "manifest ground truth {bad} has {} categories, matrix {}",
                    gt[bad].len(),
                    counts.n_cols()
                )));
            }
            match &self.labels {
                Some(labels) => {
                    if let Some(&l) = labels.iter().find(|&&l| l >= gt.len()) {
                        return Err(Error::Validation(format!(
                            "label {l} has no ground truth ({} given)",
                            gt.len()
                        )));
                    }
                }
                None if gt.len() != 1 => {
                    return Err(Error::Validation(
                        "several ground truths need row labels to assign them".into(),
                    ));
                }
                None => {}
            }
        }
        Ok(())
    }

    /// Ground truth of every row, when the manifest determines it.
    pub fn truth_per_row(&self, n_rows: usize) -> Option<Vec<Vec<f64>>> {
        let gt = self.ground_truth.as_ref()?;
        let to_f = |g: &Vec<u64>| g.iter().map(|&x| x as f64).collect::<Vec<f64>>();
        match &self.labels {
            Some(labels) => Some(labels.iter().map(|&l| to_f(&gt[l])).collect()),
            None => Some(vec![to_f(&gt[0]); n_rows]),
        }
    }
}

pub fn manifest_path(data: &Path) -> PathBuf {
    let mut s = data.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

fn parse_count(tok: &str, line: usize) -> Result<u32> {
    let tok = tok.trim();
    tok.parse::<u32>().map_err(|_| {
        let msg = match tok.parse::<f64>() {
            Ok(v) if v < 0.0 => format!("negative count `{tok}`"),
            Ok(_) => format!("non-integer count `{tok}`"),
            Err(_) => format!("`{tok}` is not a count"),
        };
        Error::Parse { line, msg }
    })
}

fn parse_index(tok: &str, line: usize, what: &str) -> Result<usize> {
    tok.trim().parse::<usize>().map_err(|_| Error::Parse {
        line,
        msg: format!("{what} index `{}` is not a non-negative integer", tok.trim()),
    })
}

pub fn parse_dense_csv(text: &str) -> Result<CountMatrix> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or(Error::Parse {
        line: 1,
        msg: "empty file".into(),
    })?;
    let k = header.split(',').count();
    let mut data = Vec::new();
    let mut rows = 0;
    for (i, l) in lines {
        let line = i + 1;
        let toks: Vec<&str> = l.split(',').collect();
        if toks.len() != k {
            return Err(Error::Parse {
                line,
                msg: format!("expected {k} fields, found {}", toks.len()),
            });
        }
        for t in toks {
            data.push(parse_count(t, line)?);
        }
        rows += 1;
    }
    CountMatrix::new(rows, k, data)
}

pub fn parse_sparse_triplet(text: &str) -> Result<CountMatrix> {
    let mut entries: BTreeMap<(usize, usize), u64> = BTreeMap::new();
    let mut shape: Option<(usize, usize)> = None;
    let mut seen_header = false;
    for (i, l) in text.lines().enumerate() {
        let line = i + 1;
        let l = l.trim();
        if l.is_empty() {
            continue;
        }
        if let Some(rest) = l.strip_prefix('#') {
            let toks: Vec<&str> = rest.split(',').map(str::trim).collect();
            if toks.len() == 3 && toks[0] == "shape" {
                shape = Some((parse_index(toks[1], line, "shape")?, parse_index(toks[2], line, "shape")?));
            }
            continue;
        }
        if !seen_header {
            seen_header = true;
            if l.replace(' ', "") == "row,col,count" {
                continue;
            }
        }
        let toks: Vec<&str> = l.split(',').collect();
        if toks.len() != 3 {
            return Err(Error::Parse {
                line,
                msg: format!("expected row,col,count, found {} fields", toks.len()),
            });
        }
        let r = parse_index(toks[0], line, "row")?;
        let c = parse_index(toks[1], line, "column")?;
        let v = parse_count(toks[2], line)?;
        *entries.entry((r, c)).or_default() += v as u64;
    }
    let (rows, cols) = match shape {
        Some(s) => s,
        None => entries
            .keys()
            .fold((0, 0), |(r, c), &(i, j)| (r.max(i + 1), c.max(j + 1))),
    };
    let mut m = CountMatrix::zeros(rows, cols);
    for ((r, c), v) in entries {
        if r >= rows || c >= cols {
            return Err(Error::Validation(format!("entry ({r},{c}) outside the declared {rows}x{cols} shape")));
        }
        m.row_mut(r)[c] = u32::try_from(v).map_err(|_| Error::Validation(format!("summed count at ({r},{c}) overflows")))?;
    }
    if cols < 2 {
        return Err(Error::Validation(format!("need at least 2 categories, got {cols}")));
    }
    Ok(m)
}

pub fn format_dense_csv(m: &CountMatrix) -> String {
    let mut s = (0..m.n_cols()).map(|j| format!("cat_{j}")).collect::<Vec<_>>().join(",");
    s.push('\n');
    for r in m.rows() {
        s.push_str(&r.iter().map(u32::to_string).collect::<Vec<_>>().join(","));
        s.push('\n');
    }
    s
}

pub fn format_sparse_triplet(m: &CountMatrix) -> String {
    let mut s = format!("row,col,count\n# shape,{},{}\n", m.n_rows(), m.n_cols());
    for (i, r) in m.rows().enumerate() {
        for (j, &v) in r.iter().enumerate() {
            if v > 0 {
                s.push_str(&format!("{i},{j},{v}\n"));
            }
        }
    }
    s
}

pub fn read_counts(path: &Path, format: DataFormat) -> Result<CountMatrix> {
    let text = fs::read_to_string(path)?;
    match format {
        DataFormat::DenseCsv => parse_dense_csv(&text),
        DataFormat::SparseTriplet => parse_sparse_triplet(&text),
    }
}

pub fn write_counts(path: &Path, m: &CountMatrix, format: DataFormat) -> Result<()> {
    let text = match format {
        DataFormat::DenseCsv => format_dense_csv(m),
        DataFormat::SparseTriplet => format_sparse_triplet(m),
    };
    fs::write(path, text)?;
    Ok(())
}

/// Counts plus the sidecar manifest when one exists.
pub fn ingest_counts(path: &Path, format: DataFormat) -> Result<(CountMatrix, Option<Manifest>)> {
    let counts = read_counts(path, format)?;
    let mp = manifest_path(path);
    let manifest = if mp.exists() {
        let m: Manifest = serde_json::from_slice(&fs::read(&mp)?)?;
        m.check(&counts)?;
        Some(m)
    } else {
        None
    };
    Ok((counts, manifest))
}

pub fn write_manifest(data_path: &Path, manifest: &Manifest) -> Result<()> {
    fs::write(manifest_path(data_path), serde_json::to_vec_pretty(manifest)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn dense_round_trip() {
        let m = CountMatrix::from_rows(&[vec![3, 0], vec![1, 7]]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.csv");
        write_counts(&p, &m, DataFormat::DenseCsv).unwrap();
        assert_eq!(fs::read_to_string(&p).unwrap(), "cat_0,cat_1\n3,0\n1,7\n");
        assert_eq!(read_counts(&p, DataFormat::DenseCsv).unwrap(), m);
    }

    proptest! {
        #[test]
        fn both_formats_round_trip(rows in prop::collection::vec(prop::collection::vec(0u32..50, 4), 1..12)) {
            let m = CountMatrix::from_rows(&rows).unwrap();
            prop_assert_eq!(parse_dense_csv(&format_dense_csv(&m)).unwrap(), m.clone());
            prop_assert_eq!(parse_sparse_triplet(&format_sparse_triplet(&m)).unwrap(), m);
        }
    }

    #[test]
    fn triplet_duplicates_are_summed() {
        let m = parse_sparse_triplet("row,col,count\n0,1,2\n1,0,4\n0,1,3\n").unwrap();
        assert_eq!(m, CountMatrix::from_rows(&[vec![0, 5], vec![4, 0]]).unwrap());
    }

    #[test]
    fn bad_counts_name_the_line() {
        let e = parse_dense_csv("cat_0,cat_1\n1,2\n3,-4\n").unwrap_err();
        match e {
            Error::Parse { line, msg } => {
                assert_eq!(line, 3);
                assert!(msg.contains("negative"), "{msg}");
            }
            other => panic!("{other:?}"),
        }
        let e = parse_sparse_triplet("row,col,count\n0,0,1\n\n1,1,2.5\n").unwrap_err();
        assert!(matches!(e, Error::Parse { line: 4, .. }), "{e:?}");
        let e = parse_dense_csv("a,b\n1,2,3\n").unwrap_err();
        assert!(matches!(e, Error::Parse { line: 2, .. }));
    }

    #[test]
    fn manifest_checks_shape() {
        let m = CountMatrix::from_rows(&[vec![1, 2], vec![0, 3], vec![2, 2]]).unwrap();
        let ok = Manifest {
            labels: Some(vec![0, 1, 0]),
            ground_truth: Some(vec![vec![5, 5], vec![1, 9]]),
        };
        ok.check(&m).unwrap();
        assert_eq!(ok.truth_per_row(3).unwrap()[1], vec![1.0, 9.0]);
        let short = Manifest {
            labels: Some(vec![0, 1]),
            ground_truth: None,
        };
        assert!(matches!(short.check(&m), Err(Error::Validation(_))));
        let wide = Manifest {
            labels: None,
            ground_truth: Some(vec![vec![1, 2, 3]]),
        };
        assert!(matches!(wide.check(&m), Err(Error::Validation(_))));

        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.csv");
        write_counts(&p, &m, DataFormat::DenseCsv).unwrap();
        write_manifest(&p, &short).unwrap();
        assert!(ingest_counts(&p, DataFormat::DenseCsv).is_err());
        write_manifest(&p, &ok).unwrap();
        let (back, man) = ingest_counts(&p, DataFormat::DenseCsv).unwrap();
        assert_eq!(back, m);
        assert_eq!(man.unwrap(), ok);
    }

    #[test]
    fn format_names() {
        assert_eq!("sparse-triplet".parse::<DataFormat>().unwrap(), DataFormat::SparseTriplet);
        assert_eq!(DataFormat::DenseCsv.to_string(), "dense-csv");
        assert!("xml".parse::<DataFormat>().is_err());
    }
}
