//! Dataset, fold and similarity CSV files.
//!
//! Dataset files have a header row; `f_*` columns are features, `y_*` columns
//! are tasks and an optional `group` column holds group ids. Labels are `0`,
//! `1` or empty for missing. Files written by [`save_dataset`] are canonical:
//! loading and saving one reproduces it byte for byte.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use mtlc_core::data::{Dataset, FoldAssignment, Grouping};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub(crate) fn reader(path: &Path) -> Result<csv::Reader<File>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::ReaderBuilder::new().has_headers(true).from_reader(file))
}

pub(crate) fn writer(path: &Path) -> Result<csv::Writer<BufWriter<File>>> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(BufWriter::new(file)))
}

pub(crate) fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.kind() {
        csv::ErrorKind::Io(_) => match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            _ => unreachable!(),
        },
        _ => Error::Parse {
            path: path.to_path_buf(),
            line: e.position().map_or(0, csv::Position::line),
            column: String::new(),
            message: e.to_string(),
        },
    }
}

pub(crate) fn finish<W: Write>(path: &Path, w: csv::Writer<W>) -> Result<()> {
    let mut inner = w
        .into_inner()
        .map_err(|e| Error::io(path, std::io::Error::other(e.to_string())))?;
    inner.flush().map_err(|e| Error::io(path, e))
}

/// Writes `bytes` to `path` through a temporary file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

/// Formats a float so that parsing it gives back the same value.
pub fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

pub fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let mut rdr = reader(path)?;
    let header = rdr.headers().map_err(|e| csv_err(path, e))?.clone();
    let mut group_col = None;
    let mut feat_cols = Vec::new();
    let mut task_cols = Vec::new();
    for (i, name) in header.iter().enumerate() {
        if name == "group" {
            group_col = Some(i);
        } else if name.starts_with("f_") {
            feat_cols.push(i);
        } else if name.starts_with("y_") {
            task_cols.push(i);
        } else {
            return Err(Error::Schema {
                path: path.to_path_buf(),
                message: format!("unexpected column {name:?}"),
            });
        }
    }
    if feat_cols.is_empty() || task_cols.is_empty() {
        return Err(Error::Schema {
            path: path.to_path_buf(),
            message: "need at least one f_ column and one y_ column".into(),
        });
    }
    let mut features = Vec::new();
    let mut labels = Vec::new();
    let mut present = Vec::new();
    let mut groups = group_col.map(|_| Vec::new());
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let line = rec.position().map_or(0, csv::Position::line);
        let cell_err = |col: usize, message: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            column: header[col].to_string(),
            message,
        };
        for &c in &feat_cols {
            let v: f64 = rec[c]
                .parse()
                .map_err(|_| cell_err(c, format!("not a number: {:?}", &rec[c])))?;
            features.push(v);
        }
        for &c in &task_cols {
            let (l, p) = match &rec[c] {
                "" => (false, false),
                "0" => (false, true),
                "1" => (true, true),
                other => return Err(cell_err(c, format!("label must be 0, 1 or empty, got {other:?}"))),
            };
            labels.push(l);
            present.push(p);
        }
        if let (Some(g), Some(c)) = (groups.as_mut(), group_col) {
            g.push(rec[c].to_string());
        }
    }
    let names = |cols: &[usize]| cols.iter().map(|&c| header[c].to_string()).collect();
    Dataset::new(features, labels, present, groups, names(&feat_cols), names(&task_cols)).map_err(|e| Error::Schema {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    let mut w = writer(path)?;
    let mut header: Vec<&str> = Vec::new();
    if ds.groups().is_some() {
        header.push("group");
    }
    header.extend(ds.feature_names().iter().map(String::as_str));
    header.extend(ds.task_names().iter().map(String::as_str));
    w.write_record(&header).map_err(|e| csv_err(path, e))?;
    let mut row: Vec<String> = Vec::with_capacity(header.len());
    for i in 0..ds.n_rows() {
        row.clear();
        if let Some(g) = ds.groups() {
            row.push(g[i].clone());
        }
        row.extend(ds.row(i).iter().map(|&v| fmt_f64(v)));
        for t in 0..ds.n_tasks() {
            row.push(match ds.label(i, t) {
                None => String::new(),
                Some(true) => "1".into(),
                Some(false) => "0".into(),
            });
        }
        w.write_record(&row).map_err(|e| csv_err(path, e))?;
    }
    finish(path, w)
}

pub fn save_similarity(names: &[String], sim: &[f64], path: &Path) -> Result<()> {
    let mut w = writer(path)?;
    let mut header = vec!["task".to_string()];
    header.extend(names.iter().cloned());
    w.write_record(&header).map_err(|e| csv_err(path, e))?;
    let k = names.len();
    for (a, name) in names.iter().enumerate() {
        let mut row = vec![name.clone()];
        row.extend(sim[a * k..(a + 1) * k].iter().map(|&v| fmt_f64(v)));
        w.write_record(&row).map_err(|e| csv_err(path, e))?;
    }
    finish(path, w)
}

/// Fold file: `row_index,group_id,fold`, the group id empty when rows carry
/// none.
pub fn save_folds(ds: &Dataset, fa: &FoldAssignment, path: &Path) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["row_index", "group_id", "fold"])
        .map_err(|e| csv_err(path, e))?;
    for (i, f) in fa.fold_of_row.iter().enumerate() {
        let g = ds.groups().map(|g| g[i].as_str()).unwrap_or("");
        w.write_record([i.to_string().as_str(), g, f.to_string().as_str()])
            .map_err(|e| csv_err(path, e))?;
    }
    finish(path, w)
}

pub fn load_folds(path: &Path, n_folds: usize, grouping: Grouping, n_rows: usize) -> Result<FoldAssignment> {
    let mut rdr = reader(path)?;
    let mut fold_of_row = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let line = rec.position().map_or(0, csv::Position::line);
        let parse = |col: usize, name: &str| -> Result<usize> {
            rec.get(col).and_then(|s| s.parse().ok()).ok_or_else(|| Error::Parse {
                path: path.to_path_buf(),
                line,
                column: name.into(),
                message: "expected a non-negative integer".into(),
            })
        };
        let row = parse(0, "row_index")?;
        let fold = parse(2, "fold")?;
        if row != fold_of_row.len() || fold >= n_folds {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line,
                column: "fold".into(),
                message: format!("row {row}: fold {fold} out of order or out of range"),
            });
        }
        fold_of_row.push(fold);
    }
    if fold_of_row.len() != n_rows {
        return Err(Error::Schema {
            path: path.to_path_buf(),
            message: format!("{} rows, dataset has {n_rows}", fold_of_row.len()),
        });
    }
    Ok(FoldAssignment {
        n_folds,
        fold_of_row,
        shift: 0,
        grouping,
    })
}
