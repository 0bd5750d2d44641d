//! Model checkpoint files.
//!
//! A checkpoint is UTF-8 text with LF line endings:
//!
//! ```text
//! mtlc-model 1
//! config_hash <16 hex digits>
//! seed <u64>
//! shape <d> <r> <k>
//! counts <n_0> ... <n_{k-1}>
//! params <count>
//! <one parameter per line>
//! ```
//!
//! Parameters are in the network's flat order (trunk weights, trunk biases,
//! head weights, head biases) and printed in shortest round-trip form, so a
//! loaded model predicts bit-identically to the saved one.

use std::fmt::Write as _;
use std::path::Path;

use mtlc_core::learner::{Network, TrainedModel};

use crate::error::{Error, Result};
use crate::io::{fmt_f64, write_atomic};

pub const MAGIC: &str = "mtlc-model";
pub const VERSION: u32 = 1;

pub fn to_string(model: &TrainedModel) -> String {
    let net = &model.net;
    let mut s = String::new();
    let _ = writeln!(s, "{MAGIC} {VERSION}");
    let _ = writeln!(s, "config_hash {:016x}", model.config_hash);
    let _ = writeln!(s, "seed {}", model.seed);
    let _ = writeln!(s, "shape {} {} {}", net.d, net.r, net.k);
    let counts: Vec<String> = model.counts.iter().map(usize::to_string).collect();
    let _ = writeln!(s, "counts {}", counts.join(" "));
    let _ = writeln!(s, "params {}", net.params.len());
    for &p in &net.params {
        s.push_str(&fmt_f64(p));
        s.push('\n');
    }
    s
}

pub fn save(model: &TrainedModel, path: &Path) -> Result<()> {
    write_atomic(path, to_string(model).as_bytes())
}

pub fn load(path: &Path) -> Result<TrainedModel> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse(&text).map_err(|(line, message)| Error::Parse {
        path: path.to_path_buf(),
        line,
        column: String::new(),
        message,
    })
}

fn field<'a>(lines: &mut impl Iterator<Item = (usize, &'a str)>, key: &str) -> std::result::Result<(u64, Vec<&'a str>), (u64, String)> {
    let (i, line) = lines.next().ok_or((0, format!("missing {key} line")))?;
    let ln = i as u64 + 1;
    let mut parts = line.split(' ');
    if parts.next() != Some(key) {
        return Err((ln, format!("expected {key}")));
    }
    Ok((ln, parts.collect()))
}

fn num<T: std::str::FromStr>(ln: u64, s: &str) -> std::result::Result<T, (u64, String)> {
    s.parse().map_err(|_| (ln, format!("bad number {s:?}")))
}

pub fn parse(text: &str) -> std::result::Result<TrainedModel, (u64, String)> {
    let mut lines = text.lines().enumerate();
    let (ln, v) = field(&mut lines, MAGIC)?;
    if v != [VERSION.to_string().as_str()] {
        return Err((ln, format!("unsupported version {v:?}")));
    }
    let (ln, v) = field(&mut lines, "config_hash")?;
    let config_hash = match v.as_slice() {
        [h] => u64::from_str_radix(h, 16).map_err(|_| (ln, format!("bad hash {h:?}")))?,
        _ => return Err((ln, "expected one hash".into())),
    };
    let (ln, v) = field(&mut lines, "seed")?;
    let seed = match v.as_slice() {
        [s] => num(ln, s)?,
        _ => return Err((ln, "expected one seed".into())),
    };
    let (ln, v) = field(&mut lines, "shape")?;
    let [d, r, k] = match v.as_slice() {
        [d, r, k] => [num(ln, d)?, num(ln, r)?, num(ln, k)?],
        _ => return Err((ln, "expected d r k".into())),
    };
    let (ln, v) = field(&mut lines, "counts")?;
    let counts: Vec<usize> = v
        .iter()
        .filter(|s| !s.is_empty())
        .map(|s| num(ln, s))
        .collect::<std::result::Result<_, _>>()?;
    if counts.len() != k {
        return Err((ln, format!("{} counts for {k} tasks", counts.len())));
    }
    let (ln, v) = field(&mut lines, "params")?;
    let n: usize = match v.as_slice() {
        [n] => num(ln, n)?,
        _ => return Err((ln, "expected a parameter count".into())),
    };
    if n != Network::param_count(d, r, k) {
        return Err((ln, format!("{n} parameters do not fit shape {d} {r} {k}")));
    }
    let mut params = Vec::with_capacity(n);
    for (i, line) in lines {
        let p: f64 = num(i as u64 + 1, line)?;
        if !p.is_finite() {
            return Err((i as u64 + 1, "non-finite parameter".into()));
        }
        params.push(p);
    }
    if params.len() != n {
        return Err((ln, format!("expected {n} parameters, found {}", params.len())));
    }
    Ok(TrainedModel {
        net: Network { d, r, k, params },
        config_hash,
        seed,
        counts,
    })
}
