//! Trace persistence: one CSV per (algorithm, replication) with exact
//! float round-tripping, plus the mean/standard-error summary.

use bqo::driver::TraceRow;
use bqo::Env;
use std::fmt::Write as _;
use std::path::Path;

/// 17 significant digits: exact round trip for 64-bit floats.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn fmt_vec(v: &[f64]) -> String {
    v.iter().map(|x| fmt_f64(*x)).collect::<Vec<_>>().join(";")
}

fn fmt_env(e: &Env) -> String {
    match e {
        Env::Cont(v) => fmt_vec(v),
        Env::Task(t) => format!("task:{t}"),
    }
}

fn parse_vec(s: &str) -> Result<Vec<f64>, String> {
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(';')
        .map(|t| {
            t.parse::<f64>()
                .map_err(|e| format!("bad float '{t}': {e}"))
        })
        .collect()
}

fn parse_env(s: &str) -> Result<Env, String> {
    if let Some(idx) = s.strip_prefix("task:") {
        Ok(Env::Task(
            idx.parse::<usize>()
                .map_err(|e| format!("bad task index '{idx}': {e}"))?,
        ))
    } else {
        Ok(Env::Cont(parse_vec(s)?))
    }
}

/// One persisted row: the in-memory trace row plus its provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct PersistedRow {
    pub replication: usize,
    pub iteration: usize,
    pub algorithm: String,
    pub cand_x: Option<Vec<f64>>,
    pub cand_w: Option<Env>,
    pub y: Option<f64>,
    pub recommendation: Vec<f64>,
    pub true_g: Option<f64>,
    pub elapsed_s: f64,
}

impl PersistedRow {
    pub fn from_trace(row: &TraceRow, replication: usize, algorithm: &str) -> Self {
        PersistedRow {
            replication,
            iteration: row.iteration,
            algorithm: algorithm.to_string(),
            cand_x: row.cand_x.clone(),
            cand_w: row.cand_w.clone(),
            y: row.y,
            recommendation: row.recommendation.clone(),
            true_g: row.true_g,
            elapsed_s: row.elapsed_s,
        }
    }
}

pub fn header(with_true_g: bool) -> String {
    if with_true_g {
        "replication,iteration,algorithm,x,w,y,x_star,true_g_star,elapsed_s".to_string()
    } else {
        "replication,iteration,algorithm,x,w,y,x_star,elapsed_s".to_string()
    }
}

pub fn to_csv(rows: &[PersistedRow], with_true_g: bool) -> String {
    let mut out = header(with_true_g);
    out.push('\n');
    for r in rows {
        let x = r.cand_x.as_deref().map(fmt_vec).unwrap_or_default();
        let w = r.cand_w.as_ref().map(fmt_env).unwrap_or_default();
        let y = r.y.map(fmt_f64).unwrap_or_default();
        if with_true_g {
            let tg = r.true_g.map(fmt_f64).unwrap_or_default();
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                r.replication,
                r.iteration,
                r.algorithm,
                x,
                w,
                y,
                fmt_vec(&r.recommendation),
                tg,
                fmt_f64(r.elapsed_s)
            );
        } else {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                r.replication,
                r.iteration,
                r.algorithm,
                x,
                w,
                y,
                fmt_vec(&r.recommendation),
                fmt_f64(r.elapsed_s)
            );
        }
    }
    out
}

pub fn from_csv(text: &str) -> Result<Vec<PersistedRow>, String> {
    let mut lines = text.lines();
    let head = lines.next().ok_or("empty trace file")?;
    let with_true_g = match head {
        h if h == header(true) => true,
        h if h == header(false) => false,
        other => return Err(format!("unrecognized trace header: {other}")),
    };
    let mut rows = Vec::new();
    for (k, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        let expect = if with_true_g { 9 } else { 8 };
        if fields.len() != expect {
            return Err(format!(
                "line {}: expected {expect} fields, got {}",
                k + 2,
                fields.len()
            ));
        }
        let parse_usize = |s: &str, what: &str| {
            s.parse::<usize>()
                .map_err(|e| format!("line {}: bad {what} '{s}': {e}", k + 2))
        };
        let parse_f = |s: &str, what: &str| {
            s.parse::<f64>()
                .map_err(|e| format!("line {}: bad {what} '{s}': {e}", k + 2))
        };
        fn opt(s: &str) -> Option<&str> {
            if s.is_empty() {
                None
            } else {
                Some(s)
            }
        }
        rows.push(PersistedRow {
            replication: parse_usize(fields[0], "replication")?,
            iteration: parse_usize(fields[1], "iteration")?,
            algorithm: fields[2].to_string(),
            cand_x: opt(fields[3]).map(parse_vec).transpose()?,
            cand_w: opt(fields[4]).map(parse_env).transpose()?,
            y: opt(fields[5]).map(|s| parse_f(s, "y")).transpose()?,
            recommendation: parse_vec(fields[6])?,
            true_g: if with_true_g {
                opt(fields[7]).map(|s| parse_f(s, "true_g")).transpose()?
            } else {
                None
            },
            elapsed_s: parse_f(fields[if with_true_g { 8 } else { 7 }], "elapsed")?,
        });
    }
    Ok(rows)
}

/// Per-(algorithm, iteration) mean and standard error of the recommended
/// point's true objective value.
pub fn summarize(rows: &[PersistedRow]) -> String {
    use std::collections::BTreeMap;
    let mut buckets: BTreeMap<(String, usize), Vec<f64>> = BTreeMap::new();
    for r in rows {
        if let Some(tg) = r.true_g {
            buckets
                .entry((r.algorithm.clone(), r.iteration))
                .or_default()
                .push(tg);
        }
    }
    let mut out = String::from("algorithm,iteration,mean_true_g,se_true_g,reps\n");
    for ((alg, it), vals) in buckets {
        let n = vals.len();
        let mean = vals.iter().sum::<f64>() / n as f64;
        let se = if n >= 2 {
            let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n as f64 - 1.0);
            (var / n as f64).sqrt()
        } else {
            0.0
        };
        let _ = writeln!(out, "{alg},{it},{},{},{n}", fmt_f64(mean), fmt_f64(se));
    }
    out
}

pub fn trace_path(dir: &Path, algorithm: &str, replication: usize) -> std::path::PathBuf {
    dir.join(format!("trace_{algorithm}_r{replication:03}.csv"))
}
