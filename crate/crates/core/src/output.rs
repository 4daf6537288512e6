//! CSV dumps. Floats carry 17 significant digits so files re-read exactly.

use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;

use crate::control::{FeedbackLaw, MeanFlow};
use crate::error::Result;
use crate::linear_closers::{LambdaPath, YPath};
use crate::pipeline::GapReport;
use crate::riccati_abstract::BarKPath;
use crate::riccati_standard::KPath;
use crate::sim::Ensemble;

pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

fn entry_names(prefix: &str, rows: usize, cols: usize) -> Vec<String> {
    (0..rows).flat_map(|a| (0..cols).map(move |b| format!("{prefix}_{a}{b}"))).collect()
}

fn push_matrix(rec: &mut Vec<String>, m: &DMatrix<f64>) {
    for a in 0..m.nrows() {
        for b in 0..m.ncols() {
            rec.push(fmt_f64(m[(a, b)]));
        }
    }
}

fn writer<W: Write>(w: W, header: Vec<String>) -> Result<csv::Writer<W>> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(&header)?;
    Ok(out)
}

/// Rows `(t, label, K entries)`.
pub fn write_k<W: Write>(w: W, k: &KPath) -> Result<()> {
    let tg = k.time_grid();
    let d = k.at(0)[0].nrows();
    let mut header = vec!["t".to_string(), "label".to_string()];
    header.extend(entry_names("k", d, d));
    let mut out = writer(w, header)?;
    for s in 0..tg.len() {
        for (i, m) in k.at(s).iter().enumerate() {
            let mut rec = vec![fmt_f64(tg.node(s)), i.to_string()];
            push_matrix(&mut rec, m);
            out.write_record(&rec)?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Rows `(t, i, j, K̄(i,j) entries)`.
pub fn write_kbar<W: Write>(w: W, kbar: &BarKPath) -> Result<()> {
    let tg = kbar.time_grid();
    let g0 = kbar.at(0);
    let (n, d) = (g0.labels(), g0.block_rows());
    let mut header = vec!["t".to_string(), "i".to_string(), "j".to_string()];
    header.extend(entry_names("kbar", d, d));
    let mut out = writer(w, header)?;
    for s in 0..tg.len() {
        let g = kbar.at(s);
        for i in 0..n {
            for j in 0..n {
                let mut rec = vec![fmt_f64(tg.node(s)), i.to_string(), j.to_string()];
                push_matrix(&mut rec, &g.block(i, j));
                out.write_record(&rec)?;
            }
        }
    }
    out.flush()?;
    Ok(())
}

/// Rows `(t, label, Y entries)`.
pub fn write_y<W: Write>(w: W, y: &YPath) -> Result<()> {
    let tg = y.time_grid();
    let d = y.at(0).dim();
    let mut header = vec!["t".to_string(), "label".to_string()];
    header.extend((0..d).map(|a| format!("y_{a}")));
    let mut out = writer(w, header)?;
    for s in 0..tg.len() {
        let f = y.at(s);
        for i in 0..f.labels() {
            let mut rec = vec![fmt_f64(tg.node(s)), i.to_string()];
            rec.extend(f.get(i).iter().map(|&x| fmt_f64(x)));
            out.write_record(&rec)?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Rows `(t, label, Λ)`.
pub fn write_lambda<W: Write>(w: W, lambda: &LambdaPath) -> Result<()> {
    let tg = lambda.time_grid();
    let mut out = writer(w, vec!["t".into(), "label".into(), "lambda".into()])?;
    for s in 0..tg.len() {
        for (i, &x) in lambda.at(s).iter().enumerate() {
            out.write_record([fmt_f64(tg.node(s)), i.to_string(), fmt_f64(x)])?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Local part of the feedback law at the nodes: rows `(t, label, L entries, c entries)`
/// for `α = L x + ∫M x̄ + c`.
pub fn write_law_local<W: Write>(w: W, law: &FeedbackLaw) -> Result<()> {
    let policy = law.policy();
    let tg = policy.time_grid();
    let l0 = policy.state_gain(0, 0);
    let (m, d) = (l0.nrows(), l0.ncols());
    let mut header = vec!["t".to_string(), "label".to_string()];
    header.extend(entry_names("l", m, d));
    header.extend((0..m).map(|a| format!("c_{a}")));
    let mut out = writer(w, header)?;
    for s in 0..tg.len() {
        let offset = policy.offset(2 * s);
        for i in 0..policy.labels() {
            let mut rec = vec![fmt_f64(tg.node(s)), i.to_string()];
            push_matrix(&mut rec, policy.state_gain(2 * s, i));
            rec.extend(offset.get(i).iter().map(|&x| fmt_f64(x)));
            out.write_record(&rec)?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Mean-field gain of the feedback law at the nodes: rows `(t, i, j, M(i,j) entries)`.
pub fn write_law_mean_gain<W: Write>(w: W, law: &FeedbackLaw) -> Result<()> {
    let policy = law.policy();
    let tg = policy.time_grid();
    let g0 = policy.mean_gain(0);
    let (n, m, d) = (g0.labels(), g0.block_rows(), g0.block_cols());
    let mut header = vec!["t".to_string(), "i".to_string(), "j".to_string()];
    header.extend(entry_names("m", m, d));
    let mut out = writer(w, header)?;
    for s in 0..tg.len() {
        let g = policy.mean_gain(2 * s);
        for i in 0..n {
            for j in 0..n {
                let mut rec = vec![fmt_f64(tg.node(s)), i.to_string(), j.to_string()];
                push_matrix(&mut rec, &g.block(i, j));
                out.write_record(&rec)?;
            }
        }
    }
    out.flush()?;
    Ok(())
}

/// Rows `(t, label, x̄ entries)` from the deterministic mean flow.
pub fn write_mean_flow<W: Write>(w: W, flow: &MeanFlow) -> Result<()> {
    let tg = flow.time_grid();
    let d = flow.at(0).dim();
    let mut header = vec!["t".to_string(), "label".to_string()];
    header.extend((0..d).map(|a| format!("mean_{a}")));
    let mut out = writer(w, header)?;
    for s in 0..tg.len() {
        let f = flow.at(s);
        for i in 0..f.labels() {
            let mut rec = vec![fmt_f64(tg.node(s)), i.to_string()];
            rec.extend(f.get(i).iter().map(|&x| fmt_f64(x)));
            out.write_record(&rec)?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Rows `(t, label, empirical mean entries, empirical variance entries)`.
pub fn write_empirical_moments<W: Write>(w: W, ens: &Ensemble) -> Result<()> {
    let tg = ens.time_grid();
    let d = ens.empirical_mean(0).dim();
    let mut header = vec!["t".to_string(), "label".to_string()];
    header.extend((0..d).map(|a| format!("mean_{a}")));
    header.extend((0..d).map(|a| format!("var_{a}")));
    let mut out = writer(w, header)?;
    for s in 0..tg.len() {
        let (mean, var) = (ens.empirical_mean(s), ens.empirical_variance(s));
        for i in 0..mean.labels() {
            let mut rec = vec![fmt_f64(tg.node(s)), i.to_string()];
            rec.extend(mean.get(i).iter().map(|&x| fmt_f64(x)));
            rec.extend(var.get(i).iter().map(|&x| fmt_f64(x)));
            out.write_record(&rec)?;
        }
    }
    out.flush()?;
    Ok(())
}

/// One row per law.
pub fn write_gap_reports<W: Write>(w: W, reports: &[GapReport]) -> Result<()> {
    let header = ["law", "J", "stderr", "V", "gap", "penalty", "penalty_stderr", "gap_minus_penalty", "exact_J", "exact_penalty"];
    let mut out = writer(w, header.iter().map(|s| s.to_string()).collect())?;
    for r in reports {
        let nums = [r.j, r.stderr, r.value, r.gap, r.penalty, r.penalty_stderr, r.gap_minus_penalty, r.exact_j, r.exact_penalty];
        let mut rec = vec![r.law.clone()];
        rec.extend(nums.iter().map(|&x| fmt_f64(x)));
        out.write_record(&rec)?;
    }
    out.flush()?;
    Ok(())
}

/// Opens `path` for writing and hands the buffered file to `f`.
pub fn to_file(path: impl AsRef<Path>, f: impl FnOnce(std::io::BufWriter<std::fs::File>) -> Result<()>) -> Result<()> {
    f(std::io::BufWriter::new(std::fs::File::create(path)?))
}
