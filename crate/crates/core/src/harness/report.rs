//! Result tables and SVG plots.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::harness::eval::{round1, FoldReport};
use crate::trajkit::{Label, Mode};

/// Everything reported for one scorer.
#[derive(Clone, Debug, PartialEq)]
pub struct ScorerResult {
    pub report: FoldReport,
    pub nominal: Vec<f64>,
    pub failures: Vec<(Mode, f64)>,
    /// Smoothed series of a few trajectories: `(id, label, values)`.
    pub timelines: Vec<(String, Label, Vec<f64>)>,
}

pub const CSV_HEADER: &str = "scorer,fold,threshold,n_nominal,n_failure,acc_nominal,acc_failure,weighted";

pub fn results_csv(reports: &[&FoldReport]) -> String {
    let mut s = format!("{CSV_HEADER}\n");
    for r in reports {
        for f in &r.folds {
            let _ = writeln!(
                s,
                "{},{},{:.9},{},{},{:.4},{:.4},{:.4}",
                r.kind, f.fold, f.threshold, f.n_nominal, f.n_failure, f.acc_nominal, f.acc_failure, f.weighted
            );
        }
    }
    s
}

pub fn summary_md(reports: &[&FoldReport]) -> String {
    let alpha = reports.first().map(|r| r.alpha).unwrap_or(0.15);
    let mut s = format!("# Classification accuracy (alpha = {alpha})\n\n");
    s.push_str("| Scorer | Nominal | Failure | Weighted total | Mean AUC |");
    for m in Mode::FAILURES {
        let _ = write!(s, " AUC {} |", m.as_str());
    }
    s.push_str("\n|---|---|---|---|---|");
    s.push_str(&"---|".repeat(Mode::FAILURES.len()));
    s.push('\n');
    for r in reports {
        let pm = |(m, sd): (f64, f64)| format!("{:.1} ± {:.1}", round1(m), round1(sd));
        let _ = write!(s, "| {} | {} | {} | {} | {:.3} |", r.kind, pm(r.nominal()), pm(r.failure()), pm(r.weighted()), r.mean_auc());
        for m in Mode::FAILURES {
            match r.auc_by_mode.iter().find(|(k, _)| *k == m) {
                Some((_, a)) => {
                    let _ = write!(s, " {a:.3} |");
                }
                None => s.push_str(" - |"),
            }
        }
        s.push('\n');
    }
    s
}

/// Axis range covering `values` and a finite `threshold`, padded by 5% of
/// the span on each side.
pub fn padded_range(values: &[f64], threshold: f64) -> (f64, f64) {
    let mut lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let mut hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if threshold.is_finite() {
        lo = lo.min(threshold);
        hi = hi.max(threshold);
    }
    if !lo.is_finite() || !hi.is_finite() {
        return (0.0, 1.0);
    }
    let span = hi - lo;
    let pad = if span > 0.0 { 0.05 * span } else { 0.5 * lo.abs().max(1.0) };
    (lo - pad, hi + pad)
}

const W: f64 = 640.0;
const H: f64 = 360.0;
const M: f64 = 48.0;

fn svg_open(title: &str) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" font-family=\"sans-serif\" font-size=\"12\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"20\" text-anchor=\"middle\">{}</text>\n",
        W / 2.0,
        title
    )
}

fn axes(s: &mut String, lo: f64, hi: f64) {
    let _ = writeln!(s, "<line x1=\"{M}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>", H - M, W - M, H - M);
    let _ = writeln!(s, "<line x1=\"{M}\" y1=\"{M}\" x2=\"{M}\" y2=\"{}\" stroke=\"black\"/>", H - M);
    let _ = writeln!(s, "<text x=\"{M}\" y=\"{}\">{lo:.4}</text>", H - M + 16.0);
    let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{hi:.4}</text>", W - M, H - M + 16.0);
}

/// Overlaid nominal/failure histograms of trajectory statistics with the
/// threshold as a vertical line.
pub fn histogram_svg(title: &str, nominal: &[f64], failure: &[f64], threshold: f64) -> String {
    const BINS: usize = 24;
    let all: Vec<f64> = nominal.iter().chain(failure).copied().collect();
    let (lo, hi) = padded_range(&all, threshold);
    let x = |v: f64| M + (v - lo) / (hi - lo) * (W - 2.0 * M);
    let count = |vs: &[f64]| {
        let mut c = [0usize; BINS];
        for &v in vs {
            let b = (((v - lo) / (hi - lo)) * BINS as f64).floor().clamp(0.0, (BINS - 1) as f64) as usize;
            c[b] += 1;
        }
        c
    };
    let (cn, cf) = (count(nominal), count(failure));
    let peak = cn.iter().chain(&cf).copied().max().unwrap_or(1).max(1) as f64;
    let mut s = svg_open(title);
    axes(&mut s, lo, hi);
    let bw = (W - 2.0 * M) / BINS as f64;
    for (counts, color) in [(&cn, "#1f77b4"), (&cf, "#d62728")] {
        for (b, &c) in counts.iter().enumerate() {
            if c == 0 {
                continue;
            }
            let h = c as f64 / peak * (H - 2.0 * M);
            let _ = writeln!(
                s,
                "<rect x=\"{:.2}\" y=\"{:.2}\" width=\"{:.2}\" height=\"{:.2}\" fill=\"{color}\" fill-opacity=\"0.5\"/>",
                M + b as f64 * bw,
                H - M - h,
                bw,
                h
            );
        }
    }
    if threshold.is_finite() {
        let tx = x(threshold);
        let _ = writeln!(s, "<line x1=\"{tx:.2}\" y1=\"{M}\" x2=\"{tx:.2}\" y2=\"{}\" stroke=\"black\" stroke-dasharray=\"4 3\"/>", H - M);
    }
    let _ = writeln!(s, "<text x=\"{}\" y=\"40\" fill=\"#1f77b4\">nominal</text>", W - M - 100.0);
    let _ = writeln!(s, "<text x=\"{}\" y=\"56\" fill=\"#d62728\">failure</text>", W - M - 100.0);
    s.push_str("</svg>\n");
    s
}

/// Smoothed score series over time, one polyline per trajectory.
pub fn timeline_svg(title: &str, series: &[(String, Label, Vec<f64>)], threshold: f64) -> String {
    let all: Vec<f64> = series.iter().flat_map(|(_, _, v)| v.iter().copied()).collect();
    let (lo, hi) = padded_range(&all, threshold);
    let t_max = series.iter().map(|(_, _, v)| v.len()).max().unwrap_or(1).max(2) - 1;
    let x = |t: usize| M + t as f64 / t_max as f64 * (W - 2.0 * M);
    let y = |v: f64| H - M - (v - lo) / (hi - lo) * (H - 2.0 * M);
    let mut s = svg_open(title);
    axes(&mut s, lo, hi);
    for (_, label, vals) in series {
        let color = if *label == Label::Nominal { "#1f77b4" } else { "#d62728" };
        let pts: Vec<String> = vals.iter().enumerate().map(|(t, &v)| format!("{:.2},{:.2}", x(t), y(v))).collect();
        let _ = writeln!(s, "<polyline fill=\"none\" stroke=\"{color}\" stroke-opacity=\"0.7\" points=\"{}\"/>", pts.join(" "));
    }
    if threshold.is_finite() {
        let ty = y(threshold);
        let _ = writeln!(s, "<line x1=\"{M}\" y1=\"{ty:.2}\" x2=\"{}\" y2=\"{ty:.2}\" stroke=\"black\" stroke-dasharray=\"4 3\"/>", W - M);
    }
    s.push_str("</svg>\n");
    s
}

fn write(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Writes `results.csv`, `summary.md` and per-scorer plots under `out`.
pub fn emit_report(results: &[ScorerResult], out: &Path) -> Result<()> {
    let plots = out.join("plots");
    fs::create_dir_all(&plots).map_err(|e| Error::io(&plots, e))?;
    let reports: Vec<&FoldReport> = results.iter().map(|r| &r.report).collect();
    write(&out.join("results.csv"), &results_csv(&reports))?;
    write(&out.join("summary.md"), &summary_md(&reports))?;
    for r in results {
        let k = r.report.kind;
        let thr = r.report.mean_threshold();
        let fail: Vec<f64> = r.failures.iter().map(|(_, v)| *v).collect();
        write(&plots.join(format!("hist_{k}.svg")), &histogram_svg(&format!("{k}: trajectory statistics"), &r.nominal, &fail, thr))?;
        write(&plots.join(format!("timeline_{k}.svg")), &timeline_svg(&format!("{k}: smoothed scores"), &r.timelines, thr))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::eval::evaluate_stats;
    use crate::scorers::ScorerKind;

    #[test]
    fn empty_reports_give_header_only() {
        assert_eq!(results_csv(&[]), format!("{CSV_HEADER}\n"));
    }

    #[test]
    fn csv_has_one_row_per_scorer_and_fold() {
        let nominal: Vec<f64> = (0..20).map(|i| i as f64).collect();
        let fails = [(Mode::ZeroFriction, 30.0), (Mode::RecolorGreen, 5.0)];
        let a = evaluate_stats(ScorerKind::Sparc, &nominal, &fails, 0.15, 7, 0).unwrap();
        let b = evaluate_stats(ScorerKind::Random, &nominal, &fails, 0.15, 7, 1).unwrap();
        let csv = results_csv(&[&a, &b]);
        assert_eq!(csv.lines().count(), 1 + 14);
        let md = summary_md(&[&a, &b]);
        assert!(md.contains("| sparc |"));
    }

    #[test]
    fn ranges_have_margin() {
        let (lo, hi) = padded_range(&[1.0, 3.0], 2.0);
        assert!(lo <= 1.0 - 0.1 + 1e-12 && hi >= 3.0 + 0.1 - 1e-12);
        let (lo, hi) = padded_range(&[1.0, 3.0], 5.0);
        assert!(lo <= 0.8 + 1e-12 && hi >= 5.2 - 1e-12);
        let (lo, hi) = padded_range(&[2.0, 2.0], f64::INFINITY);
        assert!(lo < 2.0 && hi > 2.0);
    }

    #[test]
    fn report_files_are_written() {
        let nominal: Vec<f64> = (0..10).map(|i| i as f64 * 0.1).collect();
        let failures = vec![(Mode::HalfFriction, 2.0)];
        let report = evaluate_stats(ScorerKind::Sparc, &nominal, &failures, 0.15, 4, 0).unwrap();
        let res = ScorerResult {
            report,
            nominal,
            failures,
            timelines: vec![("a".into(), Label::Nominal, vec![0.1, 0.2, 0.3]), ("b".into(), Label::Failure, vec![0.5, 2.0])],
        };
        let dir = tempfile::tempdir().unwrap();
        emit_report(&[res], dir.path()).unwrap();
        for f in ["results.csv", "summary.md", "plots/hist_sparc.svg", "plots/timeline_sparc.svg"] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
        let svg = fs::read_to_string(dir.path().join("plots/hist_sparc.svg")).unwrap();
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
    }
}
