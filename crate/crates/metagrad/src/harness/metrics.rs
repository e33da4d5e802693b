//! CSV output. Two schemas: per-epoch training metrics (`metrics.csv`) and
//! per-run evaluation summaries (`report.csv`). Formatting is fixed — 9
//! significant digits for measured reals, stable column order — so equal
//! runs produce byte-identical files.

use std::io::Write;
use std::path::Path;

use crate::error::Result;
use crate::metalearn::Algorithm;

pub const METRICS_HEADER: &str = "run_id,seed,algorithm,noise_mode,p,epoch,split,loss,metric";

pub const REPORT_HEADER: &str = "run_id,seed,algorithm,noise_mode,p,selector,domain,episodes,\
mean_loss,ci95_loss,mean_metric,ci95_metric,note";

/// 9 significant digits, scientific; the one way every measured real is
/// printed.
pub fn fmt_real(v: f64) -> String {
    format!("{:.8e}", v)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt_real).unwrap_or_default()
}

/// One per-epoch row of metrics.csv.
#[derive(Clone, Debug)]
pub struct MetricsRecord {
    pub run_id: String,
    pub seed: u64,
    pub algorithm: Algorithm,
    /// Canonical reported mode: "off" whenever noise is structurally
    /// inactive (mode off or p = 0).
    pub noise_mode: &'static str,
    pub p: f64,
    pub epoch: usize,
    /// "meta-train", "meta-val", "meta-test", or "abort".
    pub split: &'static str,
    pub loss: f64,
    /// Accuracy for classification evaluations; blank otherwise.
    pub metric: Option<f64>,
}

impl MetricsRecord {
    fn to_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.run_id,
            self.seed,
            self.algorithm.as_str(),
            self.noise_mode,
            self.p,
            self.epoch,
            self.split,
            fmt_real(self.loss),
            fmt_opt(self.metric),
        )
    }
}

pub fn write_metrics(path: &Path, rows: &[MetricsRecord]) -> Result<()> {
    let mut out = String::with_capacity(64 * (rows.len() + 1));
    out.push_str(METRICS_HEADER);
    out.push('\n');
    for row in rows {
        out.push_str(&row.to_row());
        out.push('\n');
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(out.as_bytes())?;
    Ok(())
}

/// One evaluation-summary row of report.csv. Sweep and ablation rows label
/// cells by their requested (mode, p) — raw, not canonicalized — so grid
/// cells stay distinguishable; stats are blank when the cell failed, with
/// the error in `note`.
#[derive(Clone, Debug)]
pub struct ReportRow {
    pub run_id: String,
    pub seed: u64,
    pub algorithm: Algorithm,
    pub noise_mode: String,
    pub p: f64,
    pub selector: String,
    pub domain: &'static str,
    pub episodes: usize,
    pub mean_loss: Option<f64>,
    pub ci95_loss: Option<f64>,
    pub mean_metric: Option<f64>,
    pub ci95_metric: Option<f64>,
    pub note: String,
}

impl ReportRow {
    fn to_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.run_id,
            self.seed,
            self.algorithm.as_str(),
            self.noise_mode,
            self.p,
            self.selector,
            self.domain,
            self.episodes,
            fmt_opt(self.mean_loss),
            fmt_opt(self.ci95_loss),
            fmt_opt(self.mean_metric),
            fmt_opt(self.ci95_metric),
            sanitize_note(&self.note),
        )
    }
}

/// Keep notes CSV-safe: no separators or line breaks.
fn sanitize_note(note: &str) -> String {
    note.replace([',', '\n', '\r'], ";")
}

pub fn write_report(path: &Path, rows: &[ReportRow]) -> Result<()> {
    let mut out = String::with_capacity(96 * (rows.len() + 1));
    out.push_str(REPORT_HEADER);
    out.push('\n');
    for row in rows {
        out.push_str(&row.to_row());
        out.push('\n');
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(out.as_bytes())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reals_print_nine_significant_digits() {
        assert_eq!(fmt_real(0.042), "4.20000000e-2");
        assert_eq!(fmt_real(1.0 / 3.0), "3.33333333e-1");
        assert_eq!(fmt_real(12345.6789), "1.23456789e4");
        assert_eq!(fmt_real(0.0), "0.00000000e0");
    }

    #[test]
    fn metrics_row_layout_is_stable() {
        let rec = MetricsRecord {
            run_id: "maml2-off-p0-s1".into(),
            seed: 1,
            algorithm: Algorithm::Maml2,
            noise_mode: "off",
            p: 0.0,
            epoch: 3,
            split: "meta-val",
            loss: 0.5,
            metric: None,
        };
        assert_eq!(
            rec.to_row(),
            "maml2-off-p0-s1,1,maml2,off,0,3,meta-val,5.00000000e-1,"
        );
    }

    #[test]
    fn notes_cannot_break_the_csv() {
        assert_eq!(sanitize_note("a,b\nc"), "a;b;c");
    }
}
