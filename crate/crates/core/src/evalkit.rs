//! Depth metrics with range filtering, optional median scaling, and
//! CSV/SVG reports.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{DepthMap, Mask};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scaling {
    None,
    Median,
}

impl Scaling {
    pub fn name(self) -> &'static str {
        match self {
            Scaling::None => "none",
            Scaling::Median => "median",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Scaling::None),
            "median" => Ok(Scaling::Median),
            other => Err(Error::Config(format!(
                "unknown scaling mode {other:?} (expected none or median)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRange {
    pub min: f64,
    pub max: f64,
}

impl Default for EvalRange {
    fn default() -> Self {
        EvalRange {
            min: 0.1,
            max: 80.0,
        }
    }
}

impl EvalRange {
    pub fn validate(&self) -> Result<()> {
        if self.min > 0.0 && self.min < self.max && self.max.is_finite() {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "invalid evaluation range [{}, {}]",
                self.min, self.max
            )))
        }
    }

    pub fn contains(&self, d: f64) -> bool {
        d >= self.min && d <= self.max
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub split: String,
    pub condition: String,
    pub model: String,
    pub abs_rel: f64,
    pub sq_rel: f64,
    pub rmse: f64,
    /// Percent of pixels with `max(p/g, g/p) < 1.25`.
    pub delta1: f64,
    pub n_pixels: usize,
    pub range: EvalRange,
    pub scaling: Scaling,
}

impl MetricsReport {
    pub fn tagged(mut self, split: &str, condition: &str, model: &str) -> Self {
        self.split = split.into();
        self.condition = condition.into();
        self.model = model.into();
        self
    }

    pub fn metric(&self, name: &str) -> Option<f64> {
        match name {
            "absRel" => Some(self.abs_rel),
            "sqRel" => Some(self.sq_rel),
            "RMSE" => Some(self.rmse),
            "delta1" => Some(self.delta1),
            _ => None,
        }
    }
}

pub const METRICS: [&str; 4] = ["absRel", "sqRel", "RMSE", "delta1"];

fn check_dims(pred: &DepthMap, gt: &DepthMap) -> Result<()> {
    if pred.height() != gt.height() || pred.width() != gt.width() {
        return Err(Error::shape(
            "compute_metrics",
            &[&[pred.height(), pred.width()], &[gt.height(), gt.width()]],
        ));
    }
    Ok(())
}

/// Pixels whose ground truth lies in `range`.
pub fn valid_mask(gt: &DepthMap, range: EvalRange) -> Mask {
    let data = gt.data().iter().map(|&g| range.contains(g)).collect();
    Mask::new(gt.height(), gt.width(), data).expect("dims match")
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// `pred · median(gt) / median(pred)`, medians over `valid`.
pub fn median_scale(pred: &DepthMap, gt: &DepthMap, valid: &Mask) -> Result<DepthMap> {
    check_dims(pred, gt)?;
    let picked = |d: &DepthMap| -> Vec<f64> {
        d.data()
            .iter()
            .zip(valid.data())
            .filter(|(_, &m)| m)
            .map(|(&x, _)| x)
            .collect()
    };
    let (p, g) = (picked(pred), picked(gt));
    if p.is_empty() {
        return Err(Error::Domain {
            op: "evalkit",
            msg: "median scaling needs at least one valid pixel".into(),
        });
    }
    let (mp, mg) = (median(p), median(g));
    if !(mp > 0.0 && mg > 0.0 && mp.is_finite() && mg.is_finite()) {
        return Err(Error::Domain {
            op: "evalkit",
            msg: format!("median scaling with medians pred {mp}, gt {mg}"),
        });
    }
    Ok(pred.scaled(mg / mp))
}

/// Metrics over the pixels with ground truth in `range`; the prediction is
/// scaled first, then clamped to `range`.
pub fn compute_metrics(
    pred: &DepthMap,
    gt: &DepthMap,
    range: EvalRange,
    scaling: Scaling,
) -> Result<MetricsReport> {
    check_dims(pred, gt)?;
    range.validate()?;
    let valid = valid_mask(gt, range);
    if valid.count() == 0 {
        return Err(Error::Domain {
            op: "evalkit",
            msg: format!("no ground-truth pixels in [{}, {}]", range.min, range.max),
        });
    }
    let scaled;
    let pred = match scaling {
        Scaling::None => pred,
        Scaling::Median => {
            scaled = median_scale(pred, gt, &valid)?;
            &scaled
        }
    };
    let (mut abs_rel, mut sq_rel, mut sq, mut good) = (0.0, 0.0, 0.0, 0usize);
    let mut n = 0usize;
    for ((&p, &g), &m) in pred.data().iter().zip(gt.data()).zip(valid.data()) {
        if !m {
            continue;
        }
        if !p.is_finite() {
            return Err(Error::NonFinite("predicted depth".into()));
        }
        let p = p.clamp(range.min, range.max);
        let e = p - g;
        abs_rel += e.abs() / g;
        sq_rel += e * e / g;
        sq += e * e;
        if (p / g).max(g / p) < 1.25 {
            good += 1;
        }
        n += 1;
    }
    let nf = n as f64;
    Ok(MetricsReport {
        split: String::new(),
        condition: String::new(),
        model: String::new(),
        abs_rel: abs_rel / nf,
        sq_rel: sq_rel / nf,
        rmse: (sq / nf).sqrt(),
        delta1: 100.0 * good as f64 / nf,
        n_pixels: n,
        range,
        scaling,
    })
}

/// Per-image metrics averaged over a set of images; `n_pixels` is the total.
pub fn evaluate_set(
    pairs: &[(DepthMap, DepthMap)],
    range: EvalRange,
    scaling: Scaling,
) -> Result<MetricsReport> {
    if pairs.is_empty() {
        return Err(Error::Invalid("nothing to evaluate".into()));
    }
    let reports = pairs
        .iter()
        .map(|(p, g)| compute_metrics(p, g, range, scaling))
        .collect::<Result<Vec<_>>>()?;
    let n = reports.len() as f64;
    let mean = |f: fn(&MetricsReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
    Ok(MetricsReport {
        split: String::new(),
        condition: String::new(),
        model: String::new(),
        abs_rel: mean(|r| r.abs_rel),
        sq_rel: mean(|r| r.sq_rel),
        rmse: mean(|r| r.rmse),
        delta1: mean(|r| r.delta1),
        n_pixels: reports.iter().map(|r| r.n_pixels).sum(),
        range,
        scaling,
    })
}

pub const CSV_HEADER: &str = "split,condition,model,absRel,sqRel,RMSE,delta1,n_pixels";

pub fn reports_csv(reports: &[MetricsReport]) -> String {
    let mut s = format!("{CSV_HEADER}\n");
    for r in reports {
        let _ = writeln!(
            s,
            "{},{},{},{:e},{:e},{:e},{:e},{}",
            r.split, r.condition, r.model, r.abs_rel, r.sq_rel, r.rmse, r.delta1, r.n_pixels
        );
    }
    s
}

/// One CSV row, as read back from a report file.
#[derive(Clone, Debug, PartialEq)]
pub struct CsvRow {
    pub split: String,
    pub condition: String,
    pub model: String,
    pub values: [f64; 4],
    pub n_pixels: usize,
}

pub fn parse_reports_csv(text: &str) -> Result<Vec<CsvRow>> {
    let mut lines = text.lines();
    if lines.next() != Some(CSV_HEADER) {
        return Err(Error::Format("metrics CSV: unexpected header".into()));
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            let f: Vec<&str> = l.split(',').collect();
            let bad = || Error::Format(format!("metrics CSV row {}: {l:?}", i + 1));
            if f.len() != 8 {
                return Err(bad());
            }
            let mut values = [0.0; 4];
            for (v, s) in values.iter_mut().zip(&f[3..7]) {
                *v = s.parse().map_err(|_| bad())?;
            }
            Ok(CsvRow {
                split: f[0].into(),
                condition: f[1].into(),
                model: f[2].into(),
                values,
                n_pixels: f[7].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

const PALETTE: [&str; 6] = [
    "#4477aa", "#ee6677", "#228833", "#ccbb44", "#66ccee", "#aa3377",
];

/// Grouped bar chart of one metric: a group per condition, a bar per model.
pub fn metric_svg(reports: &[MetricsReport], metric: &str) -> Result<String> {
    let mut groups: Vec<String> = Vec::new();
    let mut models: Vec<String> = Vec::new();
    for r in reports {
        if !groups.contains(&r.condition) {
            groups.push(r.condition.clone());
        }
        if !models.contains(&r.model) {
            models.push(r.model.clone());
        }
    }
    let value = |g: &str, m: &str| {
        reports
            .iter()
            .find(|r| r.condition == g && r.model == m)
            .and_then(|r| r.metric(metric))
    };
    if reports.first().and_then(|r| r.metric(metric)).is_none() {
        return Err(Error::Invalid(format!("unknown metric {metric:?}")));
    }
    let top = reports
        .iter()
        .filter_map(|r| r.metric(metric))
        .fold(0.0f64, f64::max)
        .max(1e-12);
    let (bar, gap, plot_h, left, base) = (28.0, 24.0, 200.0, 50.0, 240.0);
    let group_w = bar * models.len() as f64 + gap;
    let width = left + group_w * groups.len() as f64 + 20.0 + 110.0;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="280" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(
        s,
        r#"<text x="{left}" y="20" font-size="14">{}</text>"#,
        escape(metric)
    );
    let _ = writeln!(
        s,
        r#"<line x1="{left}" y1="{base}" x2="{:.1}" y2="{base}" stroke="black"/>"#,
        width - 110.0
    );
    let _ = writeln!(
        s,
        r#"<text x="4" y="{:.1}">{top:.3}</text>"#,
        base - plot_h + 4.0
    );
    for (gi, g) in groups.iter().enumerate() {
        let x0 = left + gap / 2.0 + gi as f64 * group_w;
        for (mi, m) in models.iter().enumerate() {
            if let Some(v) = value(g, m) {
                let h = plot_h * v.max(0.0) / top;
                let _ = writeln!(
                    s,
                    r#"<rect x="{:.1}" y="{:.1}" width="{bar}" height="{h:.1}" fill="{}"><title>{} {}: {v:.4}</title></rect>"#,
                    x0 + mi as f64 * bar,
                    base - h,
                    PALETTE[mi % PALETTE.len()],
                    escape(m),
                    escape(g)
                );
            }
        }
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            x0 + bar * models.len() as f64 / 2.0,
            base + 16.0,
            escape(g)
        );
    }
    for (mi, m) in models.iter().enumerate() {
        let y = 40.0 + 18.0 * mi as f64;
        let x = width - 100.0;
        let _ = writeln!(
            s,
            r#"<rect x="{x:.1}" y="{:.1}" width="10" height="10" fill="{}"/><text x="{:.1}" y="{y:.1}">{}</text>"#,
            y - 9.0,
            PALETTE[mi % PALETTE.len()],
            x + 14.0,
            escape(m)
        );
    }
    s.push_str("</svg>\n");
    Ok(s)
}

/// Line chart of `(x, y)` points, e.g. a loss curve.
pub fn line_svg(points: &[(f64, f64)], title: &str) -> Result<String> {
    if points.is_empty() || points.iter().any(|(x, y)| !x.is_finite() || !y.is_finite()) {
        return Err(Error::Invalid(format!(
            "{title}: need finite points to plot"
        )));
    }
    let (x0, x1) = points
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| {
            (a.min(p.0), b.max(p.0))
        });
    let (y0, y1) = points
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| {
            (a.min(p.1), b.max(p.1))
        });
    let (left, top, w, h) = (60.0, 30.0, 400.0, 200.0);
    let sx = |x: f64| left + w * (x - x0) / (x1 - x0).max(1e-12);
    let sy = |y: f64| top + h * (1.0 - (y - y0) / (y1 - y0).max(1e-12));
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="480" height="260" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(
        s,
        r#"<text x="{left}" y="20" font-size="14">{}</text>"#,
        escape(title)
    );
    let _ = writeln!(
        s,
        r#"<polyline fill="none" stroke="black" points="{left},{top} {left},{b} {r},{b}"/>"#,
        b = top + h,
        r = left + w
    );
    let _ = writeln!(s, r#"<text x="4" y="{:.1}">{y1:.4}</text>"#, top + 4.0);
    let _ = writeln!(s, r#"<text x="4" y="{:.1}">{y0:.4}</text>"#, top + h);
    let pts: Vec<String> = points
        .iter()
        .map(|&(x, y)| format!("{:.1},{:.1}", sx(x), sy(y)))
        .collect();
    let _ = writeln!(
        s,
        r##"<polyline fill="none" stroke="#4477aa" points="{}"/>"##,
        pts.join(" ")
    );
    s.push_str("</svg>\n");
    Ok(s)
}

/// Writes `metrics.csv` and one `<metric>.svg` per metric into `dir`.
pub fn emit_report(reports: &[MetricsReport], dir: &Path) -> Result<Vec<PathBuf>> {
    if reports.is_empty() {
        return Err(Error::Invalid("no reports to emit".into()));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::with_capacity(1 + METRICS.len());
    let csv = dir.join("metrics.csv");
    fs::write(&csv, reports_csv(reports)).map_err(|e| Error::io(&csv, e))?;
    written.push(csv);
    for m in METRICS {
        let path = dir.join(format!("{m}.svg"));
        fs::write(&path, metric_svg(reports, m)?).map_err(|e| Error::io(&path, e))?;
        written.push(path);
    }
    Ok(written)
}

/// Fixed-width table for terminals.
pub fn format_table(reports: &[MetricsReport]) -> String {
    let mut s = format!(
        "{:<10} {:<10} {:<8} {:>8} {:>8} {:>8} {:>8} {:>9}\n",
        "split", "condition", "model", "absRel", "sqRel", "RMSE", "delta1", "n_pixels"
    );
    for r in reports {
        let _ = writeln!(
            s,
            "{:<10} {:<10} {:<8} {:>8.4} {:>8.4} {:>8.4} {:>8.2} {:>9}",
            r.split, r.condition, r.model, r.abs_rel, r.sq_rel, r.rmse, r.delta1, r.n_pixels
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(data: &[f64]) -> DepthMap {
        DepthMap::new(1, data.len(), data.to_vec()).unwrap()
    }

    #[test]
    fn perfect_and_uniform_offsets() {
        let gt = map(&[1.0, 2.0, 5.0, 40.0]);
        let r = compute_metrics(&gt, &gt, EvalRange::default(), Scaling::None).unwrap();
        assert_eq!(
            (r.abs_rel, r.sq_rel, r.rmse, r.delta1),
            (0.0, 0.0, 0.0, 100.0)
        );
        let r = compute_metrics(&gt.scaled(1.1), &gt, EvalRange::default(), Scaling::None).unwrap();
        assert!((r.abs_rel - 0.1).abs() < 1e-12);
        assert_eq!(r.delta1, 100.0);
    }

    #[test]
    fn median_scale_cancels() {
        let gt = map(&[1.0, 3.0, 2.0, 7.0]);
        let valid = valid_mask(&gt, EvalRange::default());
        assert_eq!(median_scale(&gt.scaled(2.0), &gt, &valid).unwrap(), gt);
        assert_eq!(median_scale(&gt, &gt, &valid).unwrap(), gt);
        assert!(median_scale(&gt, &gt, &Mask::filled(1, 4, false)).is_err());
        assert!(median_scale(&map(&[0.0; 4]), &gt, &valid).is_err());
    }

    #[test]
    fn out_of_range_ground_truth_is_ignored_and_prediction_clamped() {
        let gt = map(&[0.05, 10.0, 100.0]);
        let pred = map(&[9.0, 200.0, 1.0]);
        let r = compute_metrics(&pred, &gt, EvalRange::default(), Scaling::None).unwrap();
        assert_eq!(r.n_pixels, 1);
        assert!((r.abs_rel - 7.0).abs() < 1e-12);
        assert!(compute_metrics(
            &pred,
            &map(&[0.0, 0.0, 99.0]),
            EvalRange::default(),
            Scaling::None
        )
        .is_err());
        assert!(compute_metrics(&map(&[1.0]), &gt, EvalRange::default(), Scaling::None).is_err());
    }

    #[test]
    fn csv_and_charts() {
        let gt = map(&[1.0, 2.0, 4.0]);
        let mut reports = Vec::new();
        for cond in ["day-clear", "night", "rain"] {
            for (model, s) in [("teacher", 1.2), ("student", 1.1)] {
                let r = compute_metrics(&gt.scaled(s), &gt, EvalRange::default(), Scaling::None)
                    .unwrap();
                reports.push(r.tagged("val", cond, model));
            }
        }
        let dir = tempfile::tempdir().unwrap();
        let files = emit_report(&reports, dir.path()).unwrap();
        assert_eq!(files.len(), 5);
        let rows = parse_reports_csv(&fs::read_to_string(&files[0]).unwrap()).unwrap();
        assert_eq!(rows.len(), 6);
        for (row, r) in rows.iter().zip(&reports) {
            for (v, m) in row.values.iter().zip(METRICS) {
                assert!((v - r.metric(m).unwrap()).abs() < 1e-9);
            }
        }
        let svg = fs::read_to_string(&files[1]).unwrap();
        assert!(svg.starts_with("<svg") && svg.contains("student") && svg.contains("night"));
        assert!(emit_report(&[], dir.path()).is_err());
    }
}
