//! Static SVG plots and markdown tables from run artifacts: code usage by
//! window class, loss curves, and the ROC curve of test scores.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::downstream::{auc, ScoreRow};
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::theory::argmax;

/// Occurrence probability of each code among context windows followed by a
/// normal or an anomalous window, normalized within each class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CodeUsageRow {
    pub code: usize,
    pub normal: f64,
    pub anomaly: f64,
}

/// Counts the dominant code of every patch of the pooled features
/// (`P·K` per window).
pub fn code_usage_by_class(features: &[Vec<f64>], labels: &[u8], codes: usize) -> Result<Vec<CodeUsageRow>> {
    if codes == 0 || features.len() != labels.len() {
        return Err(Error::InvalidArgument("features, labels and code count disagree".into()));
    }
    let mut counts = [vec![0.0; codes], vec![0.0; codes]];
    for (f, &y) in features.iter().zip(labels) {
        if f.len() % codes != 0 {
            return Err(Error::shape("code_usage_by_class", format!("{} features for {codes} codes", f.len())));
        }
        for patch in f.chunks(codes) {
            counts[usize::from(y == 1)][argmax(patch)] += 1.0;
        }
    }
    for c in counts.iter_mut() {
        let total: f64 = c.iter().sum();
        if total > 0.0 {
            c.iter_mut().for_each(|x| *x /= total);
        }
    }
    Ok((0..codes)
        .map(|k| CodeUsageRow {
            code: k,
            normal: counts[0][k],
            anomaly: counts[1][k],
        })
        .collect())
}

/// Codes ordered by `anomaly − normal`, largest first; ties keep code order.
pub fn sort_by_gap(rows: &mut [CodeUsageRow]) {
    rows.sort_by(|a, b| (b.anomaly - b.normal).total_cmp(&(a.anomaly - a.normal)).then(a.code.cmp(&b.code)));
}

pub fn to_csv<T: Serialize>(rows: &[T]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Data(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Data(e.to_string()))
}

pub fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// `(FPR, TPR)` points from the highest threshold down, starting at (0,0).
pub fn roc_curve(scores: &[f64], labels: &[u8]) -> Vec<(f64, f64)> {
    let pos = labels.iter().filter(|&&y| y == 1).count() as f64;
    let neg = labels.len() as f64 - pos;
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut pts = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0.0, 0.0);
    let mut i = 0;
    while i < idx.len() {
        let s = scores[idx[i]];
        while i < idx.len() && scores[idx[i]] == s {
            if labels[idx[i]] == 1 {
                tp += 1.0;
            } else {
                fp += 1.0;
            }
            i += 1;
        }
        pts.push((
            if neg > 0.0 { fp / neg } else { 0.0 },
            if pos > 0.0 { tp / pos } else { 0.0 },
        ));
    }
    pts
}

/// Training log as written by the trainer: `(step, total)` per step and
/// `(step, val_total)` at epoch ends.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossCurves {
    pub train: Vec<(f64, f64)>,
    pub val: Vec<(f64, f64)>,
}

pub fn read_log(path: &Path) -> Result<LossCurves> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let h = r.headers()?.clone();
    let col = |name: &str| {
        h.iter()
            .position(|c| c == name)
            .ok_or_else(|| Error::Data(format!("log is missing column `{name}`")))
    };
    let (step, total, val) = (col("step")?, col("total")?, col("val_total")?);
    let mut out = LossCurves::default();
    for rec in r.records() {
        let rec = rec?;
        let num = |i: usize| -> Result<f64> {
            rec[i].parse().map_err(|_| Error::Data(format!("bad number {:?} in log", &rec[i])))
        };
        let s = num(step)?;
        out.train.push((s, num(total)?));
        if !rec[val].is_empty() {
            out.val.push((s, num(val)?));
        }
    }
    Ok(out)
}

const W: f64 = 640.0;
const H: f64 = 400.0;
const PAD: f64 = 50.0;

fn svg_open(title: &str) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" font-family=\"sans-serif\" font-size=\"12\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">{}</text>\n",
        W / 2.0,
        escape(title)
    )
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn axes(svg: &mut String, x_label: &str, y_label: &str, (x0, x1): (f64, f64), (y0, y1): (f64, f64)) {
    let _ = writeln!(
        svg,
        "<line x1=\"{PAD}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>\n\
         <line x1=\"{PAD}\" y1=\"{PAD}\" x2=\"{PAD}\" y2=\"{b}\" stroke=\"black\"/>\n\
         <text x=\"{cx}\" y=\"{ly}\" text-anchor=\"middle\">{xl}</text>\n\
         <text x=\"14\" y=\"{cy}\" text-anchor=\"middle\" transform=\"rotate(-90 14 {cy})\">{yl}</text>\n\
         <text x=\"{PAD}\" y=\"{ty}\" text-anchor=\"middle\">{x0:.3}</text>\n\
         <text x=\"{r}\" y=\"{ty}\" text-anchor=\"middle\">{x1:.3}</text>\n\
         <text x=\"{lx}\" y=\"{b}\" text-anchor=\"end\">{y0:.3}</text>\n\
         <text x=\"{lx}\" y=\"{t}\" text-anchor=\"end\">{y1:.3}</text>",
        b = H - PAD,
        r = W - PAD,
        t = PAD + 4.0,
        cx = W / 2.0,
        cy = H / 2.0,
        ly = H - 12.0,
        ty = H - PAD + 16.0,
        lx = PAD - 4.0,
        xl = escape(x_label),
        yl = escape(y_label),
    );
}

fn span(vals: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        (0.0, 1.0)
    } else if hi > lo {
        (lo, hi)
    } else {
        (lo - 0.5, hi + 0.5)
    }
}

/// `(label, colour, points)`.
pub type Series<'a> = (&'a str, &'a str, &'a [(f64, f64)]);

/// Line chart of one or more series.
pub fn line_chart(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let xs = span(series.iter().flat_map(|s| s.2.iter().map(|p| p.0)));
    let ys = span(series.iter().flat_map(|s| s.2.iter().map(|p| p.1)));
    line_chart_in(title, x_label, y_label, series, xs, ys)
}

fn line_chart_in(
    title: &str,
    x_label: &str,
    y_label: &str,
    series: &[Series],
    xs: (f64, f64),
    ys: (f64, f64),
) -> String {
    let mut svg = svg_open(title);
    axes(&mut svg, x_label, y_label, xs, ys);
    let px = |x: f64| PAD + (x - xs.0) / (xs.1 - xs.0) * (W - 2.0 * PAD);
    let py = |y: f64| H - PAD - (y - ys.0) / (ys.1 - ys.0) * (H - 2.0 * PAD);
    for (i, (label, colour, pts)) in series.iter().enumerate() {
        let path: Vec<String> = pts.iter().map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y))).collect();
        let _ = writeln!(
            svg,
            "<polyline fill=\"none\" stroke=\"{colour}\" stroke-width=\"1.5\" points=\"{}\"/>\n\
             <text x=\"{}\" y=\"{}\" fill=\"{colour}\">{}</text>",
            path.join(" "),
            W - PAD - 120.0,
            PAD + 16.0 * (i as f64 + 1.0),
            escape(label)
        );
    }
    svg.push_str("</svg>\n");
    svg
}

pub fn roc_svg(scores: &[f64], labels: &[u8]) -> String {
    let pts = roc_curve(scores, labels);
    let title = match auc(scores, labels) {
        Some(a) => format!("ROC (AUC {a:.3})"),
        None => "ROC (AUC undefined: one class)".into(),
    };
    let diag = [(0.0, 0.0), (1.0, 1.0)];
    line_chart_in(
        &title,
        "false positive rate",
        "true positive rate",
        &[("model", "#1f77b4", &pts), ("chance", "#999999", &diag)],
        (0.0, 1.0),
        (0.0, 1.0),
    )
}

/// Paired bars per code, in the given order.
pub fn usage_svg(rows: &[CodeUsageRow]) -> String {
    let mut svg = svg_open("Code usage: normal vs pre-anomaly windows");
    let top = rows.iter().map(|r| r.normal.max(r.anomaly)).fold(0.0, f64::max).max(1e-12);
    axes(&mut svg, "code (sorted by anomaly − normal)", "occurrence probability", (0.0, rows.len() as f64), (0.0, top));
    let slot = (W - 2.0 * PAD) / rows.len().max(1) as f64;
    let bar = slot * 0.4;
    for (i, r) in rows.iter().enumerate() {
        let x = PAD + i as f64 * slot + slot * 0.1;
        for (j, (v, colour)) in [(r.normal, "#1f77b4"), (r.anomaly, "#d62728")].into_iter().enumerate() {
            let h = v / top * (H - 2.0 * PAD);
            let _ = writeln!(
                svg,
                "<rect x=\"{:.2}\" y=\"{:.2}\" width=\"{bar:.2}\" height=\"{h:.2}\" fill=\"{colour}\"><title>code {} {}: {v:.4}</title></rect>",
                x + j as f64 * bar,
                H - PAD - h,
                r.code,
                if j == 0 { "normal" } else { "anomaly" },
            );
        }
    }
    let _ = writeln!(
        svg,
        "<text x=\"{x}\" y=\"{y1}\" fill=\"#1f77b4\">normal</text>\n<text x=\"{x}\" y=\"{y2}\" fill=\"#d62728\">anomaly</text>",
        x = W - PAD - 80.0,
        y1 = PAD + 16.0,
        y2 = PAD + 32.0
    );
    svg.push_str("</svg>\n");
    svg
}

/// Inputs to [`write_report`]; every part is optional.
#[derive(Clone, Debug, Default)]
pub struct ReportInputs {
    pub log: Option<LossCurves>,
    pub scores: Option<Vec<ScoreRow>>,
    pub usage: Option<Vec<CodeUsageRow>>,
}

/// Writes the available plots and `report.md` into `dir`; returns the files written.
pub fn write_report(inputs: &ReportInputs, dir: &Path) -> Result<Vec<String>> {
    std::fs::create_dir_all(dir).map_err(|source| Error::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut files = Vec::new();
    let mut md = String::from("# Run report\n");
    let put = |name: &str, body: String, files: &mut Vec<String>| -> Result<()> {
        write_atomic(&dir.join(name), body.as_bytes())?;
        files.push(name.to_string());
        Ok(())
    };
    if let Some(log) = &inputs.log {
        let svg = line_chart(
            "Loss curves",
            "step",
            "total loss",
            &[("train", "#1f77b4", &log.train), ("validation", "#ff7f0e", &log.val)],
        );
        put("loss_curves.svg", svg, &mut files)?;
        let _ = writeln!(md, "\n## Loss\n\n![loss](loss_curves.svg)\n\n| | first | last |\n|---|---|---|");
        for (name, pts) in [("train", &log.train), ("validation", &log.val)] {
            if let (Some(a), Some(b)) = (pts.first(), pts.last()) {
                let _ = writeln!(md, "| {name} | {:.4} | {:.4} |", a.1, b.1);
            }
        }
    }
    if let Some(rows) = &inputs.scores {
        let scores: Vec<f64> = rows.iter().map(|r| r.score).collect();
        let labels: Vec<u8> = rows.iter().map(|r| r.label).collect();
        put("roc.svg", roc_svg(&scores, &labels), &mut files)?;
        let a = auc(&scores, &labels).map_or("undefined".to_string(), |a| format!("{a:.4}"));
        let pos = labels.iter().filter(|&&y| y == 1).count();
        let _ = writeln!(
            md,
            "\n## Scores\n\n![roc](roc.svg)\n\n| windows | positives | AUC |\n|---|---|---|\n| {} | {pos} | {a} |",
            rows.len()
        );
    }
    if let Some(usage) = &inputs.usage {
        let mut sorted = usage.clone();
        sort_by_gap(&mut sorted);
        put("code_usage.svg", usage_svg(&sorted), &mut files)?;
        let _ = writeln!(md, "\n## Code usage\n\n![usage](code_usage.svg)\n\n| code | normal | anomaly | gap |\n|---|---|---|---|");
        for r in &sorted {
            let _ = writeln!(md, "| {} | {:.4} | {:.4} | {:+.4} |", r.code, r.normal, r.anomaly, r.anomaly - r.normal);
        }
    }
    put("report.md", md, &mut files)?;
    Ok(files)
}
