//! Minimal SVG charts from the CSV files the harness writes.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::{HarnessError, VERSION};

const W: f64 = 640.0;
const H: f64 = 360.0;
const MARGIN: f64 = 48.0;

struct Table {
    /// Leading `#` line of the source, if any.
    tag: Option<String>,
    header: Vec<String>,
    rows: Vec<(u64, Vec<String>)>,
}

fn read_table(path: &Path) -> Result<Table, HarnessError> {
    let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
    let tag = text
        .lines()
        .next()
        .and_then(|l| l.strip_prefix('#'))
        .map(|l| l.trim().to_string());
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    let bad = |line: u64, msg: String| HarnessError::Input(format!("{}:{line}: {msg}", path.display()));
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| bad(e.position().map_or(0, |p| p.line()), e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    if header.iter().all(|h| h.is_empty()) {
        return Err(bad(1, "no header".into()));
    }
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| bad(e.position().map_or(0, |p| p.line()), e.to_string()))?;
        let line = rec.position().map_or(0, |p| p.line());
        rows.push((line, rec.iter().map(str::to_string).collect()));
    }
    if rows.is_empty() {
        return Err(bad(1, "no data rows".into()));
    }
    Ok(Table { tag, header, rows })
}

fn column(t: &Table, path: &Path, idx: usize) -> Result<Vec<f64>, HarnessError> {
    t.rows
        .iter()
        .map(|(line, r)| {
            r[idx].trim().parse::<f64>().map_err(|_| {
                HarnessError::Input(format!(
                    "{}:{line}: column `{}` is not numeric: `{}`",
                    path.display(),
                    t.header[idx],
                    r[idx]
                ))
            })
        })
        .collect()
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn frame(title: &str) -> String {
    let mut s = String::new();
    let _ = write!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="11">
<rect width="100%" height="100%" fill="white"/>
<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>
<line x1="{MARGIN}" y1="{}" x2="{}" y2="{}" stroke="black"/>
<line x1="{MARGIN}" y1="{MARGIN}" x2="{MARGIN}" y2="{}" stroke="black"/>
"#,
        W / 2.0,
        esc(title),
        H - MARGIN,
        W - MARGIN,
        H - MARGIN,
        H - MARGIN
    );
    s
}

fn y_range(vals: &[f64]) -> (f64, f64) {
    let lo = vals.iter().cloned().fold(0.0f64, f64::min);
    let hi = vals.iter().cloned().fold(0.0f64, f64::max);
    if hi - lo < 1e-12 {
        (lo, lo + 1.0)
    } else {
        (lo, hi)
    }
}

fn y_axis(s: &mut String, lo: f64, hi: f64) {
    for k in 0..=4 {
        let v = lo + (hi - lo) * k as f64 / 4.0;
        let y = H - MARGIN - (H - 2.0 * MARGIN) * k as f64 / 4.0;
        let _ = writeln!(s, r#"<text x="{}" y="{y:.1}" text-anchor="end">{v:.3}</text>"#, MARGIN - 4.0);
    }
}

/// Bar chart with optional error bars.
pub(crate) fn bar_chart(title: &str, labels: &[String], values: &[f64], errs: Option<&[f64]>) -> String {
    let tops: Vec<f64> = match errs {
        Some(e) => values.iter().zip(e).map(|(v, e)| v + e).collect(),
        None => values.to_vec(),
    };
    let (lo, hi) = y_range(&tops);
    let plot_h = H - 2.0 * MARGIN;
    let y_of = |v: f64| H - MARGIN - plot_h * (v - lo) / (hi - lo);
    let mut s = frame(title);
    y_axis(&mut s, lo, hi);
    let slot = (W - 2.0 * MARGIN) / values.len().max(1) as f64;
    for (i, (&v, label)) in values.iter().zip(labels).enumerate() {
        let x = MARGIN + slot * i as f64 + slot * 0.15;
        let (y0, y1) = (y_of(0.0), y_of(v));
        let (top, height) = (y0.min(y1), (y0 - y1).abs());
        let _ = writeln!(
            s,
            r##"<rect x="{x:.1}" y="{top:.1}" width="{:.1}" height="{height:.1}" fill="#4a7fb5"/>"##,
            slot * 0.7
        );
        if let Some(e) = errs {
            let cx = x + slot * 0.35;
            let _ = writeln!(
                s,
                r#"<line x1="{cx:.1}" y1="{:.1}" x2="{cx:.1}" y2="{:.1}" stroke="black"/>"#,
                y_of(v - e[i]),
                y_of(v + e[i])
            );
        }
        if values.len() <= 40 {
            let _ = writeln!(
                s,
                r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
                x + slot * 0.35,
                H - MARGIN + 14.0,
                esc(label)
            );
        }
    }
    s.push_str("</svg>\n");
    s
}

/// Polyline of `ys` against `xs`.
pub(crate) fn line_chart(title: &str, xs: &[f64], ys: &[f64]) -> String {
    let (lo, hi) = y_range(ys);
    let x_lo = xs.iter().cloned().fold(f64::INFINITY, f64::min);
    let x_hi = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max).max(x_lo + 1.0);
    let mut s = frame(title);
    y_axis(&mut s, lo, hi);
    let pts: Vec<String> = xs
        .iter()
        .zip(ys)
        .map(|(x, y)| {
            let px = MARGIN + (W - 2.0 * MARGIN) * (x - x_lo) / (x_hi - x_lo);
            let py = H - MARGIN - (H - 2.0 * MARGIN) * (y - lo) / (hi - lo);
            format!("{px:.1},{py:.1}")
        })
        .collect();
    let _ = writeln!(
        s,
        r##"<polyline fill="none" stroke="#c0392b" stroke-width="1.5" points="{}"/>"##,
        pts.join(" ")
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">step</text>"#,
        W / 2.0,
        H - 12.0
    );
    s.push_str("</svg>\n");
    s
}

/// Renders SVG charts for a harness CSV: a gamma trace for step traces,
/// one bar chart per metric otherwise. Returns the files written.
pub fn emit_plots(csv_path: &Path, out_dir: &Path) -> Result<Vec<PathBuf>, HarnessError> {
    let t = read_table(csv_path)?;
    std::fs::create_dir_all(out_dir).map_err(|e| HarnessError::io(out_dir, e))?;
    let stem = csv_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "plot".into());
    let mut charts: Vec<(String, String)> = Vec::new();

    if t.header[0] == "step" {
        let xs = column(&t, csv_path, 0)?;
        let gi = t.header.iter().position(|h| h == "gamma").ok_or_else(|| {
            HarnessError::Input(format!("{}:1: trace has no `gamma` column", csv_path.display()))
        })?;
        let ys = column(&t, csv_path, gi)?;
        charts.push((format!("{stem}_gamma.svg"), line_chart("tracking quality per step", &xs, &ys)));
    } else {
        let summary = t.header.iter().any(|h| h.ends_with("_mean"));
        let seed_col = t.header.iter().position(|h| h == "seed");
        let mut groups: Vec<String> = Vec::new();
        for (_, r) in &t.rows {
            if !groups.contains(&r[0]) {
                groups.push(r[0].clone());
            }
        }
        let per_row = !summary && groups.len() == 1;
        let labels: Vec<String> = if per_row {
            t.rows
                .iter()
                .map(|(_, r)| seed_col.map_or_else(|| r[0].clone(), |c| format!("s{}", r[c])))
                .collect()
        } else {
            groups.clone()
        };
        for (idx, name) in t.header.iter().enumerate().skip(1) {
            if Some(idx) == seed_col || name == "episodes" || name.ends_with("_std") {
                continue;
            }
            let vals = column(&t, csv_path, idx)?;
            let metric = name.trim_end_matches("_mean");
            let svg = if summary {
                let std_idx = t.header.iter().position(|h| *h == format!("{metric}_std"));
                let errs = match std_idx {
                    Some(j) => Some(column(&t, csv_path, j)?),
                    None => None,
                };
                bar_chart(metric, &labels, &vals, errs.as_deref())
            } else if per_row {
                bar_chart(metric, &labels, &vals, None)
            } else {
                let means: Vec<f64> = groups
                    .iter()
                    .map(|g| {
                        let sel: Vec<f64> = t
                            .rows
                            .iter()
                            .zip(&vals)
                            .filter(|((_, r), _)| &r[0] == g)
                            .map(|(_, v)| *v)
                            .collect();
                        sel.iter().sum::<f64>() / sel.len() as f64
                    })
                    .collect();
                bar_chart(metric, &labels, &means, None)
            };
            charts.push((format!("{stem}_{metric}.svg"), svg));
        }
    }

    let tag = match &t.tag {
        Some(src) => format!("<!-- {} (plotted by activis {VERSION}) -->", src.replace("--", "-")),
        None => format!("<!-- plotted by activis {VERSION} -->"),
    };
    let mut written = Vec::with_capacity(charts.len());
    for (name, svg) in charts {
        let svg = svg.replacen(">\n", &format!(">\n{tag}\n"), 1);
        let p = out_dir.join(name);
        std::fs::write(&p, svg).map_err(|e| HarnessError::io(&p, e))?;
        written.push(p);
    }
    Ok(written)
}
