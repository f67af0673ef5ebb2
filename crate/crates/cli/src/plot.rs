//! Standalone SVG charts. Each file carries its plotted numbers as CSV in a
//! `<metadata>` block so the figure can be re-read without the run directory.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::manifest::{METRICS_FILE, REGRET_FILE};
use crate::{CliError, Result};

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 360.0;
const MARGIN: f64 = 48.0;
const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

/// One run's metrics columns; missing cells are NaN.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Series {
    pub label: String,
    pub rounds: Vec<f64>,
    pub j_running: Vec<f64>,
    pub kl_error: Vec<f64>,
    pub regret_gap: Vec<f64>,
}

/// Reads `regret.csv` when present, else `metrics.csv`.
pub fn read_series(dir: &Path) -> Result<Series> {
    let path = [REGRET_FILE, METRICS_FILE].iter().map(|f| dir.join(f)).find(|p| p.exists());
    let path = path.ok_or_else(|| CliError::Usage(format!("{}: no metrics.csv", dir.display())))?;
    let mut reader = csv::Reader::from_path(&path)?;
    let headers = reader.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name).ok_or_else(|| CliError::Usage(format!("{}: no `{name}` column", path.display())));
    let (round, variant, j, kl, gap) = (col("round")?, col("variant")?, col("J_running")?, col("kl_error")?, col("regret_gap")?);
    let mut s = Series::default();
    for row in reader.records() {
        let row = row?;
        let num = |i: usize| row.get(i).and_then(|v| v.parse::<f64>().ok()).unwrap_or(f64::NAN);
        if s.label.is_empty() {
            let name = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            s.label = format!("{} ({name})", row.get(variant).unwrap_or(""));
        }
        s.rounds.push(num(round));
        s.j_running.push(num(j));
        s.kl_error.push(num(kl));
        s.regret_gap.push(num(gap));
    }
    Ok(s)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kind {
    Line,
    Bar,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn data_table(series: &[(&str, &[f64], &[f64])]) -> String {
    let mut out = String::from("series,round,value\n");
    for (label, xs, ys) in series {
        for (x, y) in xs.iter().zip(*ys) {
            let y = if y.is_finite() { format!("{y:?}") } else { String::new() };
            let _ = writeln!(out, "\"{}\",{x},{y}", label.replace('"', "\"\""));
        }
    }
    out
}

/// Renders one chart; `series` is `(label, rounds, values)`. Non-finite values are gaps.
pub fn render(title: &str, y_label: &str, kind: Kind, series: &[(&str, &[f64], &[f64])]) -> String {
    let finite = || series.iter().flat_map(|(_, xs, ys)| xs.iter().zip(ys.iter())).filter(|(x, y)| x.is_finite() && y.is_finite());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, 0.0f64, f64::NEG_INFINITY);
    for (x, y) in finite() {
        x0 = x0.min(*x);
        x1 = x1.max(*x);
        y0 = y0.min(*y);
        y1 = y1.max(*y);
    }
    if !x0.is_finite() {
        (x0, x1, y1) = (0.0, 1.0, 1.0);
    }
    if kind == Kind::Bar {
        x0 -= 0.5;
        x1 += 0.5;
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    if y1 <= y0 {
        y1 = y0 + 1.0;
    }
    let (pw, ph) = (WIDTH - 2.0 * MARGIN, HEIGHT - 2.0 * MARGIN);
    let px = |x: f64| MARGIN + (x - x0) / (x1 - x0) * pw;
    let py = |y: f64| HEIGHT - MARGIN - (y - y0) / (y1 - y0) * ph;

    let mut svg = String::new();
    let _ = writeln!(svg, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">"#);
    let _ = writeln!(svg, "<title>{}</title>", escape(title));
    let _ = writeln!(svg, "<metadata><![CDATA[\n{}]]></metadata>", data_table(series));
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(svg, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#, WIDTH / 2.0, escape(title));
    let _ = writeln!(
        svg,
        r#"<path d="M{MARGIN},{MARGIN}V{b}H{r}" fill="none" stroke="black"/>"#,
        b = HEIGHT - MARGIN,
        r = WIDTH - MARGIN
    );
    for i in 0..=4 {
        let y = y0 + (y1 - y0) * i as f64 / 4.0;
        let _ = writeln!(svg, r#"<text x="{}" y="{:.1}" text-anchor="end">{:.3}</text>"#, MARGIN - 4.0, py(y) + 4.0, y);
    }
    let _ = writeln!(svg, r#"<text x="{:.1}" y="{}" text-anchor="middle">round</text>"#, WIDTH / 2.0, HEIGHT - 12.0);
    let _ = writeln!(svg, r#"<text transform="translate(12,{:.1}) rotate(-90)" text-anchor="middle">{}</text>"#, HEIGHT / 2.0, escape(y_label));
    let _ = writeln!(svg, r#"<text x="{MARGIN}" y="{:.1}">{x0:.0}</text><text x="{:.1}" y="{:.1}" text-anchor="end">{x1:.0}</text>"#, HEIGHT - MARGIN + 14.0, WIDTH - MARGIN, HEIGHT - MARGIN + 14.0);

    let groups = series.len().max(1) as f64;
    for (k, (label, xs, ys)) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        match kind {
            Kind::Line => {
                let mut d = String::new();
                let mut pen_down = false;
                for (x, y) in xs.iter().zip(ys.iter()) {
                    if x.is_finite() && y.is_finite() {
                        let _ = write!(d, "{}{:.2},{:.2}", if pen_down { "L" } else { "M" }, px(*x), py(*y));
                        pen_down = true;
                    } else {
                        pen_down = false;
                    }
                }
                let _ = writeln!(svg, r#"<path d="{d}" fill="none" stroke="{color}" stroke-width="1.5"/>"#);
            }
            Kind::Bar => {
                let slot = pw / (x1 - x0) * 0.8 / groups;
                for (x, y) in xs.iter().zip(ys.iter()).filter(|(x, y)| x.is_finite() && y.is_finite()) {
                    let left = px(*x) - slot * groups / 2.0 + slot * k as f64;
                    let (top, base) = (py(y.max(0.0)), py(y.min(0.0)));
                    let _ = writeln!(svg, r#"<rect x="{left:.2}" y="{top:.2}" width="{slot:.2}" height="{:.2}" fill="{color}"/>"#, base - top);
                }
            }
        }
        let ly = MARGIN + 14.0 * k as f64;
        let _ = writeln!(svg, r#"<rect x="{:.1}" y="{:.1}" width="10" height="10" fill="{color}"/><text x="{:.1}" y="{:.1}">{}</text>"#, WIDTH - MARGIN - 150.0, ly - 9.0, WIDTH - MARGIN - 136.0, ly, escape(label));
    }
    svg.push_str("</svg>\n");
    svg
}

/// Writes `running_cost.svg`, plus `kl_error.svg` and `regret_gap.svg` when
/// any run has those columns. Returns the written paths.
pub fn plot_runs(dirs: &[PathBuf], out: &Path) -> Result<Vec<PathBuf>> {
    let runs = dirs.iter().map(|d| read_series(d)).collect::<Result<Vec<_>>>()?;
    let pick = |f: fn(&Series) -> &Vec<f64>| runs.iter().map(|s| (s.label.as_str(), s.rounds.as_slice(), f(s).as_slice())).collect::<Vec<_>>();
    type Column = fn(&Series) -> &Vec<f64>;
    let charts: [(&str, &str, &str, Kind, Column); 3] = [
        ("running_cost.svg", "Running policy cost", "J running", Kind::Line, |s| &s.j_running),
        ("kl_error.svg", "Model error on the data distribution", "KL", Kind::Line, |s| &s.kl_error),
        ("regret_gap.svg", "Hindsight regret gap per round", "gap", Kind::Bar, |s| &s.regret_gap),
    ];
    let mut written = Vec::new();
    for (file, title, y_label, kind, field) in charts {
        let series = pick(field);
        if series.iter().all(|(_, _, ys)| ys.iter().all(|y| !y.is_finite())) {
            continue;
        }
        let path = out.join(file);
        fs::write(&path, render(title, y_label, kind, &series))?;
        written.push(path);
    }
    Ok(written)
}
