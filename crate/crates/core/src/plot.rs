//! Self-contained SVG rendering of error-versus-budget curves on log-log axes.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::io::Read;

use serde::{Deserialize, Serialize};

use crate::baselines::{best_loss_bound, limit_curves};
use crate::error::{Error, Result};
use crate::harness::{aggregate, read_results, AGGREGATE_HEADER, RESULTS_HEADER};
use crate::model::NoiseModel;
use crate::posterior::LossKind;

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 520.0;
const LEFT: f64 = 80.0;
const RIGHT: f64 = 170.0;
const TOP: f64 = 30.0;
const BOTTOM: f64 = 60.0;
const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReferenceCurve {
    Sql,
    Hl,
    NoisyFloor,
    AppendixBound,
}

impl ReferenceCurve {
    pub fn label(self) -> &'static str {
        match self {
            ReferenceCurve::Sql => "sql",
            ReferenceCurve::Hl => "hl",
            ReferenceCurve::NoisyFloor => "noisy_floor",
            ReferenceCurve::AppendixBound => "appendix_bound",
        }
    }
}

impl std::str::FromStr for ReferenceCurve {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sql" => Ok(ReferenceCurve::Sql),
            "hl" => Ok(ReferenceCurve::Hl),
            "noisy_floor" | "noisy-floor" => Ok(ReferenceCurve::NoisyFloor),
            "appendix_bound" | "appendix-bound" | "bound" => Ok(ReferenceCurve::AppendixBound),
            other => Err(Error::Parse(format!("unknown reference curve '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotSpec {
    /// Aggregate column drawn on the y axis.
    pub y_column: String,
    pub references: Vec<ReferenceCurve>,
    pub noise: NoiseModel,
    /// Settings for the loss-bound curve.
    pub bound_exponent: f64,
    pub bound_epsilon: f64,
    pub depth_limit: u32,
}

impl Default for PlotSpec {
    fn default() -> Self {
        Self {
            y_column: "mae_mean".into(),
            references: Vec::new(),
            noise: NoiseModel::noiseless(),
            bound_exponent: 3.0,
            bound_epsilon: 1.0,
            depth_limit: 1 << 20,
        }
    }
}

impl PlotSpec {
    fn loss_kind(&self) -> LossKind {
        if self.y_column.starts_with("mse") {
            LossKind::SquaredError
        } else {
            LossKind::AbsoluteError
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeriesPoint {
    pub n_tot: u64,
    pub value: f64,
    pub bar: Option<(f64, f64)>,
}

pub type Series = BTreeMap<String, Vec<SeriesPoint>>;

/// Reads an aggregate or a results CSV and extracts one series per strategy.
pub fn load_series<R: Read>(mut reader: R, y_column: &str) -> Result<Series> {
    let mut text = String::new();
    reader.read_to_string(&mut text)?;
    let header: Vec<&str> = text.lines().next().unwrap_or("").split(',').map(str::trim).collect();
    let body = if header == RESULTS_HEADER {
        let results = read_results(text.as_bytes())?;
        if results.is_empty() {
            return Err(Error::Parse("input has no data rows".into()));
        }
        let mut buf = Vec::new();
        crate::harness::write_aggregate(&mut buf, &aggregate(&results)?)?;
        String::from_utf8(buf).map_err(|e| Error::Parse(e.to_string()))?
    } else {
        text
    };
    let mut r = csv::Reader::from_reader(body.as_bytes());
    let headers = r.headers().map_err(|e| Error::Parse(e.to_string()))?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let missing = |name: &str| Error::Parse(format!("input lacks column '{name}'"));
    let strategy_col = col("strategy").ok_or_else(|| missing("strategy"))?;
    let n_col = col("n_tot").ok_or_else(|| missing("n_tot"))?;
    let y_col = col(y_column).ok_or_else(|| missing(y_column))?;
    let bars = if headers.iter().eq(AGGREGATE_HEADER) && y_column.starts_with("mae") {
        Some((col("mae_min").unwrap(), col("mae_max").unwrap()))
    } else {
        None
    };

    let mut series = Series::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| Error::Parse(e.to_string()))?;
        let num = |i: usize| -> Result<f64> {
            rec.get(i)
                .and_then(|s| s.trim().parse().ok())
                .ok_or_else(|| Error::Parse(format!("bad numeric field in row {:?}", rec.position())))
        };
        let n_tot = rec
            .get(n_col)
            .and_then(|s| s.trim().parse().ok())
            .ok_or_else(|| Error::Parse("bad n_tot field".into()))?;
        let bar = match bars {
            Some((lo, hi)) => Some((num(lo)?, num(hi)?)),
            None => None,
        };
        series
            .entry(rec.get(strategy_col).unwrap_or("").to_string())
            .or_default()
            .push(SeriesPoint {
                n_tot,
                value: num(y_col)?,
                bar,
            });
    }
    if series.is_empty() {
        return Err(Error::Parse("input has no data rows".into()));
    }
    for pts in series.values_mut() {
        pts.sort_by_key(|p| p.n_tot);
    }
    Ok(series)
}

/// Values of a reference curve at the given budgets; budgets where the curve
/// is undefined are skipped.
pub fn reference_points(curve: ReferenceCurve, budgets: &[u64], spec: &PlotSpec) -> Vec<(u64, f64)> {
    let kind = spec.loss_kind();
    let convert = |mae: f64| match kind {
        // MAE references are sqrt(2/pi) sigma; the squared loss wants sigma^2.
        LossKind::SquaredError => mae * mae * std::f64::consts::PI / 2.0,
        LossKind::AbsoluteError => mae,
    };
    budgets
        .iter()
        .filter_map(|&n| {
            let c = limit_curves(n, spec.noise);
            let v = match curve {
                ReferenceCurve::Sql => Some(convert(c.sql)),
                ReferenceCurve::Hl => Some(convert(c.hl)),
                ReferenceCurve::NoisyFloor => c.noisy_floor.map(convert),
                ReferenceCurve::AppendixBound => best_loss_bound(
                    n,
                    spec.bound_exponent,
                    spec.bound_epsilon,
                    spec.noise,
                    spec.depth_limit,
                    kind,
                )
                .ok()
                .map(|b| b.0),
            };
            v.filter(|v| *v > 0.0 && v.is_finite()).map(|v| (n, v))
        })
        .collect()
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

struct Axes {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Axes {
    fn px(&self, n: f64) -> f64 {
        LEFT + (n.log10() - self.x0) / (self.x1 - self.x0) * (WIDTH - LEFT - RIGHT)
    }

    fn py(&self, v: f64) -> f64 {
        HEIGHT - BOTTOM - (v.log10() - self.y0) / (self.y1 - self.y0) * (HEIGHT - TOP - BOTTOM)
    }
}

fn decade_range(values: impl Iterator<Item = f64>) -> Option<(f64, f64)> {
    let (lo, hi) = values
        .filter(|v| *v > 0.0 && v.is_finite())
        .map(f64::log10)
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        return None;
    }
    let (mut lo, mut hi) = (lo.floor(), hi.ceil());
    if hi <= lo {
        lo -= 1.0;
        hi += 1.0;
    }
    Some((lo, hi))
}

/// Renders the series and requested reference curves as an SVG document.
pub fn render_svg(series: &Series, spec: &PlotSpec) -> Result<String> {
    let budgets: Vec<u64> = series
        .values()
        .flatten()
        .map(|p| p.n_tot)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let refs: Vec<(ReferenceCurve, Vec<(u64, f64)>)> = spec
        .references
        .iter()
        .map(|&c| (c, reference_points(c, &budgets, spec)))
        .collect();

    let ys = series
        .values()
        .flatten()
        .flat_map(|p| {
            let (lo, hi) = p.bar.unwrap_or((p.value, p.value));
            [p.value, lo, hi]
        })
        .chain(refs.iter().flat_map(|r| r.1.iter().map(|p| p.1)));
    let (x0, x1) = decade_range(budgets.iter().map(|&n| n as f64))
        .ok_or_else(|| Error::Parse("no positive budgets to plot".into()))?;
    let (y0, y1) = decade_range(ys).ok_or_else(|| Error::Parse("no positive values to plot".into()))?;
    let ax = Axes { x0, x1, y0, y1 };

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<?xml version="1.0" encoding="UTF-8"?>
<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">
<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#
    );
    let (xl, xr) = (LEFT, WIDTH - RIGHT);
    let (yt, yb) = (TOP, HEIGHT - BOTTOM);
    let _ = writeln!(
        s,
        r#"<rect class="frame" x="{xl}" y="{yt}" width="{}" height="{}" fill="none" stroke="black"/>"#,
        xr - xl,
        yb - yt
    );
    for k in (x0 as i32)..=(x1 as i32) {
        let x = ax.px(10f64.powi(k));
        let _ = writeln!(
            s,
            r##"<line class="tick" x1="{x:.2}" y1="{yb}" x2="{x:.2}" y2="{yt}" stroke="#dddddd"/><text x="{x:.2}" y="{:.2}" text-anchor="middle">1e{k}</text>"##,
            yb + 18.0
        );
    }
    for k in (y0 as i32)..=(y1 as i32) {
        let y = ax.py(10f64.powi(k));
        let _ = writeln!(
            s,
            r##"<line class="tick" x1="{xl}" y1="{y:.2}" x2="{xr}" y2="{y:.2}" stroke="#dddddd"/><text x="{:.2}" y="{:.2}" text-anchor="end">1e{k}</text>"##,
            xl - 6.0,
            y + 4.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">total unitary applications (n_tot)</text>"#,
        (xl + xr) / 2.0,
        HEIGHT - 15.0
    );
    let _ = writeln!(
        s,
        r#"<text x="18" y="{:.2}" text-anchor="middle" transform="rotate(-90 18 {:.2})">{}</text>"#,
        (yt + yb) / 2.0,
        (yt + yb) / 2.0,
        escape(&spec.y_column)
    );

    let mut legend_y = TOP + 10.0;
    let mut legend = |s: &mut String, color: &str, dashed: bool, label: &str| {
        let dash = if dashed { r#" stroke-dasharray="6,4""# } else { "" };
        let _ = writeln!(
            s,
            r#"<line x1="{:.2}" y1="{legend_y:.2}" x2="{:.2}" y2="{legend_y:.2}" stroke="{color}" stroke-width="2"{dash}/><text x="{:.2}" y="{:.2}">{}</text>"#,
            xr + 12.0,
            xr + 36.0,
            xr + 42.0,
            legend_y + 4.0,
            escape(label)
        );
        legend_y += 18.0;
    };

    for (i, (name, pts)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let drawable: Vec<&SeriesPoint> = pts.iter().filter(|p| p.value > 0.0 && p.value.is_finite()).collect();
        let coords: Vec<String> = drawable
            .iter()
            .map(|p| format!("{:.2},{:.2}", ax.px(p.n_tot as f64), ax.py(p.value)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline class="series" data-strategy="{}" points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
            escape(name),
            coords.join(" ")
        );
        for p in &drawable {
            let x = ax.px(p.n_tot as f64);
            let _ = writeln!(
                s,
                r#"<circle cx="{x:.2}" cy="{:.2}" r="3" fill="{color}"/>"#,
                ax.py(p.value)
            );
            if let Some((lo, hi)) = p.bar {
                if lo > 0.0 && hi > 0.0 {
                    let _ = writeln!(
                        s,
                        r#"<line class="errorbar" x1="{x:.2}" y1="{:.2}" x2="{x:.2}" y2="{:.2}" stroke="{color}"/>"#,
                        ax.py(lo),
                        ax.py(hi)
                    );
                }
            }
        }
        legend(&mut s, color, false, name);
    }
    for (curve, pts) in &refs {
        if pts.is_empty() {
            continue;
        }
        let coords: Vec<String> = pts
            .iter()
            .map(|&(n, v)| format!("{:.2},{:.2}", ax.px(n as f64), ax.py(v)))
            .collect();
        let _ = writeln!(
            s,
            r##"<polyline class="reference" data-curve="{}" points="{}" fill="none" stroke="#555555" stroke-width="1.5" stroke-dasharray="6,4"/>"##,
            curve.label(),
            coords.join(" ")
        );
        legend(&mut s, "#555555", true, curve.label());
    }
    s.push_str("</svg>\n");
    Ok(s)
}
