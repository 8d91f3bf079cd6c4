//! Static SVG figures from sweep result tables.
//!
//! Three figure families: the response-time/energy trade-off scatter with
//! two-axis error bars, grouped bars across a sweep variable, and
//! policy-fraction lines against the sweep variable. Output is deterministic
//! byte-for-byte for a given input CSV: rows are grouped through ordered
//! maps and floats are formatted with fixed precision.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::runs::CliError;

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f",
];

const W: f64 = 640.0;
const H: f64 = 420.0;
const ML: f64 = 70.0; // margins
const MR: f64 = 160.0;
const MT: f64 = 28.0;
const MB: f64 = 56.0;

struct Table {
    headers: Vec<String>,
    rows: Vec<Vec<String>>,
    provenance: String,
}

impl Table {
    fn col(&self, name: &str) -> Result<usize, CliError> {
        self.headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| CliError::new(1, format!("input CSV is missing column `{name}`")))
    }

    fn f64_at(&self, row: &[String], col: usize) -> f64 {
        row[col].parse().unwrap_or(f64::NAN)
    }
}

fn read_table(path: &Path) -> Result<Table, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::new(1, format!("cannot read {}: {e}", path.display())))?;
    let provenance = text
        .lines()
        .find(|l| l.starts_with('#'))
        .unwrap_or("")
        .to_string();
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    let headers: Vec<String> = rdr
        .headers()
        .map_err(|e| CliError::new(1, format!("csv: {e}")))?
        .iter()
        .map(|s| s.to_string())
        .collect();
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| CliError::new(1, format!("csv: {e}")))?;
        rows.push(rec.iter().map(|s| s.to_string()).collect());
    }
    if rows.is_empty() {
        return Err(CliError::new(1, "no rows in input CSV".to_string()));
    }
    Ok(Table {
        headers,
        rows,
        provenance,
    })
}

pub fn cmd_plot(input: &Path, kind: &str, out_dir: &Path) -> Result<(), CliError> {
    let table = read_table(input)?;
    std::fs::create_dir_all(out_dir)?;
    let written = match kind {
        "tradeoff" => vec![plot_tradeoff(&table, out_dir)?],
        "scalability" => plot_scalability(&table, out_dir)?,
        "policy" => vec![plot_policy(&table, out_dir)?],
        other => {
            return Err(CliError::new(
                1,
                format!("unknown plot kind `{other}`; valid: tradeoff, scalability, policy"),
            ))
        }
    };
    for name in written {
        println!("wrote {}", out_dir.join(name).display());
    }
    Ok(())
}

struct Svg {
    body: String,
}

impl Svg {
    fn new(provenance: &str, title: &str) -> Self {
        let mut body = String::new();
        let _ = writeln!(
            body,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#
        );
        let _ = writeln!(body, "<metadata>{}</metadata>", xml_escape(provenance));
        let _ = writeln!(
            body,
            r#"<rect width="{W}" height="{H}" fill="white"/><text x="{:.1}" y="18" font-family="sans-serif" font-size="14" text-anchor="middle">{}</text>"#,
            ML + (W - ML - MR) / 2.0,
            xml_escape(title)
        );
        Svg { body }
    }

    fn axes(&mut self, x_label: &str, y_label: &str, xa: &Axis, ya: &Axis) {
        let x0 = ML;
        let x1 = W - MR;
        let y0 = H - MB;
        let y1 = MT;
        let _ = writeln!(
            self.body,
            r#"<line x1="{x0:.1}" y1="{y0:.1}" x2="{x1:.1}" y2="{y0:.1}" stroke="black"/><line x1="{x0:.1}" y1="{y0:.1}" x2="{x0:.1}" y2="{y1:.1}" stroke="black"/>"#
        );
        for (v, frac) in xa.ticks() {
            let x = x0 + frac * (x1 - x0);
            let _ = writeln!(
                self.body,
                r#"<line x1="{x:.1}" y1="{y0:.1}" x2="{x:.1}" y2="{:.1}" stroke="black"/><text x="{x:.1}" y="{:.1}" font-family="sans-serif" font-size="10" text-anchor="middle">{}</text>"#,
                y0 + 4.0,
                y0 + 16.0,
                fmt_tick(v)
            );
        }
        for (v, frac) in ya.ticks() {
            let y = y0 - frac * (y0 - y1);
            let _ = writeln!(
                self.body,
                r#"<line x1="{:.1}" y1="{y:.1}" x2="{x0:.1}" y2="{y:.1}" stroke="black"/><text x="{:.1}" y="{:.1}" font-family="sans-serif" font-size="10" text-anchor="end">{}</text>"#,
                x0 - 4.0,
                x0 - 6.0,
                y + 3.0,
                fmt_tick(v)
            );
        }
        let _ = writeln!(
            self.body,
            r#"<text x="{:.1}" y="{:.1}" font-family="sans-serif" font-size="12" text-anchor="middle">{}</text>"#,
            ML + (W - ML - MR) / 2.0,
            H - 14.0,
            xml_escape(x_label)
        );
        let _ = writeln!(
            self.body,
            r#"<text x="16" y="{:.1}" font-family="sans-serif" font-size="12" text-anchor="middle" transform="rotate(-90 16 {:.1})">{}</text>"#,
            MT + (H - MT - MB) / 2.0,
            MT + (H - MT - MB) / 2.0,
            xml_escape(y_label)
        );
    }

    fn legend(&mut self, entries: &[(String, &str)]) {
        for (i, (label, color)) in entries.iter().enumerate() {
            let y = MT + 14.0 + i as f64 * 16.0;
            let _ = writeln!(
                self.body,
                r#"<rect x="{:.1}" y="{:.1}" width="10" height="10" fill="{color}"/><text x="{:.1}" y="{:.1}" font-family="sans-serif" font-size="11">{}</text>"#,
                W - MR + 10.0,
                y - 9.0,
                W - MR + 24.0,
                y,
                xml_escape(label)
            );
        }
    }

    fn finish(mut self, path: &Path) -> Result<(), CliError> {
        let _ = writeln!(self.body, "</svg>");
        std::fs::write(path, self.body)?;
        Ok(())
    }
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn fmt_tick(v: f64) -> String {
    if v == 0.0 {
        return "0".to_string();
    }
    let a = v.abs();
    if a >= 1000.0 || a < 0.01 {
        format!("{v:.1e}")
    } else if a < 1.0 {
        format!("{v:.3}")
    } else {
        format!("{v:.2}")
    }
}

struct Axis {
    lo: f64,
    hi: f64,
}

impl Axis {
    fn from_values(values: impl Iterator<Item = f64>) -> Self {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for v in values {
            if v.is_finite() {
                lo = lo.min(v);
                hi = hi.max(v);
            }
        }
        if !lo.is_finite() {
            lo = 0.0;
            hi = 1.0;
        }
        if hi <= lo {
            hi = lo + 1.0;
        }
        let pad = 0.08 * (hi - lo);
        Axis {
            lo: (lo - pad).min(if lo >= 0.0 { lo * 0.92 } else { lo }),
            hi: hi + pad,
        }
    }

    fn frac(&self, v: f64) -> f64 {
        ((v - self.lo) / (self.hi - self.lo)).clamp(0.0, 1.0)
    }

    fn ticks(&self) -> Vec<(f64, f64)> {
        (0..=4)
            .map(|i| {
                let v = self.lo + (self.hi - self.lo) * i as f64 / 4.0;
                (v, self.frac(v))
            })
            .collect()
    }
}

fn px(frac: f64) -> f64 {
    ML + frac * (W - ML - MR)
}

fn py(frac: f64) -> f64 {
    (H - MB) - frac * (H - MT - MB)
}

/// Mean of each agent's (energy, time) with std crosses. One labeled point
/// per agent, aggregated over all rows carrying that agent.
fn plot_tradeoff(table: &Table, out_dir: &Path) -> Result<&'static str, CliError> {
    let agent_c = table.col("agent")?;
    let mt = table.col("mean_response_time_s")?;
    let st = table.col("std_response_time_s")?;
    let me = table.col("mean_energy_j")?;
    let se = table.col("std_energy_j")?;

    let mut groups: BTreeMap<String, Vec<(f64, f64, f64, f64)>> = BTreeMap::new();
    for row in &table.rows {
        groups.entry(row[agent_c].clone()).or_default().push((
            table.f64_at(row, me),
            table.f64_at(row, mt),
            table.f64_at(row, se),
            table.f64_at(row, st),
        ));
    }
    let agg: BTreeMap<String, (f64, f64, f64, f64)> = groups
        .into_iter()
        .map(|(agent, pts)| {
            let n = pts.len() as f64;
            let sum = pts.iter().fold((0.0, 0.0, 0.0, 0.0), |a, p| {
                (a.0 + p.0, a.1 + p.1, a.2 + p.2, a.3 + p.3)
            });
            (agent, (sum.0 / n, sum.1 / n, sum.2 / n, sum.3 / n))
        })
        .collect();

    let xa = Axis::from_values(agg.values().flat_map(|v| [v.0 - v.2, v.0 + v.2]));
    let ya = Axis::from_values(agg.values().flat_map(|v| [v.1 - v.3, v.1 + v.3]));
    let mut svg = Svg::new(
        &table.provenance,
        "Response time vs energy trade-off (mean +- std)",
    );
    svg.axes("mean energy per task [J]", "mean response time [s]", &xa, &ya);
    let mut legend = Vec::new();
    for (i, (agent, (e, t, de, dt))) in agg.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let x = px(xa.frac(*e));
        let y = py(ya.frac(*t));
        let x_lo = px(xa.frac(e - de));
        let x_hi = px(xa.frac(e + de));
        let y_lo = py(ya.frac(t - dt));
        let y_hi = py(ya.frac(t + dt));
        let _ = writeln!(
            svg.body,
            r#"<line x1="{x_lo:.1}" y1="{y:.1}" x2="{x_hi:.1}" y2="{y:.1}" stroke="{color}" stroke-width="1.2"/><line x1="{x:.1}" y1="{y_lo:.1}" x2="{x:.1}" y2="{y_hi:.1}" stroke="{color}" stroke-width="1.2"/><circle cx="{x:.1}" cy="{y:.1}" r="4" fill="{color}"/>"#
        );
        legend.push((agent.clone(), color));
    }
    svg.legend(&legend);
    svg.finish(&out_dir.join("tradeoff.svg"))?;
    Ok("tradeoff.svg")
}

/// Grouped bars of a metric across sweep values, one bar per agent, std
/// whiskers; emitted for both response time and energy.
fn plot_scalability(table: &Table, out_dir: &Path) -> Result<Vec<&'static str>, CliError> {
    let mut out = Vec::new();
    for (mean_col, std_col, title, file) in [
        (
            "mean_response_time_s",
            "std_response_time_s",
            "Response time scalability",
            "scalability_response_time.svg",
        ),
        (
            "mean_energy_j",
            "std_energy_j",
            "Energy scalability",
            "scalability_energy.svg",
        ),
    ] {
        let sv = table.col("sweep_value")?;
        let agent_c = table.col("agent")?;
        let mc = table.col(mean_col)?;
        let sc = table.col(std_col)?;
        // (value, agent) -> seed-mean of (mean, std).
        let mut cells: BTreeMap<(String, String), Vec<(f64, f64)>> = BTreeMap::new();
        let mut agents: Vec<String> = Vec::new();
        let mut values: Vec<f64> = Vec::new();
        for row in &table.rows {
            let v = table.f64_at(row, sv);
            if !values.iter().any(|x| x == &v) {
                values.push(v);
            }
            if !agents.contains(&row[agent_c]) {
                agents.push(row[agent_c].clone());
            }
            cells
                .entry((format!("{v:020.6}"), row[agent_c].clone()))
                .or_default()
                .push((table.f64_at(row, mc), table.f64_at(row, sc)));
        }
        values.sort_by(|a, b| a.partial_cmp(b).unwrap());
        agents.sort();

        let tops = cells
            .values()
            .map(|pts| {
                let n = pts.len() as f64;
                let m = pts.iter().map(|p| p.0).sum::<f64>() / n;
                let s = pts.iter().map(|p| p.1).sum::<f64>() / n;
                m + s
            })
            .fold(0.0f64, f64::max);
        let ya = Axis { lo: 0.0, hi: tops * 1.1 + 1e-12 };
        let mut svg = Svg::new(&table.provenance, title);
        svg.axes("sweep value", mean_col, &Axis { lo: 0.0, hi: 1.0 }, &ya);
        let group_w = (W - ML - MR) / values.len() as f64;
        let bar_w = (group_w * 0.8) / agents.len() as f64;
        let mut legend = Vec::new();
        for (ai, agent) in agents.iter().enumerate() {
            let color = PALETTE[ai % PALETTE.len()];
            legend.push((agent.clone(), color));
            for (vi, v) in values.iter().enumerate() {
                let key = (format!("{v:020.6}"), agent.clone());
                let Some(pts) = cells.get(&key) else { continue };
                let n = pts.len() as f64;
                let m = pts.iter().map(|p| p.0).sum::<f64>() / n;
                let s = pts.iter().map(|p| p.1).sum::<f64>() / n;
                let x = ML + vi as f64 * group_w + group_w * 0.1 + ai as f64 * bar_w;
                let y = py(ya.frac(m));
                let y0 = py(0.0);
                let _ = writeln!(
                    svg.body,
                    r#"<rect x="{x:.1}" y="{y:.1}" width="{bar_w:.1}" height="{:.1}" fill="{color}"/>"#,
                    (y0 - y).max(0.0)
                );
                let cx = x + bar_w / 2.0;
                let y_hi = py(ya.frac(m + s));
                let y_lo = py(ya.frac((m - s).max(0.0)));
                let _ = writeln!(
                    svg.body,
                    r#"<line x1="{cx:.1}" y1="{y_lo:.1}" x2="{cx:.1}" y2="{y_hi:.1}" stroke="black" stroke-width="1"/>"#
                );
            }
        }
        // Group labels under the axis.
        for (vi, v) in values.iter().enumerate() {
            let x = ML + vi as f64 * group_w + group_w / 2.0;
            let _ = writeln!(
                svg.body,
                r#"<text x="{x:.1}" y="{:.1}" font-family="sans-serif" font-size="10" text-anchor="middle">{}</text>"#,
                H - MB + 16.0,
                fmt_tick(*v)
            );
        }
        svg.legend(&legend);
        svg.finish(&out_dir.join(file))?;
        out.push(file);
    }
    Ok(out)
}

/// Action-fraction lines against the sweep value, one line per
/// (agent, action).
fn plot_policy(table: &Table, out_dir: &Path) -> Result<&'static str, CliError> {
    let sv = table.col("sweep_value")?;
    let agent_c = table.col("agent")?;
    let freq_cols: Vec<(usize, String)> = table
        .headers
        .iter()
        .enumerate()
        .filter(|(_, h)| h.starts_with("freq_"))
        .map(|(i, h)| (i, h.clone()))
        .collect();
    if freq_cols.is_empty() {
        return Err(CliError::new(
            1,
            "input CSV is missing column `freq_0`".to_string(),
        ));
    }
    // (agent, action) -> value -> fractions over seeds.
    let mut series: BTreeMap<(String, String), BTreeMap<String, (f64, Vec<f64>)>> =
        BTreeMap::new();
    for row in &table.rows {
        let v = table.f64_at(row, sv);
        for (ci, cname) in &freq_cols {
            let entry = series
                .entry((row[agent_c].clone(), cname.clone()))
                .or_default()
                .entry(format!("{v:020.6}"))
                .or_insert((v, Vec::new()));
            entry.1.push(table.f64_at(row, *ci));
        }
    }
    let xa = Axis::from_values(
        table
            .rows
            .iter()
            .map(|row| table.f64_at(row, sv)),
    );
    let ya = Axis { lo: 0.0, hi: 1.05 };
    let mut svg = Svg::new(&table.provenance, "Action selection fractions");
    svg.axes("sweep value", "selection fraction", &xa, &ya);
    let mut legend = Vec::new();
    for (si, ((agent, action), points)) in series.iter().enumerate() {
        let color = PALETTE[si % PALETTE.len()];
        legend.push((format!("{agent} {action}"), color));
        let mut path = String::new();
        for (i, (_, (v, fracs))) in points.iter().enumerate() {
            let mean = fracs.iter().sum::<f64>() / fracs.len() as f64;
            let x = px(xa.frac(*v));
            let y = py(ya.frac(mean));
            let _ = write!(path, "{}{x:.1},{y:.1} ", if i == 0 { "M" } else { "L" });
        }
        let _ = writeln!(
            svg.body,
            r#"<path d="{}" fill="none" stroke="{color}" stroke-width="1.6"/>"#,
            path.trim_end()
        );
    }
    svg.legend(&legend);
    svg.finish(&out_dir.join("policy_fractions.svg"))?;
    Ok("policy_fractions.svg")
}
