//! Tables and SVG charts from a metrics file.

use std::fmt::Write as _;

use super::metrics::MetricsTable;
use crate::error::{Error, Result};

/// `achievement,success` with the final all-episode rate of each
/// achievement.
pub fn final_rates_csv(m: &MetricsTable) -> Result<String> {
    let mut out = String::from("achievement,success\n");
    for name in m.achievements() {
        let col = m.column(&format!("success_{name}")).unwrap_or_default();
        let last = col.last().copied().unwrap_or(0.0);
        let _ = writeln!(out, "{name},{last}");
    }
    Ok(out)
}

/// `env_steps,score,window_score,window_reward`, one row per metrics row.
pub fn curves_csv(m: &MetricsTable) -> Result<String> {
    let cols = ["env_steps", "score", "window_score", "window_reward"];
    let data = cols
        .iter()
        .map(|c| {
            m.column(c)
                .ok_or_else(|| Error::Config(format!("metrics file has no {c} column")))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut out = cols.join(",") + "\n";
    for i in 0..m.rows.len() {
        let row: Vec<String> = data.iter().map(|c| c[i].to_string()).collect();
        out += &row.join(",");
        out.push('\n');
    }
    Ok(out)
}

const W: f64 = 480.0;
const H: f64 = 300.0;
const PAD: f64 = 40.0;

fn frame(title: &str) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" font-family=\"sans-serif\" font-size=\"11\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"16\" text-anchor=\"middle\">{title}</text>\n\
         <line x1=\"{PAD}\" y1=\"{y0}\" x2=\"{x1}\" y2=\"{y0}\" stroke=\"black\"/>\n\
         <line x1=\"{PAD}\" y1=\"{PAD}\" x2=\"{PAD}\" y2=\"{y0}\" stroke=\"black\"/>\n",
        W / 2.0,
        y0 = H - PAD,
        x1 = W - PAD,
    )
}

/// A line chart of `y` against `x`.
pub fn line_svg(title: &str, x: &[f64], y: &[f64]) -> String {
    let mut out = frame(title);
    let (xmax, ymax) = (
        x.iter().copied().fold(1e-12, f64::max),
        y.iter().copied().fold(1e-12, f64::max),
    );
    let px = |v: f64| PAD + v / xmax * (W - 2.0 * PAD);
    let py = |v: f64| H - PAD - v / ymax * (H - 2.0 * PAD);
    let pts: Vec<String> = x
        .iter()
        .zip(y)
        .map(|(&a, &b)| format!("{:.1},{:.1}", px(a), py(b)))
        .collect();
    let _ = writeln!(
        out,
        "<polyline fill=\"none\" stroke=\"steelblue\" stroke-width=\"1.5\" points=\"{}\"/>",
        pts.join(" ")
    );
    let _ = writeln!(
        out,
        "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{xmax}</text>",
        W - PAD,
        H - PAD + 14.0
    );
    let _ = writeln!(
        out,
        "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{ymax:.2}</text>",
        PAD - 4.0,
        PAD + 4.0
    );
    out + "</svg>\n"
}

/// A bar chart with one labelled bar per value, on a 0 to 100 scale.
pub fn bars_svg(title: &str, labels: &[String], values: &[f64]) -> String {
    let mut out = frame(title);
    let n = values.len().max(1) as f64;
    let slot = (W - 2.0 * PAD) / n;
    for (i, (l, &v)) in labels.iter().zip(values).enumerate() {
        let h = v.clamp(0.0, 100.0) / 100.0 * (H - 2.0 * PAD);
        let x = PAD + i as f64 * slot;
        let _ = writeln!(
            out,
            "<rect x=\"{:.1}\" y=\"{:.1}\" width=\"{:.1}\" height=\"{h:.1}\" fill=\"steelblue\"/>",
            x + 0.1 * slot,
            H - PAD - h,
            0.8 * slot
        );
        let _ = writeln!(
            out,
            "<text x=\"{:.1}\" y=\"{}\" text-anchor=\"middle\" font-size=\"9\">{l}</text>",
            x + slot / 2.0,
            H - PAD + 12.0
        );
    }
    out + "</svg>\n"
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn final_rates_one_row_per_achievement() {
        let m = MetricsTable {
            columns: ["env_steps", "success_a", "success_b"].map(String::from).to_vec(),
            rows: vec![vec![1.0, 10.0, 0.0], vec![2.0, 20.0, 50.0]],
        };
        assert_eq!(final_rates_csv(&m).unwrap(), "achievement,success\na,20\nb,50\n");
    }
}
