//! Deterministic SVG rendering of sweep results: one panel per noise kind,
//! one polyline per method (mean mAP over reps versus noise magnitude).
//! Coordinates are printed with fixed precision so identical tables yield
//! byte-identical files.

use leafseg::eval::{noise_kind_name, summarize_sweep, NoiseKind, SweepMethod, SweepRow};
use leafseg::{Error, Result};
use std::path::Path;

const PANEL_W: f64 = 320.0;
const PANEL_H: f64 = 260.0;
const MARGIN_L: f64 = 48.0;
const MARGIN_R: f64 = 16.0;
const MARGIN_T: f64 = 34.0;
const MARGIN_B: f64 = 42.0;

const COLORS: &[(&str, &str)] = &[
    ("radius", "#1f77b4"),
    ("graphcut", "#ff7f0e"),
    ("dbscan", "#2ca02c"),
    ("agglomerative", "#d62728"),
];

fn color_for(method: SweepMethod) -> &'static str {
    COLORS
        .iter()
        .find(|(name, _)| *name == method.name())
        .map(|(_, c)| *c)
        .unwrap_or("#000000")
}

/// Renders the sweep table; errors on an empty table.
pub fn render_svg(rows: &[SweepRow]) -> Result<String> {
    if rows.is_empty() {
        return Err(Error::invalid("cannot plot an empty sweep table"));
    }
    let summaries = summarize_sweep(rows);
    let mut kinds: Vec<NoiseKind> = rows.iter().map(|r| r.kind).collect();
    kinds.sort_by_key(|k| noise_kind_name(*k));
    kinds.dedup();
    let mut methods: Vec<SweepMethod> = rows.iter().map(|r| r.method).collect();
    methods.sort();
    methods.dedup();
    let mut mags: Vec<f64> = rows.iter().map(|r| r.magnitude).collect();
    mags.sort_by(f64::total_cmp);
    mags.dedup();
    let (mag_min, mag_max) = (mags[0], *mags.last().unwrap());
    let mag_span = if mag_max > mag_min {
        mag_max - mag_min
    } else {
        1.0
    };

    let total_w = kinds.len() as f64 * PANEL_W;
    let total_h = PANEL_H + 24.0 * methods.len() as f64 + 16.0;
    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{total_w:.0}\" height=\"{total_h:.0}\" \
         viewBox=\"0 0 {total_w:.0} {total_h:.0}\" font-family=\"sans-serif\" font-size=\"11\">\n"
    ));
    svg.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");

    for (pi, kind) in kinds.iter().enumerate() {
        let x0 = pi as f64 * PANEL_W + MARGIN_L;
        let y0 = MARGIN_T;
        let w = PANEL_W - MARGIN_L - MARGIN_R;
        let h = PANEL_H - MARGIN_T - MARGIN_B;
        let x_of = |m: f64| x0 + (m - mag_min) / mag_span * w;
        let y_of = |v: f64| y0 + (1.0 - v) * h;

        svg.push_str(&format!(
            "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"middle\" font-weight=\"bold\">{} noise</text>\n",
            x0 + w / 2.0,
            y0 - 14.0,
            noise_kind_name(*kind)
        ));
        svg.push_str(&format!(
            "<rect x=\"{x0:.2}\" y=\"{y0:.2}\" width=\"{w:.2}\" height=\"{h:.2}\" fill=\"none\" stroke=\"#333\"/>\n"
        ));
        // Horizontal grid lines at 0, 0.25, ..., 1 mAP.
        for i in 0..=4 {
            let v = i as f64 * 0.25;
            let y = y_of(v);
            svg.push_str(&format!(
                "<line x1=\"{x0:.2}\" y1=\"{y:.2}\" x2=\"{:.2}\" y2=\"{y:.2}\" stroke=\"#ddd\"/>\n",
                x0 + w
            ));
            svg.push_str(&format!(
                "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"end\">{v:.2}</text>\n",
                x0 - 6.0,
                y + 4.0
            ));
        }
        for &m in &mags {
            let x = x_of(m);
            svg.push_str(&format!(
                "<text x=\"{x:.2}\" y=\"{:.2}\" text-anchor=\"middle\">{m}</text>\n",
                y0 + h + 16.0
            ));
        }
        svg.push_str(&format!(
            "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"middle\">noise magnitude</text>\n",
            x0 + w / 2.0,
            y0 + h + 32.0
        ));

        for &method in &methods {
            let pts: Vec<(f64, f64)> = mags
                .iter()
                .filter_map(|&m| {
                    summaries
                        .iter()
                        .find(|s| s.method == method && s.kind == *kind && s.magnitude == m)
                        .map(|s| (x_of(m), y_of(s.mean_map.clamp(0.0, 1.0))))
                })
                .collect();
            if pts.is_empty() {
                continue;
            }
            let color = color_for(method);
            if pts.len() > 1 {
                let path: Vec<String> =
                    pts.iter().map(|(x, y)| format!("{x:.2},{y:.2}")).collect();
                svg.push_str(&format!(
                    "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\"/>\n",
                    path.join(" ")
                ));
            }
            for (x, y) in &pts {
                svg.push_str(&format!(
                    "<circle cx=\"{x:.2}\" cy=\"{y:.2}\" r=\"3\" fill=\"{color}\"/>\n"
                ));
            }
        }
    }

    // Legend under the panels.
    let legend_y = PANEL_H + 8.0;
    for (i, &method) in methods.iter().enumerate() {
        let y = legend_y + 20.0 * i as f64;
        let color = color_for(method);
        svg.push_str(&format!(
            "<line x1=\"{MARGIN_L:.2}\" y1=\"{y:.2}\" x2=\"{:.2}\" y2=\"{y:.2}\" stroke=\"{color}\" stroke-width=\"2\"/>\n",
            MARGIN_L + 22.0
        ));
        svg.push_str(&format!(
            "<text x=\"{:.2}\" y=\"{:.2}\">{}</text>\n",
            MARGIN_L + 28.0,
            y + 4.0,
            method.name()
        ));
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

/// Writes the rendered table to `path`.
pub fn emit_plot(rows: &[SweepRow], path: &Path) -> Result<()> {
    let svg = render_svg(rows)?;
    std::fs::write(path, svg).map_err(|e| Error::io(path.display().to_string(), e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use leafseg::eval::{NoiseKind, SweepMethod, SweepRow};

    fn row(method: SweepMethod, magnitude: f64, map: f64) -> SweepRow {
        SweepRow {
            method,
            kind: NoiseKind::Uniform,
            magnitude,
            rep: 0,
            map,
            ap50: map,
        }
    }

    #[test]
    fn empty_table_is_input_error() {
        assert!(render_svg(&[]).is_err());
    }

    #[test]
    fn single_point_single_legend_entry() {
        let svg = render_svg(&[row(SweepMethod::Radius, 0.0, 1.0)]).unwrap();
        assert_eq!(svg.matches("<circle").count(), 1);
        assert_eq!(svg.matches(">radius</text>").count(), 1);
        assert!(!svg.contains("<polyline"), "one point, no line");
    }

    #[test]
    fn identical_input_identical_bytes() {
        let rows = vec![
            row(SweepMethod::Radius, 0.0, 1.0),
            row(SweepMethod::Radius, 0.2, 0.8),
            row(SweepMethod::Dbscan, 0.0, 0.9),
            row(SweepMethod::Dbscan, 0.2, 0.4),
        ];
        assert_eq!(render_svg(&rows).unwrap(), render_svg(&rows).unwrap());
    }
}
