//! Static SVG line charts, written by hand so the binary stays free of a
//! renderer dependency. Linear axes, a handful of ticks, one polyline per
//! series, and a legend; long traces are strided down to keep files small.

pub struct Series<'a> {
    pub label: &'a str,
    pub xs: &'a [f64],
    pub ys: &'a [f64],
    pub dashed: bool,
    pub markers: bool,
}

impl<'a> Series<'a> {
    pub fn line(label: &'a str, xs: &'a [f64], ys: &'a [f64]) -> Self {
        Series {
            label,
            xs,
            ys,
            dashed: false,
            markers: false,
        }
    }

    pub fn guide(label: &'a str, xs: &'a [f64], ys: &'a [f64]) -> Self {
        Series {
            dashed: true,
            ..Series::line(label, xs, ys)
        }
    }
}

const COLORS: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b",
];
const WIDTH: f64 = 840.0;
const HEIGHT: f64 = 480.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 20.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 50.0;
/// Points per polyline after striding; plenty for an 840px panel.
const MAX_POINTS: usize = 1500;

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn fmt_tick(v: f64) -> String {
    if v == 0.0 {
        return "0".to_string();
    }
    let a = v.abs();
    if a >= 1e4 || a < 1e-3 {
        format!("{v:.2e}")
    } else {
        let s = format!("{v:.3}");
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    }
}

struct Range {
    lo: f64,
    hi: f64,
}

impl Range {
    fn of(values: impl Iterator<Item = f64>) -> Range {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for v in values.filter(|v| v.is_finite()) {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if !lo.is_finite() || !hi.is_finite() {
            return Range { lo: 0.0, hi: 1.0 };
        }
        if hi - lo < 1e-300 {
            // Flat data: open a window around it so the line sits mid-panel.
            let pad = lo.abs().max(1.0) * 0.1;
            return Range {
                lo: lo - pad,
                hi: hi + pad,
            };
        }
        let pad = (hi - lo) * 0.05;
        Range {
            lo: lo - pad,
            hi: hi + pad,
        }
    }
}

/// Renders one chart. Series are drawn in order with a fixed palette;
/// `dashed` is meant for references and guides, `markers` for sparse data.
pub fn line_chart(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let xr = Range::of(series.iter().flat_map(|s| s.xs.iter().copied()));
    let yr = Range::of(series.iter().flat_map(|s| s.ys.iter().copied()));
    let px = |x: f64| LEFT + (x - xr.lo) / (xr.hi - xr.lo) * (WIDTH - LEFT - RIGHT);
    let py = |y: f64| HEIGHT - BOTTOM - (y - yr.lo) / (yr.hi - yr.lo) * (HEIGHT - TOP - BOTTOM);

    let mut svg = String::with_capacity(16 * 1024);
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" \
         viewBox=\"0 0 {WIDTH} {HEIGHT}\" font-family=\"sans-serif\" font-size=\"13\">\n"
    ));
    svg.push_str(&format!(
        "<rect width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"white\"/>\n"
    ));
    svg.push_str(&format!(
        "<text x=\"{:.1}\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">{}</text>\n",
        (LEFT + WIDTH - RIGHT) / 2.0,
        esc(title)
    ));

    // Gridlines and tick labels, five per axis.
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let xv = xr.lo + f * (xr.hi - xr.lo);
        let yv = yr.lo + f * (yr.hi - yr.lo);
        let xp = px(xv);
        let yp = py(yv);
        svg.push_str(&format!(
            "<line x1=\"{xp:.1}\" y1=\"{TOP}\" x2=\"{xp:.1}\" y2=\"{:.1}\" stroke=\"#ddd\"/>\n",
            HEIGHT - BOTTOM
        ));
        svg.push_str(&format!(
            "<line x1=\"{LEFT}\" y1=\"{yp:.1}\" x2=\"{:.1}\" y2=\"{yp:.1}\" stroke=\"#ddd\"/>\n",
            WIDTH - RIGHT
        ));
        svg.push_str(&format!(
            "<text x=\"{xp:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>\n",
            HEIGHT - BOTTOM + 18.0,
            fmt_tick(xv)
        ));
        svg.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{}</text>\n",
            LEFT - 6.0,
            yp + 4.0,
            fmt_tick(yv)
        ));
    }
    svg.push_str(&format!(
        "<rect x=\"{LEFT}\" y=\"{TOP}\" width=\"{:.1}\" height=\"{:.1}\" fill=\"none\" stroke=\"#333\"/>\n",
        WIDTH - LEFT - RIGHT,
        HEIGHT - TOP - BOTTOM
    ));
    svg.push_str(&format!(
        "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>\n",
        (LEFT + WIDTH - RIGHT) / 2.0,
        HEIGHT - 10.0,
        esc(x_label)
    ));
    svg.push_str(&format!(
        "<text x=\"16\" y=\"{:.1}\" text-anchor=\"middle\" transform=\"rotate(-90 16 {:.1})\">{}</text>\n",
        (TOP + HEIGHT - BOTTOM) / 2.0,
        (TOP + HEIGHT - BOTTOM) / 2.0,
        esc(y_label)
    ));

    for (k, s) in series.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        let dash = if s.dashed {
            " stroke-dasharray=\"6 4\""
        } else {
            ""
        };
        let len = s.xs.len().min(s.ys.len());
        let stride = len.div_ceil(MAX_POINTS).max(1);
        let mut pts = String::new();
        let mut idx: Vec<usize> = (0..len).step_by(stride).collect();
        if let Some(&last) = idx.last() {
            if last != len - 1 {
                idx.push(len - 1);
            }
        }
        for &i in &idx {
            if s.xs[i].is_finite() && s.ys[i].is_finite() {
                pts.push_str(&format!("{:.2},{:.2} ", px(s.xs[i]), py(s.ys[i])));
            }
        }
        svg.push_str(&format!(
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.6\"{dash}/>\n",
            pts.trim_end()
        ));
        if s.markers {
            for &i in &idx {
                if s.xs[i].is_finite() && s.ys[i].is_finite() {
                    svg.push_str(&format!(
                        "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"3.5\" fill=\"{color}\"/>\n",
                        px(s.xs[i]),
                        py(s.ys[i])
                    ));
                }
            }
        }
        // Legend entry: sample segment plus label, stacked top-right.
        let ly = TOP + 16.0 + 18.0 * k as f64;
        let lx = WIDTH - RIGHT - 150.0;
        svg.push_str(&format!(
            "<line x1=\"{lx:.1}\" y1=\"{:.1}\" x2=\"{:.1}\" y2=\"{:.1}\" stroke=\"{color}\" stroke-width=\"1.6\"{dash}/>\n",
            ly - 4.0,
            lx + 26.0,
            ly - 4.0
        ));
        svg.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{ly:.1}\">{}</text>\n",
            lx + 32.0,
            esc(s.label)
        ));
    }

    svg.push_str("</svg>\n");
    svg
}
