//! Static SVG line plots of the sweep and transferability summaries.

use std::fs;
use std::path::{Path, PathBuf};

use plotters::prelude::*;

use crate::tables::{in_255ths, Report};
use crate::LabError;

/// One named polyline.
pub struct Curve {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

fn plot_err(e: impl std::fmt::Display) -> LabError {
    LabError::Plot(e.to_string())
}

fn padded(lo: f64, hi: f64) -> (f64, f64) {
    if hi - lo < 1e-9 {
        (lo - 1.0, hi + 1.0)
    } else {
        let pad = 0.05 * (hi - lo);
        (lo - pad, hi + pad)
    }
}

pub fn line_plot(path: &Path, title: &str, x_desc: &str, y_desc: &str, curves: &[Curve]) -> Result<(), LabError> {
    let all = || curves.iter().flat_map(|c| c.points.iter());
    let (x0, x1) = padded(all().map(|p| p.0).fold(f64::INFINITY, f64::min), all().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max));
    let (y0, y1) = padded(all().map(|p| p.1).fold(f64::INFINITY, f64::min), all().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max));
    let root = SVGBackend::new(path, (760, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(56)
        .build_cartesian_2d(x0..x1, y0..y1)
        .map_err(plot_err)?;
    chart.configure_mesh().x_desc(x_desc).y_desc(y_desc).draw().map_err(plot_err)?;
    for (i, curve) in curves.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        chart
            .draw_series(LineSeries::new(curve.points.iter().copied(), color.stroke_width(2)))
            .map_err(plot_err)?
            .label(curve.label.clone())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 18, y)], color.stroke_width(2)));
    }
    chart
        .configure_series_labels()
        .position(SeriesLabelPosition::UpperLeft)
        .background_style(WHITE.mix(0.85))
        .border_style(BLACK)
        .draw()
        .map_err(plot_err)?;
    root.present().map_err(plot_err)
}

/// One sweep plot per driver and one transferability plot per correlation.
pub fn write_all(report: &Report, dir: &Path) -> Result<Vec<PathBuf>, LabError> {
    let mut files = Vec::new();
    let config = report.config();
    let sweep = report.sweep();
    for &driver in &config.attack.drivers {
        let curves: Vec<Curve> = config
            .attack
            .combiners
            .iter()
            .map(|&combiner| Curve {
                label: format!("{driver}-{combiner}"),
                points: sweep
                    .iter()
                    .filter(|p| p.driver == driver && p.combiner == combiner)
                    .filter_map(|p| Some((in_255ths(p.epsilon), p.mean_arp?)))
                    .collect(),
            })
            .filter(|c| !c.points.is_empty())
            .collect();
        if curves.is_empty() {
            continue;
        }
        fs::create_dir_all(dir).map_err(|e| LabError::io(dir, e))?;
        let path = dir.join(format!("sweep-{}.svg", driver.to_string().to_ascii_lowercase()));
        line_plot(&path, &format!("{driver}: overall ARP vs budget"), "epsilon (1/255)", "mean overall ARP (%)", &curves)?;
        files.push(path);
    }
    let rows = report.transferability();
    for c in config.diagnose_correlations() {
        let curves: Vec<Curve> = (0..config.dataset.tasks)
            .map(|x| Curve {
                label: format!("Single({x})"),
                points: rows
                    .iter()
                    .filter(|t| t.correlation == c && t.attacked == x)
                    .filter_map(|t| Some((t.sharing_level? as f64, t.mean?)))
                    .collect(),
            })
            .filter(|c| !c.points.is_empty())
            .collect();
        if curves.is_empty() {
            continue;
        }
        fs::create_dir_all(dir).map_err(|e| LabError::io(dir, e))?;
        let path = dir.join(format!("transferability-rho{c}.svg"));
        line_plot(&path, &format!("transferability vs sharing level, rho = {c}"), "shared blocks", "mean transferability", &curves)?;
        files.push(path);
    }
    Ok(files)
}
