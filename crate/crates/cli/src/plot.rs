//! `plot`: SVG figures from preset CSVs with the analytic references
//! overlaid.

use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::Args;
use plotters::prelude::*;

use mbsim_core::model::eq1_latency_ps;
use mbsim_core::sim::experiments::Preset;

use crate::{exit, CmdResult, Failure};

#[derive(Args, Debug)]
pub struct PlotArgs {
    pub csv: PathBuf,
    /// Preset whose schema the CSV follows; read from the file if omitted.
    #[arg(long)]
    pub preset: Option<String>,
    /// Output file; defaults to the CSV path with an `.svg` extension.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// A CSV checked against a preset schema.
pub struct Table {
    pub preset: Preset,
    header: Vec<String>,
    rows: Vec<csv::StringRecord>,
}

impl Table {
    pub fn read(path: &Path, preset: Option<&str>) -> Result<Self, Failure> {
        let mut r = csv::Reader::from_path(path).with_context(|| path.display().to_string())?;
        let header: Vec<String> = r
            .headers()
            .with_context(|| path.display().to_string())?
            .iter()
            .map(str::to_string)
            .collect();
        let rows = r
            .records()
            .collect::<Result<Vec<_>, _>>()
            .with_context(|| path.display().to_string())?;
        if rows.is_empty() || header.iter().all(String::is_empty) {
            return Err(Failure::usage(format!("{}: no data rows", path.display())));
        }
        let preset = match preset {
            Some(name) => Preset::parse(name)
                .ok_or_else(|| Failure::usage(format!("unknown preset {name:?}")))?,
            None => {
                let col = header.iter().position(|h| h == "schema");
                let schema = col.and_then(|i| rows[0].get(i)).unwrap_or_default();
                Preset::ALL
                    .into_iter()
                    .find(|p| p.schema() == schema)
                    .ok_or_else(|| {
                        Failure::usage(format!(
                            "{}: unknown schema {schema:?}; pass --preset",
                            path.display()
                        ))
                    })?
            }
        };
        let missing: Vec<&str> = preset
            .columns()
            .iter()
            .copied()
            .filter(|c| !header.iter().any(|h| h == c))
            .collect();
        if !missing.is_empty() {
            return Err(Failure::usage(format!(
                "{}: missing columns for {}: {}",
                path.display(),
                preset.schema(),
                missing.join(", ")
            )));
        }
        Ok(Table {
            preset,
            header,
            rows,
        })
    }

    pub fn column(&self, name: &str) -> Result<Vec<f64>, Failure> {
        let i = self.header.iter().position(|h| h == name).expect("checked column");
        self.rows
            .iter()
            .map(|r| {
                let raw = r.get(i).unwrap_or_default();
                raw.parse()
                    .map_err(|_| Failure::usage(format!("column {name}: {raw:?} is not a number")))
            })
            .collect()
    }
}

struct Series {
    label: String,
    points: Vec<(f64, f64)>,
    kind: Line,
}

#[derive(Clone, Copy, PartialEq)]
enum Line {
    Solid,
    Dashed,
    Dotted,
}

fn sorted(xs: Vec<f64>, ys: Vec<f64>) -> Vec<(f64, f64)> {
    let mut p: Vec<(f64, f64)> = xs.into_iter().zip(ys).collect();
    p.sort_by(|a, b| a.0.total_cmp(&b.0));
    p
}

fn draw(path: &Path, title: &str, y_desc: &str, series: &[Series]) -> anyhow::Result<()> {
    let all = series.iter().flat_map(|s| s.points.iter());
    let (mut x0, mut x1, mut y1) = (f64::MAX, f64::MIN, 0f64);
    for &(x, y) in all {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y1 = y1.max(y);
    }
    let root = SVGBackend::new(path, (900, 560)).into_drawing_area();
    root.fill(&WHITE)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 22))
        .margin(16)
        .x_label_area_size(48)
        .y_label_area_size(72)
        .build_cartesian_2d((x0.max(1.0)..x1 * 1.1).log_scale(), 0.0..y1 * 1.1)?;
    chart
        .configure_mesh()
        .x_desc("frame size (bytes)")
        .y_desc(y_desc)
        .draw()?;
    let colors = [BLUE, RED, GREEN, BLACK, MAGENTA, CYAN];
    for (i, s) in series.iter().enumerate() {
        let c = colors[i % colors.len()];
        let pts = s.points.clone();
        let anno = match s.kind {
            Line::Solid => chart.draw_series(LineSeries::new(pts, c.stroke_width(2)))?,
            Line::Dashed => chart.draw_series(DashedLineSeries::new(pts, 8, 5, c.stroke_width(2)))?,
            Line::Dotted => chart.draw_series(DottedLineSeries::new(pts, 0, 6, move |p| {
                Circle::new(p, 2, c.filled())
            }))?,
        };
        anno.label(s.label.as_str())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], c));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()?;
    root.present()?;
    Ok(())
}

pub fn plot(a: PlotArgs) -> CmdResult {
    let t = Table::read(&a.csv, a.preset.as_deref())?;
    let out = a.out.clone().unwrap_or_else(|| a.csv.with_extension("svg"));
    match t.preset {
        Preset::Fig6a | Preset::Fig6b | Preset::LoopbackThroughput => {
            let size = t.column("size")?;
            let series = vec![
                Series {
                    label: "achieved".into(),
                    points: sorted(size.clone(), t.column("achieved_gbps")?),
                    kind: Line::Solid,
                },
                Series {
                    label: "offered load".into(),
                    points: sorted(size, t.column("offered_gbps")?),
                    kind: Line::Dotted,
                },
            ];
            draw(&out, t.preset.describe(), "throughput (Gbps)", &series)?;
        }
        Preset::Fig7Latency => {
            let size = t.column("size")?;
            let model: Vec<f64> = size.iter().map(|&s| eq1_latency_ps(s as u64) as f64 / 1e3).collect();
            let series = vec![
                Series {
                    label: "measured mean".into(),
                    points: sorted(size.clone(), t.column("mean_ns")?),
                    kind: Line::Solid,
                },
                Series {
                    label: "store-and-forward model".into(),
                    points: sorted(size, model),
                    kind: Line::Dashed,
                },
            ];
            draw(&out, t.preset.describe(), "round-trip latency (ns)", &series)?;
        }
        p => {
            return Err(Failure::usage(format!(
                "{} has no size axis to plot; its CSV is the result",
                p.name()
            )))
        }
    }
    println!("wrote {}", out.display());
    Ok(exit::PASS)
}
