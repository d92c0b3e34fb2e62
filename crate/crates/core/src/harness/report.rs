//! Report files: a per-episode CSV, a key/value summary CSV and SVG plots.
//!
//! Episode CSV columns, in order:
//!
//! | column | meaning |
//! |---|---|
//! | `episode` | index within the run |
//! | `suite` | scenario suite name |
//! | `seed` | scenario seed |
//! | `ticks` | simulated 0.1 s ticks |
//! | `collision` | `true` if the ego touched any body |
//! | `collision_tick` | first tick in collision, empty if none |
//! | `off_route_max` | largest distance from the route centreline (m) |
//! | `failure` | `true` if `off_route_max` exceeded 2.5 m |
//! | `progress` | arc length gained along the route (m) |
//! | `max_abs_accel` | largest absolute ego acceleration (m/s²) |
//! | `max_abs_jerk` | largest absolute ego jerk (m/s³) |
//!
//! The summary file `<stem>_summary.csv` has a `metric,value` header and the
//! rows `episodes`, `collision_rate`, `failure_rate`, `mean_off_route_max`,
//! `max_off_route_max`, `mean_progress`, `mean_max_abs_accel` and
//! `mean_max_abs_jerk`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::rollout::EpisodeReport;
use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::scenario::Pose;

pub const COLUMNS: [&str; 11] = [
    "episode",
    "suite",
    "seed",
    "ticks",
    "collision",
    "collision_tick",
    "off_route_max",
    "failure",
    "progress",
    "max_abs_accel",
    "max_abs_jerk",
];

/// One parsed line of an episode CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub episode: usize,
    pub suite: String,
    pub seed: u64,
    pub ticks: usize,
    pub collision: bool,
    pub collision_tick: Option<usize>,
    pub off_route_max: f64,
    pub failure: bool,
    pub progress: f64,
    pub max_abs_accel: f64,
    pub max_abs_jerk: f64,
}

impl ReportRow {
    pub fn from_report(episode: usize, r: &EpisodeReport) -> Self {
        Self {
            episode,
            suite: r.suite.name().to_string(),
            seed: r.seed,
            ticks: r.ticks,
            collision: r.collision,
            collision_tick: r.collision_tick,
            off_route_max: r.off_route_max,
            failure: r.failure,
            progress: r.progress,
            max_abs_accel: r.max_abs_accel,
            max_abs_jerk: r.max_abs_jerk,
        }
    }

    fn fields(&self) -> [String; 11] {
        [
            self.episode.to_string(),
            self.suite.clone(),
            self.seed.to_string(),
            self.ticks.to_string(),
            self.collision.to_string(),
            self.collision_tick.map(|t| t.to_string()).unwrap_or_default(),
            num(self.off_route_max),
            self.failure.to_string(),
            num(self.progress),
            num(self.max_abs_accel),
            num(self.max_abs_jerk),
        ]
    }
}

/// Shortest round-trip form that always shows a decimal point (`0.0`).
fn num(v: f64) -> String {
    format!("{v:?}")
}

pub fn summary_path(report: &Path) -> PathBuf {
    let stem = report.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    report.with_file_name(format!("{stem}_summary.csv"))
}

pub fn episode_csv(rows: &[ReportRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(COLUMNS)?;
    for r in rows {
        w.write_record(r.fields())?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Invalid(format!("csv buffer: {e}")))?;
    String::from_utf8(bytes).map_err(|_| Error::Invalid("csv output is not UTF-8".into()))
}

/// Ordered `(metric, value)` pairs of the summary file.
pub fn summary(rows: &[ReportRow]) -> Vec<(&'static str, f64)> {
    let n = rows.len().max(1) as f64;
    let mean = |f: fn(&ReportRow) -> f64| rows.iter().map(f).sum::<f64>() / n;
    vec![
        ("episodes", rows.len() as f64),
        ("collision_rate", rows.iter().filter(|r| r.collision).count() as f64 / n),
        ("failure_rate", rows.iter().filter(|r| r.failure).count() as f64 / n),
        ("mean_off_route_max", mean(|r| r.off_route_max)),
        ("max_off_route_max", rows.iter().map(|r| r.off_route_max).fold(0.0, f64::max)),
        ("mean_progress", mean(|r| r.progress)),
        ("mean_max_abs_accel", mean(|r| r.max_abs_accel)),
        ("mean_max_abs_jerk", mean(|r| r.max_abs_jerk)),
    ]
}

pub fn summary_csv(rows: &[ReportRow]) -> String {
    let mut out = String::from("metric,value\n");
    for (k, v) in summary(rows) {
        let _ = writeln!(out, "{k},{}", num(v));
    }
    out
}

/// Writes the episode CSV and its summary next to it.
pub fn emit_report(reports: &[EpisodeReport], path: &Path) -> Result<Vec<ReportRow>> {
    if reports.is_empty() {
        return Err(Error::Invalid("no episodes to report".into()));
    }
    let rows: Vec<ReportRow> = reports.iter().enumerate().map(|(i, r)| ReportRow::from_report(i, r)).collect();
    write_atomic(path, episode_csv(&rows)?.as_bytes())?;
    write_atomic(&summary_path(path), summary_csv(&rows).as_bytes())?;
    Ok(rows)
}

fn parse_field<T: std::str::FromStr>(s: &str, col: &str, line: usize) -> Result<T> {
    s.parse().map_err(|_| Error::format("report", format!("line {line}: bad {col} value {s:?}")))
}

/// Parses an episode CSV; the header must match [`COLUMNS`] exactly.
pub fn parse_report(text: &str) -> Result<Vec<ReportRow>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let header = rdr.headers()?.clone();
    if header.iter().ne(COLUMNS.iter().copied()) {
        return Err(Error::format("report", format!("unexpected header {:?}", header.iter().collect::<Vec<_>>())));
    }
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = i + 2;
        if rec.len() != COLUMNS.len() {
            return Err(Error::format("report", format!("line {line}: {} fields", rec.len())));
        }
        let f = |k: usize| &rec[k];
        let float = |k: usize| -> Result<f64> {
            let v: f64 = parse_field(f(k), COLUMNS[k], line)?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(Error::format("report", format!("line {line}: non-finite {}", COLUMNS[k])))
            }
        };
        rows.push(ReportRow {
            episode: parse_field(f(0), COLUMNS[0], line)?,
            suite: f(1).to_string(),
            seed: parse_field(f(2), COLUMNS[2], line)?,
            ticks: parse_field(f(3), COLUMNS[3], line)?,
            collision: parse_field(f(4), COLUMNS[4], line)?,
            collision_tick: if f(5).is_empty() { None } else { Some(parse_field(f(5), COLUMNS[5], line)?) },
            off_route_max: float(6)?,
            failure: parse_field(f(7), COLUMNS[7], line)?,
            progress: float(8)?,
            max_abs_accel: float(9)?,
            max_abs_jerk: float(10)?,
        });
    }
    Ok(rows)
}

pub fn read_report(path: &Path) -> Result<Vec<ReportRow>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_report(&text)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Drawing scale (px per m) and margin (px).
const PX: f64 = 4.0;
const MARGIN: f64 = 20.0;

struct View {
    x0: f64,
    y1: f64,
    width: f64,
    height: f64,
}

impl View {
    /// Frames the ego trace with `pad` metres around it.
    fn around(points: impl Iterator<Item = [f64; 2]>, pad: f64) -> Self {
        let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
        for [x, y] in points {
            x0 = x0.min(x);
            x1 = x1.max(x);
            y0 = y0.min(y);
            y1 = y1.max(y);
        }
        if !x0.is_finite() {
            (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
        }
        let (x0, x1, y0, y1) = (x0 - pad, x1 + pad, y0 - pad, y1 + pad);
        Self { x0, y1, width: (x1 - x0) * PX + 2.0 * MARGIN, height: (y1 - y0) * PX + 2.0 * MARGIN }
    }

    fn px(&self, p: [f64; 2]) -> (f64, f64) {
        (MARGIN + (p[0] - self.x0) * PX, MARGIN + (self.y1 - p[1]) * PX)
    }

    fn polyline(&self, pts: &[[f64; 2]], style: &str) -> String {
        let coords: Vec<String> = pts
            .iter()
            .map(|&p| {
                let (x, y) = self.px(p);
                format!("{x:.2},{y:.2}")
            })
            .collect();
        format!("<polyline points=\"{}\" {style}/>\n", coords.join(" "))
    }

    fn rect(&self, p: Pose, length: f64, width: f64, style: &str) -> String {
        let (x, y) = self.px([p.x, p.y]);
        let deg = -p.heading.to_degrees();
        format!(
            "<rect x=\"{:.2}\" y=\"{:.2}\" width=\"{:.2}\" height=\"{:.2}\" transform=\"rotate({deg:.2} {x:.2} {y:.2})\" {style}/>\n",
            x - length * PX / 2.0,
            y - width * PX / 2.0,
            length * PX,
            width * PX
        )
    }
}

/// Map, agent traces, ego trace and every tenth plan of one episode.
pub fn episode_svg(r: &EpisodeReport) -> String {
    let ego: Vec<[f64; 2]> = r.trace.iter().map(|t| [t.ego.x, t.ego.y]).collect();
    let view = View::around(ego.iter().copied(), 40.0);
    let mut s = format!(
        "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{:.0}\" height=\"{:.0}\">\n",
        view.width, view.height
    );
    s.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    for lane in &r.map {
        s.push_str(&view.polyline(lane, "fill=\"none\" stroke=\"#bbbbbb\" stroke-width=\"1\""));
    }
    for &(p, l, w) in &r.statics {
        s.push_str(&view.rect(p, l, w, "fill=\"#777777\""));
    }
    let agents = r.trace.first().map_or(0, |t| t.agents.len());
    for a in 0..agents {
        let pts: Vec<[f64; 2]> = r.trace.iter().filter_map(|t| t.agents.get(a)).map(|p| [p.x, p.y]).collect();
        s.push_str(&view.polyline(&pts, "fill=\"none\" stroke=\"#3366cc\" stroke-width=\"1.5\""));
    }
    for t in r.trace.iter().step_by(10) {
        let pts: Vec<[f64; 2]> = t.plan.iter().map(|p| [p.x, p.y]).collect();
        s.push_str(&view.polyline(&pts, "fill=\"none\" stroke=\"#ff9900\" stroke-width=\"1\" stroke-opacity=\"0.7\""));
    }
    s.push_str(&view.polyline(&ego, "fill=\"none\" stroke=\"#cc0000\" stroke-width=\"2\""));
    if let (Some(tick), Some(last)) = (r.collision_tick, r.trace.last()) {
        let p = r.trace.get(tick).map_or(last.ego, |t| t.ego);
        let (x, y) = view.px([p.x, p.y]);
        s.push_str(&format!("<circle cx=\"{x:.2}\" cy=\"{y:.2}\" r=\"8\" fill=\"none\" stroke=\"black\" stroke-width=\"2\"/>\n"));
    }
    let title = format!(
        "{} seed {}: collision {}, off-route max {:.2} m, progress {:.1} m",
        r.suite, r.seed, r.collision, r.off_route_max, r.progress
    );
    s.push_str(&format!("<text x=\"{MARGIN}\" y=\"14\" font-size=\"12\" font-family=\"sans-serif\">{}</text>\n", escape(&title)));
    s.push_str("</svg>\n");
    s
}

/// Writes `episode_<i>.svg` for every report into `dir`.
pub fn write_episode_svgs(reports: &[EpisodeReport], dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::with_capacity(reports.len());
    for (i, r) in reports.iter().enumerate() {
        let path = dir.join(format!("episode_{i:03}.svg"));
        write_atomic(&path, episode_svg(r).as_bytes())?;
        out.push(path);
    }
    Ok(out)
}

/// Bar chart of one metric across episodes.
pub fn metric_svg(rows: &[ReportRow], title: &str, value: impl Fn(&ReportRow) -> f64, threshold: Option<f64>) -> String {
    let (bar, gap, h) = (14.0, 4.0, 200.0);
    let vmax = rows.iter().map(&value).chain(threshold).fold(0.0, f64::max).max(1e-9);
    let width = 2.0 * MARGIN + rows.len() as f64 * (bar + gap) + 60.0;
    let height = h + 2.0 * MARGIN + 30.0;
    let mut s = format!(
        "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width:.0}\" height=\"{height:.0}\">\n"
    );
    s.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    let base = MARGIN + 20.0 + h;
    for (i, r) in rows.iter().enumerate() {
        let v = value(r);
        let bh = v / vmax * h;
        let x = MARGIN + 50.0 + i as f64 * (bar + gap);
        let fill = if r.collision { "#cc0000" } else { "#3366cc" };
        s.push_str(&format!("<rect x=\"{x:.2}\" y=\"{:.2}\" width=\"{bar}\" height=\"{bh:.2}\" fill=\"{fill}\"/>\n", base - bh));
    }
    if let Some(t) = threshold {
        let y = base - t / vmax * h;
        s.push_str(&format!(
            "<line x1=\"{:.2}\" y1=\"{y:.2}\" x2=\"{:.2}\" y2=\"{y:.2}\" stroke=\"black\" stroke-dasharray=\"4 2\"/>\n",
            MARGIN + 50.0,
            width - MARGIN
        ));
    }
    s.push_str(&format!("<text x=\"{MARGIN}\" y=\"{:.2}\" font-size=\"10\" font-family=\"sans-serif\">{vmax:.3}</text>\n", base - h));
    s.push_str(&format!("<text x=\"{MARGIN}\" y=\"{base:.2}\" font-size=\"10\" font-family=\"sans-serif\">0</text>\n"));
    s.push_str(&format!("<text x=\"{MARGIN}\" y=\"14\" font-size=\"12\" font-family=\"sans-serif\">{}</text>\n", escape(title)));
    s.push_str("</svg>\n");
    s
}

/// Metric charts for a report file, one SVG per metric.
pub fn plot(report: &Path, out: &Path) -> Result<Vec<PathBuf>> {
    let rows = read_report(report)?;
    if rows.is_empty() {
        return Err(Error::Invalid(format!("{} has no episodes", report.display())));
    }
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let charts: [(&str, &str, fn(&ReportRow) -> f64, Option<f64>); 4] = [
        ("off_route_max", "off-route max (m)", |r| r.off_route_max, Some(super::rollout::OFF_ROUTE_FAILURE)),
        ("progress", "progress (m)", |r| r.progress, None),
        ("max_abs_accel", "max |accel| (m/s^2)", |r| r.max_abs_accel, None),
        ("max_abs_jerk", "max |jerk| (m/s^3)", |r| r.max_abs_jerk, None),
    ];
    let mut paths = Vec::new();
    for (name, title, f, threshold) in charts {
        let path = out.join(format!("{name}.svg"));
        write_atomic(&path, metric_svg(&rows, title, f, threshold).as_bytes())?;
        paths.push(path);
    }
    Ok(paths)
}
