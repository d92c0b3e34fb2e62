use std::fmt::Write as _;
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use flow_planner::config::Config;
use flow_planner::error::{Error, Result};
use flow_planner::flow::{keyed_rng, sample, SampleOptions};
use flow_planner::harness::report::{emit_report, plot, summary, summary_path, write_episode_svgs};
use flow_planner::harness::rollout::run_model_episodes;
use flow_planner::scenario::dataset::Dataset;
use flow_planner::scenario::{gen_scenario, parse_suites, Suite, SuiteSpec};
use flow_planner::training::{train, TrainData, TrainState};

/// Stream identifier for `sample` noise.
const KEY_SAMPLE: u64 = 12;

#[derive(Parser)]
#[command(name = "flowplanner", version, about = "Flow-matching trajectory planner")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic FPDS dataset.
    GenData {
        /// Suite name, or several separated by commas (drawn uniformly).
        #[arg(long)]
        suite: String,
        #[arg(long)]
        num: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: PathBuf,
    },
    /// Train for a number of steps and write an FPCK checkpoint.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: PathBuf,
        /// Steps to run, counted from the resumed step if any.
        #[arg(long)]
        steps: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Sample one plan for scenario I and write it as CSV.
    Sample {
        #[arg(long)]
        ckpt: PathBuf,
        /// Scenario I uses suite number I mod 5 (straight, lane-change,
        /// merge, intersection, jaywalk) and layout seed I.
        #[arg(long)]
        scenario_index: u64,
        #[arg(long)]
        omega: f64,
        #[arg(long)]
        ode_steps: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Closed-loop episodes with layout seeds K, K+1, ...
    Rollout {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        suite: Suite,
        #[arg(long)]
        episodes: u64,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        omega: f64,
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        svg_dir: Option<PathBuf>,
    },
    /// Metric charts from a rollout report.
    Plot {
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn gen_data(suite: &str, num: usize, seed: u64, out: &Path, config: &Path) -> Result<()> {
    let cfg = Config::load(config)?;
    let suites = parse_suites(suite)?;
    let ds = Dataset::generate(&suites, num, seed, &cfg)?;
    ds.write(out)?;
    eprintln!("wrote {} samples to {}", ds.len(), out.display());
    Ok(())
}

fn run_train(data: &Path, config: &Path, steps: u64, out: &Path, resume: Option<&Path>) -> Result<()> {
    let cfg = Config::load(config)?;
    let resumed = resume.map(|path| TrainState::load_for(path, &cfg)).transpose()?;
    let ds = Dataset::read(data)?;
    let data = TrainData::new(&ds, &cfg)?;
    let mut state = match resumed {
        Some(mut s) => {
            s.check_stats(&data.stats)?;
            // Non-architectural settings (learning rate, batch size, ...)
            // come from the config given now.
            s.model.cfg = cfg.clone();
            s
        }
        None => TrainState::new(&cfg, data.stats.clone())?,
    };
    let start = state.step;
    let mut running = 0.0;
    train(&mut state, &data, steps, |s, parts| {
        running += parts.total;
        let done = s.step - start;
        if done % 100 == 0 || done == steps {
            let n = if done % 100 == 0 { 100 } else { done % 100 };
            eprintln!("step {} loss {:.5}", s.step, running / n as f64);
            running = 0.0;
        }
        ControlFlow::Continue(())
    })?;
    state.save(out)?;
    eprintln!("wrote checkpoint at step {} to {}", state.step, out.display());
    Ok(())
}

fn run_sample(ckpt: &Path, index: u64, omega: f64, ode_steps: usize, out: &Path) -> Result<()> {
    let state = TrainState::load(ckpt)?;
    let cfg = state.cfg();
    let suite = Suite::ALL[(index % Suite::ALL.len() as u64) as usize];
    let metric = gen_scenario(&SuiteSpec::new(suite), index, cfg)?;
    let frame = metric.normalized(&state.stats)?;
    let opts = SampleOptions { omega, steps: ode_steps, ..SampleOptions::from_config(cfg) };
    let mut rng = keyed_rng(&[cfg.seed, KEY_SAMPLE, index]);
    let plan = sample(&state.model, &state.ema, &frame, opts, &mut rng)?;
    let expert = metric.future.as_ref().map(|f| f.points.as_slice()).unwrap_or_default();
    let mut text = String::from("step,time,x,y,heading,expert_x,expert_y,expert_heading\n");
    for (i, p) in plan.points.iter().enumerate() {
        let e = expert.get(i);
        let col = |f: fn(&flow_planner::scenario::Pose) -> f64| e.map(|e| format!("{:?}", f(e))).unwrap_or_default();
        let _ = writeln!(
            text,
            "{i},{:?},{:?},{:?},{:?},{},{},{}",
            i as f64 * flow_planner::scenario::DT,
            p.x,
            p.y,
            p.heading,
            col(|e| e.x),
            col(|e| e.y),
            col(|e| e.heading)
        );
    }
    std::fs::write(out, text).map_err(|source| Error::Io { path: out.to_path_buf(), source })?;
    eprintln!("wrote {} {suite} poses to {}", plan.len(), out.display());
    Ok(())
}

fn run_rollout(ckpt: &Path, suite: Suite, episodes: u64, seed: u64, omega: f64, report: &Path, svg_dir: Option<&Path>) -> Result<()> {
    if episodes == 0 {
        return Err(Error::Invalid("--episodes must be at least 1".into()));
    }
    let state = TrainState::load(ckpt)?;
    let opts = SampleOptions { omega, ..SampleOptions::from_config(state.cfg()) };
    let seeds: Vec<u64> = (0..episodes).map(|i| seed + i).collect();
    let reports = run_model_episodes(suite, &seeds, &state.model, &state.ema, &state.stats, opts, seed)?;
    let rows = emit_report(&reports, report)?;
    if let Some(dir) = svg_dir {
        write_episode_svgs(&reports, dir)?;
    }
    for (k, v) in summary(&rows) {
        eprintln!("{k} = {v}");
    }
    eprintln!("wrote {} and {}", report.display(), summary_path(report).display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { suite, num, seed, out, config } => gen_data(&suite, num, seed, &out, &config),
        Command::Train { data, config, steps, out, resume } => run_train(&data, &config, steps, &out, resume.as_deref()),
        Command::Sample { ckpt, scenario_index, omega, ode_steps, out } => run_sample(&ckpt, scenario_index, omega, ode_steps, &out),
        Command::Rollout { ckpt, suite, episodes, seed, omega, report, svg_dir } => {
            run_rollout(&ckpt, suite, episodes, seed, omega, &report, svg_dir.as_deref())
        }
        Command::Plot { report, out } => {
            for p in plot(&report, &out)? {
                eprintln!("wrote {}", p.display());
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
