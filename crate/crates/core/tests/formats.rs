//! FPDS, FPCK, report CSV and SVG outputs.

use std::path::Path;

use flow_planner::config::Config;
use flow_planner::encoder::encode_scene;
use flow_planner::error::Error;
use flow_planner::harness::report::{episode_csv, episode_svg, parse_report, plot, summary_csv, ReportRow, COLUMNS};
use flow_planner::harness::rollout::{run_episode, PlannerKind};
use flow_planner::model::Model;
use flow_planner::scenario::dataset::Dataset;
use flow_planner::scenario::{gen_scenario, NormStats, Suite, SuiteSpec};
use flow_planner::training::TrainState;

fn small_dataset() -> Dataset {
    Dataset::generate(&Suite::ALL, 5, 11, &Config::desk()).unwrap()
}

#[test]
fn fpds_round_trips_bitwise() {
    let ds = small_dataset();
    let bytes = ds.encode().unwrap();
    assert_eq!(&bytes[..4], b"FPDS");
    let back = Dataset::decode(&bytes).unwrap();
    assert_eq!(back, ds);
    assert_eq!(back.encode().unwrap(), bytes);
}

#[test]
fn fpds_rejects_damaged_files() {
    let bytes = small_dataset().encode().unwrap();
    for cut in [0, 3, 4, 8, 20, bytes.len() / 2, bytes.len() - 1] {
        assert!(Dataset::decode(&bytes[..cut]).is_err(), "cut at {cut}");
    }
    let mut magic = bytes.clone();
    magic[0] = b'X';
    assert!(matches!(Dataset::decode(&magic), Err(Error::Format { .. })));
    let mut version = bytes.clone();
    version[4] = 99;
    let msg = Dataset::decode(&version).unwrap_err().to_string();
    assert!(msg.contains("version"), "{msg}");
    let mut trailing = bytes;
    trailing.push(0);
    assert!(Dataset::decode(&trailing).is_err());
}

fn stats() -> NormStats {
    NormStats::new(30.0, 20.0, 2.0).unwrap()
}

#[test]
fn fpck_round_trips_bitwise() {
    let state = TrainState::new(&Config::desk(), stats()).unwrap();
    let bytes = state.encode().unwrap();
    assert_eq!(&bytes[..4], b"FPCK");
    let back = TrainState::decode(&bytes).unwrap();
    assert_eq!(back.encode().unwrap(), bytes);
    assert_eq!(back.params, state.params);
    assert_eq!(back.stats, state.stats);
    assert_eq!(back.model, state.model);
}

#[test]
fn fpck_rejects_truncation() {
    let bytes = TrainState::new(&Config::desk(), stats()).unwrap().encode().unwrap();
    for cut in [2, 10, 40, bytes.len() / 2, bytes.len() - 1] {
        let msg = match TrainState::decode(&bytes[..cut]) {
            Err(e) => e.to_string(),
            Ok(_) => panic!("cut at {cut} accepted"),
        };
        assert!(msg.contains("checkpoint"), "{msg}");
    }
}

#[test]
fn paper_checkpoint_under_desk_config_is_a_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("paper.fpck");
    TrainState::new(&Config::paper(), stats()).unwrap().save(&path).unwrap();
    match TrainState::load_for(&path, &Config::desk()) {
        Err(Error::ConfigMismatch(diff)) => {
            assert!(diff.contains("decoder_hidden: 256 -> 64"), "{diff}");
        }
        Err(e) => panic!("wrong error {e}"),
        Ok(_) => panic!("accepted a paper checkpoint under the desk config"),
    }
    // The matching config loads.
    TrainState::load_for(&path, &Config::paper()).unwrap();
}

fn rows() -> Vec<ReportRow> {
    vec![
        ReportRow {
            episode: 0,
            suite: "straight".into(),
            seed: 7,
            ticks: 80,
            collision: false,
            collision_tick: None,
            off_route_max: 0.25,
            failure: false,
            progress: 71.5,
            max_abs_accel: 1.5,
            max_abs_jerk: 3.0,
        },
        ReportRow {
            episode: 1,
            suite: "jaywalk".into(),
            seed: 8,
            ticks: 80,
            collision: true,
            collision_tick: Some(41),
            off_route_max: 3.0,
            failure: true,
            progress: 20.0,
            max_abs_accel: 6.0,
            max_abs_jerk: 12.5,
        },
    ]
}

const GOLDEN_CSV: &str = "\
episode,suite,seed,ticks,collision,collision_tick,off_route_max,failure,progress,max_abs_accel,max_abs_jerk
0,straight,7,80,false,,0.25,false,71.5,1.5,3.0
1,jaywalk,8,80,true,41,3.0,true,20.0,6.0,12.5
";

#[test]
fn report_csv_matches_golden() {
    let csv = episode_csv(&rows()).unwrap();
    assert_eq!(csv, GOLDEN_CSV);
    assert_eq!(csv.lines().next().unwrap(), COLUMNS.join(","));
    assert_eq!(parse_report(&csv).unwrap(), rows());
}

#[test]
fn summary_csv_matches_golden() {
    let expected = "\
metric,value
episodes,2.0
collision_rate,0.5
failure_rate,0.5
mean_off_route_max,1.625
max_off_route_max,3.0
mean_progress,45.75
mean_max_abs_accel,3.75
mean_max_abs_jerk,7.75
";
    assert_eq!(summary_csv(&rows()), expected);
}

#[test]
fn report_parser_rejects_bad_input() {
    let bad_header = GOLDEN_CSV.replacen("episode,", "ep,", 1);
    assert!(parse_report(&bad_header).is_err());
    let nan = GOLDEN_CSV.replace("0.25", "NaN");
    assert!(parse_report(&nan).is_err());
    let short = GOLDEN_CSV.replace(",12.5", "");
    assert!(parse_report(&short).is_err());
    let tick = GOLDEN_CSV.replace(",41,", ",forty,");
    assert!(parse_report(&tick).is_err());
}

fn assert_well_formed(svg: &str) {
    let mut reader = quick_xml::Reader::from_str(svg);
    let mut depth = 0i64;
    let mut saw_svg = false;
    loop {
        match reader.read_event().expect("well-formed xml") {
            quick_xml::events::Event::Start(e) => {
                saw_svg |= e.name().as_ref() == b"svg";
                depth += 1;
            }
            quick_xml::events::Event::End(_) => depth -= 1,
            quick_xml::events::Event::Eof => break,
            _ => {}
        }
    }
    assert!(saw_svg);
    assert_eq!(depth, 0);
}

#[test]
fn svgs_are_well_formed() {
    let mut cfg = Config::desk();
    cfg.episode_seconds = 3.0;
    for suite in Suite::ALL {
        let r = run_episode(suite, 2, &cfg, PlannerKind::Expert).unwrap();
        assert_well_formed(&episode_svg(&r));
    }
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("r.csv");
    std::fs::write(&report, GOLDEN_CSV).unwrap();
    let out = plot(&report, &dir.path().join("plots")).unwrap();
    assert_eq!(out.len(), 4);
    for p in out {
        assert_well_formed(&std::fs::read_to_string(p).unwrap());
    }
}

/// Encoder outputs for a fixed scene and fixed initial weights. Regenerate
/// with `UPDATE_GOLDEN=1` after an intentional change.
#[test]
fn encoder_tokens_match_golden() {
    let cfg = Config::desk();
    let (model, params) = Model::init(&cfg, 5).unwrap();
    let frame = gen_scenario(&SuiteSpec::new(Suite::Merge), 3, &cfg).unwrap();
    let frame = frame.normalized(&stats()).unwrap();
    let tokens = encode_scene(&frame, &params, &model.arch.encoder, &cfg).unwrap();
    let mut lines = Vec::new();
    for (name, t) in [
        ("lane", &tokens.lane_tokens),
        ("neighbor", &tokens.neighbor_tokens),
        ("static", &tokens.static_tokens),
        ("nav", &tokens.nav_vector),
    ] {
        let d = t.data();
        let sum: f64 = d.iter().sum();
        let abs: f64 = d.iter().map(|v| v.abs()).sum();
        let head: Vec<String> = d.iter().take(4).map(|v| format!("{v:.12e}")).collect();
        lines.push(format!("{name} {:?} sum={sum:.12e} abs={abs:.12e} head={}", t.shape(), head.join(",")));
    }
    let mask = |m: &[bool]| m.iter().map(|&b| if b { '1' } else { '0' }).collect::<String>();
    lines.push(format!("masks lane={} neighbor={} static={}", mask(&tokens.lane_mask), mask(&tokens.neighbor_mask), mask(&tokens.static_mask)));
    let got = lines.join("\n") + "\n";

    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden/encoder_tokens.txt");
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        std::fs::write(&path, &got).unwrap();
    }
    let want = std::fs::read_to_string(&path).expect("golden file; run once with UPDATE_GOLDEN=1");
    for (g, w) in got.lines().zip(want.lines()) {
        compare_line(g, w);
    }
    assert_eq!(got.lines().count(), want.lines().count());
}

/// Numbers compare to 1e-9 relative so the golden survives GEMM
/// summation-order differences across machines; everything else exactly.
fn compare_line(got: &str, want: &str) {
    let split = |s: &str| s.split(|c: char| c == ' ' || c == ',' || c == '=').map(str::to_owned).collect::<Vec<_>>();
    let (g, w) = (split(got), split(want));
    assert_eq!(g.len(), w.len(), "{got}\n{want}");
    for (a, b) in g.iter().zip(&w) {
        match (a.parse::<f64>(), b.parse::<f64>()) {
            (Ok(x), Ok(y)) if a.contains('e') => {
                assert!((x - y).abs() <= 1e-9 * y.abs().max(1.0), "{got}\n{want}");
            }
            _ => assert_eq!(a, b, "{got}\n{want}"),
        }
    }
}

/// The fuzz seed corpora must stay valid inputs, and each must pass the same
/// round-trip check its fuzz target applies.
#[test]
fn fuzz_seed_corpora_round_trip() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus");
    let files = |target: &str| {
        let mut v: Vec<_> = std::fs::read_dir(root.join(target)).unwrap().map(|e| e.unwrap().path()).collect();
        v.sort();
        assert!(!v.is_empty(), "empty corpus for {target}");
        v.into_iter().map(|p| std::fs::read(p).unwrap())
    };
    for bytes in files("fpds") {
        assert_eq!(Dataset::decode(&bytes).unwrap().encode().unwrap(), bytes);
    }
    for bytes in files("fpck") {
        assert_eq!(TrainState::decode(&bytes).unwrap().encode().unwrap(), bytes);
    }
    for bytes in files("config") {
        let cfg = Config::parse(std::str::from_utf8(&bytes).unwrap()).unwrap();
        assert_eq!(Config::parse(&cfg.to_text()).unwrap(), cfg);
    }
    for bytes in files("report_csv") {
        let rows = parse_report(std::str::from_utf8(&bytes).unwrap()).unwrap();
        assert_eq!(parse_report(&episode_csv(&rows).unwrap()).unwrap(), rows);
    }
}
