use std::path::Path;
use std::process::{Command, Output};

fn fp(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_flowplanner")).args(args).current_dir(cwd).output().expect("spawn flowplanner")
}

fn ok(args: &[&str], cwd: &Path) -> Output {
    let out = fp(args, cwd);
    assert!(out.status.success(), "{args:?} failed:\n{}", String::from_utf8_lossy(&out.stderr));
    out
}

fn err(args: &[&str], cwd: &Path) -> String {
    let out = fp(args, cwd);
    assert!(!out.status.success(), "{args:?} unexpectedly succeeded");
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Batch 4 and one-second episodes keep the runs short.
const CONFIG: &str = "profile = desk\nbatch_size = 4\nepisode_seconds = 1.0\n";

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("desk.conf"), CONFIG).unwrap();
    std::fs::write(dir.path().join("paper.conf"), "profile = paper\n").unwrap();
    dir
}

#[test]
fn full_pipeline_is_deterministic() {
    let dir = setup();
    let d = dir.path();
    let read = |name: &str| std::fs::read(d.join(name)).unwrap();
    for tag in ["a", "b"] {
        let data = format!("{tag}.fpds");
        let ckpt = format!("{tag}.fpck");
        let report = format!("{tag}.csv");
        ok(&["gen-data", "--suite", "straight,lane-change", "--num", "8", "--seed", "3", "--out", &data, "--config", "desk.conf"], d);
        ok(&["train", "--data", &data, "--config", "desk.conf", "--steps", "3", "--out", &ckpt], d);
        ok(
            &[
                "rollout", "--ckpt", &ckpt, "--suite", "straight", "--episodes", "2", "--seed", "40", "--omega", "1.8", "--report",
                &report, "--svg-dir", tag,
            ],
            d,
        );
    }
    assert_eq!(read("a.fpds"), read("b.fpds"));
    assert_eq!(read("a.fpck"), read("b.fpck"));
    assert_eq!(read("a.csv"), read("b.csv"));
    assert_eq!(read("a_summary.csv"), read("b_summary.csv"));
    assert!(d.join("a/episode_000.svg").exists() && d.join("a/episode_001.svg").exists());

    let csv = String::from_utf8(read("a.csv")).unwrap();
    assert!(csv.starts_with("episode,suite,seed,ticks,collision,collision_tick,off_route_max,failure,progress,max_abs_accel,max_abs_jerk\n"));
    assert_eq!(csv.lines().count(), 3);
    let summary = String::from_utf8(read("a_summary.csv")).unwrap();
    assert!(summary.lines().any(|l| l.starts_with("collision_rate,")));

    ok(&["plot", "--report", "a.csv", "--out", "plots"], d);
    for m in ["off_route_max", "progress", "max_abs_accel", "max_abs_jerk"] {
        assert!(d.join(format!("plots/{m}.svg")).exists(), "{m}");
    }
}

#[test]
fn resume_continues_training_and_sample_writes_a_plan() {
    let dir = setup();
    let d = dir.path();
    ok(&["gen-data", "--suite", "straight", "--num", "6", "--seed", "1", "--out", "d.fpds", "--config", "desk.conf"], d);
    ok(&["train", "--data", "d.fpds", "--config", "desk.conf", "--steps", "2", "--out", "two.fpck"], d);
    ok(&["train", "--data", "d.fpds", "--config", "desk.conf", "--steps", "1", "--out", "three.fpck", "--resume", "two.fpck"], d);
    ok(&["train", "--data", "d.fpds", "--config", "desk.conf", "--steps", "3", "--out", "direct.fpck"], d);
    // Keyed randomness makes 2 + 1 resumed steps identical to 3 straight ones.
    assert_eq!(std::fs::read(d.join("three.fpck")).unwrap(), std::fs::read(d.join("direct.fpck")).unwrap());

    ok(&["sample", "--ckpt", "three.fpck", "--scenario-index", "2", "--omega", "1.8", "--ode-steps", "4", "--out", "plan.csv"], d);
    let plan = std::fs::read_to_string(d.join("plan.csv")).unwrap();
    let mut lines = plan.lines();
    assert_eq!(lines.next(), Some("step,time,x,y,heading,expert_x,expert_y,expert_heading"));
    assert_eq!(lines.count(), 80);
}

#[test]
fn errors_are_reported() {
    let dir = setup();
    let d = dir.path();
    ok(&["gen-data", "--suite", "straight", "--num", "4", "--seed", "1", "--out", "d.fpds", "--config", "desk.conf"], d);
    ok(&["train", "--data", "d.fpds", "--config", "desk.conf", "--steps", "1", "--out", "c.fpck"], d);

    let msg = err(&["train", "--data", "d.fpds", "--config", "paper.conf", "--steps", "1", "--out", "x.fpck", "--resume", "c.fpck"], d);
    assert!(msg.contains("different architecture") && msg.contains("decoder_hidden: 64 -> 256"), "{msg}");

    let bytes = std::fs::read(d.join("c.fpck")).unwrap();
    std::fs::write(d.join("cut.fpck"), &bytes[..bytes.len() / 3]).unwrap();
    let msg = err(&["rollout", "--ckpt", "cut.fpck", "--suite", "straight", "--episodes", "1", "--seed", "0", "--omega", "1.8", "--report", "r.csv"], d);
    assert!(msg.contains("checkpoint") && msg.contains("truncated"), "{msg}");

    let msg = err(&["gen-data", "--suite", "highway", "--num", "4", "--seed", "1", "--out", "x.fpds", "--config", "desk.conf"], d);
    assert!(msg.contains("highway"), "{msg}");

    std::fs::write(d.join("bad.conf"), "profile = desk\nwarp_speed = 9\n").unwrap();
    let msg = err(&["gen-data", "--suite", "straight", "--num", "4", "--seed", "1", "--out", "x.fpds", "--config", "bad.conf"], d);
    assert!(msg.contains("warp_speed"), "{msg}");

    let msg = err(&["plot", "--report", "missing.csv", "--out", "p"], d);
    assert!(msg.contains("missing.csv"), "{msg}");
}
