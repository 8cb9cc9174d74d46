use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn vrbsim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vrbsim"))
        .args(args)
        .output()
        .expect("spawn vrbsim")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn list_shows_bundled_scenarios() {
    let o = vrbsim(&["list"]);
    assert!(o.status.success());
    let text = stdout(&o);
    for name in ["triangle_establish", "table2_mission", "table3_mission", "cube_establish", "six_agent_hexagon"] {
        assert!(text.lines().any(|l| l == name), "{name} missing from\n{text}");
    }
}

#[test]
fn check_cube_reports_rigidity() {
    let o = vrbsim(&["check", "cube_establish"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("rank 18 / required 18, rigid: yes"), "{text}");
    assert!(text.contains("gains:"), "{text}");
}

#[test]
fn check_partial_line() {
    let o = vrbsim(&["check", "two_agent_line"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("(partial)"));
}

#[test]
fn run_writes_logs() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("tri");
    let o = vrbsim(&["run", "triangle_establish", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("outcome: completed"));
    for f in ["agents.csv", "constraints.csv", "vrb.csv", "inputs.csv", "audit.txt"] {
        assert!(out.join(f).is_file(), "{f}");
    }
    let c = fs::read_to_string(out.join("constraints.csv")).unwrap();
    assert_eq!(c.lines().count(), 2002);
    assert!(c.starts_with("t,c_1_2,c_1_3,c_2_3,d_1_2,d_1_3,d_2_3\n"));
}

#[test]
fn invalid_scenario_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let o = vrbsim(&["run", "triangle_establish", "--set", "agents.1.mass=-1", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("agents[1].mass"), "{}", stderr(&o));

    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "name = \"x\"\nagents = 3\n").unwrap();
    assert_eq!(vrbsim(&["check", bad.to_str().unwrap()]).status.code(), Some(1));
    assert_eq!(vrbsim(&["check", "no_such_scenario"]).status.code(), Some(1));
}

#[test]
fn timeout_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let o = vrbsim(&["run", "table2_mission", "--t-end", "5", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stdout(&o).contains("outcome: timeout"));
    assert!(stdout(&o).contains("waypoint 1: not reached"));
}

#[test]
fn dump_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let o = vrbsim(&["dump", "table3_mission", "--dt", "0.02"]);
    assert!(o.status.success());
    let path = dir.path().join("dumped.toml");
    fs::write(&path, stdout(&o)).unwrap();
    let again = vrbsim(&["dump", path.to_str().unwrap()]);
    assert!(again.status.success(), "{}", stderr(&again));
    assert_eq!(stdout(&o), stdout(&again));
    assert!(stdout(&o).contains("dt = 0.02"));
}

#[test]
fn sweep_writes_one_directory_per_value() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    let o = vrbsim(&[
        "sweep",
        "triangle_establish",
        "--param",
        "constraints.gains.alpha",
        "--values",
        "1.5",
        "2",
        "2.5",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    for v in ["1.5", "2", "2.5"] {
        let sub = out.join(format!("constraints.gains.alpha={v}"));
        assert!(Path::new(&sub).join("vrb.csv").is_file(), "{v}");
        assert!(stdout(&o).contains(&format!("constraints.gains.alpha={v}: completed")));
    }
}
