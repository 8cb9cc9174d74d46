//! CSV and text writers for mission logs. Column layouts are documented in
//! `docs/csv_columns.md`. Floats are written in shortest round-trip form.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;

use crate::sim::{momentum_energy_audit, Outcome, SimLog};

pub const FILES: [&str; 5] = ["agents.csv", "constraints.csv", "vrb.csv", "inputs.csv", "audit.txt"];

fn xyz(prefix: &str) -> [String; 3] {
    [format!("{prefix}_x"), format!("{prefix}_y"), format!("{prefix}_z")]
}

fn push(line: &mut String, x: f64) {
    let _ = write!(line, ",{x}");
}

fn push3(line: &mut String, v: &nalgebra::Vector3<f64>) {
    for x in v.iter() {
        push(line, *x);
    }
}

pub fn agents_csv(log: &SimLog) -> String {
    let n = log.masses.len();
    let mut head = vec!["t".to_string()];
    for i in 1..=n {
        for p in ["r", "v", "fext", "fc", "fu"] {
            head.extend(xyz(&format!("{p}{i}")));
        }
    }
    let mut out = head.join(",") + "\n";
    for row in &log.rows {
        let mut line = format!("{}", row.t);
        for i in 0..n {
            for v in [&row.positions[i], &row.velocities[i], &row.f_ext[i], &row.f_c[i], &row.f_u[i]] {
                push3(&mut line, v);
            }
        }
        out += &line;
        out.push('\n');
    }
    out
}

pub fn constraints_csv(log: &SimLog) -> String {
    let mut head = vec!["t".to_string()];
    head.extend(log.pairs.iter().map(|(i, j)| format!("c_{}_{}", i + 1, j + 1)));
    head.extend(log.pairs.iter().map(|(i, j)| format!("d_{}_{}", i + 1, j + 1)));
    let mut out = head.join(",") + "\n";
    for row in &log.rows {
        let mut line = format!("{}", row.t);
        for x in row.c.iter().chain(&row.d_des) {
            push(&mut line, *x);
        }
        out += &line;
        out.push('\n');
    }
    out
}

pub fn vrb_csv(log: &SimLog) -> String {
    let mut head: Vec<String> = ["t", "phase", "schedule", "attached"].map(String::from).to_vec();
    head.extend(xyz("r_cm"));
    head.extend(xyz("v_cm"));
    head.extend(["q_w", "q_x", "q_y", "q_z", "roll_deg", "pitch_deg", "yaw_deg"].map(String::from));
    head.extend(["omega_x_dps", "omega_y_dps", "omega_z_dps"].map(String::from));
    let mut out = head.join(",") + "\n";
    for row in &log.rows {
        let mut line = format!("{},{},{},{}", row.t, row.phase, row.schedule, u8::from(row.attached));
        push3(&mut line, &row.r_cm);
        push3(&mut line, &row.v_cm);
        for x in [row.q.w, row.q.i, row.q.j, row.q.k] {
            push(&mut line, x);
        }
        push3(&mut line, &row.euler_deg());
        push3(&mut line, &row.omega_b.map(f64::to_degrees));
        out += &line;
        out.push('\n');
    }
    out
}

pub fn inputs_csv(log: &SimLog) -> String {
    let n = log.masses.len();
    let mut head = vec!["t".to_string()];
    head.extend((1..=n).map(|i| format!("u{i}")));
    head.extend(xyz("cmd_f"));
    head.extend(xyz("cmd_tau"));
    head.extend(xyz("ach_f"));
    head.extend(xyz("ach_tau"));
    head.push("tapered".into());
    let mut out = head.join(",") + "\n";
    for row in &log.rows {
        let mut line = format!("{}", row.t);
        for f in &row.f_u {
            push(&mut line, f.norm());
        }
        for v in [
            &row.commanded.f_cm_b,
            &row.commanded.tau_cm_b,
            &row.achieved.f_cm_b,
            &row.achieved.tau_cm_b,
        ] {
            push3(&mut line, v);
        }
        let _ = write!(line, ",{}", row.tapered);
        out += &line;
        out.push('\n');
    }
    out
}

pub fn audit_txt(log: &SimLog) -> String {
    let mut out = format!("scenario {}\n", log.scenario);
    let outcome = match &log.outcome {
        Outcome::Completed => "completed".to_string(),
        Outcome::Timeout => "timeout".to_string(),
        Outcome::Failed(e) => format!("failed: {e}"),
    };
    let _ = writeln!(out, "outcome {outcome}");
    match log.established_at {
        Some(t) => {
            let _ = writeln!(out, "established at {t} s");
        }
        None => out += "never established\n",
    }
    for (label, t) in log.waypoint_labels.iter().zip(&log.waypoint_times) {
        match t {
            Some(t) => {
                let _ = writeln!(out, "waypoint {label} reached at {t} s");
            }
            None => {
                let _ = writeln!(out, "waypoint {label} not reached");
            }
        }
    }
    out += "\n";
    out += &momentum_energy_audit(log).to_string();
    out += "\nevents\n";
    for e in &log.events {
        let _ = writeln!(out, "{:>10.3}  {}", e.t, e.message);
    }
    out
}

pub fn write_log(log: &SimLog, out_dir: &Path) -> io::Result<()> {
    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join("agents.csv"), agents_csv(log))?;
    fs::write(out_dir.join("constraints.csv"), constraints_csv(log))?;
    fs::write(out_dir.join("vrb.csv"), vrb_csv(log))?;
    fs::write(out_dir.join("inputs.csv"), inputs_csv(log))?;
    fs::write(out_dir.join("audit.txt"), audit_txt(log))
}
