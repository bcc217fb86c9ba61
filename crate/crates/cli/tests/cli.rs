use std::path::PathBuf;
use std::process::{Command, Output};

use dlr_core::hierarchy::{AggregationTree, TreeNode};
use dlr_core::{io, StaircaseSignal};
use tempfile::TempDir;

const TABLE1: &str = "p_max_mw,x_h,p_charge_mw,eta\n3,4,4,0.7\n3,2,3,0.6\n6,1,3,0.9\n";

fn dlr(args: &[&str]) -> Output {
    dlr_env(args, None)
}

fn dlr_env(args: &[&str], tol: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_dlr"));
    cmd.args(args).env_remove("DLR_TOL");
    if let Some(t) = tol {
        cmd.env("DLR_TOL", t);
    }
    cmd.output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

struct Work {
    dir: TempDir,
}

impl Work {
    fn new() -> Self {
        Work { dir: tempfile::tempdir().unwrap() }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn s(&self, name: &str) -> String {
        self.path(name).to_string_lossy().into_owned()
    }

    fn write(&self, name: &str, text: &str) -> String {
        std::fs::write(self.path(name), text).unwrap();
        self.s(name)
    }

    fn read(&self, name: &str) -> String {
        std::fs::read_to_string(self.path(name)).unwrap()
    }

    /// Table I fleet, its packet, an Ed = 8 reservation and a boundary cycle for it.
    fn table1_cycle(&self) {
        let fleet = self.write("fleet.csv", TABLE1);
        assert!(dlr(&["packet", "--fleet", &fleet, "--out", &self.s("p.json")]).status.success());
        let o = dlr(&["reserve", "--packet", &self.s("p.json"), "--energy", "8", "--out", &self.s("r.json")]);
        assert!(o.status.success(), "{}", stderr(&o));
        let r = io::read_reservation(&self.read("r.json")).unwrap();
        let (bound, er) = r.recharge_virtual_battery();
        // Truncated fleet: 12 MW for 2/3 h, averaged over half-hour steps.
        let mut levels = vec![12.0, 4.0];
        let mut left = er;
        while left > 1e-9 {
            let l = bound.min(left / 0.5);
            levels.push(-l);
            left -= l * 0.5;
        }
        self.write("s.csv", &io::write_signal(&StaircaseSignal::new(0.5, levels).unwrap()));
    }
}

fn exit(o: &Output) -> i32 {
    o.status.code().unwrap()
}

#[test]
fn packet_summary_and_csv_tables() {
    let w = Work::new();
    let fleet = w.write("fleet.csv", TABLE1);
    let o = dlr(&["packet", "--fleet", &fleet, "--out", &w.s("p.json"), "--csv-dir", &w.s("tables")]);
    assert_eq!(exit(&o), 0, "{}", stderr(&o));
    let summary: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(summary["n_devices"], 3);
    assert_eq!(summary["total_energy_mwh"], 24.0);
    assert_eq!(summary["p_max_mw"], 12.0);
    for t in ["discharge.csv", "loss.csv", "recovery.csv"] {
        assert!(w.path("tables").join(t).exists(), "{t}");
    }
    let packet = io::read_packet(&w.read("p.json")).unwrap();
    assert_eq!(packet.discharge.vertices(), &[(0.0, 24.0), (3.0, 12.0), (6.0, 6.0), (12.0, 0.0)]);
}

#[test]
fn packet_to_stdout_is_deterministic() {
    let w = Work::new();
    let fleet = w.write("fleet.csv", TABLE1);
    let a = dlr(&["packet", "--fleet", &fleet]);
    let b = dlr(&["packet", "--fleet", &fleet]);
    assert_eq!(exit(&a), 0);
    assert_eq!(a.stdout, b.stdout);
    assert!(io::read_packet(&stdout(&a)).is_ok());
}

#[test]
fn aggregate_is_independent_of_argument_order() {
    let w = Work::new();
    let rows: Vec<&str> = TABLE1.lines().skip(1).collect();
    for (i, row) in rows.iter().enumerate() {
        let f = w.write(&format!("b{i}.csv"), &format!("p_max_mw,x_h,p_charge_mw,eta\n{row}\n"));
        assert!(dlr(&["packet", "--fleet", &f, "--out", &w.s(&format!("b{i}.json"))]).status.success());
    }
    let (b0, b1, b2) = (w.s("b0.json"), w.s("b1.json"), w.s("b2.json"));
    assert!(dlr(&["aggregate", &b0, &b1, &b2, "--out", &w.s("a.json")]).status.success());
    assert!(dlr(&["aggregate", &b2, &b0, &b1, "--out", &w.s("b.json")]).status.success());
    assert_eq!(w.read("a.json"), w.read("b.json"));

    // Regrouping agrees within tolerance.
    assert!(dlr(&["aggregate", &b0, &b1, "--out", &w.s("l.json")]).status.success());
    assert!(dlr(&["aggregate", &w.s("l.json"), &b2, "--out", &w.s("left.json")]).status.success());
    assert!(dlr(&["aggregate", &b1, &b2, "--out", &w.s("r.json")]).status.success());
    assert!(dlr(&["aggregate", &b0, &w.s("r.json"), "--out", &w.s("right.json")]).status.success());
    let left = io::read_packet(&w.read("left.json")).unwrap();
    let right = io::read_packet(&w.read("right.json")).unwrap();
    assert!(left.discharge.approx_eq(&right.discharge, 1e-9));
    assert!(left.loss.approx_eq(&right.loss, 1e-9));
    assert!(left.recovery.approx_eq(&right.recovery, 1e-9));
    assert_eq!(left.n_devices, 3);
}

#[test]
fn reserve_reports_truncation() {
    let w = Work::new();
    w.table1_cycle();
    let r = io::read_reservation(&w.read("r.json")).unwrap();
    assert!((r.x_star - 2.0 / 3.0).abs() < 1e-12);
    assert_eq!(r.truncated_capacity.vertices(), &[(0.0, 8.0), (12.0, 0.0)]);

    let o = dlr(&["--format", "csv", "reserve", "--packet", &w.s("p.json"), "--energy", "8", "--out", &w.s("r2.json")]);
    assert_eq!(exit(&o), 0);
    assert!(stdout(&o).starts_with("key,value\n"));
    assert!(stdout(&o).contains("ed_mwh,8.0"));
}

#[test]
fn reserve_beyond_fleet_energy_is_rejected() {
    let w = Work::new();
    w.table1_cycle();
    let o = dlr(&["reserve", "--packet", &w.s("p.json"), "--energy", "25"]);
    assert_eq!(exit(&o), 1);
    assert!(stderr(&o).starts_with("error[ENERGY_EXCEEDS_FLEET]"), "{}", stderr(&o));
    let o = dlr(&["reserve", "--packet", &w.s("p.json"), "--energy", "-1"]);
    assert_eq!(exit(&o), 2);
    assert!(stderr(&o).starts_with("error[NEGATIVE_ENERGY]"), "{}", stderr(&o));
}

#[test]
fn check_accepts_and_rejects() {
    let w = Work::new();
    w.table1_cycle();
    let o = dlr(&["check", "--reservation", &w.s("r.json"), "--signal", &w.s("s.csv")]);
    assert_eq!(exit(&o), 0, "{}{}", stdout(&o), stderr(&o));
    let rep: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(rep["admissible"], true);
    assert!(rep["violation"].is_null());

    // Nothing discharged although 8 MWh were reserved.
    let empty = w.write("empty.csv", "# dt_h=0.5\nt_index,power_mw\n");
    let o = dlr(&["check", "--reservation", &w.s("r.json"), "--signal", &empty]);
    assert_eq!(exit(&o), 1);
    assert!(stderr(&o).starts_with("error[CYCLE_REJECTED]: discharge_energy"), "{}", stderr(&o));

    // Discharge after recharge.
    let bad = w.write("bad.csv", "# dt_h=0.5\nt_index,power_mw\n0,12\n1,-1\n2,4\n");
    let o = dlr(&["check", "--reservation", &w.s("r.json"), "--signal", &bad]);
    assert_eq!(exit(&o), 1);
    let rep: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(rep["admissible"], false);
}

#[test]
fn simulate_fleet_and_tree_agree() {
    let w = Work::new();
    w.table1_cycle();
    let o = dlr(&[
        "simulate", "--fleet", &w.s("fleet.csv"), "--reservation", &w.s("r.json"), "--signal", &w.s("s.csv"),
        "--out-dir", &w.s("flat"),
    ]);
    assert_eq!(exit(&o), 0, "{}", stderr(&o));
    let rep: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert!((rep["discharged_mwh"].as_f64().unwrap() - 8.0).abs() < 1e-9);

    let fleet = io::read_fleet(TABLE1).unwrap();
    let d = fleet.devices();
    let tree = AggregationTree::new(
        TreeNode::aggregator(
            "root",
            vec![
                TreeNode::aggregator("a", vec![TreeNode::leaf("d0", d[0]), TreeNode::leaf("d1", d[1])]).unwrap(),
                TreeNode::leaf("d2", d[2]),
            ],
        )
        .unwrap(),
    );
    let tree_file = w.write("tree.json", &io::write_tree(&tree));
    let o = dlr(&[
        "simulate", "--tree", &tree_file, "--reservation", &w.s("r.json"), "--signal", &w.s("s.csv"),
        "--out-dir", &w.s("tree"),
    ]);
    assert_eq!(exit(&o), 0, "{}", stderr(&o));
    assert_eq!(w.read("flat/steps.csv"), w.read("tree/steps.csv"));
    assert_eq!(w.read("flat/devices.csv"), w.read("tree/devices.csv"));
    let protocol = w.read("tree/protocol.csv");
    assert!(protocol.lines().count() > 1);
    assert!(!w.path("flat/protocol.csv").exists());
}

#[test]
fn simulate_needs_exactly_one_source() {
    let w = Work::new();
    w.table1_cycle();
    let o = dlr(&["simulate", "--reservation", &w.s("r.json"), "--signal", &w.s("s.csv")]);
    assert_eq!(exit(&o), 2);
}

#[test]
fn infeasible_signal_is_rejected() {
    let w = Work::new();
    w.table1_cycle();
    let s = w.write("hot.csv", "# dt_h=0.5\nt_index,power_mw\n0,12\n1,12\n");
    let o = dlr(&["simulate", "--fleet", &w.s("fleet.csv"), "--reservation", &w.s("r.json"), "--signal", &s]);
    assert_eq!(exit(&o), 1);
    assert!(stderr(&o).starts_with("error["), "{}", stderr(&o));
}

#[test]
fn input_errors_exit_2() {
    let w = Work::new();
    let empty = w.write("empty.csv", "p_max_mw,x_h,p_charge_mw,eta\n");
    let o = dlr(&["packet", "--fleet", &empty]);
    assert_eq!(exit(&o), 2);
    assert!(stderr(&o).starts_with("error["), "{}", stderr(&o));

    let bad = w.write("bad.csv", "p_max_mw,x_h,p_charge_mw,eta\n-3,4,4,0.7\n");
    let o = dlr(&["packet", "--fleet", &bad]);
    assert_eq!(exit(&o), 2);
    assert!(stderr(&o).contains("invalid device"), "{}", stderr(&o));

    let o = dlr(&["packet", "--fleet", &w.s("missing.csv")]);
    assert_eq!(exit(&o), 2);
    assert!(stderr(&o).starts_with("error[IO_ERROR]"), "{}", stderr(&o));

    let o = dlr(&["packet"]);
    assert_eq!(exit(&o), 2);
}

#[test]
fn tolerance_layering() {
    let w = Work::new();
    let fleet = w.write("fleet.csv", TABLE1);
    let o = dlr_env(&["packet", "--fleet", &fleet], Some("abc"));
    assert_eq!(exit(&o), 2);
    assert!(stderr(&o).starts_with("error[CONFIG_ERROR]"), "{}", stderr(&o));
    // The flag wins over a bad environment value.
    let o = dlr_env(&["--tol", "1e-6", "packet", "--fleet", &fleet], Some("abc"));
    assert_eq!(exit(&o), 0, "{}", stderr(&o));

    let cfg = w.write("dlr.toml", "format = \"csv\"\n");
    let o = dlr(&["--config", &cfg, "packet", "--fleet", &fleet, "--out", &w.s("p.json")]);
    assert_eq!(exit(&o), 0);
    assert!(stdout(&o).starts_with("key,value\n"));
    let cfg = w.write("bad.toml", "colour = 1\n");
    let o = dlr(&["--config", &cfg, "packet", "--fleet", &fleet]);
    assert_eq!(exit(&o), 2);
}

fn write_trace(w: &Work) -> String {
    // One day of minute samples: alternating up and down blocks of varied shape.
    let mut text = String::from("timestamp,up_mw,down_mw\n");
    for i in 0..1440 {
        let hour = i / 60;
        let phase = (i % 60) as f64 / 60.0;
        let (up, down) = if hour % 2 == 0 { (1.0 + (hour as f64) * phase, 0.0) } else { (0.0, 2.0 - phase) };
        text.push_str(&format!("{i},{up},{down}\n"));
    }
    w.write("trace.csv", &text)
}

#[test]
fn trace_outputs_are_reproducible() {
    let w = Work::new();
    let trace = write_trace(&w);
    let run = |dir: &str, seed: &str| {
        dlr(&[
            "--seed", seed, "trace", "--trace", &trace, "--window", "1", "--samples", "3", "--out-dir", &w.s(dir),
        ])
    };
    let o = run("a", "5");
    assert_eq!(exit(&o), 0, "{}", stderr(&o));
    let rep: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(rep["up_windows"], 12);
    assert_eq!(rep["down_windows"], 12);
    assert!(run("b", "5").status.success());
    for f in ["stats.csv", "histogram_up.csv", "histogram_down.csv", "curves_up.csv", "curves_down.csv"] {
        assert_eq!(w.read(&format!("a/{f}")), w.read(&format!("b/{f}")), "{f}");
    }
    let stats = w.read("a/stats.csv");
    assert_eq!(stats.lines().count(), 25);
}

#[test]
fn trace_window_must_align() {
    let w = Work::new();
    let trace = write_trace(&w);
    let o = dlr(&["trace", "--trace", &trace, "--window", "0.01"]);
    assert_eq!(exit(&o), 2);
    assert!(stderr(&o).contains("ALIGNMENT_ERROR"), "{}", stderr(&o));
}
