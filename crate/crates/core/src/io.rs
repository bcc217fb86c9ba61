//! File formats: fleets, packets, reservations, signals, trees, traces and output tables.
//!
//! Readers take the file contents as a string and report errors with 1-based line numbers.
//! Curve values are written in shortest round-trip form; simulation logs use fixed decimals
//! so that logs from different runs compare byte for byte.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::dispatch::SimulationLog;
use crate::dlr::{DlrPacket, Reservation};
use crate::error::{DlrError, Result};
use crate::fleet::{Device, Efficiency, FleetState, StaircaseSignal};
use crate::hierarchy::{AggregationTree, ProtocolMessage, TreeNode};
use crate::pwl::{EpCurve, MonotoneCurve};
use crate::trace::{RequestTrace, WindowStats};

pub const PACKET_FORMAT: &str = "dlr/1";

fn json_error(e: serde_json::Error) -> DlrError {
    DlrError::Parse {
        line: e.line(),
        message: e.to_string(),
    }
}

fn csv_error(e: csv::Error) -> DlrError {
    let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
    DlrError::Parse {
        line,
        message: e.to_string(),
    }
}

fn at_line(line: usize) -> impl Fn(DlrError) -> DlrError {
    move |e| match e {
        DlrError::Parse { .. } => e,
        other => DlrError::Parse {
            line,
            message: other.to_string(),
        },
    }
}

/// Fixed-decimal formatting without negative zero.
pub fn fixed(v: f64) -> String {
    let s = format!("{v:.10}");
    if s.starts_with('-') && s[1..].bytes().all(|b| b == b'0' || b == b'.') {
        s[1..].to_string()
    } else {
        s
    }
}

// ---------------------------------------------------------------- devices and fleets

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
enum EtaSpec {
    Value(f64),
    Text(String),
}

fn parse_eta(text: &str) -> Result<Efficiency> {
    let t = text.trim();
    match t.to_ascii_lowercase().as_str() {
        "inf" | "infinity" | "none" => Ok(Efficiency::NoRecovery),
        _ => t
            .parse::<f64>()
            .map(Efficiency::Finite)
            .map_err(|_| DlrError::InvalidDevice(format!("efficiency '{t}' is not a number or 'inf'"))),
    }
}

/// One device as written in fleet and tree files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceSpec {
    pub p_max_mw: f64,
    pub p_charge_mw: f64,
    eta: EtaSpec,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub demand_response: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x_h: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub e_mwh: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub e_max_mwh: Option<f64>,
}

impl DeviceSpec {
    pub fn to_device(&self) -> Result<Device> {
        let eta = match &self.eta {
            EtaSpec::Value(v) => Efficiency::Finite(*v),
            EtaSpec::Text(t) => parse_eta(t)?,
        };
        let (e, e_max) = match (self.x_h, self.e_mwh, self.e_max_mwh) {
            (Some(x), None, None) => (self.p_max_mw * x, self.p_max_mw * x),
            (Some(x), None, Some(m)) => (self.p_max_mw * x, m),
            (None, Some(e), m) => (e, m.unwrap_or(e)),
            (Some(_), Some(_), _) => {
                return Err(DlrError::InvalidDevice("give either x_h or e_mwh, not both".into()))
            }
            (None, None, _) => return Err(DlrError::InvalidDevice("missing x_h or e_mwh".into())),
        };
        if self.demand_response {
            Device::demand_response(self.p_max_mw, e, e_max, self.p_charge_mw, eta)
        } else {
            Device::from_energy(self.p_max_mw, e, e_max, self.p_charge_mw, eta)
        }
    }

    pub fn from_device(d: &Device) -> Self {
        DeviceSpec {
            p_max_mw: d.p_discharge_max(),
            p_charge_mw: d.p_charge_max(),
            eta: match d.eta() {
                Efficiency::Finite(v) => EtaSpec::Value(v),
                Efficiency::NoRecovery => EtaSpec::Text("inf".into()),
            },
            demand_response: d.is_demand_response(),
            x_h: None,
            e_mwh: Some(d.energy()),
            e_max_mwh: Some(d.energy_max()),
        }
    }
}

/// Reads a fleet from JSON (an array of device objects) or CSV with header
/// `p_max_mw,x_h,p_charge_mw,eta`. The format is picked from the first non-blank character.
pub fn read_fleet(text: &str) -> Result<FleetState> {
    if text.trim_start().starts_with('[') {
        read_fleet_json(text)
    } else {
        read_fleet_csv(text)
    }
}

pub fn read_fleet_json(text: &str) -> Result<FleetState> {
    let specs: Vec<DeviceSpec> = serde_json::from_str(text).map_err(json_error)?;
    let devices = specs
        .iter()
        .enumerate()
        .map(|(i, s)| {
            s.to_device()
                .map_err(|e| DlrError::InvalidDevice(format!("device {i}: {e}")))
        })
        .collect::<Result<Vec<_>>>()?;
    FleetState::new(devices)
}

pub fn write_fleet_json(fleet: &FleetState) -> String {
    let specs: Vec<DeviceSpec> = fleet.devices().iter().map(DeviceSpec::from_device).collect();
    serde_json::to_string_pretty(&specs).expect("fleet serializes") + "\n"
}

#[derive(Debug, Deserialize)]
struct FleetRow {
    p_max_mw: f64,
    x_h: f64,
    p_charge_mw: f64,
    eta: String,
}

pub fn read_fleet_csv(text: &str) -> Result<FleetState> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    let mut devices = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(csv_error)?;
        let line = rec.position().map(|p| p.line() as usize).unwrap_or(0);
        let row: FleetRow = rec.deserialize(None).map_err(csv_error)?;
        let eta = parse_eta(&row.eta).map_err(at_line(line))?;
        let d = Device::from_time_to_go(row.p_max_mw, row.x_h, row.p_charge_mw, eta).map_err(at_line(line))?;
        devices.push(d);
    }
    FleetState::new(devices)
}

// ---------------------------------------------------------------- packets

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PacketMeta {
    pub n_devices: usize,
    /// Reserved for a maximum allowable recovery completion time; not interpreted.
    #[serde(default)]
    pub max_completion_h: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PacketFile {
    pub format: String,
    pub discharge: EpCurve,
    pub loss: MonotoneCurve,
    pub recovery: MonotoneCurve,
    pub meta: PacketMeta,
}

pub fn write_packet(p: &DlrPacket) -> String {
    let file = PacketFile {
        format: PACKET_FORMAT.into(),
        discharge: p.discharge.clone(),
        loss: p.loss.clone(),
        recovery: p.recovery.clone(),
        meta: PacketMeta {
            n_devices: p.n_devices,
            max_completion_h: None,
        },
    };
    serde_json::to_string_pretty(&file).expect("packet serializes") + "\n"
}

pub fn read_packet(text: &str) -> Result<DlrPacket> {
    let v: serde_json::Value = serde_json::from_str(text).map_err(json_error)?;
    match v.get("format").and_then(|f| f.as_str()) {
        Some(PACKET_FORMAT) => {}
        Some(other) => {
            return Err(DlrError::Format(format!(
                "packet format '{other}', expected '{PACKET_FORMAT}'"
            )))
        }
        None => return Err(DlrError::Format("packet has no format tag".into())),
    }
    let f: PacketFile = serde_json::from_str(text).map_err(json_error)?;
    Ok(DlrPacket {
        discharge: f.discharge,
        loss: f.loss,
        recovery: f.recovery,
        n_devices: f.meta.n_devices,
    })
}

// ---------------------------------------------------------------- reservations

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ReservationFile {
    ed_mwh: f64,
    x_star_h: f64,
    er_mwh: f64,
    y_star_h: f64,
    truncated_capacity: EpCurve,
    recharge_power_mw: f64,
}

pub fn write_reservation(r: &Reservation) -> String {
    let file = ReservationFile {
        ed_mwh: r.ed,
        x_star_h: r.x_star,
        er_mwh: r.er,
        y_star_h: r.y_star,
        truncated_capacity: r.truncated_capacity.clone(),
        recharge_power_mw: r.recharge_virtual_battery().0,
    };
    serde_json::to_string_pretty(&file).expect("reservation serializes") + "\n"
}

pub fn read_reservation(text: &str) -> Result<Reservation> {
    let f: ReservationFile = serde_json::from_str(text).map_err(json_error)?;
    Ok(Reservation {
        ed: f.ed_mwh,
        x_star: f.x_star_h,
        er: f.er_mwh,
        y_star: f.y_star_h,
        truncated_capacity: f.truncated_capacity,
    })
}

// ---------------------------------------------------------------- signals

/// Signal CSV: a `# dt_h=<hours>` line, then `t_index,power_mw` rows.
pub fn read_signal(text: &str) -> Result<StaircaseSignal> {
    let mut dt = None;
    let mut body_start = 0;
    for (i, line) in text.lines().enumerate() {
        let t = line.trim();
        if t.is_empty() {
            continue;
        }
        if let Some(meta) = t.strip_prefix('#') {
            if let Some(v) = meta.trim().strip_prefix("dt_h=") {
                dt = Some(v.trim().parse::<f64>().map_err(|e| DlrError::Parse {
                    line: i + 1,
                    message: format!("bad dt_h: {e}"),
                })?);
            }
            continue;
        }
        body_start = i;
        break;
    }
    let dt = dt.ok_or(DlrError::Parse {
        line: 1,
        message: "missing '# dt_h=<hours>' line".into(),
    })?;
    let body: String = text.lines().skip(body_start).collect::<Vec<_>>().join("\n");
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(body.as_bytes());
    let mut levels = Vec::new();
    for rec in rdr.deserialize::<(usize, f64)>() {
        let (idx, p) = rec.map_err(|e| match csv_error(e) {
            DlrError::Parse { line, message } => DlrError::Parse {
                line: line + body_start,
                message,
            },
            other => other,
        })?;
        if idx != levels.len() {
            return Err(DlrError::Parse {
                line: body_start + levels.len() + 2,
                message: format!("expected t_index {}, got {idx}", levels.len()),
            });
        }
        levels.push(p);
    }
    StaircaseSignal::new(dt, levels)
}

pub fn write_signal(s: &StaircaseSignal) -> String {
    let mut out = format!("# dt_h={}\nt_index,power_mw\n", s.dt());
    for (i, p) in s.levels().iter().enumerate() {
        let _ = writeln!(out, "{i},{p}");
    }
    out
}

// ---------------------------------------------------------------- trees

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TreeSpec {
    id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    children: Option<Vec<TreeSpec>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    device: Option<DeviceSpec>,
}

fn tree_node(spec: &TreeSpec) -> Result<TreeNode> {
    match (&spec.children, &spec.device) {
        (Some(children), None) => {
            let nodes = children.iter().map(tree_node).collect::<Result<Vec<_>>>()?;
            TreeNode::aggregator(spec.id.clone(), nodes)
                .map_err(|e| DlrError::InvalidDevice(format!("node '{}': {e}", spec.id)))
        }
        (None, Some(d)) => Ok(TreeNode::leaf(
            spec.id.clone(),
            d.to_device()
                .map_err(|e| DlrError::InvalidDevice(format!("leaf '{}': {e}", spec.id)))?,
        )),
        _ => Err(DlrError::InvalidDevice(format!(
            "node '{}' needs exactly one of 'children' or 'device'",
            spec.id
        ))),
    }
}

/// Tree JSON: `{id, children: [...]}` with leaves `{id, device: {...}}`.
pub fn read_tree(text: &str) -> Result<AggregationTree> {
    let spec: TreeSpec = serde_json::from_str(text).map_err(json_error)?;
    Ok(AggregationTree::new(tree_node(&spec)?))
}

pub fn write_tree(tree: &AggregationTree) -> String {
    fn spec(node: &TreeNode) -> TreeSpec {
        match node {
            TreeNode::Leaf { id, device } => TreeSpec {
                id: id.clone(),
                children: None,
                device: Some(DeviceSpec::from_device(device)),
            },
            TreeNode::Aggregator { id, children, .. } => TreeSpec {
                id: id.clone(),
                children: Some(children.iter().map(spec).collect()),
                device: None,
            },
        }
    }
    serde_json::to_string_pretty(&spec(tree.root())).expect("tree serializes") + "\n"
}

// ---------------------------------------------------------------- traces

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TraceColumns {
    /// `timestamp,up_mw,down_mw`; the request is `up - down`.
    UpDown,
    /// `timestamp,power_mw`, signed.
    Signed,
}

pub fn read_trace(text: &str, columns: TraceColumns, dt: f64) -> Result<RequestTrace> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    let mut samples = Vec::new();
    let mut origin = String::new();
    for rec in rdr.records() {
        let rec = rec.map_err(csv_error)?;
        let line = rec.position().map(|p| p.line() as usize).unwrap_or(0);
        let want = match columns {
            TraceColumns::UpDown => 3,
            TraceColumns::Signed => 2,
        };
        if rec.len() != want {
            return Err(DlrError::Parse {
                line,
                message: format!("expected {want} columns, found {}", rec.len()),
            });
        }
        let num = |i: usize| -> Result<f64> {
            rec[i].parse::<f64>().map_err(|e| DlrError::Parse {
                line,
                message: format!("column {}: {e}", i + 1),
            })
        };
        let v = match columns {
            TraceColumns::UpDown => num(1)? - num(2)?,
            TraceColumns::Signed => num(1)?,
        };
        if samples.is_empty() {
            origin = rec[0].to_string();
        }
        samples.push(v);
    }
    RequestTrace::new(dt, samples, origin)
}

// ---------------------------------------------------------------- output tables

fn curve_csv(header: &str, vertices: &[(f64, f64)]) -> String {
    let mut out = format!("{header}\n");
    for (a, b) in vertices {
        let _ = writeln!(out, "{a},{b}");
    }
    out
}

pub fn discharge_csv(c: &EpCurve) -> String {
    curve_csv("p_mw,e_mwh", c.vertices())
}

pub fn loss_csv(c: &MonotoneCurve) -> String {
    curve_csv("x_h,e_mwh", c.vertices())
}

pub fn recovery_csv(c: &MonotoneCurve) -> String {
    curve_csv("x_h,y_h", c.vertices())
}

/// Per-step table `step,mode,z_hat_h,p_request_mw,p_delivered_mw`.
pub fn steps_csv(log: &SimulationLog) -> String {
    let mut out = String::from("step,mode,z_hat_h,p_request_mw,p_delivered_mw\n");
    for (k, s) in log.steps.iter().enumerate() {
        let _ = writeln!(
            out,
            "{k},{},{},{},{}",
            s.mode.as_str(),
            fixed(s.z_hat),
            fixed(s.p_request),
            fixed(s.delivered())
        );
    }
    out
}

/// Per-device table `step,device,x_h,u_mw`; `x_h` is the real time-to-go after the step.
pub fn device_states_csv(log: &SimulationLog, ids: &[String]) -> String {
    let mut out = String::from("step,device,x_h,u_mw\n");
    for (k, (s, x)) in log.steps.iter().zip(&log.states).enumerate() {
        for ((id, u), x) in ids.iter().zip(&s.per_device_u).zip(x) {
            let _ = writeln!(out, "{k},{id},{},{}", fixed(*x), fixed(*u));
        }
    }
    out
}

pub fn protocol_csv(messages: &[ProtocolMessage]) -> String {
    let mut out = String::from("phase,message_kind,sender,receiver,scalar_count\n");
    for m in messages {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            m.phase.as_str(),
            m.kind,
            m.sender,
            m.receiver,
            m.scalar_count
        );
    }
    out
}

pub fn window_stats_csv(stats: &[WindowStats]) -> String {
    let mut out =
        String::from("start_index,direction,window_h,max_power_mw,signed_max_power_mw,energy_mwh,effective_time_h\n");
    for s in stats {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            s.start_index,
            s.direction.as_str(),
            s.window_h,
            s.max_power,
            s.signed_max_power(),
            s.energy,
            s.effective_time
        );
    }
    out
}

pub fn histogram_csv(bins: &[(f64, usize)], bin_h: f64) -> String {
    let mut out = String::from("bin_start_h,bin_end_h,count\n");
    for (start, count) in bins {
        let _ = writeln!(out, "{start},{},{count}", start + bin_h);
    }
    out
}

/// Normalised E-p curves of sampled windows: `window_start,p_norm,e_norm_h`.
pub fn sampled_curves_csv(curves: &[(usize, EpCurve)]) -> String {
    let mut out = String::from("window_start,p_norm,e_norm_h\n");
    for (start, c) in curves {
        for (p, e) in c.vertices() {
            let _ = writeln!(out, "{start},{p},{e}");
        }
    }
    out
}
