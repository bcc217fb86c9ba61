use std::path::{Path, PathBuf};

use clap::Args;
use dlr_core::dispatch::{simulate_cycle_with_tol, SimulationLog};
use dlr_core::hierarchy::ProtocolSession;
use dlr_core::io::{self, TraceColumns};
use dlr_core::trace::{self, Direction, WindowStats};
use dlr_core::{DlrError, DlrPacket, EpCurve};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Map, Value};

use crate::config::{Config, OutputFormat};
use crate::{read_file, write_file, CliError, Outcome, EXIT_OK, EXIT_REJECTED};

/// Key/value summary printed on stdout.
#[derive(Debug, Default)]
struct Report(Map<String, Value>);

impl Report {
    fn set(&mut self, key: &str, value: impl Into<Value>) -> &mut Self {
        self.0.insert(key.to_string(), value.into());
        self
    }

    fn render(&self, format: OutputFormat) -> String {
        match format {
            OutputFormat::Json => serde_json::to_string_pretty(&self.0).expect("report serializes") + "\n",
            OutputFormat::Csv => {
                let mut out = String::from("key,value\n");
                for (k, v) in &self.0 {
                    let v = match v {
                        Value::Null => String::new(),
                        Value::String(s) => s.clone(),
                        other => other.to_string(),
                    };
                    out.push_str(&format!("{k},{v}\n"));
                }
                out
            }
        }
    }
}

fn ok(report: &Report, config: &Config) -> Outcome {
    Outcome {
        stdout: report.render(config.format),
        stderr: None,
        exit_code: EXIT_OK,
    }
}

fn load<T>(path: &Path, parse: impl Fn(&str) -> dlr_core::Result<T>) -> Result<T, CliError> {
    parse(&read_file(path)?).map_err(CliError::in_file(path))
}

fn make_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Io {
        path: dir.to_path_buf(),
        message: e.to_string(),
    })
}

fn emit(text: String, out: Option<&Path>) -> Result<Option<String>, CliError> {
    match out {
        Some(path) => write_file(path, &text).map(|_| None),
        None => Ok(Some(text)),
    }
}

fn packet_summary(p: &DlrPacket) -> Report {
    let mut r = Report::default();
    r.set("n_devices", p.n_devices)
        .set("discharge_segments", p.discharge.segment_count())
        .set("loss_segments", p.loss.segment_count())
        .set("recovery_segments", p.recovery.segment_count())
        .set("total_energy_mwh", p.discharge.total_energy())
        .set("p_max_mw", p.discharge.p_max())
        .set("x_star_max_h", p.x_star_max());
    r
}

/// Writes the packet JSON to `out` (or stdout) and the curve tables to `csv_dir`.
fn write_packet_outputs(
    p: &DlrPacket,
    out: Option<&Path>,
    csv_dir: Option<&Path>,
    config: &Config,
) -> Result<Outcome, CliError> {
    if let Some(dir) = csv_dir {
        make_dir(dir)?;
        write_file(&dir.join("discharge.csv"), &io::discharge_csv(&p.discharge))?;
        write_file(&dir.join("loss.csv"), &io::loss_csv(&p.loss))?;
        write_file(&dir.join("recovery.csv"), &io::recovery_csv(&p.recovery))?;
    }
    Ok(match emit(io::write_packet(p), out)? {
        Some(text) => Outcome {
            stdout: text,
            ..Default::default()
        },
        None => ok(&packet_summary(p), config),
    })
}

#[derive(Debug, Args)]
pub struct PacketArgs {
    /// Fleet file (JSON array of devices, or CSV `p_max_mw,x_h,p_charge_mw,eta`).
    #[arg(long)]
    pub fleet: PathBuf,
    /// Packet JSON destination; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Directory for discharge.csv, loss.csv and recovery.csv.
    #[arg(long)]
    pub csv_dir: Option<PathBuf>,
}

pub fn packet(a: &PacketArgs, config: &Config) -> Result<Outcome, CliError> {
    let fleet = load(&a.fleet, io::read_fleet)?;
    write_packet_outputs(&DlrPacket::from_fleet(&fleet), a.out.as_deref(), a.csv_dir.as_deref(), config)
}

#[derive(Debug, Args)]
pub struct AggregateArgs {
    /// Packet files to combine.
    #[arg(required = true)]
    pub packets: Vec<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub csv_dir: Option<PathBuf>,
}

/// Folds the packets in a canonical order (by their serialized form), so the output does not
/// depend on the order the files are given in.
pub fn aggregate(a: &AggregateArgs, config: &Config) -> Result<Outcome, CliError> {
    let mut packets = a
        .packets
        .iter()
        .map(|path| {
            let p = load(path, io::read_packet)?;
            Ok((io::write_packet(&p), p))
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    packets.sort_by(|x, y| x.0.cmp(&y.0));
    let acc = packets
        .iter()
        .fold(DlrPacket::empty(), |acc, (_, p)| acc.aggregate(p));
    write_packet_outputs(&acc, a.out.as_deref(), a.csv_dir.as_deref(), config)
}

#[derive(Debug, Args)]
pub struct ReserveArgs {
    #[arg(long)]
    pub packet: PathBuf,
    /// Discharge energy to reserve [MWh].
    #[arg(long, allow_negative_numbers = true)]
    pub energy: f64,
    /// Reservation JSON destination; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn reserve(a: &ReserveArgs, config: &Config) -> Result<Outcome, CliError> {
    let packet = load(&a.packet, io::read_packet)?;
    let r = packet.reserve(a.energy)?;
    Ok(match emit(io::write_reservation(&r), a.out.as_deref())? {
        Some(text) => Outcome {
            stdout: text,
            ..Default::default()
        },
        None => {
            let (power, energy) = r.recharge_virtual_battery();
            let mut rep = Report::default();
            rep.set("ed_mwh", r.ed)
                .set("x_star_h", r.x_star)
                .set("er_mwh", energy)
                .set("y_star_h", r.y_star)
                .set("recharge_power_mw", power);
            ok(&rep, config)
        }
    })
}

#[derive(Debug, Args)]
pub struct CheckArgs {
    #[arg(long)]
    pub reservation: PathBuf,
    /// Signal CSV (`# dt_h=<hours>` line, then `t_index,power_mw`).
    #[arg(long)]
    pub signal: PathBuf,
}

pub fn check(a: &CheckArgs, config: &Config) -> Result<Outcome, CliError> {
    let r = load(&a.reservation, io::read_reservation)?;
    let signal = load(&a.signal, io::read_signal)?;
    let verdict = r.check_cycle_with_tol(&signal, config.tol);
    let (power, _) = r.recharge_virtual_battery();
    let mut rep = Report::default();
    rep.set("admissible", verdict.is_ok())
        .set("steps", signal.len())
        .set("discharge_energy_mwh", signal.discharge_part().energy())
        .set("recharge_energy_mwh", -signal.recharge_part().energy())
        .set("ed_mwh", r.ed)
        .set("er_mwh", r.er)
        .set("recharge_power_bound_mw", power);
    match verdict {
        Ok(()) => {
            rep.set("violation", Value::Null);
            Ok(ok(&rep, config))
        }
        Err(v) => {
            rep.set("violation", v.clause());
            Ok(Outcome {
                stdout: rep.render(config.format),
                stderr: Some(format!("error[CYCLE_REJECTED]: {}: {v}", v.clause())),
                exit_code: EXIT_REJECTED,
            })
        }
    }
}

#[derive(Debug, Args)]
#[command(group(clap::ArgGroup::new("source").required(true).args(["fleet", "tree"])))]
pub struct SimulateArgs {
    /// Fleet file; dispatch is computed centrally.
    #[arg(long)]
    pub fleet: Option<PathBuf>,
    /// Aggregation tree JSON; dispatch runs through the broadcast protocol.
    #[arg(long)]
    pub tree: Option<PathBuf>,
    #[arg(long)]
    pub reservation: PathBuf,
    #[arg(long)]
    pub signal: PathBuf,
    /// Directory for steps.csv, devices.csv and (with --tree) protocol.csv.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

pub fn simulate(a: &SimulateArgs, config: &Config) -> Result<Outcome, CliError> {
    let r = load(&a.reservation, io::read_reservation)?;
    let signal = load(&a.signal, io::read_signal)?;
    let mut rep = Report::default();
    let mut protocol = None;
    let log: SimulationLog = if let Some(path) = &a.tree {
        let tree = load(path, io::read_tree)?;
        let mut session = ProtocolSession::with_tol(&tree, config.tol);
        session.reserve_down(r.ed)?;
        let x_star = session.reservation().expect("reserved").x_star;
        if (x_star - r.x_star).abs() > config.tol.max(1e-12 * r.x_star) {
            return Err(DlrError::ReservationViolated(format!(
                "tree yields x* = {x_star} h, reservation has {} h",
                r.x_star
            ))
            .into());
        }
        let log = session.run_cycle(&signal)?;
        let audit = session.message_audit();
        rep.set("messages", json!(audit));
        protocol = Some(io::protocol_csv(session.messages()));
        log
    } else {
        let fleet = load(a.fleet.as_ref().expect("clap enforces the group"), io::read_fleet)?;
        simulate_cycle_with_tol(&fleet, &r, &signal, config.tol)?
    };

    if let Some(dir) = &a.out_dir {
        make_dir(dir)?;
        let ids: Vec<String> = (0..log.ratings.len()).map(|i| i.to_string()).collect();
        write_file(&dir.join("steps.csv"), &io::steps_csv(&log))?;
        write_file(&dir.join("devices.csv"), &io::device_states_csv(&log, &ids))?;
        if let Some(p) = protocol {
            write_file(&dir.join("protocol.csv"), &p)?;
        }
    }
    let error = log.recovery_error();
    rep.set("steps", log.steps.len())
        .set("discharged_mwh", log.total_discharged)
        .set("recharged_mwh", log.total_recharged)
        .set("max_recovery_error_mwh", error)
        .set("recovered", error <= config.tol)
        .set("initial_x_h", log.initial_states.clone())
        .set("final_x_h", log.final_states().to_vec());
    Ok(ok(&rep, config))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum DirectionArg {
    Up,
    Down,
    Both,
}

impl DirectionArg {
    fn directions(self) -> Vec<Direction> {
        match self {
            DirectionArg::Up => vec![Direction::Up],
            DirectionArg::Down => vec![Direction::Down],
            DirectionArg::Both => vec![Direction::Up, Direction::Down],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum ColumnsArg {
    /// `timestamp,up_mw,down_mw`
    UpDown,
    /// `timestamp,power_mw`
    Signed,
}

#[derive(Debug, Args)]
pub struct TraceArgs {
    /// Trace CSV.
    #[arg(long)]
    pub trace: PathBuf,
    /// Window length [h]; must be a multiple of the sample period.
    #[arg(long)]
    pub window: f64,
    #[arg(long, value_enum, default_value = "both")]
    pub direction: DirectionArg,
    #[arg(long, value_enum, default_value = "up-down")]
    pub columns: ColumnsArg,
    /// Sample period [h]; default one minute.
    #[arg(long)]
    pub dt: Option<f64>,
    /// Histogram bin width for effective time [h]; default one minute.
    #[arg(long)]
    pub bin: Option<f64>,
    /// Number of windows whose normalised E-p curves are exported.
    #[arg(long, default_value_t = 50)]
    pub samples: usize,
    /// Directory for stats.csv, histogram_<dir>.csv and curves_<dir>.csv.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

/// Picks up to `n` windows at random, returned in trace order.
fn sample_windows(stats: &[WindowStats], n: usize, seed: u64) -> Vec<WindowStats> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = rand::seq::index::sample(&mut rng, stats.len(), n.min(stats.len())).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| stats[i]).collect()
}

pub fn trace(a: &TraceArgs, config: &Config) -> Result<Outcome, CliError> {
    let columns = match a.columns {
        ColumnsArg::UpDown => TraceColumns::UpDown,
        ColumnsArg::Signed => TraceColumns::Signed,
    };
    let t = load(&a.trace, |s| io::read_trace(s, columns, config.dt))?;
    let bin = a.bin.unwrap_or(1.0 / 60.0);
    if let Some(dir) = &a.out_dir {
        make_dir(dir)?;
    }
    let mut rep = Report::default();
    rep.set("samples", t.samples().len())
        .set("dt_h", t.dt())
        .set("window_h", a.window)
        .set("origin", t.origin());
    let mut all = Vec::new();
    for dir in a.direction.directions() {
        let stats = trace::split_windows(&t, a.window, dir)?;
        let name = dir.as_str();
        let r = match trace::correlation(&stats) {
            Ok(r) => Value::from(r),
            Err(DlrError::Undefined(_)) => Value::Null,
            Err(e) => return Err(e.into()),
        };
        let mean_eff = if stats.is_empty() {
            Value::Null
        } else {
            Value::from(stats.iter().map(|s| s.effective_time).sum::<f64>() / stats.len() as f64)
        };
        rep.set(&format!("{name}_windows"), stats.len())
            .set(&format!("{name}_correlation"), r)
            .set(&format!("{name}_mean_effective_time_h"), mean_eff);
        if let Some(out) = &a.out_dir {
            let hist = trace::effective_time_histogram(&stats, bin)?;
            write_file(&out.join(format!("histogram_{name}.csv")), &io::histogram_csv(&hist, bin))?;
            let windows = trace::one_sided_windows(&t, a.window, dir)?;
            let k = windows.first().map(|w| w.1.len()).unwrap_or(1);
            let curves = sample_windows(&stats, a.samples, config.seed)
                .into_iter()
                .map(|s| Ok((s.start_index, trace::ep_of_window(&windows[s.start_index / k].1, t.dt())?)))
                .collect::<Result<Vec<(usize, EpCurve)>, DlrError>>()?;
            write_file(&out.join(format!("curves_{name}.csv")), &io::sampled_curves_csv(&curves))?;
        }
        all.extend(stats);
    }
    if let Some(out) = &a.out_dir {
        all.sort_by_key(|s| (s.start_index, s.direction == Direction::Down));
        write_file(&out.join("stats.csv"), &io::window_stats_csv(&all))?;
    }
    Ok(ok(&rep, config))
}
