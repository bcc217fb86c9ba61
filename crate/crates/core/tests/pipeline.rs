use approx::assert_abs_diff_eq;
use dlr_core::dispatch::{simulate_cycle, simulate_discharge};
use dlr_core::hierarchy::{AggregationTree, ProtocolSession, TreeNode};
use dlr_core::{io, Device, DlrPacket, Efficiency, FleetState, StaircaseSignal};
use proptest::prelude::*;

fn dev(p: f64, x: f64, pc: f64, eta: f64) -> Device {
    Device::from_time_to_go(p, x, pc, Efficiency::Finite(eta)).unwrap()
}

fn table1() -> FleetState {
    FleetState::new(vec![dev(3.0, 4.0, 4.0, 0.7), dev(3.0, 2.0, 3.0, 0.6), dev(6.0, 1.0, 3.0, 0.9)]).unwrap()
}

/// Full-power discharge of the truncated fleet averaged over `dt` steps, followed by recharge
/// at the virtual battery's rate bound. Averaging over steps keeps the discharge dominated.
fn averaged_cycle(fleet: &FleetState, ed: f64, dt: f64) -> (dlr_core::Reservation, StaircaseSignal) {
    let r = DlrPacket::from_fleet(fleet).reserve(ed).unwrap();
    let truncated = fleet.truncated(r.x_star);
    let horizon = truncated.devices().iter().map(|d| d.time_to_go()).fold(0.0, f64::max);
    let steps = (horizon / dt - 1e-12).ceil().max(0.0) as usize;
    let mut levels: Vec<f64> = (0..steps)
        .map(|k| {
            let (t0, t1) = (k as f64 * dt, (k + 1) as f64 * dt);
            truncated
                .devices()
                .iter()
                .map(|d| d.p_discharge_max() * (d.time_to_go().min(t1) - t0).max(0.0))
                .sum::<f64>()
                / dt
        })
        .collect();
    let (bound, er) = r.recharge_virtual_battery();
    let mut left = er;
    while left > 1e-9 {
        let l = bound.min(left / dt);
        levels.push(-l);
        left -= l * dt;
    }
    (r, StaircaseSignal::new(dt, levels).unwrap())
}

#[test]
fn device_packets_fold_to_fleet_packet() {
    let fleet = table1();
    let folded = fleet
        .devices()
        .iter()
        .fold(DlrPacket::empty(), |acc, d| acc.aggregate(&DlrPacket::from_device(d)));
    let direct = DlrPacket::from_fleet(&fleet);
    assert!(folded.discharge.approx_eq(&direct.discharge, 1e-9));
    assert!(folded.loss.approx_eq(&direct.loss, 1e-9));
    assert!(folded.recovery.approx_eq(&direct.recovery, 1e-9));
}

#[test]
fn packet_file_round_trip_is_exact() {
    let p = DlrPacket::from_fleet(&table1());
    let back = io::read_packet(&io::write_packet(&p)).unwrap();
    assert_eq!(back, p);
}

#[test]
fn table1_cycle_restores_state() {
    let fleet = table1();
    let (r, signal) = averaged_cycle(&fleet, 8.0, 0.5);
    assert!(r.check_cycle(&signal).is_ok());
    let log = simulate_cycle(&fleet, &r, &signal).unwrap();
    assert!(log.recovery_error() < 1e-9);
    assert_abs_diff_eq!(log.total_discharged, 8.0, epsilon = 1e-9);
}

#[test]
fn tree_and_central_dispatch_agree() {
    let fleet = table1();
    let (r, signal) = averaged_cycle(&fleet, 10.0, 0.25);
    let central = simulate_cycle(&fleet, &r, &signal).unwrap();
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
    let mut session = ProtocolSession::new(&tree);
    session.aggregate_up();
    session.reserve_down(r.ed).unwrap();
    let log = session.run_cycle(&signal).unwrap();
    assert_eq!(log.steps.len(), central.steps.len());
    for (a, b) in log.final_states().iter().zip(central.final_states()) {
        assert_abs_diff_eq!(a, b, epsilon = 1e-9);
    }
}

#[test]
fn infeasible_discharge_is_reported_with_its_step() {
    let fleet = table1();
    let signal = StaircaseSignal::new(1.0, vec![12.0, 12.0]).unwrap();
    let err = simulate_discharge(&fleet, &signal, 1e-9).unwrap_err();
    assert!(matches!(err, dlr_core::DlrError::InfeasibleStep { step: 1, .. }), "{err:?}");
}

fn arb_fleet() -> impl Strategy<Value = FleetState> {
    prop::collection::vec((0.5f64..8.0, 0.25f64..6.0, 0.5f64..8.0, 0.5f64..1.0), 1..7)
        .prop_map(|v| FleetState::new(v.into_iter().map(|(p, x, pc, e)| dev(p, x, pc, e)).collect()).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn admissible_cycles_simulate_and_recover(fleet in arb_fleet(), frac in 0.05f64..1.0, dt in prop::sample::select(vec![0.25, 0.5, 1.0])) {
        let (r, signal) = averaged_cycle(&fleet, frac * fleet.total_energy(), dt);
        prop_assert!(r.check_cycle(&signal).is_ok());
        let log = simulate_cycle(&fleet, &r, &signal).unwrap();
        prop_assert!(log.recovery_error() < 1e-6);
        prop_assert!(log.min_state() >= -1e-9);
    }

    #[test]
    fn truncated_energy_matches_reservation(fleet in arb_fleet(), frac in 0.0f64..1.0) {
        let ed = frac * fleet.total_energy();
        let r = DlrPacket::from_fleet(&fleet).reserve(ed).unwrap();
        prop_assert!((fleet.truncated(r.x_star).total_energy() - ed).abs() < 1e-9);
        prop_assert!((r.truncated_capacity.total_energy() - ed).abs() < 1e-9);
    }
}
