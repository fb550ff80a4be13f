use std::sync::Arc;

use qvoter::dynamics::{product_measure, QVoterParams, Simulator};
use qvoter::experiments::{run_experiment, snapshot_cross_section, validate_config, validate_value, ExperimentKind};
use qvoter::lattice::{SnapshotHeader, TorusLattice};
use qvoter::rng::rng_from_seed;

fn header(side: usize) -> SnapshotHeader {
    SnapshotHeader {
        side,
        time: 0.0,
        q: 1.1,
        seed: 0,
    }
}

fn slice_share(text: &str) -> f64 {
    let cells: Vec<char> = text.lines().skip(1).flat_map(|l| l.chars()).collect();
    cells.iter().filter(|&&c| c == '1').count() as f64 / cells.len() as f64
}

#[test]
fn echo_round_trips_for_every_kind() {
    for kind in ExperimentKind::ALL {
        let config = validate_config(&format!(r#"{{"kind": "{kind}", "seed": 17}}"#)).unwrap();
        let again = validate_value(config.echo()).unwrap();
        assert_eq!(again, config, "{kind}");
    }
}

#[test]
fn product_slice_is_about_half_ones() {
    let lat = Arc::new(TorusLattice::nearest_neighbor(40).unwrap());
    let mut rng = rng_from_seed(21);
    let c = product_measure(lat, 0.5, &mut rng).unwrap();
    let share = slice_share(&snapshot_cross_section(&c, 1, 7, &header(40)).unwrap());
    // 1600 cells, sd 0.0125
    assert!((share - 0.5).abs() < 4.0 * 0.0125, "{share}");
}

#[test]
fn late_slice_for_q_above_one_is_nearly_monochrome() {
    let side = 30;
    let lat = Arc::new(TorusLattice::nearest_neighbor(side).unwrap());
    let params = QVoterParams::direct(1.1).unwrap();
    let mut rng = rng_from_seed(22);
    let start = product_measure(lat, 0.5, &mut rng).unwrap();
    let mut sim = Simulator::new(&start, &params).unwrap();
    let mut t = 0.0;
    while (sim.density() - 0.5).abs() < 0.47 {
        t += 1.0;
        sim.advance_to(t, &mut rng);
    }
    assert!(!sim.is_absorbed());
    let c = sim.configuration();
    let mut shares = Vec::new();
    for level in [0, 10, 20] {
        let s = slice_share(&snapshot_cross_section(&c, 2, level, &header(side)).unwrap());
        shares.push(s.max(1.0 - s));
    }
    assert!(shares.iter().all(|&s| s > 0.9), "{shares:?}");
}

#[test]
fn replicas_do_not_depend_on_how_many_run() {
    let small = validate_config(r#"{"kind": "persistence", "L": 5, "replicates": 3, "horizon": 10}"#).unwrap();
    let large = validate_config(r#"{"kind": "persistence", "L": 5, "replicates": 5, "horizon": 10}"#).unwrap();
    let a = run_experiment(&small).unwrap();
    let b = run_experiment(&large).unwrap();
    for i in 0..3 {
        let name = format!("trajectory_L5_r{i}.csv");
        assert_eq!(a.file(&name).unwrap(), b.file(&name).unwrap());
    }
    assert!(b.file("trajectory_L5_r4.csv").is_some());
}

#[test]
fn different_seeds_give_different_outputs() {
    let a = run_experiment(&validate_config(r#"{"kind": "greens", "replicates": 500, "seed": 1}"#).unwrap()).unwrap();
    let b = run_experiment(&validate_config(r#"{"kind": "greens", "replicates": 500, "seed": 2}"#).unwrap()).unwrap();
    assert_ne!(a.file("greens.csv"), b.file("greens.csv"));
    assert_eq!(a.metric("exact"), b.metric("exact"));
}

#[test]
fn output_formats() {
    let rec = run_experiment(&validate_config(r#"{"kind": "snapshot", "L": 8, "t": 2, "seed": 5}"#).unwrap()).unwrap();
    let snap = rec.file("snapshot.txt").unwrap();
    assert_eq!(snap.lines().next(), Some("L=8 t=2 q=0.9 seed=5"));
    assert_eq!(snap.lines().count(), 9);
    assert!(rec.file("trajectory.csv").unwrap().starts_with("time,density,events\n"));

    let rec = run_experiment(
        &validate_config(r#"{"kind": "reaction-term", "t_trunc": 20, "replicates": 2000, "seed": 5}"#).unwrap(),
    )
    .unwrap();
    assert!(rec.file("fates.csv").unwrap().starts_with("signature,probability,stderr,count\n"));
    let reaction = rec.file("reaction.csv").unwrap();
    let lines: Vec<&str> = reaction.lines().collect();
    assert_eq!(lines[0], "sign,c_k");
    assert_eq!(lines[2], "degree,phi,f_k");

    let rec = run_experiment(
        &validate_config(r#"{"kind": "extinction", "L": 4, "replicates": 2, "seed": 5}"#).unwrap(),
    )
    .unwrap();
    assert!(rec.file("extinction_L4.csv").unwrap().starts_with("replicate,time,censored,state\n"));

    let rec = run_experiment(
        &validate_config(
            r#"{"kind": "ode-compare", "L": 4, "epsilon": 0.3, "t0": 0.3, "replicates": 2, "t_trunc": 10, "fate_replicates": 1000}"#,
        )
        .unwrap(),
    )
    .unwrap();
    assert!(rec.file("ode.csv").unwrap().starts_with("time,u\n"));
    assert!(rec.file("comparison_L4.csv").unwrap().starts_with("replicate,sup_deviation\n"));

    let rec = run_experiment(&validate_config(r#"{"kind": "box-clt", "L": 8, "r": [1, 2, 4], "replicates": 1}"#).unwrap()).unwrap();
    assert!(rec.file("box_sums_voter_c0.csv").unwrap().starts_with("r,cube_index,value\n"));
    assert!(rec.file("fit.csv").is_some());
}
