use std::collections::HashSet;

use p2pgrid::network::{load_network, parse_network, CaseFormat, NetworkError, NetworkTopology};

fn ieee33() -> NetworkTopology {
    load_network(concat!(env!("CARGO_MANIFEST_DIR"), "/../../data/ieee33.case"), CaseFormat::Tabular).unwrap()
}

#[test]
fn ieee33_has_the_published_generator_limits() {
    let t = ieee33();
    assert_eq!(t.n_buses(), 33);
    assert_eq!(t.n_lines(), 32);
    assert_eq!(t.slack_bus, 1);
    assert_eq!(t.generators.len(), 2);
    let sub = t.generators.iter().find(|g| g.bus == 1).unwrap();
    assert_eq!((sub.p_min, sub.p_max, sub.q_min, sub.q_max), (0.0, 6.0, -4.0, 4.0));
    let dg = t.generators.iter().find(|g| g.bus == 18).unwrap();
    assert_eq!((dg.p_min, dg.p_max, dg.q_min, dg.q_max), (0.0, 1.5, -1.0, 1.0));
    let p: f64 = t.buses.iter().map(|b| b.p_load_base).sum();
    let q: f64 = t.buses.iter().map(|b| b.q_load_base).sum();
    assert!((p - 3715.0).abs() < 1e-9 && (q - 2300.0).abs() < 1e-9);
}

#[test]
fn impedances_are_converted_with_the_voltage_base() {
    let t = ieee33();
    let z_base = t.v_base * t.v_base / t.s_base;
    let first = t.lines.iter().find(|l| l.from_bus == 1 && l.to_bus == 2).unwrap();
    assert!((first.r - 0.0922 / z_base).abs() < 1e-15);
    assert!((first.x - 0.0470 / z_base).abs() < 1e-15);
    // 0.95 and 1.05 p.u. limits are stored squared
    assert!(t.buses.iter().all(|b| (b.v_min - 0.9025).abs() < 1e-12 && (b.v_max - 1.1025).abs() < 1e-12));
}

#[test]
fn parents_and_children() {
    let t = ieee33();
    assert_eq!(t.parent_line(1).unwrap(), None);
    let mut kids: Vec<_> = t.children_lines(2).unwrap().iter().map(|&l| t.lines[l].to_bus).collect();
    kids.sort_unstable();
    assert_eq!(kids, vec![3, 19]);
    assert!(t.children_lines(18).unwrap().is_empty());
    assert!(matches!(t.parent_line(99), Err(NetworkError::UnknownBus(99))));

    for b in &t.buses {
        if b.id == t.slack_bus {
            continue;
        }
        let l = t.parent_line(b.id).unwrap().unwrap();
        assert_eq!(t.lines[l].to_bus, b.id);
    }
    // children sets partition the non-root incidences
    let mut seen = HashSet::new();
    for b in &t.buses {
        for &l in t.children_lines(b.id).unwrap() {
            assert_eq!(t.lines[l].from_bus, b.id);
            assert!(seen.insert(l));
        }
    }
    assert_eq!(seen.len(), t.n_lines());
}

#[test]
fn traversal_visits_every_bus_once() {
    let t = ieee33();
    let order = t.bfs_order();
    assert_eq!(order.len(), t.n_buses());
    assert_eq!(order[0], t.slack_index());
    let unique: HashSet<_> = order.iter().collect();
    assert_eq!(unique.len(), t.n_buses());
    // every line's sending end is visited before its receiving end
    let rank: Vec<usize> = {
        let mut r = vec![0; order.len()];
        order.iter().enumerate().for_each(|(k, &p)| r[p] = k);
        r
    };
    for l in 0..t.n_lines() {
        let (a, b) = t.line_ends(l);
        assert!(rank[a] < rank[b]);
    }
}

#[test]
fn removing_a_trunk_line_disconnects() {
    let err = ieee33().without_line(2, 3).unwrap_err();
    assert!(err.to_string().contains("disconnected"), "{err}");
}

#[test]
fn per_unit_round_trip() {
    let t = ieee33();
    assert!((t.to_per_unit(52.0) - 0.052).abs() < 1e-15);
    assert_eq!(t.to_per_unit(1000.0), 1.0);
    assert_eq!(t.to_per_unit(0.0), 0.0);
    for k in -6..=6 {
        for m in [1.0, 2.5, 7.3] {
            let x = m * 10f64.powi(k);
            let back = t.from_per_unit(t.to_per_unit(x));
            assert!(((back - x) / x).abs() <= 1e-12);
        }
    }
}

#[test]
fn caps_apply_only_to_named_buses() {
    let t = ieee33().with_p2p_caps(&[(17, 150.0), (32, 90.0)]).unwrap();
    for b in &t.buses {
        let want = match b.id {
            17 => 150.0,
            32 => 90.0,
            _ => 0.0,
        };
        assert_eq!(b.p2p_cap, want);
    }
    assert!(ieee33().with_p2p_caps(&[(17, -1.0)]).is_err());
    assert!(ieee33().with_p2p_caps(&[(40, 1.0)]).is_err());
}

#[test]
fn summary_lists_the_feeder() {
    let s = ieee33().summary();
    assert_eq!(s["n_buses"], 33);
    assert_eq!(s["slack_bus"], 1);
    assert_eq!(s["buses"].as_array().unwrap().len(), 33);
    assert_eq!(s["lines"].as_array().unwrap().len(), 32);
    assert_eq!(s["generators"].as_array().unwrap().len(), 2);
}

#[test]
fn missing_file_is_an_io_error() {
    let err = load_network("/nonexistent/case.txt", CaseFormat::Tabular).unwrap_err();
    assert!(matches!(err, NetworkError::Io { .. }));
}

#[test]
fn loop_is_rejected() {
    let text = "\
[meta]
name tri
s_base_mva 1
v_base_kv 1
slack_bus 1
[buses]
columns id p_load q_load v_min v_max p2p_cap
units - kW kVAr pu pu kW
1 0 0 0.95 1.05 0
2 1 0 0.95 1.05 0
3 1 0 0.95 1.05 0
[lines]
columns id from to r x i_max
units - - - pu pu pu
1 1 2 0.01 0.01 5
2 2 3 0.01 0.01 5
3 3 1 0.01 0.01 5
[generators]
columns bus p_min p_max q_min q_max
units - MW MW MVAr MVAr
1 0 5 -5 5
";
    assert!(matches!(parse_network(text, CaseFormat::Tabular), Err(NetworkError::Validation(_))));
}
