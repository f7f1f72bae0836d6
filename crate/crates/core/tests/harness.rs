use std::path::Path;

use p2pgrid::config::{Config, Setup};
use p2pgrid::dopf::DopfModel;
use p2pgrid::harness::{run_case, HarnessError};
use p2pgrid::surrogate::{Hyper, SurrogateModel};

fn config() -> Config {
    Config::load(Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/default.toml")).unwrap()
}

fn tiny_model() -> SurrogateModel {
    let hyper = Hyper {
        d_model: 8,
        n_layers: 1,
        d_ff: 16,
        n_heads: 2,
    };
    SurrogateModel::new(hyper, 4).unwrap()
}

#[test]
fn without_a_loss_price_a_carried_hour_is_the_same_in_cases_one_and_two() {
    let mut cfg = config();
    cfg.horizon.hours = 1;
    cfg.dopf.c_ls = 0.0;
    let setup = Setup::new(cfg).unwrap();
    let one = run_case(&setup, 1, None).unwrap();
    let two = run_case(&setup, 2, None).unwrap();
    let (h1, h2) = (&one.hours[0], &two.hours[0]);
    assert_eq!(h2.rounds, 1);
    assert_eq!(h1.transacted_kw, h2.transacted_kw);
    assert!(h1.imbalance_kw.abs() < setup.config.market.epsilon);
    assert!(h2.imbalance_kw.abs() < setup.config.market.epsilon);
    assert_eq!(h1.price, h2.price);
}

#[test]
fn case_three_never_calls_the_operator_while_clearing() {
    let mut cfg = config();
    cfg.horizon.hours = 4;
    let setup = Setup::new(cfg).unwrap();
    let before = setup.dopf.solve_count();
    let model = tiny_model();
    let res = run_case(&setup, 3, Some(&model)).unwrap();
    assert_eq!(setup.dopf.solve_count() - before, 4);
    for h in &res.hours {
        assert_eq!(h.dopf_calls_in_clearing, 0);
        assert_eq!(h.dopf_calls, 1);
        assert!(h.predictor_calls >= 1);
        assert!(h.audit_voltages.as_ref().unwrap().len() == setup.topo.n_buses());
    }
}

#[test]
fn operator_trims_but_never_reverses_trades() {
    let mut cfg = config();
    cfg.horizon.hours = 6;
    let setup = Setup::new(cfg).unwrap();
    let two = run_case(&setup, 2, None).unwrap();
    for h in &two.hours {
        for (p, a) in h.proposed_kw.iter().zip(&h.transacted_kw) {
            assert!(a.abs() <= p.abs() + 1e-6 && p * a >= -1e-9, "{p} -> {a}");
        }
        assert!(h.rounds >= 1 && h.rounds <= setup.config.case2.max_rounds);
        assert_eq!(h.dopf_calls, h.rounds);
        for t in &h.payoff {
            let sum = t.utility + t.revenue - t.gen_cost - t.degradation;
            assert!((sum - t.total).abs() < 1e-9);
        }
    }
}

#[test]
fn runs_are_deterministic() {
    let mut cfg = config();
    cfg.horizon.hours = 3;
    let setup = Setup::new(cfg).unwrap();
    let model = tiny_model();
    for case in 1..=3 {
        let a = run_case(&setup, case, Some(&model)).unwrap();
        let b = run_case(&setup, case, Some(&model)).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    }
    // a fresh operator model sees the same answers
    let mut other = setup.clone();
    other.dopf = DopfModel::new(&setup.topo);
    let a = run_case(&setup, 2, None).unwrap();
    let b = run_case(&other, 2, None).unwrap();
    assert_eq!(a.hours, b.hours);
}

#[test]
fn bad_case_requests_are_errors() {
    let setup = Setup::new(config()).unwrap();
    assert!(matches!(run_case(&setup, 4, None), Err(HarnessError::UnknownCase(4))));
    assert!(matches!(run_case(&setup, 3, None), Err(HarnessError::MissingModel)));
}
