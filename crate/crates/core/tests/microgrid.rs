use p2pgrid::microgrid::{
    payoff, solve_local, utility, AcceptanceResponse, BessSpec, LocalOptions, MgDecision, MicrogridSpec, Penalty, Role,
};

fn spec() -> MicrogridSpec {
    MicrogridSpec {
        id: "T".into(),
        bus: 5,
        alpha: vec![1.0],
        beta: vec![0.03],
        a: 0.01,
        b: 0.2,
        g_max: 10.0,
        load_min: 2.0,
        load_max: 20.0,
        pv_profile: vec![4.0],
        bess: BessSpec {
            p_max: 3.0,
            soc_min: 0.0,
            soc_max: 20.0,
            eta_c: 0.9,
            eta_d: 0.9,
            soc_init: 10.0,
        },
        lambda_d: 0.02,
    }
}

fn steps(lo: f64, hi: f64, h: f64) -> Vec<f64> {
    let n = ((hi - lo) / h).round() as usize;
    (0..=n).map(|i| lo + i as f64 * h).collect()
}

/// Hourly payoff written out directly from the device terms.
fn direct_payoff(s: &MicrogridSpec, price: f64, load: f64, gen: f64, ren: f64, battery: f64) -> f64 {
    let (a, b) = (s.alpha[0], s.beta[0]);
    let u = if load <= a / (2.0 * b) { a * load - b * load * load } else { a * a / (4.0 * b) };
    let net = gen + ren + battery - load;
    u + price * net - s.a * gen * gen - s.b * gen - s.lambda_d * battery.abs()
}

#[test]
fn local_solution_beats_a_half_kilowatt_grid() {
    let s = spec();
    for price in [0.1, 0.4, 0.6, 0.9, 1.4] {
        let d = solve_local(&s, price, 0, 10.0, &LocalOptions::default()).unwrap();
        let mut best = (f64::NEG_INFINITY, [0.0; 4]);
        for &load in &steps(2.0, 20.0, 0.5) {
            for &gen in &steps(0.0, 10.0, 0.5) {
                for &ren in &steps(0.0, 4.0, 0.5) {
                    for &bat in &steps(-3.0, 3.0, 0.5) {
                        let v = direct_payoff(&s, price, load, gen, ren, bat);
                        if v > best.0 {
                            best = (v, [load, gen, ren, bat]);
                        }
                    }
                }
            }
        }
        let got = direct_payoff(&s, price, d.load, d.gen, d.ren, d.p_dch - d.p_ch);
        assert!(got >= best.0 - 1e-9, "price {price}: {got} < {}", best.0);
        assert!((got - payoff(&d, price, &s, 0).unwrap()).abs() < 1e-9);
        let found = [d.load, d.gen, d.ren, d.p_dch - d.p_ch];
        for (x, y) in found.iter().zip(&best.1) {
            assert!((x - y).abs() <= 0.5 + 1e-9, "price {price}: {found:?} vs {:?}", best.1);
        }
    }
}

#[test]
fn optimal_payoff_moves_with_price_at_rate_p_net() {
    let s = spec();
    let value = |price: f64| {
        let d = solve_local(&s, price, 0, 10.0, &LocalOptions::default()).unwrap();
        (payoff(&d, price, &s, 0).unwrap(), d.p_net)
    };
    for price in [0.15, 0.45, 0.7, 1.1] {
        let h = 1e-4;
        let fd = (value(price + h).0 - value(price - h).0) / (2.0 * h);
        let p_net = value(price).1;
        assert!((fd - p_net).abs() <= 1e-4 * (1.0 + p_net.abs()), "price {price}: {fd} vs {p_net}");
    }
}

#[test]
fn utility_is_concave_and_flat_past_the_knee() {
    let (a, b) = (1.0, 0.03);
    let knee = a / (2.0 * b);
    let h = 0.25;
    let pts = steps(h, 30.0, h);
    for w in pts.windows(3) {
        let second = utility(w[0], a, b).unwrap() - 2.0 * utility(w[1], a, b).unwrap() + utility(w[2], a, b).unwrap();
        assert!(second <= 1e-12, "at {}: {second}", w[1]);
    }
    assert_eq!(utility(knee + 1.0, a, b).unwrap(), utility(knee + 9.0, a, b).unwrap());
    assert!(utility(-1.0, a, b).is_err());
}

fn assert_complementary(d: &MgDecision) {
    assert!(d.p_ch * d.p_dch == 0.0, "{d:?}");
    assert!(d.p_sell * d.p_buy == 0.0, "{d:?}");
    assert!((d.p_sell - d.p_buy - d.p_net).abs() < 1e-12);
    let role = if d.p_net > 1e-6 {
        Role::Seller
    } else if d.p_net < -1e-6 {
        Role::Buyer
    } else {
        Role::Neutral
    };
    assert_eq!(d.role, role);
}

#[test]
fn decisions_are_complementary_at_every_price() {
    let s = spec();
    for i in 0..=40 {
        let price = 0.05 * i as f64;
        for soc in [0.0, 1.0, 10.0, 19.5, 20.0] {
            assert_complementary(&solve_local(&s, price, 0, soc, &LocalOptions::default()).unwrap());
        }
    }
}

struct Identity;

impl AcceptanceResponse for Identity {
    fn respond(&self, p: f64) -> Result<(f64, f64), String> {
        Ok((p, 1.0))
    }
}

struct Cap(f64);

impl AcceptanceResponse for Cap {
    fn respond(&self, p: f64) -> Result<(f64, f64), String> {
        Ok(if p > self.0 { (self.0, 0.0) } else { (p, 1.0) })
    }
}

#[test]
fn identity_response_leaves_the_decision_alone() {
    let s = spec();
    for price in [0.2, 0.7, 1.3] {
        let plain = solve_local(&s, price, 0, 10.0, &LocalOptions::default()).unwrap();
        let opts = LocalOptions {
            penalty: Some(Penalty {
                mu: 1e4,
                response: &Identity,
            }),
            ..Default::default()
        };
        let pen = solve_local(&s, price, 0, 10.0, &opts).unwrap();
        assert!((plain.p_net - pen.p_net).abs() < 1e-6, "{} vs {}", plain.p_net, pen.p_net);
    }
}

#[test]
fn large_penalty_pulls_the_proposal_to_the_cap() {
    let s = spec();
    let price = 1.4;
    let plain = solve_local(&s, price, 0, 10.0, &LocalOptions::default()).unwrap();
    let cap = plain.p_net - 4.0;
    let mut last = plain.p_net;
    for mu in [0.1, 1.0, 10.0, 1e3] {
        let opts = LocalOptions {
            penalty: Some(Penalty {
                mu,
                response: &Cap(cap),
            }),
            ..Default::default()
        };
        let d = solve_local(&s, price, 0, 10.0, &opts).unwrap();
        assert!(d.p_net <= last + 1e-6, "mu {mu}: {} after {last}", d.p_net);
        last = d.p_net;
    }
    assert!((last - cap).abs() < 0.01, "{last} vs {cap}");
}

#[test]
fn bounds_and_bad_inputs() {
    let s = spec();
    let opts = LocalOptions {
        p_net_bounds: Some((-1.0, 1.0)),
        ..Default::default()
    };
    let d = solve_local(&s, 1.4, 0, 10.0, &opts).unwrap();
    assert!(d.p_net <= 1.0 + 1e-6 && d.p_net >= -1.0 - 1e-6);
    let opts = LocalOptions {
        p_net_bounds: Some((100.0, 200.0)),
        ..Default::default()
    };
    assert!(solve_local(&s, 1.0, 0, 10.0, &opts).is_err());
    assert!(solve_local(&s, -0.1, 0, 10.0, &LocalOptions::default()).is_err());
    assert!(solve_local(&s, 0.5, 0, 25.0, &LocalOptions::default()).is_err());
}

#[test]
fn payoff_slopes_in_load_and_generation_match_differences() {
    let s = spec();
    let price = 0.55;
    let d = solve_local(&s, price, 0, 10.0, &LocalOptions::default()).unwrap();
    let h = 1e-4;
    for (load, gen) in [(5.0, 2.0), (9.5, 6.0), (14.0, 0.5)] {
        let at = |l: f64, g: f64| {
            let mut e = d.clone();
            e.load = l;
            e.gen = g;
            e.p_net = e.gen + e.ren + e.p_dch - e.load - e.p_ch;
            e.p_sell = e.p_net.max(0.0);
            e.p_buy = (-e.p_net).max(0.0);
            payoff(&e, price, &s, 0).unwrap()
        };
        let d_load = (at(load + h, gen) - at(load - h, gen)) / (2.0 * h);
        let d_gen = (at(load, gen + h) - at(load, gen - h)) / (2.0 * h);
        let want_load = s.alpha[0] - 2.0 * s.beta[0] * load - price;
        let want_gen = price - 2.0 * s.a * gen - s.b;
        assert!((d_load - want_load).abs() <= 1e-5 * want_load.abs().max(1e-3), "{d_load} vs {want_load}");
        assert!((d_gen - want_gen).abs() <= 1e-5 * want_gen.abs().max(1e-3), "{d_gen} vs {want_gen}");
    }
}
