use std::collections::HashSet;
use std::path::Path;

use p2pgrid::config::{Config, Setup};
use p2pgrid::scenario::{
    generate_dataset, pearson_rows, read_dataset, run_scenario, sample_scenario, scenario_seed, split, write_dataset,
    SampledParams, DATASET_FILE,
};
use p2pgrid::surrogate::N_FEATURES;
use tempfile::TempDir;

fn setup() -> Setup {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/default.toml");
    Setup::new(Config::load(path).unwrap()).unwrap()
}

fn draws(p: &SampledParams) -> [f64; N_FEATURES] {
    [p.c_ls, p.lambda_corr, p.load_scale, p.power_factor, p.solar_uncertainty_pct]
}

#[test]
fn records_replay_from_their_seed() {
    let s = setup();
    let data = generate_dataset(&s, 6, &s.config.sampling, 21, 2).unwrap();
    assert_eq!(data.records.len() + data.drops.dropped(), 6);
    for r in &data.records {
        assert_eq!(r.seed, scenario_seed(21, r.id));
        assert_eq!(r.params, sample_scenario(r.seed, &s.config.sampling));
        let again = run_scenario(&s, r.id, r.seed, r.params).unwrap().unwrap();
        assert_eq!(&again, r);
        assert_eq!(r.features.len(), s.topo.n_buses());
        // only microgrid buses carry a trade
        for (i, f) in r.features.iter().enumerate() {
            if !s.mg_positions.contains(&i) {
                assert_eq!(f[0], 0.0);
                assert_eq!(r.target[i], 0.0);
            }
        }
    }
}

#[test]
fn master_seeds_give_disjoint_streams() {
    let a: HashSet<u64> = (0..20_000).map(|i| scenario_seed(1, i)).collect();
    let b: HashSet<u64> = (0..20_000).map(|i| scenario_seed(2, i)).collect();
    assert_eq!(a.len(), 20_000);
    assert_eq!(b.len(), 20_000);
    assert!(a.is_disjoint(&b));
}

#[test]
fn sampled_parameters_are_nearly_uncorrelated() {
    let s = setup();
    let rows: Vec<[f64; N_FEATURES]> =
        (0..5000).map(|i| draws(&sample_scenario(scenario_seed(7, i), &s.config.sampling))).collect();
    let n = rows.len() as f64;
    let mean = |k: usize| rows.iter().map(|r| r[k]).sum::<f64>() / n;
    for i in 0..N_FEATURES {
        for j in i + 1..N_FEATURES {
            let (mi, mj) = (mean(i), mean(j));
            let cov: f64 = rows.iter().map(|r| (r[i] - mi) * (r[j] - mj)).sum();
            let vi: f64 = rows.iter().map(|r| (r[i] - mi).powi(2)).sum();
            let vj: f64 = rows.iter().map(|r| (r[j] - mj).powi(2)).sum();
            let rho = cov / (vi * vj).sqrt();
            assert!(rho.abs() <= 0.15, "{i},{j}: {rho}");
            let refs: Vec<&[f64; N_FEATURES]> = rows.iter().collect();
            let m = pearson_rows(&refs).unwrap();
            assert!((m[i][j] - rho).abs() < 1e-9);
        }
    }
    for r in &rows {
        let rg = &s.config.sampling;
        assert!(r[0] >= rg.c_ls.0 && r[0] <= rg.c_ls.1);
        assert!(r[3] >= rg.power_factor.0 && r[3] <= rg.power_factor.1);
    }
}

#[test]
fn worker_count_does_not_change_the_data() {
    let s = setup();
    let one = generate_dataset(&s, 5, &s.config.sampling, 3, 1).unwrap();
    let four = generate_dataset(&s, 5, &s.config.sampling, 3, 4).unwrap();
    assert_eq!(one.records, four.records);
    assert_eq!(one.drops, four.drops);
    assert!(generate_dataset(&s, 0, &s.config.sampling, 3, 1).is_err());
    assert!(generate_dataset(&s, 3, &s.config.sampling, 3, 0).is_err());
}

#[test]
fn datasets_survive_a_file_round_trip() {
    let s = setup();
    let data = generate_dataset(&s, 3, &s.config.sampling, 11, 1).unwrap();
    let dir = TempDir::new().unwrap();
    let manifest = write_dataset(dir.path(), &data, serde_json::Value::Null).unwrap();
    assert_eq!(manifest.retained, data.records.len());
    let back = read_dataset(&dir.path().join(DATASET_FILE)).unwrap();
    assert_eq!(back, data.records);
}

#[test]
fn split_partitions_without_overlap() {
    let items: Vec<u32> = (0..103).collect();
    let (a, b) = split(&items, 0.8, 9).unwrap();
    assert_eq!(a.len() + b.len(), 103);
    assert!((a.len() as f64 - 0.8 * 103.0).abs() <= 1.0);
    let all: HashSet<u32> = a.iter().chain(&b).copied().collect();
    assert_eq!(all.len(), 103);
    assert!(a.windows(2).all(|w| w[0] < w[1]) && b.windows(2).all(|w| w[0] < w[1]));
    assert_eq!(split(&items, 0.8, 9).unwrap(), (a, b));
    assert!(split(&items, 1.0, 9).is_err());
}
