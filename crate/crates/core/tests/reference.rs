use matchest_core::io::{outcome_table_csv, to_json_bytes};
use matchest_core::model::validate_market;
use matchest_core::oracle::{count_assignments, mc_matching_frequencies, tiny_market, tiny_params};
use matchest_core::synth::{generate, SimConfig};

#[test]
fn matching_frequencies_sum_to_one_over_feasible_matchings() {
    let observed = tiny_market("t", &[1, 2], 5).unwrap();
    let n = 200_000;
    let counts = mc_matching_frequencies(&observed.market, &tiny_params(), n, 6).unwrap();
    assert_eq!(counts.values().sum::<usize>(), n);
    assert!(counts.len() as u128 <= count_assignments(&[1, 2]));
    for assignment in counts.keys() {
        let mut load = [0usize; 2];
        for &a in assignment {
            load[a] += 1;
        }
        assert_eq!(load, [1, 2]);
    }
}

#[test]
fn generated_markets_pass_validation_under_varied_settings() {
    for (k, (a, lo, hi)) in [(1, 1, 1), (3, 2, 6), (4, 10, 20)].into_iter().enumerate() {
        let data = generate(&SimConfig {
            n_markets: 6,
            accelerators_per_market: a,
            quota_min: lo,
            quota_max: hi,
            seed: k as u64,
            ..Default::default()
        })
        .unwrap();
        for m in &data.observed {
            assert!(validate_market(&m.market).is_empty(), "{}", m.market.id);
        }
    }
}

#[test]
fn regenerating_with_a_seed_reproduces_the_bytes() {
    let config = SimConfig {
        n_markets: 5,
        seed: 77,
        ..Default::default()
    };
    let render = || {
        let data = generate(&config).unwrap();
        let mut bytes = to_json_bytes(&data.truth).unwrap();
        bytes.extend(outcome_table_csv::<()>(&data.outcomes, None).unwrap());
        for m in &data.observed {
            bytes.extend(m.market.to_json().unwrap().into_bytes());
        }
        bytes
    };
    assert_eq!(render(), render());
}
