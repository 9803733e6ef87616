use chrono::{Duration, NaiveDate};
use esp_core::data::CountrySeries;
use esp_core::forecast::{rollout, Actions, ForecastContext};
use esp_core::NpiVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn series(seed: u64, n: usize) -> CountrySeries {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let start = NaiveDate::from_ymd_opt(2020, 2, 1).unwrap();
    CountrySeries {
        id: format!("C{seed}"),
        name: format!("C{seed}"),
        population: 2_000_000,
        dates: (0..n).map(|i| start + Duration::days(i as i64)).collect(),
        new_cases: (0..n).map(|i| rng.random_range(0..50) + i as u64 * 3).collect(),
        npis: (0..n)
            .map(|_| NpiVector::saturating(std::array::from_fn(|_| rng.random_range(0..5))))
            .collect(),
        flags: vec![],
    }
}

/// Full-history recomputation: every quantity is derived from the complete
/// case array rather than from sliding windows.
fn oracle(s: &CountrySeries, start: usize, ratios: &[f64]) -> Vec<f64> {
    let p = s.population as f64;
    let mut x: Vec<f64> = s.new_cases[..=start].iter().map(|&v| v as f64).collect();
    for &r in ratios {
        let n = x.len();
        let y_prev: f64 = x.iter().sum();
        let z_prev: f64 = x[n - 7..n].iter().sum::<f64>() / 7.0;
        let v = (r * (p - y_prev) / p - 1.0) * 7.0 * z_prev + x[n - 7];
        x.push(v.max(0.0).min(p - y_prev));
    }
    x[start + 1..].to_vec()
}

#[test]
fn rollout_matches_full_history_recomputation() {
    for seed in 0..20u64 {
        let s = series(seed, 60);
        let start = 30 + seed as usize % 20;
        let ctx = ForecastContext::from_series(&s, start, 2.0).unwrap();
        let model = |a: &[NpiVector], r: &[f64]| {
            0.7 + 0.02 * (23 - a[20].stringency()) as f64 + 0.1 * r[20] - 0.05 * r[0]
        };
        let horizon = 40;
        let sched: Vec<NpiVector> = (0..horizon)
            .map(|i| NpiVector::saturating([(i % 4) as i64; 8]))
            .collect();
        let f = rollout(&model, &ctx, horizon, Actions::Schedule(&sched)).unwrap();
        let r_hat: Vec<f64> = f.days.iter().map(|d| d.r_hat).collect();
        let expected = oracle(&s, start, &r_hat);
        for (got, want) in f.new_cases().iter().zip(&expected) {
            assert!((got - want).abs() <= 1e-9 * want.abs().max(1.0), "{got} vs {want}");
        }
        let y0: f64 = s.new_cases[..=start].iter().map(|&v| v as f64).sum();
        let y_end = y0 + expected.iter().sum::<f64>();
        assert!((f.days.last().unwrap().cumulative - y_end).abs() < 1e-6);
    }
}

#[test]
fn rollout_is_deterministic_and_csv_round_trips() {
    let s = series(7, 50);
    let ctx = ForecastContext::from_series(&s, 40, 2.0).unwrap();
    let model = |_: &[NpiVector], r: &[f64]| 0.5 + 0.5 * r[20];
    let sched = vec![NpiVector::MAX; 10];
    let a = rollout(&model, &ctx, 10, Actions::Schedule(&sched)).unwrap();
    let b = rollout(&model, &ctx, 10, Actions::Schedule(&sched)).unwrap();
    assert_eq!(a, b);
    let mut buf = Vec::new();
    a.write_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert_eq!(text.lines().count(), 11);
    assert!(text.starts_with("date,r_hat,new_cases,cumulative,active"));
    let json = serde_json::to_string(&a).unwrap();
    assert_eq!(serde_json::from_str::<esp_core::forecast::ForecastResult>(&json).unwrap(), a);
}
