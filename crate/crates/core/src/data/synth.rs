//! Deterministic synthetic outbreak generator that writes tracker-format CSVs.
//!
//! Infections follow a renewal process whose reproduction number is damped
//! multiplicatively by active NPIs; reported cases are delayed, under-ascertained
//! and over-dispersed, with weekday reporting dips and occasional data glitches
//! (missing rows, downward revisions, blank NPI cells).

use std::io::Write;

use chrono::{Duration, NaiveDate};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Poisson};

use crate::npi::{NPI_COLUMNS, NPI_COUNT, NPI_MAX_LEVELS};

/// Relative transmission reduction of each NPI at its maximum level.
const NPI_EFFECT: [f64; NPI_COUNT] = [0.16, 0.20, 0.07, 0.12, 0.05, 0.14, 0.06, 0.07];

/// Generation-interval weights for lags 1..=9 days.
const GENERATION: [f64; 9] = [0.04, 0.10, 0.16, 0.19, 0.17, 0.13, 0.10, 0.07, 0.04];

pub const COUNTRIES: [(&str, &str, u64); 40] = [
    ("United States", "USA", 328_239_523),
    ("United Kingdom", "GBR", 66_834_405),
    ("Italy", "ITA", 60_297_396),
    ("France", "FRA", 67_059_887),
    ("Spain", "ESP", 47_076_781),
    ("Brazil", "BRA", 211_049_527),
    ("Belgium", "BEL", 11_484_055),
    ("Germany", "DEU", 83_132_799),
    ("Iran", "IRN", 82_913_906),
    ("Canada", "CAN", 37_589_262),
    ("Netherlands", "NLD", 17_332_850),
    ("Mexico", "MEX", 127_575_529),
    ("China", "CHN", 1_397_715_000),
    ("Turkey", "TUR", 83_429_615),
    ("Sweden", "SWE", 10_285_453),
    ("India", "IND", 1_366_417_754),
    ("Ecuador", "ECU", 17_373_662),
    ("Russia", "RUS", 144_373_535),
    ("Peru", "PER", 32_510_453),
    ("Switzerland", "CHE", 8_574_832),
    ("Portugal", "PRT", 10_269_417),
    ("Austria", "AUT", 8_877_067),
    ("Ireland", "IRL", 4_941_444),
    ("Poland", "POL", 37_970_874),
    ("Romania", "ROU", 19_356_544),
    ("Chile", "CHL", 18_952_038),
    ("Colombia", "COL", 50_339_443),
    ("Argentina", "ARG", 44_938_712),
    ("Japan", "JPN", 126_264_931),
    ("South Korea", "KOR", 51_709_098),
    ("Israel", "ISR", 9_053_300),
    ("Denmark", "DNK", 5_818_553),
    ("Norway", "NOR", 5_347_896),
    ("Finland", "FIN", 5_520_314),
    ("Czech Republic", "CZE", 10_669_709),
    ("Philippines", "PHL", 108_116_615),
    ("Indonesia", "IDN", 270_625_568),
    ("South Africa", "ZAF", 58_558_270),
    ("Egypt", "EGY", 100_388_073),
    ("Pakistan", "PAK", 216_565_318),
];

#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub seed: u64,
    pub start: NaiveDate,
    pub days: usize,
    /// Countries whose published rows start late enough to fail the usability filter.
    pub late_reporters: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 2020,
            start: NaiveDate::from_ymd_opt(2020, 1, 1).expect("valid date"),
            days: 141,
            late_reporters: 2,
        }
    }
}

struct CountryPlan {
    r0: f64,
    seed_day: usize,
    seed_size: f64,
    ascertainment: f64,
    report_delay: usize,
    weekend_dip: f64,
    dispersion: f64,
    npi_schedule: Vec<[u8; NPI_COUNT]>,
}

fn plan(rng: &mut ChaCha8Rng, days: usize) -> CountryPlan {
    let seed_day: usize = rng.random_range(10..55);
    let response = seed_day + rng.random_range(8..30);
    let relax = if rng.random_bool(0.6) {
        Some(rng.random_range(105..days.max(106)))
    } else {
        None
    };
    let mut targets = [0u8; NPI_COUNT];
    let mut onsets = [0usize; NPI_COUNT];
    for k in 0..NPI_COUNT {
        let max = NPI_MAX_LEVELS[k];
        targets[k] = if rng.random_bool(0.7) { max } else { rng.random_range(1..=max) };
        onsets[k] = response.saturating_sub(6) + rng.random_range(0..14);
    }
    let mut npi_schedule = Vec::with_capacity(days);
    for d in 0..days {
        let mut levels = [0u8; NPI_COUNT];
        for k in 0..NPI_COUNT {
            if d >= onsets[k] {
                // Escalate one level every four days up to the target.
                let steps = ((d - onsets[k]) / 4 + 1) as u8;
                levels[k] = steps.min(targets[k]);
            }
            if let Some(r) = relax {
                if d >= r + k {
                    levels[k] = levels[k].saturating_sub(1 + ((d - r) / 10) as u8);
                }
            }
        }
        npi_schedule.push(levels);
    }
    CountryPlan {
        r0: rng.random_range(2.1..3.3),
        seed_day,
        seed_size: rng.random_range(3.0..20.0),
        ascertainment: rng.random_range(0.08..0.35),
        report_delay: rng.random_range(5..9),
        weekend_dip: if rng.random_bool(0.4) { rng.random_range(0.5..0.8) } else { 1.0 },
        dispersion: rng.random_range(15.0..60.0),
        npi_schedule,
    }
}

/// Simulated reported daily cases and NPI levels for one country.
fn simulate(plan: &CountryPlan, population: f64, rng: &mut ChaCha8Rng, days: usize) -> Vec<u64> {
    let total = days + plan.report_delay;
    let mut infections = vec![0.0f64; total];
    let mut infected = 0.0f64;
    for t in 0..total {
        let day = t.min(days - 1);
        let npi = &plan.npi_schedule[day];
        let mut r = plan.r0;
        for k in 0..NPI_COUNT {
            r *= 1.0 - NPI_EFFECT[k] * npi[k] as f64 / NPI_MAX_LEVELS[k] as f64;
        }
        let pressure: f64 = GENERATION
            .iter()
            .enumerate()
            .filter(|(lag, _)| t > *lag)
            .map(|(lag, w)| w * infections[t - lag - 1])
            .sum();
        let susceptible = (1.0 - infected / population).max(0.0);
        let mut new = r * pressure * susceptible;
        if t >= plan.seed_day && t < plan.seed_day + 3 {
            new += plan.seed_size;
        }
        infections[t] = new;
        infected += new;
    }
    let shape = plan.dispersion;
    (0..days)
        .map(|d| {
            let source = d.checked_sub(plan.report_delay).map_or(0.0, |s| infections[s]);
            let weekday = (d % 7) as u32;
            let dip = if weekday >= 5 { plan.weekend_dip } else { 1.0 };
            let mean = source * plan.ascertainment * dip;
            if mean < 1e-3 {
                return 0;
            }
            let lambda = Gamma::new(shape, mean / shape).expect("positive").sample(rng);
            if lambda <= 0.0 {
                0
            } else {
                Poisson::new(lambda).map(|p| p.sample(rng) as u64).unwrap_or(0)
            }
        })
        .collect()
}

/// Writes the tracker-format snapshot CSV and the matching population CSV.
pub fn write_snapshot<W1: Write, W2: Write>(cfg: &SynthConfig, csv_out: W1, population_out: W2) -> std::io::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut cw = csv::Writer::from_writer(csv_out);
    let mut header = vec!["CountryName", "CountryCode", "RegionName", "Date"];
    header.extend(NPI_COLUMNS);
    header.push("ConfirmedCases");
    cw.write_record(&header)?;

    let mut pw = csv::Writer::from_writer(population_out);
    pw.write_record(["country", "population"])?;

    for (idx, (name, code, population)) in COUNTRIES.iter().enumerate() {
        pw.write_record([name.to_string(), population.to_string()])?;
        let p = plan(&mut rng, cfg.days);
        let cases = simulate(&p, *population as f64, &mut rng, cfg.days);
        let late = idx >= COUNTRIES.len() - cfg.late_reporters;
        let first_row = if late { cfg.days - 30 } else { 0 };
        let glitchy = rng.random_bool(0.25);
        let mut cumulative = 0u64;
        for (d, &daily) in cases.iter().enumerate().take(cfg.days) {
            cumulative += daily;
            if d < first_row {
                continue;
            }
            if glitchy && d > 60 && rng.random_bool(0.01) {
                continue; // missing day
            }
            let mut reported = cumulative;
            if glitchy && d > 60 && cumulative > 100 && rng.random_bool(0.01) {
                reported = cumulative - cumulative / 200; // transient downward revision
            }
            let date = cfg.start + Duration::days(d as i64);
            let mut rec = vec![
                name.to_string(),
                code.to_string(),
                String::new(),
                date.format("%Y%m%d").to_string(),
            ];
            for k in 0..NPI_COUNT {
                let blank = d > 0 && rng.random_bool(0.01);
                rec.push(if blank {
                    String::new()
                } else {
                    p.npi_schedule[d][k].to_string()
                });
            }
            rec.push(reported.to_string());
            cw.write_record(&rec)?;
        }
    }
    cw.flush()?;
    pw.flush()?;
    Ok(())
}
