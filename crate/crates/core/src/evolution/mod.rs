//! NSGA-II evolution of prescriptor networks against a predictor surrogate.

pub mod net;
pub mod nsga;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use chrono::NaiveDate;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tracing::{info, warn};

pub use net::{PrescriptorNet, GENOME_LEN};
pub use nsga::{crowding_distance, dominates, hypervolume_2d, nondominated_sort, rank_population, weakly_dominates, Objectives, Ranking};

use crate::data::CountrySeries;
use crate::error::{Error, Result};
use crate::forecast::{rollout, Actions, ForecastContext, MAX_HORIZON};
use crate::npi::MAX_STRINGENCY;
use crate::predictor::RatioModel;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvolutionConfig {
    pub population: usize,
    pub elite_frac: f64,
    pub parent_pool_frac: f64,
    pub mutation_prob: f64,
    pub mutation_mean: f64,
    pub mutation_std: f64,
    pub generations: usize,
    pub horizon: usize,
    pub countries: usize,
    /// Fixed hypervolume reference; derived from the initial population when absent.
    pub hv_reference: Option<Objectives>,
    pub seed: u64,
}

impl Default for EvolutionConfig {
    fn default() -> Self {
        Self {
            population: 250,
            elite_frac: 0.06,
            parent_pool_frac: 0.20,
            mutation_prob: 0.20,
            mutation_mean: 1.0,
            mutation_std: 0.1,
            generations: 110,
            horizon: 180,
            countries: 20,
            hv_reference: None,
            seed: 0,
        }
    }
}

impl EvolutionConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(0.0 < self.elite_frac && self.elite_frac < self.parent_pool_frac && self.parent_pool_frac <= 1.0) {
            return bad("need 0 < elite_frac < parent_pool_frac <= 1");
        }
        if self.population < 2 {
            return bad("population must be at least 2");
        }
        if !(0.0..=1.0).contains(&self.mutation_prob) || self.mutation_std < 0.0 {
            return bad("mutation_prob must lie in [0, 1] and mutation_std be >= 0");
        }
        if self.horizon == 0 || self.horizon > MAX_HORIZON {
            return bad("horizon must lie in 1..=365");
        }
        Ok(())
    }

    pub fn elite_count(&self) -> usize {
        ((self.elite_frac * self.population as f64).round() as usize).clamp(1, self.population - 1)
    }

    pub fn pool_size(&self) -> usize {
        ((self.parent_pool_frac * self.population as f64).ceil() as usize).clamp(2, self.population)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Individual {
    /// Content hash of the weights.
    pub id: String,
    pub net: PrescriptorNet,
    /// `[mean new cases, mean daily stringency]`.
    pub objectives: Objectives,
    pub failed: bool,
    pub generation: usize,
}

impl Individual {
    pub fn mean_cases(&self) -> f64 {
        self.objectives[0]
    }

    pub fn mean_stringency(&self) -> f64 {
        self.objectives[1]
    }
}

pub fn genome_hash(weights: &[f64]) -> String {
    let mut h = Sha256::new();
    for w in weights {
        h.update(w.to_le_bytes());
    }
    hex::encode(&h.finalize()[..8])
}

pub const WORST_OBJECTIVES: Objectives = [f64::MAX, MAX_STRINGENCY as f64];

/// Closed-loop objectives of one prescriptor over all contexts.
/// Returns `(objectives, failed)`; failures get [`WORST_OBJECTIVES`].
pub fn evaluate<M: RatioModel + ?Sized>(
    net: &PrescriptorNet,
    predictor: &M,
    contexts: &[ForecastContext],
    horizon: usize,
) -> (Objectives, bool) {
    if contexts.is_empty() || horizon == 0 {
        return (WORST_OBJECTIVES, true);
    }
    let mut cases = 0.0;
    let mut stringency = 0.0;
    for ctx in contexts {
        match rollout(predictor, ctx, horizon, Actions::Policy(net)) {
            Ok(f) => {
                cases += f.total_cases() / horizon as f64;
                stringency += f.days.iter().map(|d| f64::from(d.npis.stringency())).sum::<f64>() / horizon as f64;
            }
            Err(e) => {
                warn!(country = %ctx.country, error = %e, "rollout failed during evaluation");
                return (WORST_OBJECTIVES, true);
            }
        }
    }
    let n = contexts.len() as f64;
    let obj = [cases / n, stringency / n];
    if obj.iter().all(|v| v.is_finite()) {
        (obj, false)
    } else {
        (WORST_OBJECTIVES, true)
    }
}

fn parallel_map<T: Sync, U: Send>(items: &[T], f: impl Fn(&T) -> U + Sync) -> Vec<U> {
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get()).min(items.len().max(1));
    if threads <= 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(threads);
    std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|c| {
                let f = &f;
                s.spawn(move || c.iter().map(f).collect::<Vec<_>>())
            })
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("evaluation thread panicked")).collect()
    })
}

fn derived_rng(seed: u64, generation: usize, index: usize) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update((generation as u64).to_le_bytes());
    h.update((index as u64).to_le_bytes());
    let digest = h.finalize();
    ChaCha8Rng::from_seed(digest.into())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationLog {
    pub generation: usize,
    pub front_size: usize,
    pub hypervolume: f64,
    pub min_cases: f64,
    pub min_stringency: f64,
    pub failures: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvolutionResult {
    pub config: EvolutionConfig,
    pub reference: Objectives,
    pub population: Vec<Individual>,
    /// Nondominated members of the final population.
    pub front: Vec<Individual>,
    /// Statistics of the initial population, before any breeding.
    pub initial: GenerationLog,
    /// One entry per bred generation.
    pub log: Vec<GenerationLog>,
}

/// Uniform per-weight crossover followed by multiplicative mutation.
pub fn breed<R: Rng + ?Sized>(a: &PrescriptorNet, b: &PrescriptorNet, cfg: &EvolutionConfig, rng: &mut R) -> PrescriptorNet {
    let factor = Normal::new(cfg.mutation_mean, cfg.mutation_std).expect("validated std");
    let weights = a
        .weights
        .iter()
        .zip(&b.weights)
        .map(|(&x, &y)| {
            let w = if rng.random_bool(0.5) { x } else { y };
            if rng.random_bool(cfg.mutation_prob) {
                w * factor.sample(rng)
            } else {
                w
            }
        })
        .collect();
    PrescriptorNet { weights }
}

/// Picks `n` survivors from `points`. Every member of `protect` (the previous
/// nondominated set) is kept, or replaced by a current front member that
/// weakly dominates it; the rest are filled in crowded-comparison order.
pub fn select_survivors(points: &[Objectives], protect: &[usize], n: usize) -> Vec<usize> {
    let ranking = rank_population(points);
    let order = ranking.order();
    let front0: Vec<usize> = order.iter().copied().filter(|&i| ranking.rank[i] == 0).collect();
    let mut chosen = Vec::with_capacity(n);
    let mut taken = vec![false; points.len()];
    for &p in protect {
        let keep = if ranking.rank[p] == 0 {
            p
        } else {
            *front0
                .iter()
                .find(|&&q| weakly_dominates(&points[q], &points[p]))
                .expect("a dominated point has a nondominated dominator")
        };
        if !taken[keep] {
            taken[keep] = true;
            chosen.push(keep);
        }
    }
    for &i in &order {
        if chosen.len() >= n {
            break;
        }
        if !taken[i] {
            taken[i] = true;
            chosen.push(i);
        }
    }
    chosen.sort_by(|&a, &b| ranking.compare(a, b));
    chosen
}

fn make_individual(net: PrescriptorNet, objectives: Objectives, failed: bool, generation: usize) -> Individual {
    Individual {
        id: genome_hash(&net.weights),
        net,
        objectives,
        failed,
        generation,
    }
}

fn log_generation(generation: usize, pop: &[Individual], reference: Objectives) -> GenerationLog {
    let objs: Vec<Objectives> = pop.iter().map(|i| i.objectives).collect();
    let front = nondominated_sort(&objs).into_iter().next().unwrap_or_default();
    let front_objs: Vec<Objectives> = front.iter().map(|&i| objs[i]).collect();
    GenerationLog {
        generation,
        front_size: front.len(),
        hypervolume: hypervolume_2d(&front_objs, reference),
        min_cases: objs.iter().map(|o| o[0]).fold(f64::INFINITY, f64::min),
        min_stringency: objs.iter().map(|o| o[1]).fold(f64::INFINITY, f64::min),
        failures: pop.iter().filter(|i| i.failed).count(),
    }
}

/// Runs the full generational loop. `on_generation` observes each log entry.
pub fn evolve<M: RatioModel + ?Sized>(
    cfg: &EvolutionConfig,
    predictor: &M,
    contexts: &[ForecastContext],
    mut on_generation: impl FnMut(&GenerationLog),
) -> Result<EvolutionResult> {
    cfg.validate()?;
    if contexts.is_empty() {
        return Err(Error::Empty("no evaluation contexts".into()));
    }
    let eval = |net: &PrescriptorNet| evaluate(net, predictor, contexts, cfg.horizon);

    let initial: Vec<PrescriptorNet> = (0..cfg.population)
        .map(|i| PrescriptorNet::orthogonal(&mut derived_rng(cfg.seed, 0, i)))
        .collect();
    let scores = parallel_map(&initial, eval);
    let mut pop: Vec<Individual> = initial
        .into_iter()
        .zip(scores)
        .map(|(net, (o, f))| make_individual(net, o, f, 0))
        .collect();
    let reference = cfg.hv_reference.unwrap_or_else(|| {
        let worst_cases = pop
            .iter()
            .filter(|i| !i.failed)
            .map(|i| i.objectives[0])
            .fold(0.0, f64::max);
        [worst_cases * 1.1 + 1.0, MAX_STRINGENCY as f64 + 1.0]
    });
    let initial_log = log_generation(0, &pop, reference);
    on_generation(&initial_log);
    let mut log = Vec::with_capacity(cfg.generations);

    for generation in 1..=cfg.generations {
        let objs: Vec<Objectives> = pop.iter().map(|i| i.objectives).collect();
        let ranking = rank_population(&objs);
        let order = ranking.order();
        let pool = &order[..cfg.pool_size()];
        let n_children = cfg.population - cfg.elite_count();
        let children: Vec<PrescriptorNet> = (0..n_children)
            .map(|c| {
                let mut rng = derived_rng(cfg.seed, generation, c);
                let mut pick = || {
                    let a = rng.random_range(0..pool.len());
                    let b = rng.random_range(0..pool.len());
                    pool[a.min(b)]
                };
                let (p1, p2) = (pick(), pick());
                breed(&pop[p1].net, &pop[p2].net, cfg, &mut rng)
            })
            .collect();
        let scores = parallel_map(&children, eval);
        let protect = ranking.fronts[0].clone();
        let mut union = pop;
        union.extend(
            children
                .into_iter()
                .zip(scores)
                .map(|(net, (o, f))| make_individual(net, o, f, generation)),
        );
        let union_objs: Vec<Objectives> = union.iter().map(|i| i.objectives).collect();
        let keep = select_survivors(&union_objs, &protect, cfg.population);
        let mut slots: Vec<Option<Individual>> = union.into_iter().map(Some).collect();
        pop = keep.iter().map(|&i| slots[i].take().expect("unique survivor")).collect();

        let entry = log_generation(generation, &pop, reference);
        info!(generation, front = entry.front_size, hv = entry.hypervolume, "generation");
        on_generation(&entry);
        log.push(entry);
    }

    let objs: Vec<Objectives> = pop.iter().map(|i| i.objectives).collect();
    let front = nondominated_sort(&objs)
        .into_iter()
        .next()
        .unwrap_or_default()
        .into_iter()
        .map(|i| pop[i].clone())
        .collect();
    Ok(EvolutionResult {
        config: cfg.clone(),
        reference,
        population: pop,
        front,
        initial: initial_log,
        log,
    })
}

/// The `k` most crowding-distant front members, ordered by mean stringency
/// descending (index 0 is the most stringent); ties broken by genome hash.
pub fn select_representatives(front: &[Individual], k: usize) -> Vec<Individual> {
    let objs: Vec<Objectives> = front.iter().map(|i| i.objectives).collect();
    let crowd = crowding_distance(&objs);
    let mut idx: Vec<usize> = (0..front.len()).collect();
    idx.sort_by(|&a, &b| crowd[b].total_cmp(&crowd[a]).then_with(|| front[a].id.cmp(&front[b].id)));
    idx.truncate(k);
    idx.sort_by(|&a, &b| {
        front[b]
            .mean_stringency()
            .total_cmp(&front[a].mean_stringency())
            .then_with(|| front[a].id.cmp(&front[b].id))
    });
    idx.into_iter().map(|i| front[i].clone()).collect()
}

/// Contexts at `start` (or each country's last date) for the given countries.
pub fn evaluation_contexts(
    series: &BTreeMap<String, CountrySeries>,
    countries: &[String],
    start: Option<NaiveDate>,
    clip_max: f64,
) -> Result<Vec<ForecastContext>> {
    countries
        .iter()
        .map(|id| {
            let s = series.get(id).ok_or_else(|| Error::NotFound {
                kind: "country",
                id: id.clone(),
            })?;
            match start {
                Some(d) => ForecastContext::at_date(s, d, clip_max),
                None => ForecastContext::from_series(s, s.len() - 1, clip_max),
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Representative {
    pub index: usize,
    pub id: String,
    pub mean_cases: f64,
    pub mean_stringency: f64,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes `config.json`, `generations.csv`, `front/<id>.json` and
/// `representatives.json` under `dir`.
pub fn write_run_dir(dir: &Path, result: &EvolutionResult, representatives: &[Individual]) -> Result<()> {
    let front_dir = dir.join("front");
    std::fs::create_dir_all(&front_dir).map_err(|e| Error::io(&front_dir, e))?;
    write_json(&dir.join("config.json"), &result.config)?;
    let csv_path = dir.join("generations.csv");
    let mut f = std::fs::File::create(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
    let mut body = String::from("generation,front_size,hypervolume,min_cases,min_stringency,failures\n");
    for g in &result.log {
        body.push_str(&format!(
            "{},{},{},{},{},{}\n",
            g.generation, g.front_size, g.hypervolume, g.min_cases, g.min_stringency, g.failures
        ));
    }
    f.write_all(body.as_bytes()).map_err(|e| Error::io(&csv_path, e))?;
    for ind in &result.front {
        write_json(&front_dir.join(format!("{}.json", ind.id)), ind)?;
    }
    let reps: Vec<Representative> = representatives
        .iter()
        .enumerate()
        .map(|(index, i)| Representative {
            index,
            id: i.id.clone(),
            mean_cases: i.mean_cases(),
            mean_stringency: i.mean_stringency(),
        })
        .collect();
    write_json(&dir.join("representatives.json"), &reps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::npi::NpiVector;

    fn ctx() -> ForecastContext {
        ForecastContext {
            country: "A".into(),
            start_date: NaiveDate::from_ymd_opt(2020, 5, 1).unwrap(),
            actions: vec![NpiVector::ZERO; 21],
            ratios: vec![1.0; 21],
            recent_cases: vec![100.0; 14],
            cumulative: 1e4,
            population: 1e8,
        }
    }

    fn stub(a: &[NpiVector], _: &[f64]) -> f64 {
        1.2 - 0.02 * f64::from(a[20].stringency())
    }

    #[test]
    fn forced_genomes_hit_stringency_extremes() {
        let mut net = PrescriptorNet::zeros();
        net.set_output_bias(-60.0);
        let (o, failed) = evaluate(&net, &stub, &[ctx()], 30);
        assert!(!failed);
        assert_eq!(o[1], 0.0);
        net.set_output_bias(60.0);
        assert_eq!(evaluate(&net, &stub, &[ctx()], 30).0[1], 23.0);
    }

    #[test]
    fn max_stringency_minimizes_cases_under_monotone_stub() {
        let mut lo = PrescriptorNet::zeros();
        lo.set_output_bias(-60.0);
        let half = PrescriptorNet::zeros();
        let mut hi = PrescriptorNet::zeros();
        hi.set_output_bias(60.0);
        let c: Vec<f64> = [lo, half, hi].iter().map(|n| evaluate(n, &stub, &[ctx(), ctx()], 40).0[0]).collect();
        assert!(c[2] < c[1] && c[1] < c[0], "{c:?}");
    }

    #[test]
    fn failures_get_worst_objectives() {
        let mut bad = ctx();
        bad.ratios.pop();
        let (o, failed) = evaluate(&PrescriptorNet::zeros(), &stub, &[bad], 10);
        assert!(failed);
        assert_eq!(o, WORST_OBJECTIVES);
    }

    #[test]
    fn breeding_preserves_length_and_parent_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = PrescriptorNet::orthogonal(&mut rng);
        let b = PrescriptorNet::orthogonal(&mut rng);
        let no_mut = EvolutionConfig {
            mutation_prob: 0.0,
            ..Default::default()
        };
        let child = breed(&a, &b, &no_mut, &mut rng);
        assert_eq!(child.weights.len(), GENOME_LEN);
        assert!(child
            .weights
            .iter()
            .zip(a.weights.iter().zip(&b.weights))
            .all(|(c, (x, y))| c == x || c == y));
    }

    #[test]
    fn config_validation() {
        assert!(EvolutionConfig::default().validate().is_ok());
        let cfg = EvolutionConfig::default();
        assert_eq!((cfg.elite_count(), cfg.pool_size()), (15, 50));
        for bad in [
            EvolutionConfig { elite_frac: 0.3, ..Default::default() },
            EvolutionConfig { parent_pool_frac: 1.5, ..Default::default() },
            EvolutionConfig { elite_frac: 0.0, ..Default::default() },
            EvolutionConfig { horizon: 0, ..Default::default() },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    #[test]
    fn survivors_cover_previous_front() {
        let pts = [[1.0, 5.0], [5.0, 1.0], [3.0, 3.0], [0.5, 4.0], [9.0, 9.0], [8.0, 8.0]];
        let keep = select_survivors(&pts, &[0, 1, 2], 3);
        for p in [0, 1, 2] {
            assert!(keep.iter().any(|&k| weakly_dominates(&pts[k], &pts[p])));
        }
        assert_eq!(keep.len(), 3);
    }
}
