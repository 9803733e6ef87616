//! Request handling behind the HTTP API, independent of any web framework.
//!
//! A [`ServiceState`] is built once from a published manifest and then only
//! read; the band cache is the one piece of shared mutable state.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::sync::{Arc, Mutex};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{CountrySeries, DatasetConfig, DatasetFile};
use crate::error::{Error, Result};
use crate::forecast::{rollout, Actions, ForecastContext, ForecastResult};
use crate::npi::{NpiVector, NPI_COUNT, NPI_MAX_LEVELS};
use crate::predictor::PredictorModel;
use crate::rio::{mc_forecast, BandDay, GpModel, GpSnapshot, McConfig};
use crate::store::{ArtifactKind, FrontArtifact, Manifest, Registry};

pub const SERVICE_MAX_HORIZON: usize = 180;
pub const PRESCRIPTOR_COUNT: usize = 20;
const RECENT_DAYS: usize = 14;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServiceConfig {
    pub mc_rollouts: usize,
    pub cache_size: usize,
    pub default_seed: u64,
    pub default_horizon: usize,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            mc_rollouts: 100,
            cache_size: 256,
            default_seed: 0,
            default_horizon: SERVICE_MAX_HORIZON,
        }
    }
}

/// Artifacts named by a published manifest, loaded into memory.
#[derive(Debug, Clone)]
pub struct Published {
    pub manifest_fingerprint: String,
    pub manifest: Manifest,
    pub series: BTreeMap<String, CountrySeries>,
    pub predictor: PredictorModel,
    pub gp: Option<GpModel>,
    pub front: FrontArtifact,
}

impl Published {
    /// Loads the tuple the registry's `published` ref points at.
    pub fn load(registry: &Registry) -> Result<Self> {
        let (fp, manifest) = registry.published()?;
        Self::from_manifest(registry, fp, manifest)
    }

    /// Loads the artifacts a (possibly unpublished) manifest names.
    pub fn from_manifest(registry: &Registry, manifest_fingerprint: String, manifest: Manifest) -> Result<Self> {
        let dataset: DatasetFile = registry.get(ArtifactKind::Dataset, &manifest.dataset)?;
        let predictor: PredictorModel = registry.get(ArtifactKind::Predictor, &manifest.predictor)?;
        let gp = match &manifest.gp {
            Some(fp) => Some(registry.get::<GpSnapshot>(ArtifactKind::Gp, fp)?.restore()?),
            None => None,
        };
        let front: FrontArtifact = registry.get(ArtifactKind::Front, &manifest.front)?;
        Ok(Self {
            manifest_fingerprint,
            series: dataset.to_series()?,
            manifest,
            predictor,
            gp,
            front,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServiceError {
    #[serde(skip)]
    pub status: u16,
    pub code: String,
    pub message: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub offending_days: Vec<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub violations: Vec<EditViolation>,
}

impl ServiceError {
    fn new(status: u16, code: &str, message: impl Into<String>) -> Self {
        Self {
            status,
            code: code.into(),
            message: message.into(),
            offending_days: Vec::new(),
            violations: Vec::new(),
        }
    }

    pub fn bad_request(message: impl Into<String>) -> Self {
        Self::new(400, "bad_request", message)
    }

    fn internal(e: Error) -> Self {
        Self::new(500, "internal", e.to_string())
    }
}

impl std::fmt::Display for ServiceError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} {}: {}", self.status, self.code, self.message)
    }
}

impl std::error::Error for ServiceError {}

pub type ServiceResult<T> = std::result::Result<T, ServiceError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountrySummary {
    pub id: String,
    pub name: String,
    pub population: u64,
    pub first_date: NaiveDate,
    pub last_date: NaiveDate,
    pub days: usize,
    pub total_cases: u64,
    pub recent_new_cases: Vec<u64>,
    pub current_npis: NpiVector,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrescriptorEntry {
    pub index: usize,
    pub id: String,
    pub mean_cases: f64,
    pub mean_stringency: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastQuery {
    pub country: String,
    pub prescriptor: usize,
    pub horizon: Option<usize>,
    pub start_date: Option<NaiveDate>,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScratchpadBase {
    Prescriptor(usize),
    /// One row of eight levels per forecast day. Levels are checked by the
    /// service, so out-of-range values are accepted here.
    Schedule(Vec<Vec<i64>>),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NpiEdit {
    /// Offset from the forecast start date.
    pub day: usize,
    pub npi: usize,
    pub level: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScratchpadRequest {
    pub country_id: String,
    pub start_date: Option<NaiveDate>,
    pub base: ScratchpadBase,
    #[serde(default)]
    pub edits: Vec<NpiEdit>,
    pub horizon: Option<usize>,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditViolation {
    pub day: usize,
    pub npi: usize,
    pub level: i64,
    pub max_level: Option<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactCitation {
    pub manifest: String,
    pub dataset: String,
    pub predictor: String,
    pub gp: Option<String>,
    pub front: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastResponse {
    pub country: String,
    pub start_date: NaiveDate,
    pub horizon: usize,
    pub prescriptor: Option<usize>,
    pub seed: u64,
    pub artifacts: ArtifactCitation,
    pub forecast: ForecastResult,
    /// Present only when a calibration model is published.
    pub bands: Option<Vec<BandDay>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub manifest: String,
    pub countries: usize,
    pub prescriptors: usize,
    pub calibrated: bool,
}

type BandKey = (String, NaiveDate, usize, u64, String);

#[derive(Debug, Default)]
struct BandCache {
    capacity: usize,
    map: HashMap<BandKey, Arc<Vec<BandDay>>>,
    order: VecDeque<BandKey>,
    hits: u64,
    misses: u64,
}

impl BandCache {
    fn get(&mut self, key: &BandKey) -> Option<Arc<Vec<BandDay>>> {
        let hit = self.map.get(key).cloned();
        if hit.is_some() {
            self.hits += 1;
        } else {
            self.misses += 1;
        }
        hit
    }

    fn insert(&mut self, key: BandKey, value: Arc<Vec<BandDay>>) {
        if self.capacity == 0 || self.map.contains_key(&key) {
            return;
        }
        while self.map.len() >= self.capacity {
            match self.order.pop_front() {
                Some(old) => {
                    self.map.remove(&old);
                }
                None => break,
            }
        }
        self.order.push_back(key.clone());
        self.map.insert(key, value);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheStats {
    pub entries: usize,
    pub hits: u64,
    pub misses: u64,
}

pub struct ServiceState {
    published: Published,
    config: ServiceConfig,
    clip_max: f64,
    cache: Mutex<BandCache>,
}

fn schedule_key(schedule: &[NpiVector]) -> String {
    let mut h = Sha256::new();
    for v in schedule {
        h.update(v.levels());
    }
    hex::encode(&h.finalize()[..16])
}

impl ServiceState {
    pub fn new(published: Published, config: ServiceConfig) -> Result<Self> {
        if config.mc_rollouts < crate::rio::mc::MIN_ROLLOUTS {
            return Err(Error::Config(format!(
                "mc_rollouts must be at least {}",
                crate::rio::mc::MIN_ROLLOUTS
            )));
        }
        if config.default_horizon == 0 || config.default_horizon > SERVICE_MAX_HORIZON {
            return Err(Error::Config(format!("default_horizon must be in 1..={SERVICE_MAX_HORIZON}")));
        }
        if published.front.representatives.len() != PRESCRIPTOR_COUNT {
            return Err(Error::Config(format!(
                "a servable front has exactly {PRESCRIPTOR_COUNT} prescriptors, this one has {}",
                published.front.representatives.len()
            )));
        }
        let cache = Mutex::new(BandCache {
            capacity: config.cache_size,
            ..Default::default()
        });
        Ok(Self {
            published,
            config,
            clip_max: DatasetConfig::default().clip_max,
            cache,
        })
    }

    pub fn published(&self) -> &Published {
        &self.published
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.config
    }

    pub fn cache_stats(&self) -> CacheStats {
        let c = self.cache.lock().expect("band cache poisoned");
        CacheStats {
            entries: c.map.len(),
            hits: c.hits,
            misses: c.misses,
        }
    }

    pub fn health(&self) -> Health {
        Health {
            status: "ok".into(),
            manifest: self.published.manifest_fingerprint.clone(),
            countries: self.published.series.len(),
            prescriptors: self.published.front.representatives.len(),
            calibrated: self.published.gp.is_some(),
        }
    }

    pub fn countries(&self) -> Vec<CountrySummary> {
        self.published
            .series
            .values()
            .filter(|s| !s.is_empty())
            .map(|s| CountrySummary {
                id: s.id.clone(),
                name: s.name.clone(),
                population: s.population,
                first_date: s.dates[0],
                last_date: s.dates[s.len() - 1],
                days: s.len(),
                total_cases: s.total_cases(),
                recent_new_cases: s.new_cases[s.len().saturating_sub(RECENT_DAYS)..].to_vec(),
                current_npis: s.npis[s.len() - 1],
            })
            .collect()
    }

    pub fn prescriptors(&self) -> Vec<PrescriptorEntry> {
        self.published
            .front
            .representatives
            .iter()
            .enumerate()
            .map(|(index, ind)| PrescriptorEntry {
                index,
                id: ind.id.clone(),
                mean_cases: ind.mean_cases(),
                mean_stringency: ind.mean_stringency(),
            })
            .collect()
    }

    fn citation(&self) -> ArtifactCitation {
        let m = &self.published.manifest;
        ArtifactCitation {
            manifest: self.published.manifest_fingerprint.clone(),
            dataset: m.dataset.clone(),
            predictor: m.predictor.clone(),
            gp: m.gp.clone(),
            front: m.front.clone(),
        }
    }

    fn horizon(&self, requested: Option<usize>) -> ServiceResult<usize> {
        let h = requested.unwrap_or(self.config.default_horizon);
        if h == 0 || h > SERVICE_MAX_HORIZON {
            return Err(ServiceError::bad_request(format!("horizon must be in 1..={SERVICE_MAX_HORIZON}, got {h}")));
        }
        Ok(h)
    }

    fn context(&self, country: &str, start: Option<NaiveDate>) -> ServiceResult<ForecastContext> {
        let series = self.published.series.get(country).ok_or_else(|| {
            ServiceError::new(404, "unknown_country", format!("no country with id `{country}`"))
        })?;
        let ctx = match start {
            Some(d) => ForecastContext::at_date(series, d, self.clip_max),
            None => ForecastContext::from_series(series, series.len().saturating_sub(1), self.clip_max),
        };
        ctx.map_err(|e| ServiceError::new(400, "invalid_start_date", e.to_string()))
    }

    fn prescriptor_schedule(&self, ctx: &ForecastContext, index: usize, horizon: usize) -> ServiceResult<Vec<NpiVector>> {
        let reps = &self.published.front.representatives;
        let ind = reps.get(index).ok_or_else(|| {
            ServiceError::new(
                404,
                "unknown_prescriptor",
                format!("prescriptor index {index} out of range 0..{}", reps.len()),
            )
        })?;
        let closed_loop = rollout(&self.published.predictor, ctx, horizon, Actions::Policy(&ind.net)).map_err(ServiceError::internal)?;
        Ok(closed_loop.schedule())
    }

    fn respond(&self, ctx: &ForecastContext, schedule: &[NpiVector], prescriptor: Option<usize>, seed: u64) -> ServiceResult<ForecastResponse> {
        let horizon = schedule.len();
        let forecast = rollout(&self.published.predictor, ctx, horizon, Actions::Schedule(schedule)).map_err(ServiceError::internal)?;
        let bands = match &self.published.gp {
            None => None,
            Some(gp) => {
                let key: BandKey = (ctx.country.clone(), ctx.start_date, horizon, seed, schedule_key(schedule));
                let cached = self.cache.lock().expect("band cache poisoned").get(&key);
                let days = match cached {
                    Some(days) => days,
                    None => {
                        let cfg = McConfig {
                            rollouts: self.config.mc_rollouts,
                            seed,
                        };
                        let bands = mc_forecast(&self.published.predictor, gp, ctx, horizon, Actions::Schedule(schedule), &cfg)
                            .map_err(ServiceError::internal)?;
                        let days = Arc::new(bands.days);
                        self.cache.lock().expect("band cache poisoned").insert(key, days.clone());
                        days
                    }
                };
                Some(days.as_ref().clone())
            }
        };
        Ok(ForecastResponse {
            country: ctx.country.clone(),
            start_date: ctx.start_date,
            horizon,
            prescriptor,
            seed,
            artifacts: self.citation(),
            forecast,
            bands,
        })
    }

    /// Forecast under the schedule prescriptor `query.prescriptor` produces
    /// in closed loop with the deterministic predictor.
    pub fn forecast(&self, query: &ForecastQuery) -> ServiceResult<ForecastResponse> {
        let horizon = self.horizon(query.horizon)?;
        let ctx = self.context(&query.country, query.start_date)?;
        let schedule = self.prescriptor_schedule(&ctx, query.prescriptor, horizon)?;
        self.respond(&ctx, &schedule, Some(query.prescriptor), query.seed.unwrap_or(self.config.default_seed))
    }

    pub fn scratchpad(&self, req: &ScratchpadRequest) -> ServiceResult<ForecastResponse> {
        let horizon = self.horizon(req.horizon)?;
        let mut violations = Vec::new();
        let mut raw: Vec<[i64; NPI_COUNT]> = Vec::new();
        let mut prescriptor = None;
        match &req.base {
            ScratchpadBase::Prescriptor(_) => {}
            ScratchpadBase::Schedule(rows) => {
                if rows.len() < horizon {
                    return Err(ServiceError::new(
                        422,
                        "invalid_schedule",
                        format!("schedule has {} days, horizon needs {horizon}", rows.len()),
                    ));
                }
                for (day, row) in rows.iter().take(horizon).enumerate() {
                    if row.len() != NPI_COUNT {
                        violations.push(EditViolation {
                            day,
                            npi: row.len(),
                            level: 0,
                            max_level: None,
                        });
                        raw.push([0; NPI_COUNT]);
                        continue;
                    }
                    raw.push(std::array::from_fn(|i| row[i]));
                }
            }
        }
        for e in &req.edits {
            let max_level = NPI_MAX_LEVELS.get(e.npi).copied();
            let in_range = matches!(max_level, Some(m) if (0..=i64::from(m)).contains(&e.level));
            if e.day >= horizon || !in_range {
                violations.push(EditViolation {
                    day: e.day,
                    npi: e.npi,
                    level: e.level,
                    max_level,
                });
            }
        }
        for (day, row) in raw.iter().enumerate() {
            for (npi, &level) in row.iter().enumerate() {
                if !(0..=i64::from(NPI_MAX_LEVELS[npi])).contains(&level) {
                    violations.push(EditViolation {
                        day,
                        npi,
                        level,
                        max_level: Some(NPI_MAX_LEVELS[npi]),
                    });
                }
            }
        }
        if !violations.is_empty() {
            let mut days: Vec<usize> = violations.iter().map(|v| v.day).collect();
            days.sort_unstable();
            days.dedup();
            let mut err = ServiceError::new(422, "invalid_edit", format!("{} NPI level(s) outside their bounds", violations.len()));
            err.offending_days = days;
            err.violations = violations;
            return Err(err);
        }

        let ctx = self.context(&req.country_id, req.start_date)?;
        let mut schedule = match &req.base {
            ScratchpadBase::Prescriptor(i) => {
                prescriptor = Some(*i);
                self.prescriptor_schedule(&ctx, *i, horizon)?
            }
            ScratchpadBase::Schedule(_) => raw.iter().map(|r| NpiVector::saturating(*r)).collect(),
        };
        for e in &req.edits {
            schedule[e.day]
                .set(e.npi, e.level as u8)
                .expect("edit levels validated above");
        }
        self.respond(&ctx, &schedule, prescriptor, req.seed.unwrap_or(self.config.default_seed))
    }
}
