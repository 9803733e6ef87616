use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::Serialize;
use serde_json::json;

use esp_core::data::synth::{write_snapshot, SynthConfig, COUNTRIES};
use esp_core::data::{
    build_dataset, load_csv, load_population, top_countries_by_cases, CountrySeries, CsvSchema, DatasetConfig, DatasetFile,
};
use esp_core::evolution::{
    evaluation_contexts, evolve, select_representatives, write_run_dir, EvolutionConfig, GenerationLog,
};
use esp_core::metrics::{aggregate, comparison_trial, format_table, write_trials_csv, ComparisonConfig};
use esp_core::predictor::{mean_absolute_error, train, PredictorModel, TrainConfig, HIDDEN_UNITS};
use esp_core::rio::{fit_rio, per_country_mae, rio_samples, score, select_rio_countries, GpSnapshot, OptimizerConfig, RioConfig};
use esp_core::service::{ForecastQuery, Published, ServiceConfig, ServiceState, PRESCRIPTOR_COUNT};
use esp_core::store::{fingerprint, ArtifactKind, FrontArtifact, Manifest, Registry, MANIFEST_SCHEMA_VERSION};
use esp_core::NpiVector;

use crate::{Cli, Command, Summary};

pub fn dispatch(cli: Cli) -> Result<Summary> {
    let registry = || Registry::open(&cli.registry).with_context(|| format!("opening registry {}", cli.registry.display()));
    match &cli.command {
        Command::SynthSnapshot(a) => synth_snapshot(a),
        Command::Ingest(a) => ingest(&registry()?, a),
        Command::TrainPredictor(a) => train_predictor(&registry()?, a),
        Command::EvalPredictor(a) => eval_predictor(&registry()?, a),
        Command::FitRio(a) => fit_rio_cmd(&registry()?, a),
        Command::Evolve(a) => evolve_cmd(&registry()?, a),
        Command::Forecast(a) => forecast(&registry()?, a),
        Command::Publish(a) => publish(&registry()?, a),
        Command::Serve(a) => crate::server::serve_command(&cli.registry, a),
    }
}

fn short(fp: &str) -> &str {
    &fp[..fp.len().min(12)]
}

fn load_series(reg: &Registry, explicit: Option<&str>) -> Result<(String, BTreeMap<String, CountrySeries>)> {
    let fp = reg.resolve(ArtifactKind::Dataset, explicit)?;
    let file: DatasetFile = reg.get(ArtifactKind::Dataset, &fp)?;
    Ok((fp, file.to_series()?))
}

fn load_predictor(reg: &Registry, explicit: Option<&str>) -> Result<(String, PredictorModel)> {
    let fp = reg.resolve(ArtifactKind::Predictor, explicit)?;
    Ok((fp.clone(), reg.get(ArtifactKind::Predictor, &fp)?))
}

fn synth_snapshot(a: &crate::SynthArgs) -> Result<Summary> {
    std::fs::create_dir_all(&a.out_dir).with_context(|| format!("creating {}", a.out_dir.display()))?;
    let csv_path = a.out_dir.join("snapshot.csv");
    let pop_path = a.out_dir.join("population.csv");
    let cfg = SynthConfig {
        seed: a.seed,
        days: a.days,
        ..Default::default()
    };
    let csv = BufWriter::new(File::create(&csv_path).with_context(|| format!("creating {}", csv_path.display()))?);
    let pop = BufWriter::new(File::create(&pop_path).with_context(|| format!("creating {}", pop_path.display()))?);
    write_snapshot(&cfg, csv, pop)?;
    Ok(Summary {
        command: "synth-snapshot",
        message: format!(
            "wrote {} and {} ({} countries, {} days, seed {})",
            csv_path.display(),
            pop_path.display(),
            COUNTRIES.len(),
            a.days,
            a.seed
        ),
        fields: json!({ "csv": csv_path, "population": pop_path, "countries": COUNTRIES.len(), "days": a.days, "seed": a.seed }),
    })
}

#[derive(Serialize)]
struct IngestRecord<'a> {
    csv: &'a Path,
    population: &'a Path,
    schema: CsvSchema,
    countries: usize,
    dropped: &'a [(String, usize)],
    missing_population: &'a [String],
    flagged_days: usize,
}

fn ingest(reg: &Registry, a: &crate::IngestArgs) -> Result<Summary> {
    let pop = load_population(&a.population)?;
    let schema = CsvSchema::default();
    let report = load_csv(&a.csv, &schema, &pop)?;
    if report.series.is_empty() {
        bail!("no usable country in {}", a.csv.display());
    }
    let source = a.csv.file_name().map_or_else(|| a.csv.display().to_string(), |n| n.to_string_lossy().into_owned());
    let file = DatasetFile::from_series(source, &report.series);
    let fp = reg.put(ArtifactKind::Dataset, &file)?;
    reg.set_ref(ArtifactKind::Dataset.as_str(), &fp)?;
    reg.record_run(
        "ingest",
        &fp,
        &IngestRecord {
            csv: &a.csv,
            population: &a.population,
            schema,
            countries: report.series.len(),
            dropped: &report.dropped,
            missing_population: &report.missing_population,
            flagged_days: report.flagged_days(),
        },
    )?;
    Ok(Summary {
        command: "ingest",
        message: format!(
            "dataset {}: {} countries ({} dropped as unusable, {} without population, {} flagged days)",
            short(&fp),
            report.series.len(),
            report.dropped.len(),
            report.missing_population.len(),
            report.flagged_days()
        ),
        fields: json!({
            "dataset": fp,
            "countries": report.series.len(),
            "dropped": report.dropped.len(),
            "missing_population": report.missing_population,
            "flagged_days": report.flagged_days(),
        }),
    })
}

#[derive(Serialize)]
struct TrainRecord<'a> {
    dataset: &'a str,
    dataset_config: DatasetConfig,
    train_config: TrainConfig,
    report: &'a esp_core::predictor::TrainReport,
    test_mae: f64,
}

fn train_predictor(reg: &Registry, a: &crate::TrainArgs) -> Result<Summary> {
    let (dataset_fp, series) = load_series(reg, a.dataset.as_deref())?;
    let dataset_config = DatasetConfig {
        seed: a.seed,
        ..Default::default()
    };
    let split = build_dataset(&series, &dataset_config)?;
    let train_config = TrainConfig {
        batch_size: a.batch_size,
        patience: a.patience,
        max_epochs: a.max_epochs,
        seed: a.seed,
        ..Default::default()
    };
    let (mut model, report) = train(PredictorModel::new(HIDDEN_UNITS, a.seed), &split, &train_config)?;
    model.meta.dataset_fingerprint = Some(dataset_fp.clone());
    let test_mae = mean_absolute_error(&model, &split.test)?;
    let fp = reg.put(ArtifactKind::Predictor, &model)?;
    reg.set_ref(ArtifactKind::Predictor.as_str(), &fp)?;
    reg.record_run(
        "train-predictor",
        &fp,
        &TrainRecord {
            dataset: &dataset_fp,
            dataset_config,
            train_config,
            report: &report,
            test_mae,
        },
    )?;
    Ok(Summary {
        command: "train-predictor",
        message: format!(
            "predictor {}: best validation MAE {:.4} at epoch {} of {}, test MAE {:.4}",
            short(&fp),
            report.best_val_mae,
            report.best_epoch,
            report.history.len(),
            test_mae
        ),
        fields: json!({
            "predictor": fp,
            "dataset": dataset_fp,
            "best_val_mae": report.best_val_mae,
            "best_epoch": report.best_epoch,
            "epochs_run": report.history.len(),
            "test_mae": test_mae,
            "train_samples": split.train.len(),
        }),
    })
}

fn eval_predictor(reg: &Registry, a: &crate::EvalArgs) -> Result<Summary> {
    if a.trials == 0 {
        bail!("--trials must be at least 1");
    }
    let (dataset_fp, series) = load_series(reg, a.dataset.as_deref())?;
    let cfg = ComparisonConfig {
        train: TrainConfig {
            max_epochs: a.max_epochs,
            ..Default::default()
        },
        ..Default::default()
    };
    let mut trials = Vec::with_capacity(a.trials);
    for t in 0..a.trials {
        let seed = a.seed.wrapping_add(t as u64);
        tracing::info!(trial = t, seed, "comparison trial");
        trials.push(comparison_trial(&series, &cfg, seed)?);
    }
    let rows = aggregate(&trials);
    if let Some(path) = &a.trials_csv {
        let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
        write_trials_csv(BufWriter::new(f), &trials)?;
    }
    let record = json!({
        "dataset": dataset_fp,
        "trials": a.trials,
        "seed": a.seed,
        "config": cfg,
        "per_trial": trials,
        "aggregate": rows,
    });
    let fp = fingerprint(&record)?;
    reg.record_run("eval-predictor", &fp, &record)?;
    Ok(Summary {
        command: "eval-predictor",
        message: format!("{} trials on dataset {}\n{}", a.trials, short(&dataset_fp), format_table(&rows).trim_end()),
        fields: json!({ "dataset": dataset_fp, "trials": a.trials, "report": fp, "aggregate": rows }),
    })
}

fn fit_rio_cmd(reg: &Registry, a: &crate::RioArgs) -> Result<Summary> {
    let (dataset_fp, series) = load_series(reg, a.dataset.as_deref())?;
    let (predictor_fp, model) = load_predictor(reg, a.predictor.as_deref())?;
    let clip = DatasetConfig::default().clip_max;
    let cfg = RioConfig {
        max_train: a.max_train,
        optimizer: OptimizerConfig {
            restarts: a.restarts,
            max_iter: a.max_iter,
            seed: a.seed,
            ..Default::default()
        },
        seed: a.seed,
        ..Default::default()
    };
    let mae = per_country_mae(&model, &series, clip)?;
    let ranked = top_countries_by_cases(&series, series.len());
    let selection = select_rio_countries(&mae, &ranked, a.mae_threshold, a.top_countries);
    let (train_rows, heldout) = rio_samples(&model, &series, &selection.countries, &cfg, clip)?;
    let fit = fit_rio(&train_rows, heldout, &cfg)?;
    let held = score(&fit.gp, &fit.gp, &fit.heldout)?;
    let snapshot = GpSnapshot::new(&fit, selection.countries.clone(), Some(dataset_fp.clone()));
    let fp = reg.put(ArtifactKind::Gp, &snapshot)?;
    reg.set_ref(ArtifactKind::Gp.as_str(), &fp)?;
    reg.record_run(
        "fit-rio",
        &fp,
        &json!({
            "dataset": dataset_fp,
            "predictor": predictor_fp,
            "config": cfg,
            "mae_threshold": a.mae_threshold,
            "top_countries": a.top_countries,
            "selection": selection,
            "optimizer": fit.report,
            "heldout": held,
        }),
    )?;
    Ok(Summary {
        command: "fit-rio",
        message: format!(
            "gp {}: {} countries{}, {} training points, held-out MAE {:.4} -> {:.4}, 95% coverage {:.3}",
            short(&fp),
            selection.countries.len(),
            if selection.fell_back { " (threshold fallback)" } else { "" },
            fit.gp.data.len(),
            held.original_mae,
            held.calibrated_mae,
            held.coverage_95
        ),
        fields: json!({
            "gp": fp,
            "countries": selection.countries,
            "fell_back": selection.fell_back,
            "points": fit.gp.data.len(),
            "heldout": held,
            "hyperparameters": fit.gp.hyper,
        }),
    })
}

/// Closed-form ratio model for smoke runs: stringency damps a baseline
/// growth that tracks the last week of ratios.
pub fn stand_in_ratio(actions: &[NpiVector], ratios: &[f64]) -> f64 {
    let stringency = actions.last().map_or(0.0, |a| f64::from(a.stringency())) / f64::from(esp_core::MAX_STRINGENCY);
    let tail = &ratios[ratios.len().saturating_sub(7)..];
    let recent = tail.iter().sum::<f64>() / tail.len().max(1) as f64;
    (1.0 - 0.8 * stringency) * (0.5 + 0.7 * recent)
}

fn load_evolution_config(path: &Path) -> Result<EvolutionConfig> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let is_toml = path.extension().is_some_and(|e| e == "toml");
    Ok(if is_toml {
        toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
    } else {
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
    })
}

fn evolve_cmd(reg: &Registry, a: &crate::EvolveArgs) -> Result<Summary> {
    let mut cfg = match &a.config {
        Some(p) => load_evolution_config(p)?,
        None => EvolutionConfig::default(),
    };
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.pop {
        cfg.population = v;
    }
    if let Some(v) = a.generations {
        cfg.generations = v;
    }
    if let Some(v) = a.horizon {
        cfg.horizon = v;
    }
    if let Some(v) = a.countries {
        cfg.countries = v;
    }
    cfg.validate()?;
    let (dataset_fp, series) = load_series(reg, a.dataset.as_deref())?;
    let countries = top_countries_by_cases(&series, cfg.countries);
    if countries.len() < cfg.countries {
        bail!("dataset has {} countries, {} requested", countries.len(), cfg.countries);
    }
    let contexts = evaluation_contexts(&series, &countries, a.start_date, DatasetConfig::default().clip_max)?;
    let progress = |g: &GenerationLog| {
        tracing::info!(generation = g.generation, front = g.front_size, hypervolume = g.hypervolume, "evolution progress");
    };
    let (result, predictor_fp) = if a.stand_in {
        (evolve(&cfg, &stand_in_ratio, &contexts, progress)?, None)
    } else {
        let (fp, model) = load_predictor(reg, a.predictor.as_deref())?;
        (evolve(&cfg, &model, &contexts, progress)?, Some(fp))
    };
    let evolution_fp = reg.put(ArtifactKind::Evolution, &result)?;
    reg.set_ref(ArtifactKind::Evolution.as_str(), &evolution_fp)?;
    let representatives = select_representatives(&result.front, PRESCRIPTOR_COUNT);
    let run_dir = reg.runs_dir("evolve").join(&evolution_fp);
    write_run_dir(&run_dir, &result, &representatives)?;
    let front = FrontArtifact {
        evolution: evolution_fp.clone(),
        predictor: predictor_fp.clone(),
        reference: result.reference,
        representatives,
    };
    let front_fp = reg.put(ArtifactKind::Front, &front)?;
    reg.set_ref(ArtifactKind::Front.as_str(), &front_fp)?;
    reg.record_run(
        "evolve",
        &evolution_fp,
        &json!({
            "dataset": dataset_fp,
            "predictor": predictor_fp,
            "stand_in": a.stand_in,
            "config": cfg,
            "countries": countries,
            "start_date": a.start_date,
            "front": front_fp,
        }),
    )?;
    let last = result.log.last().unwrap_or(&result.initial);
    Ok(Summary {
        command: "evolve",
        message: format!(
            "evolution {}: {} generations, front of {}, hypervolume {:.4e}, {} representatives (front {}), run dir {}",
            short(&evolution_fp),
            result.log.len(),
            result.front.len(),
            last.hypervolume,
            front.representatives.len(),
            short(&front_fp),
            run_dir.display()
        ),
        fields: json!({
            "evolution": evolution_fp,
            "front": front_fp,
            "front_size": result.front.len(),
            "representatives": front.representatives.len(),
            "generations": result.log.len(),
            "hypervolume": last.hypervolume,
            "run_dir": run_dir,
        }),
    })
}

fn latest_manifest(reg: &Registry) -> Result<Manifest> {
    Ok(Manifest {
        schema_version: MANIFEST_SCHEMA_VERSION,
        dataset: reg.resolve(ArtifactKind::Dataset, None)?,
        predictor: reg.resolve(ArtifactKind::Predictor, None)?,
        gp: match reg.get_ref(ArtifactKind::Gp.as_str())? {
            Some(_) => Some(reg.resolve(ArtifactKind::Gp, None)?),
            None => None,
        },
        front: reg.resolve(ArtifactKind::Front, None)?,
    })
}

fn forecast(reg: &Registry, a: &crate::ForecastArgs) -> Result<Summary> {
    let published = if a.published {
        Published::load(reg)?
    } else {
        let manifest = latest_manifest(reg)?;
        let fp = fingerprint(&manifest)?;
        Published::from_manifest(reg, fp, manifest)?
    };
    let state = ServiceState::new(
        published,
        ServiceConfig {
            mc_rollouts: a.rollouts,
            cache_size: 0,
            ..Default::default()
        },
    )?;
    let response = state
        .forecast(&ForecastQuery {
            country: a.country.clone(),
            prescriptor: a.prescriptor,
            horizon: Some(a.horizon),
            start_date: a.start_date,
            seed: Some(a.seed),
        })
        .map_err(|e| match e.code.as_str() {
            "unknown_country" => anyhow::Error::new(esp_core::Error::NotFound {
                kind: "country",
                id: a.country.clone(),
            }),
            _ => anyhow::Error::new(e),
        })?;
    if let Some(path) = &a.out {
        let f = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
        if path.extension().is_some_and(|e| e == "json") {
            serde_json::to_writer_pretty(f, &response)?;
        } else {
            response.forecast.write_csv(f)?;
        }
    }
    let total = response.forecast.total_cases();
    let band_total = response
        .bands
        .as_ref()
        .map(|b| (b.iter().map(|d| d.q25).sum::<f64>(), b.iter().map(|d| d.q75).sum::<f64>()));
    let mean_stringency = response.forecast.days.iter().map(|d| f64::from(d.npis.stringency())).sum::<f64>()
        / response.forecast.days.len().max(1) as f64;
    Ok(Summary {
        command: "forecast",
        message: format!(
            "{} from {} over {} days under prescriptor {}: {:.0} new cases{}, mean stringency {:.2}",
            response.country,
            response.start_date,
            response.horizon,
            a.prescriptor,
            total,
            band_total.map_or(String::new(), |(lo, hi)| format!(" (daily quartile sums {lo:.0}..{hi:.0})")),
            mean_stringency
        ),
        fields: json!({
            "country": response.country,
            "start_date": response.start_date,
            "horizon": response.horizon,
            "prescriptor": a.prescriptor,
            "seed": a.seed,
            "total_new_cases": total,
            "mean_stringency": mean_stringency,
            "calibrated": response.bands.is_some(),
            "artifacts": response.artifacts,
            "out": a.out,
        }),
    })
}

fn publish(reg: &Registry, a: &crate::PublishArgs) -> Result<Summary> {
    let dataset = reg.resolve(ArtifactKind::Dataset, a.dataset.as_deref())?;
    let predictor = reg.resolve(ArtifactKind::Predictor, a.predictor.as_deref())?;
    let gp = if a.no_gp {
        None
    } else if a.gp.is_some() || reg.get_ref(ArtifactKind::Gp.as_str())?.is_some() {
        Some(reg.resolve(ArtifactKind::Gp, a.gp.as_deref())?)
    } else {
        None
    };
    let front_fp = reg.resolve(ArtifactKind::Front, a.front.as_deref())?;
    let front: FrontArtifact = reg.get(ArtifactKind::Front, &front_fp)?;
    if front.representatives.len() != PRESCRIPTOR_COUNT {
        bail!(
            "front {} has {} representatives; publishing needs {PRESCRIPTOR_COUNT} (evolve a larger population or longer)",
            short(&front_fp),
            front.representatives.len()
        );
    }
    match &front.predictor {
        Some(p) if *p != predictor => bail!(
            "front {} was evolved against predictor {}, not {}",
            short(&front_fp),
            short(p),
            short(&predictor)
        ),
        None => tracing::warn!("front was evolved against the stand-in model"),
        _ => {}
    }
    let manifest = Manifest {
        schema_version: MANIFEST_SCHEMA_VERSION,
        dataset,
        predictor,
        gp,
        front: front_fp,
    };
    // Fail now rather than at serve time if anything does not load.
    let fp = fingerprint(&manifest)?;
    ServiceState::new(Published::from_manifest(reg, fp, manifest.clone())?, ServiceConfig::default())?;
    let fp = reg.publish(&manifest)?;
    Ok(Summary {
        command: "publish",
        message: format!(
            "published manifest {} (dataset {}, predictor {}, gp {}, front {})",
            short(&fp),
            short(&manifest.dataset),
            short(&manifest.predictor),
            manifest.gp.as_deref().map_or("none", short),
            short(&manifest.front)
        ),
        fields: json!({ "manifest": fp, "artifacts": manifest }),
    })
}
