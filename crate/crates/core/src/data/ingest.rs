//! CSV ingestion for response-tracker style country data.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use tracing::warn;

use super::series::{CountrySeries, FlagKind, QualityFlag, MIN_USABLE_DAYS};
use crate::error::{Error, Result};
use crate::npi::{NpiVector, NPI_COLUMNS, NPI_COUNT, NPI_MAX_LEVELS};

/// Column names to read from the input CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvSchema {
    pub country: String,
    pub country_code: Option<String>,
    /// Rows with a non-empty value in this column are sub-national and skipped.
    pub region: Option<String>,
    pub date: String,
    pub confirmed_cases: String,
    pub npis: [String; NPI_COUNT],
}

impl Default for CsvSchema {
    fn default() -> Self {
        Self {
            country: "CountryName".into(),
            country_code: Some("CountryCode".into()),
            region: Some("RegionName".into()),
            date: "Date".into(),
            confirmed_cases: "ConfirmedCases".into(),
            npis: NPI_COLUMNS.map(String::from),
        }
    }
}

/// Population per country name.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PopulationTable(pub BTreeMap<String, u64>);

impl PopulationTable {
    pub fn get(&self, name: &str) -> Option<u64> {
        self.0.get(name).copied()
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct IngestReport {
    pub series: BTreeMap<String, CountrySeries>,
    /// Countries removed by the usability filter, with their usable day count.
    pub dropped: Vec<(String, usize)>,
    /// Countries absent from the population table.
    pub missing_population: Vec<String>,
}

impl IngestReport {
    pub fn flagged_days(&self) -> usize {
        self.series.values().map(|s| s.flags.len()).sum()
    }
}

/// Reads a `country,population` CSV.
pub fn load_population(path: impl AsRef<Path>) -> Result<PopulationTable> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_population(file)
}

pub fn read_population<R: std::io::Read>(reader: R) -> Result<PopulationTable> {
    let mut rdr = csv::Reader::from_reader(reader);
    let mut table = BTreeMap::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 1;
        let rec = rec.map_err(|e| Error::MalformedRow {
            row,
            reason: e.to_string(),
        })?;
        let name = rec.get(0).unwrap_or("").trim();
        let pop = rec.get(1).unwrap_or("").trim();
        let pop: f64 = pop.parse().map_err(|_| Error::MalformedRow {
            row,
            reason: format!("population `{pop}` is not a number"),
        })?;
        if name.is_empty() || pop <= 0.0 {
            return Err(Error::MalformedRow {
                row,
                reason: "empty country or non-positive population".into(),
            });
        }
        table.insert(name.to_string(), pop.round() as u64);
    }
    Ok(PopulationTable(table))
}

pub fn load_csv(
    path: impl AsRef<Path>,
    schema: &CsvSchema,
    population: &PopulationTable,
) -> Result<IngestReport> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_csv(file, schema, population)
}

struct RawRow {
    date: NaiveDate,
    cumulative: Option<u64>,
    npis: [Option<u8>; NPI_COUNT],
}

struct Columns {
    country: usize,
    code: Option<usize>,
    region: Option<usize>,
    date: usize,
    cases: usize,
    npis: [usize; NPI_COUNT],
}

fn resolve_columns(headers: &csv::StringRecord, schema: &CsvSchema) -> Result<Columns> {
    let find = |name: &str| headers.iter().position(|h| h.trim() == name);
    let require = |name: &str| find(name).ok_or_else(|| Error::MissingColumn(name.to_string()));
    let mut npis = [0usize; NPI_COUNT];
    for (slot, name) in npis.iter_mut().zip(schema.npis.iter()) {
        *slot = require(name)?;
    }
    Ok(Columns {
        country: require(&schema.country)?,
        code: schema.country_code.as_deref().and_then(find),
        region: schema.region.as_deref().and_then(find),
        date: require(&schema.date)?,
        cases: require(&schema.confirmed_cases)?,
        npis,
    })
}

fn parse_level(raw: &str, npi: usize, row: usize) -> Result<Option<u8>> {
    let raw = raw.trim();
    if raw.is_empty() {
        return Ok(None);
    }
    let v: f64 = raw.parse().map_err(|_| Error::MalformedRow {
        row,
        reason: format!("C{} value `{raw}` is not numeric", npi + 1),
    })?;
    if v.fract() != 0.0 || v < 0.0 || v > NPI_MAX_LEVELS[npi] as f64 {
        return Err(Error::MalformedRow {
            row,
            reason: format!(
                "C{} value `{raw}` outside 0..={}",
                npi + 1,
                NPI_MAX_LEVELS[npi]
            ),
        });
    }
    Ok(Some(v as u8))
}

pub fn read_csv<R: std::io::Read>(
    reader: R,
    schema: &CsvSchema,
    population: &PopulationTable,
) -> Result<IngestReport> {
    let mut rdr = csv::ReaderBuilder::new().flexible(false).from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| Error::MalformedRow {
            row: 0,
            reason: e.to_string(),
        })?
        .clone();
    let cols = resolve_columns(&headers, schema)?;

    // id -> (name, rows)
    let mut grouped: BTreeMap<String, (String, Vec<(usize, RawRow)>)> = BTreeMap::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 1;
        let rec = rec.map_err(|e| Error::MalformedRow {
            row,
            reason: e.to_string(),
        })?;
        let field = |idx: usize| rec.get(idx).unwrap_or("").trim();
        if let Some(r) = cols.region {
            if !field(r).is_empty() {
                continue;
            }
        }
        let name = field(cols.country).to_string();
        if name.is_empty() {
            return Err(Error::MalformedRow {
                row,
                reason: "empty country name".into(),
            });
        }
        let id = cols
            .code
            .map(|c| field(c).to_string())
            .filter(|c| !c.is_empty())
            .unwrap_or_else(|| name.clone());
        let date_raw = field(cols.date);
        let date = NaiveDate::parse_from_str(date_raw, "%Y%m%d").map_err(|_| Error::MalformedRow {
            row,
            reason: format!("date `{date_raw}` is not YYYYMMDD"),
        })?;
        let cases_raw = field(cols.cases);
        let cumulative = if cases_raw.is_empty() {
            None
        } else {
            let v: f64 = cases_raw.parse().map_err(|_| Error::MalformedRow {
                row,
                reason: format!("case count `{cases_raw}` is not numeric"),
            })?;
            if !v.is_finite() || v < 0.0 {
                return Err(Error::MalformedRow {
                    row,
                    reason: format!("case count `{cases_raw}` is negative"),
                });
            }
            Some(v.round() as u64)
        };
        let mut npis = [None; NPI_COUNT];
        for (k, slot) in npis.iter_mut().enumerate() {
            *slot = parse_level(field(cols.npis[k]), k, row)?;
        }
        grouped
            .entry(id)
            .or_insert_with(|| (name, Vec::new()))
            .1
            .push((
                row,
                RawRow {
                    date,
                    cumulative,
                    npis,
                },
            ));
    }
    if grouped.is_empty() {
        return Err(Error::Empty("no country rows in CSV".into()));
    }

    let mut report = IngestReport::default();
    for (id, (name, mut rows)) in grouped {
        let Some(pop) = population.get(&name).or_else(|| population.get(&id)) else {
            warn!(country = %name, "no population entry; country skipped");
            report.missing_population.push(id);
            continue;
        };
        rows.sort_by_key(|(_, r)| r.date);
        for pair in rows.windows(2) {
            if pair[0].1.date == pair[1].1.date {
                return Err(Error::MalformedRow {
                    row: pair[1].0,
                    reason: format!("duplicate date {} for {name}", pair[1].1.date),
                });
            }
        }
        let series = assemble(id.clone(), name, pop, &rows);
        let usable = series.usable_days();
        if usable < MIN_USABLE_DAYS {
            report.dropped.push((id, usable));
            continue;
        }
        report.series.insert(id, series);
    }
    Ok(report)
}

fn assemble(id: String, name: String, population: u64, rows: &[(usize, RawRow)]) -> CountrySeries {
    let by_date: HashMap<NaiveDate, &RawRow> = rows.iter().map(|(_, r)| (r.date, r)).collect();
    let first = rows.first().map(|(_, r)| r.date).expect("non-empty group");
    let last = rows.last().map(|(_, r)| r.date).expect("non-empty group");

    let mut dates = Vec::new();
    let mut new_cases = Vec::new();
    let mut npis = Vec::new();
    let mut flags = Vec::new();
    let mut levels = [0u8; NPI_COUNT];
    let mut recorded_max = 0u64;

    let mut date = first;
    while date <= last {
        let row = by_date.get(&date);
        let cumulative = match row {
            Some(r) => {
                for (level, recorded) in levels.iter_mut().zip(&r.npis) {
                    if let Some(l) = recorded {
                        *level = *l;
                    }
                }
                r.cumulative.unwrap_or(recorded_max)
            }
            None => {
                flags.push(QualityFlag {
                    date,
                    kind: FlagKind::GapFilled,
                });
                recorded_max
            }
        };
        if cumulative < recorded_max {
            flags.push(QualityFlag {
                date,
                kind: FlagKind::NegativeRevision,
            });
        }
        new_cases.push(cumulative.saturating_sub(recorded_max));
        recorded_max = recorded_max.max(cumulative);
        npis.push(NpiVector::new(levels).expect("levels validated at parse time"));
        dates.push(date);
        date = date.succ_opt().expect("date in range");
    }

    CountrySeries {
        id,
        name,
        population,
        dates,
        new_cases,
        npis,
        flags,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn header() -> String {
        let mut h = vec!["CountryName", "CountryCode", "RegionName", "Date"];
        h.extend(NPI_COLUMNS);
        h.push("ConfirmedCases");
        h.join(",")
    }

    fn row(name: &str, date: &str, npis: &str, cases: &str) -> String {
        format!("{name},{},,{date},{npis},{cases}", name[..3].to_uppercase())
    }

    fn pop() -> PopulationTable {
        PopulationTable(BTreeMap::from([("Atlantis".to_string(), 1_000_000)]))
    }

    fn ingest(rows: &[String]) -> Result<IngestReport> {
        let csv = std::iter::once(header())
            .chain(rows.iter().cloned())
            .collect::<Vec<_>>()
            .join("\n");
        // Toy inputs are too short for the usability filter; read raw groups.
        read_csv(csv.as_bytes(), &CsvSchema::default(), &pop())
    }

    fn ingest_unfiltered(rows: &[String]) -> CountrySeries {
        let csv = std::iter::once(header())
            .chain(rows.iter().cloned())
            .collect::<Vec<_>>()
            .join("\n");
        let mut rdr = csv::Reader::from_reader(csv.as_bytes());
        let cols = resolve_columns(rdr.headers().unwrap(), &CsvSchema::default()).unwrap();
        let mut raw = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec.unwrap();
            let mut npis = [None; NPI_COUNT];
            for k in 0..NPI_COUNT {
                npis[k] = parse_level(&rec[cols.npis[k]], k, i).unwrap();
            }
            raw.push((
                i,
                RawRow {
                    date: NaiveDate::parse_from_str(&rec[cols.date], "%Y%m%d").unwrap(),
                    cumulative: rec[cols.cases].parse::<f64>().ok().map(|v| v as u64),
                    npis,
                },
            ));
        }
        assemble("ATL".into(), "Atlantis".into(), 1_000_000, &raw)
    }

    const NPIS: &str = "1,1,1,1,1,1,1,1";

    #[test]
    fn first_difference_of_cumulative() {
        let s = ingest_unfiltered(&[
            row("Atlantis", "20200301", NPIS, "10"),
            row("Atlantis", "20200302", NPIS, "13"),
            row("Atlantis", "20200303", NPIS, "13"),
        ]);
        assert_eq!(s.new_cases, vec![10, 3, 0]);
        assert!(s.flags.is_empty());
    }

    #[test]
    fn downward_revision_floored_and_flagged() {
        let s = ingest_unfiltered(&[
            row("Atlantis", "20200301", NPIS, "10"),
            row("Atlantis", "20200302", NPIS, "8"),
            row("Atlantis", "20200303", NPIS, "12"),
        ]);
        assert_eq!(s.new_cases, vec![10, 0, 2]);
        assert_eq!(s.cumulative(), vec![10, 10, 12]);
        assert_eq!(s.flags.len(), 1);
        assert_eq!(s.flags[0].kind, FlagKind::NegativeRevision);
    }

    #[test]
    fn npis_forward_filled_and_leading_zero() {
        let s = ingest_unfiltered(&[
            row("Atlantis", "20200301", ",,,,,,,", "0"),
            row("Atlantis", "20200302", "2,1,0,3,1,2,1,4", "1"),
            row("Atlantis", "20200303", ",,,,,,,", "1"),
        ]);
        assert_eq!(s.npis[0], NpiVector::ZERO);
        assert_eq!(s.npis[2].levels(), &[2, 1, 0, 3, 1, 2, 1, 4]);
    }

    #[test]
    fn gaps_filled_with_zero_cases() {
        let s = ingest_unfiltered(&[
            row("Atlantis", "20200301", NPIS, "5"),
            row("Atlantis", "20200304", NPIS, "9"),
        ]);
        assert_eq!(s.len(), 4);
        assert_eq!(s.new_cases, vec![5, 0, 0, 4]);
        assert_eq!(
            s.flags.iter().filter(|f| f.kind == FlagKind::GapFilled).count(),
            2
        );
    }

    #[test]
    fn malformed_row_reports_index() {
        let err = ingest(&[
            row("Atlantis", "20200301", NPIS, "5"),
            row("Atlantis", "2020-03-02", NPIS, "6"),
        ])
        .unwrap_err();
        assert!(matches!(err, Error::MalformedRow { row: 2, .. }), "{err}");
    }

    #[test]
    fn out_of_range_level_is_malformed() {
        let err = ingest(&[row("Atlantis", "20200301", "1,1,3,1,1,1,1,1", "5")]).unwrap_err();
        assert!(matches!(err, Error::MalformedRow { row: 1, .. }));
    }

    #[test]
    fn unknown_population_is_skipped() {
        let rep = ingest(&[row("Lemuria", "20200301", NPIS, "5")]).unwrap();
        assert_eq!(rep.missing_population, vec!["LEM".to_string()]);
        assert!(rep.series.is_empty());
    }

    #[test]
    fn short_countries_dropped() {
        let rows: Vec<_> = (1..=20)
            .map(|d| row("Atlantis", &format!("202003{d:02}"), NPIS, &(d * 3).to_string()))
            .collect();
        let rep = ingest(&rows).unwrap();
        assert!(rep.series.is_empty());
        assert_eq!(rep.dropped, vec![("ATL".to_string(), 13)]);
    }

    #[test]
    fn missing_column_is_reported() {
        let csv = "CountryName,Date\nAtlantis,20200301\n";
        let err = read_csv(csv.as_bytes(), &CsvSchema::default(), &pop()).unwrap_err();
        assert!(matches!(err, Error::MissingColumn(_)));
    }

    #[test]
    fn population_csv() {
        let t = read_population("country,population\nAtlantis,1000\nLemuria,2.5e6\n".as_bytes()).unwrap();
        assert_eq!(t.get("Lemuria"), Some(2_500_000));
    }
}
