//! CSV ingest and emission for the trial, marker and environment tables.
//!
//! All files are UTF-8 with a one-line header and `.` as decimal separator.
//! Empty fields denote missing values.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use super::{
    Dataset, EnvironmentTable, GenotypeTable, MarkerMatrix, TrialRecord, WeatherSeries, FIRST_DAY,
    SEASON_DAYS,
};
use crate::{Error, Result};

pub const TRIALS_HEADER: [&str; 5] = ["genotype_id", "environment_id", "year", "replicate", "yield_mg_ha"];

/// Environment-side input files. Soil and management are optional.
#[derive(Debug, Clone)]
pub struct EnvPaths {
    pub weather: PathBuf,
    pub soil: Option<PathBuf>,
    pub management: Option<PathBuf>,
}

impl EnvPaths {
    /// `weather.csv`, `soil.csv` and `management.csv` inside `dir`.
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            weather: dir.join("weather.csv"),
            soil: Some(dir.join("soil.csv")),
            management: Some(dir.join("management.csv")),
        }
    }
}

/// Formats a float so that parsing it back gives the same bits.
pub fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

pub(crate) fn parse_err(path: &Path, line: u64, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

pub(crate) fn open_reader(path: &Path) -> Result<csv::Reader<File>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::ReaderBuilder::new().has_headers(true).from_reader(file))
}

pub(crate) fn csv_err(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line());
    parse_err(path, line, e.to_string())
}

pub(crate) fn header_fields(path: &Path, rdr: &mut csv::Reader<File>) -> Result<Vec<String>> {
    Ok(rdr
        .headers()
        .map_err(|e| csv_err(path, e))?
        .iter()
        .map(|s| s.trim().to_string())
        .collect())
}

pub(crate) fn parse_opt_f64(path: &Path, line: u64, field: &str, name: &str) -> Result<Option<f64>> {
    let s = field.trim();
    if s.is_empty() {
        return Ok(None);
    }
    s.parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .map(Some)
        .ok_or_else(|| parse_err(path, line, format!("{name}: '{s}' is not a number")))
}

/// Splits a feature header into names, checking the fixed leading columns.
fn check_prefix(path: &Path, header: &[String], prefix: &[&str]) -> Result<()> {
    if header.len() < prefix.len() || header.iter().zip(prefix).any(|(h, p)| h != p) {
        return Err(parse_err(
            path,
            1,
            format!("malformed header: expected leading columns {}", prefix.join(",")),
        ));
    }
    Ok(())
}

pub fn read_trials(path: &Path) -> Result<Vec<TrialRecord>> {
    let mut rdr = open_reader(path)?;
    let header = header_fields(path, &mut rdr)?;
    if header != TRIALS_HEADER {
        return Err(parse_err(
            path,
            1,
            format!("malformed header: expected {}", TRIALS_HEADER.join(",")),
        ));
    }
    let mut records = Vec::new();
    let mut keys = HashSet::new();
    for row in rdr.records() {
        let row = row.map_err(|e| csv_err(path, e))?;
        let line = row.position().map_or(0, |p| p.line());
        if row.len() != 5 {
            return Err(parse_err(path, line, format!("expected 5 fields, found {}", row.len())));
        }
        let genotype_id = row[0].trim().to_string();
        let environment_id = row[1].trim().to_string();
        if genotype_id.is_empty() || environment_id.is_empty() {
            return Err(parse_err(path, line, "empty identifier"));
        }
        let year = row[2]
            .trim()
            .parse::<i32>()
            .map_err(|_| parse_err(path, line, format!("year: '{}' is not an integer", &row[2])))?;
        let replicate = row[3]
            .trim()
            .parse::<u32>()
            .ok()
            .filter(|&k| k >= 1)
            .ok_or_else(|| parse_err(path, line, format!("replicate: '{}' is not an integer >= 1", &row[3])))?;
        let yield_mg_ha = parse_opt_f64(path, line, &row[4], "yield_mg_ha")?;
        if let Some(y) = yield_mg_ha {
            if y < 0.0 {
                return Err(parse_err(path, line, format!("yield_mg_ha: {y} is negative")));
            }
        }
        if !keys.insert((genotype_id.clone(), environment_id.clone(), replicate)) {
            return Err(parse_err(
                path,
                line,
                format!("duplicate key ({genotype_id}, {environment_id}, {replicate})"),
            ));
        }
        records.push(TrialRecord {
            genotype_id,
            environment_id,
            year,
            replicate,
            yield_mg_ha,
        });
    }
    Ok(records)
}

pub fn read_markers(path: &Path) -> Result<GenotypeTable> {
    let mut rdr = open_reader(path)?;
    let header = header_fields(path, &mut rdr)?;
    check_prefix(path, &header, &["genotype_id"])?;
    let marker_names = header[1..].to_vec();
    let mut ids = Vec::new();
    let mut rows = Vec::new();
    let mut seen = HashSet::new();
    for row in rdr.records() {
        let row = row.map_err(|e| csv_err(path, e))?;
        let line = row.position().map_or(0, |p| p.line());
        if row.len() != header.len() {
            return Err(parse_err(
                path,
                line,
                format!("expected {} fields, found {}", header.len(), row.len()),
            ));
        }
        let id = row[0].trim().to_string();
        if !seen.insert(id.clone()) {
            return Err(parse_err(path, line, format!("duplicate genotype {id}")));
        }
        let values = row
            .iter()
            .skip(1)
            .map(|f| match f.trim() {
                "" => Ok(None),
                "-1" => Ok(Some(-1)),
                "0" => Ok(Some(0)),
                "1" => Ok(Some(1)),
                other => Err(parse_err(path, line, format!("marker value '{other}' not in {{-1,0,1}}"))),
            })
            .collect::<Result<Vec<_>>>()?;
        ids.push(id);
        rows.push(values);
    }
    let mut markers = MarkerMatrix::new(rows.len(), marker_names.len());
    for (i, r) in rows.into_iter().enumerate() {
        for (j, v) in r.into_iter().enumerate() {
            markers.set(i, j, v);
        }
    }
    Ok(GenotypeTable {
        ids,
        marker_names,
        markers,
    })
}

/// Environment ids in first-seen order plus a lookup.
#[derive(Default)]
struct EnvIndex {
    ids: Vec<String>,
    pos: HashMap<String, usize>,
}

impl EnvIndex {
    fn get_or_insert(&mut self, id: &str) -> usize {
        if let Some(&i) = self.pos.get(id) {
            return i;
        }
        self.ids.push(id.to_string());
        self.pos.insert(id.to_string(), self.ids.len() - 1);
        self.ids.len() - 1
    }
}

pub fn read_environments(paths: &EnvPaths) -> Result<EnvironmentTable> {
    let mut index = EnvIndex::default();

    // weather
    let path = paths.weather.as_path();
    let mut rdr = open_reader(path)?;
    let header = header_fields(path, &mut rdr)?;
    check_prefix(path, &header, &["environment_id", "day_index"])?;
    let weather_names = header[2..].to_vec();
    let nw = weather_names.len();
    let mut weather: HashMap<usize, WeatherSeries> = HashMap::new();
    for row in rdr.records() {
        let row = row.map_err(|e| csv_err(path, e))?;
        let line = row.position().map_or(0, |p| p.line());
        if row.len() != header.len() {
            return Err(parse_err(path, line, format!("expected {} fields", header.len())));
        }
        let env = index.get_or_insert(row[0].trim());
        let day: i32 = row[1]
            .trim()
            .parse()
            .map_err(|_| parse_err(path, line, format!("day_index '{}' is not an integer", &row[1])))?;
        let pos = day - FIRST_DAY;
        if pos < 0 || pos as usize >= SEASON_DAYS {
            return Err(parse_err(path, line, format!("day_index {day} outside [-7, 132]")));
        }
        let series = weather.entry(env).or_insert_with(|| WeatherSeries::empty(nw));
        for f in 0..nw {
            let v = parse_opt_f64(path, line, &row[2 + f], &weather_names[f])?;
            series.set(pos as usize, f, v);
        }
    }

    // soil
    let mut soil_names = Vec::new();
    let mut soil: HashMap<usize, Vec<Option<f64>>> = HashMap::new();
    let mut coords: HashMap<usize, (f64, f64)> = HashMap::new();
    if let Some(path) = paths.soil.as_deref() {
        let mut rdr = open_reader(path)?;
        let header = header_fields(path, &mut rdr)?;
        check_prefix(path, &header, &["environment_id", "lat", "lon"])?;
        soil_names = header[3..].to_vec();
        for row in rdr.records() {
            let row = row.map_err(|e| csv_err(path, e))?;
            let line = row.position().map_or(0, |p| p.line());
            if row.len() != header.len() {
                return Err(parse_err(path, line, format!("expected {} fields", header.len())));
            }
            let env = index.get_or_insert(row[0].trim());
            let lat = parse_opt_f64(path, line, &row[1], "lat")?;
            let lon = parse_opt_f64(path, line, &row[2], "lon")?;
            if let (Some(lat), Some(lon)) = (lat, lon) {
                coords.insert(env, (lat, lon));
            }
            let vals = (0..soil_names.len())
                .map(|k| parse_opt_f64(path, line, &row[3 + k], &soil_names[k]))
                .collect::<Result<Vec<_>>>()?;
            if soil.insert(env, vals).is_some() {
                return Err(parse_err(path, line, format!("duplicate environment {}", &row[0])));
            }
        }
    }

    // management
    let mut management_names = Vec::new();
    let mut management: HashMap<usize, Vec<Option<f64>>> = HashMap::new();
    if let Some(path) = paths.management.as_deref() {
        let mut rdr = open_reader(path)?;
        let header = header_fields(path, &mut rdr)?;
        check_prefix(path, &header, &["environment_id"])?;
        management_names = header[1..].to_vec();
        for row in rdr.records() {
            let row = row.map_err(|e| csv_err(path, e))?;
            let line = row.position().map_or(0, |p| p.line());
            if row.len() != header.len() {
                return Err(parse_err(path, line, format!("expected {} fields", header.len())));
            }
            let env = index.get_or_insert(row[0].trim());
            let vals = (0..management_names.len())
                .map(|k| parse_opt_f64(path, line, &row[1 + k], &management_names[k]))
                .collect::<Result<Vec<_>>>()?;
            if management.insert(env, vals).is_some() {
                return Err(parse_err(path, line, format!("duplicate environment {}", &row[0])));
            }
        }
    }

    let n = index.ids.len();
    Ok(EnvironmentTable {
        weather: (0..n).map(|i| weather.remove(&i)).collect(),
        soil: (0..n)
            .map(|i| soil.remove(&i).unwrap_or_else(|| vec![None; soil_names.len()]))
            .collect(),
        management: (0..n)
            .map(|i| management.remove(&i).unwrap_or_else(|| vec![None; management_names.len()]))
            .collect(),
        coordinates: (0..n).map(|i| coords.get(&i).copied()).collect(),
        ids: index.ids,
        weather_names,
        soil_names,
        management_names,
        env_vector: None,
    })
}

/// Loads raw trial, marker and environment tables. Nothing is dropped here:
/// records whose genotype or environment has no feature row are kept for
/// [`super::filter_dataset`] to remove.
pub fn load_dataset(trials: &Path, markers: &Path, env: &EnvPaths) -> Result<Dataset> {
    Ok(Dataset {
        records: read_trials(trials)?,
        genotypes: read_markers(markers)?,
        environments: read_environments(env)?,
    })
}

/// Thin wrapper so write errors carry the file name.
pub struct CsvOut {
    path: PathBuf,
    inner: csv::Writer<File>,
}

impl CsvOut {
    pub fn create<S: AsRef<str>>(path: &Path, header: &[S]) -> Result<Self> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
        }
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = Self {
            path: path.to_path_buf(),
            inner: csv::WriterBuilder::new().from_writer(file),
        };
        out.row(header.iter().map(|s| s.as_ref()))?;
        Ok(out)
    }

    pub fn row<I, S>(&mut self, fields: I) -> Result<()>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<[u8]>,
    {
        self.inner.write_record(fields).map_err(|e| Error::Parse {
            path: self.path.clone(),
            line: 0,
            message: e.to_string(),
        })
    }

    pub fn finish(mut self) -> Result<()> {
        self.inner.flush().map_err(|e| Error::io(&self.path, e))?;
        let file = self.inner.into_inner().map_err(|e| Error::io(&self.path, e.into_error()))?;
        let mut file = file;
        file.flush().map_err(|e| Error::io(&self.path, e))
    }
}

pub fn write_trials(path: &Path, records: &[TrialRecord]) -> Result<()> {
    let mut out = CsvOut::create(path, &TRIALS_HEADER)?;
    for r in records {
        out.row([
            r.genotype_id.clone(),
            r.environment_id.clone(),
            r.year.to_string(),
            r.replicate.to_string(),
            fmt_opt(r.yield_mg_ha),
        ])?;
    }
    out.finish()
}

pub fn write_markers(path: &Path, g: &GenotypeTable) -> Result<()> {
    let header: Vec<&str> = std::iter::once("genotype_id")
        .chain(g.marker_names.iter().map(String::as_str))
        .collect();
    let mut out = CsvOut::create(path, &header)?;
    for (i, id) in g.ids.iter().enumerate() {
        let row = std::iter::once(id.clone()).chain(
            g.markers
                .row(i)
                .map(|v| v.map(|x| x.to_string()).unwrap_or_default()),
        );
        out.row(row)?;
    }
    out.finish()
}

pub fn write_weather(path: &Path, e: &EnvironmentTable) -> Result<()> {
    let header: Vec<&str> = ["environment_id", "day_index"]
        .into_iter()
        .chain(e.weather_names.iter().map(String::as_str))
        .collect();
    let mut out = CsvOut::create(path, &header)?;
    for (id, w) in e.ids.iter().zip(&e.weather) {
        let Some(w) = w else { continue };
        for day in 0..SEASON_DAYS {
            let vals: Vec<Option<f64>> = (0..w.features).map(|f| w.get(day, f)).collect();
            if vals.iter().all(Option::is_none) {
                continue;
            }
            let row = [id.clone(), (day as i32 + FIRST_DAY).to_string()]
                .into_iter()
                .chain(vals.into_iter().map(fmt_opt));
            out.row(row)?;
        }
    }
    out.finish()
}

pub fn write_soil(path: &Path, e: &EnvironmentTable) -> Result<()> {
    let header: Vec<&str> = ["environment_id", "lat", "lon"]
        .into_iter()
        .chain(e.soil_names.iter().map(String::as_str))
        .collect();
    let mut out = CsvOut::create(path, &header)?;
    for i in 0..e.len() {
        let (lat, lon) = match e.coordinates[i] {
            Some((a, b)) => (Some(a), Some(b)),
            None => (None, None),
        };
        let row = [e.ids[i].clone(), fmt_opt(lat), fmt_opt(lon)]
            .into_iter()
            .chain(e.soil[i].iter().map(|v| fmt_opt(*v)));
        out.row(row)?;
    }
    out.finish()
}

pub fn write_management(path: &Path, e: &EnvironmentTable) -> Result<()> {
    let header: Vec<&str> = std::iter::once("environment_id")
        .chain(e.management_names.iter().map(String::as_str))
        .collect();
    let mut out = CsvOut::create(path, &header)?;
    for i in 0..e.len() {
        let row = std::iter::once(e.ids[i].clone()).chain(e.management[i].iter().map(|v| fmt_opt(*v)));
        out.row(row)?;
    }
    out.finish()
}

/// Column names of the concatenated environment vector.
pub fn env_vector_names(e: &EnvironmentTable) -> Vec<String> {
    e.weather_names
        .iter()
        .chain(&e.soil_names)
        .chain(&e.management_names)
        .cloned()
        .collect()
}

pub fn write_env_vectors(path: &Path, e: &EnvironmentTable) -> Result<()> {
    let x = e
        .env_vector
        .as_ref()
        .ok_or_else(|| Error::invalid("environment vectors have not been built"))?;
    let names = env_vector_names(e);
    let header: Vec<&str> = std::iter::once("environment_id")
        .chain(names.iter().map(String::as_str))
        .collect();
    let mut out = CsvOut::create(path, &header)?;
    for i in 0..e.len() {
        let row = std::iter::once(e.ids[i].clone()).chain((0..x.ncols()).map(|c| fmt_f64(x[(i, c)])));
        out.row(row)?;
    }
    out.finish()
}

/// Reads an environment-vector file into the table's `env_vector`, matching
/// rows by id.
pub fn read_env_vectors(path: &Path, e: &mut EnvironmentTable) -> Result<()> {
    let mut rdr = open_reader(path)?;
    let header = header_fields(path, &mut rdr)?;
    check_prefix(path, &header, &["environment_id"])?;
    let width = header.len() - 1;
    let index: HashMap<String, usize> = e.ids.iter().enumerate().map(|(i, s)| (s.clone(), i)).collect();
    let mut x = nalgebra::DMatrix::from_element(e.len(), width, f64::NAN);
    for row in rdr.records() {
        let row = row.map_err(|e| csv_err(path, e))?;
        let line = row.position().map_or(0, |p| p.line());
        let Some(&i) = index.get(row[0].trim()) else {
            continue;
        };
        for k in 0..width {
            x[(i, k)] = parse_opt_f64(path, line, &row[1 + k], &header[1 + k])?
                .ok_or_else(|| parse_err(path, line, "missing environment feature"))?;
        }
    }
    if x.iter().any(|v| v.is_nan()) {
        return Err(Error::invalid(format!(
            "{} does not cover every environment",
            path.display()
        )));
    }
    e.env_vector = Some(x);
    Ok(())
}

/// Writes the five input tables (`trials`, `markers`, `weather`, `soil`,
/// `management`) into `dir`.
pub fn write_dataset(dir: &Path, d: &Dataset) -> Result<Vec<PathBuf>> {
    let files = [
        dir.join("trials.csv"),
        dir.join("markers.csv"),
        dir.join("weather.csv"),
        dir.join("soil.csv"),
        dir.join("management.csv"),
    ];
    write_trials(&files[0], &d.records)?;
    write_markers(&files[1], &d.genotypes)?;
    write_weather(&files[2], &d.environments)?;
    write_soil(&files[3], &d.environments)?;
    write_management(&files[4], &d.environments)?;
    Ok(files.to_vec())
}

/// Inverse of [`write_dataset`].
pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    load_dataset(&dir.join("trials.csv"), &dir.join("markers.csv"), &EnvPaths::in_dir(dir))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simgen::{simulate, SimConfig};

    fn trials_text(bad_line: Option<(usize, &str)>) -> String {
        let mut s = String::from("genotype_id,environment_id,year,replicate,yield_mg_ha\n");
        for k in 0..20 {
            let line = k + 2;
            let y = match bad_line {
                Some((l, v)) if l == line => v.to_string(),
                _ => format!("{}.5", k),
            };
            s.push_str(&format!("g{k},e1,2020,1,{y}\n"));
        }
        s
    }

    fn parse_line(text: &str) -> (u64, String) {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("trials.csv");
        std::fs::write(&p, text).unwrap();
        match read_trials(&p) {
            Err(Error::Parse { path, line, message }) => {
                assert_eq!(path, p);
                (line, message)
            }
            other => panic!("expected a parse error, got {other:?}"),
        }
    }

    #[test]
    fn non_numeric_yield_cites_its_line() {
        let (line, message) = parse_line(&trials_text(Some((17, "abc"))));
        assert_eq!(line, 17);
        assert!(message.contains("abc"), "{message}");
    }

    #[test]
    fn header_and_duplicate_errors() {
        let (line, _) = parse_line("genotype,environment_id,year,replicate,yield_mg_ha\ng1,e1,2020,1,3\n");
        assert_eq!(line, 1);
        let mut text = trials_text(None);
        text.push_str("g3,e1,2020,1,4.0\n");
        let (line, message) = parse_line(&text);
        assert_eq!(line, 22);
        assert!(message.contains("duplicate"), "{message}");
    }

    #[test]
    fn empty_yield_is_missing() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("trials.csv");
        std::fs::write(&p, "genotype_id,environment_id,year,replicate,yield_mg_ha\ng1,e1,2020,2,\n").unwrap();
        let r = read_trials(&p).unwrap();
        assert_eq!(r[0].yield_mg_ha, None);
        assert_eq!(r[0].replicate, 2);
    }

    #[test]
    fn simulated_dataset_round_trips() {
        let cfg = SimConfig {
            n_g: 12,
            n_e: 4,
            d_g: 40,
            missing_cell_fraction: 0.2,
            n_causal_markers: 5,
            ..SimConfig::desk(5)
        };
        let (d, _) = simulate(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &d).unwrap();
        let back = read_dataset(dir.path()).unwrap();
        assert_eq!(back, d);
    }

    #[test]
    fn floats_keep_their_bits() {
        for v in [0.1, 1.0 / 3.0, 1e-300, 123456.789e10, -2.5e-7] {
            assert_eq!(fmt_f64(v).parse::<f64>().unwrap().to_bits(), f64::to_bits(v));
        }
    }
}
