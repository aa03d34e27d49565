//! File formats.
//!
//! Count-rate datasets are CSV with optional `# key: value` metadata lines at
//! the top:
//!
//! ```text
//! # format_version: 1
//! # wavelength: 1500 nm
//! # pulse_rate: 20 MHz
//! # provenance: synthetic detector, seed 7
//! bias_current_uA,mean_photons_per_pulse,rate
//! 5,0.05,0.0000123
//! ```
//!
//! The first column may be `transmission` instead of `bias_current_uA`, and
//! `rate` may be replaced by a `clicks,pulses` pair. Rows may come in any
//! order but every (setting, power) cell must appear exactly once.
//!
//! Fitted POVMs, reconstruction results and CRB reports are JSON documents
//! carrying `kind` and `schema_version` fields. Every write goes to a
//! temporary file in the target directory that is then renamed into place.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fisher::CrbReport;
use crate::povm::{DetectorSetting, NonlinearResponse, Povm, Tuning, RESPONSE_LEN};
use crate::reconstruction::ReconstructionResult;
use crate::tomography::{CountRateSurface, TomographyFit};

pub const DATASET_FORMAT_VERSION: u32 = 1;
pub const SCHEMA_VERSION: u32 = 1;

const BIAS_COLUMN: &str = "bias_current_uA";
const TRANSMISSION_COLUMN: &str = "transmission";
const POWER_COLUMN: &str = "mean_photons_per_pulse";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetMetadata {
    pub wavelength: Option<String>,
    pub pulse_rate: Option<String>,
    pub provenance: Option<String>,
    /// Any other `# key: value` lines, kept verbatim.
    pub extra: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub metadata: DatasetMetadata,
    pub surface: CountRateSurface,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn parse_err(path: &Path, line: u64, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

/// Writes `bytes` to a sibling temporary file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(&dir).map_err(io_err(path))?;
    tmp.write_all(bytes).map_err(io_err(path))?;
    tmp.as_file().sync_all().map_err(io_err(path))?;
    tmp.persist(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e.error,
    })?;
    Ok(())
}

/// Writes a CSV table atomically.
pub fn write_table<R, S>(path: &Path, header: &[&str], rows: R) -> Result<()>
where
    R: IntoIterator<Item = Vec<S>>,
    S: AsRef<str>,
{
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| parse_err(path, 0, e.to_string());
    w.write_record(header).map_err(csv_err)?;
    for row in rows {
        w.write_record(row.iter().map(|s| s.as_ref())).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| parse_err(path, 0, e.to_string()))?;
    write_atomic(path, &bytes)
}

// ---------------------------------------------------------------- datasets

struct Cell {
    line: u64,
    setting: f64,
    power: f64,
    rate: f64,
    pulses: Option<u64>,
}

fn parse_metadata(path: &Path, text: &str) -> Result<(DatasetMetadata, Option<u64>)> {
    let mut meta = DatasetMetadata::default();
    let mut pulses = None;
    for (i, line) in text.lines().enumerate() {
        let Some(body) = line.trim_start().strip_prefix('#') else {
            if line.trim().is_empty() {
                continue;
            }
            break;
        };
        let Some((key, value)) = body.split_once(':') else {
            continue;
        };
        let (key, value) = (key.trim(), value.trim().to_string());
        let line_no = i as u64 + 1;
        match key {
            "format_version" => {
                let v: u32 = value
                    .parse()
                    .map_err(|_| parse_err(path, line_no, format!("bad format_version '{value}'")))?;
                if v != DATASET_FORMAT_VERSION {
                    return Err(Error::UnsupportedVersion {
                        kind: "dataset",
                        found: v,
                        supported: DATASET_FORMAT_VERSION,
                    });
                }
            }
            "wavelength" => meta.wavelength = Some(value),
            "pulse_rate" => meta.pulse_rate = Some(value),
            "provenance" => meta.provenance = Some(value),
            "pulses_per_point" => {
                pulses = Some(
                    value
                        .parse()
                        .map_err(|_| parse_err(path, line_no, format!("bad pulses_per_point '{value}'")))?,
                );
            }
            _ => {
                meta.extra.insert(key.to_string(), value);
            }
        }
    }
    Ok((meta, pulses))
}

fn parse_cells(path: &Path, text: &str) -> Result<(bool, Vec<Cell>)> {
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers = rdr
        .headers()
        .map_err(|e| parse_err(path, 1, e.to_string()))?
        .clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let (setting_col, is_bias) = match (col(BIAS_COLUMN), col(TRANSMISSION_COLUMN)) {
        (Some(c), None) => (c, true),
        (None, Some(c)) => (c, false),
        _ => {
            return Err(parse_err(
                path,
                1,
                format!("header needs exactly one of '{BIAS_COLUMN}' or '{TRANSMISSION_COLUMN}'"),
            ))
        }
    };
    let power_col = col(POWER_COLUMN)
        .ok_or_else(|| parse_err(path, 1, format!("header lacks '{POWER_COLUMN}'")))?;
    let rate_col = col("rate");
    let count_cols = col("clicks").zip(col("pulses"));
    if rate_col.is_none() && count_cols.is_none() {
        return Err(parse_err(path, 1, "header needs 'rate' or both 'clicks' and 'pulses'"));
    }

    let mut cells = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_err(path, line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        let field = |c: usize, name: &str| -> Result<f64> {
            let s = rec.get(c).unwrap_or("");
            s.parse::<f64>()
                .map_err(|_| parse_err(path, line, format!("column '{name}': cannot parse '{s}' as a number")))
        };
        let setting = field(setting_col, headers.get(setting_col).unwrap_or(""))?;
        let power = field(power_col, POWER_COLUMN)?;
        let (rate, pulses) = match (rate_col, count_cols) {
            (Some(c), _) => (field(c, "rate")?, None),
            (None, Some((cc, pc))) => {
                let int = |c: usize, name: &str| -> Result<u64> {
                    let s = rec.get(c).unwrap_or("");
                    s.parse::<u64>().map_err(|_| {
                        parse_err(path, line, format!("column '{name}': '{s}' is not a non-negative integer"))
                    })
                };
                let (clicks, pulses) = (int(cc, "clicks")?, int(pc, "pulses")?);
                if pulses == 0 || clicks > pulses {
                    return Err(Error::Validation(format!(
                        "{}:{line}: clicks {clicks} / pulses {pulses} is not a probability",
                        path.display()
                    )));
                }
                (clicks as f64 / pulses as f64, Some(pulses))
            }
            (None, None) => unreachable!(),
        };
        if !(0.0..=1.0).contains(&rate) {
            return Err(Error::Validation(format!(
                "{}:{line}: column 'rate' value {rate} outside [0, 1] (setting {setting}, power {power})",
                path.display()
            )));
        }
        cells.push(Cell {
            line,
            setting,
            power,
            rate,
            pulses,
        });
    }
    if cells.is_empty() {
        return Err(parse_err(path, 1, "no data rows"));
    }
    Ok((is_bias, cells))
}

fn sorted_unique(values: impl Iterator<Item = f64>) -> Vec<f64> {
    let mut v: Vec<f64> = values.collect();
    v.sort_by(f64::total_cmp);
    v.dedup_by(|a, b| a.to_bits() == b.to_bits());
    v
}

/// Reads a dataset with its metadata.
pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let (metadata, declared_pulses) = parse_metadata(path, &text)?;
    let (is_bias, cells) = parse_cells(path, &text)?;

    let values = sorted_unique(cells.iter().map(|c| c.setting));
    let powers = sorted_unique(cells.iter().map(|c| c.power));
    let setting_pos: HashMap<u64, usize> = values.iter().enumerate().map(|(i, v)| (v.to_bits(), i)).collect();
    let power_pos: HashMap<u64, usize> = powers.iter().enumerate().map(|(i, v)| (v.to_bits(), i)).collect();
    let mut grid: Vec<Vec<Option<f64>>> = vec![vec![None; powers.len()]; values.len()];
    for c in &cells {
        let slot = &mut grid[setting_pos[&c.setting.to_bits()]][power_pos[&c.power.to_bits()]];
        if slot.is_some() {
            return Err(parse_err(
                path,
                c.line,
                format!("duplicate entry for setting {} at power {}", c.setting, c.power),
            ));
        }
        *slot = Some(c.rate);
    }
    let mut rates = Vec::with_capacity(values.len());
    for (i, row) in grid.into_iter().enumerate() {
        let mut out = Vec::with_capacity(powers.len());
        for (j, r) in row.into_iter().enumerate() {
            out.push(r.ok_or_else(|| {
                Error::Validation(format!(
                    "{}: no entry for setting {} at power {}",
                    path.display(),
                    values[i],
                    powers[j]
                ))
            })?);
        }
        rates.push(out);
    }
    let settings = values
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            if is_bias {
                DetectorSetting::bias(i, v)
            } else {
                DetectorSetting::transmission(i, v)
            }
        })
        .collect::<Result<Vec<_>>>()?;

    let mut pulses = declared_pulses;
    if pulses.is_none() {
        let first = cells[0].pulses;
        if first.is_some() && cells.iter().all(|c| c.pulses == first) {
            pulses = first;
        }
    }
    let surface = CountRateSurface::new(settings, powers, rates, pulses)?;
    Ok(Dataset { metadata, surface })
}

pub fn load_dataset(path: &Path) -> Result<CountRateSurface> {
    read_dataset(path).map(|d| d.surface)
}

/// Writes a dataset in rate form; rates are printed in shortest round-trip
/// decimal so a reload is bit-identical.
pub fn save_dataset(path: &Path, surface: &CountRateSurface, metadata: &DatasetMetadata) -> Result<()> {
    let mut out = String::new();
    out.push_str(&format!("# format_version: {DATASET_FORMAT_VERSION}\n"));
    let mut meta_line = |k: &str, v: &Option<String>| {
        if let Some(v) = v {
            out.push_str(&format!("# {k}: {}\n", v.replace('\n', " ")));
        }
    };
    meta_line("wavelength", &metadata.wavelength);
    meta_line("pulse_rate", &metadata.pulse_rate);
    meta_line("provenance", &metadata.provenance);
    for (k, v) in &metadata.extra {
        out.push_str(&format!("# {k}: {}\n", v.replace('\n', " ")));
    }
    if let Some(p) = surface.pulses() {
        out.push_str(&format!("# pulses_per_point: {p}\n"));
    }
    let setting_col = match surface.settings()[0].tuning {
        Tuning::BiasCurrent(_) => BIAS_COLUMN,
        Tuning::Transmission(_) => TRANSMISSION_COLUMN,
    };
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| parse_err(path, 0, e.to_string());
    w.write_record([setting_col, POWER_COLUMN, "rate"]).map_err(csv_err)?;
    for (s, row) in surface.settings().iter().zip(surface.rates()) {
        for (m, r) in surface.powers().iter().zip(row) {
            w.write_record([s.value().to_string(), m.to_string(), r.to_string()])
                .map_err(csv_err)?;
        }
    }
    let body = w.into_inner().map_err(|e| parse_err(path, 0, e.to_string()))?;
    out.push_str(std::str::from_utf8(&body).expect("csv output is utf-8"));
    write_atomic(path, out.as_bytes())
}

/// Reads per-setting click probabilities of an unknown state from a CSV with
/// `setting` (index) and `rate` columns.
pub fn load_rates(path: &Path) -> Result<Vec<f64>> {
    let file = std::fs::File::open(path).map_err(io_err(path))?;
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(file);
    let headers = rdr.headers().map_err(|e| parse_err(path, 1, e.to_string()))?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let (Some(sc), Some(rc)) = (col("setting"), col("rate")) else {
        return Err(parse_err(path, 1, "header needs 'setting' and 'rate' columns"));
    };
    let mut entries: BTreeMap<usize, f64> = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| parse_err(path, e.position().map_or(0, |p| p.line()), e.to_string()))?;
        let line = rec.position().map_or(0, |p| p.line());
        let s = rec.get(sc).unwrap_or("");
        let idx: usize = s
            .parse()
            .map_err(|_| parse_err(path, line, format!("column 'setting': '{s}' is not an index")))?;
        let r = rec.get(rc).unwrap_or("");
        let rate: f64 = r
            .parse()
            .map_err(|_| parse_err(path, line, format!("column 'rate': cannot parse '{r}'")))?;
        if !(0.0..=1.0).contains(&rate) {
            return Err(Error::Validation(format!(
                "{}:{line}: column 'rate' value {rate} outside [0, 1]",
                path.display()
            )));
        }
        if entries.insert(idx, rate).is_some() {
            return Err(parse_err(path, line, format!("setting {idx} listed twice")));
        }
    }
    let n = entries.len();
    if n == 0 {
        return Err(parse_err(path, 1, "no data rows"));
    }
    if let Some(missing) = (0..n).find(|i| !entries.contains_key(i)) {
        return Err(Error::Validation(format!(
            "{}: settings must be indexed 0..{n} without gaps; {missing} is missing",
            path.display()
        )));
    }
    Ok(entries.into_values().collect())
}

pub fn save_rates(path: &Path, settings: &[DetectorSetting], rates: &[f64]) -> Result<()> {
    if settings.len() != rates.len() {
        return Err(Error::Dimension {
            expected: settings.len(),
            found: rates.len(),
        });
    }
    let rows = settings
        .iter()
        .zip(rates)
        .enumerate()
        .map(|(i, (s, r))| vec![i.to_string(), s.value().to_string(), r.to_string()]);
    write_table(path, &["setting", "tuning_value", "rate"], rows)
}

// --------------------------------------------------------- JSON documents

fn save_document<T: Serialize>(path: &Path, kind: &'static str, payload: &T) -> Result<()> {
    let mut value = serde_json::to_value(payload).map_err(|source| Error::Json {
        kind,
        path: path.to_path_buf(),
        source,
    })?;
    let obj = value.as_object_mut().expect("documents serialize to objects");
    obj.insert("kind".into(), kind.into());
    obj.insert("schema_version".into(), SCHEMA_VERSION.into());
    let mut text = serde_json::to_string_pretty(&value).map_err(|source| Error::Json {
        kind,
        path: path.to_path_buf(),
        source,
    })?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

fn load_document<T: DeserializeOwned>(path: &Path, kind: &'static str) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let json_err = |source| Error::Json {
        kind,
        path: path.to_path_buf(),
        source,
    };
    let mut value: serde_json::Value = serde_json::from_str(&text).map_err(json_err)?;
    let obj = value
        .as_object_mut()
        .ok_or_else(|| parse_err(path, 1, format!("{kind} document must be a JSON object")))?;
    match obj.remove("kind") {
        Some(serde_json::Value::String(k)) if k == kind => {}
        other => {
            return Err(parse_err(
                path,
                1,
                format!("expected kind '{kind}', found {}", other.map_or("nothing".into(), |v| v.to_string())),
            ))
        }
    }
    let version = obj
        .remove("schema_version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| parse_err(path, 1, "missing schema_version"))?;
    if version != u64::from(SCHEMA_VERSION) {
        return Err(Error::UnsupportedVersion {
            kind,
            found: u32::try_from(version).unwrap_or(u32::MAX),
            supported: SCHEMA_VERSION,
        });
    }
    serde_json::from_value(value).map_err(json_err)
}

#[derive(Serialize, Deserialize)]
struct PovmSettingRecord {
    index: usize,
    tuning: Tuning,
    eta: f64,
    p: [f64; RESPONSE_LEN],
    residual: f64,
    degenerate: bool,
}

#[derive(Serialize, Deserialize)]
struct PovmDocument {
    n_mr: usize,
    settings: Vec<PovmSettingRecord>,
    /// `elements[nu][n]`, click probability of setting `nu` for `n` photons.
    elements: Vec<Vec<f64>>,
}

pub fn save_povm(path: &Path, fit: &TomographyFit) -> Result<()> {
    let settings = fit
        .settings()
        .iter()
        .zip(&fit.responses)
        .zip(fit.residual.iter().zip(&fit.degenerate))
        .map(|((s, r), (res, deg))| PovmSettingRecord {
            index: s.index,
            tuning: s.tuning,
            eta: r.eta,
            p: r.p,
            residual: *res,
            degenerate: *deg,
        })
        .collect();
    let doc = PovmDocument {
        n_mr: fit.povm.n_mr(),
        settings,
        elements: fit.povm.rows().map(<[f64]>::to_vec).collect(),
    };
    save_document(path, "povm", &doc)
}

pub fn load_povm(path: &Path) -> Result<TomographyFit> {
    let doc: PovmDocument = load_document(path, "povm")?;
    let invalid = |e: Error| Error::Validation(format!("{}: {e}", path.display()));
    let mut settings = Vec::with_capacity(doc.settings.len());
    let mut responses = Vec::with_capacity(doc.settings.len());
    let mut residual = Vec::with_capacity(doc.settings.len());
    let mut degenerate = Vec::with_capacity(doc.settings.len());
    for (nu, rec) in doc.settings.into_iter().enumerate() {
        let setting = match rec.tuning {
            Tuning::BiasCurrent(v) => DetectorSetting::bias(rec.index, v),
            Tuning::Transmission(v) => DetectorSetting::transmission(rec.index, v),
        }
        .map_err(|e| invalid(e.at_setting(nu)))?;
        settings.push(setting);
        responses.push(NonlinearResponse::new(rec.eta, rec.p).map_err(|e| invalid(e.at_setting(nu)))?);
        residual.push(rec.residual);
        degenerate.push(rec.degenerate);
    }
    let povm = Povm::new(settings, doc.elements, doc.n_mr).map_err(invalid)?;
    Ok(TomographyFit {
        responses,
        residual,
        degenerate,
        povm,
    })
}

/// Bare POVM document without tomography records.
pub fn save_povm_elements(path: &Path, povm: &Povm) -> Result<()> {
    #[derive(Serialize)]
    struct Doc<'a> {
        n_mr: usize,
        settings: &'a [DetectorSetting],
        elements: Vec<Vec<f64>>,
    }
    let doc = Doc {
        n_mr: povm.n_mr(),
        settings: povm.settings(),
        elements: povm.rows().map(<[f64]>::to_vec).collect(),
    };
    save_document(path, "povm_elements", &doc)
}

pub fn load_povm_elements(path: &Path) -> Result<Povm> {
    #[derive(Deserialize)]
    struct Doc {
        n_mr: usize,
        settings: Vec<DetectorSetting>,
        elements: Vec<Vec<f64>>,
    }
    let doc: Doc = load_document(path, "povm_elements")?;
    Povm::new(doc.settings, doc.elements, doc.n_mr).map_err(|e| Error::Validation(format!("{}: {e}", path.display())))
}

#[derive(Serialize, Deserialize)]
struct ReconstructionDocument {
    result: ReconstructionResult,
}

pub fn save_reconstruction(path: &Path, result: &ReconstructionResult) -> Result<()> {
    #[derive(Serialize)]
    struct Doc<'a> {
        result: &'a ReconstructionResult,
    }
    save_document(path, "reconstruction", &Doc { result })
}

pub fn load_reconstruction(path: &Path) -> Result<ReconstructionResult> {
    let doc: ReconstructionDocument = load_document(path, "reconstruction")?;
    doc.result
        .config
        .validate()
        .map_err(|e| Error::Validation(format!("{}: {e}", path.display())))?;
    Ok(doc.result)
}

pub fn save_crb(path: &Path, report: &CrbReport) -> Result<()> {
    #[derive(Serialize)]
    struct Doc<'a> {
        report: &'a CrbReport,
    }
    save_document(path, "crb", &Doc { report })
}

pub fn load_crb(path: &Path) -> Result<CrbReport> {
    #[derive(Deserialize)]
    struct Doc {
        report: CrbReport,
    }
    let doc: Doc = load_document(path, "crb")?;
    Ok(doc.report)
}
