//! File formats: the CSV dataset layout (probability or logit columns plus a
//! label), JSON model documents with a schema version, and atomic writes.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{CalibratedOutput, MetaCalModel};
use crate::prob::{Dataset, LabeledSample, ProbVector};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("csv parse error at line {line}: {message}")]
    Csv { line: u64, message: String },
    #[error("json parse error at line {line}, column {column}: {message}")]
    Json {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("unknown schema version {found} (this build reads version {expected})")]
    SchemaVersion { found: u64, expected: u32 },
    #[error("header must contain p0..p{{k-1}} or z0..z{{k-1}} plus label (got: {0})")]
    BadHeader(String),
    #[error("invalid model document: {0}")]
    InvalidModel(String),
}

impl IoError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        IoError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

/// Format a float with 17 significant digits so CSV round-trips are lossless
/// for 64-bit values.
fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

enum ColumnFamily {
    Probabilities,
    Logits,
}

struct Header {
    family: ColumnFamily,
    value_cols: Vec<usize>,
    label_col: usize,
    id_col: Option<usize>,
}

fn parse_header(headers: &csv::StringRecord) -> Result<Header, IoError> {
    let names: Vec<&str> = headers.iter().collect();
    let joined = names.join(",");
    let bad = || IoError::BadHeader(joined.clone());

    let mut p_cols = Vec::new();
    let mut z_cols = Vec::new();
    let mut label_col = None;
    let mut id_col = None;
    for (idx, name) in names.iter().enumerate() {
        if let Some(rest) = name.strip_prefix('p') {
            if let Ok(j) = rest.parse::<usize>() {
                p_cols.push((j, idx));
                continue;
            }
        }
        if let Some(rest) = name.strip_prefix('z') {
            if let Ok(j) = rest.parse::<usize>() {
                z_cols.push((j, idx));
                continue;
            }
        }
        match *name {
            "label" => label_col = Some(idx),
            "id" => id_col = Some(idx),
            _ => return Err(bad()),
        }
    }
    let label_col = label_col.ok_or_else(bad)?;
    let (family, mut cols) = match (p_cols.is_empty(), z_cols.is_empty()) {
        (false, true) => (ColumnFamily::Probabilities, p_cols),
        (true, false) => (ColumnFamily::Logits, z_cols),
        _ => return Err(bad()),
    };
    cols.sort();
    // The class columns must be exactly 0..k-1.
    if cols.len() < 2 || cols.iter().enumerate().any(|(j, (name_j, _))| j != *name_j) {
        return Err(bad());
    }
    Ok(Header {
        family,
        value_cols: cols.into_iter().map(|(_, idx)| idx).collect(),
        label_col,
        id_col,
    })
}

/// Read a dataset CSV. `one_based_labels` shifts the label column down by
/// one for files that count classes from 1.
pub fn read_dataset_csv(path: &Path, one_based_labels: bool) -> Result<Dataset, IoError> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let header = parse_header(reader.headers().map_err(|e| csv_error(path, e))?)?;
    let mut samples = Vec::new();
    let mut ids = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let line = record.position().map_or(0, |p| p.line());
        let parse_field = |idx: usize| -> Result<f64, IoError> {
            record
                .get(idx)
                .ok_or(IoError::Csv {
                    line,
                    message: "missing field".into(),
                })?
                .trim()
                .parse::<f64>()
                .map_err(|e| IoError::Csv {
                    line,
                    message: e.to_string(),
                })
        };
        let values: Vec<f64> = header
            .value_cols
            .iter()
            .map(|&idx| parse_field(idx))
            .collect::<Result<_, _>>()?;
        let prob = match header.family {
            ColumnFamily::Probabilities => ProbVector::validate(&values),
            ColumnFamily::Logits => ProbVector::from_logits(&values),
        }
        .map_err(|e| IoError::Csv {
            line,
            message: e.to_string(),
        })?;
        let raw_label: i64 = record
            .get(header.label_col)
            .unwrap_or("")
            .trim()
            .parse()
            .map_err(|e: std::num::ParseIntError| IoError::Csv {
                line,
                message: format!("label: {e}"),
            })?;
        let label = raw_label - i64::from(one_based_labels);
        if label < 0 || label as usize >= prob.k() {
            return Err(IoError::Csv {
                line,
                message: format!("label {raw_label} out of range for {} classes", prob.k()),
            });
        }
        let sample = LabeledSample::new(prob, label as usize).map_err(|e| IoError::Csv {
            line,
            message: e.to_string(),
        })?;
        match header.id_col {
            Some(idx) => ids.push(record.get(idx).unwrap_or("").to_string()),
            None => ids.push((samples.len()).to_string()),
        }
        samples.push(sample);
    }
    Dataset::with_ids(samples, ids).map_err(|e| IoError::Csv {
        line: 0,
        message: e.to_string(),
    })
}

fn csv_error(path: &Path, e: csv::Error) -> IoError {
    match e.kind() {
        csv::ErrorKind::Io(_) => IoError::Csv {
            line: 0,
            message: format!("{}: {e}", path.display()),
        },
        _ => IoError::Csv {
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        },
    }
}

fn row_id(data: &Dataset, i: usize) -> String {
    match data.ids() {
        Some(ids) => ids[i].clone(),
        None => i.to_string(),
    }
}

fn finish_csv(path: &Path, writer: csv::Writer<Vec<u8>>) -> Result<(), IoError> {
    let bytes = writer.into_inner().map_err(|e| IoError::Csv {
        line: 0,
        message: e.to_string(),
    })?;
    atomic_write(path, &bytes)
}

/// Write a dataset as `id,p0..p{k-1},label` with lossless floats.
pub fn write_dataset_csv(path: &Path, data: &Dataset) -> Result<(), IoError> {
    let k = data.k();
    let mut writer = csv::Writer::from_writer(Vec::new());
    let write_err = |e: csv::Error| IoError::Csv {
        line: 0,
        message: e.to_string(),
    };
    let mut header = vec!["id".to_string()];
    header.extend((0..k).map(|j| format!("p{j}")));
    header.push("label".into());
    writer.write_record(&header).map_err(write_err)?;
    for (i, s) in data.iter().enumerate() {
        let mut record = Vec::with_capacity(k + 2);
        record.push(row_id(data, i));
        record.extend(s.prob.probs().iter().map(|v| fmt_f64(*v)));
        record.push(s.label.to_string());
        writer.write_record(&record).map_err(write_err)?;
    }
    finish_csv(path, writer)
}

/// Write calibrated outputs as `id,q0..q{k-1},accepted,score`.
pub fn write_outputs_csv(
    path: &Path,
    data: &Dataset,
    outputs: &[CalibratedOutput],
) -> Result<(), IoError> {
    assert_eq!(data.len(), outputs.len());
    let k = data.k();
    let mut writer = csv::Writer::from_writer(Vec::new());
    let write_err = |e: csv::Error| IoError::Csv {
        line: 0,
        message: e.to_string(),
    };
    let mut header = vec!["id".to_string()];
    header.extend((0..k).map(|j| format!("q{j}")));
    header.push("accepted".into());
    header.push("score".into());
    writer.write_record(&header).map_err(write_err)?;
    for (i, o) in outputs.iter().enumerate() {
        let mut record = Vec::with_capacity(k + 3);
        record.push(row_id(data, i));
        record.extend(o.probs.probs().iter().map(|v| fmt_f64(*v)));
        record.push(u8::from(o.accepted).to_string());
        record.push(fmt_f64(o.score));
        writer.write_record(&record).map_err(write_err)?;
    }
    finish_csv(path, writer)
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    schema_version: u32,
    #[serde(flatten)]
    model: MetaCalModel,
}

pub fn write_model(path: &Path, model: &MetaCalModel) -> Result<(), IoError> {
    let doc = ModelFile {
        schema_version: SCHEMA_VERSION,
        model: model.clone(),
    };
    write_json(path, &doc)
}

pub fn read_model(path: &Path) -> Result<MetaCalModel, IoError> {
    let text = fs::read_to_string(path).map_err(|e| IoError::io(path, e))?;
    let value: serde_json::Value = serde_json::from_str(&text).map_err(json_error)?;
    let found = value
        .get("schema_version")
        .and_then(|v| v.as_u64())
        .ok_or(IoError::SchemaVersion {
            found: 0,
            expected: SCHEMA_VERSION,
        })?;
    if found != u64::from(SCHEMA_VERSION) {
        return Err(IoError::SchemaVersion {
            found,
            expected: SCHEMA_VERSION,
        });
    }
    let doc: ModelFile = serde_json::from_value(value).map_err(json_error)?;
    doc.model
        .validate()
        .map_err(|e| IoError::InvalidModel(e.to_string()))?;
    Ok(doc.model)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, IoError> {
    let text = fs::read_to_string(path).map_err(|e| IoError::io(path, e))?;
    serde_json::from_str(&text).map_err(json_error)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), IoError> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable value");
    text.push('\n');
    atomic_write(path, text.as_bytes())
}

fn json_error(e: serde_json::Error) -> IoError {
    IoError::Json {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    }
}

/// Write-then-rename so readers never observe a half-written file.
pub fn atomic_write(path: &Path, contents: &[u8]) -> Result<(), IoError> {
    static COUNTER: AtomicU64 = AtomicU64::new(0);
    let unique = COUNTER.fetch_add(1, Ordering::Relaxed);
    let mut tmp = path.to_path_buf();
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "out".into());
    tmp.set_file_name(format!(
        ".{name}.tmp-{}-{unique}",
        std::process::id()
    ));
    {
        let mut file = fs::File::create(&tmp).map_err(|e| IoError::io(&tmp, e))?;
        file.write_all(contents).map_err(|e| IoError::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| IoError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::fit_miscoverage;
    use crate::ranking::Ranker;
    use crate::synthgen::{generate, GeneratorSpec};

    fn tmpdir() -> tempfile::TempDir {
        tempfile::tempdir().unwrap()
    }

    fn small_dataset() -> Dataset {
        generate(&GeneratorSpec {
            k: 3,
            n: 50,
            logit_scale: 2.0,
            distortion_temperature: 0.5,
            seed: 5,
        })
        .0
    }

    #[test]
    fn dataset_csv_round_trip_is_lossless() {
        // 17 significant digits make print/parse exact; reading still runs
        // the simplex validation, so the reference is validate(original).
        let dir = tmpdir();
        let path = dir.path().join("data.csv");
        let data = small_dataset();
        write_dataset_csv(&path, &data).unwrap();
        let back = read_dataset_csv(&path, false).unwrap();
        assert_eq!(back.len(), data.len());
        for (a, b) in data.iter().zip(back.iter()) {
            assert_eq!(a.label, b.label);
            let reference = ProbVector::validate(a.prob.probs()).unwrap();
            for (x, y) in reference.probs().iter().zip(b.prob.probs()) {
                assert_eq!(x.to_bits(), y.to_bits(), "{x} vs {y}");
            }
        }
        // A second write/read of the validated data only re-validates.
        let again = dir.path().join("data2.csv");
        write_dataset_csv(&again, &back).unwrap();
        let back2 = read_dataset_csv(&again, false).unwrap();
        for (a, b) in back.iter().zip(back2.iter()) {
            let reference = ProbVector::validate(a.prob.probs()).unwrap();
            for (x, y) in reference.probs().iter().zip(b.prob.probs()) {
                assert_eq!(x.to_bits(), y.to_bits(), "{x} vs {y}");
            }
        }
    }

    #[test]
    fn logit_columns_are_accepted() {
        let dir = tmpdir();
        let path = dir.path().join("logits.csv");
        let mut f = fs::File::create(&path).unwrap();
        writeln!(f, "z0,z1,z2,label").unwrap();
        writeln!(f, "0.0,0.0,0.0,2").unwrap();
        writeln!(f, "1.0,0.0,-1.0,0").unwrap();
        drop(f);
        let data = read_dataset_csv(&path, false).unwrap();
        assert_eq!(data.k(), 3);
        for v in data.samples()[0].prob.probs() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn one_based_labels_shift_down() {
        let dir = tmpdir();
        let path = dir.path().join("one.csv");
        let mut f = fs::File::create(&path).unwrap();
        writeln!(f, "p0,p1,label").unwrap();
        writeln!(f, "0.7,0.3,1").unwrap();
        writeln!(f, "0.2,0.8,2").unwrap();
        drop(f);
        let data = read_dataset_csv(&path, true).unwrap();
        assert_eq!(data.samples()[0].label, 0);
        assert_eq!(data.samples()[1].label, 1);
        // Without the flag, label 2 overflows k = 2.
        let err = read_dataset_csv(&path, false).unwrap_err();
        assert!(matches!(err, IoError::Csv { line: 3, .. }), "{err}");
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let dir = tmpdir();
        let path = dir.path().join("bad.csv");
        let mut f = fs::File::create(&path).unwrap();
        writeln!(f, "p0,p1,label").unwrap();
        writeln!(f, "0.5,0.5,0").unwrap();
        writeln!(f, "0.5,oops,1").unwrap();
        drop(f);
        match read_dataset_csv(&path, false) {
            Err(IoError::Csv { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected line-tagged csv error, got {other:?}"),
        }
    }

    #[test]
    fn mixed_and_missing_headers_are_rejected() {
        let dir = tmpdir();
        for header in ["p0,z1,label", "p0,p1", "p0,p2,label", "x,y,label"] {
            let path = dir.path().join("h.csv");
            let mut f = fs::File::create(&path).unwrap();
            writeln!(f, "{header}").unwrap();
            writeln!(f, "0.5,0.5,0").unwrap();
            drop(f);
            assert!(
                matches!(read_dataset_csv(&path, false), Err(IoError::BadHeader(_))),
                "header {header} should be rejected"
            );
        }
    }

    #[test]
    fn model_round_trip_and_schema_gate() {
        let dir = tmpdir();
        let path = dir.path().join("model.json");
        let data = generate(&GeneratorSpec {
            k: 3,
            n: 3_000,
            logit_scale: 2.0,
            distortion_temperature: 0.5,
            seed: 6,
        })
        .0;
        let model = fit_miscoverage(&data, 0.05, Ranker::Entropy, 9).unwrap();
        write_model(&path, &model).unwrap();
        let back = read_model(&path).unwrap();
        assert_eq!(model, back);

        // Bump the version: the file must be rejected.
        let text = fs::read_to_string(&path).unwrap();
        let mut value: serde_json::Value = serde_json::from_str(&text).unwrap();
        value["schema_version"] = serde_json::json!(99);
        fs::write(&path, serde_json::to_string(&value).unwrap()).unwrap();
        assert!(matches!(
            read_model(&path),
            Err(IoError::SchemaVersion { found: 99, .. })
        ));
    }

    #[test]
    fn outputs_csv_shape() {
        let dir = tmpdir();
        let path = dir.path().join("out.csv");
        let data = small_dataset();
        let model = fit_miscoverage(
            &generate(&GeneratorSpec {
                k: 3,
                n: 3_000,
                logit_scale: 2.0,
                distortion_temperature: 0.5,
                seed: 7,
            })
            .0,
            0.05,
            Ranker::Entropy,
            1,
        )
        .unwrap();
        let outputs = model.apply_dataset(&data).unwrap();
        write_outputs_csv(&path, &data, &outputs).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "id,q0,q1,q2,accepted,score");
        assert_eq!(lines.count(), data.len());
    }

    #[test]
    fn awkward_ids_are_quoted_and_round_trip() {
        let dir = tmpdir();
        let path = dir.path().join("ids.csv");
        let samples = vec![
            LabeledSample::new(ProbVector::validate(&[0.6, 0.4]).unwrap(), 0).unwrap(),
            LabeledSample::new(ProbVector::validate(&[0.3, 0.7]).unwrap(), 1).unwrap(),
        ];
        let ids = vec!["plain".to_string(), "with,comma \"and quotes\"".to_string()];
        let data = Dataset::with_ids(samples, ids.clone()).unwrap();
        write_dataset_csv(&path, &data).unwrap();
        let back = read_dataset_csv(&path, false).unwrap();
        assert_eq!(back.ids().unwrap(), ids.as_slice());
        assert_eq!(back.samples()[1].label, 1);
    }

    #[test]
    fn atomic_write_replaces_contents() {
        let dir = tmpdir();
        let path = dir.path().join("f.txt");
        atomic_write(&path, b"one").unwrap();
        atomic_write(&path, b"two").unwrap();
        assert_eq!(fs::read_to_string(&path).unwrap(), "two");
        // No temp litter left behind.
        let leftovers: Vec<_> = fs::read_dir(dir.path())
            .unwrap()
            .filter_map(|e| e.ok())
            .filter(|e| e.file_name().to_string_lossy().contains("tmp-"))
            .collect();
        assert!(leftovers.is_empty());
    }
}
