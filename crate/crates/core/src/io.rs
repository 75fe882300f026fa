//! File formats.
//!
//! - Hierarchy: one ` > `-separated path per line.
//! - Annotations: CSV with header `sample_id,<category>...`; each cell holds
//!   `;`-joined node paths, an empty cell marks a missing category.
//! - Features: CSV with header `sample_id,f0,f1,...`.
//! - Predictions: JSON lines. The first record is a header naming the score
//!   kind and every category with its node count; each following record holds
//!   a `sample_id` and one pre-order score array per category.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::annotations::{parse_annotation, serialize_annotation, AnnotationSet, CategoryLabels, PATH_LIST_SEPARATOR};
use crate::constraint::{binarize, constrain_tree, predict_bits, sigmoid};
use crate::error::{Error, Result};
use crate::hierarchy::Hierarchy;

pub const PREDICTIONS_SCHEMA_VERSION: u32 = 1;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn schema(path: &Path, field: impl Into<String>, reason: impl Into<String>) -> Error {
    Error::SchemaMismatch {
        file: path.display().to_string(),
        field: field.into(),
        reason: reason.into(),
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(io_err(path))
}

pub fn read_hierarchy(path: &Path) -> Result<Hierarchy> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    Hierarchy::parse(&text)
}

pub fn write_hierarchy(path: &Path, h: &Hierarchy) -> Result<()> {
    std::fs::write(path, h.to_path_lines()).map_err(io_err(path))
}

fn csv_reader(path: &Path) -> Result<csv::Reader<File>> {
    let file = File::open(path).map_err(io_err(path))?;
    Ok(csv::ReaderBuilder::new().has_headers(true).from_reader(file))
}

fn check_id_column(path: &Path, headers: &csv::StringRecord) -> Result<()> {
    match headers.get(0) {
        Some("sample_id") => Ok(()),
        other => Err(schema(
            path,
            "header[0]",
            format!("expected `sample_id`, found {other:?}"),
        )),
    }
}

/// Reads annotations, ordering categories like `hierarchies`. Extra columns
/// are rejected so that typos do not silently drop labels.
pub fn read_annotations(path: &Path, hierarchies: &[Hierarchy]) -> Result<Vec<AnnotationSet>> {
    let mut reader = csv_reader(path)?;
    let headers = reader.headers()?.clone();
    check_id_column(path, &headers)?;
    let columns: HashMap<&str, usize> = headers.iter().enumerate().skip(1).map(|(i, c)| (c, i)).collect();
    for name in columns.keys() {
        if !hierarchies.iter().any(|h| h.category() == *name) {
            return Err(schema(path, *name, "column matches no hierarchy"));
        }
    }
    let order = hierarchies
        .iter()
        .map(|h| {
            columns
                .get(h.category())
                .copied()
                .ok_or_else(|| schema(path, h.category(), "missing category column"))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut out = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record?;
        let sample_id = record.get(0).unwrap_or_default().to_string();
        let categories = hierarchies
            .iter()
            .zip(&order)
            .map(|(h, &col)| {
                let cell = record.get(col).unwrap_or_default().trim();
                if cell.is_empty() {
                    return Ok(CategoryLabels::absent(h));
                }
                let paths: Vec<&str> = cell.split(PATH_LIST_SEPARATOR).map(str::trim).collect();
                parse_annotation(h, &paths).map_err(|e| {
                    schema(path, format!("row {} ({sample_id}), {}", row + 1, h.category()), e.to_string())
                })
            })
            .collect::<Result<Vec<_>>>()?;
        out.push(AnnotationSet {
            sample_id,
            categories,
        });
    }
    Ok(out)
}

pub fn write_annotations(path: &Path, hierarchies: &[Hierarchy], annotations: &[AnnotationSet]) -> Result<()> {
    let mut writer = csv::Writer::from_writer(create(path)?);
    let mut header = vec!["sample_id".to_string()];
    header.extend(hierarchies.iter().map(|h| h.category().to_string()));
    writer.write_record(&header)?;
    for a in annotations {
        let mut record = vec![a.sample_id.clone()];
        for h in hierarchies {
            let labels = a.get(h.category()).ok_or_else(|| {
                Error::CategoryMismatch(format!("sample `{}` has no `{}` entry", a.sample_id, h.category()))
            })?;
            let cell = if labels.present {
                serialize_annotation(h, labels).join(&PATH_LIST_SEPARATOR.to_string())
            } else {
                String::new()
            };
            record.push(cell);
        }
        writer.write_record(&record)?;
    }
    writer.flush().map_err(io_err(path))
}

/// Feature matrix with its row ids.
#[derive(Debug, Clone, PartialEq)]
pub struct Features {
    pub sample_ids: Vec<String>,
    pub values: Array2<f64>,
}

pub fn read_features(path: &Path) -> Result<Features> {
    let mut reader = csv_reader(path)?;
    let headers = reader.headers()?.clone();
    check_id_column(path, &headers)?;
    let dim = headers.len() - 1;
    let mut sample_ids = Vec::new();
    let mut values = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record?;
        if record.len() != headers.len() {
            return Err(Error::dims(
                format!("{}: columns in row {}", path.display(), row + 1),
                headers.len(),
                record.len(),
            ));
        }
        sample_ids.push(record[0].to_string());
        for (c, cell) in record.iter().enumerate().skip(1) {
            let v: f64 = cell.trim().parse().map_err(|_| {
                schema(path, format!("row {}, column {}", row + 1, &headers[c]), format!("`{cell}` is not a number"))
            })?;
            values.push(v);
        }
    }
    let values = Array2::from_shape_vec((sample_ids.len(), dim), values).expect("row lengths checked");
    Ok(Features { sample_ids, values })
}

pub fn write_features(path: &Path, features: &Features) -> Result<()> {
    let mut writer = csv::Writer::from_writer(create(path)?);
    let mut header = vec!["sample_id".to_string()];
    header.extend((0..features.values.ncols()).map(|i| format!("f{i}")));
    writer.write_record(&header)?;
    for (id, row) in features.sample_ids.iter().zip(features.values.rows()) {
        let mut record = vec![id.clone()];
        record.extend(row.iter().map(f64::to_string));
        writer.write_record(&record)?;
    }
    writer.flush().map_err(io_err(path))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreKind {
    Logits,
    Probabilities,
    Bits,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryShape {
    pub name: String,
    pub nodes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    #[serde(rename = "type")]
    record_type: String,
    schema_version: u32,
    kind: ScoreKind,
    categories: Vec<CategoryShape>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Record {
    sample_id: String,
    scores: BTreeMap<String, Vec<f64>>,
}

/// Per-sample scores for every category; `scores[c]` is `samples x nodes`.
#[derive(Debug, Clone, PartialEq)]
pub struct Predictions {
    pub kind: ScoreKind,
    pub categories: Vec<CategoryShape>,
    pub sample_ids: Vec<String>,
    pub scores: Vec<Array2<f64>>,
}

impl Predictions {
    pub fn new(kind: ScoreKind, hierarchies: &[Hierarchy], sample_ids: Vec<String>, scores: Vec<Array2<f64>>) -> Result<Self> {
        if scores.len() != hierarchies.len() {
            return Err(Error::dims("score categories", hierarchies.len(), scores.len()));
        }
        for (h, s) in hierarchies.iter().zip(&scores) {
            if s.dim() != (sample_ids.len(), h.len()) {
                return Err(Error::dims(
                    format!("scores for `{}`", h.category()),
                    sample_ids.len() * h.len(),
                    s.len(),
                ));
            }
        }
        Ok(Predictions {
            kind,
            categories: hierarchies
                .iter()
                .map(|h| CategoryShape {
                    name: h.category().to_string(),
                    nodes: h.len(),
                })
                .collect(),
            sample_ids,
            scores,
        })
    }

    /// Observed labels as 0/1 scores.
    pub fn from_annotations(hierarchies: &[Hierarchy], annotations: &[AnnotationSet]) -> Result<Self> {
        let scores = hierarchies
            .iter()
            .map(|h| {
                let (targets, _) = crate::annotations::encode_batch(annotations, h)?;
                Ok(targets.mapv(|b| if b { 1.0 } else { 0.0 }))
            })
            .collect::<Result<Vec<_>>>()?;
        let ids = annotations.iter().map(|a| a.sample_id.clone()).collect();
        Predictions::new(ScoreKind::Bits, hierarchies, ids, scores)
    }

    /// Bits laid out as `[sample][category][node]`.
    pub fn from_bits(hierarchies: &[Hierarchy], sample_ids: Vec<String>, bits: &[Vec<Vec<bool>>]) -> Result<Self> {
        if bits.len() != sample_ids.len() {
            return Err(Error::dims("bit rows", sample_ids.len(), bits.len()));
        }
        let scores = hierarchies
            .iter()
            .enumerate()
            .map(|(c, h)| {
                let mut m = Array2::zeros((bits.len(), h.len()));
                for (s, sample) in bits.iter().enumerate() {
                    let row = sample.get(c).ok_or_else(|| Error::dims("bit categories", hierarchies.len(), sample.len()))?;
                    if row.len() != h.len() {
                        return Err(Error::dims(format!("bits for `{}`", h.category()), h.len(), row.len()));
                    }
                    for (j, &b) in row.iter().enumerate() {
                        m[[s, j]] = if b { 1.0 } else { 0.0 };
                    }
                }
                Ok(m)
            })
            .collect::<Result<Vec<_>>>()?;
        Predictions::new(ScoreKind::Bits, hierarchies, sample_ids, scores)
    }

    pub fn len(&self) -> usize {
        self.sample_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sample_ids.is_empty()
    }

    /// Applies the max-constraint. Logits are squashed first, so the result
    /// is always probabilities (or bits, which stay bits).
    pub fn constrained(&self, hierarchies: &[Hierarchy]) -> Result<Predictions> {
        self.check(hierarchies)?;
        let kind = match self.kind {
            ScoreKind::Bits => ScoreKind::Bits,
            _ => ScoreKind::Probabilities,
        };
        let scores = hierarchies
            .iter()
            .zip(&self.scores)
            .map(|(h, s)| {
                let mut out = s.clone();
                for mut row in out.rows_mut() {
                    let probs: Vec<f64> = match self.kind {
                        ScoreKind::Logits => row.iter().map(|&x| sigmoid(x)).collect(),
                        _ => row.to_vec(),
                    };
                    for (dst, v) in row.iter_mut().zip(constrain_tree(h, &probs)?) {
                        *dst = v;
                    }
                }
                Ok(out)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Predictions {
            kind,
            scores,
            ..self.clone()
        })
    }

    /// Constrained, thresholded bits as `[sample][category][node]`.
    pub fn to_bits(&self, hierarchies: &[Hierarchy], threshold: f64) -> Result<Vec<Vec<Vec<bool>>>> {
        self.check(hierarchies)?;
        let mut out = vec![Vec::with_capacity(hierarchies.len()); self.len()];
        for (h, s) in hierarchies.iter().zip(&self.scores) {
            for (i, row) in s.rows().into_iter().enumerate() {
                let row = row.to_vec();
                let bits = match self.kind {
                    ScoreKind::Logits => predict_bits(h, &row, threshold)?,
                    ScoreKind::Probabilities | ScoreKind::Bits => {
                        binarize(&constrain_tree(h, &row)?, threshold)?
                    }
                };
                out[i].push(bits);
            }
        }
        Ok(out)
    }

    /// Reorders rows to follow `ids`; every id must be present.
    pub fn aligned_to(&self, ids: &[String]) -> Result<Predictions> {
        let position: HashMap<&str, usize> = self.sample_ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
        let rows = ids
            .iter()
            .map(|id| {
                position.get(id.as_str()).copied().ok_or_else(|| Error::SchemaMismatch {
                    file: "predictions".into(),
                    field: "sample_id".into(),
                    reason: format!("no prediction for sample `{id}`"),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Predictions {
            sample_ids: ids.to_vec(),
            scores: self.scores.iter().map(|s| s.select(ndarray::Axis(0), &rows)).collect(),
            ..self.clone()
        })
    }

    fn check(&self, hierarchies: &[Hierarchy]) -> Result<()> {
        check_shapes(Path::new("predictions"), &self.categories, hierarchies)
    }
}

fn check_shapes(path: &Path, categories: &[CategoryShape], hierarchies: &[Hierarchy]) -> Result<()> {
    if categories.len() != hierarchies.len() {
        return Err(schema(
            path,
            "categories",
            format!("expected {} categories, found {}", hierarchies.len(), categories.len()),
        ));
    }
    for (c, h) in categories.iter().zip(hierarchies) {
        if c.name != h.category() {
            return Err(schema(
                path,
                "categories",
                format!("expected category `{}`, found `{}`", h.category(), c.name),
            ));
        }
        if c.nodes != h.len() {
            return Err(schema(
                path,
                format!("categories.{}.nodes", c.name),
                format!("hierarchy has {} nodes, file declares {}", h.len(), c.nodes),
            ));
        }
    }
    Ok(())
}

pub fn write_predictions(path: &Path, predictions: &Predictions) -> Result<()> {
    let mut out = create(path)?;
    let header = Header {
        record_type: "header".into(),
        schema_version: PREDICTIONS_SCHEMA_VERSION,
        kind: predictions.kind,
        categories: predictions.categories.clone(),
    };
    serde_json::to_writer(&mut out, &header)?;
    out.write_all(b"\n").map_err(io_err(path))?;
    for (i, id) in predictions.sample_ids.iter().enumerate() {
        let record = Record {
            sample_id: id.clone(),
            scores: predictions
                .categories
                .iter()
                .zip(&predictions.scores)
                .map(|(c, s)| (c.name.clone(), s.row(i).to_vec()))
                .collect(),
        };
        serde_json::to_writer(&mut out, &record)?;
        out.write_all(b"\n").map_err(io_err(path))?;
    }
    out.flush().map_err(io_err(path))
}

/// Reads a predictions file and checks it against `hierarchies`.
pub fn read_predictions(path: &Path, hierarchies: &[Hierarchy]) -> Result<Predictions> {
    let reader = BufReader::new(File::open(path).map_err(io_err(path))?);
    let mut lines = reader.lines().enumerate().filter(|(_, l)| !matches!(l, Ok(s) if s.trim().is_empty()));
    let header: Header = match lines.next() {
        Some((_, line)) => serde_json::from_str(&line.map_err(io_err(path))?)
            .map_err(|e| schema(path, "header", e.to_string()))?,
        None => return Err(schema(path, "header", "file is empty")),
    };
    if header.record_type != "header" {
        return Err(schema(path, "header.type", format!("expected `header`, found `{}`", header.record_type)));
    }
    if header.schema_version != PREDICTIONS_SCHEMA_VERSION {
        return Err(schema(
            path,
            "header.schema_version",
            format!("expected {PREDICTIONS_SCHEMA_VERSION}, found {}", header.schema_version),
        ));
    }
    check_shapes(path, &header.categories, hierarchies)?;

    let mut sample_ids = Vec::new();
    let mut flat: Vec<Vec<f64>> = vec![Vec::new(); hierarchies.len()];
    for (n, line) in lines {
        let record: Record = serde_json::from_str(&line.map_err(io_err(path))?)
            .map_err(|e| schema(path, format!("line {}", n + 1), e.to_string()))?;
        for (c, h) in hierarchies.iter().enumerate() {
            let scores = record.scores.get(h.category()).ok_or_else(|| {
                schema(path, format!("line {}.scores.{}", n + 1, h.category()), "missing")
            })?;
            if scores.len() != h.len() {
                return Err(Error::dims(
                    format!("{}: line {} scores for `{}`", path.display(), n + 1, h.category()),
                    h.len(),
                    scores.len(),
                ));
            }
            flat[c].extend_from_slice(scores);
        }
        sample_ids.push(record.sample_id);
    }
    let scores = hierarchies
        .iter()
        .zip(flat)
        .map(|(h, v)| Array2::from_shape_vec((sample_ids.len(), h.len()), v).expect("lengths checked"))
        .collect();
    Ok(Predictions {
        kind: header.kind,
        categories: header.categories,
        sample_ids,
        scores,
    })
}
