//! Delimited-text dataset ingestion driven by a TOML schema.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::PipelineError;
use crate::graph::StructuralGraph;
use crate::likelihood::ModelKind;

/// Structural graph declared in a schema. Samples are bound to vertices
/// either by a companion bins file or by an integer data column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructuralSpec {
    pub name: String,
    pub edges: PathBuf,
    #[serde(default)]
    pub bins: Option<PathBuf>,
    #[serde(default)]
    pub column: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schema {
    pub response: String,
    #[serde(default)]
    pub features: Vec<String>,
    #[serde(default)]
    pub offset: Option<String>,
    /// Column flagging test rows (`1`/`true`) versus training rows.
    #[serde(default)]
    pub split: Option<String>,
    /// Noiseless truth column, used only by diagnostics.
    #[serde(default)]
    pub truth: Option<String>,
    #[serde(default)]
    pub structural: Vec<StructuralSpec>,
}

impl Schema {
    /// Reads a schema; relative graph paths resolve against its directory.
    pub fn from_file(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))?;
        let mut s: Schema = toml::from_str(&text)
            .map_err(|e| PipelineError::Schema(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for g in &mut s.structural {
            if g.edges.is_relative() {
                g.edges = base.join(&g.edges);
            }
            if let Some(b) = &mut g.bins {
                if b.is_relative() {
                    *b = base.join(&*b);
                }
            }
        }
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.features.is_empty() && self.structural.is_empty() {
            return Err(PipelineError::Schema(
                "schema declares no features or structural graphs".into(),
            ));
        }
        for g in &self.structural {
            if g.bins.is_some() == g.column.is_some() {
                return Err(PipelineError::Schema(format!(
                    "structural graph {:?} needs exactly one of `bins` or `column`",
                    g.name
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Response {
    Real(Vec<f64>),
    Category(Vec<String>),
}

impl Response {
    pub fn len(&self) -> usize {
        match self {
            Self::Real(v) => v.len(),
            Self::Category(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoadedStructural {
    pub name: String,
    pub graph: StructuralGraph,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub response: Option<Response>,
    pub features: Vec<(String, Vec<f64>)>,
    pub offset: Option<Vec<f64>>,
    pub is_test: Option<Vec<bool>>,
    pub truth: Option<Vec<f64>>,
    pub structural: Vec<LoadedStructural>,
    pub rows: usize,
}

impl Dataset {
    pub fn feature(&self, name: &str) -> Option<&[f64]> {
        self.features
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v.as_slice())
    }

    pub fn real_response(&self) -> Option<&[f64]> {
        match &self.response {
            Some(Response::Real(v)) => Some(v),
            _ => None,
        }
    }
}

struct Table {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
    path: String,
}

impl Table {
    fn column(&self, name: &str) -> Result<usize, PipelineError> {
        self.header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| PipelineError::MissingColumn(name.to_string()))
    }

    fn numeric(&self, name: &str) -> Result<Vec<f64>, PipelineError> {
        let c = self.column(name)?;
        self.rows
            .iter()
            .enumerate()
            .map(|(r, row)| {
                let cell = row[c].trim();
                match cell.parse::<f64>() {
                    Ok(v) if v.is_finite() => Ok(v),
                    _ => Err(PipelineError::Cell {
                        path: self.path.clone(),
                        row: r + 1,
                        column: name.to_string(),
                        value: cell.to_string(),
                    }),
                }
            })
            .collect()
    }

    fn text(&self, name: &str) -> Result<Vec<String>, PipelineError> {
        let c = self.column(name)?;
        self.rows
            .iter()
            .enumerate()
            .map(|(r, row)| {
                let cell = row[c].trim();
                if cell.is_empty() {
                    Err(PipelineError::Cell {
                        path: self.path.clone(),
                        row: r + 1,
                        column: name.to_string(),
                        value: String::new(),
                    })
                } else {
                    Ok(cell.to_string())
                }
            })
            .collect()
    }
}

fn read_table(path: &Path) -> Result<Table, PipelineError> {
    let text = std::fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))?;
    let first = text.lines().next().unwrap_or("");
    let delim = if first.contains('\t') { b'\t' } else { b',' };
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(delim)
        .has_headers(true)
        .from_reader(text.as_bytes());
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| PipelineError::Csv(format!("{}: {e}", path.display())))?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    if header.iter().all(|h| h.is_empty()) {
        return Err(PipelineError::EmptyFile(path.display().to_string()));
    }
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| PipelineError::Csv(format!("{}: {e}", path.display())))?;
        rows.push(rec.iter().map(str::to_string).collect());
    }
    if rows.is_empty() {
        return Err(PipelineError::EmptyFile(path.display().to_string()));
    }
    Ok(Table {
        header,
        rows,
        path: path.display().to_string(),
    })
}

fn parse_flag(v: &str) -> Option<bool> {
    match v.trim().to_ascii_lowercase().as_str() {
        "1" | "true" | "test" | "yes" => Some(true),
        "0" | "false" | "train" | "no" => Some(false),
        _ => None,
    }
}

/// Loads a delimited file (comma or tab, detected from the header line).
///
/// With `model = None` the response column is optional (prediction data).
pub fn load_dataset(
    path: &Path,
    schema: &Schema,
    model: Option<ModelKind>,
) -> Result<Dataset, PipelineError> {
    let t = read_table(path)?;
    let response = match model {
        Some(ModelKind::Normal) => Some(Response::Real(t.numeric(&schema.response)?)),
        Some(ModelKind::Count) => {
            let v = t.numeric(&schema.response)?;
            if let Some(r) = v.iter().position(|&y| y < 0.0 || y.fract() != 0.0) {
                return Err(PipelineError::ResponseType(format!(
                    "row {}: count response must be a non-negative integer, got {}",
                    r + 1,
                    v[r]
                )));
            }
            Some(Response::Real(v))
        }
        Some(ModelKind::Classification) => Some(Response::Category(t.text(&schema.response)?)),
        None => match t.column(&schema.response) {
            Ok(_) => Some(match t.numeric(&schema.response) {
                Ok(v) => Response::Real(v),
                Err(_) => Response::Category(t.text(&schema.response)?),
            }),
            Err(_) => None,
        },
    };
    let features = schema
        .features
        .iter()
        .map(|f| Ok((f.clone(), t.numeric(f)?)))
        .collect::<Result<Vec<_>, PipelineError>>()?;
    let offset = schema.offset.as_deref().map(|c| t.numeric(c)).transpose()?;
    let is_test = match schema.split.as_deref() {
        Some(c) => {
            let col = t.column(c)?;
            Some(
                t.rows
                    .iter()
                    .enumerate()
                    .map(|(r, row)| {
                        parse_flag(&row[col]).ok_or_else(|| PipelineError::Cell {
                            path: t.path.clone(),
                            row: r + 1,
                            column: c.to_string(),
                            value: row[col].clone(),
                        })
                    })
                    .collect::<Result<Vec<_>, _>>()?,
            )
        }
        None => None,
    };
    let truth = match schema.truth.as_deref() {
        Some(c) if t.column(c).is_ok() => Some(t.numeric(c)?),
        _ => None,
    };
    let mut structural = Vec::new();
    for spec in &schema.structural {
        let graph = if let Some(bins) = &spec.bins {
            let g = StructuralGraph::from_files(&spec.edges, bins)?;
            if g.bin_assignment().len() != t.rows.len() {
                return Err(PipelineError::Schema(format!(
                    "bins file for {:?} covers {} rows, data has {}",
                    spec.name,
                    g.bin_assignment().len(),
                    t.rows.len()
                )));
            }
            g
        } else {
            let col = spec.column.as_deref().expect("validated");
            let ids = t.numeric(col)?;
            let assignment = ids
                .iter()
                .enumerate()
                .map(|(r, &v)| {
                    if v >= 0.0 && v.fract() == 0.0 {
                        Ok(v as usize)
                    } else {
                        Err(PipelineError::Cell {
                            path: t.path.clone(),
                            row: r + 1,
                            column: col.to_string(),
                            value: v.to_string(),
                        })
                    }
                })
                .collect::<Result<Vec<_>, _>>()?;
            structural_with_assignment(&spec.edges, assignment)?
        };
        structural.push(LoadedStructural {
            name: spec.name.clone(),
            graph,
        });
    }
    Ok(Dataset {
        response,
        features,
        offset,
        is_test,
        truth,
        structural,
        rows: t.rows.len(),
    })
}

/// Structural graph from an edge file plus an in-memory assignment.
pub fn structural_with_assignment(
    edges: &Path,
    assignment: Vec<usize>,
) -> Result<StructuralGraph, PipelineError> {
    let text = std::fs::read_to_string(edges).map_err(|e| PipelineError::io(edges, e))?;
    let mut list = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let ids: Vec<usize> = line
            .split_whitespace()
            .map(str::parse)
            .collect::<Result<_, _>>()
            .map_err(|_| {
                PipelineError::Schema(format!("{}:{}: bad edge line", edges.display(), ln + 1))
            })?;
        if ids.len() != 2 {
            return Err(PipelineError::Schema(format!(
                "{}:{}: expected `u v`",
                edges.display(),
                ln + 1
            )));
        }
        list.push((ids[0], ids[1]));
    }
    let nv = list
        .iter()
        .flat_map(|&(u, v)| [u, v])
        .chain(assignment.iter().copied())
        .max()
        .map_or(0, |m| m + 1);
    Ok(StructuralGraph::new(nv, list, assignment)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn schema(resp: &str) -> Schema {
        Schema {
            response: resp.into(),
            features: vec!["x1".into()],
            offset: None,
            split: None,
            truth: None,
            structural: vec![],
        }
    }

    fn file(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    #[test]
    fn loads_three_rows() {
        let f = file("y,x1\n1.0,0.1\n2.0,0.2\n3.0,0.3\n");
        let d = load_dataset(f.path(), &schema("y"), Some(ModelKind::Normal)).unwrap();
        assert_eq!(d.rows, 3);
        assert_eq!(d.feature("x1").unwrap(), &[0.1, 0.2, 0.3]);
    }

    #[test]
    fn tab_delimited() {
        let f = file("y\tx1\n1\t0.5\n");
        let d = load_dataset(f.path(), &schema("y"), Some(ModelKind::Count)).unwrap();
        assert_eq!(d.real_response().unwrap(), &[1.0]);
    }

    #[test]
    fn missing_response_names_column() {
        let f = file("x1\n0.1\n");
        let err = load_dataset(f.path(), &schema("y"), Some(ModelKind::Normal)).unwrap_err();
        assert_eq!(err, PipelineError::MissingColumn("y".into()));
    }

    #[test]
    fn category_response_under_normal_is_rejected() {
        let f = file("y,x1\ncat,0.1\n");
        let err = load_dataset(f.path(), &schema("y"), Some(ModelKind::Normal)).unwrap_err();
        assert!(matches!(err, PipelineError::Cell { row: 1, .. }), "{err:?}");
    }

    #[test]
    fn bad_cell_reports_position() {
        let f = file("y,x1\n1,0.1\n2,abc\n");
        match load_dataset(f.path(), &schema("y"), Some(ModelKind::Normal)).unwrap_err() {
            PipelineError::Cell { row, column, .. } => {
                assert_eq!((row, column.as_str()), (2, "x1"))
            }
            e => panic!("{e:?}"),
        }
    }

    #[test]
    fn empty_file_is_rejected() {
        let f = file("y,x1\n");
        assert!(matches!(
            load_dataset(f.path(), &schema("y"), Some(ModelKind::Normal)),
            Err(PipelineError::EmptyFile(_))
        ));
    }

    #[test]
    fn count_response_must_be_integer() {
        let f = file("y,x1\n1.5,0.1\n");
        assert!(matches!(
            load_dataset(f.path(), &schema("y"), Some(ModelKind::Count)),
            Err(PipelineError::ResponseType(_))
        ));
    }

    #[test]
    fn classification_and_split_column() {
        let f = file("y,x1,t\na,0.1,0\nb,0.2,1\n");
        let mut s = schema("y");
        s.split = Some("t".into());
        let d = load_dataset(f.path(), &s, Some(ModelKind::Classification)).unwrap();
        assert_eq!(
            d.response,
            Some(Response::Category(vec!["a".into(), "b".into()]))
        );
        assert_eq!(d.is_test, Some(vec![false, true]));
    }
}
