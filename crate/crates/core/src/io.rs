//! Plain-text file formats: CSV tables with fixed headers plus JSON metadata.
//!
//! Field tables start with a `# grid shape=... lengths=...` line, followed
//! by a header row and one row per pixel (row-major order). Numbers are
//! written in shortest round-trip form, so reading back is exact.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{Field, Grid, HarmonicCovariance, MultiField};
use crate::inference::{InferenceInputs, Trace, TraceRecord};
use crate::operators::{DataSet, MeasurementModel, MixtureMatrix, NoiseCovariance, PriorCovariance, Response};
use crate::synth::{GroundTruth, Scenario, ScenarioSpec};

pub const METADATA_FILE: &str = "metadata.json";
pub const MASK_FILE: &str = "mask.csv";
pub const VARIANCE_FILE: &str = "variance.csv";
pub const TRUTH_COMPONENTS_FILE: &str = "truth_components.csv";
pub const TRUTH_MIXTURE_FILE: &str = "truth_mixture.csv";
pub const TRACE_HEADER: [&str; 6] = ["t", "epsilon", "sampled_kl", "sample_count", "cg_iters", "wall_ms"];

pub fn data_file(channel: usize) -> String {
    format!("data_ch{channel}.csv")
}

/// Named columns over a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldTable {
    pub grid: Grid,
    pub names: Vec<String>,
    pub columns: Vec<Vec<f64>>,
}

impl FieldTable {
    pub fn new(grid: &Grid, names: Vec<String>, columns: Vec<Vec<f64>>) -> Result<Self> {
        if names.len() != columns.len() {
            return Err(Error::ShapeMismatch("column names and columns differ in number".into()));
        }
        if let Some(c) = columns.iter().find(|c| c.len() != grid.size()) {
            return Err(Error::ShapeMismatch(format!("column of length {} on {grid}", c.len())));
        }
        Ok(Self {
            grid: grid.clone(),
            names,
            columns,
        })
    }

    pub fn from_multifield(prefix: &str, m: &MultiField) -> Self {
        Self {
            grid: m.grid().clone(),
            names: (0..m.len()).map(|j| format!("{prefix}{j}")).collect(),
            columns: m.components().iter().map(|f| f.values().to_vec()).collect(),
        }
    }

    pub fn into_multifield(self) -> Result<MultiField> {
        let grid = self.grid;
        MultiField::new(
            self.columns
                .into_iter()
                .map(|c| Field::new(grid.clone(), c))
                .collect::<Result<_>>()?,
        )
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut file = fs::File::create(path)?;
        let join = |v: &[String]| v.join(" ");
        writeln!(
            file,
            "# grid shape={} lengths={}",
            join(&self.grid.shape().iter().map(|n| n.to_string()).collect::<Vec<_>>()),
            join(&self.grid.lengths().iter().map(|l| l.to_string()).collect::<Vec<_>>()),
        )?;
        let mut w = csv::Writer::from_writer(file);
        w.write_record(&self.names).map_err(csv_err)?;
        for p in 0..self.grid.size() {
            w.write_record(self.columns.iter().map(|c| c[p].to_string()))
                .map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut reader = BufReader::new(fs::File::open(path)?);
        let mut first = String::new();
        reader.read_line(&mut first)?;
        let grid = parse_grid_line(first.trim()).map_err(|e| at_path(path, e))?;
        let (names, rows) = read_csv(reader).map_err(|e| at_path(path, e))?;
        if rows.len() != grid.size() {
            return Err(at_path(
                path,
                Error::Parse(format!("{} rows for {} pixels", rows.len(), grid.size())),
            ));
        }
        let columns = (0..names.len()).map(|j| rows.iter().map(|r| r[j]).collect()).collect();
        Self::new(&grid, names, columns)
    }

    pub fn column(&self, name: &str) -> Option<&[f64]> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|j| self.columns[j].as_slice())
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Parse(e.to_string())
}

fn at_path(path: &Path, e: Error) -> Error {
    match e {
        Error::Parse(msg) => Error::Parse(format!("{}: {msg}", path.display())),
        other => other,
    }
}

fn parse_grid_line(line: &str) -> Result<Grid> {
    let rest = line
        .strip_prefix("# grid")
        .ok_or_else(|| Error::Parse(format!("expected '# grid ...' line, found '{line}'")))?;
    let (mut shape, mut lengths) = (None, None);
    let mut key: Option<&str> = None;
    let mut values: Vec<&str> = Vec::new();
    let mut flush = |key: Option<&str>, values: &mut Vec<&str>| -> Result<()> {
        match key {
            Some("shape") => {
                shape = Some(
                    values
                        .iter()
                        .map(|v| {
                            v.parse::<usize>()
                                .map_err(|e| Error::Parse(format!("shape '{v}': {e}")))
                        })
                        .collect::<Result<Vec<_>>>()?,
                )
            }
            Some("lengths") => {
                lengths = Some(
                    values
                        .iter()
                        .map(|v| v.parse::<f64>().map_err(|e| Error::Parse(format!("length '{v}': {e}"))))
                        .collect::<Result<Vec<_>>>()?,
                )
            }
            Some(other) => return Err(Error::Parse(format!("unknown grid key '{other}'"))),
            None => {}
        }
        values.clear();
        Ok(())
    };
    for token in rest.split_whitespace() {
        match token.split_once('=') {
            Some((k, v)) => {
                flush(key, &mut values)?;
                key = Some(k);
                values.push(v);
            }
            None => values.push(token),
        }
    }
    flush(key, &mut values)?;
    match (shape, lengths) {
        (Some(s), Some(l)) => Grid::new(s, l),
        _ => Err(Error::Parse("grid line needs shape= and lengths=".into())),
    }
}

fn read_csv<R: std::io::Read>(reader: R) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let mut r = csv::Reader::from_reader(reader);
    let names: Vec<String> = r.headers().map_err(csv_err)?.iter().map(str::to_string).collect();
    let mut rows = Vec::new();
    for (line, record) in r.records().enumerate() {
        let record = record.map_err(csv_err)?;
        let row = record
            .iter()
            .map(|v| {
                v.trim()
                    .parse::<f64>()
                    .map_err(|e| Error::Parse(format!("row {}: '{v}': {e}", line + 1)))
            })
            .collect::<Result<Vec<_>>>()?;
        if row.len() != names.len() {
            return Err(Error::Parse(format!("row {} has {} fields", line + 1, row.len())));
        }
        rows.push(row);
    }
    Ok((names, rows))
}

/// Mixture matrices: header `s0,s1,...`, one row per channel.
pub fn write_mixture(path: &Path, m: &MixtureMatrix) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record((0..m.components()).map(|j| format!("s{j}")))
        .map_err(csv_err)?;
    for row in m.rows() {
        w.write_record(row.iter().map(f64::to_string)).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_mixture(path: &Path) -> Result<MixtureMatrix> {
    let (names, rows) = read_csv(fs::File::open(path)?).map_err(|e| at_path(path, e))?;
    let m = DMatrix::from_fn(rows.len(), names.len(), |i, j| rows[i][j]);
    MixtureMatrix::new(m)
}

pub fn write_trace(path: &Path, trace: &Trace) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(TRACE_HEADER).map_err(csv_err)?;
    for r in &trace.records {
        w.write_record([
            r.iteration.to_string(),
            r.epsilon.map_or_else(|| "nan".to_string(), |e| e.to_string()),
            r.sampled_kl.to_string(),
            r.sample_count.to_string(),
            r.cg_iterations.to_string(),
            r.wall_ms.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_trace(path: &Path) -> Result<Trace> {
    let (names, rows) = read_csv(fs::File::open(path)?).map_err(|e| at_path(path, e))?;
    if names != TRACE_HEADER {
        return Err(Error::Parse(format!(
            "{}: unexpected trace header {names:?}",
            path.display()
        )));
    }
    Ok(Trace {
        records: rows
            .into_iter()
            .map(|r| TraceRecord {
                iteration: r[0] as usize,
                epsilon: (!r[1].is_nan()).then_some(r[1]),
                sampled_kl: r[2],
                sample_count: r[3] as usize,
                cg_iterations: r[4] as usize,
                wall_ms: r[5],
            })
            .collect(),
    })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut file = fs::File::create(path)?;
    serde_json::to_writer_pretty(&mut file, value)?;
    writeln!(file)?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    Ok(serde_json::from_reader(BufReader::new(fs::File::open(path)?))?)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioMetadata {
    pub spec: ScenarioSpec,
    pub seed: u64,
    pub channel_variances: Vec<f64>,
    pub masked_counts: Vec<usize>,
}

/// A scenario as read back from disk. Ground truth is optional so that
/// bundles of real data share the format.
#[derive(Debug, Clone)]
pub struct ScenarioBundle {
    pub metadata: ScenarioMetadata,
    pub data: DataSet,
    pub response: Response,
    pub noise: NoiseCovariance,
    pub truth: Option<GroundTruth>,
}

impl ScenarioBundle {
    pub fn grid(&self) -> &Grid {
        self.response.grid()
    }

    pub fn inference_inputs(&self) -> Result<InferenceInputs> {
        let block = HarmonicCovariance::from_spectrum(self.grid(), &self.metadata.spec.spectrum)?;
        Ok(InferenceInputs {
            data: self.data.clone(),
            model: MeasurementModel::new(self.response.clone(), self.noise.clone())?,
            prior: PriorCovariance::shared(block, self.metadata.spec.components),
        })
    }
}

fn channel_names(channels: usize) -> Vec<String> {
    (0..channels).map(|i| format!("ch{i}")).collect()
}

pub fn save_scenario(dir: &Path, scenario: &Scenario) -> Result<()> {
    fs::create_dir_all(dir)?;
    let grid = scenario.grid();
    let channels = scenario.data.channels();
    for i in 0..channels {
        FieldTable::new(grid, vec!["value".into()], vec![scenario.data.channel(i).to_vec()])?
            .write(&dir.join(data_file(i)))?;
    }
    let masks: Vec<Vec<f64>> = (0..channels)
        .map(|i| {
            scenario
                .response
                .mask(i)
                .iter()
                .map(|&b| if b { 1.0 } else { 0.0 })
                .collect()
        })
        .collect();
    FieldTable::new(grid, channel_names(channels), masks)?.write(&dir.join(MASK_FILE))?;
    let variances = (0..channels).map(|i| scenario.noise.variance(i).to_vec()).collect();
    FieldTable::new(grid, channel_names(channels), variances)?.write(&dir.join(VARIANCE_FILE))?;
    FieldTable::from_multifield("s", &scenario.truth.components).write(&dir.join(TRUTH_COMPONENTS_FILE))?;
    write_mixture(&dir.join(TRUTH_MIXTURE_FILE), &scenario.truth.mixture)?;
    let metadata = ScenarioMetadata {
        spec: scenario.spec.clone(),
        seed: scenario.spec.seed,
        channel_variances: scenario.channel_variances.clone(),
        masked_counts: (0..channels)
            .map(|i| grid.size() - scenario.response.measured_count(i))
            .collect(),
    };
    write_json(&dir.join(METADATA_FILE), &metadata)
}

pub fn load_scenario(dir: &Path) -> Result<ScenarioBundle> {
    let metadata: ScenarioMetadata = read_json(&dir.join(METADATA_FILE))?;
    let channels = metadata.spec.channels;
    let mask = FieldTable::read(&dir.join(MASK_FILE))?;
    let grid = mask.grid.clone();
    let data = (0..channels)
        .map(|i| {
            let t = FieldTable::read(&dir.join(data_file(i)))?;
            if t.grid != grid {
                return Err(Error::ShapeMismatch(format!("{} is on a different grid", data_file(i))));
            }
            t.columns
                .into_iter()
                .next()
                .ok_or_else(|| Error::Parse(format!("{} has no column", data_file(i))))
        })
        .collect::<Result<Vec<_>>>()?;
    let data = DataSet::new(&grid, data)?;
    let masks = channel_names(channels)
        .iter()
        .map(|name| {
            mask.column(name)
                .map(|c| c.iter().map(|&v| v != 0.0).collect())
                .ok_or_else(|| Error::Parse(format!("{MASK_FILE} lacks column {name}")))
        })
        .collect::<Result<Vec<Vec<bool>>>>()?;
    let response = Response::from_masks(&grid, masks)?;
    let var = FieldTable::read(&dir.join(VARIANCE_FILE))?;
    let noise = NoiseCovariance::new(
        channel_names(channels)
            .iter()
            .map(|name| {
                var.column(name)
                    .map(<[f64]>::to_vec)
                    .ok_or_else(|| Error::Parse(format!("{VARIANCE_FILE} lacks column {name}")))
            })
            .collect::<Result<_>>()?,
    )?;
    let truth = if dir.join(TRUTH_COMPONENTS_FILE).exists() && dir.join(TRUTH_MIXTURE_FILE).exists() {
        Some(GroundTruth {
            components: FieldTable::read(&dir.join(TRUTH_COMPONENTS_FILE))?.into_multifield()?,
            mixture: read_mixture(&dir.join(TRUTH_MIXTURE_FILE))?,
        })
    } else {
        None
    };
    Ok(ScenarioBundle {
        metadata,
        data,
        response,
        noise,
        truth,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_line_round_trip() {
        let g = parse_grid_line("# grid shape=4 3 lengths=1 0.5").unwrap();
        assert_eq!(g.shape(), &[4, 3]);
        assert_eq!(g.lengths(), &[1.0, 0.5]);
        assert!(parse_grid_line("grid shape=4").is_err());
        assert!(parse_grid_line("# grid shape=4").is_err());
        assert!(parse_grid_line("# grid shape=x lengths=1").is_err());
    }

    #[test]
    fn field_table_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let g = Grid::new(vec![5], vec![0.3]).unwrap();
        let cols = vec![
            vec![0.1, 1.0 / 3.0, -2e-300, 7.0, f64::MAX],
            vec![1.0, 2.0, 3.0, 4.0, 5.0],
        ];
        let t = FieldTable::new(&g, vec!["a".into(), "b".into()], cols).unwrap();
        let path = dir.path().join("t.csv");
        t.write(&path).unwrap();
        assert_eq!(FieldTable::read(&path).unwrap(), t);
    }

    #[test]
    fn malformed_tables_are_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        fs::write(&path, "# grid shape=2 lengths=1\nv\n1.0\nfoo\n").unwrap();
        assert!(matches!(FieldTable::read(&path), Err(Error::Parse(_))));
        fs::write(&path, "# grid shape=3 lengths=1\nv\n1.0\n2.0\n").unwrap();
        assert!(matches!(FieldTable::read(&path), Err(Error::Parse(_))));
    }

    #[test]
    fn mixture_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = MixtureMatrix::from_rows(&[vec![0.1, -0.7], vec![1.0 / 7.0, 2.5], vec![0.0, 1e-9]]).unwrap();
        let path = dir.path().join("m.csv");
        write_mixture(&path, &m).unwrap();
        assert_eq!(read_mixture(&path).unwrap(), m);
    }

    #[test]
    fn trace_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let trace = Trace {
            records: vec![
                TraceRecord {
                    iteration: 1,
                    epsilon: Some(0.25),
                    sampled_kl: -12.5,
                    sample_count: 1,
                    cg_iterations: 40,
                    wall_ms: 3.5,
                },
                TraceRecord {
                    iteration: 2,
                    epsilon: None,
                    sampled_kl: -13.0,
                    sample_count: 2,
                    cg_iterations: 41,
                    wall_ms: 3.25,
                },
            ],
        };
        let path = dir.path().join("trace.csv");
        write_trace(&path, &trace).unwrap();
        assert_eq!(read_trace(&path).unwrap(), trace);
    }
}
