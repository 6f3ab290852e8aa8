//! Dataset CSV files: `cluster_id,arm,y,<covariates...>` with `NA` marking a
//! missing outcome, plus export of completed imputations.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::data::{Arm, ClusterRecord, TrialDataset};
use crate::error::{Error, Result};
use crate::mmi::{ImputationConfig, ImputationSet};

pub const MISSING_TOKEN: &str = "NA";
const FIXED_COLUMNS: [&str; 3] = ["cluster_id", "arm", "y"];

fn schema(line: u64, message: impl Into<String>) -> Error {
    Error::Schema { line: line as usize, message: message.into() }
}

pub fn read_dataset<R: Read>(reader: R) -> Result<TrialDataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
    let header = rdr.headers().map_err(|e| schema(1, e.to_string()))?.clone();
    if header.len() < 3 || header.iter().take(3).ne(FIXED_COLUMNS) {
        return Err(schema(1, format!("header must start with {}", FIXED_COLUMNS.join(","))));
    }
    let covariate_names: Vec<String> = header.iter().skip(3).map(str::to_string).collect();
    if let Some(bad) = covariate_names.iter().find(|n| n.is_empty()) {
        return Err(schema(1, format!("empty covariate name `{bad}`")));
    }

    let mut order: Vec<String> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    let mut arms: Vec<Arm> = Vec::new();
    let mut outcomes: Vec<Vec<Option<u8>>> = Vec::new();
    let mut rows: Vec<Vec<Vec<f64>>> = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            schema(line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let id = &record[0];
        if id.is_empty() {
            return Err(schema(line, "empty cluster_id"));
        }
        let arm = match &record[1] {
            "0" => Arm::Control,
            "1" => Arm::Intervention,
            other => return Err(schema(line, format!("arm must be 0 or 1, found `{other}`"))),
        };
        let y = match &record[2] {
            "0" => Some(0),
            "1" => Some(1),
            MISSING_TOKEN => None,
            other => return Err(schema(line, format!("y must be 0, 1 or {MISSING_TOKEN}, found `{other}`"))),
        };
        let mut row = Vec::with_capacity(covariate_names.len());
        for (c, name) in covariate_names.iter().enumerate() {
            let text = &record[3 + c];
            let v: f64 =
                text.parse().ok().filter(|v: &f64| v.is_finite()).ok_or_else(|| {
                    schema(line, format!("covariate `{name}` must be a finite number, found `{text}`"))
                })?;
            row.push(v);
        }
        let j = match index.get(id) {
            Some(&j) => {
                if arms[j] != arm {
                    return Err(schema(line, format!("cluster `{id}` appears in both arms")));
                }
                j
            }
            None => {
                index.insert(id.to_string(), order.len());
                order.push(id.to_string());
                arms.push(arm);
                outcomes.push(Vec::new());
                rows.push(Vec::new());
                order.len() - 1
            }
        };
        outcomes[j].push(y);
        rows[j].push(row);
    }
    let clusters = order
        .into_iter()
        .zip(arms)
        .zip(outcomes.into_iter().zip(rows))
        .map(|((id, arm), (ys, xs))| {
            let width = covariate_names.len();
            let mut c = ClusterRecord::new(id, arm, ys, xs);
            c.width = width;
            c
        })
        .collect();
    TrialDataset::new(clusters, covariate_names).validate()
}

pub fn read_dataset_file(path: &Path) -> Result<TrialDataset> {
    let file = std::fs::File::open(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    read_dataset(std::io::BufReader::new(file))
}

pub fn write_dataset<W: Write>(dataset: &TrialDataset, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let io = |e: csv::Error| Error::Io(e.to_string());
    let mut header: Vec<&str> = FIXED_COLUMNS.to_vec();
    header.extend(dataset.covariate_names.iter().map(String::as_str));
    w.write_record(&header).map_err(io)?;
    for c in &dataset.clusters {
        for (l, y) in c.outcomes.iter().enumerate() {
            let mut rec =
                vec![c.id.clone(), c.arm.code().to_string(), y.map_or(MISSING_TOKEN.to_string(), |v| v.to_string())];
            rec.extend(c.covariate_row(l).iter().map(|v| v.to_string()));
            w.write_record(&rec).map_err(io)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_dataset_file(dataset: &TrialDataset, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    write_dataset(dataset, std::io::BufWriter::new(file))
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    master_seed: u64,
    replication_index: u64,
    n_imputations: usize,
    burn_in: usize,
    thinning: usize,
    include_interaction: bool,
    adjust_for: &'a [String],
    prior_variance_shape: f64,
    prior_variance_scale: f64,
    files: Vec<String>,
    iterations: Vec<usize>,
}

/// Writes `imp_001.csv`, `imp_002.csv`, ... and `manifest.json` into `dir`.
pub fn export_imputations(set: &ImputationSet, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let width = set.imputations.len().to_string().len().max(3);
    let mut paths = Vec::new();
    for (i, imp) in set.imputations.iter().enumerate() {
        let path = dir.join(format!("imp_{:0width$}.csv", i + 1, width = width));
        write_dataset_file(&imp.dataset, &path)?;
        paths.push(path);
    }
    let ImputationConfig { seed, burn_in, thinning, include_interaction, adjust_for, .. } = &set.config;
    let manifest = Manifest {
        master_seed: seed.master_seed,
        replication_index: seed.replication_index,
        n_imputations: set.imputations.len(),
        burn_in: *burn_in,
        thinning: *thinning,
        include_interaction: *include_interaction,
        adjust_for,
        prior_variance_shape: set.config.prior_variance_shape,
        prior_variance_scale: set.config.prior_variance_scale,
        files: paths.iter().map(|p| p.file_name().unwrap().to_string_lossy().into_owned()).collect(),
        iterations: set.imputations.iter().map(|i| i.iteration).collect(),
    };
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Io(e.to_string()))?;
    std::fs::write(dir.join("manifest.json"), text + "\n")?;
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{builtin_scenario, demo_trial, simulate_trial};
    use crate::rng::SeedSpec;

    #[test]
    fn round_trip_is_exact() {
        let t = simulate_trial(&builtin_scenario("S2").unwrap().with_design(3, 7), SeedSpec::new(1, 2)).unwrap();
        for d in [&t.incomplete, &demo_trial(4)] {
            let mut buf = Vec::new();
            write_dataset(d, &mut buf).unwrap();
            let back = read_dataset(buf.as_slice()).unwrap();
            assert_eq!(&back, d);
        }
    }

    #[test]
    fn schema_errors_name_the_line() {
        let text = "cluster_id,arm,y,x\na,0,1,0.5\na,0,NA,1.5\nb,1,2,0.1\n";
        let err = read_dataset(text.as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Schema { line: 4, .. }), "{err}");
        let err = read_dataset("cluster_id,arm,y,x\na,0,1,NA\n".as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Schema { line: 2, .. }), "{err}");
        let err = read_dataset("id,arm,y\n".as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Schema { line: 1, .. }));
        let err = read_dataset("cluster_id,arm,y\na,0,1\na,1,0\n".as_bytes()).unwrap_err();
        assert!(err.to_string().contains("both arms"));
        let err = read_dataset("cluster_id,arm,y\na,0,1\nb,0,0\n".as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Invalid(_)));
    }

    #[test]
    fn rows_of_a_cluster_may_be_interleaved() {
        let text = "cluster_id,arm,y\na,0,1\nb,1,0\na,0,NA\n";
        let d = read_dataset(text.as_bytes()).unwrap();
        assert_eq!(d.clusters[0].outcomes, vec![Some(1), None]);
        assert_eq!(d.clusters[1].outcomes, vec![Some(0)]);
        assert_eq!(d.clusters[0].width, 0);
    }
}
