//! Model files (self-describing JSON) and dataset CSV input/output.
//!
//! Floats are serialized with shortest round-trip formatting, so a
//! load(save(m)) round trip reproduces every evaluation bitwise.

use crate::dataset::{Sample, TrainingDataset};
use crate::error::PersistError;
use crate::model::{ModelSpec, SurrogateModel};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fs;
use std::path::Path;

pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ModelMetadata {
    pub seed: u64,
    #[serde(default)]
    pub config_hash: String,
    #[serde(default)]
    pub train_mse: Option<f64>,
    #[serde(default)]
    pub train_r2: Option<f64>,
    #[serde(default)]
    pub selected_restart: Option<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ModelFile {
    format_version: u32,
    spec: ModelSpec,
    theta: Vec<f64>,
    metadata: ModelMetadata,
}

/// Hex SHA-256 of a serializable config, recorded in model metadata.
pub fn config_hash<T: Serialize>(config: &T) -> String {
    let json = serde_json::to_string(config).unwrap_or_default();
    let mut hasher = Sha256::new();
    hasher.update(json.as_bytes());
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn save_model(
    model: &SurrogateModel,
    metadata: &ModelMetadata,
    path: &Path,
) -> Result<(), PersistError> {
    let theta = model.theta().to_vec();
    if theta.iter().any(|v| !v.is_finite()) {
        return Err(PersistError::Schema(
            "refusing to save non-finite parameters".into(),
        ));
    }
    let file = ModelFile {
        format_version: MODEL_FORMAT_VERSION,
        spec: model.spec.clone(),
        theta,
        metadata: metadata.clone(),
    };
    let json = serde_json::to_string_pretty(&file)?;
    fs::write(path, json + "\n").map_err(|e| PersistError::Io {
        path: path.display().to_string(),
        source: e,
    })
}

pub fn load_model(path: &Path) -> Result<(SurrogateModel, ModelMetadata), PersistError> {
    let text = fs::read_to_string(path).map_err(|e| PersistError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let file: ModelFile = serde_json::from_str(&text)?;
    if file.format_version != MODEL_FORMAT_VERSION {
        return Err(PersistError::Version {
            got: file.format_version,
            supported: MODEL_FORMAT_VERSION,
        });
    }
    file.spec
        .validate()
        .map_err(|e| PersistError::Schema(e.to_string()))?;
    let mut model = file
        .spec
        .build(file.metadata.seed)
        .map_err(|e| PersistError::Schema(e.to_string()))?;
    let expected = model.theta_len();
    if file.theta.len() != expected {
        return Err(PersistError::Schema(format!(
            "theta length mismatch: expected {expected}, got {}",
            file.theta.len()
        )));
    }
    if file.theta.iter().any(|v| !v.is_finite()) {
        return Err(PersistError::Schema("non-finite parameter value".into()));
    }
    model
        .set_theta(&ndarray::Array1::from(file.theta))
        .map_err(|e| PersistError::Schema(e.to_string()))?;
    Ok((model, file.metadata))
}

// ---------------------------------------------------------------------------
// Dataset CSV
// ---------------------------------------------------------------------------
//
// Header: x0..x{n_x-1}, p0..p{n_p-1}, f, [g0..g{n_x-1}], [lam0..lam{m-1}],
// [is_optimal]. Optional column groups are present or absent as whole
// groups; a row may leave optional cells empty when that record lacks the
// group's data.

pub fn write_dataset(ds: &TrainingDataset, path: &Path) -> Result<(), PersistError> {
    let has_grads = ds.samples.iter().any(|s| s.grad.is_some());
    let has_duals = ds.samples.iter().any(|s| s.dual.is_some());
    let n_dual = if has_duals {
        ds.n_dual
            .max(ds.samples.iter().filter_map(|s| s.dual.as_ref().map(|d| d.len())).max().unwrap_or(0))
    } else {
        0
    };

    let mut wtr = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = Vec::new();
    for j in 0..ds.n_x {
        header.push(format!("x{j}"));
    }
    for j in 0..ds.n_p {
        header.push(format!("p{j}"));
    }
    header.push("f".into());
    if has_grads {
        for j in 0..ds.n_x {
            header.push(format!("g{j}"));
        }
    }
    if has_duals {
        for j in 0..n_dual {
            header.push(format!("lam{j}"));
        }
        header.push("is_optimal".into());
    }
    wtr.write_record(&header)?;

    for s in &ds.samples {
        let mut rec: Vec<String> = Vec::with_capacity(header.len());
        for v in &s.x {
            rec.push(format!("{v}"));
        }
        for v in &s.p {
            rec.push(format!("{v}"));
        }
        rec.push(format!("{}", s.f));
        if has_grads {
            match &s.grad {
                Some(g) => rec.extend(g.iter().map(|v| format!("{v}"))),
                None => rec.extend(std::iter::repeat_n(String::new(), ds.n_x)),
            }
        }
        if has_duals {
            match &s.dual {
                Some(d) => {
                    rec.extend(d.iter().map(|v| format!("{v}")));
                    rec.extend(std::iter::repeat_n(String::new(), n_dual - d.len()));
                }
                None => rec.extend(std::iter::repeat_n(String::new(), n_dual)),
            }
            rec.push(if s.is_optimal { "1".into() } else { "0".into() });
        }
        wtr.write_record(&rec)?;
    }
    wtr.flush().map_err(|e| PersistError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<TrainingDataset, PersistError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_path(path)?;
    let header: Vec<String> = rdr
        .headers()?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();

    let count_prefixed = |prefix: &str| -> usize {
        (0..)
            .take_while(|j| header.iter().any(|h| h == &format!("{prefix}{j}")))
            .count()
    };
    let n_x = count_prefixed("x");
    let n_p = count_prefixed("p");
    let n_g = count_prefixed("g");
    let n_dual = count_prefixed("lam");
    if n_x == 0 {
        return Err(PersistError::MissingColumn("x0".into()));
    }
    if !header.iter().any(|h| h == "f") {
        return Err(PersistError::MissingColumn("f".into()));
    }
    if n_g != 0 && n_g != n_x {
        return Err(PersistError::Schema(format!(
            "gradient group has {n_g} columns, expected {n_x}"
        )));
    }
    let col = |name: &str| header.iter().position(|h| h == name);
    let f_col = col("f").unwrap();
    let opt_col = col("is_optimal");

    let x_cols: Vec<usize> = (0..n_x).map(|j| col(&format!("x{j}")).unwrap()).collect();
    let p_cols: Vec<usize> = (0..n_p).map(|j| col(&format!("p{j}")).unwrap()).collect();
    let g_cols: Vec<usize> = (0..n_g).map(|j| col(&format!("g{j}")).unwrap()).collect();
    let lam_cols: Vec<usize> = (0..n_dual)
        .map(|j| col(&format!("lam{j}")).unwrap())
        .collect();

    let mut ds = TrainingDataset::new(n_x, n_p, n_dual);
    for (ri, record) in rdr.records().enumerate() {
        let row = ri + 2; // header is line 1
        let record = record?;
        let parse = |idx: usize, what: &str| -> Result<f64, PersistError> {
            let raw = record.get(idx).ok_or_else(|| PersistError::Row {
                row,
                msg: format!("missing field {what}"),
            })?;
            raw.trim().parse::<f64>().map_err(|_| PersistError::Row {
                row,
                msg: format!("cannot parse {what} from `{raw}`"),
            })
        };
        let parse_opt = |idx: usize, what: &str| -> Result<Option<f64>, PersistError> {
            let raw = record.get(idx).ok_or_else(|| PersistError::Row {
                row,
                msg: format!("missing field {what}"),
            })?;
            let t = raw.trim();
            if t.is_empty() {
                Ok(None)
            } else {
                t.parse::<f64>().map(Some).map_err(|_| PersistError::Row {
                    row,
                    msg: format!("cannot parse {what} from `{raw}`"),
                })
            }
        };

        let mut x = Vec::with_capacity(n_x);
        for (j, &c) in x_cols.iter().enumerate() {
            let v = parse(c, &format!("x{j}"))?;
            if !v.is_finite() {
                return Err(PersistError::Row {
                    row,
                    msg: format!("non-finite x{j}"),
                });
            }
            x.push(v);
        }
        let mut p = Vec::with_capacity(n_p);
        for (j, &c) in p_cols.iter().enumerate() {
            let v = parse(c, &format!("p{j}"))?;
            if !v.is_finite() {
                return Err(PersistError::Row {
                    row,
                    msg: format!("non-finite p{j}"),
                });
            }
            p.push(v);
        }
        let f = parse(f_col, "f")?;
        if !f.is_finite() {
            return Err(PersistError::Row {
                row,
                msg: "non-finite f".into(),
            });
        }

        let mut sample = Sample::plain(x, p, f);

        if !g_cols.is_empty() {
            let vals: Vec<Option<f64>> = g_cols
                .iter()
                .enumerate()
                .map(|(j, &c)| parse_opt(c, &format!("g{j}")))
                .collect::<Result<_, _>>()?;
            if vals.iter().all(|v| v.is_some()) {
                sample = sample.with_grad(vals.into_iter().map(|v| v.unwrap()).collect());
            } else if vals.iter().any(|v| v.is_some()) {
                return Err(PersistError::Row {
                    row,
                    msg: "partially filled gradient group".into(),
                });
            }
        }

        let is_opt = match opt_col {
            Some(c) => {
                let raw = record.get(c).unwrap_or("").trim();
                raw == "1" || raw.eq_ignore_ascii_case("true")
            }
            None => false,
        };
        if !lam_cols.is_empty() && is_opt {
            let vals: Vec<Option<f64>> = lam_cols
                .iter()
                .enumerate()
                .map(|(j, &c)| parse_opt(c, &format!("lam{j}")))
                .collect::<Result<_, _>>()?;
            if vals.iter().all(|v| v.is_some()) {
                sample = sample.optimal(vals.into_iter().map(|v| v.unwrap()).collect());
            } else {
                return Err(PersistError::Row {
                    row,
                    msg: "optimal row with incomplete dual group".into(),
                });
            }
        }

        ds.push(sample).map_err(|e| PersistError::Row {
            row,
            msg: e.to_string(),
        })?;
    }
    Ok(ds)
}

/// Writes training history as `epoch,loss_total,loss_fit,reg1,reg2`.
pub fn write_history(
    history: &[crate::train::EpochRecord],
    path: &Path,
) -> Result<(), PersistError> {
    let mut wtr = csv::Writer::from_path(path)?;
    wtr.write_record(["epoch", "loss_total", "loss_fit", "reg1", "reg2"])?;
    for rec in history {
        wtr.write_record(&[
            rec.epoch.to_string(),
            format!("{}", rec.loss_total),
            format!("{}", rec.loss_fit),
            format!("{}", rec.reg1),
            format!("{}", rec.reg2),
        ])?;
    }
    wtr.flush().map_err(|e| PersistError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    Ok(())
}
