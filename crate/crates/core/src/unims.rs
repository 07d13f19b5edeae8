//! Known/unknown scoring from the source class names and the searched
//! target centers.
//!
//! Each source name is weighted by how confidently it matches some target
//! center (`1 - ent_s`), each target center by how poorly it matches every
//! source name (`ent_t`). A sample scores high when it is close to a source
//! name that exists in the target domain and far from target-only centers.

use std::fmt;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedding_store::{dot64, EmbeddingMatrix};
use crate::error::{Error, Result};
use crate::math::{normalized_entropy, predict, PredictionConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropyVectors {
    /// One entry per source class: normalized entropy of the class name
    /// classified against the target centers.
    pub ent_s: Vec<f64>,
    /// One entry per active target center, classified against the source
    /// class names.
    pub ent_t: Vec<f64>,
}

pub fn entropy_vectors(
    source_centers: &EmbeddingMatrix,
    target_centers: &EmbeddingMatrix,
    tau: f64,
) -> Result<EntropyVectors> {
    if source_centers.is_empty() || target_centers.is_empty() {
        return Err(Error::Domain(
            "entropy vectors need non-empty center sets".into(),
        ));
    }
    let cfg = PredictionConfig {
        tau,
        ..PredictionConfig::default()
    };
    cfg.validate()?;
    let side = |from: &EmbeddingMatrix, to: &EmbeddingMatrix| -> Result<Vec<f64>> {
        from.iter_rows()
            .map(|w| predict(w, to, &cfg).map(|p| normalized_entropy(&p)))
            .collect()
    };
    Ok(EntropyVectors {
        ent_s: side(source_centers, target_centers)?,
        ent_t: side(target_centers, source_centers)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ScoreVariant {
    #[serde(rename = "unims")]
    UniMs,
    #[serde(rename = "ms-s")]
    MsS,
    #[serde(rename = "ms-t")]
    MsT,
    #[serde(rename = "ms-s-weighted")]
    MsSWeighted,
    #[serde(rename = "ms-t-weighted")]
    MsTWeighted,
}

impl ScoreVariant {
    pub const ALL: [ScoreVariant; 5] = [
        ScoreVariant::UniMs,
        ScoreVariant::MsS,
        ScoreVariant::MsT,
        ScoreVariant::MsSWeighted,
        ScoreVariant::MsTWeighted,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ScoreVariant::UniMs => "unims",
            ScoreVariant::MsS => "ms-s",
            ScoreVariant::MsT => "ms-t",
            ScoreVariant::MsSWeighted => "ms-s-weighted",
            ScoreVariant::MsTWeighted => "ms-t-weighted",
        }
    }
}

impl fmt::Display for ScoreVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ScoreVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ScoreVariant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown score variant `{s}` (expected one of unims, ms-s, ms-t, ms-s-weighted, ms-t-weighted)"
                ))
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreSet {
    pub variant: ScoreVariant,
    pub scores: Vec<f64>,
}

fn max_weighted(z: &[f32], centers: &EmbeddingMatrix, weight: impl Fn(usize) -> f64) -> f64 {
    centers
        .iter_rows()
        .enumerate()
        .map(|(i, c)| weight(i) * dot64(z, c))
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Scores every row of `targets` (adapted, unit-norm). Higher means more
/// likely to belong to a common class.
pub fn score(
    targets: &EmbeddingMatrix,
    source_centers: &EmbeddingMatrix,
    target_centers: &EmbeddingMatrix,
    ev: &EntropyVectors,
    variant: ScoreVariant,
) -> Result<ScoreSet> {
    if source_centers.is_empty() || target_centers.is_empty() {
        return Err(Error::Domain("scoring needs non-empty center sets".into()));
    }
    if ev.ent_s.len() != source_centers.rows() || ev.ent_t.len() != target_centers.rows() {
        return Err(Error::Shape(format!(
            "entropy vectors have lengths {}/{}, centers {}/{}",
            ev.ent_s.len(),
            ev.ent_t.len(),
            source_centers.rows(),
            target_centers.rows()
        )));
    }
    let d = targets.dims();
    if source_centers.dims() != d || target_centers.dims() != d {
        return Err(Error::Shape(format!(
            "targets have {d} dims, centers {}/{}",
            source_centers.dims(),
            target_centers.dims()
        )));
    }
    let scores = (0..targets.rows())
        .into_par_iter()
        .map(|x| {
            let z = targets.row(x);
            let known = || max_weighted(z, source_centers, |i| 1.0 - ev.ent_s[i]);
            let private = || max_weighted(z, target_centers, |j| ev.ent_t[j]);
            match variant {
                ScoreVariant::UniMs => known() - private(),
                ScoreVariant::MsS => max_weighted(z, source_centers, |_| 1.0),
                ScoreVariant::MsT => -max_weighted(z, target_centers, |_| 1.0),
                ScoreVariant::MsSWeighted => known(),
                ScoreVariant::MsTWeighted => -private(),
            }
        })
        .collect();
    Ok(ScoreSet { variant, scores })
}

/// Writes `sample_index,score,variant` rows.
pub fn write_scores_csv(path: &Path, set: &ScoreSet) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    writeln!(w, "sample_index,score,variant").map_err(io)?;
    for (i, s) in set.scores.iter().enumerate() {
        writeln!(w, "{i},{s},{}", set.variant).map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read_scores_csv(path: &Path) -> Result<ScoreSet> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let csv_err = |line: usize, msg: String| Error::Csv {
        path: path.to_path_buf(),
        msg: format!("line {line}: {msg}"),
    };
    let mut lines = BufReader::new(file).lines();
    match lines.next() {
        Some(Ok(h)) if h.trim() == "sample_index,score,variant" => {}
        Some(Err(e)) => return Err(Error::io(path, e)),
        _ => return Err(csv_err(1, "missing header".into())),
    }
    let mut variant = None;
    let mut scores = Vec::new();
    for (n, line) in lines.enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let lineno = n + 2;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.trim().split(',').collect();
        if fields.len() != 3 {
            return Err(csv_err(
                lineno,
                format!("expected 3 fields, got {}", fields.len()),
            ));
        }
        let idx: usize = fields[0]
            .parse()
            .map_err(|_| csv_err(lineno, format!("bad index `{}`", fields[0])))?;
        if idx != scores.len() {
            return Err(csv_err(lineno, format!("index {idx} out of order")));
        }
        let s: f64 = fields[1]
            .parse()
            .map_err(|_| csv_err(lineno, format!("bad score `{}`", fields[1])))?;
        if !s.is_finite() {
            return Err(csv_err(lineno, "score is not finite".into()));
        }
        let v: ScoreVariant = fields[2].parse()?;
        if *variant.get_or_insert(v) != v {
            return Err(csv_err(lineno, "mixed variants".into()));
        }
        scores.push(s);
    }
    Ok(ScoreSet {
        variant: variant.unwrap_or(ScoreVariant::UniMs),
        scores,
    })
}
