//! Motion-capture streams averaged into fixed-length partitions.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const PARTITIONS: usize = 200;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StreamRole {
    Face,
    Hand,
    Rotation,
}

impl StreamRole {
    pub const ALL: [StreamRole; 3] = [StreamRole::Face, StreamRole::Hand, StreamRole::Rotation];

    pub fn channels(self) -> usize {
        match self {
            StreamRole::Face => 165,
            StreamRole::Hand => 18,
            StreamRole::Rotation => 6,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            StreamRole::Face => "face",
            StreamRole::Hand => "hand",
            StreamRole::Rotation => "rotation",
        }
    }
}

pub const COMBINED_CHANNELS: usize = 165 + 18 + 6;

#[derive(Clone, Debug, PartialEq)]
pub struct MocapStream {
    role: StreamRole,
    timestamps: Vec<f64>,
    values: Tensor,
}

/// Result of [`partition_average`].
#[derive(Clone, Debug, PartialEq)]
pub struct Partitioned {
    pub tensor: Tensor,
    /// No sample fell inside the interval; the tensor is all zero.
    pub empty: bool,
}

impl MocapStream {
    pub fn new(role: StreamRole, timestamps: Vec<f64>, values: Tensor) -> Result<Self> {
        let [t, c] = values.dims2("mocap stream")?;
        if c != role.channels() {
            return Err(Error::Data(format!(
                "{} stream needs {} channels, got {c}",
                role.name(),
                role.channels()
            )));
        }
        if t != timestamps.len() {
            return Err(Error::shape("mocap stream", &[timestamps.len()], values.shape()));
        }
        if timestamps.windows(2).any(|w| w[1] <= w[0]) || timestamps.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data(format!(
                "{} stream timestamps not strictly increasing",
                role.name()
            )));
        }
        Ok(MocapStream {
            role,
            timestamps,
            values,
        })
    }

    pub fn role(&self) -> StreamRole {
        self.role
    }

    pub fn timestamps(&self) -> &[f64] {
        &self.timestamps
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    /// Reads a CSV whose first column is `time` and the rest channel values.
    pub fn read_csv(path: &Path, role: StreamRole) -> Result<Self> {
        let mut reader = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
        let headers = reader.headers().map_err(|e| csv_err(path, e))?.clone();
        if headers.get(0) != Some("time") {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: 1,
                msg: "first column must be `time`".into(),
            });
        }
        let mut times = Vec::new();
        let mut values = Vec::new();
        for (n, rec) in reader.records().enumerate() {
            let rec = rec.map_err(|e| csv_err(path, e))?;
            let parsed: Vec<f64> = rec
                .iter()
                .map(|f| f.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Parse {
                    path: path.to_path_buf(),
                    line: n + 2,
                    msg: e.to_string(),
                })?;
            times.push(parsed[0]);
            values.extend_from_slice(&parsed[1..]);
        }
        let c = headers.len() - 1;
        if times.is_empty() || c == 0 {
            return Err(Error::Data(format!("{}: no samples", path.display())));
        }
        let tensor = Tensor::new(vec![times.len(), c], values)?;
        MocapStream::new(role, times, tensor).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(fs::File::create(path).map_err(|e| Error::io(path, e))?);
        let c = self.role.channels();
        let mut line = String::from("time");
        for i in 0..c {
            line.push_str(&format!(",c{i}"));
        }
        line.push('\n');
        for (i, t) in self.timestamps.iter().enumerate() {
            line.push_str(&format!("{t}"));
            for v in self.values.row(i) {
                line.push_str(&format!(",{v:.6}"));
            }
            line.push('\n');
        }
        out.write_all(line.as_bytes()).map_err(|e| Error::io(path, e))?;
        out.flush().map_err(|e| Error::io(path, e))
    }
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Data(format!("{}: {e}", path.display()))
}

/// Index of the half-open sub-interval of `[start, finish)` containing `t`.
fn partition_of(t: f64, start: f64, finish: f64, parts: usize) -> Option<usize> {
    if t < start || t >= finish {
        return None;
    }
    let p = ((t - start) * parts as f64 / (finish - start)).floor() as usize;
    Some(p.min(parts - 1))
}

/// Splits `[start, finish)` into `parts` equal sub-intervals and averages the
/// samples in each. Empty sub-intervals copy the previous row (zero when no
/// earlier row exists).
pub fn partition_average_n(stream: &MocapStream, start: f64, finish: f64, parts: usize) -> Result<Partitioned> {
    if !(finish > start) {
        return Err(Error::Contract(format!("finish {finish} must exceed start {start}")));
    }
    let c = stream.role.channels();
    let mut sums = vec![0.0; parts * c];
    let mut counts = vec![0usize; parts];
    for (i, &t) in stream.timestamps.iter().enumerate() {
        if let Some(p) = partition_of(t, start, finish, parts) {
            counts[p] += 1;
            for (s, v) in sums[p * c..(p + 1) * c].iter_mut().zip(stream.values.row(i)) {
                *s += v;
            }
        }
    }
    let empty = counts.iter().all(|&n| n == 0);
    for p in 0..parts {
        if counts[p] > 0 {
            let n = counts[p] as f64;
            sums[p * c..(p + 1) * c].iter_mut().for_each(|s| *s /= n);
        } else if p > 0 {
            sums.copy_within((p - 1) * c..p * c, p * c);
        }
    }
    Ok(Partitioned {
        tensor: Tensor::new(vec![parts, c], sums)?,
        empty,
    })
}

pub fn partition_average(stream: &MocapStream, start: f64, finish: f64) -> Result<Partitioned> {
    partition_average_n(stream, start, finish, PARTITIONS)
}

/// Column-concatenates face, hand and rotation partitions into `(rows, 189)`.
pub fn combine(face: Option<&Tensor>, hand: Option<&Tensor>, rotation: Option<&Tensor>) -> Result<Tensor> {
    let parts = [
        (StreamRole::Face, face),
        (StreamRole::Hand, hand),
        (StreamRole::Rotation, rotation),
    ];
    let mut rows = None;
    for (role, t) in parts {
        let t = t.ok_or_else(|| Error::Data(format!("missing {} stream", role.name())))?;
        let [r, c] = t.dims2("combine")?;
        if c != role.channels() || rows.is_some_and(|n| n != r) {
            return Err(Error::shape("combine", &[rows.unwrap_or(r), role.channels()], t.shape()));
        }
        rows = Some(r);
    }
    let rows = rows.unwrap();
    let mut data = Vec::with_capacity(rows * COMBINED_CHANNELS);
    for r in 0..rows {
        for (_, t) in parts {
            data.extend_from_slice(t.unwrap().row(r));
        }
    }
    Tensor::new(vec![rows, COMBINED_CHANNELS], data)
}
