//! Binary artifact formats, all little-endian with a 4-byte magic prefix and
//! a trailing CRC32 over the payload (everything between magic and CRC):
//!
//! * `CAFE` — grouped source statistics: version, d, k, then per group
//!   (size, member indices, mean, eigenvalues, eigenvectors row-major).
//! * `CAFM` — model checkpoint: version, layer shape table, f64 parameters.
//! * `CAFD` — dataset container: n, dim, class count, f64 features row-major,
//!   u32 labels.
//!
//! Round-trips are bit-exact on the floating-point payload. Error reporting
//! distinguishes wrong magic (format), version mismatch, truncation, and
//! checksum failure.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::alignment::{GroupedSourceStats, SourceGroup};
use crate::bench::Dataset;
use crate::error::{CafeError, Result};
use crate::grouping::GroupPartition;
use crate::model::{Activation, Layer, ToyModel};

pub const STATS_MAGIC: &[u8; 4] = b"CAFE";
pub const MODEL_MAGIC: &[u8; 4] = b"CAFM";
pub const DATASET_MAGIC: &[u8; 4] = b"CAFD";
pub const FORMAT_VERSION: u32 = 1;

struct PayloadWriter {
    buf: Vec<u8>,
}

impl PayloadWriter {
    fn new() -> Self {
        PayloadWriter { buf: Vec::new() }
    }

    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn vector(&mut self, v: &DVector<f64>) {
        for &x in v.iter() {
            self.f64(x);
        }
    }

    fn matrix_row_major(&mut self, m: &DMatrix<f64>) {
        for r in 0..m.nrows() {
            for c in 0..m.ncols() {
                self.f64(m[(r, c)]);
            }
        }
    }

    /// magic ‖ payload ‖ crc32(payload)
    fn finish(self, magic: &[u8; 4], path: &Path) -> Result<()> {
        let crc = crc32fast::hash(&self.buf);
        let mut out = Vec::with_capacity(self.buf.len() + 8);
        out.extend_from_slice(magic);
        out.extend_from_slice(&self.buf);
        out.extend_from_slice(&crc.to_le_bytes());
        fs::write(path, out)?;
        Ok(())
    }
}

struct PayloadReader<'a> {
    payload: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> PayloadReader<'a> {
    /// Checks magic up front and CRC lazily: structural truncation is
    /// reported as `Truncated`, and the checksum is verified only after the
    /// payload parses, so corruption inside an intact structure surfaces as
    /// `ChecksumFailure`.
    fn open(bytes: &'a [u8], magic: &[u8; 4], what: &'static str) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(CafeError::Truncated(format!(
                "{what}: {} bytes is too short for magic and checksum",
                bytes.len()
            )));
        }
        if &bytes[..4] != magic {
            return Err(CafeError::FormatError(format!(
                "{what}: wrong magic bytes {:?}",
                &bytes[..4]
            )));
        }
        Ok(PayloadReader {
            payload: &bytes[4..bytes.len() - 4],
            pos: 0,
            what,
        })
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.payload.len() {
            return Err(CafeError::Truncated(format!(
                "{}: needed {n} bytes at offset {}, payload has {}",
                self.what,
                self.pos,
                self.payload.len()
            )));
        }
        let slice = &self.payload[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn version(&mut self) -> Result<()> {
        let found = self.u32()?;
        if found != FORMAT_VERSION {
            return Err(CafeError::VersionMismatch {
                found,
                expected: FORMAT_VERSION,
            });
        }
        Ok(())
    }

    fn vector(&mut self, len: usize) -> Result<DVector<f64>> {
        let mut v = DVector::zeros(len);
        for i in 0..len {
            v[i] = self.f64()?;
        }
        Ok(v)
    }

    fn matrix_row_major(&mut self, rows: usize, cols: usize) -> Result<DMatrix<f64>> {
        let mut m = DMatrix::zeros(rows, cols);
        for r in 0..rows {
            for c in 0..cols {
                m[(r, c)] = self.f64()?;
            }
        }
        Ok(m)
    }

    fn finish(self, bytes: &'a [u8]) -> Result<()> {
        if self.pos != self.payload.len() {
            return Err(CafeError::FormatError(format!(
                "{}: {} trailing payload bytes",
                self.what,
                self.payload.len() - self.pos
            )));
        }
        let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
        let computed = crc32fast::hash(self.payload);
        if stored != computed {
            return Err(CafeError::ChecksumFailure { stored, computed });
        }
        Ok(())
    }
}

pub fn save_stats(stats: &GroupedSourceStats, path: &Path) -> Result<()> {
    let mut w = PayloadWriter::new();
    w.u32(FORMAT_VERSION);
    w.u32(stats.dim() as u32);
    w.u32(stats.k() as u32);
    for (members, group) in stats.partition().groups().iter().zip(stats.groups()) {
        w.u32(members.len() as u32);
        for &i in members {
            w.u32(i as u32);
        }
        w.vector(&group.mean);
        w.vector(&group.eigenvalues);
        w.matrix_row_major(&group.eigenvectors);
    }
    w.finish(STATS_MAGIC, path)
}

pub fn load_stats(path: &Path) -> Result<GroupedSourceStats> {
    let bytes = fs::read(path)?;
    let mut r = PayloadReader::open(&bytes, STATS_MAGIC, "stats file")?;
    r.version()?;
    let d = r.u32()? as usize;
    let k = r.u32()? as usize;
    if d == 0 || k == 0 || k > d {
        return Err(CafeError::FormatError(format!(
            "stats file: invalid dimensions d={d}, k={k}"
        )));
    }
    let mut members_by_group = Vec::with_capacity(k);
    let mut groups = Vec::with_capacity(k);
    for _ in 0..k {
        let size = r.u32()? as usize;
        if size == 0 || size > d {
            return Err(CafeError::FormatError(format!(
                "stats file: group size {size} out of range"
            )));
        }
        let mut members = Vec::with_capacity(size);
        for _ in 0..size {
            let idx = r.u32()? as usize;
            if idx >= d {
                return Err(CafeError::FormatError(format!(
                    "stats file: member index {idx} out of range for d={d}"
                )));
            }
            members.push(idx);
        }
        let mean = r.vector(size)?;
        let eigenvalues = r.vector(size)?;
        let eigenvectors = r.matrix_row_major(size, size)?;
        members_by_group.push(members);
        groups.push(SourceGroup {
            mean,
            eigenvalues,
            eigenvectors,
        });
    }
    r.finish(&bytes)?;

    let partition = GroupPartition::from_groups(members_by_group.clone())
        .map_err(|e| CafeError::FormatError(format!("stats file: {e}")))?;
    // canonical ordering must match the stored group order, otherwise the
    // per-group payloads would be misaligned
    if partition
        .groups()
        .iter()
        .zip(&members_by_group)
        .any(|(a, b)| a != b)
    {
        return Err(CafeError::FormatError(
            "stats file: groups are not in canonical order".into(),
        ));
    }
    // the clipping epsilon is not part of the format; the smallest stored
    // eigenvalue is the tightest floor consistent with the payload
    let epsilon = groups
        .iter()
        .flat_map(|g| g.eigenvalues.iter().copied())
        .fold(f64::INFINITY, f64::min)
        .max(0.0);
    GroupedSourceStats::new(partition, groups, epsilon)
        .map_err(|e| CafeError::FormatError(format!("stats file: {e}")))
}

fn activation_tag(a: Activation) -> u32 {
    match a {
        Activation::Relu => 0,
        Activation::Identity => 1,
    }
}

fn activation_from_tag(tag: u32) -> Result<Activation> {
    match tag {
        0 => Ok(Activation::Relu),
        1 => Ok(Activation::Identity),
        other => Err(CafeError::FormatError(format!(
            "model file: unknown activation tag {other}"
        ))),
    }
}

pub fn save_model(model: &ToyModel, path: &Path) -> Result<()> {
    let mut w = PayloadWriter::new();
    w.u32(FORMAT_VERSION);
    w.u32(model.extractor.len() as u32);
    for layer in &model.extractor {
        w.u32(layer.weight.nrows() as u32);
        w.u32(layer.weight.ncols() as u32);
        w.u32(activation_tag(layer.activation));
    }
    w.u32(model.class_count() as u32);
    for layer in &model.extractor {
        w.matrix_row_major(&layer.weight);
        w.vector(&layer.bias);
    }
    w.matrix_row_major(&model.classifier_weight);
    w.vector(&model.classifier_bias);
    w.finish(MODEL_MAGIC, path)
}

pub fn load_model(path: &Path) -> Result<ToyModel> {
    let bytes = fs::read(path)?;
    let mut r = PayloadReader::open(&bytes, MODEL_MAGIC, "model file")?;
    r.version()?;
    let n_layers = r.u32()? as usize;
    if n_layers == 0 || n_layers > 64 {
        return Err(CafeError::FormatError(format!(
            "model file: implausible layer count {n_layers}"
        )));
    }
    let mut shapes = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        let out = r.u32()? as usize;
        let inp = r.u32()? as usize;
        let act = activation_from_tag(r.u32()?)?;
        shapes.push((out, inp, act));
    }
    let classes = r.u32()? as usize;
    let mut extractor = Vec::with_capacity(n_layers);
    for &(out, inp, act) in &shapes {
        let weight = r.matrix_row_major(out, inp)?;
        let bias = r.vector(out)?;
        extractor.push(Layer {
            weight,
            bias,
            activation: act,
        });
    }
    let d = shapes.last().unwrap().0;
    let classifier_weight = r.matrix_row_major(classes, d)?;
    let classifier_bias = r.vector(classes)?;
    r.finish(&bytes)?;
    ToyModel::new(extractor, classifier_weight, classifier_bias)
        .map_err(|e| CafeError::FormatError(format!("model file: {e}")))
}

pub fn save_dataset(data: &Dataset, path: &Path) -> Result<()> {
    let mut w = PayloadWriter::new();
    w.u32(data.inputs.nrows() as u32);
    w.u32(data.inputs.ncols() as u32);
    w.u32(data.class_count as u32);
    w.matrix_row_major(&data.inputs);
    for &label in &data.labels {
        w.u32(label);
    }
    w.finish(DATASET_MAGIC, path)
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let bytes = fs::read(path)?;
    let mut r = PayloadReader::open(&bytes, DATASET_MAGIC, "dataset file")?;
    let n = r.u32()? as usize;
    let dim = r.u32()? as usize;
    let classes = r.u32()? as usize;
    if n == 0 || dim == 0 || classes == 0 {
        return Err(CafeError::FormatError(format!(
            "dataset file: invalid header n={n}, dim={dim}, classes={classes}"
        )));
    }
    let inputs = r.matrix_row_major(n, dim)?;
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let label = r.u32()?;
        if label as usize >= classes {
            return Err(CafeError::FormatError(format!(
                "dataset file: label {label} out of range for {classes} classes"
            )));
        }
        labels.push(label);
    }
    r.finish(&bytes)?;
    Dataset::new(inputs, labels, classes)
}
