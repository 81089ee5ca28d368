//! Named parameter storage and the checkpoint file format.
//!
//! A checkpoint is a UTF-8 CSV file with header `name,rows,cols,index,value`
//! and one line per tensor entry in row-major order. Values are written with
//! the shortest decimal representation that parses back to the same float, so
//! save/load is exact.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use thiserror::Error;

use super::Tensor;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

/// Learnable tensors with their gradient slots.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
    grads: Vec<Tensor<T>>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { names: Vec::new(), values: Vec::new(), grads: Vec::new() }
    }

    /// Registers a parameter. Panics on duplicate names.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.grads.push(Tensor::zeros(value.rows(), value.cols()));
        self.values.push(value);
        self.names.push(name);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total number of scalar entries.
    pub fn n_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn grad(&self, id: ParamId) -> &Tensor<T> {
        &self.grads[id.0]
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.grads[id.0]
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.grads {
            g.data_mut().iter_mut().for_each(|v| *v = T::zero());
        }
    }

    /// Copies values from `other`, which must have the same layout.
    pub fn copy_values_from(&mut self, other: &ParamStore<T>) {
        assert_eq!(self.names, other.names, "parameter layouts differ");
        self.values.clone_from(&other.values);
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint line {line}: {msg}")]
    Format { line: u64, msg: String },
}

/// Writes named tensors in the checkpoint CSV format.
pub fn write_checkpoint<'a, T: Scalar, W: Write>(
    out: W,
    entries: impl IntoIterator<Item = (&'a str, &'a Tensor<T>)>,
) -> Result<(), CheckpointError> {
    let mut w = csv::Writer::from_writer(out);
    let io = |e: csv::Error| CheckpointError::Io(std::io::Error::other(e.to_string()));
    w.write_record(["name", "rows", "cols", "index", "value"]).map_err(io)?;
    for (name, t) in entries {
        let (r, c) = t.shape();
        for (i, v) in t.data().iter().enumerate() {
            w.write_record([name.to_string(), r.to_string(), c.to_string(), i.to_string(), v.to_string()])
                .map_err(io)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a checkpoint back into `(name, tensor)` pairs in file order.
pub fn read_checkpoint<T: Scalar, R: Read>(input: R) -> Result<Vec<(String, Tensor<T>)>, CheckpointError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    let header = rdr
        .headers()
        .map_err(|e| CheckpointError::Format { line: 1, msg: e.to_string() })?
        .clone();
    if header.iter().collect::<Vec<_>>() != ["name", "rows", "cols", "index", "value"] {
        return Err(CheckpointError::Format { line: 1, msg: "bad header".into() });
    }
    let mut order: Vec<String> = Vec::new();
    let mut partial: BTreeMap<String, (usize, usize, Vec<Option<T>>)> = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| CheckpointError::Format {
            line: e.position().map_or(0, |p| p.line()),
            msg: e.to_string(),
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        let bad = |msg: &str| CheckpointError::Format { line, msg: msg.to_string() };
        let name = rec[0].to_string();
        let rows: usize = rec[1].parse().map_err(|_| bad("rows"))?;
        let cols: usize = rec[2].parse().map_err(|_| bad("cols"))?;
        let idx: usize = rec[3].parse().map_err(|_| bad("index"))?;
        let val: T = rec[4].parse().map_err(|_| bad("value"))?;
        let entry = partial.entry(name.clone()).or_insert_with(|| {
            order.push(name.clone());
            (rows, cols, vec![None; rows * cols])
        });
        if (entry.0, entry.1) != (rows, cols) {
            return Err(bad("inconsistent shape"));
        }
        let slot = entry.2.get_mut(idx).ok_or_else(|| bad("index out of range"))?;
        if slot.replace(val).is_some() {
            return Err(bad("duplicate index"));
        }
    }
    order
        .into_iter()
        .map(|name| {
            let (r, c, vals) = partial.remove(&name).expect("recorded");
            let data: Option<Vec<T>> = vals.into_iter().collect();
            let data = data.ok_or_else(|| CheckpointError::Format { line: 0, msg: format!("{name}: missing entries") })?;
            let t = Tensor::from_vec(r, c, data).expect("shape checked");
            Ok((name, t))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let mut store = ParamStore::<f64>::new();
        store.add("a", Tensor::from_rows(&[&[0.1, -1.0 / 3.0], &[1e-300, 12345.678]]));
        store.add("b", Tensor::scalar(std::f64::consts::PI));
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, store.entries()).unwrap();
        let back: Vec<(String, Tensor<f64>)> = read_checkpoint(&buf[..]).unwrap();
        assert_eq!(back.len(), 2);
        for ((n, t), (n2, t2)) in back.iter().zip(store.entries()) {
            assert_eq!(n, n2);
            assert_eq!(t, t2);
        }
    }

    #[test]
    fn missing_entries_are_rejected() {
        let text = "name,rows,cols,index,value\nw,1,2,0,1.5\n";
        assert!(read_checkpoint::<f64, _>(text.as_bytes()).is_err());
    }

    #[test]
    #[should_panic(expected = "duplicate parameter")]
    fn duplicate_names_panic() {
        let mut s = ParamStore::<f32>::new();
        s.add("x", Tensor::zeros(1, 1));
        s.add("x", Tensor::zeros(1, 1));
    }
}
