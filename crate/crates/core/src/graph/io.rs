//! CSV directory format for tribe-style graphs.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super::{violation, GlobalGraph, GraphError, NodeKind, Tribe, TribeStyleGraph};

pub const GLOBAL_NODES_FILE: &str = "global_nodes.csv";
pub const GLOBAL_EDGES_FILE: &str = "global_edges.csv";
pub const ATTRS_FILE: &str = "attrs.csv";
pub const TRIBE_NODES_FILE: &str = "tribe_nodes.csv";
pub const TRIBE_EDGES_FILE: &str = "tribe_edges.csv";

struct Table {
    file: String,
    header: Vec<String>,
    rows: Vec<(u64, Vec<String>)>,
}

impl Table {
    fn read(dir: &Path, file: &str) -> Result<Table, GraphError> {
        let path = dir.join(file);
        if !path.is_file() {
            return Err(GraphError::MissingFile(path));
        }
        let parse_err = |line: u64, msg: String| GraphError::Parse { file: file.to_string(), line, msg };
        let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(&path).map_err(|e| {
            parse_err(0, e.to_string())
        })?;
        let header = reader
            .headers()
            .map_err(|e| parse_err(1, e.to_string()))?
            .iter()
            .map(str::to_string)
            .collect();
        let mut rows = Vec::new();
        for rec in reader.records() {
            let rec = rec.map_err(|e| {
                let line = e.position().map_or(0, |p| p.line());
                parse_err(line, e.to_string())
            })?;
            let line = rec.position().map_or(0, |p| p.line());
            rows.push((line, rec.iter().map(str::to_string).collect()));
        }
        Ok(Table { file: file.to_string(), header, rows })
    }

    fn expect_header(&self, expected: &[&str]) -> Result<(), GraphError> {
        if self.header.len() != expected.len() || self.header.iter().zip(expected).any(|(a, b)| a != b) {
            return Err(GraphError::Parse {
                file: self.file.clone(),
                line: 1,
                msg: format!("expected header {}, found {}", expected.join(","), self.header.join(",")),
            });
        }
        Ok(())
    }

    fn field<T: std::str::FromStr>(&self, line: u64, row: &[String], col: usize) -> Result<T, GraphError> {
        row[col].parse().map_err(|_| GraphError::Parse {
            file: self.file.clone(),
            line,
            msg: format!("cannot parse column {} value {:?}", self.header[col], row[col]),
        })
    }
}

/// Reads and validates a graph directory.
pub fn load_graph(dir: impl AsRef<Path>) -> Result<TribeStyleGraph, GraphError> {
    let dir = dir.as_ref();
    let nodes = Table::read(dir, GLOBAL_NODES_FILE)?;
    let gedges = Table::read(dir, GLOBAL_EDGES_FILE)?;
    let attrs = Table::read(dir, ATTRS_FILE)?;
    let tnodes = Table::read(dir, TRIBE_NODES_FILE)?;
    let tedges = Table::read(dir, TRIBE_EDGES_FILE)?;

    nodes.expect_header(&["central_id", "label"])?;
    let n = nodes.rows.len();
    let mut labels: Vec<Option<Option<bool>>> = vec![None; n];
    for (line, row) in &nodes.rows {
        let id: usize = nodes.field(*line, row, 0)?;
        let label: i64 = nodes.field(*line, row, 1)?;
        if id >= n {
            return Err(violation(format!("{GLOBAL_NODES_FILE} line {line}: central_id {id} out of range")));
        }
        let label = match label {
            -1 => None,
            0 => Some(false),
            1 => Some(true),
            other => return Err(violation(format!("{GLOBAL_NODES_FILE} line {line}: label {other} not in {{-1,0,1}}"))),
        };
        if labels[id].replace(label).is_some() {
            return Err(violation(format!("{GLOBAL_NODES_FILE} line {line}: duplicate central_id {id}")));
        }
    }
    let labels: Vec<Option<bool>> = labels.into_iter().map(|l| l.expect("ids 0..n all present")).collect();

    gedges.expect_header(&["src", "dst"])?;
    let mut edges = Vec::with_capacity(gedges.rows.len());
    for (line, row) in &gedges.rows {
        edges.push((gedges.field(*line, row, 0)?, gedges.field(*line, row, 1)?));
    }

    let dim = attrs.header.len().saturating_sub(1);
    let mut expected = vec!["central_id".to_string()];
    expected.extend((0..dim).map(|j| format!("f{j}")));
    attrs.expect_header(&expected.iter().map(String::as_str).collect::<Vec<_>>())?;
    let mut attr_rows: Vec<Option<Vec<f64>>> = vec![None; n];
    for (line, row) in &attrs.rows {
        let id: usize = attrs.field(*line, row, 0)?;
        if id >= n {
            return Err(violation(format!("{ATTRS_FILE} line {line}: central_id {id} out of range")));
        }
        let vals = (1..=dim).map(|c| attrs.field(*line, row, c)).collect::<Result<Vec<f64>, _>>()?;
        if attr_rows[id].replace(vals).is_some() {
            return Err(violation(format!("{ATTRS_FILE} line {line}: duplicate central_id {id}")));
        }
    }
    let mut attr_data = Vec::with_capacity(n * dim);
    for (id, row) in attr_rows.into_iter().enumerate() {
        let row = row.ok_or_else(|| violation(format!("{ATTRS_FILE}: no attributes for central_id {id}")))?;
        attr_data.extend(row);
    }
    let global = GlobalGraph::new(n, edges, dim, attr_data, labels)?;

    tnodes.expect_header(&["tribe_id", "local_id", "kind", "is_central"])?;
    let mut tribe_nodes: BTreeMap<usize, BTreeMap<usize, (NodeKind, bool)>> = BTreeMap::new();
    for (line, row) in &tnodes.rows {
        let tid: usize = tnodes.field(*line, row, 0)?;
        let lid: usize = tnodes.field(*line, row, 1)?;
        let code: usize = tnodes.field(*line, row, 2)?;
        let central: u8 = tnodes.field(*line, row, 3)?;
        let kind = NodeKind::from_code(code)
            .ok_or_else(|| violation(format!("{TRIBE_NODES_FILE} line {line}: unknown kind {code}")))?;
        if central > 1 {
            return Err(violation(format!("{TRIBE_NODES_FILE} line {line}: is_central must be 0 or 1")));
        }
        if tribe_nodes.entry(tid).or_default().insert(lid, (kind, central == 1)).is_some() {
            return Err(violation(format!("{TRIBE_NODES_FILE} line {line}: duplicate node {lid} in tribe {tid}")));
        }
    }

    tedges.expect_header(&["tribe_id", "src_local", "dst_local"])?;
    let mut tribe_edges: BTreeMap<usize, Vec<(usize, usize)>> = BTreeMap::new();
    for (line, row) in &tedges.rows {
        let tid: usize = tedges.field(*line, row, 0)?;
        let s: usize = tedges.field(*line, row, 1)?;
        let d: usize = tedges.field(*line, row, 2)?;
        if !tribe_nodes.contains_key(&tid) {
            return Err(violation(format!("{TRIBE_EDGES_FILE} line {line}: unknown tribe {tid}")));
        }
        tribe_edges.entry(tid).or_default().push((s, d));
    }

    let mut tribes = Vec::with_capacity(n);
    for tid in 0..n {
        let nodes = tribe_nodes
            .remove(&tid)
            .ok_or_else(|| violation(format!("{TRIBE_NODES_FILE}: no nodes for tribe {tid}")))?;
        if nodes.keys().enumerate().any(|(i, &lid)| i != lid) {
            return Err(violation(format!("tribe {tid}: local ids are not 0..{}", nodes.len())));
        }
        let centrals: Vec<usize> = nodes.iter().filter(|(_, (_, c))| *c).map(|(&l, _)| l).collect();
        if centrals.len() != 1 {
            return Err(violation(format!("tribe {tid}: {} nodes flagged central", centrals.len())));
        }
        let kinds = nodes.values().map(|&(k, _)| k).collect();
        let edges = tribe_edges.remove(&tid).unwrap_or_default();
        tribes.push(Tribe::new(tid, kinds, edges, centrals[0])?);
    }
    if let Some(tid) = tribe_nodes.keys().next() {
        return Err(violation(format!("tribe {tid} has no matching central node")));
    }
    TribeStyleGraph::new(global, tribes)
}

fn writer(dir: &Path, file: &str) -> Result<csv::Writer<fs::File>, GraphError> {
    let f = fs::File::create(dir.join(file))?;
    Ok(csv::Writer::from_writer(f))
}

fn csv_io(e: csv::Error) -> GraphError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => GraphError::Io(io),
        other => GraphError::Io(std::io::Error::other(format!("{other:?}"))),
    }
}

/// Writes the graph in the directory format read by [`load_graph`].
pub fn save_graph(g: &TribeStyleGraph, dir: impl AsRef<Path>) -> Result<(), GraphError> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let global = g.global();

    let mut w = writer(dir, GLOBAL_NODES_FILE)?;
    w.write_record(["central_id", "label"]).map_err(csv_io)?;
    for (i, l) in global.labels().iter().enumerate() {
        let label = match l {
            None => -1,
            Some(false) => 0,
            Some(true) => 1,
        };
        w.write_record([i.to_string(), label.to_string()]).map_err(csv_io)?;
    }
    w.flush()?;

    let mut w = writer(dir, GLOBAL_EDGES_FILE)?;
    w.write_record(["src", "dst"]).map_err(csv_io)?;
    for (a, b) in global.edges() {
        w.write_record([a.to_string(), b.to_string()]).map_err(csv_io)?;
    }
    w.flush()?;

    let mut w = writer(dir, ATTRS_FILE)?;
    let mut header = vec!["central_id".to_string()];
    header.extend((0..global.attr_dim()).map(|j| format!("f{j}")));
    w.write_record(&header).map_err(csv_io)?;
    for i in 0..global.n_central() {
        let mut rec = vec![i.to_string()];
        // Display for f64 prints the shortest string that parses back exactly.
        rec.extend(global.attr_row(i).iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(csv_io)?;
    }
    w.flush()?;

    let mut w = writer(dir, TRIBE_NODES_FILE)?;
    w.write_record(["tribe_id", "local_id", "kind", "is_central"]).map_err(csv_io)?;
    for t in g.tribes() {
        for (lid, kind) in t.kinds().iter().enumerate() {
            let central = u8::from(lid == t.central());
            w.write_record([t.tribe_id().to_string(), lid.to_string(), kind.code().to_string(), central.to_string()])
                .map_err(csv_io)?;
        }
    }
    w.flush()?;

    let mut w = writer(dir, TRIBE_EDGES_FILE)?;
    w.write_record(["tribe_id", "src_local", "dst_local"]).map_err(csv_io)?;
    for t in g.tribes() {
        for (s, d) in t.edges() {
            w.write_record([t.tribe_id().to_string(), s.to_string(), d.to_string()]).map_err(csv_io)?;
        }
    }
    w.flush()?;
    Ok(())
}
