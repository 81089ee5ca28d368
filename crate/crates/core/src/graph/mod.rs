//! Tribe-style graph data model.
//!
//! A [`TribeStyleGraph`] is a global graph over central (listed) companies
//! plus one [`Tribe`] per central node. Tribes keep their own local node ids;
//! there is no merged id space.

mod io;

use std::collections::{BTreeSet, VecDeque};
use std::path::PathBuf;

use thiserror::Error;

pub use io::{load_graph, save_graph, ATTRS_FILE, GLOBAL_EDGES_FILE, GLOBAL_NODES_FILE, TRIBE_EDGES_FILE, TRIBE_NODES_FILE};

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("missing file {0}")]
    MissingFile(PathBuf),
    #[error("parse error in {file} line {line}: {msg}")]
    Parse { file: String, line: u64, msg: String },
    #[error("invariant violation: {0}")]
    InvariantViolation(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

fn violation(msg: impl Into<String>) -> GraphError {
    GraphError::InvariantViolation(msg.into())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum NodeKind {
    ListedCompany,
    UnlistedCompany,
    Individual,
}

impl NodeKind {
    pub const COUNT: usize = 3;

    /// Code used in `tribe_nodes.csv` and as embedding row.
    pub fn code(self) -> usize {
        match self {
            NodeKind::ListedCompany => 0,
            NodeKind::UnlistedCompany => 1,
            NodeKind::Individual => 2,
        }
    }

    pub fn from_code(code: usize) -> Option<Self> {
        match code {
            0 => Some(NodeKind::ListedCompany),
            1 => Some(NodeKind::UnlistedCompany),
            2 => Some(NodeKind::Individual),
            _ => None,
        }
    }
}

/// A local directed investment graph around one listed company.
///
/// Edges point investor -> investee and use local node ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tribe {
    tribe_id: usize,
    kinds: Vec<NodeKind>,
    edges: Vec<(usize, usize)>,
    central: usize,
}

impl Tribe {
    /// Builds a tribe and checks every structural invariant.
    pub fn new(
        tribe_id: usize,
        kinds: Vec<NodeKind>,
        edges: Vec<(usize, usize)>,
        central: usize,
    ) -> Result<Self, GraphError> {
        let tribe = Tribe { tribe_id, kinds, edges, central };
        tribe.validate()?;
        Ok(tribe)
    }

    fn validate(&self) -> Result<(), GraphError> {
        let n = self.kinds.len();
        let id = self.tribe_id;
        if n == 0 {
            return Err(violation(format!("tribe {id} has no nodes")));
        }
        if self.central >= n {
            return Err(violation(format!("tribe {id}: central node {} out of range", self.central)));
        }
        let listed: Vec<usize> = (0..n).filter(|&v| self.kinds[v] == NodeKind::ListedCompany).collect();
        if listed.len() != 1 {
            return Err(violation(format!(
                "tribe {id}: expected exactly one listed company, found {}",
                listed.len()
            )));
        }
        if listed[0] != self.central {
            return Err(violation(format!(
                "tribe {id}: listed company {} is not the central node {}",
                listed[0], self.central
            )));
        }
        let mut seen = BTreeSet::new();
        for &(s, d) in &self.edges {
            if s >= n || d >= n {
                return Err(violation(format!("tribe {id}: edge ({s},{d}) out of range")));
            }
            if s == d {
                return Err(violation(format!("tribe {id}: self-loop on node {s}")));
            }
            if !seen.insert((s, d)) {
                return Err(violation(format!("tribe {id}: duplicate edge ({s},{d})")));
            }
        }
        let view = self.undirected_view();
        let dist = view.bfs_distances(self.central);
        if let Some(v) = dist.iter().position(Option::is_none) {
            return Err(violation(format!(
                "tribe {id}: node {v} is not connected to the central node"
            )));
        }
        Ok(())
    }

    pub fn tribe_id(&self) -> usize {
        self.tribe_id
    }

    pub fn len(&self) -> usize {
        self.kinds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kinds.is_empty()
    }

    pub fn kinds(&self) -> &[NodeKind] {
        &self.kinds
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn central(&self) -> usize {
        self.central
    }

    /// Symmetric neighbour lists; `(a,b)` and `(b,a)` collapse to one edge.
    pub fn undirected_view(&self) -> UndirectedView {
        UndirectedView::from_edges(self.len(), self.edges.iter().copied())
    }

    /// Relabels nodes so that old node `v` becomes `perm[v]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Tribe, GraphError> {
        let n = self.len();
        if perm.len() != n {
            return Err(violation("permutation length differs from tribe size"));
        }
        let mut kinds = vec![NodeKind::Individual; n];
        for (old, &new) in perm.iter().enumerate() {
            kinds[new] = self.kinds[old];
        }
        let edges = self.edges.iter().map(|&(s, d)| (perm[s], perm[d])).collect();
        Tribe::new(self.tribe_id, kinds, edges, perm[self.central])
    }
}

/// Undirected adjacency lists with sorted, deduplicated neighbours.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UndirectedView {
    neighbors: Vec<Vec<usize>>,
}

impl UndirectedView {
    pub fn from_edges(n: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Self {
        let mut neighbors = vec![Vec::new(); n];
        for (a, b) in edges {
            if a == b {
                continue;
            }
            neighbors[a].push(b);
            neighbors[b].push(a);
        }
        for list in &mut neighbors {
            list.sort_unstable();
            list.dedup();
        }
        UndirectedView { neighbors }
    }

    pub fn len(&self) -> usize {
        self.neighbors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.neighbors.is_empty()
    }

    pub fn neighbors(&self, v: usize) -> &[usize] {
        &self.neighbors[v]
    }

    pub fn degree(&self, v: usize) -> usize {
        self.neighbors[v].len()
    }

    pub fn n_edges(&self) -> usize {
        self.neighbors.iter().map(Vec::len).sum::<usize>() / 2
    }

    /// Each undirected edge once, as `(a, b)` with `a < b`.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.neighbors
            .iter()
            .enumerate()
            .flat_map(|(a, ns)| ns.iter().filter(move |&&b| a < b).map(move |&b| (a, b)))
    }

    pub fn has_edge(&self, a: usize, b: usize) -> bool {
        self.neighbors[a].binary_search(&b).is_ok()
    }

    /// Hop distances from `source`; `None` for unreachable nodes.
    pub fn bfs_distances(&self, source: usize) -> Vec<Option<usize>> {
        let mut dist = vec![None; self.len()];
        let mut queue = VecDeque::new();
        dist[source] = Some(0);
        queue.push_back(source);
        while let Some(v) = queue.pop_front() {
            let dv = dist[v].unwrap_or(0);
            for &u in &self.neighbors[v] {
                if dist[u].is_none() {
                    dist[u] = Some(dv + 1);
                    queue.push_back(u);
                }
            }
        }
        dist
    }
}

/// News co-occurrence graph over central nodes, with their attributes and labels.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalGraph {
    n_central: usize,
    edges: Vec<(usize, usize)>,
    attr_dim: usize,
    attrs: Vec<f64>,
    labels: Vec<Option<bool>>,
}

impl GlobalGraph {
    /// `attrs` is row-major `n_central x attr_dim`. Edges are normalized to
    /// `a < b`, sorted and deduplicated.
    pub fn new(
        n_central: usize,
        edges: Vec<(usize, usize)>,
        attr_dim: usize,
        attrs: Vec<f64>,
        labels: Vec<Option<bool>>,
    ) -> Result<Self, GraphError> {
        if attrs.len() != n_central * attr_dim {
            return Err(violation(format!(
                "attribute matrix has {} values, expected {} x {}",
                attrs.len(),
                n_central,
                attr_dim
            )));
        }
        if let Some(i) = attrs.iter().position(|v| !v.is_finite()) {
            return Err(violation(format!(
                "non-finite attribute at central node {}",
                i / attr_dim.max(1)
            )));
        }
        if labels.len() != n_central {
            return Err(violation(format!(
                "{} labels for {} central nodes",
                labels.len(),
                n_central
            )));
        }
        let mut norm = Vec::with_capacity(edges.len());
        for (a, b) in edges {
            if a >= n_central || b >= n_central {
                return Err(violation(format!("global edge ({a},{b}) out of range")));
            }
            if a == b {
                return Err(violation(format!("global self-loop on node {a}")));
            }
            norm.push((a.min(b), a.max(b)));
        }
        norm.sort_unstable();
        norm.dedup();
        Ok(GlobalGraph { n_central, edges: norm, attr_dim, attrs, labels })
    }

    pub fn n_central(&self) -> usize {
        self.n_central
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn attr_dim(&self) -> usize {
        self.attr_dim
    }

    /// Row-major attribute matrix.
    pub fn attrs(&self) -> &[f64] {
        &self.attrs
    }

    pub fn attr_row(&self, i: usize) -> &[f64] {
        &self.attrs[i * self.attr_dim..(i + 1) * self.attr_dim]
    }

    pub fn labels(&self) -> &[Option<bool>] {
        &self.labels
    }

    pub fn undirected_view(&self) -> UndirectedView {
        UndirectedView::from_edges(self.n_central, self.edges.iter().copied())
    }

    pub fn labeled_nodes(&self) -> Vec<usize> {
        (0..self.n_central).filter(|&i| self.labels[i].is_some()).collect()
    }
}

/// Global graph plus one tribe per central node (`tribes[i]` belongs to node `i`).
#[derive(Debug, Clone, PartialEq)]
pub struct TribeStyleGraph {
    global: GlobalGraph,
    tribes: Vec<Tribe>,
}

impl TribeStyleGraph {
    pub fn new(global: GlobalGraph, tribes: Vec<Tribe>) -> Result<Self, GraphError> {
        if tribes.len() != global.n_central() {
            return Err(violation(format!(
                "{} tribes for {} central nodes",
                tribes.len(),
                global.n_central()
            )));
        }
        if let Some((i, t)) = tribes.iter().enumerate().find(|(i, t)| t.tribe_id() != *i) {
            return Err(violation(format!("tribe at position {i} has id {}", t.tribe_id())));
        }
        Ok(TribeStyleGraph { global, tribes })
    }

    pub fn global(&self) -> &GlobalGraph {
        &self.global
    }

    pub fn tribes(&self) -> &[Tribe] {
        &self.tribes
    }

    pub fn n_central(&self) -> usize {
        self.global.n_central()
    }

    /// Keeps the first `n` central nodes, their tribes and the induced global edges.
    pub fn truncated(&self, n: usize) -> Result<Self, GraphError> {
        let n = n.min(self.n_central());
        let g = &self.global;
        let edges = g.edges().iter().copied().filter(|&(a, b)| a < n && b < n).collect();
        let global = GlobalGraph::new(
            n,
            edges,
            g.attr_dim(),
            g.attrs()[..n * g.attr_dim()].to_vec(),
            g.labels()[..n].to_vec(),
        )?;
        TribeStyleGraph::new(global, self.tribes[..n].to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use NodeKind::*;

    #[test]
    fn single_node_tribe_is_valid() {
        let t = Tribe::new(0, vec![ListedCompany], vec![], 0).unwrap();
        assert_eq!(t.len(), 1);
        assert_eq!(t.undirected_view().n_edges(), 0);
    }

    #[test]
    fn rejects_two_listed_nodes() {
        let err = Tribe::new(0, vec![ListedCompany, ListedCompany], vec![(1, 0)], 0).unwrap_err();
        assert!(matches!(err, GraphError::InvariantViolation(_)));
    }

    #[test]
    fn rejects_self_loop_duplicate_and_disconnected() {
        let kinds = vec![ListedCompany, Individual, Individual];
        assert!(Tribe::new(0, kinds.clone(), vec![(1, 0), (2, 2)], 0).is_err());
        assert!(Tribe::new(0, kinds.clone(), vec![(1, 0), (2, 0), (1, 0)], 0).is_err());
        assert!(Tribe::new(0, kinds.clone(), vec![(1, 0)], 0).is_err());
        assert!(Tribe::new(0, kinds, vec![(1, 0), (2, 1)], 0).is_ok());
    }

    #[test]
    fn central_must_be_listed() {
        let err = Tribe::new(0, vec![UnlistedCompany, ListedCompany], vec![(0, 1)], 0).unwrap_err();
        assert!(err.to_string().contains("not the central"));
    }

    #[test]
    fn undirected_view_single_edge() {
        let t = Tribe::new(0, vec![ListedCompany, Individual], vec![(0, 1)], 0).unwrap();
        let v = t.undirected_view();
        assert_eq!(v.neighbors(0), &[1]);
        assert_eq!(v.neighbors(1), &[0]);
    }

    #[test]
    fn undirected_view_merges_reciprocal_edges() {
        let t = Tribe::new(0, vec![ListedCompany, UnlistedCompany], vec![(0, 1), (1, 0)], 0).unwrap();
        let v = t.undirected_view();
        assert_eq!(v.n_edges(), 1);
        assert_eq!(v.edges().collect::<Vec<_>>(), vec![(0, 1)]);
    }

    #[test]
    fn global_edges_are_normalized() {
        let g = GlobalGraph::new(3, vec![(2, 0), (0, 2), (1, 2)], 1, vec![0.0; 3], vec![None; 3]).unwrap();
        assert_eq!(g.edges(), &[(0, 2), (1, 2)]);
        assert!(GlobalGraph::new(2, vec![(1, 1)], 0, vec![], vec![None; 2]).is_err());
        assert!(GlobalGraph::new(2, vec![], 1, vec![0.0, f64::NAN], vec![None; 2]).is_err());
    }

    #[test]
    fn tribe_ids_must_match_positions() {
        let g = GlobalGraph::new(2, vec![], 0, vec![], vec![None; 2]).unwrap();
        let t0 = Tribe::new(0, vec![ListedCompany], vec![], 0).unwrap();
        let t1 = Tribe::new(0, vec![ListedCompany], vec![], 0).unwrap();
        assert!(TribeStyleGraph::new(g, vec![t0, t1]).is_err());
    }

    #[test]
    fn permutation_relabels_nodes() {
        let t = Tribe::new(0, vec![ListedCompany, Individual, UnlistedCompany], vec![(1, 0), (2, 0)], 0)
            .unwrap();
        let p = t.permuted(&[2, 0, 1]).unwrap();
        assert_eq!(p.central(), 2);
        assert_eq!(p.kinds(), &[Individual, UnlistedCompany, ListedCompany]);
        assert_eq!(p.edges(), &[(0, 2), (1, 2)]);
    }
}
