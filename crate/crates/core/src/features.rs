//! Structural attributes of tribe nodes: degrees, kind, hop distance to the
//! central node and the principal-eigenvector (eigenvector centrality) value.

use thiserror::Error;

use crate::graph::{NodeKind, Tribe, UndirectedView};
use crate::scalar::Scalar;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FeatureError {
    #[error("tribe {tribe}: node {node} is unreachable from the central node")]
    DisconnectedTribe { tribe: usize, node: usize },
    #[error("power iteration did not converge within {0} iterations")]
    NoConvergence(usize),
    #[error("invalid power-iteration settings: {0}")]
    BadSettings(&'static str),
}

/// Per-node structural attributes of one tribe.
#[derive(Debug, Clone, PartialEq)]
pub struct StructFeatureTable<T> {
    pub deg_in: Vec<usize>,
    pub deg_out: Vec<usize>,
    pub kind: Vec<NodeKind>,
    pub spd: Vec<usize>,
    pub eig: Vec<T>,
}

impl<T> StructFeatureTable<T> {
    pub fn len(&self) -> usize {
        self.kind.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kind.is_empty()
    }
}

/// Breadth-first hop distance to the central node over the undirected view.
pub fn compute_spd(t: &Tribe) -> Result<Vec<usize>, FeatureError> {
    t.undirected_view()
        .bfs_distances(t.central())
        .into_iter()
        .enumerate()
        .map(|(node, d)| d.ok_or(FeatureError::DisconnectedTribe { tribe: t.tribe_id(), node }))
        .collect()
}

/// `(deg_in, deg_out)` per node, counted over the directed edge list.
pub fn compute_degrees(t: &Tribe) -> Vec<(usize, usize)> {
    let mut deg = vec![(0, 0); t.len()];
    for &(s, d) in t.edges() {
        deg[s].1 += 1;
        deg[d].0 += 1;
    }
    deg
}

/// Default convergence tolerance for [`compute_eigvec`].
pub fn default_eig_tol<T: Scalar>() -> T {
    T::epsilon() * T::from_f64_lossy(100.0)
}

pub const DEFAULT_EIG_MAX_ITER: usize = 100_000;

/// Sum that does not depend on the order of `vals` (sorts first).
fn canonical_sum<T: Scalar>(vals: &mut [T]) -> T {
    vals.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    vals.iter().fold(T::zero(), |acc, &v| acc + v)
}

/// Unit-L2 principal eigenvector of the binary adjacency of `view`.
///
/// Iterates `x <- (A + I) x / |(A + I) x|` from the uniform vector. The unit
/// shift keeps bipartite tribes (stars, trees) from oscillating between the
/// `+lambda` and `-lambda` eigenvectors without moving the Perron vector.
/// Every reduction is computed in sorted order, so relabelling the nodes
/// permutes the result exactly.
pub fn principal_eigenvector<T: Scalar>(
    view: &UndirectedView,
    tol: T,
    max_iter: usize,
) -> Result<Vec<T>, FeatureError> {
    if !(tol > T::zero()) {
        return Err(FeatureError::BadSettings("tol must be positive"));
    }
    if max_iter == 0 {
        return Err(FeatureError::BadSettings("max_iter must be at least 1"));
    }
    let n = view.len();
    if n == 0 {
        return Ok(Vec::new());
    }
    let uniform = T::one() / T::from_usize_lossy(n).sqrt();
    let mut x = vec![uniform; n];
    if view.n_edges() == 0 {
        return Ok(x);
    }
    let mut next = vec![T::zero(); n];
    let mut scratch: Vec<T> = Vec::new();
    for _ in 0..max_iter {
        for v in 0..n {
            scratch.clear();
            scratch.push(x[v]);
            scratch.extend(view.neighbors(v).iter().map(|&u| x[u]));
            next[v] = canonical_sum(&mut scratch);
        }
        scratch.clear();
        scratch.extend(next.iter().map(|&v| v * v));
        let norm = canonical_sum(&mut scratch).sqrt();
        let mut diff = T::zero();
        for v in 0..n {
            next[v] /= norm;
            diff = diff.max((next[v] - x[v]).abs());
        }
        std::mem::swap(&mut x, &mut next);
        if diff < tol {
            fix_sign(&mut x);
            return Ok(x);
        }
    }
    Err(FeatureError::NoConvergence(max_iter))
}

fn fix_sign<T: Scalar>(x: &mut [T]) {
    let mut best = T::zero();
    let mut sign_negative = false;
    for &v in x.iter() {
        if v.abs() > best {
            best = v.abs();
            sign_negative = v < T::zero();
        }
    }
    if sign_negative {
        x.iter_mut().for_each(|v| *v = -*v);
    }
}

/// Principal adjacency eigenvector of the tribe (eigenvector centrality).
pub fn compute_eigvec<T: Scalar>(t: &Tribe, tol: T, max_iter: usize) -> Result<Vec<T>, FeatureError> {
    principal_eigenvector(&t.undirected_view(), tol, max_iter)
}

/// All structural attributes of a tribe.
pub fn build_feature_table<T: Scalar>(t: &Tribe) -> Result<StructFeatureTable<T>, FeatureError> {
    let (deg_in, deg_out) = compute_degrees(t).into_iter().unzip();
    Ok(StructFeatureTable {
        deg_in,
        deg_out,
        kind: t.kinds().to_vec(),
        spd: compute_spd(t)?,
        eig: compute_eigvec(t, default_eig_tol(), DEFAULT_EIG_MAX_ITER)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::NodeKind::*;

    fn star(leaves: usize) -> Tribe {
        let mut kinds = vec![ListedCompany];
        kinds.extend(std::iter::repeat_n(Individual, leaves));
        let edges = (1..=leaves).map(|v| (v, 0)).collect();
        Tribe::new(0, kinds, edges, 0).unwrap()
    }

    fn path() -> Tribe {
        // c - a - b with c = 0
        Tribe::new(0, vec![ListedCompany, UnlistedCompany, Individual], vec![(1, 0), (2, 1)], 0).unwrap()
    }

    #[test]
    fn single_node_table() {
        let t = Tribe::new(0, vec![ListedCompany], vec![], 0).unwrap();
        let ft = build_feature_table::<f64>(&t).unwrap();
        assert_eq!(ft.deg_in, vec![0]);
        assert_eq!(ft.deg_out, vec![0]);
        assert_eq!(ft.spd, vec![0]);
        assert_eq!(ft.kind, vec![ListedCompany]);
        assert_eq!(ft.eig, vec![1.0]);
    }

    #[test]
    fn path_spd_and_degrees() {
        let t = path();
        assert_eq!(compute_spd(&t).unwrap(), vec![0, 1, 2]);
        assert_eq!(compute_degrees(&t), vec![(1, 0), (1, 1), (0, 1)]);
    }

    #[test]
    fn in_degree_counts_investors() {
        let t = Tribe::new(0, vec![ListedCompany, Individual, Individual], vec![(1, 0), (2, 0)], 0).unwrap();
        assert_eq!(compute_degrees(&t)[0], (2, 0));
    }

    #[test]
    fn triangle_is_uniform() {
        let t = Tribe::new(
            0,
            vec![ListedCompany, UnlistedCompany, UnlistedCompany],
            vec![(1, 0), (2, 0), (2, 1)],
            0,
        )
        .unwrap();
        let e = compute_eigvec::<f64>(&t, 1e-14, 10_000).unwrap();
        for v in e {
            assert!((v - 1.0 / 3f64.sqrt()).abs() < 1e-12);
        }
    }

    #[test]
    fn star_converges_despite_bipartite_spectrum() {
        let e = compute_eigvec::<f64>(&star(4), 1e-14, 10_000).unwrap();
        assert!((e[0] - 1.0 / 2f64.sqrt()).abs() < 1e-10);
        for &v in &e[1..] {
            assert!((v - 1.0 / (2.0 * 2f64.sqrt())).abs() < 1e-10);
        }
    }

    #[test]
    fn iteration_budget_is_enforced() {
        assert_eq!(compute_eigvec::<f64>(&star(30), 1e-15, 2), Err(FeatureError::NoConvergence(2)));
        assert!(compute_eigvec::<f64>(&star(3), 0.0, 10).is_err());
        assert!(compute_eigvec::<f64>(&star(3), 1e-9, 0).is_err());
    }

    #[test]
    fn works_in_f32() {
        let e = compute_eigvec::<f32>(&star(4), default_eig_tol(), DEFAULT_EIG_MAX_ITER).unwrap();
        assert!((e[0] - std::f32::consts::FRAC_1_SQRT_2).abs() < 1e-4);
    }
}
