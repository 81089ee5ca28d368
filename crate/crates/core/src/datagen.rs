//! Synthetic tribe-style graphs and the tribe statistics used to check them.
//!
//! Tribes grow one node at a time around their listed company. Each new node
//! invests either in the center alone (star growth), in up to two existing
//! companies away from the center (deep growth, which builds long chains and
//! cycles), or in the center plus up to two existing companies (dense growth,
//! which closes triangles around the center). Risky and normal tribes use
//! different mixtures, so the class shows up in the tribe structure.

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::principal_eigenvector;
use crate::graph::{GlobalGraph, GraphError, NodeKind, Tribe, TribeStyleGraph, UndirectedView};

#[derive(Debug, Error)]
pub enum DatagenError {
    #[error("invalid generator configuration: {0}")]
    BadConfig(String),
    #[error("global graph has no edges between labeled nodes")]
    NoEdges,
    #[error(transparent)]
    Graph(#[from] GraphError),
}

type Result<T> = std::result::Result<T, DatagenError>;

/// Generator parameters. Read from JSON; unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub n_tribes: usize,
    /// Share of risky central nodes; the count is rounded.
    pub risky_fraction: f64,
    /// Inclusive `[min, max]` tribe sizes per class.
    pub tribe_size_risky: (usize, usize),
    pub tribe_size_normal: (usize, usize),
    /// Probability that a new node invests in the center only.
    pub star_bias_risky: f64,
    pub star_bias_normal: f64,
    /// Among the other nodes, probability of deep rather than dense growth.
    pub depth_bias_risky: f64,
    pub depth_bias_normal: f64,
    pub individual_fraction_risky: f64,
    pub individual_fraction_normal: f64,
    /// Global edge probability for same-label pairs.
    pub p_same: f64,
    /// Global edge probability for cross-label pairs.
    pub p_cross: f64,
    pub attr_dim: usize,
    /// Weight of the label-dependent mean in each attribute vector.
    pub attr_signal: f64,
    pub bins: usize,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            n_tribes: 400,
            risky_fraction: 0.42,
            tribe_size_risky: (20, 150),
            tribe_size_normal: (20, 200),
            star_bias_risky: 0.45,
            star_bias_normal: 0.2,
            depth_bias_risky: 0.0,
            depth_bias_normal: 1.0,
            individual_fraction_risky: 0.6,
            individual_fraction_normal: 0.4,
            p_same: 0.01,
            p_cross: 0.002,
            attr_dim: 32,
            attr_signal: 0.3,
            bins: 50,
            seed: 7,
        }
    }
}

impl GenConfig {
    pub fn from_json(text: &str) -> std::result::Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    /// Same structure and attribute distribution for both classes and no homophily.
    pub fn null_signal(&self) -> Self {
        let mut c = self.clone();
        c.attr_signal = 0.0;
        c.p_cross = c.p_same;
        c.tribe_size_risky = c.tribe_size_normal;
        c.star_bias_risky = c.star_bias_normal;
        c.depth_bias_risky = c.depth_bias_normal;
        c.individual_fraction_risky = c.individual_fraction_normal;
        c
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(DatagenError::BadConfig(m));
        let probs = [
            ("risky_fraction", self.risky_fraction),
            ("star_bias_risky", self.star_bias_risky),
            ("star_bias_normal", self.star_bias_normal),
            ("depth_bias_risky", self.depth_bias_risky),
            ("depth_bias_normal", self.depth_bias_normal),
            ("individual_fraction_risky", self.individual_fraction_risky),
            ("individual_fraction_normal", self.individual_fraction_normal),
            ("p_same", self.p_same),
            ("p_cross", self.p_cross),
            ("attr_signal", self.attr_signal),
        ];
        for (name, p) in probs {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} = {p} is outside [0, 1]"));
            }
        }
        for (name, (lo, hi)) in [("tribe_size_risky", self.tribe_size_risky), ("tribe_size_normal", self.tribe_size_normal)] {
            if lo == 0 || lo > hi {
                return bad(format!("{name} = [{lo}, {hi}] is not a range of positive sizes"));
            }
        }
        if self.n_tribes == 0 || self.bins == 0 {
            return bad("n_tribes and bins must be positive".into());
        }
        Ok(())
    }

    fn class_params(&self, risky: bool) -> ((usize, usize), f64, f64, f64) {
        if risky {
            (self.tribe_size_risky, self.star_bias_risky, self.depth_bias_risky, self.individual_fraction_risky)
        } else {
            (self.tribe_size_normal, self.star_bias_normal, self.depth_bias_normal, self.individual_fraction_normal)
        }
    }
}

fn stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

const LABEL_STREAM: u64 = 1;
const GLOBAL_STREAM: u64 = 2;
const ATTR_STREAM: u64 = 3;
const TRIBE_STREAM_BASE: u64 = 1 << 32;

/// Grows one tribe of `n` nodes with node 0 as the listed center.
pub fn grow_tribe<R: Rng>(
    tribe_id: usize,
    n: usize,
    star_bias: f64,
    depth_bias: f64,
    individual_fraction: f64,
    rng: &mut R,
) -> std::result::Result<Tribe, GraphError> {
    let mut kinds = vec![NodeKind::ListedCompany];
    let mut edges = Vec::new();
    // Non-individual nodes other than the center; only these receive investment.
    let mut companies: Vec<usize> = Vec::new();
    for v in 1..n {
        let individual = rng.gen::<f64>() < individual_fraction;
        let pick = |rng: &mut R, companies: &[usize]| -> Vec<usize> {
            let k = companies.len().min(2);
            index::sample(rng, companies.len(), k).into_iter().map(|i| companies[i]).collect()
        };
        let targets = if rng.gen::<f64>() < star_bias || companies.is_empty() {
            vec![0]
        } else if rng.gen::<f64>() < depth_bias {
            pick(rng, &companies)
        } else {
            let mut t = vec![0];
            t.extend(pick(rng, &companies));
            t
        };
        edges.extend(targets.into_iter().map(|t| (v, t)));
        if individual {
            kinds.push(NodeKind::Individual);
        } else {
            kinds.push(NodeKind::UnlistedCompany);
            companies.push(v);
        }
    }
    Tribe::new(tribe_id, kinds, edges, 0)
}

/// Draws a complete labeled tribe-style graph.
pub fn generate(cfg: &GenConfig) -> Result<TribeStyleGraph> {
    cfg.validate()?;
    let n = cfg.n_tribes;
    let n_risky = ((cfg.risky_fraction * n as f64).round() as usize).min(n);
    let mut risky: Vec<bool> = (0..n).map(|i| i < n_risky).collect();
    risky.shuffle(&mut stream(cfg.seed, LABEL_STREAM));

    let tribes = risky
        .par_iter()
        .enumerate()
        .map(|(i, &r)| {
            let mut rng = stream(cfg.seed, TRIBE_STREAM_BASE + i as u64);
            let ((lo, hi), star, depth, ind) = cfg.class_params(r);
            let size = rng.gen_range(lo..=hi);
            grow_tribe(i, size, star, depth, ind, &mut rng)
        })
        .collect::<std::result::Result<Vec<_>, _>>()?;

    let mut rng = stream(cfg.seed, GLOBAL_STREAM);
    let mut edges = Vec::new();
    for a in 0..n {
        for b in a + 1..n {
            let p = if risky[a] == risky[b] { cfg.p_same } else { cfg.p_cross };
            if rng.gen::<f64>() < p {
                edges.push((a, b));
            }
        }
    }

    let attrs = attributes(cfg, &risky);
    let labels = risky.iter().map(|&r| Some(r)).collect();
    let global = GlobalGraph::new(n, edges, cfg.attr_dim, attrs, labels)?;
    Ok(TribeStyleGraph::new(global, tribes)?)
}

/// `signal * mu_y + (1 - signal) * noise`, then each column is cut into
/// `bins` equal-width bins and replaced by the bin index. The class means are
/// unit vectors on disjoint halves of the columns.
fn attributes(cfg: &GenConfig, risky: &[bool]) -> Vec<f64> {
    let (n, d) = (risky.len(), cfg.attr_dim);
    let half = d.div_ceil(2);
    let mean = |r: bool, c: usize| -> f64 {
        match (r, c < half) {
            (true, true) => 1.0 / (half as f64).sqrt(),
            (false, false) => 1.0 / ((d - half) as f64).sqrt(),
            _ => 0.0,
        }
    };
    let mut rng = stream(cfg.seed, ATTR_STREAM);
    let mut x = vec![0.0; n * d];
    for i in 0..n {
        for c in 0..d {
            let noise: f64 = StandardNormal.sample(&mut rng);
            x[i * d + c] = cfg.attr_signal * mean(risky[i], c) + (1.0 - cfg.attr_signal) * noise;
        }
    }
    for c in 0..d {
        let col = (0..n).map(|i| x[i * d + c]);
        let lo = col.clone().fold(f64::INFINITY, f64::min);
        let hi = col.fold(f64::NEG_INFINITY, f64::max);
        for i in 0..n {
            let v = &mut x[i * d + c];
            *v = equal_width_bin(*v, lo, hi, cfg.bins) as f64;
        }
    }
    x
}

/// Index of `v` among `bins` equal-width bins over `[lo, hi]`.
pub fn equal_width_bin(v: f64, lo: f64, hi: f64, bins: usize) -> usize {
    if !(hi > lo) {
        return 0;
    }
    let b = ((v - lo) / (hi - lo) * bins as f64).floor();
    (b.max(0.0) as usize).min(bins - 1)
}

/// Per-tribe centrality summary.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct TribeStats {
    pub degree_centrality: f64,
    pub eigenvector_centrality: f64,
    pub clustering_coefficient: f64,
    pub n_bridges: usize,
    pub central_degree: usize,
}

/// Centralities, clustering, bridges and center degree of a tribe, all on
/// the undirected view. A single-node tribe has every metric zero.
pub fn analyze_tribe(t: &Tribe) -> TribeStats {
    let view = t.undirected_view();
    let n = view.len();
    if n <= 1 {
        return TribeStats::default();
    }
    let degree_centrality = (0..n).map(|v| view.degree(v) as f64 / (n - 1) as f64).sum::<f64>() / n as f64;
    let eig: Vec<f64> = principal_eigenvector(&view, 1e-12, 1_000_000).unwrap_or_else(|_| vec![0.0; n]);
    TribeStats {
        degree_centrality,
        eigenvector_centrality: eig.iter().sum::<f64>() / n as f64,
        clustering_coefficient: average_clustering(&view),
        n_bridges: bridges(&view).len(),
        central_degree: view.degree(t.central()),
    }
}

/// Mean local clustering; nodes of degree below two count as zero.
pub fn average_clustering(view: &UndirectedView) -> f64 {
    let n = view.len();
    if n == 0 {
        return 0.0;
    }
    let mut mark = vec![false; n];
    let mut total = 0.0;
    for v in 0..n {
        let nb = view.neighbors(v);
        let k = nb.len();
        if k < 2 {
            continue;
        }
        nb.iter().for_each(|&u| mark[u] = true);
        let links: usize = nb.iter().map(|&u| view.neighbors(u).iter().filter(|&&w| mark[w]).count()).sum();
        nb.iter().for_each(|&u| mark[u] = false);
        total += links as f64 / (k * (k - 1)) as f64;
    }
    total / n as f64
}

/// Bridge edges `(a, b)` with `a < b`, found by an iterative Tarjan
/// low-link search.
pub fn bridges(view: &UndirectedView) -> Vec<(usize, usize)> {
    let n = view.len();
    let mut disc = vec![usize::MAX; n];
    let mut low = vec![0; n];
    let mut out = Vec::new();
    let mut time = 0;
    for root in 0..n {
        if disc[root] != usize::MAX {
            continue;
        }
        // (node, parent, next neighbor position)
        let mut stack = vec![(root, usize::MAX, 0usize)];
        disc[root] = time;
        low[root] = time;
        time += 1;
        while let Some(top) = stack.last_mut() {
            let (v, parent) = (top.0, top.1);
            if let Some(&u) = view.neighbors(v).get(top.2) {
                top.2 += 1;
                if u == parent {
                    continue;
                }
                if disc[u] == usize::MAX {
                    disc[u] = time;
                    low[u] = time;
                    time += 1;
                    stack.push((u, v, 0));
                } else {
                    low[v] = low[v].min(disc[u]);
                }
            } else {
                stack.pop();
                if parent != usize::MAX {
                    low[parent] = low[parent].min(low[v]);
                    if low[v] > disc[parent] {
                        out.push((parent.min(v), parent.max(v)));
                    }
                }
            }
        }
    }
    out.sort_unstable();
    out
}

/// Statistics of every tribe, in tribe order.
pub fn analyze_graph(g: &TribeStyleGraph) -> Vec<TribeStats> {
    g.tribes().par_iter().map(analyze_tribe).collect()
}

/// Means of the tribe statistics over one class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ClassSummary {
    pub risky: bool,
    pub count: usize,
    pub degree_centrality: f64,
    pub eigenvector_centrality: f64,
    pub clustering_coefficient: f64,
    pub n_bridges: f64,
    pub central_degree: f64,
}

/// Per-class means over labeled tribes, normal class first. Classes
/// without members are omitted.
pub fn class_summary(g: &TribeStyleGraph, stats: &[TribeStats]) -> Vec<ClassSummary> {
    [false, true]
        .into_iter()
        .filter_map(|class| {
            let members: Vec<&TribeStats> =
                stats.iter().zip(g.global().labels()).filter(|(_, l)| **l == Some(class)).map(|(s, _)| s).collect();
            let k = members.len();
            (k > 0).then(|| {
                let mean = |f: &dyn Fn(&TribeStats) -> f64| members.iter().map(|s| f(s)).sum::<f64>() / k as f64;
                ClassSummary {
                    risky: class,
                    count: k,
                    degree_centrality: mean(&|s| s.degree_centrality),
                    eigenvector_centrality: mean(&|s| s.eigenvector_centrality),
                    clustering_coefficient: mean(&|s| s.clustering_coefficient),
                    n_bridges: mean(&|s| s.n_bridges as f64),
                    central_degree: mean(&|s| s.central_degree as f64),
                }
            })
        })
        .collect()
}

pub const HIST_BINS: usize = 10;

/// Distribution of the risky share among each labeled node's global neighbors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NeighborHistogram {
    /// Bin `b` counts nodes whose risky-neighbor share lies in `[b/10, (b+1)/10)`
    /// (the last bin includes 1).
    pub risky: [usize; HIST_BINS],
    pub normal: [usize; HIST_BINS],
}

impl NeighborHistogram {
    fn normalized(counts: &[usize; HIST_BINS]) -> [f64; HIST_BINS] {
        let total: usize = counts.iter().sum();
        counts.map(|c| if total == 0 { 0.0 } else { c as f64 / total as f64 })
    }

    pub fn risky_fraction(&self) -> [f64; HIST_BINS] {
        Self::normalized(&self.risky)
    }

    pub fn normal_fraction(&self) -> [f64; HIST_BINS] {
        Self::normalized(&self.normal)
    }

    /// Share of each class with a risky-neighbor share of at least 0.8
    /// (the top two bins), as `(risky, normal)`.
    pub fn mass_above_08(&self) -> (f64, f64) {
        let top = |f: [f64; HIST_BINS]| f[8] + f[9];
        (top(self.risky_fraction()), top(self.normal_fraction()))
    }
}

/// Histogram of risky-neighbor shares per class, skipping nodes without
/// global neighbors.
pub fn neighbor_risk_histogram(g: &TribeStyleGraph) -> Result<NeighborHistogram> {
    let global = g.global();
    let labels = global.labels();
    let view = global.undirected_view();
    let mut h = NeighborHistogram { risky: [0; HIST_BINS], normal: [0; HIST_BINS] };
    let mut any = false;
    for (i, label) in labels.iter().enumerate() {
        let Some(class) = *label else { continue };
        let deg = view.degree(i);
        if deg == 0 {
            continue;
        }
        any = true;
        let r = view.neighbors(i).iter().filter(|&&j| labels[j] == Some(true)).count();
        let bin = (HIST_BINS * r / deg).min(HIST_BINS - 1);
        if class {
            h.risky[bin] += 1;
        } else {
            h.normal[bin] += 1;
        }
    }
    if !any {
        return Err(DatagenError::NoEdges);
    }
    Ok(h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::NodeKind::*;

    fn small() -> GenConfig {
        GenConfig { n_tribes: 40, tribe_size_risky: (5, 30), tribe_size_normal: (5, 30), ..GenConfig::default() }
    }

    #[test]
    fn pure_star_growth_gives_stars() {
        let cfg = GenConfig { star_bias_risky: 1.0, risky_fraction: 1.0, ..small() };
        let g = generate(&cfg).unwrap();
        for t in g.tribes() {
            let s = analyze_tribe(t);
            assert_eq!(s.clustering_coefficient, 0.0);
            assert_eq!(s.n_bridges, t.len() - 1);
            assert_eq!(s.central_degree, t.len() - 1);
        }
    }

    #[test]
    fn no_cross_edges_without_cross_probability() {
        let cfg = GenConfig { p_cross: 0.0, p_same: 0.3, ..small() };
        let g = generate(&cfg).unwrap();
        let labels = g.global().labels();
        assert!(!g.global().edges().is_empty());
        assert!(g.global().edges().iter().all(|&(a, b)| labels[a] == labels[b]));
        let h = neighbor_risk_histogram(&g).unwrap();
        assert_eq!(h.risky_fraction()[9], 1.0);
        assert_eq!(h.normal_fraction()[0], 1.0);
    }

    #[test]
    fn generation_is_deterministic_and_labels_are_counted() {
        let cfg = small();
        let a = generate(&cfg).unwrap();
        assert_eq!(a, generate(&cfg).unwrap());
        let risky = a.global().labels().iter().filter(|l| **l == Some(true)).count();
        assert_eq!(risky, 17);
        let other = generate(&GenConfig { seed: 8, ..cfg }).unwrap();
        assert_ne!(a, other);
    }

    #[test]
    fn attributes_are_bin_indices() {
        let g = generate(&small()).unwrap();
        assert!(g.global().attrs().iter().all(|&v| v.fract() == 0.0 && (0.0..50.0).contains(&v)));
        for c in 0..g.global().attr_dim() {
            let col: Vec<f64> = (0..40).map(|i| g.global().attr_row(i)[c]).collect();
            assert!(col.contains(&0.0) && col.contains(&49.0));
        }
    }

    #[test]
    fn bad_configs_are_rejected() {
        assert!(generate(&GenConfig { p_same: 1.5, ..small() }).is_err());
        assert!(generate(&GenConfig { tribe_size_normal: (0, 3), ..small() }).is_err());
        assert!(generate(&GenConfig { tribe_size_risky: (9, 3), ..small() }).is_err());
        assert!(GenConfig::from_json(r#"{"n_tribes": 3, "extra": 1}"#).is_err());
        assert_eq!(GenConfig::from_json(r#"{"n_tribes": 3}"#).unwrap().n_tribes, 3);
    }

    #[test]
    fn analyzer_examples() {
        let tri = Tribe::new(0, vec![ListedCompany, UnlistedCompany, UnlistedCompany], vec![(1, 0), (2, 0), (1, 2)], 0)
            .unwrap();
        let s = analyze_tribe(&tri);
        assert_eq!(s.clustering_coefficient, 1.0);
        assert_eq!(s.n_bridges, 0);
        assert_eq!(s.degree_centrality, 1.0);
        let star = Tribe::new(0, vec![ListedCompany, Individual, Individual, Individual, Individual, Individual],
            (1..6).map(|v| (v, 0)).collect(), 0).unwrap();
        let s = analyze_tribe(&star);
        assert_eq!((s.clustering_coefficient, s.n_bridges, s.central_degree), (0.0, 5, 5));
        let single = Tribe::new(0, vec![ListedCompany], vec![], 0).unwrap();
        assert_eq!(analyze_tribe(&single), TribeStats::default());
    }

    #[test]
    fn histogram_needs_edges() {
        let g = generate(&GenConfig { p_same: 0.0, p_cross: 0.0, ..small() }).unwrap();
        assert!(matches!(neighbor_risk_histogram(&g), Err(DatagenError::NoEdges)));
    }

    #[test]
    fn equal_width_bins() {
        assert_eq!(equal_width_bin(0.0, 0.0, 1.0, 50), 0);
        assert_eq!(equal_width_bin(1.0, 0.0, 1.0, 50), 49);
        assert_eq!(equal_width_bin(0.5, 0.0, 1.0, 50), 25);
        assert_eq!(equal_width_bin(3.0, 3.0, 3.0, 50), 0);
    }
}
