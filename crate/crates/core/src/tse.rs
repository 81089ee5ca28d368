//! Tribe structure encoder: structural embeddings, GIN layers and a
//! layer-averaged sum-pooling readout.
//!
//! All tribes are encoded in one pass. Their nodes are stacked into a single
//! block-diagonal adjacency, and a segment id maps each node to its tribe,
//! so pooling is a segment sum.

use std::rc::Rc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::autodiff::{dropout_rng, AutodiffError, ParamId, ParamStore, SparseMatrix, Tape, Tensor, Var};
use crate::features::{build_feature_table, FeatureError, StructFeatureTable};
use crate::graph::{NodeKind, Tribe};
use crate::init;
use crate::scalar::Scalar;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TseError {
    #[error("layer widths differ: {expected} vs {got}")]
    WidthMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
}

type Result<T> = std::result::Result<T, TseError>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TseConfig {
    /// Width of each structural embedding.
    pub d_e: usize,
    /// Width of GIN layers and of the tribe representation.
    pub d_t: usize,
    pub layers: usize,
    pub b_deg: usize,
    pub b_spd: usize,
    /// When false, the encoder input is `[1 || eig]` instead of the embeddings.
    pub use_embeddings: bool,
}

impl Default for TseConfig {
    fn default() -> Self {
        TseConfig { d_e: 16, d_t: 32, layers: 2, b_deg: 12, b_spd: 8, use_embeddings: true }
    }
}

impl TseConfig {
    pub fn input_dim(&self) -> usize {
        if self.use_embeddings {
            4 * self.d_e + 1
        } else {
            2
        }
    }
}

/// `min(floor(log2(1 + deg)), b_deg - 1)`.
pub fn degree_bucket(deg: usize, b_deg: usize) -> usize {
    let log = (usize::BITS - 1 - (deg + 1).leading_zeros()) as usize;
    log.min(b_deg - 1)
}

pub fn spd_bucket(spd: usize, b_spd: usize) -> usize {
    spd.min(b_spd - 1)
}

/// Tribes stacked for batched encoding.
#[derive(Debug, Clone)]
pub struct TribeBatch<T> {
    n_tribes: usize,
    segments: Rc<[usize]>,
    counts: Tensor<T>,
    adj: Rc<SparseMatrix<T>>,
    deg_in: Rc<[usize]>,
    deg_out: Rc<[usize]>,
    kind: Rc<[usize]>,
    spd: Rc<[usize]>,
    eig: Tensor<T>,
}

impl<T: Scalar> TribeBatch<T> {
    /// Stacks tribes whose feature tables are already computed.
    pub fn new(tribes: &[Tribe], tables: &[StructFeatureTable<T>], cfg: &TseConfig) -> Self {
        assert_eq!(tribes.len(), tables.len(), "one feature table per tribe");
        let n: usize = tribes.iter().map(Tribe::len).sum();
        let mut segments = Vec::with_capacity(n);
        let mut triplets = Vec::new();
        let (mut deg_in, mut deg_out, mut kind, mut spd, mut eig) =
            (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
        let mut counts = Vec::with_capacity(tribes.len());
        let mut offset = 0;
        for (i, (t, ft)) in tribes.iter().zip(tables).enumerate() {
            segments.extend(std::iter::repeat_n(i, t.len()));
            for (a, b) in t.undirected_view().edges() {
                triplets.push((offset + a, offset + b, T::one()));
                triplets.push((offset + b, offset + a, T::one()));
            }
            deg_in.extend(ft.deg_in.iter().map(|&d| degree_bucket(d, cfg.b_deg)));
            deg_out.extend(ft.deg_out.iter().map(|&d| degree_bucket(d, cfg.b_deg)));
            kind.extend(ft.kind.iter().map(|k| k.code()));
            spd.extend(ft.spd.iter().map(|&s| spd_bucket(s, cfg.b_spd)));
            eig.extend_from_slice(&ft.eig);
            counts.push(T::from_usize_lossy(t.len()));
            offset += t.len();
        }
        TribeBatch {
            n_tribes: tribes.len(),
            segments: segments.into(),
            counts: Tensor::column(counts),
            adj: Rc::new(SparseMatrix::from_triplets(n, n, &triplets)),
            deg_in: deg_in.into(),
            deg_out: deg_out.into(),
            kind: kind.into(),
            spd: spd.into(),
            eig: Tensor::column(eig),
        }
    }

    /// Computes feature tables (in parallel across tribes) and stacks them.
    pub fn from_tribes(tribes: &[Tribe], cfg: &TseConfig) -> Result<Self> {
        let tables: std::result::Result<Vec<StructFeatureTable<T>>, FeatureError> =
            tribes.par_iter().map(build_feature_table).collect();
        Ok(Self::new(tribes, &tables?, cfg))
    }

    pub fn n_tribes(&self) -> usize {
        self.n_tribes
    }

    pub fn n_nodes(&self) -> usize {
        self.segments.len()
    }

    pub fn segments(&self) -> &Rc<[usize]> {
        &self.segments
    }

    pub fn adjacency(&self) -> &Rc<SparseMatrix<T>> {
        &self.adj
    }
}

/// Parameter ids of one GIN layer.
#[derive(Debug, Clone, Copy)]
pub struct GinLayerIds {
    pub eps: ParamId,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

/// Parameter ids of the whole encoder.
#[derive(Debug, Clone)]
pub struct TseParams {
    /// deg_in, deg_out, kind and spd tables; absent without embeddings.
    pub tables: Option<[ParamId; 4]>,
    pub proj_w: ParamId,
    pub proj_b: ParamId,
    pub layers: Vec<GinLayerIds>,
}

const TABLE_NAMES: [&str; 4] = ["tse.emb.deg_in", "tse.emb.deg_out", "tse.emb.kind", "tse.emb.spd"];

impl TseParams {
    /// Registers freshly initialized encoder parameters in `store`.
    pub fn init<T: Scalar, R: Rng>(store: &mut ParamStore<T>, cfg: &TseConfig, rng: &mut R) -> Self {
        let tables = cfg.use_embeddings.then(|| {
            let rows = [cfg.b_deg, cfg.b_deg, NodeKind::COUNT, cfg.b_spd];
            let mut ids = TABLE_NAMES.map(|_| None);
            for (k, name) in TABLE_NAMES.iter().enumerate() {
                ids[k] = Some(store.add(*name, init::normal(rows[k], cfg.d_e, 0.02, rng)));
            }
            ids.map(|id| id.expect("filled above"))
        });
        let d_in = cfg.input_dim();
        let proj_w = store.add("tse.proj0.w", init::glorot(d_in, cfg.d_t, rng));
        let proj_b = store.add("tse.proj0.b", Tensor::zeros(1, cfg.d_t));
        let layers = (0..cfg.layers)
            .map(|l| {
                let fan_in = if l == 0 { d_in } else { cfg.d_t };
                GinLayerIds {
                    eps: store.add(format!("tse.gin{l}.eps"), Tensor::zeros(1, 1)),
                    w1: store.add(format!("tse.gin{l}.w1"), init::glorot(fan_in, cfg.d_t, rng)),
                    b1: store.add(format!("tse.gin{l}.b1"), Tensor::zeros(1, cfg.d_t)),
                    w2: store.add(format!("tse.gin{l}.w2"), init::glorot(cfg.d_t, cfg.d_t, rng)),
                    b2: store.add(format!("tse.gin{l}.b2"), Tensor::zeros(1, cfg.d_t)),
                }
            })
            .collect();
        TseParams { tables, proj_w, proj_b, layers }
    }

    /// Records every encoder parameter on `tape`.
    pub fn bind<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>) -> TseVars {
        TseVars {
            tables: self.tables.map(|ids| ids.map(|id| tape.param(store, id))),
            proj_w: tape.param(store, self.proj_w),
            proj_b: tape.param(store, self.proj_b),
            layers: self
                .layers
                .iter()
                .map(|l| GinLayerVars {
                    eps: tape.param(store, l.eps),
                    w1: tape.param(store, l.w1),
                    b1: tape.param(store, l.b1),
                    w2: tape.param(store, l.w2),
                    b2: tape.param(store, l.b2),
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GinLayerVars {
    pub eps: Var,
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

/// Encoder parameters recorded on a tape.
#[derive(Debug, Clone)]
pub struct TseVars {
    pub tables: Option<[Var; 4]>,
    pub proj_w: Var,
    pub proj_b: Var,
    pub layers: Vec<GinLayerVars>,
}

/// Per-node encoder input `[emb(deg_in) || emb(deg_out) || emb(kind) || emb(spd) || eig]`,
/// or `[1 || eig]` when the vars carry no embedding tables.
pub fn embed_nodes<T: Scalar>(tape: &mut Tape<T>, batch: &TribeBatch<T>, vars: &TseVars) -> Result<Var> {
    let eig = tape.constant(batch.eig.clone());
    match vars.tables {
        Some([t_in, t_out, t_kind, t_spd]) => {
            let a = tape.row_gather(t_in, batch.deg_in.clone())?;
            let b = tape.row_gather(t_out, batch.deg_out.clone())?;
            let c = tape.row_gather(t_kind, batch.kind.clone())?;
            let d = tape.row_gather(t_spd, batch.spd.clone())?;
            Ok(tape.concat_cols(&[a, b, c, d, eig])?)
        }
        None => {
            let ones = tape.constant(Tensor::full(batch.n_nodes(), 1, T::one()));
            Ok(tape.concat_cols(&[ones, eig])?)
        }
    }
}

/// GIN layers `h_l = MLP_l((1 + eps_l) h_{l-1} + sum_{u in N(v)} h_{l-1}(u))`
/// with `h_0 = z`, each MLP followed by dropout when `rng` is given.
/// Returns `h_1 .. h_L`.
pub fn gin_forward<T: Scalar, R: Rng>(
    tape: &mut Tape<T>,
    batch: &TribeBatch<T>,
    z: Var,
    layers: &[GinLayerVars],
    dropout: f64,
    rng: Option<&mut R>,
) -> Result<Vec<Var>> {
    let Some((first, rest)) = layers.split_first() else {
        return Ok(Vec::new());
    };
    let m = gin_mlp(tape, batch, z, first)?;
    gin_continue(tape, batch, m, rest, dropout, rng)
}

fn gin_mlp<T: Scalar>(tape: &mut Tape<T>, batch: &TribeBatch<T>, h: Var, l: &GinLayerVars) -> Result<Var> {
    let agg = tape.gin_combine(h, l.eps, batch.adj.clone())?;
    let a = tape.linear(agg, l.w1, Some(l.b1))?;
    let a = tape.relu(a)?;
    Ok(tape.linear(a, l.w2, Some(l.b2))?)
}

/// Dropout on the first layer's MLP output `m1`, then the remaining layers.
fn gin_continue<T: Scalar, R: Rng>(
    tape: &mut Tape<T>,
    batch: &TribeBatch<T>,
    m1: Var,
    rest: &[GinLayerVars],
    dropout: f64,
    mut rng: Option<&mut R>,
) -> Result<Vec<Var>> {
    let mut h = tape.dropout(m1, dropout, rng.as_deref_mut())?;
    let mut out = Vec::with_capacity(rest.len() + 1);
    out.push(h);
    for l in rest {
        let m = gin_mlp(tape, batch, h, l)?;
        h = tape.dropout(m, dropout, rng.as_deref_mut())?;
        out.push(h);
    }
    Ok(out)
}

/// `(1 / (L + 1)) * sum_l SUM_nodes(h_l)` over per-node layer representations.
pub fn readout<T: Scalar>(tape: &mut Tape<T>, batch: &TribeBatch<T>, reps: &[Var]) -> Result<Var> {
    let pooled = reps
        .iter()
        .map(|&h| Ok(tape.segment_sum(h, batch.segments.clone(), batch.n_tribes)?))
        .collect::<Result<Vec<_>>>()?;
    average(tape, &pooled)
}

fn average<T: Scalar>(tape: &mut Tape<T>, pooled: &[Var]) -> Result<Var> {
    let width = tape.value(pooled[0]).cols();
    let mut acc = pooled[0];
    for &p in &pooled[1..] {
        let got = tape.value(p).cols();
        if got != width {
            return Err(TseError::WidthMismatch { expected: width, got });
        }
        acc = tape.add(acc, p)?;
    }
    Ok(tape.scale(acc, T::one() / T::from_usize_lossy(pooled.len()))?)
}

/// Layer-0 readout term: sum over each tribe's nodes of `z W0 + b0`.
///
/// Pools before projecting, which is the same affine map applied to far
/// fewer rows.
fn pooled_projection<T: Scalar>(tape: &mut Tape<T>, batch: &TribeBatch<T>, z: Var, vars: &TseVars) -> Result<Var> {
    let zs = tape.segment_sum(z, batch.segments.clone(), batch.n_tribes)?;
    let proj = tape.matmul(zs, vars.proj_w)?;
    let counts = tape.constant(batch.counts.clone());
    let bias = tape.matmul(counts, vars.proj_b)?;
    Ok(tape.add(proj, bias)?)
}

/// Dropout setting for [`encode_tribes`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Views {
    /// Deterministic pass without dropout.
    Eval,
    /// `count` training passes with independent dropout streams.
    Train { seed: u64, epoch: u64, count: usize },
}

/// Tribe representations `n_tribes x d_t`, one matrix per requested view.
pub fn encode_tribes<T: Scalar>(
    tape: &mut Tape<T>,
    batch: &TribeBatch<T>,
    vars: &TseVars,
    dropout: f64,
    views: Views,
) -> Result<Vec<Var>> {
    let z = embed_nodes(tape, batch, vars)?;
    let p0 = pooled_projection(tape, batch, z, vars)?;
    // Views only diverge at the first dropout, so the first MLP is shared.
    let first = match vars.layers.split_first() {
        Some((l, rest)) => Some((gin_mlp(tape, batch, z, l)?, rest)),
        None => None,
    };
    let encode = |tape: &mut Tape<T>, rng: Option<&mut ChaCha8Rng>| -> Result<Var> {
        let hs = match first {
            Some((m1, rest)) => gin_continue(tape, batch, m1, rest, dropout, rng)?,
            None => Vec::new(),
        };
        let mut pooled = vec![p0];
        for h in hs {
            pooled.push(tape.segment_sum(h, batch.segments.clone(), batch.n_tribes)?);
        }
        average(tape, &pooled)
    };
    match views {
        Views::Eval => Ok(vec![encode(tape, None)?]),
        Views::Train { seed, epoch, count } => (0..count)
            .map(|v| {
                let mut rng = dropout_rng(seed, epoch, 0, v as u64);
                encode(tape, Some(&mut rng))
            })
            .collect(),
    }
}

/// Per-node layer-0 representation `z W0 + b0`, as averaged by [`readout`].
pub fn project_input<T: Scalar>(tape: &mut Tape<T>, z: Var, vars: &TseVars) -> Result<Var> {
    Ok(tape.linear(z, vars.proj_w, Some(vars.proj_b))?)
}
