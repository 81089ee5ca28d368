//! Attention fusion of tribe and attribute views, propagation over the global
//! graph, the prediction head, and the full forward pass with its ablations.

use std::io::{Read, Write};
use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{
    read_checkpoint, write_checkpoint, AutodiffError, CheckpointError, ParamId, ParamStore, SparseMatrix, Tape, Tensor,
    Var,
};
use crate::graph::{GlobalGraph, TribeStyleGraph};
use crate::init;
use crate::scalar::Scalar;
use crate::tse::{encode_tribes, TribeBatch, TseConfig, TseError, TseParams, TseVars, Views};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    BadConfig(String),
    #[error("graph does not match the model: {0}")]
    Incompatible(String),
    #[error(transparent)]
    Tse(#[from] TseError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

impl ModelError {
    /// True when the failure is a non-finite value rather than bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(self, ModelError::Autodiff(AutodiffError::NonFinite(_)) | ModelError::Tse(TseError::Autodiff(AutodiffError::NonFinite(_))))
    }
}

type Result<T> = std::result::Result<T, ModelError>;

/// Switches that remove parts of the model.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ablation {
    /// Drop the tribe encoder; the fused input is the projected attributes.
    pub no_tse: bool,
    /// Apply the head to the fused representation directly.
    pub no_ggrl: bool,
    /// Train without the contrastive term and with a single view.
    pub no_cl: bool,
    /// Replace attention with a plain average of the two projections.
    pub no_fusion: bool,
    /// Ignore attributes; the fused input is the projected tribe representation.
    pub no_attrs: bool,
    /// Feed the encoder `[1 || eig]` instead of the structural embeddings.
    pub no_emb: bool,
}

impl Ablation {
    pub const NAMES: [&'static str; 6] = ["tse", "ggrl", "cl", "fusion", "attrs", "emb"];

    /// Parses a comma list such as `tse,ggrl`.
    pub fn parse_list(s: &str) -> std::result::Result<Self, String> {
        let mut a = Ablation::default();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            a.set(part, true).ok_or_else(|| format!("unknown ablation '{part}'"))?;
        }
        Ok(a)
    }

    fn flags(&self) -> [bool; 6] {
        [self.no_tse, self.no_ggrl, self.no_cl, self.no_fusion, self.no_attrs, self.no_emb]
    }

    fn set(&mut self, name: &str, value: bool) -> Option<()> {
        let slot = match name {
            "tse" => &mut self.no_tse,
            "ggrl" => &mut self.no_ggrl,
            "cl" => &mut self.no_cl,
            "fusion" => &mut self.no_fusion,
            "attrs" => &mut self.no_attrs,
            "emb" => &mut self.no_emb,
            _ => return None,
        };
        *slot = value;
        Some(())
    }

    /// Union of two flag sets.
    pub fn merge(self, other: Ablation) -> Ablation {
        let mut out = self;
        for (name, on) in Self::NAMES.iter().zip(other.flags()) {
            if on {
                out.set(name, true);
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    pub hidden: usize,
    pub d_e: usize,
    pub gin_layers: usize,
    pub ggrl_layers: usize,
    pub b_deg: usize,
    pub b_spd: usize,
    pub dropout: f64,
    /// Skip the ReLU after each global layer.
    pub ggrl_linear: bool,
    pub ablation: Ablation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden: 32,
            d_e: 16,
            gin_layers: 2,
            ggrl_layers: 2,
            b_deg: 12,
            b_spd: 8,
            dropout: 0.1,
            ggrl_linear: false,
            ablation: Ablation::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(ModelError::BadConfig(m.to_string()));
        if self.hidden == 0 || self.d_e == 0 || self.b_deg == 0 || self.b_spd == 0 {
            return bad("widths and bucket counts must be positive");
        }
        if self.gin_layers == 0 || self.ggrl_layers == 0 {
            return bad("layer counts must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        if self.ablation.no_tse && self.ablation.no_attrs {
            return bad("no_tse and no_attrs together leave no input");
        }
        Ok(())
    }

    pub fn tse(&self) -> TseConfig {
        TseConfig {
            d_e: self.d_e,
            d_t: self.hidden,
            layers: self.gin_layers,
            b_deg: self.b_deg,
            b_spd: self.b_spd,
            use_embeddings: !self.ablation.no_emb,
        }
    }

    fn uses_tse(&self) -> bool {
        !self.ablation.no_tse
    }

    fn uses_attrs(&self) -> bool {
        !self.ablation.no_attrs
    }

    fn uses_attention(&self) -> bool {
        self.uses_tse() && self.uses_attrs() && !self.ablation.no_fusion
    }
}

#[derive(Debug, Clone)]
struct FusionIds {
    w_g: Option<ParamId>,
    w_x: Option<ParamId>,
    a_g: Option<ParamId>,
    a_x: Option<ParamId>,
}

/// Fusion parameters recorded on a tape.
#[derive(Debug, Clone, Copy)]
pub struct FusionVars {
    pub w_g: Var,
    pub w_x: Var,
    /// `1 x 2d` attention vectors.
    pub a_g: Var,
    pub a_x: Var,
}

/// Attention fusion. Returns `(h0, alpha_g, alpha_x)`:
/// `e = LeakyReLU([h_g W_g || X W_x] a^T)`, `alpha = softmax(e_g, e_x)`,
/// `h0 = alpha_g * h_g W_g + alpha_x * X W_x`.
pub fn fuse<T: Scalar>(tape: &mut Tape<T>, h_g: Var, x: Var, p: &FusionVars) -> Result<(Var, Var, Var)> {
    let (rg, rx) = (tape.value(h_g).rows(), tape.value(x).rows());
    if rg != rx {
        return Err(AutodiffError::ShapeMismatch { op: "fuse", lhs: tape.value(h_g).shape(), rhs: tape.value(x).shape() }.into());
    }
    let g = tape.matmul(h_g, p.w_g)?;
    let px = tape.matmul(x, p.w_x)?;
    let both = tape.concat_cols(&[g, px])?;
    let slope = T::from_f64_lossy(0.01);
    let score = |tape: &mut Tape<T>, a: Var| -> Result<Var> {
        let at = tape.transpose(a)?;
        let e = tape.matmul(both, at)?;
        Ok(tape.leaky_relu(e, slope)?)
    };
    let e_g = score(tape, p.a_g)?;
    let e_x = score(tape, p.a_x)?;
    let (alpha_g, alpha_x) = tape.softmax_pair(e_g, e_x)?;
    let wg = tape.mul_col(g, alpha_g)?;
    let wx = tape.mul_col(px, alpha_x)?;
    Ok((tape.add(wg, wx)?, alpha_g, alpha_x))
}

/// Row-normalized `D^-1 (A + I)` of the global graph with `d_i = deg(i) + 1`.
pub fn normalized_adjacency<T: Scalar>(global: &GlobalGraph) -> SparseMatrix<T> {
    let view = global.undirected_view();
    let mut triplets = Vec::with_capacity(global.n_central() + 2 * view.n_edges());
    for i in 0..view.len() {
        let w = T::one() / T::from_usize_lossy(view.degree(i) + 1);
        triplets.push((i, i, w));
        triplets.extend(view.neighbors(i).iter().map(|&j| (i, j, w)));
    }
    SparseMatrix::from_triplets(global.n_central(), global.n_central(), &triplets)
}

/// Global layers `h_l = sigma(D^-1 (A + I) h_{l-1} W_l)`; `sigma` is ReLU
/// unless `linear` is set.
pub fn ggrl_forward<T: Scalar>(
    tape: &mut Tape<T>,
    adj: &Rc<SparseMatrix<T>>,
    h0: Var,
    weights: &[Var],
    linear: bool,
) -> Result<Var> {
    let mut h = h0;
    for &w in weights {
        let m = tape.spmm(adj.clone(), h)?;
        let z = tape.matmul(m, w)?;
        h = if linear { z } else { tape.relu(z)? };
    }
    Ok(h)
}

/// `sigmoid(h W_p + b_p)` as an `n x 1` column.
pub fn predict<T: Scalar>(tape: &mut Tape<T>, h: Var, w_p: Var, b_p: Var) -> Result<Var> {
    let logits = tape.linear(h, w_p, Some(b_p))?;
    Ok(tape.sigmoid(logits)?)
}

/// Graph-derived inputs of the forward pass, computed once per graph.
#[derive(Debug, Clone)]
pub struct PreparedGraph<T> {
    batch: Option<TribeBatch<T>>,
    attrs: Tensor<T>,
    adj: Rc<SparseMatrix<T>>,
    labels: Vec<Option<bool>>,
}

impl<T: Scalar> PreparedGraph<T> {
    pub fn n_central(&self) -> usize {
        self.labels.len()
    }

    pub fn labels(&self) -> &[Option<bool>] {
        &self.labels
    }

    pub fn batch(&self) -> Option<&TribeBatch<T>> {
        self.batch.as_ref()
    }

    /// Standardized attributes.
    pub fn attrs(&self) -> &Tensor<T> {
        &self.attrs
    }

    pub fn global_adjacency(&self) -> &Rc<SparseMatrix<T>> {
        &self.adj
    }
}

/// Training or evaluation pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Mode {
    Eval,
    Train { seed: u64, epoch: u64 },
}

/// Handles produced by [`Model::forward`].
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `n x 1` probabilities.
    pub probs: Var,
    /// Tribe representations: one in eval mode (or without contrastive
    /// training), the query and key views otherwise. Empty without the encoder.
    pub views: Vec<Var>,
    /// Attention weights when attention fusion is active.
    pub alpha: Option<(Var, Var)>,
    /// Input of the prediction head.
    pub hidden: Var,
}

/// Parameters of every model part recorded on one tape.
#[derive(Debug, Clone)]
pub struct BoundParams {
    pub tse: Option<TseVars>,
    pub fusion: FusionVars,
    pub ggrl: Vec<Var>,
    pub w_p: Var,
    pub b_p: Var,
}

/// The full model: parameters, their layout and the attribute scaler.
#[derive(Debug, Clone)]
pub struct Model<T> {
    cfg: ModelConfig,
    attr_dim: usize,
    store: ParamStore<T>,
    tse: Option<TseParams>,
    fusion: FusionIds,
    ggrl: Vec<ParamId>,
    w_p: ParamId,
    b_p: ParamId,
    attr_mean: Vec<T>,
    attr_std: Vec<T>,
}

impl<T: Scalar> Model<T> {
    /// Initializes parameters and fits the attribute scaler on all central nodes of `g`.
    pub fn new<R: Rng>(cfg: ModelConfig, g: &TribeStyleGraph, rng: &mut R) -> Result<Self> {
        let mut m = Self::with_layout(cfg, g.global().attr_dim(), rng)?;
        let (mean, std) = column_stats(g.global());
        m.attr_mean = mean.into_iter().map(T::from_f64_lossy).collect();
        m.attr_std = std.into_iter().map(T::from_f64_lossy).collect();
        Ok(m)
    }

    fn with_layout<R: Rng>(cfg: ModelConfig, attr_dim: usize, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.hidden;
        let mut store = ParamStore::new();
        let tse = cfg.uses_tse().then(|| TseParams::init(&mut store, &cfg.tse(), rng));
        let w_g = cfg.uses_tse().then(|| store.add("fusion.w_g", init::glorot(d, d, rng)));
        let w_x = cfg.uses_attrs().then(|| store.add("fusion.w_x", init::glorot(attr_dim, d, rng)));
        let (a_g, a_x) = if cfg.uses_attention() {
            (
                Some(store.add("fusion.a_g", init::glorot(1, 2 * d, rng))),
                Some(store.add("fusion.a_x", init::glorot(1, 2 * d, rng))),
            )
        } else {
            (None, None)
        };
        let ggrl = if cfg.ablation.no_ggrl {
            Vec::new()
        } else {
            (0..cfg.ggrl_layers).map(|l| store.add(format!("ggrl.w{l}"), init::glorot(d, d, rng))).collect()
        };
        let w_p = store.add("head.w", init::glorot(d, 1, rng));
        let b_p = store.add("head.b", Tensor::zeros(1, 1));
        Ok(Model {
            cfg,
            attr_dim,
            store,
            tse,
            fusion: FusionIds { w_g, w_x, a_g, a_x },
            ggrl,
            w_p,
            b_p,
            attr_mean: vec![T::zero(); attr_dim],
            attr_std: vec![T::one(); attr_dim],
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn attr_dim(&self) -> usize {
        self.attr_dim
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    /// Precomputes structural features, scaled attributes and the global operator.
    pub fn prepare(&self, g: &TribeStyleGraph) -> Result<PreparedGraph<T>> {
        let global = g.global();
        if global.attr_dim() != self.attr_dim {
            return Err(ModelError::Incompatible(format!(
                "graph has {} attribute columns, model expects {}",
                global.attr_dim(),
                self.attr_dim
            )));
        }
        let batch = match self.cfg.uses_tse() {
            true => Some(TribeBatch::from_tribes(g.tribes(), &self.cfg.tse())?),
            false => None,
        };
        let n = global.n_central();
        let mut attrs = Tensor::zeros(n, self.attr_dim);
        for i in 0..n {
            for (c, (&v, (&m, &s))) in global.attr_row(i).iter().zip(self.attr_mean.iter().zip(&self.attr_std)).enumerate() {
                attrs.set(i, c, (T::from_f64_lossy(v) - m) / s);
            }
        }
        Ok(PreparedGraph {
            batch,
            attrs,
            adj: Rc::new(normalized_adjacency(global)),
            labels: global.labels().to_vec(),
        })
    }

    /// Records every parameter on `tape`.
    pub fn bind(&self, tape: &mut Tape<T>) -> BoundParams {
        let s = &self.store;
        let tse = self.tse.as_ref().map(|p| p.bind(tape, s));
        let mut opt = |id: Option<ParamId>| id.map(|id| tape.param(s, id));
        let (w_g, w_x, a_g, a_x) = (opt(self.fusion.w_g), opt(self.fusion.w_x), opt(self.fusion.a_g), opt(self.fusion.a_x));
        let ggrl = self.ggrl.iter().map(|&id| tape.param(s, id)).collect();
        let (w_p, b_p) = (tape.param(s, self.w_p), tape.param(s, self.b_p));
        // Slots of disabled parts point at the head weight and are never read.
        let fusion = FusionVars {
            w_g: w_g.unwrap_or(w_p),
            w_x: w_x.unwrap_or(w_p),
            a_g: a_g.unwrap_or(w_p),
            a_x: a_x.unwrap_or(w_p),
        };
        BoundParams { tse, fusion, ggrl, w_p, b_p }
    }

    /// Encoder, fusion, global propagation and head.
    pub fn forward(&self, tape: &mut Tape<T>, data: &PreparedGraph<T>, mode: Mode) -> Result<ForwardOutput> {
        let p = self.bind(tape);
        self.forward_bound(tape, data, &p, mode)
    }

    /// [`Model::forward`] with parameters already on the tape.
    pub fn forward_bound(&self, tape: &mut Tape<T>, data: &PreparedGraph<T>, p: &BoundParams, mode: Mode) -> Result<ForwardOutput> {
        let cfg = &self.cfg;
        let views = match (&p.tse, &data.batch) {
            (Some(vars), Some(batch)) => {
                let views = match mode {
                    Mode::Eval => Views::Eval,
                    Mode::Train { seed, epoch } => {
                        Views::Train { seed, epoch, count: if cfg.ablation.no_cl { 1 } else { 2 } }
                    }
                };
                encode_tribes(tape, batch, vars, cfg.dropout, views)?
            }
            (None, _) => Vec::new(),
            (Some(_), None) => return Err(ModelError::Incompatible("graph prepared without tribe features".into())),
        };
        if views.first().is_some_and(|&v| tape.value(v).rows() != data.n_central()) {
            return Err(ModelError::Incompatible("tribe count differs from central node count".into()));
        }
        let x = tape.constant(data.attrs.clone());
        let f = &p.fusion;
        let mut alpha = None;
        let h0 = if !cfg.uses_tse() {
            tape.matmul(x, f.w_x)?
        } else if !cfg.uses_attrs() {
            tape.matmul(views[0], f.w_g)?
        } else if cfg.ablation.no_fusion {
            let g = tape.matmul(views[0], f.w_g)?;
            let px = tape.matmul(x, f.w_x)?;
            let s = tape.add(g, px)?;
            tape.scale(s, T::from_f64_lossy(0.5))?
        } else {
            let (h0, ag, ax) = fuse(tape, views[0], x, f)?;
            alpha = Some((ag, ax));
            h0
        };
        let hidden = ggrl_forward(tape, &data.adj, h0, &p.ggrl, cfg.ggrl_linear)?;
        let probs = predict(tape, hidden, p.w_p, p.b_p)?;
        Ok(ForwardOutput { probs, views, alpha, hidden })
    }

    /// Eval-mode probabilities.
    pub fn predict_proba(&self, data: &PreparedGraph<T>) -> Result<Vec<T>> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, data, Mode::Eval)?;
        Ok(tape.value(out.probs).data().to_vec())
    }

    /// Eval-mode tribe representations, `n x hidden`.
    pub fn embed(&self, data: &PreparedGraph<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, data, Mode::Eval)?;
        let v = out.views.first().ok_or_else(|| ModelError::BadConfig("model has no tribe encoder".into()))?;
        Ok(tape.value(*v).clone())
    }

    /// Writes parameters, the attribute scaler and the configuration.
    ///
    /// Besides the parameters the file holds `meta.*` scalars describing the
    /// configuration and `buffer.attr_mean` / `buffer.attr_std`.
    pub fn save_checkpoint<W: Write>(&self, out: W) -> Result<()> {
        let c = &self.cfg;
        let a = &c.ablation;
        let meta: Vec<(String, Tensor<T>)> = [
            ("hidden", c.hidden as f64),
            ("d_e", c.d_e as f64),
            ("gin_layers", c.gin_layers as f64),
            ("ggrl_layers", c.ggrl_layers as f64),
            ("b_deg", c.b_deg as f64),
            ("b_spd", c.b_spd as f64),
            ("dropout", c.dropout),
            ("ggrl_linear", f64::from(u8::from(c.ggrl_linear))),
            ("attr_dim", self.attr_dim as f64),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .chain(Ablation::NAMES.iter().zip(a.flags()).map(|(n, on)| (format!("no_{n}"), f64::from(u8::from(on)))))
        .map(|(k, v)| (format!("meta.{k}"), Tensor::scalar(T::from_f64_lossy(v))))
        .collect();
        let buffers = [
            ("buffer.attr_mean".to_string(), Tensor::from_vec(1, self.attr_dim, self.attr_mean.clone())?),
            ("buffer.attr_std".to_string(), Tensor::from_vec(1, self.attr_dim, self.attr_std.clone())?),
        ];
        let entries = meta
            .iter()
            .chain(&buffers)
            .map(|(n, t)| (n.as_str(), t))
            .chain(self.store.entries());
        write_checkpoint(out, entries)?;
        Ok(())
    }

    /// Rebuilds a model from [`Model::save_checkpoint`] output.
    pub fn load_checkpoint<R: Read>(input: R) -> Result<Self> {
        let entries: Vec<(String, Tensor<T>)> = read_checkpoint(input)?;
        let find = |name: &str| entries.iter().find(|(n, _)| n == name).map(|(_, t)| t);
        let missing = |name: &str| ModelError::BadConfig(format!("checkpoint lacks {name}"));
        let meta = |k: &str| -> Result<f64> {
            let key = format!("meta.{k}");
            let t = find(&key).ok_or_else(|| missing(&key))?;
            Ok(t.item().to_f64_lossy())
        };
        let count = |k: &str| -> Result<usize> {
            let v = meta(k)?;
            if v < 0.0 || v.fract() != 0.0 {
                return Err(ModelError::BadConfig(format!("meta.{k} = {v} is not a count")));
            }
            Ok(v as usize)
        };
        let mut ablation = Ablation::default();
        for n in Ablation::NAMES {
            ablation.set(n, meta(&format!("no_{n}"))? != 0.0);
        }
        let cfg = ModelConfig {
            hidden: count("hidden")?,
            d_e: count("d_e")?,
            gin_layers: count("gin_layers")?,
            ggrl_layers: count("ggrl_layers")?,
            b_deg: count("b_deg")?,
            b_spd: count("b_spd")?,
            dropout: meta("dropout")?,
            ggrl_linear: meta("ggrl_linear")? != 0.0,
            ablation,
        };
        let attr_dim = count("attr_dim")?;
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let mut model = Self::with_layout(cfg, attr_dim, &mut rng)?;
        let ids: Vec<ParamId> = model.store.ids().collect();
        for id in ids {
            let name = model.store.name(id).to_string();
            let t = find(&name).ok_or_else(|| missing(&name))?;
            if t.shape() != model.store.value(id).shape() {
                return Err(ModelError::BadConfig(format!("{name} has shape {:?}", t.shape())));
            }
            *model.store.value_mut(id) = t.clone();
        }
        let buffer = |name: &str| -> Result<Vec<T>> {
            let t = find(name).ok_or_else(|| missing(name))?;
            if t.shape() != (1, attr_dim) {
                return Err(ModelError::BadConfig(format!("{name} has shape {:?}", t.shape())));
            }
            Ok(t.data().to_vec())
        };
        model.attr_mean = buffer("buffer.attr_mean")?;
        model.attr_std = buffer("buffer.attr_std")?;
        Ok(model)
    }
}

/// Column means and standard deviations (population), with zero spread
/// replaced by one.
fn column_stats(global: &GlobalGraph) -> (Vec<f64>, Vec<f64>) {
    let (n, d) = (global.n_central(), global.attr_dim());
    let mut mean = vec![0.0; d];
    for i in 0..n {
        for (m, &v) in mean.iter_mut().zip(global.attr_row(i)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n.max(1) as f64);
    let mut var = vec![0.0; d];
    for i in 0..n {
        for ((s, &v), &m) in var.iter_mut().zip(global.attr_row(i)).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    let std = var
        .into_iter()
        .map(|s| {
            let sd = (s / n.max(1) as f64).sqrt();
            if sd > 0.0 {
                sd
            } else {
                1.0
            }
        })
        .collect();
    (mean, std)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::graph::{NodeKind::*, Tribe};

    fn tiny_graph() -> TribeStyleGraph {
        let tribes = vec![
            Tribe::new(0, vec![ListedCompany, Individual, UnlistedCompany], vec![(1, 0), (2, 0), (1, 2)], 0).unwrap(),
            Tribe::new(1, vec![Individual, ListedCompany], vec![(0, 1)], 1).unwrap(),
            Tribe::new(2, vec![ListedCompany], vec![], 0).unwrap(),
        ];
        let global = GlobalGraph::new(3, vec![(0, 1)], 2, vec![1.0, 2.0, 0.0, 1.0, 5.0, 3.0], vec![Some(true), Some(false), None])
            .unwrap();
        TribeStyleGraph::new(global, tribes).unwrap()
    }

    #[test]
    fn equal_attention_vectors_average_the_projections() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut tape = Tape::<f64>::new();
        let hg = tape.constant(init::glorot(4, 3, &mut rng));
        let x = tape.constant(init::glorot(4, 2, &mut rng));
        let a = init::glorot(1, 6, &mut rng);
        let p = FusionVars {
            w_g: tape.var(init::glorot(3, 3, &mut rng)),
            w_x: tape.var(init::glorot(2, 3, &mut rng)),
            a_g: tape.var(a.clone()),
            a_x: tape.var(a),
        };
        let (h0, ag, ax) = fuse(&mut tape, hg, x, &p).unwrap();
        assert!(tape.value(ag).data().iter().all(|&v| v == 0.5));
        assert!(tape.value(ax).data().iter().all(|&v| v == 0.5));
        let g = tape.value(hg).matmul(tape.value(p.w_g));
        let px = tape.value(x).matmul(tape.value(p.w_x));
        let mean = g.zip_map(&px, |a, b| 0.5 * (a + b));
        assert!(tape.value(h0).max_abs_diff(&mean) < 1e-15);
    }

    #[test]
    fn ggrl_examples() {
        let global = GlobalGraph::new(2, vec![], 0, vec![], vec![None, None]).unwrap();
        let adj = Rc::new(normalized_adjacency::<f64>(&global));
        let mut tape = Tape::new();
        let h = tape.constant(Tensor::column(vec![2.0, 4.0]));
        let w = tape.constant(Tensor::scalar(1.0));
        let out = ggrl_forward(&mut tape, &adj, h, &[w], true).unwrap();
        assert_eq!(tape.value(out).data(), &[2.0, 4.0]);

        let global = GlobalGraph::new(2, vec![(0, 1)], 0, vec![], vec![None, None]).unwrap();
        let adj = Rc::new(normalized_adjacency::<f64>(&global));
        let out = ggrl_forward(&mut tape, &adj, h, &[w], true).unwrap();
        assert_eq!(tape.value(out).data(), &[3.0, 3.0]);
    }

    #[test]
    fn predict_is_stable() {
        let mut tape = Tape::<f64>::new();
        let h = tape.constant(Tensor::column(vec![0.0, 20.0, -800.0]));
        let w = tape.constant(Tensor::scalar(1.0));
        let b = tape.constant(Tensor::zeros(1, 1));
        let p = predict(&mut tape, h, w, b).unwrap();
        let v = tape.value(p).data();
        assert_eq!(v[0], 0.5);
        assert!(v[1] > 1.0 - 1e-8 && v[1] < 1.0);
        assert!(v[2] >= 0.0 && v[2] < 1e-300);
    }

    #[test]
    fn ablations_shape_the_parameter_set() {
        let g = tiny_graph();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let names = |a: Ablation, rng: &mut ChaCha8Rng| -> Vec<String> {
            let cfg = ModelConfig { ablation: a, ..ModelConfig::default() };
            Model::<f64>::new(cfg, &g, rng).unwrap().params().entries().map(|(n, _)| n.to_string()).collect()
        };
        let full = names(Ablation::default(), &mut rng);
        assert!(full.iter().any(|n| n == "fusion.a_g"));
        let no_tse = names(Ablation { no_tse: true, ..Default::default() }, &mut rng);
        assert!(no_tse.iter().all(|n| !n.starts_with("tse.") && !n.starts_with("fusion.a")));
        let no_ggrl = names(Ablation { no_ggrl: true, ..Default::default() }, &mut rng);
        assert!(no_ggrl.iter().all(|n| !n.starts_with("ggrl.")));
        let no_emb = names(Ablation { no_emb: true, ..Default::default() }, &mut rng);
        assert!(no_emb.iter().all(|n| !n.starts_with("tse.emb")));
        let bad = ModelConfig { ablation: Ablation { no_tse: true, no_attrs: true, ..Default::default() }, ..Default::default() };
        assert!(Model::<f64>::new(bad, &g, &mut rng).is_err());
    }

    #[test]
    fn every_variant_runs_forward() {
        let g = tiny_graph();
        for list in ["", "tse", "ggrl", "cl", "fusion", "attrs", "emb", "tse,ggrl"] {
            let cfg = ModelConfig { ablation: Ablation::parse_list(list).unwrap(), ..Default::default() };
            let model = Model::<f64>::new(cfg, &g, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
            let data = model.prepare(&g).unwrap();
            let mut tape = Tape::new();
            let out = model.forward(&mut tape, &data, Mode::Train { seed: 0, epoch: 0 }).unwrap();
            assert_eq!(tape.value(out.probs).shape(), (3, 1));
            let expected_views = if cfg.ablation.no_tse { 0 } else if cfg.ablation.no_cl { 1 } else { 2 };
            assert_eq!(out.views.len(), expected_views, "ablation {list}");
        }
        assert!(Ablation::parse_list("bogus").is_err());
    }

    #[test]
    fn checkpoint_round_trip_reproduces_predictions() {
        let g = tiny_graph();
        let cfg = ModelConfig { ablation: Ablation { no_fusion: true, ..Default::default() }, ..Default::default() };
        let model = Model::<f64>::new(cfg, &g, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let mut buf = Vec::new();
        model.save_checkpoint(&mut buf).unwrap();
        let back = Model::<f64>::load_checkpoint(&buf[..]).unwrap();
        assert_eq!(back.config(), model.config());
        let (a, b) = (model.prepare(&g).unwrap(), back.prepare(&g).unwrap());
        assert_eq!(model.predict_proba(&a).unwrap(), back.predict_proba(&b).unwrap());
    }

    #[test]
    fn attributes_are_standardized() {
        let g = tiny_graph();
        let model = Model::<f64>::new(ModelConfig::default(), &g, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let data = model.prepare(&g).unwrap();
        let col0: Vec<f64> = (0..3).map(|i| data.attrs().get(i, 0)).collect();
        let mean = col0.iter().sum::<f64>() / 3.0;
        let var = col0.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 3.0;
        assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-12);
    }
}
