use crate::diffkernel::{dropout, Matrix, Tape, Var};
use crate::error::{Error, Result};
use crate::graphstore::{AttributedGraph, Csr};

use super::model::{
    AggregationMode, BoundLayer, BoundModel, BoundPredictor, Domain, ModelBundle, NsawLayer,
    PredictorHead, ProjectionEncoder,
};

/// Per-edge weights laid out on an adjacency's CSR entries.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseAttention {
    adjacency: Csr,
    values: Vec<f64>,
}

impl SparseAttention {
    pub fn new(adjacency: Csr, values: Vec<f64>) -> Result<Self> {
        if values.len() != adjacency.num_entries() {
            return Err(Error::shape(
                "sparse_attention",
                format!("{} values for {} entries", values.len(), adjacency.num_entries()),
            ));
        }
        Ok(SparseAttention { adjacency, values })
    }

    /// Keeps the entries of `dense` that lie on the adjacency pattern.
    pub fn from_dense(adjacency: &Csr, dense: &Matrix) -> Self {
        let values = (0..adjacency.num_entries())
            .map(|e| dense.get(adjacency.entry_rows()[e], adjacency.cols()[e]))
            .collect();
        SparseAttention {
            adjacency: adjacency.clone(),
            values,
        }
    }

    pub fn adjacency(&self) -> &Csr {
        &self.adjacency
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Weight of entry `(i, j)`; zero off the adjacency pattern.
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.adjacency
            .entry_index(i, j)
            .map_or(0.0, |e| self.values[e])
    }

    pub fn row_sums(&self) -> Vec<f64> {
        let off = self.adjacency.offsets();
        (0..self.adjacency.num_nodes())
            .map(|i| self.values[off[i]..off[i + 1]].iter().sum())
            .collect()
    }

    /// `max |A[i,j] - A[j,i]|` over all entries.
    pub fn max_asymmetry(&self) -> f64 {
        let rev = self.adjacency.reverse();
        (0..self.values.len())
            .map(|e| (self.values[e] - self.values[rev[e]]).abs())
            .fold(0.0, f64::max)
    }

    pub fn to_dense(&self) -> Matrix {
        let n = self.adjacency.num_nodes();
        let mut m = Matrix::zeros(n, n);
        for e in 0..self.values.len() {
            m.set(self.adjacency.entry_rows()[e], self.adjacency.cols()[e], self.values[e]);
        }
        m
    }
}

/// Attention of one layer before and after the symmetric minimum.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerAttention {
    pub raw: SparseAttention,
    pub symmetric: SparseAttention,
}

/// One entry per layer; empty when attention weighting is disabled.
pub type AttentionMatrices = Vec<LayerAttention>;

/// Tape variables produced by a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    /// `H⁰` after projection.
    pub projected: Var,
    /// Final-layer node embeddings.
    pub embeddings: Var,
    /// `(raw, symmetric)` attention columns per layer, NSAW mode only.
    pub attention: Vec<(Var, Var)>,
}

/// Dropout settings for a training-mode pass.
pub struct Training<'a> {
    pub dropout_rate: f64,
    pub rng: &'a mut crate::Rng,
}

pub fn project_tape(tape: &mut Tape, encoder: Option<Var>, features: Var) -> Result<Var> {
    match encoder {
        Some(w) => tape.matmul_nt(features, w),
        None => Ok(features),
    }
}

/// Attention scores `softmax_row(⟨relu(HU)_i, relu(HU)_j⟩)` over each node's
/// neighbors, followed by the symmetric minimum. Returns `(raw, symmetric)`.
pub fn attention_tape(
    tape: &mut Tape,
    layer: &BoundLayer,
    h: Var,
    adjacency: &Csr,
) -> Result<(Var, Var)> {
    let hu = tape.matmul(h, layer.attention)?;
    let z = tape.relu(hu)?;
    let scores = tape.pair_dot(z, z, adjacency.entry_rows().clone(), adjacency.cols().clone())?;
    let raw = tape.segment_softmax(scores, &adjacency.segments())?;
    let symmetric = tape.sym_min(raw, adjacency.reverse().clone())?;
    Ok((raw, symmetric))
}

/// `h'_v = relu(W · [m_v ‖ h_v] + b)` with `m_v` either the attention-weighted
/// neighbor sum (`weights` given) or the neighbor mean.
pub fn layer_tape(
    tape: &mut Tape,
    layer: &BoundLayer,
    h: Var,
    weights: Option<Var>,
    adjacency: &Csr,
) -> Result<Var> {
    let weights = match weights {
        Some(w) => w,
        None => {
            let mean_weights = (0..adjacency.num_entries())
                .map(|e| 1.0 / adjacency.degree(adjacency.entry_rows()[e]) as f64)
                .collect();
            tape.constant(Matrix::column(mean_weights))
        }
    };
    let messages = tape.spmm(weights, &adjacency.segments(), h)?;
    let joined = tape.concat_cols(messages, h)?;
    let linear = tape.matmul_nt(joined, layer.weight)?;
    let shifted = tape.add_row(linear, layer.bias)?;
    tape.relu(shifted)
}

/// Full pass: projection, then per layer dropout → attention → aggregation.
pub fn forward_tape(
    tape: &mut Tape,
    bound: &BoundModel,
    features: Var,
    adjacency: &Csr,
    mut training: Option<Training<'_>>,
) -> Result<ForwardPass> {
    let (rows, cols) = tape.shape(features);
    if cols != bound.encoder_input_dim {
        return Err(Error::shape(
            "forward",
            format!(
                "{} features for a {} encoder expecting {}",
                cols,
                bound.domain.as_str(),
                bound.encoder_input_dim
            ),
        ));
    }
    if rows != adjacency.num_nodes() {
        return Err(Error::shape("forward", "feature rows differ from node count"));
    }
    let projected = project_tape(tape, bound.encoder.map(|(_, v)| v), features)?;
    let mut h = projected;
    let mut attention = Vec::new();
    for layer in &bound.layers {
        if let Some(t) = training.as_mut() {
            h = dropout(tape, h, t.dropout_rate, t.rng, true)?;
        }
        let weights = match bound.mode {
            AggregationMode::Nsaw => {
                let (raw, sym) = attention_tape(tape, layer, h, adjacency)?;
                attention.push((raw, sym));
                Some(sym)
            }
            AggregationMode::Plain => None,
        };
        h = layer_tape(tape, layer, h, weights, adjacency)?;
    }
    Ok(ForwardPass {
        projected,
        embeddings: h,
        attention,
    })
}

/// Node probabilities `sigmoid(w₂ · relu(W₁ h + b₁) + b₂)` as an `n × 1` column.
pub fn predict_tape(tape: &mut Tape, head: &BoundPredictor, h: Var) -> Result<Var> {
    let hidden = tape.matmul_nt(h, head.hidden_weight)?;
    let hidden = tape.add_row(hidden, head.hidden_bias)?;
    let hidden = tape.relu(hidden)?;
    let logit = tape.matmul_nt(hidden, head.out_weight)?;
    let logit = tape.add_row(logit, head.out_bias)?;
    tape.sigmoid(logit)
}

pub fn project(encoder: &ProjectionEncoder, features: &Matrix) -> Result<Matrix> {
    if features.cols() != encoder.input_dim {
        return Err(Error::shape(
            "project",
            format!("{} features, encoder expects {}", features.cols(), encoder.input_dim),
        ));
    }
    match &encoder.weight {
        Some(w) => features.matmul_nt(w),
        None => Ok(features.clone()),
    }
}

fn bind_layer(tape: &mut Tape, layer: &NsawLayer) -> BoundLayer {
    BoundLayer {
        weight: tape.constant(layer.weight.clone()),
        bias: tape.constant(layer.bias.clone()),
        attention: tape.constant(layer.attention.clone()),
    }
}

/// Row-softmax attention of one layer (before symmetrization).
pub fn compute_attention(layer: &NsawLayer, h: &Matrix, adjacency: &Csr) -> Result<SparseAttention> {
    if h.cols() != layer.in_dim() || h.rows() != adjacency.num_nodes() {
        return Err(Error::shape(
            "compute_attention",
            format!("H {:?} for layer in_dim {}", h.shape(), layer.in_dim()),
        ));
    }
    let mut tape = Tape::new();
    let bound = bind_layer(&mut tape, layer);
    let hv = tape.constant(h.clone());
    let (raw, _) = attention_tape(&mut tape, &bound, hv, adjacency)?;
    SparseAttention::new(adjacency.clone(), tape.value(raw).as_slice().to_vec())
}

/// `Ã[i,j] = Ã[j,i] = min(A[i,j], A[j,i])`, without renormalization.
pub fn symmetrize_attention(attention: &SparseAttention) -> Result<SparseAttention> {
    let adj = attention.adjacency();
    if !adj.is_well_formed() {
        return Err(Error::Data("attention sparsity pattern is not symmetric".into()));
    }
    let rev = adj.reverse();
    let v = attention.values();
    let values = (0..v.len()).map(|e| v[e].min(v[rev[e]])).collect();
    SparseAttention::new(adj.clone(), values)
}

/// One layer on plain matrices. `attention` is the symmetrized weight matrix
/// and must be given exactly in NSAW mode.
pub fn nsaw_layer_forward(
    layer: &NsawLayer,
    h: &Matrix,
    attention: Option<&SparseAttention>,
    adjacency: &Csr,
    mode: AggregationMode,
) -> Result<Matrix> {
    layer.validate()?;
    if h.cols() != layer.in_dim() || h.rows() != adjacency.num_nodes() {
        return Err(Error::shape("nsaw_layer_forward", format!("H {:?}", h.shape())));
    }
    let mut tape = Tape::new();
    let bound = bind_layer(&mut tape, layer);
    let hv = tape.constant(h.clone());
    let weights = match (mode, attention) {
        (AggregationMode::Nsaw, Some(a)) => {
            if a.values().len() != adjacency.num_entries() {
                return Err(Error::shape("nsaw_layer_forward", "attention layout"));
            }
            Some(tape.constant(Matrix::column(a.values().to_vec())))
        }
        (AggregationMode::Plain, None) => None,
        _ => {
            return Err(Error::Config(
                "attention weights must be supplied exactly in nsaw mode".into(),
            ))
        }
    };
    let out = layer_tape(&mut tape, &bound, hv, weights, adjacency)?;
    Ok(tape.value(out).clone())
}

/// Final-layer embeddings and per-layer attention for `graph` in `domain`.
/// Without `training` the pass is deterministic and dropout-free.
pub fn forward_embeddings(
    bundle: &ModelBundle,
    graph: &AttributedGraph,
    domain: Domain,
    training: Option<Training<'_>>,
) -> Result<(Matrix, AttentionMatrices)> {
    let mut tape = Tape::new();
    let bound = bundle.bind(&mut tape, domain, false)?;
    let x = tape.constant(graph.features().clone());
    let pass = forward_tape(&mut tape, &bound, x, graph.adjacency(), training)?;
    let adj = graph.adjacency();
    let attention = pass
        .attention
        .iter()
        .map(|&(raw, sym)| {
            Ok(LayerAttention {
                raw: SparseAttention::new(adj.clone(), tape.value(raw).as_slice().to_vec())?,
                symmetric: SparseAttention::new(adj.clone(), tape.value(sym).as_slice().to_vec())?,
            })
        })
        .collect::<Result<_>>()?;
    Ok((tape.value(pass.embeddings).clone(), attention))
}

/// Anomaly probability per node from final-layer embeddings.
pub fn predict(head: &PredictorHead, embeddings: &Matrix) -> Result<Vec<f64>> {
    if embeddings.cols() != head.hidden_weight.cols() {
        return Err(Error::shape(
            "predict",
            format!("{} embedding columns, head expects {}", embeddings.cols(), head.hidden_weight.cols()),
        ));
    }
    let mut tape = Tape::new();
    let bound = BoundPredictor {
        hidden_weight: tape.constant(head.hidden_weight.clone()),
        hidden_bias: tape.constant(head.hidden_bias.clone()),
        out_weight: tape.constant(head.out_weight.clone()),
        out_bias: tape.constant(head.out_bias.clone()),
    };
    let h = tape.constant(embeddings.clone());
    let p = predict_tape(&mut tape, &bound, h)?;
    Ok(tape.value(p).as_slice().to_vec())
}
