use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::diffkernel::{Matrix, Tape, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Source => "source",
            Domain::Target => "target",
        }
    }
}

/// Message-passing mode of every layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AggregationMode {
    /// Symmetric-min attention weighted sum.
    Nsaw,
    /// Neighbor mean.
    Plain,
}

/// Layer widths of a bundle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelDims {
    /// Shared input width after projection.
    pub embedding_dim: usize,
    /// Output width of each message-passing layer.
    pub hidden_dim: usize,
    /// Width of the attention projection.
    pub attn_dim: usize,
    pub num_layers: usize,
    pub predictor_hidden: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        ModelDims {
            embedding_dim: 40,
            hidden_dim: 40,
            attn_dim: 40,
            num_layers: 2,
            predictor_hidden: 40,
        }
    }
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        if self.embedding_dim == 0
            || self.hidden_dim == 0
            || self.attn_dim == 0
            || self.predictor_hidden == 0
        {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if self.num_layers == 0 {
            return Err(Error::Config("num_layers must be at least 1".into()));
        }
        Ok(())
    }

    /// Width of the final node embeddings.
    pub fn output_dim(&self) -> usize {
        self.hidden_dim
    }
}

/// Uniform Glorot initialization, `a = sqrt(6 / (fan_in + fan_out))`.
pub fn glorot(rows: usize, cols: usize, fan_in: usize, fan_out: usize, rng: &mut crate::Rng) -> Matrix {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.random_range(-a..a)).collect();
    Matrix::from_vec(rows, cols, data).expect("sized")
}

/// Linear map from a domain's feature space into the shared space,
/// `h⁰_v = P · x_v`. The identity variant is used when both domains already
/// share a feature space of the right width.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionEncoder {
    pub domain: Domain,
    pub input_dim: usize,
    pub output_dim: usize,
    /// `[output_dim × input_dim]`; `None` for the identity encoder.
    pub weight: Option<Matrix>,
}

impl ProjectionEncoder {
    pub fn random(domain: Domain, input_dim: usize, output_dim: usize, rng: &mut crate::Rng) -> Self {
        ProjectionEncoder {
            domain,
            input_dim,
            output_dim,
            weight: Some(glorot(output_dim, input_dim, input_dim, output_dim, rng)),
        }
    }

    pub fn identity(domain: Domain, dim: usize) -> Self {
        ProjectionEncoder {
            domain,
            input_dim: dim,
            output_dim: dim,
            weight: None,
        }
    }

    pub fn from_weight(domain: Domain, weight: Matrix) -> Self {
        ProjectionEncoder {
            domain,
            input_dim: weight.cols(),
            output_dim: weight.rows(),
            weight: Some(weight),
        }
    }

    pub fn is_identity(&self) -> bool {
        self.weight.is_none()
    }

    /// Copy of this encoder relabeled for another domain.
    pub fn cloned_for(&self, domain: Domain) -> Self {
        ProjectionEncoder {
            domain,
            ..self.clone()
        }
    }
}

/// One message-passing layer: `W [out × 2·in]`, `b [1 × out]`, `U [in × attn]`.
#[derive(Debug, Clone, PartialEq)]
pub struct NsawLayer {
    pub weight: Matrix,
    pub bias: Matrix,
    pub attention: Matrix,
}

impl NsawLayer {
    pub fn random(in_dim: usize, out_dim: usize, attn_dim: usize, rng: &mut crate::Rng) -> Self {
        NsawLayer {
            weight: glorot(out_dim, 2 * in_dim, 2 * in_dim, out_dim, rng),
            bias: Matrix::zeros(1, out_dim),
            attention: glorot(in_dim, attn_dim, in_dim, attn_dim, rng),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.attention.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.weight.cols() == 2 * self.attention.rows()
            && self.bias.shape() == (1, self.weight.rows());
        if !ok {
            return Err(Error::shape(
                "nsaw_layer",
                format!(
                    "W {:?}, b {:?}, U {:?}",
                    self.weight.shape(),
                    self.bias.shape(),
                    self.attention.shape()
                ),
            ));
        }
        Ok(())
    }
}

/// One-hidden-layer MLP producing a single logit per node.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictorHead {
    pub hidden_weight: Matrix,
    pub hidden_bias: Matrix,
    pub out_weight: Matrix,
    pub out_bias: Matrix,
}

impl PredictorHead {
    pub fn random(in_dim: usize, hidden: usize, rng: &mut crate::Rng) -> Self {
        PredictorHead {
            hidden_weight: glorot(hidden, in_dim, in_dim, hidden, rng),
            hidden_bias: Matrix::zeros(1, hidden),
            out_weight: glorot(1, hidden, hidden, 1, rng),
            out_bias: Matrix::zeros(1, 1),
        }
    }

    pub fn zeros(in_dim: usize, hidden: usize) -> Self {
        PredictorHead {
            hidden_weight: Matrix::zeros(hidden, in_dim),
            hidden_bias: Matrix::zeros(1, hidden),
            out_weight: Matrix::zeros(1, hidden),
            out_bias: Matrix::zeros(1, 1),
        }
    }
}

/// Source/target encoders, the shared layer stack and the predictor head.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub source_encoder: ProjectionEncoder,
    pub target_encoder: Option<ProjectionEncoder>,
    pub layers: Vec<NsawLayer>,
    pub predictor: PredictorHead,
    pub nsaw_enabled: bool,
}

pub const SOURCE_ENCODER: &str = "source_encoder.weight";
pub const TARGET_ENCODER: &str = "target_encoder.weight";

impl ModelBundle {
    /// Fresh bundle for a source feature space of width `source_dim`.
    /// Parameters are drawn in a fixed order: encoder, then each layer's `W`
    /// and `U`, then the predictor.
    pub fn init(
        source_dim: usize,
        dims: &ModelDims,
        identity_encoder: bool,
        nsaw_enabled: bool,
        rng: &mut crate::Rng,
    ) -> Result<Self> {
        dims.validate()?;
        let source_encoder = if identity_encoder {
            if source_dim != dims.embedding_dim {
                return Err(Error::Config(format!(
                    "identity encoder needs feature_dim == embedding_dim ({source_dim} vs {})",
                    dims.embedding_dim
                )));
            }
            ProjectionEncoder::identity(Domain::Source, source_dim)
        } else {
            ProjectionEncoder::random(Domain::Source, source_dim, dims.embedding_dim, rng)
        };
        let mut layers = Vec::with_capacity(dims.num_layers);
        let mut in_dim = dims.embedding_dim;
        for _ in 0..dims.num_layers {
            layers.push(NsawLayer::random(in_dim, dims.hidden_dim, dims.attn_dim, rng));
            in_dim = dims.hidden_dim;
        }
        let predictor = PredictorHead::random(in_dim, dims.predictor_hidden, rng);
        Ok(ModelBundle {
            source_encoder,
            target_encoder: None,
            layers,
            predictor,
            nsaw_enabled,
        })
    }

    pub fn embedding_dim(&self) -> usize {
        self.source_encoder.output_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(self.embedding_dim(), NsawLayer::out_dim)
    }

    pub fn encoder(&self, domain: Domain) -> Result<&ProjectionEncoder> {
        match domain {
            Domain::Source => Ok(&self.source_encoder),
            Domain::Target => self
                .target_encoder
                .as_ref()
                .ok_or_else(|| Error::Config("bundle has no target encoder".into())),
        }
    }

    pub fn mode(&self) -> AggregationMode {
        if self.nsaw_enabled {
            AggregationMode::Nsaw
        } else {
            AggregationMode::Plain
        }
    }

    /// Checks the layer chain: encoder output feeds layer 0 and each layer's
    /// output feeds the next.
    pub fn validate(&self) -> Result<()> {
        let mut width = self.embedding_dim();
        if let Some(t) = &self.target_encoder {
            if t.output_dim != width {
                return Err(Error::shape(
                    "bundle",
                    format!("target encoder outputs {} but source outputs {width}", t.output_dim),
                ));
            }
        }
        for (i, layer) in self.layers.iter().enumerate() {
            layer.validate()?;
            if layer.in_dim() != width {
                return Err(Error::shape(
                    "bundle",
                    format!("layer {i} expects {} inputs, receives {width}", layer.in_dim()),
                ));
            }
            width = layer.out_dim();
        }
        if self.predictor.hidden_weight.cols() != width {
            return Err(Error::shape("bundle", "predictor input width"));
        }
        Ok(())
    }

    /// Every tensor with a stable name, in a fixed order.
    pub fn named_tensors(&self) -> Vec<(String, &Matrix)> {
        let mut out = Vec::new();
        if let Some(w) = &self.source_encoder.weight {
            out.push((SOURCE_ENCODER.to_string(), w));
        }
        if let Some(w) = self.target_encoder.as_ref().and_then(|t| t.weight.as_ref()) {
            out.push((TARGET_ENCODER.to_string(), w));
        }
        out.extend(self.decoder_tensors());
        out
    }

    /// Shared layer and predictor tensors (everything frozen at test time).
    pub fn decoder_tensors(&self) -> Vec<(String, &Matrix)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("layers.{i}.weight"), &l.weight));
            out.push((format!("layers.{i}.bias"), &l.bias));
            out.push((format!("layers.{i}.attention"), &l.attention));
        }
        let p = &self.predictor;
        out.push(("predictor.hidden.weight".into(), &p.hidden_weight));
        out.push(("predictor.hidden.bias".into(), &p.hidden_bias));
        out.push(("predictor.out.weight".into(), &p.out_weight));
        out.push(("predictor.out.bias".into(), &p.out_bias));
        out
    }

    /// Mutable counterpart of [`Self::named_tensors`], same order.
    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        let mut out = Vec::new();
        if let Some(w) = self.source_encoder.weight.as_mut() {
            out.push((SOURCE_ENCODER.to_string(), w));
        }
        if let Some(w) = self.target_encoder.as_mut().and_then(|t| t.weight.as_mut()) {
            out.push((TARGET_ENCODER.to_string(), w));
        }
        for (i, l) in self.layers.iter_mut().enumerate() {
            out.push((format!("layers.{i}.weight"), &mut l.weight));
            out.push((format!("layers.{i}.bias"), &mut l.bias));
            out.push((format!("layers.{i}.attention"), &mut l.attention));
        }
        let p = &mut self.predictor;
        out.push(("predictor.hidden.weight".into(), &mut p.hidden_weight));
        out.push(("predictor.hidden.bias".into(), &mut p.hidden_bias));
        out.push(("predictor.out.weight".into(), &mut p.out_weight));
        out.push(("predictor.out.bias".into(), &mut p.out_bias));
        out
    }

    /// Records the parameters used for `domain` on `tape`. With `trainable`
    /// every parameter receives gradients.
    pub fn bind(&self, tape: &mut Tape, domain: Domain, trainable: bool) -> Result<BoundModel> {
        let mut leaf = |m: &Matrix| {
            if trainable {
                tape.param(m.clone())
            } else {
                tape.constant(m.clone())
            }
        };
        let encoder = self.encoder(domain)?;
        let encoder_var = encoder.weight.as_ref().map(&mut leaf);
        let encoder_name = match domain {
            Domain::Source => SOURCE_ENCODER,
            Domain::Target => TARGET_ENCODER,
        };
        let layers = self
            .layers
            .iter()
            .map(|l| BoundLayer {
                weight: leaf(&l.weight),
                bias: leaf(&l.bias),
                attention: leaf(&l.attention),
            })
            .collect();
        let p = &self.predictor;
        let predictor = BoundPredictor {
            hidden_weight: leaf(&p.hidden_weight),
            hidden_bias: leaf(&p.hidden_bias),
            out_weight: leaf(&p.out_weight),
            out_bias: leaf(&p.out_bias),
        };
        Ok(BoundModel {
            domain,
            encoder: encoder_var.map(|v| (encoder_name, v)),
            encoder_input_dim: encoder.input_dim,
            layers,
            predictor,
            mode: self.mode(),
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundLayer {
    pub weight: Var,
    pub bias: Var,
    pub attention: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct BoundPredictor {
    pub hidden_weight: Var,
    pub hidden_bias: Var,
    pub out_weight: Var,
    pub out_bias: Var,
}

/// Tape variables for one bundle and domain.
#[derive(Debug, Clone)]
pub struct BoundModel {
    pub domain: Domain,
    pub encoder: Option<(&'static str, Var)>,
    pub encoder_input_dim: usize,
    pub layers: Vec<BoundLayer>,
    pub predictor: BoundPredictor,
    pub mode: AggregationMode,
}

impl BoundModel {
    /// Swaps in `var` for the tensor called `name`.
    pub fn replace(&mut self, name: &str, var: Var) -> Result<()> {
        if name == SOURCE_ENCODER || name == TARGET_ENCODER {
            return match self.encoder.as_mut() {
                Some((n, v)) if *n == name => {
                    *v = var;
                    Ok(())
                }
                _ => Err(Error::Config(format!("{name} is not bound"))),
            };
        }
        let p = &mut self.predictor;
        let slot = match name {
            "predictor.hidden.weight" => &mut p.hidden_weight,
            "predictor.hidden.bias" => &mut p.hidden_bias,
            "predictor.out.weight" => &mut p.out_weight,
            "predictor.out.bias" => &mut p.out_bias,
            _ => {
                let parsed = name
                    .strip_prefix("layers.")
                    .and_then(|r| r.split_once('.'))
                    .and_then(|(i, field)| Some((i.parse::<usize>().ok()?, field)));
                let (i, field) = parsed.ok_or_else(|| Error::Config(format!("unknown tensor {name}")))?;
                let layer = self
                    .layers
                    .get_mut(i)
                    .ok_or_else(|| Error::Config(format!("unknown tensor {name}")))?;
                match field {
                    "weight" => &mut layer.weight,
                    "bias" => &mut layer.bias,
                    "attention" => &mut layer.attention,
                    _ => return Err(Error::Config(format!("unknown tensor {name}"))),
                }
            }
        };
        *slot = var;
        Ok(())
    }

    /// Variables under the same names as [`ModelBundle::named_tensors`].
    pub fn named_vars(&self) -> Vec<(String, Var)> {
        let mut out = Vec::new();
        if let Some((name, v)) = self.encoder {
            out.push((name.to_string(), v));
        }
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("layers.{i}.weight"), l.weight));
            out.push((format!("layers.{i}.bias"), l.bias));
            out.push((format!("layers.{i}.attention"), l.attention));
        }
        let p = &self.predictor;
        out.push(("predictor.hidden.weight".into(), p.hidden_weight));
        out.push(("predictor.hidden.bias".into(), p.hidden_bias));
        out.push(("predictor.out.weight".into(), p.out_weight));
        out.push(("predictor.out.bias".into(), p.out_bias));
        out
    }
}
