//! Model architecture: projection encoders, symmetric attention weighting,
//! GraphSAGE-style layers and the predictor head.

mod forward;
mod model;

pub use forward::{
    attention_tape, compute_attention, forward_embeddings, forward_tape, layer_tape,
    nsaw_layer_forward, predict, predict_tape, project, project_tape, symmetrize_attention,
    AttentionMatrices, ForwardPass, LayerAttention, SparseAttention, Training,
};
pub use model::{
    glorot, AggregationMode, BoundLayer, BoundModel, BoundPredictor, Domain, ModelBundle,
    ModelDims, NsawLayer, PredictorHead, ProjectionEncoder, SOURCE_ENCODER, TARGET_ENCODER,
};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffkernel::Matrix;
    use crate::graphstore::{AttributedGraph, Csr};

    fn csr(n: usize, edges: &[(usize, usize)]) -> Csr {
        Csr::from_edges(n, edges.iter().copied()).unwrap().0
    }

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
        glorot(rows, cols, 1, 1, &mut crate::rng_from_seed(seed))
    }

    #[test]
    fn projection_cases() {
        let x = random_matrix(5, 3, 1);
        let id = ProjectionEncoder::from_weight(Domain::Source, Matrix::identity(3));
        assert_eq!(project(&id, &x).unwrap(), x);
        let zero = ProjectionEncoder::from_weight(Domain::Source, Matrix::zeros(4, 3));
        assert_eq!(project(&zero, &x).unwrap(), Matrix::zeros(5, 4));

        let p = random_matrix(4, 3, 2);
        let enc = ProjectionEncoder::from_weight(Domain::Target, p.clone());
        let out = project(&enc, &x).unwrap();
        for i in 0..5 {
            for r in 0..4 {
                let direct: f64 = (0..3).map(|c| p.get(r, c) * x.get(i, c)).sum();
                assert!((out.get(i, r) - direct).abs() < 1e-14);
            }
        }
        assert!(project(&enc, &random_matrix(5, 2, 3)).is_err());
    }

    fn identity_attention_layer(dim: usize) -> NsawLayer {
        NsawLayer {
            weight: Matrix::zeros(dim, 2 * dim),
            bias: Matrix::zeros(1, dim),
            attention: Matrix::identity(dim),
        }
    }

    #[test]
    fn attention_single_neighbor_and_uniform() {
        let adj = csr(4, &[(0, 1), (1, 2), (1, 3)]);
        let layer = identity_attention_layer(2);
        let h = Matrix::filled(4, 2, 0.7);
        let a = compute_attention(&layer, &h, &adj).unwrap();
        assert_eq!(a.get(0, 1), 1.0);
        for j in [0, 2, 3] {
            assert!((a.get(1, j) - 1.0 / 3.0).abs() < 1e-15);
        }
        assert_eq!(a.get(0, 2), 0.0);
    }

    #[test]
    fn attention_triangle_hand_softmax() {
        let adj = csr(3, &[(0, 1), (1, 2), (0, 2)]);
        let h = Matrix::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]]);
        let a = compute_attention(&identity_attention_layer(2), &h, &adj).unwrap();
        let e = std::f64::consts::E;
        assert!((a.get(0, 1) - e / (e + 1.0)).abs() < 1e-12);
        assert!((a.get(0, 2) - 1.0 / (e + 1.0)).abs() < 1e-12);
        assert!((a.get(0, 1) - 0.7311).abs() < 1e-4);
    }

    #[test]
    fn symmetric_minimum() {
        let adj = csr(2, &[(0, 1)]);
        let dense = Matrix::from_rows(&[vec![0.0, 0.8], vec![0.2, 0.0]]);
        let sym = symmetrize_attention(&SparseAttention::from_dense(&adj, &dense)).unwrap();
        assert_eq!(sym.get(0, 1), 0.2);
        assert_eq!(sym.get(1, 0), 0.2);

        let adj3 = csr(3, &[(0, 1), (1, 2)]);
        let symmetric = Matrix::from_rows(&[
            vec![0.0, 0.4, 0.0],
            vec![0.4, 0.0, 0.9],
            vec![0.0, 0.9, 0.0],
        ]);
        let a = SparseAttention::from_dense(&adj3, &symmetric);
        assert_eq!(symmetrize_attention(&a).unwrap(), a);

        let one_way = Matrix::from_rows(&[vec![0.0, 0.0], vec![0.6, 0.0]]);
        let s = symmetrize_attention(&SparseAttention::from_dense(&adj, &one_way)).unwrap();
        assert_eq!((s.get(0, 1), s.get(1, 0)), (0.0, 0.0));
    }

    #[test]
    fn zero_attention_suppresses_neighbors() {
        let adj = csr(3, &[(0, 1), (1, 2)]);
        let layer = NsawLayer::random(2, 3, 2, &mut crate::rng_from_seed(4));
        let h = random_matrix(3, 2, 5);
        let zero = SparseAttention::new(adj.clone(), vec![0.0; adj.num_entries()]).unwrap();
        let out = nsaw_layer_forward(&layer, &h, Some(&zero), &adj, AggregationMode::Nsaw).unwrap();
        for v in 0..3 {
            for r in 0..3 {
                let self_part: f64 = (0..2).map(|c| layer.weight.get(r, 2 + c) * h.get(v, c)).sum();
                let expected = (self_part + layer.bias.get(0, r)).max(0.0);
                assert!((out.get(v, r) - expected).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn plain_mean_of_identical_neighbors() {
        let adj = csr(3, &[(0, 1), (1, 2), (0, 2)]);
        let mut w = Matrix::zeros(2, 4);
        for i in 0..2 {
            w.set(i, i, 0.5);
            w.set(i, 2 + i, 0.5);
        }
        let layer = NsawLayer {
            weight: w,
            bias: Matrix::zeros(1, 2),
            attention: Matrix::identity(2),
        };
        let h = Matrix::from_rows(&[vec![0.5, -2.0], vec![0.5, -2.0], vec![0.5, -2.0]]);
        let out = nsaw_layer_forward(&layer, &h, None, &adj, AggregationMode::Plain).unwrap();
        assert_eq!(out, h.map(|x| x.max(0.0)));
        assert!(nsaw_layer_forward(&layer, &h, None, &adj, AggregationMode::Nsaw).is_err());
    }

    #[test]
    fn path_graph_hand_computation() {
        // Path 0-1-2, plain mode, W = [1 1 | 1 0], b = [0.5]; H = [1, 2, -3] (1-dim).
        let adj = csr(3, &[(0, 1), (1, 2)]);
        let layer = NsawLayer {
            weight: Matrix::from_rows(&[vec![1.0, 1.0], vec![1.0, 0.0]]),
            bias: Matrix::from_rows(&[vec![0.5, 0.0]]),
            attention: Matrix::identity(1),
        };
        let h = Matrix::column(vec![1.0, 2.0, -3.0]);
        let out = nsaw_layer_forward(&layer, &h, None, &adj, AggregationMode::Plain).unwrap();
        // node 0: m = 2      → [2+1+0.5, 2]    = [3.5, 2]
        // node 1: m = -1     → [-1+2+0.5, -1]  = [1.5, 0]
        // node 2: m = 2      → [2-3+0.5, 2]    = [0, 2]
        assert_eq!(
            out,
            Matrix::from_rows(&[vec![3.5, 2.0], vec![1.5, 0.0], vec![0.0, 2.0]])
        );

        // NSAW mode with Ã(0,1)=0.25, Ã(1,2)=0.5.
        let sym = SparseAttention::from_dense(
            &adj,
            &Matrix::from_rows(&[vec![0.0, 0.25, 0.0], vec![0.25, 0.0, 0.5], vec![0.0, 0.5, 0.0]]),
        );
        let out = nsaw_layer_forward(&layer, &h, Some(&sym), &adj, AggregationMode::Nsaw).unwrap();
        // node 0: m = 0.5          → [0.5+1+0.5, 0.5]  = [2, 0.5]
        // node 1: m = 0.25-1.5     → [-1.25+2+0.5, 0]  = [1.25, 0]
        // node 2: m = 1            → [1-3+0.5, 1]      = [0, 1]
        assert_eq!(
            out,
            Matrix::from_rows(&[vec![2.0, 0.5], vec![1.25, 0.0], vec![0.0, 1.0]])
        );
    }

    fn toy_graph() -> AttributedGraph {
        AttributedGraph::from_edges(
            "toy",
            5,
            &[(0, 1), (1, 2), (2, 3), (0, 3)],
            random_matrix(5, 3, 9),
            Some(vec![0, 0, 1, 0, 0]),
        )
        .unwrap()
    }

    fn small_dims() -> ModelDims {
        ModelDims {
            embedding_dim: 4,
            hidden_dim: 4,
            attn_dim: 3,
            num_layers: 2,
            predictor_hidden: 3,
        }
    }

    #[test]
    fn forward_is_deterministic_and_mode_switch_is_plain() {
        let g = toy_graph();
        let mut rng = crate::rng_from_seed(1);
        let bundle = ModelBundle::init(3, &small_dims(), false, true, &mut rng).unwrap();
        let (a, att) = forward_embeddings(&bundle, &g, Domain::Source, None).unwrap();
        let (b, _) = forward_embeddings(&bundle, &g, Domain::Source, None).unwrap();
        assert_eq!(a, b);
        assert_eq!(att.len(), 2);
        // isolated node 4 has an empty attention row
        assert_eq!(att[0].raw.row_sums()[4], 0.0);

        let mut plain = bundle.clone();
        plain.nsaw_enabled = false;
        let (p, att) = forward_embeddings(&plain, &g, Domain::Source, None).unwrap();
        assert!(att.is_empty());
        let mut h = project(&plain.source_encoder, g.features()).unwrap();
        for layer in &plain.layers {
            h = nsaw_layer_forward(layer, &h, None, g.adjacency(), AggregationMode::Plain).unwrap();
        }
        assert_eq!(p, h);
        assert!(forward_embeddings(&bundle, &g, Domain::Target, None).is_err());
    }

    #[test]
    fn predictor_cases() {
        let h = random_matrix(3, 4, 2);
        let zero = PredictorHead::zeros(4, 3);
        assert_eq!(predict(&zero, &h).unwrap(), vec![0.5; 3]);

        // one node h = [1, -1]; W1 = [[1, 0], [0, 1]], b1 = [0, 0.5], w2 = [2, -1], b2 = 0.1
        // hidden = relu([1, -0.5]) = [1, 0]; logit = 2 + 0.1 = 2.1
        let head = PredictorHead {
            hidden_weight: Matrix::identity(2),
            hidden_bias: Matrix::from_rows(&[vec![0.0, 0.5]]),
            out_weight: Matrix::from_rows(&[vec![2.0, -1.0]]),
            out_bias: Matrix::scalar(0.1),
        };
        let p = predict(&head, &Matrix::from_rows(&[vec![1.0, -1.0]])).unwrap();
        assert!((p[0] - 1.0 / (1.0 + (-2.1f64).exp())).abs() < 1e-15);

        let mut prev = 0.0;
        for bias in [-5.0, 0.0, 3.0, 30.0] {
            let mut head = PredictorHead::zeros(2, 2);
            head.out_bias = Matrix::scalar(bias);
            let p = predict(&head, &Matrix::zeros(1, 2)).unwrap()[0];
            assert!(p > prev && p <= 1.0);
            prev = p;
        }
        assert!(predict(&zero, &random_matrix(3, 5, 1)).is_err());
    }

    #[test]
    fn bundle_validation_and_names() {
        let mut rng = crate::rng_from_seed(3);
        let mut bundle = ModelBundle::init(3, &small_dims(), false, true, &mut rng).unwrap();
        bundle.validate().unwrap();
        let names: Vec<_> = bundle.named_tensors().into_iter().map(|(n, _)| n).collect();
        let names_mut: Vec<_> = bundle.named_tensors_mut().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names, names_mut);
        assert_eq!(names[0], SOURCE_ENCODER);
        bundle.layers[1].attention = Matrix::zeros(5, 3);
        assert!(bundle.validate().is_err());
        assert!(ModelBundle::init(3, &small_dims(), true, true, &mut rng).is_err());
    }
}
