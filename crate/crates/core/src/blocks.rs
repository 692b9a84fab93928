//! Patch stem, graph convolution and PGN blocks.

use crate::error::{Error, Result};
use crate::graph::{dilated_knn_graph, FeatureGraph};
use crate::params::Bound;
use crate::scalar::Scalar;
use crate::tensor::{ConvGeom, Tape, Tensor, ValueId};

/// Node features `[N × D]` laid out row-major over a `(freq, time)` grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchNodes {
    pub features: ValueId,
    pub grid: (usize, usize),
}

impl PatchNodes {
    pub fn count(&self) -> usize {
        self.grid.0 * self.grid.1
    }
}

/// Parameters of the max-relative graph convolution sub-layer.
#[derive(Debug, Clone, Copy)]
pub struct GraphConvParams {
    pub norm: Option<(ValueId, ValueId)>,
    pub w_in: ValueId,
    pub b_in: ValueId,
    pub w_update: ValueId,
    pub b_update: ValueId,
    pub w_out: ValueId,
    pub b_out: ValueId,
}

#[derive(Debug, Clone, Copy)]
pub struct FfnParams {
    pub norm: Option<(ValueId, ValueId)>,
    pub w1: ValueId,
    pub b1: ValueId,
    pub w2: ValueId,
    pub b2: ValueId,
}

#[derive(Debug, Clone, Copy)]
pub struct PgnBlockParams {
    pub conv: GraphConvParams,
    pub ffn: FfnParams,
}

impl PgnBlockParams {
    pub fn from_bound(b: &Bound, prefix: &str) -> Self {
        let k = |name: &str| b.get(&format!("{prefix}.{name}"));
        PgnBlockParams {
            conv: GraphConvParams {
                norm: Some((k("norm1.g"), k("norm1.b"))),
                w_in: k("w_in"),
                b_in: k("b_in"),
                w_update: k("w_update"),
                b_update: k("b_update"),
                w_out: k("w_out"),
                b_out: k("b_out"),
            },
            ffn: FfnParams {
                norm: Some((k("norm2.g"), k("norm2.b"))),
                w1: k("ffn.w1"),
                b1: k("ffn.b1"),
                w2: k("ffn.w2"),
                b2: k("ffn.b2"),
            },
        }
    }
}

fn linear<T: Scalar>(tape: &mut Tape<T>, x: ValueId, w: ValueId, b: ValueId) -> Result<ValueId> {
    let y = tape.matmul(x, w)?;
    tape.add_row_vector(y, b)
}

fn maybe_norm<T: Scalar>(
    tape: &mut Tape<T>,
    x: ValueId,
    norm: Option<(ValueId, ValueId)>,
    eps: T,
) -> Result<ValueId> {
    match norm {
        Some((g, b)) => tape.layer_norm(x, g, b, eps),
        None => Ok(x),
    }
}

/// Stride-2 3×3 convolutions over the `[1 × F·T]` input image, GELU between
/// them, flattened to `[N × D]` nodes and summed with the absolute positional
/// encoding `pos`.
///
/// `convs` holds `(weight, bias)` per layer; weights are `[C_out × C_in·9]`,
/// biases `[C_out × 1]`.
pub fn backbone_stem<T: Scalar>(
    tape: &mut Tape<T>,
    image: ValueId,
    grid: (usize, usize),
    convs: &[(ValueId, ValueId)],
    pos: ValueId,
) -> Result<PatchNodes> {
    let p = 1usize << convs.len();
    let (h, w) = grid;
    if h % p != 0 || w % p != 0 {
        return Err(Error::Shape(format!(
            "stem input {h}×{w} must be a multiple of {p} on both axes"
        )));
    }
    let mut x = image;
    let (mut ch, mut hh, mut ww) = (1usize, h, w);
    for (i, &(wt, b)) in convs.iter().enumerate() {
        let out_ch = tape.shape(wt).0;
        let geom = ConvGeom {
            in_channels: ch,
            height: hh,
            width: ww,
            out_channels: out_ch,
            kernel: 3,
            stride: 2,
            padding: 1,
        };
        x = tape.conv2d(x, wt, geom)?;
        x = tape.add_col_vector(x, b)?;
        if i + 1 < convs.len() {
            x = tape.gelu(x);
        }
        ch = out_ch;
        hh = geom.out_height();
        ww = geom.out_width();
    }
    let nodes = tape.transpose(x);
    let features = tape.add(nodes, pos)?;
    Ok(PatchNodes {
        features,
        grid: (hh, ww),
    })
}

/// `y = σ(GraphConv(h·W_in))·W_out + x` with `h` the (optionally normalized)
/// input and `GraphConv(z) = [z, maxrel(z)]·W_update`; σ is GELU.
pub fn graph_conv<T: Scalar>(
    tape: &mut Tape<T>,
    x: ValueId,
    graph: &FeatureGraph,
    p: &GraphConvParams,
    eps: T,
) -> Result<ValueId> {
    let h = maybe_norm(tape, x, p.norm, eps)?;
    graph_conv_normed(tape, x, h, graph, p)
}

fn graph_conv_normed<T: Scalar>(
    tape: &mut Tape<T>,
    x: ValueId,
    h: ValueId,
    graph: &FeatureGraph,
    p: &GraphConvParams,
) -> Result<ValueId> {
    let z = linear(tape, h, p.w_in, p.b_in)?;
    let rel = tape.neighbor_max_diff(z, graph.adjacency())?;
    let cat = tape.concat_cols(z, rel)?;
    let u = linear(tape, cat, p.w_update, p.b_update)?;
    let a = tape.gelu(u);
    let y = linear(tape, a, p.w_out, p.b_out)?;
    tape.add(y, x)
}

/// Two-layer GELU MLP with a residual connection.
pub fn ffn<T: Scalar>(tape: &mut Tape<T>, x: ValueId, p: &FfnParams, eps: T) -> Result<ValueId> {
    let h = maybe_norm(tape, x, p.norm, eps)?;
    let a = linear(tape, h, p.w1, p.b1)?;
    let a = tape.gelu(a);
    let y = linear(tape, a, p.w2, p.b2)?;
    tape.add(y, x)
}

/// One PGN block: dynamic dilated k-NN graph over the normalized features,
/// graph convolution, then FFN.
///
/// `bias` is the optional `[N × N]` ranking bias (relative positions).
/// Returns the updated nodes and the graph that was used.
pub fn pgn_block<T: Scalar>(
    tape: &mut Tape<T>,
    nodes: PatchNodes,
    params: &PgnBlockParams,
    k: usize,
    dilation: usize,
    bias: Option<&Tensor<T>>,
    eps: T,
) -> Result<(PatchNodes, FeatureGraph)> {
    let h = maybe_norm(tape, nodes.features, params.conv.norm, eps)?;
    let graph = dilated_knn_graph(tape.data(h), k, dilation, bias);
    let out = pgn_block_on(tape, nodes, h, &graph, params, eps)?;
    Ok((out, graph))
}

/// PGN block over a fixed graph instead of one built from the features.
pub fn pgn_block_with_graph<T: Scalar>(
    tape: &mut Tape<T>,
    nodes: PatchNodes,
    params: &PgnBlockParams,
    graph: &FeatureGraph,
    eps: T,
) -> Result<PatchNodes> {
    if graph.node_count() != nodes.count() {
        return Err(Error::Shape(format!(
            "graph over {} nodes applied to {}",
            graph.node_count(),
            nodes.count()
        )));
    }
    let h = maybe_norm(tape, nodes.features, params.conv.norm, eps)?;
    pgn_block_on(tape, nodes, h, graph, params, eps)
}

fn pgn_block_on<T: Scalar>(
    tape: &mut Tape<T>,
    nodes: PatchNodes,
    h: ValueId,
    graph: &FeatureGraph,
    params: &PgnBlockParams,
    eps: T,
) -> Result<PatchNodes> {
    let y = graph_conv_normed(tape, nodes.features, h, graph, &params.conv)?;
    let y = ffn(tape, y, &params.ffn, eps)?;
    Ok(PatchNodes {
        features: y,
        grid: nodes.grid,
    })
}

/// Stride-2 3×3 convolution on the node grid: `(h, w) → (h/2, w/2)`, channels
/// mapped to the width of `weight` (`[D' × D·9]`).
pub fn downsample<T: Scalar>(
    tape: &mut Tape<T>,
    nodes: PatchNodes,
    weight: ValueId,
    bias: ValueId,
) -> Result<PatchNodes> {
    let (h, w) = nodes.grid;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Shape(format!("downsample needs an even grid, got {h}×{w}")));
    }
    let d = tape.shape(nodes.features).1;
    let geom = ConvGeom {
        in_channels: d,
        height: h,
        width: w,
        out_channels: tape.shape(weight).0,
        kernel: 3,
        stride: 2,
        padding: 1,
    };
    let maps = tape.transpose(nodes.features);
    let y = tape.conv2d(maps, weight, geom)?;
    let y = tape.add_col_vector(y, bias)?;
    Ok(PatchNodes {
        features: tape.transpose(y),
        grid: (h / 2, w / 2),
    })
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::graph::knn_graph;
    use crate::tensor::check_gradient;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize, s: f64) -> Tensor<f64> {
        Tensor::from_vec(r, c, (0..r * c).map(|_| rng.random_range(-s..s)).collect()).unwrap()
    }

    fn gelu(x: f64) -> f64 {
        0.5 * x * (1.0 + (0.797_884_560_802_865_4 * (x + 0.044_715 * x * x * x)).tanh())
    }

    /// Straight-line graph convolution on plain vectors, no normalization.
    fn oracle_graph_conv(x: &[Vec<f64>], adj: &[Vec<usize>], w: &[Tensor<f64>; 6]) -> Vec<Vec<f64>> {
        let [w_in, b_in, w_up, b_up, w_out, b_out] = w;
        let affine = |v: &[f64], m: &Tensor<f64>, b: &Tensor<f64>| -> Vec<f64> {
            (0..m.cols())
                .map(|c| b.get(0, c) + (0..m.rows()).map(|r| v[r] * m.get(r, c)).sum::<f64>())
                .collect()
        };
        let z: Vec<Vec<f64>> = x.iter().map(|v| affine(v, w_in, b_in)).collect();
        (0..x.len())
            .map(|i| {
                let d = z[i].len();
                let mut cat = z[i].clone();
                for c in 0..d {
                    let m = adj[i].iter().map(|&j| z[j][c] - z[i][c]).fold(f64::NEG_INFINITY, f64::max);
                    cat.push(m);
                }
                let u: Vec<f64> = affine(&cat, w_up, b_up).into_iter().map(gelu).collect();
                affine(&u, w_out, b_out).iter().zip(&x[i]).map(|(a, b)| a + b).collect()
            })
            .collect()
    }

    fn conv_params(tape: &mut Tape<f64>, w: &[Tensor<f64>; 6]) -> GraphConvParams {
        GraphConvParams {
            norm: None,
            w_in: tape.param(w[0].clone()),
            b_in: tape.param(w[1].clone()),
            w_update: tape.param(w[2].clone()),
            b_update: tape.param(w[3].clone()),
            w_out: tape.param(w[4].clone()),
            b_out: tape.param(w[5].clone()),
        }
    }

    fn random_conv_weights(rng: &mut ChaCha8Rng, d: usize) -> [Tensor<f64>; 6] {
        [
            random(rng, d, d, 0.8),
            random(rng, 1, d, 0.3),
            random(rng, 2 * d, d, 0.8),
            random(rng, 1, d, 0.3),
            random(rng, d, d, 0.8),
            random(rng, 1, d, 0.3),
        ]
    }

    #[test]
    fn graph_conv_matches_straight_line_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let x = random(&mut rng, 4, 2, 1.0);
        let w = random_conv_weights(&mut rng, 2);
        let graph = knn_graph(&x, 2, None);
        let mut tape = Tape::new();
        let xi = tape.constant(x.clone());
        let p = conv_params(&mut tape, &w);
        let y = graph_conv(&mut tape, xi, &graph, &p, 1e-5).unwrap();
        let rows: Vec<Vec<f64>> = (0..4).map(|r| x.row(r).to_vec()).collect();
        let expect = oracle_graph_conv(&rows, graph.adjacency(), &w);
        for r in 0..4 {
            for c in 0..2 {
                assert!((tape.data(y).get(r, c) - expect[r][c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn graph_conv_zero_weights_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&mut rng, 5, 3, 1.0);
        let zeros = [
            Tensor::zeros(3, 3),
            Tensor::zeros(1, 3),
            Tensor::zeros(6, 3),
            Tensor::zeros(1, 3),
            Tensor::zeros(3, 3),
            Tensor::zeros(1, 3),
        ];
        let graph = knn_graph(&x, 2, None);
        let mut tape = Tape::new();
        let xi = tape.constant(x.clone());
        let p = conv_params(&mut tape, &zeros);
        let y = graph_conv(&mut tape, xi, &graph, &p, 1e-5).unwrap();
        assert_eq!(tape.data(y), &x);
    }

    #[test]
    fn graph_conv_identical_nodes_give_identical_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let row = random(&mut rng, 1, 3, 1.0);
        let mut x = Tensor::zeros(4, 3);
        for r in 0..4 {
            x.row_mut(r).copy_from_slice(row.row(0));
        }
        let w = random_conv_weights(&mut rng, 3);
        let graph = knn_graph(&x, 2, None);
        let mut tape = Tape::new();
        let xi = tape.constant(x);
        let p = conv_params(&mut tape, &w);
        let y = graph_conv(&mut tape, xi, &graph, &p, 1e-5).unwrap();
        let out = tape.data(y);
        for r in 1..4 {
            assert_eq!(out.row(r), out.row(0));
        }
    }

    #[test]
    fn graph_conv_is_permutation_equivariant_at_fixed_topology() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 7;
        let x = random(&mut rng, n, 3, 1.0);
        let w = random_conv_weights(&mut rng, 3);
        let graph = knn_graph(&x, 3, None);
        let perm = [3usize, 0, 6, 1, 5, 2, 4];
        let mut px = Tensor::zeros(n, 3);
        for i in 0..n {
            px.row_mut(perm[i]).copy_from_slice(x.row(i));
        }
        let pgraph = knn_graph(&px, 3, None);
        for i in 0..n {
            let mapped: Vec<usize> = graph.neighbors(i).iter().map(|&j| perm[j]).collect();
            assert_eq!(pgraph.neighbors(perm[i]), mapped.as_slice());
        }
        let run = |x: &Tensor<f64>, g: &FeatureGraph| {
            let mut tape = Tape::new();
            let xi = tape.constant(x.clone());
            let p = conv_params(&mut tape, &w);
            let y = graph_conv(&mut tape, xi, g, &p, 1e-5).unwrap();
            tape.data(y).clone()
        };
        let (y, py) = (run(&x, &graph), run(&px, &pgraph));
        for i in 0..n {
            assert_eq!(py.row(perm[i]), y.row(i));
        }
    }

    #[test]
    fn stem_shapes_and_zero_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let chans = [4usize, 8, 16, 32];
        let mut tape = Tape::new();
        let img = tape.constant(Tensor::zeros(1, 64 * 64));
        let mut convs = Vec::new();
        let mut cin = 1;
        for &c in &chans {
            let w = tape.param(random(&mut rng, c, cin * 9, 0.5));
            let b = tape.param(Tensor::zeros(c, 1));
            convs.push((w, b));
            cin = c;
        }
        let pos_t = random(&mut rng, 16, 32, 0.1);
        let pos = tape.param(pos_t.clone());
        let nodes = backbone_stem(&mut tape, img, (64, 64), &convs, pos).unwrap();
        assert_eq!(nodes.grid, (4, 4));
        assert_eq!(tape.shape(nodes.features), (16, 32));
        assert_eq!(tape.data(nodes.features), &pos_t);

        let mut tape = Tape::<f64>::new();
        let img = tape.constant(Tensor::zeros(1, 60 * 64));
        let w = tape.param(Tensor::zeros(4, 9));
        let b = tape.param(Tensor::zeros(4, 1));
        let pos = tape.param(Tensor::zeros(1, 1));
        let err = backbone_stem(&mut tape, img, (60, 64), &[(w, b); 4], pos).unwrap_err();
        assert!(err.to_string().contains("multiple of 16"), "{err}");
    }

    #[test]
    fn stem_gradient_on_8x8() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let img = random(&mut rng, 1, 64, 1.0);
        let params = vec![
            random(&mut rng, 3, 9, 0.5),
            random(&mut rng, 3, 1, 0.1),
            random(&mut rng, 4, 27, 0.3),
            random(&mut rng, 4, 1, 0.1),
            random(&mut rng, 4, 4, 0.1),
        ];
        let report = check_gradient(&params, 1e-5, |tape, ids| {
            let x = tape.constant(img.clone());
            let nodes = backbone_stem(tape, x, (8, 8), &[(ids[0], ids[1]), (ids[2], ids[3])], ids[4])?;
            let g = tape.gelu(nodes.features);
            tape.sum(g)
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    fn block_params(tape: &mut Tape<f64>, vals: &[Tensor<f64>]) -> PgnBlockParams {
        let ids: Vec<ValueId> = vals.iter().map(|t| tape.param(t.clone())).collect();
        PgnBlockParams {
            conv: GraphConvParams {
                norm: Some((ids[0], ids[1])),
                w_in: ids[2],
                b_in: ids[3],
                w_update: ids[4],
                b_update: ids[5],
                w_out: ids[6],
                b_out: ids[7],
            },
            ffn: FfnParams {
                norm: Some((ids[8], ids[9])),
                w1: ids[10],
                b1: ids[11],
                w2: ids[12],
                b2: ids[13],
            },
        }
    }

    fn random_block(rng: &mut ChaCha8Rng, d: usize) -> Vec<Tensor<f64>> {
        let ones = Tensor::full(1, d, 1.0);
        vec![
            ones.zip_map(&random(rng, 1, d, 0.2), |a, b| a + b),
            random(rng, 1, d, 0.2),
            random(rng, d, d, 0.6),
            random(rng, 1, d, 0.2),
            random(rng, 2 * d, d, 0.6),
            random(rng, 1, d, 0.2),
            random(rng, d, d, 0.6),
            random(rng, 1, d, 0.2),
            ones.zip_map(&random(rng, 1, d, 0.2), |a, b| a + b),
            random(rng, 1, d, 0.2),
            random(rng, d, 4 * d, 0.6),
            random(rng, 1, 4 * d, 0.2),
            random(rng, 4 * d, d, 0.6),
            random(rng, 1, d, 0.2),
        ]
    }

    #[test]
    fn pgn_block_zero_ffn_is_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = random(&mut rng, 9, 4, 1.0);
        let mut vals = random_block(&mut rng, 4);
        vals[12] = Tensor::zeros(16, 4);
        vals[13] = Tensor::zeros(1, 4);
        let mut tape = Tape::new();
        let xi = tape.constant(x);
        let p = block_params(&mut tape, &vals);
        let nodes = PatchNodes { features: xi, grid: (3, 3) };
        let (out, graph) = pgn_block(&mut tape, nodes, &p, 3, 1, None, 1e-5).unwrap();
        // the FFN adds nothing, so the block equals the graph convolution alone
        let gc = graph_conv(&mut tape, xi, &graph, &p.conv, 1e-5).unwrap();
        assert_eq!(tape.data(out.features), tape.data(gc));
    }

    #[test]
    fn pgn_block_gradient_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random(&mut rng, 9, 4, 1.0);
        let mut params = random_block(&mut rng, 4);
        params.push(x);
        let report = check_gradient(&params, 1e-5, |tape, ids| {
            let p = PgnBlockParams {
                conv: GraphConvParams {
                    norm: Some((ids[0], ids[1])),
                    w_in: ids[2],
                    b_in: ids[3],
                    w_update: ids[4],
                    b_update: ids[5],
                    w_out: ids[6],
                    b_out: ids[7],
                },
                ffn: FfnParams {
                    norm: Some((ids[8], ids[9])),
                    w1: ids[10],
                    b1: ids[11],
                    w2: ids[12],
                    b2: ids[13],
                },
            };
            let nodes = PatchNodes { features: ids[14], grid: (3, 3) };
            let (out, _) = pgn_block(tape, nodes, &p, 3, 2, None, 1e-5)?;
            let s = tape.sigmoid(out.features);
            tape.sum(s)
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn downsample_shapes_and_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut tape = Tape::new();
        let x = tape.constant(random(&mut rng, 64, 32, 1.0));
        let w = tape.param(random(&mut rng, 64, 32 * 9, 0.1));
        let b = tape.param(Tensor::zeros(64, 1));
        let out = downsample(&mut tape, PatchNodes { features: x, grid: (8, 8) }, w, b).unwrap();
        assert_eq!(out.grid, (4, 4));
        assert_eq!(tape.shape(out.features), (16, 64));

        let odd = tape.constant(Tensor::zeros(15, 32));
        assert!(downsample(&mut tape, PatchNodes { features: odd, grid: (3, 5) }, w, b).is_err());

        let params = vec![random(&mut rng, 12, 3, 1.0), random(&mut rng, 5, 27, 0.3), random(&mut rng, 5, 1, 0.1)];
        let report = check_gradient(&params, 1e-5, |tape, ids| {
            let out = downsample(tape, PatchNodes { features: ids[0], grid: (2, 6) }, ids[1], ids[2])?;
            let g = tape.gelu(out.features);
            tape.sum(g)
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }
}
