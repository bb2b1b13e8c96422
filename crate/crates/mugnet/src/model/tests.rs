use super::*;
use crate::partition::{Cluster, ClusterEdge};

/// Graph of singleton clusters positioned at `positions`, connected by the
/// given undirected node pairs.
fn toy_graph(positions: &[[f64; 3]], undirected: &[(usize, usize)]) -> SuperpointGraph {
    let clusters: Vec<Cluster> = positions
        .iter()
        .enumerate()
        .map(|(i, &p)| Cluster {
            members: vec![i],
            centroid: p,
            mean_features: [0.2, 0.5, 0.3, 0.4, p[2]],
        })
        .collect();
    let mut edges = Vec::new();
    for &(a, b) in undirected {
        let offset = [
            positions[b][0] - positions[a][0],
            positions[b][1] - positions[a][1],
            positions[b][2] - positions[a][2],
        ];
        edges.push(ClusterEdge {
            src: a,
            dst: b,
            centroid_offset: offset,
            log_size_ratio: 0.0,
            boundary_pairs: 1,
        });
        edges.push(ClusterEdge {
            src: b,
            dst: a,
            centroid_offset: [-offset[0], -offset[1], -offset[2]],
            log_size_ratio: 0.0,
            boundary_pairs: 1,
        });
    }
    edges.sort_by_key(|e| (e.src, e.dst));
    SuperpointGraph {
        num_points: positions.len(),
        clusters,
        edges,
    }
}

fn random_positions(rng: &mut Rng, n: usize) -> Vec<[f64; 3]> {
    (0..n)
        .map(|_| {
            [
                rng.range(-2.0, 2.0),
                rng.range(-2.0, 2.0),
                rng.range(0.0, 2.0),
            ]
        })
        .collect()
}

fn conv_vars_from(tape: &mut Tape, p: &GraphConvParams) -> GraphConvVars {
    GraphConvVars {
        w_self: tape.leaf(&p.w_self),
        w_nbr: tape.leaf(&p.w_nbr),
        w_edge: p.w_edge.as_ref().map(|t| tape.leaf(t)),
        bias: tape.leaf(&p.bias),
    }
}

fn identity_conv(f: usize) -> GraphConvParams {
    let mut eye = vec![0.0; f * f];
    for i in 0..f {
        eye[i * f + i] = 1.0;
    }
    GraphConvParams {
        w_self: Tensor::param(eye.clone(), &[f, f]).unwrap(),
        w_nbr: Tensor::param(eye, &[f, f]).unwrap(),
        w_edge: None,
        bias: Tensor::param(vec![0.0; f], &[f]).unwrap(),
    }
}

#[test]
fn isolated_node_uses_self_term_only() {
    let graph = toy_graph(&[[0.0, 0.0, 0.0]], &[]);
    let ctx = GraphContext::new(&graph);
    let mut rng = Rng::new(2);
    let params = GraphConvParams::init(3, 2, &mut rng);
    let mut tape = Tape::new();
    let vars = conv_vars_from(&mut tape, &params);
    let h = tape.constant(vec![0.5, -1.0, 2.0], &[1, 3]).unwrap();
    let out = graph_conv(&mut tape, h, &ctx, &vars).unwrap();
    // Expected: h W_self + bias; the neighbour and edge terms are zero rows.
    let mut expected = [0.0f64; 2];
    for c in 0..2 {
        for k in 0..3 {
            expected[c] += tape.value(h)[k] * params.w_self.at(k, c);
        }
        expected[c] += params.bias.data()[c];
    }
    for (got, want) in tape.value(out).iter().zip(&expected) {
        assert!((got - want).abs() < 1e-12);
    }
}

#[test]
fn two_node_identity_conv_sums_neighbours() {
    let graph = toy_graph(&[[0.0; 3], [1.0, 0.0, 0.0]], &[(0, 1)]);
    let ctx = GraphContext::new(&graph);
    let params = identity_conv(2);
    let mut tape = Tape::new();
    let vars = conv_vars_from(&mut tape, &params);
    let h = tape.constant(vec![1.0, 2.0, 10.0, 20.0], &[2, 2]).unwrap();
    let out = graph_conv(&mut tape, h, &ctx, &vars).unwrap();
    assert_eq!(tape.value(out), &[11.0, 22.0, 11.0, 22.0]);
}

#[test]
fn graph_conv_is_permutation_equivariant() {
    let mut rng = Rng::new(7);
    let n = 10;
    let positions = random_positions(&mut rng, n);
    let edges = [
        (0, 1),
        (1, 2),
        (2, 3),
        (3, 0),
        (4, 5),
        (5, 6),
        (2, 7),
        (8, 9),
        (0, 9),
    ];
    let graph = toy_graph(&positions, &edges);

    let mut perm: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut perm);
    let permuted_positions: Vec<[f64; 3]> = {
        let mut v = vec![[0.0; 3]; n];
        for i in 0..n {
            v[perm[i]] = positions[i];
        }
        v
    };
    let permuted_edges: Vec<(usize, usize)> =
        edges.iter().map(|&(a, b)| (perm[a], perm[b])).collect();
    let permuted_graph = toy_graph(&permuted_positions, &permuted_edges);

    let params = GraphConvParams::init(3, 3, &mut rng);
    let h_data: Vec<f64> = (0..n * 3).map(|_| rng.range(-1.0, 1.0)).collect();

    let run = |graph: &SuperpointGraph, h_rows: &[f64]| -> Vec<f64> {
        let ctx = GraphContext::new(graph);
        let mut tape = Tape::new();
        let vars = conv_vars_from(&mut tape, &params);
        let h = tape.constant(h_rows.to_vec(), &[n, 3]).unwrap();
        let out = graph_conv(&mut tape, h, &ctx, &vars).unwrap();
        tape.value(out).to_vec()
    };

    let base = run(&graph, &h_data);
    let mut permuted_h = vec![0.0; n * 3];
    for i in 0..n {
        for c in 0..3 {
            permuted_h[perm[i] * 3 + c] = h_data[i * 3 + c];
        }
    }
    let permuted_out = run(&permuted_graph, &permuted_h);
    for i in 0..n {
        for c in 0..3 {
            let a = base[i * 3 + c];
            let b = permuted_out[perm[i] * 3 + c];
            assert!((a - b).abs() < 1e-9, "node {i} col {c}: {a} vs {b}");
        }
    }
}

fn tiny_config(fusion: FusionMode, depth: usize, stacks: usize) -> ModelConfig {
    ModelConfig {
        classes: 3,
        embed: EmbeddingConfig {
            input_dim: 5,
            budgets: [6, 4, 2],
            mlp_hidden: 6,
            out_width: 4,
        },
        backbone_depth: depth,
        width: 8,
        taps: if fusion == FusionMode::None && depth < 4 {
            (1..=depth).collect()
        } else {
            ModelConfig::default_taps(depth)
        },
        fusion,
        stacks,
        head_hidden: 8,
    }
}

fn tiny_scene(rng: &mut Rng, nodes: usize, input_dim: usize, budget: usize) -> SceneInputs {
    let positions = random_positions(rng, nodes);
    let mut edges = Vec::new();
    for i in 1..nodes {
        edges.push((i - 1, i));
    }
    if nodes > 3 {
        edges.push((0, nodes / 2));
    }
    let graph = toy_graph(&positions, &edges);
    let matrices: Vec<Tensor> = (0..nodes)
        .map(|_| {
            let m = 1 + rng.below(7);
            let rows: Vec<Vec<f64>> = (0..m)
                .map(|_| (0..input_dim).map(|_| rng.range(-1.0, 1.0)).collect())
                .collect();
            canonical_cluster_matrix(&rows, input_dim, budget).unwrap()
        })
        .collect();
    let labels: Vec<usize> = (0..nodes).map(|_| rng.below(3)).collect();
    let sizes: Vec<usize> = (0..nodes).map(|_| 1 + rng.below(40)).collect();
    SceneInputs {
        ctx: GraphContext::new(&graph),
        cluster_matrices: matrices,
        cluster_sizes: sizes,
        cluster_labels: Some(labels),
        point_labels: None,
        members: graph.clusters.iter().map(|c| c.members.clone()).collect(),
        num_points: nodes,
    }
}

#[test]
fn backbone_depth_one_has_single_tap() {
    let cfg = tiny_config(FusionMode::None, 1, 1);
    let params = MuGNetParams::init(&cfg, 3).unwrap();
    let mut rng = Rng::new(4);
    let scene = tiny_scene(&mut rng, 5, cfg.embed.input_dim, cfg.embed.budgets[0]);
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape);
    let mut stats = params.bn_stats.clone();
    let h0 = embed_graph(&mut tape, &scene.cluster_matrices, &cfg.embed, &vars.embed).unwrap();
    let (taps, concat) = backbone_forward(
        &mut tape,
        h0,
        &scene.ctx,
        &cfg,
        &vars.blocks,
        &mut stats,
        BnMode::Eval,
    )
    .unwrap();
    assert_eq!(taps.len(), 1);
    assert_eq!(tape.shape(concat), &[5, cfg.width]);
}

#[test]
fn backbone_residuals_cascade_biases_with_zero_weights() {
    // Zero conv weights and eval batch-norm with fresh (0, 1) stats make
    // each block emit relu(s * bias), s = 1/sqrt(1 + eps). With depth 4:
    //   out1 = y1, out2 = y2 + out1, out3 = y3 + out2,
    //   out4 = y4 + out3 + out1 (long-term residual).
    let width = 2usize;
    let cfg = ModelConfig {
        classes: 2,
        embed: EmbeddingConfig {
            input_dim: 5,
            budgets: [4, 2, 1],
            mlp_hidden: 3,
            out_width: 2,
        },
        backbone_depth: 4,
        width,
        taps: vec![1, 2, 3, 4],
        fusion: FusionMode::None,
        stacks: 1,
        head_hidden: 4,
    };
    let mut params = MuGNetParams::init(&cfg, 5).unwrap();
    let biases = [[0.3, 0.7], [0.1, 0.2], [0.5, 0.05], [0.25, 0.4]];
    for (i, b) in params.blocks.iter_mut().enumerate() {
        for t in [&mut b.conv.w_self, &mut b.conv.w_nbr] {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        if let Some(we) = &mut b.conv.w_edge {
            we.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        b.conv.bias.data_mut().copy_from_slice(&biases[i]);
    }
    let mut rng = Rng::new(8);
    let scene = tiny_scene(&mut rng, 3, cfg.embed.input_dim, cfg.embed.budgets[0]);
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape);
    let mut stats = params.bn_stats.clone();
    let h0 = embed_graph(&mut tape, &scene.cluster_matrices, &cfg.embed, &vars.embed).unwrap();
    let (taps, _) = backbone_forward(
        &mut tape,
        h0,
        &scene.ctx,
        &cfg,
        &vars.blocks,
        &mut stats,
        BnMode::Eval,
    )
    .unwrap();

    let s = 1.0 / (1.0f64 + 1e-5).sqrt();
    let y: Vec<[f64; 2]> = biases
        .iter()
        .map(|b| [(s * b[0]).max(0.0), (s * b[1]).max(0.0)])
        .collect();
    let expected = [
        [y[0][0], y[0][1]],
        [y[1][0] + y[0][0], y[1][1] + y[0][1]],
        [y[2][0] + y[1][0] + y[0][0], y[2][1] + y[1][1] + y[0][1]],
        [
            y[3][0] + y[2][0] + y[1][0] + 2.0 * y[0][0],
            y[3][1] + y[2][1] + y[1][1] + 2.0 * y[0][1],
        ],
    ];
    for (level, want) in expected.iter().enumerate() {
        let got = tape.value(taps[level]);
        for node in 0..3 {
            for c in 0..width {
                assert!(
                    (got[node * width + c] - want[c]).abs() < 1e-12,
                    "level {level} node {node} col {c}: {} vs {}",
                    got[node * width + c],
                    want[c]
                );
            }
        }
    }
}

#[test]
fn plain_pyramid_matches_hand_composition() {
    let cfg = tiny_config(FusionMode::Pyramid, 4, 1);
    let params = MuGNetParams::init(&cfg, 11).unwrap();
    let mut rng = Rng::new(12);
    let scene = tiny_scene(&mut rng, 7, cfg.embed.input_dim, cfg.embed.budgets[0]);

    let mut tape = Tape::new();
    let vars = params.bind(&mut tape);
    let mut stats = params.bn_stats.clone();
    let h0 = embed_graph(&mut tape, &scene.cluster_matrices, &cfg.embed, &vars.embed).unwrap();
    let (taps, _) = backbone_forward(
        &mut tape,
        h0,
        &scene.ctx,
        &cfg,
        &vars.blocks,
        &mut stats,
        BnMode::Eval,
    )
    .unwrap();
    let fused = bidirectional_fuse(&mut tape, &taps, &scene.ctx, &vars.fusion)
        .unwrap()
        .unwrap();

    // Independent composition of the pyramid equations from raw ops.
    let convs = match &vars.fusion {
        FusionVars::Pyramid(c) => c,
        _ => unreachable!(),
    };
    let e4 = graph_conv(&mut tape, taps[3], &scene.ctx, &convs[3]).unwrap();
    let s3 = tape.add(taps[2], e4).unwrap();
    let e3 = graph_conv(&mut tape, s3, &scene.ctx, &convs[2]).unwrap();
    let s2 = tape.add(taps[1], e3).unwrap();
    let e2 = graph_conv(&mut tape, s2, &scene.ctx, &convs[1]).unwrap();
    let s1 = tape.add(taps[0], e2).unwrap();
    let e1 = graph_conv(&mut tape, s1, &scene.ctx, &convs[0]).unwrap();

    for (got, want) in [
        (fused[0], e1),
        (fused[1], e2),
        (fused[2], e3),
        (fused[3], e4),
    ] {
        for (a, b) in tape.value(got).iter().zip(tape.value(want)) {
            assert!((a - b).abs() < 1e-9);
        }
    }
}

#[test]
fn equal_weights_reduce_to_unweighted_mean_composition() {
    // Fresh params leave every fusion scalar at 1.0.
    let cfg = tiny_config(FusionMode::Bidirectional, 4, 1);
    let params = MuGNetParams::init(&cfg, 21).unwrap();
    let mut rng = Rng::new(22);
    let scene = tiny_scene(&mut rng, 6, cfg.embed.input_dim, cfg.embed.budgets[0]);

    let mut tape = Tape::new();
    let vars = params.bind(&mut tape);
    let mut stats = params.bn_stats.clone();
    let out = forward(&mut tape, &cfg, &vars, &mut stats, &scene, BnMode::Eval).unwrap();
    let fused = out.fused.unwrap();

    // Independent equal-weight composition: every fusion input is the
    // plain sum over incoming features divided by (count + eps).
    let stack = match &vars.fusion {
        FusionVars::Bidirectional(s) => &s[0],
        _ => unreachable!(),
    };
    let taps = &out.taps;
    let mean_in = |tape: &mut Tape, parts: &[Var]| -> Var {
        let mut acc = parts[0];
        for &p in &parts[1..] {
            acc = tape.add(acc, p).unwrap();
        }
        let denom = tape.scalar(parts.len() as f64 + FUSION_EPS);
        tape.div(acc, denom).unwrap()
    };
    let m3in = mean_in(&mut tape, &[taps[2], taps[3]]);
    let mid3 = graph_conv(&mut tape, m3in, &scene.ctx, &stack.td[0]).unwrap();
    let m2in = mean_in(&mut tape, &[taps[1], mid3]);
    let mid2 = graph_conv(&mut tape, m2in, &scene.ctx, &stack.td[1]).unwrap();
    let o1in = mean_in(&mut tape, &[taps[0], mid2]);
    let out1 = graph_conv(&mut tape, o1in, &scene.ctx, &stack.bu[0]).unwrap();
    let o2in = mean_in(&mut tape, &[taps[1], mid2, out1]);
    let out2 = graph_conv(&mut tape, o2in, &scene.ctx, &stack.bu[1]).unwrap();
    let o3in = mean_in(&mut tape, &[taps[2], mid3, out2]);
    let out3 = graph_conv(&mut tape, o3in, &scene.ctx, &stack.bu[2]).unwrap();
    let o4in = mean_in(&mut tape, &[taps[3], out3]);
    let out4 = graph_conv(&mut tape, o4in, &scene.ctx, &stack.bu[3]).unwrap();

    for (got, want) in [
        (fused[0], out1),
        (fused[1], out2),
        (fused[2], out3),
        (fused[3], out4),
    ] {
        for (a, b) in tape.value(got).iter().zip(tape.value(want)) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }
}

#[test]
fn zero_fusion_weights_produce_no_nan() {
    let cfg = tiny_config(FusionMode::Bidirectional, 4, 1);
    let mut params = MuGNetParams::init(&cfg, 31).unwrap();
    if let FusionParams::Bidirectional(stacks) = &mut params.fusion {
        for s in stacks {
            let w = &mut s.weights;
            for group in [
                &mut w.mid3[..],
                &mut w.mid2[..],
                &mut w.out1[..],
                &mut w.out2[..],
                &mut w.out3[..],
                &mut w.out4[..],
            ] {
                for t in group {
                    t.data_mut()[0] = 0.0;
                }
            }
        }
    }
    let mut rng = Rng::new(32);
    let scene = tiny_scene(&mut rng, 6, cfg.embed.input_dim, cfg.embed.budgets[0]);
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape);
    let mut stats = params.bn_stats.clone();
    let out = forward(&mut tape, &cfg, &vars, &mut stats, &scene, BnMode::Train).unwrap();
    assert!(tape.value(out.logits).iter().all(|v| v.is_finite()));
    let loss = tape.sum_all(out.logits);
    tape.backward(loss).unwrap();
    params.read_grads(&tape, &vars);
    for (name, t) in params.named() {
        if let Some(g) = &t.grad {
            assert!(g.iter().all(|v| v.is_finite()), "grad of {name}");
        }
    }
}

#[test]
fn zero_head_gives_zero_logits() {
    let cfg = tiny_config(FusionMode::Bidirectional, 4, 1);
    let mut params = MuGNetParams::init(&cfg, 41).unwrap();
    params.head.w1.data_mut().iter_mut().for_each(|v| *v = 0.0);
    params.head.b1.data_mut().iter_mut().for_each(|v| *v = 0.0);
    params.head.w2.data_mut().iter_mut().for_each(|v| *v = 0.0);
    params.head.b2.data_mut().iter_mut().for_each(|v| *v = 0.0);
    let mut rng = Rng::new(42);
    let scene = tiny_scene(&mut rng, 4, cfg.embed.input_dim, cfg.embed.budgets[0]);
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape);
    let mut stats = params.bn_stats.clone();
    let out = forward(&mut tape, &cfg, &vars, &mut stats, &scene, BnMode::Eval).unwrap();
    assert_eq!(tape.shape(out.logits), &[4, 3]);
    assert!(tape.value(out.logits).iter().all(|&v| v == 0.0));
}

#[test]
fn predict_points_argmax_and_ties() {
    let members = vec![vec![0, 2], vec![1, 3, 4]];
    // Cluster 0: class 1 wins; cluster 1: tie between 0 and 2, lowest wins.
    let logits = vec![0.1, 2.0, -1.0, 5.0, 1.0, 5.0];
    let labels = predict_points(&logits, 3, &members, 5);
    assert_eq!(labels, vec![1, 0, 1, 0, 0]);
}

#[test]
fn stacked_bidirectional_builds_and_runs() {
    let cfg = tiny_config(FusionMode::Bidirectional, 4, 2);
    let params = MuGNetParams::init(&cfg, 51).unwrap();
    let mut rng = Rng::new(52);
    let scene = tiny_scene(&mut rng, 5, cfg.embed.input_dim, cfg.embed.budgets[0]);
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape);
    let mut stats = params.bn_stats.clone();
    let out = forward(&mut tape, &cfg, &vars, &mut stats, &scene, BnMode::Train).unwrap();
    assert_eq!(tape.shape(out.logits), &[5, 3]);
    assert!(tape.value(out.logits).iter().all(|v| v.is_finite()));
}

#[test]
fn bind_order_matches_named_order() {
    for (fusion, stacks) in [
        (FusionMode::None, 1),
        (FusionMode::Pyramid, 1),
        (FusionMode::Bidirectional, 2),
    ] {
        let cfg = tiny_config(fusion, 4, stacks);
        let params = MuGNetParams::init(&cfg, 61).unwrap();
        let mut tape = Tape::new();
        let vars = params.bind(&mut tape);
        let flat = vars.flat();
        let learnable: Vec<(String, &Tensor)> = params
            .named()
            .into_iter()
            .filter(|(_, t)| t.requires_grad)
            .collect();
        assert_eq!(flat.len(), learnable.len());
        for ((name, t), v) in learnable.iter().zip(&flat) {
            assert_eq!(tape.value(*v), t.data(), "mismatch at {name}");
            assert_eq!(tape.shape(*v), t.shape(), "shape mismatch at {name}");
        }
    }
}

#[test]
fn config_text_roundtrip() {
    for (fusion, depth, stacks) in [
        (FusionMode::Bidirectional, 4, 1),
        (FusionMode::Bidirectional, 14, 2),
        (FusionMode::Pyramid, 4, 1),
        (FusionMode::None, 7, 1),
    ] {
        let mut cfg = tiny_config(fusion, depth, stacks);
        cfg.taps = ModelConfig::default_taps(depth);
        let text = cfg.to_text();
        let back = ModelConfig::parse(&text).unwrap();
        assert_eq!(back, cfg);
    }
}

#[test]
fn config_validation_rejects_bad_taps() {
    let mut cfg = tiny_config(FusionMode::Bidirectional, 4, 1);
    cfg.taps = vec![1, 2, 3];
    assert!(cfg.validate().is_err());
    cfg.taps = vec![1, 2, 3, 5];
    assert!(cfg.validate().is_err());
    cfg.taps = vec![1, 1, 2, 3];
    assert!(cfg.validate().is_err());
    // Depth below 4 cannot feed a 4-level fusion network.
    let mut shallow = tiny_config(FusionMode::Bidirectional, 2, 1);
    shallow.taps = vec![1, 2];
    assert!(shallow.validate().is_err());
}

#[test]
fn ablation_depths_construct_and_run() {
    let mut rng = Rng::new(71);
    for depth in [4usize, 7, 14, 28] {
        let mut cfg = tiny_config(FusionMode::Bidirectional, depth, 1);
        cfg.taps = ModelConfig::default_taps(depth);
        let params = MuGNetParams::init(&cfg, depth as u64).unwrap();
        let scene = tiny_scene(&mut rng, 4, cfg.embed.input_dim, cfg.embed.budgets[0]);
        let mut tape = Tape::new();
        let vars = params.bind(&mut tape);
        let mut stats = params.bn_stats.clone();
        let out = forward(&mut tape, &cfg, &vars, &mut stats, &scene, BnMode::Train).unwrap();
        assert!(tape.value(out.logits).iter().all(|v| v.is_finite()));
    }
}

#[test]
fn end_to_end_logits_permute_with_nodes() {
    let cfg = tiny_config(FusionMode::Bidirectional, 4, 1);
    let params = MuGNetParams::init(&cfg, 81).unwrap();
    let mut rng = Rng::new(82);
    let n = 8;
    let positions = random_positions(&mut rng, n);
    let edges = [
        (0, 1),
        (1, 2),
        (2, 3),
        (3, 4),
        (4, 5),
        (5, 6),
        (6, 7),
        (1, 5),
    ];
    let matrices: Vec<Tensor> = (0..n)
        .map(|_| {
            let rows: Vec<Vec<f64>> = (0..3)
                .map(|_| (0..5).map(|_| rng.range(-1.0, 1.0)).collect())
                .collect();
            canonical_cluster_matrix(&rows, 5, cfg.embed.budgets[0]).unwrap()
        })
        .collect();

    let mut perm: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut perm);

    let build_scene =
        |positions: &[[f64; 3]], edges: &[(usize, usize)], matrices: Vec<Tensor>| -> SceneInputs {
            let graph = toy_graph(positions, edges);
            SceneInputs {
                ctx: GraphContext::new(&graph),
                cluster_matrices: matrices,
                cluster_sizes: vec![1; positions.len()],
                cluster_labels: None,
                point_labels: None,
                members: graph.clusters.iter().map(|c| c.members.clone()).collect(),
                num_points: positions.len(),
            }
        };

    let scene = build_scene(&positions, &edges, matrices.clone());
    let permuted_positions: Vec<[f64; 3]> = {
        let mut v = vec![[0.0; 3]; n];
        for i in 0..n {
            v[perm[i]] = positions[i];
        }
        v
    };
    let permuted_edges: Vec<(usize, usize)> =
        edges.iter().map(|&(a, b)| (perm[a], perm[b])).collect();
    let permuted_matrices: Vec<Tensor> = {
        let mut v = vec![Tensor::scalar(0.0); n];
        for i in 0..n {
            v[perm[i]] = matrices[i].clone();
        }
        v
    };
    let permuted_scene = build_scene(&permuted_positions, &permuted_edges, permuted_matrices);

    let base = infer_logits(&params, &scene).unwrap();
    let permuted = infer_logits(&params, &permuted_scene).unwrap();
    let c = cfg.classes;
    for i in 0..n {
        for k in 0..c {
            let a = base[i * c + k];
            let b = permuted[perm[i] * c + k];
            assert!((a - b).abs() < 1e-9, "node {i} class {k}: {a} vs {b}");
        }
    }
}
