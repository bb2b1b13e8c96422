//! Shared helpers for the integration suites.

use mugnet::embedding::EmbeddingConfig;
use mugnet::features::geometric_features;
use mugnet::graphio::GraphFile;
use mugnet::model::{forward, GraphContext, ModelConfig, MuGNetParams, SceneInputs};
use mugnet::partition::{partition, Cluster, ClusterEdge, SuperpointGraph};
use mugnet::rng::Rng;
use mugnet::synth::{synth_scene, SceneRecipe};
use mugnet::tensor::{BnMode, Tape, Tensor};
use mugnet::train::{loss, LossWeighting};

pub const FEATURE_K: usize = 10;
pub const PARTITION_KNN: usize = 8;
pub const LAMBDA: f64 = 0.02;

/// Synth -> features -> partition -> prepared scene, with the stock room.
pub fn room_scene(seed: u64, points: usize, embed: &EmbeddingConfig) -> SceneInputs {
    let gf = room_graph_file(seed, points);
    SceneInputs::prepare(&gf, embed).expect("scene preparation")
}

pub fn room_graph_file(seed: u64, points: usize) -> GraphFile {
    let recipe = SceneRecipe::room();
    let cloud = synth_scene(&recipe, seed, Some(points)).expect("synth");
    let feats = geometric_features(&cloud, FEATURE_K).expect("features");
    let graph = partition(&cloud, &feats, PARTITION_KNN, LAMBDA).expect("partition");
    GraphFile::new(graph, &cloud, feats, 3).expect("graph file")
}

/// Small-but-structurally-complete model configuration.
pub fn tiny_model(fusion: mugnet::model::FusionMode, depth: usize, stacks: usize) -> ModelConfig {
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
        taps: ModelConfig::default_taps(depth),
        fusion,
        stacks,
        head_hidden: 8,
    }
}

/// Random chain-plus-chords graph of singleton clusters.
pub fn random_graph(rng: &mut Rng, nodes: usize) -> SuperpointGraph {
    let positions: Vec<[f64; 3]> = (0..nodes)
        .map(|_| {
            [
                rng.range(-2.0, 2.0),
                rng.range(-2.0, 2.0),
                rng.range(0.0, 2.0),
            ]
        })
        .collect();
    let mut pairs: Vec<(usize, usize)> = (1..nodes).map(|i| (i - 1, i)).collect();
    for _ in 0..nodes / 3 {
        let a = rng.below(nodes);
        let b = rng.below(nodes);
        if a != b {
            pairs.push((a.min(b), a.max(b)));
        }
    }
    pairs.sort_unstable();
    pairs.dedup();
    graph_from(&positions, &pairs)
}

pub fn graph_from(positions: &[[f64; 3]], undirected: &[(usize, usize)]) -> SuperpointGraph {
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

/// Random scene over a random graph: cluster matrices, labels, sizes.
pub fn random_scene(rng: &mut Rng, nodes: usize, cfg: &ModelConfig) -> SceneInputs {
    let graph = random_graph(rng, nodes);
    let matrices: Vec<Tensor> = (0..nodes)
        .map(|_| {
            let m = 1 + rng.below(9);
            let rows: Vec<Vec<f64>> = (0..m)
                .map(|_| {
                    (0..cfg.embed.input_dim)
                        .map(|_| rng.range(-1.0, 1.0))
                        .collect()
                })
                .collect();
            mugnet::embedding::canonical_cluster_matrix(
                &rows,
                cfg.embed.input_dim,
                cfg.embed.budgets[0],
            )
            .expect("canonical matrix")
        })
        .collect();
    let labels: Vec<usize> = (0..nodes).map(|_| rng.below(cfg.classes)).collect();
    SceneInputs {
        ctx: GraphContext::new(&graph),
        cluster_matrices: matrices,
        cluster_sizes: (0..nodes).map(|_| 1 + rng.below(50)).collect(),
        cluster_labels: Some(labels.clone()),
        point_labels: Some(labels),
        members: graph.clusters.iter().map(|c| c.members.clone()).collect(),
        num_points: nodes,
    }
}

/// Train-mode forward plus the training loss, as one scalar.
pub fn training_loss(params: &MuGNetParams, scene: &SceneInputs) -> f64 {
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape);
    let mut stats = params.bn_stats.clone();
    let out = forward(
        &mut tape,
        &params.config,
        &vars,
        &mut stats,
        scene,
        BnMode::Train,
    )
    .expect("forward");
    let l = loss(
        &mut tape,
        out.logits,
        scene.cluster_labels.as_ref().expect("labels"),
        &scene.cluster_sizes,
        LossWeighting::SizeWeighted,
    )
    .expect("loss");
    tape.value(l)[0]
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}
