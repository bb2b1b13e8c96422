//! Batched-inference efficiency harness: wall time and peak memory per
//! batch size, with scene-parallel workers over shared read-only params.

use std::path::Path;
use std::time::Instant;

use crate::error::{Error, Result};
use crate::model::{infer_logits, MuGNetParams, SceneInputs};

#[derive(Debug, Clone)]
pub struct BenchConfig {
    /// Strictly increasing; each entry must not exceed the scene count.
    pub batch_sizes: Vec<usize>,
    /// Timed repetitions after one warm-up.
    pub repetitions: usize,
    pub threads: usize,
}

impl BenchConfig {
    pub fn new(batch_sizes: Vec<usize>) -> Self {
        BenchConfig {
            batch_sizes,
            repetitions: 5,
            threads: std::thread::available_parallelism()
                .map(|n| n.get())
                .unwrap_or(1),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub batch_size: usize,
    pub scenes: usize,
    pub points: usize,
    pub mean_s: f64,
    pub median_s: f64,
    /// Fastest repetition: the least-disturbed sample, used for trend
    /// comparisons on noisy hosts (interference only ever adds time).
    pub min_s: f64,
    pub peak_mem_bytes: u64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("batch_size,scenes,points,mean_s,median_s,peak_mem_bytes\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.batch_size, r.scenes, r.points, r.mean_s, r.median_s, r.peak_mem_bytes
            ));
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<BenchReport> {
        let mut rows = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if i == 0 {
                continue;
            }
            let parts: Vec<&str> = line.split(',').collect();
            if parts.len() != 6 {
                return Err(Error::Validation(format!("bad bench csv line {}", i + 1)));
            }
            let bad = |f: &str| Error::Validation(format!("bad bench field {f:?}"));
            let median_s: f64 = parts[4].parse().map_err(|_| bad(parts[4]))?;
            rows.push(BenchRow {
                batch_size: parts[0].parse().map_err(|_| bad(parts[0]))?,
                scenes: parts[1].parse().map_err(|_| bad(parts[1]))?,
                points: parts[2].parse().map_err(|_| bad(parts[2]))?,
                mean_s: parts[3].parse().map_err(|_| bad(parts[3]))?,
                median_s,
                // Not a CSV column; the median is the closest stand-in.
                min_s: median_s,
                peak_mem_bytes: parts[5].parse().map_err(|_| bad(parts[5]))?,
            });
        }
        Ok(BenchReport { rows })
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path.display().to_string(), e))
    }

    /// One-line growth summary across the measured batch sizes.
    pub fn trend_summary(&self) -> String {
        let Some((first, last)) = self.rows.first().zip(self.rows.last()) else {
            return "empty report".into();
        };
        if first.batch_size == last.batch_size {
            return format!(
                "single batch size {}: {:.4}s, peak {} bytes",
                first.batch_size, first.mean_s, first.peak_mem_bytes
            );
        }
        let scale = last.batch_size as f64 / first.batch_size as f64;
        let time_growth = last.mean_s / first.mean_s;
        let mem_monotone = self
            .rows
            .windows(2)
            .all(|w| w[1].peak_mem_bytes >= w[0].peak_mem_bytes);
        format!(
            "batch {} -> {}: time x{:.2} over a x{:.0} load ({}), peak memory {} -> {} bytes ({})",
            first.batch_size,
            last.batch_size,
            time_growth,
            scale,
            if time_growth < scale {
                "sublinear"
            } else {
                "linear or worse"
            },
            first.peak_mem_bytes,
            last.peak_mem_bytes,
            if mem_monotone {
                "nondecreasing"
            } else {
                "nonmonotone"
            }
        )
    }
}

/// Per-scene inference logits for a batch, scene-parallel across up to
/// `threads` workers. Each scene's result is independent of batching.
pub fn infer_batch(
    params: &MuGNetParams,
    scenes: &[&SceneInputs],
    threads: usize,
) -> Result<Vec<Vec<f64>>> {
    let workers = threads.max(1).min(scenes.len().max(1));
    if workers <= 1 || scenes.len() <= 1 {
        return scenes.iter().map(|s| infer_logits(params, s)).collect();
    }
    let mut results: Vec<Option<Result<Vec<f64>>>> = (0..scenes.len()).map(|_| None).collect();
    std::thread::scope(|scope| {
        let mut handles = Vec::with_capacity(workers);
        for w in 0..workers {
            let scenes_ref = &scenes;
            handles.push(scope.spawn(move || {
                let mut out = Vec::new();
                let mut i = w;
                while i < scenes_ref.len() {
                    out.push((i, infer_logits(params, scenes_ref[i])));
                    i += workers;
                }
                out
            }));
        }
        for h in handles {
            for (i, r) in h.join().expect("bench worker panicked") {
                results[i] = Some(r);
            }
        }
    });
    results
        .into_iter()
        .map(|r| r.expect("every scene scheduled"))
        .collect()
}

/// Times batched inference for each requested batch size (first
/// `batch_size` scenes), after one warm-up run per size.
pub fn bench_batched(
    params: &MuGNetParams,
    scenes: &[SceneInputs],
    cfg: &BenchConfig,
) -> Result<BenchReport> {
    if cfg.batch_sizes.is_empty() {
        return Err(Error::Parameter("no batch sizes".into()));
    }
    if cfg.batch_sizes.contains(&0) {
        return Err(Error::Parameter("batch size 0".into()));
    }
    if cfg.batch_sizes.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Parameter(
            "batch sizes must be strictly increasing".into(),
        ));
    }
    if let Some(&max) = cfg.batch_sizes.last() {
        if max > scenes.len() {
            return Err(Error::Parameter(format!(
                "batch size {max} exceeds {} available scenes",
                scenes.len()
            )));
        }
    }
    let reps = cfg.repetitions.max(1);
    let batches: Vec<Vec<&SceneInputs>> = cfg
        .batch_sizes
        .iter()
        .map(|&bs| scenes[..bs].iter().collect())
        .collect();
    // One warm-up per batch size, outside the timings.
    for batch in &batches {
        infer_batch(params, batch, cfg.threads)?;
    }
    // Repetitions are interleaved across batch sizes so that slow host
    // periods hit every row equally instead of skewing one of them.
    let mut times: Vec<Vec<f64>> = vec![Vec::with_capacity(reps); batches.len()];
    for _ in 0..reps {
        for (bi, batch) in batches.iter().enumerate() {
            let start = Instant::now();
            infer_batch(params, batch, cfg.threads)?;
            times[bi].push(start.elapsed().as_secs_f64());
        }
    }
    let mut rows = Vec::with_capacity(cfg.batch_sizes.len());
    for (bi, &bs) in cfg.batch_sizes.iter().enumerate() {
        let mut ts = times[bi].clone();
        ts.sort_by(|a, b| a.total_cmp(b));
        let mean = ts.iter().sum::<f64>() / ts.len() as f64;
        let median = if ts.len() % 2 == 1 {
            ts[ts.len() / 2]
        } else {
            0.5 * (ts[ts.len() / 2 - 1] + ts[ts.len() / 2])
        };
        rows.push(BenchRow {
            batch_size: bs,
            scenes: bs,
            points: batches[bi].iter().map(|s| s.num_points).sum(),
            mean_s: mean,
            median_s: median,
            min_s: ts[0],
            peak_mem_bytes: peak_rss_bytes(),
        });
    }
    Ok(BenchReport { rows })
}

/// Peak resident set size of this process in bytes: the kernel high-water
/// mark when the container exposes it, otherwise a running maximum over
/// sampled current RSS. Zero when nothing is available.
pub fn peak_rss_bytes() -> u64 {
    static OBSERVED_MAX: std::sync::atomic::AtomicU64 = std::sync::atomic::AtomicU64::new(0);
    let mut peak = 0u64;
    if let Ok(status) = std::fs::read_to_string("/proc/self/status") {
        for line in status.lines() {
            let field = |rest: &str| -> u64 {
                rest.trim()
                    .trim_end_matches("kB")
                    .trim()
                    .parse::<u64>()
                    .unwrap_or(0)
                    * 1024
            };
            if let Some(rest) = line.strip_prefix("VmHWM:") {
                peak = peak.max(field(rest));
            } else if let Some(rest) = line.strip_prefix("VmRSS:") {
                peak = peak.max(field(rest));
            }
        }
    }
    OBSERVED_MAX.fetch_max(peak, std::sync::atomic::Ordering::Relaxed);
    OBSERVED_MAX.load(std::sync::atomic::Ordering::Relaxed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::{canonical_cluster_matrix, EmbeddingConfig};
    use crate::model::{GraphContext, ModelConfig};
    use crate::partition::{Cluster, ClusterEdge, SuperpointGraph};
    use crate::rng::Rng;
    use crate::tensor::Tensor;

    fn tiny_scene(rng: &mut Rng, nodes: usize, cfg: &ModelConfig) -> SceneInputs {
        let positions: Vec<[f64; 3]> = (0..nodes)
            .map(|i| [i as f64, 0.0, rng.range(0.0, 1.0)])
            .collect();
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
        for i in 1..nodes {
            edges.push(ClusterEdge {
                src: i - 1,
                dst: i,
                centroid_offset: [1.0, 0.0, 0.0],
                log_size_ratio: 0.0,
                boundary_pairs: 1,
            });
            edges.push(ClusterEdge {
                src: i,
                dst: i - 1,
                centroid_offset: [-1.0, 0.0, 0.0],
                log_size_ratio: 0.0,
                boundary_pairs: 1,
            });
        }
        let graph = SuperpointGraph {
            num_points: nodes,
            clusters,
            edges,
        };
        let matrices: Vec<Tensor> = (0..nodes)
            .map(|_| {
                let rows: Vec<Vec<f64>> = (0..3)
                    .map(|_| {
                        (0..cfg.embed.input_dim)
                            .map(|_| rng.range(-1.0, 1.0))
                            .collect()
                    })
                    .collect();
                canonical_cluster_matrix(&rows, cfg.embed.input_dim, cfg.embed.budgets[0]).unwrap()
            })
            .collect();
        SceneInputs {
            ctx: GraphContext::new(&graph),
            cluster_matrices: matrices,
            cluster_sizes: vec![1; nodes],
            cluster_labels: None,
            point_labels: None,
            members: graph.clusters.iter().map(|c| c.members.clone()).collect(),
            num_points: nodes,
        }
    }

    fn small_model() -> (ModelConfig, MuGNetParams) {
        let cfg = ModelConfig {
            classes: 3,
            embed: EmbeddingConfig {
                input_dim: 5,
                budgets: [6, 4, 2],
                mlp_hidden: 4,
                out_width: 4,
            },
            backbone_depth: 4,
            width: 8,
            taps: vec![1, 2, 3, 4],
            fusion: crate::model::FusionMode::Bidirectional,
            stacks: 1,
            head_hidden: 8,
        };
        let params = MuGNetParams::init(&cfg, 9).unwrap();
        (cfg, params)
    }

    #[test]
    fn single_batch_report() {
        let (cfg, params) = small_model();
        let mut rng = Rng::new(10);
        let scenes = vec![tiny_scene(&mut rng, 5, &cfg)];
        let report = bench_batched(&params, &scenes, &BenchConfig::new(vec![1])).unwrap();
        assert_eq!(report.rows.len(), 1);
        assert!(report.rows[0].mean_s > 0.0);
        assert_eq!(report.rows[0].points, 5);
    }

    #[test]
    fn batched_matches_sequential_bit_for_bit() {
        let (cfg, params) = small_model();
        let mut rng = Rng::new(11);
        let scenes: Vec<SceneInputs> = (0..6).map(|_| tiny_scene(&mut rng, 6, &cfg)).collect();
        let refs: Vec<&SceneInputs> = scenes.iter().collect();
        let parallel = infer_batch(&params, &refs, 4).unwrap();
        let sequential: Vec<Vec<f64>> = scenes
            .iter()
            .map(|s| infer_logits(&params, s).unwrap())
            .collect();
        for (a, b) in parallel.iter().zip(&sequential) {
            assert_eq!(a.len(), b.len());
            assert!(a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn bench_validates_parameters() {
        let (cfg, params) = small_model();
        let mut rng = Rng::new(12);
        let scenes = vec![tiny_scene(&mut rng, 4, &cfg)];
        assert!(bench_batched(&params, &scenes, &BenchConfig::new(vec![])).is_err());
        assert!(bench_batched(&params, &scenes, &BenchConfig::new(vec![0])).is_err());
        assert!(bench_batched(&params, &scenes, &BenchConfig::new(vec![2])).is_err());
        assert!(bench_batched(&params, &scenes, &BenchConfig::new(vec![1, 1])).is_err());
    }

    #[test]
    fn csv_roundtrip() {
        let report = BenchReport {
            rows: vec![
                BenchRow {
                    batch_size: 1,
                    scenes: 1,
                    points: 100,
                    mean_s: 0.125,
                    median_s: 0.5,
                    min_s: 0.5,
                    peak_mem_bytes: 4096,
                },
                BenchRow {
                    batch_size: 4,
                    scenes: 4,
                    points: 400,
                    mean_s: 0.25,
                    median_s: 0.75,
                    min_s: 0.75,
                    peak_mem_bytes: 8192,
                },
            ],
        };
        let back = BenchReport::from_csv(&report.to_csv()).unwrap();
        assert_eq!(back, report);
    }

    #[test]
    fn peak_memory_is_reported_on_linux() {
        let peak = peak_rss_bytes();
        assert!(peak > 0, "VmHWM should be available on Linux");
    }
}
