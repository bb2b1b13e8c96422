//! Pipeline CLI: synth -> cluster -> train -> infer -> eval, plus the
//! batched-inference bench.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 runtime failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use mugnet::bench::{bench_batched, BenchConfig};
use mugnet::checkpoint::{load_checkpoint, save_checkpoint};
use mugnet::error::Error;
use mugnet::features::geometric_features;
use mugnet::graphio::{read_graph_file, write_graph_file, GraphFile};
use mugnet::metrics::evaluate_with_mode;
use mugnet::model::{infer_logits, predict_points, ModelConfig, SceneInputs};
use mugnet::partition::{compression_ratio, partition, purity};
use mugnet::pointcloud::{label_palette, load_cloud, save_cloud, CloudFormat, PointCloud};
use mugnet::synth::{synth_scene, SceneRecipe};
use mugnet::train::{train, TrainConfig};

const DEFAULT_FEATURE_K: usize = 10;
const DEFAULT_PARTITION_KNN: usize = 8;
const DEFAULT_LAMBDA: f64 = 0.02;

const USAGE: &str = "\
mugnet <command> [flags]

commands:
  synth    generate a labeled synthetic cloud from a recipe
  cluster  partition a cloud into a superpoint graph file
  train    train a model on one or more graph files
  infer    label a graph file's points with a trained checkpoint
  eval     compare predicted labels against ground truth
  bench    time batched inference over graph files

run `mugnet <command> --help` for the command's flags";

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let outcome = std::panic::catch_unwind(|| run(&args));
    match outcome {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(CliError::Usage(msg))) => {
            eprintln!("usage error: {msg}\n\n{USAGE}");
            ExitCode::from(1)
        }
        Ok(Err(CliError::Lib(e))) => {
            eprintln!("error: {e}");
            let code = match e {
                Error::Diverged { .. } => 3,
                _ => 2,
            };
            ExitCode::from(code)
        }
        // The panic hook has already printed the message.
        Err(_) => ExitCode::from(3),
    }
}

enum CliError {
    Usage(String),
    Lib(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Lib(e)
    }
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn run(args: &[String]) -> Result<(), CliError> {
    let Some(command) = args.first() else {
        return Err(usage("no command given"));
    };
    let rest = &args[1..];
    match command.as_str() {
        "synth" => cmd_synth(rest),
        "cluster" => cmd_cluster(rest),
        "train" => cmd_train(rest),
        "infer" => cmd_infer(rest),
        "eval" => cmd_eval(rest),
        "bench" => cmd_bench(rest),
        "--help" | "-h" | "help" => {
            println!("{USAGE}");
            Ok(())
        }
        other => Err(usage(format!("unknown command {other:?}"))),
    }
}

/// Minimal flag cursor: every flag is `--name value` except `--help`.
struct Flags<'a> {
    args: &'a [String],
    pos: usize,
    help: &'static str,
}

impl<'a> Flags<'a> {
    fn new(args: &'a [String], help: &'static str) -> Flags<'a> {
        Flags { args, pos: 0, help }
    }

    /// Next (name, value) pair; prints help and short-circuits on --help.
    fn next(&mut self) -> Result<Option<(&'a str, &'a str)>, CliError> {
        let Some(flag) = self.args.get(self.pos) else {
            return Ok(None);
        };
        if flag == "--help" || flag == "-h" {
            println!("{}", self.help);
            std::process::exit(0);
        }
        if !flag.starts_with("--") {
            return Err(usage(format!("expected a flag, got {flag:?}")));
        }
        let value = self
            .args
            .get(self.pos + 1)
            .ok_or_else(|| usage(format!("flag {flag} needs a value")))?;
        self.pos += 2;
        Ok(Some((flag.as_str(), value.as_str())))
    }
}

fn parse_num<T: std::str::FromStr>(flag: &str, value: &str) -> Result<T, CliError> {
    value
        .parse()
        .map_err(|_| usage(format!("bad value {value:?} for {flag}")))
}

fn parse_format(value: &str) -> Result<CloudFormat, CliError> {
    match value {
        "xyz" => Ok(CloudFormat::XyzText),
        "ply" => Ok(CloudFormat::PlyAscii),
        other => Err(usage(format!("unknown format {other:?} (xyz or ply)"))),
    }
}

fn required<T>(v: Option<T>, flag: &str) -> Result<T, CliError> {
    v.ok_or_else(|| usage(format!("missing required flag {flag}")))
}

fn format_for(path: &Path, explicit: Option<CloudFormat>) -> CloudFormat {
    explicit.unwrap_or_else(|| CloudFormat::from_path(path))
}

// ----- synth -----------------------------------------------------------------

const SYNTH_HELP: &str = "\
mugnet synth --output <cloud file> [flags]
  --recipe <name or path>   built-in recipe name (`room`) or recipe file (default room)
  --seed <n>                generation seed (default 0)
  --points <n>              total point budget (default from recipe)
  --format <xyz|ply>        output format (default from extension)
  --output <path>           where to write the labeled cloud";

fn cmd_synth(args: &[String]) -> Result<(), CliError> {
    let mut recipe_arg = String::from("room");
    let mut seed = 0u64;
    let mut points: Option<usize> = None;
    let mut output: Option<PathBuf> = None;
    let mut format: Option<CloudFormat> = None;
    let mut flags = Flags::new(args, SYNTH_HELP);
    while let Some((flag, value)) = flags.next()? {
        match flag {
            "--recipe" => recipe_arg = value.to_string(),
            "--seed" => seed = parse_num(flag, value)?,
            "--points" => points = Some(parse_num(flag, value)?),
            "--output" => output = Some(PathBuf::from(value)),
            "--format" => format = Some(parse_format(value)?),
            other => return Err(usage(format!("unknown flag {other} for synth"))),
        }
    }
    let output = required(output, "--output")?;
    let recipe = match SceneRecipe::builtin(&recipe_arg) {
        Some(r) => r,
        None => SceneRecipe::load(Path::new(&recipe_arg))?,
    };
    let cloud = synth_scene(&recipe, seed, points)?;
    save_cloud(&cloud, &output, format_for(&output, format))?;
    println!(
        "wrote {} points, {} classes -> {}",
        cloud.len(),
        recipe.num_classes(),
        output.display()
    );
    Ok(())
}

// ----- cluster ---------------------------------------------------------------

const CLUSTER_HELP: &str = "\
mugnet cluster --input <cloud file> --output <graph file> [flags]
  --knn <n>                 spatial neighbours per point (default 8)
  --lambda <x>              merge variance bound (default 0.02)
  --feature-k <n>           neighbours for geometric features (default 10)
  --classes <n>             validate labels against this class count
  --format <xyz|ply>        input format (default from extension)";

fn cmd_cluster(args: &[String]) -> Result<(), CliError> {
    let mut input: Option<PathBuf> = None;
    let mut output: Option<PathBuf> = None;
    let mut knn = DEFAULT_PARTITION_KNN;
    let mut lambda = DEFAULT_LAMBDA;
    let mut feature_k = DEFAULT_FEATURE_K;
    let mut classes: Option<usize> = None;
    let mut format: Option<CloudFormat> = None;
    let mut flags = Flags::new(args, CLUSTER_HELP);
    while let Some((flag, value)) = flags.next()? {
        match flag {
            "--input" => input = Some(PathBuf::from(value)),
            "--output" => output = Some(PathBuf::from(value)),
            "--knn" => knn = parse_num(flag, value)?,
            "--lambda" => lambda = parse_num(flag, value)?,
            "--feature-k" => feature_k = parse_num(flag, value)?,
            "--classes" => classes = Some(parse_num(flag, value)?),
            "--format" => format = Some(parse_format(value)?),
            other => return Err(usage(format!("unknown flag {other} for cluster"))),
        }
    }
    let input = required(input, "--input")?;
    let output = required(output, "--output")?;
    let cloud = load_cloud(&input, format_for(&input, format), classes)?;
    let feats = geometric_features(&cloud, feature_k)?;
    let graph = partition(&cloud, &feats, knn, lambda)?;
    println!(
        "{} points -> {} clusters (compression {:.1})",
        cloud.len(),
        graph.num_nodes(),
        compression_ratio(&graph)
    );
    if cloud.labels().is_some() {
        let quality = purity(&graph, &cloud)?;
        println!("mean purity {:.4}", quality.mean_purity);
    }
    let class_count = classes.unwrap_or_else(|| {
        cloud
            .labels()
            .map(|ls| ls.iter().max().map(|&m| m + 1).unwrap_or(0))
            .unwrap_or(0)
    });
    let gf = GraphFile::new(graph, &cloud, feats, class_count)?;
    write_graph_file(&gf, &output)?;
    println!("wrote graph -> {}", output.display());
    Ok(())
}

// ----- train -------------------------------------------------------------------

const TRAIN_HELP: &str = "\
mugnet train --input <graph file> [--input <graph file> ...] --output <checkpoint> [flags]
  --config <path>           training config file (key = value lines)
  --seed <n>                override the config seed
  --epochs <n>              override the config epoch count
  --classes <n>             class count when no config is given
  --history <path>          write per-epoch loss/accuracy CSV here";

fn cmd_train(args: &[String]) -> Result<(), CliError> {
    let mut inputs: Vec<PathBuf> = Vec::new();
    let mut output: Option<PathBuf> = None;
    let mut config_path: Option<PathBuf> = None;
    let mut seed: Option<u64> = None;
    let mut epochs: Option<usize> = None;
    let mut classes: Option<usize> = None;
    let mut history_path: Option<PathBuf> = None;
    let mut flags = Flags::new(args, TRAIN_HELP);
    while let Some((flag, value)) = flags.next()? {
        match flag {
            "--input" => inputs.extend(value.split(',').map(PathBuf::from)),
            "--output" => output = Some(PathBuf::from(value)),
            "--config" => config_path = Some(PathBuf::from(value)),
            "--seed" => seed = Some(parse_num(flag, value)?),
            "--epochs" => epochs = Some(parse_num(flag, value)?),
            "--classes" => classes = Some(parse_num(flag, value)?),
            "--history" => history_path = Some(PathBuf::from(value)),
            other => return Err(usage(format!("unknown flag {other} for train"))),
        }
    }
    if inputs.is_empty() {
        return Err(usage("missing required flag --input"));
    }
    let output = required(output, "--output")?;

    let graph_files: Vec<GraphFile> = inputs
        .iter()
        .map(|p| read_graph_file(p))
        .collect::<Result<_, _>>()?;

    let mut cfg = match &config_path {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::io(path.display().to_string(), e))?;
            TrainConfig::parse(&text)?
        }
        None => {
            let input_dim = graph_files[0].point_feature_dim();
            let class_count = classes
                .or_else(|| {
                    graph_files
                        .iter()
                        .map(|g| g.class_count)
                        .max()
                        .filter(|&c| c > 0)
                })
                .ok_or_else(|| usage("graphs carry no class count; pass --classes or --config"))?;
            TrainConfig::desk_default(ModelConfig::desk_default(input_dim, class_count))
        }
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(e) = epochs {
        cfg.epochs = e;
    }

    let scenes: Vec<SceneInputs> = graph_files
        .iter()
        .map(|g| SceneInputs::prepare(g, &cfg.model.embed))
        .collect::<Result<_, _>>()?;

    let (params, history) = train(&scenes, &cfg)?;
    save_checkpoint(&params, &output)?;
    println!(
        "trained {} epochs on {} scene(s); final loss {:.6} -> {}",
        cfg.epochs,
        scenes.len(),
        history.epochs.last().map(|e| e.loss).unwrap_or(f64::NAN),
        output.display()
    );
    if let Some(hp) = history_path {
        std::fs::write(&hp, history.to_csv())
            .map_err(|e| Error::io(hp.display().to_string(), e))?;
        println!("history -> {}", hp.display());
    }
    Ok(())
}

// ----- infer -------------------------------------------------------------------

const INFER_HELP: &str = "\
mugnet infer --input <graph file> --checkpoint <path> --output <cloud file> [flags]
  --format <xyz|ply>        output format (default from extension); ply is
                            colorized by predicted label";

fn cmd_infer(args: &[String]) -> Result<(), CliError> {
    let mut input: Option<PathBuf> = None;
    let mut checkpoint: Option<PathBuf> = None;
    let mut output: Option<PathBuf> = None;
    let mut format: Option<CloudFormat> = None;
    let mut flags = Flags::new(args, INFER_HELP);
    while let Some((flag, value)) = flags.next()? {
        match flag {
            "--input" => input = Some(PathBuf::from(value)),
            "--checkpoint" => checkpoint = Some(PathBuf::from(value)),
            "--output" => output = Some(PathBuf::from(value)),
            "--format" => format = Some(parse_format(value)?),
            other => return Err(usage(format!("unknown flag {other} for infer"))),
        }
    }
    let input = required(input, "--input")?;
    let checkpoint = required(checkpoint, "--checkpoint")?;
    let output = required(output, "--output")?;

    let params = load_checkpoint(&checkpoint)?;
    let gf = read_graph_file(&input)?;
    let scene = SceneInputs::prepare(&gf, &params.config.embed)?;
    let logits = infer_logits(&params, &scene)?;
    let labels = predict_points(
        &logits,
        params.config.classes,
        &scene.members,
        scene.num_points,
    );

    let out_format = format_for(&output, format);
    let mut cloud = PointCloud::new(gf.positions.clone(), None, Some(labels.clone()))?;
    if out_format == CloudFormat::PlyAscii {
        cloud.set_colors(labels.iter().map(|&l| label_palette(l)).collect())?;
    }
    save_cloud(&cloud, &output, out_format)?;
    println!(
        "labeled {} points across {} clusters -> {}",
        scene.num_points,
        scene.num_nodes(),
        output.display()
    );
    Ok(())
}

// ----- eval --------------------------------------------------------------------

const EVAL_HELP: &str = "\
mugnet eval --pred <cloud file> --truth <cloud file> --classes <n> [flags]
  --pred <path>             predicted labels (--input works as an alias)
  --truth <path>            ground-truth labels
  --output <path>           write the per-class CSV report here
  --format <xyz|ply>        input format for both files (default from extension)";

fn cmd_eval(args: &[String]) -> Result<(), CliError> {
    let mut pred_path: Option<PathBuf> = None;
    let mut truth_path: Option<PathBuf> = None;
    let mut classes: Option<usize> = None;
    let mut output: Option<PathBuf> = None;
    let mut format: Option<CloudFormat> = None;
    let mut flags = Flags::new(args, EVAL_HELP);
    while let Some((flag, value)) = flags.next()? {
        match flag {
            "--pred" | "--input" => pred_path = Some(PathBuf::from(value)),
            "--truth" => truth_path = Some(PathBuf::from(value)),
            "--classes" => classes = Some(parse_num(flag, value)?),
            "--output" => output = Some(PathBuf::from(value)),
            "--format" => format = Some(parse_format(value)?),
            other => return Err(usage(format!("unknown flag {other} for eval"))),
        }
    }
    let pred_path = required(pred_path, "--pred")?;
    let truth_path = required(truth_path, "--truth")?;
    let classes = required(classes, "--classes")?;

    let pred_cloud = load_cloud(&pred_path, format_for(&pred_path, format), Some(classes))?;
    let truth_cloud = load_cloud(&truth_path, format_for(&truth_path, format), Some(classes))?;
    let pred = pred_cloud
        .labels()
        .ok_or_else(|| Error::Validation(format!("{} has no labels", pred_path.display())))?;
    let truth = truth_cloud
        .labels()
        .ok_or_else(|| Error::Validation(format!("{} has no labels", truth_path.display())))?;
    let eval = evaluate_with_mode(
        pred,
        truth,
        classes,
        mugnet::metrics::MissingClassMode::Exclude,
    )?;
    print!("{}", eval.to_table());
    if let Some(out) = output {
        std::fs::write(&out, eval.to_csv()).map_err(|e| Error::io(out.display().to_string(), e))?;
        println!("report -> {}", out.display());
    }
    Ok(())
}

// ----- bench -------------------------------------------------------------------

const BENCH_HELP: &str = "\
mugnet bench --input <graph file> [--input ...] --checkpoint <path> [flags]
  --batch-sizes <a,b,c>     strictly increasing batch sizes (default 1..=scenes)
  --repetitions <n>         timed repetitions per batch size (default 5)
  --threads <n>             worker threads (default: available cores)
  --output <path>           write the CSV report here";

fn cmd_bench(args: &[String]) -> Result<(), CliError> {
    let mut inputs: Vec<PathBuf> = Vec::new();
    let mut checkpoint: Option<PathBuf> = None;
    let mut batch_sizes: Option<Vec<usize>> = None;
    let mut repetitions: Option<usize> = None;
    let mut threads: Option<usize> = None;
    let mut output: Option<PathBuf> = None;
    let mut flags = Flags::new(args, BENCH_HELP);
    while let Some((flag, value)) = flags.next()? {
        match flag {
            "--input" => inputs.extend(value.split(',').map(PathBuf::from)),
            "--checkpoint" => checkpoint = Some(PathBuf::from(value)),
            "--batch-sizes" => {
                let sizes: Result<Vec<usize>, _> =
                    value.split(',').map(|v| v.trim().parse()).collect();
                batch_sizes = Some(sizes.map_err(|_| usage(format!("bad batch sizes {value:?}")))?);
            }
            "--repetitions" => repetitions = Some(parse_num(flag, value)?),
            "--threads" => threads = Some(parse_num(flag, value)?),
            "--output" => output = Some(PathBuf::from(value)),
            other => return Err(usage(format!("unknown flag {other} for bench"))),
        }
    }
    if inputs.is_empty() {
        return Err(usage("missing required flag --input"));
    }
    let checkpoint = required(checkpoint, "--checkpoint")?;

    let params = load_checkpoint(&checkpoint)?;
    let scenes: Vec<SceneInputs> = inputs
        .iter()
        .map(|p| {
            let gf = read_graph_file(p)?;
            SceneInputs::prepare(&gf, &params.config.embed)
        })
        .collect::<Result<_, _>>()?;

    let mut cfg = BenchConfig::new(batch_sizes.unwrap_or_else(|| (1..=scenes.len()).collect()));
    if let Some(r) = repetitions {
        cfg.repetitions = r;
    }
    if let Some(t) = threads {
        cfg.threads = t;
    }
    let report = bench_batched(&params, &scenes, &cfg)?;
    print!("{}", report.to_csv());
    println!("{}", report.trend_summary());
    if let Some(out) = output {
        report.write_csv(&out)?;
        println!("report -> {}", out.display());
    }
    Ok(())
}
