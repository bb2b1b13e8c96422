//! Loss, optimizer, training loop and the ablation grid.

use crate::error::{Error, Result};
use crate::metrics::{evaluate_with_mode, Evaluation, MissingClassMode};
use crate::model::{
    forward, infer_logits, predict_points, FusionMode, ModelConfig, MuGNetParams, SceneInputs,
};
use crate::rng::Rng;
use crate::tensor::{BnMode, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossWeighting {
    /// Clusters weighted by member count, aligning the objective with
    /// point-level accuracy.
    SizeWeighted,
    Uniform,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Per-epoch learning-rate multiplier (1 = constant).
    pub lr_decay: f64,
    pub seed: u64,
    pub weighting: LossWeighting,
    pub miou_missing: MissingClassMode,
    pub model: ModelConfig,
}

impl TrainConfig {
    pub fn desk_default(model: ModelConfig) -> Self {
        TrainConfig {
            epochs: 300,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            lr_decay: 1.0,
            seed: 0,
            weighting: LossWeighting::SizeWeighted,
            miou_missing: MissingClassMode::Exclude,
            model,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.epochs < 1 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        // lr = 0 is allowed deliberately: it must be a no-op on weights.
        let lr_ok = self.lr.is_finite() && self.lr >= 0.0;
        let decay_ok = self.lr_decay.is_finite() && self.lr_decay > 0.0;
        if !lr_ok || !decay_ok {
            return Err(Error::Config(format!(
                "bad optimizer rates: lr {}, decay {}",
                self.lr, self.lr_decay
            )));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("betas must be in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let weighting = match self.weighting {
            LossWeighting::SizeWeighted => "size",
            LossWeighting::Uniform => "uniform",
        };
        let missing = match self.miou_missing {
            MissingClassMode::Exclude => "exclude",
            MissingClassMode::CountAsZero => "zero",
        };
        format!(
            "epochs = {}\nlr = {}\nbeta1 = {}\nbeta2 = {}\nadam_eps = {}\nlr_decay = {}\n\
             seed = {}\nloss_weighting = {}\nmiou_missing = {}\n{}",
            self.epochs,
            self.lr,
            self.beta1,
            self.beta2,
            self.adam_eps,
            self.lr_decay,
            self.seed,
            weighting,
            missing,
            self.model.to_text()
        )
    }

    pub fn parse(text: &str) -> Result<TrainConfig> {
        let model = ModelConfig::parse(text)?;
        let mut map = std::collections::HashMap::new();
        for line in text.lines() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some((k, v)) = line.split_once('=') {
                map.insert(k.trim().to_string(), v.trim().to_string());
            }
        }
        let get = |k: &str| -> Result<&String> {
            map.get(k)
                .ok_or_else(|| Error::Config(format!("missing train key {k}")))
        };
        let f = |k: &str| -> Result<f64> {
            get(k)?
                .parse()
                .map_err(|_| Error::Config(format!("bad number for {k}")))
        };
        let cfg = TrainConfig {
            epochs: get("epochs")?
                .parse()
                .map_err(|_| Error::Config("bad epochs".into()))?,
            lr: f("lr")?,
            beta1: f("beta1")?,
            beta2: f("beta2")?,
            adam_eps: f("adam_eps")?,
            lr_decay: f("lr_decay")?,
            seed: get("seed")?
                .parse()
                .map_err(|_| Error::Config("bad seed".into()))?,
            weighting: match get("loss_weighting")?.as_str() {
                "size" => LossWeighting::SizeWeighted,
                "uniform" => LossWeighting::Uniform,
                other => return Err(Error::Config(format!("unknown loss weighting {other:?}"))),
            },
            miou_missing: match get("miou_missing")?.as_str() {
                "exclude" => MissingClassMode::Exclude,
                "zero" => MissingClassMode::CountAsZero,
                other => return Err(Error::Config(format!("unknown miou mode {other:?}"))),
            },
            model,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Cluster-size-weighted softmax cross-entropy, composed from tape
/// primitives (gradients flow through the log-sum-exp path).
pub fn loss(
    tape: &mut Tape,
    logits: Var,
    labels: &[usize],
    sizes: &[usize],
    weighting: LossWeighting,
) -> Result<Var> {
    let shape = tape.shape(logits).to_vec();
    if shape.len() != 2 || labels.len() != shape[0] || sizes.len() != shape[0] {
        return Err(Error::Contract(format!(
            "loss over logits {:?} with {} labels / {} sizes",
            shape,
            labels.len(),
            sizes.len()
        )));
    }
    let classes = shape[1];
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::Validation(format!(
            "label {bad} out of range for {classes} classes"
        )));
    }
    let n = shape[0];
    // Stable log-sum-exp per row.
    let row_max = tape.max(logits, 1)?;
    let row_max_col = tape.reshape(row_max, &[n, 1])?;
    let shifted = tape.sub(logits, row_max_col)?;
    let exps = tape.exp(shifted);
    let sums = tape.sum(exps, 1)?;
    let lse = tape.ln(sums);
    let lse = tape.add(lse, row_max)?;
    let picked = tape.select_columns(logits, labels)?;
    let ce = tape.sub(lse, picked)?;

    let raw: Vec<f64> = match weighting {
        LossWeighting::SizeWeighted => sizes.iter().map(|&s| s as f64).collect(),
        LossWeighting::Uniform => vec![1.0; n],
    };
    let total: f64 = raw.iter().sum();
    let weights: Vec<f64> = raw.iter().map(|w| w / total).collect();
    let w = tape.constant(weights, &[n])?;
    let weighted = tape.mul(ce, w)?;
    Ok(tape.sum_all(weighted))
}

/// Adam with bias correction; state vectors follow the canonical
/// parameter order.
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(cfg: &TrainConfig) -> Self {
        Adam {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step(&mut self, params: &mut MuGNetParams, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let mut idx = 0usize;
        for (_, tensor) in params.named_mut() {
            if !tensor.requires_grad {
                continue;
            }
            if self.m.len() <= idx {
                self.m.push(vec![0.0; tensor.len()]);
                self.v.push(vec![0.0; tensor.len()]);
            }
            let zeros;
            let grad: &[f64] = match &tensor.grad {
                Some(g) => g,
                None => {
                    zeros = vec![0.0; tensor.len()];
                    &zeros
                }
            };
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            // Borrow juggle: update state first, then the data.
            for i in 0..grad.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * grad[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            }
            let data = tensor.data_mut();
            for i in 0..data.len() {
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                data[i] -= lr * mhat / (vhat.sqrt() + self.eps);
            }
            idx += 1;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub loss: f64,
    pub cluster_accuracy: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainHistory {
    pub epochs: Vec<EpochStats>,
}

impl TrainHistory {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,loss,cluster_accuracy\n");
        for (i, e) in self.epochs.iter().enumerate() {
            out.push_str(&format!("{},{},{}\n", i, e.loss, e.cluster_accuracy));
        }
        out
    }
}

/// Trains on labeled scenes: seeded scene shuffle per epoch, one
/// forward/backward/step per scene. Deterministic per seed.
pub fn train(scenes: &[SceneInputs], cfg: &TrainConfig) -> Result<(MuGNetParams, TrainHistory)> {
    cfg.validate()?;
    if scenes.is_empty() {
        return Err(Error::Parameter("no training scenes".into()));
    }
    for (i, s) in scenes.iter().enumerate() {
        let labels = s
            .cluster_labels
            .as_ref()
            .ok_or_else(|| Error::Contract(format!("scene {i} has no labels")))?;
        if let Some(&bad) = labels.iter().find(|&&l| l >= cfg.model.classes) {
            return Err(Error::Validation(format!(
                "scene {i}: cluster label {bad} out of range for {} classes",
                cfg.model.classes
            )));
        }
    }

    let mut params = MuGNetParams::init(&cfg.model, cfg.seed)?;
    let mut adam = Adam::new(cfg);
    let mut shuffle_rng = Rng::new(cfg.seed).fork(0x5A5A);
    let mut history = TrainHistory::default();

    for epoch in 0..cfg.epochs {
        let lr = cfg.lr * cfg.lr_decay.powi(epoch as i32);
        let mut order: Vec<usize> = (0..scenes.len()).collect();
        shuffle_rng.shuffle(&mut order);

        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        let mut total = 0usize;
        for &si in &order {
            let scene = &scenes[si];
            let labels = scene.cluster_labels.as_ref().expect("checked above");
            let mut tape = Tape::new();
            let vars = params.bind(&mut tape);
            let out = forward(
                &mut tape,
                &cfg.model,
                &vars,
                &mut params.bn_stats,
                scene,
                BnMode::Train,
            )?;
            let l = loss(
                &mut tape,
                out.logits,
                labels,
                &scene.cluster_sizes,
                cfg.weighting,
            )?;
            let loss_value = tape.value(l)[0];
            if !loss_value.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    loss: loss_value,
                });
            }
            loss_sum += loss_value;

            let logits = tape.value(out.logits);
            let c = cfg.model.classes;
            for (row, &want) in labels.iter().enumerate() {
                let slice = &logits[row * c..(row + 1) * c];
                let mut best = 0usize;
                for (k, &v) in slice.iter().enumerate() {
                    if v > slice[best] {
                        best = k;
                    }
                }
                correct += (best == want) as usize;
                total += 1;
            }

            tape.backward(l)?;
            params.read_grads(&tape, &vars);
            adam.step(&mut params, lr);
            params.zero_grads();
        }
        history.epochs.push(EpochStats {
            loss: loss_sum / scenes.len() as f64,
            cluster_accuracy: correct as f64 / total.max(1) as f64,
        });
    }
    Ok((params, history))
}

/// Point-level evaluation of a trained model over labeled scenes.
pub fn evaluate_scenes(
    params: &MuGNetParams,
    scenes: &[SceneInputs],
    missing: MissingClassMode,
) -> Result<Evaluation> {
    let mut preds = Vec::new();
    let mut truths = Vec::new();
    for (i, scene) in scenes.iter().enumerate() {
        let truth = scene
            .point_labels
            .as_ref()
            .ok_or_else(|| Error::Contract(format!("scene {i} has no point labels")))?;
        let logits = infer_logits(params, scene)?;
        let pred = predict_points(
            &logits,
            params.config.classes,
            &scene.members,
            scene.num_points,
        );
        preds.extend_from_slice(&pred);
        truths.extend_from_slice(truth);
    }
    evaluate_with_mode(&preds, &truths, params.config.classes, missing)
}

/// Cluster-level accuracy under frozen statistics.
pub fn cluster_accuracy(params: &MuGNetParams, scenes: &[SceneInputs]) -> Result<f64> {
    let mut correct = 0usize;
    let mut total = 0usize;
    for (i, scene) in scenes.iter().enumerate() {
        let labels = scene
            .cluster_labels
            .as_ref()
            .ok_or_else(|| Error::Contract(format!("scene {i} has no labels")))?;
        let logits = infer_logits(params, scene)?;
        let c = params.config.classes;
        for (row, &want) in labels.iter().enumerate() {
            let slice = &logits[row * c..(row + 1) * c];
            let mut best = 0usize;
            for (k, &v) in slice.iter().enumerate() {
                if v > slice[best] {
                    best = k;
                }
            }
            correct += (best == want) as usize;
            total += 1;
        }
    }
    Ok(correct as f64 / total.max(1) as f64)
}

#[derive(Debug, Clone)]
pub struct AblationRow {
    pub name: String,
    pub oa: f64,
    pub miou: f64,
}

/// Trains and evaluates each config on the same scenes and seed; rows
/// come back in input order.
pub fn run_ablation(
    grid: &[(String, TrainConfig)],
    train_scenes: &[SceneInputs],
    eval_scenes: &[SceneInputs],
) -> Result<Vec<AblationRow>> {
    if grid.is_empty() {
        return Err(Error::Parameter("empty ablation grid".into()));
    }
    let mut rows = Vec::with_capacity(grid.len());
    for (name, cfg) in grid {
        let (params, _history) = train(train_scenes, cfg)?;
        let eval = evaluate_scenes(&params, eval_scenes, cfg.miou_missing)?;
        rows.push(AblationRow {
            name: name.clone(),
            oa: eval.oa,
            miou: eval.miou,
        });
    }
    Ok(rows)
}

pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut out = String::from("config,oa,miou\n");
    for r in rows {
        out.push_str(&format!("{},{},{}\n", r.name, r.oa, r.miou));
    }
    out
}

/// The standard ablation grid: backbone-only variants at three depths,
/// a stacked bidirectional variant, a deep-backbone variant, and the
/// baseline.
pub fn standard_ablation_grid(base: &TrainConfig) -> Vec<(String, TrainConfig)> {
    let mut grid = Vec::new();
    let make = |fusion: FusionMode, depth: usize, stacks: usize| -> TrainConfig {
        let mut cfg = base.clone();
        cfg.model.fusion = fusion;
        cfg.model.backbone_depth = depth;
        cfg.model.taps = ModelConfig::default_taps(depth);
        cfg.model.stacks = stacks;
        cfg
    };
    grid.push(("backbone-only-7".into(), make(FusionMode::None, 7, 1)));
    grid.push(("backbone-only-14".into(), make(FusionMode::None, 14, 1)));
    grid.push(("backbone-only-28".into(), make(FusionMode::None, 28, 1)));
    grid.push((
        "stacked-2-bidirectional".into(),
        make(FusionMode::Bidirectional, base.model.backbone_depth, 2),
    ));
    grid.push((
        "14-layer-backbone".into(),
        make(FusionMode::Bidirectional, 14, 1),
    ));
    grid.push((
        "baseline".into(),
        make(FusionMode::Bidirectional, base.model.backbone_depth, 1),
    ));
    grid
}
