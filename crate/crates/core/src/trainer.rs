//! Two-phase training, evaluation and the experiment grid.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nfhybrid_autodiff::{cosine_lr, Graph, OptimizerKind, OptimizerState, Tensor, Var};
use rand::seq::SliceRandom;
use rand::Rng;

use crate::config::ExperimentConfig;
use crate::error::{invalid, Error, Result};
use crate::eval::{self, EvalReport, PooledPixels};
use crate::flow::{self, FlowParams, FlowVars};
use crate::losses::{self, FlowLoss, LossWeights, SegLoss, SegPredictions};
use crate::scores::{ScoreKind, ScoreRegistry};
use crate::seed;
use crate::segnet::{self, Heads, PredictionVars, SegNetParams, SegNetVars};
use crate::toydata::{self, BenchmarkSpec, Flip, Patch, Scene};
use crate::variants::{FlowGradients, Method, VariantConfig};

// seed-path tags
const TRAIN_SCENE: u64 = 1;
const TEST_SCENE: u64 = 2;
const TEST_ANOMALY: u64 = 3;
const SEG_INIT: u64 = 4;
const FLOW_INIT: u64 = 5;
const ORDER_1: u64 = 6;
const AUG_1: u64 = 7;
const ORDER_2: u64 = 8;
const AUG_2: u64 = 9;
const PASTE_2: u64 = 10;
const ENERGY: u64 = 11;

#[derive(Debug, Clone)]
pub struct Dataset {
    pub spec: BenchmarkSpec,
    pub train: Vec<Scene>,
    /// Inlier scenes with one injected anomaly each.
    pub test: Vec<Scene>,
}

pub fn build_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    let spec = cfg.benchmark()?;
    let s = cfg.seed;
    let train = (0..cfg.train_scenes as u64)
        .map(|i| toydata::generate_scene(&spec.scene, seed::derive(s, &[TRAIN_SCENE, i])))
        .collect::<Result<Vec<_>>>()?;
    let test = (0..cfg.test_scenes as u64)
        .map(|i| {
            let scene = toydata::generate_scene(&spec.scene, seed::derive(s, &[TEST_SCENE, i]))?;
            let anomaly_seed = seed::derive(s, &[TEST_ANOMALY, i]);
            let side = seed::rng(anomaly_seed).random_range(cfg.anomaly_min_side..=cfg.anomaly_max_side);
            toydata::inject_test_anomaly(&scene, anomaly_seed, &spec.anomaly, side)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { spec, train, test })
}

/// Mean loss terms of one epoch; `None` for terms the phase or variant
/// does not use.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLosses {
    pub phase: u8,
    pub cls: f64,
    pub d: Option<f64>,
    pub x: Option<f64>,
    pub mle: Option<f64>,
    pub jsd: Option<f64>,
}

#[derive(Default)]
struct Accumulator {
    steps: usize,
    cls: f64,
    d: Option<f64>,
    x: Option<f64>,
    mle: Option<f64>,
    jsd: Option<f64>,
}

fn acc(slot: &mut Option<f64>, v: Option<f64>) {
    if let Some(v) = v {
        *slot = Some(slot.unwrap_or(0.0) + v);
    }
}

impl Accumulator {
    fn finish(self, phase: u8) -> EpochLosses {
        let n = self.steps.max(1) as f64;
        EpochLosses {
            phase,
            cls: self.cls / n,
            d: self.d.map(|v| v / n),
            x: self.x.map(|v| v / n),
            mle: self.mle.map(|v| v / n),
            jsd: self.jsd.map(|v| v / n),
        }
    }
}

fn finite(g: &Graph, v: Var, term: &'static str, epoch: usize) -> Result<f64> {
    let x = g.value(v).item();
    if x.is_finite() {
        Ok(x)
    } else {
        Err(Error::NonFiniteLoss { term, epoch })
    }
}

fn finite_opt(g: &Graph, v: Option<Var>, term: &'static str, epoch: usize) -> Result<Option<f64>> {
    v.map(|v| finite(g, v, term, epoch)).transpose()
}

fn steps_per_epoch(cfg: &ExperimentConfig) -> usize {
    cfg.train_scenes.div_ceil(cfg.batch_size)
}

fn epoch_order(seed: u64, tag: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seed::rng_at(seed, &[tag, epoch as u64]));
    order
}

fn augmented(cfg: &ExperimentConfig, scene: &Scene, seed: u64) -> Result<Scene> {
    toydata::augment(scene, seed, (cfg.jitter_min, cfg.jitter_max), cfg.crop, Flip::Random)
}

fn step_params(
    opt: &mut OptimizerState,
    tensors: Vec<&mut Tensor>,
    grads: &[Tensor],
) -> Result<()> {
    let mut tensors = tensors;
    let refs: Vec<&Tensor> = grads.iter().collect();
    opt.step(&mut tensors, &refs)?;
    Ok(())
}

fn seg_optimizer(params: &SegNetParams, lr: f64) -> Result<OptimizerState> {
    let shapes = params.shapes();
    let refs: Vec<&[usize]> = shapes.iter().map(Vec::as_slice).collect();
    Ok(OptimizerState::new(OptimizerKind::Adam, lr, &refs)?)
}

/// Classifier after phase 1, shareable by every variant with the same
/// [`ExperimentConfig::phase1_fingerprint`].
#[derive(Debug, Clone)]
pub struct Phase1 {
    pub params: SegNetParams,
    pub losses: Vec<EpochLosses>,
    pub fingerprint: String,
}

/// Closed-set training: `L_cls` only, outlier head untouched.
pub fn train_phase1(cfg: &ExperimentConfig, data: &Dataset) -> Result<Phase1> {
    let s = cfg.seed;
    let mut params = SegNetParams::new(
        cfg.feature_dim,
        &cfg.seg_hidden,
        cfg.classes,
        seed::derive(s, &[SEG_INIT]),
    )?;
    let mut opt = seg_optimizer(&params, cfg.seg_lr_max)?;
    let spe = steps_per_epoch(cfg);
    let total = cfg.epochs_1 * spe;
    let mut step = 0;
    let mut losses = Vec::with_capacity(cfg.epochs_1);
    for epoch in 0..cfg.epochs_1 {
        let order = epoch_order(s, ORDER_1, epoch, data.train.len());
        let mut a = Accumulator::default();
        for batch in order.chunks(cfg.batch_size) {
            let mut features = Vec::new();
            let mut labels = Vec::new();
            for &i in batch {
                let img = augmented(cfg, &data.train[i], seed::derive(s, &[AUG_1, epoch as u64, i as u64]))?;
                features.extend_from_slice(&img.features);
                labels.extend_from_slice(&img.labels);
            }
            let mut g = Graph::new();
            let vars = params.bind(&mut g, true);
            let x = g.constant(Tensor::matrix(labels.len(), cfg.feature_dim, features)?);
            let pred = vars.forward(&mut g, x, Heads::ClassOnly)?;
            let l = losses::loss_cls(&mut g, pred.class_logits, &labels)?;
            a.cls += finite(&g, l, "cls", epoch)?;
            a.steps += 1;
            g.backward(l)?;
            opt.set_lr(cosine_lr(step, total, cfg.seg_lr_max, cfg.seg_lr_min)?)?;
            step_params(&mut opt, params.tensors_mut(), &vars.grads(&g))?;
            step += 1;
        }
        losses.push(a.finish(1));
    }
    Ok(Phase1 {
        params,
        losses,
        fingerprint: cfg.phase1_fingerprint(),
    })
}

/// One mixed-content batch: augmented crops with one negative patch each.
#[derive(Debug, Clone)]
pub struct Phase2Batch {
    pub dim: usize,
    /// `[N, D]`; auxiliary patches already pasted.
    pub features: Vec<f64>,
    pub labels: Vec<i16>,
    /// Rows receiving flow samples, in latent-row order.
    pub neg_rows: Vec<usize>,
    /// Latent draws for the flow samples, `[neg_rows.len(), D]`.
    pub latent: Option<Tensor>,
    /// Inlier pixels for the flow likelihood, `[M, D]`.
    pub mle_crops: Option<Tensor>,
}

/// Pastes one negative per image at a uniform location. Flow negatives
/// stay latent until the graph is built.
pub fn make_phase2_batch(
    cfg: &ExperimentConfig,
    spec: &BenchmarkSpec,
    variant: &VariantConfig,
    images: Vec<Scene>,
    rng: &mut impl Rng,
) -> Result<Phase2Batch> {
    let d = cfg.feature_dim;
    let mut b = Phase2Batch {
        dim: d,
        features: Vec::new(),
        labels: Vec::new(),
        neg_rows: Vec::new(),
        latent: None,
        mle_crops: None,
    };
    let mut latent = Vec::new();
    let mut crops = Vec::new();
    for mut img in images {
        let offset = b.labels.len();
        let side = toydata::sample_patch_size(rng, cfg.patch_min_frac, cfg.patch_max_frac, img.height.min(img.width))?;
        let row = rng.random_range(0..=img.height - side);
        let col = rng.random_range(0..=img.width - side);
        if variant.uses_flow() {
            let (_, crop) = toydata::crop_inlier(&img, rng, side)?;
            crops.extend(crop);
            let z = flow::sample_latent(rng, side * side, d);
            latent.extend_from_slice(z.data());
            // placeholder features, replaced on the graph
            img.paste(&Patch::new(side, d, vec![0.0; side * side * d])?, row, col)?;
            for r in row..row + side {
                for c in col..col + side {
                    b.neg_rows.push(offset + r * img.width + c);
                }
            }
        } else {
            img.paste(&Patch::sample(&spec.auxiliary, side, rng), row, col)?;
        }
        b.features.extend_from_slice(&img.features);
        b.labels.extend_from_slice(&img.labels);
    }
    if variant.uses_flow() {
        b.latent = Some(Tensor::matrix(b.neg_rows.len(), d, latent)?);
        b.mle_crops = Some(Tensor::matrix(crops.len() / d, d, crops)?);
    }
    Ok(b)
}

/// Every loss of one phase-2 step on a fresh graph.
#[derive(Debug, Clone)]
pub struct Phase2Terms {
    pub seg_vars: SegNetVars,
    pub flow_vars: Option<FlowVars>,
    pub seg: SegLoss,
    pub flow: Option<FlowLoss>,
    /// `L_seg + L_flow`; the flow receives only what routing lets through.
    pub total: Var,
}

pub fn phase2_graph(
    g: &mut Graph,
    seg: &SegNetParams,
    flow_params: Option<&FlowParams>,
    batch: &Phase2Batch,
    v: &VariantConfig,
    w: &LossWeights,
) -> Result<Phase2Terms> {
    let seg_vars = seg.bind(g, true);
    let heads = if v.use_ood_head { Heads::Both } else { Heads::ClassOnly };
    let base = g.constant(Tensor::matrix(batch.labels.len(), batch.dim, batch.features.clone())?);
    let mut passes: HashMap<Var, PredictionVars> = HashMap::new();
    let mut pass = |g: &mut Graph, input: Var| -> Result<PredictionVars> {
        if let Some(p) = passes.get(&input) {
            return Ok(*p);
        }
        let p = seg_vars.forward(g, input, heads)?;
        passes.insert(input, p);
        Ok(p)
    };
    let (preds, flow_part) = match (v.uses_flow(), flow_params) {
        (false, _) => (SegPredictions::single(pass(g, base)?), None),
        (true, None) => return Err(invalid("flow variant without flow parameters")),
        (true, Some(fp)) => {
            let latent = batch
                .latent
                .clone()
                .ok_or_else(|| invalid("flow batch without latent draws"))?;
            let fvars = fp.bind(g, true);
            let z = g.constant(latent);
            let (samples, _) = flow::forward_graph(g, fp, &fvars, z)?;
            let routed = losses::route_gradients(g, v, samples)?;
            let mut inputs: HashMap<Var, Var> = HashMap::new();
            let mut input_for = |g: &mut Graph, src: Var| -> Result<Var> {
                if let Some(i) = inputs.get(&src) {
                    return Ok(*i);
                }
                let i = g.overwrite_rows(base, &batch.neg_rows, src)?;
                inputs.insert(src, i);
                Ok(i)
            };
            let x_d = input_for(g, routed.for_d)?;
            let x_x = input_for(g, routed.for_x)?;
            let x_j = input_for(g, routed.for_seg_jsd)?;
            let p_d = pass(g, x_d)?;
            let preds = SegPredictions {
                inlier: p_d,
                neg_d: p_d,
                neg_x: if v.use_energy { pass(g, x_x)? } else { p_d },
                neg_jsd: if v.seg_jsd { pass(g, x_j)? } else { p_d },
            };
            (preds, Some((fp, fvars, routed)))
        }
    };
    let seg_loss = losses::loss_seg(g, &preds, &batch.labels, w, v)?;
    let (flow_vars, flow_loss, total) = match flow_part {
        None => (None, None, seg_loss.total),
        Some((fp, fvars, routed)) => {
            let crops = batch
                .mle_crops
                .clone()
                .ok_or_else(|| invalid("flow batch without inlier crops"))?;
            let crops = g.constant(crops);
            let jsd_logits = if v.use_jsd_in_flow_loss {
                let frozen = seg.bind(g, false);
                Some(frozen.forward(g, routed.for_flow_jsd, Heads::ClassOnly)?.class_logits)
            } else {
                None
            };
            let fl = losses::loss_flow(g, fp, &fvars, crops, jsd_logits, w, v)?;
            let total = g.add(seg_loss.total, fl.total)?;
            (Some(fvars), Some(fl), total)
        }
    };
    Ok(Phase2Terms {
        seg_vars,
        flow_vars,
        seg: seg_loss,
        flow: flow_loss,
        total,
    })
}

/// Parameters after training.
#[derive(Debug, Clone)]
pub struct Trained {
    pub seg: SegNetParams,
    pub flow: Option<FlowParams>,
}

impl Trained {
    pub fn save(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir)?;
        let mut out = vec![dir.join("final.segnet")];
        self.seg.save(&out[0])?;
        if let Some(f) = &self.flow {
            let p = dir.join("final.flow");
            f.save(&p)?;
            out.push(p);
        }
        Ok(out)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let seg = SegNetParams::load(&dir.join("final.segnet"))?;
        let fp = dir.join("final.flow");
        let flow = if fp.exists() { Some(FlowParams::load(&fp)?) } else { None };
        Ok(Self { seg, flow })
    }
}

/// During the warm-up the flow learns from the likelihood alone.
fn warmup_variant(v: &VariantConfig) -> VariantConfig {
    VariantConfig {
        grads_to_flow: FlowGradients::NONE,
        use_jsd_in_flow_loss: false,
        ..*v
    }
}

pub fn train_phase2(
    cfg: &ExperimentConfig,
    data: &Dataset,
    phase1: &Phase1,
) -> Result<(Trained, Vec<EpochLosses>)> {
    let s = cfg.seed;
    let v = cfg.variant_config()?;
    let w = cfg.weights();
    let mut seg = phase1.params.clone();
    let mut flow_params = if v.uses_flow() {
        Some(FlowParams::new(
            cfg.feature_dim,
            cfg.flow_layers,
            &cfg.flow_hidden,
            cfg.flow_s_max,
            seed::derive(s, &[FLOW_INIT]),
        )?)
    } else {
        None
    };
    let mut seg_opt = seg_optimizer(&seg, cfg.seg_lr_max)?;
    let mut flow_opt = match &flow_params {
        Some(f) => {
            let shapes = f.shapes();
            let refs: Vec<&[usize]> = shapes.iter().map(Vec::as_slice).collect();
            Some(OptimizerState::new(OptimizerKind::Adamax, cfg.flow_lr, &refs)?)
        }
        None => None,
    };
    let spe = steps_per_epoch(cfg);
    let total = cfg.epochs_2 * spe;
    let warmup = (cfg.flow_warmup_frac * total as f64).round() as usize;
    let warm_v = warmup_variant(&v);
    let mut step = 0;
    let mut history = Vec::with_capacity(cfg.epochs_2);
    for epoch in 0..cfg.epochs_2 {
        let ep = cfg.epochs_1 + epoch;
        let order = epoch_order(s, ORDER_2, epoch, data.train.len());
        let mut a = Accumulator::default();
        for (b, batch_idx) in order.chunks(cfg.batch_size).enumerate() {
            let step_v = if step < warmup { warm_v } else { v };
            let images = batch_idx
                .iter()
                .map(|&i| augmented(cfg, &data.train[i], seed::derive(s, &[AUG_2, epoch as u64, i as u64])))
                .collect::<Result<Vec<_>>>()?;
            let mut rng = seed::rng_at(s, &[PASTE_2, epoch as u64, b as u64]);
            let batch = make_phase2_batch(cfg, &data.spec, &step_v, images, &mut rng)?;
            let mut g = Graph::new();
            let t = phase2_graph(&mut g, &seg, flow_params.as_ref(), &batch, &step_v, &w)?;
            a.cls += finite(&g, t.seg.cls, "cls", ep)?;
            let d_in = finite_opt(&g, t.seg.d_inlier, "d", ep)?;
            let d_neg = finite_opt(&g, t.seg.d_negative, "d", ep)?;
            acc(&mut a.d, d_in.map(|x| x + d_neg.unwrap_or(0.0)));
            acc(&mut a.x, finite_opt(&g, t.seg.x, "x", ep)?);
            let jsd = match &t.flow {
                Some(fl) => {
                    acc(&mut a.mle, Some(finite(&g, fl.mle, "mle", ep)?));
                    fl.jsd.or(t.seg.jsd)
                }
                None => t.seg.jsd,
            };
            acc(&mut a.jsd, finite_opt(&g, jsd, "jsd", ep)?);
            finite(&g, t.total, "total", ep)?;
            a.steps += 1;
            g.backward(t.total)?;
            seg_opt.set_lr(cosine_lr(step, total, cfg.seg_lr_max, cfg.seg_lr_min)?)?;
            step_params(&mut seg_opt, seg.tensors_mut(), &t.seg_vars.grads(&g))?;
            if let (Some(fp), Some(fv), Some(fo)) = (flow_params.as_mut(), &t.flow_vars, flow_opt.as_mut()) {
                step_params(fo, fp.tensors_mut(), &fv.grads(&g))?;
                if !fp.all_finite() {
                    return Err(Error::NonFiniteLoss { term: "flow parameters", epoch: ep });
                }
            }
            step += 1;
        }
        history.push(a.finish(2));
    }
    Ok((Trained { seg, flow: flow_params }, history))
}

/// Mean `ln p̂` on held-out inlier pixels and on freshly drawn negatives
/// of the variant's source.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnergyGap {
    pub inlier: f64,
    pub negative: f64,
}

impl EnergyGap {
    pub fn holds(&self) -> bool {
        self.inlier > self.negative
    }
}

fn mean_log_density(seg: &SegNetParams, rows: &[f64], dim: usize) -> Result<f64> {
    let n = rows.len() / dim;
    let pred = segnet::forward(seg, rows, 1, n, Heads::ClassOnly)?;
    let lp = segnet::log_density(&pred);
    Ok(lp.iter().sum::<f64>() / n as f64)
}

pub fn energy_gap(cfg: &ExperimentConfig, data: &Dataset, trained: &Trained) -> Result<EnergyGap> {
    let d = cfg.feature_dim;
    let mut inliers = Vec::new();
    for s in &data.test {
        for p in 0..s.pixel_count() {
            if !s.anomaly[p] && s.is_inlier_label(s.labels[p]) {
                inliers.extend_from_slice(&s.features[p * d..(p + 1) * d]);
            }
        }
    }
    let side = 32;
    let neg = match &trained.flow {
        Some(f) => flow::sample_patch(f, seed::derive(cfg.seed, &[ENERGY]), side)?,
        None => Patch::sample(&data.spec.auxiliary, side, &mut seed::rng_at(cfg.seed, &[ENERGY])),
    };
    Ok(EnergyGap {
        inlier: mean_log_density(&trained.seg, &inliers, d)?,
        negative: mean_log_density(&trained.seg, &neg.features, d)?,
    })
}

/// Pools predictions over `scenes` and reports every requested score.
pub fn evaluate(
    seg: &SegNetParams,
    scenes: &[Scene],
    kinds: &[ScoreKind],
    scorers: &ScoreRegistry,
    method: &str,
    tpr_target: f64,
) -> Result<Vec<EvalReport>> {
    if scenes.is_empty() {
        return Err(invalid("no scenes to evaluate"));
    }
    let mut pooled = vec![PooledPixels::default(); kinds.len()];
    for s in scenes {
        let pred = segnet::forward(seg, &s.features, s.height, s.width, Heads::Both)?;
        let arg = pred.argmax();
        for (k, pool) in kinds.iter().zip(pooled.iter_mut()) {
            let map = scorers.get(*k)?.score(&pred)?;
            pool.pred.extend_from_slice(&arg);
            pool.labels.extend_from_slice(&s.labels);
            pool.anomaly.extend_from_slice(&s.anomaly);
            pool.scores.extend(map.values);
        }
    }
    kinds
        .iter()
        .zip(&pooled)
        .map(|(k, p)| eval::report_from_pooled(p, seg.class_count(), method, *k, tpr_target))
        .collect()
}

#[derive(Debug, Clone)]
pub struct RunRecord {
    pub fingerprint: String,
    pub method: Method,
    pub seed: u64,
    pub losses: Vec<EpochLosses>,
    pub reports: Vec<EvalReport>,
    pub energy: Option<EnergyGap>,
    pub checkpoints: Vec<PathBuf>,
    pub wall_clock_secs: f64,
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| x.to_string())
}

impl RunRecord {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "fingerprint = {}", self.fingerprint);
        let _ = writeln!(s, "method = {}", self.method);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "wall_clock_secs = {:.3}", self.wall_clock_secs);
        for (i, c) in self.checkpoints.iter().enumerate() {
            let _ = writeln!(s, "checkpoint.{i} = {}", c.display());
        }
        if let Some(e) = self.energy {
            let _ = writeln!(s, "energy.inlier_log_density = {}", e.inlier);
            let _ = writeln!(s, "energy.negative_log_density = {}", e.negative);
        }
        for (i, l) in self.losses.iter().enumerate() {
            let _ = writeln!(
                s,
                "epoch.{i} = phase={} cls={} d={} x={} mle={} jsd={}",
                l.phase,
                l.cls,
                opt(l.d),
                opt(l.x),
                opt(l.mle),
                opt(l.jsd)
            );
        }
        for r in &self.reports {
            let _ = writeln!(s, "\n[{}]", r.score);
            s.push_str(&r.to_text());
        }
        s
    }

    pub fn csv(&self) -> String {
        let mut s = String::from(eval::CSV_HEADER);
        s.push('\n');
        for r in &self.reports {
            s.push_str(&r.csv_row());
            s.push('\n');
        }
        s
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct TrainOptions {
    pub verbose: bool,
}

/// Phase 2 and evaluation on top of a (possibly shared) phase-1 model.
pub fn train_with_phase1(
    cfg: &ExperimentConfig,
    data: &Dataset,
    phase1: &Phase1,
    out: Option<&Path>,
    opts: TrainOptions,
) -> Result<(Trained, RunRecord)> {
    cfg.validate()?;
    if phase1.fingerprint != cfg.phase1_fingerprint() {
        return Err(Error::Config("phase-1 model belongs to another configuration".into()));
    }
    let start = Instant::now();
    let v = cfg.variant_config()?;
    let mut checkpoints = Vec::new();
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        let p = dir.join("phase1.segnet");
        phase1.params.save(&p)?;
        checkpoints.push(p);
    }
    let (trained, phase2_losses) = train_phase2(cfg, data, phase1)?;
    let mut losses = phase1.losses.clone();
    losses.extend(phase2_losses);
    if opts.verbose {
        for (i, l) in losses.iter().enumerate() {
            eprintln!("epoch {i:3} phase {} cls {:.4} d {} x {} mle {} jsd {}", l.phase, l.cls, opt(l.d), opt(l.x), opt(l.mle), opt(l.jsd));
        }
    }
    if let Some(dir) = out {
        checkpoints.extend(trained.save(dir)?);
    }
    let scorers = ScoreRegistry::with_temperature(cfg.temperature)?;
    let mut reports = evaluate(
        &trained.seg,
        &data.test,
        &cfg.score_kinds()?,
        &scorers,
        v.method.label(),
        cfg.tpr_target,
    )?;
    let fingerprint = cfg.fingerprint();
    for r in &mut reports {
        r.aux_data = !v.uses_flow();
        r.fingerprint = fingerprint.clone();
    }
    let energy = (v.use_energy && cfg.epochs_2 > 0)
        .then(|| energy_gap(cfg, data, &trained))
        .transpose()?;
    let record = RunRecord {
        fingerprint,
        method: v.method,
        seed: cfg.seed,
        losses,
        reports,
        energy,
        checkpoints,
        wall_clock_secs: start.elapsed().as_secs_f64(),
    };
    if let Some(dir) = out {
        std::fs::write(dir.join("record.txt"), record.to_text())?;
        std::fs::write(dir.join("metrics.csv"), record.csv())?;
    }
    Ok((trained, record))
}

/// Full run: data, phase 1, phase 2, evaluation.
pub fn train(cfg: &ExperimentConfig, out: Option<&Path>, opts: TrainOptions) -> Result<(Trained, RunRecord)> {
    cfg.validate()?;
    let data = build_dataset(cfg)?;
    let phase1 = train_phase1(cfg, &data)?;
    train_with_phase1(cfg, &data, &phase1, out, opts)
}

/// Phase-1 models keyed by their fingerprint.
#[derive(Debug, Default)]
pub struct Phase1Cache {
    models: HashMap<String, Phase1>,
}

impl Phase1Cache {
    pub fn get_or_train(&mut self, cfg: &ExperimentConfig, data: &Dataset) -> Result<&Phase1> {
        let key = cfg.phase1_fingerprint();
        if !self.models.contains_key(&key) {
            let p = train_phase1(cfg, data)?;
            self.models.insert(key.clone(), p);
        }
        Ok(&self.models[&key])
    }

    pub fn len(&self) -> usize {
        self.models.len()
    }

    pub fn is_empty(&self) -> bool {
        self.models.is_empty()
    }
}

#[derive(Debug, Clone, Default)]
pub struct GridOutcome {
    pub rows: Vec<EvalReport>,
    /// `(variant, seed, error)` of runs that failed.
    pub failures: Vec<(String, u64, String)>,
    /// Runs trained in this call (resumed runs excluded).
    pub trained_runs: usize,
}

impl GridOutcome {
    pub fn csv(&self) -> String {
        let mut s = String::from(eval::CSV_HEADER);
        s.push('\n');
        for r in &self.rows {
            s.push_str(&r.csv_row());
            s.push('\n');
        }
        s
    }

    /// Results laid out like a comparison table.
    pub fn table(&self) -> String {
        let mut s = format!(
            "{:<16} {:<4} {:<6} {:>7} {:>7} {:>7} {:>7} {:>7}\n",
            "Method", "Aux", "Score", "AP", "FPR95", "AUROC", "closed", "open"
        );
        let pct = |v: Option<f64>| v.map_or_else(|| "-".into(), |x| format!("{:.2}", 100.0 * x));
        for r in &self.rows {
            let a = r.anomaly.as_ref();
            let _ = writeln!(
                s,
                "{:<16} {:<4} {:<6} {:>7} {:>7} {:>7} {:>7} {:>7}",
                r.method,
                if r.aux_data { "yes" } else { "no" },
                r.score.name(),
                pct(a.map(|m| m.ap)),
                pct(a.map(|m| m.fpr95)),
                pct(a.map(|m| m.auroc)),
                pct(Some(r.closed_miou)),
                pct(a.map(|m| m.open_miou)),
            );
        }
        s
    }
}

fn read_resumed(path: &Path, aux: bool) -> Result<Vec<EvalReport>> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    if lines.next() != Some(eval::CSV_HEADER) {
        return Err(Error::Format { what: "metrics table", msg: "bad header".into() });
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let mut r = EvalReport::from_csv_row(l)?;
            r.aux_data = aux;
            Ok(r)
        })
        .collect()
}

/// Trains and evaluates every (config, seed) pair. With `out`, each run's
/// metrics land in `out/<fingerprint>/metrics.csv` and finished runs are
/// skipped on the next call. Failed runs are recorded and the grid goes on.
pub fn run_grid(
    configs: &[ExperimentConfig],
    out: Option<&Path>,
    cache: &mut Phase1Cache,
    opts: TrainOptions,
) -> Result<GridOutcome> {
    if configs.is_empty() {
        return Err(invalid("empty grid"));
    }
    let mut outcome = GridOutcome::default();
    for base in configs {
        for seed in base.seed_list() {
            let cfg = ExperimentConfig {
                seed,
                seeds: Vec::new(),
                ..base.clone()
            };
            let run_dir = out.map(|d| d.join(cfg.fingerprint()));
            let aux = cfg.variant_config().map(|v| !v.uses_flow()).unwrap_or(false);
            if let Some(dir) = &run_dir {
                let metrics = dir.join("metrics.csv");
                if metrics.exists() {
                    outcome.rows.extend(read_resumed(&metrics, aux)?);
                    continue;
                }
            }
            let result = (|| {
                cfg.validate()?;
                let data = build_dataset(&cfg)?;
                let phase1 = cache.get_or_train(&cfg, &data)?;
                train_with_phase1(&cfg, &data, phase1, run_dir.as_deref(), opts)
            })();
            match result {
                Ok((_, record)) => {
                    outcome.trained_runs += 1;
                    outcome.rows.extend(record.reports);
                }
                Err(e) => outcome.failures.push((cfg.variant.clone(), seed, e.to_string())),
            }
        }
    }
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toydata::NEG;

    fn tiny() -> ExperimentConfig {
        ExperimentConfig {
            height: 24,
            width: 24,
            crop: 16,
            train_scenes: 3,
            test_scenes: 2,
            batch_size: 2,
            epochs_1: 2,
            epochs_2: 2,
            seg_hidden: vec![8],
            flow_hidden: vec![8],
            flow_layers: 2,
            anomaly_min_side: 3,
            anomaly_max_side: 5,
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn every_variant_trains_on_a_tiny_config() {
        for m in Method::ALL {
            let cfg = ExperimentConfig {
                variant: m.key().into(),
                ..tiny()
            };
            let (_, rec) = train(&cfg, None, TrainOptions::default()).unwrap();
            assert_eq!(rec.losses.len(), 4);
            assert!(!rec.reports.is_empty());
        }
    }

    #[test]
    fn phase2_zero_epochs_leaves_ood_head_untouched() {
        let cfg = ExperimentConfig {
            variant: "oodhead".into(),
            epochs_2: 0,
            ..tiny()
        };
        let data = build_dataset(&cfg).unwrap();
        let init = SegNetParams::new(8, &[8], 4, seed::derive(cfg.seed, &[SEG_INIT])).unwrap();
        let p1 = train_phase1(&cfg, &data).unwrap();
        assert_eq!(p1.params.ood_head, init.ood_head);
        assert_ne!(p1.params.class_head, init.class_head);
        let (t, _) = train_phase2(&cfg, &data, &p1).unwrap();
        assert_eq!(t.seg, p1.params);
    }

    #[test]
    fn flow_batch_rows_match_latent() {
        let cfg = tiny();
        let data = build_dataset(&cfg).unwrap();
        let v = cfg.variant_config().unwrap();
        let imgs = vec![augmented(&cfg, &data.train[0], 1).unwrap()];
        let b = make_phase2_batch(&cfg, &data.spec, &v, imgs, &mut seed::rng(3)).unwrap();
        let lat = b.latent.as_ref().unwrap();
        assert_eq!(lat.shape(), &[b.neg_rows.len(), 8]);
        assert!(b.neg_rows.iter().all(|&r| b.labels[r] == NEG));
        assert_eq!(b.labels.iter().filter(|&&l| l == NEG).count(), b.neg_rows.len());
    }
}
