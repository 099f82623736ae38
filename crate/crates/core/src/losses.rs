//! Training objectives on the autodiff graph, and the stop-gradient
//! routing that separates the flow-trained variants.

use nfhybrid_autodiff::{Graph, Tensor, Var};

use crate::error::{Error, Result};
use crate::flow::{self, FlowParams, FlowVars};
use crate::segnet::PredictionVars;
use crate::toydata::NEG;
use crate::variants::{SourceKind, VariantConfig};

/// Probability floor inside logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    /// Energy term `L_x`.
    pub beta_x: f64,
    /// Negative-pixel outlier-head term of `L_d`.
    pub beta_d: f64,
    /// `L_jsd`, in the flow objective and the NFlowJS classifier loss.
    pub beta_jsd: f64,
    /// Negative-pixel outlier-head weight when training without energy.
    pub ood_head_beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            beta_x: 0.03,
            beta_d: 0.3,
            beta_jsd: 0.03,
            ood_head_beta: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.beta_x, self.beta_d, self.beta_jsd, self.ood_head_beta];
        if all.iter().all(|b| *b >= 0.0 && b.is_finite()) {
            Ok(())
        } else {
            Err(Error::Config(format!("loss weights must be >= 0: {self:?}")))
        }
    }
}

fn is_inlier(label: i16, classes: usize) -> bool {
    label >= 0 && (label as usize) < classes
}

pub fn inlier_mask(labels: &[i16], classes: usize) -> Vec<bool> {
    labels.iter().map(|&l| is_inlier(l, classes)).collect()
}

pub fn negative_mask(labels: &[i16]) -> Vec<bool> {
    labels.iter().map(|&l| l == NEG).collect()
}

fn check_rows(g: &Graph, v: Var, labels: &[i16], op: &str) -> Result<usize> {
    match g.shape(v) {
        [n, k] if *n == labels.len() => Ok(*k),
        s => Err(Error::InvalidArgument(format!(
            "{op}: logits {s:?} for {} labels",
            labels.len()
        ))),
    }
}

fn ood_of(p: &PredictionVars) -> Result<Var> {
    p.ood_logits
        .ok_or_else(|| Error::InvalidArgument("prediction has no outlier-head logits".into()))
}

/// Mean `-ln P(y|x)` over inlier pixels; negative and ignored pixels are
/// excluded.
pub fn loss_cls(g: &mut Graph, class_logits: Var, labels: &[i16]) -> Result<Var> {
    let k = check_rows(g, class_logits, labels, "loss_cls")?;
    let mask = inlier_mask(labels, k);
    if !mask.contains(&true) {
        return Err(Error::EmptySupport("loss_cls inlier set"));
    }
    let target: Vec<usize> = labels
        .iter()
        .map(|&l| if is_inlier(l, k) { l as usize } else { 0 })
        .collect();
    let logp = g.log_softmax(class_logits)?;
    let picked = g.pick(logp, &target)?;
    let nll = g.neg(picked)?;
    Ok(g.masked_mean(nll, &mask)?)
}

/// Mean `-ln P(d_in|x)` over inlier pixels.
pub fn loss_d_inlier(g: &mut Graph, ood_logits: Var, labels: &[i16], classes: usize) -> Result<Var> {
    check_rows(g, ood_logits, labels, "loss_d")?;
    let mask = inlier_mask(labels, classes);
    if !mask.contains(&true) {
        return Err(Error::EmptySupport("loss_d inlier set"));
    }
    let logp = g.log_softmax(ood_logits)?;
    let d_in = g.pick(logp, &vec![0; labels.len()])?;
    let nll = g.neg(d_in)?;
    Ok(g.masked_mean(nll, &mask)?)
}

/// Mean `-ln P(d_out|x)` over negative pixels, `None` without any.
pub fn loss_d_negative(g: &mut Graph, ood_logits: Var, labels: &[i16]) -> Result<Option<Var>> {
    check_rows(g, ood_logits, labels, "loss_d")?;
    let mask = negative_mask(labels);
    if !mask.contains(&true) {
        return Ok(None);
    }
    let logp = g.log_softmax(ood_logits)?;
    let d_out = g.pick(logp, &vec![1; labels.len()])?;
    let nll = g.neg(d_out)?;
    Ok(Some(g.masked_mean(nll, &mask)?))
}

#[derive(Debug, Clone, Copy)]
pub struct DLoss {
    pub inlier: Var,
    pub negative: Option<Var>,
}

/// Both outlier-head terms, each averaged over its own pixel population.
pub fn loss_d(g: &mut Graph, pred: &PredictionVars, labels: &[i16]) -> Result<DLoss> {
    let ood = ood_of(pred)?;
    let classes = g.shape(pred.class_logits)[1];
    Ok(DLoss {
        inlier: loss_d_inlier(g, ood, labels, classes)?,
        negative: loss_d_negative(g, ood, labels)?,
    })
}

/// Mean `ln p̂(x) = logsumexp(class logits)` over negative pixels. Enters
/// the objective with a positive weight, pushing the energy density down
/// on negatives. `None` without negative pixels.
pub fn loss_x(g: &mut Graph, class_logits: Var, labels: &[i16]) -> Result<Option<Var>> {
    check_rows(g, class_logits, labels, "loss_x")?;
    let mask = negative_mask(labels);
    if !mask.contains(&true) {
        return Ok(None);
    }
    let lse = g.logsumexp(class_logits)?;
    Ok(Some(g.masked_mean(lse, &mask)?))
}

/// Per-row `JSD(softmax(z) ‖ U_K)` with natural logs, `[N]`.
pub fn jsd_to_uniform_rows(g: &mut Graph, class_logits: Var) -> Result<Var> {
    let [n, k] = *g.shape(class_logits) else {
        return Err(Error::InvalidArgument("jsd expects [N, K] logits".into()));
    };
    let u = 1.0 / k as f64;
    let p = g.softmax(class_logits)?;
    let floor = g.constant(Tensor::full(&[n, k], PROB_FLOOR));
    let p_safe = g.max(p, floor)?;
    let half_p = g.scale(p, 0.5)?;
    let m = g.add_scalar(half_p, 0.5 * u)?;
    let log_m = g.log(m)?;
    let log_p = g.log(p_safe)?;
    // KL(P‖M) = Σ p (ln p − ln m)
    let diff = g.sub(log_p, log_m)?;
    let kl_pm_terms = g.mul(p, diff)?;
    let kl_pm = g.sum_last(kl_pm_terms)?;
    // KL(U‖M) = Σ u (ln u − ln m)
    let sum_log_m = g.sum_last(log_m)?;
    let scaled = g.scale(sum_log_m, -u)?;
    let kl_um = g.add_scalar(scaled, u.ln())?;
    let both = g.add(kl_pm, kl_um)?;
    Ok(g.scale(both, 0.5)?)
}

/// Mean JSD to uniform over the rows selected by `mask` (all rows when
/// `None`).
pub fn loss_jsd(g: &mut Graph, class_logits: Var, mask: Option<&[bool]>) -> Result<Var> {
    let rows = jsd_to_uniform_rows(g, class_logits)?;
    match mask {
        Some(m) => Ok(g.masked_mean(rows, m)?),
        None => Ok(g.mean(rows)?),
    }
}

/// Which forward pass feeds which segmentation-loss term. The same
/// prediction may serve several terms.
#[derive(Debug, Clone, Copy)]
pub struct SegPredictions {
    /// `L_cls` and the inlier half of `L_d`.
    pub inlier: PredictionVars,
    pub neg_d: PredictionVars,
    pub neg_x: PredictionVars,
    pub neg_jsd: PredictionVars,
}

impl SegPredictions {
    pub fn single(p: PredictionVars) -> Self {
        Self {
            inlier: p,
            neg_d: p,
            neg_x: p,
            neg_jsd: p,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SegLoss {
    pub total: Var,
    pub cls: Var,
    pub d_inlier: Option<Var>,
    pub d_negative: Option<Var>,
    pub x: Option<Var>,
    pub jsd: Option<Var>,
}

/// `L_cls + [ood]·(L_d,in + β_d·L_d,neg) + [energy]·β_x·L_x`
/// (+ `β_jsd·L_jsd` on negatives for the JSD-trained classifier).
pub fn loss_seg(
    g: &mut Graph,
    preds: &SegPredictions,
    labels: &[i16],
    w: &LossWeights,
    v: &VariantConfig,
) -> Result<SegLoss> {
    let classes = g.shape(preds.inlier.class_logits)[1];
    let cls = loss_cls(g, preds.inlier.class_logits, labels)?;
    let mut total = cls;
    let mut out = SegLoss {
        total,
        cls,
        d_inlier: None,
        d_negative: None,
        x: None,
        jsd: None,
    };
    if v.use_ood_head {
        let d_in = loss_d_inlier(g, ood_of(&preds.inlier)?, labels, classes)?;
        total = g.add(total, d_in)?;
        out.d_inlier = Some(d_in);
        if let Some(d_neg) = loss_d_negative(g, ood_of(&preds.neg_d)?, labels)? {
            let weighted = g.scale(d_neg, v.neg_d_weight(w))?;
            total = g.add(total, weighted)?;
            out.d_negative = Some(d_neg);
        }
    }
    if v.use_energy {
        if let Some(x) = loss_x(g, preds.neg_x.class_logits, labels)? {
            let weighted = g.scale(x, w.beta_x)?;
            total = g.add(total, weighted)?;
            out.x = Some(x);
        }
    }
    if v.seg_jsd {
        let mask = negative_mask(labels);
        if mask.contains(&true) {
            check_rows(g, preds.neg_jsd.class_logits, labels, "loss_jsd")?;
            let jsd = loss_jsd(g, preds.neg_jsd.class_logits, Some(&mask))?;
            let weighted = g.scale(jsd, w.beta_jsd)?;
            total = g.add(total, weighted)?;
            out.jsd = Some(jsd);
        }
    }
    out.total = total;
    Ok(out)
}

/// `-mean ln p_ψ(x)` over inlier-crop pixels `[N, D]`.
pub fn loss_mle(g: &mut Graph, params: &FlowParams, vars: &FlowVars, crops: Var) -> Result<Var> {
    if g.value(crops).numel() == 0 {
        return Err(Error::EmptySupport("loss_mle crop batch"));
    }
    let lp = flow::log_prob_graph(g, params, vars, crops)?;
    let m = g.mean(lp)?;
    Ok(g.neg(m)?)
}

#[derive(Debug, Clone, Copy)]
pub struct FlowLoss {
    pub total: Var,
    pub mle: Var,
    pub jsd: Option<Var>,
}

/// `L_mle + β_jsd·L_jsd`. `jsd_logits` are class logits of a forward pass
/// over the flow samples with the classifier parameters held constant;
/// required when the variant trains the flow with JSD.
pub fn loss_flow(
    g: &mut Graph,
    params: &FlowParams,
    vars: &FlowVars,
    crops: Var,
    jsd_logits: Option<Var>,
    w: &LossWeights,
    v: &VariantConfig,
) -> Result<FlowLoss> {
    if !v.uses_flow() {
        return Err(Error::Config(format!(
            "{} does not train a flow",
            v.method.key()
        )));
    }
    let mle = loss_mle(g, params, vars, crops)?;
    if !v.use_jsd_in_flow_loss {
        return Ok(FlowLoss {
            total: mle,
            mle,
            jsd: None,
        });
    }
    let logits = jsd_logits
        .ok_or_else(|| Error::InvalidArgument("flow JSD needs predictions on samples".into()))?;
    let jsd = loss_jsd(g, logits, None)?;
    let weighted = g.scale(jsd, w.beta_jsd)?;
    let total = g.add(mle, weighted)?;
    Ok(FlowLoss {
        total,
        mle,
        jsd: Some(jsd),
    })
}

/// Flow samples as seen by each loss term: the live node where the term
/// may update the flow, a stop-gradient copy otherwise.
#[derive(Debug, Clone, Copy)]
pub struct RoutedNegatives {
    pub live: Var,
    pub stopped: Var,
    pub for_d: Var,
    pub for_x: Var,
    /// Input of the flow objective's JSD term.
    pub for_flow_jsd: Var,
    /// Input of the classifier-side JSD term; never reaches the flow.
    pub for_seg_jsd: Var,
}

pub fn route_gradients(g: &mut Graph, v: &VariantConfig, samples: Var) -> Result<RoutedNegatives> {
    if v.negative_source == SourceKind::Auxiliary && !v.grads_to_flow.is_empty() {
        return Err(Error::Config(format!(
            "{}: flow gradients requested with auxiliary negatives",
            v.method.key()
        )));
    }
    let stopped = g.stop_gradient(samples)?;
    let pick = |on: bool| if on { samples } else { stopped };
    Ok(RoutedNegatives {
        live: samples,
        stopped,
        for_d: pick(v.grads_to_flow.ld),
        for_x: pick(v.grads_to_flow.lx),
        for_flow_jsd: pick(v.grads_to_flow.ljsd),
        for_seg_jsd: stopped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::variants::Method;

    fn logits(g: &mut Graph, rows: usize, data: Vec<f64>) -> Var {
        let k = data.len() / rows;
        g.param(Tensor::matrix(rows, k, data).unwrap())
    }

    #[test]
    fn loss_cls_examples() {
        let mut g = Graph::new();
        let z = logits(&mut g, 3, vec![0.0; 12]);
        let l = loss_cls(&mut g, z, &[0, 3, NEG]).unwrap();
        assert!((g.value(l).item() - 4f64.ln()).abs() < 1e-12);

        let z = logits(&mut g, 2, vec![60.0, 0.0, 0.0, 60.0]);
        let l = loss_cls(&mut g, z, &[0, 1]).unwrap();
        assert!(g.value(l).item() < 1e-20);

        let z = logits(&mut g, 2, vec![1.0, 0.0, 0.0, 1.0]);
        let l = loss_cls(&mut g, z, &[0, 1]).unwrap();
        let want = -(1f64.exp() / (1f64.exp() + 1.0)).ln();
        assert!((want - 0.31326).abs() < 1e-5);
        assert!((g.value(l).item() - want).abs() < 1e-15);

        let z = logits(&mut g, 2, vec![0.0; 4]);
        assert!(matches!(loss_cls(&mut g, z, &[NEG, -1]), Err(Error::EmptySupport(_))));
    }

    fn pred(g: &mut Graph, class: Vec<f64>, ood: Vec<f64>, rows: usize) -> PredictionVars {
        PredictionVars {
            class_logits: logits(g, rows, class),
            ood_logits: Some(logits(g, rows, ood)),
        }
    }

    #[test]
    fn loss_d_examples() {
        let mut g = Graph::new();
        let p = pred(&mut g, vec![0.0; 8], vec![0.4; 8], 4);
        let d = loss_d(&mut g, &p, &[0, 1, NEG, NEG]).unwrap();
        let total = g.value(d.inlier).item() + g.value(d.negative.unwrap()).item();
        assert!((total - 2.0 * 2f64.ln()).abs() < 1e-12);

        let p = pred(&mut g, vec![0.0; 4], vec![60.0, 0.0, 0.0, 60.0], 2);
        let d = loss_d(&mut g, &p, &[0, NEG]).unwrap();
        assert!(g.value(d.inlier).item() + g.value(d.negative.unwrap()).item() < 1e-20);

        let p = pred(&mut g, vec![0.0; 2], vec![3f64.ln(), 0.0], 1);
        let d = loss_d(&mut g, &p, &[1]).unwrap();
        assert!((g.value(d.inlier).item() + 0.75f64.ln()).abs() < 1e-15);
        assert!((g.value(d.inlier).item() - 0.2877).abs() < 1e-4);
        assert!(d.negative.is_none());
    }

    #[test]
    fn loss_x_examples() {
        let mut g = Graph::new();
        let z = logits(&mut g, 2, vec![0.0; 8]);
        let x = loss_x(&mut g, z, &[0, NEG]).unwrap().unwrap();
        assert!((g.value(x).item() - 4f64.ln()).abs() < 1e-15);
        assert!(loss_x(&mut g, z, &[0, 1]).unwrap().is_none());

        let base = vec![0.3, -0.2, 1.1, 0.0, 2.0, -1.0];
        let z = logits(&mut g, 2, base.clone());
        let a = loss_x(&mut g, z, &[NEG, NEG]).unwrap().unwrap();
        let a = g.value(a).item();
        let z = logits(&mut g, 2, base.iter().map(|v| v + 1.7).collect());
        let b = loss_x(&mut g, z, &[NEG, NEG]).unwrap().unwrap();
        let b = g.value(b).item();
        assert!((b - a - 1.7).abs() < 1e-12);
    }

    #[test]
    fn loss_jsd_examples() {
        let mut g = Graph::new();
        let z = logits(&mut g, 1, vec![0.2, 0.2, 0.2]);
        let j = loss_jsd(&mut g, z, None).unwrap();
        assert!(g.value(j).item().abs() < 1e-15);

        // one-hot, K = 2: M = (0.75, 0.25)
        let z = logits(&mut g, 1, vec![200.0, 0.0]);
        let j = loss_jsd(&mut g, z, None).unwrap();
        let j = g.value(j).item();
        let kl_pm = (1.0f64 / 0.75).ln();
        let kl_um = 0.5 * (0.5f64 / 0.75).ln() + 0.5 * (0.5f64 / 0.25).ln();
        let want = 0.5 * kl_pm + 0.5 * kl_um;
        assert!((want - 0.21576).abs() < 1e-5);
        assert!((j - want).abs() < 1e-12);
    }

    #[test]
    fn losses_stay_finite_at_extreme_logits() {
        let mut g = Graph::checked();
        let z = logits(&mut g, 2, vec![50.0, -50.0, -50.0, 50.0]);
        let o = logits(&mut g, 2, vec![-50.0, 50.0, 50.0, -50.0]);
        let p = PredictionVars {
            class_logits: z,
            ood_logits: Some(o),
        };
        let labels = [1, NEG];
        let w = LossWeights::default();
        for m in Method::ALL {
            let v = VariantConfig::preset(m);
            let l = loss_seg(&mut g, &SegPredictions::single(p), &labels, &w, &v).unwrap();
            g.backward(l.total).unwrap();
            assert!(g.value(l.total).item().is_finite());
        }
        let j = loss_jsd(&mut g, z, None).unwrap();
        g.backward(j).unwrap();
        assert!(g.grad(z).unwrap().all_finite());
    }

    #[test]
    fn loss_seg_reduces_to_cls_without_heads() {
        let mut g = Graph::new();
        let p = pred(&mut g, vec![0.3, -0.1, 0.8, 0.2], vec![0.5, -0.5, 1.0, 2.0], 2);
        let labels = [1, NEG];
        let mut v = VariantConfig::preset(Method::OodHead);
        v.use_ood_head = false;
        let w = LossWeights {
            beta_x: 0.0,
            beta_d: 0.0,
            beta_jsd: 0.0,
            ood_head_beta: 0.0,
        };
        let s = loss_seg(&mut g, &SegPredictions::single(p), &labels, &w, &v).unwrap();
        let c = loss_cls(&mut g, p.class_logits, &labels).unwrap();
        assert_eq!(g.value(s.total).item(), g.value(c).item());
    }

    #[test]
    fn zero_energy_weight_reproduces_ood_head_objective() {
        let mut g = Graph::new();
        let p = pred(&mut g, vec![0.3, -0.1, 0.8, 0.2, 1.0, 1.5], vec![0.5, -0.5, 1.0, 2.0, 0.0, 0.1], 3);
        let labels = [1, NEG, 0];
        let w = LossWeights {
            beta_x: 0.0,
            ..LossWeights::default()
        };
        let hybrid = loss_seg(&mut g, &SegPredictions::single(p), &labels, &w, &VariantConfig::preset(Method::DenseHybrid)).unwrap();
        let w_head = LossWeights {
            ood_head_beta: w.beta_d,
            ..w
        };
        let head = loss_seg(&mut g, &SegPredictions::single(p), &labels, &w_head, &VariantConfig::preset(Method::OodHead)).unwrap();
        assert_eq!(g.value(hybrid.total).item(), g.value(head.total).item());
    }

    #[test]
    fn flow_loss_examples() {
        let f = FlowParams::new(2, 2, &[8], 2.0, 0).unwrap();
        let mut g = Graph::new();
        let vars = f.bind(&mut g, true);
        let crops = g.constant(Tensor::zeros(&[5, 2]));
        let v = VariantConfig::preset(Method::NfHybridLdLx);
        let fl = loss_flow(&mut g, &f, &vars, crops, None, &LossWeights::default(), &v).unwrap();
        assert!((g.value(fl.mle).item() - (2.0 * std::f64::consts::PI).ln()).abs() < 1e-12);
        assert_eq!(g.value(fl.total).item(), g.value(fl.mle).item());

        let v = VariantConfig::preset(Method::NfHybridJs);
        let z = g.constant(Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap());
        let w = LossWeights {
            beta_jsd: 0.0,
            ..LossWeights::default()
        };
        let fl = loss_flow(&mut g, &f, &vars, crops, Some(z), &w, &v).unwrap();
        assert_eq!(g.value(fl.total).item(), g.value(fl.mle).item());
        assert!(loss_flow(&mut g, &f, &vars, crops, None, &w, &v).is_err());
        let aux = VariantConfig::preset(Method::DenseHybrid);
        assert!(loss_flow(&mut g, &f, &vars, crops, None, &w, &aux).is_err());
    }

    #[test]
    fn routing_rejects_flow_gradients_with_auxiliary_source() {
        let mut g = Graph::new();
        let s = g.param(Tensor::zeros(&[2, 2]));
        let mut v = VariantConfig::preset(Method::DenseHybrid);
        assert!(route_gradients(&mut g, &v, s).is_ok());
        v.grads_to_flow.ld = true;
        assert!(route_gradients(&mut g, &v, s).is_err());
    }

    #[test]
    fn routing_selects_live_or_stopped() {
        let mut g = Graph::new();
        let s = g.param(Tensor::zeros(&[2, 2]));
        let r = route_gradients(&mut g, &VariantConfig::preset(Method::NfHybridLd), s).unwrap();
        assert_eq!(r.for_d, s);
        assert_eq!(r.for_x, r.stopped);
        assert_eq!(r.for_flow_jsd, r.stopped);
        assert!(!g.requires_grad(r.stopped));
    }
}
