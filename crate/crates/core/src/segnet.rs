//! Per-pixel classifier: a shared tanh trunk feeding a K-way class head
//! and a binary outlier head. The class logits double as an unnormalised
//! log joint density, so `logsumexp` over them is `ln p̂(x)`.

use std::io::{Read, Write};
use std::path::Path;

use nfhybrid_autodiff::{affine_into, Graph, Tensor, Var};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::checkpoint;
use crate::error::{invalid, Error, Result};
use crate::seed;

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// `[in, out]`
    pub weight: Tensor,
    /// `[out]`
    pub bias: Tensor,
}

impl Linear {
    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[fan_in, fan_out]),
            bias: Tensor::zeros(&[fan_out]),
        }
    }

    /// Weights ~ N(0, 1/fan_in), zero bias.
    pub fn random(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        let scale = (1.0 / fan_in as f64).sqrt();
        let w = (0..fan_in * fan_out)
            .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Self {
            weight: Tensor::matrix(fan_in, fan_out, w).expect("consistent shape"),
            bias: Tensor::zeros(&[fan_out]),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn fan_out(&self) -> usize {
        self.weight.shape()[1]
    }

    pub(crate) fn bind(&self, g: &mut Graph, trainable: bool) -> (Var, Var) {
        let leaf = |g: &mut Graph, t: &Tensor| {
            if trainable {
                g.param(t.clone())
            } else {
                g.constant(t.clone())
            }
        };
        (leaf(g, &self.weight), leaf(g, &self.bias))
    }

    pub(crate) fn from_pair(weight: Tensor, bias: Tensor) -> Result<Self> {
        match (weight.shape(), bias.shape()) {
            ([_, o], [b]) if o == b => Ok(Self { weight, bias }),
            (w, b) => Err(Error::Format {
                what: "checkpoint",
                msg: format!("weight {w:?} does not match bias {b:?}"),
            }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Heads {
    ClassOnly,
    Both,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegNetParams {
    pub trunk: Vec<Linear>,
    /// K class logits.
    pub class_head: Linear,
    /// Logits for (d_in, d_out).
    pub ood_head: Linear,
}

impl SegNetParams {
    pub fn new(feature_dim: usize, hidden: &[usize], classes: usize, seed: u64) -> Result<Self> {
        if feature_dim == 0 || classes < 2 || hidden.is_empty() || hidden.contains(&0) {
            return Err(invalid(format!(
                "segnet D={feature_dim} hidden={hidden:?} K={classes}"
            )));
        }
        let mut rng = seed::rng_at(seed, &[0x5e9]);
        let mut trunk = Vec::with_capacity(hidden.len());
        let mut fan_in = feature_dim;
        for &h in hidden {
            trunk.push(Linear::random(fan_in, h, &mut rng));
            fan_in = h;
        }
        Ok(Self {
            trunk,
            class_head: Linear::random(fan_in, classes, &mut rng),
            ood_head: Linear::random(fan_in, 2, &mut rng),
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.trunk[0].fan_in()
    }

    pub fn class_count(&self) -> usize {
        self.class_head.fan_out()
    }

    fn linears(&self) -> impl Iterator<Item = &Linear> {
        self.trunk
            .iter()
            .chain([&self.class_head, &self.ood_head])
    }

    /// Declaration order: trunk layers, class head, outlier head; weight
    /// before bias.
    pub fn tensors(&self) -> Vec<&Tensor> {
        self.linears().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.trunk
            .iter_mut()
            .chain([&mut self.class_head, &mut self.ood_head])
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    pub fn shapes(&self) -> Vec<Vec<usize>> {
        self.tensors().iter().map(|t| t.shape().to_vec()).collect()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.all_finite())
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> SegNetVars {
        SegNetVars {
            trunk: self.trunk.iter().map(|l| l.bind(g, trainable)).collect(),
            class_head: self.class_head.bind(g, trainable),
            ood_head: self.ood_head.bind(g, trainable),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save_file(path, |w| self.write(w))
    }

    pub fn load(path: &Path) -> Result<Self> {
        checkpoint::load_file(path, Self::read)
    }

    pub fn write(&self, w: &mut impl Write) -> Result<()> {
        checkpoint::write_tensors(w, MAGIC, self.trunk.len() + 2, &self.tensors())
    }

    pub fn read(r: &mut impl Read) -> Result<Self> {
        let (layers, tensors) = checkpoint::read_tensors(r, MAGIC, "segnet checkpoint")?;
        if layers < 3 || tensors.len() != 2 * layers {
            return Err(Error::Format {
                what: "segnet checkpoint",
                msg: format!("{layers} layers with {} tensors", tensors.len()),
            });
        }
        let mut it = tensors.into_iter();
        let mut linears = Vec::with_capacity(layers);
        while let (Some(w), Some(b)) = (it.next(), it.next()) {
            linears.push(Linear::from_pair(w, b)?);
        }
        let ood_head = linears.pop().expect("layers >= 3");
        let class_head = linears.pop().expect("layers >= 3");
        let params = Self {
            trunk: linears,
            class_head,
            ood_head,
        };
        let mut fan_in = params.feature_dim();
        for l in params.linears().take(params.trunk.len()) {
            if l.fan_in() != fan_in {
                return Err(Error::Format {
                    what: "segnet checkpoint",
                    msg: "trunk layers do not chain".into(),
                });
            }
            fan_in = l.fan_out();
        }
        if params.class_head.fan_in() != fan_in || params.ood_head.fan_in() != fan_in || params.ood_head.fan_out() != 2 {
            return Err(Error::Format {
                what: "segnet checkpoint",
                msg: "heads do not match trunk".into(),
            });
        }
        Ok(params)
    }
}

const MAGIC: &[u8; 8] = b"NFHSEGNT";

/// Graph-bound parameter handles.
#[derive(Debug, Clone)]
pub struct SegNetVars {
    pub trunk: Vec<(Var, Var)>,
    pub class_head: (Var, Var),
    pub ood_head: (Var, Var),
}

/// Graph outputs of a forward pass over `N` pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PredictionVars {
    /// `[N, K]`
    pub class_logits: Var,
    /// `[N, 2]`
    pub ood_logits: Option<Var>,
}

impl SegNetVars {
    /// Same order as [`SegNetParams::tensors`].
    pub fn all(&self) -> Vec<Var> {
        self.trunk
            .iter()
            .chain([&self.class_head, &self.ood_head])
            .flat_map(|&(w, b)| [w, b])
            .collect()
    }

    /// Gradients in declaration order, zeros where nothing flowed.
    pub fn grads(&self, g: &Graph) -> Vec<Tensor> {
        self.all().into_iter().map(|v| g.grad_or_zeros(v)).collect()
    }

    /// Applies the network to `features: [N, D]`.
    pub fn forward(&self, g: &mut Graph, features: Var, heads: Heads) -> Result<PredictionVars> {
        let mut h = features;
        for &(w, b) in &self.trunk {
            let a = g.affine(h, w, b)?;
            h = g.tanh(a)?;
        }
        let class_logits = g.affine(h, self.class_head.0, self.class_head.1)?;
        let ood_logits = match heads {
            Heads::Both => Some(g.affine(h, self.ood_head.0, self.ood_head.1)?),
            Heads::ClassOnly => None,
        };
        Ok(PredictionVars {
            class_logits,
            ood_logits,
        })
    }
}

/// Dense predictions detached from any graph.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelPrediction {
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    /// `H*W*K`
    pub class_logits: Vec<f64>,
    /// `H*W*2`, absent when only the class head ran.
    pub ood_logits: Option<Vec<f64>>,
}

impl PixelPrediction {
    pub fn pixel_count(&self) -> usize {
        self.height * self.width
    }

    pub fn ood_logits(&self) -> Result<&[f64]> {
        self.ood_logits
            .as_deref()
            .ok_or_else(|| invalid("prediction has no outlier-head logits"))
    }

    /// Per-pixel argmax of the class logits (first index wins ties).
    pub fn argmax(&self) -> Vec<usize> {
        self.class_logits
            .chunks(self.classes)
            .map(|row| {
                let mut best = 0;
                for (i, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = i;
                    }
                }
                best
            })
            .collect()
    }
}

/// Pixels per block of the tape-free forward pass.
const INFER_BLOCK: usize = 256;

/// Inference over an `height x width` grid of `D`-dim features, without a
/// tape; bit-identical to [`SegNetVars::forward`].
pub fn forward(
    params: &SegNetParams,
    features: &[f64],
    height: usize,
    width: usize,
    heads: Heads,
) -> Result<PixelPrediction> {
    let d = params.feature_dim();
    if features.len() != height * width * d {
        return Err(invalid(format!(
            "{} feature values for {height}x{width} pixels of dim {d}",
            features.len()
        )));
    }
    let n = height * width;
    let k = params.class_count();
    let mut class_logits = Vec::with_capacity(n * k);
    let mut ood_logits = matches!(heads, Heads::Both).then(|| Vec::with_capacity(n * 2));
    let (mut h, mut next, mut out) = (Vec::new(), Vec::new(), Vec::new());
    for start in (0..n).step_by(INFER_BLOCK) {
        let rows = INFER_BLOCK.min(n - start);
        h.clear();
        h.extend_from_slice(&features[start * d..(start + rows) * d]);
        let mut fan_in = d;
        for l in &params.trunk {
            affine_into(&h, l.weight.data(), l.bias.data(), &mut next, rows, fan_in, l.fan_out());
            next.iter_mut().for_each(|v| *v = v.tanh());
            std::mem::swap(&mut h, &mut next);
            fan_in = l.fan_out();
        }
        let c = &params.class_head;
        affine_into(&h, c.weight.data(), c.bias.data(), &mut out, rows, fan_in, k);
        class_logits.extend_from_slice(&out);
        if let Some(o) = &mut ood_logits {
            let oh = &params.ood_head;
            affine_into(&h, oh.weight.data(), oh.bias.data(), &mut out, rows, fan_in, 2);
            o.extend_from_slice(&out);
        }
    }
    Ok(PixelPrediction {
        height,
        width,
        classes: k,
        class_logits,
        ood_logits,
    })
}

fn check_temperature(t: f64) -> Result<()> {
    if t > 0.0 && t.is_finite() {
        Ok(())
    } else {
        Err(invalid(format!("temperature must be positive, got {t}")))
    }
}

/// Softmax of `logits / t` over rows of width `n`.
pub(crate) fn tempered_softmax(logits: &[f64], n: usize, t: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks(n) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let start = out.len();
        let mut s = 0.0;
        for &v in row {
            let e = ((v - m) / t).exp();
            s += e;
            out.push(e);
        }
        out[start..].iter_mut().for_each(|e| *e /= s);
    }
    out
}

pub(crate) fn logsumexp_rows(logits: &[f64], n: usize) -> Vec<f64> {
    logits
        .chunks(n)
        .map(|row| {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
        })
        .collect()
}

/// `softmax(class_logits / t)` per pixel, `H*W*K`.
pub fn class_posterior(pred: &PixelPrediction, t: f64) -> Result<Vec<f64>> {
    check_temperature(t)?;
    Ok(tempered_softmax(&pred.class_logits, pred.classes, t))
}

/// `softmax(ood_logits / t)` per pixel, `H*W*2`; index 1 is `P(d_out|x)`.
pub fn ood_posterior(pred: &PixelPrediction, t: f64) -> Result<Vec<f64>> {
    check_temperature(t)?;
    Ok(tempered_softmax(pred.ood_logits()?, 2, t))
}

/// `ln p̂(x) = logsumexp_y logit_y` per pixel (up to the unknown
/// normaliser).
pub fn log_density(pred: &PixelPrediction) -> Vec<f64> {
    logsumexp_rows(&pred.class_logits, pred.classes)
}
