//! Affine-coupling normalizing flow over per-pixel feature vectors.
//!
//! Layer `l` keeps one half of the coordinates fixed and feeds it to a
//! tanh MLP producing a bounded log-scale `s = s_max * tanh(.)` and shift
//! `t` for the other half; consecutive layers swap halves. The base
//! density is a standard normal.

use std::f64::consts::PI;
use std::io::{Read, Write};
use std::path::Path;

use nfhybrid_autodiff::{Graph, Tensor, Var};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::checkpoint;
use crate::error::{invalid, Error, Result};
use crate::segnet::Linear;
use crate::seed;
use crate::toydata::Patch;

#[derive(Debug, Clone, PartialEq)]
pub struct CouplingLayer {
    /// Conditioner MLP from the fixed half to `[s | t]` for the other half.
    pub conditioner: Vec<Linear>,
    fixed: Vec<usize>,
    transformed: Vec<usize>,
    /// Column order that undoes `[fixed | transformed]`.
    unpermute: Vec<usize>,
}

impl CouplingLayer {
    fn partition(dim: usize, index: usize) -> (Vec<usize>, Vec<usize>) {
        let first_half = |i: &usize| *i < dim / 2;
        let (lo, hi): (Vec<usize>, Vec<usize>) = (0..dim).partition(first_half);
        if index.is_multiple_of(2) {
            (lo, hi)
        } else {
            (hi, lo)
        }
    }

    fn with_conditioner(dim: usize, index: usize, conditioner: Vec<Linear>) -> Self {
        let (fixed, transformed) = Self::partition(dim, index);
        let order: Vec<usize> = fixed.iter().chain(&transformed).copied().collect();
        let mut unpermute = vec![0; dim];
        for (pos, &orig) in order.iter().enumerate() {
            unpermute[orig] = pos;
        }
        Self {
            conditioner,
            fixed,
            transformed,
            unpermute,
        }
    }

    pub fn fixed(&self) -> &[usize] {
        &self.fixed
    }

    pub fn transformed(&self) -> &[usize] {
        &self.transformed
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowParams {
    pub dim: usize,
    pub s_max: f64,
    pub layers: Vec<CouplingLayer>,
}

impl FlowParams {
    /// Random hidden layers and zeroed output layers, so the flow starts
    /// as the identity map.
    pub fn new(dim: usize, layers: usize, hidden: &[usize], s_max: f64, seed: u64) -> Result<Self> {
        if dim < 2 || layers == 0 || hidden.contains(&0) || s_max <= 0.0 {
            return Err(invalid(format!(
                "flow D={dim} layers={layers} hidden={hidden:?} s_max={s_max}"
            )));
        }
        let mut rng = seed::rng_at(seed, &[0xf10]);
        let layers = (0..layers)
            .map(|l| {
                let (fixed, transformed) = CouplingLayer::partition(dim, l);
                let mut cond = Vec::with_capacity(hidden.len() + 1);
                let mut fan_in = fixed.len();
                for &h in hidden {
                    cond.push(Linear::random(fan_in, h, &mut rng));
                    fan_in = h;
                }
                cond.push(Linear::zeros(fan_in, 2 * transformed.len()));
                CouplingLayer::with_conditioner(dim, l, cond)
            })
            .collect();
        Ok(Self { dim, s_max, layers })
    }

    /// Fills every conditioner output layer with N(0, scale²) entries.
    /// Useful for exercising non-trivial flows.
    pub fn randomize_outputs(&mut self, seed: u64, scale: f64) {
        let mut rng = seed::rng_at(seed, &[0xf11]);
        for layer in &mut self.layers {
            let out = layer.conditioner.last_mut().expect("non-empty conditioner");
            for t in [&mut out.weight, &mut out.bias] {
                for v in t.data_mut() {
                    *v = scale * rng.sample::<f64, _>(StandardNormal);
                }
            }
        }
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        self.layers
            .iter()
            .flat_map(|l| l.conditioner.iter())
            .flat_map(|lin| [&lin.weight, &lin.bias])
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.conditioner.iter_mut())
            .flat_map(|lin| [&mut lin.weight, &mut lin.bias])
            .collect()
    }

    pub fn shapes(&self) -> Vec<Vec<usize>> {
        self.tensors().iter().map(|t| t.shape().to_vec()).collect()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.all_finite())
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> FlowVars {
        FlowVars {
            layers: self
                .layers
                .iter()
                .map(|l| l.conditioner.iter().map(|lin| lin.bind(g, trainable)).collect())
                .collect(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save_file(path, |w| self.write(w))
    }

    pub fn load(path: &Path) -> Result<Self> {
        checkpoint::load_file(path, Self::read)
    }

    /// Conditioner tensors in layer order, then `s_max` as a `[1]` tensor.
    pub fn write(&self, w: &mut impl Write) -> Result<()> {
        let s_max = Tensor::vector(vec![self.s_max]);
        let mut tensors = self.tensors();
        tensors.push(&s_max);
        checkpoint::write_tensors(w, MAGIC, self.layers.len(), &tensors)
    }

    pub fn read(r: &mut impl Read) -> Result<Self> {
        let bad = |msg: String| Error::Format {
            what: "flow checkpoint",
            msg,
        };
        let (layers, mut tensors) = checkpoint::read_tensors(r, MAGIC, "flow checkpoint")?;
        let s_max = tensors
            .pop()
            .filter(|t| t.shape() == [1])
            .ok_or_else(|| bad("missing s_max".into()))?
            .item();
        if layers == 0 || tensors.is_empty() || tensors.len() % (2 * layers) != 0 {
            return Err(bad(format!("{layers} layers with {} tensors", tensors.len())));
        }
        let depth = tensors.len() / (2 * layers);
        let mut it = tensors.into_iter();
        let mut linears = Vec::new();
        while let (Some(w), Some(b)) = (it.next(), it.next()) {
            linears.push(Linear::from_pair(w, b)?);
        }
        let first_in = linears[0].fan_in();
        let first_out = linears[depth - 1].fan_out();
        let dim = first_in + first_out / 2;
        let mut out = Vec::with_capacity(layers);
        for (l, cond) in linears.chunks(depth).enumerate() {
            let layer = CouplingLayer::with_conditioner(dim, l, cond.to_vec());
            let chained = cond.windows(2).all(|p| p[0].fan_out() == p[1].fan_in());
            if !chained
                || cond[0].fan_in() != layer.fixed.len()
                || cond[depth - 1].fan_out() != 2 * layer.transformed.len()
            {
                return Err(bad(format!("layer {l} does not fit dimension {dim}")));
            }
            out.push(layer);
        }
        Ok(Self {
            dim,
            s_max,
            layers: out,
        })
    }
}

const MAGIC: &[u8; 8] = b"NFHFLOW1";

#[derive(Debug, Clone)]
pub struct FlowVars {
    pub layers: Vec<Vec<(Var, Var)>>,
}

impl FlowVars {
    pub fn all(&self) -> Vec<Var> {
        self.layers
            .iter()
            .flatten()
            .flat_map(|&(w, b)| [w, b])
            .collect()
    }

    pub fn grads(&self, g: &Graph) -> Vec<Tensor> {
        self.all().into_iter().map(|v| g.grad_or_zeros(v)).collect()
    }
}

/// Bounded log-scale and shift for the transformed half.
fn conditioner(
    g: &mut Graph,
    params: &FlowParams,
    layer: &CouplingLayer,
    vars: &[(Var, Var)],
    fixed: Var,
) -> Result<(Var, Var)> {
    let mut h = fixed;
    let (last, hidden) = vars.split_last().expect("non-empty conditioner");
    for &(w, b) in hidden {
        let a = g.affine(h, w, b)?;
        h = g.tanh(a)?;
    }
    let out = g.affine(h, last.0, last.1)?;
    let n = layer.transformed.len();
    let raw_s = g.slice_cols(out, 0, n)?;
    let bounded = g.tanh(raw_s)?;
    let s = g.scale(bounded, params.s_max)?;
    let t = g.slice_cols(out, n, 2 * n)?;
    Ok((s, t))
}

fn check_width(g: &Graph, params: &FlowParams, v: Var) -> Result<()> {
    match g.shape(v) {
        [_, d] if *d == params.dim => Ok(()),
        s => Err(invalid(format!("flow of dim {} given shape {s:?}", params.dim))),
    }
}

/// `x = f(z)` for rows of `z: [N, D]`; returns `(x, log|det ∂x/∂z|)` with
/// the log-determinant of shape `[N]`.
pub fn forward_graph(g: &mut Graph, params: &FlowParams, vars: &FlowVars, z: Var) -> Result<(Var, Var)> {
    check_width(g, params, z)?;
    let mut h = z;
    let mut logdet: Option<Var> = None;
    for (layer, lv) in params.layers.iter().zip(&vars.layers) {
        let xa = g.gather_cols(h, &layer.fixed)?;
        let xb = g.gather_cols(h, &layer.transformed)?;
        let (s, t) = conditioner(g, params, layer, lv, xa)?;
        let scale = g.exp(s)?;
        let scaled = g.mul(xb, scale)?;
        let yb = g.add(scaled, t)?;
        let joined = g.concat_cols(&[xa, yb])?;
        h = g.gather_cols(joined, &layer.unpermute)?;
        let ld = g.sum_last(s)?;
        logdet = Some(match logdet {
            Some(acc) => g.add(acc, ld)?,
            None => ld,
        });
    }
    Ok((h, logdet.expect("at least one layer")))
}

/// `z = f⁻¹(x)`; the returned log-determinant is that of `∂z/∂x`.
pub fn inverse_graph(g: &mut Graph, params: &FlowParams, vars: &FlowVars, x: Var) -> Result<(Var, Var)> {
    check_width(g, params, x)?;
    let mut h = x;
    let mut logdet: Option<Var> = None;
    for (layer, lv) in params.layers.iter().zip(&vars.layers).rev() {
        let ya = g.gather_cols(h, &layer.fixed)?;
        let yb = g.gather_cols(h, &layer.transformed)?;
        let (s, t) = conditioner(g, params, layer, lv, ya)?;
        let shifted = g.sub(yb, t)?;
        let neg_s = g.neg(s)?;
        let inv_scale = g.exp(neg_s)?;
        let xb = g.mul(shifted, inv_scale)?;
        let joined = g.concat_cols(&[ya, xb])?;
        h = g.gather_cols(joined, &layer.unpermute)?;
        let ld = g.sum_last(neg_s)?;
        logdet = Some(match logdet {
            Some(acc) => g.add(acc, ld)?,
            None => ld,
        });
    }
    Ok((h, logdet.expect("at least one layer")))
}

/// Standard-normal log density of each row, `[N]`.
pub fn base_log_prob_graph(g: &mut Graph, z: Var) -> Result<Var> {
    let d = g.shape(z)[1] as f64;
    let sq = g.mul(z, z)?;
    let norm = g.sum_last(sq)?;
    let half = g.scale(norm, -0.5)?;
    Ok(g.add_scalar(half, -0.5 * d * (2.0 * PI).ln())?)
}

/// `ln p_ψ(x)` for each row of `x: [N, D]`.
pub fn log_prob_graph(g: &mut Graph, params: &FlowParams, vars: &FlowVars, x: Var) -> Result<Var> {
    let (z, logdet) = inverse_graph(g, params, vars, x)?;
    let base = base_log_prob_graph(g, z)?;
    Ok(g.add(base, logdet)?)
}

fn rows_tensor(params: &FlowParams, values: &[f64]) -> Result<Tensor> {
    if values.is_empty() || !values.len().is_multiple_of(params.dim) {
        return Err(invalid(format!(
            "{} values are not rows of dim {}",
            values.len(),
            params.dim
        )));
    }
    Ok(Tensor::matrix(values.len() / params.dim, params.dim, values.to_vec())?)
}

/// Detached forward map over row-major points; returns `(x, logdet)`.
pub fn flow_forward(params: &FlowParams, z: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut g = Graph::new();
    let vars = params.bind(&mut g, false);
    let zv = g.constant(rows_tensor(params, z)?);
    let (x, ld) = forward_graph(&mut g, params, &vars, zv)?;
    Ok((g.value(x).data().to_vec(), g.value(ld).data().to_vec()))
}

/// Detached inverse map; returns `(z, logdet of the inverse)`.
pub fn flow_inverse(params: &FlowParams, x: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut g = Graph::new();
    let vars = params.bind(&mut g, false);
    let xv = g.constant(rows_tensor(params, x)?);
    let (z, ld) = inverse_graph(&mut g, params, &vars, xv)?;
    Ok((g.value(z).data().to_vec(), g.value(ld).data().to_vec()))
}

pub fn log_prob(params: &FlowParams, x: &[f64]) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let vars = params.bind(&mut g, false);
    let xv = g.constant(rows_tensor(params, x)?);
    let lp = log_prob_graph(&mut g, params, &vars, xv)?;
    Ok(g.value(lp).data().to_vec())
}

/// `n` standard-normal latent rows.
pub fn sample_latent(rng: &mut impl Rng, n: usize, dim: usize) -> Tensor {
    let data = (0..n * dim).map(|_| rng.sample(StandardNormal)).collect();
    Tensor::matrix(n, dim, data).expect("n * dim values")
}

/// `side²` reparameterised samples on the graph, `[side², D]`;
/// differentiable with respect to the flow parameters in `vars`.
pub fn sample_patch_graph(
    g: &mut Graph,
    params: &FlowParams,
    vars: &FlowVars,
    rng: &mut impl Rng,
    side: usize,
) -> Result<Var> {
    if side == 0 {
        return Err(invalid("patch side must be at least 1"));
    }
    let z = g.constant(sample_latent(rng, side * side, params.dim));
    Ok(forward_graph(g, params, vars, z)?.0)
}

/// Detached synthetic-negative patch.
pub fn sample_patch(params: &FlowParams, seed: u64, side: usize) -> Result<Patch> {
    let mut g = Graph::new();
    let vars = params.bind(&mut g, false);
    let mut rng = seed::rng_at(seed, &[0x5a4]);
    let x = sample_patch_graph(&mut g, params, &vars, &mut rng, side)?;
    Patch::new(side, params.dim, g.value(x).data().to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity(dim: usize) -> FlowParams {
        FlowParams::new(dim, 4, &[32, 32], 2.0, 1).unwrap()
    }

    fn random_flow(dim: usize, seed: u64) -> FlowParams {
        let mut f = FlowParams::new(dim, 4, &[16, 16], 2.0, seed).unwrap();
        f.randomize_outputs(seed, 0.3);
        f
    }

    fn points(n: usize, dim: usize, seed: u64) -> Vec<f64> {
        sample_latent(&mut seed::rng(seed), n, dim).into_data()
    }

    #[test]
    fn masks_alternate_and_cover_every_dim() {
        for dim in [2, 3, 4, 8] {
            let f = identity(dim);
            let mut touched = vec![false; dim];
            for pair in f.layers.windows(2) {
                assert_eq!(pair[0].fixed(), pair[1].transformed());
            }
            for l in &f.layers {
                l.transformed().iter().for_each(|&i| touched[i] = true);
            }
            assert!(touched.iter().all(|&t| t));
        }
    }

    #[test]
    fn zero_conditioners_are_identity() {
        let f = identity(4);
        let z = points(10, 4, 0);
        let (x, ld) = flow_forward(&f, &z).unwrap();
        assert_eq!(x, z);
        assert!(ld.iter().all(|&v| v == 0.0));
        let (zi, _) = flow_inverse(&f, &z).unwrap();
        assert_eq!(zi, z);
    }

    #[test]
    fn constant_scale_layer_logdet() {
        let sigma = 0.8;
        let mut f = FlowParams::new(4, 1, &[8], 2.0, 0).unwrap();
        let out = f.layers[0].conditioner.last_mut().unwrap();
        out.bias.data_mut()[..2].fill((sigma / 2.0f64).atanh());
        let (_, ld) = flow_forward(&f, &points(5, 4, 3)).unwrap();
        for v in ld {
            assert!((v - 2.0 * sigma).abs() < 1e-12);
        }
    }

    #[test]
    fn inverse_round_trip_and_logdets_negate() {
        let f = random_flow(4, 7);
        let z = points(1000, 4, 1);
        let (x, fwd) = flow_forward(&f, &z).unwrap();
        let (back, inv) = flow_inverse(&f, &x).unwrap();
        let max_err = z.iter().zip(&back).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(max_err <= 1e-9, "round trip error {max_err}");
        for (a, b) in fwd.iter().zip(&inv) {
            assert!((a + b).abs() <= 1e-9);
        }
    }

    #[test]
    fn identity_log_prob() {
        let f = identity(2);
        let lp = log_prob(&f, &[0.0, 0.0]).unwrap()[0];
        assert!((lp + (2.0 * PI).ln()).abs() < 1e-12);
        assert!((lp + 1.83788).abs() < 1e-5);
        let x = points(20, 3, 5);
        let f = identity(3);
        for (row, lp) in x.chunks(3).zip(log_prob(&f, &x).unwrap()) {
            let sq: f64 = row.iter().map(|v| v * v).sum();
            assert!((lp + 0.5 * (sq + 3.0 * (2.0 * PI).ln())).abs() < 1e-12);
        }
    }

    #[test]
    fn change_of_variables_consistency() {
        let f = random_flow(4, 9);
        let z = points(200, 4, 2);
        let (x, fwd) = flow_forward(&f, &z).unwrap();
        let lp = log_prob(&f, &x).unwrap();
        for ((row, lp), ld) in z.chunks(4).zip(lp).zip(fwd) {
            let base = -0.5 * row.iter().map(|v| v * v).sum::<f64>() - 2.0 * (2.0 * PI).ln();
            assert!((lp - (base - ld)).abs() <= 1e-9);
        }
    }

    #[test]
    fn identity_samples_are_standard_normal() {
        let f = identity(2);
        let p = sample_patch(&f, 3, 100).unwrap();
        let n = 10_000.0;
        let (mut m0, mut m1, mut v0, mut c01) = (0.0, 0.0, 0.0, 0.0);
        for r in p.features.chunks(2) {
            m0 += r[0] / n;
            m1 += r[1] / n;
        }
        for r in p.features.chunks(2) {
            v0 += (r[0] - m0).powi(2) / n;
            c01 += (r[0] - m0) * (r[1] - m1) / n;
        }
        // 5 standard errors
        assert!(m0.abs() < 0.05 && m1.abs() < 0.05);
        assert!((v0 - 1.0).abs() < 0.07 && c01.abs() < 0.05);
        assert_eq!(p, sample_patch(&f, 3, 100).unwrap());
        assert_ne!(p, sample_patch(&f, 4, 100).unwrap());
    }

    #[test]
    fn checkpoint_round_trip() {
        let f = random_flow(3, 2);
        let mut buf = Vec::new();
        f.write(&mut buf).unwrap();
        assert_eq!(FlowParams::read(&mut buf.as_slice()).unwrap(), f);
        buf[3] = 0;
        assert!(FlowParams::read(&mut buf.as_slice()).is_err());
    }

    #[test]
    fn rejects_bad_configuration() {
        assert!(FlowParams::new(1, 4, &[8], 2.0, 0).is_err());
        assert!(FlowParams::new(4, 0, &[8], 2.0, 0).is_err());
        assert!(FlowParams::new(4, 2, &[8], 0.0, 0).is_err());
        assert!(log_prob(&identity(4), &[0.0; 6]).is_err());
    }
}
