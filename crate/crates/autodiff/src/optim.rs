use crate::error::{AutodiffError, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Adam,
    /// Adam variant whose second moment is an exponentially weighted
    /// infinity norm.
    Adamax,
}

/// Per-parameter moment buffers plus hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl OptimizerState {
    /// Fresh state for parameters with the given shapes, using
    /// `beta = (0.9, 0.999)` and `eps = 1e-8`.
    pub fn new(kind: OptimizerKind, lr: f64, shapes: &[&[usize]]) -> Result<Self> {
        Self::with_betas(kind, lr, 0.9, 0.999, 1e-8, shapes)
    }

    pub fn with_betas(
        kind: OptimizerKind,
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
        shapes: &[&[usize]],
    ) -> Result<Self> {
        let valid = lr > 0.0
            && (0.0..1.0).contains(&beta1)
            && (0.0..1.0).contains(&beta2)
            && eps > 0.0;
        if !valid {
            return Err(AutodiffError::InvalidArgument {
                op: "optimizer",
                msg: format!("lr={lr} beta1={beta1} beta2={beta2} eps={eps}"),
            });
        }
        let zeros = |s: &&[usize]| Tensor::zeros(s);
        Ok(Self {
            kind,
            step: 0,
            lr,
            beta1,
            beta2,
            eps,
            first: shapes.iter().map(zeros).collect(),
            second: shapes.iter().map(zeros).collect(),
        })
    }

    pub fn first_moments(&self) -> &[Tensor] {
        &self.first
    }

    /// Second moment for Adam; the infinity-norm accumulator `u` for Adamax.
    pub fn second_moments(&self) -> &[Tensor] {
        &self.second
    }

    pub fn set_lr(&mut self, lr: f64) -> Result<()> {
        if lr <= 0.0 {
            return Err(AutodiffError::InvalidArgument {
                op: "optimizer",
                msg: format!("lr must be positive, got {lr}"),
            });
        }
        self.lr = lr;
        Ok(())
    }

    /// One update of every parameter in place.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[&Tensor]) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != self.first.len() {
            return Err(AutodiffError::InvalidArgument {
                op: "optimizer_step",
                msg: format!(
                    "{} params / {} grads for {} slots",
                    params.len(),
                    grads.len(),
                    self.first.len()
                ),
            });
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.first) {
            if p.shape() != m.shape() || g.shape() != m.shape() {
                return Err(AutodiffError::ShapeMismatch {
                    op: "optimizer_step",
                    lhs: m.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
        }

        self.step += 1;
        let t = self.step as i32;
        let (b1, b2, eps, lr) = (self.beta1, self.beta2, self.eps, self.lr);
        let bc1 = 1.0 - b1.powi(t);
        let bc2 = 1.0 - b2.powi(t);

        for (i, p) in params.iter_mut().enumerate() {
            let g = grads[i].data();
            let m = self.first[i].data_mut();
            let v = self.second[i].data_mut();
            let p = p.data_mut();
            match self.kind {
                OptimizerKind::Adam => {
                    for j in 0..p.len() {
                        m[j] = b1 * m[j] + (1.0 - b1) * g[j];
                        v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
                        let mhat = m[j] / bc1;
                        let vhat = v[j] / bc2;
                        p[j] -= lr * mhat / (vhat.sqrt() + eps);
                    }
                }
                OptimizerKind::Adamax => {
                    for j in 0..p.len() {
                        m[j] = b1 * m[j] + (1.0 - b1) * g[j];
                        v[j] = (b2 * v[j]).max(g[j].abs());
                        p[j] -= lr / bc1 * m[j] / (v[j] + eps);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Half-cosine decay from `lr_max` at step 0 to `lr_min` at `total`.
pub fn cosine_lr(step: usize, total: usize, lr_max: f64, lr_min: f64) -> Result<f64> {
    if total == 0 || step > total {
        return Err(AutodiffError::InvalidArgument {
            op: "cosine_lr",
            msg: format!("step {step} outside [0, {total}]"),
        });
    }
    let progress = step as f64 / total as f64;
    Ok(lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (std::f64::consts::PI * progress).cos()))
}
