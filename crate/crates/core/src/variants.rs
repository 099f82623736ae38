//! The training variants and how each routes gradients into the flow.

use std::collections::BTreeMap;
use std::fmt;

use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::scores::ScoreKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Method {
    DenseHybrid,
    NFlowJs,
    NfHybridJs,
    NfHybridLdLx,
    NfHybridLd,
    OodHead,
    NfOodHead,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::DenseHybrid,
        Method::NFlowJs,
        Method::NfHybridJs,
        Method::NfHybridLdLx,
        Method::NfHybridLd,
        Method::OodHead,
        Method::NfOodHead,
    ];

    /// Registry key (lowercase, hyphenated).
    pub fn key(self) -> &'static str {
        match self {
            Method::DenseHybrid => "densehybrid",
            Method::NFlowJs => "nflowjs",
            Method::NfHybridJs => "nf-hybrid-js",
            Method::NfHybridLdLx => "nf-hybrid-ldlx",
            Method::NfHybridLd => "nf-hybrid-ld",
            Method::OodHead => "oodhead",
            Method::NfOodHead => "nf-oodhead",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Method::DenseHybrid => "DenseHybrid",
            Method::NFlowJs => "NFlowJS",
            Method::NfHybridJs => "NF-Hybrid-JS",
            Method::NfHybridLdLx => "NF-Hybrid-LdLx",
            Method::NfHybridLd => "NF-Hybrid-Ld",
            Method::OodHead => "OODHead",
            Method::NfOodHead => "NF-OODHead",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SourceKind {
    Auxiliary,
    Flow,
}

/// Loss terms that may backpropagate into the flow parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct FlowGradients {
    pub ld: bool,
    pub lx: bool,
    pub ljsd: bool,
}

impl FlowGradients {
    pub const NONE: Self = Self {
        ld: false,
        lx: false,
        ljsd: false,
    };

    pub fn is_empty(&self) -> bool {
        !(self.ld || self.lx || self.ljsd)
    }
}

impl fmt::Display for FlowGradients {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = [(self.ld, "L_d"), (self.lx, "L_x"), (self.ljsd, "L_jsd")]
            .iter()
            .filter(|(on, _)| *on)
            .map(|(_, n)| *n)
            .collect();
        write!(f, "{{{}}}", names.join(", "))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VariantConfig {
    pub method: Method,
    pub negative_source: SourceKind,
    /// Energy term `L_x` in the segmentation loss.
    pub use_energy: bool,
    /// Outlier-head term `L_d` in the segmentation loss.
    pub use_ood_head: bool,
    /// `β·L_jsd` in the flow objective.
    pub use_jsd_in_flow_loss: bool,
    /// Segmentation model pulled towards uniform predictions on negatives
    /// (the JSD-trained classifier of NFlowJS).
    pub seg_jsd: bool,
    pub grads_to_flow: FlowGradients,
}

impl VariantConfig {
    pub fn preset(method: Method) -> Self {
        let base = Self {
            method,
            negative_source: SourceKind::Flow,
            use_energy: true,
            use_ood_head: true,
            use_jsd_in_flow_loss: false,
            seg_jsd: false,
            grads_to_flow: FlowGradients::NONE,
        };
        let g = |ld, lx, ljsd| FlowGradients { ld, lx, ljsd };
        match method {
            Method::DenseHybrid => Self {
                negative_source: SourceKind::Auxiliary,
                ..base
            },
            Method::OodHead => Self {
                negative_source: SourceKind::Auxiliary,
                use_energy: false,
                ..base
            },
            Method::NfOodHead => Self {
                use_energy: false,
                ..base
            },
            Method::NFlowJs => Self {
                use_energy: false,
                use_ood_head: false,
                use_jsd_in_flow_loss: true,
                seg_jsd: true,
                grads_to_flow: g(false, false, true),
                ..base
            },
            Method::NfHybridJs => Self {
                use_jsd_in_flow_loss: true,
                grads_to_flow: g(false, false, true),
                ..base
            },
            Method::NfHybridLdLx => Self {
                grads_to_flow: g(true, true, false),
                ..base
            },
            Method::NfHybridLd => Self {
                grads_to_flow: g(true, false, false),
                ..base
            },
        }
    }

    pub fn uses_flow(&self) -> bool {
        self.negative_source == SourceKind::Flow
    }

    /// Weight on the negative-pixel outlier-head term: `β_d` for hybrid
    /// training, the plain outlier-head `β` when the energy term is off.
    pub fn neg_d_weight(&self, w: &LossWeights) -> f64 {
        if self.use_energy {
            w.beta_d
        } else {
            w.ood_head_beta
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: &str| Err(Error::Config(format!("{}: {msg}", self.method.key())));
        let aux_method = matches!(self.method, Method::DenseHybrid | Method::OodHead);
        if aux_method != (self.negative_source == SourceKind::Auxiliary) {
            return fail("negative source does not match method");
        }
        if !self.uses_flow() && !self.grads_to_flow.is_empty() {
            return fail("flow gradients requested without a flow");
        }
        if self.use_jsd_in_flow_loss != self.grads_to_flow.ljsd {
            return fail("L_jsd routing must match the flow objective");
        }
        if self.grads_to_flow.ld && !self.use_ood_head {
            return fail("L_d routed to the flow but the outlier head is off");
        }
        if self.grads_to_flow.lx && !self.use_energy {
            return fail("L_x routed to the flow but the energy term is off");
        }
        Ok(())
    }

    /// Anomaly scores reported for this method in the results table.
    pub fn default_scores(&self) -> Vec<ScoreKind> {
        match self.method {
            Method::NFlowJs => vec![ScoreKind::Jsd],
            Method::NfHybridJs | Method::NfHybridLd => vec![ScoreKind::Dh],
            Method::DenseHybrid | Method::NfHybridLdLx => vec![ScoreKind::Dh, ScoreKind::OpMs],
            Method::OodHead | Method::NfOodHead => {
                vec![ScoreKind::Dh, ScoreKind::Op, ScoreKind::OpMs]
            }
        }
    }
}

/// Named variant presets, selectable at runtime.
#[derive(Debug, Clone)]
pub struct VariantRegistry {
    entries: BTreeMap<String, VariantConfig>,
}

fn normalize(name: &str) -> String {
    name.trim().to_ascii_lowercase().replace('_', "-")
}

impl VariantRegistry {
    pub fn empty() -> Self {
        Self {
            entries: BTreeMap::new(),
        }
    }

    /// All seven presets under their [`Method::key`] names.
    pub fn standard() -> Self {
        let mut r = Self::empty();
        for m in Method::ALL {
            r.register(m.key(), VariantConfig::preset(m))
                .expect("presets are valid");
        }
        r
    }

    pub fn register(&mut self, name: &str, config: VariantConfig) -> Result<()> {
        config.validate()?;
        self.entries.insert(normalize(name), config);
        Ok(())
    }

    /// Case-insensitive; `_` and `-` are interchangeable.
    pub fn get(&self, name: &str) -> Result<VariantConfig> {
        self.entries.get(&normalize(name)).copied().ok_or_else(|| {
            Error::Config(format!(
                "unknown variant '{name}' (known: {})",
                self.names().join(", ")
            ))
        })
    }

    pub fn names(&self) -> Vec<&str> {
        self.entries.keys().map(String::as_str).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_satisfy_invariants() {
        for m in Method::ALL {
            let v = VariantConfig::preset(m);
            v.validate().unwrap();
            let aux = matches!(m, Method::DenseHybrid | Method::OodHead);
            assert_eq!(v.negative_source == SourceKind::Auxiliary, aux);
        }
        let g = |m| VariantConfig::preset(m).grads_to_flow;
        assert_eq!(g(Method::NfHybridJs), FlowGradients { ld: false, lx: false, ljsd: true });
        assert_eq!(g(Method::NfHybridLdLx), FlowGradients { ld: true, lx: true, ljsd: false });
        assert_eq!(g(Method::NfHybridLd), FlowGradients { ld: true, lx: false, ljsd: false });
        assert!(g(Method::NfOodHead).is_empty());
        let nf = VariantConfig::preset(Method::NFlowJs);
        assert_eq!(nf.grads_to_flow, FlowGradients { ld: false, lx: false, ljsd: true });
        assert!(!nf.use_ood_head && !nf.use_energy);
    }

    #[test]
    fn invalid_routing_rejected() {
        let mut v = VariantConfig::preset(Method::DenseHybrid);
        v.grads_to_flow.ld = true;
        assert!(v.validate().is_err());
        let mut v = VariantConfig::preset(Method::NfOodHead);
        v.grads_to_flow.lx = true;
        assert!(v.validate().is_err());
    }

    #[test]
    fn registry_lookup() {
        let r = VariantRegistry::standard();
        assert_eq!(r.names().len(), 7);
        assert_eq!(r.get("NF_Hybrid_LdLx").unwrap().method, Method::NfHybridLdLx);
        assert!(r.get("swiftnet").is_err());
    }

    #[test]
    fn neg_d_weight_switches_with_energy() {
        let w = LossWeights::default();
        assert_eq!(VariantConfig::preset(Method::DenseHybrid).neg_d_weight(&w), 0.3);
        assert_eq!(VariantConfig::preset(Method::OodHead).neg_d_weight(&w), 1.0);
    }
}
