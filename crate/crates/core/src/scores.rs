//! Per-pixel anomaly scores. Every map is oriented so that higher means
//! more anomalous.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use crate::codec;
use crate::error::{invalid, Error, Result};
use crate::segnet::{self, PixelPrediction};

pub const DEFAULT_TEMPERATURE: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ScoreKind {
    /// Outlier-head posterior `P(d_out|x)`.
    Op,
    /// `P(d_out|x) · (1 − max softmax)`.
    OpMs,
    /// `ln P(d_out|x) − ln p̂(x)`.
    Dh,
    /// `ln 2 − JSD(P(y|x) ‖ U)`.
    Jsd,
}

impl ScoreKind {
    pub const ALL: [ScoreKind; 4] = [ScoreKind::Op, ScoreKind::OpMs, ScoreKind::Dh, ScoreKind::Jsd];

    pub fn name(self) -> &'static str {
        match self {
            ScoreKind::Op => "OP",
            ScoreKind::OpMs => "OPxMS",
            ScoreKind::Dh => "DH",
            ScoreKind::Jsd => "JSD",
        }
    }

    pub fn needs_ood_head(self) -> bool {
        !matches!(self, ScoreKind::Jsd)
    }

    fn code(self) -> u32 {
        self as u32
    }

    fn from_code(c: u32) -> Option<Self> {
        Self::ALL.get(c as usize).copied()
    }
}

impl fmt::Display for ScoreKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ScoreKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let k = s.trim().to_ascii_lowercase().replace(['×', '*', '_', '-'], "x");
        match k.as_str() {
            "op" => Ok(ScoreKind::Op),
            "opxms" | "opms" => Ok(ScoreKind::OpMs),
            "dh" => Ok(ScoreKind::Dh),
            "jsd" => Ok(ScoreKind::Jsd),
            _ => Err(Error::Config(format!("unknown score kind '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMap {
    pub height: usize,
    pub width: usize,
    pub kind: ScoreKind,
    pub temperature: f64,
    pub values: Vec<f64>,
}

fn map(pred: &PixelPrediction, kind: ScoreKind, t: f64, values: Vec<f64>) -> Result<ScoreMap> {
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(invalid(format!("{kind} score non-finite at pixel {i}")));
    }
    Ok(ScoreMap {
        height: pred.height,
        width: pred.width,
        kind,
        temperature: t,
        values,
    })
}

pub fn score_op(pred: &PixelPrediction, t: f64) -> Result<ScoreMap> {
    let post = segnet::ood_posterior(pred, t)?;
    let values = post.chunks(2).map(|p| p[1]).collect();
    map(pred, ScoreKind::Op, t, values)
}

pub fn score_op_ms(pred: &PixelPrediction, t: f64) -> Result<ScoreMap> {
    let ood = segnet::ood_posterior(pred, t)?;
    let cls = segnet::class_posterior(pred, t)?;
    let values = ood
        .chunks(2)
        .zip(cls.chunks(pred.classes))
        .map(|(o, c)| {
            let ms = c.iter().copied().fold(0.0, f64::max);
            o[1] * (1.0 - ms)
        })
        .collect();
    map(pred, ScoreKind::OpMs, t, values)
}

/// Untempered: `log_softmax(ood)[d_out] − logsumexp(class logits)`.
pub fn score_dh(pred: &PixelPrediction) -> Result<ScoreMap> {
    let ood = pred.ood_logits()?;
    let ood_lse = segnet::logsumexp_rows(ood, 2);
    let log_p = segnet::log_density(pred);
    let values = ood
        .chunks(2)
        .zip(ood_lse)
        .zip(log_p)
        .map(|((o, lse), lp)| (o[1] - lse) - lp)
        .collect();
    map(pred, ScoreKind::Dh, 1.0, values)
}

/// `JSD(p ‖ U_K)` of one posterior row, natural logs.
pub fn jsd_to_uniform(p: &[f64]) -> f64 {
    let u = 1.0 / p.len() as f64;
    let mut kl_pm = 0.0;
    let mut kl_um = 0.0;
    for &pi in p {
        let m = 0.5 * (pi + u);
        if pi > 0.0 {
            kl_pm += pi * (pi / m).ln();
        }
        kl_um += u * (u / m).ln();
    }
    0.5 * (kl_pm + kl_um)
}

pub fn score_jsd(pred: &PixelPrediction, t: f64) -> Result<ScoreMap> {
    let cls = segnet::class_posterior(pred, t)?;
    let values = cls
        .chunks(pred.classes)
        .map(|p| (std::f64::consts::LN_2 - jsd_to_uniform(p)).max(0.0))
        .collect();
    map(pred, ScoreKind::Jsd, t, values)
}

/// A named per-pixel anomaly score.
pub trait AnomalyScorer: Send + Sync {
    fn kind(&self) -> ScoreKind;
    fn score(&self, pred: &PixelPrediction) -> Result<ScoreMap>;

    fn name(&self) -> &'static str {
        self.kind().name()
    }

    fn needs_ood_head(&self) -> bool {
        self.kind().needs_ood_head()
    }
}

/// The four built-in scores at a fixed temperature (ignored by DH).
#[derive(Debug, Clone, Copy)]
pub struct Builtin {
    pub kind: ScoreKind,
    pub temperature: f64,
}

impl AnomalyScorer for Builtin {
    fn kind(&self) -> ScoreKind {
        self.kind
    }

    fn score(&self, pred: &PixelPrediction) -> Result<ScoreMap> {
        match self.kind {
            ScoreKind::Op => score_op(pred, self.temperature),
            ScoreKind::OpMs => score_op_ms(pred, self.temperature),
            ScoreKind::Dh => score_dh(pred),
            ScoreKind::Jsd => score_jsd(pred, self.temperature),
        }
    }
}

pub struct ScoreRegistry {
    scorers: BTreeMap<ScoreKind, Box<dyn AnomalyScorer>>,
}

impl ScoreRegistry {
    pub fn with_temperature(t: f64) -> Result<Self> {
        if !(t > 0.0 && t.is_finite()) {
            return Err(Error::Config(format!("temperature must be positive, got {t}")));
        }
        let mut r = Self {
            scorers: BTreeMap::new(),
        };
        for kind in ScoreKind::ALL {
            r.register(Box::new(Builtin { kind, temperature: t }));
        }
        Ok(r)
    }

    pub fn register(&mut self, scorer: Box<dyn AnomalyScorer>) {
        self.scorers.insert(scorer.kind(), scorer);
    }

    pub fn get(&self, kind: ScoreKind) -> Result<&dyn AnomalyScorer> {
        self.scorers
            .get(&kind)
            .map(|b| b.as_ref())
            .ok_or_else(|| Error::Config(format!("no scorer registered for {kind}")))
    }
}

impl Default for ScoreRegistry {
    fn default() -> Self {
        Self::with_temperature(DEFAULT_TEMPERATURE).expect("default temperature is valid")
    }
}

pub fn parse_kinds(list: &str) -> Result<Vec<ScoreKind>> {
    let mut out = Vec::new();
    for part in list.split(',').filter(|s| !s.trim().is_empty()) {
        let k: ScoreKind = part.parse()?;
        if !out.contains(&k) {
            out.push(k);
        }
    }
    if out.is_empty() {
        return Err(Error::Config("empty score list".into()));
    }
    Ok(out)
}

const SCORE_MAGIC: &[u8; 8] = b"NFHSCORE";
const SCORE_VERSION: u32 = 1;

/// Binary layout: magic, version, H, W, kind (u32), temperature, values
/// (f64), little-endian.
pub fn write_score_map(w: &mut impl Write, m: &ScoreMap) -> Result<()> {
    w.write_all(SCORE_MAGIC)?;
    codec::put_u32(w, SCORE_VERSION)?;
    codec::put_u32(w, m.height as u32)?;
    codec::put_u32(w, m.width as u32)?;
    codec::put_u32(w, m.kind.code())?;
    codec::put_f64s(w, &[m.temperature])?;
    codec::put_f64s(w, &m.values)
}

pub fn read_score_map(r: &mut impl Read) -> Result<ScoreMap> {
    const WHAT: &str = "score map";
    codec::expect_magic(r, SCORE_MAGIC, WHAT)?;
    codec::expect_version(r, SCORE_VERSION, WHAT)?;
    let height = codec::get_u32(r)? as usize;
    let width = codec::get_u32(r)? as usize;
    let code = codec::get_u32(r)?;
    let kind = ScoreKind::from_code(code).ok_or_else(|| Error::Format {
        what: WHAT,
        msg: format!("unknown kind code {code}"),
    })?;
    let temperature = codec::get_f64s(r, 1)?[0];
    let values = codec::get_f64s(r, height * width)?;
    codec::expect_eof(r, WHAT)?;
    Ok(ScoreMap {
        height,
        width,
        kind,
        temperature,
        values,
    })
}

/// One row of space-separated values per line.
pub fn export_score_text(w: &mut impl Write, m: &ScoreMap) -> Result<()> {
    writeln!(w, "# {} T={} {}x{}", m.kind, m.temperature, m.height, m.width)?;
    for row in m.values.chunks(m.width.max(1)) {
        let line: Vec<String> = row.iter().map(|v| format!("{v:.6}")).collect();
        writeln!(w, "{}", line.join(" "))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pred(class: Vec<f64>, classes: usize, ood: Vec<f64>) -> PixelPrediction {
        PixelPrediction {
            height: 1,
            width: class.len() / classes,
            classes,
            class_logits: class,
            ood_logits: Some(ood),
        }
    }

    #[test]
    fn op_examples() {
        let p = pred(vec![0.0; 4], 2, vec![0.7, 0.7, -3.0, -3.0]);
        let s = score_op(&p, 2.0).unwrap();
        assert!(s.values.iter().all(|v| (v - 0.5).abs() < 1e-15));

        let p = pred(vec![0.0; 2], 2, vec![0.0, 3f64.ln()]);
        let s = score_op(&p, 2.0).unwrap().values[0];
        let a = (3f64.ln() / 2.0).exp();
        assert!((s - a / (1.0 + a)).abs() < 1e-15);
        assert!((s - 0.6340).abs() < 1e-4);
    }

    #[test]
    fn op_ms_examples() {
        // P(d_out) = 0.8 at T = 1: logits (0, ln 4)
        let p = pred(vec![0.0; 4], 4, vec![0.0, 4f64.ln()]);
        let s = score_op_ms(&p, 1.0).unwrap().values[0];
        assert!((s - 0.6).abs() < 1e-12);

        let p = pred(vec![80.0, 0.0, 0.0, 0.0], 4, vec![0.0, 9.0]);
        assert!(score_op_ms(&p, 2.0).unwrap().values[0] < 1e-15);
    }

    #[test]
    fn dh_examples() {
        let p = pred(vec![0.0, 0.0], 2, vec![0.0, 0.0]);
        let s = score_dh(&p).unwrap().values[0];
        assert!((s - (0.5f64.ln() - 2f64.ln())).abs() < 1e-15);
        assert!((s + 1.38629).abs() < 1e-5);

        let p = pred(vec![0.0], 1, vec![-800.0, 0.0]);
        assert!(score_dh(&p).unwrap().values[0].abs() < 1e-15);

        let base = pred(vec![0.4, -1.2, 2.0], 3, vec![0.3, -0.2]);
        let mut shifted = base.clone();
        shifted.class_logits.iter_mut().for_each(|v| *v += 2.5);
        let a = score_dh(&base).unwrap().values[0];
        let b = score_dh(&shifted).unwrap().values[0];
        assert!((a - b - 2.5).abs() < 1e-12);
    }

    #[test]
    fn jsd_examples() {
        let p = pred(vec![0.3; 3], 3, vec![0.0, 0.0]);
        assert!((score_jsd(&p, 2.0).unwrap().values[0] - std::f64::consts::LN_2).abs() < 1e-15);

        let onehot = jsd_to_uniform(&[1.0, 0.0]);
        assert!((std::f64::consts::LN_2 - onehot - 0.47738).abs() < 1e-5);
    }

    #[test]
    fn jsd_score_monotone_towards_uniform() {
        let p0 = [0.7, 0.2, 0.05, 0.05];
        let mut prev = f64::NEG_INFINITY;
        for i in 0..=100 {
            let a = i as f64 / 100.0;
            let p: Vec<f64> = p0.iter().map(|v| (1.0 - a) * v + a * 0.25).collect();
            let s = std::f64::consts::LN_2 - jsd_to_uniform(&p);
            assert!(s >= prev - 1e-15);
            prev = s;
        }
    }

    #[test]
    fn registry_and_parsing() {
        let r = ScoreRegistry::default();
        for k in ScoreKind::ALL {
            assert_eq!(r.get(k).unwrap().kind(), k);
        }
        assert_eq!(parse_kinds("OP, opxms,DH,jsd,OP").unwrap(), ScoreKind::ALL.to_vec());
        assert_eq!("OP×MS".parse::<ScoreKind>().unwrap(), ScoreKind::OpMs);
        assert!(parse_kinds("energy").is_err());
        assert!(ScoreRegistry::with_temperature(0.0).is_err());
    }

    #[test]
    fn binary_round_trip() {
        let m = ScoreMap {
            height: 2,
            width: 3,
            kind: ScoreKind::OpMs,
            temperature: 2.0,
            values: vec![0.1, 0.2, 0.3, -1.0, 5.5, 1e-300],
        };
        let mut buf = Vec::new();
        write_score_map(&mut buf, &m).unwrap();
        assert_eq!(read_score_map(&mut buf.as_slice()).unwrap(), m);
        buf.push(0);
        assert!(read_score_map(&mut buf.as_slice()).is_err());
    }
}
