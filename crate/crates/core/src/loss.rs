//! Per-triplet objectives and their gradients with respect to the three embeddings.
//!
//! | kind       | loss                                                           | inputs     |
//! |------------|----------------------------------------------------------------|------------|
//! | `triplet`  | `[d(a,p)^2 - d(a,n)^2 + margin]+`                              | unit norm  |
//! | `improved` | `[phi]+ + lambda [d(a,p)^2 - intra]+`, `phi = d(a,p)^2 - (d(a,n)^2 + d(p,n)^2)/2 + margin` | unit norm |
//! | `angular`  | `[d(a,p)^2 - 4 tan^2(angle) d(n,c)^2]+`, `c = (a+p)/2`         | unit norm  |
//! | `adapted`  | `d(a,p)^2 + [margin - d(a,n)]+^2`                              | raw        |
//!
//! Hinge subgradients are zero at the kink.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::encoder::normalize;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Triplet,
    Improved,
    Angular,
    Adapted,
}

impl LossKind {
    pub const ALL: [LossKind; 4] = [
        LossKind::Triplet,
        LossKind::Improved,
        LossKind::Angular,
        LossKind::Adapted,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            LossKind::Triplet => "triplet",
            LossKind::Improved => "improved",
            LossKind::Angular => "angular",
            LossKind::Adapted => "adapted",
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LossKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown loss kind {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossParams {
    pub kind: LossKind,
    pub margin: f64,
    pub intra_margin: f64,
    pub lambda: f64,
    /// Radians.
    pub angle: f64,
    pub normalize_inputs: bool,
}

impl LossParams {
    /// Defaults per kind: triplet margin 0.2; improved margin 1, intra 0.1,
    /// lambda 0.02; angular 45 degrees; adapted margin 1 without normalization.
    pub fn for_kind(kind: LossKind) -> Self {
        let base = LossParams {
            kind,
            margin: 0.2,
            intra_margin: 0.1,
            lambda: 0.02,
            angle: std::f64::consts::FRAC_PI_4,
            normalize_inputs: true,
        };
        match kind {
            LossKind::Triplet | LossKind::Angular => base,
            LossKind::Improved => LossParams { margin: 1.0, ..base },
            LossKind::Adapted => LossParams {
                margin: 1.0,
                normalize_inputs: false,
                ..base
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidConfig(msg.into()));
        if !(self.margin > 0.0) {
            return bad("margin must be positive");
        }
        if !(self.intra_margin >= 0.0) {
            return bad("intra margin must be non-negative");
        }
        if !(self.lambda >= 0.0) {
            return bad("lambda must be non-negative");
        }
        if !(self.angle > 0.0 && self.angle < std::f64::consts::FRAC_PI_2) {
            return bad("angle must lie strictly between 0 and pi/2");
        }
        Ok(())
    }
}

/// Anchor, positive and negative embeddings of one triplet.
#[derive(Debug, Clone, Copy)]
pub struct TripletEmbeddings<'a> {
    pub anchor: &'a [f64],
    pub positive: &'a [f64],
    pub negative: &'a [f64],
}

impl<'a> TripletEmbeddings<'a> {
    pub fn new(anchor: &'a [f64], positive: &'a [f64], negative: &'a [f64]) -> Self {
        TripletEmbeddings {
            anchor,
            positive,
            negative,
        }
    }

    fn check(&self) -> Result<()> {
        let n = self.anchor.len();
        for other in [self.positive.len(), self.negative.len()] {
            if other != n {
                return Err(Error::ShapeMismatch { expected: n, got: other });
            }
        }
        Ok(())
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn euclidean_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch {
            expected: a.len(),
            got: b.len(),
        });
    }
    Ok(sq_dist(a, b).sqrt())
}

pub fn triplet_loss(t: &TripletEmbeddings, margin: f64) -> Result<f64> {
    t.check()?;
    Ok((sq_dist(t.anchor, t.positive) - sq_dist(t.anchor, t.negative) + margin).max(0.0))
}

fn improved_terms(t: &TripletEmbeddings, margin: f64, intra_margin: f64) -> (f64, f64) {
    let ap = sq_dist(t.anchor, t.positive);
    let psi = ap - intra_margin;
    let phi = ap - (sq_dist(t.anchor, t.negative) + sq_dist(t.positive, t.negative)) / 2.0 + margin;
    (phi, psi)
}

pub fn improved_loss(t: &TripletEmbeddings, margin: f64, intra_margin: f64, lambda: f64) -> Result<f64> {
    t.check()?;
    let (phi, psi) = improved_terms(t, margin, intra_margin);
    Ok(phi.max(0.0) + lambda * psi.max(0.0))
}

fn angular_term(t: &TripletEmbeddings, angle: f64) -> f64 {
    let tan2 = angle.tan().powi(2);
    let nc: f64 = t
        .negative
        .iter()
        .zip(t.anchor.iter().zip(t.positive))
        .map(|(n, (a, p))| {
            let d = n - (a + p) / 2.0;
            d * d
        })
        .sum();
    sq_dist(t.anchor, t.positive) - 4.0 * tan2 * nc
}

pub fn angular_loss(t: &TripletEmbeddings, angle: f64) -> Result<f64> {
    t.check()?;
    Ok(angular_term(t, angle).max(0.0))
}

pub fn adapted_loss(t: &TripletEmbeddings, margin: f64) -> Result<f64> {
    t.check()?;
    let hinge = (margin - sq_dist(t.anchor, t.negative).sqrt()).max(0.0);
    Ok(sq_dist(t.anchor, t.positive) + hinge * hinge)
}

/// Loss on embeddings that are already in the space the kind expects.
fn raw_loss(t: &TripletEmbeddings, p: &LossParams) -> Result<f64> {
    match p.kind {
        LossKind::Triplet => triplet_loss(t, p.margin),
        LossKind::Improved => improved_loss(t, p.margin, p.intra_margin, p.lambda),
        LossKind::Angular => angular_loss(t, p.angle),
        LossKind::Adapted => adapted_loss(t, p.margin),
    }
}

/// Gradients of one triplet's loss.
#[derive(Debug, Clone, PartialEq)]
pub struct TripletGradients {
    pub anchor: Vec<f64>,
    pub positive: Vec<f64>,
    pub negative: Vec<f64>,
}

fn raw_gradients(t: &TripletEmbeddings, p: &LossParams) -> TripletGradients {
    let n = t.anchor.len();
    let (a, pos, neg) = (t.anchor, t.positive, t.negative);
    let mut ga = vec![0.0; n];
    let mut gp = vec![0.0; n];
    let mut gn = vec![0.0; n];
    match p.kind {
        LossKind::Triplet => {
            let value = sq_dist(a, pos) - sq_dist(a, neg) + p.margin;
            if value > 0.0 {
                for i in 0..n {
                    ga[i] = 2.0 * (neg[i] - pos[i]);
                    gp[i] = -2.0 * (a[i] - pos[i]);
                    gn[i] = 2.0 * (a[i] - neg[i]);
                }
            }
        }
        LossKind::Improved => {
            let (phi, psi) = improved_terms(t, p.margin, p.intra_margin);
            if phi > 0.0 {
                for i in 0..n {
                    ga[i] += 2.0 * (a[i] - pos[i]) - (a[i] - neg[i]);
                    gp[i] += -2.0 * (a[i] - pos[i]) - (pos[i] - neg[i]);
                    gn[i] += (a[i] - neg[i]) + (pos[i] - neg[i]);
                }
            }
            if psi > 0.0 {
                for i in 0..n {
                    ga[i] += p.lambda * 2.0 * (a[i] - pos[i]);
                    gp[i] -= p.lambda * 2.0 * (a[i] - pos[i]);
                }
            }
        }
        LossKind::Angular => {
            if angular_term(t, p.angle) > 0.0 {
                let tan2 = p.angle.tan().powi(2);
                for i in 0..n {
                    let nc = neg[i] - (a[i] + pos[i]) / 2.0;
                    ga[i] = 2.0 * (a[i] - pos[i]) + 4.0 * tan2 * nc;
                    gp[i] = -2.0 * (a[i] - pos[i]) + 4.0 * tan2 * nc;
                    gn[i] = -8.0 * tan2 * nc;
                }
            }
        }
        LossKind::Adapted => {
            let d = sq_dist(a, neg).sqrt();
            let hinge = p.margin - d;
            for i in 0..n {
                ga[i] = 2.0 * (a[i] - pos[i]);
                gp[i] = -2.0 * (a[i] - pos[i]);
            }
            if hinge > 0.0 && d > 0.0 {
                let scale = 2.0 * hinge / d;
                for i in 0..n {
                    // d/dn of (margin - |a-n|)^2 = 2 (margin - d) (a - n) / d
                    gn[i] = scale * (a[i] - neg[i]);
                    ga[i] -= scale * (a[i] - neg[i]);
                }
            }
        }
    }
    TripletGradients {
        anchor: ga,
        positive: gp,
        negative: gn,
    }
}

// Pulls a gradient on y = x/|x| back to x.
fn normalize_backward(x: &[f64], y: &[f64], gy: &[f64]) -> Vec<f64> {
    let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    let dot: f64 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
    gy.iter().zip(y).map(|(g, yi)| (g - yi * dot) / norm).collect()
}

/// Loss of a triplet of raw encoder outputs, applying normalization when configured.
pub fn loss_value(t: &TripletEmbeddings, p: &LossParams) -> Result<f64> {
    t.check()?;
    if p.normalize_inputs {
        let (a, pos, neg) = (normalize(t.anchor)?, normalize(t.positive)?, normalize(t.negative)?);
        raw_loss(&TripletEmbeddings::new(&a, &pos, &neg), p)
    } else {
        raw_loss(t, p)
    }
}

/// Loss and gradients with respect to the raw (pre-normalization) embeddings.
pub fn loss_and_gradients(t: &TripletEmbeddings, p: &LossParams) -> Result<(f64, TripletGradients)> {
    t.check()?;
    if !p.normalize_inputs {
        return Ok((raw_loss(t, p)?, raw_gradients(t, p)));
    }
    let (a, pos, neg) = (normalize(t.anchor)?, normalize(t.positive)?, normalize(t.negative)?);
    let unit = TripletEmbeddings::new(&a, &pos, &neg);
    let value = raw_loss(&unit, p)?;
    let g = raw_gradients(&unit, p);
    Ok((
        value,
        TripletGradients {
            anchor: normalize_backward(t.anchor, &a, &g.anchor),
            positive: normalize_backward(t.positive, &pos, &g.positive),
            negative: normalize_backward(t.negative, &neg, &g.negative),
        },
    ))
}

pub fn loss_gradients(t: &TripletEmbeddings, p: &LossParams) -> Result<TripletGradients> {
    loss_and_gradients(t, p).map(|(_, g)| g)
}

/// Sum of per-triplet losses.
pub fn batch_loss(triplets: &[TripletEmbeddings], p: &LossParams) -> Result<f64> {
    if triplets.is_empty() {
        return Err(Error::EmptyBatch);
    }
    triplets.iter().map(|t| loss_value(t, p)).sum()
}
