//! Contrastive and regularization objectives.
//!
//! Every contrastive term uses the same symmetric InfoNCE:
//!
//! `L(S) = −1/(2B) Σ_i [log softmax_row(S/τ)_ii + log softmax_col(S/τ)_ii]`
//!
//! with `S` built from cosine similarities.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Matrix, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_acl_i: f64,
    pub lambda_acl_f: f64,
    pub lambda_reg: f64,
    pub lambda_acl_c: f64,
    pub tau: f64,
    pub p_plus: f64,
    pub p_minus: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_acl_i: 1.0, lambda_acl_f: 1.0, lambda_reg: 1.0, lambda_acl_c: 1.0, tau: 0.07, p_plus: 0.4, p_minus: 0.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::Config("tau must be positive".into()));
        }
        let lambdas = [self.lambda_acl_i, self.lambda_acl_f, self.lambda_reg, self.lambda_acl_c];
        if lambdas.iter().any(|l| !(*l >= 0.0) || !l.is_finite()) {
            return Err(Error::Config("loss weights must be finite and non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.p_plus) || !(0.0..=1.0).contains(&self.p_minus) {
            return Err(Error::Config("area priors must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Which terms contribute to the objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossFlags {
    pub acl_i: bool,
    pub acl_f: bool,
    pub reg: bool,
}

impl Default for LossFlags {
    fn default() -> Self {
        Self { acl_i: true, acl_f: true, reg: true }
    }
}

/// Rows of the loss-combination ablation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AblationRow {
    A,
    B,
    C,
    D,
    E,
    F,
}

impl AblationRow {
    pub const ALL: [AblationRow; 6] = [Self::A, Self::B, Self::C, Self::D, Self::E, Self::F];

    pub fn flags(self) -> LossFlags {
        let (acl_i, acl_f, reg) = match self {
            Self::A => (true, false, false),
            Self::B => (false, true, false),
            Self::C => (true, true, false),
            Self::D => (true, false, true),
            Self::E => (false, true, true),
            Self::F => (true, true, true),
        };
        LossFlags { acl_i, acl_f, reg }
    }

    pub fn label(self) -> &'static str {
        match self {
            Self::A => "A",
            Self::B => "B",
            Self::C => "C",
            Self::D => "D",
            Self::E => "E",
            Self::F => "F",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|r| r.label().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidInput(format!("unknown ablation row '{s}'")))
    }
}

/// Per-term values of one objective evaluation. Disabled terms are reported as `None`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub acl_i: Option<f64>,
    pub acl_f: Option<f64>,
    pub reg: Option<f64>,
    pub acl_c: Option<f64>,
    pub total: f64,
}

fn check_square(s: &Matrix) -> Result<usize> {
    let (r, c) = s.shape();
    if r != c {
        return Err(Error::Shape(format!("similarity matrix must be square, got {r}x{c}")));
    }
    if r < 2 {
        return Err(Error::InvalidInput(format!("contrastive loss needs a batch of at least 2, got {r}")));
    }
    Ok(r)
}

/// Plain evaluation of the symmetric InfoNCE.
pub fn symmetric_infonce(s: &Matrix, tau: f64) -> Result<f64> {
    let b = check_square(s)?;
    if !(tau > 0.0) {
        return Err(Error::Config("tau must be positive".into()));
    }
    if !s.is_finite() {
        return Err(Error::InvalidInput("similarity matrix must be finite".into()));
    }
    let lse = |vals: &mut dyn Iterator<Item = f64>| {
        let v: Vec<f64> = vals.map(|x| x / tau).collect();
        let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
    };
    let mut total = 0.0;
    for i in 0..b {
        let d = s.get(i, i) / tau;
        total += lse(&mut (0..b).map(|j| s.get(i, j))) - d;
        total += lse(&mut (0..b).map(|j| s.get(j, i))) - d;
    }
    Ok(total / (2 * b) as f64)
}

/// Graph form of [`symmetric_infonce`]; `s` is `[B, B]` with `B ≥ 2`.
pub fn infonce_graph(g: &mut Graph, s: Var, tau: f64) -> Var {
    let b = g.shape(s).0;
    let scaled = g.scale(s, 1.0 / tau);
    let rows = g.log_softmax_rows(scaled);
    let st = g.transpose(scaled);
    let cols = g.log_softmax_rows(st);
    let dr = g.diagonal(rows);
    let dc = g.diagonal(cols);
    let both = g.add(dr, dc);
    let sum = g.sum(both);
    g.scale(sum, -1.0 / (2 * b) as f64)
}

/// `[n, d] × [m, d]` cosine similarities.
pub fn cosine_matrix_graph(g: &mut Graph, a: Var, b: Var) -> Var {
    let an = g.normalize_rows(a, 1e-12);
    let bn = g.normalize_rows(b, 1e-12);
    let bt = g.transpose(bn);
    g.matmul(an, bt)
}

pub fn cosine_matrix(a: &Matrix, b: &Matrix) -> Matrix {
    let mut g = Graph::new();
    let va = g.constant(a.clone());
    let vb = g.constant(b.clone());
    let s = cosine_matrix_graph(&mut g, va, vb);
    g.value(s).clone()
}

/// `Σ_i |p⁺ − pos_i| + Σ |p⁻ − neg_k|` over mask means.
pub fn area_regularization(pos_means: &[f64], neg_means: &[f64], weights: &LossWeights) -> f64 {
    pos_means.iter().map(|m| (weights.p_plus - m).abs()).sum::<f64>()
        + neg_means.iter().map(|m| (weights.p_minus - m).abs()).sum::<f64>()
}

/// Graph form over relaxed masks `[B², H·W]` (row `i·B + j` is image `i` under audio `j`).
pub fn area_regularization_graph(g: &mut Graph, relaxed: Var, batch: usize, weights: &LossWeights) -> Var {
    let (n, hw) = g.shape(relaxed);
    debug_assert_eq!(n, batch * batch);
    let sums = g.row_sums(relaxed);
    let means = g.scale(sums, 1.0 / hw as f64);
    let mut target = Matrix::zeros(n, 1);
    for i in 0..batch {
        for j in 0..batch {
            target.set(i * batch + j, 0, if i == j { weights.p_plus } else { weights.p_minus });
        }
    }
    let neg_target = target.map(|v| -v);
    let diff = g.add_const(means, &neg_target);
    let a = g.abs(diff);
    g.sum(a)
}

/// Caption-audio contrastive term over paired rows.
pub fn acl_caption(captions: &Matrix, audio: &Matrix, tau: f64) -> Result<f64> {
    if captions.shape() != audio.shape() {
        return Err(Error::Shape("caption and audio embeddings must pair up".into()));
    }
    if captions.rows() < 2 {
        return Err(Error::InvalidInput("caption loss needs at least 2 pairs".into()));
    }
    symmetric_infonce(&cosine_matrix(captions, audio), tau)
}
