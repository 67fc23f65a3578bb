//! Model specification documents.
//!
//! A spec names the family, the response dimension, an optional
//! antedependence order and one formula per distributional parameter:
//!
//! ```json
//! {
//!   "family": "modified_chol",
//!   "dim": 10,
//!   "ad_order": 5,
//!   "response": "obs[i]",
//!   "formulas": {
//!     "mu[i]": "cyclic(yday) + cyclic(yday):mean[i]",
//!     "psi[i]": "cyclic(yday) + cyclic(yday):logsd[i]",
//!     "phi[i,j]": "cyclic(yday)"
//!   }
//! }
//! ```
//!
//! Keys with `[i]` / `[i,j]` apply to every parameter of that kind; keys
//! with explicit one-based indices (`mu[2]`, `phi[1,3]`) override them.
//! Inside formulas `name[i]` and `name[j]` expand to the column `name_<i>`.
//! Every predictor carries an intercept; parameters without a formula are
//! intercept-only.
//!
//! Term grammar, joined with `+`:
//! - `1`: intercept (implicit)
//! - `x`: linear effect
//! - `s(x)`, `s(x, k=10, m=2)`: cubic P-spline with `k` basis functions
//!   and an order-`m` difference penalty
//! - `cyclic(x)`, `cyclic(x, period=365.25, k=10)`: cyclic P-spline
//! - `term:z`: varying coefficient, the term multiplied by covariate `z`

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::basis::{TermKind, TermSpec, DEFAULT_BASIS_SIZE, DEFAULT_PENALTY_ORDER, DEFAULT_PERIOD};
use crate::error::{Error, Result};
use crate::likelihood::{Family, Layout, ParamId};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub family: Family,
    pub dim: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ad_order: Option<usize>,
    #[serde(default = "default_response")]
    pub response: String,
    #[serde(default)]
    pub formulas: BTreeMap<String, String>,
}

fn default_response() -> String {
    "y[i]".to_string()
}

/// Covariance-parameter accounting: how many of the `k(k+1)/2`
/// covariance-specifying parameters are linked to covariates, estimated as
/// intercepts only, or fixed at zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCounts {
    pub flexible: usize,
    pub intercept: usize,
    pub zero: usize,
}

impl ModelSpec {
    pub fn new(family: Family, dim: usize) -> Self {
        Self {
            family,
            dim,
            ad_order: None,
            response: default_response(),
            formulas: BTreeMap::new(),
        }
    }

    pub fn with_ad_order(mut self, order: usize) -> Self {
        self.ad_order = Some(order);
        self
    }

    pub fn with_response(mut self, template: &str) -> Self {
        self.response = template.to_string();
        self
    }

    pub fn with_formula(mut self, key: &str, formula: &str) -> Self {
        self.formulas.insert(key.to_string(), formula.to_string());
        self
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let spec: ModelSpec = serde_json::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn layout(&self) -> Result<Layout> {
        if let Some(r) = self.ad_order {
            if r >= self.dim && self.dim > 0 {
                return Err(Error::Spec(format!(
                    "antedependence order {r} must be below the dimension {}",
                    self.dim
                )));
            }
        }
        Layout::new(self.family, self.dim, self.ad_order)
    }

    pub fn response_columns(&self) -> Vec<String> {
        (0..self.dim)
            .map(|i| expand_indices(&self.response, i, i))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.resolve().map(|_| ())
    }

    /// Term lists for every active distributional parameter, in layout order.
    pub fn resolve(&self) -> Result<Vec<(ParamId, Vec<TermSpec>)>> {
        let layout = self.layout()?;
        let mut used = vec![false; self.formulas.len()];
        let keys: Vec<(&String, &String)> = self.formulas.iter().collect();
        let mut out = Vec::with_capacity(layout.len());
        for &param in layout.params() {
            let (exact, broadcast) = param_keys(param);
            let found = keys
                .iter()
                .position(|(k, _)| normalize_key(k) == exact)
                .or_else(|| keys.iter().position(|(k, _)| normalize_key(k) == broadcast));
            let (i, j) = param_indices(param);
            let mut terms = vec![TermSpec::intercept()];
            if let Some(pos) = found {
                used[pos] = true;
                terms.extend(parse_formula(keys[pos].1, i, j)?);
            }
            out.push((param, terms));
        }
        if let Some(pos) = used.iter().position(|u| !u) {
            let key = keys[pos].0;
            // Keys for structurally zero parameters are tolerated.
            if !self.is_masked_key(key) {
                return Err(Error::Spec(format!(
                    "formula key `{key}` matches no parameter of a {} model with dim {}",
                    self.family.name(),
                    self.dim
                )));
            }
        }
        Ok(out)
    }

    fn is_masked_key(&self, key: &str) -> bool {
        let full = match Layout::new(self.family, self.dim, None) {
            Ok(l) => l,
            Err(_) => return false,
        };
        let key = normalize_key(key);
        full.params().iter().any(|&p| {
            let (exact, broadcast) = param_keys(p);
            key == exact || key == broadcast
        })
    }

    /// Table-style parameter accounting computed from the spec alone.
    pub fn param_counts(&self) -> Result<ParamCounts> {
        let layout = self.layout()?;
        let resolved = self.resolve()?;
        let mut counts = ParamCounts {
            flexible: 0,
            intercept: 0,
            zero: layout.structural_zero_count(),
        };
        for (param, terms) in &resolved {
            if param.is_mean() {
                continue;
            }
            if terms.iter().any(|t| t.kind != TermKind::Intercept) {
                counts.flexible += 1;
            } else {
                counts.intercept += 1;
            }
        }
        Ok(counts)
    }
}

fn normalize_key(key: &str) -> String {
    key.chars().filter(|c| !c.is_whitespace()).collect()
}

fn param_keys(param: ParamId) -> (String, String) {
    let exact = param.label();
    let broadcast = match param {
        ParamId::Mu { .. } => "mu[i]",
        ParamId::LambdaDiag { .. } => "lambda[i]",
        ParamId::Lambda { .. } => "lambda[i,j]",
        ParamId::Psi { .. } => "psi[i]",
        ParamId::Phi { .. } => "phi[i,j]",
        ParamId::Sigma { .. } => "sigma[i]",
        ParamId::Rho => "rho",
        ParamId::RhoPair { .. } => "rho[i,j]",
    };
    (exact, broadcast.to_string())
}

fn param_indices(param: ParamId) -> (usize, usize) {
    match param {
        ParamId::Mu { i }
        | ParamId::LambdaDiag { i }
        | ParamId::Psi { i }
        | ParamId::Sigma { i } => (i, i),
        ParamId::Lambda { i, j } | ParamId::Phi { i, j } | ParamId::RhoPair { i, j } => (i, j),
        ParamId::Rho => (0, 0),
    }
}

/// `name[i]` → `name_<i+1>`, `name[j]` → `name_<j+1>`.
fn expand_indices(text: &str, i: usize, j: usize) -> String {
    text.replace("[i]", &format!("_{}", i + 1))
        .replace("[j]", &format!("_{}", j + 1))
}

/// Splits on `sep` outside parentheses.
fn split_top_level(text: &str, sep: char) -> Vec<&str> {
    let mut parts = Vec::new();
    let mut depth = 0i32;
    let mut start = 0;
    for (pos, c) in text.char_indices() {
        match c {
            '(' => depth += 1,
            ')' => depth -= 1,
            c if c == sep && depth == 0 => {
                parts.push(&text[start..pos]);
                start = pos + c.len_utf8();
            }
            _ => {}
        }
    }
    parts.push(&text[start..]);
    parts
}

fn is_identifier(s: &str) -> bool {
    !s.is_empty()
        && s.chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '.')
        && !s.starts_with(|c: char| c.is_ascii_digit())
}

/// Parses one formula for the parameter with zero-based indices `(i, j)`.
pub fn parse_formula(formula: &str, i: usize, j: usize) -> Result<Vec<TermSpec>> {
    let expanded = expand_indices(formula, i, j);
    let mut terms = Vec::new();
    for raw in split_top_level(&expanded, '+') {
        let term = raw.trim();
        if term.is_empty() {
            return Err(Error::Spec(format!("empty term in formula `{formula}`")));
        }
        if term == "1" {
            continue;
        }
        let pieces = split_top_level(term, ':');
        let (main, by) = match pieces.as_slice() {
            [main] => (main.trim(), None),
            [main, by] => {
                let by = by.trim();
                if !is_identifier(by) {
                    return Err(Error::Spec(format!(
                        "bad varying-coefficient covariate `{by}`"
                    )));
                }
                (main.trim(), Some(by))
            }
            _ => return Err(Error::Spec(format!("term `{term}` has more than one `:`"))),
        };
        let mut spec = parse_main_term(main)?;
        if let Some(by) = by {
            spec = spec.with_by(by);
        }
        spec.validate()?;
        terms.push(spec);
    }
    Ok(terms)
}

fn parse_main_term(text: &str) -> Result<TermSpec> {
    if is_identifier(text) {
        return Ok(TermSpec::linear(text));
    }
    let open = text
        .find('(')
        .ok_or_else(|| Error::Spec(format!("cannot parse term `{text}`")))?;
    if !text.ends_with(')') {
        return Err(Error::Spec(format!("unbalanced parentheses in `{text}`")));
    }
    let func = text[..open].trim();
    let args: Vec<&str> = text[open + 1..text.len() - 1]
        .split(',')
        .map(str::trim)
        .collect();
    let covariate = args
        .first()
        .copied()
        .filter(|a| is_identifier(a))
        .ok_or_else(|| {
            Error::Spec(format!(
                "term `{text}` needs a covariate as its first argument"
            ))
        })?;
    let mut spec = match func {
        "s" => TermSpec::smooth(covariate),
        "cyclic" | "cc" => TermSpec::cyclic(covariate, DEFAULT_PERIOD),
        other => return Err(Error::Spec(format!("unknown smooth `{other}`"))),
    };
    spec.basis_size = DEFAULT_BASIS_SIZE;
    spec.penalty_order = DEFAULT_PENALTY_ORDER;
    for arg in &args[1..] {
        let (key, value) = arg
            .split_once('=')
            .ok_or_else(|| Error::Spec(format!("expected key=value, got `{arg}`")))?;
        let bad = || Error::Spec(format!("bad value in `{arg}`"));
        match key.trim() {
            "k" => spec.basis_size = value.trim().parse().map_err(|_| bad())?,
            "m" => spec.penalty_order = value.trim().parse().map_err(|_| bad())?,
            "period" if spec.kind == TermKind::CyclicSmooth => {
                spec.period = Some(value.trim().parse().map_err(|_| bad())?)
            }
            other => {
                return Err(Error::Spec(format!(
                    "unknown argument `{other}` in `{text}`"
                )))
            }
        }
    }
    Ok(spec)
}

/// The six covariance specifications compared on the 10-dimensional
/// weather problem, keyed by name. Means are seasonally varying linear
/// models of the ensemble mean forecasts in every case.
pub fn weather_specs(dim: usize) -> Vec<(&'static str, ModelSpec)> {
    let mean = "cyclic(yday) + cyclic(yday):mean[i]";
    let scale = "cyclic(yday) + cyclic(yday):logsd[i]";
    let base = |family| {
        ModelSpec::new(family, dim)
            .with_response("obs[i]")
            .with_formula("mu[i]", mean)
    };
    let basic = base(Family::BasicChol)
        .with_formula("lambda[i]", scale)
        .with_formula("lambda[i,j]", "cyclic(yday)");
    let modified = base(Family::ModifiedChol)
        .with_formula("psi[i]", scale)
        .with_formula("phi[i,j]", "cyclic(yday)");
    let ad = dim.saturating_sub(1).min(5);
    vec![
        ("basic_chol", basic.clone()),
        ("modified_chol", modified.clone()),
        ("basic_chol_ad5", basic.with_ad_order(ad)),
        ("modified_chol_ad5", modified.with_ad_order(ad)),
        (
            "ar1",
            base(Family::Ar1)
                .with_formula("sigma[i]", scale)
                .with_formula("rho", "cyclic(yday)"),
        ),
        (
            "const_corr",
            base(Family::ConstCorr).with_formula("sigma[i]", scale),
        ),
    ]
}
