//! Symbolic feature terms.
//!
//! Round `p` forms integrands from products of `k` factors drawn (with
//! repetition) from the previous set, each factor optionally differentiated,
//! times at most one forcing leaf:
//!
//! - no leaf: `1 ≤ k ≤ m`
//! - `f` leaf: `0 ≤ k ≤ m − 1`
//! - `ξ` leaf: `0 ≤ k ≤ l − 1`
//!
//! Each integrand `z` becomes `I[z]`, and the new set is the union with the
//! previous one. Keys are canonical (factors sorted), so duplicates collapse.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{invalid, Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureSpec {
    pub n: usize,
    pub m: usize,
    pub l: usize,
    #[serde(default = "default_cap")]
    pub cap: usize,
    /// Allow differentiated factors (`∂` in 1-D, `∂x` and `∂y` in 2-D).
    #[serde(default = "yes")]
    pub derivatives: bool,
}

fn default_cap() -> usize {
    256
}

fn yes() -> bool {
    true
}

impl Default for FeatureSpec {
    fn default() -> Self {
        Self::new(2, 2, 1)
    }
}

impl FeatureSpec {
    pub fn new(n: usize, m: usize, l: usize) -> Self {
        Self {
            n,
            m,
            l,
            cap: default_cap(),
            derivatives: true,
        }
    }

    pub fn with_cap(mut self, cap: usize) -> Self {
        self.cap = cap;
        self
    }

    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("serializable spec");
        crate::solver::hex(&Sha256::digest(&json))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Leaf {
    F,
    Xi,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Deriv {
    None,
    X,
    Y,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Factor {
    /// Index of the factor's term in the ordered feature list.
    pub term: usize,
    pub deriv: Deriv,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Expr {
    /// `s^in = I_c[u₀]`
    Input,
    /// `I[leaf · Π factors]`
    Integral { leaf: Option<Leaf>, factors: Vec<Factor> },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FeatureTerm {
    pub key: String,
    pub depth: usize,
    pub expr: Expr,
}

/// Factor and product keys under construction, before indices are known.
#[derive(Clone, Debug)]
struct Pending {
    depth: usize,
    leaf: Option<Leaf>,
    factors: Vec<(String, Deriv)>,
}

fn deriv_key(inner: &str, d: Deriv, dim: usize) -> String {
    match (d, dim) {
        (Deriv::None, _) => inner.to_string(),
        (Deriv::X, 1) => format!("d({inner})"),
        (Deriv::X, _) => format!("dx({inner})"),
        (Deriv::Y, _) => format!("dy({inner})"),
    }
}

fn leaf_key(l: Leaf) -> &'static str {
    match l {
        Leaf::F => "f",
        Leaf::Xi => "xi",
    }
}

/// Calls `visit` with every multiset of size `k` over `0..n` (non-decreasing
/// index sequences).
fn multisets(n: usize, k: usize, visit: &mut impl FnMut(&[usize]) -> Result<()>) -> Result<()> {
    if k == 0 {
        return visit(&[]);
    }
    if n == 0 {
        return Ok(());
    }
    let mut idx = vec![0usize; k];
    loop {
        visit(&idx)?;
        let mut i = k;
        while i > 0 && idx[i - 1] == n - 1 {
            i -= 1;
        }
        if i == 0 {
            return Ok(());
        }
        let v = idx[i - 1] + 1;
        for j in i - 1..k {
            idx[j] = v;
        }
    }
}

/// Deduplicated, ordered feature terms for `spec` on a `dim`-dimensional grid.
pub fn enumerate_terms(spec: &FeatureSpec, dim: usize) -> Result<Vec<FeatureTerm>> {
    if !(dim == 1 || dim == 2) {
        return Err(invalid(format!("feature grids are 1-D or 2-D, got {dim}")));
    }
    let derivs: Vec<Deriv> = match (spec.derivatives, dim) {
        (false, _) => vec![Deriv::None],
        (true, 1) => vec![Deriv::None, Deriv::X],
        (true, _) => vec![Deriv::None, Deriv::X, Deriv::Y],
    };
    // key -> pending definition; BTreeMap keeps iteration deterministic
    let mut set: BTreeMap<String, Pending> = BTreeMap::new();
    set.insert(
        "u".into(),
        Pending {
            depth: 0,
            leaf: None,
            factors: vec![],
        },
    );
    for _round in 0..spec.n {
        let prev: Vec<(String, usize)> = set.iter().map(|(k, p)| (k.clone(), p.depth)).collect();
        let pool: Vec<(String, Deriv, usize)> = prev
            .iter()
            .flat_map(|(k, depth)| derivs.iter().map(move |&d| (k.clone(), d, *depth)))
            .collect();
        let mut round: BTreeMap<String, Pending> = BTreeMap::new();
        let budgets = [
            (None, 1usize, spec.m),
            (Some(Leaf::F), 0, spec.m.saturating_sub(1)),
            (Some(Leaf::Xi), 0, spec.l.saturating_sub(1)),
        ];
        for (leaf, kmin, kmax) in budgets {
            let budget = if leaf == Some(Leaf::Xi) { spec.l } else { spec.m };
            if budget == 0 {
                continue;
            }
            for k in kmin..=kmax {
                multisets(pool.len(), k, &mut |choice| {
                    let mut parts: Vec<String> = choice
                        .iter()
                        .map(|&c| deriv_key(&pool[c].0, pool[c].1, dim))
                        .collect();
                    if let Some(l) = leaf {
                        parts.push(leaf_key(l).to_string());
                    }
                    parts.sort();
                    let key = format!("I[{}]", parts.join("*"));
                    if set.contains_key(&key) || round.contains_key(&key) {
                        return Ok(());
                    }
                    let depth = 1 + choice.iter().map(|&c| pool[c].2).max().unwrap_or(0);
                    round.insert(
                        key,
                        Pending {
                            depth,
                            leaf,
                            factors: choice.iter().map(|&c| (pool[c].0.clone(), pool[c].1)).collect(),
                        },
                    );
                    if set.len() + round.len() > spec.cap {
                        return Err(Error::FeatureCap {
                            count: set.len() + round.len(),
                            cap: spec.cap,
                        });
                    }
                    Ok(())
                })?;
            }
        }
        set.extend(round);
    }
    if set.len() > spec.cap {
        return Err(Error::FeatureCap {
            count: set.len(),
            cap: spec.cap,
        });
    }
    let mut ordered: Vec<(String, Pending)> = set.into_iter().collect();
    ordered.sort_by(|a, b| (a.1.depth, &a.0).cmp(&(b.1.depth, &b.0)));
    let index: BTreeMap<String, usize> = ordered.iter().enumerate().map(|(i, (k, _))| (k.clone(), i)).collect();
    Ok(ordered
        .into_iter()
        .map(|(key, p)| {
            let expr = if key == "u" {
                Expr::Input
            } else {
                Expr::Integral {
                    leaf: p.leaf,
                    factors: p
                        .factors
                        .iter()
                        .map(|(k, d)| Factor {
                            term: index[k],
                            deriv: *d,
                        })
                        .collect(),
                }
            };
            FeatureTerm {
                key,
                depth: p.depth,
                expr,
            }
        })
        .collect())
}

/// Keys only, in feature order.
pub fn term_keys(terms: &[FeatureTerm]) -> Vec<&str> {
    terms.iter().map(|t| t.key.as_str()).collect()
}
