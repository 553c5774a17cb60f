//! Injection attention: cross-attention between the denoiser bottleneck and
//! the conditioning feature, routed through a projection of the latter.
//!
//! With `q = D Wq`, `k = D Wk`, `v = D Wv`, `p = F Wp`, `u = F Wu`:
//!
//! ```text
//! M1 = softmax(q p^T / sqrt(d))
//! M2 = softmax(k p^T / sqrt(d))
//! O  = M1 M2 (v + u)
//! ```

use camodiff_nn::{Float, ParamId, ParamStore, Tape, Tensor, Var};
use rand::Rng;

use crate::error::{Error, Result};

/// A feature map flattened to `tokens x width`, token index `y * w + x`.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenizedFeature {
    pub tokens: Vec<f64>,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl TokenizedFeature {
    /// From a channel-major `[c, h, w]` map.
    pub fn from_map(map: &[f64], channels: usize, height: usize, width: usize) -> Result<Self> {
        let hw = height * width;
        if map.len() != channels * hw {
            return Err(Error::Shape(format!("map has {} values, expected {channels}x{height}x{width}", map.len())));
        }
        let mut tokens = vec![0.0; map.len()];
        for c in 0..channels {
            for p in 0..hw {
                tokens[p * channels + c] = map[c * hw + p];
            }
        }
        Ok(Self { tokens, height, width, channels })
    }

    pub fn to_map(&self) -> Vec<f64> {
        let hw = self.len();
        let mut map = vec![0.0; self.tokens.len()];
        for p in 0..hw {
            for c in 0..self.channels {
                map[c * hw + p] = self.tokens[p * self.channels + c];
            }
        }
        map
    }

    /// Number of tokens.
    pub fn len(&self) -> usize {
        self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IamParams {
    pub query: ParamId,
    pub key: ParamId,
    pub value: ParamId,
    pub proxy: ParamId,
    pub cond_value: ParamId,
}

/// How the two attention maps are chained.
#[doc(hidden)]
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AttentionProduct {
    /// `M1 M2`, as written.
    #[default]
    Literal,
    /// `M1 M2^T`, kept for comparison only.
    Transposed,
}

#[derive(Debug, Clone)]
pub struct Iam {
    params: IamParams,
    width: usize,
    product: AttentionProduct,
}

/// Tape handles of one evaluation.
#[derive(Debug, Clone, Copy)]
pub struct IamVars {
    pub m1: Var,
    pub m2: Var,
    /// `[n, tokens, width]`.
    pub out: Var,
}

impl Iam {
    pub fn new<T: Float, R: Rng>(store: &mut ParamStore<T>, prefix: &str, width: usize, rng: &mut R) -> Self {
        let mut mat = |name: &str| store.add_uniform(format!("{prefix}.{name}"), &[width, width], width, rng);
        let params = IamParams { query: mat("query"), key: mat("key"), value: mat("value"), proxy: mat("proxy"), cond_value: mat("cond_value") };
        Self { params, width, product: AttentionProduct::Literal }
    }

    pub fn from_params(params: IamParams, width: usize) -> Self {
        Self { params, width, product: AttentionProduct::Literal }
    }

    #[doc(hidden)]
    pub fn with_product(mut self, product: AttentionProduct) -> Self {
        self.product = product;
        self
    }

    pub fn params(&self) -> IamParams {
        self.params
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// `d`, `f`: token batches `[n, tokens, width]`.
    pub fn forward_tokens<T: Float>(&self, tape: &mut Tape<'_, T>, d: Var, f: Var) -> Result<IamVars> {
        let (sd, sf) = (tape.shape(d).to_vec(), tape.shape(f).to_vec());
        if sd.len() != 3 || sd != sf || sd[2] != self.width {
            return Err(Error::Shape(format!("attention inputs {sd:?} and {sf:?} must match with width {}", self.width)));
        }
        let p = self.params;
        let mut proj = |x: Var, id: ParamId| {
            let w = tape.param(id);
            tape.linear(x, w, None)
        };
        let q = proj(d, p.query);
        let k = proj(d, p.key);
        let v = proj(d, p.value);
        let pf = proj(f, p.proxy);
        let vf = proj(f, p.cond_value);
        let scale = 1.0 / (self.width as f64).sqrt();
        let s1 = tape.bmm(q, pf, false, true);
        let s1 = tape.scale(s1, scale);
        let m1 = tape.softmax_rows(s1);
        let s2 = tape.bmm(k, pf, false, true);
        let s2 = tape.scale(s2, scale);
        let m2 = tape.softmax_rows(s2);
        let vs = tape.add(v, vf);
        let m12 = tape.bmm(m1, m2, false, self.product == AttentionProduct::Transposed);
        let out = tape.bmm(m12, vs, false, false);
        Ok(IamVars { m1, m2, out })
    }

    /// Same as [`Iam::forward_tokens`] on `[n, c, h, w]` maps.
    pub fn forward_maps<T: Float>(&self, tape: &mut Tape<'_, T>, d: Var, f: Var) -> Result<(Var, IamVars)> {
        let (sd, sf) = (tape.shape(d).to_vec(), tape.shape(f).to_vec());
        if sd != sf {
            return Err(Error::Shape(format!("bottleneck {sd:?} and conditioning {sf:?} differ")));
        }
        let (dt, ft) = (tape.to_tokens(d), tape.to_tokens(f));
        let vars = self.forward_tokens(tape, dt, ft)?;
        let map = tape.from_tokens(vars.out, sd[2], sd[3]);
        Ok((map, vars))
    }
}

/// The five square projection matrices, row-major `width x width`, each
/// applied as `x W`.
#[derive(Debug, Clone, PartialEq)]
pub struct IamWeights {
    pub width: usize,
    pub query: Vec<f64>,
    pub key: Vec<f64>,
    pub value: Vec<f64>,
    pub proxy: Vec<f64>,
    pub cond_value: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IamEval {
    pub out: Vec<f64>,
    pub m1: Vec<f64>,
    pub m2: Vec<f64>,
    pub tokens: usize,
}

impl IamWeights {
    pub fn random<R: Rng>(width: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (width as f64).sqrt();
        let mut m = || (0..width * width).map(|_| rng.random_range(-bound..=bound)).collect::<Vec<f64>>();
        Self { width, query: m(), key: m(), value: m(), proxy: m(), cond_value: m() }
    }

    fn store(&self) -> Result<(ParamStore<f64>, IamParams)> {
        let n = self.width * self.width;
        let mut store = ParamStore::new();
        let mut add = |name: &str, v: &[f64]| -> Result<ParamId> {
            if v.len() != n {
                return Err(Error::Shape(format!("{name} has {} entries, expected {n}", v.len())));
            }
            Ok(store.add(name, Tensor::from_vec(&[self.width, self.width], v.to_vec())))
        };
        let params = IamParams {
            query: add("query", &self.query)?,
            key: add("key", &self.key)?,
            value: add("value", &self.value)?,
            proxy: add("proxy", &self.proxy)?,
            cond_value: add("cond_value", &self.cond_value)?,
        };
        Ok((store, params))
    }
}

/// Single-instance evaluation on token matrices (`tokens x width`, row-major).
pub fn iam_forward(d: &TokenizedFeature, f: &TokenizedFeature, weights: &IamWeights) -> Result<IamEval> {
    iam_forward_with(d, f, weights, AttentionProduct::Literal)
}

#[doc(hidden)]
pub fn iam_forward_with(d: &TokenizedFeature, f: &TokenizedFeature, weights: &IamWeights, product: AttentionProduct) -> Result<IamEval> {
    if d.len() != f.len() || d.channels != f.channels || d.channels != weights.width {
        return Err(Error::Shape(format!(
            "attention inputs {}x{} and {}x{} with width {}",
            d.len(),
            d.channels,
            f.len(),
            f.channels,
            weights.width
        )));
    }
    let (store, params) = weights.store()?;
    let iam = Iam::from_params(params, weights.width).with_product(product);
    let mut tape = Tape::inference(&store);
    let n = d.len();
    let dv = tape.input(Tensor::from_vec(&[1, n, d.channels], d.tokens.clone()));
    let fv = tape.input(Tensor::from_vec(&[1, n, f.channels], f.tokens.clone()));
    let vars = iam.forward_tokens(&mut tape, dv, fv)?;
    Ok(IamEval {
        out: tape.value(vars.out).data().to_vec(),
        m1: tape.value(vars.m1).data().to_vec(),
        m2: tape.value(vars.m2).data().to_vec(),
        tokens: n,
    })
}
