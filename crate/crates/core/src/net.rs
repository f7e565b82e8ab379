//! Uniform-attention transformer: ReLU encoder, `Renorm_τ` onto the simplex,
//! mean pooling over the context, and a clipped ReLU decoder on
//! `[pooled; query]`. Gradients are derived by hand.

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, spectral_norm, Matrix};
use crate::scalar::Scalar;
use crate::taskgen::Prompt;

pub const CHECKPOINT_FORMAT: &str = "icl-bayes-transformer";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Prompts per reduction chunk. Fixed so gradients do not depend on the
/// worker count.
const CHUNK: usize = 16;

/// Affine layer `y = W x + b` with `W` of shape `out × in`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "S: Scalar")]
pub struct Layer<S = f64> {
    pub weight: Matrix<S>,
    pub bias: Vec<S>,
}

impl<S: Scalar> Layer<S> {
    pub fn zeros(n_in: usize, n_out: usize) -> Self {
        Self {
            weight: Matrix::zeros(n_out, n_in),
            bias: vec![S::zero(); n_out],
        }
    }

    pub fn n_in(&self) -> usize {
        self.weight.cols
    }

    pub fn n_out(&self) -> usize {
        self.weight.rows
    }

    fn apply(&self, x: &[S]) -> Vec<S> {
        let mut y = self.weight.matvec(x);
        for (v, b) in y.iter_mut().zip(&self.bias) {
            *v += *b;
        }
        y
    }
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    /// Feature count `m`.
    #[serde(default = "default_m")]
    pub m: usize,
    #[serde(default = "default_tau")]
    pub tau: f64,
    /// Encoder depth `D_φ` (number of affine layers).
    #[serde(default = "default_depth")]
    pub enc_depth: usize,
    /// Decoder depth `D_ρ`.
    #[serde(default = "default_depth")]
    pub dec_depth: usize,
    #[serde(default = "default_c")]
    pub c_phi: f64,
    #[serde(default = "default_c")]
    pub c_rho: f64,
    /// Output clip; `None` means `B_f` of the mixture.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b_m: Option<f64>,
}

fn default_m() -> usize {
    16
}
fn default_tau() -> f64 {
    1.0
}
fn default_depth() -> usize {
    3
}
fn default_c() -> f64 {
    2.0
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            m: default_m(),
            tau: default_tau(),
            enc_depth: default_depth(),
            dec_depth: default_depth(),
            c_phi: default_c(),
            c_rho: default_c(),
            b_m: None,
        }
    }
}

/// Parameters `θ` of the transformer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "S: Scalar")]
pub struct TransformerParams<S = f64> {
    pub d_feat: usize,
    pub m: usize,
    pub tau: S,
    /// Output clip bound `B_M`.
    pub b_m: S,
    pub encoder: Vec<Layer<S>>,
    pub decoder: Vec<Layer<S>>,
}

/// Spectral products and the Lipschitz bound they imply.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpectralReport {
    pub s_encoder: f64,
    pub s_decoder: f64,
    /// `(2√m/τ) · s_encoder`.
    pub lip_phi_bound: f64,
    /// `C_φ m^{1/d_eff}`.
    pub budget_encoder: f64,
    /// `C_ρ √m`.
    pub budget_decoder: f64,
    pub encoder_within: bool,
    pub decoder_within: bool,
}

impl SpectralReport {
    /// `Λ_1 = L_s Lip(φ) + L_c` with `L_s = L_c = s_decoder`.
    pub fn lambda_1(&self) -> f64 {
        self.s_decoder * self.lip_phi_bound + self.s_decoder
    }
}

#[inline]
fn relu<S: Scalar>(v: S) -> S {
    if v > S::zero() {
        v
    } else {
        S::zero()
    }
}

/// `Renorm_τ(s) = (relu(s) + (τ/m) 1) / (1ᵀ relu(s) + τ)`.
pub fn renorm<S: Scalar>(s: &[S], tau: S) -> Vec<S> {
    let m = S::lit(s.len() as f64);
    let denom = s.iter().map(|&v| relu(v)).sum::<S>() + tau;
    s.iter().map(|&v| (relu(v) + tau / m) / denom).collect()
}

/// Forward pass of a ReLU MLP; returns the pre-activations of every layer.
/// Hidden layers use ReLU, the last layer is linear.
fn mlp_forward<S: Scalar>(layers: &[Layer<S>], input: &[S]) -> Vec<Vec<S>> {
    let mut pre = Vec::with_capacity(layers.len());
    let mut a = input.to_vec();
    for (l, layer) in layers.iter().enumerate() {
        let z = layer.apply(&a);
        if l + 1 < layers.len() {
            a = z.iter().map(|&v| relu(v)).collect();
        }
        pre.push(z);
    }
    pre
}

fn mlp_output<S: Scalar>(layers: &[Layer<S>], input: &[S]) -> Vec<S> {
    let mut a = input.to_vec();
    for (l, layer) in layers.iter().enumerate() {
        a = layer.apply(&a);
        if l + 1 < layers.len() {
            a.iter_mut().for_each(|v| *v = relu(*v));
        }
    }
    a
}

/// Backward pass given the gradient at the last pre-activation; accumulates
/// into `grads` and returns the gradient at the input.
fn mlp_backward<S: Scalar>(
    layers: &[Layer<S>],
    grads: &mut [Layer<S>],
    input: &[S],
    pre: &[Vec<S>],
    d_out: Vec<S>,
) -> Vec<S> {
    let mut delta = d_out;
    for l in (0..layers.len()).rev() {
        let g = &mut grads[l];
        let n_in = layers[l].n_in();
        for (o, &dv) in delta.iter().enumerate() {
            if dv == S::zero() {
                continue;
            }
            g.bias[o] += dv;
            let row = &mut g.weight.data[o * n_in..(o + 1) * n_in];
            if l == 0 {
                for (w, &a) in row.iter_mut().zip(input) {
                    *w += dv * a;
                }
            } else {
                for (w, &z) in row.iter_mut().zip(&pre[l - 1]) {
                    *w += dv * relu(z);
                }
            }
        }
        let d_in = layers[l].weight.matvec_t(&delta);
        if l == 0 {
            return d_in;
        }
        // ReLU subgradient is 0 at exactly 0.
        delta = d_in
            .into_iter()
            .zip(&pre[l - 1])
            .map(|(d, &z)| if z > S::zero() { d } else { S::zero() })
            .collect();
    }
    delta
}

fn pairwise_sum<S: Scalar>(mut items: Vec<Vec<S>>) -> Vec<S> {
    while items.len() > 1 {
        let mut next = Vec::with_capacity(items.len().div_ceil(2));
        let mut it = items.into_iter();
        while let Some(mut a) = it.next() {
            if let Some(b) = it.next() {
                for (x, y) in a.iter_mut().zip(&b) {
                    *x += *y;
                }
            }
            next.push(a);
        }
        items = next;
    }
    items.pop().unwrap_or_default()
}

fn lex_cmp<S: Scalar>(a: &[S], b: &[S]) -> std::cmp::Ordering {
    for (x, y) in a.iter().zip(b) {
        match x.as_f64().total_cmp(&y.as_f64()) {
            std::cmp::Ordering::Equal => continue,
            o => return o,
        }
    }
    std::cmp::Ordering::Equal
}

impl<S: Scalar> TransformerParams<S> {
    pub fn d_eff(&self) -> usize {
        self.d_feat + 1
    }

    /// All-zero parameters with the given layer widths.
    pub fn zeros(d_feat: usize, m: usize, tau: f64, b_m: f64, enc_widths: &[usize], dec_widths: &[usize]) -> Self {
        let mk = |w: &[usize]| w.windows(2).map(|p| Layer::zeros(p[0], p[1])).collect::<Vec<_>>();
        Self {
            d_feat,
            m,
            tau: S::lit(tau),
            b_m: S::lit(b_m),
            encoder: mk(enc_widths),
            decoder: mk(dec_widths),
        }
    }

    /// Default widths: encoder `d_eff → 2m → … → m`, decoder
    /// `m + d_feat → m → … → 1`.
    pub fn widths(d_feat: usize, arch: &Architecture) -> (Vec<usize>, Vec<usize>) {
        let m = arch.m;
        let mut enc = vec![d_feat + 1];
        enc.extend(std::iter::repeat_n(2 * m, arch.enc_depth.saturating_sub(1)));
        enc.push(m);
        let mut dec = vec![m + d_feat];
        dec.extend(std::iter::repeat_n(m, arch.dec_depth.saturating_sub(1)));
        dec.push(1);
        (enc, dec)
    }

    /// He-style Gaussian initialization, then a global rescale of each stack
    /// so that its spectral product meets the budget.
    pub fn init<R: Rng + ?Sized>(d_feat: usize, arch: &Architecture, b_m: f64, rng: &mut R) -> Self {
        let (enc, dec) = Self::widths(d_feat, arch);
        let mut p = Self::zeros(d_feat, arch.m, arch.tau, b_m, &enc, &dec);
        for layer in p.encoder.iter_mut().chain(p.decoder.iter_mut()) {
            let std = (2.0 / layer.n_in() as f64).sqrt();
            for w in &mut layer.weight.data {
                let z: f64 = StandardNormal.sample(rng);
                *w = S::lit(std * z);
            }
        }
        p.project_to_budgets(arch.c_phi, arch.c_rho);
        p
    }

    pub fn budgets(&self, c_phi: f64, c_rho: f64) -> (f64, f64) {
        let m = self.m as f64;
        (c_phi * m.powf(1.0 / self.d_eff() as f64), c_rho * m.sqrt())
    }

    /// Rescales each stack's weights uniformly when its spectral product
    /// exceeds the budget. Returns whether anything changed.
    pub fn project_to_budgets(&mut self, c_phi: f64, c_rho: f64) -> bool {
        let (be, bd) = self.budgets(c_phi, c_rho);
        let a = rescale_stack(&mut self.encoder, be);
        let b = rescale_stack(&mut self.decoder, bd);
        a || b
    }

    pub fn spectral_report(&self, c_phi: f64, c_rho: f64) -> SpectralReport {
        let prod = |ls: &[Layer<S>]| ls.iter().map(|l| spectral_norm(&l.weight).as_f64()).product::<f64>();
        let s_encoder = prod(&self.encoder);
        let s_decoder = prod(&self.decoder);
        let (budget_encoder, budget_decoder) = self.budgets(c_phi, c_rho);
        let m = self.m as f64;
        let slack = 1.0 + 1e-9;
        SpectralReport {
            s_encoder,
            s_decoder,
            lip_phi_bound: 2.0 * m.sqrt() / self.tau.as_f64() * s_encoder,
            budget_encoder,
            budget_decoder,
            encoder_within: s_encoder <= budget_encoder * slack,
            decoder_within: s_decoder <= budget_decoder * slack,
        }
    }

    /// Raw encoder output `g_θ(u)`.
    pub fn encoder_raw(&self, u: &[S]) -> Vec<S> {
        mlp_output(&self.encoder, u)
    }

    /// `φ_θ(u) = Renorm_τ(g_θ(u))`.
    pub fn encode(&self, u: &[S]) -> Vec<S> {
        renorm(&self.encoder_raw(u), self.tau)
    }

    /// Clipped decoder output `clip(ρ_θ(z, x))`.
    pub fn decode(&self, z: &[S], query: &[S]) -> S {
        let mut input = z.to_vec();
        input.extend_from_slice(query);
        let h = mlp_output(&self.decoder, &input)[0];
        h.max(-self.b_m).min(self.b_m)
    }

    fn example(prompt: &Prompt<S>, i: usize) -> Vec<S> {
        let mut u = prompt.x(i).to_vec();
        u.push(prompt.ys[i]);
        u
    }

    /// `M_θ(P^k)`. The context features are summed in a pairwise tree over
    /// the examples sorted by value, so any permutation of the context gives
    /// a bit-identical result.
    pub fn forward(&self, prompt: &Prompt<S>, k: usize) -> S {
        assert!(k >= 1 && k <= prompt.p(), "context length {k} out of range");
        let mut us: Vec<Vec<S>> = (0..k).map(|i| Self::example(prompt, i)).collect();
        us.sort_by(|a, b| lex_cmp(a, b));
        let feats: Vec<Vec<S>> = us.iter().map(|u| self.encode(u)).collect();
        let mut z = pairwise_sum(feats);
        let kk = S::lit(k as f64);
        z.iter_mut().for_each(|v| *v /= kk);
        self.decode(&z, prompt.x(k))
    }

    /// `M_θ(P^k)` for `k = 1..=p` from one encoder pass and running sums.
    pub fn forward_all_k(&self, prompt: &Prompt<S>) -> Vec<S> {
        let p = prompt.p();
        let mut sum = vec![S::zero(); self.m];
        let mut out = Vec::with_capacity(p);
        for k in 1..=p {
            let phi = self.encode(&Self::example(prompt, k - 1));
            for (s, f) in sum.iter_mut().zip(&phi) {
                *s += *f;
            }
            let kk = S::lit(k as f64);
            let z: Vec<S> = sum.iter().map(|&v| v / kk).collect();
            out.push(self.decode(&z, prompt.x(k)));
        }
        out
    }

    /// Squared-error sum `Σ_k (y_{k+1} − M_θ(P^k))²` for one prompt and its
    /// gradient (unnormalized) accumulated into `grad`.
    fn prompt_loss_grad(&self, prompt: &Prompt<S>, grad: &mut Self, scale: S) -> S {
        let p = prompt.p();
        let m = self.m;
        let tau = self.tau;
        let mf = S::lit(m as f64);
        // Encoder pass.
        let mut enc_pre = Vec::with_capacity(p);
        let mut phis = Vec::with_capacity(p);
        let mut denoms = Vec::with_capacity(p);
        let mut inputs = Vec::with_capacity(p);
        for i in 0..p {
            let u = Self::example(prompt, i);
            let pre = mlp_forward(&self.encoder, &u);
            let s = pre.last().expect("encoder has layers");
            let denom = s.iter().map(|&v| relu(v)).sum::<S>() + tau;
            phis.push(s.iter().map(|&v| (relu(v) + tau / mf) / denom).collect::<Vec<S>>());
            denoms.push(denom);
            enc_pre.push(pre);
            inputs.push(u);
        }
        // Decoder per prefix.
        let mut loss = S::zero();
        let mut dz: Vec<Vec<S>> = Vec::with_capacity(p);
        let mut sum = vec![S::zero(); m];
        for k in 1..=p {
            for (s, f) in sum.iter_mut().zip(&phis[k - 1]) {
                *s += *f;
            }
            let kk = S::lit(k as f64);
            let mut input: Vec<S> = sum.iter().map(|&v| v / kk).collect();
            input.extend_from_slice(prompt.x(k));
            let pre = mlp_forward(&self.decoder, &input);
            let h = pre.last().expect("decoder has layers")[0];
            let pred = h.max(-self.b_m).min(self.b_m);
            let r = pred - prompt.target(k);
            loss += r * r;
            // Clip passes the gradient only strictly inside the interval.
            let dh = if h.abs() < self.b_m {
                scale * (r + r)
            } else {
                S::zero()
            };
            let d_in = mlp_backward(&self.decoder, &mut grad.decoder, &input, &pre, vec![dh]);
            dz.push(d_in[..m].iter().map(|&v| v / kk).collect());
        }
        // Example i's feature gradient is Σ_{k≥i} dz_k / k (suffix sums).
        let mut acc = vec![S::zero(); m];
        for i in (0..p).rev() {
            for (a, d) in acc.iter_mut().zip(&dz[i]) {
                *a += *d;
            }
            let phi = &phis[i];
            let denom = denoms[i];
            let gphi = dot(&acc, phi);
            let s = enc_pre[i].last().expect("encoder has layers");
            let ds: Vec<S> = acc
                .iter()
                .zip(s)
                .map(|(&g, &sv)| if sv > S::zero() { (g - gphi) / denom } else { S::zero() })
                .collect();
            mlp_backward(&self.encoder, &mut grad.encoder, &inputs[i], &enc_pre[i], ds);
        }
        loss
    }

    /// Training objective `(1/(p n)) Σ_j Σ_k (y_{j,k+1} − M_θ(P_j^k))²` and
    /// its gradient. Prompts are reduced in fixed chunks in index order.
    pub fn loss_and_grad(&self, batch: &[Prompt<S>]) -> Result<(S, Self)> {
        assert!(!batch.is_empty(), "empty batch");
        let p = batch[0].p();
        let norm = S::one() / S::lit((p * batch.len()) as f64);
        let partials: Vec<(S, Self)> = batch
            .par_chunks(CHUNK)
            .map(|chunk| {
                let mut g = self.zeros_like();
                let mut l = S::zero();
                for pr in chunk {
                    l += self.prompt_loss_grad(pr, &mut g, norm);
                }
                (l, g)
            })
            .collect();
        let mut loss = S::zero();
        let mut grad = self.zeros_like();
        for (l, g) in &partials {
            loss += *l;
            grad.axpy(S::one(), g);
        }
        let loss = loss * norm;
        if !loss.is_finite() {
            return Err(Error::NonFinite("training loss".into()));
        }
        Ok((loss, grad))
    }

    /// Objective value only.
    pub fn loss(&self, batch: &[Prompt<S>]) -> S {
        let p = batch[0].p();
        let partials: Vec<S> = batch
            .par_chunks(CHUNK)
            .map(|chunk| {
                let mut l = S::zero();
                for pr in chunk {
                    for (k, pred) in self.forward_all_k(pr).into_iter().enumerate() {
                        let r = pr.target(k + 1) - pred;
                        l += r * r;
                    }
                }
                l
            })
            .collect();
        partials.into_iter().fold(S::zero(), |a, b| a + b) / S::lit((p * batch.len()) as f64)
    }

    pub fn zeros_like(&self) -> Self {
        let z = |ls: &[Layer<S>]| ls.iter().map(|l| Layer::zeros(l.n_in(), l.n_out())).collect();
        Self {
            d_feat: self.d_feat,
            m: self.m,
            tau: self.tau,
            b_m: self.b_m,
            encoder: z(&self.encoder),
            decoder: z(&self.decoder),
        }
    }

    pub fn n_params(&self) -> usize {
        self.encoder
            .iter()
            .chain(&self.decoder)
            .map(|l| l.weight.data.len() + l.bias.len())
            .sum()
    }

    /// Parameters in a fixed order: per layer, weights then biases,
    /// encoder first.
    pub fn flatten(&self) -> Vec<S> {
        let mut v = Vec::with_capacity(self.n_params());
        for l in self.encoder.iter().chain(&self.decoder) {
            v.extend_from_slice(&l.weight.data);
            v.extend_from_slice(&l.bias);
        }
        v
    }

    pub fn set_flat(&mut self, v: &[S]) {
        assert_eq!(v.len(), self.n_params());
        let mut i = 0;
        for l in self.encoder.iter_mut().chain(self.decoder.iter_mut()) {
            let n = l.weight.data.len();
            l.weight.data.copy_from_slice(&v[i..i + n]);
            i += n;
            let n = l.bias.len();
            l.bias.copy_from_slice(&v[i..i + n]);
            i += n;
        }
    }

    /// `self += a · other`.
    pub fn axpy(&mut self, a: S, other: &Self) {
        for (l, o) in self
            .encoder
            .iter_mut()
            .chain(self.decoder.iter_mut())
            .zip(other.encoder.iter().chain(&other.decoder))
        {
            for (x, y) in l.weight.data.iter_mut().zip(&o.weight.data) {
                *x += a * *y;
            }
            for (x, y) in l.bias.iter_mut().zip(&o.bias) {
                *x += a * *y;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.flatten().iter().all(|v| v.is_finite())
    }

    pub fn cast<T: Scalar>(&self) -> TransformerParams<T> {
        let c = |ls: &[Layer<S>]| {
            ls.iter()
                .map(|l| Layer {
                    weight: Matrix {
                        rows: l.weight.rows,
                        cols: l.weight.cols,
                        data: l.weight.data.iter().map(|v| T::lit(v.as_f64())).collect(),
                    },
                    bias: l.bias.iter().map(|v| T::lit(v.as_f64())).collect(),
                })
                .collect()
        };
        TransformerParams {
            d_feat: self.d_feat,
            m: self.m,
            tau: T::lit(self.tau.as_f64()),
            b_m: T::lit(self.b_m.as_f64()),
            encoder: c(&self.encoder),
            decoder: c(&self.decoder),
        }
    }

    /// Structural checks: width chaining, `τ ∈ (0, 1]`, finite values.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Checkpoint(m));
        if self.encoder.is_empty() || self.decoder.is_empty() {
            return bad("encoder and decoder need at least one layer".into());
        }
        let tau = self.tau.as_f64();
        if !(tau > 0.0 && tau <= 1.0) {
            return bad(format!("tau = {tau} outside (0, 1]"));
        }
        let chain = |ls: &[Layer<S>], first: usize, last: usize, name: &str| -> Result<()> {
            let mut w = first;
            for (i, l) in ls.iter().enumerate() {
                if l.n_in() != w || l.bias.len() != l.n_out() || l.weight.data.len() != l.n_in() * l.n_out() {
                    return Err(Error::Checkpoint(format!("{name} layer {i} has inconsistent shape")));
                }
                w = l.n_out();
            }
            if w != last {
                return Err(Error::Checkpoint(format!("{name} output width {w}, expected {last}")));
            }
            Ok(())
        };
        chain(&self.encoder, self.d_eff(), self.m, "encoder")?;
        chain(&self.decoder, self.m + self.d_feat, 1, "decoder")?;
        if !self.is_finite() {
            return bad("non-finite parameter".into());
        }
        Ok(())
    }

    pub fn to_checkpoint(&self) -> Checkpoint<S> {
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            params: self.clone(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(&self.to_checkpoint())?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Checkpoint<S> = serde_json::from_str(text)?;
        if ck.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!("unknown format tag `{}`", ck.format)));
        }
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {}", ck.version)));
        }
        ck.params.validate()?;
        Ok(ck.params)
    }
}

fn rescale_stack<S: Scalar>(layers: &mut [Layer<S>], budget: f64) -> bool {
    let norms: Vec<f64> = layers.iter().map(|l| spectral_norm(&l.weight).as_f64()).collect();
    let prod: f64 = norms.iter().product();
    if prod <= budget || prod == 0.0 {
        return false;
    }
    let f = S::lit((budget / prod).powf(1.0 / layers.len() as f64));
    for l in layers.iter_mut() {
        l.weight.scale(f);
    }
    true
}

/// Versioned checkpoint container; shapes are explicit in each layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "S: Scalar")]
pub struct Checkpoint<S = f64> {
    pub format: String,
    pub version: u32,
    pub params: TransformerParams<S>,
}
