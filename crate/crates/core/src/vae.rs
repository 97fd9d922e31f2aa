//! Gaussian-MLP variational autoencoder trained on the evidence lower bound.
//!
//! Encoder: `h = tanh(W x + b)`, `μ_z = W_μ h + b_μ`, `log σ²_z = W_σ h + b_σ`;
//! the decoder mirrors it from `z = μ_z + σ_z ⊙ ε` to `μ_x`, `log σ²_x`.
//! Prior `N(0, I)`, diagonal Gaussian posterior and likelihood. Both
//! log-variance heads are clamped to `[-10, 10]`.

use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};
use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::neural::{self, Activation, ForwardCache, Gradients, Mlp, Optimizer, OptimizerState};
use crate::rng;

pub const LOGVAR_MIN: f64 = -10.0;
pub const LOGVAR_MAX: f64 = 10.0;
const LN_2PI: f64 = 1.837_877_066_409_345_3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

/// One point of the architecture grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VaeArch {
    pub latent_dim: usize,
    pub hidden_layers: usize,
    pub hidden_units: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
}

impl Default for VaeArch {
    fn default() -> Self {
        Self {
            latent_dim: 2,
            hidden_layers: 1,
            hidden_units: 30,
            learning_rate: 0.01,
            epochs: 50,
            batch_size: 128,
            optimizer: OptimizerKind::Adam,
        }
    }
}

impl VaeArch {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 || self.hidden_layers == 0 || self.hidden_units == 0 || self.batch_size == 0 {
            return Err(Error::Config(format!("architecture has a zero dimension: {self:?}")));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.learning_rate)));
        }
        Ok(())
    }

    fn optimizer(&self) -> Optimizer {
        match self.optimizer {
            OptimizerKind::Adam => Optimizer::adam(self.learning_rate),
            OptimizerKind::Sgd => Optimizer::sgd(self.learning_rate),
        }
    }

    /// The fourteen single-hidden-layer candidates: widths 5..70 at rate 0.01,
    /// then rates 0.007..0.013 at width 30. All use a 2-d latent space.
    pub fn grid() -> Vec<(String, VaeArch)> {
        let widths = [5, 10, 20, 30, 40, 50, 60, 70].map(|w| (w, 0.01));
        let rates = [0.007, 0.008, 0.009, 0.011, 0.012, 0.013].map(|r| (30, r));
        widths
            .into_iter()
            .chain(rates)
            .enumerate()
            .map(|(i, (units, lr))| {
                (format!("arch{}", i + 1), VaeArch { hidden_units: units, learning_rate: lr, ..VaeArch::default() })
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VaeModel {
    pub input_dim: usize,
    pub latent_dim: usize,
    pub logvar_min: f64,
    pub logvar_max: f64,
    pub encoder: Mlp,
    pub enc_mu: Mlp,
    pub enc_logvar: Mlp,
    pub decoder: Mlp,
    pub dec_mu: Mlp,
    pub dec_logvar: Mlp,
}

/// Per-row averages of the ELBO terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ElboTerms {
    pub recon_loglik: f64,
    pub kl: f64,
    pub negative_elbo: f64,
}

/// Gradients for the six sub-networks, in field order of [`VaeModel`].
#[derive(Debug, Clone)]
pub struct VaeGradients {
    pub nets: [Gradients; 6],
}

struct Pass {
    enc: ForwardCache,
    enc_mu: ForwardCache,
    enc_lv: ForwardCache,
    dec: ForwardCache,
    dec_mu: ForwardCache,
    dec_lv: ForwardCache,
    mu: Array2<f64>,
    logvar: Array2<f64>,
    logvar_mask: Array2<f64>,
    sigma_eps: Array2<f64>,
    x_mu: Array2<f64>,
    x_logvar: Array2<f64>,
    x_logvar_mask: Array2<f64>,
}

fn clamp_with_mask(raw: &Array2<f64>, lo: f64, hi: f64) -> (Array2<f64>, Array2<f64>) {
    let clamped = raw.mapv(|v| v.clamp(lo, hi));
    let mask = raw.mapv(|v| if v > lo && v < hi { 1.0 } else { 0.0 });
    (clamped, mask)
}

/// `z = μ + σ ⊙ ε`.
pub fn reparameterize(mu: ArrayView2<f64>, sigma: ArrayView2<f64>, eps: ArrayView2<f64>) -> Result<Array2<f64>> {
    if mu.dim() != sigma.dim() || mu.dim() != eps.dim() {
        return Err(Error::Shape(format!("μ {:?}, σ {:?}, ε {:?}", mu.dim(), sigma.dim(), eps.dim())));
    }
    Ok(&mu + &(&sigma * &eps))
}

/// `KL[N(μ, diag σ²) || N(0, I)] = ½ Σ (μ² + σ² - 1 - ln σ²)`.
pub fn kl_std_normal(mu: &[f64], sigma: &[f64]) -> f64 {
    mu.iter()
        .zip(sigma)
        .map(|(&m, &s)| {
            let var = s * s;
            0.5 * (m * m + var - 1.0 - var.ln())
        })
        .sum()
}

fn kl_from_logvar(mu: f64, logvar: f64) -> f64 {
    0.5 * (mu * mu + logvar.exp() - 1.0 - logvar)
}

impl VaeModel {
    pub fn new(input_dim: usize, arch: &VaeArch, seed: u64) -> Result<Self> {
        arch.validate()?;
        if input_dim == 0 {
            return Err(Error::Shape("input dimension is zero".into()));
        }
        let hidden = vec![arch.hidden_units; arch.hidden_layers];
        let h = arch.hidden_units;
        let trunk = |inputs: usize, seed: u64| -> Result<Mlp> {
            // Hidden layers only: drop the output layer `with_hidden` appends.
            let mut net = Mlp::with_hidden(inputs, &hidden, 1, Activation::Identity, seed)?;
            net.layers.pop();
            Ok(net)
        };
        let head = |outputs: usize, seed: u64| Mlp::with_hidden(h, &[], outputs, Activation::Identity, seed);
        Ok(Self {
            input_dim,
            latent_dim: arch.latent_dim,
            logvar_min: LOGVAR_MIN,
            logvar_max: LOGVAR_MAX,
            encoder: trunk(input_dim, rng::derive(seed, 1))?,
            enc_mu: head(arch.latent_dim, rng::derive(seed, 2))?,
            enc_logvar: head(arch.latent_dim, rng::derive(seed, 3))?,
            decoder: trunk(arch.latent_dim, rng::derive(seed, 4))?,
            dec_mu: head(input_dim, rng::derive(seed, 5))?,
            dec_logvar: head(input_dim, rng::derive(seed, 6))?,
        })
    }

    fn nets_mut(&mut self) -> [&mut Mlp; 6] {
        [
            &mut self.encoder,
            &mut self.enc_mu,
            &mut self.enc_logvar,
            &mut self.decoder,
            &mut self.dec_mu,
            &mut self.dec_logvar,
        ]
    }

    pub fn nets(&self) -> [&Mlp; 6] {
        [&self.encoder, &self.enc_mu, &self.enc_logvar, &self.decoder, &self.dec_mu, &self.dec_logvar]
    }

    fn check_input(&self, x: ArrayView2<f64>) -> Result<()> {
        if x.ncols() != self.input_dim {
            return Err(Error::Shape(format!("input has {} columns, model expects {}", x.ncols(), self.input_dim)));
        }
        Ok(())
    }

    /// Posterior mean and (clamped) log-variance.
    pub fn encode_logvar(&self, x: ArrayView2<f64>) -> Result<(Array2<f64>, Array2<f64>)> {
        self.check_input(x)?;
        let h = self.encoder.predict(x)?;
        let mu = self.enc_mu.predict(h.view())?;
        let logvar = self.enc_logvar.predict(h.view())?.mapv(|v| v.clamp(self.logvar_min, self.logvar_max));
        if !mu.iter().chain(logvar.iter()).all(|v| v.is_finite()) {
            return Err(Error::Numeric("non-finite encoder output".into()));
        }
        Ok((mu, logvar))
    }

    /// Posterior mean and standard deviation `σ = exp(½ log σ²)`.
    pub fn encode(&self, x: ArrayView2<f64>) -> Result<(Array2<f64>, Array2<f64>)> {
        let (mu, logvar) = self.encode_logvar(x)?;
        Ok((mu, logvar.mapv(|v| (0.5 * v).exp())))
    }

    /// Decoder mean `μ_x`, which is also the reconstruction.
    pub fn decode(&self, z: ArrayView2<f64>) -> Result<Array2<f64>> {
        let g = self.decoder.predict(z)?;
        self.dec_mu.predict(g.view())
    }

    fn pass(&self, x: ArrayView2<f64>, eps: ArrayView2<f64>) -> Result<Pass> {
        self.check_input(x)?;
        if eps.dim() != (x.nrows(), self.latent_dim) {
            return Err(Error::Shape(format!("ε has shape {:?}, expected ({}, {})", eps.dim(), x.nrows(), self.latent_dim)));
        }
        let enc = self.encoder.forward(x)?;
        let enc_mu = self.enc_mu.forward(enc.output().view())?;
        let enc_lv = self.enc_logvar.forward(enc.output().view())?;
        let mu = enc_mu.output().clone();
        let (logvar, logvar_mask) = clamp_with_mask(enc_lv.output(), self.logvar_min, self.logvar_max);
        let sigma = logvar.mapv(|v| (0.5 * v).exp());
        let sigma_eps = &sigma * &eps;
        let z = &mu + &sigma_eps;
        let dec = self.decoder.forward(z.view())?;
        let dec_mu = self.dec_mu.forward(dec.output().view())?;
        let dec_lv = self.dec_logvar.forward(dec.output().view())?;
        let x_mu = dec_mu.output().clone();
        let (x_logvar, x_logvar_mask) = clamp_with_mask(dec_lv.output(), self.logvar_min, self.logvar_max);
        Ok(Pass { enc, enc_mu, enc_lv, dec, dec_mu, dec_lv, mu, logvar, logvar_mask, sigma_eps, x_mu, x_logvar, x_logvar_mask })
    }

    fn terms(&self, x: ArrayView2<f64>, p: &Pass) -> Result<ElboTerms> {
        let n = x.nrows() as f64;
        let mut recon = 0.0;
        Zip::from(&x).and(&p.x_mu).and(&p.x_logvar).for_each(|&xv, &m, &lv| {
            let r = xv - m;
            recon += -0.5 * (LN_2PI + lv) - 0.5 * r * r * (-lv).exp();
        });
        let mut kl = 0.0;
        Zip::from(&p.mu).and(&p.logvar).for_each(|&m, &lv| kl += kl_from_logvar(m, lv));
        let t = ElboTerms { recon_loglik: recon / n, kl: kl / n, negative_elbo: (kl - recon) / n };
        if !t.negative_elbo.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite ELBO (reconstruction {}, KL {})",
                t.recon_loglik, t.kl
            )));
        }
        Ok(t)
    }

    /// Single-sample ELBO terms at the given noise `ε` (one row per input row).
    pub fn elbo(&self, x: ArrayView2<f64>, eps: ArrayView2<f64>) -> Result<ElboTerms> {
        let p = self.pass(x, eps)?;
        self.terms(x, &p)
    }

    /// ELBO terms and gradients of the mean negative ELBO at fixed `ε`.
    pub fn loss_and_gradients(&self, x: ArrayView2<f64>, eps: ArrayView2<f64>) -> Result<(ElboTerms, VaeGradients)> {
        let p = self.pass(x, eps)?;
        let terms = self.terms(x, &p)?;
        let inv_n = 1.0 / x.nrows() as f64;

        let mut d_xmu = Array2::zeros(p.x_mu.raw_dim());
        let mut d_xlv = Array2::zeros(p.x_logvar.raw_dim());
        Zip::from(&mut d_xmu)
            .and(&mut d_xlv)
            .and(&x)
            .and(&p.x_mu)
            .and(&p.x_logvar)
            .and(&p.x_logvar_mask)
            .for_each(|dm, dl, &xv, &m, &lv, &mask| {
                let r = xv - m;
                let prec = (-lv).exp();
                *dm = -r * prec * inv_n;
                *dl = (0.5 - 0.5 * r * r * prec) * mask * inv_n;
            });
        let g_dec_mu = self.dec_mu.backward(&p.dec_mu, d_xmu.view())?;
        let g_dec_lv = self.dec_logvar.backward(&p.dec_lv, d_xlv.view())?;
        let d_g = &g_dec_mu.d_input + &g_dec_lv.d_input;
        let g_dec = self.decoder.backward(&p.dec, d_g.view())?;
        let d_z = &g_dec.d_input;

        let mut d_mu = Array2::zeros(p.mu.raw_dim());
        let mut d_lv = Array2::zeros(p.logvar.raw_dim());
        Zip::from(&mut d_mu).and(d_z).and(&p.mu).for_each(|dm, &dz, &m| *dm = dz + m * inv_n);
        Zip::from(&mut d_lv)
            .and(d_z)
            .and(&p.logvar)
            .and(&p.logvar_mask)
            .and(&p.sigma_eps)
            .for_each(|dl, &dz, &lv, &mask, &se| {
                // z depends on log σ² through σ ε, with dz/d(log σ²) = ½ σ ε.
                *dl = (0.5 * dz * se + 0.5 * (lv.exp() - 1.0) * inv_n) * mask;
            });
        let g_enc_mu = self.enc_mu.backward(&p.enc_mu, d_mu.view())?;
        let g_enc_lv = self.enc_logvar.backward(&p.enc_lv, d_lv.view())?;
        let d_h = &g_enc_mu.d_input + &g_enc_lv.d_input;
        let g_enc = self.encoder.backward(&p.enc, d_h.view())?;
        Ok((terms, VaeGradients { nets: [g_enc, g_enc_mu, g_enc_lv, g_dec, g_dec_mu, g_dec_lv] }))
    }

    /// Mean of `n` reparameterized draws per row. The noise stream of each row
    /// is seeded from `seed` and the row's own values, so a customer gets the
    /// same expectation regardless of which batch it is scored in.
    pub fn latent_expectation(&self, x: ArrayView2<f64>, n: usize, seed: u64) -> Result<Array2<f64>> {
        if n == 0 {
            return Err(Error::Config("latent expectation needs at least one draw".into()));
        }
        let (mu, sigma) = self.encode(x)?;
        let d = self.latent_dim;
        let mut out = Array2::zeros((x.nrows(), d));
        for (i, row) in x.rows().into_iter().enumerate() {
            let mut r = rng::seeded(row_seed(seed, row.iter().copied()));
            let mut acc = vec![0.0; d];
            for _ in 0..n {
                for (k, a) in acc.iter_mut().enumerate() {
                    let e: f64 = StandardNormal.sample(&mut r);
                    *a += mu[[i, k]] + sigma[[i, k]] * e;
                }
            }
            for (k, a) in acc.into_iter().enumerate() {
                out[[i, k]] = a / n as f64;
            }
        }
        Ok(out)
    }
}

fn row_seed(seed: u64, values: impl Iterator<Item = f64>) -> u64 {
    values.fold(rng::derive(seed, 0x5EED), |h, v| rng::derive(h, v.to_bits()))
}

/// Per-epoch record of a training run. Cluster-quality columns are `None`
/// when no monitor ran or the latent space held a single cluster.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainTrace {
    pub neg_elbo: Vec<f64>,
    pub ch: Vec<Option<f64>>,
    pub bcdr: Vec<Option<f64>>,
}

impl TrainTrace {
    pub fn epochs(&self) -> usize {
        self.neg_elbo.len()
    }

    pub fn to_tsv(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |x| format!("{x}"));
        let mut out = String::from("epoch\tneg_elbo\tch\tbcdr\n");
        for e in 0..self.epochs() {
            out.push_str(&format!("{}\t{}\t{}\t{}\n", e + 1, self.neg_elbo[e], fmt(self.ch[e]), fmt(self.bcdr[e])));
        }
        out
    }
}

/// Latent-space quality observed after an epoch: `(CH, BCDR)` if defined.
pub type Monitor<'a> = dyn FnMut(&VaeModel, usize) -> Result<Option<(f64, f64)>> + 'a;

/// Minibatch AEVB with one noise draw per row per step.
pub fn train(
    data: ArrayView2<f64>,
    arch: &VaeArch,
    seed: u64,
    mut monitor: Option<&mut Monitor<'_>>,
) -> Result<(VaeModel, TrainTrace)> {
    arch.validate()?;
    if data.nrows() == 0 {
        return Err(Error::Config("no training rows".into()));
    }
    if !data.iter().all(|v| v.is_finite()) {
        return Err(Error::Numeric("training data contains non-finite values".into()));
    }
    let mut model = VaeModel::new(data.ncols(), arch, seed)?;
    let opt = arch.optimizer();
    let mut states = model.nets().map(|net| OptimizerState::new(opt, net)).into_iter().collect::<Result<Vec<_>>>()?;
    let mut r = rng::seeded(rng::derive(seed, 7));
    let mut order: Vec<usize> = (0..data.nrows()).collect();
    let mut trace = TrainTrace::default();

    for epoch in 1..=arch.epochs {
        order.shuffle(&mut r);
        let mut total = 0.0;
        for chunk in order.chunks(arch.batch_size) {
            let xb = data.select(Axis(0), chunk);
            let eps = Array2::from_shape_simple_fn((chunk.len(), arch.latent_dim), || StandardNormal.sample(&mut r));
            let (terms, grads) = model
                .loss_and_gradients(xb.view(), eps.view())
                .map_err(|e| Error::Training { epoch, message: e.to_string() })?;
            total += terms.negative_elbo * chunk.len() as f64;
            for ((net, g), st) in model.nets_mut().into_iter().zip(&grads.nets).zip(states.iter_mut()) {
                neural::step(net, g, st).map_err(|e| Error::Training { epoch, message: e.to_string() })?;
            }
        }
        let mean = total / data.nrows() as f64;
        if !mean.is_finite() {
            return Err(Error::Training { epoch, message: "negative ELBO is not finite".into() });
        }
        trace.neg_elbo.push(mean);
        let quality = match monitor.as_mut() {
            Some(m) => m(&model, epoch)?,
            None => None,
        };
        trace.ch.push(quality.map(|q| q.0));
        trace.bcdr.push(quality.map(|q| q.1));
    }
    Ok((model, trace))
}

/// Scores of one architecture candidate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchScore {
    pub name: String,
    pub arch: VaeArch,
    pub final_neg_elbo: f64,
    pub ch: Option<f64>,
    pub bcdr: Option<f64>,
    pub k: usize,
    pub pareto: bool,
}

/// Mark the candidates not dominated on (low negative ELBO, high CH, high BCDR).
/// Missing cluster scores count as worst.
pub fn mark_pareto(scores: &mut [ArchScore]) {
    let key = |s: &ArchScore| (-s.final_neg_elbo, s.ch.unwrap_or(f64::NEG_INFINITY), s.bcdr.unwrap_or(f64::NEG_INFINITY));
    let keys: Vec<_> = scores.iter().map(key).collect();
    for i in 0..scores.len() {
        let a = keys[i];
        scores[i].pareto = !keys.iter().enumerate().any(|(j, b)| {
            j != i && b.0 >= a.0 && b.1 >= a.1 && b.2 >= a.2 && (b.0 > a.0 || b.1 > a.1 || b.2 > a.2)
        });
    }
}

/// Pick one Pareto candidate: highest BCDR, then CH, then lowest negative ELBO.
pub fn preferred(scores: &[ArchScore]) -> Option<&ArchScore> {
    scores.iter().filter(|s| s.pareto).max_by(|a, b| {
        let ka = (a.bcdr.unwrap_or(-1.0), a.ch.unwrap_or(-1.0), -a.final_neg_elbo);
        let kb = (b.bcdr.unwrap_or(-1.0), b.ch.unwrap_or(-1.0), -b.final_neg_elbo);
        ka.partial_cmp(&kb).unwrap_or(std::cmp::Ordering::Equal)
    })
}

/// Column means of a latent matrix (handy for reports).
pub fn latent_means(z: ArrayView2<f64>) -> Array1<f64> {
    z.mean_axis(Axis(0)).unwrap_or_else(|| Array1::zeros(z.ncols()))
}

/// First `n` rows, for quick monitoring subsets.
pub fn head(x: ArrayView2<f64>, n: usize) -> Array2<f64> {
    x.slice(s![..n.min(x.nrows()), ..]).to_owned()
}
