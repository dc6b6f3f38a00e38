//! Small denoising network with hand-written backpropagation.
//!
//! ```text
//! x ──conv3x3──(+pos +time)──silu── h1 ─────────────────────────────┐
//!                                    └─avgpool2─ d ─(+cross-attn)─ d2 ─conv3x3─silu─ m ─up2─(+h1)─conv3x3─ x0_hat
//! ```
//!
//! The network predicts the clean image; the estimator turns that into a
//! score. All tensors are row-major with channels innermost.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub hidden: usize,
    pub embed: usize,
    pub key_dim: usize,
    pub time_features: usize,
    /// Caption vocabulary size; one extra embedding row holds the null token.
    pub vocab_size: usize,
}

impl NetworkConfig {
    pub fn for_image(height: usize, width: usize, channels: usize, vocab_size: usize) -> Self {
        Self {
            height,
            width,
            channels,
            hidden: 16,
            embed: 16,
            key_dim: 16,
            time_features: 8,
            vocab_size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.height.is_multiple_of(2) || !self.width.is_multiple_of(2) || self.height == 0 || self.width == 0 {
            return Err(Error::Config(format!(
                "network resolution {}x{} must be even and non-zero",
                self.height, self.width
            )));
        }
        if !self.time_features.is_multiple_of(2) || self.time_features == 0 {
            return Err(Error::Config("time_features must be even and non-zero".into()));
        }
        if [self.channels, self.hidden, self.embed, self.key_dim].contains(&0) {
            return Err(Error::Config("network widths must be non-zero".into()));
        }
        Ok(())
    }

    pub fn null_token(&self) -> usize {
        self.vocab_size
    }

    fn low(&self) -> (usize, usize) {
        (self.height / 2, self.width / 2)
    }
}

/// Parameters, also used as the gradient container.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyNetwork {
    pub config: NetworkConfig,
    pub time_w: Vec<f64>,
    pub time_b: Vec<f64>,
    pub conv1_w: Vec<f64>,
    pub conv1_b: Vec<f64>,
    pub pos: Vec<f64>,
    pub embed: Vec<f64>,
    pub wq: Vec<f64>,
    pub wk: Vec<f64>,
    pub wv: Vec<f64>,
    pub conv2_w: Vec<f64>,
    pub conv2_b: Vec<f64>,
    pub conv3_w: Vec<f64>,
    pub conv3_b: Vec<f64>,
}

pub type NetworkGradients = ToyNetwork;

pub(crate) const TENSOR_NAMES: [&str; 13] = [
    "time.weight",
    "time.bias",
    "conv1.weight",
    "conv1.bias",
    "pos",
    "embed",
    "attn.q",
    "attn.k",
    "attn.v",
    "conv2.weight",
    "conv2.bias",
    "conv3.weight",
    "conv3.bias",
];

#[inline]
fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

#[inline]
fn silu(z: f64) -> f64 {
    z * sigmoid(z)
}

#[inline]
fn silu_grad(z: f64) -> f64 {
    let s = sigmoid(z);
    s * (1.0 + z * (1.0 - s))
}

/// Zero-padded 3×3 convolution on an `h × w × cin` map.
fn conv3x3(input: &[f64], h: usize, w: usize, cin: usize, weight: &[f64], bias: &[f64], cout: usize) -> Vec<f64> {
    let mut out = vec![0.0; h * w * cout];
    for j in 0..h {
        for k in 0..w {
            let o = &mut out[(j * w + k) * cout..(j * w + k + 1) * cout];
            o.copy_from_slice(bias);
            for dj in 0..3 {
                let jj = j as isize + dj as isize - 1;
                if jj < 0 || jj >= h as isize {
                    continue;
                }
                for dk in 0..3 {
                    let kk = k as isize + dk as isize - 1;
                    if kk < 0 || kk >= w as isize {
                        continue;
                    }
                    let src = &input[(jj as usize * w + kk as usize) * cin..][..cin];
                    for (c, ov) in o.iter_mut().enumerate() {
                        let wrow = &weight[c * cin * 9..];
                        let mut acc = 0.0;
                        for (ci, sv) in src.iter().enumerate() {
                            acc += wrow[(ci * 3 + dj) * 3 + dk] * sv;
                        }
                        *ov += acc;
                    }
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn conv3x3_backward(
    input: &[f64],
    h: usize,
    w: usize,
    cin: usize,
    weight: &[f64],
    cout: usize,
    dout: &[f64],
    dweight: &mut [f64],
    dbias: &mut [f64],
    mut dinput: Option<&mut [f64]>,
) {
    for j in 0..h {
        for k in 0..w {
            let g = &dout[(j * w + k) * cout..(j * w + k + 1) * cout];
            for (db, gv) in dbias.iter_mut().zip(g) {
                *db += gv;
            }
            for dj in 0..3 {
                let jj = j as isize + dj as isize - 1;
                if jj < 0 || jj >= h as isize {
                    continue;
                }
                for dk in 0..3 {
                    let kk = k as isize + dk as isize - 1;
                    if kk < 0 || kk >= w as isize {
                        continue;
                    }
                    let base = (jj as usize * w + kk as usize) * cin;
                    for (c, gv) in g.iter().enumerate() {
                        if *gv == 0.0 {
                            continue;
                        }
                        for ci in 0..cin {
                            let wi = c * cin * 9 + (ci * 3 + dj) * 3 + dk;
                            dweight[wi] += gv * input[base + ci];
                            if let Some(di) = dinput.as_deref_mut() {
                                di[base + ci] += gv * weight[wi];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn randn_vec<R: Rng + ?Sized>(n: usize, std: f64, rng: &mut R) -> Vec<f64> {
    (0..n).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Intermediate activations kept for the backward pass.
#[derive(Debug, Clone)]
pub(crate) struct Cache {
    phi: Vec<f64>,
    temb_pre: Vec<f64>,
    temb: Vec<f64>,
    a1: Vec<f64>,
    d: Vec<f64>,
    q: Vec<f64>,
    keys: Vec<f64>,
    vals: Vec<f64>,
    pub(crate) attn: Vec<f64>,
    d2: Vec<f64>,
    z2: Vec<f64>,
    u: Vec<f64>,
    pub(crate) out: Vec<f64>,
}

/// One training example: noisy input, normalized time, caption rows, target.
#[derive(Debug, Clone)]
pub struct Example {
    pub x_t: Vec<f64>,
    pub t_frac: f64,
    pub tokens: Vec<usize>,
    pub target: Vec<f64>,
}

impl ToyNetwork {
    pub fn zeros(config: NetworkConfig) -> Self {
        let c = config.hidden;
        let (h, w) = (config.height, config.width);
        Self {
            config,
            time_w: vec![0.0; c * config.time_features],
            time_b: vec![0.0; c],
            conv1_w: vec![0.0; c * config.channels * 9],
            conv1_b: vec![0.0; c],
            pos: vec![0.0; h * w * c],
            embed: vec![0.0; (config.vocab_size + 1) * config.embed],
            wq: vec![0.0; config.key_dim * c],
            wk: vec![0.0; config.key_dim * config.embed],
            wv: vec![0.0; c * config.embed],
            conv2_w: vec![0.0; c * c * 9],
            conv2_b: vec![0.0; c],
            conv3_w: vec![0.0; config.channels * c * 9],
            conv3_b: vec![0.0; config.channels],
        }
    }

    pub fn init<R: Rng + ?Sized>(config: NetworkConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut net = Self::zeros(config);
        let c = config.hidden;
        net.time_w = randn_vec(net.time_w.len(), (1.0 / config.time_features as f64).sqrt(), rng);
        net.conv1_w = randn_vec(net.conv1_w.len(), (2.0 / (9 * config.channels) as f64).sqrt(), rng);
        net.pos = randn_vec(net.pos.len(), 0.1, rng);
        net.embed = randn_vec(net.embed.len(), 1.0, rng);
        net.wq = randn_vec(net.wq.len(), (1.0 / c as f64).sqrt(), rng);
        net.wk = randn_vec(net.wk.len(), (1.0 / config.embed as f64).sqrt(), rng);
        net.wv = randn_vec(net.wv.len(), (1.0 / config.embed as f64).sqrt(), rng);
        net.conv2_w = randn_vec(net.conv2_w.len(), (2.0 / (9 * c) as f64).sqrt(), rng);
        net.conv3_w = randn_vec(net.conv3_w.len(), (1.0 / (9 * c) as f64).sqrt(), rng);
        Ok(net)
    }

    pub fn tensors(&self) -> [&Vec<f64>; 13] {
        [
            &self.time_w,
            &self.time_b,
            &self.conv1_w,
            &self.conv1_b,
            &self.pos,
            &self.embed,
            &self.wq,
            &self.wk,
            &self.wv,
            &self.conv2_w,
            &self.conv2_b,
            &self.conv3_w,
            &self.conv3_b,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Vec<f64>; 13] {
        [
            &mut self.time_w,
            &mut self.time_b,
            &mut self.conv1_w,
            &mut self.conv1_b,
            &mut self.pos,
            &mut self.embed,
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.conv2_w,
            &mut self.conv2_b,
            &mut self.conv3_w,
            &mut self.conv3_b,
        ]
    }

    pub fn tensor_names() -> &'static [&'static str] {
        &TENSOR_NAMES
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    fn time_features(&self, t_frac: f64) -> Vec<f64> {
        let half = self.config.time_features / 2;
        let mut phi = Vec::with_capacity(2 * half);
        for i in 0..half {
            let f = std::f64::consts::PI * (1u64 << i) as f64 * t_frac;
            phi.push(f.sin());
            phi.push(f.cos());
        }
        phi
    }

    pub(crate) fn forward(&self, x: &[f64], t_frac: f64, tokens: &[usize]) -> Cache {
        let cfg = &self.config;
        let (h, w, c) = (cfg.height, cfg.width, cfg.hidden);
        let (lh, lw) = cfg.low();
        let p = lh * lw;
        let n = tokens.len();
        let (e, dk) = (cfg.embed, cfg.key_dim);

        let phi = self.time_features(t_frac);
        let temb_pre: Vec<f64> = (0..c)
            .map(|ci| {
                self.time_b[ci]
                    + self.time_w[ci * phi.len()..(ci + 1) * phi.len()]
                        .iter()
                        .zip(&phi)
                        .map(|(a, b)| a * b)
                        .sum::<f64>()
            })
            .collect();
        let temb: Vec<f64> = temb_pre.iter().map(|&z| silu(z)).collect();

        let mut a1 = conv3x3(x, h, w, cfg.channels, &self.conv1_w, &self.conv1_b, c);
        for (i, v) in a1.iter_mut().enumerate() {
            *v += self.pos[i] + temb[i % c];
        }
        let h1: Vec<f64> = a1.iter().map(|&z| silu(z)).collect();

        let mut d = vec![0.0; p * c];
        for j in 0..h {
            for k in 0..w {
                let dst = ((j / 2) * lw + k / 2) * c;
                for ci in 0..c {
                    d[dst + ci] += 0.25 * h1[(j * w + k) * c + ci];
                }
            }
        }

        let matvec = |m: &[f64], rows: usize, cols: usize, v: &[f64]| -> Vec<f64> {
            (0..rows)
                .map(|r| m[r * cols..(r + 1) * cols].iter().zip(v).map(|(a, b)| a * b).sum())
                .collect::<Vec<f64>>()
        };
        let mut keys = Vec::with_capacity(n * dk);
        let mut vals = Vec::with_capacity(n * c);
        for &tok in tokens {
            let emb = &self.embed[tok * e..(tok + 1) * e];
            keys.extend(matvec(&self.wk, dk, e, emb));
            vals.extend(matvec(&self.wv, c, e, emb));
        }
        let scale = 1.0 / (dk as f64).sqrt();
        let mut q = Vec::with_capacity(p * dk);
        let mut attn = vec![0.0; p * n];
        let mut d2 = d.clone();
        for pi in 0..p {
            let qp = matvec(&self.wq, dk, c, &d[pi * c..(pi + 1) * c]);
            let logits: Vec<f64> = (0..n)
                .map(|ni| scale * qp.iter().zip(&keys[ni * dk..(ni + 1) * dk]).map(|(a, b)| a * b).sum::<f64>())
                .collect();
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            for ni in 0..n {
                let a = exps[ni] / z;
                attn[pi * n + ni] = a;
                for ci in 0..c {
                    d2[pi * c + ci] += a * vals[ni * c + ci];
                }
            }
            q.extend(qp);
        }

        let z2 = conv3x3(&d2, lh, lw, c, &self.conv2_w, &self.conv2_b, c);
        let m: Vec<f64> = z2.iter().map(|&z| silu(z)).collect();
        let mut u = h1;
        for j in 0..h {
            for k in 0..w {
                let src = ((j / 2) * lw + k / 2) * c;
                for ci in 0..c {
                    u[(j * w + k) * c + ci] += m[src + ci];
                }
            }
        }
        let out = conv3x3(&u, h, w, c, &self.conv3_w, &self.conv3_b, cfg.channels);
        Cache {
            phi,
            temb_pre,
            temb,
            a1,
            d,
            q,
            keys,
            vals,
            attn,
            d2,
            z2,
            u,
            out,
        }
    }

    /// Accumulates parameter gradients of `<dout, out>` into `grads`.
    pub(crate) fn backward(&self, x: &[f64], tokens: &[usize], cache: &Cache, dout: &[f64], grads: &mut ToyNetwork) {
        let cfg = &self.config;
        let (h, w, c) = (cfg.height, cfg.width, cfg.hidden);
        let (lh, lw) = cfg.low();
        let p = lh * lw;
        let n = tokens.len();
        let (e, dk) = (cfg.embed, cfg.key_dim);

        let mut du = vec![0.0; h * w * c];
        conv3x3_backward(
            &cache.u,
            h,
            w,
            c,
            &self.conv3_w,
            cfg.channels,
            dout,
            &mut grads.conv3_w,
            &mut grads.conv3_b,
            Some(&mut du),
        );

        let mut dh1 = du.clone();
        let mut dz2 = vec![0.0; p * c];
        for j in 0..h {
            for k in 0..w {
                let dst = ((j / 2) * lw + k / 2) * c;
                for ci in 0..c {
                    dz2[dst + ci] += du[(j * w + k) * c + ci];
                }
            }
        }
        for (g, z) in dz2.iter_mut().zip(&cache.z2) {
            *g *= silu_grad(*z);
        }

        let mut dd2 = vec![0.0; p * c];
        conv3x3_backward(
            &cache.d2,
            lh,
            lw,
            c,
            &self.conv2_w,
            c,
            &dz2,
            &mut grads.conv2_w,
            &mut grads.conv2_b,
            Some(&mut dd2),
        );

        // residual cross-attention
        let mut dd = dd2.clone();
        let mut dkeys = vec![0.0; n * dk];
        let mut dvals = vec![0.0; n * c];
        let scale = 1.0 / (dk as f64).sqrt();
        for pi in 0..p {
            let g = &dd2[pi * c..(pi + 1) * c];
            let a = &cache.attn[pi * n..(pi + 1) * n];
            let mut da = vec![0.0; n];
            for ni in 0..n {
                let v = &cache.vals[ni * c..(ni + 1) * c];
                da[ni] = g.iter().zip(v).map(|(x, y)| x * y).sum();
                for ci in 0..c {
                    dvals[ni * c + ci] += a[ni] * g[ci];
                }
            }
            let dot: f64 = a.iter().zip(&da).map(|(x, y)| x * y).sum();
            let qp = &cache.q[pi * dk..(pi + 1) * dk];
            let mut dq = vec![0.0; dk];
            for ni in 0..n {
                let dl = a[ni] * (da[ni] - dot) * scale;
                let kn = &cache.keys[ni * dk..(ni + 1) * dk];
                for r in 0..dk {
                    dq[r] += dl * kn[r];
                    dkeys[ni * dk + r] += dl * qp[r];
                }
            }
            let dpix = &cache.d[pi * c..(pi + 1) * c];
            for r in 0..dk {
                for ci in 0..c {
                    grads.wq[r * c + ci] += dq[r] * dpix[ci];
                    dd[pi * c + ci] += self.wq[r * c + ci] * dq[r];
                }
            }
        }
        for (ni, &tok) in tokens.iter().enumerate() {
            let emb = &self.embed[tok * e..(tok + 1) * e];
            for r in 0..dk {
                let g = dkeys[ni * dk + r];
                for ei in 0..e {
                    grads.wk[r * e + ei] += g * emb[ei];
                    grads.embed[tok * e + ei] += g * self.wk[r * e + ei];
                }
            }
            for ci in 0..c {
                let g = dvals[ni * c + ci];
                for ei in 0..e {
                    grads.wv[ci * e + ei] += g * emb[ei];
                    grads.embed[tok * e + ei] += g * self.wv[ci * e + ei];
                }
            }
        }

        for j in 0..h {
            for k in 0..w {
                let src = ((j / 2) * lw + k / 2) * c;
                for ci in 0..c {
                    dh1[(j * w + k) * c + ci] += 0.25 * dd[src + ci];
                }
            }
        }
        let mut da1 = dh1;
        for (g, z) in da1.iter_mut().zip(&cache.a1) {
            *g *= silu_grad(*z);
        }
        let mut dtemb = vec![0.0; c];
        for (i, g) in da1.iter().enumerate() {
            grads.pos[i] += g;
            dtemb[i % c] += g;
        }
        conv3x3_backward(
            x,
            h,
            w,
            cfg.channels,
            &self.conv1_w,
            c,
            &da1,
            &mut grads.conv1_w,
            &mut grads.conv1_b,
            None,
        );
        let f = cache.phi.len();
        for ci in 0..c {
            let g = dtemb[ci] * silu_grad(cache.temb_pre[ci]);
            grads.time_b[ci] += g;
            for fi in 0..f {
                grads.time_w[ci * f + fi] += g * cache.phi[fi];
            }
        }
        debug_assert_eq!(cache.temb.len(), c);
    }

    /// Denoised prediction for one input.
    pub fn predict(&self, x: &[f64], t_frac: f64, tokens: &[usize]) -> Vec<f64> {
        self.forward(x, t_frac, tokens).out
    }

    /// Prediction together with the `positions × tokens` attention weights.
    pub fn predict_with_attention(&self, x: &[f64], t_frac: f64, tokens: &[usize]) -> (Vec<f64>, Vec<f64>) {
        let c = self.forward(x, t_frac, tokens);
        (c.out, c.attn)
    }

    /// Mean squared error over a batch and its parameter gradients.
    pub fn loss_and_grad(&self, batch: &[Example]) -> (f64, ToyNetwork) {
        let mut grads = ToyNetwork::zeros(self.config);
        let mut loss = 0.0;
        let denom = batch.len() as f64;
        for ex in batch {
            let cache = self.forward(&ex.x_t, ex.t_frac, &ex.tokens);
            let nel = cache.out.len() as f64;
            let mut dout = Vec::with_capacity(cache.out.len());
            for (o, y) in cache.out.iter().zip(&ex.target) {
                let r = o - y;
                loss += r * r / (nel * denom);
                dout.push(2.0 * r / (nel * denom));
            }
            self.backward(&ex.x_t, &ex.tokens, &cache, &dout, &mut grads);
        }
        (loss, grads)
    }

    pub fn loss(&self, batch: &[Example]) -> f64 {
        let denom = batch.len() as f64;
        batch
            .iter()
            .map(|ex| {
                let out = self.predict(&ex.x_t, ex.t_frac, &ex.tokens);
                let nel = out.len() as f64;
                out.iter().zip(&ex.target).map(|(o, y)| (o - y) * (o - y)).sum::<f64>() / (nel * denom)
            })
            .sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn tiny() -> NetworkConfig {
        NetworkConfig {
            height: 4,
            width: 4,
            channels: 3,
            hidden: 3,
            embed: 3,
            key_dim: 2,
            time_features: 4,
            vocab_size: 3,
        }
    }

    #[test]
    fn conv_identity_kernel() {
        // centre tap 1 copies the input
        let (h, w) = (3, 2);
        let input: Vec<f64> = (0..h * w).map(|v| v as f64).collect();
        let mut weight = vec![0.0; 9];
        weight[4] = 1.0;
        assert_eq!(conv3x3(&input, h, w, 1, &weight, &[0.0], 1), input);
    }

    #[test]
    fn attention_rows_are_softmax() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let net = ToyNetwork::init(tiny(), &mut rng).unwrap();
        let x = randn_vec(48, 1.0, &mut rng);
        let (_, attn) = net.predict_with_attention(&x, 0.5, &[0, 2]);
        assert_eq!(attn.len(), 4 * 2);
        for row in attn.chunks(2) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_odd_resolution() {
        let mut cfg = tiny();
        cfg.height = 5;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        assert!(ToyNetwork::init(cfg, &mut rng).is_err());
    }

    #[test]
    fn default_size_is_desk_scale() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let net = ToyNetwork::init(NetworkConfig::for_image(12, 12, 3, 15), &mut rng).unwrap();
        assert!(net.parameter_count() <= 50_000);
    }
}
