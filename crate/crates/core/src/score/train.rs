use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{forward_diffuse, Schedule};
use crate::error::{Error, Result};
use crate::grid::{Grid, Shape};
use crate::score::analytic::TemplateDistribution;
use crate::score::attention::AttentionMap;
use crate::score::network::{Example, NetworkConfig, ToyNetwork};
use crate::score::tokens::{TokenSequence, Vocabulary};
use crate::score::ScoreEstimator;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Probability of replacing the caption with the null token.
    pub cond_dropout: f64,
    pub validation_size: usize,
    /// Training fails when the final validation loss exceeds this.
    pub max_validation_loss: Option<f64>,
    pub hidden: usize,
    pub embed: usize,
    pub key_dim: usize,
    pub time_features: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            learning_rate: 2e-3,
            batch_size: 16,
            cond_dropout: 0.15,
            validation_size: 64,
            max_validation_loss: None,
            hidden: 16,
            embed: 16,
            key_dim: 16,
            time_features: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub losses: Vec<f64>,
    pub initial_validation_loss: f64,
    pub final_validation_loss: f64,
}

/// Trained network wrapped as a score estimator. The network predicts the
/// clean image; the score follows from
/// `s = (sqrt(ab_t) x0_hat - x) / (1 - ab_t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyScoreNet {
    pub(crate) net: ToyNetwork,
    pub(crate) vocab: Vocabulary,
}

impl ToyScoreNet {
    pub fn new(net: ToyNetwork, vocab: Vocabulary) -> Result<Self> {
        if net.config.vocab_size != vocab.len() {
            return Err(Error::Config(format!(
                "network vocabulary size {} differs from {}",
                net.config.vocab_size,
                vocab.len()
            )));
        }
        Ok(Self { net, vocab })
    }

    pub fn network(&self) -> &ToyNetwork {
        &self.net
    }

    fn token_rows(&self, cond: &TokenSequence) -> Result<Vec<usize>> {
        if cond.is_null() {
            return Ok(vec![self.net.config.null_token()]);
        }
        cond.tokens()
            .iter()
            .map(|&t| {
                if (t as usize) < self.vocab.len() {
                    Ok(t as usize)
                } else {
                    Err(Error::Condition(format!("token {t} outside the vocabulary")))
                }
            })
            .collect()
    }

    fn check(&self, x: &Grid, t: usize, sched: &Schedule) -> Result<()> {
        if x.shape() != self.shape() {
            return Err(Error::dims(self.shape(), x.shape()));
        }
        if t < 1 || t > sched.steps() {
            return Err(Error::Schedule(format!("t = {t} outside [1, {}]", sched.steps())));
        }
        Ok(())
    }
}

impl ScoreEstimator for ToyScoreNet {
    fn shape(&self) -> Shape {
        let c = &self.net.config;
        Shape::new(c.height, c.width, c.channels)
    }

    fn vocabulary(&self) -> &Vocabulary {
        &self.vocab
    }

    fn score(&self, x: &Grid, t: usize, cond: &TokenSequence, sched: &Schedule) -> Result<Grid> {
        self.check(x, t, sched)?;
        let rows = self.token_rows(cond)?;
        let x0 = self.net.predict(x.data(), t as f64 / sched.steps() as f64, &rows);
        let ab = sched.alpha_bar(t);
        let (s, var) = (ab.sqrt(), 1.0 - ab);
        let data = x0.iter().zip(x.data()).map(|(m, xv)| (s * m - xv) / var).collect();
        Grid::from_vec(x.shape(), data)
    }

    fn attention_capable(&self) -> bool {
        true
    }

    fn attention_blocks(
        &self,
        x: &Grid,
        t: usize,
        cond: &TokenSequence,
        sched: &Schedule,
    ) -> Result<Vec<AttentionMap>> {
        self.check(x, t, sched)?;
        let rows = self.token_rows(cond)?;
        let (_, attn) = self
            .net
            .predict_with_attention(x.data(), t as f64 / sched.steps() as f64, &rows);
        // positions × tokens → tokens × positions
        let n = rows.len();
        let p = attn.len() / n;
        let mut values = vec![0.0; n * p];
        for pi in 0..p {
            for ni in 0..n {
                values[ni * p + pi] = attn[pi * n + ni];
            }
        }
        let c = &self.net.config;
        Ok(vec![AttentionMap::from_rows(n, c.height / 2, c.width / 2, values)?])
    }
}

/// Random non-empty sub-caption of a template's tags, in tag order.
fn sample_caption<R: Rng + ?Sized>(tags: &[u32], dropout: f64, null: usize, rng: &mut R) -> Vec<usize> {
    if tags.is_empty() || rng.random::<f64>() < dropout {
        return vec![null];
    }
    loop {
        let pick: Vec<usize> = tags
            .iter()
            .filter(|_| rng.random::<bool>())
            .map(|&t| t as usize)
            .collect();
        if !pick.is_empty() {
            return pick;
        }
    }
}

fn draw_examples<R: Rng + ?Sized>(
    dist: &TemplateDistribution,
    sched: &Schedule,
    n: usize,
    dropout: f64,
    null: usize,
    rng: &mut R,
) -> Result<Vec<Example>> {
    (0..n)
        .map(|_| {
            let m = dist.sample_index(rng);
            let x0 = &dist.templates()[m];
            let t = rng.random_range(1..=sched.steps());
            let eps = Grid::randn(x0.shape(), rng);
            let x_t = forward_diffuse(x0, t, &eps, sched)?;
            Ok(Example {
                x_t: x_t.into_vec(),
                t_frac: t as f64 / sched.steps() as f64,
                tokens: sample_caption(dist.tags(m), dropout, null, rng),
                target: x0.data().to_vec(),
            })
        })
        .collect()
}

struct Adam {
    m: ToyNetwork,
    v: ToyNetwork,
    step: i32,
    lr: f64,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(config: NetworkConfig, lr: f64) -> Self {
        Self {
            m: ToyNetwork::zeros(config),
            v: ToyNetwork::zeros(config),
            step: 0,
            lr,
        }
    }

    fn update(&mut self, params: &mut ToyNetwork, grads: &ToyNetwork) {
        self.step += 1;
        let c1 = 1.0 - Self::B1.powi(self.step);
        let c2 = 1.0 - Self::B2.powi(self.step);
        for (((p, g), m), v) in params
            .tensors_mut()
            .into_iter()
            .zip(grads.tensors())
            .zip(self.m.tensors_mut())
            .zip(self.v.tensors_mut())
        {
            for i in 0..p.len() {
                m[i] = Self::B1 * m[i] + (1.0 - Self::B1) * g[i];
                v[i] = Self::B2 * v[i] + (1.0 - Self::B2) * g[i] * g[i];
                p[i] -= self.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + Self::EPS);
            }
        }
    }
}

/// Denoising score matching on samples of `dist` perturbed with `sched`.
pub fn train_toy_score(
    dist: &TemplateDistribution,
    vocab: &Vocabulary,
    sched: &Schedule,
    hyper: &TrainConfig,
    seed: u64,
) -> Result<(ToyScoreNet, TrainReport)> {
    if dist.is_empty() {
        return Err(Error::Training("empty dataset".into()));
    }
    if hyper.batch_size == 0 || hyper.validation_size == 0 {
        return Err(Error::Config("batch and validation sizes must be positive".into()));
    }
    if !(hyper.learning_rate > 0.0) {
        return Err(Error::Config("learning rate must be positive".into()));
    }
    let shape = dist.shape();
    let config = NetworkConfig {
        height: shape.height,
        width: shape.width,
        channels: shape.channels,
        hidden: hyper.hidden,
        embed: hyper.embed,
        key_dim: hyper.key_dim,
        time_features: hyper.time_features,
        vocab_size: vocab.len(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = ToyNetwork::init(config, &mut rng)?;
    let null = config.null_token();

    let mut val_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_7a11);
    let validation = draw_examples(dist, sched, hyper.validation_size, hyper.cond_dropout, null, &mut val_rng)?;
    let initial_validation_loss = net.loss(&validation);

    let mut adam = Adam::new(config, hyper.learning_rate);
    let mut losses = Vec::with_capacity(hyper.steps);
    for step in 0..hyper.steps {
        let batch = draw_examples(dist, sched, hyper.batch_size, hyper.cond_dropout, null, &mut rng)?;
        let (loss, grads) = net.loss_and_grad(&batch);
        if !loss.is_finite() {
            return Err(Error::Training(format!(
                "loss diverged to {loss} at step {step} (last finite loss {:?})",
                losses.last()
            )));
        }
        losses.push(loss);
        adam.update(&mut net, &grads);
    }
    let final_validation_loss = net.loss(&validation);
    if !final_validation_loss.is_finite() {
        return Err(Error::Training(format!(
            "validation loss is {final_validation_loss}"
        )));
    }
    if let Some(max) = hyper.max_validation_loss {
        if final_validation_loss > max {
            return Err(Error::Training(format!(
                "validation loss {final_validation_loss:.5} above threshold {max}"
            )));
        }
    }
    Ok((
        ToyScoreNet::new(net, vocab.clone())?,
        TrainReport {
            losses,
            initial_validation_loss,
            final_validation_loss,
        },
    ))
}
