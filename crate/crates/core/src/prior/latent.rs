use std::collections::VecDeque;
use std::path::Path;

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::features::{features_to_window, window_dim, window_features, Normalizer};
use super::gaussian::{symmetric_kl, LatentGaussian};
use crate::error::{check_len, Error, Result};
use crate::motion::{MotionDataset, MotionWindow, DEFAULT_HISTORY};
use crate::nn::{rows_to_matrix, Activation, DenseNet, InitSpec, Optimizer, OptimizerConfig, OutputHead, Tape};

pub const PRIOR_FORMAT: &str = "latentmimic.prior";
pub const PRIOR_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PriorConfig {
    /// Number of preceding frames per window.
    pub history: usize,
    pub latent_dim: usize,
    pub hidden: Vec<usize>,
    /// Weight of the latent KL against the standard normal.
    pub beta: f64,
    /// Lower bound on per-feature normalization scale.
    pub std_floor: f64,
    pub optimizer: OptimizerConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub finetune_batch: usize,
    pub finetune_eval_interval: usize,
    pub finetune_eval_size: usize,
    pub stop_threshold: f64,
    pub stop_patience: usize,
    pub buffer_capacity: usize,
}

impl Default for PriorConfig {
    fn default() -> Self {
        PriorConfig {
            history: DEFAULT_HISTORY,
            latent_dim: 32,
            hidden: vec![256, 128],
            beta: 1e-3,
            std_floor: 0.05,
            optimizer: OptimizerConfig::adam(1e-3),
            epochs: 150,
            batch_size: 128,
            finetune_batch: 64,
            finetune_eval_interval: 25,
            finetune_eval_size: 512,
            stop_threshold: 0.05,
            stop_patience: 3,
            buffer_capacity: 10_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub reconstruction: f64,
    pub kl: f64,
    pub prediction: f64,
}

impl EpochLog {
    pub fn total(&self) -> f64 {
        self.reconstruction + self.kl + self.prediction
    }
}

/// Progress of encoder fine-tuning on mixed reference/simulated windows.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FinetuneState {
    pub stopped: bool,
    pub consecutive_below: usize,
    pub evaluations: usize,
    pub last_divergence: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct FinetuneReport {
    pub steps: usize,
    pub mocap_samples: usize,
    pub sim_samples: usize,
    pub divergence: Option<f64>,
    pub stopped: bool,
}

/// Encoder, decoder and predictor over normalized window features.
#[derive(Clone, Debug)]
pub struct LatentPrior {
    config: PriorConfig,
    joints: usize,
    frame_rate: f64,
    normalizer: Normalizer,
    encoder: DenseNet,
    decoder: DenseNet,
    predictor: DenseNet,
    finetune: FinetuneState,
    vae_opt: Optimizer,
    pred_opt: Optimizer,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PriorRecord {
    format: String,
    version: u32,
    config: PriorConfig,
    joints: usize,
    frame_rate: f64,
    normalizer: Normalizer,
    encoder: serde_json::Value,
    decoder: serde_json::Value,
    predictor: serde_json::Value,
    finetune: FinetuneState,
}

fn sizes(input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
    let mut s = vec![input];
    s.extend_from_slice(hidden);
    s.push(output);
    s
}

impl LatentPrior {
    pub fn new<R: Rng + ?Sized>(
        config: PriorConfig,
        joints: usize,
        frame_rate: f64,
        normalizer: Normalizer,
        rng: &mut R,
    ) -> Result<Self> {
        let wd = window_dim(config.history, joints);
        check_len("normalizer", wd, normalizer.dim())?;
        let init = InitSpec::default();
        let encoder = DenseNet::new(
            &sizes(wd, &config.hidden, config.latent_dim),
            Activation::Elu,
            OutputHead::Gaussian,
            init,
            rng,
        )?;
        let decoder = DenseNet::new(
            &sizes(config.latent_dim, &config.hidden, wd),
            Activation::Elu,
            OutputHead::Deterministic,
            init,
            rng,
        )?;
        let predictor = DenseNet::new(
            &sizes(config.latent_dim, &config.hidden, wd),
            Activation::Elu,
            OutputHead::Deterministic,
            init,
            rng,
        )?;
        let vae_opt = Optimizer::new(config.optimizer.clone());
        let pred_opt = Optimizer::new(config.optimizer.clone());
        Ok(LatentPrior {
            config,
            joints,
            frame_rate,
            normalizer,
            encoder,
            decoder,
            predictor,
            finetune: FinetuneState::default(),
            vae_opt,
            pred_opt,
        })
    }

    /// A fresh prior whose normalization statistics come from `datasets`.
    pub fn for_datasets<R: Rng + ?Sized>(config: PriorConfig, datasets: &[MotionDataset], rng: &mut R) -> Result<Self> {
        let first = datasets.iter().find(|d| !d.is_empty()).ok_or(Error::EmptyDataset)?;
        let rows: Vec<Vec<f64>> = datasets
            .iter()
            .flat_map(|d| d.windows(config.history))
            .map(|w| window_features(&w))
            .collect();
        let normalizer = Normalizer::fit(&rows, config.std_floor)?;
        Self::new(config, first.joint_count, first.frame_rate, normalizer, rng)
    }

    pub fn config(&self) -> &PriorConfig {
        &self.config
    }

    pub fn history(&self) -> usize {
        self.config.history
    }

    pub fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    pub fn joints(&self) -> usize {
        self.joints
    }

    pub fn frame_rate(&self) -> f64 {
        self.frame_rate
    }

    pub fn window_dim(&self) -> usize {
        window_dim(self.config.history, self.joints)
    }

    pub fn normalizer(&self) -> &Normalizer {
        &self.normalizer
    }

    pub fn encoder(&self) -> &DenseNet {
        &self.encoder
    }

    pub fn predictor(&self) -> &DenseNet {
        &self.predictor
    }

    pub fn finetune_state(&self) -> &FinetuneState {
        &self.finetune
    }

    /// Normalized feature vector of a window.
    pub fn features(&self, window: &MotionWindow) -> Result<Vec<f64>> {
        let raw = window_features(window);
        check_len("window features", self.window_dim(), raw.len())?;
        Ok(self.normalizer.normalize(&raw))
    }

    pub fn encode(&self, window: &MotionWindow) -> Result<LatentGaussian> {
        let x = self.features(window)?;
        self.encode_features(&x)
    }

    pub fn encode_features(&self, normalized: &[f64]) -> Result<LatentGaussian> {
        self.encoder.forward_gaussian(normalized)
    }

    /// Batched encoding of normalized feature rows: `(mean, std)`.
    pub fn encode_rows(&self, rows: ArrayView2<f64>) -> Result<(Array2<f64>, Array2<f64>)> {
        let (mean, log_std) = self.encoder.gaussian_batch(rows)?;
        Ok((mean, log_std.mapv(f64::exp)))
    }

    /// Normalized features of the window following the one encoded as `z_mean`.
    pub fn predict_rows(&self, z_mean: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.predictor.forward_batch(z_mean)
    }

    pub fn predict_features(&self, z: &LatentGaussian) -> Result<Vec<f64>> {
        check_len("predictor input", self.config.latent_dim, z.dim())?;
        self.predictor.forward(z.mean())
    }

    /// Forecast of the next window with its final base position at the origin.
    pub fn predict_next(&self, z: &LatentGaussian) -> Result<MotionWindow> {
        let f = self.predict_features(z)?;
        self.features_to_window(&f, [0.0; 3])
    }

    pub fn features_to_window(&self, normalized: &[f64], anchor: [f64; 3]) -> Result<MotionWindow> {
        check_len("window features", self.window_dim(), normalized.len())?;
        features_to_window(&self.normalizer.denormalize(normalized), self.joints, self.frame_rate, anchor)
    }

    /// Decodes the latent mean and scores the reconstruction:
    /// `MSE(normalized features) + beta * KL(z || N(0, I))`.
    pub fn reconstruct(&self, window: &MotionWindow) -> Result<(MotionWindow, f64)> {
        let x = self.features(window)?;
        let z = self.encode_features(&x)?;
        let decoded = self.decoder.forward(z.mean())?;
        let loss = reconstruction_loss(&x, &decoded, &z, self.config.beta);
        let out = self.features_to_window(&decoded, window.last().p)?;
        Ok((out, loss))
    }

    /// Mean reconstruction loss (at the latent mean) over normalized rows.
    pub fn reconstruction_loss_rows(&self, rows: &[Vec<f64>]) -> Result<f64> {
        if rows.is_empty() {
            return Ok(0.0);
        }
        let x = rows_to_matrix(rows);
        let (mean, log_std) = self.encoder.gaussian_batch(x.view())?;
        let dec = self.decoder.forward_batch(mean.view())?;
        let mut total = 0.0;
        for i in 0..rows.len() {
            let z = LatentGaussian::from_parts(mean.row(i).to_vec(), log_std.row(i).mapv(f64::exp).to_vec());
            total += reconstruction_loss(&rows[i], dec.row(i).as_slice().unwrap(), &z, self.config.beta);
        }
        Ok(total / rows.len() as f64)
    }

    /// Mean squared error of one-step prediction over `(window, next window)` pairs.
    pub fn prediction_loss_rows(&self, current: &[Vec<f64>], next: &[Vec<f64>]) -> Result<f64> {
        check_len("prediction pairs", current.len(), next.len())?;
        if current.is_empty() {
            return Ok(0.0);
        }
        let (mean, _) = self.encode_rows(rows_to_matrix(current).view())?;
        let pred = self.predict_rows(mean.view())?;
        let target = rows_to_matrix(next);
        Ok((&pred - &target).mapv(|d| d * d).mean().unwrap_or(0.0))
    }

    /// One reparameterized VAE gradient step on normalized rows. Returns
    /// `(reconstruction MSE, KL)` before the update, plus the latent means.
    pub fn vae_step<R: Rng + ?Sized>(&mut self, x: &Array2<f64>, rng: &mut R) -> Result<(f64, f64, Array2<f64>)> {
        let b = x.nrows();
        let d = self.config.latent_dim;
        let mut tape = Tape::new();
        let input = tape.constant(x.clone());
        let (mu, ls) = self.encoder.gaussian_tape(&mut tape, input)?;
        let means = tape.value(mu).clone();
        let eps = Array2::from_shape_simple_fn((b, d), || rng.sample::<f64, _>(StandardNormal));
        let eps = tape.constant(eps);
        let std = tape.exp(ls);
        let noise = tape.mul(std, eps)?;
        let z = tape.add(mu, noise)?;
        let dec = self.decoder.forward_tape(&mut tape, z)?;
        let diff = tape.sub(dec, input)?;
        let sq = tape.square(diff);
        let mse = tape.mean(sq);
        // 0.5 * sum(mu^2 + sigma^2 - 1 - 2 ln sigma) / B
        let mu2 = tape.square(mu);
        let ls2 = tape.scale(ls, 2.0);
        let var = tape.exp(ls2);
        let t = tape.add(mu2, var)?;
        let t = tape.sub(t, ls2)?;
        let t = tape.add_scalar(t, -1.0);
        let kl = tape.sum(t);
        let kl = tape.scale(kl, 0.5 / b as f64);
        let weighted = tape.scale(kl, self.config.beta);
        let loss = tape.add(mse, weighted)?;
        let (mse_v, kl_v) = (tape.scalar(mse), tape.scalar(kl));
        if !(mse_v.is_finite() && kl_v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite reconstruction loss".into()));
        }
        let grads = tape.backward(loss)?;
        let mut params = self.encoder.params_mut();
        params.extend(self.decoder.params_mut());
        self.vae_opt.step(params, &grads)?;
        Ok((mse_v, kl_v, means))
    }

    /// One predictor gradient step from latent means to next-window features.
    pub fn predictor_step(&mut self, z_mean: &Array2<f64>, target: &Array2<f64>) -> Result<f64> {
        let mut tape = Tape::new();
        let input = tape.constant(z_mean.clone());
        let out = self.predictor.forward_tape(&mut tape, input)?;
        let t = tape.constant(target.clone());
        let diff = tape.sub(out, t)?;
        let sq = tape.square(diff);
        let loss = tape.mean(sq);
        let value = tape.scalar(loss);
        if !value.is_finite() {
            return Err(Error::InvalidArgument("non-finite prediction loss".into()));
        }
        let grads = tape.backward(loss)?;
        self.pred_opt.step(self.predictor.params_mut(), &grads)?;
        Ok(value)
    }

    /// Predictor step on `(window, next window)` feature pairs, encoding the
    /// inputs with the current encoder.
    pub fn predictor_step_on_pairs(&mut self, current: &[Vec<f64>], next: &[Vec<f64>]) -> Result<f64> {
        check_len("prediction pairs", current.len(), next.len())?;
        let (mean, _) = self.encode_rows(rows_to_matrix(current).view())?;
        self.predictor_step(&mean, &rows_to_matrix(next))
    }

    /// Trains encoder/decoder on reconstruction and the predictor on the
    /// following window, one log entry per epoch.
    pub fn pretrain<R: Rng + ?Sized>(
        &mut self,
        datasets: &[MotionDataset],
        epochs: usize,
        batch_size: usize,
        rng: &mut R,
    ) -> Result<Vec<EpochLog>> {
        let (current, next) = self.window_pairs(datasets)?;
        if current.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let batch_size = batch_size.clamp(1, current.len());
        let mut order: Vec<usize> = (0..current.len()).collect();
        let mut log = Vec::with_capacity(epochs);
        for epoch in 0..epochs {
            order.shuffle(rng);
            let (mut rec, mut kl, mut pred, mut n) = (0.0, 0.0, 0.0, 0usize);
            for chunk in order.chunks(batch_size) {
                let x = Array2::from_shape_fn((chunk.len(), current[0].len()), |(i, j)| current[chunk[i]][j]);
                let y = Array2::from_shape_fn((chunk.len(), next[0].len()), |(i, j)| next[chunk[i]][j]);
                let (r, k, means) = self.vae_step(&x, rng)?;
                let p = self.predictor_step(&means, &y)?;
                rec += r;
                kl += k;
                pred += p;
                n += 1;
            }
            let n = n as f64;
            log.push(EpochLog {
                epoch,
                reconstruction: rec / n,
                kl: self.config.beta * kl / n,
                prediction: pred / n,
            });
            log::debug!("prior epoch {epoch}: recon {:.5} pred {:.5}", rec / n, pred / n);
        }
        Ok(log)
    }

    /// Normalized `(window, next window)` feature pairs within each dataset.
    pub fn window_pairs(&self, datasets: &[MotionDataset]) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
        let mut current = Vec::new();
        let mut next = Vec::new();
        for d in datasets {
            check_len("dataset joint count", self.joints, d.joint_count)?;
            let feats: Vec<Vec<f64>> = d
                .windows(self.config.history)
                .iter()
                .map(|w| self.features(w))
                .collect::<Result<_>>()?;
            for pair in feats.windows(2) {
                current.push(pair[0].clone());
                next.push(pair[1].clone());
            }
        }
        Ok((current, next))
    }

    /// Aggregate latent of a set of normalized windows, moment-matched to a
    /// single diagonal Gaussian (mixture mean and total variance).
    pub fn aggregate_latent(&self, rows: &[Vec<f64>]) -> Result<LatentGaussian> {
        if rows.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let (mean, std) = self.encode_rows(rows_to_matrix(rows).view())?;
        let m = mean.mean_axis(Axis(0)).expect("non-empty");
        let second = (&mean * &mean + &std * &std).mean_axis(Axis(0)).expect("non-empty");
        let var = &second - &(&m * &m);
        LatentGaussian::new(m.to_vec(), var.iter().map(|v| v.max(1e-12).sqrt()).collect())
    }

    /// Symmetric KL between the aggregate latents of the two stores.
    pub fn store_divergence(&self, buffer: &MixedReplayBuffer) -> Result<f64> {
        let n = self.config.finetune_eval_size;
        let a = self.aggregate_latent(&buffer.eval_subset(Store::Mocap, n))?;
        let b = self.aggregate_latent(&buffer.eval_subset(Store::Sim, n))?;
        symmetric_kl(&a, &b)
    }

    /// Fine-tunes encoder and decoder on balanced batches from the mixed
    /// buffer. The stop criterion is checked every `finetune_eval_interval`
    /// steps; once it holds for `stop_patience` consecutive checks, further
    /// calls do nothing.
    pub fn finetune_mixed<R: Rng + ?Sized>(
        &mut self,
        buffer: &MixedReplayBuffer,
        steps: usize,
        rng: &mut R,
    ) -> Result<FinetuneReport> {
        let mut report = FinetuneReport {
            stopped: self.finetune.stopped,
            ..Default::default()
        };
        if self.finetune.stopped || steps == 0 {
            return Ok(report);
        }
        if buffer.mocap_len() == 0 || buffer.sim_len() == 0 {
            log::warn!(
                "mixed fine-tuning skipped: {} reference and {} simulated windows",
                buffer.mocap_len(),
                buffer.sim_len()
            );
            return Ok(report);
        }
        let interval = self.config.finetune_eval_interval.max(1);
        for step in 0..steps {
            if step % interval == 0 {
                let div = self.store_divergence(buffer)?;
                self.finetune.evaluations += 1;
                self.finetune.last_divergence = Some(div);
                report.divergence = Some(div);
                if div < self.config.stop_threshold {
                    self.finetune.consecutive_below += 1;
                } else {
                    self.finetune.consecutive_below = 0;
                }
                if self.finetune.consecutive_below >= self.config.stop_patience {
                    self.finetune.stopped = true;
                    report.stopped = true;
                    log::info!("encoder fine-tuning stopped: divergence {div:.4}");
                    break;
                }
            }
            let batch = buffer.sample_balanced(self.config.finetune_batch, rng)?;
            report.mocap_samples += batch.mocap;
            report.sim_samples += batch.sim;
            self.vae_step(&rows_to_matrix(&batch.rows), rng)?;
            report.steps += 1;
        }
        Ok(report)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        let rec = PriorRecord {
            format: PRIOR_FORMAT.into(),
            version: PRIOR_VERSION,
            config: self.config.clone(),
            joints: self.joints,
            frame_rate: self.frame_rate,
            normalizer: self.normalizer.clone(),
            encoder: self.encoder.to_value()?,
            decoder: self.decoder.to_value()?,
            predictor: self.predictor.to_value()?,
            finetune: self.finetune.clone(),
        };
        Ok(serde_json::to_string(&rec)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Restores a checkpoint; optimizer moments start fresh.
    pub fn from_json(text: &str) -> Result<Self> {
        let rec: PriorRecord = serde_json::from_str(text)?;
        if rec.format != PRIOR_FORMAT || rec.version != PRIOR_VERSION {
            return Err(Error::InvalidArgument(format!(
                "unsupported prior format {} v{}",
                rec.format, rec.version
            )));
        }
        let wd = window_dim(rec.config.history, rec.joints);
        let encoder = DenseNet::from_value(rec.encoder)?;
        let decoder = DenseNet::from_value(rec.decoder)?;
        let predictor = DenseNet::from_value(rec.predictor)?;
        check_len("encoder input", wd, encoder.input_size())?;
        check_len("predictor output", wd, predictor.output_size())?;
        check_len("normalizer", wd, rec.normalizer.dim())?;
        Ok(LatentPrior {
            vae_opt: Optimizer::new(rec.config.optimizer.clone()),
            pred_opt: Optimizer::new(rec.config.optimizer.clone()),
            config: rec.config,
            joints: rec.joints,
            frame_rate: rec.frame_rate,
            normalizer: rec.normalizer,
            encoder,
            decoder,
            predictor,
            finetune: rec.finetune,
        })
    }
}

/// `mean((x - x_hat)^2) + beta * KL(z || N(0, I))`.
pub fn reconstruction_loss(x: &[f64], x_hat: &[f64], z: &LatentGaussian, beta: f64) -> f64 {
    let mse = x.iter().zip(x_hat).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / x.len().max(1) as f64;
    let kl: f64 = z
        .mean()
        .iter()
        .zip(z.std())
        .map(|(m, s)| 0.5 * (m * m + s * s - 1.0) - s.ln())
        .sum();
    mse + beta * kl
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Store {
    Mocap,
    Sim,
}

pub struct BalancedBatch {
    pub rows: Vec<Vec<f64>>,
    pub mocap: usize,
    pub sim: usize,
}

/// Two bounded stores of normalized window features: reference motion and
/// simulated motion.
#[derive(Clone, Debug)]
pub struct MixedReplayBuffer {
    capacity: usize,
    mocap: VecDeque<Vec<f64>>,
    sim: VecDeque<Vec<f64>>,
}

impl MixedReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        MixedReplayBuffer {
            capacity: capacity.max(1),
            mocap: VecDeque::new(),
            sim: VecDeque::new(),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn mocap_len(&self) -> usize {
        self.mocap.len()
    }

    pub fn sim_len(&self) -> usize {
        self.sim.len()
    }

    fn store_mut(&mut self, store: Store) -> &mut VecDeque<Vec<f64>> {
        match store {
            Store::Mocap => &mut self.mocap,
            Store::Sim => &mut self.sim,
        }
    }

    fn store(&self, store: Store) -> &VecDeque<Vec<f64>> {
        match store {
            Store::Mocap => &self.mocap,
            Store::Sim => &self.sim,
        }
    }

    pub fn push(&mut self, store: Store, features: Vec<f64>) {
        let cap = self.capacity;
        let s = self.store_mut(store);
        if s.len() == cap {
            s.pop_front();
        }
        s.push_back(features);
    }

    /// `batch / 2` rows from each store, sampled with replacement.
    pub fn sample_balanced<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> Result<BalancedBatch> {
        if batch == 0 || batch % 2 != 0 {
            return Err(Error::InvalidArgument(format!("mixed batch size {batch} must be even and positive")));
        }
        if self.mocap.is_empty() || self.sim.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let half = batch / 2;
        let mut rows = Vec::with_capacity(batch);
        for _ in 0..half {
            rows.push(self.mocap[rng.random_range(0..self.mocap.len())].clone());
        }
        for _ in 0..half {
            rows.push(self.sim[rng.random_range(0..self.sim.len())].clone());
        }
        Ok(BalancedBatch {
            rows,
            mocap: half,
            sim: half,
        })
    }

    /// Up to `max` entries taken at an even stride through the store.
    pub fn eval_subset(&self, store: Store, max: usize) -> Vec<Vec<f64>> {
        let s = self.store(store);
        let n = s.len();
        if n <= max {
            return s.iter().cloned().collect();
        }
        (0..max).map(|i| s[i * n / max].clone()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::motion::GaitStyle;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_config() -> PriorConfig {
        PriorConfig {
            latent_dim: 4,
            hidden: vec![16],
            ..Default::default()
        }
    }

    fn small_prior(seed: u64) -> (LatentPrior, Vec<MotionDataset>) {
        let ds = vec![MotionDataset::generate(GaitStyle::Trot, 1.0, 50.0).unwrap()];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (LatentPrior::for_datasets(small_config(), &ds, &mut rng).unwrap(), ds)
    }

    #[test]
    fn encode_is_deterministic_and_finite() {
        let (prior, ds) = small_prior(1);
        let w = &ds[0].windows(9)[0];
        let a = prior.encode(w).unwrap();
        assert_eq!(a, prior.encode(w).unwrap());
        assert!(a.mean().iter().chain(a.std()).all(|x| x.is_finite()));
        let zero = vec![0.0; prior.window_dim()];
        let z = prior.encode_features(&zero).unwrap();
        assert!(z.mean().iter().all(|x| x.is_finite()));
    }

    #[test]
    fn reconstruction_loss_terms() {
        let z = LatentGaussian::standard(3);
        assert_eq!(reconstruction_loss(&[1.0, 2.0], &[1.0, 2.0], &z, 0.5), 0.0);
        let z = LatentGaussian::new(vec![1.0], vec![1.0]).unwrap();
        assert_eq!(reconstruction_loss(&[0.0, 0.0], &[1.0, 1.0], &z, 0.0), 1.0);
        assert!((reconstruction_loss(&[0.0], &[0.0], &z, 2.0) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn pretrain_log_has_one_entry_per_epoch_and_is_reproducible() {
        let run = || {
            let (mut prior, ds) = small_prior(3);
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            prior.pretrain(&ds, 4, 16, &mut rng).unwrap()
        };
        let a = run();
        assert_eq!(a.len(), 4);
        assert_eq!(a, run());
    }

    #[test]
    fn pretrain_rejects_empty_dataset() {
        let (mut prior, _) = small_prior(3);
        let empty = vec![MotionDataset::new("trot", 50.0, Vec::new())];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(prior.pretrain(&empty, 1, 8, &mut rng), Err(Error::EmptyDataset)));
    }

    #[test]
    fn balanced_batches_split_evenly() {
        let mut buf = MixedReplayBuffer::new(100);
        for i in 0..10 {
            buf.push(Store::Mocap, vec![i as f64]);
        }
        for i in 0..3 {
            buf.push(Store::Sim, vec![-(i as f64) - 1.0]);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..20 {
            let b = buf.sample_balanced(64, &mut rng).unwrap();
            assert_eq!((b.mocap, b.sim), (32, 32));
            assert!(b.rows[..32].iter().all(|r| r[0] >= 0.0));
            assert!(b.rows[32..].iter().all(|r| r[0] < 0.0));
        }
        assert!(buf.sample_balanced(63, &mut rng).is_err());
    }

    #[test]
    fn ring_eviction_keeps_newest() {
        let mut buf = MixedReplayBuffer::new(3);
        for i in 0..5 {
            buf.push(Store::Sim, vec![i as f64]);
        }
        assert_eq!(buf.sim_len(), 3);
        assert_eq!(buf.eval_subset(Store::Sim, 10), vec![vec![2.0], vec![3.0], vec![4.0]]);
    }

    #[test]
    fn finetune_with_empty_store_is_noop() {
        let (mut prior, ds) = small_prior(4);
        let mut buf = MixedReplayBuffer::new(100);
        buf.push(Store::Mocap, prior.features(&ds[0].windows(9)[0]).unwrap());
        let before = prior.encoder().clone();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let rep = prior.finetune_mixed(&buf, 10, &mut rng).unwrap();
        assert_eq!(rep.steps, 0);
        assert_eq!(prior.encoder(), &before);
    }

    #[test]
    fn checkpoint_round_trip() {
        let (prior, ds) = small_prior(5);
        let back = LatentPrior::from_json(&prior.to_json().unwrap()).unwrap();
        let w = &ds[0].windows(9)[2];
        assert_eq!(prior.encode(w).unwrap(), back.encode(w).unwrap());
        let z = prior.encode(w).unwrap();
        assert_eq!(prior.predict_next(&z).unwrap(), back.predict_next(&z).unwrap());
    }
}
