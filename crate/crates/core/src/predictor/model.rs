use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::hashing::{encode, SparseVector, DEFAULT_HASH_DIM};
use crate::error::{Error, Result};
use crate::math::{sigmoid, softplus};
use crate::seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Architecture {
    /// Power of two.
    pub hash_dim: usize,
    /// 0 selects a plain logistic head.
    pub hidden_units: usize,
}

impl Default for Architecture {
    fn default() -> Self {
        Architecture {
            hash_dim: DEFAULT_HASH_DIM,
            hidden_units: 32,
        }
    }
}

impl Architecture {
    pub fn n_params(&self) -> usize {
        if self.hidden_units == 0 {
            self.hash_dim + 1
        } else {
            self.hash_dim * self.hidden_units + 2 * self.hidden_units + 1
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub rng_seed: u64,
    /// Half-width of the uniform init of the first layer (hidden head only).
    pub init_scale: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.5,
            epochs: 10,
            patience: 3,
            batch_size: 32,
            rng_seed: 0,
            init_scale: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::config("learning_rate", "must be positive"));
        }
        if self.patience > self.epochs {
            return Err(Error::config("patience", "must not exceed epochs"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub epochs_run: usize,
    pub best_val_loss: f64,
    pub rng_seed: u64,
}

/// Hashed-text encoder plus classification head.
///
/// Parameter layout, logistic head: `[w; hash_dim] ++ [b]`. Hidden head:
/// `W1` (row per hash bucket, `hidden_units` wide) `++ b1 ++ w2 ++ [b2]`, with a
/// tanh hidden layer.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictorModel {
    pub arch: Architecture,
    pub params: Vec<f64>,
    pub training_meta: TrainingMeta,
}

/// One encoded training example.
#[derive(Clone, Debug)]
pub struct Encoded {
    pub x: SparseVector,
    pub y: u8,
}

pub fn encode_examples(examples: &[(String, u8)], hash_dim: usize) -> Vec<Encoded> {
    examples
        .par_iter()
        .map(|(text, y)| Encoded {
            x: encode(text, hash_dim),
            y: *y,
        })
        .collect()
}

struct Forward {
    logit: f64,
    hidden: Vec<f64>,
}

/// Gradient of the mean BCE over a batch, kept in factored per-example form so it
/// can be applied sparsely or expanded densely for checking.
pub struct BatchGradient {
    hidden_units: usize,
    hash_dim: usize,
    scale: f64,
    items: Vec<GradItem>,
}

struct GradItem {
    x: SparseVector,
    d_logit: f64,
    hidden: Vec<f64>,
    d_pre: Vec<f64>,
}

impl BatchGradient {
    /// Visits every (parameter index, partial derivative) contribution. Indices
    /// may repeat; contributions add.
    pub fn for_each(&self, mut f: impl FnMut(usize, f64)) {
        let h = self.hidden_units;
        let d = self.hash_dim;
        for item in &self.items {
            let dz = item.d_logit * self.scale;
            if h == 0 {
                for (i, x) in item.x.iter() {
                    f(i, dz * x);
                }
                f(d, dz);
            } else {
                let b1 = d * h;
                let w2 = b1 + h;
                for (i, x) in item.x.iter() {
                    for k in 0..h {
                        f(i * h + k, item.d_pre[k] * self.scale * x);
                    }
                }
                for k in 0..h {
                    f(b1 + k, item.d_pre[k] * self.scale);
                    f(w2 + k, dz * item.hidden[k]);
                }
                f(w2 + h, dz);
            }
        }
    }

    pub fn to_dense(&self, n_params: usize) -> Vec<f64> {
        let mut g = vec![0.0; n_params];
        self.for_each(|i, v| g[i] += v);
        g
    }
}

fn bce_from_logit(z: f64, y: u8) -> f64 {
    if y == 1 {
        softplus(-z)
    } else {
        softplus(z)
    }
}

impl PredictorModel {
    /// All-zero parameters: every input maps to probability 0.5.
    pub fn zeros(arch: Architecture) -> Self {
        assert!(arch.hash_dim.is_power_of_two(), "hash_dim must be a power of two");
        PredictorModel {
            arch,
            params: vec![0.0; arch.n_params()],
            training_meta: TrainingMeta::default(),
        }
    }

    /// Zero head; the hidden layer (if any) gets a seeded uniform init.
    pub fn initialized(arch: Architecture, config: &TrainConfig) -> Self {
        let mut m = PredictorModel::zeros(arch);
        if arch.hidden_units > 0 {
            let mut rng = seed::rng(seed::derive(config.rng_seed, &["predictor-init"]));
            let s = config.init_scale;
            for w in &mut m.params[..arch.hash_dim * arch.hidden_units] {
                *w = rng.random_range(-s..=s);
            }
        }
        m.training_meta.rng_seed = config.rng_seed;
        m
    }

    fn forward(&self, x: &SparseVector) -> Forward {
        let h = self.arch.hidden_units;
        let d = self.arch.hash_dim;
        let p = &self.params;
        if h == 0 {
            let logit = p[d] + x.iter().map(|(i, v)| p[i] * v).sum::<f64>();
            return Forward {
                logit,
                hidden: Vec::new(),
            };
        }
        let b1 = d * h;
        let w2 = b1 + h;
        let mut pre: Vec<f64> = p[b1..b1 + h].to_vec();
        for (i, v) in x.iter() {
            let row = &p[i * h..(i + 1) * h];
            for k in 0..h {
                pre[k] += row[k] * v;
            }
        }
        let hidden: Vec<f64> = pre.into_iter().map(f64::tanh).collect();
        let logit = p[w2 + h] + hidden.iter().zip(&p[w2..w2 + h]).map(|(a, w)| a * w).sum::<f64>();
        Forward { logit, hidden }
    }

    pub fn logit_encoded(&self, x: &SparseVector) -> f64 {
        self.forward(x).logit
    }

    pub fn proba_encoded(&self, x: &SparseVector) -> f64 {
        sigmoid(self.logit_encoded(x))
    }

    /// p(y = 1 | text).
    pub fn predict_proba(&self, text: &str) -> f64 {
        self.proba_encoded(&encode(text, self.arch.hash_dim))
    }

    pub fn predict_many(&self, texts: &[String]) -> Vec<f64> {
        texts.par_iter().map(|t| self.predict_proba(t)).collect()
    }

    /// Mean BCE over `batch`.
    pub fn loss(&self, batch: &[&Encoded]) -> f64 {
        if batch.is_empty() {
            return 0.0;
        }
        batch.iter().map(|e| bce_from_logit(self.logit_encoded(&e.x), e.y)).sum::<f64>() / batch.len() as f64
    }

    pub fn loss_and_gradient(&self, batch: &[&Encoded]) -> (f64, BatchGradient) {
        let h = self.arch.hidden_units;
        let w2 = self.arch.hash_dim * h + h;
        let mut total = 0.0;
        let items = batch
            .iter()
            .map(|e| {
                let fw = self.forward(&e.x);
                total += bce_from_logit(fw.logit, e.y);
                let d_logit = sigmoid(fw.logit) - e.y as f64;
                let d_pre = (0..h)
                    .map(|k| d_logit * self.params[w2 + k] * (1.0 - fw.hidden[k] * fw.hidden[k]))
                    .collect();
                GradItem {
                    x: e.x.clone(),
                    d_logit,
                    hidden: fw.hidden,
                    d_pre,
                }
            })
            .collect();
        let n = batch.len().max(1) as f64;
        (
            total / n,
            BatchGradient {
                hidden_units: h,
                hash_dim: self.arch.hash_dim,
                scale: 1.0 / n,
                items,
            },
        )
    }

    fn apply(&mut self, grad: &BatchGradient, learning_rate: f64) {
        let params = &mut self.params;
        grad.for_each(|i, g| params[i] -= learning_rate * g);
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|p| p.is_finite())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let bytes: Vec<u8> = self.params.iter().flat_map(|p| p.to_le_bytes()).collect();
        let file = CheckpointFile {
            format: CHECKPOINT_FORMAT.into(),
            version: 1,
            hash_dim: self.arch.hash_dim,
            hidden_units: self.arch.hidden_units,
            training_meta: self.training_meta.clone(),
            params_le_f64_base64: B64.encode(bytes),
        };
        std::fs::write(path, serde_json::to_vec(&file)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let file: CheckpointFile = serde_json::from_slice(&std::fs::read(path)?)?;
        if file.format != CHECKPOINT_FORMAT || file.version != 1 {
            return Err(Error::config("checkpoint", format!("unsupported format {} v{}", file.format, file.version)));
        }
        let arch = Architecture {
            hash_dim: file.hash_dim,
            hidden_units: file.hidden_units,
        };
        let bytes = B64
            .decode(file.params_le_f64_base64)
            .map_err(|e| Error::config("checkpoint", e.to_string()))?;
        if bytes.len() != arch.n_params() * 8 {
            return Err(Error::config("checkpoint", "parameter count does not match architecture"));
        }
        let params = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        Ok(PredictorModel {
            arch,
            params,
            training_meta: file.training_meta,
        })
    }
}

const CHECKPOINT_FORMAT: &str = "hashed-ngram-predictor";

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    version: u32,
    hash_dim: usize,
    hidden_units: usize,
    training_meta: TrainingMeta,
    params_le_f64_base64: String,
}

fn require_both_classes(examples: &[Encoded]) -> Result<()> {
    let pos = examples.iter().filter(|e| e.y == 1).count();
    if pos == 0 || pos == examples.len() {
        return Err(Error::DegenerateLabels(format!(
            "training set has {pos} positives among {} examples",
            examples.len()
        )));
    }
    Ok(())
}

/// Trains a fresh model with mini-batch gradient descent on mean BCE, early
/// stopping on validation BCE and returning the best-validation checkpoint.
pub fn train(
    arch: Architecture,
    examples: &[(String, u8)],
    config: &TrainConfig,
    val_examples: &[(String, u8)],
) -> Result<PredictorModel> {
    config.validate()?;
    let train_set = encode_examples(examples, arch.hash_dim);
    if train_set.is_empty() {
        return Err(Error::DegenerateLabels("no training examples".into()));
    }
    require_both_classes(&train_set)?;
    let val_set = encode_examples(val_examples, arch.hash_dim);
    let mut model = PredictorModel::initialized(arch, config);
    // Start the output bias at the training log-odds so early epochs are not
    // spent fitting the base rate under heavy imbalance.
    let prevalence = train_set.iter().filter(|e| e.y == 1).count() as f64 / train_set.len() as f64;
    *model.params.last_mut().expect("bias parameter") = (prevalence / (1.0 - prevalence)).ln();
    fit(model, &train_set, config, &val_set)
}

/// Continues training `model` from its current parameters.
pub fn fit(mut model: PredictorModel, train_set: &[Encoded], config: &TrainConfig, val_set: &[Encoded]) -> Result<PredictorModel> {
    let monitor = |m: &PredictorModel| -> f64 {
        let refs: Vec<&Encoded> = if val_set.is_empty() {
            train_set.iter().collect()
        } else {
            val_set.iter().collect()
        };
        m.loss(&refs)
    };
    // Checkpoints are taken at epoch ends only; the starting point is not a
    // candidate.
    let mut best = model.clone();
    let mut best_loss = f64::INFINITY;
    let mut stale = 0;
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut epochs_run = 0;
    for epoch in 0..config.epochs {
        let mut rng = seed::rng(seed::derive_index(config.rng_seed, "predictor-shuffle", epoch as u64));
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&Encoded> = chunk.iter().map(|&i| &train_set[i]).collect();
            let (loss, grad) = model.loss_and_gradient(&batch);
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    context: format!("predictor epoch {epoch}"),
                });
            }
            model.apply(&grad, config.learning_rate);
        }
        epochs_run = epoch + 1;
        let loss = monitor(&model);
        if !loss.is_finite() || !model.is_finite() {
            return Err(Error::NonFiniteLoss {
                context: format!("predictor epoch {epoch} (learning rate {} too high?)", config.learning_rate),
            });
        }
        log::debug!("predictor epoch {epoch}: monitored BCE {loss:.6}");
        if loss < best_loss {
            best_loss = loss;
            best = model.clone();
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.patience {
                break;
            }
        }
    }
    best.training_meta = TrainingMeta {
        epochs_run,
        best_val_loss: best_loss,
        rng_seed: config.rng_seed,
    };
    Ok(best)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InoculationConfig {
    /// Multiplier on the base learning rate.
    pub lr_factor: f64,
    pub max_samples: usize,
}

impl Default for InoculationConfig {
    fn default() -> Self {
        InoculationConfig {
            lr_factor: 0.1,
            max_samples: 512,
        }
    }
}

/// Low-learning-rate continuation of training on rewrite examples only.
pub fn inoculate(
    model: &PredictorModel,
    rewrite_examples: &[(String, u8)],
    base: &TrainConfig,
    inoculation: &InoculationConfig,
    val_examples: &[(String, u8)],
) -> Result<PredictorModel> {
    if rewrite_examples.is_empty() {
        return Ok(model.clone());
    }
    let mut chosen: Vec<&(String, u8)> = rewrite_examples.iter().collect();
    if chosen.len() > inoculation.max_samples {
        let mut rng = seed::rng(seed::derive(base.rng_seed, &["inoculation-sample"]));
        chosen.shuffle(&mut rng);
        chosen.truncate(inoculation.max_samples);
    }
    let owned: Vec<(String, u8)> = chosen.into_iter().cloned().collect();
    let train_set = encode_examples(&owned, model.arch.hash_dim);
    let val_set = encode_examples(val_examples, model.arch.hash_dim);
    let config = TrainConfig {
        learning_rate: base.learning_rate * inoculation.lr_factor,
        ..base.clone()
    };
    fit(model.clone(), &train_set, &config, &val_set)
}
