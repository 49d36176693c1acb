//! Supervised heads trained on frozen embeddings.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::nn::{self, AdamConfig, AdamState, Linear, Parameters};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeHead {
    Linear,
    Mlp,
}

impl ProbeHead {
    pub fn as_str(&self) -> &'static str {
        match self {
            ProbeHead::Linear => "linear",
            ProbeHead::Mlp => "mlp",
        }
    }
}

impl fmt::Display for ProbeHead {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ProbeHead {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "linear" => Ok(ProbeHead::Linear),
            "mlp" => Ok(ProbeHead::Mlp),
            other => Err(Error::InvalidArgument(format!("unknown probe head `{other}`"))),
        }
    }
}

/// What the probe predicts. Both tasks use a softmax output.
#[derive(Debug, Clone, PartialEq)]
pub enum ProbeTargets {
    Classes { labels: Vec<usize>, num_classes: usize },
    Distributions(Array2<f64>),
}

impl ProbeTargets {
    fn len(&self) -> usize {
        match self {
            ProbeTargets::Classes { labels, .. } => labels.len(),
            ProbeTargets::Distributions(t) => t.nrows(),
        }
    }

    fn width(&self) -> usize {
        match self {
            ProbeTargets::Classes { num_classes, .. } => *num_classes,
            ProbeTargets::Distributions(t) => t.ncols(),
        }
    }

    /// Soft-target matrix (one-hot for classes).
    fn soft(&self) -> Array2<f64> {
        match self {
            ProbeTargets::Classes { labels, num_classes } => {
                let mut t = Array2::zeros((labels.len(), *num_classes));
                for (i, &l) in labels.iter().enumerate() {
                    t[[i, l]] = 1.0;
                }
                t
            }
            ProbeTargets::Distributions(t) => t.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    pub hidden_dim: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub test_fraction: f64,
    /// Share of the training portion held out for early stopping.
    pub holdout_fraction: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            hidden_dim: 256,
            learning_rate: 1e-3,
            batch_size: 32,
            max_epochs: 400,
            patience: 30,
            test_fraction: 0.2,
            holdout_fraction: 0.1,
        }
    }
}

/// A trained head: `Linear` has one layer, `Mlp` has hidden + output.
#[derive(Debug, Clone, PartialEq)]
pub struct Probe {
    pub head: ProbeHead,
    pub layers: Vec<Linear>,
}

impl Parameters for Probe {
    fn tensors(&self) -> Vec<(String, &[f64])> {
        let mut v = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            l.push_tensors(&format!("probe.layer{i}"), &mut v);
        }
        v
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut v = Vec::new();
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.push_tensors_mut(&format!("probe.layer{i}"), &mut v);
        }
        v
    }
}

struct ProbeForward {
    hidden_pre: Option<Array2<f64>>,
    hidden: Option<Array2<f64>>,
    logits: Array2<f64>,
}

impl Probe {
    fn new(head: ProbeHead, in_dim: usize, out_dim: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        let layers = match head {
            ProbeHead::Linear => vec![Linear::init(in_dim, out_dim, true, rng)],
            ProbeHead::Mlp => vec![
                Linear::init(in_dim, hidden, true, rng),
                Linear::init(hidden, out_dim, true, rng),
            ],
        };
        Probe { head, layers }
    }

    fn zeros_like(&self) -> Self {
        Probe {
            head: self.head,
            layers: self.layers.iter().map(Linear::zeros_like).collect(),
        }
    }

    fn run(&self, x: ArrayView2<f64>) -> Result<ProbeForward> {
        match self.layers.as_slice() {
            [out] => Ok(ProbeForward {
                hidden_pre: None,
                hidden: None,
                logits: out.forward(x)?,
            }),
            [hid, out] => {
                let pre = hid.forward(x)?;
                let h = nn::relu(&pre);
                let logits = out.forward(h.view())?;
                Ok(ProbeForward {
                    hidden_pre: Some(pre),
                    hidden: Some(h),
                    logits,
                })
            }
            _ => Err(Error::Shape("probe must have one or two layers".into())),
        }
    }

    pub fn predict_proba(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        Ok(nn::softmax_rows(self.run(x)?.logits.view()))
    }

    pub fn predict_classes(&self, x: ArrayView2<f64>) -> Result<Vec<usize>> {
        let logits = self.run(x)?.logits;
        Ok(logits
            .rows()
            .into_iter()
            .map(|r| {
                // first maximum wins
                let mut best = 0;
                for (i, &v) in r.iter().enumerate() {
                    if v > r[best] {
                        best = i;
                    }
                }
                best
            })
            .collect())
    }

    /// Mean soft-target cross-entropy and its gradient.
    fn loss_and_grad(&self, x: ArrayView2<f64>, targets: ArrayView2<f64>) -> Result<(f64, Probe)> {
        let fwd = self.run(x)?;
        let logp = nn::log_softmax_rows(fwd.logits.view());
        let n = x.nrows() as f64;
        let loss = -(&logp * &targets).sum() / n;
        let d_logits = (logp.mapv(f64::exp) - targets) / n;
        let mut grads = self.zeros_like();
        match (&fwd.hidden_pre, &fwd.hidden) {
            (Some(pre), Some(h)) => {
                let dh = self.layers[1].backward(h.view(), d_logits.view(), &mut grads.layers[1]);
                let dpre = nn::relu_backward(pre, dh);
                self.layers[0].backward(x, dpre.view(), &mut grads.layers[0]);
            }
            _ => {
                self.layers[0].backward(x, d_logits.view(), &mut grads.layers[0]);
            }
        }
        Ok((loss, grads))
    }

    fn loss(&self, x: ArrayView2<f64>, targets: ArrayView2<f64>) -> Result<f64> {
        let logp = nn::log_softmax_rows(self.run(x)?.logits.view());
        Ok(-(&logp * &targets).sum() / x.nrows() as f64)
    }
}

/// A probe with the train/test partition it was fitted on.
#[derive(Debug, Clone)]
pub struct ProbeRun {
    pub probe: Probe,
    pub train_idx: Vec<usize>,
    pub test_idx: Vec<usize>,
    /// Classes with no example in the training portion.
    pub missing_classes: Vec<usize>,
    pub epochs_run: usize,
}

fn shuffled(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut v: Vec<usize> = (0..n).collect();
    v.shuffle(rng);
    v
}

/// Splits rows 80/20 (seeded), fits `head` on the training part with Adam,
/// early-stopping on an inner holdout, and returns the best probe.
pub fn train_probe(
    embeddings: ArrayView2<f64>,
    targets: &ProbeTargets,
    head: ProbeHead,
    cfg: &ProbeConfig,
    seed: u64,
) -> Result<ProbeRun> {
    let n = embeddings.nrows();
    if targets.len() != n {
        return Err(Error::Shape(format!("{n} embeddings but {} targets", targets.len())));
    }
    if targets.width() < 2 {
        return Err(Error::InvalidArgument("probe needs at least 2 classes or K >= 2".into()));
    }
    if n < 5 {
        return Err(Error::InvalidArgument(format!("probe needs at least 5 samples, got {n}")));
    }
    if let ProbeTargets::Classes { labels, num_classes } = targets {
        if labels.iter().any(|&l| l >= *num_classes) {
            return Err(Error::InvalidArgument("label out of range".into()));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let order = shuffled(n, &mut rng);
    let n_test = ((cfg.test_fraction * n as f64).round() as usize).clamp(1, n - 2);
    let test_idx = order[..n_test].to_vec();
    let train_idx = order[n_test..].to_vec();
    let n_hold = ((cfg.holdout_fraction * train_idx.len() as f64).round() as usize).clamp(1, train_idx.len() - 1);
    let (hold_idx, fit_idx) = train_idx.split_at(n_hold);

    let missing_classes = match targets {
        ProbeTargets::Classes { labels, num_classes } => {
            let mut seen = vec![false; *num_classes];
            train_idx.iter().for_each(|&i| seen[labels[i]] = true);
            let missing: Vec<usize> = (0..*num_classes).filter(|&c| !seen[c]).collect();
            if !missing.is_empty() {
                log::warn!("classes {missing:?} absent from the probe training portion");
            }
            missing
        }
        ProbeTargets::Distributions(_) => Vec::new(),
    };

    let soft = targets.soft();
    let x_fit = embeddings.select(Axis(0), fit_idx);
    let t_fit = soft.select(Axis(0), fit_idx);
    let x_hold = embeddings.select(Axis(0), hold_idx);
    let t_hold = soft.select(Axis(0), hold_idx);

    let mut probe = Probe::new(head, embeddings.ncols(), targets.width(), cfg.hidden_dim, &mut rng);
    let adam_cfg = AdamConfig {
        learning_rate: cfg.learning_rate,
        ..AdamConfig::default()
    };
    let mut adam = AdamState::new(&probe);
    let mut best = (probe.loss(x_hold.view(), t_hold.view())?, probe.clone());
    let mut since_best = 0;
    let mut epochs_run = 0;
    let bs = cfg.batch_size.max(1);
    let mut perm: Vec<usize> = (0..fit_idx.len()).collect();

    for _ in 0..cfg.max_epochs {
        epochs_run += 1;
        perm.shuffle(&mut rng);
        for chunk in perm.chunks(bs) {
            let xb = x_fit.select(Axis(0), chunk);
            let tb = t_fit.select(Axis(0), chunk);
            let (_, g) = probe.loss_and_grad(xb.view(), tb.view())?;
            nn::adam_step(&mut probe, &g, &mut adam, &adam_cfg)?;
        }
        let hold = probe.loss(x_hold.view(), t_hold.view())?;
        if !hold.is_finite() {
            return Err(Error::NonFinite(format!("probe holdout loss at epoch {epochs_run}")));
        }
        if hold < best.0 {
            best = (hold, probe.clone());
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }

    Ok(ProbeRun {
        probe: best.1,
        train_idx,
        test_idx,
        missing_classes,
        epochs_run,
    })
}
