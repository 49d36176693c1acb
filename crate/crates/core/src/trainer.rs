//! Contrastive training: text projection, symmetric InfoNCE over in-batch
//! negatives, the epoch loop with early stopping, and checkpoints.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{s, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::embedding::EmbeddingStore;
use crate::encoder::{self, EncoderDims, GridEncodingConfig, LocationEncoderParams};
use crate::nn::{self, AdamConfig, AdamState, Linear, Parameters};
use crate::poi::{self, CoordNormalizer, DescriptionVariant, PoiRecord};
use crate::{Error, Result};

/// Every hyperparameter of a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub temperature: f64,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    pub val_fraction: f64,
    pub seed: u64,
    /// Which description template the text vectors were computed from.
    pub description_variant: DescriptionVariant,
    pub grid: GridEncodingConfig,
    pub encoder: EncoderDims,
    /// L2-normalize raw text vectors before the projection.
    pub normalize_text_inputs: bool,
    /// Extra bias-free `d x d` map on the spatial branch.
    pub spatial_projection: bool,
    pub text_projection_bias: bool,
    pub weight_decay: f64,
    pub clip_grad_norm: Option<f64>,
    /// Return the parameters from the last epoch run rather than those
    /// with the lowest validation loss.
    pub keep_final: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 128,
            learning_rate: 1e-4,
            temperature: 0.07,
            max_epochs: 100,
            early_stop_patience: 10,
            val_fraction: 0.1,
            seed: 0,
            description_variant: DescriptionVariant::NameAndType,
            grid: GridEncodingConfig::default(),
            encoder: EncoderDims::default(),
            normalize_text_inputs: false,
            spatial_projection: false,
            text_projection_bias: false,
            weight_decay: 0.0,
            clip_grad_norm: None,
            keep_final: false,
        }
    }
}

impl TrainConfig {
    /// All validation problems at once; empty when the config is usable.
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            errs.push("temperature must be positive".to_string());
        }
        if self.batch_size < 2 {
            errs.push(format!("batch_size must be at least 2, got {}", self.batch_size));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            errs.push("learning_rate must be positive".to_string());
        }
        if self.max_epochs == 0 {
            errs.push("max_epochs must be at least 1".to_string());
        }
        if self.early_stop_patience == 0 {
            errs.push("early_stop_patience must be at least 1".to_string());
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            errs.push(format!("val_fraction must be in (0, 1), got {}", self.val_fraction));
        }
        if self.weight_decay < 0.0 {
            errs.push("weight_decay must be non-negative".to_string());
        }
        if let Some(c) = self.clip_grad_norm {
            if !(c > 0.0) {
                errs.push("clip_grad_norm must be positive".to_string());
            }
        }
        if let Err(e) = self.grid.validate() {
            errs.push(e);
        }
        if let Err(e) = self.encoder.validate() {
            errs.push(e);
        }
        errs
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            clip_grad_norm: self.clip_grad_norm,
            ..AdamConfig::default()
        }
    }

    /// SHA-256 of the canonical JSON form.
    pub fn config_hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }
}

/// Encoder plus the projections trained jointly with it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub encoder: LocationEncoderParams,
    /// `W_t`, stored `text_dim x d`.
    pub text_projection: Linear,
    pub spatial_projection: Option<Linear>,
}

impl ModelParams {
    pub fn init(cfg: &TrainConfig, text_dim: usize) -> Self {
        let encoder = encoder::init_params(&cfg.grid, &cfg.encoder, cfg.seed);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x9e37_79b9));
        let d = cfg.encoder.output_dim;
        let text_projection = Linear::init(text_dim, d, cfg.text_projection_bias, &mut rng);
        let spatial_projection = cfg.spatial_projection.then(|| Linear::init(d, d, false, &mut rng));
        ModelParams {
            encoder,
            text_projection,
            spatial_projection,
        }
    }

    pub fn zeros_like(&self) -> Self {
        ModelParams {
            encoder: self.encoder.zeros_like(),
            text_projection: self.text_projection.zeros_like(),
            spatial_projection: self.spatial_projection.as_ref().map(Linear::zeros_like),
        }
    }

    pub fn text_dim(&self) -> usize {
        self.text_projection.fan_in()
    }
}

impl Parameters for ModelParams {
    fn tensors(&self) -> Vec<(String, &[f64])> {
        let mut v = self.encoder.tensors();
        self.text_projection.push_tensors("text_projection", &mut v);
        if let Some(sp) = &self.spatial_projection {
            sp.push_tensors("spatial_projection", &mut v);
        }
        v
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut v = self.encoder.tensors_mut();
        self.text_projection.push_tensors_mut("text_projection", &mut v);
        if let Some(sp) = self.spatial_projection.as_mut() {
            sp.push_tensors_mut("spatial_projection", &mut v);
        }
        v
    }
}

/// Projects raw text vectors with `W_t` and L2-normalizes each row.
pub fn project_text(proj: &Linear, text: ArrayView2<f64>) -> Result<Array2<f64>> {
    Ok(nn::l2_normalize_rows(&proj.forward(text)?)?.0)
}

/// Loss value and gradients of the symmetric InfoNCE objective.
#[derive(Debug, Clone)]
pub struct InfoNce {
    pub loss: f64,
    pub grad_spatial: Array2<f64>,
    pub grad_text: Array2<f64>,
}

fn log_sum_exp<I: Iterator<Item = f64> + Clone>(values: I) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Symmetric cross-entropy over a square logit matrix whose diagonal holds
/// the positive pairs: the mean of the row-wise (spatial to text) and
/// column-wise (text to spatial) terms. Returns the loss and `dL/dlogits`.
pub fn infonce_from_logits(logits: ArrayView2<f64>) -> (f64, Array2<f64>) {
    let n = logits.nrows();
    let row_lse: Vec<f64> = (0..n).map(|i| log_sum_exp(logits.row(i).iter().copied())).collect();
    let col_lse: Vec<f64> = (0..n)
        .map(|j| log_sum_exp((0..n).map(|i| logits[[i, j]])))
        .collect();
    let row_sum: f64 = (0..n).map(|i| row_lse[i] - logits[[i, i]]).sum();
    let col_sum: f64 = (0..n).map(|i| col_lse[i] - logits[[i, i]]).sum();
    let loss = (row_sum + col_sum) / (2 * n) as f64;

    let scale = 1.0 / (2 * n) as f64;
    let mut grad = Array2::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            let l = logits[[i, j]];
            let mut g = (l - row_lse[i]).exp() + (l - col_lse[j]).exp();
            if i == j {
                g -= 2.0;
            }
            grad[[i, j]] = g * scale;
        }
    }
    (loss, grad)
}

/// Symmetric InfoNCE for unit-norm rows `Z_s` and `Z_p` at temperature `tau`.
pub fn infonce_loss(zs: ArrayView2<f64>, zp: ArrayView2<f64>, tau: f64) -> Result<InfoNce> {
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument("temperature must be positive".into()));
    }
    if zs.dim() != zp.dim() {
        return Err(Error::Shape(format!("Z_s {:?} vs Z_p {:?}", zs.dim(), zp.dim())));
    }
    let (n, d) = zs.dim();
    if n == 0 {
        return Err(Error::Shape("empty batch".into()));
    }
    for (name, z) in [("Z_s", &zs), ("Z_p", &zp)] {
        for (i, r) in z.rows().into_iter().enumerate() {
            let norm = r.dot(&r).sqrt();
            if (norm - 1.0).abs() > 1e-4 {
                return Err(Error::InvalidArgument(format!(
                    "{name} row {i} is not unit-norm (|z| = {norm})"
                )));
            }
        }
    }
    // Explicit dot loops keep the swapped call bit-identical to the transpose.
    let mut logits = Array2::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            let mut acc = 0.0;
            for k in 0..d {
                acc += zs[[i, k]] * zp[[j, k]];
            }
            logits[[i, j]] = acc / tau;
        }
    }
    let (loss, g_logits) = infonce_from_logits(logits.view());
    let g = g_logits / tau;
    Ok(InfoNce {
        loss,
        grad_spatial: g.dot(&zp),
        grad_text: g.t().dot(&zs),
    })
}

fn prepare_text(text: ArrayView2<f64>, normalize: bool) -> Result<Array2<f64>> {
    if normalize {
        Ok(nn::l2_normalize_rows(&text.to_owned())?.0)
    } else {
        Ok(text.to_owned())
    }
}

fn spatial_branch(params: &ModelParams, encodings: ArrayView2<f64>) -> Result<Array2<f64>> {
    let z = encoder::forward(&params.encoder, encodings)?;
    match &params.spatial_projection {
        Some(sp) => project_text(sp, z.view()),
        None => Ok(z),
    }
}

/// InfoNCE of one batch without gradients.
pub fn batch_loss(
    params: &ModelParams,
    encodings: ArrayView2<f64>,
    text: ArrayView2<f64>,
    tau: f64,
    normalize_text: bool,
) -> Result<f64> {
    let zs = spatial_branch(params, encodings)?;
    let zp = project_text(&params.text_projection, prepare_text(text, normalize_text)?.view())?;
    Ok(infonce_loss(zs.view(), zp.view(), tau)?.loss)
}

/// InfoNCE of one batch and its gradient with respect to every parameter,
/// back-propagated through both projections and the encoder.
pub fn batch_loss_and_grad(
    params: &ModelParams,
    encodings: ArrayView2<f64>,
    text: ArrayView2<f64>,
    tau: f64,
    normalize_text: bool,
) -> Result<(f64, ModelParams)> {
    let cache = encoder::forward_with_cache(&params.encoder, encodings)?;
    let text = prepare_text(text, normalize_text)?;
    let text_pre = params.text_projection.forward(text.view())?;
    let (zp, p_norms) = nn::l2_normalize_rows(&text_pre)?;

    let spatial = match &params.spatial_projection {
        Some(sp) => {
            let pre = sp.forward(cache.embeddings.view())?;
            Some(nn::l2_normalize_rows(&pre)?)
        }
        None => None,
    };
    let zs = spatial.as_ref().map(|s| &s.0).unwrap_or(&cache.embeddings);
    let out = infonce_loss(zs.view(), zp.view(), tau)?;

    let mut grads = params.zeros_like();
    let d_text_pre = nn::l2_normalize_rows_backward(&zp, &p_norms, out.grad_text.view());
    params
        .text_projection
        .backward(text.view(), d_text_pre.view(), &mut grads.text_projection);

    let d_enc = match (&params.spatial_projection, &spatial) {
        (Some(sp), Some((z2, n2))) => {
            let d_pre = nn::l2_normalize_rows_backward(z2, n2, out.grad_spatial.view());
            let g = grads.spatial_projection.as_mut().expect("shape mirrors params");
            sp.backward(cache.embeddings.view(), d_pre.view(), g)
        }
        _ => out.grad_spatial,
    };
    let (enc_grads, _) = encoder::backward(&params.encoder, &cache, d_enc.view())?;
    grads.encoder = enc_grads;
    Ok((out.loss, grads))
}

/// One row of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub epochs: Vec<EpochLog>,
}

impl TrainingLog {
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["epoch", "train_loss", "val_loss"])?;
        for e in &self.epochs {
            w.write_record([e.epoch.to_string(), e.train_loss.to_string(), e.val_loss.to_string()])?;
        }
        w.flush().map_err(|e| Error::io("<log>", e))?;
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(f)
    }
}

/// A trained model, self-sufficient for encoding new coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub config_hash: String,
    pub normalizer: CoordNormalizer,
    pub params: ModelParams,
    pub optimizer: AdamState,
    /// Epoch at which these parameters were taken (0 = initialization).
    pub epoch: usize,
    pub best_val_loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: TrainingLog,
    pub split: poi::DatasetSplit,
}

/// Batches of `batch_size` consecutive positions; the partial tail is
/// dropped. When there is no full batch, all positions form one batch.
fn batches(len: usize, batch_size: usize) -> Vec<std::ops::Range<usize>> {
    if len < batch_size {
        return if len == 0 { vec![] } else { vec![0..len] };
    }
    (0..len / batch_size)
        .map(|b| b * batch_size..(b + 1) * batch_size)
        .collect()
}

fn gather(m: &Array2<f64>, idx: &[usize]) -> Array2<f64> {
    m.select(Axis(0), idx)
}

/// Trains encoder and text projection on `records` paired with their text
/// vectors in `store`.
pub fn train(records: &[PoiRecord], store: &EmbeddingStore, config: &TrainConfig) -> Result<TrainOutcome> {
    let problems = config.validate();
    if !problems.is_empty() {
        return Err(Error::InvalidArgument(problems.join("; ")));
    }
    let normalizer = poi::fit_normalizer(records)?;
    let split = poi::split_dataset(records, config.val_fraction, config.seed)?;
    if config.batch_size > split.train_ids.len() {
        return Err(Error::InvalidArgument(format!(
            "batch_size {} exceeds training set size {}",
            config.batch_size,
            split.train_ids.len()
        )));
    }

    let ids: Vec<&str> = records.iter().map(|r| r.id.as_str()).collect();
    let text_all = store.matrix_for(&ids)?;
    let coords: Vec<_> = records.iter().map(|r| normalizer.normalize(r.lon, r.lat)).collect();
    let enc_all = encoder::grid_encode_batch(&coords, &config.grid);

    let pos: std::collections::HashMap<&str, usize> = ids.iter().enumerate().map(|(i, id)| (*id, i)).collect();
    let train_idx: Vec<usize> = split.train_ids.iter().map(|id| pos[id.as_str()]).collect();
    let val_idx: Vec<usize> = split.val_ids.iter().map(|id| pos[id.as_str()]).collect();

    let mut params = ModelParams::init(config, store.dim());
    let mut adam = AdamState::new(&params);
    let adam_cfg = config.adam();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x5eed));
    let tau = config.temperature;
    let norm_text = config.normalize_text_inputs;

    let val_batches: Vec<(Array2<f64>, Array2<f64>)> = batches(val_idx.len(), config.batch_size)
        .into_iter()
        .map(|r| (gather(&enc_all, &val_idx[r.clone()]), gather(&text_all, &val_idx[r])))
        .collect();
    let val_loss = |p: &ModelParams| -> Result<f64> {
        let mut total = 0.0;
        for (x, t) in &val_batches {
            total += batch_loss(p, x.view(), t.view(), tau, norm_text)?;
        }
        Ok(total / val_batches.len() as f64)
    };

    let config_hash = config.config_hash();
    let mut best = Checkpoint {
        config: config.clone(),
        config_hash: config_hash.clone(),
        normalizer,
        params: params.clone(),
        optimizer: adam.clone(),
        epoch: 0,
        best_val_loss: f64::INFINITY,
    };
    let mut log = TrainingLog::default();
    let mut since_best = 0;
    let mut order = train_idx.clone();

    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        let train_batches = batches(order.len(), config.batch_size);
        for (b, range) in train_batches.iter().enumerate() {
            let idx = &order[range.clone()];
            let x = gather(&enc_all, idx);
            let t = gather(&text_all, idx);
            let (loss, grads) = batch_loss_and_grad(&params, x.view(), t.view(), tau, norm_text)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!(
                    "training loss {loss} at epoch {epoch}, batch {b} (lr {}, tau {tau})",
                    config.learning_rate
                )));
            }
            nn::adam_step(&mut params, &grads, &mut adam, &adam_cfg)?;
            epoch_loss += loss;
        }
        let train_loss = epoch_loss / train_batches.len() as f64;
        let vl = val_loss(&params)?;
        if !vl.is_finite() {
            return Err(Error::NonFinite(format!("validation loss {vl} at epoch {epoch}")));
        }
        log.epochs.push(EpochLog {
            epoch,
            train_loss,
            val_loss: vl,
        });
        log::info!("epoch {epoch}: train {train_loss:.6} val {vl:.6}");

        if vl < best.best_val_loss {
            best.params = params.clone();
            best.optimizer = adam.clone();
            best.epoch = epoch;
            best.best_val_loss = vl;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.early_stop_patience {
                log::info!("early stop at epoch {epoch}, best epoch {}", best.epoch);
                break;
            }
        }
    }

    if config.keep_final {
        if let Some(last) = log.epochs.last() {
            best.params = params;
            best.optimizer = adam;
            best.epoch = last.epoch;
            best.best_val_loss = last.val_loss;
        }
    }

    Ok(TrainOutcome {
        checkpoint: best,
        log,
        split,
    })
}

/// Rows of encoded locations for the given lon/lat pairs, computed in
/// chunks. Pure in the checkpoint.
pub fn encode_locations(checkpoint: &Checkpoint, lon_lat: &[(f64, f64)]) -> Result<Array2<f64>> {
    let coords: Vec<_> = lon_lat
        .iter()
        .map(|&(lon, lat)| checkpoint.normalizer.normalize(lon, lat))
        .collect();
    encode_normalized(checkpoint, &coords)
}

pub fn encode_normalized(checkpoint: &Checkpoint, coords: &[poi::NormalizedCoord]) -> Result<Array2<f64>> {
    const CHUNK: usize = 2048;
    let d = checkpoint.params.encoder.output_dim();
    let mut out = Array2::zeros((coords.len(), d));
    for (c, chunk) in coords.chunks(CHUNK).enumerate() {
        let x = encoder::grid_encode_batch(chunk, &checkpoint.config.grid);
        let z = spatial_branch(&checkpoint.params, x.view())?;
        out.slice_mut(s![c * CHUNK..c * CHUNK + chunk.len(), ..]).assign(&z);
    }
    Ok(out)
}

/// Text side of the model: raw vectors to unit `d`-vectors, the same path
/// used during training.
pub fn embed_text(checkpoint: &Checkpoint, raw: ArrayView2<f64>) -> Result<Array2<f64>> {
    if raw.ncols() != checkpoint.params.text_dim() {
        return Err(Error::Shape(format!(
            "text vectors have dim {}, checkpoint expects {}",
            raw.ncols(),
            checkpoint.params.text_dim()
        )));
    }
    let t = prepare_text(raw, checkpoint.config.normalize_text_inputs)?;
    project_text(&checkpoint.params.text_projection, t.view())
}

const CKPT_MAGIC: &[u8; 4] = b"GCKP";
const CKPT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    len: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    config: TrainConfig,
    config_hash: String,
    normalizer: CoordNormalizer,
    text_dim: usize,
    epoch: usize,
    best_val_loss: f64,
    optimizer_step: u64,
    tensors: Vec<TensorEntry>,
}

impl Checkpoint {
    /// Binary layout: `b"GCKP"`, `u32` version, `u64` header length, JSON
    /// header, then little-endian `f64` values: every parameter tensor in
    /// [`Parameters::tensors`] order, then the Adam first moments and
    /// second moments in the same order.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let header = CheckpointHeader {
            config: self.config.clone(),
            config_hash: self.config_hash.clone(),
            normalizer: self.normalizer,
            text_dim: self.params.text_dim(),
            epoch: self.epoch,
            best_val_loss: self.best_val_loss,
            optimizer_step: self.optimizer.step,
            tensors: self
                .params
                .tensors()
                .into_iter()
                .map(|(name, t)| TensorEntry { name, len: t.len() })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let io = |e| Error::io("<checkpoint>", e);
        w.write_all(CKPT_MAGIC).map_err(io)?;
        w.write_all(&CKPT_VERSION.to_le_bytes()).map_err(io)?;
        w.write_all(&(json.len() as u64).to_le_bytes()).map_err(io)?;
        w.write_all(&json).map_err(io)?;
        let mut buf = Vec::with_capacity(8 * (self.params.num_parameters() + self.optimizer.num_values()));
        for (_, t) in self.params.tensors() {
            t.iter().for_each(|v| buf.extend_from_slice(&v.to_le_bytes()));
        }
        for moments in [&self.optimizer.m, &self.optimizer.v] {
            for t in moments {
                t.iter().for_each(|v| buf.extend_from_slice(&v.to_le_bytes()));
            }
        }
        w.write_all(&buf).map_err(io)
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes).map_err(|e| Error::io("<checkpoint>", e))?;
        if bytes.len() < 16 || &bytes[..4] != CKPT_MAGIC {
            return Err(Error::Format("not a checkpoint file (magic mismatch)".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != CKPT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let hend = 16usize
            .checked_add(hlen)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| Error::Format("truncated checkpoint header".into()))?;
        let header: CheckpointHeader = serde_json::from_slice(&bytes[16..hend])?;

        let mut params = ModelParams::init(&header.config, header.text_dim).zeros_like();
        let layout: Vec<(String, usize)> = params.tensors().into_iter().map(|(n, t)| (n, t.len())).collect();
        let stored: Vec<(String, usize)> = header.tensors.iter().map(|t| (t.name.clone(), t.len)).collect();
        if layout != stored {
            return Err(Error::Format("checkpoint tensor layout does not match its config".into()));
        }
        let n = params.num_parameters();
        let payload = &bytes[hend..];
        if payload.len() != 8 * 3 * n {
            return Err(Error::Format(format!(
                "checkpoint payload has {} bytes, expected {}",
                payload.len(),
                24 * n
            )));
        }
        let values: Vec<f64> = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        params.assign_flat(&values[..n])?;
        let split = |flat: &[f64]| {
            let mut off = 0;
            layout
                .iter()
                .map(|(_, len)| {
                    let v = flat[off..off + len].to_vec();
                    off += len;
                    v
                })
                .collect::<Vec<_>>()
        };
        let optimizer = AdamState {
            step: header.optimizer_step,
            m: split(&values[n..2 * n]),
            v: split(&values[2 * n..]),
        };
        Ok(Checkpoint {
            config: header.config,
            config_hash: header.config_hash,
            normalizer: header.normalizer,
            params,
            optimizer,
            epoch: header.epoch,
            best_val_loss: header.best_val_loss,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(std::io::BufReader::new(f))
    }

    /// A checkpoint wrapping freshly initialized parameters (epoch 0).
    pub fn untrained(config: &TrainConfig, normalizer: CoordNormalizer, text_dim: usize) -> Self {
        let params = ModelParams::init(config, text_dim);
        let optimizer = AdamState::new(&params);
        Checkpoint {
            config: config.clone(),
            config_hash: config.config_hash(),
            normalizer,
            params,
            optimizer,
            epoch: 0,
            best_val_loss: f64::INFINITY,
        }
    }
}
