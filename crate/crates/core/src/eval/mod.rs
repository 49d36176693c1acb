//! Downstream probes on frozen location embeddings: land-use
//! classification (LUC), socioeconomic distribution mapping (SDM), and the
//! description-variant ablation.

pub mod metrics;
pub mod probe;
pub mod report;

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::embedding::{self, EmbeddingStore};
use crate::poi::{self, check_lon_lat, column_indices, parse_f64, DescriptionVariant, PoiRecord};
use crate::trainer::{self, Checkpoint, TrainConfig};
use crate::{Error, Result};

pub use metrics::{distribution_metrics, macro_prf, DistributionMetrics, KlDirection, MacroPrf};
pub use probe::{train_probe, Probe, ProbeConfig, ProbeHead, ProbeRun, ProbeTargets};
pub use report::{write_table_csv, EvalReport, MetricSummary};

/// A labelled land-use sample location.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LucSample {
    pub lon: f64,
    pub lat: f64,
    pub label: usize,
}

/// A region with its target class-proportion vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SdmRegion {
    pub region_id: String,
    pub lon: f64,
    pub lat: f64,
    pub target: Vec<f64>,
}

pub fn load_luc_csv(path: impl AsRef<Path>) -> Result<Vec<LucSample>> {
    let path = path.as_ref();
    read_luc_csv(std::fs::File::open(path).map_err(|e| Error::io(path, e))?)
}

/// Reads `lon,lat,label` rows.
pub fn read_luc_csv<R: Read>(reader: R) -> Result<Vec<LucSample>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let cols = column_indices(&rdr.headers()?.clone(), &["lon", "lat", "label"])?;
    let mut out = Vec::new();
    for row in rdr.records() {
        let row = row?;
        let line = row.position().map(|p| p.line() as usize).unwrap_or(0);
        let lon = parse_f64(&row[cols[0]], "coordinate", line)?;
        let lat = parse_f64(&row[cols[1]], "coordinate", line)?;
        check_lon_lat(lon, lat).map_err(|m| Error::line(line, m))?;
        let label = row[cols[2]]
            .trim()
            .parse::<usize>()
            .map_err(|_| Error::line(line, format!("invalid label `{}`", &row[cols[2]])))?;
        out.push(LucSample { lon, lat, label });
    }
    Ok(out)
}

pub fn write_luc_csv<W: Write>(samples: &[LucSample], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["lon", "lat", "label"])?;
    for s in samples {
        w.write_record([s.lon.to_string(), s.lat.to_string(), s.label.to_string()])?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

pub fn load_sdm_csv(path: impl AsRef<Path>) -> Result<Vec<SdmRegion>> {
    let path = path.as_ref();
    read_sdm_csv(std::fs::File::open(path).map_err(|e| Error::io(path, e))?)
}

/// Reads `region_id,lon,lat,p_1..p_K` rows; every target must sum to 1
/// within 1e-6.
pub fn read_sdm_csv<R: Read>(reader: R) -> Result<Vec<SdmRegion>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let headers = rdr.headers()?.clone();
    let cols = column_indices(&headers, &["region_id", "lon", "lat"])?;
    let mut p_cols = Vec::new();
    for k in 1.. {
        match headers.iter().position(|h| h.trim() == format!("p_{k}")) {
            Some(i) => p_cols.push(i),
            None => break,
        }
    }
    if p_cols.len() < 2 {
        return Err(Error::Format("missing column `p_1`..`p_K` (need K >= 2)".into()));
    }
    let mut out = Vec::new();
    for row in rdr.records() {
        let row = row?;
        let line = row.position().map(|p| p.line() as usize).unwrap_or(0);
        let lon = parse_f64(&row[cols[1]], "coordinate", line)?;
        let lat = parse_f64(&row[cols[2]], "coordinate", line)?;
        check_lon_lat(lon, lat).map_err(|m| Error::line(line, m))?;
        let target = p_cols
            .iter()
            .map(|&c| parse_f64(&row[c], "proportion", line))
            .collect::<Result<Vec<f64>>>()?;
        let sum: f64 = target.iter().sum();
        if target.iter().any(|&p| p < 0.0) || (sum - 1.0).abs() > 1e-6 {
            return Err(Error::line(line, "target is not a probability vector"));
        }
        out.push(SdmRegion {
            region_id: row[cols[0]].trim().to_string(),
            lon,
            lat,
            target,
        });
    }
    Ok(out)
}

pub fn write_sdm_csv<W: Write>(regions: &[SdmRegion], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let k = regions.first().map(|r| r.target.len()).unwrap_or(0);
    let mut header = vec!["region_id".to_string(), "lon".into(), "lat".into()];
    header.extend((1..=k).map(|i| format!("p_{i}")));
    w.write_record(&header)?;
    for r in regions {
        let mut row = vec![r.region_id.clone(), r.lon.to_string(), r.lat.to_string()];
        row.extend(r.target.iter().map(|p| p.to_string()));
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

/// How a region's embedding is formed from the location encoder.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum RegionEmbedding {
    #[default]
    Centroid,
    /// Mean embedding over a `points_per_side^2` lattice in the square of
    /// half-width `radius_deg` around the centroid.
    InteriorMean { radius_deg: f64, points_per_side: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalOptions {
    pub probe: ProbeConfig,
    pub kl_direction: KlDirection,
    pub region_embedding: RegionEmbedding,
    /// LUC class count; defaults to `max label + 1`.
    pub num_classes: Option<usize>,
}

/// Probes land-use labels from location embeddings, one report per head
/// with macro precision/recall/F1 over `seeds`.
pub fn run_luc(
    checkpoint: &Checkpoint,
    samples: &[LucSample],
    heads: &[ProbeHead],
    seeds: &[u64],
    opts: &EvalOptions,
) -> Result<Vec<EvalReport>> {
    if samples.is_empty() || seeds.is_empty() {
        return Err(Error::InvalidArgument("need samples and at least one seed".into()));
    }
    let coords: Vec<(f64, f64)> = samples.iter().map(|s| (s.lon, s.lat)).collect();
    let emb = trainer::encode_locations(checkpoint, &coords)?;
    let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    let num_classes = opts
        .num_classes
        .unwrap_or_else(|| labels.iter().max().map_or(0, |m| m + 1));
    let targets = ProbeTargets::Classes {
        labels: labels.clone(),
        num_classes,
    };

    heads
        .iter()
        .map(|&head| {
            let (mut p, mut r, mut f) = (Vec::new(), Vec::new(), Vec::new());
            let mut notes = Vec::new();
            for &seed in seeds {
                let run = train_probe(emb.view(), &targets, head, &opts.probe, seed)?;
                if !run.missing_classes.is_empty() {
                    notes.push(format!("seed {seed}: classes {:?} absent from training portion", run.missing_classes));
                }
                let x_test = emb.select(Axis(0), &run.test_idx);
                let y_test: Vec<usize> = run.test_idx.iter().map(|&i| labels[i]).collect();
                let pred = run.probe.predict_classes(x_test.view())?;
                let m = macro_prf(&pred, &y_test, num_classes)?;
                p.push(m.precision);
                r.push(m.recall);
                f.push(m.f1);
            }
            Ok(EvalReport {
                task: "luc".into(),
                head,
                seeds: seeds.to_vec(),
                config_hash: checkpoint.config_hash.clone(),
                metrics: vec![
                    MetricSummary::new("precision", p),
                    MetricSummary::new("recall", r),
                    MetricSummary::new("f1", f),
                ],
                notes,
            })
        })
        .collect()
}

fn region_embeddings(checkpoint: &Checkpoint, regions: &[SdmRegion], mode: RegionEmbedding) -> Result<Array2<f64>> {
    match mode {
        RegionEmbedding::Centroid => {
            let coords: Vec<(f64, f64)> = regions.iter().map(|r| (r.lon, r.lat)).collect();
            trainer::encode_locations(checkpoint, &coords)
        }
        RegionEmbedding::InteriorMean {
            radius_deg,
            points_per_side,
        } => {
            let k = points_per_side.max(1);
            let offsets: Vec<f64> = if k == 1 {
                vec![0.0]
            } else {
                (0..k).map(|i| -radius_deg + 2.0 * radius_deg * i as f64 / (k - 1) as f64).collect()
            };
            let mut coords = Vec::with_capacity(regions.len() * k * k);
            for r in regions {
                for &dy in &offsets {
                    for &dx in &offsets {
                        coords.push((r.lon + dx, r.lat + dy));
                    }
                }
            }
            let all = trainer::encode_locations(checkpoint, &coords)?;
            let d = all.ncols();
            let mut out = Array2::zeros((regions.len(), d));
            for (i, mut row) in out.rows_mut().into_iter().enumerate() {
                let block = all.slice(ndarray::s![i * k * k..(i + 1) * k * k, ..]);
                row.assign(&block.mean_axis(Axis(0)).expect("non-empty block"));
            }
            Ok(out)
        }
    }
}

/// Probes region class proportions, one report per head with mean L1,
/// Chebyshev and KL over the test regions for each seed.
pub fn run_sdm(
    checkpoint: &Checkpoint,
    regions: &[SdmRegion],
    heads: &[ProbeHead],
    seeds: &[u64],
    opts: &EvalOptions,
) -> Result<Vec<EvalReport>> {
    if regions.is_empty() || seeds.is_empty() {
        return Err(Error::InvalidArgument("need regions and at least one seed".into()));
    }
    let k = regions[0].target.len();
    if regions.iter().any(|r| r.target.len() != k) {
        return Err(Error::Shape("regions disagree on K".into()));
    }
    let emb = region_embeddings(checkpoint, regions, opts.region_embedding)?;
    let targets = Array2::from_shape_fn((regions.len(), k), |(i, j)| regions[i].target[j]);
    let probe_targets = ProbeTargets::Distributions(targets.clone());

    heads
        .iter()
        .map(|&head| {
            let (mut l1, mut ch, mut kl) = (Vec::new(), Vec::new(), Vec::new());
            for &seed in seeds {
                let run = train_probe(emb.view(), &probe_targets, head, &opts.probe, seed)?;
                let pred = run.probe.predict_proba(emb.select(Axis(0), &run.test_idx).view())?;
                let truth = targets.select(Axis(0), &run.test_idx);
                let p_rows: Vec<Vec<f64>> = pred.rows().into_iter().map(|r| r.to_vec()).collect();
                let t_rows: Vec<Vec<f64>> = truth.rows().into_iter().map(|r| r.to_vec()).collect();
                let m = metrics::mean_distribution_metrics(&p_rows, &t_rows, opts.kl_direction)?;
                l1.push(m.l1);
                ch.push(m.chebyshev);
                kl.push(m.kl);
            }
            Ok(EvalReport {
                task: "sdm".into(),
                head,
                seeds: seeds.to_vec(),
                config_hash: checkpoint.config_hash.clone(),
                metrics: vec![
                    MetricSummary::new("l1", l1),
                    MetricSummary::new("chebyshev", ch),
                    MetricSummary::new("kl", kl),
                ],
                notes: Vec::new(),
            })
        })
        .collect()
}

/// One cell of the ablation grid: a description variant paired with the
/// text vectors computed from it.
#[derive(Debug, Clone)]
pub struct AblationArm {
    pub variant: DescriptionVariant,
    pub source_tag: String,
    pub store: EmbeddingStore,
    /// Keep only the first `n` dimensions of the store.
    pub truncate: Option<usize>,
}

impl AblationArm {
    pub fn label(&self) -> String {
        format!("{}@{}", self.variant, self.source_tag)
    }
}

#[derive(Debug, Clone)]
pub struct AblationRow {
    pub variant: DescriptionVariant,
    pub source_tag: String,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub luc: Vec<EvalReport>,
    pub sdm: Vec<EvalReport>,
}

impl AblationRow {
    pub fn label(&self) -> String {
        format!("{}@{}", self.variant, self.source_tag)
    }
}

/// Trains one model per arm from `base` (overriding the description
/// variant) and evaluates it on whichever of LUC/SDM data is non-empty.
#[allow(clippy::too_many_arguments)]
pub fn run_ablation(
    records: &[PoiRecord],
    arms: &[AblationArm],
    base: &TrainConfig,
    luc: &[LucSample],
    sdm: &[SdmRegion],
    heads: &[ProbeHead],
    seeds: &[u64],
    opts: &EvalOptions,
) -> Result<Vec<AblationRow>> {
    arms.iter()
        .map(|arm| {
            let store = match arm.truncate {
                Some(k) => embedding::truncate_dims(&arm.store, k)?,
                None => arm.store.clone(),
            };
            let cfg = TrainConfig {
                description_variant: arm.variant,
                ..base.clone()
            };
            log::info!("ablation arm {}", arm.label());
            let outcome = trainer::train(records, &store, &cfg)?;
            let ck = &outcome.checkpoint;
            Ok(AblationRow {
                variant: arm.variant,
                source_tag: arm.source_tag.clone(),
                best_epoch: ck.epoch,
                best_val_loss: ck.best_val_loss,
                luc: if luc.is_empty() { vec![] } else { run_luc(ck, luc, heads, seeds, opts)? },
                sdm: if sdm.is_empty() { vec![] } else { run_sdm(ck, sdm, heads, seeds, opts)? },
            })
        })
        .collect()
}

/// Combined table with columns `variant,task,metric,mean,std`: LUC F1 and
/// SDM KL per head, raw (unscaled) values.
pub fn write_ablation_csv<W: Write>(rows: &[AblationRow], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["variant", "task", "metric", "mean", "std"])?;
    for row in rows {
        for (task, reports, metric) in [("luc", &row.luc, "f1"), ("sdm", &row.sdm, "kl")] {
            for r in reports {
                if let Some(m) = r.metric(metric) {
                    w.write_record([
                        row.label(),
                        task.to_string(),
                        format!("{metric}[{}]", r.head),
                        m.mean.to_string(),
                        m.std.to_string(),
                    ])?;
                }
            }
        }
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

/// Text vectors for `records` rendered with `variant`, from the hashing
/// encoder.
pub fn fallback_variant_store(
    records: &[PoiRecord],
    variant: DescriptionVariant,
    dim: usize,
    seed: u64,
) -> Result<EmbeddingStore> {
    let descs: Vec<_> = records.iter().map(|r| poi::render_description(r, variant)).collect();
    embedding::fallback_store(descs.iter().map(|d| (d.poi_id.as_str(), d.text.as_str())), dim, seed)
}
