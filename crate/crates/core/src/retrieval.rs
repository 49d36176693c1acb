//! Text-to-location retrieval over a candidate grid: exact cosine scoring,
//! top-k ranking, and similarity-field exports (GeoJSON, CSV, SVG).

use std::cell::OnceCell;
use std::fmt::Write as _;
use std::io::Write;

use ndarray::{Array1, Array2, ArrayView1};
use serde::Serialize;
use serde_json::{json, Value};

use crate::embedding::{fallback_encode, EmbeddingStore};
use crate::poi::BoundingBox;
use crate::trainer::{self, Checkpoint};
use crate::{Error, Result};

/// Candidate locations, optionally arranged as a `width x height` lattice
/// (row 0 at the southern edge, row-major).
#[derive(Debug, Clone)]
pub struct CandidateGrid {
    pub coords: Vec<(f64, f64)>,
    /// `(width, height, bbox)` for rectangular grids.
    pub shape: Option<(usize, usize, BoundingBox)>,
    embeddings: OnceCell<Array2<f64>>,
}

impl CandidateGrid {
    /// Cell centers of a regular lattice over `bbox`.
    pub fn regular(bbox: BoundingBox, width: usize, height: usize) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidArgument("grid needs positive width and height".into()));
        }
        if !(bbox.width() > 0.0 && bbox.height() > 0.0) {
            return Err(Error::InvalidArgument("grid bounding box is degenerate".into()));
        }
        let (dx, dy) = (bbox.width() / width as f64, bbox.height() / height as f64);
        let mut coords = Vec::with_capacity(width * height);
        for r in 0..height {
            for c in 0..width {
                coords.push((bbox.min_lon + (c as f64 + 0.5) * dx, bbox.min_lat + (r as f64 + 0.5) * dy));
            }
        }
        Ok(CandidateGrid {
            coords,
            shape: Some((width, height, bbox)),
            embeddings: OnceCell::new(),
        })
    }

    /// Regular grid over the checkpoint's normalizer box.
    pub fn for_checkpoint(checkpoint: &Checkpoint, width: usize, height: usize) -> Result<Self> {
        Self::regular(checkpoint.normalizer.bbox, width, height)
    }

    pub fn custom(coords: Vec<(f64, f64)>) -> Self {
        CandidateGrid {
            coords,
            shape: None,
            embeddings: OnceCell::new(),
        }
    }

    /// Candidates whose embeddings are already known.
    pub fn with_embeddings(coords: Vec<(f64, f64)>, embeddings: Array2<f64>) -> Result<Self> {
        if coords.len() != embeddings.nrows() {
            return Err(Error::Shape(format!(
                "{} candidates but {} embeddings",
                coords.len(),
                embeddings.nrows()
            )));
        }
        let g = Self::custom(coords);
        let _ = g.embeddings.set(embeddings);
        Ok(g)
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    /// Encodes the candidates on first use.
    pub fn embed(&self, checkpoint: &Checkpoint) -> Result<&Array2<f64>> {
        if let Some(e) = self.embeddings.get() {
            return Ok(e);
        }
        let e = trainer::encode_locations(checkpoint, &self.coords)?;
        Ok(self.embeddings.get_or_init(|| e))
    }

    pub fn embeddings(&self) -> Result<&Array2<f64>> {
        self.embeddings
            .get()
            .ok_or_else(|| Error::InvalidArgument("candidate grid has not been embedded".into()))
    }

    /// Index of the lattice cell containing `(lon, lat)`.
    pub fn cell_of(&self, lon: f64, lat: f64) -> Option<usize> {
        let (w, h, b) = self.shape?;
        if !b.contains(lon, lat) {
            return None;
        }
        let c = (((lon - b.min_lon) / b.width() * w as f64) as usize).min(w - 1);
        let r = (((lat - b.min_lat) / b.height() * h as f64) as usize).min(h - 1);
        Some(r * w + c)
    }
}

/// Where a query's raw text vector comes from.
#[derive(Debug, Clone, Copy)]
pub enum QuerySource<'a> {
    /// Precomputed vector keyed by query id.
    Store { store: &'a EmbeddingStore, key: &'a str },
    /// Hashing encoder applied to the query text.
    Fallback { text: &'a str, seed: u64 },
    Raw(&'a [f64]),
}

/// Raw query vector through the checkpoint's text projection, unit norm.
pub fn embed_query(source: QuerySource<'_>, checkpoint: &Checkpoint) -> Result<Array1<f64>> {
    let text_dim = checkpoint.params.text_dim();
    let raw: Vec<f64> = match source {
        QuerySource::Store { store, key } => store
            .get(key)
            .ok_or_else(|| Error::MissingEmbedding(key.to_string()))?
            .iter()
            .map(|&v| v as f64)
            .collect(),
        QuerySource::Fallback { text, seed } => fallback_encode(text, text_dim, seed)?,
        QuerySource::Raw(v) => v.to_vec(),
    };
    let m = Array2::from_shape_vec((1, raw.len()), raw).expect("row vector");
    let z = trainer::embed_text(checkpoint, m.view())?;
    Ok(z.row(0).to_owned())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RankedLocation {
    pub index: usize,
    pub lon: f64,
    pub lat: f64,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RetrievalResult {
    pub query: String,
    pub ranked: Vec<RankedLocation>,
}

fn scores(query: ArrayView1<f64>, grid: &CandidateGrid) -> Result<Vec<f64>> {
    let emb = grid.embeddings()?;
    if emb.ncols() != query.len() {
        return Err(Error::Shape(format!(
            "query dim {} vs candidate dim {}",
            query.len(),
            emb.ncols()
        )));
    }
    Ok(emb.rows().into_iter().map(|r| r.dot(&query)).collect())
}

/// Exact top-`k` by dot product; ties go to the lower candidate index.
pub fn topk(query: ArrayView1<f64>, grid: &CandidateGrid, k: usize, label: &str) -> Result<RetrievalResult> {
    if grid.is_empty() {
        return Err(Error::InvalidArgument("empty candidate grid".into()));
    }
    if k == 0 || k > grid.len() {
        return Err(Error::InvalidArgument(format!(
            "k = {k} must be in 1..={} (candidate count)",
            grid.len()
        )));
    }
    let s = scores(query, grid)?;
    let mut order: Vec<usize> = (0..s.len()).collect();
    order.sort_by(|&a, &b| s[b].total_cmp(&s[a]).then(a.cmp(&b)));
    let ranked = order[..k]
        .iter()
        .map(|&i| RankedLocation {
            index: i,
            lon: grid.coords[i].0,
            lat: grid.coords[i].1,
            score: s[i],
        })
        .collect();
    Ok(RetrievalResult {
        query: label.to_string(),
        ranked,
    })
}

/// Per-candidate similarity for one query.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityField {
    pub coords: Vec<(f64, f64)>,
    pub scores: Vec<f64>,
    pub shape: Option<(usize, usize, BoundingBox)>,
}

pub fn similarity_field(query: ArrayView1<f64>, grid: &CandidateGrid) -> Result<SimilarityField> {
    Ok(SimilarityField {
        coords: grid.coords.clone(),
        scores: scores(query, grid)?,
        shape: grid.shape,
    })
}

fn point_feature(lon: f64, lat: f64, similarity: f64, rank: Option<usize>) -> Value {
    let mut props = json!({ "similarity": similarity });
    if let Some(r) = rank {
        props["rank"] = json!(r);
    }
    json!({
        "type": "Feature",
        "geometry": { "type": "Point", "coordinates": [lon, lat] },
        "properties": props,
    })
}

impl RetrievalResult {
    /// FeatureCollection of the ranked points with 1-based `rank`.
    pub fn to_geojson(&self) -> Value {
        let features: Vec<Value> = self
            .ranked
            .iter()
            .enumerate()
            .map(|(i, r)| point_feature(r.lon, r.lat, r.score, Some(i + 1)))
            .collect();
        json!({ "type": "FeatureCollection", "features": features })
    }
}

impl SimilarityField {
    /// FeatureCollection with one point per candidate; candidates present
    /// in `ranked` also carry their rank.
    pub fn to_geojson(&self, ranked: Option<&RetrievalResult>) -> Value {
        let mut rank = vec![None; self.scores.len()];
        if let Some(r) = ranked {
            for (i, loc) in r.ranked.iter().enumerate() {
                if let Some(slot) = rank.get_mut(loc.index) {
                    *slot = Some(i + 1);
                }
            }
        }
        let features: Vec<Value> = self
            .coords
            .iter()
            .zip(&self.scores)
            .zip(rank)
            .map(|((&(lon, lat), &s), r)| point_feature(lon, lat, s, r))
            .collect();
        json!({ "type": "FeatureCollection", "features": features })
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["lon", "lat", "similarity"])?;
        for (&(lon, lat), s) in self.coords.iter().zip(&self.scores) {
            w.write_record([lon.to_string(), lat.to_string(), s.to_string()])?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }

    /// Heatmap with one square per cell, colors ramped linearly over the
    /// score range (north up). Rectangular grids only.
    pub fn to_svg(&self, cell_px: usize) -> Result<String> {
        let (w, h, _) = self
            .shape
            .ok_or_else(|| Error::InvalidArgument("SVG heatmap needs a rectangular grid".into()))?;
        let lo = self.scores.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = self.scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let px = cell_px.max(1);
        let mut svg = String::new();
        let _ = writeln!(
            svg,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{}" height="{}" viewBox="0 0 {} {}" shape-rendering="crispEdges">"#,
            w * px,
            h * px,
            w * px,
            h * px
        );
        let _ = writeln!(svg, "<desc>similarity range [{lo}, {hi}]</desc>");
        for (i, &s) in self.scores.iter().enumerate() {
            let (r, c) = (i / w, i % w);
            let t = if hi > lo { (s - lo) / (hi - lo) } else { 0.5 };
            let _ = writeln!(
                svg,
                r#"<rect x="{}" y="{}" width="{px}" height="{px}" fill="{}"/>"#,
                c * px,
                (h - 1 - r) * px,
                ramp(t)
            );
        }
        svg.push_str("</svg>\n");
        Ok(svg)
    }
}

/// Linear RGB interpolation from dark blue (0) to yellow (1).
fn ramp(t: f64) -> String {
    let (a, b) = ([0x30u8, 0x12, 0x6f], [0xfd, 0xe7, 0x25]);
    let mix = |x: u8, y: u8| (x as f64 + (y as f64 - x as f64) * t.clamp(0.0, 1.0)).round() as u8;
    format!("#{:02x}{:02x}{:02x}", mix(a[0], b[0]), mix(a[1], b[1]), mix(a[2], b[2]))
}
