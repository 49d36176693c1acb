//! POI records, coordinate normalization, description templates and
//! train/validation splits.

use std::collections::HashSet;
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Header of the canonical POI interchange CSV.
pub const POI_CSV_HEADER: [&str; 6] = ["id", "lon", "lat", "name", "category_l1", "category_l2"];

/// One point of interest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoiRecord {
    pub id: String,
    pub lon: f64,
    pub lat: f64,
    pub name: String,
    /// First-level category, e.g. "Attractions".
    pub category_l1: String,
    /// Second-level class, e.g. "Museums".
    pub category_l2: String,
}

impl PoiRecord {
    /// Checks coordinate ranges and non-empty text fields.
    pub fn validate(&self) -> std::result::Result<(), String> {
        check_lon_lat(self.lon, self.lat)?;
        for (field, value) in [
            ("id", &self.id),
            ("name", &self.name),
            ("category_l1", &self.category_l1),
            ("category_l2", &self.category_l2),
        ] {
            if value.trim().is_empty() {
                return Err(format!("empty {field}"));
            }
        }
        Ok(())
    }
}

pub(crate) fn check_lon_lat(lon: f64, lat: f64) -> std::result::Result<(), String> {
    if !lon.is_finite() || !lat.is_finite() {
        return Err("non-numeric coordinate".into());
    }
    if !(-180.0..=180.0).contains(&lon) || !(-90.0..=90.0).contains(&lat) {
        return Err("coordinate out of range".into());
    }
    Ok(())
}

/// Looks up the positions of `wanted` columns in a CSV header, failing with
/// the first missing column name.
pub(crate) fn column_indices(headers: &csv::StringRecord, wanted: &[&str]) -> Result<Vec<usize>> {
    wanted
        .iter()
        .map(|name| {
            headers
                .iter()
                .position(|h| h.trim() == *name)
                .ok_or_else(|| Error::Format(format!("missing column `{name}`")))
        })
        .collect()
}

pub(crate) fn parse_f64(field: &str, what: &str, line: usize) -> Result<f64> {
    field
        .trim()
        .parse::<f64>()
        .map_err(|_| Error::line(line, format!("non-numeric {what} `{field}`")))
}

/// Loads POIs from a CSV file with header `id,lon,lat,name,category_l1,category_l2`.
pub fn load_poi_csv(path: impl AsRef<Path>) -> Result<Vec<PoiRecord>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_poi_csv(file)
}

/// Reader-based variant of [`load_poi_csv`]. Row order is preserved.
pub fn read_poi_csv<R: Read>(reader: R) -> Result<Vec<PoiRecord>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let cols = column_indices(&headers, &POI_CSV_HEADER)?;

    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for row in rdr.records() {
        let row = row?;
        let line = row.position().map(|p| p.line() as usize).unwrap_or(0);
        let get = |i: usize| row.get(cols[i]).unwrap_or("");
        let lon = parse_f64(get(1), "coordinate", line)?;
        let lat = parse_f64(get(2), "coordinate", line)?;
        let rec = PoiRecord {
            id: get(0).trim().to_string(),
            lon,
            lat,
            name: get(3).to_string(),
            category_l1: get(4).to_string(),
            category_l2: get(5).to_string(),
        };
        rec.validate().map_err(|m| Error::line(line, m))?;
        if !seen.insert(rec.id.clone()) {
            return Err(Error::line(line, format!("duplicate id `{}`", rec.id)));
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn write_poi_csv(path: impl AsRef<Path>, records: &[PoiRecord]) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_poi_csv_to(file, records)
}

pub fn write_poi_csv_to<W: Write>(writer: W, records: &[PoiRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(POI_CSV_HEADER)?;
    for r in records {
        w.write_record([
            r.id.as_str(),
            &r.lon.to_string(),
            &r.lat.to_string(),
            &r.name,
            &r.category_l1,
            &r.category_l2,
        ])?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

/// Model input coordinate in `[-1, 1]^2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizedCoord {
    pub x: f64,
    pub y: f64,
}

/// Axis-aligned lon/lat bounding box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub min_lon: f64,
    pub min_lat: f64,
    pub max_lon: f64,
    pub max_lat: f64,
}

impl BoundingBox {
    pub fn width(&self) -> f64 {
        self.max_lon - self.min_lon
    }

    pub fn height(&self) -> f64 {
        self.max_lat - self.min_lat
    }

    pub fn contains(&self, lon: f64, lat: f64) -> bool {
        (self.min_lon..=self.max_lon).contains(&lon) && (self.min_lat..=self.max_lat).contains(&lat)
    }
}

/// Affine map from a stored bounding box onto `[-1, 1]^2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoordNormalizer {
    pub bbox: BoundingBox,
}

/// Fraction of the data extent added on each side of the fitted box.
pub const NORMALIZER_MARGIN: f64 = 0.01;

impl CoordNormalizer {
    pub fn from_bbox(bbox: BoundingBox) -> Result<Self> {
        if !(bbox.width() > 0.0) || !(bbox.height() > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "degenerate bounding box ({} x {})",
                bbox.width(),
                bbox.height()
            )));
        }
        Ok(CoordNormalizer { bbox })
    }

    pub fn normalize(&self, lon: f64, lat: f64) -> NormalizedCoord {
        let b = &self.bbox;
        NormalizedCoord {
            x: 2.0 * (lon - b.min_lon) / b.width() - 1.0,
            y: 2.0 * (lat - b.min_lat) / b.height() - 1.0,
        }
    }

    pub fn denormalize(&self, c: NormalizedCoord) -> (f64, f64) {
        let b = &self.bbox;
        (
            b.min_lon + (c.x + 1.0) * 0.5 * b.width(),
            b.min_lat + (c.y + 1.0) * 0.5 * b.height(),
        )
    }
}

/// Fits a normalizer to the records' extent plus a 1% margin per side.
pub fn fit_normalizer(records: &[PoiRecord]) -> Result<CoordNormalizer> {
    if records.len() < 2 {
        return Err(Error::InvalidArgument(
            "need at least 2 records to fit a normalizer".into(),
        ));
    }
    let mut b = BoundingBox {
        min_lon: f64::INFINITY,
        min_lat: f64::INFINITY,
        max_lon: f64::NEG_INFINITY,
        max_lat: f64::NEG_INFINITY,
    };
    for r in records {
        b.min_lon = b.min_lon.min(r.lon);
        b.max_lon = b.max_lon.max(r.lon);
        b.min_lat = b.min_lat.min(r.lat);
        b.max_lat = b.max_lat.max(r.lat);
    }
    if b.width() <= 0.0 || b.height() <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "degenerate bounding box ({} x {})",
            b.width(),
            b.height()
        )));
    }
    let (mx, my) = (b.width() * NORMALIZER_MARGIN, b.height() * NORMALIZER_MARGIN);
    b.min_lon -= mx;
    b.max_lon += mx;
    b.min_lat -= my;
    b.max_lat += my;
    CoordNormalizer::from_bbox(b)
}

/// Which parts of a POI go into its description.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DescriptionVariant {
    NameAndType,
    NameOnly,
    TypeOnly,
}

impl DescriptionVariant {
    pub const ALL: [DescriptionVariant; 3] = [
        DescriptionVariant::NameAndType,
        DescriptionVariant::NameOnly,
        DescriptionVariant::TypeOnly,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            DescriptionVariant::NameAndType => "name_and_type",
            DescriptionVariant::NameOnly => "name_only",
            DescriptionVariant::TypeOnly => "type_only",
        }
    }
}

impl fmt::Display for DescriptionVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DescriptionVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "name_and_type" | "name_type" | "full" => Ok(DescriptionVariant::NameAndType),
            "name_only" | "name" => Ok(DescriptionVariant::NameOnly),
            "type_only" | "type" => Ok(DescriptionVariant::TypeOnly),
            other => Err(Error::InvalidArgument(format!(
                "unknown description variant `{other}`"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Description {
    pub poi_id: String,
    pub text: String,
    pub variant: DescriptionVariant,
}

/// Renders the description sentence fed to the text encoder. Fields are
/// inserted verbatim.
pub fn render_description(record: &PoiRecord, variant: DescriptionVariant) -> Description {
    let text = match variant {
        DescriptionVariant::NameAndType => format!(
            "A place of {}, a type of {}, named {}.",
            record.category_l2, record.category_l1, record.name
        ),
        DescriptionVariant::TypeOnly => format!(
            "A place of {}, a type of {}.",
            record.category_l2, record.category_l1
        ),
        DescriptionVariant::NameOnly => format!("A place named {}.", record.name),
    };
    Description {
        poi_id: record.id.clone(),
        text,
        variant,
    }
}

/// Disjoint train/validation id lists.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train_ids: Vec<String>,
    pub val_ids: Vec<String>,
    pub seed: u64,
}

/// Seeded random split; ids keep their dataset order within each side.
///
/// The validation size is `round(val_fraction * N)`, clamped to `[1, N-1]`
/// so both sides are non-empty.
pub fn split_dataset(records: &[PoiRecord], val_fraction: f64, seed: u64) -> Result<DatasetSplit> {
    let n = records.len();
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 records to split, got {n}"
        )));
    }
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "val_fraction must be in (0, 1), got {val_fraction}"
        )));
    }
    let n_val = ((val_fraction * n as f64).round() as usize).clamp(1, n - 1);

    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let mut is_val = vec![false; n];
    for &i in &order[..n_val] {
        is_val[i] = true;
    }

    let (mut train_ids, mut val_ids) = (Vec::with_capacity(n - n_val), Vec::with_capacity(n_val));
    for (r, v) in records.iter().zip(is_val) {
        if v {
            val_ids.push(r.id.clone());
        } else {
            train_ids.push(r.id.clone());
        }
    }
    Ok(DatasetSplit {
        train_ids,
        val_ids,
        seed,
    })
}

impl DatasetSplit {
    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}
