//! Synthetic cities: zoned POI layouts with known land-use labels and
//! per-zone socioeconomic distributions, for hermetic end-to-end runs.

use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::eval::{LucSample, SdmRegion};
use crate::poi::{BoundingBox, PoiRecord};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategorySpec {
    pub l1: String,
    pub l2: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZoneSpec {
    pub name: String,
    pub categories: Vec<CategorySpec>,
    /// Words combined into POI names.
    pub name_vocab: Vec<String>,
    /// Target distribution of regions whose centroid falls in this zone.
    pub sdm_distribution: Vec<f64>,
}

/// Rectangular blocks tiling the bounding box, row 0 at the southern edge.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ZoneLayout {
    pub rows: usize,
    pub cols: usize,
    /// Zone index per block, row-major. When absent, blocks get a balanced
    /// seeded assignment (identity if there is one block per zone).
    #[serde(default)]
    pub assignment: Option<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub bbox: BoundingBox,
    pub layout: ZoneLayout,
    pub zones: Vec<ZoneSpec>,
    pub num_pois: usize,
    pub num_luc_samples: usize,
    /// SDM regions form a `rows x cols` grid over the bounding box.
    pub sdm_rows: usize,
    pub sdm_cols: usize,
    /// Number of vocabulary words per POI name.
    #[serde(default = "default_name_words")]
    pub name_words: usize,
    /// Append ` #<index>` to every name so each POI is textually unique.
    #[serde(default)]
    pub unique_names: bool,
}

fn default_name_words() -> usize {
    2
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCity {
    pub records: Vec<PoiRecord>,
    pub luc_samples: Vec<LucSample>,
    pub sdm_regions: Vec<SdmRegion>,
    /// Zone of each record, parallel to `records`.
    pub record_zones: Vec<usize>,
    /// Resolved block-to-zone assignment.
    pub assignment: Vec<usize>,
}

fn words(list: &[&str]) -> Vec<String> {
    list.iter().map(|s| s.to_string()).collect()
}

fn cats(list: &[(&str, &str)]) -> Vec<CategorySpec> {
    list.iter()
        .map(|(a, b)| CategorySpec {
            l1: a.to_string(),
            l2: b.to_string(),
        })
        .collect()
}

/// Four stock zones with disjoint categories and name vocabularies.
fn stock_zones() -> Vec<ZoneSpec> {
    vec![
        ZoneSpec {
            name: "commercial".into(),
            categories: cats(&[
                ("Retail", "Clothing Shops"),
                ("Retail", "Department Stores"),
                ("Eating and Drinking", "Restaurants"),
                ("Eating and Drinking", "Cafes"),
            ]),
            name_vocab: words(&["Market", "Plaza", "Boutique", "Emporium", "Galleria", "Bazaar", "Arcade", "Exchange"]),
            sdm_distribution: vec![0.35, 0.30, 0.15, 0.12, 0.08],
        },
        ZoneSpec {
            name: "residential".into(),
            categories: cats(&[
                ("Education", "Primary Schools"),
                ("Health", "Medical Practices"),
                ("Community", "Libraries"),
                ("Community", "Places of Worship"),
            ]),
            name_vocab: words(&["Meadow", "Cottage", "Terrace", "Villa", "Gardens", "Lane", "Close", "Homestead"]),
            sdm_distribution: vec![0.10, 0.20, 0.40, 0.20, 0.10],
        },
        ZoneSpec {
            name: "park".into(),
            categories: cats(&[
                ("Sport and Leisure", "Playgrounds"),
                ("Sport and Leisure", "Sports Grounds"),
                ("Attractions", "Gardens"),
                ("Attractions", "Nature Reserves"),
            ]),
            name_vocab: words(&["Oak", "Willow", "Fern", "Heath", "Lakeside", "Grove", "Woodland", "Green"]),
            sdm_distribution: vec![0.05, 0.15, 0.20, 0.25, 0.35],
        },
        ZoneSpec {
            name: "industrial".into(),
            categories: cats(&[
                ("Manufacturing", "Factories"),
                ("Transport", "Freight Depots"),
                ("Manufacturing", "Engineering Works"),
                ("Transport", "Warehouses"),
            ]),
            name_vocab: words(&["Forge", "Steel", "Foundry", "Dock", "Crane", "Mill", "Works", "Depot"]),
            sdm_distribution: vec![0.05, 0.10, 0.15, 0.40, 0.30],
        },
    ]
}

const DEMO_BBOX: BoundingBox = BoundingBox {
    min_lon: -0.25,
    min_lat: 51.45,
    max_lon: 0.05,
    max_lat: 51.60,
};

impl SynthSpec {
    /// 2x2 layout, one stock zone per quadrant, disjoint categories and
    /// names, K = 5 target classes.
    pub fn four_quadrants(num_pois: usize) -> Self {
        SynthSpec {
            bbox: DEMO_BBOX,
            layout: ZoneLayout {
                rows: 2,
                cols: 2,
                assignment: None,
            },
            zones: stock_zones(),
            num_pois,
            num_luc_samples: 600,
            sdm_rows: 12,
            sdm_cols: 12,
            name_words: 2,
            unique_names: false,
        }
    }

    /// Zones sharing one category list and differing only in name
    /// vocabulary, tiled over a `blocks x blocks` grid so that zone
    /// membership is not a simple function of position.
    pub fn shared_categories(num_pois: usize, blocks: usize) -> Self {
        let shared = cats(&[
            ("Retail", "Convenience Stores"),
            ("Eating and Drinking", "Pubs"),
            ("Community", "Halls"),
            ("Sport and Leisure", "Clubs"),
        ]);
        let zones = stock_zones()
            .into_iter()
            .map(|z| ZoneSpec {
                categories: shared.clone(),
                ..z
            })
            .collect();
        SynthSpec {
            layout: ZoneLayout {
                rows: blocks,
                cols: blocks,
                assignment: None,
            },
            zones,
            ..Self::four_quadrants(num_pois)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.zones.len() < 2 {
            return Err(Error::InvalidArgument("synthetic city needs at least 2 zones".into()));
        }
        if self.layout.rows == 0 || self.layout.cols == 0 || self.sdm_rows == 0 || self.sdm_cols == 0 {
            return Err(Error::InvalidArgument("layout and SDM grids need at least one cell".into()));
        }
        if !(self.bbox.width() > 0.0 && self.bbox.height() > 0.0) {
            return Err(Error::InvalidArgument("degenerate synthetic bounding box".into()));
        }
        if self.name_words == 0 {
            return Err(Error::InvalidArgument("name_words must be at least 1".into()));
        }
        let k = self.zones[0].sdm_distribution.len();
        for z in &self.zones {
            if z.categories.is_empty() || z.name_vocab.is_empty() {
                return Err(Error::InvalidArgument(format!("zone `{}` has an empty vocabulary", z.name)));
            }
            if z.sdm_distribution.len() != k || k < 2 {
                return Err(Error::InvalidArgument(format!(
                    "zone `{}` distribution must have the common length K >= 2",
                    z.name
                )));
            }
            let sum: f64 = z.sdm_distribution.iter().sum();
            if z.sdm_distribution.iter().any(|&p| p < 0.0) || (sum - 1.0).abs() > 1e-6 {
                return Err(Error::InvalidArgument(format!(
                    "zone `{}` distribution is not a probability vector",
                    z.name
                )));
            }
        }
        if let Some(a) = &self.layout.assignment {
            if a.len() != self.layout.rows * self.layout.cols || a.iter().any(|&z| z >= self.zones.len()) {
                return Err(Error::InvalidArgument("layout assignment does not fit the grid".into()));
            }
        }
        Ok(())
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    fn resolve_assignment(&self, rng: &mut ChaCha8Rng) -> Vec<usize> {
        if let Some(a) = &self.layout.assignment {
            return a.clone();
        }
        let cells = self.layout.rows * self.layout.cols;
        let mut a: Vec<usize> = (0..cells).map(|i| i % self.zones.len()).collect();
        if cells != self.zones.len() {
            a.shuffle(rng);
        }
        a
    }

    fn zone_at(&self, assignment: &[usize], lon: f64, lat: f64) -> usize {
        let b = &self.bbox;
        let fx = ((lon - b.min_lon) / b.width()).clamp(0.0, 1.0 - 1e-12);
        let fy = ((lat - b.min_lat) / b.height()).clamp(0.0, 1.0 - 1e-12);
        let c = (fx * self.layout.cols as f64) as usize;
        let r = (fy * self.layout.rows as f64) as usize;
        assignment[r * self.layout.cols + c]
    }
}

/// Generates a city from `spec`; identical `(spec, seed)` gives identical
/// output.
pub fn generate_synthetic_city(spec: &SynthSpec, seed: u64) -> Result<SyntheticCity> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let assignment = spec.resolve_assignment(&mut rng);
    let b = spec.bbox;
    let point = |rng: &mut ChaCha8Rng| {
        (
            rng.random_range(b.min_lon..b.max_lon),
            rng.random_range(b.min_lat..b.max_lat),
        )
    };

    let mut records = Vec::with_capacity(spec.num_pois);
    let mut record_zones = Vec::with_capacity(spec.num_pois);
    for i in 0..spec.num_pois {
        let (lon, lat) = point(&mut rng);
        let z = spec.zone_at(&assignment, lon, lat);
        let zone = &spec.zones[z];
        let cat = zone.categories.choose(&mut rng).expect("validated non-empty");
        let mut name = (0..spec.name_words)
            .map(|_| zone.name_vocab.choose(&mut rng).expect("validated non-empty").as_str())
            .collect::<Vec<_>>()
            .join(" ");
        if spec.unique_names {
            name.push_str(&format!(" #{i}"));
        }
        records.push(PoiRecord {
            id: format!("poi{i:05}"),
            lon,
            lat,
            name,
            category_l1: cat.l1.clone(),
            category_l2: cat.l2.clone(),
        });
        record_zones.push(z);
    }

    let luc_samples = (0..spec.num_luc_samples)
        .map(|_| {
            let (lon, lat) = point(&mut rng);
            LucSample {
                lon,
                lat,
                label: spec.zone_at(&assignment, lon, lat),
            }
        })
        .collect();

    let mut sdm_regions = Vec::with_capacity(spec.sdm_rows * spec.sdm_cols);
    for r in 0..spec.sdm_rows {
        for c in 0..spec.sdm_cols {
            let lon = b.min_lon + (c as f64 + 0.5) * b.width() / spec.sdm_cols as f64;
            let lat = b.min_lat + (r as f64 + 0.5) * b.height() / spec.sdm_rows as f64;
            let z = spec.zone_at(&assignment, lon, lat);
            sdm_regions.push(SdmRegion {
                region_id: format!("r{r:03}_{c:03}"),
                lon,
                lat,
                target: spec.zones[z].sdm_distribution.clone(),
            });
        }
    }

    Ok(SyntheticCity {
        records,
        luc_samples,
        sdm_regions,
        record_zones,
        assignment,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::tokenize;
    use std::collections::{BTreeMap, BTreeSet, HashSet};

    #[test]
    fn quadrant_categories_are_disjoint() {
        let city = generate_synthetic_city(&SynthSpec::four_quadrants(500), 3).unwrap();
        assert_eq!(city.records.len(), 500);
        let mut per_zone: BTreeMap<usize, HashSet<String>> = BTreeMap::new();
        for (r, &z) in city.records.iter().zip(&city.record_zones) {
            per_zone.entry(z).or_default().insert(r.category_l2.clone());
        }
        assert_eq!(per_zone.len(), 4);
        let zones: Vec<_> = per_zone.values().collect();
        for i in 0..4 {
            for j in i + 1..4 {
                assert!(zones[i].is_disjoint(zones[j]));
            }
        }
        for r in &city.records {
            r.validate().unwrap();
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = SynthSpec::shared_categories(300, 6);
        let a = generate_synthetic_city(&spec, 11).unwrap();
        let b = generate_synthetic_city(&spec, 11).unwrap();
        assert_eq!(a, b);
        let mut ca = Vec::new();
        let mut cb = Vec::new();
        crate::poi::write_poi_csv_to(&mut ca, &a.records).unwrap();
        crate::poi::write_poi_csv_to(&mut cb, &b.records).unwrap();
        assert_eq!(ca, cb);
        assert_ne!(a.records, generate_synthetic_city(&spec, 12).unwrap().records);
    }

    #[test]
    fn empty_vocab_rejected() {
        let mut spec = SynthSpec::four_quadrants(10);
        spec.zones[1].name_vocab.clear();
        assert!(generate_synthetic_city(&spec, 0).is_err());
    }

    #[test]
    fn labels_and_targets_follow_zones() {
        let spec = SynthSpec::four_quadrants(50);
        let city = generate_synthetic_city(&spec, 0).unwrap();
        for s in &city.luc_samples {
            let east = s.lon > (spec.bbox.min_lon + spec.bbox.max_lon) / 2.0;
            let north = s.lat > (spec.bbox.min_lat + spec.bbox.max_lat) / 2.0;
            assert_eq!(s.label, 2 * north as usize + east as usize);
        }
        for r in &city.sdm_regions {
            let z = spec.zone_at(&city.assignment, r.lon, r.lat);
            assert_eq!(r.target, spec.zones[z].sdm_distribution);
        }
    }

    /// Leave-one-out nearest-centroid accuracy on bag-of-token features.
    fn nearest_centroid_accuracy(docs: &[Vec<String>], labels: &[usize], classes: usize) -> f64 {
        let vocab: BTreeSet<&String> = docs.iter().flatten().collect();
        let index: BTreeMap<&String, usize> = vocab.iter().enumerate().map(|(i, w)| (*w, i)).collect();
        let vecs: Vec<Vec<f64>> = docs
            .iter()
            .map(|d| {
                let mut v = vec![0.0; index.len()];
                d.iter().for_each(|w| v[index[w]] += 1.0);
                v
            })
            .collect();
        let mut correct = 0;
        for i in 0..docs.len() {
            let mut sums = vec![vec![0.0; index.len()]; classes];
            let mut counts = vec![0usize; classes];
            for j in (0..docs.len()).filter(|&j| j != i) {
                counts[labels[j]] += 1;
                sums[labels[j]].iter_mut().zip(&vecs[j]).for_each(|(s, v)| *s += v);
            }
            let best = (0..classes)
                .min_by(|&a, &b| {
                    let dist = |c: usize| {
                        sums[c]
                            .iter()
                            .zip(&vecs[i])
                            .map(|(s, v)| (s / counts[c].max(1) as f64 - v).powi(2))
                            .sum::<f64>()
                    };
                    dist(a).total_cmp(&dist(b))
                })
                .unwrap();
            correct += (best == labels[i]) as usize;
        }
        correct as f64 / docs.len() as f64
    }

    #[test]
    fn shared_categories_only_names_separate_zones() {
        let city = generate_synthetic_city(&SynthSpec::shared_categories(400, 6), 5).unwrap();
        let cat_docs: Vec<Vec<String>> = city
            .records
            .iter()
            .map(|r| tokenize(&format!("{} {}", r.category_l1, r.category_l2)))
            .collect();
        let name_docs: Vec<Vec<String>> = city.records.iter().map(|r| tokenize(&r.name)).collect();
        let by_cat = nearest_centroid_accuracy(&cat_docs, &city.record_zones, 4);
        let by_name = nearest_centroid_accuracy(&name_docs, &city.record_zones, 4);
        assert!(by_cat < 0.4, "categories separate zones: {by_cat}");
        assert!(by_name > 0.95, "names fail to separate zones: {by_name}");
    }
}
