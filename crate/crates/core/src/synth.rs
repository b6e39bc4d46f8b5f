//! Synthetic grid cities with planted communities.
//!
//! Every modality is driven by the community of each cell: trips stay inside
//! the community most of the time, POI categories follow a per-community
//! signature, and check-in volume is linear in the community one-hot.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::rectangles_geojson;
use crate::ingest::{
    write_adjacency, write_checkins, write_labels, write_pois, write_regions, write_text, write_trips,
    AdjacencySet, CheckinVolumes, GroundTruthLabels, PoiField, PoiRecord, RegionRegistry, TripRecord,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub width: usize,
    pub height: usize,
    pub communities: usize,
    pub trips_per_region: usize,
    pub pois_per_region: usize,
    /// Number of distinct POI categories.
    pub categories: usize,
    /// Probability that a POI draws its category from the community signature.
    pub poi_signature: f64,
    /// Fraction of trips whose destination lies in the origin's community.
    pub within_fraction: f64,
    /// Cells moved to a different community after block assignment.
    pub enclaves: usize,
    /// Check-in noise standard deviation as a fraction of the signal.
    pub checkin_noise: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            width: 6,
            height: 6,
            communities: 4,
            trips_per_region: 5,
            pois_per_region: 4,
            categories: 12,
            poi_signature: 0.6,
            within_fraction: 0.8,
            enclaves: 4,
            checkin_noise: 0.1,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let n = self.width * self.height;
        if n == 0 || self.communities == 0 || self.communities > n {
            return Err(Error::contract(format!(
                "need 1 <= communities ({}) <= regions ({n})",
                self.communities
            )));
        }
        if self.categories < self.communities {
            return Err(Error::contract("need at least one POI category per community"));
        }
        for (name, p) in [("within_fraction", self.within_fraction), ("poi_signature", self.poi_signature)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::contract(format!("{name} must lie in [0, 1], got {p}")));
            }
        }
        if self.checkin_noise < 0.0 {
            return Err(Error::contract("checkin_noise must be nonnegative"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct SynthCity {
    pub config: SynthConfig,
    pub registry: RegionRegistry,
    /// `[x0, y0, x1, y1]` per region.
    pub rects: Vec<[f64; 4]>,
    pub adjacency: AdjacencySet,
    pub trips: Vec<TripRecord>,
    pub pois: Vec<PoiRecord>,
    pub checkins: CheckinVolumes,
    pub labels: GroundTruthLabels,
}

/// File names written by [`SynthCity::write`].
pub mod files {
    pub const REGIONS: &str = "regions.csv";
    pub const TRIPS: &str = "trips.csv";
    pub const ADJACENCY: &str = "adjacency.csv";
    pub const POLYGONS: &str = "regions.geojson";
    pub const POIS: &str = "pois.csv";
    pub const CHECKINS: &str = "checkins.csv";
    pub const LABELS: &str = "labels.csv";
}

/// Block layout: `floor(sqrt(C))` rows of `ceil(C / rows)` blocks, ids clamped
/// to `C − 1`.
pub fn block_community(x: usize, y: usize, cfg: &SynthConfig) -> usize {
    let by = ((cfg.communities as f64).sqrt().floor() as usize).max(1);
    let bx = cfg.communities.div_ceil(by);
    let cx = x * bx / cfg.width;
    let cy = y * by / cfg.height;
    (cy * bx + cx).min(cfg.communities - 1)
}

pub fn grid_adjacency(width: usize, height: usize) -> AdjacencySet {
    let mut adj = AdjacencySet::new(width * height);
    for y in 0..height {
        for x in 0..width {
            for (dx, dy) in [(1i64, 0i64), (0, 1), (1, 1), (1, -1)] {
                let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                if nx >= 0 && ny >= 0 && (nx as usize) < width && (ny as usize) < height {
                    adj.insert(y * width + x, ny as usize * width + nx as usize);
                }
            }
        }
    }
    adj
}

fn signature_categories(c: usize, cfg: &SynthConfig) -> Vec<usize> {
    let per = cfg.categories / cfg.communities;
    (c * per..(c + 1) * per).collect()
}

pub fn generate_city(cfg: &SynthConfig) -> Result<SynthCity> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (w, h) = (cfg.width, cfg.height);
    let n = w * h;
    let registry = RegionRegistry::new((0..n).map(|i| format!("R{:03}", i)))?;
    let rects: Vec<[f64; 4]> = (0..n)
        .map(|i| {
            let (x, y) = ((i % w) as f64, (i / w) as f64);
            [x, y, x + 1.0, y + 1.0]
        })
        .collect();
    let mut labels: Vec<usize> = (0..n).map(|i| block_community(i % w, i / w, cfg)).collect();
    if cfg.communities > 1 {
        for _ in 0..cfg.enclaves.min(n) {
            let cell = rng.random_range(0..n);
            let shift = rng.random_range(1..cfg.communities);
            labels[cell] = (labels[cell] + shift) % cfg.communities;
        }
    }
    let members: Vec<Vec<usize>> = (0..cfg.communities)
        .map(|c| (0..n).filter(|&i| labels[i] == c).collect())
        .collect();

    let mut counts: BTreeMap<(usize, usize), u64> = BTreeMap::new();
    for o in 0..n {
        let own = &members[labels[o]];
        let others: Vec<usize> = (0..n).filter(|&j| labels[j] != labels[o]).collect();
        for _ in 0..cfg.trips_per_region {
            let inside = others.is_empty() || rng.random_bool(cfg.within_fraction);
            let d = if inside {
                own[rng.random_range(0..own.len())]
            } else {
                others[rng.random_range(0..others.len())]
            };
            *counts.entry((o, d)).or_insert(0) += 1;
        }
    }
    let trips = counts
        .into_iter()
        .map(|((origin, destination), count)| TripRecord {
            origin,
            destination,
            count,
        })
        .collect();

    const SOURCES: [&str; 3] = ["dcp", "dot", "parks"];
    let mut pois = Vec::with_capacity(n * cfg.pois_per_region);
    for i in 0..n {
        let sig = signature_categories(labels[i], cfg);
        for k in 0..cfg.pois_per_region {
            let cat = if rng.random_bool(cfg.poi_signature) {
                sig[rng.random_range(0..sig.len())]
            } else {
                rng.random_range(0..cfg.categories)
            };
            let domain = cat * cfg.communities / cfg.categories;
            let mut attributes = BTreeMap::new();
            attributes.insert(PoiField::FacilityT, format!("cat{cat}"));
            attributes.insert(PoiField::FaciDom, format!("dom{domain}"));
            attributes.insert(PoiField::Source, SOURCES[rng.random_range(0..SOURCES.len())].to_string());
            pois.push(PoiRecord {
                place_id: format!("P{i:03}_{k}"),
                region: i,
                attributes,
            });
        }
    }

    let checkins = labels
        .iter()
        .map(|&c| {
            let signal = 100.0 * (c + 1) as f64;
            let sd = cfg.checkin_noise * signal;
            let noise = if sd > 0.0 {
                Normal::new(0.0, sd).expect("positive sd").sample(&mut rng)
            } else {
                0.0
            };
            (signal + noise).max(0.0).round()
        })
        .collect();

    Ok(SynthCity {
        config: cfg.clone(),
        registry,
        rects,
        adjacency: grid_adjacency(w, h),
        trips,
        pois,
        checkins: CheckinVolumes(checkins),
        labels: GroundTruthLabels(labels),
    })
}

impl SynthCity {
    pub fn n(&self) -> usize {
        self.registry.len()
    }

    /// Fraction of trips (by count) whose endpoints share a community.
    pub fn within_fraction(&self) -> f64 {
        let (mut inside, mut total) = (0u64, 0u64);
        for t in &self.trips {
            total += t.count;
            if self.labels.0[t.origin] == self.labels.0[t.destination] {
                inside += t.count;
            }
        }
        inside as f64 / total.max(1) as f64
    }

    /// Write every input file plus the planted labels into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let reg = &self.registry;
        write_regions(dir.join(files::REGIONS), reg)?;
        write_trips(dir.join(files::TRIPS), reg, &self.trips)?;
        write_adjacency(dir.join(files::ADJACENCY), reg, &self.adjacency)?;
        let geo = rectangles_geojson(reg, &self.rects);
        write_text(
            dir.join(files::POLYGONS),
            &serde_json::to_string_pretty(&geo).expect("json value serializes"),
        )?;
        write_pois(dir.join(files::POIS), reg, &self.pois)?;
        write_checkins(dir.join(files::CHECKINS), reg, &self.checkins)?;
        write_labels(dir.join(files::LABELS), reg, &self.labels)
    }
}
