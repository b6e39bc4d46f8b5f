//! CSV loaders and writers for the pipeline inputs.
//!
//! Regions are declared once in `regions.csv`; every other file refers to
//! regions by identifier and is resolved through the [`RegionRegistry`].

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Canonical region index space `0..N`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RegionRegistry {
    ids: Vec<String>,
    index: HashMap<String, usize>,
}

impl RegionRegistry {
    pub fn new<S: Into<String>>(ids: impl IntoIterator<Item = S>) -> Result<Self> {
        let ids: Vec<String> = ids.into_iter().map(|s| s.into().trim().to_string()).collect();
        let mut index = HashMap::with_capacity(ids.len());
        for (i, id) in ids.iter().enumerate() {
            if id.is_empty() {
                return Err(Error::contract(format!("region {i} has an empty identifier")));
            }
            if index.insert(id.clone(), i).is_some() {
                return Err(Error::contract(format!("duplicate region identifier `{id}`")));
            }
        }
        Ok(Self { ids, index })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn id(&self, index: usize) -> &str {
        &self.ids[index]
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.index.get(id.trim()).copied()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TripRecord {
    pub origin: usize,
    pub destination: usize,
    pub count: u64,
}

/// Symmetric neighbor lists without self-membership.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AdjacencySet {
    neighbors: Vec<BTreeSet<usize>>,
}

impl AdjacencySet {
    pub fn new(n: usize) -> Self {
        Self {
            neighbors: vec![BTreeSet::new(); n],
        }
    }

    /// Add the undirected edge `a–b`; self-edges are ignored and reported as `false`.
    pub fn insert(&mut self, a: usize, b: usize) -> bool {
        if a == b {
            return false;
        }
        self.neighbors[a].insert(b);
        self.neighbors[b].insert(a);
        true
    }

    pub fn len(&self) -> usize {
        self.neighbors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.neighbors.is_empty()
    }

    pub fn neighbors(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        self.neighbors[i].iter().copied()
    }

    pub fn degree(&self, i: usize) -> usize {
        self.neighbors[i].len()
    }

    pub fn contains(&self, a: usize, b: usize) -> bool {
        self.neighbors[a].contains(&b)
    }

    /// Undirected edges with `a < b`, in lexicographic order.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.neighbors
            .iter()
            .enumerate()
            .flat_map(|(a, ns)| ns.iter().filter(move |&&b| b > a).map(move |&b| (a, b)))
    }

    pub fn is_symmetric(&self) -> bool {
        self.neighbors
            .iter()
            .enumerate()
            .all(|(a, ns)| !ns.contains(&a) && ns.iter().all(|&b| self.neighbors[b].contains(&a)))
    }
}

/// POI side-attribute fields, in the order the relation vocabulary uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PoiField {
    FacilityT,
    FaciDom,
    SegmentId,
    PriAdd,
    Bin,
    Sos,
    SafType,
    ComplexId,
    Source,
}

impl PoiField {
    pub const ALL: [PoiField; 9] = [
        PoiField::FacilityT,
        PoiField::FaciDom,
        PoiField::SegmentId,
        PoiField::PriAdd,
        PoiField::Bin,
        PoiField::Sos,
        PoiField::SafType,
        PoiField::ComplexId,
        PoiField::Source,
    ];

    /// Lower-case CSV column name.
    pub fn column(self) -> &'static str {
        match self {
            PoiField::FacilityT => "facility_t",
            PoiField::FaciDom => "faci_dom",
            PoiField::SegmentId => "segmentid",
            PoiField::PriAdd => "pri_add",
            PoiField::Bin => "bin",
            PoiField::Sos => "sos",
            PoiField::SafType => "saftype",
            PoiField::ComplexId => "complexid",
            PoiField::Source => "source",
        }
    }

    pub fn relation_name(self) -> &'static str {
        match self {
            PoiField::FacilityT => "FACILITY_T",
            PoiField::FaciDom => "FACI_DOM",
            PoiField::SegmentId => "SEGMENTID",
            PoiField::PriAdd => "PRI_ADD",
            PoiField::Bin => "BIN",
            PoiField::Sos => "SOS",
            PoiField::SafType => "SAFTYPE",
            PoiField::ComplexId => "COMPLEXID",
            PoiField::Source => "SOURCE",
        }
    }
}

impl fmt::Display for PoiField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.relation_name())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PoiRecord {
    pub place_id: String,
    pub region: usize,
    /// Present attributes only; `FacilityT` is always set.
    pub attributes: BTreeMap<PoiField, String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckinVolumes(pub Vec<f64>);

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GroundTruthLabels(pub Vec<usize>);

struct CsvTable {
    file: String,
    headers: Vec<String>,
    rows: Vec<(u64, csv::StringRecord)>,
}

impl CsvTable {
    fn read(path: &Path) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_path(path)
            .map_err(|e| Error::csv(path, e))?;
        let headers = reader
            .headers()
            .map_err(|e| Error::csv(path, e))?
            .iter()
            .map(|h| h.trim().to_ascii_lowercase())
            .collect();
        let mut rows = Vec::new();
        for rec in reader.records() {
            let rec = rec.map_err(|e| Error::csv(path, e))?;
            let line = rec.position().map_or(0, |p| p.line());
            rows.push((line, rec));
        }
        Ok(Self {
            file: path.display().to_string(),
            headers,
            rows,
        })
    }

    fn column(&self, name: &str) -> Option<usize> {
        self.headers.iter().position(|h| h == name)
    }

    fn require(&self, name: &str) -> Result<usize> {
        self.column(name).ok_or_else(|| Error::Validation {
            file: self.file.clone(),
            line: 1,
            message: format!("missing required column `{name}`"),
        })
    }

    fn invalid(&self, line: u64, message: impl Into<String>) -> Error {
        Error::Validation {
            file: self.file.clone(),
            line,
            message: message.into(),
        }
    }

    fn region(&self, reg: &RegionRegistry, line: u64, id: &str) -> Result<usize> {
        reg.index_of(id).ok_or_else(|| Error::UnknownRegion {
            file: self.file.clone(),
            line,
            region: id.to_string(),
        })
    }
}

pub fn load_regions(path: impl AsRef<Path>) -> Result<RegionRegistry> {
    let table = CsvTable::read(path.as_ref())?;
    let col = table.require("region_id")?;
    let ids: Vec<String> = table
        .rows
        .iter()
        .map(|(_, r)| r.get(col).unwrap_or("").to_string())
        .collect();
    RegionRegistry::new(ids).map_err(|e| table.invalid(0, e.to_string()))
}

pub fn load_trips(path: impl AsRef<Path>, reg: &RegionRegistry) -> Result<Vec<TripRecord>> {
    let table = CsvTable::read(path.as_ref())?;
    let o = table.require("origin")?;
    let d = table.require("destination")?;
    let c = table.column("count");
    table
        .rows
        .iter()
        .map(|(line, r)| {
            let origin = table.region(reg, *line, r.get(o).unwrap_or(""))?;
            let destination = table.region(reg, *line, r.get(d).unwrap_or(""))?;
            let count = match c.and_then(|c| r.get(c)).filter(|s| !s.is_empty()) {
                None => 1,
                Some(s) => {
                    let v: i64 = s
                        .parse()
                        .map_err(|_| table.invalid(*line, format!("bad trip count `{s}`")))?;
                    if v <= 0 {
                        return Err(table.invalid(*line, format!("trip count must be positive, got {v}")));
                    }
                    v as u64
                }
            };
            Ok(TripRecord {
                origin,
                destination,
                count,
            })
        })
        .collect()
}

/// Load an undirected edge list. Self-edges are dropped; each one produces a
/// warning string (also logged).
pub fn load_adjacency(
    path: impl AsRef<Path>,
    reg: &RegionRegistry,
) -> Result<(AdjacencySet, Vec<String>)> {
    let table = CsvTable::read(path.as_ref())?;
    let a = table.require("region_a")?;
    let b = table.require("region_b")?;
    let mut adj = AdjacencySet::new(reg.len());
    let mut warnings = Vec::new();
    for (line, r) in &table.rows {
        let ia = table.region(reg, *line, r.get(a).unwrap_or(""))?;
        let ib = table.region(reg, *line, r.get(b).unwrap_or(""))?;
        if !adj.insert(ia, ib) {
            let w = format!("{}:{line}: dropped self-edge on `{}`", table.file, reg.id(ia));
            log::warn!("{w}");
            warnings.push(w);
        }
    }
    Ok((adj, warnings))
}

pub fn load_pois(path: impl AsRef<Path>, reg: &RegionRegistry) -> Result<Vec<PoiRecord>> {
    let table = CsvTable::read(path.as_ref())?;
    let pid = table.require("place_id")?;
    let rid = table.require("region_id")?;
    table.require(PoiField::FacilityT.column())?;
    let fields: Vec<(PoiField, usize)> = PoiField::ALL
        .iter()
        .filter_map(|&f| table.column(f.column()).map(|c| (f, c)))
        .collect();
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(table.rows.len());
    for (line, r) in &table.rows {
        let place_id = r.get(pid).unwrap_or("").to_string();
        if place_id.is_empty() {
            return Err(table.invalid(*line, "empty place_id"));
        }
        if !seen.insert(place_id.clone()) {
            return Err(table.invalid(*line, format!("duplicate place_id `{place_id}`")));
        }
        let region = table.region(reg, *line, r.get(rid).unwrap_or(""))?;
        let attributes: BTreeMap<PoiField, String> = fields
            .iter()
            .filter_map(|&(f, c)| {
                let v = r.get(c).unwrap_or("").trim();
                (!v.is_empty()).then(|| (f, v.to_string()))
            })
            .collect();
        if !attributes.contains_key(&PoiField::FacilityT) {
            return Err(table.invalid(*line, format!("POI `{place_id}` has empty facility_t")));
        }
        out.push(PoiRecord {
            place_id,
            region,
            attributes,
        });
    }
    Ok(out)
}

/// Check-ins either pre-aggregated (`region_id,count`) or one event per row
/// (`region_id,timestamp`, counted here).
pub fn load_checkins(path: impl AsRef<Path>, reg: &RegionRegistry) -> Result<CheckinVolumes> {
    let table = CsvTable::read(path.as_ref())?;
    let rid = table.require("region_id")?;
    let count_col = table.column("count");
    if count_col.is_none() && table.column("timestamp").is_none() {
        return Err(table.invalid(1, "expected a `count` or `timestamp` column"));
    }
    let mut volumes = vec![0.0; reg.len()];
    for (line, r) in &table.rows {
        let region = table.region(reg, *line, r.get(rid).unwrap_or(""))?;
        let add = match count_col {
            Some(c) => {
                let s = r.get(c).unwrap_or("");
                let v: f64 = s
                    .parse()
                    .map_err(|_| table.invalid(*line, format!("bad check-in count `{s}`")))?;
                if !(v >= 0.0 && v.is_finite()) {
                    return Err(table.invalid(*line, format!("check-in count must be >= 0, got {s}")));
                }
                v
            }
            None => 1.0,
        };
        volumes[region] += add;
    }
    Ok(CheckinVolumes(volumes))
}

pub fn load_labels(path: impl AsRef<Path>, reg: &RegionRegistry) -> Result<GroundTruthLabels> {
    let table = CsvTable::read(path.as_ref())?;
    let rid = table.require("region_id")?;
    let dc = table.require("district")?;
    let mut labels: Vec<Option<usize>> = vec![None; reg.len()];
    for (line, r) in &table.rows {
        let region = table.region(reg, *line, r.get(rid).unwrap_or(""))?;
        let s = r.get(dc).unwrap_or("");
        let v: usize = s
            .parse()
            .map_err(|_| table.invalid(*line, format!("bad district label `{s}`")))?;
        if labels[region].replace(v).is_some() {
            return Err(table.invalid(*line, format!("duplicate label for `{}`", reg.id(region))));
        }
    }
    labels
        .into_iter()
        .enumerate()
        .map(|(i, l)| l.ok_or_else(|| table.invalid(0, format!("no label for region `{}`", reg.id(i)))))
        .collect::<Result<Vec<_>>>()
        .map(GroundTruthLabels)
}

fn write_csv(path: &Path, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
    w.write_record(header).map_err(|e| Error::csv(path, e))?;
    for row in rows {
        w.write_record(&row).map_err(|e| Error::csv(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_regions(path: impl AsRef<Path>, reg: &RegionRegistry) -> Result<()> {
    write_csv(path.as_ref(), &["region_id"], reg.ids().iter().map(|id| vec![id.clone()]))
}

pub fn write_trips(path: impl AsRef<Path>, reg: &RegionRegistry, trips: &[TripRecord]) -> Result<()> {
    write_csv(
        path.as_ref(),
        &["origin", "destination", "count"],
        trips.iter().map(|t| {
            vec![
                reg.id(t.origin).to_string(),
                reg.id(t.destination).to_string(),
                t.count.to_string(),
            ]
        }),
    )
}

pub fn write_adjacency(path: impl AsRef<Path>, reg: &RegionRegistry, adj: &AdjacencySet) -> Result<()> {
    write_csv(
        path.as_ref(),
        &["region_a", "region_b"],
        adj.edges()
            .map(|(a, b)| vec![reg.id(a).to_string(), reg.id(b).to_string()]),
    )
}

pub fn write_pois(path: impl AsRef<Path>, reg: &RegionRegistry, pois: &[PoiRecord]) -> Result<()> {
    let mut header = vec!["place_id", "region_id"];
    header.extend(PoiField::ALL.iter().map(|f| f.column()));
    write_csv(
        path.as_ref(),
        &header,
        pois.iter().map(|p| {
            let mut row = vec![p.place_id.clone(), reg.id(p.region).to_string()];
            row.extend(
                PoiField::ALL
                    .iter()
                    .map(|f| p.attributes.get(f).cloned().unwrap_or_default()),
            );
            row
        }),
    )
}

pub fn write_checkins(path: impl AsRef<Path>, reg: &RegionRegistry, v: &CheckinVolumes) -> Result<()> {
    write_csv(
        path.as_ref(),
        &["region_id", "count"],
        v.0.iter()
            .enumerate()
            .map(|(i, c)| vec![reg.id(i).to_string(), format!("{c}")]),
    )
}

pub fn write_labels(path: impl AsRef<Path>, reg: &RegionRegistry, l: &GroundTruthLabels) -> Result<()> {
    write_csv(
        path.as_ref(),
        &["region_id", "district"],
        l.0.iter()
            .enumerate()
            .map(|(i, d)| vec![reg.id(i).to_string(), d.to_string()]),
    )
}

/// Write raw text, creating parent directories.
pub fn write_text(path: impl AsRef<Path>, text: &str) -> Result<()> {
    let path = path.as_ref();
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}


/// Per-region matrix as CSV `region_id,v0,..,v{d-1}`.
pub fn write_region_matrix(path: impl AsRef<Path>, reg: &RegionRegistry, m: &Array2<f64>) -> Result<()> {
    let mut out = String::from("region_id");
    for k in 0..m.ncols() {
        out.push_str(&format!(",v{k}"));
    }
    out.push('\n');
    for (i, row) in m.rows().into_iter().enumerate() {
        out.push_str(reg.id(i));
        for x in row {
            out.push_str(&format!(",{x}"));
        }
        out.push('\n');
    }
    write_text(path, &out)
}

/// Inverse of [`write_region_matrix`]; every registry region must appear once.
pub fn load_region_matrix(path: impl AsRef<Path>, reg: &RegionRegistry) -> Result<Array2<f64>> {
    let table = CsvTable::read(path.as_ref())?;
    let rid = table.require("region_id")?;
    let value_cols: Vec<usize> = (0..table.headers.len()).filter(|&c| c != rid).collect();
    if value_cols.is_empty() {
        return Err(table.invalid(1, "no value columns"));
    }
    let mut m = Array2::from_elem((reg.len(), value_cols.len()), f64::NAN);
    let mut seen = vec![false; reg.len()];
    for (line, r) in &table.rows {
        let i = table.region(reg, *line, r.get(rid).unwrap_or(""))?;
        if std::mem::replace(&mut seen[i], true) {
            return Err(table.invalid(*line, format!("duplicate row for region `{}`", reg.id(i))));
        }
        for (k, &c) in value_cols.iter().enumerate() {
            let s = r.get(c).unwrap_or("");
            m[[i, k]] = s
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| table.invalid(*line, format!("bad value `{s}` in column `{}`", table.headers[c])))?;
        }
    }
    if let Some(i) = seen.iter().position(|s| !s) {
        return Err(table.invalid(0, format!("missing row for region `{}`", reg.id(i))));
    }
    Ok(m)
}
