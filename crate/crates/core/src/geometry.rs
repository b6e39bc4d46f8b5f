//! Region adjacency from GeoJSON boundaries.
//!
//! Two regions are neighbors when any of their boundary segments come within
//! `tolerance` of each other, so corner contact counts as adjacency.

use std::path::Path;

use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::ingest::{AdjacencySet, RegionRegistry};

pub const DEFAULT_TOLERANCE: f64 = 1e-9;

type Point = [f64; 2];

/// Boundary rings of one region (outer rings and holes alike).
#[derive(Clone, Debug)]
pub struct RegionShape {
    pub rings: Vec<Vec<Point>>,
    bbox: [f64; 4],
}

impl RegionShape {
    pub fn new(rings: Vec<Vec<Point>>) -> Self {
        let mut bbox = [f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY];
        for p in rings.iter().flatten() {
            bbox[0] = bbox[0].min(p[0]);
            bbox[1] = bbox[1].min(p[1]);
            bbox[2] = bbox[2].max(p[0]);
            bbox[3] = bbox[3].max(p[1]);
        }
        Self { rings, bbox }
    }

    fn segments(&self) -> impl Iterator<Item = (Point, Point)> + '_ {
        self.rings
            .iter()
            .flat_map(|ring| ring.windows(2).map(|w| (w[0], w[1])))
    }

    fn bbox_within(&self, other: &RegionShape, tol: f64) -> bool {
        self.bbox[0] <= other.bbox[2] + tol
            && other.bbox[0] <= self.bbox[2] + tol
            && self.bbox[1] <= other.bbox[3] + tol
            && other.bbox[1] <= self.bbox[3] + tol
    }

    /// Smallest distance between the two boundaries.
    pub fn boundary_distance(&self, other: &RegionShape) -> f64 {
        let mut best = f64::INFINITY;
        for (a0, a1) in self.segments() {
            for (b0, b1) in other.segments() {
                best = best.min(segment_distance(a0, a1, b0, b1));
                if best == 0.0 {
                    return 0.0;
                }
            }
        }
        best
    }
}

fn cross(o: Point, a: Point, b: Point) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

fn point_segment_distance(p: Point, a: Point, b: Point) -> f64 {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / len2).clamp(0.0, 1.0)
    };
    let (cx, cy) = (a[0] + t * dx, a[1] + t * dy);
    ((p[0] - cx).powi(2) + (p[1] - cy).powi(2)).sqrt()
}

fn segment_distance(a0: Point, a1: Point, b0: Point, b1: Point) -> f64 {
    let d1 = cross(b0, b1, a0);
    let d2 = cross(b0, b1, a1);
    let d3 = cross(a0, a1, b0);
    let d4 = cross(a0, a1, b1);
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0))
        && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0))
    {
        return 0.0;
    }
    point_segment_distance(a0, b0, b1)
        .min(point_segment_distance(a1, b0, b1))
        .min(point_segment_distance(b0, a0, a1))
        .min(point_segment_distance(b1, a0, a1))
}

fn feature_id(feature: &Value, idx: usize) -> String {
    match feature.pointer("/properties/region_id") {
        Some(Value::String(s)) => s.clone(),
        Some(Value::Number(n)) => n.to_string(),
        _ => format!("#{idx}"),
    }
}

fn parse_ring(v: &Value) -> Option<Vec<Point>> {
    let pts = v
        .as_array()?
        .iter()
        .map(|p| {
            let c = p.as_array()?;
            let (x, y) = (c.first()?.as_f64()?, c.get(1)?.as_f64()?);
            (x.is_finite() && y.is_finite()).then_some([x, y])
        })
        .collect::<Option<Vec<_>>>()?;
    if pts.len() < 4 {
        return None;
    }
    let mut pts = pts;
    if pts.first() != pts.last() {
        pts.push(pts[0]);
    }
    Some(pts)
}

fn parse_geometry(geom: &Value) -> std::result::Result<Vec<Vec<Point>>, String> {
    let kind = geom.get("type").and_then(Value::as_str).ok_or("missing geometry type")?;
    let coords = geom.get("coordinates").ok_or("missing coordinates")?;
    let polygons: Vec<&Value> = match kind {
        "Polygon" => vec![coords],
        "MultiPolygon" => coords.as_array().ok_or("coordinates not an array")?.iter().collect(),
        other => return Err(format!("unsupported geometry type `{other}`")),
    };
    let mut rings = Vec::new();
    for poly in polygons {
        for ring in poly.as_array().ok_or("polygon is not an array of rings")? {
            rings.push(parse_ring(ring).ok_or("ring needs at least 4 finite [x, y] positions")?);
        }
    }
    if rings.is_empty() {
        return Err("geometry has no rings".into());
    }
    Ok(rings)
}

/// Parse a FeatureCollection into one shape per registry region.
pub fn read_shapes(path: impl AsRef<Path>, reg: &RegionRegistry) -> Result<Vec<RegionShape>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let doc: Value = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
    shapes_from_value(&doc, reg)
}

pub fn shapes_from_value(doc: &Value, reg: &RegionRegistry) -> Result<Vec<RegionShape>> {
    let features = doc
        .get("features")
        .and_then(Value::as_array)
        .ok_or_else(|| Error::Geometry {
            feature: "<collection>".into(),
            message: "not a FeatureCollection".into(),
        })?;
    let mut rings_by_region: Vec<Vec<Vec<Point>>> = vec![Vec::new(); reg.len()];
    for (idx, f) in features.iter().enumerate() {
        let id = feature_id(f, idx);
        let region = reg.index_of(&id).ok_or_else(|| Error::Geometry {
            feature: id.clone(),
            message: "region_id not in registry".into(),
        })?;
        let geom = f.get("geometry").ok_or_else(|| Error::Geometry {
            feature: id.clone(),
            message: "missing geometry".into(),
        })?;
        let rings = parse_geometry(geom).map_err(|message| Error::Geometry {
            feature: id.clone(),
            message,
        })?;
        rings_by_region[region].extend(rings);
    }
    rings_by_region
        .into_iter()
        .enumerate()
        .map(|(i, rings)| {
            if rings.is_empty() {
                return Err(Error::Geometry {
                    feature: reg.id(i).to_string(),
                    message: "no feature for region".into(),
                });
            }
            Ok(RegionShape::new(rings))
        })
        .collect()
}

pub fn adjacency_from_shapes(shapes: &[RegionShape], tolerance: f64) -> AdjacencySet {
    let mut adj = AdjacencySet::new(shapes.len());
    for i in 0..shapes.len() {
        for j in i + 1..shapes.len() {
            if shapes[i].bbox_within(&shapes[j], tolerance)
                && shapes[i].boundary_distance(&shapes[j]) <= tolerance
            {
                adj.insert(i, j);
            }
        }
    }
    adj
}

pub fn adjacency_from_polygons(
    geojson_path: impl AsRef<Path>,
    reg: &RegionRegistry,
    tolerance: f64,
) -> Result<AdjacencySet> {
    let shapes = read_shapes(geojson_path, reg)?;
    Ok(adjacency_from_shapes(&shapes, tolerance))
}

/// FeatureCollection of axis-aligned rectangles, one per region.
pub fn rectangles_geojson(reg: &RegionRegistry, rects: &[[f64; 4]]) -> Value {
    let features: Vec<Value> = rects
        .iter()
        .enumerate()
        .map(|(i, &[x0, y0, x1, y1])| {
            json!({
                "type": "Feature",
                "properties": { "region_id": reg.id(i) },
                "geometry": {
                    "type": "Polygon",
                    "coordinates": [[[x0, y0], [x1, y0], [x1, y1], [x0, y1], [x0, y0]]]
                }
            })
        })
        .collect();
    json!({ "type": "FeatureCollection", "features": features })
}

/// Copy of a FeatureCollection with an integer property set on every feature.
pub fn annotate_features(doc: &Value, reg: &RegionRegistry, property: &str, values: &[usize]) -> Value {
    let mut out = doc.clone();
    if let Some(features) = out.get_mut("features").and_then(Value::as_array_mut) {
        for (idx, f) in features.iter_mut().enumerate() {
            let id = feature_id(f, idx);
            if let (Some(r), Some(props)) = (
                reg.index_of(&id),
                f.get_mut("properties").and_then(Value::as_object_mut),
            ) {
                props.insert(property.to_string(), json!(values[r]));
            }
        }
    }
    out
}
