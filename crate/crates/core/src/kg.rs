//! POI knowledge graph and TransD embeddings.
//!
//! Entities are laid out as regions first, then POIs, then attribute values
//! (namespaced by field, so `FACILITY_T:park` and `FACI_DOM:park` differ).
//! Every forward relation `r` has a reversed twin at `r + forward_count`.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;
use std::rc::Rc;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{write_region_matrix, write_text, PoiField, PoiRecord, RegionRegistry};
use crate::tensor::{Adam, ParamId, ParamStore, Tape, Tensor, Var};

pub const LOCATED_IN: &str = "LocatedIn";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct KnowledgeTriple {
    pub head: usize,
    pub relation: usize,
    pub tail: usize,
}

#[derive(Clone, Debug)]
pub struct KgVocab {
    pub entities: Vec<String>,
    /// Forward relations followed by their reversed twins.
    pub relations: Vec<String>,
    pub num_regions: usize,
    pub num_pois: usize,
    /// POI entity indices grouped by region.
    pub region_pois: Vec<Vec<usize>>,
}

impl KgVocab {
    pub fn forward_relations(&self) -> usize {
        self.relations.len() / 2
    }

    pub fn reverse(&self, relation: usize) -> usize {
        let f = self.forward_relations();
        if relation < f {
            relation + f
        } else {
            relation - f
        }
    }

    pub fn region_entity(&self, region: usize) -> usize {
        region
    }

    pub fn relation_index(&self, name: &str) -> Option<usize> {
        self.relations.iter().position(|r| r == name)
    }
}

/// Build the graph: for each POI, one triple per present attribute and one
/// `LocatedIn` triple, each followed by its reverse.
pub fn build_kg(pois: &[PoiRecord], reg: &RegionRegistry) -> (KgVocab, Vec<KnowledgeTriple>) {
    let n = reg.len();
    let used: Vec<PoiField> = PoiField::ALL
        .iter()
        .copied()
        .filter(|f| pois.iter().any(|p| p.attributes.contains_key(f)))
        .collect();
    let mut forward: Vec<String> = used.iter().map(|f| f.relation_name().to_string()).collect();
    forward.push(LOCATED_IN.to_string());
    let f = forward.len();
    let mut relations = forward.clone();
    relations.extend(forward.iter().map(|r| format!("{r}_rev")));
    let located_in = f - 1;

    let mut entities: Vec<String> = reg.ids().iter().map(|id| format!("region:{id}")).collect();
    entities.extend(pois.iter().map(|p| format!("poi:{}", p.place_id)));
    let mut values: BTreeMap<String, usize> = BTreeMap::new();
    let mut region_pois = vec![Vec::new(); n];
    let mut triples = Vec::new();
    let mut push = |h: usize, r: usize, t: usize| {
        triples.push(KnowledgeTriple { head: h, relation: r, tail: t });
        triples.push(KnowledgeTriple { head: t, relation: r + f, tail: h });
    };
    for (k, poi) in pois.iter().enumerate() {
        let p = n + k;
        region_pois[poi.region].push(p);
        for (ri, field) in used.iter().enumerate() {
            if let Some(v) = poi.attributes.get(field) {
                let key = format!("{}:{}", field.relation_name(), v);
                let next = entities.len();
                let e = *values.entry(key.clone()).or_insert_with(|| {
                    entities.push(key);
                    next
                });
                push(p, ri, e);
            }
        }
        push(p, located_in, poi.region);
    }
    let vocab = KgVocab {
        entities,
        relations,
        num_regions: n,
        num_pois: pois.len(),
        region_pois,
    };
    (vocab, triples)
}

pub fn write_triples(path: impl AsRef<Path>, vocab: &KgVocab, triples: &[KnowledgeTriple]) -> Result<()> {
    let mut out = String::from("head,relation,tail\n");
    for t in triples {
        out.push_str(&format!(
            "{},{},{}\n",
            vocab.entities[t.head], vocab.relations[t.relation], vocab.entities[t.tail]
        ));
    }
    write_text(path, &out)
}

#[derive(Clone, Debug)]
pub struct TransDParams {
    pub entity: Tensor,
    pub entity_proj: Tensor,
    pub relation: Tensor,
    pub relation_proj: Tensor,
}

impl TransDParams {
    pub fn init<R: Rng + ?Sized>(num_entities: usize, num_relations: usize, dim: usize, rng: &mut R) -> Self {
        let std = 1.0 / (dim as f64).sqrt();
        let mut p = Self {
            entity: Tensor::randn(num_entities, dim, std, rng),
            entity_proj: Tensor::randn(num_entities, dim, std, rng),
            relation: Tensor::randn(num_relations, dim, std, rng),
            relation_proj: Tensor::randn(num_relations, dim, std, rng),
        };
        p.renormalize();
        p
    }

    pub fn dim(&self) -> usize {
        self.entity.cols()
    }

    /// Project entity and relation rows back into the unit ball.
    pub fn renormalize(&mut self) {
        for t in [&mut self.entity, &mut self.relation] {
            for i in 0..t.rows() {
                let row = t.row_mut(i);
                let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm > 1.0 {
                    row.iter_mut().for_each(|v| *v /= norm);
                }
            }
        }
    }

    pub fn max_entity_norm(&self) -> f64 {
        max_row_norm(&self.entity)
    }

    pub fn max_relation_norm(&self) -> f64 {
        max_row_norm(&self.relation)
    }
}

fn max_row_norm(t: &Tensor) -> f64 {
    (0..t.rows())
        .map(|i| t.row(i).iter().map(|v| v * v).sum::<f64>().sqrt())
        .fold(0.0, f64::max)
}

fn project(e: &[f64], ep: &[f64], rp: &[f64]) -> Vec<f64> {
    let s: f64 = ep.iter().zip(e).map(|(a, b)| a * b).sum();
    e.iter().zip(rp).map(|(x, r)| x + r * s).collect()
}

/// `‖h⊥ + r − t⊥‖²` with `x⊥ = x + r_p (x_pᵀ x)`.
pub fn transd_score(triple: KnowledgeTriple, p: &TransDParams) -> f64 {
    let rp = p.relation_proj.row(triple.relation);
    let h = project(p.entity.row(triple.head), p.entity_proj.row(triple.head), rp);
    let t = project(p.entity.row(triple.tail), p.entity_proj.row(triple.tail), rp);
    let r = p.relation.row(triple.relation);
    (0..h.len()).map(|k| (h[k] + r[k] - t[k]).powi(2)).sum()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KgConfig {
    pub dim: usize,
    pub margin: f64,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Weight of the soft penalty `max(0, ‖x⊥‖² − 1)` on projected vectors.
    pub projection_penalty: f64,
}

impl Default for KgConfig {
    fn default() -> Self {
        Self {
            dim: 32,
            margin: 1.0,
            epochs: 200,
            lr: 1e-2,
            batch_size: 256,
            projection_penalty: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KgEpochLog {
    pub epoch: usize,
    /// Mean margin loss per positive triple.
    pub loss: f64,
    pub max_entity_norm: f64,
    pub max_relation_norm: f64,
}

/// Filtered negative sampler: corrupts head or tail with probability 1/2,
/// rejecting known triples.
pub struct NegativeSampler {
    known: HashSet<KnowledgeTriple>,
    num_entities: usize,
}

impl NegativeSampler {
    pub fn new(triples: &[KnowledgeTriple], num_entities: usize) -> Self {
        Self {
            known: triples.iter().copied().collect(),
            num_entities,
        }
    }

    pub fn is_known(&self, t: &KnowledgeTriple) -> bool {
        self.known.contains(t)
    }

    /// `None` when no corruption of `pos` is unknown within the retry budget.
    pub fn sample<R: Rng + ?Sized>(&self, pos: KnowledgeTriple, rng: &mut R) -> Option<KnowledgeTriple> {
        for _ in 0..64 {
            let e = rng.random_range(0..self.num_entities);
            let cand = if rng.random_bool(0.5) {
                KnowledgeTriple { head: e, ..pos }
            } else {
                KnowledgeTriple { tail: e, ..pos }
            };
            if !self.known.contains(&cand) {
                return Some(cand);
            }
        }
        None
    }
}

struct Ids {
    e: ParamId,
    ep: ParamId,
    r: ParamId,
    rp: ParamId,
}

fn projected<'t>(e: &Var<'t>, ep: &Var<'t>, rp: &Var<'t>) -> Result<Var<'t>> {
    let s = ep.mul(e)?.sum_axis(1)?;
    e.add(&rp.mul(&s)?)
}

fn batch_loss<'t>(
    tape: &'t Tape,
    store: &ParamStore,
    ids: &Ids,
    pos: &[KnowledgeTriple],
    neg: &[KnowledgeTriple],
    cfg: &KgConfig,
) -> Result<Var<'t>> {
    let e = tape.param(store, ids.e);
    let ep = tape.param(store, ids.ep);
    let r = tape.param(store, ids.r);
    let rp = tape.param(store, ids.rp);
    let score = |ts: &[KnowledgeTriple]| -> Result<(Var<'t>, Var<'t>)> {
        let hi: Rc<[usize]> = ts.iter().map(|t| t.head).collect();
        let ri: Rc<[usize]> = ts.iter().map(|t| t.relation).collect();
        let ti: Rc<[usize]> = ts.iter().map(|t| t.tail).collect();
        let rpb = rp.gather_rows(ri.clone())?;
        let h = projected(&e.gather_rows(hi.clone())?, &ep.gather_rows(hi)?, &rpb)?;
        let t = projected(&e.gather_rows(ti.clone())?, &ep.gather_rows(ti)?, &rpb)?;
        let d = h.add(&r.gather_rows(ri)?)?.sub(&t)?;
        let s = d.mul(&d)?.sum_axis(1)?;
        let norms = h.mul(&h)?.sum_axis(1)?.add(&t.mul(&t)?.sum_axis(1)?)?;
        Ok((s, norms))
    };
    let (sp, np) = score(pos)?;
    let (sn, nn) = score(neg)?;
    let margin = sp.sub(&sn)?.add_scalar(cfg.margin).relu().sum();
    if cfg.projection_penalty > 0.0 {
        let pen = np.add(&nn)?.add_scalar(-2.0).relu().sum().scale(cfg.projection_penalty);
        margin.add(&pen)
    } else {
        Ok(margin)
    }
}

/// Train TransD with margin ranking loss and Adam, renormalizing entity and
/// relation embeddings after every step.
pub fn train_kg<R: Rng + ?Sized>(
    triples: &[KnowledgeTriple],
    vocab: &KgVocab,
    cfg: &KgConfig,
    rng: &mut R,
) -> Result<(TransDParams, Vec<KgEpochLog>)> {
    if triples.is_empty() {
        return Err(Error::contract("TransD training needs at least one triple"));
    }
    if cfg.batch_size == 0 || cfg.dim == 0 {
        return Err(Error::contract("TransD batch size and dimension must be positive"));
    }
    let init = TransDParams::init(vocab.entities.len(), vocab.relations.len(), cfg.dim, rng);
    let mut store = ParamStore::new();
    let ids = Ids {
        e: store.add("kg.entity", init.entity),
        ep: store.add("kg.entity_proj", init.entity_proj),
        r: store.add("kg.relation", init.relation),
        rp: store.add("kg.relation_proj", init.relation_proj),
    };
    let sampler = NegativeSampler::new(triples, vocab.entities.len());
    let mut adam = Adam::new(cfg.lr);
    let mut order: Vec<usize> = (0..triples.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        shuffle(&mut order, rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let mut pos = Vec::with_capacity(chunk.len());
            let mut neg = Vec::with_capacity(chunk.len());
            for &i in chunk {
                if let Some(n) = sampler.sample(triples[i], rng) {
                    pos.push(triples[i]);
                    neg.push(n);
                }
            }
            if pos.is_empty() {
                continue;
            }
            store.zero_grads();
            let tape = Tape::new();
            let loss = batch_loss(&tape, &store, &ids, &pos, &neg, cfg)?;
            let value = loss.item();
            if !value.is_finite() {
                return Err(Error::NonFinite(format!("TransD loss at epoch {epoch}")));
            }
            tape.backward(loss)?;
            store.accumulate_grads(&tape);
            adam.step_store(&mut store)?;
            total += value;
            let mut p = params_from(&store, &ids);
            p.renormalize();
            store.get_mut(ids.e).data_mut().copy_from_slice(p.entity.data());
            store.get_mut(ids.r).data_mut().copy_from_slice(p.relation.data());
        }
        let p = params_from(&store, &ids);
        log.push(KgEpochLog {
            epoch,
            loss: total / triples.len() as f64,
            max_entity_norm: p.max_entity_norm(),
            max_relation_norm: p.max_relation_norm(),
        });
    }
    Ok((params_from(&store, &ids), log))
}

fn params_from(store: &ParamStore, ids: &Ids) -> TransDParams {
    let plain = |id| {
        let t: &Tensor = store.get(id);
        Tensor::new(t.rows(), t.cols(), t.data().to_vec()).expect("same shape")
    };
    TransDParams {
        entity: plain(ids.e),
        entity_proj: plain(ids.ep),
        relation: plain(ids.r),
        relation_proj: plain(ids.rp),
    }
}

fn shuffle<R: Rng + ?Sized>(v: &mut [usize], rng: &mut R) {
    for i in (1..v.len()).rev() {
        let j = rng.random_range(0..=i);
        v.swap(i, j);
    }
}

/// Mean filtered rank of the true tail among all entities (rank 1 is best).
pub fn filtered_mean_rank(triples: &[KnowledgeTriple], all_known: &[KnowledgeTriple], p: &TransDParams) -> f64 {
    if triples.is_empty() {
        return 0.0;
    }
    let known: HashSet<KnowledgeTriple> = all_known.iter().copied().collect();
    let n = p.entity.rows();
    let total: usize = triples
        .iter()
        .map(|&t| {
            let s = transd_score(t, p);
            1 + (0..n)
                .filter(|&e| e != t.tail)
                .filter(|&e| {
                    let c = KnowledgeTriple { tail: e, ..t };
                    !known.contains(&c) && transd_score(c, p) < s
                })
                .count()
        })
        .sum();
    total as f64 / triples.len() as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegionVectorMode {
    /// Row of the region's own entity embedding.
    #[default]
    EntityRow,
    /// Mean of the region's POI entity embeddings (entity row if it has none).
    MeanPool,
}

/// Per-region functionality vectors and a flag for regions without POIs.
pub fn region_functionality_vectors(
    p: &TransDParams,
    vocab: &KgVocab,
    mode: RegionVectorMode,
) -> (Array2<f64>, Vec<bool>) {
    let d = p.dim();
    let mut out = Array2::zeros((vocab.num_regions, d));
    let mut flagged = Vec::with_capacity(vocab.num_regions);
    for i in 0..vocab.num_regions {
        let pois = &vocab.region_pois[i];
        flagged.push(pois.is_empty());
        let mut row = out.row_mut(i);
        if mode == RegionVectorMode::MeanPool && !pois.is_empty() {
            for &q in pois {
                for (k, v) in p.entity.row(q).iter().enumerate() {
                    row[k] += v / pois.len() as f64;
                }
            }
        } else {
            for (k, v) in p.entity.row(vocab.region_entity(i)).iter().enumerate() {
                row[k] = *v;
            }
        }
    }
    (out, flagged)
}

pub fn write_region_vectors(path: impl AsRef<Path>, reg: &RegionRegistry, v: &Array2<f64>) -> Result<()> {
    write_region_matrix(path, reg, v)
}
