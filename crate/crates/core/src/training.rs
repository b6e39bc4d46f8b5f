//! Joint objective, model assembly for every ablation variant, and the
//! full-batch training loop.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::correlation::RegionGraph;
use crate::error::{Error, Result};
use crate::fusion::{
    CorrelationDecoder, DecoderWiring, EncoderLayer, GateKind, GlobalFusionLayer, OdProjection,
    DEFAULT_FFN_WIDTH, DEFAULT_FUSION_HEADS,
};
use crate::gat::{graph_mask, GatLayer, GraphEncoder, NodeInput, DEFAULT_HEADS};
use crate::ingest::write_text;
use crate::tensor::{Adam, ParamStore, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum GraphKind {
    Ac,
    Vc,
    Fc,
}

impl GraphKind {
    pub const ALL: [GraphKind; 3] = [GraphKind::Ac, GraphKind::Vc, GraphKind::Fc];

    fn index(self) -> usize {
        self as usize
    }

    pub fn tag(self) -> &'static str {
        match self {
            GraphKind::Ac => "ac",
            GraphKind::Vc => "vc",
            GraphKind::Fc => "fc",
        }
    }
}

/// Model variants used in the ablation study.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    /// Human mobility (AC graph) only.
    #[serde(rename = "HM")]
    Hm,
    /// Geographic neighborhood (VC graph) only.
    #[serde(rename = "GN")]
    Gn,
    /// POI side information (FC graph) only.
    #[serde(rename = "SI")]
    Si,
    #[serde(rename = "HM+GN")]
    HmGn,
    #[serde(rename = "HM+SI")]
    HmSi,
    /// No graph attention: initial features feed fusion directly.
    #[serde(rename = "R2V-g")]
    R2vG,
    /// No fusion: the embedding is the mean of the GAT outputs.
    #[serde(rename = "R2V-f")]
    R2vF,
    #[serde(rename = "full")]
    Full,
}

impl Variant {
    pub const ALL: [Variant; 8] = [
        Variant::Hm,
        Variant::Gn,
        Variant::Si,
        Variant::HmGn,
        Variant::HmSi,
        Variant::R2vG,
        Variant::R2vF,
        Variant::Full,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Hm => "HM",
            Variant::Gn => "GN",
            Variant::Si => "SI",
            Variant::HmGn => "HM+GN",
            Variant::HmSi => "HM+SI",
            Variant::R2vG => "R2V-g",
            Variant::R2vF => "R2V-f",
            Variant::Full => "full",
        }
    }

    pub fn graphs(self) -> &'static [GraphKind] {
        match self {
            Variant::Hm => &[GraphKind::Ac],
            Variant::Gn => &[GraphKind::Vc],
            Variant::Si => &[GraphKind::Fc],
            Variant::HmGn => &[GraphKind::Ac, GraphKind::Vc],
            Variant::HmSi => &[GraphKind::Ac, GraphKind::Fc],
            _ => &GraphKind::ALL,
        }
    }

    pub fn uses(self, g: GraphKind) -> bool {
        self.graphs().contains(&g)
    }

    pub fn uses_gat(self) -> bool {
        self != Variant::R2vG
    }

    pub fn uses_fusion(self) -> bool {
        self != Variant::R2vF
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .iter()
            .copied()
            .find(|v| v.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::UnknownVariant {
                name: s.to_string(),
                valid: Variant::ALL.iter().map(|v| v.name()).collect::<Vec<_>>().join(", "),
            })
    }
}

pub fn make_variant(name: &str) -> Result<Variant> {
    name.parse()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    pub epochs: usize,
    pub lr: f64,
    pub dim: usize,
    pub gat_heads: usize,
    pub gat_layers: usize,
    pub fusion_heads: usize,
    pub ffn_width: usize,
    /// Standard deviation of the free AC/VC input embeddings.
    pub input_std: f64,
    pub lambda_ac: f64,
    pub lambda_vc: f64,
    pub lambda_fc: f64,
    /// Apply the destination term of the mobility loss to transposed counts.
    pub swap_od: bool,
    pub vector_gate: bool,
    /// Decoder cross attention takes its query from the graph stream and
    /// key/value from the encoder output; `false` reverses the roles.
    pub query_from_stream: bool,
    /// Stop once the best total loss has improved by less than `min_delta`
    /// for `patience` consecutive epochs. `0` disables early stopping.
    pub patience: usize,
    pub min_delta: f64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            epochs: 500,
            lr: 1e-3,
            dim: 96,
            gat_heads: DEFAULT_HEADS,
            gat_layers: 1,
            fusion_heads: DEFAULT_FUSION_HEADS,
            ffn_width: DEFAULT_FFN_WIDTH,
            input_std: 1.0,
            lambda_ac: 1.0,
            lambda_vc: 1.0,
            lambda_fc: 1.0,
            swap_od: false,
            vector_gate: false,
            query_from_stream: true,
            patience: 50,
            min_delta: 1e-6,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 || !self.lr.is_finite() {
            return Err(Error::contract(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.input_std <= 0.0 || !self.input_std.is_finite() {
            return Err(Error::contract(format!("input_std must be positive, got {}", self.input_std)));
        }
        for (what, heads) in [("GAT", self.gat_heads), ("fusion", self.fusion_heads)] {
            if heads == 0 || self.dim % heads != 0 {
                return Err(Error::contract(format!(
                    "embedding dim {} is not divisible by {heads} {what} heads",
                    self.dim
                )));
            }
        }
        Ok(())
    }

    fn lambda(&self, g: GraphKind) -> f64 {
        match g {
            GraphKind::Ac => self.lambda_ac,
            GraphKind::Vc => self.lambda_vc,
            GraphKind::Fc => self.lambda_fc,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub loss_ac: f64,
    pub loss_vc: f64,
    pub loss_fc: f64,
    pub total: f64,
}

/// Negative log-likelihood of the observed trips under row softmaxes of the
/// origin/destination logit matrix `L = E_o E_dᵀ`:
/// `−Σ C ⊙ (log_softmax_rows(L) + log_softmax_rows(Lᵀ))`, with the second
/// term taken against `Cᵀ` when `swap_od` is set.
pub fn ac_loss<'t>(e_o: &Var<'t>, e_d: &Var<'t>, counts: &Var<'t>, swap_od: bool) -> Result<Var<'t>> {
    let logits = e_o.matmul(&e_d.t())?;
    let lp_o = logits.log_softmax(1)?;
    let lp_d = logits.t().log_softmax(1)?;
    let c2 = if swap_od { counts.t() } else { *counts };
    Ok(counts.mul(&lp_o)?.sum().add(&c2.mul(&lp_d)?.sum())?.scale(-1.0))
}

/// `‖target − E Eᵀ‖²_F / N²`.
pub fn correlation_loss<'t>(e: &Var<'t>, target: &Var<'t>) -> Result<Var<'t>> {
    let n = e.rows() as f64;
    Ok(e.matmul(&e.t())?.squared_error(target)?.scale(1.0 / (n * n)))
}

pub fn vc_loss<'t>(e: &Var<'t>, vc: &Var<'t>) -> Result<Var<'t>> {
    correlation_loss(e, vc)
}

pub fn fc_loss<'t>(e: &Var<'t>, fc: &Var<'t>) -> Result<Var<'t>> {
    correlation_loss(e, fc)
}

/// One graph's topology and loss target: trip counts for AC, the
/// correlation matrix for VC and FC.
#[derive(Clone, Debug)]
pub struct GraphInput {
    pub graph: RegionGraph,
    pub target: Tensor,
}

#[derive(Clone, Debug)]
pub struct ModelInputs {
    pub n: usize,
    pub ac: Option<GraphInput>,
    pub vc: Option<GraphInput>,
    pub fc: Option<GraphInput>,
    /// Region functionality vectors used as FC input features.
    pub kg_vectors: Option<Tensor>,
}

impl ModelInputs {
    fn get(&self, g: GraphKind) -> Option<&GraphInput> {
        match g {
            GraphKind::Ac => self.ac.as_ref(),
            GraphKind::Vc => self.vc.as_ref(),
            GraphKind::Fc => self.fc.as_ref(),
        }
    }
}

#[derive(Clone, Debug)]
struct FusionStack {
    gate: GlobalFusionLayer,
    encoder: EncoderLayer,
    decoders: [Option<CorrelationDecoder>; 3],
}

/// Parameters and wiring for one variant.
#[derive(Clone, Debug)]
pub struct Model {
    pub variant: Variant,
    pub config: TrainingConfig,
    pub store: ParamStore,
    encoders: [Option<GraphEncoder>; 3],
    targets: [Option<Tensor>; 3],
    fusion: Option<FusionStack>,
    od: Option<OdProjection>,
}

pub struct ForwardOutput<'t> {
    pub embedding: Var<'t>,
    pub loss_ac: Option<Var<'t>>,
    pub loss_vc: Option<Var<'t>>,
    pub loss_fc: Option<Var<'t>>,
    pub total: Var<'t>,
    pub gates: Vec<Var<'t>>,
    /// Every attention distribution computed in the pass: GAT heads, then
    /// encoder, then decoder self- and cross-attention heads.
    pub attention: Vec<Var<'t>>,
}

impl ForwardOutput<'_> {
    pub fn breakdown(&self) -> LossBreakdown {
        let v = |l: &Option<Var>| l.map_or(0.0, |l| l.item());
        LossBreakdown {
            loss_ac: v(&self.loss_ac),
            loss_vc: v(&self.loss_vc),
            loss_fc: v(&self.loss_fc),
            total: self.total.item(),
        }
    }
}

impl Model {
    pub fn new<R: Rng + ?Sized>(
        variant: Variant,
        config: &TrainingConfig,
        inputs: &ModelInputs,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.dim;
        let mut store = ParamStore::new();
        let mut encoders: [Option<GraphEncoder>; 3] = Default::default();
        let mut targets: [Option<Tensor>; 3] = Default::default();
        for &g in variant.graphs() {
            let gi = inputs.get(g).ok_or_else(|| {
                Error::contract(format!("variant {variant} needs the {} graph", g.tag()))
            })?;
            if gi.graph.n() != inputs.n || gi.target.shape() != [inputs.n, inputs.n] {
                return Err(Error::contract(format!(
                    "{} graph/target do not match {} regions",
                    g.tag(),
                    inputs.n
                )));
            }
            let input = match g {
                GraphKind::Fc => {
                    let kg = inputs.kg_vectors.clone().ok_or_else(|| {
                        Error::contract("FC graph needs region functionality vectors")
                    })?;
                    NodeInput::projected(&mut store, "fc.input", kg, d, rng)
                }
                _ => NodeInput::free(&mut store, &format!("{}.input", g.tag()), inputs.n, d, config.input_std, rng),
            };
            let layers = if variant.uses_gat() {
                (0..config.gat_layers)
                    .map(|l| GatLayer::new(&mut store, &format!("{}.gat{l}", g.tag()), d, d, config.gat_heads, rng))
                    .collect::<Result<Vec<_>>>()?
            } else {
                Vec::new()
            };
            encoders[g.index()] = Some(GraphEncoder {
                input,
                layers,
                mask: graph_mask(&gi.graph),
            });
            targets[g.index()] = Some(gi.target.clone());
        }
        let fusion = if variant.uses_fusion() {
            let kind = if config.vector_gate { GateKind::Vector } else { GateKind::Scalar };
            let wiring = if config.query_from_stream {
                DecoderWiring::QueryFromStream
            } else {
                DecoderWiring::QueryFromGlobal
            };
            let gate = GlobalFusionLayer::new(&mut store, d, kind, rng);
            let encoder = EncoderLayer::new(&mut store, "encoder", d, config.fusion_heads, config.ffn_width, rng)?;
            let mut decoders: [Option<CorrelationDecoder>; 3] = Default::default();
            for &g in variant.graphs() {
                decoders[g.index()] = Some(CorrelationDecoder::new(
                    &mut store,
                    &format!("{}.decoder", g.tag()),
                    d,
                    config.fusion_heads,
                    config.ffn_width,
                    wiring,
                    rng,
                )?);
            }
            Some(FusionStack { gate, encoder, decoders })
        } else {
            None
        };
        let od = variant.uses(GraphKind::Ac).then(|| OdProjection::new(&mut store, d, rng));
        Ok(Self {
            variant,
            config: config.clone(),
            store,
            encoders,
            targets,
            fusion,
            od,
        })
    }

    /// Forward pass with an explicit parameter store (used by gradient checks).
    pub fn forward_with<'t>(&self, tape: &'t Tape, store: &ParamStore) -> Result<ForwardOutput<'t>> {
        let active: Vec<GraphKind> = self.variant.graphs().to_vec();
        let mut streams = Vec::with_capacity(active.len());
        let mut attention = Vec::new();
        for &g in &active {
            let enc = self.encoders[g.index()].as_ref().expect("built for active graphs");
            let o = enc.forward_with_attention(tape, store)?;
            streams.push(o.out);
            attention.extend(o.attention);
        }
        let (embedding, outputs, gates) = match &self.fusion {
            Some(f) => {
                let (ef, gates) = f.gate.forward(tape, store, &streams)?;
                let enc = f.encoder.forward(tape, store, &ef)?;
                let global = enc.out;
                attention.extend(enc.attention);
                let mut outs = Vec::with_capacity(active.len());
                for (&g, s) in active.iter().zip(&streams) {
                    let dec = f.decoders[g.index()].as_ref().expect("built for active graphs");
                    let o = dec.forward(tape, store, s, &global)?;
                    attention.extend(o.self_attention);
                    attention.extend(o.cross_attention);
                    outs.push(o.out);
                }
                (global, outs, gates)
            }
            None => {
                let mut sum = streams[0];
                for s in &streams[1..] {
                    sum = sum.add(s)?;
                }
                (sum.scale(1.0 / streams.len() as f64), streams.clone(), Vec::new())
            }
        };
        let mut losses: [Option<Var<'t>>; 3] = [None, None, None];
        let mut total: Option<Var<'t>> = None;
        for (&g, out) in active.iter().zip(&outputs) {
            let target = tape.constant(self.targets[g.index()].as_ref().expect("built"));
            let l = match g {
                GraphKind::Ac => {
                    let od = self.od.as_ref().expect("built with AC");
                    let (e_o, e_d) = od.forward(tape, store, out)?;
                    ac_loss(&e_o, &e_d, &target, self.config.swap_od)?
                }
                GraphKind::Vc => vc_loss(out, &target)?,
                GraphKind::Fc => fc_loss(out, &target)?,
            };
            let weighted = l.scale(self.config.lambda(g));
            total = Some(match total {
                Some(t) => t.add(&weighted)?,
                None => weighted,
            });
            losses[g.index()] = Some(l);
        }
        let [loss_ac, loss_vc, loss_fc] = losses;
        Ok(ForwardOutput {
            embedding,
            loss_ac,
            loss_vc,
            loss_fc,
            total: total.expect("every variant has a graph"),
            gates,
            attention,
        })
    }

    pub fn forward<'t>(&self, tape: &'t Tape) -> Result<ForwardOutput<'t>> {
        self.forward_with(tape, &self.store)
    }

    pub fn embedding(&self) -> Result<Tensor> {
        let tape = Tape::new();
        Ok(self.forward(&tape)?.embedding.value())
    }

    pub fn losses(&self) -> Result<LossBreakdown> {
        let tape = Tape::new();
        Ok(self.forward(&tape)?.breakdown())
    }
}

#[derive(Clone, Debug, Default)]
pub struct TrainingReport {
    /// Losses before each optimizer step.
    pub log: Vec<LossBreakdown>,
    pub stopped_early: bool,
}

/// Full-batch Adam training. `on_epoch` sees every logged epoch and the
/// parameters after its update (for checkpointing).
pub fn fit_with(
    model: &mut Model,
    mut on_epoch: impl FnMut(usize, &LossBreakdown, &ParamStore) -> Result<()>,
) -> Result<TrainingReport> {
    let cfg = model.config.clone();
    let mut adam = Adam::new(cfg.lr);
    let mut report = TrainingReport::default();
    let mut best = f64::INFINITY;
    let mut stale = 0;
    for epoch in 0..cfg.epochs {
        model.store.zero_grads();
        let tape = Tape::new();
        let out = model.forward(&tape)?;
        let b = out.breakdown();
        if !b.total.is_finite() {
            let culprit = tape
                .first_non_finite(Some(&model.store))
                .unwrap_or_else(|| "total loss".into());
            return Err(Error::NonFinite(format!("epoch {epoch}: first non-finite value in {culprit}")));
        }
        tape.backward(out.total)?;
        model.store.accumulate_grads(&tape);
        adam.step_store(&mut model.store)?;
        if let Some(bad) = model.store.iter().find(|(_, t)| !t.is_finite()) {
            return Err(Error::NonFinite(format!("epoch {epoch}: parameter {} after update", bad.0)));
        }
        report.log.push(b);
        on_epoch(epoch, &b, &model.store)?;
        if best - b.total < cfg.min_delta {
            stale += 1;
        } else {
            stale = 0;
        }
        best = best.min(b.total);
        if cfg.patience > 0 && stale >= cfg.patience {
            report.stopped_early = true;
            break;
        }
    }
    Ok(report)
}

pub fn fit(model: &mut Model) -> Result<TrainingReport> {
    fit_with(model, |_, _, _| Ok(()))
}

pub fn write_training_log(path: impl AsRef<Path>, log: &[LossBreakdown]) -> Result<()> {
    let mut out = String::from("epoch,loss_ac,loss_vc,loss_fc,total\n");
    for (e, b) in log.iter().enumerate() {
        out.push_str(&format!("{e},{},{},{},{}\n", b.loss_ac, b.loss_vc, b.loss_fc, b.total));
    }
    write_text(path, &out)
}
