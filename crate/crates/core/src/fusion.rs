//! Gated global fusion, the self-attention encoder and per-graph
//! cross-attention decoders.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{concat, ParamId, ParamStore, Tape, Tensor, Var};

pub const DEFAULT_FUSION_HEADS: usize = 4;
pub const DEFAULT_FFN_WIDTH: usize = 256;
pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum GateKind {
    /// One gate value per region and graph.
    #[default]
    Scalar,
    /// One gate value per region, graph and channel.
    Vector,
}

/// `E_f = Σ_m sigmoid(E_m W + b) ⊙ E_m` with `W`, `b` shared across graphs.
#[derive(Clone, Debug)]
pub struct GlobalFusionLayer {
    pub w: ParamId,
    pub b: ParamId,
    pub kind: GateKind,
}

impl GlobalFusionLayer {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, d: usize, kind: GateKind, rng: &mut R) -> Self {
        let out = match kind {
            GateKind::Scalar => 1,
            GateKind::Vector => d,
        };
        Self {
            w: store.add("fusion.gate.w", Tensor::xavier(d, out, rng)),
            b: store.add("fusion.gate.b", Tensor::zeros(1, out)),
            kind,
        }
    }

    /// Returns the fused matrix and the gate values for each stream.
    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        streams: &[Var<'t>],
    ) -> Result<(Var<'t>, Vec<Var<'t>>)> {
        let first = streams.first().ok_or_else(|| Error::contract("global fusion needs at least one stream"))?;
        if let Some(bad) = streams.iter().find(|s| s.shape() != first.shape()) {
            return Err(Error::Shape {
                op: "global_fuse",
                left: first.shape(),
                right: bad.shape(),
            });
        }
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        let mut gates = Vec::with_capacity(streams.len());
        let mut fused: Option<Var<'t>> = None;
        for s in streams {
            let g = s.matmul(&w)?.add(&b)?.sigmoid();
            let term = s.mul(&g)?;
            fused = Some(match fused {
                Some(f) => f.add(&term)?,
                None => term,
            });
            gates.push(g);
        }
        Ok((fused.expect("nonempty"), gates))
    }
}

/// Scaled dot-product attention with `heads` heads and an output projection.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub heads: usize,
    pub d: usize,
}

pub struct AttentionOutput<'t> {
    pub out: Var<'t>,
    pub weights: Vec<Var<'t>>,
}

impl MultiHeadAttention {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || d % heads != 0 {
            return Err(Error::contract(format!(
                "attention width {d} is not divisible by {heads} heads"
            )));
        }
        let mut mat = |s: &str| store.add(format!("{name}.{s}"), Tensor::xavier(d, d, rng));
        Ok(Self {
            wq: mat("wq"),
            wk: mat("wk"),
            wv: mat("wv"),
            wo: mat("wo"),
            heads,
            d,
        })
    }

    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        query: &Var<'t>,
        key_value: &Var<'t>,
    ) -> Result<AttentionOutput<'t>> {
        let q = query.matmul(&tape.param(store, self.wq))?;
        let k = key_value.matmul(&tape.param(store, self.wk))?;
        let v = key_value.matmul(&tape.param(store, self.wv))?;
        let dh = self.d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = (q.slice(1, h * dh, dh)?, k.slice(1, h * dh, dh)?, v.slice(1, h * dh, dh)?);
            let a = qh.matmul(&kh.t())?.scale(scale).softmax(1)?;
            outs.push(a.matmul(&vh)?);
            weights.push(a);
        }
        let out = concat(&outs, 1)?.matmul(&tape.param(store, self.wo))?;
        Ok(AttentionOutput { out, weights })
    }
}

#[derive(Clone, Debug)]
pub struct FeedForward {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl FeedForward {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, d: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            w1: store.add(format!("{name}.w1"), Tensor::xavier(d, hidden, rng)),
            b1: store.add(format!("{name}.b1"), Tensor::zeros(1, hidden)),
            w2: store.add(format!("{name}.w2"), Tensor::xavier(hidden, d, rng)),
            b2: store.add(format!("{name}.b2"), Tensor::zeros(1, d)),
        }
    }

    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, x: &Var<'t>) -> Result<Var<'t>> {
        let p = |id| tape.param(store, id);
        x.matmul(&p(self.w1))?
            .add(&p(self.b1))?
            .elu()
            .matmul(&p(self.w2))?
            .add(&p(self.b2))
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), Tensor::filled(1, d, 1.0)),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(1, d)),
        }
    }

    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, x: &Var<'t>) -> Result<Var<'t>> {
        x.layer_norm(&tape.param(store, self.gain), &tape.param(store, self.bias), LN_EPS)
    }
}

/// `LN(h + FFN(h))` with `h = LN(x + MHSA(x))`.
#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub attn: MultiHeadAttention,
    pub ffn: FeedForward,
    pub ln1: LayerNorm,
    pub ln2: LayerNorm,
}

pub struct EncoderOutput<'t> {
    pub out: Var<'t>,
    pub attention: Vec<Var<'t>>,
}

impl EncoderLayer {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        heads: usize,
        ffn_width: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), d, heads, rng)?,
            ffn: FeedForward::new(store, &format!("{name}.ffn"), d, ffn_width, rng),
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), d),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), d),
        })
    }

    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, x: &Var<'t>) -> Result<EncoderOutput<'t>> {
        let a = self.attn.forward(tape, store, x, x)?;
        let h = self.ln1.forward(tape, store, &x.add(&a.out)?)?;
        let out = self.ln2.forward(tape, store, &h.add(&self.ffn.forward(tape, store, &h)?)?)?;
        Ok(EncoderOutput {
            out,
            attention: a.weights,
        })
    }
}

/// Where the decoder's cross attention takes its query from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum DecoderWiring {
    /// Query from the encoder output, key/value from the self-attended stream.
    QueryFromGlobal,
    /// Query from the self-attended stream, key/value from the encoder output.
    #[default]
    QueryFromStream,
}

/// Self attention over one graph stream, cross attention against the
/// encoder output, then a feed-forward block; residual + LN around each.
#[derive(Clone, Debug)]
pub struct CorrelationDecoder {
    pub self_attn: MultiHeadAttention,
    pub cross_attn: MultiHeadAttention,
    pub ffn: FeedForward,
    pub ln1: LayerNorm,
    pub ln2: LayerNorm,
    pub ln3: LayerNorm,
    pub wiring: DecoderWiring,
}

pub struct DecoderOutput<'t> {
    pub out: Var<'t>,
    pub self_attention: Vec<Var<'t>>,
    pub cross_attention: Vec<Var<'t>>,
}

impl CorrelationDecoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        heads: usize,
        ffn_width: usize,
        wiring: DecoderWiring,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            self_attn: MultiHeadAttention::new(store, &format!("{name}.self_attn"), d, heads, rng)?,
            cross_attn: MultiHeadAttention::new(store, &format!("{name}.cross_attn"), d, heads, rng)?,
            ffn: FeedForward::new(store, &format!("{name}.ffn"), d, ffn_width, rng),
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), d),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), d),
            ln3: LayerNorm::new(store, &format!("{name}.ln3"), d),
            wiring,
        })
    }

    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        stream: &Var<'t>,
        global: &Var<'t>,
    ) -> Result<DecoderOutput<'t>> {
        if stream.shape() != global.shape() {
            return Err(Error::Shape {
                op: "decode",
                left: stream.shape(),
                right: global.shape(),
            });
        }
        let sa = self.self_attn.forward(tape, store, stream, stream)?;
        let x1 = self.ln1.forward(tape, store, &stream.add(&sa.out)?)?;
        let ca = match self.wiring {
            DecoderWiring::QueryFromGlobal => self.cross_attn.forward(tape, store, global, &x1)?,
            DecoderWiring::QueryFromStream => self.cross_attn.forward(tape, store, &x1, global)?,
        };
        let x2 = self.ln2.forward(tape, store, &x1.add(&ca.out)?)?;
        let out = self.ln3.forward(tape, store, &x2.add(&self.ffn.forward(tape, store, &x2)?)?)?;
        Ok(DecoderOutput {
            out,
            self_attention: sa.weights,
            cross_attention: ca.weights,
        })
    }
}

/// Origin/destination projections of the accessibility stream.
#[derive(Clone, Debug)]
pub struct OdProjection {
    pub w_o: ParamId,
    pub w_d: ParamId,
}

impl OdProjection {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, d: usize, rng: &mut R) -> Self {
        Self {
            w_o: store.add("od.w_o", Tensor::xavier(d, d, rng)),
            w_d: store.add("od.w_d", Tensor::xavier(d, d, rng)),
        }
    }

    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, x: &Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
        Ok((
            x.matmul(&tape.param(store, self.w_o))?,
            x.matmul(&tape.param(store, self.w_d))?,
        ))
    }
}
