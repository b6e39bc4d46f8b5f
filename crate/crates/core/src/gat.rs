//! Multi-head graph attention over the kNN correlation graphs.

use std::rc::Rc;

use rand::Rng;

use crate::correlation::RegionGraph;
use crate::error::{Error, Result};
use crate::tensor::{concat, ParamId, ParamStore, Tape, Tensor, Var};

pub const DEFAULT_HEADS: usize = 8;
pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Clone, Debug)]
struct GatHead {
    w: ParamId,
    a_src: ParamId,
    a_dst: ParamId,
}

/// One attention layer: `heads` independent heads of width `d_out / heads`,
/// concatenated and passed through elu.
#[derive(Clone, Debug)]
pub struct GatLayer {
    heads: Vec<GatHead>,
    pub d_in: usize,
    pub d_out: usize,
    pub slope: f64,
}

pub struct GatOutput<'t> {
    pub out: Var<'t>,
    /// Per-head `N × N` attention matrices (zero outside the neighborhood).
    pub attention: Vec<Var<'t>>,
}

impl GatLayer {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || d_out % heads != 0 {
            return Err(Error::contract(format!(
                "GAT output width {d_out} is not divisible by {heads} heads"
            )));
        }
        let dh = d_out / heads;
        let heads = (0..heads)
            .map(|h| GatHead {
                w: store.add(format!("{name}.h{h}.w"), Tensor::xavier(d_in, dh, rng)),
                a_src: store.add(format!("{name}.h{h}.a_src"), Tensor::xavier(dh, 1, rng)),
                a_dst: store.add(format!("{name}.h{h}.a_dst"), Tensor::xavier(dh, 1, rng)),
            })
            .collect();
        Ok(Self {
            heads,
            d_in,
            d_out,
            slope: LEAKY_SLOPE,
        })
    }

    pub fn head_count(&self) -> usize {
        self.heads.len()
    }

    pub fn head_params(&self, h: usize) -> [ParamId; 3] {
        let hd = &self.heads[h];
        [hd.w, hd.a_src, hd.a_dst]
    }

    /// `mask` is row-major `N × N`, true where node `i` may attend to `j`.
    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        x: &Var<'t>,
        mask: &Rc<[bool]>,
    ) -> Result<GatOutput<'t>> {
        let [n, d] = x.shape();
        if d != self.d_in || mask.len() != n * n {
            return Err(Error::contract(format!(
                "GAT input is {n}x{d} with a mask of {} entries; layer expects width {} and an {n}x{n} mask",
                mask.len(),
                self.d_in
            )));
        }
        let mut outs = Vec::with_capacity(self.heads.len());
        let mut attention = Vec::with_capacity(self.heads.len());
        for h in &self.heads {
            let z = x.matmul(&tape.param(store, h.w))?;
            let s = z.matmul(&tape.param(store, h.a_src))?;
            let t = z.matmul(&tape.param(store, h.a_dst))?;
            let logits = s.add(&t.t())?.leaky_relu(self.slope);
            let alpha = logits.masked_softmax(mask.clone())?;
            outs.push(alpha.matmul(&z)?);
            attention.push(alpha);
        }
        Ok(GatOutput {
            out: concat(&outs, 1)?.elu(),
            attention,
        })
    }
}

pub fn graph_mask(graph: &RegionGraph) -> Rc<[bool]> {
    graph.attention_mask().into()
}

/// Per-graph input features.
#[derive(Clone, Debug)]
pub enum NodeInput {
    /// Free learnable `N × d` embedding.
    Free(ParamId),
    /// Fixed features mapped through a trainable linear projection.
    Projected { features: Tensor, proj: ParamId },
}

impl NodeInput {
    /// Gaussian init with standard deviation `std`.
    pub fn free<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        n: usize,
        d: usize,
        std: f64,
        rng: &mut R,
    ) -> Self {
        NodeInput::Free(store.add(format!("{name}.embedding"), Tensor::randn(n, d, std, rng)))
    }

    pub fn projected<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        features: Tensor,
        d: usize,
        rng: &mut R,
    ) -> Self {
        let proj = store.add(format!("{name}.proj"), Tensor::xavier(features.cols(), d, rng));
        NodeInput::Projected { features, proj }
    }

    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore) -> Result<Var<'t>> {
        match self {
            NodeInput::Free(id) => Ok(tape.param(store, *id)),
            NodeInput::Projected { features, proj } => {
                tape.constant(features).matmul(&tape.param(store, *proj))
            }
        }
    }
}

/// Input features followed by a stack of GAT layers for one graph.
#[derive(Clone, Debug)]
pub struct GraphEncoder {
    pub input: NodeInput,
    pub layers: Vec<GatLayer>,
    pub mask: Rc<[bool]>,
}

impl GraphEncoder {
    pub fn initial<'t>(&self, tape: &'t Tape, store: &ParamStore) -> Result<Var<'t>> {
        self.input.forward(tape, store)
    }

    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore) -> Result<Var<'t>> {
        Ok(self.forward_with_attention(tape, store)?.out)
    }

    /// Like [`forward`](Self::forward), also returning every layer's per-head attention.
    pub fn forward_with_attention<'t>(&self, tape: &'t Tape, store: &ParamStore) -> Result<GatOutput<'t>> {
        let mut x = self.input.forward(tape, store)?;
        let mut attention = Vec::new();
        for layer in &self.layers {
            let o = layer.forward(tape, store, &x, &self.mask)?;
            x = o.out;
            attention.extend(o.attention);
        }
        Ok(GatOutput { out: x, attention })
    }
}

/// Run each graph's encoder independently.
pub fn encode_graphs<'t>(
    tape: &'t Tape,
    store: &ParamStore,
    encoders: &[&GraphEncoder],
) -> Result<Vec<Var<'t>>> {
    encoders.iter().map(|e| e.forward(tape, store)).collect()
}
