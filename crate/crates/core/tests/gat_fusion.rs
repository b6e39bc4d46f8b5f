mod common;

use std::rc::Rc;

use common::{gradcheck, gradcheck_sampled};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use region_embed::correlation::RegionGraph;
use region_embed::fusion::{
    CorrelationDecoder, DecoderWiring, EncoderLayer, GateKind, GlobalFusionLayer, OdProjection,
};
use region_embed::gat::{graph_mask, GatLayer};
use region_embed::tensor::{ParamStore, Tape, Tensor, Var};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp_m1()
    }
}

fn lrelu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.2 * x
    }
}

fn matmul(a: &Tensor, b: &Tensor) -> Vec<Vec<f64>> {
    (0..a.rows())
        .map(|i| {
            (0..b.cols())
                .map(|j| (0..a.cols()).map(|k| a.get(i, k) * b.get(k, j)).sum())
                .collect()
        })
        .collect()
}

fn graph(edges: &[(usize, usize)], n: usize) -> RegionGraph {
    let mut out = vec![Vec::new(); n];
    for &(a, b) in edges {
        out[a].push((b, 1.0));
    }
    RegionGraph::from_edges(1, out)
}

/// Brute-force single-head attention with explicit neighbor loops.
fn gat_oracle(x: &Tensor, w: &Tensor, a_src: &Tensor, a_dst: &Tensor, g: &RegionGraph) -> Vec<Vec<f64>> {
    let z = matmul(x, w);
    let n = x.rows();
    let dh = w.cols();
    let s: Vec<f64> = (0..n).map(|i| (0..dh).map(|k| z[i][k] * a_src.get(k, 0)).sum()).collect();
    let t: Vec<f64> = (0..n).map(|i| (0..dh).map(|k| z[i][k] * a_dst.get(k, 0)).sum()).collect();
    (0..n)
        .map(|i| {
            let mut nb: Vec<usize> = g.out_edges(i).iter().map(|e| e.0).collect();
            nb.push(i);
            let logits: Vec<f64> = nb.iter().map(|&j| lrelu(s[i] + t[j])).collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let ex: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
            let tot: f64 = ex.iter().sum();
            (0..dh)
                .map(|k| elu(nb.iter().zip(&ex).map(|(&j, e)| e / tot * z[j][k]).sum()))
                .collect()
        })
        .collect()
}

#[test]
fn gat_matches_neighbor_loop_oracle() {
    let mut store = ParamStore::new();
    let mut r = rng(1);
    let layer = GatLayer::new(&mut store, "g", 5, 3, 1, &mut r).unwrap();
    let g = graph(&[(0, 1), (0, 2), (1, 0), (2, 3), (3, 1), (3, 2)], 4);
    let x = Tensor::randn(4, 5, 1.0, &mut r);
    let tape = Tape::new();
    let out = layer
        .forward(&tape, &store, &tape.constant(&x), &graph_mask(&g))
        .unwrap()
        .out
        .value();
    let [w, a_s, a_d] = layer.head_params(0);
    let want = gat_oracle(&x, store.get(w), store.get(a_s), store.get(a_d), &g);
    for i in 0..4 {
        for k in 0..3 {
            assert!((out.get(i, k) - want[i][k]).abs() < 1e-10);
        }
    }
}

#[test]
fn isolated_node_attends_only_to_itself() {
    let mut store = ParamStore::new();
    let mut r = rng(2);
    let layer = GatLayer::new(&mut store, "g", 4, 8, 2, &mut r).unwrap();
    let g = graph(&[(0, 1), (1, 0)], 3);
    let x = Tensor::randn(3, 4, 1.0, &mut r);
    let tape = Tape::new();
    let res = layer.forward(&tape, &store, &tape.constant(&x), &graph_mask(&g)).unwrap();
    let out = res.out.value();
    for (h, att) in res.attention.iter().enumerate() {
        let a = att.value();
        assert_eq!(a.get(2, 2), 1.0);
        let z = matmul(&x, store.get(layer.head_params(h)[0]));
        for k in 0..4 {
            assert!((out.get(2, h * 4 + k) - elu(z[2][k])).abs() < 1e-14);
        }
    }
}

#[test]
fn zero_attention_vectors_give_neighborhood_mean() {
    let mut store = ParamStore::new();
    let mut r = rng(3);
    let layer = GatLayer::new(&mut store, "g", 3, 3, 1, &mut r).unwrap();
    let [w, a_s, a_d] = layer.head_params(0);
    *store.get_mut(w) = Tensor::identity(3).with_grad();
    *store.get_mut(a_s) = Tensor::zeros(3, 1).with_grad();
    *store.get_mut(a_d) = Tensor::zeros(3, 1).with_grad();
    let g = graph(&[(0, 1), (0, 2)], 3);
    let x = Tensor::randn(3, 3, 1.0, &mut r);
    let tape = Tape::new();
    let out = layer.forward(&tape, &store, &tape.constant(&x), &graph_mask(&g)).unwrap().out.value();
    for k in 0..3 {
        let mean = (x.get(0, k) + x.get(1, k) + x.get(2, k)) / 3.0;
        assert!((out.get(0, k) - elu(mean)).abs() < 1e-14);
    }
}

#[test]
fn symmetric_nodes_get_identical_outputs() {
    let mut store = ParamStore::new();
    let mut r = rng(4);
    let layer = GatLayer::new(&mut store, "g", 4, 8, 8, &mut r).unwrap();
    let g = graph(&[(0, 1), (1, 0), (0, 2), (1, 2)], 3);
    let row = Tensor::randn(1, 4, 1.0, &mut r);
    let other = Tensor::randn(1, 4, 1.0, &mut r);
    let x = Tensor::from_rows(&[row.row(0).to_vec(), row.row(0).to_vec(), other.row(0).to_vec()]).unwrap();
    let tape = Tape::new();
    let out = layer.forward(&tape, &store, &tape.constant(&x), &graph_mask(&g)).unwrap().out.value();
    assert_eq!(out.row(0), out.row(1));
}

#[test]
fn shape_mismatch_is_contract_error() {
    let mut store = ParamStore::new();
    let layer = GatLayer::new(&mut store, "g", 4, 8, 2, &mut rng(5)).unwrap();
    let tape = Tape::new();
    let x = tape.constant(&Tensor::zeros(3, 5));
    let mask = graph_mask(&graph(&[], 3));
    assert!(layer.forward(&tape, &store, &x, &mask).is_err());
    assert!(GatLayer::new(&mut store, "h", 4, 10, 3, &mut rng(5)).is_err());
}

#[test]
fn two_layer_gat_gradient() {
    let mut store = ParamStore::new();
    let mut r = rng(6);
    let l1 = GatLayer::new(&mut store, "l1", 3, 4, 2, &mut r).unwrap();
    let l2 = GatLayer::new(&mut store, "l2", 4, 4, 2, &mut r).unwrap();
    let x = store.add("x", Tensor::randn(5, 3, 1.0, &mut r));
    let target = Tensor::randn(5, 4, 1.0, &mut r);
    let mask = graph_mask(&graph(&[(0, 1), (1, 2), (2, 0), (3, 4), (4, 0), (0, 3)], 5));
    let err = gradcheck(&store, 1e-5, |t, s| {
        let h = l1.forward(t, s, &t.param(s, x), &mask)?.out;
        let o = l2.forward(t, s, &h, &mask)?.out;
        o.squared_error(&t.constant(&target))
    });
    assert!(err <= 1e-4, "{err:e}");
}

fn streams(n: usize, d: usize, seed: u64) -> Vec<Tensor> {
    let mut r = rng(seed);
    (0..3).map(|_| Tensor::randn(n, d, 1.0, &mut r)).collect()
}

#[test]
fn scalar_gate_matches_loop_oracle() {
    let mut store = ParamStore::new();
    let mut r = rng(7);
    let fuse = GlobalFusionLayer::new(&mut store, 96, GateKind::Scalar, &mut r);
    store.get_mut(fuse.b).data_mut()[0] = 0.3;
    let xs = streams(3, 96, 8);
    let tape = Tape::new();
    let vars: Vec<_> = xs.iter().map(|x| tape.constant(x)).collect();
    let (ef, gates) = fuse.forward(&tape, &store, &vars).unwrap();
    let ef = ef.value();
    let w = store.get(fuse.w);
    for i in 0..3 {
        let g: Vec<f64> = xs
            .iter()
            .map(|x| {
                let z: f64 = (0..96).map(|k| x.get(i, k) * w.get(k, 0)).sum::<f64>() + 0.3;
                1.0 / (1.0 + (-z).exp())
            })
            .collect();
        for k in 0..96 {
            let want: f64 = (0..3).map(|m| g[m] * xs[m].get(i, k)).sum();
            assert!((ef.get(i, k) - want).abs() < 1e-12);
        }
    }
    for g in gates {
        assert!(g.value().data().iter().all(|&v| v > 0.0 && v < 1.0));
    }
}

#[test]
fn zero_gate_parameters_halve_the_sum() {
    for kind in [GateKind::Scalar, GateKind::Vector] {
        let mut store = ParamStore::new();
        let fuse = GlobalFusionLayer::new(&mut store, 8, kind, &mut rng(9));
        store.get_mut(fuse.w).data_mut().fill(0.0);
        let xs = streams(4, 8, 10);
        let tape = Tape::new();
        let vars: Vec<_> = xs.iter().map(|x| tape.constant(x)).collect();
        let ef = fuse.forward(&tape, &store, &vars).unwrap().0.value();
        for (p, v) in ef.data().iter().enumerate() {
            let want = (xs[0].data()[p] + xs[1].data()[p] + xs[2].data()[p]) / 2.0;
            assert!((v - want).abs() < 1e-14);
        }
    }
}

#[test]
fn encoder_single_token_attention_is_one() {
    let mut store = ParamStore::new();
    let enc = EncoderLayer::new(&mut store, "enc", 96, 4, 256, &mut rng(11)).unwrap();
    let x = Tensor::randn(1, 96, 1.0, &mut rng(12));
    let tape = Tape::new();
    let out = enc.forward(&tape, &store, &tape.constant(&x)).unwrap();
    assert_eq!(out.out.shape(), [1, 96]);
    for a in out.attention {
        assert_eq!(a.value().data(), &[1.0]);
    }
}

#[test]
fn zeroed_output_projections_reduce_blocks_to_layer_norm() {
    let mut store = ParamStore::new();
    let mut r = rng(13);
    let enc = EncoderLayer::new(&mut store, "enc", 8, 4, 16, &mut r).unwrap();
    let dec = CorrelationDecoder::new(&mut store, "dec", 8, 4, 16, DecoderWiring::default(), &mut r).unwrap();
    for id in [enc.attn.wo, enc.ffn.w2, dec.self_attn.wo, dec.cross_attn.wo, dec.ffn.w2] {
        store.get_mut(id).data_mut().fill(0.0);
    }
    let x = Tensor::randn(5, 8, 2.0, &mut r);
    let g = Tensor::randn(5, 8, 2.0, &mut r);
    let tape = Tape::new();
    let xv = tape.constant(&x);
    let ones = tape.constant(&Tensor::filled(1, 8, 1.0));
    let zeros = tape.constant(&Tensor::zeros(1, 8));
    fn ln<'t>(v: &Var<'t>, ones: &Var<'t>, zeros: &Var<'t>) -> Var<'t> {
        v.layer_norm(ones, zeros, 1e-5).unwrap()
    }
    let want = ln(&ln(&xv, &ones, &zeros), &ones, &zeros).value();
    let got = enc.forward(&tape, &store, &xv).unwrap().out.value();
    let want3 = ln(&ln(&ln(&xv, &ones, &zeros), &ones, &zeros), &ones, &zeros).value();
    let got3 = dec.forward(&tape, &store, &xv, &tape.constant(&g)).unwrap().out.value();
    for p in 0..40 {
        assert!((got.data()[p] - want.data()[p]).abs() < 1e-12);
        assert!((got3.data()[p] - want3.data()[p]).abs() < 1e-12);
    }
}

#[test]
fn decoder_attention_rows_and_shapes() {
    for wiring in [DecoderWiring::QueryFromGlobal, DecoderWiring::QueryFromStream] {
        let mut store = ParamStore::new();
        let mut r = rng(14);
        let dec = CorrelationDecoder::new(&mut store, "dec", 96, 4, 256, wiring, &mut r).unwrap();
        let tape = Tape::new();
        let e = tape.constant(&Tensor::randn(7, 96, 1.0, &mut r));
        let g = tape.constant(&Tensor::randn(7, 96, 1.0, &mut r));
        let out = dec.forward(&tape, &store, &e, &g).unwrap();
        assert_eq!(out.out.shape(), [7, 96]);
        for a in out.self_attention.iter().chain(&out.cross_attention) {
            let a = a.value();
            for i in 0..7 {
                assert!((a.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn decoder_and_projection_gradients() {
    let mut store = ParamStore::new();
    let mut r = rng(15);
    let dec = CorrelationDecoder::new(&mut store, "dec", 8, 4, 12, DecoderWiring::default(), &mut r).unwrap();
    let od = OdProjection::new(&mut store, 8, &mut r);
    let e = store.add("e", Tensor::randn(5, 8, 1.0, &mut r));
    let g = store.add("g", Tensor::randn(5, 8, 1.0, &mut r));
    let target = Tensor::randn(5, 5, 1.0, &mut r);
    let err = gradcheck(&store, 1e-5, |t, s| {
        let out = dec.forward(t, s, &t.param(s, e), &t.param(s, g))?.out;
        let (o, d) = od.forward(t, s, &out)?;
        o.matmul(&d.t())?.squared_error(&t.constant(&target))
    });
    assert!(err <= 1e-4, "{err:e}");
}

#[test]
fn encoder_gradient_full_width_sampled() {
    let mut store = ParamStore::new();
    let mut r = rng(16);
    let enc = EncoderLayer::new(&mut store, "enc", 96, 4, 256, &mut r).unwrap();
    let x = store.add("x", Tensor::randn(5, 96, 1.0, &mut r));
    let target = Tensor::randn(5, 96, 1.0, &mut r);
    let err = gradcheck_sampled(&store, 1e-5, 24, |t, s| {
        enc.forward(t, s, &t.param(s, x))?.out.squared_error(&t.constant(&target))
    });
    assert!(err <= 1e-4, "{err:e}");
}

#[test]
fn identity_od_projection() {
    let mut store = ParamStore::new();
    let od = OdProjection::new(&mut store, 4, &mut rng(17));
    *store.get_mut(od.w_o) = Tensor::identity(4);
    *store.get_mut(od.w_d) = Tensor::identity(4);
    let x = Tensor::randn(3, 4, 1.0, &mut rng(18));
    let tape = Tape::new();
    let (o, d) = od.forward(&tape, &store, &tape.constant(&x)).unwrap();
    assert_eq!(o.value(), x);
    assert_eq!(d.value(), x);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn gat_attention_is_row_stochastic(seed in 0u64..1000, n in 2usize..8) {
        let mut store = ParamStore::new();
        let mut r = rng(seed);
        let layer = GatLayer::new(&mut store, "g", 4, 8, 4, &mut r).unwrap();
        let edges: Vec<(usize, usize)> = (0..n).map(|i| (i, (i * 3 + 1) % n)).filter(|&(a, b)| a != b).collect();
        let mask: Rc<[bool]> = graph_mask(&graph(&edges, n));
        let tape = Tape::new();
        let x = tape.constant(&Tensor::randn(n, 4, 3.0, &mut r));
        for a in layer.forward(&tape, &store, &x, &mask).unwrap().attention {
            let a = a.value();
            for i in 0..n {
                prop_assert!((a.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn fusion_gates_in_open_unit_interval(seed in 0u64..1000) {
        let mut store = ParamStore::new();
        let fuse = GlobalFusionLayer::new(&mut store, 16, GateKind::Vector, &mut rng(seed));
        let xs = streams(4, 16, seed + 1);
        let tape = Tape::new();
        let vars: Vec<_> = xs.iter().map(|x| tape.constant(x)).collect();
        for g in fuse.forward(&tape, &store, &vars).unwrap().1 {
            prop_assert!(g.value().data().iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }
}
