//! Numeric cross-checks against plain re-implementations over `Vec<f64>`.

use std::collections::BTreeMap;

use slicegraph::gmn::{GmnConfig, GraphInput, MatchModel};
use slicegraph::graphbuild::FlowType;
use slicegraph::nn::{Adam, Optimizer, ParamStore, Tensor};

type Mat = Vec<Vec<f64>>;

fn mat(t: &Tensor) -> Mat {
    (0..t.rows).map(|r| t.row(r).to_vec()).collect()
}

fn mul(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .map(|row| (0..b[0].len()).map(|j| row.iter().zip(b).map(|(x, br)| x * br[j]).sum()).collect())
        .collect()
}

fn map(a: &Mat, f: impl Fn(f64) -> f64) -> Mat {
    a.iter().map(|r| r.iter().map(|&x| f(x)).collect()).collect()
}

fn zip(a: &Mat, b: &Mat, f: impl Fn(f64, f64) -> f64) -> Mat {
    a.iter().zip(b).map(|(ra, rb)| ra.iter().zip(rb).map(|(&x, &y)| f(x, y)).collect()).collect()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

struct Params(BTreeMap<String, Mat>);

impl Params {
    fn of(store: &ParamStore) -> Self {
        Params(store.iter().map(|(n, t)| (n.to_string(), mat(t))).collect())
    }

    fn linear(&self, name: &str, x: &Mat) -> Mat {
        let w = &self.0[&format!("{name}.w")];
        let b = &self.0[&format!("{name}.b")][0];
        mul(x, w).into_iter().map(|r| r.iter().zip(b).map(|(v, c)| v + c).collect()).collect()
    }

    fn mlp(&self, name: &str, layers: usize, x: &Mat) -> Mat {
        let mut h = x.clone();
        for i in 0..layers {
            h = self.linear(&format!("{name}.{i}"), &h);
            if i + 1 < layers {
                h = map(&h, |v| v.max(0.0));
            }
        }
        h
    }
}

fn hcat(parts: &[&Mat]) -> Mat {
    (0..parts[0].len()).map(|r| parts.iter().flat_map(|p| p[r].iter().copied()).collect()).collect()
}

fn unit(r: &[f64]) -> Vec<f64> {
    let n = (r.iter().map(|v| v * v).sum::<f64>() + 1e-12).sqrt();
    r.iter().map(|v| v / n).collect()
}

/// Returns the graph vectors and the last round's attention of `g1` over `g2`.
fn forward(p: &Params, cfg: &GmnConfig, g1: &GraphInput, g2: &GraphInput) -> (Vec<f64>, Vec<f64>, Mat) {
    let h = cfg.hidden;
    let encode_edges = |g: &GraphInput| -> Mat {
        let feats: Mat = g.edges.iter().map(|e| cfg.edge_feature(e.2).to_vec()).collect();
        p.mlp("edge_enc", 1, &feats)
    };
    let messages = |hs: &Mat, g: &GraphInput, e: &Mat| -> Mat {
        let mut out = vec![vec![0.0; h]; hs.len()];
        for (k, &(s, d, _)) in g.edges.iter().enumerate() {
            let input = vec![[hs[s].clone(), hs[d].clone(), e[k].clone()].concat()];
            let m = p.mlp("message", 2, &input);
            for c in 0..h {
                out[d][c] += m[0][c];
            }
        }
        out
    };
    let cross = |a: &Mat, b: &Mat| -> (Mat, Mat) {
        let att: Mat = a
            .iter()
            .map(|ra| {
                let ua = unit(ra);
                let s: Vec<f64> = b.iter().map(|rb| ua.iter().zip(unit(rb)).map(|(x, y)| x * y).sum()).collect();
                let mx = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = s.iter().map(|v| (v - mx).exp()).sum();
                s.iter().map(|v| (v - mx).exp() / z).collect()
            })
            .collect();
        let mu = zip(a, &mul(&att, b), |x, y| x - y);
        (mu, att)
    };
    let gru = |x: &Mat, hs: &Mat| -> Mat {
        let gx = p.linear("gru.x", x);
        let gh = p.linear("gru.h", hs);
        (0..hs.len())
            .map(|r| {
                (0..h)
                    .map(|c| {
                        let rg = sigmoid(gx[r][c] + gh[r][c]);
                        let z = sigmoid(gx[r][h + c] + gh[r][h + c]);
                        let n = (gx[r][2 * h + c] + rg * gh[r][2 * h + c]).tanh();
                        (1.0 - z) * n + z * hs[r][c]
                    })
                    .collect()
            })
            .collect()
    };
    let readout = |hs: &Mat| -> Vec<f64> {
        let g = map(&p.linear("agg.gate", hs), sigmoid);
        let t = p.linear("agg.transform", hs);
        let gt = zip(&g, &t, |a, b| a * b);
        let sum: Vec<f64> = (0..h).map(|c| gt.iter().map(|r| r[c]).sum()).collect();
        p.mlp("agg.out", 1, &vec![sum]).remove(0)
    };

    let mut h1 = p.mlp("node_enc", 2, &mat(&g1.features));
    let mut h2 = p.mlp("node_enc", 2, &mat(&g2.features));
    let (e1, e2) = (encode_edges(g1), encode_edges(g2));
    let mut last = Vec::new();
    for _ in 0..cfg.rounds {
        let m1 = messages(&h1, g1, &e1);
        let m2 = messages(&h2, g2, &e2);
        let (u1, a12) = cross(&h1, &h2);
        let (u2, _) = cross(&h2, &h1);
        let n1 = gru(&hcat(&[&m1, &u1]), &h1);
        let n2 = gru(&hcat(&[&m2, &u2]), &h2);
        h1 = n1;
        h2 = n2;
        last = a12;
    }
    (readout(&h1), readout(&h2), last)
}

fn two_node(a: [f64; 3], b: [f64; 3], flow: FlowType) -> GraphInput {
    GraphInput::new(Tensor::from_vec(2, 3, [a, b].concat()), vec![(0, 1, flow)])
}

#[test]
fn matcher_forward_matches_plain_reimplementation() {
    let cfg = GmnConfig {
        rounds: 3,
        hidden: 6,
        edge_dim: 4,
        ..GmnConfig::default()
    };
    let model = MatchModel::new(cfg.clone(), 3, 99).unwrap();
    let g1 = two_node([0.3, -0.2, 0.9], [1.0, 0.4, -0.5], FlowType::DataDependence);
    let g2 = two_node([-0.7, 0.1, 0.2], [0.5, 0.5, 0.5], FlowType::Jump);
    let prop = model.propagate_pair(&g1, &g2).unwrap();
    let (o1, o2, att) = forward(&Params::of(&model.store), &cfg, &g1, &g2);
    for (x, y) in prop.h_g1.iter().zip(&o1).chain(prop.h_g2.iter().zip(&o2)) {
        assert!((x - y).abs() < 1e-6, "{x} vs {y}");
    }
    let got = mat(prop.attention_12.last().unwrap());
    for (x, y) in got.iter().flatten().zip(att.iter().flatten()) {
        assert!((x - y).abs() < 1e-6);
    }
}

#[test]
fn adam_matches_scalar_recurrence() {
    let grads = [0.5, -1.5, 2.0, 0.0, -0.25];
    let mut store = ParamStore::new();
    store.add("p", Tensor::scalar(1.0));
    let mut opt = Adam::new(0.01);
    let (mut p, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
    for (t, &g) in grads.iter().enumerate() {
        opt.step(&mut store, &[Tensor::scalar(g)]).unwrap();
        m = 0.9 * m + 0.1 * g;
        v = 0.999 * v + 0.001 * g * g;
        let k = t as i32 + 1;
        p -= 0.01 * (m / (1.0 - 0.9f64.powi(k))) / ((v / (1.0 - 0.999f64.powi(k))).sqrt() + 1e-8);
        let got = store.iter().next().unwrap().1.item();
        assert!((got - p).abs() < 1e-12, "step {k}: {got} vs {p}");
    }
}
