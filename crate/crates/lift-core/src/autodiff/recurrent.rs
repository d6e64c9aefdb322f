//! GRU cell and bidirectional scan, composed from graph primitives so
//! the generic backward pass covers them.

use crate::autodiff::graph::{Graph, NodeId};
use crate::autodiff::params::{Init, ParamStore};
use crate::autodiff::tensor::Tensor;
use crate::error::{Error, Result};

/// Registers the nine GRU matrices/biases under `prefix` in `store`.
pub fn register_gru(
    store: &mut ParamStore,
    prefix: &str,
    in_dim: usize,
    hidden: usize,
    group: u8,
) -> Result<()> {
    let wb = 1.0 / (in_dim as f64).sqrt();
    let ub = 1.0 / (hidden as f64).sqrt();
    for gate in ["z", "r", "h"] {
        store.add_grouped(&format!("{prefix}.w{gate}"), vec![hidden, in_dim], Init::Uniform(wb), group)?;
        store.add_grouped(&format!("{prefix}.u{gate}"), vec![hidden, hidden], Init::Uniform(ub), group)?;
        store.add_grouped(&format!("{prefix}.b{gate}"), vec![hidden], Init::Zeros, group)?;
    }
    Ok(())
}

/// One direction's gate parameters, bound into a graph.
#[derive(Debug, Clone, Copy)]
pub struct GruCell {
    wz: NodeId,
    uz: NodeId,
    bz: NodeId,
    wr: NodeId,
    ur: NodeId,
    br: NodeId,
    wh: NodeId,
    uh: NodeId,
    bh: NodeId,
    pub hidden: usize,
}

impl GruCell {
    pub fn bind(g: &mut Graph, store: &ParamStore, prefix: &str) -> Result<GruCell> {
        let hidden = store.get(&format!("{prefix}.bz"))?.shape[0];
        Ok(GruCell {
            wz: store.bind(g, &format!("{prefix}.wz"))?,
            uz: store.bind(g, &format!("{prefix}.uz"))?,
            bz: store.bind(g, &format!("{prefix}.bz"))?,
            wr: store.bind(g, &format!("{prefix}.wr"))?,
            ur: store.bind(g, &format!("{prefix}.ur"))?,
            br: store.bind(g, &format!("{prefix}.br"))?,
            wh: store.bind(g, &format!("{prefix}.wh"))?,
            uh: store.bind(g, &format!("{prefix}.uh"))?,
            bh: store.bind(g, &format!("{prefix}.bh"))?,
            hidden,
        })
    }

    /// h_t = (1 - z)*h + z*htilde with the usual gate definitions.
    pub fn step(&self, g: &mut Graph, x: NodeId, h: NodeId) -> Result<NodeId> {
        let zx = g.linear(x, self.wz, Some(self.bz))?;
        let zh = g.linear(h, self.uz, None)?;
        let zsum = g.add(zx, zh)?;
        let z = g.sigmoid(zsum)?;
        let rx = g.linear(x, self.wr, Some(self.br))?;
        let rh = g.linear(h, self.ur, None)?;
        let rsum = g.add(rx, rh)?;
        let r = g.sigmoid(rsum)?;
        let gated = g.mul(r, h)?;
        let cx = g.linear(x, self.wh, Some(self.bh))?;
        let ch = g.linear(gated, self.uh, None)?;
        let csum = g.add(cx, ch)?;
        let cand = g.tanh(csum)?;
        let negz = g.scale(z, -1.0)?;
        let keep = g.shift(negz, 1.0)?;
        let old = g.mul(keep, h)?;
        let new = g.mul(z, cand)?;
        g.add(old, new)
    }

    pub fn zero_state(&self, g: &mut Graph) -> Result<NodeId> {
        g.constant(Tensor::zeros(vec![self.hidden])?)
    }
}

/// Registers both directions plus the output head.
pub fn register_bigru(
    store: &mut ParamStore,
    prefix: &str,
    in_dim: usize,
    hidden: usize,
    out_dim: usize,
    group: u8,
) -> Result<()> {
    register_gru(store, &format!("{prefix}.fwd"), in_dim, hidden, group)?;
    register_gru(store, &format!("{prefix}.bwd"), in_dim, hidden, group)?;
    let hb = 1.0 / ((2 * hidden) as f64).sqrt();
    store.add_grouped(&format!("{prefix}.head.w"), vec![out_dim, 2 * hidden], Init::Uniform(hb), group)?;
    store.add_grouped(&format!("{prefix}.head.b"), vec![out_dim], Init::Zeros, group)?;
    Ok(())
}

pub struct BiGru {
    pub fwd: GruCell,
    pub bwd: GruCell,
    head_w: NodeId,
    head_b: NodeId,
}

impl BiGru {
    pub fn bind(g: &mut Graph, store: &ParamStore, prefix: &str) -> Result<BiGru> {
        Ok(BiGru {
            fwd: GruCell::bind(g, store, &format!("{prefix}.fwd"))?,
            bwd: GruCell::bind(g, store, &format!("{prefix}.bwd"))?,
            head_w: store.bind(g, &format!("{prefix}.head.w"))?,
            head_b: store.bind(g, &format!("{prefix}.head.b"))?,
        })
    }

    /// Per-position forward and backward hidden states, pre-head.
    pub fn run_states(&self, g: &mut Graph, inputs: &[NodeId]) -> Result<(Vec<NodeId>, Vec<NodeId>)> {
        if inputs.is_empty() {
            return Err(Error::shape("bigru", "empty sequence".to_string()));
        }
        let mut fwd = Vec::with_capacity(inputs.len());
        let mut h = self.fwd.zero_state(g)?;
        for &x in inputs {
            h = self.fwd.step(g, x, h)?;
            fwd.push(h);
        }
        let mut bwd = vec![NodeId(0); inputs.len()];
        let mut hb = self.bwd.zero_state(g)?;
        for (i, &x) in inputs.iter().enumerate().rev() {
            hb = self.bwd.step(g, x, hb)?;
            bwd[i] = hb;
        }
        Ok((fwd, bwd))
    }

    /// Context vectors: head(concat(fwd_d, bwd_d)) for every position.
    pub fn run(&self, g: &mut Graph, inputs: &[NodeId]) -> Result<Vec<NodeId>> {
        let (fwd, bwd) = self.run_states(g, inputs)?;
        let mut out = Vec::with_capacity(inputs.len());
        for d in 0..inputs.len() {
            let cat = g.concat(&[fwd[d], bwd[d]])?;
            out.push(g.linear(cat, self.head_w, Some(self.head_b))?);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Stream;

    fn zeroed_gru(in_dim: usize, hidden: usize) -> ParamStore {
        let mut s = ParamStore::new("gru", 0);
        register_gru(&mut s, "cell", in_dim, hidden, 0).unwrap();
        for name in s.names().map(String::from).collect::<Vec<_>>() {
            let p = s.get_mut(&name).unwrap();
            p.value.iter_mut().for_each(|v| *v = 0.0);
        }
        s
    }

    #[test]
    fn zero_weights_halve_the_state() {
        let store = zeroed_gru(3, 4);
        let mut g = Graph::new();
        let cell = GruCell::bind(&mut g, &store, "cell").unwrap();
        let x = g.constant(Tensor::new(vec![3], vec![0.3, -0.7, 0.1]).unwrap()).unwrap();
        let h = g.constant(Tensor::new(vec![4], vec![1.0, -2.0, 4.0, 0.5]).unwrap()).unwrap();
        let h1 = cell.step(&mut g, x, h).unwrap();
        assert_eq!(g.value(h1).data, vec![0.5, -1.0, 2.0, 0.25]);
    }

    #[test]
    fn zero_weights_zero_state_stays_zero() {
        let store = zeroed_gru(3, 4);
        let mut g = Graph::new();
        let cell = GruCell::bind(&mut g, &store, "cell").unwrap();
        let x = g.constant(Tensor::new(vec![3], vec![0.9, 0.2, -0.4]).unwrap()).unwrap();
        let h = cell.zero_state(&mut g).unwrap();
        let h1 = cell.step(&mut g, x, h).unwrap();
        assert!(g.value(h1).data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_step_sequence_degenerates_cleanly() {
        let mut store = ParamStore::new("m", 7);
        register_bigru(&mut store, "mix", 3, 4, 2, 0).unwrap();
        let mut g = Graph::new();
        let net = BiGru::bind(&mut g, &store, "mix").unwrap();
        let x = g.constant(Tensor::new(vec![3], vec![0.1, 0.2, 0.3]).unwrap()).unwrap();
        let out = net.run(&mut g, &[x]).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(g.value(out[0]).shape, vec![2]);
        assert!(net.run(&mut g, &[]).is_err());
    }

    #[test]
    fn reversed_input_with_swapped_directions_reverses_states() {
        let mut store = ParamStore::new("m", 11);
        register_bigru(&mut store, "mix", 3, 5, 2, 0).unwrap();
        // A second store with fwd/bwd parameter blocks exchanged.
        let mut swapped = store.clone();
        for gate in ["z", "r", "h"] {
            for kind in ["w", "u", "b"] {
                let f = format!("mix.fwd.{kind}{gate}");
                let b = format!("mix.bwd.{kind}{gate}");
                let fv = store.get(&f).unwrap().value.clone();
                let bv = store.get(&b).unwrap().value.clone();
                swapped.get_mut(&f).unwrap().value = bv;
                swapped.get_mut(&b).unwrap().value = fv;
            }
        }
        let mut s = Stream::new(5);
        let seq: Vec<Vec<f64>> = (0..4).map(|_| (0..3).map(|_| s.range(-1.0, 1.0)).collect()).collect();

        let mut g1 = Graph::new();
        let net1 = BiGru::bind(&mut g1, &store, "mix").unwrap();
        let ids1: Vec<NodeId> = seq
            .iter()
            .map(|v| g1.constant(Tensor::new(vec![3], v.clone()).unwrap()).unwrap())
            .collect();
        let (f1, b1) = net1.run_states(&mut g1, &ids1).unwrap();

        let mut g2 = Graph::new();
        let net2 = BiGru::bind(&mut g2, &swapped, "mix").unwrap();
        let ids2: Vec<NodeId> = seq
            .iter()
            .rev()
            .map(|v| g2.constant(Tensor::new(vec![3], v.clone()).unwrap()).unwrap())
            .collect();
        let (f2, b2) = net2.run_states(&mut g2, &ids2).unwrap();

        let d = seq.len();
        for i in 0..d {
            let fwd_here = &g1.value(f1[i]).data;
            let bwd_mirror = &g2.value(b2[d - 1 - i]).data;
            for (a, b) in fwd_here.iter().zip(bwd_mirror.iter()) {
                assert!((a - b).abs() < 1e-13);
            }
            let bwd_here = &g1.value(b1[i]).data;
            let fwd_mirror = &g2.value(f2[d - 1 - i]).data;
            for (a, b) in bwd_here.iter().zip(fwd_mirror.iter()) {
                assert!((a - b).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn last_input_reaches_first_context() {
        let mut store = ParamStore::new("m", 13);
        register_bigru(&mut store, "mix", 2, 4, 3, 0).unwrap();
        let base: Vec<Vec<f64>> = vec![vec![0.1, -0.2], vec![0.3, 0.4], vec![-0.5, 0.6], vec![0.7, 0.8]];
        let run = |bump: f64| -> Vec<f64> {
            let mut g = Graph::new();
            let net = BiGru::bind(&mut g, &store, "mix").unwrap();
            let ids: Vec<NodeId> = base
                .iter()
                .enumerate()
                .map(|(i, v)| {
                    let mut v = v.clone();
                    if i == base.len() - 1 {
                        v[0] += bump;
                    }
                    g.constant(Tensor::new(vec![2], v).unwrap()).unwrap()
                })
                .collect();
            let out = net.run(&mut g, &ids).unwrap();
            g.value(out[0]).data.clone()
        };
        let a = run(0.0);
        let b = run(1e-3);
        let diff: f64 = a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).sum();
        assert!(diff > 1e-9, "perturbing the last input never reached c_1");
    }
}
