//! Central finite-difference verification of the analytic gradients.

use crate::error::Result;

/// Central-difference gradient of a scalar function at `x0`.
pub fn fd_gradient(
    x0: &[f64],
    eps: f64,
    f: &mut dyn FnMut(&[f64]) -> Result<f64>,
) -> Result<Vec<f64>> {
    let mut xs = x0.to_vec();
    let mut out = vec![0.0; x0.len()];
    for i in 0..x0.len() {
        let keep = xs[i];
        xs[i] = keep + eps;
        let hi = f(&xs)?;
        xs[i] = keep - eps;
        let lo = f(&xs)?;
        xs[i] = keep;
        out[i] = (hi - lo) / (2.0 * eps);
    }
    Ok(out)
}

/// Max over elements of |analytic - fd| / max(1, |fd|).
pub fn max_rel_err(analytic: &[f64], fd: &[f64]) -> f64 {
    assert_eq!(analytic.len(), fd.len());
    analytic
        .iter()
        .zip(fd.iter())
        .map(|(&a, &n)| (a - n).abs() / n.abs().max(1.0))
        .fold(0.0, f64::max)
}

/// Small self-contained battery suitable for the CLI self test: returns
/// (name, max relative error) per exercised op family.
pub fn quick_battery() -> Result<Vec<(String, f64)>> {
    use crate::autodiff::graph::Graph;
    use crate::autodiff::tensor::Tensor;
    use crate::rng::Stream;

    let mut results = Vec::new();
    let mut case = |name: &str,
                    shapes: &[Vec<usize>],
                    build: &dyn Fn(&mut Graph, &[crate::autodiff::graph::NodeId]) -> Result<crate::autodiff::graph::NodeId>|
     -> Result<()> {
        let mut s = Stream::derived(815, name);
        let flats: Vec<Vec<f64>> = shapes
            .iter()
            .map(|sh| (0..sh.iter().product::<usize>()).map(|_| s.range(-0.9, 0.9)).collect())
            .collect();
        let mut g = Graph::new();
        let mut ids = Vec::new();
        for (i, sh) in shapes.iter().enumerate() {
            ids.push(g.var(Tensor::new(sh.clone(), flats[i].clone())?, &format!("in{i}"))?);
        }
        let out = build(&mut g, &ids)?;
        let proj: Vec<f64> = (0..g.value(out).numel()).map(|_| s.range(-1.0, 1.0)).collect();
        let pid = g.constant(Tensor::new(g.value(out).shape.clone(), proj.clone())?)?;
        let prod = g.mul(out, pid)?;
        let loss = g.sum(prod)?;
        let grads = g.backward(loss)?;
        let mut analytic = Vec::new();
        for &id in &ids {
            analytic.extend_from_slice(grads.get(id).unwrap_or(&[]));
        }
        let flat0: Vec<f64> = flats.concat();
        let mut eval = |xs: &[f64]| -> Result<f64> {
            let mut g = Graph::new();
            let mut ids = Vec::new();
            let mut off = 0;
            for sh in shapes {
                let n: usize = sh.iter().product();
                ids.push(g.constant(Tensor::new(sh.clone(), xs[off..off + n].to_vec())?)?);
                off += n;
            }
            let out = build(&mut g, &ids)?;
            let pid = g.constant(Tensor::new(g.value(out).shape.clone(), proj.clone())?)?;
            let prod = g.mul(out, pid)?;
            let loss = g.sum(prod)?;
            g.item(loss)
        };
        let fd = fd_gradient(&flat0, 1e-5, &mut eval)?;
        results.push((name.to_string(), max_rel_err(&analytic, &fd)));
        Ok(())
    };

    case("linear", &[vec![4], vec![3, 4], vec![3]], &|g, ids| {
        g.linear(ids[0], ids[1], Some(ids[2]))
    })?;
    case("conv2d", &[vec![2, 5, 5], vec![2, 2, 3, 3], vec![2]], &|g, ids| {
        g.conv2d(ids[0], ids[1], Some(ids[2]), 1, 1)
    })?;
    case("tconv2d", &[vec![2, 3, 3], vec![2, 2, 4, 4]], &|g, ids| {
        g.tconv2d(ids[0], ids[1], None, 2, 1)
    })?;
    case("tanh_gap", &[vec![2, 4, 4]], &|g, ids| {
        let t = g.tanh(ids[0])?;
        g.gap2d(t)
    })?;
    case("softmax", &[vec![5]], &|g, ids| g.softmax(ids[0]))?;
    case("blur3", &[vec![1, 4, 4, 4]], &|g, ids| {
        g.gauss_blur3(ids[0], &[0.25, 0.5, 0.25])
    })?;
    Ok(results)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::graph::{Graph, NodeId};
    use crate::autodiff::tensor::Tensor;
    use crate::rng::Stream;
    use crate::volume::PlaneSelector;

    const EPS: f64 = 1e-5;
    const TOL: f64 = 1e-4;
    const INSTANCES: u64 = 10;

    /// How an input's values are drawn; bands keep samples away from
    /// non-differentiable kinks.
    #[derive(Clone, Copy)]
    enum Dom {
        Range(f64, f64),
        SignedBand(f64, f64),
    }

    fn draw(s: &mut Stream, dom: Dom) -> f64 {
        match dom {
            Dom::Range(lo, hi) => s.range(lo, hi),
            Dom::SignedBand(lo, hi) => {
                let mag = s.range(lo, hi);
                if s.uniform() < 0.5 {
                    -mag
                } else {
                    mag
                }
            }
        }
    }

    fn check(
        name: &str,
        specs: &[(Vec<usize>, Dom)],
        build: &dyn Fn(&mut Graph, &[NodeId]) -> crate::Result<NodeId>,
    ) {
        for instance in 0..INSTANCES {
            let mut s = Stream::derived(instance, name);
            let flats: Vec<Vec<f64>> = specs
                .iter()
                .map(|(sh, dom)| {
                    (0..sh.iter().product::<usize>()).map(|_| draw(&mut s, *dom)).collect()
                })
                .collect();

            let mut g = Graph::new();
            let ids: Vec<NodeId> = specs
                .iter()
                .zip(flats.iter())
                .enumerate()
                .map(|(i, ((sh, _), data))| {
                    g.var(Tensor::new(sh.clone(), data.clone()).unwrap(), &format!("in{i}"))
                        .unwrap()
                })
                .collect();
            let out = build(&mut g, &ids).unwrap();
            let proj: Vec<f64> = (0..g.value(out).numel()).map(|_| s.range(-1.0, 1.0)).collect();
            let out_shape = g.value(out).shape.clone();
            let pid = g.constant(Tensor::new(out_shape.clone(), proj.clone()).unwrap()).unwrap();
            let prod = g.mul(out, pid).unwrap();
            let loss = g.sum(prod).unwrap();
            let grads = g.backward(loss).unwrap();
            let mut analytic = Vec::new();
            for &id in &ids {
                analytic.extend_from_slice(grads.get(id).expect("input grad missing"));
            }

            let flat0: Vec<f64> = flats.concat();
            let mut eval = |xs: &[f64]| -> crate::Result<f64> {
                let mut g = Graph::new();
                let mut ids = Vec::new();
                let mut off = 0;
                for (sh, _) in specs {
                    let n: usize = sh.iter().product();
                    ids.push(g.constant(Tensor::new(sh.clone(), xs[off..off + n].to_vec())?)?);
                    off += n;
                }
                let out = build(&mut g, &ids)?;
                let pid = g.constant(Tensor::new(out_shape.clone(), proj.clone())?)?;
                let prod = g.mul(out, pid)?;
                let loss = g.sum(prod)?;
                g.item(loss)
            };
            let fd = fd_gradient(&flat0, EPS, &mut eval).unwrap();
            let err = max_rel_err(&analytic, &fd);
            assert!(
                err < TOL,
                "{name} instance {instance}: max rel err {err:.3e} over tolerance"
            );
        }
    }

    const R1: Dom = Dom::Range(-1.0, 1.0);

    #[test]
    fn fd_linear() {
        check("linear", &[(vec![5], R1), (vec![4, 5], R1), (vec![4], R1)], &|g, ids| {
            g.linear(ids[0], ids[1], Some(ids[2]))
        });
        check("linear_nobias", &[(vec![3], R1), (vec![2, 3], R1)], &|g, ids| {
            g.linear(ids[0], ids[1], None)
        });
    }

    #[test]
    fn fd_conv2d() {
        check(
            "conv_s1p1",
            &[(vec![2, 5, 5], R1), (vec![3, 2, 3, 3], R1), (vec![3], R1)],
            &|g, ids| g.conv2d(ids[0], ids[1], Some(ids[2]), 1, 1),
        );
        check(
            "conv_s2p1",
            &[(vec![2, 6, 6], R1), (vec![3, 2, 4, 4], R1), (vec![3], R1)],
            &|g, ids| g.conv2d(ids[0], ids[1], Some(ids[2]), 2, 1),
        );
    }

    #[test]
    fn fd_tconv2d() {
        check(
            "tconv_s2p1",
            &[(vec![3, 4, 4], R1), (vec![3, 2, 4, 4], R1), (vec![2], R1)],
            &|g, ids| g.tconv2d(ids[0], ids[1], Some(ids[2]), 2, 1),
        );
        check(
            "tconv_s1p1",
            &[(vec![2, 4, 4], R1), (vec![2, 2, 3, 3], R1)],
            &|g, ids| g.tconv2d(ids[0], ids[1], None, 1, 1),
        );
    }

    #[test]
    fn fd_pooling() {
        check("avgpool2d", &[(vec![2, 6, 6], R1)], &|g, ids| g.avgpool2d(ids[0]));
        check("gap2d", &[(vec![3, 4, 4], R1)], &|g, ids| g.gap2d(ids[0]));
        check("avgpool3d", &[(vec![2, 4, 4, 4], R1)], &|g, ids| {
            g.avgpool3d_half(ids[0])
        });
    }

    #[test]
    fn fd_pointwise() {
        check("relu", &[(vec![12], Dom::SignedBand(0.2, 1.5))], &|g, ids| g.relu(ids[0]));
        check("tanh", &[(vec![12], Dom::Range(-1.5, 1.5))], &|g, ids| g.tanh(ids[0]));
        check("sigmoid", &[(vec![12], Dom::Range(-1.5, 1.5))], &|g, ids| g.sigmoid(ids[0]));
        check("exp", &[(vec![12], R1)], &|g, ids| g.exp(ids[0]));
        check("sqrt", &[(vec![12], Dom::Range(0.5, 2.0))], &|g, ids| g.sqrt(ids[0]));
        check("abs", &[(vec![12], Dom::SignedBand(0.2, 1.5))], &|g, ids| g.abs(ids[0]));
        check("clamp_min", &[(vec![12], Dom::SignedBand(0.5, 1.5))], &|g, ids| {
            g.clamp_min(ids[0], 0.0)
        });
        check("scale_shift", &[(vec![9], R1)], &|g, ids| {
            let y = g.scale(ids[0], 1.7)?;
            g.shift(y, -0.3)
        });
        check("square", &[(vec![9], R1)], &|g, ids| g.pow_scalar(ids[0], 2.0));
        check("pow_fractional", &[(vec![9], Dom::Range(0.5, 2.0))], &|g, ids| {
            g.pow_scalar(ids[0], 0.7)
        });
    }

    #[test]
    fn fd_elementwise_pairs() {
        check("add", &[(vec![8], R1), (vec![8], R1)], &|g, ids| g.add(ids[0], ids[1]));
        check("sub", &[(vec![8], R1), (vec![8], R1)], &|g, ids| g.sub(ids[0], ids[1]));
        check("mul", &[(vec![8], R1), (vec![8], R1)], &|g, ids| g.mul(ids[0], ids[1]));
        check(
            "div",
            &[(vec![8], R1), (vec![8], Dom::SignedBand(0.5, 1.5))],
            &|g, ids| g.div(ids[0], ids[1]),
        );
    }

    #[test]
    fn fd_structure_ops() {
        check("add_chan_bias", &[(vec![3, 4, 4], R1), (vec![3], R1)], &|g, ids| {
            g.add_chan_bias(ids[0], ids[1])
        });
        check("mul_chan_gain", &[(vec![3, 4, 4], R1), (vec![3], R1)], &|g, ids| {
            g.mul_chan_gain(ids[0], ids[1])
        });
        check(
            "concat",
            &[(vec![2, 3], R1), (vec![1, 3], R1), (vec![4, 3], R1)],
            &|g, ids| g.concat(ids),
        );
        check("reshape", &[(vec![2, 6], R1)], &|g, ids| {
            let y = g.reshape(ids[0], vec![3, 4])?;
            g.tanh(y)
        });
        check("sum", &[(vec![7], R1)], &|g, ids| g.sum(ids[0]));
        check("mean", &[(vec![7], R1)], &|g, ids| g.mean(ids[0]));
        check("row_broadcast", &[(vec![5], R1)], &|g, ids| g.row_broadcast(ids[0], 4));
        check("row_sum", &[(vec![4, 5], R1)], &|g, ids| g.row_sum(ids[0]));
        check("softmax", &[(vec![6], Dom::Range(-2.0, 2.0))], &|g, ids| g.softmax(ids[0]));
        check(
            "stack_last",
            &[(vec![2, 2, 2], R1), (vec![2, 2, 2], R1), (vec![2, 2, 2], R1)],
            &|g, ids| g.stack_last(ids),
        );
    }

    #[test]
    fn fd_volume_ops() {
        for (plane, idx) in [
            (PlaneSelector::Axial, 3),
            (PlaneSelector::Coronal, 2),
            (PlaneSelector::Sagittal, 4),
        ] {
            check(
                &format!("plane_slice_{}", plane.name()),
                &[(vec![2, 4, 5, 6], R1)],
                &|g, ids| g.plane_slice(ids[0], plane, idx, 1),
            );
        }
        for axis in 1..=3 {
            check(&format!("delta_axis_{axis}"), &[(vec![2, 4, 4, 4], R1)], &|g, ids| {
                g.delta_axis(ids[0], axis)
            });
        }
        check("gauss_blur3", &[(vec![1, 5, 5, 5], R1)], &|g, ids| {
            g.gauss_blur3(ids[0], &[0.25, 0.5, 0.25])
        });
    }

    #[test]
    fn fd_composite_chain() {
        check(
            "conv_relu_gap_linear",
            &[
                (vec![1, 6, 6], R1),
                (vec![4, 1, 3, 3], R1),
                (vec![4], R1),
                (vec![2, 4], R1),
                (vec![2], R1),
            ],
            &|g, ids| {
                let c = g.conv2d(ids[0], ids[1], Some(ids[2]), 2, 1)?;
                let r = g.relu(c)?;
                let p = g.gap2d(r)?;
                let l = g.linear(p, ids[3], Some(ids[4]))?;
                g.tanh(l)
            },
        );
    }

    #[test]
    fn fd_gru_all_params() {
        use crate::autodiff::recurrent::{register_gru, GruCell};
        use crate::autodiff::params::ParamStore;
        for instance in 0..INSTANCES {
            let mut store = ParamStore::new("g", 100 + instance);
            register_gru(&mut store, "cell", 3, 4, 0).unwrap();
            let mut s = Stream::derived(instance, "gru_fd");
            let xs: Vec<Vec<f64>> = (0..4)
                .map(|_| (0..3).map(|_| s.range(-1.0, 1.0)).collect())
                .collect();
            let proj: Vec<f64> = (0..4).map(|_| s.range(-1.0, 1.0)).collect();

            let run = |store: &ParamStore| -> (f64, Vec<f64>, Vec<String>) {
                let mut g = Graph::new();
                let cell = GruCell::bind(&mut g, store, "cell").unwrap();
                let mut h = cell.zero_state(&mut g).unwrap();
                for x in &xs {
                    let xid = g.constant(Tensor::new(vec![3], x.clone()).unwrap()).unwrap();
                    h = cell.step(&mut g, xid, h).unwrap();
                }
                let pid = g.constant(Tensor::new(vec![4], proj.clone()).unwrap()).unwrap();
                let prod = g.mul(h, pid).unwrap();
                let loss = g.sum(prod).unwrap();
                let grads = g.backward(loss).unwrap();
                let mut names: Vec<String> = store.names().map(String::from).collect();
                names.sort();
                let mut flat = Vec::new();
                for b in g.bindings() {
                    let _ = b;
                }
                for name in &names {
                    let mut got = vec![0.0; store.get(name).unwrap().value.len()];
                    for b in g.bindings() {
                        if &b.name == name {
                            if let Some(src) = grads.get(b.node) {
                                for (d, s) in got.iter_mut().zip(src.iter()) {
                                    *d += s;
                                }
                            }
                        }
                    }
                    flat.extend(got);
                }
                (g.item(loss).unwrap(), flat, names)
            };
            let (_, analytic, names) = run(&store);

            let mut flat0 = Vec::new();
            for name in &names {
                flat0.extend_from_slice(&store.get(name).unwrap().value);
            }
            let mut eval = |xs_flat: &[f64]| -> crate::Result<f64> {
                let mut st = store.clone();
                let mut off = 0;
                for name in &names {
                    let p = st.get_mut(name).unwrap();
                    let n = p.value.len();
                    p.value.copy_from_slice(&xs_flat[off..off + n]);
                    off += n;
                }
                Ok(run(&st).0)
            };
            let fd = fd_gradient(&flat0, EPS, &mut eval).unwrap();
            let err = max_rel_err(&analytic, &fd);
            assert!(err < TOL, "gru instance {instance}: err {err:.3e}");
        }
    }

    #[test]
    fn fd_bigru_four_steps() {
        use crate::autodiff::recurrent::{register_bigru, BiGru};
        use crate::autodiff::params::ParamStore;
        let mut store = ParamStore::new("m", 55);
        register_bigru(&mut store, "mix", 2, 3, 2, 0).unwrap();
        let mut s = Stream::new(77);
        let seq: Vec<Vec<f64>> = (0..4).map(|_| (0..2).map(|_| s.range(-1.0, 1.0)).collect()).collect();
        let proj: Vec<f64> = (0..2 * 4).map(|_| s.range(-1.0, 1.0)).collect();

        let build = |inputs: &[f64]| -> crate::Result<(f64, Vec<f64>)> {
            let mut g = Graph::new();
            let net = BiGru::bind(&mut g, &store, "mix")?;
            let mut ids = Vec::new();
            for d in 0..4 {
                ids.push(g.var(
                    Tensor::new(vec![2], inputs[d * 2..(d + 1) * 2].to_vec())?,
                    &format!("x{d}"),
                )?);
            }
            let outs = net.run(&mut g, &ids)?;
            let mut parts = Vec::new();
            for (d, &o) in outs.iter().enumerate() {
                let pid = g.constant(Tensor::new(vec![2], proj[d * 2..(d + 1) * 2].to_vec())?)?;
                parts.push(g.mul(o, pid)?);
            }
            let cat = g.concat(&parts)?;
            let loss = g.sum(cat)?;
            let grads = g.backward(loss)?;
            let mut flat = Vec::new();
            for &id in &ids {
                flat.extend_from_slice(grads.get(id).unwrap());
            }
            Ok((g.item(loss)?, flat))
        };
        let flat0: Vec<f64> = seq.concat();
        let (_, analytic) = build(&flat0).unwrap();
        let mut eval = |xs: &[f64]| -> crate::Result<f64> { Ok(build(xs)?.0) };
        let fd = fd_gradient(&flat0, EPS, &mut eval).unwrap();
        assert!(max_rel_err(&analytic, &fd) < TOL);
    }

    #[test]
    fn quick_battery_reports_tight_errors() {
        for (name, err) in quick_battery().unwrap() {
            assert!(err < TOL, "{name}: {err:.3e}");
        }
    }
}
