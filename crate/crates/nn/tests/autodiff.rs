use proptest::prelude::*;
use rlamr_nn::{Checkpoint, ConvGeom, Graph, Init, NnError, ParamSet, Var};

/// Central-difference check of every parameter coordinate.
fn check_grads(ps: &ParamSet, f: impl Fn(&mut Graph) -> Var, tol: f64) {
    let g = {
        let mut graph = Graph::new(ps);
        let l = f(&mut graph);
        graph.backward(l).unwrap()
    };
    let h = 1e-6;
    let mut work = ps.clone();
    let ids: Vec<_> = (0..ps.len()).map(rlamr_nn::ParamId).collect();
    for id in ids {
        for k in 0..ps.value(id).len() {
            let orig = work.value(id)[k];
            work.value_mut(id)[k] = orig + h;
            let up = {
                let mut graph = Graph::new(&work);
                let l = f(&mut graph);
                graph.scalar(l)
            };
            work.value_mut(id)[k] = orig - h;
            let dn = {
                let mut graph = Graph::new(&work);
                let l = f(&mut graph);
                graph.scalar(l)
            };
            work.value_mut(id)[k] = orig;
            let fd = (up - dn) / (2.0 * h);
            let an = g.get(id)[k];
            let err = (fd - an).abs() / (1.0 + fd.abs().max(an.abs()));
            assert!(err < tol, "param {} [{k}]: fd {fd} analytic {an}", ps.get(id).name);
        }
    }
}

fn params(spec: &[(&str, &[usize])], seed: u64) -> ParamSet {
    let mut ps = ParamSet::new();
    for (name, shape) in spec {
        ps.add(name, shape, Init::TruncatedNormal(0.5), seed).unwrap();
    }
    ps
}

#[test]
fn dense_relu_stack() {
    let ps = params(&[("w1", &[4, 5]), ("b1", &[5]), ("w2", &[5, 1]), ("b2", &[1])], 1);
    let x: Vec<f64> = (0..12).map(|i| ((i * 7 % 5) as f64) * 0.3 - 0.6).collect();
    check_grads(
        &ps,
        |g| {
            let p = |g: &mut Graph, n: &str| g.param(g.params().id(n).unwrap());
            let xi = g.input(x.clone(), &[3, 4]).unwrap();
            let (w1, b1, w2, b2) = (p(g, "w1"), p(g, "b1"), p(g, "w2"), p(g, "b2"));
            let h = g.dense(xi, w1, b1).unwrap();
            let h = g.relu(h);
            let o = g.dense(h, w2, b2).unwrap();
            let s = g.square(o);
            g.mean(s)
        },
        1e-6,
    );
}

#[test]
fn conv_front_end() {
    let geom = ConvGeom { height: 8, width: 8, channels: 2, kernel: 3, stride: 2 };
    let ps = params(&[("f", &[18, 3]), ("b", &[3]), ("w", &[27, 1])], 2);
    let x: Vec<f64> = (0..256).map(|i| ((i * 13 % 17) as f64) * 0.1 - 0.8).collect();
    check_grads(
        &ps,
        |g| {
            let p = |g: &mut Graph, n: &str| g.param(g.params().id(n).unwrap());
            let xi = g.input(x.clone(), &[2, 128]).unwrap();
            let (f, b, w) = (p(g, "f"), p(g, "b"), p(g, "w"));
            let c = g.conv2d(xi, f, b, geom).unwrap();
            let c = g.relu(c);
            let o = g.matmul(c, w).unwrap();
            let e = g.exp(o);
            g.sum(e)
        },
        1e-6,
    );
}

#[test]
fn segment_softmax_and_gathers() {
    let ps = params(&[("e", &[6, 3]), ("w", &[6, 1]), ("d", &[1])], 3);
    let offsets = [0, 3, 4, 7];
    let mask = [true, false, true, true, true, true, false];
    check_grads(
        &ps,
        |g| {
            let p = |g: &mut Graph, n: &str| g.param(g.params().id(n).unwrap());
            let (e, w, d) = (p(g, "e"), p(g, "w"), p(g, "d"));
            let rows = g.gather_rows(e, &[0, 2, 5, 1, 1, 4]).unwrap();
            let agg = g.segment_sum(rows, &[0, 0, 1, 2, 3, 3], 4).unwrap();
            let mean = g.segment_mean(rows, &[1, 1, 1, 2, 3, 0], 4).unwrap();
            let both = g.concat_cols(&[agg, mean]).unwrap();
            let hidden = g.slice_rows(both, 1, 4).unwrap();
            let z = g.matmul(hidden, w).unwrap();
            let z = g.reshape(z, &[3]).unwrap();
            let all = g.concat_cols(&[d, z]).unwrap();
            let all = g.reshape(all, &[4]).unwrap();
            let tail = g.gather(all, &[1, 2, 3]).unwrap();
            let logits = g.concat_cols(&[all, tail]).unwrap();
            let logits = g.reshape(logits, &[7]).unwrap();
            let lp = g.log_softmax_segments(logits, &offsets, &mask).unwrap();
            let picked = g.gather(lp, &[0, 3, 5]).unwrap();
            let h = g.entropy_segments(lp, &offsets).unwrap();
            let a = g.weighted_sum(picked, &[0.7, -1.3, 2.0]).unwrap();
            let b = g.weighted_sum(h, &[0.5, 1.0, -0.25]).unwrap();
            g.add(a, b).unwrap()
        },
        1e-6,
    );
}

#[test]
fn ppo_style_clipped_objective() {
    let ps = params(&[("a", &[4]), ("b", &[4])], 4);
    let adv = [1.0, -0.5, 2.0, -1.5];
    check_grads(
        &ps,
        |g| {
            let p = |g: &mut Graph, n: &str| g.param(g.params().id(n).unwrap());
            let (a, b) = (p(g, "a"), p(g, "b"));
            let d = g.sub(a, b).unwrap();
            let d = g.scale(d, 0.5);
            let r = g.exp(d);
            let un = g.mul_const(r, &adv).unwrap();
            let rc = g.clamp(r, 0.8, 1.2);
            let cl = g.mul_const(rc, &adv).unwrap();
            let m = g.minimum(un, cl).unwrap();
            let m = g.add_const(m, &[0.1; 4]).unwrap();
            let pr = g.mul(m, a).unwrap();
            g.sum(pr)
        },
        1e-6,
    );
}

#[test]
fn shape_errors_are_reported() {
    let ps = ParamSet::new();
    let mut g = Graph::new(&ps);
    assert!(matches!(g.input(vec![1.0; 3], &[2, 2]), Err(NnError::ShapeMismatch(_))));
    let a = g.input(vec![1.0; 4], &[2, 2]).unwrap();
    let b = g.input(vec![1.0; 3], &[3]).unwrap();
    assert!(g.add(a, b).is_err());
    assert!(g.add_row(a, b).is_err());
    assert!(g.segment_sum(a, &[0, 3], 2).is_err());
    assert!(g.slice_rows(a, 1, 3).is_err());
    assert!(g.log_softmax_segments(b, &[0, 2], &[true; 3]).is_err());
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let mut ps = params(&[("conv.f", &[50, 6]), ("conv.b", &[6]), ("head.w", &[600, 1])], 9);
    ps.add("z", &[0], Init::Zeros, 0).unwrap();
    let meta = serde_json::json!({"episodes": 12});
    let ck = Checkpoint::new("ipn", "abc123", meta, ps.clone());
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    ck.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back, ck);
    let mut fresh = params(&[("conv.f", &[50, 6]), ("conv.b", &[6]), ("head.w", &[600, 1])], 10);
    fresh.add("z", &[0], Init::Zeros, 0).unwrap();
    back.restore_into(&mut fresh).unwrap();
    assert_eq!(fresh, ps);
    let other = params(&[("x", &[2])], 0);
    assert!(back.restore_into(&mut other.clone()).is_err());

    let mut bytes = ck.to_bytes().unwrap();
    bytes.truncate(bytes.len() - 3);
    assert!(matches!(Checkpoint::from_bytes(&bytes), Err(NnError::Format(_))));
    assert!(matches!(Checkpoint::from_bytes(b"not a checkpoint"), Err(NnError::Format(_))));
}

#[test]
fn matmul_rows_do_not_depend_on_batch() {
    // Per-state outputs must not change when states are batched together.
    let ps = params(&[("w", &[600, 64])], 5);
    let x: Vec<f64> = (0..600 * 7).map(|i| ((i * 31 % 97) as f64) / 97.0 - 0.5).collect();
    let mut g = Graph::new(&ps);
    let w = g.param(ps.id("w").unwrap());
    let all = g.input(x.clone(), &[7, 600]).unwrap();
    let yall = g.matmul(all, w).unwrap();
    for r in 0..7 {
        let one = g.input(x[r * 600..(r + 1) * 600].to_vec(), &[1, 600]).unwrap();
        let y = g.matmul(one, w).unwrap();
        assert_eq!(g.value(y), &g.value(yall)[r * 64..(r + 1) * 64]);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn log_softmax_is_permutation_equivariant(
        logits in prop::collection::vec(-20.0f64..20.0, 1..12),
        seed in any::<u64>(),
    ) {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let n = logits.len();
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
        let ps = ParamSet::new();
        let mut g = Graph::new(&ps);
        let x = g.input(logits.clone(), &[n]).unwrap();
        let px = g.input(perm.iter().map(|&i| logits[i]).collect(), &[n]).unwrap();
        let lp = g.log_softmax_segments(x, &[0, n], &vec![true; n]).unwrap();
        let plp = g.log_softmax_segments(px, &[0, n], &vec![true; n]).unwrap();
        for (k, &i) in perm.iter().enumerate() {
            prop_assert_eq!(g.value(plp)[k], g.value(lp)[i]);
        }
        let total: f64 = g.value(lp).iter().map(|v| v.exp()).sum();
        prop_assert!((total - 1.0).abs() < 1e-12);
    }
}
