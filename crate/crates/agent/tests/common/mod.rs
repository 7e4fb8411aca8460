#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rlamr_agent::{Arch, Policy, PolicyConfig};
use rlamr_core::baselines::random_select;
use rlamr_core::env::ObsConfig;
use rlamr_core::{AmrEnv, EnvConfig, FunctionClass, GlobalState, Mode};
use rlamr_nn::{Graph, ParamId};

/// Static env with 8×8 observations so finite differences stay cheap.
pub fn small_env_cfg(class: FunctionClass, nx: u32) -> EnvConfig {
    let mut cfg = EnvConfig::static_default(class);
    cfg.base_nx = nx;
    cfg.base_ny = nx;
    cfg.d_max = 2;
    cfg.obs = ObsConfig { l_element: 4, l_context: 2 };
    cfg
}

pub fn small_policy_cfg(arch: Arch) -> PolicyConfig {
    PolicyConfig {
        arch,
        conv_filters: 2,
        conv_kernel: 3,
        conv_stride: 2,
        ipn_h1: 5,
        ipn_h2: 4,
        hypernet_h1: 3,
        hypernet_h: 4,
        graphnet_dim_v: 4,
        graphnet_dim_e: 3,
        grad_chunk: 16,
    }
}

pub fn small_policy(arch: Arch, seed: u64) -> Policy {
    Policy::new(small_policy_cfg(arch), 8, 2, seed).unwrap()
}

/// States from random truths after a few random refinements.
pub fn random_states(n: usize, seed: u64) -> Vec<GlobalState> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let class = FunctionClass::ALL[rng.gen_range(0..4)];
            let nx = rng.gen_range(1..=3);
            let mut env = AmrEnv::reset(small_env_cfg(class, nx), &mut rng).unwrap();
            for _ in 0..rng.gen_range(0..4) {
                let a = random_select(&env.valid_mask(), &mut rng);
                env.advance(a).unwrap();
            }
            env.observe()
        })
        .collect()
}

pub fn full_size_state(nx: u32, seed: u64, refinements: usize) -> GlobalState {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cfg = EnvConfig::static_default(FunctionClass::Bumps);
    cfg.base_nx = nx;
    cfg.base_ny = nx;
    let mut env = AmrEnv::reset(cfg, &mut rng).unwrap();
    for _ in 0..refinements {
        let a = random_select(&env.valid_mask(), &mut rng);
        env.advance(a).unwrap();
    }
    env.observe()
}

pub fn mode_static() -> Mode {
    Mode::Static
}

/// Direct valid convolution with ReLU over one HWC image; output HWC.
pub fn naive_conv_relu(img: &[f64], side: usize, ch: usize, w: &[f64], b: &[f64], k: usize, stride: usize) -> Vec<f64> {
    let nf = b.len();
    let o = (side - k) / stride + 1;
    let mut out = vec![0.0; o * o * nf];
    for oy in 0..o {
        for ox in 0..o {
            for f in 0..nf {
                let mut s = b[f];
                for ky in 0..k {
                    for kx in 0..k {
                        for c in 0..ch {
                            let px = img[((oy * stride + ky) * side + ox * stride + kx) * ch + c];
                            s += px * w[((ky * k + kx) * ch + c) * nf + f];
                        }
                    }
                }
                out[(oy * o + ox) * nf + f] = s.max(0.0);
            }
        }
    }
    out
}

/// `x W + b` for a single row, with `W` row-major `[len(x), len(b)]`.
pub fn naive_dense(x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
    let n = b.len();
    (0..n).map(|j| b[j] + x.iter().enumerate().map(|(i, xi)| xi * w[i * n + j]).sum::<f64>()).collect()
}

pub fn relu(v: Vec<f64>) -> Vec<f64> {
    v.into_iter().map(|x| x.max(0.0)).collect()
}

pub fn softmax_masked(logits: &[f64], mask: &[bool]) -> Vec<f64> {
    let m = logits.iter().zip(mask).filter(|(_, &v)| v).map(|(l, _)| *l).fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().zip(mask).map(|(l, &v)| if v { (l - m).exp() } else { 0.0 }).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

pub fn param<'a>(p: &'a Policy, name: &str) -> &'a [f64] {
    p.params().value(p.params().id(name).unwrap())
}

/// Uniform weights in (−std, std); keeps pre-activations off the ReLU kink.
pub fn randomize(p: &mut Policy, seed: u64, std: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for prm in p.params_mut().iter_mut() {
        for v in &mut prm.value {
            *v = rng.gen_range(-std..std);
        }
    }
}

pub fn logits_of(p: &Policy, s: &GlobalState) -> Vec<f64> {
    let mut g = Graph::new(p.params());
    let (l, _) = p.logits(&mut g, &[s]).unwrap();
    g.value(l).to_vec()
}

pub fn permuted(s: &GlobalState, perm: &[usize]) -> GlobalState {
    let mut out = s.clone();
    for (k, &src) in perm.iter().enumerate() {
        let dst = (k + 1) * s.obs_len();
        out.observations[dst..dst + s.obs_len()].copy_from_slice(s.observation(src + 1));
        out.valid_mask[k + 1] = s.valid_mask[src + 1];
    }
    out
}

/// Independent per-edge, per-node evaluation of the graph policy.
pub fn graphnet_oracle(p: &Policy, s: &GlobalState) -> Vec<f64> {
    let cfg = p.config();
    let n = s.n_leaves();
    let mlp = |prefix: &str, x: &[f64]| {
        let h = relu(naive_dense(x, param(p, &format!("{prefix}.l1.w")), param(p, &format!("{prefix}.l1.b"))));
        relu(naive_dense(&h, param(p, &format!("{prefix}.l2.w")), param(p, &format!("{prefix}.l2.b"))))
    };
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let c = naive_conv_relu(
                s.observation(i + 1),
                s.obs_side,
                2,
                param(p, "conv.filters"),
                param(p, "conv.bias"),
                cfg.conv_kernel,
                cfg.conv_stride,
            );
            relu(naive_dense(&c, param(p, "graph.enc.w"), param(p, "graph.enc.b")))
        })
        .collect();
    let mut e: Vec<Vec<f64>> = s
        .adjacency
        .edges
        .iter()
        .map(|edge| relu(naive_dense(&s.adjacency.one_hot(edge), param(p, "graph.edge_enc.w"), param(p, "graph.edge_enc.b"))))
        .collect();
    for block in ["core", "core", "out"] {
        for (k, edge) in s.adjacency.edges.iter().enumerate() {
            let mut x = e[k].clone();
            x.extend_from_slice(&v[edge.receiver]);
            x.extend_from_slice(&v[edge.sender]);
            e[k] = mlp(&format!("graph.{block}.edge"), &x);
        }
        let mut next = Vec::with_capacity(n);
        for i in 0..n {
            let mut agg = vec![0.0; cfg.graphnet_dim_e];
            for (k, edge) in s.adjacency.edges.iter().enumerate() {
                if edge.receiver == i {
                    for (a, b) in agg.iter_mut().zip(&e[k]) {
                        *a += b;
                    }
                }
            }
            agg.extend_from_slice(&v[i]);
            next.push(mlp(&format!("graph.{block}.node"), &agg));
        }
        v = next;
    }
    let mut logits = vec![param(p, "graph.dummy")[0]];
    for vi in &v {
        logits.push(naive_dense(vi, param(p, "graph.psi.w"), param(p, "graph.psi.b"))[0]);
    }
    softmax_masked(&logits, &s.valid_mask)
}

pub fn fd_check(p: &Policy, states: &[GlobalState], actions: &[usize], weights: &[f64]) -> f64 {
    let refs: Vec<&GlobalState> = states.iter().collect();
    let (_, grads) = p.loss_and_grad(&refs, actions, weights).unwrap();
    let mut work = p.clone();
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for k in 0..p.params().len() {
        let id = ParamId(k);
        for i in 0..p.params().value(id).len() {
            let orig = work.params().value(id)[i];
            work.params_mut().value_mut(id)[i] = orig + h;
            let up = work.loss_and_grad(&refs, actions, weights).unwrap().0;
            work.params_mut().value_mut(id)[i] = orig - h;
            let dn = work.loss_and_grad(&refs, actions, weights).unwrap().0;
            work.params_mut().value_mut(id)[i] = orig;
            let fd = (up - dn) / (2.0 * h);
            let an = grads.get(id)[i];
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-4);
            worst = worst.max(rel);
        }
    }
    worst
}

/// Straight-line hypernet evaluation for a mesh with a single leaf.
pub fn hypernet_single_leaf_oracle(p: &Policy, s: &GlobalState) -> Vec<f64> {
    let cfg = p.config();
    let conv = |i: usize| {
        naive_conv_relu(s.observation(i), s.obs_side, 2, param(p, "conv.filters"), param(p, "conv.bias"), cfg.conv_kernel, cfg.conv_stride)
    };
    let (s0, s1) = (conv(0), conv(1));
    let d = s0.len();
    let (h1, h) = (cfg.hypernet_h1, cfg.hypernet_h);
    let (u, v, y) = (param(p, "hyper.u"), param(p, "hyper.v"), param(p, "hyper.y"));
    // z = (s0 + s1) U, W = z V reshaped to d×h, b = (s0 + s1) Y.
    let sum: Vec<f64> = s0.iter().zip(&s1).map(|(a, b)| a + b).collect();
    let z = naive_dense(&sum, u, &vec![0.0; h1]);
    let wflat = naive_dense(&z, v, &vec![0.0; d * h]);
    let b = naive_dense(&sum, y, &vec![0.0; h]);
    let logit = |si: &[f64]| {
        let hid = relu(naive_dense(si, &wflat, &b));
        naive_dense(&hid, param(p, "hyper.out.w"), param(p, "hyper.out.b"))[0]
    };
    softmax_masked(&[logit(&s0), logit(&s1)], &s.valid_mask)
}
