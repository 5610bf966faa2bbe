use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use vfb::attention::{attend, project_regions, weighted_pool, AttentionParams, VideoFeatures};
use vfb::model::{AnswerVocab, Mode, ModelConfig, ModelParams};
use vfb::tensor::{grad_check, softmax_forward, Graph, Tensor, Var, DEFAULT_EPS};
use vfb::text::{BlankSentence, EmbeddingTable};
use vfb::train::{init_incremental, AdagradState};
use vfb::Result;

const FD_TOL: f64 = 1e-4;

fn cases(n: u32) -> ProptestConfig {
    ProptestConfig::with_cases(n)
}

fn values(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-2.0f64..2.0, n)
}

fn tensor(shape: &[usize], data: Vec<f64>) -> Tensor {
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Reduces a non-scalar output to a scalar with fixed, uneven weights so
/// every output entry contributes a distinct gradient.
fn weighted_sum(g: &mut Graph, out: Var) -> Result<Var> {
    let shape = g.shape(out).to_vec();
    let n = g.value(out).len();
    let w: Vec<f64> = (0..n).map(|i| ((i + 1) as f64 * 0.7).sin()).collect();
    let w = g.constant(&shape, w)?;
    let prod = g.mul(out, w)?;
    g.sum(prod)
}

fn fd_error(inputs: &[Tensor], f: impl Fn(&mut Graph, &[Var]) -> Result<Var>) -> f64 {
    grad_check(inputs, DEFAULT_EPS, |g, v| {
        let out = f(g, v)?;
        weighted_sum(g, out)
    })
    .unwrap()
    .max_rel_error
}

/// `n` distinct values at least 0.05 apart, shuffled by `perm_seed`, so
/// max-pooling has no ties within a finite-difference step.
fn spaced(n: usize, perm_seed: u64) -> Vec<f64> {
    let mut v: Vec<f64> = (0..n).map(|i| -1.0 + 0.05 * i as f64).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(perm_seed);
    for i in (1..n).rev() {
        v.swap(i, rng.random_range(0..=i));
    }
    v
}

proptest! {
    #![proptest_config(cases(128))]

    #[test]
    fn matmul_gradients((m, k, n, a, b) in (1usize..5, 1usize..5, 1usize..5)
        .prop_flat_map(|(m, k, n)| (Just(m), Just(k), Just(n), values(m * k), values(k * n))))
    {
        let e = fd_error(&[tensor(&[m, k], a), tensor(&[k, n], b)], |g, v| g.matmul(v[0], v[1]));
        prop_assert!(e < FD_TOL, "{e}");
    }

    #[test]
    fn matmul_nt_gradients((m, k, n, a, b) in (1usize..5, 1usize..5, 1usize..5)
        .prop_flat_map(|(m, k, n)| (Just(m), Just(k), Just(n), values(m * k), values(n * k))))
    {
        let e = fd_error(&[tensor(&[m, k], a), tensor(&[n, k], b)], |g, v| g.matmul_nt(v[0], v[1]));
        prop_assert!(e < FD_TOL, "{e}");
    }

    #[test]
    fn matvec_gradients((m, k, w, x) in (1usize..6, 1usize..6)
        .prop_flat_map(|(m, k)| (Just(m), Just(k), values(m * k), values(k))))
    {
        let e = fd_error(&[tensor(&[m, k], w), tensor(&[k], x)], |g, v| g.matvec(v[0], v[1]));
        prop_assert!(e < FD_TOL, "{e}");
    }

    #[test]
    fn vecmat_gradients((m, k, x, w) in (1usize..6, 1usize..6)
        .prop_flat_map(|(m, k)| (Just(m), Just(k), values(m), values(m * k))))
    {
        let e = fd_error(&[tensor(&[m], x), tensor(&[m, k], w)], |g, v| g.vecmat(v[0], v[1]));
        prop_assert!(e < FD_TOL, "{e}");
    }

    #[test]
    fn add_and_mul_gradients((n, a, b) in (1usize..10).prop_flat_map(|n| (Just(n), values(n), values(n)))) {
        let ins = [tensor(&[n], a), tensor(&[n], b)];
        let e = fd_error(&ins, |g, v| g.add(v[0], v[1]));
        prop_assert!(e < FD_TOL, "add {e}");
        let e = fd_error(&ins, |g, v| g.mul(v[0], v[1]));
        prop_assert!(e < FD_TOL, "mul {e}");
    }

    #[test]
    fn scale_gradients((n, a, c) in (1usize..10).prop_flat_map(|n| (Just(n), values(n), -3.0f64..3.0))) {
        let e = fd_error(&[tensor(&[n], a)], |g, v| g.scale(v[0], c));
        prop_assert!(e < FD_TOL, "{e}");
    }

    #[test]
    fn tanh_and_sigmoid_gradients((n, a) in (1usize..10).prop_flat_map(|n| (Just(n), values(n)))) {
        let ins = [tensor(&[n], a)];
        let e = fd_error(&ins, |g, v| g.tanh(v[0]));
        prop_assert!(e < FD_TOL, "tanh {e}");
        let e = fd_error(&ins, |g, v| g.sigmoid(v[0]));
        prop_assert!(e < FD_TOL, "sigmoid {e}");
    }

    #[test]
    fn concat_slice_reshape_gradients((n, m, a, b) in (1usize..6, 1usize..6)
        .prop_flat_map(|(n, m)| (Just(n), Just(m), values(n), values(m))))
    {
        let ins = [tensor(&[n], a), tensor(&[m], b)];
        let e = fd_error(&ins, |g, v| g.concat(&[v[0], v[1]]));
        prop_assert!(e < FD_TOL, "concat {e}");
        let e = fd_error(&ins, |g, v| {
            let c = g.concat(&[v[0], v[1]])?;
            g.slice(c, n / 2, m)
        });
        prop_assert!(e < FD_TOL, "slice {e}");
        let e = fd_error(&ins, |g, v| {
            let c = g.concat(&[v[1], v[0]])?;
            g.reshape(c, &[1, n + m])
        });
        prop_assert!(e < FD_TOL, "reshape {e}");
    }

    #[test]
    fn sum_and_softmax_gradients((n, a) in (1usize..10).prop_flat_map(|n| (Just(n), values(n)))) {
        let ins = [tensor(&[n], a)];
        let e = fd_error(&ins, |g, v| g.sum(v[0]));
        prop_assert!(e < FD_TOL, "sum {e}");
        let e = fd_error(&ins, |g, v| g.softmax(v[0]));
        prop_assert!(e < FD_TOL, "softmax {e}");
    }

    #[test]
    fn broadcast_row_add_gradients((r, c, m, v) in (1usize..5, 1usize..5)
        .prop_flat_map(|(r, c)| (Just(r), Just(c), values(r * c), values(c))))
    {
        let e = fd_error(&[tensor(&[r, c], m), tensor(&[c], v)], |g, v| g.broadcast_row_add(v[0], v[1]));
        prop_assert!(e < FD_TOL, "{e}");
    }

    #[test]
    fn framewise_max_gradients(t in 1usize..4, r in 1usize..4, c in 1usize..4, seed in any::<u64>()) {
        let frames = tensor(&[t, r, c], spaced(t * r * c, seed));
        let e = fd_error(&[frames], |g, v| g.framewise_max(v[0]));
        prop_assert!(e < FD_TOL, "{e}");
    }

    #[test]
    fn softmax_cross_entropy_gradients((n, a, t) in (2usize..8)
        .prop_flat_map(|n| (Just(n), values(n), 0..n)))
    {
        let r = grad_check(&[tensor(&[n], a)], DEFAULT_EPS, |g, v| g.softmax_cross_entropy(v[0], t)).unwrap();
        prop_assert!(r.max_rel_error < FD_TOL, "{r:?}");
    }

    #[test]
    fn matmul_matches_triple_loop_bitwise((m, k, n, a, b) in (1usize..=8, 1usize..=8, 1usize..=8)
        .prop_flat_map(|(m, k, n)| (Just(m), Just(k), Just(n), values(m * k), values(k * n))))
    {
        let mut g = Graph::new();
        let va = g.leaf(&tensor(&[m, k], a.clone()));
        let vb = g.leaf(&tensor(&[k, n], b.clone()));
        let out = g.matmul(va, vb).unwrap();
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for p in 0..k {
                    acc += a[i * k + p] * b[p * n + j];
                }
                prop_assert_eq!(g.value(out)[i * n + j].to_bits(), acc.to_bits());
            }
        }
    }

    #[test]
    fn framewise_max_is_idempotent((r, c, data) in (1usize..6, 1usize..6)
        .prop_flat_map(|(r, c)| (Just(r), Just(c), values(r * c))))
    {
        let pooled = tensor(&[r, c], data);
        let mut g = Graph::new();
        let once = g.leaf(&tensor(&[1, r, c], pooled.data().to_vec()));
        let out = g.framewise_max(once).unwrap();
        prop_assert_eq!(g.value(out), pooled.data());
        let again = g.reshape(out, &[1, r, c]).unwrap();
        let twice = g.framewise_max(again).unwrap();
        prop_assert_eq!(g.value(twice), pooled.data());
    }
}

proptest! {
    #![proptest_config(cases(1000))]

    #[test]
    fn softmax_sums_to_one(v in prop::collection::vec(-50.0f64..50.0, 1..40)) {
        let p = softmax_forward(&v).unwrap();
        let s: f64 = p.iter().sum();
        prop_assert!((s - 1.0).abs() < 1e-9, "{s}");
        prop_assert!(p.iter().all(|&x| (0.0..=1.0).contains(&x)));
    }

    #[test]
    fn attention_weights_sum_to_one(seed in any::<u64>(), r in 1usize..10, c in 1usize..6) {
        let a = Attention::random(seed, r, c, 5, 4);
        let mut g = Graph::new();
        let (w, _, _) = a.run(&mut g, None);
        let s: f64 = g.value(w).iter().sum();
        prop_assert!((s - 1.0).abs() < 1e-9, "{s}");
    }
}

/// A random attention block with its inputs.
struct Attention {
    params: AttentionParams,
    raw: Tensor,
    u: Tensor,
}

impl Attention {
    fn random(seed: u64, r: usize, c: usize, u_dim: usize, k: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = AttentionParams::init(&mut rng, c, u_dim, k);
        let raw = Tensor::from_fn(&[r, c], |_| rng.random_range(-3.0..3.0));
        let u = Tensor::from_fn(&[u_dim], |_| rng.random_range(-1.0..1.0));
        Self { params, raw, u }
    }

    /// Returns (weights, F_v, ṽ). `perm[i]` is the source row of output row i.
    fn run(&self, g: &mut Graph, perm: Option<&[usize]>) -> (Var, Var, Var) {
        let raw = match perm {
            None => self.raw.clone(),
            Some(p) => {
                let c = self.raw.shape()[1];
                let data = p.iter().flat_map(|&i| self.raw.row(i).to_vec()).collect();
                tensor(&[p.len(), c], data)
            }
        };
        let vars = self.params.register(g, false);
        let raw = g.leaf(&raw);
        let u = g.leaf(&self.u);
        let f_v = project_regions(g, raw, vars.w_i).unwrap();
        let w = attend(g, f_v, u, &vars).unwrap();
        let v = weighted_pool(g, w, f_v).unwrap();
        (w, f_v, v)
    }
}

proptest! {
    #![proptest_config(cases(256))]

    #[test]
    fn attended_vector_is_in_convex_hull(seed in any::<u64>(), r in 1usize..10, c in 1usize..6) {
        let a = Attention::random(seed, r, c, 6, 4);
        let mut g = Graph::new();
        let (_, f_v, v) = a.run(&mut g, None);
        let f = g.value(f_v);
        let d = g.value(v).len();
        for (j, &x) in g.value(v).iter().enumerate() {
            let col = (0..r).map(|i| f[i * d + j]);
            let lo = col.clone().fold(f64::INFINITY, f64::min);
            let hi = col.fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(x >= lo - 1e-12 && x <= hi + 1e-12, "{lo} <= {x} <= {hi}");
        }
    }

    #[test]
    fn attention_permutes_with_regions(seed in any::<u64>(), r in 2usize..10) {
        let a = Attention::random(seed, r, 4, 6, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let mut perm: Vec<usize> = (0..r).collect();
        for i in (1..r).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let mut g = Graph::new();
        let (w, _, _) = a.run(&mut g, None);
        let (wp, _, _) = a.run(&mut g, Some(&perm));
        for (i, &src) in perm.iter().enumerate() {
            prop_assert!((g.value(wp)[i] - g.value(w)[src]).abs() < 1e-12);
        }
    }

    #[test]
    fn adagrad_accumulators_never_shrink(
        grads in prop::collection::vec(values(6), 1..8),
        lr in 0.0f64..1.0,
    ) {
        let mut p = tensor(&[6], vec![0.5; 6]);
        let mut state = AdagradState::new(1e-8);
        let mut prev = vec![0.0; 6];
        for g in &grads {
            state.step("p", &mut p, g, lr).unwrap();
            let acc = state.get("p").unwrap();
            prop_assert!(acc.iter().zip(&prev).all(|(a, b)| a >= b));
            prev = acc.to_vec();
        }
    }

    #[test]
    fn zero_learning_rate_freezes(init in values(6), grads in prop::collection::vec(values(6), 1..8)) {
        let mut p = tensor(&[6], init.clone());
        let mut state = AdagradState::new(1e-8);
        for g in &grads {
            state.step("p", &mut p, g, 0.0).unwrap();
        }
        prop_assert!(p.data().iter().zip(&init).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}

fn table(rng: &mut impl Rng, words: &[&str], dim: usize) -> EmbeddingTable {
    let entries = words
        .iter()
        .map(|w| {
            (
                w.to_string(),
                (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
            )
        })
        .collect();
    EmbeddingTable::new(entries).unwrap()
}

const WORDS: [&str; 6] = ["a", "man", "opens", "the", "door", "slowly"];

fn sentence(rng: &mut impl Rng) -> BlankSentence {
    let n = rng.random_range(1..6);
    let blank = rng.random_range(0..=n);
    let mut toks: Vec<&str> = (0..n)
        .map(|_| WORDS[rng.random_range(0..WORDS.len())])
        .collect();
    toks.insert(blank, "_____");
    BlankSentence::parse("v", &toks.join(" "), "x").unwrap()
}

fn model(rng: &mut impl Rng, mode: Mode, channels: usize) -> ModelParams {
    let config = ModelConfig {
        mode,
        emb_dim: 4,
        hidden: 5,
        u_dim: 6,
        attn_dim: 4,
        channels,
        right_reverse: true,
    };
    let answers = AnswerVocab::new(vec!["x".into(), "y".into(), "z".into()]).unwrap();
    ModelParams::init(config, answers, rng).unwrap()
}

fn features(rng: &mut impl Rng, r: usize, c: usize) -> VideoFeatures {
    VideoFeatures::new(Tensor::from_fn(&[r, c], |_| rng.random_range(-2.0..2.0))).unwrap()
}

proptest! {
    #![proptest_config(cases(128))]

    #[test]
    fn sentence_mode_ignores_features(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let emb = table(&mut rng, &WORDS, 4);
        let params = model(&mut rng, Mode::Sentence, 0);
        let s = sentence(&mut rng);
        let (fa, fb) = (features(&mut rng, 5, 3), features(&mut rng, 5, 3));
        let base = params.predict(&s, &emb, None).unwrap();
        for f in [&fa, &fb] {
            let p = params.predict(&s, &emb, Some(f)).unwrap();
            prop_assert!(p.probs.iter().zip(&base.probs).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }

    #[test]
    fn incremental_model_reproduces_sentence_encoding(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let emb = table(&mut rng, &WORDS, 4);
        let sent = model(&mut rng, Mode::Sentence, 0);
        let full = init_incremental(&sent, model(&mut rng, Mode::Full, 3)).unwrap();
        let s = sentence(&mut rng);
        let f = features(&mut rng, 4, 3);
        let a = sent.predict(&s, &emb, None).unwrap();
        let b = full.predict(&s, &emb, Some(&f)).unwrap();
        prop_assert!(a.u.iter().zip(&b.u).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
