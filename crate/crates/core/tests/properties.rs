//! Randomized invariants of the numeric kernels, event stacking, prompts
//! and the learning-rate schedule.

use proptest::prelude::*;
use safe_fusion::autodiff::{Activation, Graph, Tensor};
use safe_fusion::events::{simulate_dvs, stack_counts, stack_events, EventPoint, EventStream, Polarity, VideoClip};
use safe_fusion::image::Image;
use safe_fusion::nn::Session;
use safe_fusion::params::{ParamInit, ParamStore};
use safe_fusion::text::{
    encode_labels, encode_prompt_ids, render_prompt, tokenize, PromptTemplate, TextBranchParams, TextConfig, Vocabulary,
};
use safe_fusion::trainer::{cosine_lr, softmax, OptimConfig};

fn matrix(rows: usize, cols: usize, scale: f64) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-scale..scale, rows * cols).prop_map(move |d| Tensor::new(vec![rows, cols], d).unwrap())
}

fn sized_matrix(max_rows: usize, max_cols: usize, scale: f64) -> impl Strategy<Value = Tensor> {
    (1..=max_rows, 1..=max_cols).prop_flat_map(move |(r, c)| matrix(r, c, scale))
}

fn event(w: u16, h: u16, t_max: i64) -> impl Strategy<Value = EventPoint> {
    (0..w, 0..h, 0..t_max, any::<bool>()).prop_map(|(x, y, t, on)| EventPoint {
        x,
        y,
        t,
        p: if on { Polarity::On } else { Polarity::Off },
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_are_distributions(x in sized_matrix(6, 9, 30.0)) {
        let mut g = Graph::new();
        let v = g.constant(x);
        let s = g.softmax_rows(v).unwrap();
        let out = g.value(s);
        for r in 0..out.rows() {
            let row = out.row(r);
            prop_assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn softmax_ignores_a_shift(x in sized_matrix(5, 7, 10.0), c in -50.0f64..50.0) {
        let shifted = Tensor::new(x.shape().to_vec(), x.data().iter().map(|v| v + c).collect()).unwrap();
        let mut g = Graph::new();
        let a = g.constant(x);
        let b = g.constant(shifted);
        let sa = g.softmax_rows(a).unwrap();
        let sb = g.softmax_rows(b).unwrap();
        for (p, q) in g.value(sa).data().iter().zip(g.value(sb).data()) {
            prop_assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_mixes_inside_the_value_envelope(
        (q, k, v) in (1usize..6, 1usize..8, 1usize..6, 1usize..6)
            .prop_flat_map(|(n, m, d, dv)| (matrix(n, d, 3.0), matrix(m, d, 3.0), matrix(m, dv, 5.0)))
    ) {
        let mut g = Graph::new();
        let (qv, kv, vv) = (g.constant(q), g.constant(k), g.constant(v.clone()));
        let out = g.scaled_dot_attention(qv, kv, vv).unwrap();
        let out = g.value(out);
        for j in 0..v.cols() {
            let col: Vec<f64> = (0..v.rows()).map(|i| v.row(i)[j]).collect();
            let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            for i in 0..out.rows() {
                let y = out.row(i)[j];
                prop_assert!(y >= lo - 1e-9 && y <= hi + 1e-9);
            }
        }
    }

    #[test]
    fn split_then_concat_is_identity((x, at) in sized_matrix(8, 5, 1.0).prop_filter("two rows", |x| x.rows() > 1)
        .prop_flat_map(|x| { let m = x.rows(); (Just(x), 1..m) })) {
        let mut g = Graph::new();
        let v = g.constant(x.clone());
        let (a, b) = g.split_rows(v, at).unwrap();
        let back = g.concat_rows(&[a, b]).unwrap();
        prop_assert_eq!(g.value(back), &x);
    }

    #[test]
    fn cross_entropy_gradient_is_softmax_minus_onehot(logits in prop::collection::vec(-8.0f64..8.0, 2..20), pick in any::<prop::sample::Index>()) {
        let target = pick.index(logits.len());
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![logits.len()], logits.clone()).unwrap(), true);
        let loss = g.cross_entropy(x, target).unwrap();
        prop_assert!(g.value(loss).data()[0] >= 0.0);
        g.backward(loss).unwrap();
        let grad = g.grad(x).unwrap().data().to_vec();
        let p = softmax(&logits);
        for (i, (gi, pi)) in grad.iter().zip(&p).enumerate() {
            let expect = pi - if i == target { 1.0 } else { 0.0 };
            prop_assert!((gi - expect).abs() < 1e-9);
        }
    }

    #[test]
    fn stacking_conserves_every_event(events in prop::collection::vec(event(9, 7, 1000), 0..400), cuts in prop::collection::btree_set(1i64..1000, 0..5)) {
        let stream = EventStream::new((9, 7), events).unwrap();
        let mut stamps = vec![0];
        stamps.extend(cuts);
        let counts = stack_counts(&stream, &stamps, (9, 7)).unwrap();
        prop_assert_eq!(counts.len(), stamps.len());
        prop_assert_eq!(counts.iter().map(|c| c.total()).sum::<u64>(), stream.len() as u64);

        let frames = stack_events(&stream, &stamps, (9, 7)).unwrap();
        for (c, f) in counts.iter().zip(frames.frames()) {
            prop_assert!(f.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
            if c.total() > 0 {
                prop_assert_eq!(f.data().iter().copied().fold(0.0, f64::max), 1.0);
            }
        }
    }

    #[test]
    fn equal_timestamps_stack_the_same_in_any_order(events in prop::collection::vec(event(6, 6, 4), 1..60), seed in any::<u64>()) {
        let mut shuffled = events.clone();
        let mut state = seed | 1;
        for i in (1..shuffled.len()).rev() {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            shuffled.swap(i, (state % (i as u64 + 1)) as usize);
        }
        let a = stack_events(&EventStream::new((6, 6), events).unwrap(), &[0, 2], (6, 6)).unwrap();
        let b = stack_events(&EventStream::new((6, 6), shuffled).unwrap(), &[0, 2], (6, 6)).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn constant_clips_emit_nothing(level in 0.0f64..1.0, frames in 2usize..6, threshold in 0.01f64..1.0) {
        let clip = VideoClip::new(vec![Image::filled(5, 4, 3, level); frames], (0..frames as i64).map(|k| k * 100).collect()).unwrap();
        prop_assert!(simulate_dvs(&clip, threshold).unwrap().is_empty());
    }

    #[test]
    fn cosine_schedule_never_rises(total in 1usize..500) {
        let cfg = OptimConfig::default();
        let lrs: Vec<f64> = (0..=total).map(|s| cosine_lr(s, total, &cfg).unwrap()).collect();
        prop_assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
        prop_assert_eq!(lrs[0], cfg.base_lr);
    }

    #[test]
    fn distinct_labels_render_to_distinct_prompts(a in "[a-z]{1,6}( [a-z0-9]{1,4})?", b in "[a-z]{1,6}( [a-z0-9]{1,4})?") {
        prop_assume!(a != b);
        for t in ["The action of the human is {}", "A photo of a {}", "{} here", "NONE"] {
            let tpl = PromptTemplate::parse(t).unwrap();
            prop_assert_ne!(render_prompt(&tpl, &a).unwrap(), render_prompt(&tpl, &b).unwrap());
        }
    }
}

fn text_branch(labels: &[String], seed: u64) -> (ParamStore, TextBranchParams, Vocabulary, PromptTemplate) {
    let cfg = TextConfig { heads: 2, ..TextConfig::default() };
    let tpl = cfg.prompt_template().unwrap();
    let prompts: Vec<String> = labels.iter().map(|l| render_prompt(&tpl, l).unwrap()).collect();
    let vocab = Vocabulary::build(&prompts);
    let mut store = ParamStore::new();
    let params = TextBranchParams::new(&mut ParamInit::new(&mut store, seed), &cfg, vocab.len() + 4, 8).unwrap();
    (store, params, vocab, tpl)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn text_rows_depend_only_on_their_own_label(swap in 0usize..4, seed in 0u64..1000) {
        let labels: Vec<String> = ["pour water", "open door", "wave hand", "sit down"].iter().map(|s| s.to_string()).collect();
        let mut changed = labels.clone();
        changed[swap] = "jump high".into();
        // One vocabulary covering both label sets keeps word ids fixed.
        let mut all = labels.clone();
        all.push("jump high".into());
        let (store, params, vocab, tpl) = text_branch(&all, seed);
        let rows = |ls: &[String]| {
            let mut s = Session::new(&store, Activation::Gelu);
            let t = encode_labels(&mut s, ls, &tpl, &vocab, 16, &params).unwrap();
            s.graph.value(t.tokens).clone()
        };
        let (a, b) = (rows(&labels), rows(&changed));
        for i in 0..labels.len() {
            if i == swap {
                prop_assert_ne!(a.row(i), b.row(i));
            } else {
                prop_assert_eq!(a.row(i), b.row(i));
            }
        }
    }

    #[test]
    fn padding_never_changes_the_text_token(extra in 0usize..8, seed in 0u64..1000) {
        let labels = vec!["pour water".to_string(), "open door".to_string()];
        let (store, params, vocab, tpl) = text_branch(&labels, seed);
        let prompt = render_prompt(&tpl, &labels[0]).unwrap();
        let words = tokenize(&prompt, &vocab, 16).iter().take_while(|&&id| id != 0).count();
        let encode = |len: usize| {
            let ids = tokenize(&prompt, &vocab, len);
            let mut s = Session::new(&store, Activation::Gelu);
            let v = encode_prompt_ids(&mut s, &ids, &params).unwrap();
            s.graph.value(v).clone()
        };
        prop_assert_eq!(encode(words), encode(words + extra));
    }
}
