use gradcore::{Tape, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vshuffle::container::Container;
use vshuffle::diffusion::Schedule;
use vshuffle::features::{adain, attention, blend_queries, AttentionTap, Stream};
use vshuffle::image::Image;
use vshuffle::losses::{
    ad_targets, hsr_targets, permute_axis, shuffle_values, tap_vars, weighted_loss, BlockFeatures, HsrSpec, PermutationSource, Resample,
    ShuffleAxis, ShuffleSpec,
};

fn tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::randn(shape, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn axis() -> impl Strategy<Value = ShuffleAxis> {
    prop_oneof![Just(ShuffleAxis::H), Just(ShuffleAxis::S), Just(ShuffleAxis::D)]
}

fn inverse(p: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; p.len()];
    for (i, &x) in p.iter().enumerate() {
        inv[x] = i;
    }
    inv
}

fn tap(stream: Stream, block: usize, seed: u64, s: usize) -> AttentionTap<f64> {
    AttentionTap {
        block,
        timestep: 1,
        stream,
        q: tensor(&[2, s, 3], seed),
        k: tensor(&[2, s, 3], seed + 1),
        v: tensor(&[2, s, 3], seed + 2),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn shuffles_are_bijections_that_invert(
        n in 1usize..4, h in 1usize..4, s in 1usize..10, d in 1usize..5,
        seed in any::<u64>(), draw in any::<u64>(), ax in axis(),
    ) {
        let v = tensor(&[n, h, s, d], seed);
        let spec = ShuffleSpec { axis: ax, seed, ..ShuffleSpec::default() };
        let (out, perms) = shuffle_values(&v, &spec, draw).unwrap();
        prop_assert_eq!(perms.len(), n);
        let per = h * s * d;
        for (i, p) in perms.iter().enumerate() {
            let mut sorted = p.clone();
            sorted.sort();
            prop_assert_eq!(sorted, (0..p.len()).collect::<Vec<_>>());
            let img = Tensor::new(vec![h, s, d], out.data()[i * per..(i + 1) * per].to_vec()).unwrap();
            let back = permute_axis(&img, ax, &inverse(p)).unwrap();
            prop_assert_eq!(back.data(), &v.data()[i * per..(i + 1) * per]);
        }
        let (again, _) = shuffle_values(&v, &spec, draw).unwrap();
        prop_assert!(again.bitwise_eq(&out));
    }

    #[test]
    fn identity_source_never_moves_anything(
        s in 1usize..12, seed in any::<u64>(), draw in any::<u64>(), ax in axis(),
    ) {
        let v = tensor(&[2, 2, s, 3], seed);
        let spec = ShuffleSpec { axis: ax, seed, source: PermutationSource::Identity, ..ShuffleSpec::default() };
        prop_assert!(shuffle_values(&v, &spec, draw).unwrap().0.bitwise_eq(&v));
    }

    #[test]
    fn joint_key_value_permutation_is_invisible(
        s in 2usize..12, sq in 1usize..6, seed in any::<u64>(), pseed in any::<u64>(),
    ) {
        let (q, k, v) = (tensor(&[2, sq, 4], seed), tensor(&[2, s, 4], seed ^ 1), tensor(&[2, s, 4], seed ^ 2));
        let mut perm: Vec<usize> = (0..s).collect();
        rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut ChaCha8Rng::seed_from_u64(pseed));
        let pk = permute_axis(&k, ShuffleAxis::S, &perm).unwrap();
        let pv = permute_axis(&v, ShuffleAxis::S, &perm).unwrap();
        let a = attention(&q, &k, &v, 1.0).unwrap();
        let b = attention(&q, &pk, &pv, 1.0).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_rows_are_convex_combinations(s in 1usize..10, seed in any::<u64>(), tau in 0.1f64..4.0) {
        let (q, k, v) = (tensor(&[1, 3, 2], seed), tensor(&[1, s, 2], seed ^ 5), tensor(&[1, s, 2], seed ^ 6));
        let out = attention(&q, &k, &v, tau).unwrap();
        for c in 0..2 {
            let col: Vec<f64> = (0..s).map(|j| v.data()[j * 2 + c]).collect();
            let (lo, hi) = col.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &x| (l.min(x), h.max(x)));
            for i in 0..3 {
                let o = out.data()[i * 2 + c];
                prop_assert!(o >= lo - 1e-12 && o <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn blend_is_pointwise_convex(seed in any::<u64>(), gamma in 0.0f64..=1.0) {
        let (a, b) = (tensor(&[2, 4, 3], seed), tensor(&[2, 4, 3], seed ^ 9));
        let m = blend_queries(&a, &b, gamma).unwrap();
        for ((x, y), z) in a.data().iter().zip(b.data()).zip(m.data()) {
            prop_assert!((z - (gamma * x + (1.0 - gamma) * y)).abs() < 1e-12);
        }
    }

    #[test]
    fn adain_adopts_target_statistics(seed in any::<u64>(), scale in 0.1f64..10.0, shift in -5.0f64..5.0) {
        let x = tensor(&[3, 4, 4], seed);
        let y = tensor(&[3, 4, 4], seed ^ 3).map(|v| v * scale + shift).unwrap();
        let z = adain(&x, &y).unwrap();
        let stats = |t: &Tensor<f64>, c: usize| {
            let ch = &t.data()[c * 16..(c + 1) * 16];
            let m = ch.iter().sum::<f64>() / 16.0;
            (m, (ch.iter().map(|v| (v - m).powi(2)).sum::<f64>() / 16.0).sqrt())
        };
        for c in 0..3 {
            let ((mz, sz), (my, sy)) = (stats(&z, c), stats(&y, c));
            prop_assert!((mz - my).abs() < 1e-6 * (1.0 + my.abs()));
            prop_assert!((sz - sy).abs() < 1e-4 * sy.max(1.0));
        }
    }

    #[test]
    fn ddim_step_and_inversion_cancel(seed in any::<u64>(), steps in 2usize..60, frac in 0.0f64..1.0) {
        let sched = Schedule::new(steps).unwrap();
        let t = 1 + ((steps - 1) as f64 * frac) as usize;
        let (z, eps) = (tensor(&[3, 4, 4], seed), tensor(&[3, 4, 4], seed ^ 7));
        let back = sched.step(&sched.invert_step(&z, t, &eps).unwrap(), t, &eps).unwrap();
        for (a, b) in z.data().iter().zip(back.data()) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn schedule_is_monotone(steps in 1usize..400) {
        let sched = Schedule::new(steps).unwrap();
        prop_assert_eq!(sched.alpha_bar(0), 1.0);
        for t in 1..=steps {
            prop_assert!(sched.alpha_bar(t) < sched.alpha_bar(t - 1));
            prop_assert!(sched.alpha_bar(t) > 0.0);
        }
    }

    #[test]
    fn window_bounds_are_inclusive_roundings(steps in 1usize..500, a in 0.0f64..1.0, b in 0.0f64..1.0) {
        let (t1, t2) = if a <= b { (a, b) } else { (b, a) };
        let hsr = HsrSpec { t1_frac: t1, t2_frac: t2, ..HsrSpec::default() };
        let (lo, hi) = hsr.window(steps);
        prop_assert_eq!(lo, (t1 * steps as f64).round() as usize);
        prop_assert_eq!(hi, (t2 * steps as f64).round() as usize);
        for t in 1..=steps {
            prop_assert_eq!(hsr.in_window(t, steps), lo <= t && t <= hi);
        }
    }

    #[test]
    fn draw_indices_never_collide(m in 1usize..4, inner_steps in 1usize..6, steps in 1usize..30) {
        for resample in [Resample::PerTimestep, Resample::PerInnerStep] {
            let spec = ShuffleSpec { m, resample, ..ShuffleSpec::default() };
            let mut seen = std::collections::BTreeSet::new();
            for t in 1..=steps {
                let inners = if resample == Resample::PerTimestep { 1 } else { inner_steps };
                for inner in 0..inners {
                    for d in spec.draw_indices(t, inner, inner_steps) {
                        prop_assert!(seen.insert(d));
                    }
                }
            }
        }
    }

    #[test]
    fn outside_the_window_targets_are_distillation(alpha in 0.0f64..=1.0, t in 1usize..=20, seed in 0u64..1000, n in 1usize..3) {
        let steps = 20;
        let hsr = HsrSpec { alpha, ..HsrSpec::default() };
        prop_assume!(!hsr.in_window(t, steps));
        let content = tap(Stream::Content, 11, seed, 5);
        let styles: Vec<_> = (0..n).map(|i| tap(Stream::Style(i), 11, seed + 10 * (i as u64 + 1), 5)).collect();
        let feats = [BlockFeatures { content: &content, styles: &styles }];
        let spec = ShuffleSpec { seed, ..ShuffleSpec::default() };
        let mut transcript = Vec::new();
        let h = hsr_targets(t, steps, &hsr, &spec, &spec.draw_indices(t, 0, 1), &feats, 1.0, &mut transcript).unwrap();
        let a = ad_targets(&feats, 1.0).unwrap();
        prop_assert!(transcript.is_empty());
        let out = [tap(Stream::Output, 11, seed + 99, 5)];
        let tape = Tape::new();
        let vars = tap_vars(&tape, &out, false);
        let lh = weighted_loss(&vars, &h, Some(hsr.beta), 1.0).unwrap().value().item().unwrap();
        let la = weighted_loss(&vars, &a, Some(hsr.beta), 1.0).unwrap().value().item().unwrap();
        prop_assert_eq!(lh.to_bits(), la.to_bits());
    }

    #[test]
    fn container_round_trip_is_bitwise(shapes in prop::collection::vec(prop::collection::vec(1usize..5, 0..4), 0..5), seed in any::<u64>()) {
        let mut c = Container::new("TEST", serde_json::json!({ "seed": seed }));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (i, s) in shapes.iter().enumerate() {
            c.push(format!("t{i}"), Tensor::<f32>::randn(s, &mut rng));
        }
        let back = Container::from_bytes(&c.to_bytes()).unwrap();
        prop_assert_eq!(back.to_bytes(), c.to_bytes());
        for (i, _) in shapes.iter().enumerate() {
            let name = format!("t{i}");
            prop_assert!(back.get(&name).unwrap().bitwise_eq(c.get(&name).unwrap()));
        }
    }

    #[test]
    fn rgb_bytes_survive_the_round_trip(w in 1usize..9, h in 1usize..9, seed in any::<u64>()) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bytes: Vec<u8> = (0..w * h * 3).map(|_| rng.gen()).collect();
        let img = Image::from_rgb8(w, h, &bytes).unwrap();
        prop_assert_eq!(img.to_rgb8(), bytes);
        prop_assert!(img.quantized().tensor().bitwise_eq(img.tensor()));
    }
}
