use adv_attack::{
    attack_loss, attack_loss_var, attack_with_reference, brute_force_message_oracle, message_round,
    pgd_delta_round, post_similarity, project_delta, round_message, AttackConfig, AttackError, ConstraintReport,
    MessageInit, Models,
};
use face_embedder::{similarity, Embedder, EmbedderConfig, MatcherConfig};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tensor_core::{grad_check, GradCheck, GradCheckConfig, Image, Tape, Tensor, TensorError, Var};
use watermark_codec::{Codec, CodecConfig, Message, RelaxedMessage};

const SIDE: usize = 16;

fn tiny_embedder() -> Embedder {
    let cfg = EmbedderConfig {
        embedding_dim: 8,
        widths: vec![4, 6],
        input_size: SIDE,
        input_gain: 2.0,
    };
    Embedder::init(cfg, 3).unwrap()
}

fn small_codec(bits: usize) -> Codec {
    let cfg = CodecConfig {
        message_bits: bits,
        width: 4,
        decoder_width: 5,
        ..CodecConfig::default()
    };
    let mut codec = Codec::init(cfg, 1).unwrap();
    // A fresh init has a tiny residual; scale the last layer up so messages matter.
    let names: Vec<String> = codec.params().iter().map(|(k, _)| k.clone()).collect();
    for n in names {
        let t = codec.params_mut().get_mut(&n).unwrap();
        for v in t.data_mut() {
            *v *= 3.0;
        }
    }
    codec
}

fn identity_codec(bits: usize) -> Codec {
    let mut c = small_codec(bits);
    c.zero_final_layer();
    c
}

fn noise_image(rng: &mut ChaCha8Rng) -> Image {
    let data = (0..SIDE * SIDE * 3).map(|_| rng.random_range(0.0..1.0)).collect();
    Image::new(SIDE, SIDE, 3, data).unwrap()
}

fn reference(emb: &Embedder, rng: &mut ChaCha8Rng) -> Vec<f64> {
    emb.embed_face(&noise_image(rng)).unwrap()
}

fn config(eps255: f64, steps: usize, rounds: usize) -> AttackConfig {
    AttackConfig {
        epsilon: eps255 / 255.0,
        steps,
        rounds,
        seed: 5,
        ..AttackConfig::default()
    }
}

fn matcher() -> MatcherConfig {
    MatcherConfig::default()
}

#[test]
fn step_sizes_follow_the_budget_and_step_count() {
    let cfg = AttackConfig::default();
    assert_eq!(cfg.steps, 10);
    assert!((cfg.alpha() - 1.568_627_450_980_392e-3).abs() < 1e-15);
    assert_eq!(cfg.beta(), 0.1);
    let zero = AttackConfig {
        epsilon: 0.0,
        ..cfg.clone()
    };
    assert_eq!(zero.alpha(), 0.0);
}

#[test]
fn invalid_configs_are_rejected() {
    let base = AttackConfig::default();
    for bad in [
        AttackConfig { epsilon: -1e-3, ..base.clone() },
        AttackConfig { epsilon: f64::NAN, ..base.clone() },
        AttackConfig { epsilon: f64::INFINITY, ..base.clone() },
        AttackConfig { steps: 0, ..base.clone() },
        AttackConfig { rounds: 0, ..base.clone() },
    ] {
        assert!(matches!(bad.validate(), Err(AttackError::Invalid(_))), "{bad:?}");
    }
    assert!(base.validate().is_ok());
}

#[test]
fn config_round_trips_through_json() {
    let cfg = AttackConfig {
        message_init: MessageInit::AllHalf,
        round_each_round: false,
        ..config(2.0, 3, 2)
    };
    let s = serde_json::to_string(&cfg).unwrap();
    assert!(s.contains("\"all_half\""), "{s}");
    assert_eq!(serde_json::from_str::<AttackConfig>(&s).unwrap(), cfg);
    let partial: AttackConfig = serde_json::from_str("{\"rounds\": 2}").unwrap();
    assert_eq!(partial.steps, 10);
    assert_eq!(partial.rounds, 2);
}

#[test]
fn rounding_examples() {
    let m = RelaxedMessage::new(vec![0.5, 0.499_999, 1.0, 0.0, 0.75]).unwrap();
    assert_eq!(round_message(&m).to_bitstring(), "10101");
}

#[test]
fn zero_budget_leaves_the_probe_untouched() {
    let emb = tiny_embedder();
    let codec = small_codec(6);
    let models = Models { codec: &codec, embedder: &emb };
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let probe = noise_image(&mut rng);
    let zr = reference(&emb, &mut rng);
    let r = attack_with_reference(&probe, &zr, models, &config(0.0, 3, 2), &matcher()).unwrap();
    assert!(r.delta.as_ref().unwrap().data().iter().all(|&d| d == 0.0));
    assert_eq!(r.delta_linf, 0.0);
    assert_eq!(r.s_pre_adv.to_bits(), r.s_pre_clean.to_bits());
    // Only message steps are recorded.
    assert_eq!(r.loss_trace.len(), 6);
    assert_eq!(r.constraints.delta_checks, 0);
}

#[test]
fn identity_codec_gives_a_zero_objective() {
    let emb = tiny_embedder();
    let codec = identity_codec(6);
    let models = Models { codec: &codec, embedder: &emb };
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let probe = noise_image(&mut rng);
    let zr = reference(&emb, &mut rng);
    let r = attack_with_reference(&probe, &zr, models, &config(4.0, 3, 2), &matcher()).unwrap();
    assert_eq!(r.loss_trace.len(), 12);
    assert!(r.loss_trace.iter().all(|&l| l == 0.0), "{:?}", r.loss_trace);
    assert_eq!(r.s_post_adv.to_bits(), r.s_pre_adv.to_bits());
    assert_eq!(r.s_post_initial.to_bits(), r.s_pre_adv.to_bits());
    assert_eq!(r.match_pre, r.match_post);
}

#[test]
fn objective_at_zero_perturbation_is_post_minus_pre() {
    let emb = tiny_embedder();
    let codec = small_codec(6);
    let models = Models { codec: &codec, embedder: &emb };
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..5 {
        let probe = noise_image(&mut rng);
        let zr = reference(&emb, &mut rng);
        let m = RelaxedMessage::new((0..6).map(|_| rng.random::<f64>()).collect()).unwrap();
        let delta = Tensor::zeros(probe.to_tensor().shape());
        let got = attack_loss(&delta, &m, &probe, &zr, models).unwrap();
        let pre = similarity(&emb.embed_face(&probe).unwrap(), &zr).unwrap();
        let post = similarity(&emb.embed_face(&codec.embed(&probe, &m).unwrap()).unwrap(), &zr).unwrap();
        assert!((got - (post - pre)).abs() < 1e-12, "{got} vs {}", post - pre);
    }
}

#[test]
fn objective_gradient_matches_finite_differences() {
    let emb = tiny_embedder();
    let codec = small_codec(6);
    let models = Models { codec: &codec, embedder: &emb };
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let cfg = GradCheckConfig {
        max_coords_per_leaf: Some(24),
        ..GradCheckConfig::default()
    };
    let mut checked = 0;
    for i in 0..20 {
        // Keep pixels off the box edges so the clamp is not hit under the step.
        let data = (0..SIDE * SIDE * 3).map(|_| rng.random_range(0.1..0.9)).collect();
        let probe = Image::new(SIDE, SIDE, 3, data).unwrap().to_tensor();
        let zr = Tensor::new(vec![1, 8], reference(&emb, &mut rng)).unwrap();
        let delta = Tensor::new(
            probe.shape().to_vec(),
            (0..probe.numel()).map(|_| rng.random_range(-0.03..0.03)).collect(),
        )
        .unwrap();
        let m = Tensor::new(vec![1, 6], (0..6).map(|_| rng.random_range(0.05..0.95)).collect()).unwrap();
        let f = |t: &mut Tape, v: &[Var]| {
            let p = t.constant(probe.clone());
            let z = t.constant(zr.clone());
            attack_loss_var(t, models, p, z, v[0], v[1]).map_err(|e| match e {
                AttackError::Tensor(t) => t,
                other => TensorError::Invalid {
                    op: "attack",
                    msg: other.to_string(),
                },
            })
        };
        let c = GradCheckConfig { seed: i, ..cfg.clone() };
        match grad_check(f, &[delta, m], &c).unwrap() {
            GradCheck::Checked { max_rel_error, .. } => {
                assert!(max_rel_error < 1e-4, "rel err {max_rel_error}");
                checked += 1;
            }
            GradCheck::Unreliable => {}
        }
    }
    assert!(checked >= 10, "only {checked} reliable points");
}

#[test]
fn message_steps_do_nothing_when_the_gradient_vanishes() {
    let emb = tiny_embedder();
    let codec = identity_codec(6);
    let models = Models { codec: &codec, embedder: &emb };
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let probe = noise_image(&mut rng);
    let zr = reference(&emb, &mut rng);
    let m = RelaxedMessage::new(vec![0.0, 1.0, 0.3, 0.5, 0.9, 0.0]).unwrap();
    let delta = Tensor::zeros(probe.to_tensor().shape());
    let mut report = ConstraintReport::default();
    let mut trace = Vec::new();
    let out = message_round(&m, &delta, &probe, &zr, models, &config(4.0, 4, 1), &mut report, &mut trace).unwrap();
    assert_eq!(out, m);
    assert_eq!(report.message_checks, 4);
    assert_eq!(report.violations(), 0);
}

#[test]
fn delta_round_respects_both_boxes() {
    let emb = tiny_embedder();
    let codec = small_codec(6);
    let models = Models { codec: &codec, embedder: &emb };
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    // Saturated pixels exercise the pixel box.
    let data = (0..SIDE * SIDE * 3).map(|i| [0.0, 1.0, rng.random::<f64>()][i % 3]).collect();
    let probe = Image::new(SIDE, SIDE, 3, data).unwrap();
    let zr = reference(&emb, &mut rng);
    let m = RelaxedMessage::projected(vec![0.5; 6]);
    let cfg = config(4.0, 5, 1);
    let mut report = ConstraintReport::default();
    let mut trace = Vec::new();
    let start = Tensor::zeros(probe.to_tensor().shape());
    let d = pgd_delta_round(&start, &m, &probe, &zr, models, &cfg, &mut report, &mut trace).unwrap();
    let pt = probe.to_tensor();
    for (&di, &pi) in d.data().iter().zip(pt.data()) {
        assert!(di.abs() <= cfg.epsilon);
        assert!((0.0..=1.0).contains(&(pi + di)));
    }
    assert!(d.max_abs() > 0.0);
    assert_eq!(trace.len(), 5);
    assert_eq!(report.delta_checks, 5);
    assert_eq!(report.violations(), 0);
}

#[test]
fn full_attack_is_feasible_and_deterministic() {
    let emb = tiny_embedder();
    let codec = small_codec(6);
    let models = Models { codec: &codec, embedder: &emb };
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let probe = noise_image(&mut rng);
    let zr = reference(&emb, &mut rng);
    let cfg = config(4.0, 4, 3);
    let a = attack_with_reference(&probe, &zr, models, &cfg, &matcher()).unwrap();
    let b = attack_with_reference(&probe, &zr, models, &cfg, &matcher()).unwrap();
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    assert_eq!(a.delta, b.delta);
    assert_eq!(a.constraints.violations(), 0);
    assert_eq!(a.constraints.delta_checks, 12);
    assert_eq!(a.constraints.message_checks, 12);
    assert!(a.delta_linf <= cfg.epsilon);
    assert_eq!(a.loss_trace.len(), 24);
    assert_eq!(a.message.len(), 6);
    let other = attack_with_reference(&probe, &zr, models, &AttackConfig { seed: 99, ..cfg }, &matcher()).unwrap();
    assert_ne!(other.loss_trace, a.loss_trace);
}

#[test]
fn final_scores_agree_with_independent_evaluation() {
    let emb = tiny_embedder();
    let codec = small_codec(6);
    let models = Models { codec: &codec, embedder: &emb };
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let probe = noise_image(&mut rng);
    let zr = reference(&emb, &mut rng);
    let r = attack_with_reference(&probe, &zr, models, &config(2.0, 3, 2), &matcher()).unwrap();
    let pt = probe.to_tensor();
    let dt = r.delta.as_ref().unwrap().to_tensor();
    let data: Vec<f64> = pt.data().iter().zip(dt.data()).map(|(p, d)| (p + d).clamp(0.0, 1.0)).collect();
    let xp = Image::from_tensor(&Tensor::new(pt.shape().to_vec(), data).unwrap()).unwrap();
    let pre = similarity(&emb.embed_face(&xp).unwrap(), &zr).unwrap();
    let post = similarity(&emb.embed_face(&codec.embed_bits(&xp, &r.message).unwrap()).unwrap(), &zr).unwrap();
    assert!((r.s_pre_adv - pre).abs() < 1e-12);
    assert!((r.s_post_adv - post).abs() < 1e-12);
    assert!((post_similarity(&xp, &r.message, &zr, models).unwrap() - post).abs() < 1e-12);
    assert_eq!(r.match_pre, pre >= matcher().tau);
    assert_eq!(r.match_post, post >= matcher().tau);
}

#[test]
fn all_half_start_rounds_to_all_ones() {
    let emb = tiny_embedder();
    let codec = small_codec(6);
    let models = Models { codec: &codec, embedder: &emb };
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let probe = noise_image(&mut rng);
    let zr = reference(&emb, &mut rng);
    let cfg = AttackConfig {
        message_init: MessageInit::AllHalf,
        ..config(1.0, 2, 1)
    };
    let r = attack_with_reference(&probe, &zr, models, &cfg, &matcher()).unwrap();
    assert_eq!(r.initial_message.to_bitstring(), "111111");
}

#[test]
fn mismatched_inputs_are_rejected() {
    let emb = tiny_embedder();
    let codec = small_codec(6);
    let models = Models { codec: &codec, embedder: &emb };
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let probe = noise_image(&mut rng);
    let cfg = config(1.0, 2, 1);
    assert!(attack_with_reference(&probe, &[0.1; 5], models, &cfg, &matcher()).is_err());
    let zr = reference(&emb, &mut rng);
    let m = RelaxedMessage::projected(vec![0.5; 4]);
    let delta = Tensor::zeros(probe.to_tensor().shape());
    assert!(attack_loss(&delta, &m, &probe, &zr, models).is_err());
    let m = RelaxedMessage::projected(vec![0.5; 6]);
    assert!(attack_loss(&Tensor::zeros(&[1, 3, 8, 8]), &m, &probe, &zr, models).is_err());
    let mut bright = probe.clone();
    bright.data_mut()[0] = 1.5;
    assert!(attack_with_reference(&bright, &zr, models, &cfg, &matcher()).is_err());
}

#[test]
fn oracle_returns_the_first_minimiser() {
    let emb = tiny_embedder();
    let codec = small_codec(6);
    let models = Models { codec: &codec, embedder: &emb };
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let probe = noise_image(&mut rng);
    let zr = reference(&emb, &mut rng);
    let (best, s) = brute_force_message_oracle(&probe, &zr, models).unwrap();
    let mut want: Option<(u64, f64)> = None;
    for idx in 0..64 {
        let v = post_similarity(&probe, &Message::from_index(idx, 6).unwrap(), &zr, models).unwrap();
        if want.is_none_or(|(_, b)| v < b) {
            want = Some((idx, v));
        }
    }
    let (idx, v) = want.unwrap();
    assert_eq!(best, Message::from_index(idx, 6).unwrap());
    assert_eq!(s.to_bits(), v.to_bits());
}

#[test]
fn oracle_breaks_ties_lexicographically() {
    let emb = tiny_embedder();
    let codec = identity_codec(1);
    let models = Models { codec: &codec, embedder: &emb };
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let probe = noise_image(&mut rng);
    let zr = reference(&emb, &mut rng);
    let (best, s) = brute_force_message_oracle(&probe, &zr, models).unwrap();
    assert_eq!(best.to_bitstring(), "0");
    assert_eq!(s, similarity(&emb.embed_face(&probe).unwrap(), &zr).unwrap());
}

#[test]
fn oracle_refuses_long_messages() {
    let emb = tiny_embedder();
    let codec = small_codec(13);
    let models = Models { codec: &codec, embedder: &emb };
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let probe = noise_image(&mut rng);
    let zr = reference(&emb, &mut rng);
    assert!(matches!(brute_force_message_oracle(&probe, &zr, models), Err(AttackError::Invalid(_))));
}

#[test]
fn report_counts_violations() {
    let mut r = ConstraintReport::default();
    let probe = Tensor::new(vec![3], vec![0.0, 0.5, 1.0]).unwrap();
    r.check_delta(&Tensor::new(vec![3], vec![0.0, 0.01, 0.0]).unwrap(), &probe, 0.02);
    assert_eq!(r.violations(), 0);
    r.check_delta(&Tensor::new(vec![3], vec![0.0, 0.03, 0.0]).unwrap(), &probe, 0.02);
    assert_eq!(r.delta_ball_violations, 1);
    r.check_delta(&Tensor::new(vec![3], vec![-0.01, 0.0, 0.0]).unwrap(), &probe, 0.02);
    assert_eq!(r.delta_box_violations, 1);
    r.check_relaxed(&[0.0, 1.0, 1.0 + 1e-12]);
    assert_eq!(r.relaxed_message_violations, 1);
    let mut total = ConstraintReport::default();
    total.merge(&r);
    total.merge(&r);
    assert_eq!(total.violations(), 6);
    assert_eq!(total.delta_checks, 6);
    assert_eq!(total.message_checks, 2);
}

proptest! {
    #[test]
    fn projection_lands_in_the_feasible_set(d in -1.0f64..1.0, p in 0.0f64..=1.0, eps in 0.0f64..0.1) {
        let q = project_delta(d, p, eps);
        prop_assert!(q.abs() <= eps);
        prop_assert!((0.0..=1.0).contains(&(p + q)));
        prop_assert_eq!(project_delta(q, p, eps), q);
    }

    #[test]
    fn projection_is_the_clamp_away_from_the_edges(d in -0.2f64..0.2, p in 0.2f64..0.8, eps in 0.0f64..0.1) {
        prop_assert_eq!(project_delta(d, p, eps), d.clamp(-eps, eps));
    }

    #[test]
    fn rounding_uses_a_half_threshold(v in proptest::collection::vec(0.0f64..=1.0, 1..48)) {
        let m = round_message(&RelaxedMessage::new(v.clone()).unwrap());
        for (b, x) in m.bits().iter().zip(&v) {
            prop_assert_eq!(*b == 1, *x >= 0.5);
        }
    }
}

#[test]
fn per_round_rounding_matters_only_between_rounds() {
    let emb = tiny_embedder();
    let codec = small_codec(6);
    let models = Models { codec: &codec, embedder: &emb };
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let probe = noise_image(&mut rng);
    let zr = reference(&emb, &mut rng);
    let run = |rounds, each| {
        let cfg = AttackConfig {
            round_each_round: each,
            ..config(4.0, 3, rounds)
        };
        attack_with_reference(&probe, &zr, models, &cfg, &matcher()).unwrap()
    };
    // A single round rounds exactly once either way.
    let (a, b) = (run(1, true), run(1, false));
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    // Later rounds start from a vertex of the cube, so the traces diverge.
    let (a, b) = (run(3, true), run(3, false));
    assert_eq!(a.loss_trace[..6], b.loss_trace[..6]);
    assert_ne!(a.loss_trace[6..], b.loss_trace[6..]);
    assert_eq!(a.constraints.violations(), 0);
}
