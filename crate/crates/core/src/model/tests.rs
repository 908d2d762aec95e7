use super::*;
use crate::kinematics::detokenize_track;
use crate::scenario::synth::synth_scenarios;
use crate::scenario::{AgentTrack, MapPolyline, PolylineKind, NUM_STEPS, SCENARIO_DT};

fn straight_track(id: &str, x0: f64, y0: f64, heading: f64, speed: f64, is_ego: bool) -> AgentTrack {
    let (s, c) = heading.sin_cos();
    AgentTrack {
        id: id.into(),
        kind: AgentKind::Vehicle,
        length: 4.8,
        width: 2.0,
        height: 1.6,
        is_ego,
        states: (0..NUM_STEPS)
            .map(|t| {
                let d = t as f64 * speed * SCENARIO_DT;
                AgentState::new(x0 + d * c, y0 + d * s, heading, speed)
            })
            .collect(),
    }
}

fn small_scenario() -> Scenario {
    Scenario {
        scenario_id: "model-test".into(),
        dt: SCENARIO_DT,
        num_steps: NUM_STEPS,
        map: vec![
            MapPolyline {
                kind: PolylineKind::Lane,
                points: vec![(-60.0, 0.0), (0.0, 0.0), (60.0, 5.0)],
            },
            MapPolyline {
                kind: PolylineKind::RoadEdge,
                points: vec![(-60.0, 4.0), (60.0, 9.0)],
            },
            MapPolyline {
                kind: PolylineKind::Crosswalk,
                points: vec![(10.0, -5.0), (10.0, 12.0)],
            },
        ],
        traffic_lights: vec![],
        agents: vec![
            straight_track("ego", -40.0, 0.0, 0.0, 8.0, true),
            straight_track("other", -20.0, 3.5, 0.0, 6.0, false),
        ],
    }
}

fn one_agent_batch(cfg: &ModelConfig, motion: &[MotionToken]) -> TokenBatch {
    let mut b = TokenBatch::empty(Direction::Forward);
    b.push_agent(
        AgentKind::Vehicle,
        (4.8, 2.0, 1.6),
        0,
        AgentState::new(-10.0, 2.0, 0.3, 7.0),
        motion,
        cfg,
    );
    b
}

#[test]
fn empty_scene_encodes_to_empty_set() {
    let model = MotionTransformer::new(ModelConfig::tiny(1));
    let mut s = small_scenario();
    s.map.clear();
    let cs = preprocess(&s);
    assert!(model.encode_scene(&cs).unwrap().is_empty());
}

#[test]
fn scene_embeddings_are_permutation_equivariant() {
    let model = MotionTransformer::new(ModelConfig::default());
    let s = small_scenario();
    let base = model.encode_scene(&preprocess(&s)).unwrap();

    let mut permuted = s.clone();
    permuted.map = vec![s.map[2].clone(), s.map[0].clone(), s.map[1].clone()];
    let emb = model.encode_scene(&preprocess(&permuted)).unwrap();
    assert_eq!(emb.len(), 3);
    for (out_idx, src_idx) in [(0usize, 2usize), (1, 0), (2, 1)] {
        for (a, b) in emb[out_idx].iter().zip(&base[src_idx]) {
            assert!((a - b).abs() <= 1e-5, "embedding differs: {a} vs {b}");
        }
    }
}

#[test]
fn scene_embeddings_invariant_to_translation() {
    let model = MotionTransformer::new(ModelConfig::default());
    let s = small_scenario();
    let mut shifted = s.clone();
    for pl in &mut shifted.map {
        for p in &mut pl.points {
            p.0 += 100.0;
            p.1 += 100.0;
        }
    }
    for t in &mut shifted.agents {
        for st in &mut t.states {
            st.x += 100.0;
            st.y += 100.0;
        }
    }
    let a = model.encode_scene(&preprocess(&s)).unwrap();
    let b = model.encode_scene(&preprocess(&shifted)).unwrap();
    for (ra, rb) in a.iter().zip(&b) {
        for (x, y) in ra.iter().zip(rb) {
            assert!((x - y).abs() <= 1e-9);
        }
    }
}

#[test]
fn decode_is_causal_in_position() {
    let cfg = ModelConfig::tiny(2);
    let model = MotionTransformer::new(cfg.clone());
    let s = synth_scenarios(1, 11).unwrap().pop().unwrap();
    let cs = preprocess(&s);
    let batch = TokenBatch::from_scenario(&cs, Direction::Forward, &cfg).unwrap();
    let base = model.forward_logits(&batch, &cs).unwrap();

    let t_perturb = 5;
    let mut perturbed = batch.clone();
    let old = perturbed.tokens[0][t_perturb];
    perturbed.tokens[0][t_perturb] = if old == 0 { 1 } else { old - 1 };
    let out = model.forward_logits(&perturbed, &cs).unwrap();
    for i in 0..base.len() {
        for q in 0..t_perturb {
            assert_eq!(base[i][q], out[i][q], "agent {i} position {q} changed");
        }
    }
    // And the perturbed position itself must change somewhere.
    assert_ne!(base[0][t_perturb], out[0][t_perturb]);
}

#[test]
fn single_agent_single_step_logit_shape() {
    let cfg = ModelConfig::default();
    let model = MotionTransformer::new(cfg.clone());
    let cs = preprocess(&small_scenario());
    let batch = one_agent_batch(&cfg, &[]);
    let all = model.forward_logits(&batch, &cs).unwrap();
    assert_eq!(all.len(), 1);
    assert_eq!(all[0].len(), 1);
    assert_eq!(all[0][0].len(), 1092);
    let step_logits = model.decode_step(&batch, &cs).unwrap();
    assert_eq!((step_logits.len(), step_logits[0].len()), (1, 1092));
}

#[test]
fn logits_are_mirror_consistent() {
    let cfg = ModelConfig::default();
    let ts = cfg.token_space;
    let model = MotionTransformer::new(cfg.clone());
    let cs = preprocess(&small_scenario());
    let tokens = [ts.quantize(2.0, 0.4), ts.quantize(-1.0, -0.2), ts.quantize(0.0, 0.9)];
    let batch = one_agent_batch(&cfg, &tokens);
    let plain = model.forward_logits(&batch, &cs).unwrap();

    let mirrored_scene = mirror_centered(&cs);
    let mirrored_batch = batch.mirrored(&ts);
    let mirrored = model.forward_logits(&mirrored_batch, &mirrored_scene).unwrap();
    let motion = ts.num_tokens();
    for q in 0..plain[0].len() {
        for j in 0..cfg.vocab_size() {
            let jf = if j < motion { ts.flip_yaw(j) } else { j };
            let diff = (mirrored[0][q][j] - plain[0][q][jf]).abs();
            assert!(diff <= 1e-4, "position {q} token {j}: diff {diff}");
        }
    }
}

#[test]
fn uniform_logits_loss_is_log_vocab() {
    let cfg = ModelConfig::default();
    let batch = one_agent_batch(&cfg, &[cfg.token_space.token(17)]);
    let logits = vec![vec![vec![0.0; cfg.vocab_size()]; 2]];
    let (l, _) = loss(&logits, &batch).unwrap();
    assert!((l - (1092.0f64).ln()).abs() < 1e-12);
}

#[test]
fn one_hot_logits_loss_near_zero_with_full_accuracy() {
    let cfg = ModelConfig::default();
    let batch = one_agent_batch(&cfg, &[cfg.token_space.token(17)]);
    let mut logits = vec![vec![vec![0.0; cfg.vocab_size()]; 2]];
    logits[0][0][batch.targets[0][0]] = 50.0;
    let (l, d) = loss(&logits, &batch).unwrap();
    assert!(l <= 1e-3);
    assert_eq!(d.accuracy_fwd, Some(1.0));
}

#[test]
fn degenerate_predictions_have_unit_perplexity() {
    let cfg = ModelConfig::default();
    let tokens: Vec<MotionToken> = (0..4).map(|i| cfg.token_space.token(i * 3)).collect();
    let batch = one_agent_batch(&cfg, &tokens);
    let mut logits = vec![vec![vec![0.0; cfg.vocab_size()]; 5]];
    for row in &mut logits[0] {
        row[42] = 50.0;
    }
    let (_, d) = loss(&logits, &batch).unwrap();
    assert_eq!(d.clusters, 1);
    assert!((d.perplexity - 1.0).abs() < 1e-6);
}

#[test]
fn masked_targets_do_not_affect_loss() {
    let cfg = ModelConfig::default();
    let batch = one_agent_batch(&cfg, &[cfg.token_space.token(5)]);
    let mut logits = vec![vec![vec![0.0; cfg.vocab_size()]; 2]];
    logits[0][0][100] = 2.0;
    logits[0][1][7] = -3.0;
    let (l0, _) = loss(&logits, &batch).unwrap();
    let mut altered = batch.clone();
    // Position 1 is the masked final position.
    assert_eq!(altered.target_mask[0][1], 0.0);
    altered.targets[0][1] = 3;
    let (l1, _) = loss(&logits, &altered).unwrap();
    assert_eq!(l0, l1);
}

#[test]
fn empty_mask_is_rejected() {
    let cfg = ModelConfig::default();
    let mut batch = one_agent_batch(&cfg, &[cfg.token_space.token(5)]);
    batch.target_mask[0] = vec![0.0, 0.0];
    let logits = vec![vec![vec![0.0; cfg.vocab_size()]; 2]];
    assert!(matches!(loss(&logits, &batch), Err(ModelError::EmptyMask)));
}

#[test]
fn direction_indicator_changes_logits() {
    let mut cfg = ModelConfig::tiny(4);
    cfg.train_steps = 1;
    cfg.batch_size = 1;
    let data = synth_scenarios(1, 13).unwrap();
    let (model, log) = train(&data, &cfg).unwrap();
    assert_eq!(log.len(), 1);

    let cs = preprocess(&data[0]);
    let fwd = TokenBatch::from_scenario(&cs, Direction::Forward, &cfg).unwrap();
    let mut flipped = fwd.clone();
    flipped.direction = Direction::Reverse;
    let a = model.forward_logits(&fwd, &cs).unwrap();
    let b = model.forward_logits(&flipped, &cs).unwrap();
    let mut max_diff = 0.0f64;
    for (ra, rb) in a.iter().flatten().zip(b.iter().flatten()) {
        for (x, y) in ra.iter().zip(rb) {
            max_diff = max_diff.max((x - y).abs());
        }
    }
    assert!(max_diff > 0.0);
}

#[test]
fn training_is_deterministic_in_seed() {
    let mut cfg = ModelConfig::tiny(6);
    cfg.train_steps = 5;
    cfg.batch_size = 1;
    cfg.log_interval = 1;
    let data = synth_scenarios(2, 21).unwrap();
    let (_, log_a) = train(&data, &cfg).unwrap();
    let (_, log_b) = train(&data, &cfg).unwrap();
    assert_eq!(log_a.len(), log_b.len());
    for (a, b) in log_a.iter().zip(&log_b) {
        assert!((a.loss - b.loss).abs() <= 1e-9);
    }
}

#[test]
fn training_loss_decreases_on_tiny_problem() {
    let mut cfg = ModelConfig::tiny(8);
    cfg.train_steps = 60;
    cfg.batch_size = 1;
    cfg.learning_rate = 1e-2;
    cfg.log_interval = 1;
    let data = synth_scenarios(1, 29).unwrap();
    let (model, log) = train(&data, &cfg).unwrap();
    assert!(model.all_parameters_finite());
    let first = log.first().unwrap().loss;
    let last = log.last().unwrap().loss;
    assert!(last < first, "loss did not decrease: {first} -> {last}");
}

#[test]
fn gradients_match_finite_differences() {
    let report = grad_check(&ModelConfig::tiny(3), 1e-4, 200).unwrap();
    assert!(report.checked >= 200);
    assert!(report.max_rel_err <= 1e-4, "max rel err {}", report.max_rel_err);
}

#[test]
fn doubling_the_loss_doubles_every_gradient() {
    let cfg = ModelConfig::tiny(5);
    let mut model = MotionTransformer::new(cfg.clone());
    let s = synth_scenarios(1, 31).unwrap().pop().unwrap();
    let item = prepare_item(&s, &cfg, &model.banks).unwrap();
    let (targets, mask) = item.fwd.batch.flat_targets();

    let run = |model: &mut MotionTransformer, double: bool| -> Vec<f64> {
        model.store.zero_grad();
        let mut tape = Tape::new();
        let logits = net::forward_sym(
            &mut tape,
            &model.store,
            &model.idx,
            &cfg,
            &item.scene,
            &item.fwd.inputs,
            &item.scene_m,
            &item.fwd.inputs_m,
        );
        let mut root = tape.cross_entropy(logits, targets.clone(), mask.clone());
        if double {
            root = tape.scale(root, 2.0);
        }
        tape.backward(root, &mut model.store);
        model.store.params.iter().flat_map(|p| p.grad.iter().copied()).collect()
    };
    let g1 = run(&mut model, false);
    let g2 = run(&mut model, true);
    for (a, b) in g1.iter().zip(&g2) {
        assert_eq!(2.0 * a, *b);
    }
}

#[test]
fn zeroed_head_blocks_upstream_gradients() {
    let cfg = ModelConfig::tiny(7);
    let mut model = MotionTransformer::new(cfg.clone());
    let s = synth_scenarios(1, 37).unwrap().pop().unwrap();
    let item = prepare_item(&s, &cfg, &model.banks).unwrap();
    let (targets, mask) = item.fwd.batch.flat_targets();

    let w2 = model.idx.head_w2;
    for v in &mut model.store.params[w2].value {
        *v = 0.0;
    }
    model.store.zero_grad();
    let mut tape = Tape::new();
    let logits = net::forward_sym(
        &mut tape,
        &model.store,
        &model.idx,
        &cfg,
        &item.scene,
        &item.fwd.inputs,
        &item.scene_m,
        &item.fwd.inputs_m,
    );
    let root = tape.cross_entropy(logits, targets, mask);
    tape.backward(root, &mut model.store);
    // With the final projection zeroed, nothing upstream of it can receive
    // gradient; the projection itself and its bias still do.
    let w1 = model.idx.head_w1;
    assert!(model.store.params[w1].grad.iter().all(|&g| g == 0.0));
    let tok = model.idx.token_embed;
    assert!(model.store.params[tok].grad.iter().all(|&g| g == 0.0));
    let b2 = model.idx.head_b2;
    assert!(model.store.params[b2].grad.iter().any(|&g| g != 0.0));
}

#[test]
fn sampling_one_hot_always_returns_that_token() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut row = vec![-1e9; 12];
    row[7] = 0.0;
    for _ in 0..100 {
        assert_eq!(sample_tokens(&row, 0.95, 1.0, &mut rng, None), 7);
    }
}

#[test]
fn sampling_uniform_frequencies_within_noise() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let row = vec![0.0; 10];
    let n = 100_000;
    let mut counts = [0usize; 10];
    for _ in 0..n {
        counts[sample_tokens(&row, 1.0, 1.0, &mut rng, None)] += 1;
    }
    let expected = n as f64 / 10.0;
    let sigma = (n as f64 * 0.1 * 0.9).sqrt();
    for &c in &counts {
        assert!((c as f64 - expected).abs() <= 3.0 * sigma, "count {c} vs {expected}");
    }
}

#[test]
fn nucleus_truncation_excludes_tail() {
    // Probabilities (0.6, 0.3, 0.1) with top_p = 0.5: only the 0.6 token.
    let row = [0.6f64.ln(), 0.3f64.ln(), 0.1f64.ln()];
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..1000 {
        assert_eq!(sample_tokens(&row, 0.5, 1.0, &mut rng, None), 0);
    }
}

#[test]
fn sampled_token_always_in_minimal_nucleus() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..200 {
        let row: Vec<f64> = (0..20).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let probs = softmax(&row);
        let mut order: Vec<usize> = (0..20).collect();
        order.sort_by(|&a, &b| probs[b].partial_cmp(&probs[a]).unwrap().then(a.cmp(&b)));
        let top_p = 0.7;
        let mut nucleus = std::collections::HashSet::new();
        let mut cum = 0.0;
        for &i in &order {
            nucleus.insert(i);
            cum += probs[i];
            if cum >= top_p {
                break;
            }
        }
        for _ in 0..20 {
            assert!(nucleus.contains(&sample_tokens(&row, top_p, 1.0, &mut rng, None)));
        }
    }
}

#[test]
fn pad_token_is_never_sampled() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut row = vec![0.0; 8];
    row[5] = 10.0; // pad gets nearly all the mass
    for _ in 0..500 {
        assert_ne!(sample_tokens(&row, 1.0, 1.0, &mut rng, Some(5)), 5);
    }
}

#[test]
fn rollout_zero_steps_returns_anchors() {
    let cfg = ModelConfig::tiny(9);
    let model = MotionTransformer::new(cfg);
    let cs = preprocess(&small_scenario());
    let anchor = cs.scenario.agents[0].states[0];
    let agents = vec![RolloutAgent {
        kind: AgentKind::Vehicle,
        shape: (4.8, 2.0, 1.6),
        slot: 0,
        anchor,
        teacher: None,
    }];
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let out = rollout(&model, &agents, Direction::Forward, 0, &cs, &mut rng).unwrap();
    assert_eq!(out.states.len(), 1);
    assert_eq!(out.states[0], vec![anchor]);
    assert!(out.tokens[0].is_empty());
}

#[test]
fn teacher_forced_rollout_reproduces_detokenized_track() {
    let cfg = ModelConfig::tiny(10);
    let ts = cfg.token_space;
    let model = MotionTransformer::new(cfg.clone());
    let s = synth_scenarios(1, 41).unwrap().pop().unwrap();
    let cs = preprocess(&s);
    for dir in [Direction::Forward, Direction::Reverse] {
        let agents: Vec<RolloutAgent> = cs
            .scenario
            .agents
            .iter()
            .enumerate()
            .map(|(slot, track)| {
                let toks: Vec<MotionToken> = tokenize_track(track, dir, &ts)
                    .unwrap()
                    .into_iter()
                    .map(|(z, _)| z)
                    .collect();
                let anchor = match dir {
                    Direction::Forward => track.states[0],
                    Direction::Reverse => *track.states.last().unwrap(),
                };
                RolloutAgent {
                    kind: track.kind,
                    shape: (track.length, track.width, track.height),
                    slot,
                    anchor,
                    teacher: Some(toks),
                }
            })
            .collect();
        let steps = NUM_STEPS - 1;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let out = rollout(&model, &agents, dir, steps, &cs, &mut rng).unwrap();
        for (i, agent) in agents.iter().enumerate() {
            let expect =
                detokenize_track(&agent.anchor, agent.teacher.as_ref().unwrap(), dir, &ts);
            assert_eq!(out.states[i].len(), expect.len());
            for (a, b) in out.states[i].iter().zip(&expect) {
                assert!((a.x - b.x).abs() < 1e-9);
                assert!((a.y - b.y).abs() < 1e-9);
                assert!((a.speed - b.speed).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn rollout_is_deterministic_given_rng_seed() {
    let cfg = ModelConfig::tiny(12);
    let model = MotionTransformer::new(cfg);
    let cs = preprocess(&small_scenario());
    let agents: Vec<RolloutAgent> = cs
        .scenario
        .agents
        .iter()
        .enumerate()
        .map(|(slot, track)| RolloutAgent {
            kind: track.kind,
            shape: (track.length, track.width, track.height),
            slot,
            anchor: track.states[0],
            teacher: None,
        })
        .collect();
    let mut rng_a = ChaCha8Rng::seed_from_u64(5);
    let mut rng_b = ChaCha8Rng::seed_from_u64(5);
    let a = rollout(&model, &agents, Direction::Forward, 6, &cs, &mut rng_a).unwrap();
    let b = rollout(&model, &agents, Direction::Forward, 6, &cs, &mut rng_b).unwrap();
    for (ta, tb) in a.tokens.iter().zip(&b.tokens) {
        let ids_a: Vec<usize> = ta.iter().map(|z| z.id).collect();
        let ids_b: Vec<usize> = tb.iter().map(|z| z.id).collect();
        assert_eq!(ids_a, ids_b);
    }
}

#[test]
fn checkpoint_round_trip_preserves_model() {
    let cfg = ModelConfig::tiny(14);
    let model = MotionTransformer::new(cfg.clone());
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    save_model(&model, &path).unwrap();
    let loaded = load_model(&path).unwrap();
    assert_eq!(loaded.cfg, cfg);
    assert_eq!(loaded.num_parameters(), model.num_parameters());
    for (a, b) in model.store.params.iter().zip(&loaded.store.params) {
        assert_eq!(a.name, b.name);
        for (x, y) in a.value.iter().zip(&b.value) {
            assert!((x - y).abs() <= 1e-6);
        }
    }
}

#[test]
fn corrupt_checkpoint_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.ckpt");
    std::fs::write(&path, b"not a checkpoint").unwrap();
    assert!(matches!(load_model(&path), Err(ModelError::Checkpoint(_))));
}

#[test]
fn oversized_scene_is_rejected() {
    let model = MotionTransformer::new(ModelConfig::tiny(15));
    let mut s = small_scenario();
    let pl = s.map[0].clone();
    while s.map.len() <= crate::scenario::MAX_POLYLINES {
        s.map.push(pl.clone());
    }
    let cs = preprocess(&s);
    assert!(matches!(model.encode_scene(&cs), Err(ModelError::Capacity(_))));
}

#[test]
fn inconsistent_batch_shapes_are_rejected() {
    let cfg = ModelConfig::tiny(16);
    let model = MotionTransformer::new(cfg.clone());
    let cs = preprocess(&small_scenario());
    let mut batch = one_agent_batch(&cfg, &[cfg.token_space.token(3)]);
    batch.states[0].pop();
    assert!(matches!(model.forward_logits(&batch, &cs), Err(ModelError::Shape(_))));
}
