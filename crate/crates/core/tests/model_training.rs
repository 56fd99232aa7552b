//! Behaviour of the model and trainer on small hand-built cases.

use edgenav::model::{entropy, ModelConfig, MultiExitModel, QuantizeOptions, TrainPhase, Weight};
use edgenav::navsim::{evaluate, generate_map, observe, sample_episodes, AgentState, GridMap, Heading, NavConfig};
use edgenav::numerics::Rng;
use edgenav::quantizer::Scheme;
use edgenav::training::{
    backward, calibrate_tau, calibration_score, evaluate_dataset, finetune_qlora, generate_dataset, pretrain_backbone,
    Sample, TrainConfig,
};

fn small_config() -> ModelConfig {
    ModelConfig {
        num_layers: 3,
        d_model: 32,
        num_heads: 4,
        d_ff: 64,
        exit_layers: vec![1, 2],
        exit_hidden: 16,
        lora_rank: 4,
        block_size: 32,
        ..ModelConfig::default()
    }
}

fn nav() -> NavConfig {
    NavConfig {
        window_size: 7,
        success_radius: 1,
        max_steps: 60,
    }
}

fn sample_obs(seed: u64) -> edgenav::navsim::Observation {
    let map = generate_map(seed, 12, 12, 0.2).unwrap();
    let free = map.free_cells();
    let state = AgentState::new(free[0], Heading::East, free[free.len() - 1]);
    observe(&map, &state, 7).unwrap()
}

fn params(model: &MultiExitModel<f64>, phase: TrainPhase) -> Vec<f64> {
    model.param_tensors(phase).into_iter().flat_map(|(_, t)| t.to_vec()).collect()
}

#[test]
fn zero_model_is_uniform_everywhere() {
    let model = MultiExitModel::<f64>::new(ModelConfig::default(), &mut Rng::new(1)).unwrap().zeros_like();
    let out = model.forward_full(&sample_obs(3)).unwrap();
    for p in out.exit_probs.iter().chain(std::iter::once(&out.final_probs)) {
        assert!(p.as_slice().iter().all(|&v| (v - 0.25).abs() < 1e-12));
        assert!((entropy(p) - 4f64.ln()).abs() < 1e-12);
    }
}

#[test]
fn encoding_is_local_to_the_compass_token() {
    let model = MultiExitModel::<f32>::new(ModelConfig::default(), &mut Rng::new(4)).unwrap();
    let prepared = model.prepare().unwrap();
    let a = sample_obs(5);
    let mut b = a.clone();
    b.goal_compass = [-0.3, 0.6];
    let ta = prepared.encode_observation(&a).unwrap();
    let tb = prepared.encode_observation(&b).unwrap();
    assert_eq!(ta.rows(), 9);
    assert_eq!(ta, prepared.encode_observation(&a).unwrap());
    for i in 0..ta.rows() {
        assert_eq!(ta.row(i) == tb.row(i), i != 8, "row {i}");
    }
}

#[test]
fn saturated_first_head_exits_at_layer_two() {
    let mut model = MultiExitModel::<f64>::new(ModelConfig::default(), &mut Rng::new(6)).unwrap();
    let head = &mut model.exit_heads[0];
    head.w1 = edgenav::numerics::Matrix::zeros(head.w1.rows(), head.w1.cols());
    head.b1.iter_mut().for_each(|v| *v = 0.0);
    head.b1[0] = 1.0;
    head.w2 = edgenav::numerics::Matrix::zeros(head.w2.rows(), head.w2.cols());
    head.w2.set(2, 0, 50.0);
    head.b2.iter_mut().for_each(|v| *v = 0.0);
    let obs = sample_obs(7);
    let out = model.dee_infer(&obs, 0.75).unwrap();
    let full = model.forward_full(&obs).unwrap();
    assert_eq!((out.exit_layer, out.blocks_executed), (2, 2));
    assert!(out.early);
    assert_eq!(out.action, edgenav::navsim::Action::Right);
    assert_eq!(out.probs, full.exit_probs[0]);
    assert!(out.entropy < 1e-15);
}

fn corridor_batch() -> Vec<Sample> {
    let data = generate_dataset(&[generate_map(2, 10, 10, 0.2).unwrap()], &[0], 2, &nav(), 0.0, &mut Rng::new(3)).unwrap();
    data[..2].to_vec()
}

#[test]
fn duplicated_batch_gives_single_sample_gradient() {
    let model = MultiExitModel::<f64>::new(small_config(), &mut Rng::new(9)).unwrap();
    let s = corridor_batch()[0].clone();
    let phase = TrainPhase::Pretrain { exit_heads: true };
    let (g1, _) = backward(&model, std::slice::from_ref(&s), &[1.0, 0.5]).unwrap();
    let (g2, _) = backward(&model, &[s.clone(), s], &[1.0, 0.5]).unwrap();
    for (a, b) in params(&g1, phase).iter().zip(params(&g2, phase)) {
        assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
    }
}

#[test]
fn zero_epochs_leave_the_model_unchanged() {
    let model = MultiExitModel::<f64>::new(small_config(), &mut Rng::new(9)).unwrap();
    let cfg = TrainConfig {
        pretrain_epochs: 0,
        finetune_epochs: 0,
        ..TrainConfig::default()
    };
    let mut trained = model.clone();
    let logs = pretrain_backbone(&mut trained, &corridor_batch(), &[], &cfg, &mut Rng::new(1)).unwrap();
    assert!(logs.is_empty());
    assert_eq!(trained, model);

    let (mut q, _) = model.quantize(quant_opts(), &mut Rng::new(2)).unwrap();
    let before = q.clone();
    finetune_qlora(&mut q, &corridor_batch(), &[], &cfg, &mut Rng::new(1)).unwrap();
    assert_eq!(q, before);
}

fn quant_opts() -> QuantizeOptions {
    QuantizeOptions {
        scheme: Scheme::Nf4,
        all_linear: true,
        attach_lora: true,
    }
}

#[test]
fn empty_room_is_learned() {
    // 5x5 free interior inside the wall border.
    let room = GridMap::empty(7, 7).unwrap();
    let data = generate_dataset(&[room], &[0], 300, &nav(), 0.0, &mut Rng::new(12)).unwrap();
    let cfg = TrainConfig {
        pretrain_epochs: 30,
        ..TrainConfig::default()
    };
    let run = || {
        let mut model = MultiExitModel::<f32>::new(small_config(), &mut Rng::new(13)).unwrap();
        pretrain_backbone(&mut model, &data, &[], &cfg, &mut Rng::new(14)).unwrap();
        model
    };
    let model = run();
    let stats = evaluate_dataset(&model, &data, &[1.0, 0.5]).unwrap();
    let acc = stats.final_correct as f64 / stats.count as f64;
    eprintln!("empty-room final-head accuracy {acc:.3}");
    assert!(acc >= 0.95);
    assert_eq!(run(), model);
}

#[test]
fn finetuning_recovers_quantization_loss() {
    let maps: Vec<GridMap> = (0..4).map(|i| generate_map(40 + i, 11, 11, 0.2).unwrap()).collect();
    let train = generate_dataset(&maps, &[0, 1, 2], 600, &nav(), 0.1, &mut Rng::new(1)).unwrap();
    let val = generate_dataset(&maps, &[3], 200, &nav(), 0.1, &mut Rng::new(2)).unwrap();
    let cfg = TrainConfig {
        pretrain_epochs: 6,
        finetune_epochs: 3,
        ..TrainConfig::default()
    };
    let mut dense = MultiExitModel::<f32>::new(small_config(), &mut Rng::new(3)).unwrap();
    pretrain_backbone(&mut dense, &train, &[], &cfg, &mut Rng::new(4)).unwrap();
    let (quantized, _) = dense.quantize(quant_opts(), &mut Rng::new(5)).unwrap();
    let alphas = [1.0, 0.5];
    let before = evaluate_dataset(&quantized, &val, &alphas).unwrap();
    let mut tuned = quantized.clone();
    finetune_qlora(&mut tuned, &train, &[], &cfg, &mut Rng::new(6)).unwrap();
    let after = evaluate_dataset(&tuned, &val, &alphas).unwrap();
    let (l0, l1) = (before.loss_sum / before.count as f64, after.loss_sum / after.count as f64);
    eprintln!("validation loss zero adapters {l0:.4}, fine-tuned {l1:.4}");
    assert!(l1 <= l0);

    for (b0, b1) in quantized.blocks.iter().zip(&tuned.blocks) {
        for ((_, x), (_, y)) in b0.linears().iter().zip(b1.linears()) {
            match (&x.weight, &y.weight) {
                (Weight::Quantized(p), Weight::Quantized(q)) => assert_eq!(p, q),
                _ => panic!("base should stay quantized"),
            }
        }
        let lora = b1.wq.lora.as_ref().unwrap();
        assert!(lora.b.data().iter().any(|&v| v != 0.0));
    }
}

#[test]
fn calibration_on_a_constant_first_exit() {
    // Every step exits at the first head with entropy about 0.529 and takes the
    // same action as the full-depth model, so only the latency term varies.
    let base = MultiExitModel::<f32>::new(small_config(), &mut Rng::new(1)).unwrap();
    let mut model = base.zeros_like();
    model.exit_heads[0].b2 = vec![3.0, 0.0, 0.0, 0.0];
    let maps: Vec<GridMap> = (0..2).map(|i| generate_map(i, 10, 10, 0.1).unwrap()).collect();
    let nav = NavConfig { max_steps: 15, ..nav() };
    let episodes = sample_episodes(&maps, &[0, 1], 6, 1, &mut Rng::new(2)).unwrap();
    let grid = edgenav::navsim::default_tau_grid();
    let prepared = model.prepare().unwrap();
    let cal = calibrate_tau(&prepared, &maps, &episodes, &grid, &nav).unwrap();

    let full = evaluate(&prepared, &maps, &episodes, -1.0, &nav).unwrap();
    let mut best = (f64::NAN, -1.0);
    for &tau in &grid {
        let m = evaluate(&prepared, &maps, &episodes, tau, &nav).unwrap();
        let rho_lat = (1.0 - m.latency_proxy / full.latency_proxy).clamp(0.0, 1.0);
        let rho_sr = if full.sr == 0.0 { 1.0 } else { (m.sr / full.sr).clamp(0.0, 1.0) };
        let score = if rho_lat + rho_sr == 0.0 { 0.0 } else { 2.0 * rho_lat * rho_sr / (rho_lat + rho_sr) };
        assert!((score - calibration_score(&full, &m)).abs() < 1e-12);
        if score > best.1 {
            best = (tau, score);
        }
    }
    assert_eq!(cal.tau, best.0);
    assert!((cal.score - best.1).abs() < 1e-12);
    assert!((cal.tau - 0.55).abs() < 1e-9);

    let only = calibrate_tau(&prepared, &maps, &episodes, &[0.0], &nav).unwrap();
    assert_eq!((only.tau, only.score), (0.0, 0.0));
}

#[test]
fn oracle_labels_include_stop() {
    let room = GridMap::empty(9, 9).unwrap();
    let data = generate_dataset(&[room], &[0], 50, &nav(), 0.0, &mut Rng::new(4)).unwrap();
    assert_eq!(data.last().unwrap().action, edgenav::navsim::Action::Stop);
    assert!(data.iter().any(|s| s.action == edgenav::navsim::Action::Forward));
}
