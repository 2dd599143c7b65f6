use super::*;
use crate::autodiff::ParamId;
use crate::matrix::Matrix;
use crate::transformer::ModelConfig;

fn class_config() -> ModelConfig {
    ModelConfig {
        vocab_size: 12,
        max_positions: 8,
        d_model: 8,
        n_heads: 2,
        d_ff: 16,
        n_layers: 1,
        causal: false,
        n_classes: 2,
        init_std: 0.2,
    }
}

fn lm_config() -> ModelConfig {
    ModelConfig { causal: true, n_classes: 0, ..class_config() }
}

fn class_data() -> Vec<Example> {
    (0..12)
        .map(|i| {
            let label = i % 2;
            let ids = (0..6).map(|j| 1 + label * 5 + (i + j * 3) % 5).collect();
            Example::classification(TokenSequence::padded(ids, 7), label)
        })
        .collect()
}

fn lm_data() -> Vec<Example> {
    (0..6)
        .map(|i| Example::lm(TokenSequence::new((0..7).map(|j| 1 + (i + j) % 4).collect())))
        .collect()
}

fn f64_config(regime: Regime) -> TrainConfig {
    TrainConfig {
        regime,
        dtype: Dtype::F64,
        lr: 1e-2,
        batch_size: 4,
        ..TrainConfig::default()
    }
}

/// One scalar parameter: a 1x1 token embedding is enough to drive the optimizer.
fn scalar_model(value: f64) -> TransformerModel {
    let mut m = TransformerModel::zeros(lm_config(), Dtype::F64).unwrap();
    let ids: Vec<ParamId> = m.params.iter().map(|(id, _)| id).collect();
    for id in ids {
        m.params.get_mut(id).frozen = id != m.token_embedding;
    }
    m.params.get_mut(m.token_embedding).value = Matrix::filled(1, 1, value, Dtype::F64);
    m
}

fn grad_of(id: ParamId, g: f64) -> GradStore {
    let mut s = GradStore::new();
    s.accumulate(id, Matrix::filled(1, 1, g, Dtype::F64));
    s
}

#[test]
fn adam_matches_hand_computation() {
    let mut model = scalar_model(1.0);
    let id = model.token_embedding;
    let cfg = AdamConfig { lr: 0.1, ..AdamConfig::default() };
    let mut adam = Adam::new(cfg, &model).unwrap();
    let grads = [0.5, -0.2, 0.3];
    let (mut m, mut v, mut theta) = (0.0f64, 0.0f64, 1.0f64);
    for (t, &g) in grads.iter().enumerate() {
        adam.step(&mut model, &grad_of(id, g)).unwrap();
        let t = (t + 1) as i32;
        m = 0.9 * m + 0.1 * g;
        v = 0.999 * v + 0.001 * g * g;
        theta -= 0.1 * (m / (1.0 - 0.9f64.powi(t))) / ((v / (1.0 - 0.999f64.powi(t))).sqrt() + 1e-8);
        let got = model.params.value(id).get(0, 0);
        assert!((got - theta).abs() < 1e-12, "step {t}: {got} vs {theta}");
    }
    // first step moves by lr regardless of gradient scale
    let mut fresh = scalar_model(1.0);
    Adam::new(cfg, &fresh).unwrap().step(&mut fresh, &grad_of(id, 1e3)).unwrap();
    assert!((fresh.params.value(id).get(0, 0) - 0.9).abs() < 1e-9);
}

#[test]
fn adam_zero_gradient_and_weight_decay() {
    let mut model = scalar_model(2.0);
    let id = model.token_embedding;
    let mut adam = Adam::new(AdamConfig { lr: 0.1, ..AdamConfig::default() }, &model).unwrap();
    adam.step(&mut model, &GradStore::new()).unwrap();
    assert_eq!(model.params.value(id).get(0, 0), 2.0);
    let cfg = AdamConfig { lr: 0.1, weight_decay: 0.5, ..AdamConfig::default() };
    let mut adam = Adam::new(cfg, &model).unwrap();
    adam.step(&mut model, &grad_of(id, 0.0)).unwrap();
    assert!((model.params.value(id).get(0, 0) - (2.0 - 0.1 * 0.5 * 2.0)).abs() < 1e-15);
}

#[test]
fn adam_constant_gradient_steps_are_constant() {
    let mut model = scalar_model(0.0);
    let id = model.token_embedding;
    let mut adam = Adam::new(AdamConfig { lr: 0.01, ..AdamConfig::default() }, &model).unwrap();
    let mut prev = 0.0;
    for _ in 0..20 {
        adam.step(&mut model, &grad_of(id, 3.0)).unwrap();
        let now = model.params.value(id).get(0, 0);
        assert!((prev - now - 0.01).abs() < 1e-9);
        prev = now;
    }
}

#[test]
fn adam_rejects_non_finite_gradient_without_updating() {
    let mut model = scalar_model(1.0);
    let id = model.token_embedding;
    let mut adam = Adam::new(AdamConfig::default(), &model).unwrap();
    let err = adam.step(&mut model, &grad_of(id, f64::NAN)).unwrap_err();
    assert!(matches!(err, Error::NonFiniteGradient { ref param } if param == "embed.token"));
    assert_eq!(model.params.value(id).get(0, 0), 1.0);
    assert_eq!(adam.steps(), 0);
}

#[test]
fn optimizer_state_is_twice_the_trainable_parameters() {
    let model = TransformerModel::new(class_config(), Dtype::F32, 0).unwrap();
    let adam = Adam::new(AdamConfig::default(), &model).unwrap();
    assert_eq!(adam.state_elements(), 2 * model.params.elements(true));
    let t = Trainer::new(model, TrainConfig { regime: Regime::Lora, ..TrainConfig::default() }).unwrap();
    assert_eq!(t.optimizer.state_elements(), 2 * t.model.params.elements(true));
    assert!(t.model.params.elements(true) < t.model.params.elements(false));
}

#[test]
fn config_validation() {
    let tt = |k, r| TrainConfig { regime: Regime::TokenTune, k, k_ratio: r, ..TrainConfig::default() };
    assert!(tt(Some(2), None).validate().is_ok());
    assert!(tt(None, Some(0.5)).validate().is_ok());
    assert!(tt(None, None).validate().is_err());
    assert!(tt(Some(2), Some(0.5)).validate().is_err());
    assert!(tt(Some(0), None).validate().is_err());
    assert!(tt(None, Some(1.5)).validate().is_err());
    assert!(TrainConfig { k: Some(2), ..TrainConfig::default() }.validate().is_err());
    assert!(TrainConfig { batch_size: 0, ..TrainConfig::default() }.validate().is_err());
    assert!(TrainConfig { lr: f64::NAN, ..TrainConfig::default() }.validate().is_err());
    let json = r#"{"regime": "tokentune+lora", "k": 3, "lora": {"rank": 4}}"#;
    let c: TrainConfig = serde_json::from_str(json).unwrap();
    assert_eq!(c.regime, Regime::TokenTuneLora);
    assert_eq!(c.lora.rank, 4);
    assert!(serde_json::from_str::<TrainConfig>(r#"{"regime": "full", "bogus": 1}"#).is_err());
    assert_eq!("tokentune+lora".parse::<Regime>().unwrap(), Regime::TokenTuneLora);
    assert!("half".parse::<Regime>().is_err());
}

#[test]
fn lm_example_targets_next_real_token() {
    let ex = Example::lm(TokenSequence::padded(vec![4, 5, 6], 5));
    assert_eq!(ex.target, Target::Next(vec![Some(5), Some(6), None, None, None]));
}

#[test]
fn training_lowers_the_loss() {
    let data = class_data();
    for regime in Regime::ALL {
        let mut cfg = f64_config(regime);
        if regime.selective() {
            cfg.k = Some(3);
        }
        cfg.epochs = 30;
        let model = TransformerModel::new(class_config(), Dtype::F64, 1).unwrap();
        let mut t = Trainer::new(model, cfg).unwrap();
        let before = evaluate(&t.model, &data, Execution::Sequential).unwrap().loss;
        t.fit(&data, std::io::sink()).unwrap();
        let after = evaluate(&t.model, &data, Execution::Sequential).unwrap().loss;
        assert!(after < before * 0.8, "{regime}: {before} -> {after}");
    }
}

#[test]
fn full_and_select_all_take_the_same_steps() {
    for (config, data) in [(class_config(), class_data()), (lm_config(), lm_data())] {
        let model = TransformerModel::new(config, Dtype::F64, 2).unwrap();
        let mut full = Trainer::new(model.clone(), f64_config(Regime::Full)).unwrap();
        let mut all = Trainer::new(
            model,
            TrainConfig { k_ratio: Some(1.0), ..f64_config(Regime::TokenTune) },
        )
        .unwrap();
        full.fit(&data, std::io::sink()).unwrap();
        all.fit(&data, std::io::sink()).unwrap();
        for ((_, a), (_, b)) in full.model.params.iter().zip(all.model.params.iter()) {
            assert!(a.value.max_abs_diff(&b.value) < 1e-10, "{}", a.name);
        }
    }
}

#[test]
fn frozen_parameters_do_not_move() {
    let model = TransformerModel::new(class_config(), Dtype::F64, 2).unwrap();
    let before = model.clone();
    let mut t = Trainer::new(model, TrainConfig { k: Some(2), ..f64_config(Regime::TokenTuneLora) }).unwrap();
    t.fit(&class_data(), std::io::sink()).unwrap();
    let mut moved = 0;
    for (id, p) in t.model.params.iter() {
        if id.0 < before.params.len() {
            assert!(p.frozen);
            assert!(p.value.bitwise_eq(before.params.value(id)), "{}", p.name);
        } else if p.name.ends_with("lora_b") {
            moved += (p.value.max_abs() > 0.0) as usize;
        }
    }
    assert!(moved > 0);
}

#[test]
fn accumulation_matches_a_single_large_batch() {
    let data = class_data();
    let model = TransformerModel::new(class_config(), Dtype::F64, 5).unwrap();
    let base = TrainConfig { k: Some(3), ..f64_config(Regime::TokenTune) };
    let mut big = Trainer::new(model.clone(), TrainConfig { batch_size: 8, ..base.clone() }).unwrap();
    let mut acc = Trainer::new(model, TrainConfig { batch_size: 2, grad_accum: 4, ..base }).unwrap();
    let a = big.fit(&data, std::io::sink()).unwrap();
    let b = acc.fit(&data, std::io::sink()).unwrap();
    assert_eq!(a.len(), 2);
    assert_eq!(a.len(), b.len());
    for ((_, p), (_, q)) in big.model.params.iter().zip(acc.model.params.iter()) {
        assert!(p.value.max_abs_diff(&q.value) < 1e-10);
    }
}

#[test]
fn training_is_deterministic_across_execution_modes() {
    let run = |execution| {
        let model = TransformerModel::new(lm_config(), Dtype::F32, 9).unwrap();
        let cfg = TrainConfig {
            regime: Regime::TokenTune,
            k_ratio: Some(0.5),
            execution,
            epochs: 2,
            batch_size: 3,
            ..TrainConfig::default()
        };
        let mut t = Trainer::new(model, cfg).unwrap();
        let mut log = Vec::new();
        t.fit(&lm_data(), &mut log).unwrap();
        (t.model, log)
    };
    let (a, la) = run(Execution::Sequential);
    let (b, lb) = run(Execution::Parallel);
    assert_eq!(la, lb);
    for ((_, p), (_, q)) in a.params.iter().zip(b.params.iter()) {
        assert!(p.value.bitwise_eq(&q.value));
    }
}

#[test]
fn metrics_log_is_jsonl_without_wall_time() {
    let model = TransformerModel::new(lm_config(), Dtype::F32, 0).unwrap();
    let mut t = Trainer::new(model, TrainConfig { max_steps: Some(1), ..TrainConfig::default() }).unwrap();
    let mut log = Vec::new();
    let h = t.fit(&lm_data(), &mut log).unwrap();
    assert_eq!(h.len(), 1);
    let text = String::from_utf8(log).unwrap();
    let v: serde_json::Value = serde_json::from_str(text.trim()).unwrap();
    assert!(v["wall_ms"].is_null());
    assert_eq!(v["step"], 1);
    assert_eq!(v["loss_terms"], 36);
}

#[test]
fn selective_lm_normalizes_by_selected_tokens() {
    let model = TransformerModel::new(lm_config(), Dtype::F64, 0).unwrap();
    let t = Trainer::new(model, TrainConfig { k: Some(2), ..f64_config(Regime::TokenTune) }).unwrap();
    let data = lm_data();
    let batch: Vec<_> = data.iter().enumerate().take(3).collect();
    let o = t.example_grads(batch[0].1, 0, 0).unwrap();
    assert_eq!((o.count, o.selected), (2, 2));
    let mut t = t;
    let m = t.train_step(&batch, 0).unwrap();
    assert_eq!(m.loss_terms, 6);
}

#[test]
fn non_finite_loss_is_reported() {
    let mut model = TransformerModel::new(class_config(), Dtype::F64, 0).unwrap();
    let id = model.token_embedding;
    model.params.get_mut(id).value.data_mut().fill(f64::INFINITY);
    let t = Trainer::new(model, f64_config(Regime::Full)).unwrap();
    let data = class_data();
    let err = t.example_grads(&data[3], 3, 0).unwrap_err();
    assert!(matches!(err, Error::NonFiniteLoss { example: 3 } | Error::NonFinite { .. }), "{err}");
}

#[test]
fn evaluate_reports_accuracy_and_perplexity() {
    let model = TransformerModel::new(class_config(), Dtype::F64, 0).unwrap();
    let m = evaluate(&model, &class_data(), Execution::Sequential).unwrap();
    assert!(m.accuracy.is_some() && m.perplexity.is_none());
    let lm = TransformerModel::zeros(lm_config(), Dtype::F64).unwrap();
    let m = evaluate(&lm, &lm_data(), Execution::Sequential).unwrap();
    // an all-zero model predicts uniformly over the vocabulary
    assert!((m.perplexity.unwrap() - 12.0).abs() < 1e-9);
    assert!(matches!(evaluate(&lm, &[], Execution::Sequential), Err(Error::EmptyDataset)));
}
