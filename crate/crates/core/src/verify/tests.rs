use super::*;
use crate::adapters::{attach, LoraConfig};
use crate::matrix::Dtype;
use crate::parallel::Execution;
use crate::tokentune::{select_positions, InjectedBug, KSpec, TaskMode};
use crate::transformer::ModelConfig;

fn config(causal: bool, layers: usize) -> ModelConfig {
    ModelConfig {
        vocab_size: 12,
        max_positions: 8,
        d_model: 8,
        n_heads: 2,
        d_ff: 16,
        n_layers: layers,
        causal,
        n_classes: if causal { 0 } else { 3 },
        init_std: 0.4,
    }
}

fn class_case() -> (TransformerModel, TokenSequence, Target, TokenPartition) {
    let model = TransformerModel::new(config(false, 1), Dtype::F64, 3).unwrap();
    let seq = TokenSequence::new(vec![1, 5, 7, 2, 9, 4]);
    let part = select_positions(&seq.real, KSpec::Count(2), TaskMode::Classification, 11).unwrap();
    (model, seq, Target::Class(2), part)
}

fn lm_case() -> (TransformerModel, TokenSequence, Target, TokenPartition) {
    let model = TransformerModel::new(config(true, 2), Dtype::F64, 4).unwrap();
    let seq = TokenSequence::padded(vec![3, 1, 4, 1, 5, 9], 8);
    let t = (0..8).map(|r| (r + 1 < 6).then(|| seq.ids[r + 1])).collect();
    let part = select_positions(&seq.real, KSpec::Count(3), TaskMode::Lm, 5).unwrap();
    (model, seq, Target::Next(t), part)
}

#[test]
fn rel_err_cases() {
    assert_eq!(rel_err(1.0, 1.0), 0.0);
    assert_eq!(rel_err(0.0, 0.0), 0.0);
    assert_eq!(rel_err(2.0, 1.0), 0.5);
    assert!((rel_err(1e-9, 0.0) - 0.1).abs() < 1e-15);
    assert_eq!(rel_err(-1.0, 1.0), 2.0);
}

#[test]
fn finite_diff_of_quadratic_is_exact() {
    let c = [1.0, -2.0, 0.5];
    let x = [0.3, 1.7, -4.0];
    let g = finite_diff(&x, &[0, 1, 2], 1e-4, |x| {
        Ok(x.iter().zip(&c).map(|(x, c)| c * x * x).sum())
    })
    .unwrap();
    for i in 0..3 {
        assert!((g[i] - 2.0 * c[i] * x[i]).abs() < 1e-9, "{i}: {}", g[i]);
    }
}

#[test]
fn finite_diff_error_shrinks_with_step() {
    let f = |x: &[f64]| Ok(x[0].powi(3));
    let e = |h| (finite_diff(&[1.0], &[0], h, f).unwrap()[0] - 3.0).abs();
    // central differences of x^3 are off by exactly h^2
    assert!((e(1e-2) - 1e-4).abs() < 1e-10);
    assert!(e(1e-3) < e(1e-2) / 50.0);
}

#[test]
fn finite_diff_rejects_bad_input() {
    assert!(matches!(
        finite_diff(&[1.0], &[3], 1e-3, |_| Ok(0.0)),
        Err(Error::OutOfRange { .. })
    ));
    assert!(matches!(
        finite_diff(&[1.0], &[0], 1e-3, |_| Ok(f64::NAN)),
        Err(Error::NonFinite { .. })
    ));
}

#[test]
fn coordinates_subsample_large_tensors() {
    let fd = FdOptions::default();
    assert_eq!(fd.coordinates(10, 0), (0..10).collect::<Vec<_>>());
    assert_eq!(fd.coordinates(4096, 0).len(), 4096);
    let c = fd.coordinates(10_000, 3);
    assert_eq!(c.len(), 256);
    assert!(c.windows(2).all(|w| w[0] < w[1]));
    assert!(c.iter().all(|&i| i < 10_000));
    assert_eq!(c, fd.coordinates(10_000, 3));
    assert_ne!(c, fd.coordinates(10_000, 4));
}

#[test]
fn oracle_loss_matches_tokentune_loss() {
    for (model, seq, target, part) in [class_case(), lm_case()] {
        let mut t1 = Tape::new(Dtype::F64);
        let b = model.bind(&mut t1);
        let l1 = crate::tokentune::tokentune_loss(&mut t1, &model, &b, &seq, &target, &part, &Options::default())
            .unwrap();
        let mut t2 = Tape::new(Dtype::F64);
        let l2 = stopgrad_loss(&mut t2, &model, &seq, &target, &part.selected, None).unwrap();
        let (a, b) = (t1.value(l1).get(0, 0), t2.value(l2).get(0, 0));
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
}

#[test]
fn frozen_loss_equals_live_loss_at_snapshot() {
    let (model, seq, target, part) = lm_case();
    let snap = snapshot(&model, &seq, &target, &part.selected).unwrap();
    let mut t1 = Tape::new(Dtype::F64);
    let live = stopgrad_loss(&mut t1, &model, &seq, &target, &part.selected, None).unwrap();
    let mut t2 = Tape::new(Dtype::F64);
    let frozen = stopgrad_loss(&mut t2, &model, &seq, &target, &part.selected, Some(&snap)).unwrap();
    assert_eq!(t1.value(live).get(0, 0).to_bits(), t2.value(frozen).get(0, 0).to_bits());
}

#[test]
fn oracle_with_every_row_selected_matches_full_backprop() {
    let (model, seq, target, _) = class_case();
    let all: Vec<usize> = (0..seq.len()).collect();
    let oracle = stopgrad_reference_backward(&model, &seq, &target, &all).unwrap();
    let full = full_grads(&model, &seq, &target).unwrap();
    assert!(grad_store_rel_err(&model, &oracle, &full).unwrap() < 1e-12);
}

#[test]
fn tokentune_matches_oracle_gradients() {
    for (model, seq, target, part) in [class_case(), lm_case()] {
        let tt = tokentune_grads(&model, &seq, &target, &part, &Options::default()).unwrap();
        let reference = stopgrad_reference_backward(&model, &seq, &target, &part.selected).unwrap();
        let err = grad_store_rel_err(&model, &tt, &reference).unwrap();
        assert!(err < 1e-10, "{err}");
    }
}

#[test]
fn gradcheck_passes_for_classification_and_lm() {
    for (model, seq, target, part) in [class_case(), lm_case()] {
        let r = gradcheck(&model, &seq, &target, &part, &Options::default(), &FdOptions::default(), 1e-6)
            .unwrap();
        assert!(r.pass, "{r}");
        assert_eq!(r.params.len(), model.params.trainable().count());
    }
}

#[test]
fn gradcheck_covers_adapters() {
    let (mut model, seq, target, part) = class_case();
    attach(&mut model, &LoraConfig { rank: 2, ..LoraConfig::default() }, 1).unwrap();
    for id in crate::adapters::adapter_params(&model) {
        for (i, v) in model.params.get_mut(id).value.data_mut().iter_mut().enumerate() {
            *v = 0.3 * ((i as f64) * 0.7).sin();
        }
    }
    let r = gradcheck(&model, &seq, &target, &part, &Options::default(), &FdOptions::default(), 1e-6)
        .unwrap();
    assert!(r.pass, "{r}");
    assert!(r.params.iter().all(|p| p.name.contains("lora")));
}

#[test]
fn gradcheck_detects_tracked_unselected_kv() {
    let (model, seq, target, part) = lm_case();
    let opts = Options { bug: Some(InjectedBug::TrackUnselectedKv) };
    let r = gradcheck(&model, &seq, &target, &part, &opts, &FdOptions::default(), 1e-6).unwrap();
    assert!(!r.pass);
}

#[test]
fn literal_loss_differences_disagree_with_selective_gradients() {
    // without holding the unselected rows fixed, finite differences see the
    // path through the unselected keys
    let (model, seq, target, part) = class_case();
    let grads = tokentune_grads(&model, &seq, &target, &part, &Options::default()).unwrap();
    let w_k = model.layers[0].w_k;
    let coords: Vec<usize> = (0..model.params.value(w_k).len()).collect();
    let live = |m: &TransformerModel| {
        let mut tape = Tape::new(Dtype::F64);
        let l = stopgrad_loss(&mut tape, m, &seq, &target, &part.selected, None)?;
        Ok(tape.value(l).get(0, 0))
    };
    let numeric = finite_diff_param(&model, w_k, &coords, 1e-5, live).unwrap();
    let analytic = grads.get(w_k).unwrap();
    let worst = coords.iter().map(|&c| rel_err(analytic.data()[c], numeric[c])).fold(0.0, f64::max);
    assert!(worst > 1e-3, "{worst}");
}

#[test]
fn frozen_params_have_no_gradient_but_do_move_the_loss() {
    let (model, seq, target, part) = class_case();
    let b_k = model.layers[0].b_k;
    let grads = tokentune_grads(&model, &seq, &target, &part, &Options::default()).unwrap();
    assert!(!grads.contains(b_k));
    let w_v = model.layers[0].w_v;
    let mut frozen = model.clone();
    frozen.params.get_mut(w_v).frozen = true;
    let g = tokentune_grads(&frozen, &seq, &target, &part, &Options::default()).unwrap();
    assert!(!g.contains(w_v));
    let r = gradcheck(&frozen, &seq, &target, &part, &Options::default(), &FdOptions::default(), 1e-6)
        .unwrap();
    assert!(r.params.iter().all(|p| !p.name.ends_with("w_v")));
    let loss = |m: &TransformerModel| {
        let mut tape = Tape::new(Dtype::F64);
        let l = stopgrad_loss(&mut tape, m, &seq, &target, &part.selected, None)?;
        Ok(tape.value(l).get(0, 0))
    };
    let numeric = finite_diff_param(&frozen, w_v, &[0, 1, 2, 3], 1e-5, loss).unwrap();
    assert!(numeric.iter().any(|g| g.abs() > 1e-8));
}

#[test]
fn report_display_names_worst_parameter() {
    let (model, seq, target, part) = class_case();
    let r = gradcheck(&model, &seq, &target, &part, &Options::default(), &FdOptions::default(), 1e-6)
        .unwrap();
    let text = r.to_string();
    assert!(text.contains("worst:"));
    assert!(text.ends_with(&format!("(max_rel_err {:.3e}, tolerance 1.0e-6)", r.max_rel_err())));
}

fn small_suite(bug: Option<InjectedBug>) -> SuiteReport {
    let opts = SuiteOptions { points: 16, max_n: 10, bug, ..SuiteOptions::default() };
    equivalence_suite(&opts).unwrap()
}

#[test]
fn suite_passes_without_bugs() {
    let r = small_suite(None);
    assert_eq!(r.results.len(), 64);
    assert!(r.pass(), "{r}");
    assert!(r.results.iter().any(|x| x.property == Property::FullEquivalence && x.max_rel_err == 0.0));
}

#[test]
fn suite_detects_every_injected_bug() {
    let expect = [
        (InjectedBug::TrackUnselectedKv, Property::StopgradEquivalence),
        (InjectedBug::CacheUnselectedRows, Property::CacheScaling),
        (InjectedBug::MaskFromStorageOrder, Property::ValuePreservation),
    ];
    for (bug, property) in expect {
        let r = small_suite(Some(bug));
        assert!(r.failed(property), "{bug} not caught by {property}\n{r}");
    }
}

#[test]
fn suite_is_identical_across_execution_modes() {
    let base = SuiteOptions { points: 6, max_n: 8, ..SuiteOptions::default() };
    let seq = equivalence_suite(&SuiteOptions { execution: Execution::Sequential, ..base.clone() }).unwrap();
    let par = equivalence_suite(&SuiteOptions { execution: Execution::Parallel, ..base }).unwrap();
    assert_eq!(seq, par);
}

#[test]
fn suite_jsonl_has_one_object_per_check() {
    let r = equivalence_suite(&SuiteOptions { points: 2, max_n: 6, ..SuiteOptions::default() }).unwrap();
    let mut buf = Vec::new();
    r.write_jsonl(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let lines: Vec<_> = text.lines().collect();
    assert_eq!(lines.len(), 8);
    for l in lines {
        let v: serde_json::Value = serde_json::from_str(l).unwrap();
        for key in ["grid_point", "property", "max_rel_err", "pass"] {
            assert!(v.get(key).is_some(), "{key} missing in {l}");
        }
    }
}

#[test]
fn suite_rejects_empty_grid() {
    let opts = SuiteOptions { points: 0, ..SuiteOptions::default() };
    assert!(matches!(equivalence_suite(&opts), Err(Error::InvalidConfig(_))));
}

#[test]
fn grid_cycles_modes_and_respects_bounds() {
    let g = suite::grid(&SuiteOptions { points: 40, max_n: 9, ..SuiteOptions::default() });
    assert!(g.iter().any(|p| p.causal && p.lora));
    assert!(g.iter().any(|p| !p.causal && !p.lora));
    for p in &g {
        assert!((4..=9).contains(&p.n) && p.n_real <= p.n && p.n_real >= 3);
        assert!(p.k >= 1 && p.k <= if p.causal { p.n_real - 1 } else { p.n_real });
    }
}
