use super::*;
use crate::tensor::gradcheck::grad_check_coords;
use crate::tensor::{cross_entropy, Mode};

fn tiny(variant: Variant) -> ModelConfig {
    ModelConfig {
        variant,
        num_experts: 3,
        n_shared: 1,
        n_specific: 1,
        main_classes: 3,
        aux_classes: 2,
        main_gate_dim: 5,
        aux_gate_dim: 4,
        expert_channels: 2,
        tower_widths: vec![2, 2, 3, 3],
        gate_hidden: 4,
        pruned: false,
    }
}

fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ParamRng::new(seed, 99);
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.normal()).collect()).unwrap()
}

struct Inputs {
    x: Tensor<f64>,
    s_main: Tensor<f64>,
    s_aux: Tensor<f64>,
}

fn inputs(b: usize, hw: usize, seed: u64) -> Inputs {
    Inputs {
        x: randn(&[b, 1, hw, hw], seed),
        s_main: randn(&[b, 5], seed + 1),
        s_aux: randn(&[b, 4], seed + 2),
    }
}

#[test]
fn paper_parameter_counts() {
    let single = M3Model::<f32>::new(ModelConfig::paper(Variant::SingleTask), 0).unwrap();
    assert_eq!(single.parameter_count(true), 11_174_857);
    let m3 = M3Model::<f32>::new(ModelConfig::paper(Variant::M3), 0).unwrap();
    assert_eq!(m3.parameter_count(false), 11_350_988);
    assert_eq!(m3.parameter_count(true), 22_690_132);
    let fmtl = M3Model::<f32>::new(ModelConfig::paper(Variant::FundamentalMtl), 0).unwrap();
    assert_eq!(fmtl.parameter_count(true), 22_344_398);
}

#[test]
fn one_more_expert_costs_an_expert_and_two_gate_rows() {
    let mut cfg = tiny(Variant::M3);
    cfg.expert_channels = 64;
    cfg.gate_hidden = 128;
    cfg.tower_widths = vec![8, 8];
    let a = M3Model::<f32>::new(cfg.clone(), 0).unwrap().parameter_count(true);
    cfg.num_experts = 4;
    let b = M3Model::<f32>::new(cfg, 0).unwrap().parameter_count(true);
    assert_eq!(b - a, 3_264 + 2 * 129);
}

#[test]
fn counted_params_match_visited_params() {
    for v in [
        Variant::SingleTask,
        Variant::FundamentalMtl,
        Variant::M3,
        Variant::M3Tse,
    ] {
        let mut m = M3Model::<f64>::new(tiny(v), 1).unwrap();
        assert_eq!(m.parameter_count(true), Parameters::param_count(&mut m), "{v:?}");
    }
}

#[test]
fn expert_output_shape() {
    let e = Expert::<f64>::new(64, &mut ParamRng::new(0, 0));
    let y = e.infer(&randn(&[2, 1, 64, 64], 0)).unwrap();
    assert_eq!(y.shape(), &[2, 64, 16, 16]);
}

#[test]
fn experts_differ() {
    let m = M3Model::<f64>::new(tiny(Variant::M3), 3).unwrap();
    let x = randn(&[2, 1, 12, 12], 5);
    let a = m.experts()[0].infer(&x).unwrap();
    let b = m.experts()[1].infer(&x).unwrap();
    assert!(a.max_abs_diff(&b) > 1e-3);
}

#[test]
fn tower_shapes_and_zero_head() {
    let mut rng = ParamRng::new(0, 0);
    let mut t = Tower::<f64>::new(64, &[16, 16, 32, 32], 5, &mut rng);
    let z = t.infer(&randn(&[2, 64, 16, 16], 1)).unwrap();
    assert_eq!(z.shape(), &[2, 5]);
    t.fc.zero_init();
    let z = t.infer(&randn(&[2, 64, 16, 16], 1)).unwrap();
    assert!(z.data().iter().all(|&v| v == 0.0));
}

#[test]
fn gate_rows_on_simplex() {
    let mut g = Gate::<f64>::new(5, 4, 3, &mut ParamRng::new(0, 1));
    let p = g.forward(&randn(&[6, 5], 2), Mode::Train).unwrap();
    for row in p.data().chunks(3) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(row.iter().all(|&v| v > 0.0));
    }
    g.fc2.zero_init();
    let p = g.infer(&randn(&[6, 5], 3)).unwrap();
    assert!(p.data().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
    let one = Gate::<f64>::new(5, 4, 1, &mut ParamRng::new(0, 1));
    assert!(one.infer(&randn(&[4, 5], 2)).unwrap().data().iter().all(|&v| v == 1.0));
}

#[test]
fn single_expert_m3_equals_fundamental() {
    let mut cfg = tiny(Variant::M3);
    cfg.num_experts = 1;
    let mut m3 = M3Model::<f64>::new(cfg, 7).unwrap();
    let mut fm = M3Model::<f64>::new(tiny(Variant::FundamentalMtl), 7).unwrap();
    let inp = inputs(3, 12, 1);
    let a = m3
        .forward(&inp.x, Some(&inp.s_main), Some(&inp.s_aux), Mode::Train)
        .unwrap();
    let b = fm.forward(&inp.x, None, None, Mode::Train).unwrap();
    assert_eq!(a.main, b.main);
    assert_eq!(a.aux, b.aux);
    let g = randn(&[3, 3], 4);
    let h = randn(&[3, 2], 5);
    m3.backward(Some(&g), Some(&h)).unwrap();
    fm.backward(Some(&g), Some(&h)).unwrap();
    assert_eq!(m3.experts()[0].conv.weight.grad, fm.experts()[0].conv.weight.grad);
}

#[test]
fn fixed_weights_match_manual_mixing() {
    let mut m = M3Model::<f64>::new(tiny(Variant::M3), 2).unwrap();
    let inp = inputs(2, 12, 3);
    m.set_fixed_weights(Task::Main, Some(&[1.0 / 3.0; 3])).unwrap();
    let out = m.infer(&inp.x, None, Some(&inp.s_aux)).unwrap();
    let maps: Vec<Tensor<f64>> = m.experts().iter().map(|e| e.infer(&inp.x).unwrap()).collect();
    let mut avg = Tensor::zeros(maps[0].shape());
    for r in &maps {
        avg.add_assign(&r.scale(1.0 / 3.0)).unwrap();
    }
    let want = m.tower(Task::Main).unwrap().infer(&avg).unwrap();
    assert!(out.main.max_abs_diff(&want) < 1e-12);

    m.set_fixed_weights(Task::Main, Some(&[0.0, 1.0, 0.0])).unwrap();
    let out = m.infer(&inp.x, None, Some(&inp.s_aux)).unwrap();
    assert_eq!(out.main, m.tower(Task::Main).unwrap().infer(&maps[1]).unwrap());
    assert!(m.set_fixed_weights(Task::Main, Some(&[1.0])).is_err());
}

#[test]
fn pruning_keeps_main_logits() {
    for v in [Variant::M3, Variant::M3Tse, Variant::FundamentalMtl] {
        let m = M3Model::<f64>::new(tiny(v), 4).unwrap();
        let inp = inputs(4, 12, 8);
        let full = m.infer(&inp.x, Some(&inp.s_main), Some(&inp.s_aux)).unwrap();
        let before = m.parameter_count(false);
        let (p, warn) = m.prune_for_inference();
        assert!(warn.is_none());
        assert!(p.config().pruned);
        let pruned = p.infer(&inp.x, Some(&inp.s_main), None).unwrap();
        assert_eq!(full.main, pruned.main);
        assert!(pruned.aux.is_none());
        assert_eq!(p.parameter_count(true), before);
        assert!(matches!(
            p.infer_aux(&inp.x, Some(&inp.s_main), Some(&inp.s_aux)),
            Err(ModelError::Capability(_))
        ));
    }
    let single = M3Model::<f64>::new(tiny(Variant::SingleTask), 4).unwrap();
    assert!(single.prune_for_inference().1.is_some());
}

#[test]
fn tse_partition() {
    let c = tiny(Variant::M3Tse);
    assert_eq!(c.total_experts(), 3);
    assert_eq!(c.accessible(Task::Main), vec![0, 1]);
    assert_eq!(c.accessible(Task::Aux), vec![0, 2]);
    let five = ModelConfig { n_specific: 2, ..c };
    assert_eq!(five.total_experts(), 5);
    assert_eq!(five.accessible(Task::Main), vec![0, 1, 2]);
    assert_eq!(five.accessible(Task::Aux), vec![0, 3, 4]);
}

#[test]
fn tse_main_loss_never_reaches_aux_experts() {
    let mut m = M3Model::<f64>::new(tiny(Variant::M3Tse), 5).unwrap();
    let inp = inputs(3, 12, 9);
    let out = m
        .forward(&inp.x, Some(&inp.s_main), Some(&inp.s_aux), Mode::Train)
        .unwrap();
    let ce = cross_entropy(&out.main, &[0, 1, 2]).unwrap();
    m.backward(Some(&ce.grad), None).unwrap();
    assert!(m.experts()[0].conv.weight.has_grad());
    assert!(m.experts()[1].conv.weight.has_grad());
    assert!(!m.experts()[2].conv.weight.has_grad());
    assert!(m.experts()[2].conv.weight.grad.data().iter().all(|&v| v == 0.0));
    assert!(!m.gate(Task::Aux).unwrap().fc1.weight.has_grad());
}

#[test]
fn double_backward_doubles() {
    let mut m = M3Model::<f64>::new(tiny(Variant::M3), 6).unwrap();
    let inp = inputs(2, 12, 10);
    m.forward(&inp.x, Some(&inp.s_main), Some(&inp.s_aux), Mode::Train)
        .unwrap();
    let g = randn(&[2, 3], 1);
    let h = randn(&[2, 2], 2);
    m.backward(Some(&g), Some(&h)).unwrap();
    let once = m.state_grads();
    m.backward(Some(&g), Some(&h)).unwrap();
    let twice = m.state_grads();
    for ((n, a), (_, b)) in once.iter().zip(&twice) {
        for (x, y) in a.iter().zip(b) {
            assert!((2.0 * x - y).abs() <= 1e-12 * x.abs().max(1.0), "{n}");
        }
    }
}

impl M3Model<f64> {
    fn state_grads(&mut self) -> Vec<(String, Vec<f64>)> {
        let mut v = Vec::new();
        self.visit_params("", &mut v);
        v.into_iter().map(|(n, p)| (n, p.grad.data().to_vec())).collect()
    }
}

#[test]
fn state_round_trip() {
    let mut a = M3Model::<f32>::new(tiny(Variant::M3Tse), 1).unwrap();
    let x = randn(&[2, 1, 12, 12], 0).cast_to::<f32>();
    let s_m = randn(&[2, 5], 1).cast_to::<f32>();
    let s_a = randn(&[2, 4], 2).cast_to::<f32>();
    a.forward(&x, Some(&s_m), Some(&s_a), Mode::Train).unwrap();
    let state = a.state();
    assert!(state.iter().any(|(n, _)| n == "experts.0.bn.running_mean"));
    assert!(state.iter().any(|(n, _)| n == "gate_aux.fc2.weight"));
    assert!(state
        .iter()
        .any(|(n, _)| n == "tower_main.blocks.2.downsample.0.weight"));
    let mut b = M3Model::<f32>::new(tiny(Variant::M3Tse), 99).unwrap();
    b.load_state(&state).unwrap();
    assert_eq!(
        a.infer(&x, Some(&s_m), Some(&s_a)).unwrap(),
        b.infer(&x, Some(&s_m), Some(&s_a)).unwrap()
    );
    let mut c = M3Model::<f32>::new(tiny(Variant::M3), 99).unwrap();
    assert!(matches!(c.load_state(&state), Err(ModelError::State(_))));
}

#[test]
fn config_validation() {
    let mut c = tiny(Variant::M3);
    c.num_experts = 0;
    assert!(M3Model::<f32>::new(c, 0).is_err());
    let mut c = tiny(Variant::M3);
    c.tower_widths = vec![4, 4, 4];
    assert!(M3Model::<f32>::new(c, 0).is_err());
    let mut c = tiny(Variant::M3Tse);
    c.n_specific = 0;
    assert!(M3Model::<f32>::new(c, 0).is_err());
}

#[test]
fn missing_gating_feature_is_rejected() {
    let mut m = M3Model::<f64>::new(tiny(Variant::M3), 0).unwrap();
    let inp = inputs(2, 12, 0);
    assert!(m.forward(&inp.x, None, Some(&inp.s_aux), Mode::Train).is_err());
    assert!(m.infer(&inp.x, Some(&inp.s_aux), Some(&inp.s_aux)).is_err());
}

/// Loss of the full model on fixed data, as a function of one parameter.
fn composite_loss(m: &mut M3Model<f64>, inp: &Inputs, alpha: f64) -> f64 {
    let out = m
        .forward(&inp.x, Some(&inp.s_main), Some(&inp.s_aux), Mode::Train)
        .unwrap();
    let lm = cross_entropy(&out.main, &[0, 2, 1]).unwrap().loss;
    let la = cross_entropy(out.aux.as_ref().unwrap(), &[1, 0, 1]).unwrap().loss;
    lm + alpha * la
}

#[test]
fn full_model_gradients() {
    for v in [Variant::M3, Variant::M3Tse] {
        let mut m = M3Model::<f64>::new(tiny(v), 11).unwrap();
        let inp = inputs(3, 12, 12);
        let alpha = 0.7;
        let out = m
            .forward(&inp.x, Some(&inp.s_main), Some(&inp.s_aux), Mode::Train)
            .unwrap();
        let gm = cross_entropy(&out.main, &[0, 2, 1]).unwrap().grad;
        let ga = cross_entropy(out.aux.as_ref().unwrap(), &[1, 0, 1])
            .unwrap()
            .grad
            .scale(alpha);
        m.backward(Some(&gm), Some(&ga)).unwrap();
        let grads = m.state_grads();
        for (name, grad) in grads {
            let x0: Vec<f64> = {
                let mut v = Vec::new();
                m.visit_params("", &mut v);
                v.into_iter().find(|(n, _)| *n == name).unwrap().1.value.data().to_vec()
            };
            let coords: Vec<usize> = (0..x0.len()).step_by((x0.len() / 6).max(1)).collect();
            let mut probe = m.clone();
            let rep = grad_check_coords(
                |x| {
                    let mut v = Vec::new();
                    probe.visit_params("", &mut v);
                    let p = v.into_iter().find(|(n, _)| *n == name).unwrap().1;
                    p.value.data_mut().copy_from_slice(x);
                    composite_loss(&mut probe, &inp, alpha)
                },
                &x0,
                &grad,
                &coords,
                1e-5,
            )
            .unwrap();
            // a bias feeding batch norm has an exactly zero gradient; the
            // numeric estimate is then pure rounding noise
            let vanishing = rep.analytic_norm < 1e-12 && rep.numeric_norm < 1e-9;
            assert!(rep.passes(1e-4) || vanishing, "{v:?} {name}: {rep:?}");
        }
    }
}
