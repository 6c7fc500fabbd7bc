use proptest::prelude::*;
use qinn::model::{attack_forward_hook, Classifier};
use qinn::networks::{dense_lambda_index, encode, Activation, ConnectionMode, MlpModel, QinnModel};
use qinn::noise::{AttackForm, AttackSpec, AttackTarget, NoiseFamily, NoiseSpec, Symmetry};
use qinn::training::cross_entropy;

fn close(analytic: f64, fd: f64) -> bool {
    let diff = (analytic - fd).abs();
    diff <= 1e-8 || diff / analytic.abs().max(fd.abs()) < 1e-4
}

fn fd_check<M: Classifier>(model: &mut M, x: &[f64], label: usize) -> Result<(), String> {
    let none = M::Perturbation::default();
    let (_, grad) = model.loss_and_gradient(x, label, &none).map_err(|e| e.to_string())?;
    let base = model.parameters();
    let h = 1e-5;
    for k in 0..base.len() {
        let mut p = base.clone();
        p[k] = base[k] + h;
        model.set_parameters(&p).unwrap();
        let lp = cross_entropy(&model.probabilities(x, &none).unwrap(), label).unwrap().0;
        p[k] = base[k] - h;
        model.set_parameters(&p).unwrap();
        let lm = cross_entropy(&model.probabilities(x, &none).unwrap(), label).unwrap().0;
        let fd = (lp - lm) / (2.0 * h);
        if !close(grad[k], fd) {
            return Err(format!("param {k}: analytic {} vs fd {fd}", grad[k]));
        }
    }
    model.set_parameters(&base).unwrap();
    Ok(())
}

fn mode() -> impl Strategy<Value = ConnectionMode> {
    prop::sample::select(ConnectionMode::ALL.to_vec())
}

/// Random model with non-trivial skip coefficients and head bias.
fn qinn_case() -> impl Strategy<Value = (QinnModel, Vec<f64>, usize)> {
    (2usize..=8, 1usize..=4, 2usize..=4, mode(), any::<u64>()).prop_flat_map(|(n, l, c, m, seed)| {
        (
            Just((n, l, c, m, seed)),
            prop::collection::vec(-1.5f64..1.5, 10),
            prop::collection::vec(-1.0f64..1.0, c),
            prop::collection::vec(-2.0f64..2.0, n),
            0..c,
        )
            .prop_map(|((n, l, c, m, seed), lam, bias, x, y)| {
                let mut model = QinnModel::new(n, l, c, m, seed).unwrap();
                for (dst, src) in model.lambdas_mut().iter_mut().zip(lam.iter().cycle()) {
                    *dst = *src;
                }
                model.head_b_mut().copy_from_slice(&bias);
                let x = if x.iter().all(|v| *v == 0.0) { vec![1.0; n] } else { x };
                (model, x, y)
            })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    #[test]
    fn qinn_gradients_match_finite_differences((mut model, x, y) in qinn_case()) {
        if let Err(e) = fd_check(&mut model, &x, y) {
            prop_assert!(false, "{} {}", model.mode(), e);
        }
    }

    #[test]
    fn mlp_gradients_match_finite_differences(
        n in 2usize..=6, depth in 1usize..=3, c in 2usize..=4, tanh in any::<bool>(), seed in any::<u64>(),
        x in prop::collection::vec(-2.0f64..2.0, 6), y in 0usize..4,
    ) {
        let act = if tanh { Activation::Tanh } else { Activation::LeakyRelu };
        let mut m = MlpModel::new(n, &vec![n; depth], c, act, seed).unwrap();
        // central differences are meaningless across the leaky-relu kink
        let pre = m.forward(&x[..n]).unwrap().cache;
        prop_assume!(tanh || pre.pre_activations().iter().flatten().all(|z| z.abs() > 1e-3));
        if let Err(e) = fd_check(&mut m, &x[..n], y % c) {
            prop_assert!(false, "{}", e);
        }
    }

    #[test]
    fn dense_without_skips_is_plain_stack(n in 2usize..=8, l in 1usize..=4, seed in any::<u64>(), x in prop::collection::vec(0.1f64..1.0, 8)) {
        let plain = QinnModel::new(n, l, 3, ConnectionMode::None, seed).unwrap();
        let mut dense = QinnModel::new(n, l, 3, ConnectionMode::Dense, seed).unwrap();
        dense.lambdas_mut().iter_mut().for_each(|v| *v = 0.0);
        let a = plain.forward(&x[..n]).unwrap().logits;
        let b = dense.forward(&x[..n]).unwrap().logits;
        for (u, v) in a.iter().zip(&b) {
            prop_assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn dense_with_last_skip_only_is_residual(
        n in 2usize..=8, l in 1usize..=4, seed in any::<u64>(),
        lam in prop::collection::vec(-1.5f64..1.5, 4), x in prop::collection::vec(0.1f64..1.0, 8),
    ) {
        let mut res = QinnModel::new(n, l, 3, ConnectionMode::Residual, seed).unwrap();
        let mut dense = QinnModel::new(n, l, 3, ConnectionMode::Dense, seed).unwrap();
        dense.lambdas_mut().iter_mut().for_each(|v| *v = 0.0);
        for layer in 1..=l {
            res.lambdas_mut()[layer - 1] = lam[layer - 1];
            dense.lambdas_mut()[dense_lambda_index(layer, layer - 1)] = lam[layer - 1];
        }
        let a = res.forward(&x[..n]).unwrap().logits;
        let b = dense.forward(&x[..n]).unwrap().logits;
        for (u, v) in a.iter().zip(&b) {
            prop_assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_stays_finite((model, x, _) in qinn_case()) {
        let f = model.forward(&x).unwrap();
        prop_assert!(f.logits.iter().all(|v| v.is_finite()));
        let s: f64 = f.probabilities.iter().sum();
        prop_assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_epsilon_attack_is_identity(
        (model, x, _) in qinn_case(), outer in any::<bool>(), idx in 0usize..13,
    ) {
        let form = if outer { AttackForm::Outer } else { AttackForm::Inner };
        let noise = NoiseSpec::new(NoiseFamily::Gaussian, Symmetry::Symmetric, 1.0);
        let r = idx % model.layers()[0].len();
        let a = AttackSpec::with_epsilons(AttackTarget::Layer, model.depth() - 1, vec![r], form, noise, vec![0.0]).unwrap();
        let hook = attack_forward_hook(&model, &a).unwrap();
        let clean = model.forward(&x).unwrap().probabilities;
        prop_assert_eq!(hook.probabilities(&x).unwrap(), clean);

        let mlp = MlpModel::new(model.dim(), &vec![model.dim(); model.depth()], model.classes(), Activation::Tanh, 1).unwrap();
        let hook = attack_forward_hook(&mlp, &a).unwrap();
        let clean = mlp.forward(&x).unwrap().probabilities;
        prop_assert_eq!(hook.probabilities(&x).unwrap(), clean);
    }
}

#[test]
fn zero_skips_make_modes_agree() {
    let x = [0.3, 0.9, 0.1, 0.5];
    let reference = QinnModel::new(4, 3, 3, ConnectionMode::None, 5).unwrap();
    let (l0, _) = cross_entropy(&reference.forward(&x).unwrap().probabilities, 1).unwrap();
    for mode in ConnectionMode::ALL {
        let mut m = QinnModel::new(4, 3, 3, mode, 5).unwrap();
        m.lambdas_mut().iter_mut().for_each(|v| *v = 0.0);
        let (l, _) = cross_entropy(&m.forward(&x).unwrap().probabilities, 1).unwrap();
        assert!((l - l0).abs() < 1e-12, "{mode}");
    }
}

#[test]
fn encoded_state_is_unit_norm() {
    let s = encode(&[3.0, 4.0]).unwrap();
    assert_eq!(s.amp(), &[0.6, 0.8]);
    assert!(encode(&[0.0, 0.0]).is_err());
}
