use asmr_core::diffnet::{grad_check, relative_error, DenseLayer, EncoderNet, Mlp};
use asmr_core::gradcheck::{run_suite, toy_instance, toy_loss, SuiteConfig};
use asmr_core::objective::{
    asmr, cls_pretrain_loss, ma_loss, total_loss, Batch, HammingWeights, PretrainHeads, Variant,
};
use asmr_core::schema::{hamming_profile, AttributeSchema, PersonCategory};
use asmr_core::LossConfig;
use ndarray::{Array1, Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-5;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-1.0..1.0))
}

fn unit_rows(mut m: Array2<f64>) -> Array2<f64> {
    for mut row in m.rows_mut() {
        let n = row.dot(&row).sqrt();
        row /= n;
    }
    m
}

fn as_matrix(v: &[f64], cols: usize) -> Array2<f64> {
    Array2::from_shape_vec((v.len() / cols, cols), v.to_vec()).unwrap()
}

fn flat(m: &Array2<f64>) -> Vec<f64> {
    m.iter().copied().collect()
}

fn max_rel(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| relative_error(a, n))
        .fold(0.0, f64::max)
}

/// Central differences of `f` over a flat parameter vector.
fn numeric_gradient(f: impl Fn(&[f64]) -> f64, x: &[f64]) -> Vec<f64> {
    let mut work = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = work[i];
            work[i] = orig + STEP;
            let plus = f(&work);
            work[i] = orig - STEP;
            let minus = f(&work);
            work[i] = orig;
            (plus - minus) / (2.0 * STEP)
        })
        .collect()
}

#[test]
fn full_objective_passes_on_twenty_toy_instances() {
    let report = run_suite(&SuiteConfig::default()).unwrap();
    assert_eq!(report.cases.len(), 20 * Variant::ALL.len());
    assert!(report.passed, "max rel error {}", report.max_rel_error());
    let names: Vec<String> = report.block_maxima().into_iter().map(|(n, _)| n).collect();
    assert!(names.contains(&"image.fc3.weight".to_string()));
    assert!(names.contains(&"category.fc1.bias".to_string()));
    assert!(names.contains(&"w".to_string()));
}

#[test]
fn corrupted_gradient_is_caught() {
    let cfg = SuiteConfig {
        instances: 3,
        corrupt: true,
        ..Default::default()
    };
    assert!(!run_suite(&cfg).unwrap().passed);
}

#[test]
fn single_linear_layer_with_normalization() {
    for seed in 0..5 {
        let mut r = rng(seed);
        let layer = DenseLayer::glorot(4, 3, &mut r);
        let net = EncoderNet::new(Mlp::new(vec![layer]).unwrap());
        let x: Vec<f64> = (0..4).map(|_| r.random_range(-1.0..1.0)).collect();
        let up: Vec<f64> = (0..3).map(|_| r.random_range(-1.0..1.0)).collect();
        let analytic = net.backward(&x, &up).unwrap();
        let report = grad_check(
            |n: &EncoderNet| {
                let y = n.forward(&x)?;
                Ok(y.as_slice().iter().zip(&up).map(|(a, b)| a * b).sum())
            },
            &net,
            &analytic,
            STEP,
            1e-6,
        )
        .unwrap();
        assert!(report.passed, "seed {seed}: {}", report.max_rel_error());
    }
}

#[test]
fn three_layer_encoder_on_twenty_seeds() {
    let mut checked = 0;
    let mut seed = 0;
    while checked < 20 {
        seed += 1;
        let mut r = rng(seed);
        let net = EncoderNet::glorot(&[6, 8, 5, 4], &mut r).unwrap();
        let x: Vec<f64> = (0..6).map(|_| r.random_range(-1.0..1.0)).collect();
        let row = ArrayView2::from_shape((1, 6), &x).unwrap();
        let cache = match net.forward_batch(row) {
            Ok(c) => c,
            Err(_) => continue,
        };
        if cache.mlp.min_relu_margin() < 1e-6 {
            continue;
        }
        let up: Vec<f64> = (0..4).map(|_| r.random_range(-1.0..1.0)).collect();
        let analytic = net.backward(&x, &up).unwrap();
        let report = grad_check(
            |n: &EncoderNet| {
                let y = n.forward(&x)?;
                Ok(y.as_slice().iter().zip(&up).map(|(a, b)| a * b).sum())
            },
            &net,
            &analytic,
            STEP,
            1e-4,
        )
        .unwrap();
        assert!(report.passed, "seed {seed}: {}", report.max_rel_error());
        checked += 1;
    }
}

#[test]
fn forward_matches_hand_evaluated_chain() {
    let mut r = rng(11);
    let net = EncoderNet::glorot(&[5, 7, 6, 3], &mut r).unwrap();
    let x: Vec<f64> = (0..5).map(|_| r.random_range(-2.0..2.0)).collect();
    let mut h = x.clone();
    let layers = net.mlp().layers();
    for (li, layer) in layers.iter().enumerate() {
        let mut next = Vec::with_capacity(layer.out_dim());
        for o in 0..layer.out_dim() {
            let mut acc = layer.bias[o];
            for (i, hi) in h.iter().enumerate() {
                acc += layer.weight[[o, i]] * hi;
            }
            if li + 1 < layers.len() && acc < 0.0 {
                acc = 0.0;
            }
            next.push(acc);
        }
        h = next;
    }
    let norm = h.iter().map(|v| v * v).sum::<f64>().sqrt();
    let out = net.forward(&x).unwrap();
    for (a, b) in out.as_slice().iter().zip(&h) {
        assert!((a - b / norm).abs() < 1e-12);
    }
}

#[test]
fn alignment_loss_gradients() {
    for seed in 0..10 {
        let mut r = rng(100 + seed);
        let f = unit_rows(random_matrix(4, 3, &mut r));
        let g = unit_rows(random_matrix(3, 3, &mut r));
        let assign = vec![0, 1, 2, r.random_range(0..3)];
        let (sigma, gamma) = (3.0, 0.2);
        let out = ma_loss(f.view(), &assign, g.view(), sigma, gamma).unwrap();

        let nf = numeric_gradient(
            |v| ma_loss(as_matrix(v, 3).view(), &assign, g.view(), sigma, gamma).unwrap().value,
            &flat(&f),
        );
        assert!(max_rel(&flat(&out.grad_f), &nf) < 1e-4, "seed {seed} F");
        let ng = numeric_gradient(
            |v| ma_loss(f.view(), &assign, as_matrix(v, 3).view(), sigma, gamma).unwrap().value,
            &flat(&g),
        );
        assert!(max_rel(&flat(&out.grad_g), &ng) < 1e-4, "seed {seed} G");
    }
}

/// Regularizer evaluated by direct pair enumeration, independent of the
/// library's factored path.
fn asmr_oracle(g: &Array2<f64>, cats: &[PersonCategory], w: &[f64], variant: Variant) -> f64 {
    let n = g.nrows();
    let unit: Vec<Array1<f64>> = g
        .rows()
        .into_iter()
        .map(|r| {
            let n = r.dot(&r).sqrt();
            r.to_owned() / n
        })
        .collect();
    let n_groups = cats[0].bits().iter().filter(|&&b| b == 1).count();
    let weff: Vec<f64> = match variant {
        Variant::Full | Variant::NoDelta => w.to_vec(),
        Variant::UniformW => vec![1.0 / (2.0 * n_groups as f64); w.len()],
        Variant::L2normW => {
            let norm = w.iter().map(|v| v * v).sum::<f64>().sqrt();
            w.iter().map(|v| v / norm).collect()
        }
    };
    let mut s = Vec::new();
    let mut d = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            s.push(unit[i].dot(&unit[j]));
            let h = hamming_profile(&cats[i], &cats[j]).unwrap();
            let dist: f64 = h.iter().zip(&weff).map(|(&h, w)| f64::from(h) * w).sum();
            d.push(if variant == Variant::NoDelta {
                0.0
            } else {
                1.0 / (1.0 + (dist - 1.0).exp())
            });
        }
    }
    let mu = s.iter().sum::<f64>() / s.len() as f64;
    s.iter()
        .zip(&d)
        .map(|(s, d)| (s - mu - d).powi(2))
        .sum::<f64>()
        / s.len() as f64
}

fn four_categories() -> Vec<PersonCategory> {
    let schema = AttributeSchema::from_group_sizes(&[2, 3, 2]).unwrap();
    [[0, 0, 1], [1, 2, 0], [0, 1, 1], [1, 1, 0]]
        .iter()
        .map(|i| schema.category_from_indices(i).unwrap())
        .collect()
}

#[test]
fn regularizer_value_and_gradients_match_pair_enumeration() {
    let cats = four_categories();
    for seed in 0..10 {
        let mut r = rng(200 + seed);
        let g = random_matrix(4, 5, &mut r);
        let w: Vec<f64> = (0..7).map(|_| r.random_range(0.05..0.6)).collect();
        for variant in Variant::ALL {
            let hw = HammingWeights::new(w.clone()).unwrap();
            let out = asmr(g.view(), &cats, &hw, variant).unwrap();
            let oracle = asmr_oracle(&g, &cats, &w, variant);
            assert!((out.value - oracle).abs() < 1e-14, "{variant:?}");

            let ng = numeric_gradient(|v| asmr_oracle(&as_matrix(v, 5), &cats, &w, variant), &flat(&g));
            assert!(max_rel(&flat(&out.grad_g), &ng) < 1e-4, "{variant:?} G");
            let nw = numeric_gradient(|v| asmr_oracle(&g, &cats, v, variant), &w);
            let expected_w: Vec<f64> = match variant {
                Variant::UniformW => vec![0.0; 7],
                _ => nw,
            };
            assert!(max_rel(&out.grad_w, &expected_w) < 1e-4, "{variant:?} w");
        }
    }
}

#[test]
fn pretraining_loss_gradients() {
    let mut r = rng(5);
    let heads = PretrainHeads::glorot(4, &[6, 5, 3], &[2, 3], &mut r).unwrap();
    let x = random_matrix(3, 4, &mut r);
    let labels = vec![vec![0, 2], vec![1, 0], vec![1, 1]];
    let out = cls_pretrain_loss(x.view(), &heads, &labels).unwrap();
    let report = grad_check(
        |h: &PretrainHeads| Ok(cls_pretrain_loss(x.view(), h, &labels)?.value),
        &heads,
        &out.grad_heads,
        STEP,
        1e-4,
    )
    .unwrap();
    assert!(report.passed, "{}", report.max_rel_error());
    let nx = numeric_gradient(
        |v| cls_pretrain_loss(as_matrix(v, 4).view(), &heads, &labels).unwrap().value,
        &flat(&x),
    );
    assert!(max_rel(&flat(&out.grad_trunk), &nx) < 1e-4);
}

#[test]
fn total_loss_is_the_weighted_sum() {
    let inst = toy_instance(1).unwrap();
    let batch = inst.batch();
    let f = inst.state.embed_features(inst.features.view()).unwrap();
    let g = inst.state.embed_categories(&inst.categories).unwrap();
    let ma = ma_loss(f.view(), &inst.category_index, g.view(), 4.0, 0.1).unwrap().value;
    let reg = asmr(g.view(), &inst.categories, &inst.state.hamming_weights, Variant::Full)
        .unwrap()
        .value;

    let four = total_loss(&inst.state, &batch, &toy_loss(Variant::Full)).unwrap();
    assert!((four.total - (ma + 4.0 * reg)).abs() < 1e-12);
    let zero = LossConfig {
        lambda: 0.0,
        ..toy_loss(Variant::Full)
    };
    let out = total_loss(&inst.state, &batch, &zero).unwrap();
    assert_eq!(out.total, ma);
    assert!(out.grads.w.iter().all(|&v| v == 0.0));
}

#[test]
fn four_image_three_category_objective() {
    let inst = toy_instance(42).unwrap();
    assert_eq!(inst.features.nrows(), 4);
    assert_eq!(inst.categories.len(), 3);
    let batch = Batch {
        features: inst.features.clone(),
        category_index: inst.category_index.clone(),
        category_table: &inst.categories,
    };
    let cfg = LossConfig::default();
    let out = total_loss(&inst.state, &batch, &cfg).unwrap();
    let report = grad_check(
        |s| Ok(total_loss(s, &batch, &cfg)?.total),
        &inst.state,
        &out.grads,
        STEP,
        1e-4,
    )
    .unwrap();
    assert!(report.passed, "{}", report.max_rel_error());
}
