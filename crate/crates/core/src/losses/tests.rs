use super::*;
use crate::rng;
use proptest::prelude::*;

fn m(rows: &[Vec<f64>]) -> Matrix<f64> {
    Matrix::from_rows(rows).unwrap()
}

fn weights(k: usize) -> LossWeights {
    LossWeights {
        k,
        ..LossWeights::default()
    }
}

/// Full sort of `(logit, index)` pairs, used as the selection oracle.
fn sort_oracle(row: &[f64], y: usize, k: usize) -> Vec<usize> {
    let mut pairs: Vec<(f64, usize)> = row
        .iter()
        .copied()
        .zip(0..)
        .filter(|&(_, j)| j != y)
        .collect();
    pairs.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    pairs.into_iter().take(k).map(|(_, j)| j).collect()
}

/// Direct evaluation: exp(−Δ) normalized, no stabilization.
fn rho_oracle(row: &[f64], y: usize, nbhd: &[usize]) -> Vec<f64> {
    let w: Vec<f64> = nbhd.iter().map(|&j| (-(row[y] - row[j])).exp()).collect();
    let s: f64 = w.iter().sum();
    w.iter().map(|x| x / s).collect()
}

/// Textbook JS with explicit KL terms.
fn js_oracle(p: &[f64], q: &[f64]) -> f64 {
    let kl = |a: &[f64], b: &[f64]| -> f64 {
        a.iter()
            .zip(b)
            .filter(|(x, _)| **x > 0.0)
            .map(|(x, y)| x * (x / y).ln())
            .sum()
    };
    let mid: Vec<f64> = p.iter().zip(q).map(|(a, b)| (a + b) / 2.0).collect();
    0.5 * kl(p, &mid) + 0.5 * kl(q, &mid)
}

fn random_logits(seed: u64, n: usize, c: usize, std: f64) -> (Matrix<f64>, Vec<usize>) {
    let mut r = rng::derived(seed, "losses");
    let z = Matrix::gaussian(n, c, std, &mut r);
    let labels = (0..n).map(|i| (i * 7 + seed as usize) % c).collect();
    (z, labels)
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let d: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let s = tensor::l2_norm(a).max(tensor::l2_norm(b));
    if s == 0.0 {
        d
    } else {
        d / s
    }
}

fn numeric_grad(x: &Matrix<f64>, f: impl Fn(&Matrix<f64>) -> f64) -> Vec<f64> {
    let h = 1e-3;
    (0..x.as_slice().len())
        .map(|i| {
            let mut p = x.clone();
            p.as_mut_slice()[i] += h;
            let mut q = x.clone();
            q.as_mut_slice()[i] -= h;
            (f(&p) - f(&q)) / (2.0 * h)
        })
        .collect()
}

#[test]
fn worked_selection_example() {
    let z = m(&[vec![2.0, 5.0, 1.0, 4.0, 3.0]]);
    let n = select_neighborhood(&z, &[1], 2).unwrap();
    assert_eq!(n.row(0), &[3, 4]);
    assert_eq!(n.row(0), sort_oracle(z.row(0), 1, 2).as_slice());
}

#[test]
fn ties_break_by_ascending_index() {
    let z = m(&[vec![1.0; 5]]);
    assert_eq!(select_neighborhood(&z, &[0], 2).unwrap().row(0), &[1, 2]);
}

#[test]
fn exhaustive_neighborhood_is_everything_but_the_label() {
    let z = m(&[vec![0.3, -1.0, 2.0, 0.5]]);
    assert_eq!(select_neighborhood(&z, &[2], 3).unwrap().row(0), &[3, 0, 1]);
}

#[test]
fn selection_rejects_bad_k_and_labels() {
    let z = m(&[vec![0.0; 4]]);
    let err = select_neighborhood(&z, &[0], 4).unwrap_err();
    assert!(err.to_string().contains("k exceeds C-1"), "{err}");
    assert!(matches!(
        select_neighborhood(&z, &[0], 0),
        Err(PandError::Config(_))
    ));
    assert!(matches!(
        select_neighborhood(&z, &[4], 1),
        Err(PandError::Index { .. })
    ));
}

#[test]
fn selection_matches_sort_oracle_on_random_instances() {
    for seed in 0..100 {
        let (z, y) = random_logits(seed, 16, 20, 1.0);
        for k in [1, 3, 19] {
            let n = select_neighborhood(&z, &y, k).unwrap();
            for (i, &yi) in y.iter().enumerate() {
                assert_eq!(n.row(i), sort_oracle(z.row(i), yi, k).as_slice());
            }
        }
    }
}

#[test]
fn worked_relation_example() {
    let z = m(&[vec![5.0, 4.0, 3.0]]);
    let n = select_neighborhood(&z, &[0], 2).unwrap();
    let rho = neighborhood_distribution(&z, &[0], &n).unwrap().rho;
    let oracle = rho_oracle(z.row(0), 0, n.row(0));
    let e1 = (-1f64).exp();
    let e2 = (-2f64).exp();
    for (got, want) in rho.row(0).iter().zip([e1 / (e1 + e2), e2 / (e1 + e2)]) {
        assert!((got - want).abs() < 1e-12);
    }
    assert!((rho[(0, 0)] - 0.73106).abs() < 1e-5);
    assert!((rho[(0, 1)] - 0.26894).abs() < 1e-5);
    assert!(rel_err(rho.row(0), &oracle) < 1e-12);
}

#[test]
fn relation_matches_direct_softmax_on_random_instances() {
    for seed in 0..20 {
        let (z, y) = random_logits(seed, 16, 20, 2.0);
        let n = select_neighborhood(&z, &y, 3).unwrap();
        let rho = neighborhood_distribution(&z, &y, &n).unwrap().rho;
        for (i, &yi) in y.iter().enumerate() {
            let o = rho_oracle(z.row(i), yi, n.row(i));
            for (a, b) in rho.row(i).iter().zip(&o) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn equal_neighbors_give_uniform_relations() {
    let z = m(&[vec![2.0, 1.0, 1.0, 1.0]]);
    let n = select_neighborhood(&z, &[0], 3).unwrap();
    for &p in neighborhood_distribution(&z, &[0], &n).unwrap().rho.row(0) {
        assert!((p - 1.0 / 3.0).abs() < 1e-12);
    }
}

#[test]
fn non_finite_logits_are_numeric_errors() {
    let z = m(&[vec![0.0, f64::NAN, 1.0]]);
    let n = select_neighborhood(&m(&[vec![0.0, 1.0, 2.0]]), &[0], 2).unwrap();
    assert!(matches!(
        neighborhood_distribution(&z, &[0], &n),
        Err(PandError::Numeric { .. })
    ));
}

#[test]
#[allow(clippy::approx_constant)] // the rounded literal is the documented value
fn js_worked_values() {
    assert!((js_divergence::<f64>(&[1.0, 0.0], &[0.0, 1.0]).unwrap() - 2f64.ln()).abs() < 1e-12);
    assert!((js_divergence::<f64>(&[1.0, 0.0], &[0.0, 1.0]).unwrap() - 0.69315).abs() < 1e-5);
    let p = [0.73106, 0.26894];
    let q = [0.5, 0.5];
    let got = js_divergence(&p, &q).unwrap();
    assert!((got - js_oracle(&p, &q)).abs() < 1e-12);
    // By hand: KL(p‖m) ≈ 0.029645, KL(q‖m) ≈ 0.027426, mean ≈ 0.028536.
    assert!((got - 0.028536).abs() < 1e-5, "{got}");
    assert!(matches!(
        js_divergence(&[1.0], &[0.5, 0.5]),
        Err(PandError::Shape { .. })
    ));
}

#[test]
fn nsd_worked_value_against_uniform_student() {
    let teacher = m(&[vec![5.0, 4.0, 3.0]]);
    let student = m(&[vec![1.0, 0.0, 0.0]]);
    let got = nsd_loss(&teacher, &student, &[0], &weights(2)).unwrap();
    let e1 = (-1f64).exp();
    let e2 = (-2f64).exp();
    let oracle = js_oracle(&[e1 / (e1 + e2), e2 / (e1 + e2)], &[0.5, 0.5]);
    assert!((got - oracle).abs() < 1e-12);
    assert!((got - 0.028536).abs() < 1e-5, "{got}");
}

#[test]
fn nsd_vanishes_for_identical_and_shifted_students() {
    let (z, y) = random_logits(3, 8, 10, 1.0);
    let w = weights(3);
    assert!(nsd_loss(&z, &z, &y, &w).unwrap().abs() <= 1e-8);
    let shifted = z.map(|v| v + 3.0);
    assert!(nsd_loss(&z, &shifted, &y, &w).unwrap().abs() <= 1e-7);
}

#[test]
fn base_loss_worked_arithmetic() {
    let w = LossWeights::default();
    let partial = LossBreakdown {
        cls: 2.0,
        vis: 0.5,
        txt: 1.0,
        nsd: 0.0,
        base: w.lambda_cls * 2.0 + w.lambda_vis * 0.5 + w.lambda_txt * 1.0,
        total: 0.0,
    };
    assert!((partial.base - 0.7625).abs() < 1e-12);
    let t = total_loss(partial, Some(0.03), &w);
    assert!((t.total - 0.7775).abs() < 1e-12);
    let off = LossWeights {
        lambda_nsd: 0.0,
        ..w
    };
    assert_eq!(
        total_loss(partial, Some(0.03), &off).total.to_bits(),
        partial.base.to_bits()
    );
    let one = LossWeights {
        lambda_nsd: 1.0,
        ..w
    };
    assert_eq!(total_loss(partial, Some(0.0), &one).total, partial.base);
}

struct Batch {
    student: StudentOutput<f64>,
    teacher: TeacherOutput<f64>,
    anchors: SemanticAnchors<f64>,
    labels: Vec<usize>,
}

fn unit(m: Matrix<f64>) -> Matrix<f64> {
    crate::anchors::unit_rows(&m, "test").unwrap()
}

fn batch(seed: u64, n: usize, c: usize, d: usize) -> Batch {
    let mut r = rng::derived(seed, "batch");
    let logits = Matrix::gaussian(n, c, 1.0, &mut r);
    let projected = unit(Matrix::gaussian(n, d, 1.0, &mut r));
    let feats = unit(Matrix::gaussian(n, d, 1.0, &mut r));
    let anchors = unit(Matrix::gaussian(c, d, 1.0, &mut r));
    let t_logits = feats.matmul_t(&anchors).unwrap();
    let names = (0..c).map(|i| format!("c{i}")).collect();
    Batch {
        student: StudentOutput {
            features: Matrix::zeros(n, 1),
            projected,
            logits,
        },
        teacher: TeacherOutput {
            features: feats,
            logits: t_logits,
        },
        anchors: SemanticAnchors::new(anchors, names).unwrap().freeze(),
        labels: (0..n).map(|i| (i * 3 + 1) % c).collect(),
    }
}

#[test]
fn identical_projection_has_zero_vis() {
    let b = batch(1, 4, 5, 6);
    let mut s = b.student.clone();
    s.projected = b.teacher.features.clone();
    let out = base_loss(
        &s,
        &b.teacher,
        &b.anchors,
        &b.labels,
        &LossWeights::default(),
    )
    .unwrap();
    assert!(out.vis.abs() < 1e-12);
    let zero = LossWeights {
        lambda_cls: 0.0,
        lambda_vis: 0.0,
        lambda_txt: 0.0,
        ..LossWeights::default()
    };
    assert_eq!(
        base_loss(&b.student, &b.teacher, &b.anchors, &b.labels, &zero)
            .unwrap()
            .base,
        0.0
    );
}

#[test]
fn base_breakdown_is_consistent() {
    let b = batch(2, 8, 10, 6);
    let w = LossWeights::default();
    let out = base_loss(&b.student, &b.teacher, &b.anchors, &b.labels, &w).unwrap();
    let expect = w.lambda_cls * out.cls + w.lambda_vis * out.vis + w.lambda_txt * out.txt;
    assert!((out.base - expect).abs() < 1e-12);
    assert_eq!(out.total, out.base);
}

#[test]
fn base_loss_reports_the_failing_component() {
    let mut b = batch(3, 4, 5, 6);
    b.student.logits[(0, 0)] = f64::INFINITY;
    let err = base_loss(
        &b.student,
        &b.teacher,
        &b.anchors,
        &b.labels,
        &LossWeights::default(),
    )
    .unwrap_err();
    assert!(
        matches!(
            err,
            PandError::Numeric {
                component: "cls",
                ..
            }
        ),
        "{err}"
    );
}

#[test]
fn gradients_match_finite_differences() {
    for seed in 0..5 {
        let b = batch(seed, 8, 10, 6);
        let w = weights(3);
        let (_, grads) =
            base_loss_with_grad(&b.student, &b.teacher, &b.anchors, &b.labels, &w).unwrap();

        // Base loss w.r.t. logits and w.r.t. projected features, each holding the other fixed.
        let num_logits = numeric_grad(&b.student.logits, |z| {
            let s = StudentOutput {
                logits: z.clone(),
                ..b.student.clone()
            };
            base_loss(&s, &b.teacher, &b.anchors, &b.labels, &w)
                .unwrap()
                .base
        });
        assert!(
            rel_err(grads.logits.as_slice(), &num_logits) < 1e-4,
            "seed {seed} logits"
        );
        let num_proj = numeric_grad(&b.student.projected, |p| {
            let s = StudentOutput {
                projected: p.clone(),
                ..b.student.clone()
            };
            base_loss(&s, &b.teacher, &b.anchors, &b.labels, &w)
                .unwrap()
                .base
        });
        assert!(
            rel_err(grads.projected.as_slice(), &num_proj) < 1e-4,
            "seed {seed} projected"
        );

        // Components one at a time.
        let (_, g) = cross_entropy_with_grad(&b.student.logits, &b.labels).unwrap();
        let num = numeric_grad(&b.student.logits, |z| {
            cross_entropy_with_grad(z, &b.labels).unwrap().0
        });
        assert!(rel_err(g.as_slice(), &num) < 1e-4, "seed {seed} cls");
        let (_, g) = cosine_alignment_with_grad(&b.student.projected, &b.teacher.features).unwrap();
        let num = numeric_grad(&b.student.projected, |p| {
            cosine_alignment_with_grad(p, &b.teacher.features)
                .unwrap()
                .0
        });
        assert!(rel_err(g.as_slice(), &num) < 1e-4, "seed {seed} vis");
        let a = b.anchors.matrix();
        let (_, g) = text_alignment_with_grad(&b.student.projected, a, &b.labels, 2.0).unwrap();
        let num = numeric_grad(&b.student.projected, |p| {
            text_alignment_with_grad(p, a, &b.labels, 2.0).unwrap().0
        });
        assert!(rel_err(g.as_slice(), &num) < 1e-4, "seed {seed} txt");

        // Structural term; student logits at a larger scale so margins matter.
        let s_logits = b.student.logits.map(|v| 2.0 * v);
        let t_logits = b.teacher.logits.map(|v| 3.0 * v);
        let (_, g) = nsd_loss_with_grad(&t_logits, &s_logits, &b.labels, &w).unwrap();
        let num = numeric_grad(&s_logits, |z| {
            nsd_loss(&t_logits, z, &b.labels, &w).unwrap()
        });
        assert!(rel_err(g.as_slice(), &num) < 1e-4, "seed {seed} nsd");
    }
}

#[test]
fn nsd_gradient_respects_temperature() {
    let (t, y) = random_logits(9, 8, 10, 2.0);
    let (s, _) = random_logits(10, 8, 10, 2.0);
    let w = LossWeights {
        nsd_temperature: 0.7,
        ..weights(3)
    };
    let (_, g) = nsd_loss_with_grad(&t, &s, &y, &w).unwrap();
    let num = numeric_grad(&s, |z| nsd_loss(&t, z, &y, &w).unwrap());
    assert!(rel_err(g.as_slice(), &num) < 1e-4);
}

#[test]
fn mismatched_shapes_name_the_dimension() {
    let t = Matrix::<f64>::zeros(2, 4);
    let err = nsd_loss(&t, &Matrix::zeros(3, 4), &[0, 1], &weights(1)).unwrap_err();
    assert!(matches!(
        err,
        PandError::Shape {
            expected: 2,
            got: 3,
            ..
        }
    ));
}

fn logits_strategy(n: usize, c: usize) -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Vec<usize>)> {
    (
        proptest::collection::vec(-5.0f64..5.0, n * c),
        proptest::collection::vec(-5.0f64..5.0, n * c),
        proptest::collection::vec(0..c, n),
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn nsd_is_bounded((t, s, y) in logits_strategy(4, 6)) {
        let t = Matrix::from_vec(4, 6, t).unwrap();
        let s = Matrix::from_vec(4, 6, s).unwrap();
        let v = nsd_loss(&t, &s, &y, &weights(3)).unwrap();
        prop_assert!((0.0..=std::f64::consts::LN_2).contains(&v));
    }

    #[test]
    fn relation_rows_are_distributions((t, _s, y) in logits_strategy(4, 6), k in 1usize..6) {
        let t = Matrix::from_vec(4, 6, t).unwrap();
        let n = select_neighborhood(&t, &y, k).unwrap();
        let rho = neighborhood_distribution(&t, &y, &n).unwrap().rho;
        for (i, row) in rho.row_iter().enumerate() {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            prop_assert!(row.iter().all(|&p| p > 0.0 && p < 1.0 || k == 1 && p == 1.0));
            prop_assert!(!n.row(i).contains(&y[i]));
        }
    }

    #[test]
    fn per_sample_shifts_leave_nsd_unchanged(
        (t, s, y) in logits_strategy(4, 6),
        shifts in proptest::collection::vec(-10.0f64..10.0, 8),
    ) {
        let t = Matrix::from_vec(4, 6, t).unwrap();
        let s = Matrix::from_vec(4, 6, s).unwrap();
        let w = weights(3);
        let base = nsd_loss(&t, &s, &y, &w).unwrap();
        let mut t2 = t.clone();
        let mut s2 = s.clone();
        for i in 0..4 {
            t2.row_mut(i).iter_mut().for_each(|v| *v += shifts[i]);
            s2.row_mut(i).iter_mut().for_each(|v| *v += shifts[4 + i]);
        }
        prop_assert_eq!(select_neighborhood(&t, &y, 3).unwrap(), select_neighborhood(&t2, &y, 3).unwrap());
        prop_assert!((nsd_loss(&t2, &s, &y, &w).unwrap() - base).abs() <= 1e-6);
        prop_assert!((nsd_loss(&t, &s2, &y, &w).unwrap() - base).abs() <= 1e-6);
    }

    #[test]
    fn permuting_outside_the_neighborhood_is_invisible((t, s, y) in logits_strategy(3, 8), seed in 0u64..1000) {
        let t = Matrix::from_vec(3, 8, t).unwrap();
        let s = Matrix::from_vec(3, 8, s).unwrap();
        let w = weights(3);
        let n = select_neighborhood(&t, &y, 3).unwrap();
        let mut s2 = s.clone();
        let mut r = rng::derived(seed, "perm");
        for i in 0..3 {
            let outside: Vec<usize> = (0..8).filter(|j| *j != y[i] && !n.row(i).contains(j)).collect();
            let mut values: Vec<f64> = outside.iter().map(|&j| s[(i, j)]).collect();
            rng::shuffle(&mut r, &mut values);
            for (&j, v) in outside.iter().zip(values) {
                s2[(i, j)] = v;
            }
        }
        prop_assert_eq!(nsd_loss(&t, &s, &y, &w).unwrap(), nsd_loss(&t, &s2, &y, &w).unwrap());
    }

    #[test]
    fn js_is_symmetric_and_zero_on_identity(
        a in proptest::collection::vec(0.0f64..1.0, 5),
        b in proptest::collection::vec(0.0f64..1.0, 5),
    ) {
        let norm = |v: &[f64]| {
            let s: f64 = v.iter().sum::<f64>() + 1e-9;
            v.iter().map(|x| (x + 1e-9 / 5.0) / s).collect::<Vec<_>>()
        };
        let (p, q) = (norm(&a), norm(&b));
        let pq = js_divergence(&p, &q).unwrap();
        prop_assert!((pq - js_divergence(&q, &p).unwrap()).abs() <= 1e-9);
        prop_assert!((pq - js_oracle(&p, &q)).abs() <= 1e-9);
        prop_assert!(js_divergence(&p, &p).unwrap().abs() <= 1e-12);
    }
}
