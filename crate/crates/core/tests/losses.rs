use approx::assert_relative_eq;
use cwcl::losses::*;
use ndarray::{Array2, ArrayView2};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn cos(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

fn rows(z: ArrayView2<f64>) -> Vec<Vec<f64>> {
    z.rows().into_iter().map(|r| r.to_vec()).collect()
}

/// Literal enumeration: anchor i, positive (i+P) mod 2P, denominator k ≠ i.
fn oracle_paired(z: ArrayView2<f64>, tau: f64, both: bool) -> f64 {
    let r = rows(z);
    let n = r.len();
    let p = n / 2;
    let anchors = if both { n } else { p };
    let mut total = 0.0;
    for i in 0..anchors {
        let pos = (i + p) % n;
        let num = (cos(&r[i], &r[pos]) / tau).exp();
        let den: f64 = (0..n).filter(|&k| k != i).map(|k| (cos(&r[i], &r[k]) / tau).exp()).sum();
        total += -(num / den).ln();
    }
    if both {
        total / 2.0
    } else {
        total
    }
}

fn oracle_supcon(z: ArrayView2<f64>, row_labels: &[usize], tau: f64) -> f64 {
    let r = rows(z);
    let n = r.len();
    let mut total = 0.0;
    for i in 0..n {
        let den: f64 = (0..n).filter(|&k| k != i).map(|k| (cos(&r[i], &r[k]) / tau).exp()).sum();
        let pos: Vec<usize> = (0..n).filter(|&k| k != i && row_labels[k] == row_labels[i]).collect();
        let s: f64 = pos.iter().map(|&k| -((cos(&r[i], &r[k]) / tau).exp() / den).ln()).sum();
        total += s / pos.len() as f64;
    }
    total / n as f64
}

fn oracle_ce(logits: ArrayView2<f64>, labels: &[usize]) -> f64 {
    let mut total = 0.0;
    for (row, &y) in rows(logits).iter().zip(labels) {
        let den: f64 = row.iter().map(|v| v.exp()).sum();
        total += -(row[y].exp() / den).ln();
    }
    total / labels.len() as f64
}

fn random(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-1.0..1.0))
}

/// Central differences against an analytic gradient.
fn check_grad(z: &Array2<f64>, f: impl Fn(ArrayView2<f64>) -> f64, grad: &Array2<f64>) {
    let h = 1e-6;
    for idx in ndarray::indices(z.dim()) {
        let mut plus = z.clone();
        let mut minus = z.clone();
        plus[idx] += h;
        minus[idx] -= h;
        let numeric = (f(plus.view()) - f(minus.view())) / (2.0 * h);
        let analytic = grad[idx];
        let err = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-4);
        assert!(err < 1e-5, "at {idx:?}: numeric {numeric} analytic {analytic}");
    }
}

#[test]
fn paired_matches_enumeration() {
    for (seed, p, d) in [(1, 1, 3), (2, 3, 5), (3, 8, 4), (4, 16, 49)] {
        let z = random(2 * p, d, seed);
        for tau in [0.1, 0.5, 1.0] {
            let oracle = oracle_paired(z.view(), tau, false);
            assert_relative_eq!(iwcl_loss(z.view(), tau).unwrap(), oracle, max_relative = 1e-12);
            assert_relative_eq!(cwcl_loss(z.view(), tau).unwrap(), oracle, max_relative = 1e-12);
            let both = oracle_paired(z.view(), tau, true);
            assert_relative_eq!(
                paired_contrast(z.view(), tau, Anchors::Both).unwrap(),
                both,
                max_relative = 1e-12
            );
        }
    }
}

#[test]
fn cwcl_batch_is_mean_of_samples() {
    let banks: Vec<_> = (0..5).map(|s| random(8, 9, 100 + s)).collect();
    let views: Vec<_> = banks.iter().map(|b| b.view()).collect();
    let mean = banks.iter().map(|b| oracle_paired(b.view(), 0.5, false)).sum::<f64>() / 5.0;
    assert_relative_eq!(cwcl_loss_batch(&views, 0.5, Anchors::First).unwrap(), mean, max_relative = 1e-12);
    assert!(cwcl_loss_batch(&[], 0.5, Anchors::First).is_err());
}

#[test]
fn supcon_matches_enumeration() {
    let z = random(12, 6, 7);
    let labels = [0, 1, 0, 2, 1, 2];
    let row_labels: Vec<usize> = labels.iter().chain(&labels).copied().collect();
    for tau in [0.1, 0.5] {
        let oracle = oracle_supcon(z.view(), &row_labels, tau);
        assert_relative_eq!(supcon_loss(z.view(), &labels, tau).unwrap(), oracle, max_relative = 1e-12);
    }
}

#[test]
fn supcon_identical_vectors_closed_form() {
    // Every log-probability equals −log(2B − 1) whatever the labels.
    for labels in [vec![0, 0, 0, 0], vec![0, 1, 0, 1], vec![3, 1, 2, 0]] {
        let z = Array2::<f64>::ones((8, 3));
        let value = supcon_loss(z.view(), &labels, 0.1).unwrap();
        assert_relative_eq!(value, 7f64.ln(), max_relative = 1e-12);
    }
}

#[test]
fn supcon_one_sample_per_class_reduces_to_paired() {
    let b = 6;
    let z = random(2 * b, 5, 11);
    let labels: Vec<usize> = (0..b).collect();
    let row_labels: Vec<usize> = labels.iter().chain(&labels).copied().collect();
    let sup = supcon_terms(z.view(), &row_labels, 0.2).unwrap();
    let paired = paired_terms(z.view(), 0.2, Anchors::Both).unwrap();
    for (s, p) in sup.iter().zip(&paired) {
        assert_relative_eq!(s, p, max_relative = 1e-12);
    }
    let sym = paired_contrast(z.view(), 0.2, Anchors::Both).unwrap();
    assert_relative_eq!(supcon_loss(z.view(), &labels, 0.2).unwrap(), sym / b as f64, max_relative = 1e-12);
}

#[test]
fn supcon_rejects_anchor_without_positive() {
    let z = random(3, 4, 5);
    assert!(supcon_loss_rows(z.view(), &[0, 1, 1], 0.1).is_err());
    assert!(supcon_loss(z.view(), &[0], 0.1).is_err());
}

#[test]
fn ce_matches_enumeration() {
    let logits = random(7, 10, 21) * 4.0;
    let labels = [0, 9, 3, 3, 5, 1, 7];
    assert_relative_eq!(ce_loss(logits.view(), &labels).unwrap(), oracle_ce(logits.view(), &labels), max_relative = 1e-12);
}

#[test]
fn gradients_match_finite_differences() {
    let z = random(10, 6, 31);
    let g = paired_contrast_grad(z.view(), 0.5, Anchors::First).unwrap();
    check_grad(&z, |v| iwcl_loss(v, 0.5).unwrap(), &g.grad);
    let g = cwcl_loss_grad(z.view(), 0.3, Anchors::Both).unwrap();
    check_grad(&z, |v| paired_contrast(v, 0.3, Anchors::Both).unwrap(), &g.grad);

    let labels = [1, 0, 1, 2, 2];
    let g = supcon_loss_grad(z.view(), &labels, 0.1).unwrap();
    check_grad(&z, |v| supcon_loss(v, &labels, 0.1).unwrap(), &g.grad);

    let logits = random(4, 5, 41) * 3.0;
    let ys = [4, 0, 2, 2];
    let g = ce_loss_grad(logits.view(), &ys).unwrap();
    check_grad(&logits, |v| ce_loss(v, &ys).unwrap(), &g.grad);

    let a = [0.3, -1.2, 2.0];
    let b = [1.5, 0.4, -0.7];
    let (_, ga, gb) = cosine_sim_grad(&a, &b).unwrap();
    let pair = Array2::from_shape_vec((2, 3), a.iter().chain(&b).copied().collect()).unwrap();
    let grad = Array2::from_shape_vec((2, 3), ga.into_iter().chain(gb).collect()).unwrap();
    check_grad(&pair, |v| cosine_sim(v.row(0).as_slice().unwrap(), v.row(1).as_slice().unwrap()).unwrap(), &grad);
}

fn nonzero_rows(max_p: usize) -> impl Strategy<Value = Array2<f64>> {
    (1..=max_p, 1usize..6).prop_flat_map(|(p, d)| {
        prop::collection::vec(prop::collection::vec(-3.0f64..3.0, d), 2 * p).prop_filter_map(
            "zero row",
            move |rs| {
                if rs.iter().any(|r| r.iter().map(|x| x * x).sum::<f64>() < 1e-6) {
                    return None;
                }
                Some(Array2::from_shape_vec((2 * p, d), rs.concat()).unwrap())
            },
        )
    })
}

proptest! {
    #[test]
    fn paired_is_nonnegative_and_scale_invariant(z in nonzero_rows(6), scale in 0.01f64..100.0, tau in 0.05f64..2.0) {
        let v = iwcl_loss(z.view(), tau).unwrap();
        prop_assert!(v >= -1e-12 && v.is_finite());
        let scaled = &z * scale;
        let w = iwcl_loss(scaled.view(), tau).unwrap();
        prop_assert!((v - w).abs() <= 1e-9 * v.abs().max(1.0));
    }

    #[test]
    fn paired_permutation_invariant(z in nonzero_rows(6), seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        let p = z.nrows() / 2;
        let mut order: Vec<usize> = (0..p).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let mut permuted = z.clone();
        for (dst, &src) in order.iter().enumerate() {
            permuted.row_mut(dst).assign(&z.row(src));
            permuted.row_mut(dst + p).assign(&z.row(src + p));
        }
        let a = iwcl_loss(z.view(), 0.5).unwrap();
        let b = iwcl_loss(permuted.view(), 0.5).unwrap();
        prop_assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0));
    }

    #[test]
    fn stage_total_recombines(ce in 0.0f64..20.0, parts in prop::collection::vec(0.0f64..50.0, 1..6), lambda in 0.0f64..=1.0) {
        let s1 = stage1_total(ce, &parts, lambda).unwrap();
        let s2 = stage2_total(ce, &parts, lambda).unwrap();
        let expected = (1.0 - lambda) * ce + lambda * parts.iter().sum::<f64>() / parts.len() as f64;
        prop_assert!((s1.total - expected).abs() <= 1e-9 * expected.abs().max(1.0));
        prop_assert_eq!(s1.total, s2.total);
        prop_assert_eq!(s1.recombine(), s1.total);
    }
}
