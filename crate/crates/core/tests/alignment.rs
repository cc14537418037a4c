mod common;

use caw::{
    alignment_margin_stability, check_alignment, check_product_alignment, AffineChart, AffineMap, AlignError,
    AlignMode, AlignMap, Axis, MapError, Rectangle, Window,
};
use common::{brute_force, eval, random_instance, samples_for, Instance};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn interval(label: Axis, exit: bool) -> Window {
    if exit {
        Window::unit(1, 0, vec![label]).unwrap()
    } else {
        Window::unit(0, 1, vec![label]).unwrap()
    }
}

fn centered(labels: [Axis; 2], exit_edge: f64, entry_edge: f64) -> Window {
    Window::new(
        Rectangle::centered(&[0.0], &[exit_edge]).unwrap(),
        Rectangle::centered(&[0.0], &[entry_edge]).unwrap(),
        AffineChart::identity(2),
        labels.to_vec(),
    )
    .unwrap()
}

fn relabel(w: &Window, labels: Vec<Axis>) -> Window {
    Window::new(w.exit().clone(), w.entry().clone(), w.chart().clone(), labels).unwrap()
}

/// `x ↦ f(x) + amp·sin(freq·x)` componentwise, where `f` is 3x−1.
struct SinePerturbed {
    amp: f64,
    freq: f64,
}

impl AlignMap for SinePerturbed {
    fn dim(&self) -> usize {
        1
    }
    fn eval(&self, x: &[f64]) -> Result<Vec<f64>, MapError> {
        Ok(vec![3.0 * x[0] - 1.0 + self.amp * (self.freq * x[0]).sin()])
    }
    fn jacobian(&self, x: &[f64]) -> Result<DMatrix<f64>, MapError> {
        Ok(DMatrix::from_element(1, 1, 3.0 + self.amp * self.freq * (self.freq * x[0]).cos()))
    }
    fn derivative_bound(&self, _lo: &[f64], _hi: &[f64]) -> Option<DMatrix<f64>> {
        Some(DMatrix::from_element(1, 1, 3.0 + self.amp.abs() * self.freq.abs()))
    }
    fn image_bound(&self, _lo: &[f64], _hi: &[f64]) -> Option<(Vec<f64>, Vec<f64>)> {
        None
    }
}

#[test]
fn expanding_interval_is_aligned_with_margin_one() {
    let w = interval(Axis::U, true);
    let map = AffineMap::parse("affine:3;-1").unwrap();
    let r = check_alignment(&w, &w, &map, 16).unwrap();
    assert!(r.aligned);
    assert_eq!(r.mode, AlignMode::Linear);
    assert!((r.margin - 1.0).abs() < 1e-12, "margin {}", r.margin);
    assert!(r.witness.is_none());
}

#[test]
fn contracting_interval_is_aligned_in_degree_mode() {
    let w = interval(Axis::S, false);
    let map = AffineMap::parse("affine:0.3333333333333333;0.3333333333333333").unwrap();
    let r = check_alignment(&w, &w, &map, 16).unwrap();
    assert!(r.aligned);
    assert_eq!(r.mode, AlignMode::Degree);
    assert!((r.margin - 1.0 / 3.0).abs() < 1e-9, "margin {}", r.margin);
}

#[test]
fn half_contraction_of_an_exit_interval_fails_on_the_exit_face() {
    let w = interval(Axis::U, true);
    let map = AffineMap::parse("affine:0.5;0").unwrap();
    let r = check_alignment(&w, &w, &map, 16).unwrap();
    assert!(!r.aligned);
    let wit = r.witness.expect("witness");
    assert!(wit.check == "exit-face" || wit.check == "degree", "{}", wit.check);
    assert!(wit.clearance <= 0.0);
}

#[test]
fn map_without_derivative_bound_is_rejected() {
    let w = interval(Axis::U, true);
    let map = caw::maps::WithoutBound(AffineMap::parse("affine:3;-1").unwrap());
    assert_eq!(check_alignment(&w, &w, &map, 8).unwrap_err(), AlignError::LipschitzUnavailable);
}

#[test]
fn exit_dimension_mismatch_is_rejected() {
    let a = Window::unit(1, 1, vec![Axis::U, Axis::S]).unwrap();
    let b = Window::unit(2, 0, vec![Axis::U, Axis::S]).unwrap();
    let map = AffineMap::new(DMatrix::identity(2, 2), DVector::zeros(2));
    assert!(matches!(check_alignment(&a, &b, &map, 4), Err(AlignError::DimensionMismatch(_))));
    assert_eq!(check_alignment(&a, &a, &map, 0).unwrap_err(), AlignError::NoSamples);
}

#[test]
fn stability_threshold_is_strict() {
    let w = interval(Axis::U, true);
    let r = check_alignment(&w, &w, &AffineMap::parse("affine:3;-1").unwrap(), 16).unwrap();
    assert!(alignment_margin_stability(Some(&r), 0.5).unwrap());
    assert!(!alignment_margin_stability(Some(&r), 1.0).unwrap());
    assert_eq!(alignment_margin_stability(None, 0.1).unwrap_err(), AlignError::NoPriorReport);
}

#[test]
fn sine_perturbed_expansion_rechecks_aligned() {
    let w = interval(Axis::U, true);
    let map = SinePerturbed { amp: 0.3, freq: 7.0 };
    let r = check_alignment(&w, &w, &map, 64).unwrap();
    assert!(r.aligned);
    // images of the faces are −1 and 2 + 0.3 sin 7 ≈ 2.197
    assert!(r.margin >= 0.7, "margin {}", r.margin);
    let f = eval(&map);
    assert_eq!(brute_force(&w, &w, &f, 200), Ok(()));
}

#[test]
fn hyperbolic_times_center_block_is_aligned() {
    let w1a = centered([Axis::U, Axis::S], 2.0, 2.0);
    let w2a = w1a.clone();
    let w1b = centered([Axis::Q, Axis::P], 2.0, 1.0);
    let w2b = centered([Axis::Q, Axis::P], 1.0, 2.0);
    // ambient order (u, s, q, p)
    let map = AffineMap::new(DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 0.5, 1.0, 1.0])), DVector::zeros(4));
    let r = check_product_alignment(&w1a, &w1b, &w2a, &w2b, &map, 12).unwrap();
    assert!(r.aligned, "{:?}", r.witness);
    assert!(r.margin > 0.0);

    let weak = AffineMap::new(DMatrix::from_diagonal(&DVector::from_vec(vec![1.01, 0.5, 1.0, 1.0])), DVector::zeros(4));
    let w2a_wide = centered([Axis::U, Axis::S], 2.2, 2.0);
    let r = check_product_alignment(&w1a, &w1b, &w2a_wide, &w2b, &weak, 12).unwrap();
    assert!(!r.aligned);
    assert_eq!(r.witness.expect("witness").block, 0);
    // independent check on block a alone: the u-face images ±1.01 stay inside ±1.1
    let block_a = |x: &[f64]| vec![1.01 * x[0], 0.5 * x[1]];
    assert!(brute_force(&w1a, &w2a_wide, &block_a, 40).is_err());
}

#[test]
fn report_serializes_with_the_four_fields() {
    let w = interval(Axis::U, true);
    let r = check_alignment(&w, &w, &AffineMap::parse("affine:3;-1").unwrap(), 8).unwrap();
    let v: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
    for key in ["aligned", "mode", "margin", "witness"] {
        assert!(v.get(key).is_some(), "{key}");
    }
    assert_eq!(v["mode"], "linear");
}

#[test]
fn engine_agrees_with_dense_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut aligned = 0;
    for i in 0..40 {
        let inst = random_instance(&mut rng);
        let s = samples_for(inst.w1.dim());
        let r = check_alignment(&inst.w1, &inst.w2, &inst.map, s).unwrap();
        let oracle = brute_force(&inst.w1, &inst.w2, &eval(&inst.map), 10 * s);
        assert_eq!(r.aligned, oracle.is_ok(), "instance {i} ({:?}): oracle {oracle:?}", inst.kind);
        assert_eq!(r.aligned, inst.kind.aligned(), "instance {i}");
        if r.aligned {
            aligned += 1;
            assert!(r.margin > 0.0);
        }
    }
    assert!(aligned >= 10);
}

/// Same map and chart, target exit edges shrunk and entry edges grown about
/// their centres.
fn loosen<R: Rng>(rng: &mut R, w: &Window) -> Window {
    let scale = |r: &Rectangle, lo: f64, hi: f64, rng: &mut R| {
        let edge: Vec<f64> = r.edge().iter().map(|e| e * rng.gen_range(lo..hi)).collect();
        Rectangle::centered(&r.center(), &edge).unwrap()
    };
    let exit = scale(w.exit(), 0.6, 1.0, rng);
    let entry = scale(w.entry(), 1.0, 1.6, rng);
    Window::new(exit, entry, w.chart().clone(), w.labels().to_vec()).unwrap()
}

#[test]
fn loosening_the_target_keeps_alignment() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut checked = 0;
    while checked < 25 {
        let Instance { w1, w2, map, kind } = random_instance(&mut rng);
        if !kind.aligned() {
            continue;
        }
        let s = samples_for(w1.dim());
        assert!(check_alignment(&w1, &w2, &map, s).unwrap().aligned);
        for _ in 0..3 {
            let looser = loosen(&mut rng, &w2);
            let r = check_alignment(&w1, &looser, &map, s).unwrap();
            assert!(r.aligned, "{:?}", r.witness);
        }
        checked += 1;
    }
}

#[test]
fn shrinking_the_target_entry_block_can_break_alignment() {
    let w = Window::unit(1, 1, vec![Axis::U, Axis::S]).unwrap();
    let map = AffineMap::parse("affine:3,0,0,0.5;-1,0.25").unwrap();
    assert!(check_alignment(&w, &w, &map, 16).unwrap().aligned);
    let narrow = Window::new(
        Rectangle::new(vec![0.0], vec![1.0]).unwrap(),
        Rectangle::new(vec![0.4], vec![0.2]).unwrap(),
        AffineChart::identity(2),
        vec![Axis::U, Axis::S],
    )
    .unwrap();
    let r = check_alignment(&w, &narrow, &map, 16).unwrap();
    assert!(!r.aligned);
    assert_eq!(r.witness.unwrap().check, "entry-avoidance");
}

#[test]
fn product_check_matches_check_on_product_windows() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut seen = [0usize; 2];
    while seen.iter().sum::<usize>() < 12 {
        let a = random_instance(&mut rng);
        let b = random_instance(&mut rng);
        if (a.w1.exit_dim(), a.w1.entry_dim()) != (1, 1) || (b.w1.exit_dim(), b.w1.entry_dim()) != (1, 1) {
            continue;
        }
        let (w1b, w2b) = (relabel(&b.w1, vec![Axis::Q, Axis::P]), relabel(&b.w2, vec![Axis::Q, Axis::P]));
        let mut a4 = DMatrix::zeros(4, 4);
        a4.view_mut((0, 0), (2, 2)).copy_from(&a.map.a);
        a4.view_mut((2, 2), (2, 2)).copy_from(&b.map.a);
        let mut b4 = a.map.b.iter().copied().collect::<Vec<_>>();
        b4.extend(b.map.b.iter());
        let map = AffineMap::new(a4, DVector::from_vec(b4));
        let blockwise = check_product_alignment(&a.w1, &w1b, &a.w2, &w2b, &map, 10).unwrap();
        let whole = check_alignment(&a.w1.product(&w1b).unwrap(), &a.w2.product(&w2b).unwrap(), &map, 10).unwrap();
        assert_eq!(blockwise.aligned, whole.aligned);
        assert_eq!(blockwise.aligned, a.kind.aligned() && b.kind.aligned());
        seen[usize::from(blockwise.aligned)] += 1;
    }
    assert!(seen[0] > 0 && seen[1] > 0, "{seen:?}");
}
