mod common;

use common::criteria::wilcoxon_max_deviation;
use common::oracles::{enumerate_signed_rank_p, naive_ranks};
use modcomp::evaluator::{average_ranks, wilcoxon_from_diffs, wilcoxon_signed_rank};
use modcomp::metareg::spearman;

#[test]
fn exact_p_matches_enumeration() {
    assert!(wilcoxon_max_deviation() < 1e-12);
}

#[test]
fn hand_example() {
    let r = wilcoxon_from_diffs(&[1.5, -0.5, 2.0, 3.0]).unwrap();
    assert_eq!(r.w_plus, 9.0);
    assert_eq!(r.w_minus, 1.0);
    assert_eq!(r.p_two_sided, 0.25);
    assert!(r.exact);
}

#[test]
fn paired_form_uses_differences() {
    let a = [3.0, 1.0, 4.0, 1.5, 9.0, 2.6];
    let b = [2.0, 1.5, 2.0, 1.5, 6.0, 2.0];
    let diffs: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x - y).collect();
    let r = wilcoxon_signed_rank(&a, &b).unwrap();
    assert_eq!(r.n, 5);
    assert!((r.p_two_sided - enumerate_signed_rank_p(&diffs)).abs() < 1e-12);
}

#[test]
fn ranks_match_counting() {
    let v = [3.0, 1.0, 3.0, 7.0, 1.0, 1.0, -2.0];
    assert_eq!(average_ranks(&v), naive_ranks(&v));
}

#[test]
fn spearman_of_reversed_order_is_minus_one() {
    let a: Vec<f64> = (0..12).map(|i| (i as f64).powi(3)).collect();
    let b: Vec<f64> = (0..12).map(|i| -(i as f64)).collect();
    assert!((spearman(&a, &b).unwrap() + 1.0).abs() < 1e-12);
}
