//! Estimator identities checked against full enumeration and finite
//! differences.

use ndo_ness::estimator::{estimate_cost, estimate_gradient, exact_gradient, local_cost, Objective};
use ndo_ness::exact::exact_cost;
use ndo_ness::model::{build_lindblad_map, ChainSpec, ConfigurationPair, DriveSpec, LindbladMap};
use ndo_ness::ndo::{init_params, NdoParameters};
use ndo_ness::sampler::SampleBatch;

fn model_b(n: usize) -> LindbladMap {
    build_lindblad_map(&ChainSpec::new(n, 1.0, 1.0).unwrap(), &DriveSpec::model_b(n, 0.2).unwrap()).unwrap()
}

fn model_a(n: usize) -> LindbladMap {
    build_lindblad_map(&ChainSpec::new(n, 0.105, 1.0).unwrap(), &DriveSpec::model_a(n, 0.2, 0.05).unwrap()).unwrap()
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-300)
}

fn central_difference(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    (0..x.len())
        .map(|k| {
            let mut p = x.to_vec();
            let mut m = x.to_vec();
            p[k] += h;
            m[k] -= h;
            (f(&p) - f(&m)) / (2.0 * h)
        })
        .collect()
}

fn assert_gradient_matches(grad: &[f64], fd: &[f64], tol: f64) {
    let scale = fd.iter().map(|v| v.abs()).fold(0.0, f64::max);
    for (k, (g, f)) in grad.iter().zip(fd).enumerate() {
        assert!((g - f).abs() <= tol * scale, "component {k}: analytic {g:e}, finite difference {f:e}");
    }
}

#[test]
fn exact_gradient_matches_finite_differences_of_exact_cost() {
    let map = model_b(3);
    let p = init_params(3, 1, 1, 17, 0.3).unwrap();
    let g = exact_gradient(&p, &map).unwrap();
    let cost = |x: &[f64]| {
        let q = p.with_values(x.to_vec());
        exact_cost(&map, |y| q.log_rho(y).exp()).unwrap()
    };
    let fd = central_difference(cost, p.as_slice(), 1e-5);
    assert_gradient_matches(&g.grad, &fd, 1e-5);
}

#[test]
fn sector_objective_gradient_matches_finite_differences() {
    for (map, alpha) in [(model_a(4), 1), (model_b(4), 2)] {
        let p = init_params(4, alpha, alpha, 5, 0.2).unwrap();
        let obj = Objective::exact(&p, &map);
        let e = obj.evaluate(p.as_slice()).unwrap();
        let fd = central_difference(|x| obj.cost(x).unwrap(), p.as_slice(), 1e-5);
        assert_gradient_matches(&e.grad, &fd, 1e-5);
    }
}

#[test]
fn frozen_batch_gradient_matches_finite_differences_away_from_sampling_point() {
    let map = model_b(4);
    let p = init_params(4, 1, 1, 9, 0.3).unwrap();
    let batch =
        ndo_ness::sampler::sample_pairs(&p, &ndo_ness::sampler::SamplerConfig { n_samples: 400, seed: 3, ..Default::default() }).unwrap();
    let obj = Objective::from_batch(&p, &map, &batch).unwrap();
    let theta: Vec<f64> = p.as_slice().iter().enumerate().map(|(i, v)| v + 0.01 * ((i % 7) as f64 - 3.0)).collect();
    let e = obj.evaluate(&theta).unwrap();
    let fd = central_difference(|x| obj.cost(x).unwrap(), &theta, 1e-5);
    assert_gradient_matches(&e.grad, &fd, 1e-5);
}

#[test]
fn weighted_local_costs_sum_to_exact_cost() {
    let map = model_b(4);
    let p = init_params(4, 1, 1, 23, 0.4).unwrap();
    let pairs: Vec<ConfigurationPair> = ConfigurationPair::all(4).collect();
    let norm: f64 = pairs.iter().map(|x| p.log_rho(x).exp().norm_sqr()).sum();
    let sum: f64 = pairs.iter().map(|x| p.log_rho(x).exp().norm_sqr() / norm * local_cost(&p, &map, x).unwrap()).sum();
    let reference = exact_cost(&map, |x| p.log_rho(x).exp()).unwrap();
    assert!(rel(sum, reference) < 1e-12, "{sum} vs {reference}");
}

fn sector_reference(p: &NdoParameters, map: &LindbladMap) -> f64 {
    let pairs: Vec<ConfigurationPair> = ConfigurationPair::sector_zero(p.n_sites()).collect();
    let num: f64 =
        pairs.iter().map(|x| map.row(x).iter().map(|(y, v)| v * p.log_rho(y).exp()).sum::<num_complex::Complex64>().norm_sqr()).sum();
    let den: f64 = pairs.iter().map(|x| p.log_rho(x).exp().norm_sqr()).sum();
    num / den
}

#[test]
fn enumeration_batches_are_reweighting_invariant() {
    let map = model_b(4);
    let p = init_params(4, 1, 1, 31, 0.4).unwrap();
    let reference = sector_reference(&p, &map);
    let reference_grad = Objective::exact(&p, &map).evaluate(p.as_slice()).unwrap().grad;
    for beta in [0.15, 0.5, 1.0] {
        let batch = SampleBatch::enumerate(&p, beta).unwrap();
        let c = estimate_cost(&p, &map, &batch).unwrap();
        assert!(rel(c, reference) < 1e-12, "beta {beta}: {c} vs {reference}");
        let g = estimate_gradient(&p, &map, &batch).unwrap();
        let scale = reference_grad.iter().map(|v| v.abs()).fold(0.0, f64::max);
        for (a, b) in g.grad.iter().zip(&reference_grad) {
            assert!((a - b).abs() < 1e-12 * scale);
        }
    }
}
