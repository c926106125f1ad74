use srlab::linalg::Mat;
use srlab::net::{
    backward_linear, grad_approx, grad_with_weights, loss_and_true_grad, prepare_weights, Activation,
    Dataset, LayerQuantConfig, LinearCache, Loss, MlpModel, ThresholdPlan,
};
use srlab::quant::{QuantGrid, Quantizer, ThresholdStream};
use srlab::trainer::{TrainMode, WeightRounding};
use srlab::statlab::RunningStat;

fn fixture(loss: Loss) -> (MlpModel, Dataset) {
    let model = MlpModel::init(&[4, 5, 3], Activation::Relu, loss, 7).unwrap();
    let x = Mat::from_vec(6, 4, (0..24).map(|i| (i as f64 * 0.71 + 0.3).sin()).collect()).unwrap();
    let y = match loss {
        Loss::Mse => Mat::from_vec(6, 3, (0..18).map(|i| (i as f64 * 1.3).cos()).collect()).unwrap(),
        Loss::SoftmaxCrossEntropy => {
            let mut y = Mat::zeros(6, 3);
            for r in 0..6 {
                y[(r, r % 3)] = 1.0;
            }
            y
        }
    };
    (model, Dataset::new(x, y).unwrap())
}

fn finite_difference_check(loss: Loss) {
    let (model, data) = fixture(loss);
    let (_, grads) = loss_and_true_grad(&model, &data).unwrap();
    let h = 1e-4;
    // Ten fixed probes spread over both layers.
    for p in 0..10usize {
        let layer = p % 2;
        let (rows, cols) = model.layers()[layer].shape();
        let (r, c) = ((p * 7 + 1) % rows, (p * 3 + 2) % cols);
        let shifted = |delta: f64| {
            let mut layers = model.layers().to_vec();
            layers[layer][(r, c)] += delta;
            model.with_layers(layers).unwrap().loss_on(&data).unwrap()
        };
        let fd = (shifted(h) - shifted(-h)) / (2.0 * h);
        let g = grads[layer][(r, c)];
        let rel = (g - fd).abs() / fd.abs().max(1e-3);
        assert!(rel <= 1e-5, "layer {layer} ({r},{c}): analytic {g}, fd {fd}, rel {rel}");
    }
}

#[test]
fn identity_gradient_matches_finite_differences_mse() {
    finite_difference_check(Loss::Mse);
}

#[test]
fn identity_gradient_matches_finite_differences_cross_entropy() {
    finite_difference_check(Loss::SoftmaxCrossEntropy);
}

fn grid() -> QuantGrid {
    QuantGrid::uniform(0.25).unwrap()
}

#[test]
fn weight_only_qat_equals_identity_pipeline_on_quantized_weights() {
    let (model, data) = fixture(Loss::Mse);
    let cfgs = vec![LayerQuantConfig::weight_only(Quantizer::sr(grid())); 2];
    let ident = vec![LayerQuantConfig::IDENTITY; 2];
    for step in 0..5 {
        let plan = ThresholdPlan::new(99, step);
        let prepared = prepare_weights(&model, &cfgs, &plan).unwrap();
        assert_eq!(prepared.fwd, prepared.bwd);
        let quantized = model.with_layers(prepared.fwd.clone()).unwrap();
        for i in 0..data.len() {
            let (x, y) = data.sample(i);
            let a = grad_approx(&model, x, y, &cfgs, &plan, i as u64).unwrap();
            let b = grad_approx(&quantized, x, y, &ident, &plan, i as u64).unwrap();
            assert_eq!(a.loss.to_bits(), b.loss.to_bits());
            for (ga, gb) in a.grads.iter().zip(&b.grads) {
                let bits = |m: &Mat| m.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
                assert_eq!(bits(ga), bits(gb));
            }
        }
    }
}

/// Mean over fresh activation/gradient thresholds with the weights fixed.
fn threshold_mean(cfgs: &[LayerQuantConfig], trials: u64) -> (Vec<Vec<RunningStat>>, Vec<Mat>) {
    let (model, data) = fixture(Loss::Mse);
    let plan = ThresholdPlan::new(5, 0);
    let prepared = prepare_weights(&model, cfgs, &plan).unwrap();
    let quantized = model.with_layers(prepared.fwd.clone()).unwrap();
    let ident = vec![LayerQuantConfig::IDENTITY; 2];
    // The sample with the most live gradient entries; some have every ReLU off.
    let (x, y, reference) = (0..data.len())
        .map(|i| {
            let (x, y) = data.sample(i);
            (x, y, grad_approx(&quantized, x, y, &ident, &plan, 0).unwrap().grads)
        })
        .max_by_key(|(_, _, g)| g.iter().flat_map(|m| m.as_slice()).filter(|v| **v != 0.0).count())
        .unwrap();
    let mut stats: Vec<Vec<RunningStat>> =
        reference.iter().map(|m| vec![RunningStat::default(); m.len()]).collect();
    for t in 0..trials {
        let g = grad_with_weights(&model, &prepared, x, y, cfgs, &plan, t).unwrap();
        for (st, m) in stats.iter_mut().zip(&g.grads) {
            for (s, v) in st.iter_mut().zip(m.as_slice()) {
                s.push(*v);
            }
        }
    }
    (stats, reference)
}

#[test]
fn sr_mixed_precision_gradient_is_unbiased() {
    let cfg = TrainMode::SrMixedQat(WeightRounding::Stochastic).layer_config(grid(), grid());
    let (stats, reference) = threshold_mean(&[cfg; 2], 40_000);
    let mut noisy = 0;
    for (st, m) in stats.iter().zip(&reference) {
        for (s, &want) in st.iter().zip(m.as_slice()) {
            let e = s.estimate();
            assert!(e.within(want, 4.0), "mean {} ± {} vs {want}", e.mean, e.stderr);
            noisy += usize::from(e.stderr > 0.0);
        }
    }
    assert!(noisy > 10, "fixture should exercise rounding noise");
}

#[test]
fn rtn_backward_gradient_is_biased() {
    let cfg = TrainMode::RtnAll.layer_config(grid(), grid());
    let (stats, reference) = threshold_mean(&[cfg; 2], 2);
    let mut worst: f64 = 0.0;
    for (st, m) in stats.iter().zip(&reference) {
        for (s, &want) in st.iter().zip(m.as_slice()) {
            assert_eq!(s.stderr(), 0.0);
            worst = worst.max((s.mean() - want).abs());
        }
    }
    assert!(worst > 1e-2, "RTN should leave a deterministic bias, got {worst}");
}

#[test]
fn backward_linear_sr_mean_matches_exact_product() {
    let cache = LinearCache {
        a_in: Mat::from_rows(&[vec![0.7]]).unwrap(),
        w: Mat::from_rows(&[vec![0.4]]).unwrap(),
    };
    let g = Mat::from_rows(&[vec![1.0]]).unwrap();
    let q = Quantizer::sr(QuantGrid::uniform(1.0).unwrap());
    let cfg = LayerQuantConfig {
        bwd_act: q,
        bwd_grad: q,
        ..LayerQuantConfig::IDENTITY
    };
    let mut stream = ThresholdStream::seeded(3);
    let mut stat = RunningStat::default();
    for _ in 0..100_000 {
        let (_, gw) = backward_linear(&cache, &g, &cfg, &mut stream).unwrap();
        stat.push(gw[(0, 0)]);
    }
    assert!(stat.estimate().within(0.7, 4.0), "{:?}", stat.estimate());
}

