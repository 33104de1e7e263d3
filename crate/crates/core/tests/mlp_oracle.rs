//! Training arithmetic against independent straight-line references.

use hetfed_core::mlp::{self, default_dims, init_model, layer_dims, Matrix, MlpModel};
use hetfed_core::numfmt::{FloatFormat, ScalarFormat};
use hetfed_core::synthdata::{generate, DataSpec};

/// Rounds `x` to `f` with ties to even, by scaling to the target quantum.
fn round_to(x: f64, f: FloatFormat) -> f64 {
    if !x.is_finite() || x == 0.0 {
        return x;
    }
    let emin = 2 - (1 << (f.exponent_bits() - 1));
    let q = libm::ldexp(1.0, libm::ilogb(x).max(emin) - f.significand_bits() as i32);
    let r = (x / q).round_ties_even() * q;
    if r.abs() > f.max_finite() {
        f64::INFINITY.copysign(x)
    } else {
        r
    }
}

/// Straight-line forward pass: every operation evaluated in f64 (std
/// `exp`), then rounded to the model format.
fn reference_forward(model: &MlpModel, x: &[f64], f: FloatFormat) -> f64 {
    let r = |v: f64| round_to(v, f);
    let mut a = x.to_vec();
    for (w, b) in model.weights().iter().zip(model.biases()) {
        let (fin, fout) = (w.rows(), w.cols());
        let wv = w.to_f64();
        let bv = b.to_f64();
        a = (0..fout)
            .map(|j| {
                let mut z = 0.0;
                for k in 0..fin {
                    z = r(z + r(a[k] * wv[k * fout + j]));
                }
                z = r(z + bv[j]);
                r(1.0 / (1.0 + (-z).exp()))
            })
            .collect();
    }
    a[0]
}

fn ulp_at(x: f64, f: FloatFormat) -> f64 {
    let emin = 2 - (1 << (f.exponent_bits() - 1));
    libm::ldexp(1.0, libm::ilogb(x).max(emin) - f.significand_bits() as i32)
}

#[test]
fn forward_matches_reference_within_one_ulp() {
    let spec = DataSpec { n_train: 50, seed: 12, ..DataSpec::default() };
    let formats = [
        (ScalarFormat::F64, FloatFormat::BINARY64),
        (ScalarFormat::F32, FloatFormat::BINARY32),
        (ScalarFormat::F16, FloatFormat::BINARY16),
        (ScalarFormat::float(4, 6).unwrap(), FloatFormat::new(4, 6).unwrap()),
    ];
    for (fmt, ff) in formats {
        let (train, _, _) = generate(&spec, fmt).unwrap();
        for seed in 0..5 {
            let m = init_model(&default_dims(), fmt, seed).unwrap();
            let out = mlp::forward(&m, train.features()).unwrap();
            let x = train.features().to_f64();
            for i in 0..train.n() {
                let got = out.output().value(i);
                let want = reference_forward(&m, &x[i * 5..i * 5 + 5], ff);
                // the reference only has extra precision for formats narrower than f64
                let ulps = if ff == FloatFormat::BINARY64 { 4.0 } else { 1.0 };
                assert!((got - want).abs() <= ulps * ulp_at(want, ff), "{fmt} seed {seed} sample {i}: {got} vs {want}");
            }
        }
    }
}

#[test]
fn grad_check_on_twenty_configurations() {
    for seed in 0..20u64 {
        let hidden = 1 + (seed % 5) as usize;
        let dims = layer_dims(5, hidden, 10);
        let spec = DataSpec { n_train: 8 + seed as usize * 3, seed: 100 + seed, ..DataSpec::default() };
        let (batch, _, _) = generate(&spec, ScalarFormat::F64).unwrap();
        let m = init_model(&dims, ScalarFormat::F64, seed).unwrap();
        let err = mlp::grad_check(&m, &batch, 1e-5).unwrap();
        assert!(err <= 1e-5, "seed {seed}: {err}");
    }
}

#[test]
fn hand_differentiated_two_layer_net() {
    // x -> s(w1 x + b1) -> s(w2 h + b2)
    let (w1, b1, w2, b2, x, y) = (0.4, 0.1, -0.7, 0.2, 0.9, 0.0);
    let m = MlpModel::from_parts(
        vec![1, 1, 1],
        vec![
            Matrix::from_f64(1, 1, &[w1], ScalarFormat::F64).unwrap(),
            Matrix::from_f64(1, 1, &[w2], ScalarFormat::F64).unwrap(),
        ],
        vec![
            Matrix::from_f64(1, 1, &[b1], ScalarFormat::F64).unwrap(),
            Matrix::from_f64(1, 1, &[b2], ScalarFormat::F64).unwrap(),
        ],
        ScalarFormat::F64,
    )
    .unwrap();
    let data = mlp::Dataset::new(
        Matrix::from_f64(1, 1, &[x], ScalarFormat::F64).unwrap(),
        Matrix::from_f64(1, 1, &[y], ScalarFormat::F64).unwrap(),
    )
    .unwrap();
    let s = |v: f64| 1.0 / (1.0 + (-v).exp());
    let h = s(w1 * x + b1);
    let out = s(w2 * h + b2);
    let d2 = out - y;
    let d1 = d2 * w2 * h * (1.0 - h);
    let (g, _) = mlp::gradients(&m, &data).unwrap();
    let close = |a: f64, b: f64| (a - b).abs() <= 1e-15;
    assert!(close(g.weights[1].value(0), d2 * h));
    assert!(close(g.biases[1].value(0), d2));
    assert!(close(g.weights[0].value(0), d1 * x));
    assert!(close(g.biases[0].value(0), d1));
}

#[test]
fn loss_is_mostly_non_increasing() {
    let good: usize = std::thread::scope(|s| {
        let handles: Vec<_> = (0..20u64)
            .map(|seed| {
                s.spawn(move || {
                    let (train, _, _) = generate(&DataSpec { seed, ..DataSpec::default() }, ScalarFormat::F64).unwrap();
                    let mut m = init_model(&default_dims(), ScalarFormat::F64, seed).unwrap();
                    let mut prev = f64::INFINITY;
                    let mut monotone = true;
                    for epoch in 0..500 {
                        let (next, loss) = mlp::train_epoch(&m, &train, 0.5).unwrap();
                        if epoch >= 10 {
                            monotone &= loss <= prev;
                            prev = loss;
                        }
                        m = next;
                    }
                    monotone
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().unwrap() as usize).sum()
    });
    assert!(good >= 18, "{good} of 20 seeds monotone");
}

#[test]
fn training_is_deterministic_and_structure_is_format_independent() {
    let spec = DataSpec { n_train: 100, seed: 1, ..DataSpec::default() };
    let run = |fmt| {
        let (train, _, _) = generate(&spec, fmt).unwrap();
        let mut m = init_model(&default_dims(), fmt, 5).unwrap();
        for _ in 0..20 {
            m = mlp::train_epoch(&m, &train, 0.5).unwrap().0;
        }
        m
    };
    assert_eq!(run(ScalarFormat::F16), run(ScalarFormat::F16));
    let (a, b) = (run(ScalarFormat::F64), run(ScalarFormat::F32));
    assert_eq!(a.dims(), b.dims());
    for (x, y) in a.weights().iter().zip(b.weights()) {
        assert_eq!((x.rows(), x.cols()), (y.rows(), y.cols()));
    }
    assert_ne!(a.weights()[0].to_f64(), b.weights()[0].to_f64());
}
