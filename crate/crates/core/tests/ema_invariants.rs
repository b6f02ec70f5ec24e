use hnfnet::ema::{e_step, ema_forward, ema_reconstruct, m_step, EmaParams, Matrix};
use hnfnet::layers::Conv;
use hnfnet::tensor::{ConvSpec, Tensor4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f32) -> Matrix {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

fn conv(rng: &mut ChaCha8Rng, cin: usize, cout: usize, zero: bool) -> Conv {
    let spec = ConvSpec::pointwise(cin, cout);
    let draw = |rng: &mut ChaCha8Rng, n: usize| -> Vec<f32> {
        (0..n).map(|_| if zero { 0.0 } else { rng.random_range(-1.0..1.0) }).collect()
    };
    Conv {
        spec,
        weight: draw(rng, spec.weight_len()),
        bias: Some(draw(rng, cout)),
    }
}

#[test]
fn rows_stochastic_columns_unit_and_zero_out_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for case in 0..100 {
        let channels = rng.random_range(1..=6);
        let inner = rng.random_range(1..=6);
        let k = rng.random_range(1..=16);
        let t = rng.random_range(1..=5);
        let dims = [rng.random_range(1..=4), rng.random_range(1..=4), rng.random_range(1..=4)];
        let x = Tensor4::from_fn(channels, dims, |_, _, _, _| rng.random_range(-3.0..3.0));
        let bases = random_matrix(&mut rng, inner, k, 1.0);
        let params = EmaParams::new(
            conv(&mut rng, channels, inner, false),
            conv(&mut rng, inner, channels, false),
            bases.clone(),
            t,
        )
        .unwrap();
        let trace = ema_reconstruct(&x, &params).unwrap();
        let a = trace.attention.matrix();
        for n in 0..a.rows() {
            let s: f64 = a.row(n).iter().map(|&v| v as f64).sum();
            assert!((s - 1.0).abs() < 1e-5, "case {case} row {n}: {s}");
        }
        for c in 0..trace.bases.cols() {
            let norm = trace.bases.column_norm(c);
            assert!((norm - 1.0).abs() < 1e-5, "case {case} column {c}: {norm}");
        }

        let silent = EmaParams::new(
            conv(&mut rng, channels, inner, false),
            conv(&mut rng, inner, channels, true),
            bases,
            t,
        )
        .unwrap();
        assert_eq!(ema_forward(&x, &silent).unwrap(), x, "case {case}");
    }
}

#[test]
fn single_step_matches_direct_formulas() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random_matrix(&mut rng, 7, 3, 2.0);
    let mut mu = random_matrix(&mut rng, 3, 4, 1.0);
    for c in 0..4 {
        let n = mu.column_norm(c) as f32;
        for r in 0..3 {
            mu.set(r, c, mu.get(r, c) / n);
        }
    }
    let a = e_step(&x, &mu).unwrap();
    for n in 0..7 {
        let logits: Vec<f64> =
            (0..4).map(|k| (0..3).map(|c| x.get(n, c) as f64 * mu.get(c, k) as f64).sum()).collect();
        let z: f64 = logits.iter().map(|l| l.exp()).sum();
        for k in 0..4 {
            assert!((a.matrix().get(n, k) as f64 - logits[k].exp() / z).abs() < 1e-6);
        }
    }
    let next = m_step(&x, &a, &mu).unwrap();
    for k in 0..4 {
        let col: Vec<f64> =
            (0..3).map(|c| (0..7).map(|n| a.matrix().get(n, k) as f64 * x.get(n, c) as f64).sum()).collect();
        let norm = col.iter().map(|v| v * v).sum::<f64>().sqrt();
        for c in 0..3 {
            assert!((next.get(c, k) as f64 - col[c] / norm).abs() < 1e-5);
        }
    }
}
