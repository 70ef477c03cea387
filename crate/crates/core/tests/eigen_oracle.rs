use nalgebra::{DMatrix, SymmetricEigen};
use repromia::models::{Activation, MlpClassifier};
use repromia::theory::{input_loss_grad, lambda_max_input_hessian, power_iteration_fd};
use repromia::{Result, Rng};

fn dominant(m: &DMatrix<f64>) -> f64 {
    let e = SymmetricEigen::new(m.clone()).eigenvalues;
    e.iter().copied().fold(0.0, |a: f64, b| if b.abs() > a.abs() { b } else { a })
}

#[test]
fn power_iteration_matches_dense_eigensolver_on_quadratics() {
    let mut rng = Rng::new(11);
    for _ in 0..20 {
        let d = 2 + rng.below(6);
        let b = DMatrix::from_fn(d, d, |_, _| rng.normal());
        let a = (&b + b.transpose()) * 0.5;
        let want = dominant(&a);
        let second = {
            let mut e: Vec<f64> = SymmetricEigen::new(a.clone()).eigenvalues.iter().map(|v| v.abs()).collect();
            e.sort_by(|x, y| y.total_cmp(x));
            e[1]
        };
        if want.abs() - second < 0.05 * want.abs() {
            continue;
        }
        let a2 = a.clone();
        let grad = move |x: &[f64]| -> Result<Vec<f64>> {
            Ok((&a2 * nalgebra::DVector::from_column_slice(x)).iter().copied().collect())
        };
        let x = rng.normal_vec(d, 1.0);
        let v0 = rng.normal_vec(d, 1.0);
        let r = power_iteration_fd(&grad, &x, &v0, 2000, 1e-3).unwrap();
        assert!((r.lambda - want).abs() <= 1e-6 * want.abs().max(1.0), "{} vs {want}", r.lambda);
    }
}

#[test]
fn input_hessian_lambda_matches_dense_fd_hessian() {
    let mut rng = Rng::new(5);
    let model = MlpClassifier::new(&[4, 8, 3], Activation::Tanh, &mut rng).unwrap();
    let h = 1e-4;
    for y in 0..3 {
        let x = rng.normal_vec(4, 1.0);
        let mut hess = DMatrix::zeros(4, 4);
        for j in 0..4 {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[j] += h;
            xm[j] -= h;
            let (gp, gm) = (input_loss_grad(&model, &xp, y).unwrap(), input_loss_grad(&model, &xm, y).unwrap());
            for i in 0..4 {
                hess[(i, j)] = (gp[i] - gm[i]) / (2.0 * h);
            }
        }
        let sym = (&hess + hess.transpose()) * 0.5;
        let want = dominant(&sym);
        let r = lambda_max_input_hessian(&model, &x, y, 500, h, 3).unwrap();
        assert!((r.lambda - want).abs() <= 1e-4 * want.abs().max(1e-3), "{} vs {want}", r.lambda);
    }
}
