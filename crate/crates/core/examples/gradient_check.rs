//! Central finite differences against tape gradients for a small
//! feed-forward block `sum(gelu(x W + b) * r)`.

use mtmae::rng;
use mtmae::tensor::{Tape, Tensor};

const H: f64 = 1e-4;

fn forward(x: &Tensor, w: &Tensor, b: &Tensor, r: &Tensor) -> (f64, Vec<Tensor>) {
    let mut tape = Tape::new();
    let (xv, wv, bv) = (tape.input(x.clone()), tape.input(w.clone()), tape.input(b.clone()));
    let rv = tape.constant(r.clone());
    let z = tape.matmul(xv, wv).unwrap();
    let z = tape.add_row(z, bv).unwrap();
    let a = tape.gelu(z);
    let p = tape.mul(a, rv).unwrap();
    let loss = tape.sum(p);
    let value = tape.value(loss).item();
    let grads = tape.backward(loss).unwrap();
    let g = [(xv, x), (wv, w), (bv, b)]
        .into_iter()
        .map(|(v, t)| grads.wrt(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    (value, g)
}

fn main() {
    let mut r = rng::stream(3, &["example", "gradcheck"]);
    let mut inputs = vec![
        Tensor::randn(&[4, 6], 1.0, &mut r),
        Tensor::randn(&[6, 5], 1.0, &mut r),
        Tensor::randn(&[5], 1.0, &mut r),
    ];
    let weights = Tensor::randn(&[4, 5], 1.0, &mut r);
    let (_, grads) = forward(&inputs[0], &inputs[1], &inputs[2], &weights);
    let mut worst: f64 = 0.0;
    for (i, name) in ["x", "W", "b"].iter().enumerate() {
        let mut local: f64 = 0.0;
        for k in 0..inputs[i].numel() {
            let orig = inputs[i].data()[k];
            inputs[i].data_mut()[k] = orig + H;
            let plus = forward(&inputs[0], &inputs[1], &inputs[2], &weights).0;
            inputs[i].data_mut()[k] = orig - H;
            let minus = forward(&inputs[0], &inputs[1], &inputs[2], &weights).0;
            inputs[i].data_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * H);
            let analytic = grads[i].data()[k];
            local = local.max((analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6));
        }
        println!("{name}: {} entries, max relative error {local:.2e}", inputs[i].numel());
        worst = worst.max(local);
    }
    println!("worst {worst:.2e} ({})", if worst < 1e-3 { "ok" } else { "too large" });
}
