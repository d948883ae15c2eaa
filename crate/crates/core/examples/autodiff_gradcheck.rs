//! Builds a small conv -> relu -> conv -> mu-law -> L1 graph, runs the
//! reverse pass and compares a few weight gradients with central
//! differences.

use hdr_adapt::autodiff::{Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f32, hi: f32) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

fn loss(x: &Tensor, w1: &Tensor, w2: &Tensor, target: &Tensor) -> (f32, Option<Tensor>) {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let a = g.leaf(w1.clone(), true);
    let b = g.leaf(w2.clone(), false);
    let t = g.constant(target.clone());
    let h = g.conv2d(xv, a, None).unwrap();
    let h = g.relu(h);
    let y = g.conv2d(h, b, None).unwrap();
    let y = g.relu(y);
    let y = g.mu_law(y, 5000.0);
    let tt = g.mu_law(t, 5000.0);
    let l = g.l1_loss(y, tt).unwrap();
    let value = g.value(l).item();
    g.backward(l).unwrap();
    (value, g.grad(a).cloned())
}

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random(&mut rng, &[1, 3, 6, 6], 0.0, 1.0);
    let w1 = random(&mut rng, &[4, 3, 3, 3], -0.5, 0.5);
    let w2 = random(&mut rng, &[3, 4, 1, 1], 0.0, 0.5);
    let target = random(&mut rng, &[1, 3, 6, 6], 0.0, 1.0);
    let (l, grad) = loss(&x, &w1, &w2, &target);
    let grad = grad.expect("w1 requires grad");
    println!("loss {l:.6}");
    let h = 1e-3;
    for i in [0, 7, 31, 64, 100] {
        let mut plus = w1.clone();
        plus.data_mut()[i] += h;
        let mut minus = w1.clone();
        minus.data_mut()[i] -= h;
        let fd = (f64::from(loss(&x, &plus, &w2, &target).0) - f64::from(loss(&x, &minus, &w2, &target).0))
            / (2.0 * f64::from(h));
        println!("dL/dw1[{i:>3}]  analytic {:+.5e}  finite-diff {fd:+.5e}", grad.data()[i]);
    }
}
