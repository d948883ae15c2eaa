//! Minimal dense tensors with reverse-mode automatic differentiation.

mod conv;
mod graph;
mod optim;
mod tensor;

pub use conv::{conv2d_backward, conv2d_forward};
pub(crate) use graph::flip;
pub use graph::{Graph, Var};
pub use optim::{adam_step, AdamConfig, AdamState, ParamStore};
pub use tensor::Tensor;

#[cfg(test)]
mod tests {
    use super::*;

    fn t4(shape: [usize; 4], data: &[f32]) -> Tensor {
        Tensor::new(&shape, data.to_vec()).unwrap()
    }

    #[test]
    fn pointwise_conv_by_hand() {
        // x: 1x2x2x2, w: 1x2 channel mix, b = 0.5
        let x = t4([1, 2, 2, 2], &[1.0, 2.0, 3.0, 4.0, 10.0, 20.0, 30.0, 40.0]);
        let w = t4([1, 2, 1, 1], &[2.0, -1.0]);
        let b = Tensor::new(&[1], vec![0.5]).unwrap();
        let y = conv2d_forward(&x, &w, Some(&b)).unwrap();
        assert_eq!(y.data(), &[2.0 - 10.0 + 0.5, 4.0 - 20.0 + 0.5, 6.0 - 30.0 + 0.5, 8.0 - 40.0 + 0.5]);
    }

    #[test]
    fn identity_3x3_kernel() {
        let x = t4([1, 1, 3, 4], &(0..12).map(|v| v as f32).collect::<Vec<_>>());
        let mut k = vec![0.0; 9];
        k[4] = 1.0;
        let y = conv2d_forward(&x, &t4([1, 1, 3, 3], &k), None).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn conv_shape_errors() {
        let x = Tensor::zeros(&[1, 3, 4, 4]);
        assert!(conv2d_forward(&x, &Tensor::zeros(&[2, 2, 1, 1]), None).is_err());
        assert!(conv2d_forward(&x, &Tensor::zeros(&[2, 3, 5, 5]), None).is_err());
    }

    #[test]
    fn sum_gives_unit_gradient_and_accumulates() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::full(&[2, 3], 0.3), true);
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert!(g.grad(x).unwrap().data().iter().all(|&v| v == 1.0));
        g.backward(s).unwrap();
        assert!(g.grad(x).unwrap().data().iter().all(|&v| v == 2.0));
        g.zero_grad();
        assert!(g.grad(x).is_none());
    }

    #[test]
    fn non_scalar_backward_is_error() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(&[2]), true);
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn chain_of_two_linears_product_rule() {
        // y = sum(w2 * (w1 * x)) on 1x1 convs with one channel
        let mut g = Graph::new();
        let x = g.constant(t4([1, 1, 1, 2], &[1.5, -2.0]));
        let w1 = g.leaf(t4([1, 1, 1, 1], &[3.0]), true);
        let w2 = g.leaf(t4([1, 1, 1, 1], &[0.5]), true);
        let h = g.conv2d(x, w1, None).unwrap();
        let y = g.conv2d(h, w2, None).unwrap();
        let s = g.sum(y);
        g.backward(s).unwrap();
        // d/dw1 = w2 * sum(x), d/dw2 = w1 * sum(x)
        assert_eq!(g.grad(w1).unwrap().item(), 0.5 * -0.5);
        assert_eq!(g.grad(w2).unwrap().item(), 3.0 * -0.5);
    }

    #[test]
    fn mu_law_derivative_at_zero() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(&[1]), true);
        let y = g.mu_law(x, 5000.0);
        assert_eq!(g.value(y).item(), 0.0);
        let s = g.sum(y);
        g.backward(s).unwrap();
        let expect = 5000.0 / 5001f64.ln();
        assert!((f64::from(g.grad(x).unwrap().item()) - expect).abs() < 1e-3);
    }

    #[test]
    fn l1_examples() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap(), true);
        let b = g.constant(Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap());
        let l = g.l1_loss(a, b).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
        g.backward(l).unwrap();
        assert!(g.grad(a).unwrap().data().iter().all(|&v| v == 0.0));
        let c = g.constant(Tensor::scalar(0.25));
        let d = g.leaf(Tensor::scalar(-1.0), true);
        let l2 = g.l1_loss(c, d).unwrap();
        assert_eq!(g.value(l2).item(), 1.25);
    }

    #[test]
    fn concat_slice_flip_round_trips() {
        let mut g = Graph::new();
        let a = g.leaf(t4([1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]), true);
        let b = g.leaf(t4([1, 2, 2, 2], &[5.0, 6.0, 7.0, 8.0, 9.0, 10.0, 11.0, 12.0]), true);
        let c = g.concat_channels(&[a, b]).unwrap();
        let s = g.slice_channels(c, 1, 2).unwrap();
        assert_eq!(g.value(s), g.value(b));
        let h = g.flip_h(a).unwrap();
        assert_eq!(g.value(h).data(), &[2.0, 1.0, 4.0, 3.0]);
        let v = g.flip_v(a).unwrap();
        assert_eq!(g.value(v).data(), &[3.0, 4.0, 1.0, 2.0]);
    }
}
