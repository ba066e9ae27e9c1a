//! Finite-difference check of a small two-layer network built on the tape.
//!
//! ```text
//! cargo run --release --example gradcheck
//! ```

use grad_transformer::graph::Graph;
use grad_transformer::rng::Rng;
use grad_transformer::tensor::Tensor;

const H: f32 = 1e-2;

fn loss(params: &[Tensor], x: &Tensor, targets: &[Option<usize>]) -> (f32, Vec<Tensor>) {
    let mut g = Graph::new();
    let vars: Vec<_> = params.iter().map(|p| g.param(p.clone())).collect();
    let x = g.constant(x.clone());
    let h = g.matmul(x, vars[0]).unwrap();
    let h = g.layer_norm(h, vars[1], vars[2]).unwrap();
    let h = g.gelu(h);
    let logits = g.matmul(h, vars[3]).unwrap();
    let l = g.cross_entropy(logits, targets).unwrap();
    g.backward(l).unwrap();
    let value = g.value(l).data()[0];
    (value, vars.iter().map(|&v| g.grad_tensor(v)).collect())
}

fn main() {
    let mut rng = Rng::new(0);
    let (n, d_in, d_h, vocab) = (5, 6, 8, 4);
    let params = vec![
        rng.gaussian(&[d_in, d_h], 0.5),
        Tensor::full(&[d_h], 1.0),
        Tensor::zeros(&[d_h]),
        rng.gaussian(&[d_h, vocab], 0.5),
    ];
    let x = rng.gaussian(&[n, d_in], 1.0);
    let targets: Vec<Option<usize>> = (0..n).map(|i| (i != 2).then(|| rng.below(vocab))).collect();
    let (l0, grads) = loss(&params, &x, &targets);
    println!("loss {l0:.5}");
    for (name, i) in [("w_in", 0), ("gamma", 1), ("beta", 2), ("w_out", 3)] {
        let mut worst = 0f32;
        for j in 0..params[i].numel() {
            let mut plus = params.clone();
            plus[i].data_mut()[j] += H;
            let mut minus = params.clone();
            minus[i].data_mut()[j] -= H;
            let numeric = (loss(&plus, &x, &targets).0 - loss(&minus, &x, &targets).0) / (2.0 * H);
            let analytic = grads[i].data()[j];
            worst = worst.max((numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-2));
        }
        println!("{name:<6} {:>3} values  max rel err {worst:.2e}", params[i].numel());
    }
}
