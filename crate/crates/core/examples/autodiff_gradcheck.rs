//! Builds a small graph by hand, backpropagates, and compares one gradient
//! against central differences. Then runs the full gradient suite.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vireo::gradsuite;
use vireo::{Graph, Result, Tensor};

fn loss(x: &Tensor, w: &Tensor) -> Result<(f64, Tensor)> {
    let mut g = Graph::new();
    let xv = g.leaf(x);
    let wv = g.leaf(w);
    let h = g.contract(xv, wv, "ij,jk->ik")?;
    let s = g.softmax(h, 1, 0.5)?;
    let sq = g.mul(s, s)?;
    let l = g.sum(sq);
    let value = g.value(l).data()[0];
    let grads = g.backward(l)?;
    let mut gw = Tensor::zeros(w.shape());
    grads.write_to(wv, &mut gw)?;
    Ok((value, gw))
}

fn main() -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = Tensor::randn(&[3, 4], 1.0, &mut rng);
    let w = Tensor::randn(&[4, 5], 1.0, &mut rng);
    let (value, grad) = loss(&x, &w)?;
    println!("loss = {value:.6}");

    let eps = 1e-6;
    let mut worst: f64 = 0.0;
    for i in 0..w.numel() {
        let mut plus = w.clone();
        plus.data_mut()[i] += eps;
        let mut minus = w.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (loss(&x, &plus)?.0 - loss(&x, &minus)?.0) / (2.0 * eps);
        worst = worst.max((numeric - grad.data()[i]).abs());
    }
    println!("d loss / d w: worst |analytic - numeric| = {worst:.2e}");

    let report = gradsuite::run_suite()?;
    print!("{}", report.to_text());
    Ok(())
}
