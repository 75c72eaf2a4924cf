//! Reverse-mode gradients on the tape, checked against central differences.

use condvid::{Result, Tape, Tensor, Var};

fn objective(x: &Var<f64>, w: &Var<f64>) -> Result<Var<f64>> {
    // sum(softmax(x @ w) * x @ w)
    let y = x.matmul(w)?;
    y.softmax(1)?.mul(&y)?.sum_all()
}

fn main() -> Result<()> {
    let x0 = Tensor::<f64>::from_fn([3, 4], |i| (i as f64 * 0.37).sin())?;
    let w = Tensor::<f64>::from_fn([4, 2], |i| (i as f64 * 0.91).cos())?;

    let tape = Tape::new();
    let x = tape.leaf(x0.clone())?;
    let loss = objective(&x, &Var::constant(w.clone()))?;
    let grads = tape.backward(&loss)?;
    let g = grads.get(&x).expect("x is on the tape");

    let h = 1e-5;
    let eval = |t: Tensor<f64>| -> Result<f64> { objective(&Var::constant(t), &Var::constant(w.clone()))?.value().item() };
    println!("loss = {:.6}", loss.value().item()?);
    for i in 0..x0.numel() {
        let mut up = x0.to_vec();
        let mut down = x0.to_vec();
        up[i] += h;
        down[i] -= h;
        let fd = (eval(Tensor::new([3, 4], up)?)? - eval(Tensor::new([3, 4], down)?)?) / (2.0 * h);
        println!("d/dx[{i:>2}]  tape {:+.8}  fd {:+.8}", g.data()[i], fd);
    }
    Ok(())
}
