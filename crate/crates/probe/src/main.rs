use candle_core::{DType, Device, Tensor};
use candle_nn::{Conv2d, Conv2dConfig, ConvTranspose2d, ConvTranspose2dConfig, Module};

fn maxdiff(a: &Tensor, b: &Tensor) -> f64 {
    let a = a.flatten_all().unwrap().to_vec1::<f64>().unwrap();
    let b = b.flatten_all().unwrap().to_vec1::<f64>().unwrap();
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn main() -> candle_core::Result<()> {
    let dev = Device::Cpu;
    // Deterministic pseudo-random data without rand deps.
    let mk = |n: usize, s: u64| -> Vec<f64> {
        (0..n).map(|i| (((i as u64).wrapping_mul(6364136223846793005).wrapping_add(s) >> 33) as f64 / 2f64.powi(31)) - 1.0).collect()
    };
    let w = Tensor::from_vec(mk(48 * 32 * 9, 3), (48, 32, 3, 3), &dev)?;
    let conv = Conv2d::new(w, None, Conv2dConfig { padding: 1, stride: 2, ..Default::default() });
    let x0 = Tensor::from_vec(mk(32 * 64, 5), (1, 32, 8, 8), &dev)?;
    let x1 = Tensor::from_vec(mk(32 * 64, 9), (1, 32, 8, 8), &dev)?;
    let batch = Tensor::cat(&[&x0, &x1], 0)?;
    let yb = conv.forward(&batch)?;
    let y0 = conv.forward(&x0)?;
    let y1 = conv.forward(&x1)?;
    println!("conv2d s2: sample0 {:.3e} sample1 {:.3e}", maxdiff(&yb.narrow(0,0,1)?, &y0), maxdiff(&yb.narrow(0,1,1)?, &y1));

    let wt = Tensor::from_vec(mk(48 * 32 * 9, 7), (48, 32, 3, 3), &dev)?;
    let ct = ConvTranspose2d::new(wt, None, ConvTranspose2dConfig { padding: 1, output_padding: 1, stride: 2, dilation: 1 });
    let z0 = Tensor::from_vec(mk(48 * 16, 11), (1, 48, 4, 4), &dev)?;
    let z1 = Tensor::from_vec(mk(48 * 16, 13), (1, 48, 4, 4), &dev)?;
    let zb = Tensor::cat(&[&z0, &z1], 0)?;
    let ub = ct.forward(&zb)?;
    let u0 = ct.forward(&z0)?;
    let u1 = ct.forward(&z1)?;
    println!("convT s2:  sample0 {:.3e} sample1 {:.3e}", maxdiff(&ub.narrow(0,0,1)?, &u0), maxdiff(&ub.narrow(0,1,1)?, &u1));

    // batched matmul [B,T,C]@[C,C] via broadcast
    let m = Tensor::from_vec(mk(48 * 48, 17), (48, 48), &dev)?;
    let t0 = Tensor::from_vec(mk(16 * 48, 19), (1, 16, 48), &dev)?;
    let t1 = Tensor::from_vec(mk(16 * 48, 23), (1, 16, 48), &dev)?;
    let tb = Tensor::cat(&[&t0, &t1], 0)?;
    let rb = tb.broadcast_matmul(&m)?;
    let r0 = t0.broadcast_matmul(&m)?;
    let r1 = t1.broadcast_matmul(&m)?;
    println!("bmatmul:   sample0 {:.3e} sample1 {:.3e}", maxdiff(&rb.narrow(0,0,1)?, &r0), maxdiff(&rb.narrow(0,1,1)?, &r1));
    let _ = DType::F64;
    Ok(())
}
