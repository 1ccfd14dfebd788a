#[cfg(test)]
mod tests {
    use candle_core::{DType, Device, Tensor, Var};

    #[test]
    fn f64_conv_and_backward() {
        let dev = Device::Cpu;
        // f64 conv2d forward + backward through max + upsample
        let z = Var::from_tensor(&Tensor::randn(0f64, 1f64, (1, 4, 8, 8), &dev).unwrap()).unwrap();
        let w = Tensor::randn(0f64, 0.1f64, (16, 4, 3, 3), &dev).unwrap();
        let y = z.as_tensor().conv2d(&w, 1, 1, 1, 1).unwrap();
        assert_eq!(y.dims(), &[1, 16, 8, 8]);
        let up = y.upsample_nearest2d(16, 16).unwrap();
        // softmax + matmul in f64
        let flat = up.reshape((16, 256)).unwrap();
        let sm = candle_nn::ops::softmax(&flat, 1).unwrap();
        let reduced = sm.max(1).unwrap(); // max over dim
        let loss = (reduced.sum_all().unwrap() * 1.0).unwrap();
        let grads = loss.backward().unwrap();
        let gz = grads.get(z.as_tensor()).expect("grad wrt z");
        assert_eq!(gz.dims(), &[1, 4, 8, 8]);
        let gsum: f64 = gz.abs().unwrap().sum_all().unwrap().to_scalar().unwrap();
        assert!(gsum.is_finite() && gsum > 0.0);
        assert_eq!(gz.dtype(), DType::F64);
    }

    #[test]
    fn conv_transpose_backward() {
        let dev = Device::Cpu;
        let z = Var::from_tensor(&Tensor::randn(0f64, 1f64, (1, 8, 4, 4), &dev).unwrap()).unwrap();
        let w = Tensor::randn(0f64, 0.1f64, (8, 4, 4, 4), &dev).unwrap();
        let y = z
            .as_tensor()
            .conv_transpose2d(&w, 1, 1, 2, 1)
            .unwrap();
        eprintln!("convT out: {:?}", y.dims());
        let loss = y.sqr().unwrap().sum_all().unwrap();
        let grads = loss.backward();
        match grads {
            Ok(g) => {
                assert!(g.get(z.as_tensor()).is_some());
                eprintln!("convT backward OK");
            }
            Err(e) => panic!("convT backward failed: {e}"),
        }
    }

    #[test]
    fn safetensors_f64_roundtrip() {
        let dev = Device::Cpu;
        let t = Tensor::randn(0f64, 1f64, (4, 8, 8), &dev).unwrap();
        let path = std::env::temp_dir().join("probe_f64.safetensors");
        t.save_safetensors("latent", &path).unwrap();
        let loaded = candle_core::safetensors::load(&path, &dev).unwrap();
        let l = loaded.get("latent").unwrap();
        assert_eq!(l.dtype(), DType::F64);
        let d: f64 = (l - &t)
            .unwrap()
            .abs()
            .unwrap()
            .sum_all()
            .unwrap()
            .to_scalar()
            .unwrap();
        assert_eq!(d, 0.0);
    }

    #[test]
    fn max_backward_routes_to_argmax() {
        let dev = Device::Cpu;
        let v = Var::from_tensor(&Tensor::new(&[1f64, 5f64, 3f64], &dev).unwrap()).unwrap();
        let m = v.as_tensor().max(0).unwrap();
        let g = m.backward().unwrap();
        let gv = g.get(v.as_tensor()).unwrap().to_vec1::<f64>().unwrap();
        eprintln!("max grad: {gv:?}");
        assert_eq!(gv, vec![0.0, 1.0, 0.0]);
    }
}
