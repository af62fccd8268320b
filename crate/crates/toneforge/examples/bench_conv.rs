use std::time::Instant;
fn main() {
    // mimic desk: dilated conv 16->32 K3 over T=8192, 10 blocks, fwd+bwd
    let c_in = 16usize;
    let c_out = 32usize;
    let k = 3usize;
    let t = 8192usize;
    let ext_cols = t + 2 * 512;
    let ext = vec![0.5f32; c_in * ext_cols];
    let w = vec![0.01f32; c_out * c_in * k];
    let b = vec![0.0f32; c_out];
    let mut out = vec![0.0f32; c_out * t];
    let iters = 200;
    let t0 = Instant::now();
    for _ in 0..iters {
        toneforge::nn::conv::conv_ctx_forward(&mut out, &ext, &w, &b, c_out, c_in, k, 512, t);
    }
    let dt = t0.elapsed().as_secs_f64();
    let macs = (c_out * c_in * k * t * iters) as f64;
    println!("forward: {:.2} GMAC/s", macs / dt / 1e9);

    let mut d_ext = vec![0.0f32; c_in * ext_cols];
    let mut d_w = vec![0.0f32; c_out * c_in * k];
    let mut d_b = vec![0.0f32; c_out];
    let up = vec![0.3f32; c_out * t];
    let t1 = Instant::now();
    for _ in 0..iters {
        toneforge::nn::conv::conv_ctx_backward(
            &mut d_ext, &mut d_w, &mut d_b, &ext, &w, &up, c_out, c_in, k, 512, t,
        );
    }
    let dt1 = t1.elapsed().as_secs_f64();
    println!(
        "backward: {:.2} GMAC/s (2x the MACs)",
        2.0 * macs / dt1 / 1e9
    );
}
