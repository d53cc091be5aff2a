//! Compares reverse-mode gradients with central differences on a small net.

use evstation::nn::{gradient_check, DenseNet, InitScheme};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let net = DenseNet::new(&[4, 16, 16, 2], InitScheme::FanInScaled, &mut rng);
    // loss = 0.5 * |y - target|^2
    let target = [0.3, -1.2];
    let check = gradient_check(&net, &[0.5, -0.1, 0.8, 0.2], |y| {
        let g: Vec<f64> = y.iter().zip(target).map(|(a, b)| a - b).collect();
        (0.5 * g.iter().map(|v| v * v).sum::<f64>(), g)
    })?;
    println!("parameters      {}", net.param_count());
    println!("checked input   {:?}", check.input);
    println!("max rel. error  {:.3e}", check.max_relative_error);
    assert!(check.max_relative_error < 1e-4);
    Ok(())
}
