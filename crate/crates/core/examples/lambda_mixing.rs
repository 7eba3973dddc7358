//! Draw interpolation weights under the default and the tighter clamp, then
//! blend a labeled image into an unlabeled one.

use guidedmix::data::{Normalization, SyntheticSpec};
use guidedmix::mixing::{mix_images, sample_lambda, LambdaPolicy};
use guidedmix::rng::keyed;

fn summary(policy: &LambdaPolicy, n: usize) -> (f64, f64, f64) {
    let mut rng = keyed(0, &[policy.clamp_max.to_bits()]);
    let draws: Vec<f64> = (0..n).map(|_| sample_lambda(policy, &mut rng)).collect();
    let mean = draws.iter().sum::<f64>() / n as f64;
    let lo = draws.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = draws.iter().cloned().fold(0.0, f64::max);
    (lo, mean, hi)
}

fn main() -> guidedmix::Result<()> {
    for policy in [LambdaPolicy::default(), LambdaPolicy::cityscapes()] {
        let (lo, mean, hi) = summary(&policy, 100_000);
        println!("clamp {:.1}: min {lo:.5}  mean {mean:.4}  max {hi:.5}", policy.clamp_max);
    }

    let spec = SyntheticSpec::new(2, 32, 4, 5);
    let norm = Normalization::default();
    let (_, labeled, _) = spec.sample(0);
    let (_, unlabeled, _) = spec.sample(1);
    let (xl, xu) = (norm.to_input(&labeled), norm.to_input(&unlabeled));
    for lambda in [0.0, 0.25, 0.5] {
        let mixed = mix_images(&xl, &xu, lambda)?;
        let dist_u = mixed.max_abs_diff(&xu);
        let dist_l = mixed.max_abs_diff(&xl);
        println!("λ = {lambda:.2}: max |x_mix − x_u| = {dist_u:.3}, max |x_mix − x_l| = {dist_l:.3}");
    }
    Ok(())
}
