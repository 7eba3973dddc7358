//! Mean activation of every convolution layer for an unlabeled image and
//! for the same image mixed with a labeled one.

use guidedmix::data::{Normalization, SyntheticSpec};
use guidedmix::evalkit::mean_activation_profile;
use guidedmix::mixing::mix_images;
use guidedmix::network::{NetConfig, Network};

fn main() -> guidedmix::Result<()> {
    let spec = SyntheticSpec::new(2, 32, 4, 4);
    let norm = Normalization::default();
    let xu = norm.to_input(&spec.sample(0).1);
    let xl = norm.to_input(&spec.sample(1).1);
    let mixed = mix_images(&xl, &xu, 0.4)?;

    let (net, params) = Network::build(&NetConfig::default(), 4, 0)?;
    let profile = mean_activation_profile(&net, &params, &xu, &mixed, true)?;
    print!("{}", profile.to_csv());
    let higher = profile.mixed.iter().zip(&profile.unlabeled).filter(|(m, u)| m > u).count();
    println!("# mixed input higher in {higher} of {} layers", profile.layers.len());
    Ok(())
}
