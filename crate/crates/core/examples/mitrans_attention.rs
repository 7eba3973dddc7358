//! Run the non-local transfer block on a mixed image and inspect the
//! attention map and the change it makes to the features.

use guidedmix::data::{Normalization, SyntheticSpec};
use guidedmix::mixing::mix_images;
use guidedmix::network::{pad_to_stride, NetConfig, Network};
use guidedmix::tape::Tape;

fn main() -> guidedmix::Result<()> {
    let spec = SyntheticSpec::new(2, 64, 4, 9);
    let norm = Normalization::default();
    let x = mix_images(&norm.to_input(&spec.sample(0).1), &norm.to_input(&spec.sample(1).1), 0.3)?;

    let (net, params) = Network::build(&NetConfig::default(), 4, 1)?;
    let mut tape = Tape::new(&params);
    let input = tape.constant(pad_to_stride(&x));
    let f = net.forward(&mut tape, input, true)?;

    let (c, h, w) = tape.value(f.v_j).chw();
    let n = h * w;
    println!("v_j: {c} channels on a {h}x{w} grid ({n} positions)");
    let node = tape.attention_nodes()[0];
    let attn = tape.attention_map(node).expect("attention node");
    for (i, row) in attn.chunks(n).enumerate() {
        let sum: f64 = row.iter().sum();
        let (best, weight) = row
            .iter()
            .enumerate()
            .fold((0, f64::MIN), |acc, (j, &v)| if v > acc.1 { (j, v) } else { acc });
        println!("position {i:2}: row sum {sum:.6}, strongest link to {best:2} ({weight:.3})");
    }
    let delta = tape.value(f.v_prime).max_abs_diff(tape.value(f.v_j));
    println!("max |v' − v_j| = {delta:.4}");
    Ok(())
}
