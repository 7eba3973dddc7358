//! Pair unlabeled images with their nearest labeled image in the pooled
//! feature space of a freshly built network, next to a random pairing.

use guidedmix::data::{Normalization, SyntheticSpec};
use guidedmix::network::{NetConfig, Network};
use guidedmix::pairing::{euclidean_distance, pair_random, pair_similar, pooled_features};
use guidedmix::rng::keyed;

fn main() -> guidedmix::Result<()> {
    let spec = SyntheticSpec::new(12, 32, 4, 3);
    let images: Vec<_> = (0..12).map(|i| spec.sample(i).1).collect();
    let (labeled, unlabeled) = images.split_at(4);

    let (net, params) = Network::build(&NetConfig::default(), 4, 0)?;
    let norm = Normalization::default();
    let lf = pooled_features(&net, &params, &norm, labeled)?;
    let uf = pooled_features(&net, &params, &norm, unlabeled)?;

    let similar = pair_similar(&lf, &uf)?;
    let random = pair_random(lf.len(), uf.len(), &mut keyed(0, &[]))?;
    let (mut sum_s, mut sum_r) = (0.0, 0.0);
    for k in 0..uf.len() {
        let s = similar.partner(k).expect("total pairing");
        let r = random.partner(k).expect("total pairing");
        let (ds, dr) = (euclidean_distance(&lf[s], &uf[k])?, euclidean_distance(&lf[r], &uf[k])?);
        sum_s += ds;
        sum_r += dr;
        println!("{} -> similar {} ({ds:.4}), random {} ({dr:.4})", uf[k].id, lf[s].id, lf[r].id);
    }
    println!("mean distance: similar {:.4}, random {:.4}", sum_s / uf.len() as f64, sum_r / uf.len() as f64);
    Ok(())
}
