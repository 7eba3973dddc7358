#![allow(dead_code)]

use std::collections::BTreeMap;

use guidedmix::data::{make_batches, AugmentPolicy, DatasetSplit, SyntheticSpec};
use guidedmix::network::{NetConfig, Network};
use guidedmix::pairing::pair_random;
use guidedmix::params::ParamStore;
use guidedmix::training::{step_gradients, step_loss, StepInputs, StepSettings, TrainConfig, TrainData};

/// In-memory shapes data: the first `n_labeled` of `n_train` training
/// images keep their masks, `n_val` further images form the validation set.
pub fn toy_data(n_train: usize, n_labeled: usize, n_val: usize, size: usize, classes: usize, seed: u64) -> TrainData {
    let spec = SyntheticSpec::new(n_train, size, classes, seed);
    let mut labeled = Vec::new();
    let mut unlabeled = Vec::new();
    for i in 0..n_train {
        let (_, image, mask) = spec.sample(i);
        if i < n_labeled {
            labeled.push((image, mask));
        } else {
            unlabeled.push(image);
        }
    }
    let val = (n_train..n_train + n_val)
        .map(|i| {
            let (_, image, mask) = spec.sample(i);
            (image, mask)
        })
        .collect();
    TrainData {
        train: DatasetSplit::from_memory(labeled, unlabeled, spec.class_names()).unwrap(),
        val: DatasetSplit::from_memory(val, Vec::new(), spec.class_names()).unwrap(),
    }
}

/// Desk-scale recipe: 32-pixel crops, tiny encoder, batch 4.
pub fn toy_config(max_iter: u64) -> TrainConfig {
    TrainConfig {
        base_lr: 0.01,
        max_iter,
        batch_size: 4,
        log_interval: 50,
        augment: AugmentPolicy {
            crop_size: 32,
            scale_min: 0.75,
            scale_max: 1.5,
            ..AugmentPolicy::default()
        },
        ..TrainConfig::default()
    }
}

/// Relative error `‖g_num − g_ana‖ / max(‖g_num‖, ‖g_ana‖)` per parameter
/// group of the whole objective on a 16×16, two-class model. Targets of the
/// consistency terms are frozen at their analytic-pass values.
pub fn gradcheck(settings_of: impl Fn(&TrainConfig) -> StepSettings) -> BTreeMap<String, f64> {
    let data = toy_data(4, 2, 0, 16, 2, 3);
    let cfg = TrainConfig {
        batch_size: 2,
        augment: AugmentPolicy::crop_only(16),
        network: NetConfig {
            width: 4,
            decoder_width: 4,
            ..NetConfig::default()
        },
        ..TrainConfig::default()
    };
    let split = &data.train;
    let (net, params) = Network::build(&cfg.network, 2, 11).unwrap();
    let mut stream = make_batches(split, 2, cfg.augment.clone(), 0, |l, u, rng| pair_random(l.len(), u.len(), rng)).unwrap();
    let batch = stream.next().unwrap().unwrap();
    let inputs = StepInputs::from_batch(&batch, &split.normalization, &cfg);
    let settings = settings_of(&cfg);
    let analytic = step_gradients(&net, &params, &inputs, &settings, None).unwrap();
    let frozen = analytic.targets.clone();
    let loss = |p: &ParamStore| step_loss(&net, p, &inputs, &settings, frozen.as_ref()).unwrap();

    let h = 1e-5;
    let mut perturbed = params.clone();
    let mut num: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut ana: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for id in params.ids().collect::<Vec<_>>() {
        let group = params.group(id).to_string();
        let n = params.get(id).len();
        // every scalar of small tensors, a strided subset of large ones
        for j in (0..n).step_by((n / 24).max(1)) {
            let orig = perturbed.get(id).data()[j];
            perturbed.get_mut(id).data_mut()[j] = orig + h;
            let up = loss(&perturbed);
            perturbed.get_mut(id).data_mut()[j] = orig - h;
            let down = loss(&perturbed);
            perturbed.get_mut(id).data_mut()[j] = orig;
            num.entry(group.clone()).or_default().push((up - down) / (2.0 * h));
            ana.entry(group.clone()).or_default().push(analytic.grads.get(id).data()[j]);
        }
    }
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    num.into_iter()
        .map(|(g, n)| {
            let a = &ana[&g];
            let diff: Vec<f64> = n.iter().zip(a).map(|(x, y)| x - y).collect();
            let scale = norm(&n).max(norm(a));
            let err = if scale == 0.0 { 0.0 } else { norm(&diff) / scale };
            (g, err)
        })
        .collect()
}
