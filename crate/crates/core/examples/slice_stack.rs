//! Build 2.5D slice stacks from a volume and apply the training augmentations.
//!
//! cargo run --release --example slice_stack

use faultsam::data::{augment, channel_indices, extract_stack, hflip, AugmentParams, AugmentSet};
use faultsam::synth::{generate_volume, SynthParams};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> faultsam::Result<()> {
    let (vol, mask) = generate_volume(&SynthParams::default())?;
    let nx = vol.dims()[1];
    for (i, m) in [(0, 3), (10, 5), (63, 7)] {
        println!("crossline {i}, M={m}: channels from {:?}", channel_indices(i, m, nx));
    }
    let s = extract_stack(&vol, &mask, 10, 5)?;
    println!(
        "stack {}x{}x{}, fault pixels {}",
        s.m(),
        s.height,
        s.width,
        s.target.iter().filter(|&&v| v == 1).count()
    );
    assert_eq!(hflip(&hflip(&s)), s);

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let params = AugmentParams::default();
    for set in [AugmentSet::None, AugmentSet::Hflip, AugmentSet::Affine, AugmentSet::All] {
        let a = augment(&s, set, &params, &mut rng);
        let pos = a.target.iter().filter(|&&v| v == 1).count();
        println!("{:>7}: fault pixels {pos}", set.name());
    }
    Ok(())
}
