//! Injects two-branch adapters, perturbs them as training would, folds them
//! back into the host layers and checks the merged network is equivalent.

use hdr_adapt::adapter::{inject, is_adapter_param, merge, AdapterConfig, InjectionPlan};
use hdr_adapt::experiment::DomainSpec;
use hdr_adapt::model::{FusionNet, FusionNetConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> hdr_adapt::Result<()> {
    let base = FusionNet::new(FusionNetConfig::default(), 0)?;
    let mut adapted = inject(&base, &InjectionPlan::all_pointwise(), &AdapterConfig::default())?;
    let spec = adapted.adapters.clone().expect("adapters attached");
    for (layer, l) in &spec.layers {
        println!("{layer:<16} {:>2} -> {:>2}  r_s {}  r_t {}", l.h_in, l.h_out, l.r_s, l.r_t);
    }
    let b = DomainSpec::source().brackets(1, 32, 3, 0, "demo")?.remove(0);
    let before = base.forward(&b)?;
    println!("zero-init output identical: {}", before == adapted.forward(&b)?);

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for (name, t) in adapted.params.iter_mut().filter(|(k, _)| is_adapter_param(k)) {
        let amp = if name.ends_with("alpha_s") || name.ends_with("alpha_t") { 0.3 } else { 0.02 };
        for v in t.data_mut() {
            *v += rng.random_range(-amp..amp);
        }
    }
    let branched = adapted.forward(&b)?;
    let merged = merge(&adapted)?;
    let folded = merged.forward(&b)?;
    let diff = branched
        .data()
        .iter()
        .zip(folded.data())
        .map(|(p, q)| (p - q).abs())
        .fold(0.0f32, f32::max);
    println!(
        "parameters: base {}  adapted {}  merged {}",
        base.param_count(),
        adapted.param_count(),
        merged.param_count()
    );
    println!("max |branched - merged| = {diff:.3e}");
    Ok(())
}
