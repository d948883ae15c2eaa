//! A reduced adaptation ablation: pretrain on domain A, adapt to domain B
//! with each method, score both domains.
//!
//! cargo run --release --example supervised_adaptation -- [seed]

use hdr_adapt::experiment::{AdaptMethod, AdaptationExperiment};
use hdr_adapt::model::TrainConfig;

fn main() -> hdr_adapt::Result<()> {
    let seed = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let exp = AdaptationExperiment {
        source_train: 24,
        target_train: 8,
        source_test: 4,
        target_test: 4,
        pretrain: TrainConfig {
            epochs: 15,
            ..AdaptationExperiment::default().pretrain
        },
        adapt: TrainConfig {
            epochs: 15,
            ..AdaptationExperiment::default().adapt
        },
        ..AdaptationExperiment::default()
    };
    let splits = exp.splits(seed)?;
    let net = exp.pretrain(&splits, seed)?;
    let rows = exp.run(&net, &splits, &AdaptMethod::ALL, seed)?;
    println!("{:<22} {:>10} {:>10} {:>10} {:>10} {:>10}", "method", "B PSNR-mu", "B PSNR-l", "B SSIM-mu", "A PSNR-mu", "params");
    for r in rows {
        println!(
            "{:<22} {:>10.3} {:>10.3} {:>10.4} {:>10.3} {:>10}",
            r.label, r.target.psnr_mu, r.target.psnr_l, r.target.ssim_mu, r.source.psnr_mu, r.trained_params
        );
    }
    Ok(())
}
