//! Trains the fusion network on a few procedural brackets and reports the
//! loss curve and held-out scores.

use hdr_adapt::eval::EvalConfig;
use hdr_adapt::experiment::{evaluate_net, DomainSpec};
use hdr_adapt::model::{samples_from_brackets, train, FusionNetConfig, TrainConfig};

fn main() -> hdr_adapt::Result<()> {
    let source = DomainSpec::source();
    let train_set = source.brackets(16, 32, 3, 0, "train")?;
    let test_set = source.brackets(4, 32, 3, 0, "test")?;
    let cfg = TrainConfig {
        epochs: 15,
        lr: 3e-4,
        ..TrainConfig::default()
    };
    let (net, report) = train(&samples_from_brackets(&train_set)?, FusionNetConfig::default(), &cfg)?;
    for (e, l) in report.epoch_losses.iter().enumerate() {
        println!("epoch {:>2}  loss {l:.5}", e + 1);
    }
    let scores = evaluate_net(&net, &test_set, &EvalConfig::default())?;
    println!(
        "held-out: PSNR-mu {:.2} dB  PSNR-l {:.2} dB  SSIM-mu {:.4}  ({} parameters)",
        scores.psnr_mu,
        scores.psnr_l,
        scores.ssim_mu,
        net.param_count()
    );
    Ok(())
}
