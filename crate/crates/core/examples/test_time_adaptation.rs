//! Single-pass test-time adaptation on a shifted stream, comparing the
//! frozen model with the mean-teacher variants.

use hdr_adapt::experiment::{TtaExperiment, TtaVariant};
use hdr_adapt::model::TrainConfig;

fn main() -> hdr_adapt::Result<()> {
    let seed = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let exp = TtaExperiment {
        source_train: 24,
        stream_len: 12,
        pretrain: TrainConfig {
            epochs: 15,
            ..TtaExperiment::default().pretrain
        },
        ..TtaExperiment::default()
    };
    let splits = exp.splits(seed)?;
    let net = exp.pretrain(&splits, seed)?;
    let rows = exp.run(&net, &splits.calibration, &splits.stream, &TtaVariant::ALL, seed)?;
    println!("{:<16} {:>9} {:>9} {:>9} {:>7}", "variant", "PSNR-mu", "PSNR-l", "SSIM-mu", "mean u");
    for r in rows {
        println!(
            "{:<16} {:>9.3} {:>9.3} {:>9.4} {:>7.3}",
            r.label, r.report.psnr_mu, r.report.psnr_l, r.report.ssim_mu, r.mean_u
        );
    }
    Ok(())
}
