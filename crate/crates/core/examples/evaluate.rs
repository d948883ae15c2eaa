//! PSNR and SSIM in the linear and mu-law domains for a few degraded
//! copies of a ground-truth frame.

use hdr_adapt::eval::{EvalConfig, EvalReport};
use hdr_adapt::image::HdrImage;
use hdr_adapt::scene::{generate_sequence, DomainStyle};

fn main() -> hdr_adapt::Result<()> {
    let seq = generate_sequence(&DomainStyle::Synthetic.sample_scene(64, 64, 3, 11))?;
    let gt = seq.frames[seq.reference_index].clone();
    let peak = gt.max_value();
    let pairs: Vec<(String, HdrImage, HdrImage)> = vec![
        ("exact".into(), gt.clone(), gt.clone()),
        ("gain 0.9".into(), gt.scaled(0.9), gt.clone()),
        ("offset".into(), gt.map(|v| v + 0.01 * peak), gt.clone()),
        ("gamma 1.1".into(), gt.map(|v| peak * (v / peak).powf(1.1)), gt.clone()),
    ];
    let report = EvalReport::from_pairs(&pairs, &EvalConfig::default())?;
    print!("{}", report.to_csv());
    Ok(())
}
