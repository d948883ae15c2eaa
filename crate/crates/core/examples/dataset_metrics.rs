//! Diversity statistics of a handful of procedural frames from each
//! domain, with their 2-D embedding.

use hdr_adapt::metrics::{FeatureVector, MetricsReport};
use hdr_adapt::scene::{generate_sequence, DomainStyle};

fn main() -> hdr_adapt::Result<()> {
    let mut names = Vec::new();
    let mut images = Vec::new();
    for style in [DomainStyle::Synthetic, DomainStyle::Shifted] {
        for i in 0..6u64 {
            let seq = generate_sequence(&style.sample_scene(48, 48, 3, 50 + i))?;
            names.push(format!("{}{i}", style.tag()));
            images.push(seq.frames[seq.reference_index].clone());
        }
    }
    let report = MetricsReport::from_images(names.clone(), &images)?;
    println!("{:>4} {}", "", FeatureVector::NAMES.map(|n| format!("{n:>8}")).join(""));
    for (name, v) in names.iter().zip(&report.per_image) {
        let cols: String = v.to_array().iter().map(|x| format!("{x:>8.2}")).collect();
        println!("{name:>4} {cols}");
    }
    println!("embedding:");
    for (name, p) in names.iter().zip(&report.embedding) {
        println!("  {name}: ({:+.3}, {:+.3})", p[0], p[1]);
    }
    print!("{}", report.to_csv("procedural"));
    Ok(())
}
