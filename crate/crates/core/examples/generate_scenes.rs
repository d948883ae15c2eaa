//! Generates one procedural sequence per domain and writes them to disk.
//!
//! cargo run --release --example generate_scenes -- [out_dir]

use std::path::PathBuf;

use hdr_adapt::image::{luminance, robust_max};
use hdr_adapt::scene::{export_sequence, generate_sequence, DomainStyle};

fn main() -> hdr_adapt::Result<()> {
    let out: PathBuf = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("hdr-adapt-scenes"));
    for (i, style) in [DomainStyle::Synthetic, DomainStyle::Shifted].into_iter().enumerate() {
        let spec = style.sample_scene(96, 64, 5, 7 + i as u64);
        let seq = generate_sequence(&spec)?;
        let visible: usize = seq.occlusion.iter().map(|m| m.data.iter().filter(|&&v| v == 1).count()).sum();
        let total: usize = seq.occlusion.iter().map(|m| m.data.len()).sum();
        let peak = luminance(&seq.frames[seq.reference_index]).data.iter().cloned().fold(0.0, f64::max);
        println!(
            "domain {}: {} sprites, {:?} background, shake {}, robust max {:.3}, peak {:.3}, visible {:.1}%",
            style.tag(),
            spec.sprites.len(),
            spec.background,
            spec.shake.is_some(),
            robust_max(&seq.frames),
            peak,
            100.0 * visible as f64 / total as f64
        );
        let dir = out.join(format!("seq_{}", style.tag()));
        export_sequence(&seq, &dir)?;
        println!("  written to {}", dir.display());
    }
    Ok(())
}
