//! Prints a Perlin camera-shake trajectory and its frame-to-frame steps.

use hdr_adapt::scene::{perlin_shake, ShakeSpec};

fn main() {
    let spec = ShakeSpec::default();
    let track = perlin_shake(&spec, 16, 42);
    println!("{:>5} {:>8} {:>8} {:>8}", "frame", "dx", "dy", "dtheta");
    for (t, s) in track.iter().enumerate() {
        println!("{t:>5} {:>8.3} {:>8.3} {:>8.3}", s.dx, s.dy, s.dtheta);
    }
    let max_step = track
        .windows(2)
        .map(|w| (w[1].dx - w[0].dx).hypot(w[1].dy - w[0].dy))
        .fold(0.0, f64::max);
    println!("largest per-frame translation {max_step:.3} px (amplitude {} px)", spec.amplitude_px);
}
