//! Probes the first task epoch by epoch and prints how pos and neg move
//! until neg has drifted by alpha.
//!
//!     cargo run --release --example adaptive_epochs -- [alpha]

use mgclip::protocol::{run, MethodVariant, RunConfig};

fn main() -> mgclip::Result<()> {
    let mut cfg = RunConfig {
        method: MethodVariant::MgpOnly,
        ..RunConfig::default()
    };
    if let Some(alpha) = std::env::args().nth(1) {
        cfg.preservation.alpha = alpha
            .parse()
            .map_err(|_| mgclip::Error::InvalidConfig(format!("bad alpha {alpha:?}")))?;
    }
    let result = run(&cfg)?;
    let probe = result.probe.expect("gap-preserving method probes");
    println!("epoch  pos      neg      delta");
    for r in &probe.probe_trace {
        let flag = if r.delta >= cfg.preservation.alpha { "  <- stop" } else { "" };
        println!("{:>5}  {:.4}   {:.4}   {:.4}{flag}", r.epoch, r.pos, r.neg, r.delta);
    }
    println!(
        "budget: {} epoch(s) per task{}",
        probe.epochs,
        if probe.capped { " (probe cap reached)" } else { "" }
    );
    println!("Avg {:.4}  Last {:.4}", result.avg, result.last);
    Ok(())
}
