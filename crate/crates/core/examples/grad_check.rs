//! Finite-difference check of every primitive and of the full model, once
//! clean and once with a broken softmax backward.
//!
//! cargo run --release --example grad_check

use safe_fusion::autodiff::Fault;
use safe_fusion::config::RunConfig;
use safe_fusion::harness::grad_check;

fn main() -> safe_fusion::Result<()> {
    let mut cfg = RunConfig {
        out_dir: std::env::temp_dir().join("safe_grad_check_demo"),
        ..RunConfig::default()
    };
    let report = grad_check(&cfg)?;
    for p in &report.primitives {
        println!("{:<22} {:.2e}", p["name"].as_str().unwrap_or("?"), p["max_rel_error"].as_f64().unwrap_or(f64::NAN));
    }
    for g in &report.groups {
        println!("{:<22} {:2} coords  {:.2e}  worst {}", g.group, g.coordinates, g.max_rel_error, g.worst);
    }
    println!("clean: pass = {}", report.pass);

    cfg.grad_check.fault = Some(Fault::SoftmaxBackward);
    let broken = grad_check(&cfg)?;
    println!("\nwith a broken softmax backward: pass = {}", broken.pass);
    for f in broken.failures.iter().take(8) {
        println!("  {f}");
    }
    Ok(())
}
