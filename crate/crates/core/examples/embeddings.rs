//! Trains briefly, then compares pooled features: mean cosine similarity
//! within a class against across classes.
//!
//! cargo run --release --example embeddings -- [epochs]

use safe_fusion::config::RunConfig;
use safe_fusion::harness::{prepared_split, train_and_evaluate, Split};

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (norm(a) * norm(b))
}

fn main() -> safe_fusion::Result<()> {
    let epochs = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(30);
    let mut cfg = RunConfig::default();
    cfg.optim.epochs = epochs;
    let run = train_and_evaluate(&cfg, cfg.switches, |_| {})?;
    println!("held-out top1 {:.3}", run.eval.top1);

    let test = prepared_split(&cfg, Split::Test)?;
    let feats: Vec<(usize, Vec<f64>)> = test
        .iter()
        .map(|x| run.model.predict(x, cfg.switches).map(|(_, pooled)| (x.label, pooled)))
        .collect::<safe_fusion::Result<_>>()?;
    let (mut same, mut cross) = (Vec::new(), Vec::new());
    for (i, (la, a)) in feats.iter().enumerate() {
        for (lb, b) in &feats[i + 1..] {
            if la == lb { same.push(cosine(a, b)) } else { cross.push(cosine(a, b)) }
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    println!("mean cosine: same class {:.3}, different class {:.3}", mean(&same), mean(&cross));
    Ok(())
}
