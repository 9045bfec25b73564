//! Prompt rendering, the word vocabulary and one text token per class.
//!
//! cargo run --release --example prompts -- [labels file]

use std::path::Path;

use safe_fusion::autodiff::Activation;
use safe_fusion::config::prompt_sweep_templates;
use safe_fusion::nn::Session;
use safe_fusion::params::{ParamInit, ParamStore};
use safe_fusion::text::{encode_labels, read_labels, render_prompt, tokenize, PromptTemplate, TextBranchParams, TextConfig, Vocabulary};

fn main() -> safe_fusion::Result<()> {
    let labels = match std::env::args().nth(1) {
        Some(path) => read_labels(Path::new(&path))?,
        None => vec!["heart 3".into(), "club 7".into(), "spade queen".into(), "diamond 10".into()],
    };
    let cfg = TextConfig::default();
    let mut templates = vec![cfg.template.clone()];
    templates.extend(prompt_sweep_templates());
    for t in &templates {
        let tpl = PromptTemplate::parse(t)?;
        println!("{:<42} -> {}", t, render_prompt(&tpl, &labels[0])?);
    }

    let tpl = cfg.prompt_template()?;
    let prompts: Vec<String> = labels.iter().map(|l| render_prompt(&tpl, l)).collect::<Result<_, _>>()?;
    let vocab = Vocabulary::build(&prompts);
    println!("\nvocabulary of {} words", vocab.len());
    println!("ids for {:?}: {:?}", prompts[0], tokenize(&prompts[0], &vocab, cfg.max_len));
    println!("ids for \"Pouring zzgw!\": {:?}", tokenize("Pouring zzgw!", &vocab, 6));

    let mut store = ParamStore::new();
    let params = TextBranchParams::new(&mut ParamInit::new(&mut store, 0), &cfg, vocab.len(), 64)?;
    let mut s = Session::new(&store, Activation::Gelu);
    let tokens = encode_labels(&mut s, &labels, &tpl, &vocab, cfg.max_len, &params)?;
    let t = s.graph.value(tokens.tokens);
    println!("\ntext tokens {:?}", t.shape());
    for (i, l) in labels.iter().enumerate() {
        println!("  {l:<12} {:+.4?}", &t.row(i)[..4]);
    }
    Ok(())
}
