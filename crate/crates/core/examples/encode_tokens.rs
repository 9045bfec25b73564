//! Token shapes through the frame encoders at desk and full scale.
//!
//! cargo run --release --example encode_tokens

use safe_fusion::autodiff::Activation;
use safe_fusion::encoders::{clip_patches, encode_clip, patchify_embed, EncoderConfig, EncoderParams, Modality};
use safe_fusion::image::Image;
use safe_fusion::nn::Session;
use safe_fusion::params::{ParamInit, ParamStore};
use safe_fusion::synth::{synth_dataset, SynthSpec};

fn main() -> safe_fusion::Result<()> {
    let desk = EncoderConfig::default();
    let mut store = ParamStore::new();
    let params = EncoderParams::new(&mut ParamInit::new(&mut store, 0), "rgb", &desk)?;
    let sample = &synth_dataset(&SynthSpec { frames: 5, samples_per_class: 1, ..SynthSpec::default() }, 0)?[0];
    let patches = clip_patches(sample.clip.frames(), &desk)?;
    let mut s = Session::new(&store, Activation::Gelu);
    let seqs = encode_clip(&mut s, &patches, &desk, &params, Modality::Vision, true)?;
    println!(
        "desk: image {} patch {} -> {} frames of {:?} tokens, {} parameters",
        desk.image_size,
        desk.patch_size,
        seqs.len(),
        s.graph.shape(seqs[0].tokens),
        store.total_numel()
    );

    // Full scale: the embedding alone, since 12 blocks of width 768 need ~700 MB.
    let full = EncoderConfig { depth: 0, shallow_depth: 0, ..EncoderConfig::full_scale() };
    let mut store = ParamStore::new();
    let params = EncoderParams::new(&mut ParamInit::new(&mut store, 0), "rgb", &full)?;
    let frame = Image::filled(346, 260, 3, 0.5);
    let mut s = Session::new(&store, Activation::Gelu);
    let tokens = patchify_embed(&mut s, &frame, &full, &params, Modality::Vision)?;
    println!(
        "full scale: 346x260 frame resized to {} with patch {} -> {:?} tokens",
        full.image_size,
        full.patch_size,
        s.graph.shape(tokens.tokens)
    );
    Ok(())
}
