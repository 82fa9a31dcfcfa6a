//! Checkpoint packing for the two artifact kinds: a dual encoder, and a
//! captioner bundled with its (tuned) vision tower. Model geometry is
//! recovered from tensor shapes, so files carry no side metadata.

use std::path::Path;

use advlab_core::checkpoint;
use advlab_core::models::{load_named, CaptionerParams, DualEncoderParams, VisionEncoder};
use advlab_core::rng::stream;
use advlab_core::tensor::Tensor;
use advlab_core::{Error, Result};

fn shape_of<'a>(src: &'a [(String, Tensor)], name: &str) -> Result<Vec<usize>> {
    src.iter()
        .find(|(n, _)| n == name)
        .map(|(_, t)| t.shape())
        .ok_or_else(|| Error::LengthMismatch { what: format!("checkpoint entry {name}") })
}

fn resolution_from_patch(shape: &[usize]) -> Result<usize> {
    // patch_w is [3*p*p, width]; the grid is 4x4 patches.
    let p2 = shape[0] / 3;
    let p = (p2 as f64).sqrt().round() as usize;
    if p * p != p2 || shape[0] != 3 * p * p {
        return Err(Error::LengthMismatch { what: "patch embedding shape".into() });
    }
    Ok(p * 4)
}

pub fn save_encoder(path: &Path, enc: &DualEncoderParams) -> Result<()> {
    checkpoint::save(path, &enc.named_params())
}

pub fn load_encoder(path: &Path) -> Result<DualEncoderParams> {
    let src = checkpoint::load(path)?;
    let resolution = resolution_from_patch(&shape_of(&src, "vision.patch_embed.w")?)?;
    let vocab = shape_of(&src, "text.tok")?[0];
    let enc = DualEncoderParams::init(0, resolution, vocab)?;
    load_named(&enc.named_params(), &src)?;
    Ok(enc)
}

pub fn save_captioner(path: &Path, cap: &CaptionerParams, vision: &VisionEncoder) -> Result<()> {
    let mut entries = cap.named_params();
    vision.collect("vision", &mut entries);
    checkpoint::save(path, &entries)
}

pub fn load_captioner(path: &Path) -> Result<(CaptionerParams, VisionEncoder)> {
    let src = checkpoint::load(path)?;
    let cap_src: Vec<(String, Tensor)> =
        src.iter().filter(|(n, _)| n.starts_with("cap.")).cloned().collect();
    let vis_src: Vec<(String, Tensor)> =
        src.iter().filter(|(n, _)| n.starts_with("vision.")).cloned().collect();
    let vocab = shape_of(&cap_src, "cap.tok")?[0];
    let resolution = resolution_from_patch(&shape_of(&vis_src, "vision.patch_embed.w")?)?;
    let cap = CaptionerParams::init(0, vocab)?;
    load_named(&cap.named_params(), &cap_src)?;
    let vision = VisionEncoder::init(&mut stream(0, "load"), resolution)?;
    let mut dst = Vec::new();
    vision.collect("vision", &mut dst);
    load_named(&dst, &vis_src)?;
    Ok((cap, vision))
}
