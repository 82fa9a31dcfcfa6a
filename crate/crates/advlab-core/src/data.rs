//! Synthetic shapes dataset: rendering, captions, tokenizer, and the
//! "DDS1" on-disk container.

use std::io::{Read, Write};
use std::path::Path;

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

pub const PAD: u16 = 0;
pub const BOS: u16 = 1;
pub const EOS: u16 = 2;
pub const SEP: u16 = 3;

/// Fixed vocabulary: 4 specials then 60 words, 64 entries total.
pub const VOCAB: [&str; 64] = [
    "<pad>", "<bos>", "<eos>", "<sep>",
    // colors and shapes
    "red", "green", "blue", "yellow", "circle", "square", "triangle", "cross",
    // positions
    "top", "bottom", "left", "right", "center",
    // caption and prompt glue
    "a", "an", "the", "in", "at", "of", "is", "there", "this", "it", "on", "with",
    "image", "picture", "photo", "scene", "shape", "object",
    "shows", "contains", "side",
    // instruction words
    "describe", "what", "caption", "shown",
    // target-string words
    "sell", "your", "stocks", "now", "visit", "website", "you", "are", "very",
    "stupid", "ignore", "all", "previous", "instructions", "send", "me",
    "password", "click", "link",
    // size descriptors
    "small", "large", "medium",
];

pub fn vocab_size() -> usize {
    VOCAB.len()
}

/// FNV-1a over the vocabulary listing; stored in dataset headers so that
/// files disagree loudly when compiled against different word lists.
pub fn vocab_hash() -> u64 {
    rng::fnv1a64(VOCAB.join("\n").as_bytes())
}

pub fn token_id(word: &str) -> Result<u16> {
    VOCAB
        .iter()
        .position(|w| *w == word)
        .map(|i| i as u16)
        .ok_or_else(|| Error::UnknownWord(word.to_string()))
}

pub fn token_word(id: u16) -> Result<&'static str> {
    VOCAB
        .get(id as usize)
        .copied()
        .ok_or(Error::OutOfVocab { id, vocab_size: VOCAB.len() })
}

/// Token sequence: word ids terminated by exactly one EOS; PAD only after.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSeq {
    pub ids: Vec<u16>,
}

impl TokenSeq {
    /// Whitespace tokenization over the fixed vocabulary; appends EOS.
    pub fn tokenize(text: &str) -> Result<TokenSeq> {
        let mut ids = Vec::new();
        for w in text.split_whitespace() {
            ids.push(token_id(w)?);
        }
        ids.push(EOS);
        Ok(TokenSeq { ids })
    }

    /// Words before the first EOS, joined by single spaces.
    pub fn detokenize(&self) -> Result<String> {
        let mut words = Vec::new();
        for &id in &self.ids {
            if id == EOS {
                break;
            }
            words.push(token_word(id)?);
        }
        Ok(words.join(" "))
    }

    /// Word ids before the terminating EOS.
    pub fn words(&self) -> &[u16] {
        let end = self.ids.iter().position(|&t| t == EOS).unwrap_or(self.ids.len());
        &self.ids[..end]
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let v = vocab_size() as u16;
        let mut seen_eos = false;
        let mut eos_count = 0;
        for &id in &self.ids {
            if id >= v {
                return Err(Error::OutOfVocab { id, vocab_size: v as usize });
            }
            if id == EOS {
                eos_count += 1;
                seen_eos = true;
            } else if id == PAD && !seen_eos {
                return Err(Error::InvalidArgument("PAD before EOS".into()));
            } else if seen_eos && id != PAD {
                return Err(Error::InvalidArgument("token after EOS".into()));
            }
        }
        if eos_count != 1 {
            return Err(Error::InvalidArgument(format!("expected exactly one EOS, found {eos_count}")));
        }
        Ok(())
    }
}

pub const SHAPES: [&str; 4] = ["circle", "square", "triangle", "cross"];
pub const COLORS: [&str; 4] = ["red", "green", "blue", "yellow"];
pub const POSITIONS: [&str; 5] = ["top-left", "top-right", "bottom-left", "bottom-right", "center"];

fn color_rgb(color: usize) -> [f64; 3] {
    match color {
        0 => [0.90, 0.10, 0.10],
        1 => [0.10, 0.80, 0.10],
        2 => [0.10, 0.20, 0.90],
        _ => [0.90, 0.85, 0.10],
    }
}

fn position_center(position: usize) -> (f64, f64) {
    match position {
        0 => (0.25, 0.25),
        1 => (0.75, 0.25),
        2 => (0.25, 0.75),
        3 => (0.75, 0.75),
        _ => (0.5, 0.5),
    }
}

fn position_words(position: usize) -> &'static str {
    match position {
        0 => "top left",
        1 => "top right",
        2 => "bottom left",
        3 => "bottom right",
        _ => "center",
    }
}

/// Complete recipe for one image; the same spec always renders the same
/// pixels and captions the same sentence.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub shape: usize,
    pub color: usize,
    pub position: usize,
    pub size_fraction: f64,
    pub noise_seed: u64,
}

impl SceneSpec {
    pub fn class_label(&self) -> u8 {
        (self.shape * COLORS.len() + self.color) as u8
    }
}

pub fn class_name(label: u8) -> String {
    let shape = (label as usize) / COLORS.len();
    let color = (label as usize) % COLORS.len();
    format!("{} {}", COLORS[color], SHAPES[shape])
}

const NOISE_SIGMA: f64 = 0.02;
const BACKGROUND: f64 = 0.5;

fn inside_shape(shape: usize, dx: f64, dy: f64, r: f64) -> bool {
    match shape {
        0 => dx * dx + dy * dy <= r * r,
        1 => dx.abs() <= r && dy.abs() <= r,
        2 => {
            // Upward triangle: apex at dy=-r, base at dy=+r.
            dy >= -r && dy <= r && dx.abs() <= r * (dy + r) / (2.0 * r)
        }
        _ => (dx.abs() <= r / 3.0 && dy.abs() <= r) || (dy.abs() <= r / 3.0 && dx.abs() <= r),
    }
}

/// Renders one CHW image in [0,1]: noisy gray background with the shape
/// painted over it in flat color.
pub fn render_scene(spec: &SceneSpec, resolution: usize) -> Result<Tensor> {
    if !matches!(resolution, 16 | 32 | 48) {
        return Err(Error::InvalidArgument(format!("unsupported resolution {resolution}")));
    }
    let res = resolution;
    let mut noise_rng = rng::stream(spec.noise_seed, "pixel-noise");
    let mut img = vec![0.0f64; 3 * res * res];
    for c in 0..3 {
        for p in 0..res * res {
            let v = BACKGROUND + NOISE_SIGMA * rng::normal_f64(&mut noise_rng);
            img[c * res * res + p] = v.clamp(0.0, 1.0);
        }
    }
    let (cx, cy) = position_center(spec.position);
    let (cx, cy) = (cx * res as f64, cy * res as f64);
    let r = spec.size_fraction * res as f64 / 2.0;
    let rgb = color_rgb(spec.color);
    for y in 0..res {
        for x in 0..res {
            let dx = (x as f64 + 0.5) - cx;
            let dy = (y as f64 + 0.5) - cy;
            if inside_shape(spec.shape, dx, dy, r) {
                for c in 0..3 {
                    img[c * res * res + y * res + x] = rgb[c];
                }
            }
        }
    }
    Tensor::from_vec(img, &[3, res, res])
}

const CAPTION_TEMPLATES: usize = 4;

fn fill_template(template: usize, color: &str, shape: &str, position: &str) -> String {
    match template {
        0 => format!("a {color} {shape} in the {position}"),
        1 => format!("the {position} shows a {color} {shape}"),
        2 => format!("there is a {color} {shape} at the {position}"),
        _ => format!("this image contains a {color} {shape} in the {position}"),
    }
}

/// Deterministic caption. The template index hashes only the attributes
/// that captions never mention (size and noise seed), so two specs that
/// differ in one visible attribute keep the same template and differ in
/// exactly that attribute's tokens.
pub fn caption_of(spec: &SceneSpec) -> Result<TokenSeq> {
    let mut key = Vec::new();
    key.extend_from_slice(&spec.size_fraction.to_le_bytes());
    key.extend_from_slice(&spec.noise_seed.to_le_bytes());
    let template = (rng::fnv1a64(&key) % CAPTION_TEMPLATES as u64) as usize;
    let text = fill_template(
        template,
        COLORS[spec.color],
        SHAPES[spec.shape],
        position_words(spec.position),
    );
    TokenSeq::tokenize(&text)
}

/// Instruction prompts used for captioner tuning and evaluation.
pub const INSTRUCTIONS: [&str; 4] = [
    "describe the image",
    "what is in the image",
    "caption this picture",
    "what is shown",
];

pub fn instruction_for(index: usize) -> Result<TokenSeq> {
    TokenSeq::tokenize(INSTRUCTIONS[index % INSTRUCTIONS.len()])
}

pub const SPLIT_TRAIN: u8 = 0;
pub const SPLIT_VAL: u8 = 1;

/// In-memory dataset: images are N×3×R×R row-major in [0,1].
#[derive(Debug, Clone)]
pub struct Dataset {
    pub resolution: usize,
    pub images: Vec<f64>,
    pub captions: Vec<TokenSeq>,
    pub labels: Vec<u8>,
    pub splits: Vec<u8>,
    pub specs: Vec<SceneSpec>,
    pub seed: u64,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, index: usize) -> Tensor {
        let px = 3 * self.resolution * self.resolution;
        Tensor::from_vec(self.images[index * px..(index + 1) * px].to_vec(), &[
            3,
            self.resolution,
            self.resolution,
        ])
        .expect("stored image is finite")
    }

    /// Batch of images stacked to B×3×R×R.
    pub fn image_batch(&self, indices: &[usize]) -> Tensor {
        let px = 3 * self.resolution * self.resolution;
        let mut data = Vec::with_capacity(indices.len() * px);
        for &i in indices {
            data.extend_from_slice(&self.images[i * px..(i + 1) * px]);
        }
        Tensor::from_vec(data, &[indices.len(), 3, self.resolution, self.resolution])
            .expect("stored images are finite")
    }

    pub fn indices_of_split(&self, split: u8) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.splits[i] == split).collect()
    }
}

fn draw_spec(rng_: &mut ChaCha8Rng, class: usize) -> SceneSpec {
    let shape = class / COLORS.len();
    let color = class % COLORS.len();
    let position = (rng::uniform_f64(rng_) * POSITIONS.len() as f64) as usize % POSITIONS.len();
    let size_fraction = rng::uniform_in(rng_, 0.2, 0.5);
    let noise_seed = {
        // Two uniform draws give 64 independent bits.
        let hi = (rng::uniform_f64(rng_) * (1u64 << 32) as f64) as u64;
        let lo = (rng::uniform_f64(rng_) * (1u64 << 32) as f64) as u64;
        (hi << 32) | lo
    };
    SceneSpec { shape, color, position, size_fraction, noise_seed }
}

/// Generates N samples balanced over the 16 classes (earlier classes take
/// the remainder), renders them, and assigns every 10th sample to the
/// validation split.
pub fn make_dataset(count: usize, resolution: usize, seed: u64) -> Result<Dataset> {
    if count < 16 {
        return Err(Error::InvalidArgument(format!("dataset needs at least 16 samples, got {count}")));
    }
    if !matches!(resolution, 16 | 32 | 48) {
        return Err(Error::InvalidArgument(format!("unsupported resolution {resolution}")));
    }
    let mut spec_rng = rng::stream(seed, "scene-specs");
    let classes = SHAPES.len() * COLORS.len();
    let px = 3 * resolution * resolution;
    let mut images = Vec::with_capacity(count * px);
    let mut captions = Vec::with_capacity(count);
    let mut labels = Vec::with_capacity(count);
    let mut splits = Vec::with_capacity(count);
    let mut specs = Vec::with_capacity(count);
    for i in 0..count {
        let class = i % classes;
        let spec = draw_spec(&mut spec_rng, class);
        let img = render_scene(&spec, resolution)?;
        images.extend_from_slice(&img.data());
        captions.push(caption_of(&spec)?);
        labels.push(spec.class_label());
        splits.push(if i % 10 == 9 { SPLIT_VAL } else { SPLIT_TRAIN });
        specs.push(spec);
    }
    Ok(Dataset { resolution, images, captions, labels, splits, specs, seed })
}

pub const DDS_MAGIC: [u8; 4] = *b"DDS1";

/// Serializes a dataset. Layout, little-endian:
///   magic "DDS1", u32 N, u32 C, u32 H, u32 W, u64 generator seed,
///   u64 vocabulary hash, N*C*H*W f64 pixels, then per sample u32 token
///   count + u16 ids, then N u8 labels, then N u8 split flags.
pub fn encode_dataset(d: &Dataset) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(&DDS_MAGIC);
    buf.extend_from_slice(&(d.len() as u32).to_le_bytes());
    buf.extend_from_slice(&3u32.to_le_bytes());
    buf.extend_from_slice(&(d.resolution as u32).to_le_bytes());
    buf.extend_from_slice(&(d.resolution as u32).to_le_bytes());
    buf.extend_from_slice(&d.seed.to_le_bytes());
    buf.extend_from_slice(&vocab_hash().to_le_bytes());
    for v in &d.images {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for c in &d.captions {
        buf.extend_from_slice(&(c.ids.len() as u32).to_le_bytes());
        for &id in &c.ids {
            buf.extend_from_slice(&id.to_le_bytes());
        }
    }
    buf.extend_from_slice(&d.labels);
    buf.extend_from_slice(&d.splits);
    buf
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Dataset> {
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize, what: &str| -> Result<&[u8]> {
        if *pos + n > bytes.len() {
            return Err(Error::TruncatedPayload { what: what.to_string() });
        }
        let s = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    let magic = take(&mut pos, 4, "magic")?;
    if magic != DDS_MAGIC {
        return Err(Error::BadMagic { expected: DDS_MAGIC, found: [magic[0], magic[1], magic[2], magic[3]] });
    }
    let rd_u32 = |pos: &mut usize, what: &str| -> Result<u32> {
        let b = take(pos, 4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    };
    let rd_u64 = |pos: &mut usize, what: &str| -> Result<u64> {
        let b = take(pos, 8, what)?;
        Ok(u64::from_le_bytes(b.try_into().unwrap()))
    };
    let n = rd_u32(&mut pos, "sample count")? as usize;
    let c = rd_u32(&mut pos, "channels")? as usize;
    let h = rd_u32(&mut pos, "height")? as usize;
    let w = rd_u32(&mut pos, "width")? as usize;
    if c != 3 || h != w {
        return Err(Error::LengthMismatch { what: format!("unsupported geometry {c}x{h}x{w}") });
    }
    let seed = rd_u64(&mut pos, "seed")?;
    let vhash = rd_u64(&mut pos, "vocab hash")?;
    if vhash != vocab_hash() {
        return Err(Error::LengthMismatch { what: "vocabulary hash".to_string() });
    }
    let px = c * h * w;
    let mut images = Vec::with_capacity(n * px);
    for _ in 0..n * px {
        let b = take(&mut pos, 8, "pixels")?;
        let v = f64::from_le_bytes(b.try_into().unwrap());
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::LengthMismatch { what: format!("pixel {v} outside [0,1]") });
        }
        images.push(v);
    }
    let mut captions = Vec::with_capacity(n);
    for _ in 0..n {
        let len = rd_u32(&mut pos, "token count")? as usize;
        let mut ids = Vec::with_capacity(len);
        for _ in 0..len {
            let b = take(&mut pos, 2, "token ids")?;
            ids.push(u16::from_le_bytes([b[0], b[1]]));
        }
        let seq = TokenSeq { ids };
        seq.validate()?;
        captions.push(seq);
    }
    let labels = take(&mut pos, n, "labels")?.to_vec();
    if labels.iter().any(|&l| l >= 16) {
        return Err(Error::LengthMismatch { what: "label out of range".to_string() });
    }
    let splits = take(&mut pos, n, "split flags")?.to_vec();
    if pos != bytes.len() {
        return Err(Error::LengthMismatch { what: "trailing bytes after payload".to_string() });
    }
    Ok(Dataset { resolution: h, images, captions, labels, splits, specs: Vec::new(), seed })
}

pub fn save_dataset(path: &Path, d: &Dataset) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&encode_dataset(d))?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let mut f = std::fs::File::open(path)?;
    let mut bytes = Vec::new();
    f.read_to_end(&mut bytes)?;
    decode_dataset(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vocab_has_no_duplicates_and_64_entries() {
        let mut sorted: Vec<&str> = VOCAB.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), VOCAB.len());
        assert_eq!(VOCAB.len(), 64);
    }

    #[test]
    fn tokenize_round_trip() {
        for t in 0..CAPTION_TEMPLATES {
            for color in COLORS {
                let s = fill_template(t, color, "circle", "top left");
                let seq = TokenSeq::tokenize(&s).unwrap();
                seq.validate().unwrap();
                assert_eq!(seq.detokenize().unwrap(), s);
            }
        }
    }

    #[test]
    fn render_deterministic_and_center_red() {
        let spec = SceneSpec { shape: 0, color: 0, position: 4, size_fraction: 0.4, noise_seed: 11 };
        let a = render_scene(&spec, 16).unwrap();
        let b = render_scene(&spec, 16).unwrap();
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        let d = a.data();
        let center = 8 * 16 + 8;
        let (r, g, bl) = (d[center], d[256 + center], d[512 + center]);
        assert!(r > g && r > bl, "center pixel r={r} g={g} b={bl}");
        assert!(d.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn unsupported_resolution_rejected() {
        let spec = SceneSpec { shape: 1, color: 1, position: 0, size_fraction: 0.3, noise_seed: 0 };
        assert!(render_scene(&spec, 20).is_err());
    }

    #[test]
    fn caption_mentions_all_attributes() {
        let spec = SceneSpec { shape: 2, color: 3, position: 1, size_fraction: 0.31, noise_seed: 5 };
        let text = caption_of(&spec).unwrap().detokenize().unwrap();
        assert!(text.contains("yellow"), "{text}");
        assert!(text.contains("triangle"), "{text}");
        assert!(text.contains("top right"), "{text}");
    }

    #[test]
    fn color_swap_changes_exactly_one_token() {
        let a = SceneSpec { shape: 1, color: 0, position: 2, size_fraction: 0.27, noise_seed: 9 };
        let b = SceneSpec { color: 2, ..a.clone() };
        let (ta, tb) = (caption_of(&a).unwrap(), caption_of(&b).unwrap());
        assert_eq!(ta.ids.len(), tb.ids.len());
        let diffs = ta.ids.iter().zip(&tb.ids).filter(|(x, y)| x != y).count();
        assert_eq!(diffs, 1);
    }

    #[test]
    fn dataset_balance_and_split() {
        let d = make_dataset(160, 16, 7).unwrap();
        let mut counts = [0usize; 16];
        for &l in &d.labels {
            counts[l as usize] += 1;
        }
        assert!(counts.iter().all(|&c| c == 10));
        assert_eq!(d.indices_of_split(SPLIT_VAL).len(), 16);
        let d17 = make_dataset(17, 16, 7).unwrap();
        let mut c17 = [0usize; 16];
        for &l in &d17.labels {
            c17[l as usize] += 1;
        }
        assert_eq!(c17[0], 2);
        assert!(c17[1..].iter().all(|&c| c == 1));
    }

    #[test]
    fn dataset_deterministic() {
        let a = make_dataset(32, 16, 42).unwrap();
        let b = make_dataset(32, 16, 42).unwrap();
        assert_eq!(a.labels, b.labels);
        assert_eq!(a.captions, b.captions);
        assert!(a.images.iter().zip(&b.images).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn same_seed_same_specs_across_resolutions() {
        let a = make_dataset(32, 16, 3).unwrap();
        let b = make_dataset(32, 32, 3).unwrap();
        assert_eq!(a.specs, b.specs);
        assert_eq!(a.captions, b.captions);
    }

    #[test]
    fn dds1_round_trip_bitwise() {
        let d = make_dataset(16, 16, 1).unwrap();
        let bytes = encode_dataset(&d);
        let back = decode_dataset(&bytes).unwrap();
        assert_eq!(back.labels, d.labels);
        assert_eq!(back.splits, d.splits);
        assert_eq!(back.captions, d.captions);
        assert!(back.images.iter().zip(&d.images).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert_eq!(encode_dataset(&back), bytes);
    }

    #[test]
    fn dds1_corruption_errors_are_distinct() {
        let d = make_dataset(16, 16, 1).unwrap();
        let bytes = encode_dataset(&d);
        let mut bad_magic = bytes.clone();
        bad_magic[1] = b'X';
        assert!(matches!(decode_dataset(&bad_magic), Err(Error::BadMagic { .. })));
        let truncated = &bytes[..bytes.len() - 1];
        assert!(matches!(decode_dataset(truncated), Err(Error::TruncatedPayload { .. })));
        let mut trailing = bytes.clone();
        trailing.push(7);
        assert!(matches!(decode_dataset(&trailing), Err(Error::LengthMismatch { .. })));
    }
}
