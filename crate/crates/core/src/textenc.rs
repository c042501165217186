//! Word-level prompt embeddings.
//!
//! Each token maps through a seeded hash to a fixed unit-norm vector, so an
//! embedding is a pure function of `(prompt, L, D, seed)`. Externally computed
//! encoder outputs can be loaded from the `TEMB` container instead.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::diff::params::{fnv1a, mix_seed};
use crate::diff::{Scalar, Tensor};
use crate::error::{Error, Result};

pub const BEGIN_TOKEN: &str = "<bos>";
pub const PAD_TOKEN: &str = "<pad>";

/// `L × D` matrix of per-token embedding rows.
#[derive(Debug, Clone, PartialEq)]
pub struct TextEmbedding {
    data: Vec<f32>,
    len: usize,
    width: usize,
}

impl TextEmbedding {
    pub fn from_rows(data: Vec<f32>, len: usize, width: usize) -> Result<Self> {
        if data.len() != len * width || len == 0 || width == 0 {
            return Err(Error::Dimension(format!(
                "embedding buffer of {} values is not {len}×{width}",
                data.len()
            )));
        }
        Ok(TextEmbedding { data, len, width })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.width..(i + 1) * self.width]
    }

    /// A constant `[L, D]` tensor.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::new(self.data.iter().map(|v| T::lit(*v as f64)).collect(), &[self.len, self.width])
            .expect("shape checked at construction")
    }

    /// A `[L, D]` leaf that receives gradients.
    pub fn to_param<T: Scalar>(&self) -> Tensor<T> {
        Tensor::param(self.data.iter().map(|v| T::lit(*v as f64)).collect(), &[self.len, self.width])
            .expect("shape checked at construction")
    }
}

/// Lowercased alphanumeric runs.
pub fn tokenize(prompt: &str) -> Vec<String> {
    prompt
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| t.to_lowercase())
        .collect()
}

/// Unit-norm vector assigned to `token`.
pub fn token_vector(token: &str, width: usize, seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, fnv1a(token.as_bytes())));
    let raw: Vec<f64> = (0..width).map(|_| rng.sample(StandardNormal)).collect();
    let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
    raw.iter().map(|v| (v / norm) as f32).collect()
}

/// Begin marker, then one row per token, truncated or padded to `len` rows.
pub fn embed(prompt: &str, len: usize, width: usize, seed: u64) -> Result<TextEmbedding> {
    if prompt.trim().is_empty() {
        return Err(Error::EmptyPrompt);
    }
    if len == 0 || width == 0 {
        return Err(Error::Dimension(format!("embedding shape {len}×{width}")));
    }
    let tokens = tokenize(prompt);
    let mut data = Vec::with_capacity(len * width);
    data.extend(token_vector(BEGIN_TOKEN, width, seed));
    for t in tokens.iter().take(len - 1) {
        data.extend(token_vector(t, width, seed));
    }
    let pad = token_vector(PAD_TOKEN, width, seed);
    while data.len() < len * width {
        data.extend_from_slice(&pad);
    }
    TextEmbedding::from_rows(data, len, width)
}

/// Rowwise `(1 − t)·a + t·b`.
pub fn interpolate(a: &TextEmbedding, b: &TextEmbedding, t: f64) -> Result<TextEmbedding> {
    if a.len != b.len || a.width != b.width {
        return Err(Error::ShapeMismatch {
            op: "interpolate",
            lhs: vec![a.len, a.width],
            rhs: vec![b.len, b.width],
        });
    }
    let t = t as f32;
    let data = a.data.iter().zip(&b.data).map(|(x, y)| (1.0 - t) * x + t * y).collect();
    TextEmbedding::from_rows(data, a.len, a.width)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ViewDirection {
    Front,
    Side,
    Back,
}

impl ViewDirection {
    /// Front covers [315°, 45°), back [135°, 225°), side the rest.
    pub fn from_azimuth(azimuth_deg: f64) -> Self {
        let a = azimuth_deg.rem_euclid(360.0);
        if !(45.0..315.0).contains(&a) {
            ViewDirection::Front
        } else if (135.0..225.0).contains(&a) {
            ViewDirection::Back
        } else {
            ViewDirection::Side
        }
    }

    pub fn suffix(self) -> &'static str {
        match self {
            ViewDirection::Front => ", front view",
            ViewDirection::Side => ", side view",
            ViewDirection::Back => ", back view",
        }
    }
}

pub fn augment_direction(prompt: &str, azimuth_deg: f64) -> String {
    format!("{prompt}{}", ViewDirection::from_azimuth(azimuth_deg).suffix())
}

/// Splits a direction suffix added by [`augment_direction`] off `prompt`.
pub fn strip_direction(prompt: &str) -> (&str, Option<ViewDirection>) {
    for d in [ViewDirection::Front, ViewDirection::Side, ViewDirection::Back] {
        if let Some(base) = prompt.strip_suffix(d.suffix()) {
            return (base, Some(d));
        }
    }
    (prompt, None)
}

/// Non-empty list of unique prompts; a prompt's id is its index.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptSet {
    prompts: Vec<String>,
}

impl PromptSet {
    pub fn new(prompts: Vec<String>) -> Result<Self> {
        if prompts.is_empty() {
            return Err(Error::InvalidArgument("prompt set is empty".into()));
        }
        for (i, p) in prompts.iter().enumerate() {
            if p.trim().is_empty() {
                return Err(Error::EmptyPrompt);
            }
            if prompts[..i].contains(p) {
                return Err(Error::InvalidArgument(format!("duplicate prompt `{p}`")));
            }
        }
        Ok(PromptSet { prompts })
    }

    /// 32 prompts following "a {species} sitting {item} and wearing {gadget}".
    pub fn builtin() -> Self {
        const SPECIES: [&str; 4] = ["corgi", "tabby cat", "panda", "owl"];
        const ITEMS: [&str; 4] = ["on a red chair", "on a blue sofa", "in a green basket", "on a wooden bench"];
        const GADGETS: [&str; 2] = ["a yellow scarf", "purple sunglasses"];
        let mut prompts = Vec::with_capacity(32);
        for s in SPECIES {
            for i in ITEMS {
                for g in GADGETS {
                    prompts.push(format!("a {s} sitting {i} and wearing {g}"));
                }
            }
        }
        PromptSet { prompts }
    }

    pub fn len(&self) -> usize {
        self.prompts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prompts.is_empty()
    }

    pub fn get(&self, id: usize) -> Option<&str> {
        self.prompts.get(id).map(|s| s.as_str())
    }

    pub fn id_of(&self, prompt: &str) -> Option<usize> {
        self.prompts.iter().position(|p| p == prompt)
    }

    pub fn iter(&self) -> impl Iterator<Item = &str> {
        self.prompts.iter().map(|s| s.as_str())
    }
}

pub const EMBEDDING_MAGIC: &[u8; 4] = b"TEMB";
pub const EMBEDDING_VERSION: u32 = 1;

/// `"TEMB" | version | count | L | D | (id: u32, L·D f32)*`, little-endian.
pub fn encode_embeddings(entries: &BTreeMap<u32, TextEmbedding>) -> Result<Vec<u8>> {
    let (len, width) = match entries.values().next() {
        Some(e) => (e.len, e.width),
        None => (0, 0),
    };
    let mut out = Vec::new();
    out.extend_from_slice(EMBEDDING_MAGIC);
    for v in [EMBEDDING_VERSION, entries.len() as u32, len as u32, width as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for (id, e) in entries {
        if e.len != len || e.width != width {
            return Err(Error::Dimension(format!(
                "embedding {id} is {}×{}, container is {len}×{width}",
                e.len, e.width
            )));
        }
        out.extend_from_slice(&id.to_le_bytes());
        e.data.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
    }
    Ok(out)
}

/// Parses a `TEMB` buffer; `expect` pins `(L, D)` when given.
pub fn decode_embeddings(bytes: &[u8], expect: Option<(usize, usize)>) -> Result<BTreeMap<u32, TextEmbedding>> {
    let bad = |d: &str| Error::format("embedding", d.to_string());
    if bytes.len() < 20 || &bytes[..4] != EMBEDDING_MAGIC {
        return Err(bad("bad magic"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
    let version = word(4);
    if version != EMBEDDING_VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let (count, len, width) = (word(8) as usize, word(12) as usize, word(16) as usize);
    if let Some((el, ed)) = expect {
        if (el, ed) != (len, width) {
            return Err(Error::Dimension(format!(
                "embedding container is {len}×{width}, config expects {el}×{ed}"
            )));
        }
    }
    let rec = 4 + len * width * 4;
    if bytes.len() != 20 + count * rec {
        return Err(bad("payload size does not match header"));
    }
    let mut out = BTreeMap::new();
    for k in 0..count {
        let base = 20 + k * rec;
        let id = word(base);
        let data = bytes[base + 4..base + rec]
            .chunks(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.insert(id, TextEmbedding::from_rows(data, len, width)?);
    }
    Ok(out)
}

pub fn export_embeddings(path: &Path, entries: &BTreeMap<u32, TextEmbedding>) -> Result<()> {
    std::fs::write(path, encode_embeddings(entries)?).map_err(|e| Error::io(path, e))
}

pub fn import_embeddings(path: &Path, expect: Option<(usize, usize)>) -> Result<BTreeMap<u32, TextEmbedding>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_embeddings(&bytes, expect)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn embedding_is_deterministic() {
        let a = embed("a red car", 8, 16, 3).unwrap();
        let b = embed("a red car", 8, 16, 3).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn changed_token_changes_only_its_row() {
        let a = embed("red car", 6, 16, 3).unwrap();
        let b = embed("blue car", 6, 16, 3).unwrap();
        for i in 0..6 {
            assert_eq!(a.row(i) == b.row(i), i != 1, "row {i}");
        }
    }

    #[test]
    fn empty_prompt_rejected() {
        assert!(matches!(embed("   ", 4, 4, 0), Err(Error::EmptyPrompt)));
    }

    #[test]
    fn truncates_and_pads() {
        let long = embed("one two three four five six", 3, 4, 0).unwrap();
        assert_eq!(long.len(), 3);
        assert_eq!(long.row(2), token_vector("two", 4, 0).as_slice());
        let short = embed("one", 4, 4, 0).unwrap();
        assert_eq!(short.row(2), short.row(3));
        assert!(short.row(3).iter().any(|v| *v != 0.0));
    }

    #[test]
    fn view_sectors() {
        assert_eq!(augment_direction("a dog", 0.0), "a dog, front view");
        assert_eq!(augment_direction("a dog", 180.0), "a dog, back view");
        assert_eq!(augment_direction("a dog", 90.0), "a dog, side view");
        assert_eq!(ViewDirection::from_azimuth(45.0), ViewDirection::Side);
        assert_eq!(ViewDirection::from_azimuth(44.999), ViewDirection::Front);
        assert_eq!(ViewDirection::from_azimuth(135.0), ViewDirection::Back);
        assert_eq!(ViewDirection::from_azimuth(225.0), ViewDirection::Side);
        assert_eq!(ViewDirection::from_azimuth(315.0), ViewDirection::Front);
    }

    #[test]
    fn interpolation_endpoints_and_midpoint() {
        let a = embed("red car", 4, 8, 1).unwrap();
        let b = embed("blue bus", 4, 8, 1).unwrap();
        assert_eq!(interpolate(&a, &b, 0.0).unwrap(), a);
        assert_eq!(interpolate(&a, &b, 1.0).unwrap(), b);
        let neg = TextEmbedding::from_rows(a.as_slice().iter().map(|v| -v).collect(), 4, 8).unwrap();
        assert!(interpolate(&a, &neg, 0.5).unwrap().as_slice().iter().all(|v| *v == 0.0));
        let c = embed("x", 5, 8, 1).unwrap();
        assert!(interpolate(&a, &c, 0.5).is_err());
    }

    #[test]
    fn builtin_prompt_set_is_valid() {
        let set = PromptSet::builtin();
        assert_eq!(set.len(), 32);
        assert!(PromptSet::new(set.iter().map(String::from).collect()).is_ok());
        assert!(PromptSet::new(vec!["a".into(), "a".into()]).is_err());
        assert!(PromptSet::new(vec![]).is_err());
    }

    #[test]
    fn container_round_trip_and_validation() {
        let set = PromptSet::builtin();
        let entries: BTreeMap<u32, TextEmbedding> = set
            .iter()
            .take(3)
            .enumerate()
            .map(|(i, p)| (i as u32, embed(p, 6, 10, 9).unwrap()))
            .collect();
        let bytes = encode_embeddings(&entries).unwrap();
        let back = decode_embeddings(&bytes, Some((6, 10))).unwrap();
        assert_eq!(back, entries);
        assert_eq!(back.keys().copied().collect::<Vec<_>>(), vec![0, 1, 2]);
        assert!(matches!(decode_embeddings(&bytes, Some((6, 12))), Err(Error::Dimension(_))));
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        assert!(decode_embeddings(&wrong, None).is_err());
    }
}
