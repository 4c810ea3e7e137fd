//! Synthetic scenes of colored shapes with parallel captions in two toy
//! languages and region-like feature sets.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::decoder::{Vocab, VocabPair};
use crate::rng::RngStream;
use crate::tensor::Tensor;
use crate::{math, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Color {
    Red,
    Blue,
    Green,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Shape {
    Circle,
    Square,
    Triangle,
}

pub const COLORS: [Color; 3] = [Color::Red, Color::Blue, Color::Green];
pub const SHAPES: [Shape; 3] = [Shape::Circle, Shape::Square, Shape::Triangle];

impl Color {
    pub fn word(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Blue => "blue",
            Color::Green => "green",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        COLORS.into_iter().find(|c| c.word() == s)
    }
}

impl Shape {
    pub fn word(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        SHAPES.into_iter().find(|c| c.word() == s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct SceneObject {
    pub color: Color,
    pub shape: Shape,
    pub count: u8,
}

impl SceneObject {
    /// Index of the (color, shape) kind in `0..9`.
    pub fn kind(&self) -> usize {
        self.color as usize * 3 + self.shape as usize
    }
}

/// Distinct (color, shape) kinds in canonical order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Scene {
    pub objects: Vec<SceneObject>,
}

impl Scene {
    pub fn new(mut objects: Vec<SceneObject>) -> Result<Self> {
        if objects.is_empty() || objects.len() > 4 {
            return Err(Error::data(format!("scene needs 1..=4 objects, got {}", objects.len())));
        }
        if objects.iter().any(|o| !(1..=3).contains(&o.count)) {
            return Err(Error::data("object counts must lie in 1..=3"));
        }
        objects.sort();
        if objects.windows(2).any(|w| w[0].kind() == w[1].kind()) {
            return Err(Error::data("scene repeats an object kind"));
        }
        Ok(Scene { objects })
    }

    /// `2 red circle, 1 blue square`
    pub fn describe(&self) -> String {
        let parts: Vec<String> = self
            .objects
            .iter()
            .map(|o| format!("{} {} {}", o.count, o.color.word(), o.shape.word()))
            .collect();
        parts.join(", ")
    }

    pub fn parse(s: &str) -> Result<Self> {
        let mut objects = Vec::new();
        for part in s.split(',') {
            let f: Vec<&str> = part.split_whitespace().collect();
            let bad = || Error::data(format!("bad scene object `{}`", part.trim()));
            if f.len() != 3 {
                return Err(bad());
            }
            objects.push(SceneObject {
                count: f[0].parse().map_err(|_| bad())?,
                color: Color::parse(f[1]).ok_or_else(bad)?,
                shape: Shape::parse(f[2]).ok_or_else(bad)?,
            });
        }
        Scene::new(objects)
    }
}

/// Deterministic scene for `(seed, index)`.
pub fn generate_scene(seed: u64, index: u64) -> Scene {
    let mut rng = RngStream::new(seed).substream_named("scene").substream(index);
    let n = 1 + rng.below(4);
    let mut kinds: Vec<usize> = (0..9).collect();
    rng.shuffle(&mut kinds);
    let objects = kinds[..n]
        .iter()
        .map(|&k| SceneObject {
            color: COLORS[k / 3],
            shape: SHAPES[k % 3],
            count: 1 + rng.below(3) as u8,
        })
        .collect();
    Scene::new(objects).expect("generated scene is valid")
}

const CONNECTOR: &str = "and";
pub const B_SUFFIX: &str = "_b";

fn count_word(c: u8) -> &'static str {
    match c {
        1 => "a",
        2 => "two",
        _ => "three",
    }
}

fn phrase_a(o: &SceneObject) -> [String; 3] {
    let shape = if o.count > 1 {
        format!("{}s", o.shape.word())
    } else {
        o.shape.word().to_string()
    };
    [count_word(o.count).to_string(), o.color.word().to_string(), shape]
}

/// Language-B spelling of a language-A token.
pub fn to_b(token: &str) -> String {
    format!("{token}{B_SUFFIX}")
}

/// Language A lists objects as `COUNT COLOR SHAPE[s]` joined by `and`.
/// Language B reverses the object order and the word order inside each
/// object and suffixes every token.
pub fn render_captions(scene: &Scene) -> (Vec<String>, Vec<String>) {
    let mut a = Vec::new();
    for (i, o) in scene.objects.iter().enumerate() {
        if i > 0 {
            a.push(CONNECTOR.to_string());
        }
        a.extend(phrase_a(o));
    }
    let mut b = Vec::new();
    for (i, o) in scene.objects.iter().rev().enumerate() {
        if i > 0 {
            b.push(to_b(CONNECTOR));
        }
        b.extend(phrase_a(o).iter().rev().map(|t| to_b(t)));
    }
    (a, b)
}

/// Fixed per-kind base vectors plus the feature-set policy.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionFeatureSpec {
    pub d_k: usize,
    pub noise: f64,
    pub min_regions: usize,
    pub max_regions: usize,
    /// Up to this many extra background regions on top of the minimum.
    pub extra_distractors: usize,
    /// Rows `0..9` are the object kinds, row 9 the background.
    pub bases: Tensor,
}

impl RegionFeatureSpec {
    pub fn new(d_k: usize, table_seed: u64) -> Self {
        let mut rng = RngStream::new(table_seed).substream_named("bases");
        let data = (0..10 * d_k).map(|_| rng.normal()).collect();
        RegionFeatureSpec {
            d_k,
            noise: 0.1,
            min_regions: 10,
            max_regions: 50,
            extra_distractors: 4,
            bases: Tensor::matrix(10, d_k, data).expect("base table"),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_k == 0 || self.bases.shape() != [10, self.d_k] {
            return Err(Error::config("feature base table must be 10 x d_k"));
        }
        if !(1..=self.max_regions).contains(&self.min_regions) || self.max_regions < 12 {
            return Err(Error::config(format!(
                "region bounds {}..={} cannot hold every scene",
                self.min_regions, self.max_regions
            )));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::config("feature noise must be >= 0"));
        }
        Ok(())
    }
}

const BACKGROUND: usize = 9;

/// One noisy copy of the kind's base vector per counted object, background
/// regions up to at least `min_regions`, then shuffled.
pub fn make_region_features(scene: &Scene, spec: &RegionFeatureSpec, rng: &mut RngStream) -> Tensor {
    let mut kinds: Vec<usize> = Vec::new();
    for o in &scene.objects {
        for _ in 0..o.count {
            kinds.push(o.kind());
        }
    }
    let target = kinds.len().max(spec.min_regions) + rng.below(spec.extra_distractors + 1);
    let target = target.min(spec.max_regions).max(kinds.len());
    while kinds.len() < target {
        kinds.push(BACKGROUND);
    }
    rng.shuffle(&mut kinds);
    let d = spec.d_k;
    let mut data = Vec::with_capacity(kinds.len() * d);
    for &k in &kinds {
        for j in 0..d {
            data.push(spec.bases.get(k, j) + spec.noise * rng.normal());
        }
    }
    Tensor::matrix(kinds.len(), d, data).expect("feature shape")
}

/// A scene with its captions and features.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub index: u64,
    pub scene: Scene,
    pub caption_a: Vec<String>,
    pub caption_b: Vec<String>,
    pub features: Tensor,
}

pub fn generate_sample(seed: u64, index: u64, spec: &RegionFeatureSpec) -> Sample {
    let scene = generate_scene(seed, index);
    let (caption_a, caption_b) = render_captions(&scene);
    let mut rng = RngStream::new(seed).substream_named("features").substream(index);
    let features = make_region_features(&scene, spec, &mut rng);
    Sample {
        index,
        scene,
        caption_a,
        caption_b,
        features,
    }
}

pub fn generate_corpus(seed: u64, n: usize, spec: &RegionFeatureSpec) -> Result<Vec<Sample>> {
    spec.validate()?;
    Ok((0..n as u64).map(|i| generate_sample(seed, i, spec)).collect())
}

fn filtered(captions: &[Vec<String>], min_freq: usize) -> Vec<String> {
    let mut freq: BTreeMap<&str, usize> = BTreeMap::new();
    for c in captions {
        for t in c {
            *freq.entry(t.as_str()).or_insert(0) += 1;
        }
    }
    freq.into_iter()
        .filter(|&(_, n)| n >= min_freq)
        .map(|(t, _)| t.to_string())
        .collect()
}

/// Alphabetical vocabularies of the tokens seen at least `min_freq` times.
pub fn build_vocab(
    captions_a: &[Vec<String>],
    captions_b: &[Vec<String>],
    min_freq_a: usize,
    min_freq_b: usize,
) -> Result<VocabPair> {
    let wa = filtered(captions_a, min_freq_a);
    let wb = filtered(captions_b, min_freq_b);
    if wa.is_empty() || wb.is_empty() {
        return Err(Error::config(format!(
            "vocabulary is empty after filtering (min_freq {min_freq_a}/{min_freq_b})"
        )));
    }
    Ok(VocabPair {
        a: Vocab::new(wa)?,
        b: Vocab::new(wb)?,
    })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Shuffle `0..n` and cut it by `ratios` (train, val, test). Train and
/// validation sizes are rounded; test takes the remainder.
pub fn split_dataset(n: usize, ratios: [f64; 3], seed: u64) -> Result<Split> {
    let sum: f64 = ratios.iter().sum();
    if ratios.iter().any(|r| !r.is_finite() || *r < 0.0) || (sum - 1.0).abs() > 1e-9 {
        return Err(Error::config(format!(
            "split ratios {ratios:?} must be >= 0 and sum to 1"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    RngStream::new(seed).substream_named("split").shuffle(&mut idx);
    let n_train = (math::round(n as f64 * ratios[0]) as usize).min(n);
    let n_val = (math::round(n as f64 * ratios[1]) as usize).min(n - n_train);
    let test = idx.split_off(n_train + n_val);
    let val = idx.split_off(n_train);
    Ok(Split { train: idx, val, test })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn single_object_captions() {
        let s = Scene::new(vec![SceneObject {
            color: Color::Red,
            shape: Shape::Circle,
            count: 1,
        }])
        .unwrap();
        let (a, b) = render_captions(&s);
        assert_eq!(a.join(" "), "a red circle");
        assert_eq!(b.join(" "), "circle_b red_b a_b");
    }

    #[test]
    fn describe_round_trip() {
        let s = generate_scene(9, 4);
        assert_eq!(Scene::parse(&s.describe()).unwrap(), s);
    }

    #[test]
    fn split_sizes() {
        let s = split_dataset(1000, [0.9, 0.05, 0.05], 1).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (900, 50, 50));
        assert!(split_dataset(10, [0.5, 0.5, 0.5], 1).is_err());
    }
}
