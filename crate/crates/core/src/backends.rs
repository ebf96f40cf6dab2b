//! Feature backends: query feature maps, RoIAlign instance pooling, and token
//! embeddings. The synthetic backend is a pure function of its seeds so tests
//! get bit-identical values; real vision-language models plug in behind
//! [`FeatureBackend`].

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::TokenSequence;
use crate::error::{CoreError, Result};

/// Axis-aligned box in normalized image coordinates. Serialized as
/// `[x0, y0, x1, y1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(into = "[f64; 4]", try_from = "[f64; 4]")]
pub struct BoundingBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl From<BoundingBox> for [f64; 4] {
    fn from(b: BoundingBox) -> [f64; 4] {
        [b.x0, b.y0, b.x1, b.y1]
    }
}

impl TryFrom<[f64; 4]> for BoundingBox {
    type Error = CoreError;
    fn try_from(v: [f64; 4]) -> Result<Self> {
        BoundingBox::new(v[0], v[1], v[2], v[3])
    }
}

impl BoundingBox {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self> {
        let b = BoundingBox { x0, y0, x1, y1 };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let inside = |v: f64| (0.0..=1.0).contains(&v);
        if !(inside(self.x0) && inside(self.y0) && inside(self.x1) && inside(self.y1)) {
            return Err(CoreError::Validation(format!(
                "box {self:?} outside [0,1]"
            )));
        }
        if self.x0 >= self.x1 || self.y0 >= self.y1 {
            return Err(CoreError::Validation(format!(
                "box {self:?} has non-positive extent"
            )));
        }
        Ok(())
    }

    pub fn area(&self) -> f64 {
        (self.x1 - self.x0) * (self.y1 - self.y0)
    }
}

/// Per-position query image features, row-major over positions: `(H*W) x d`.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryFeatureMap {
    pub height: usize,
    pub width: usize,
    pub dim: usize,
    pub values: Array2<f64>,
}

impl QueryFeatureMap {
    pub fn new(height: usize, width: usize, dim: usize, values: Array2<f64>) -> Result<Self> {
        if values.dim() != (height * width, dim) {
            return Err(CoreError::Shape(format!(
                "feature map values {:?} inconsistent with {}x{}x{}",
                values.dim(),
                height,
                width,
                dim
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::Validation("non-finite feature value".into()));
        }
        Ok(QueryFeatureMap {
            height,
            width,
            dim,
            values,
        })
    }

    pub fn at(&self, row: usize, col: usize) -> ndarray::ArrayView1<'_, f64> {
        self.values.row(row * self.width + col)
    }
}

/// A pooled instance-level feature vector plus the box it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceFeature {
    pub values: Array1<f64>,
    pub source_box: BoundingBox,
}

/// Token embeddings aligned 1:1 with a [`TokenSequence`].
#[derive(Debug, Clone, PartialEq)]
pub struct TokenEmbeddingSequence {
    pub values: Array2<f64>,
}

/// Backend contract: images to feature maps, tokens to embeddings.
pub trait FeatureBackend {
    fn query_features(&self, seed: u64, h: usize, w: usize, d: usize) -> Result<QueryFeatureMap>;
    fn token_embeddings(&self, seq: &TokenSequence, d: usize) -> Result<TokenEmbeddingSequence>;
}

/// Backend selection, parsed from the `backend` config key.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum BackendKind {
    Synthetic,
    External(String),
}

impl TryFrom<String> for BackendKind {
    type Error = CoreError;
    fn try_from(s: String) -> Result<Self> {
        if s == "synthetic" {
            Ok(BackendKind::Synthetic)
        } else if let Some(name) = s.strip_prefix("external:") {
            Ok(BackendKind::External(name.to_string()))
        } else {
            Err(CoreError::Config(format!(
                "backend must be 'synthetic' or 'external:<adapter-name>', got '{s}'"
            )))
        }
    }
}

impl From<BackendKind> for String {
    fn from(k: BackendKind) -> String {
        match k {
            BackendKind::Synthetic => "synthetic".into(),
            BackendKind::External(name) => format!("external:{name}"),
        }
    }
}

/// Resolves a backend selection. External adapters must be supplied by the
/// embedding application; an unknown adapter is an explicit error, never a
/// silent fallback to synthetic.
pub fn resolve_backend(kind: &BackendKind, vocab_size: usize) -> Result<Box<dyn FeatureBackend>> {
    match kind {
        BackendKind::Synthetic => Ok(Box::new(SyntheticBackend::new(vocab_size))),
        BackendKind::External(name) => Err(CoreError::Backend(format!(
            "external backend adapter '{name}' is not registered"
        ))),
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

/// Deterministic seed mixer shared by every seeded component.
pub(crate) fn mix(parts: &[u64]) -> u64 {
    let mut acc = 0x51_7c_c1_b7_27_22_0a_95u64;
    for &p in parts {
        acc = splitmix64(acc ^ p);
    }
    acc
}

/// Deterministic stand-in for pretrained feature extractors.
pub struct SyntheticBackend {
    vocab_size: usize,
}

impl SyntheticBackend {
    pub fn new(vocab_size: usize) -> Self {
        SyntheticBackend { vocab_size }
    }
}

impl FeatureBackend for SyntheticBackend {
    fn query_features(&self, seed: u64, h: usize, w: usize, d: usize) -> Result<QueryFeatureMap> {
        extract_query_features(seed, h, w, d)
    }

    fn token_embeddings(&self, seq: &TokenSequence, d: usize) -> Result<TokenEmbeddingSequence> {
        embed_tokens(seq, d, self.vocab_size)
    }
}

/// Synthetic query features: standard-normal noise, a pure function of
/// `(seed, h, w, d)`.
pub fn extract_query_features(seed: u64, h: usize, w: usize, d: usize) -> Result<QueryFeatureMap> {
    if h == 0 || w == 0 || d == 0 {
        return Err(CoreError::Precondition(format!(
            "feature map dims must be positive, got {h}x{w}x{d}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix(&[seed, h as u64, w as u64, d as u64]));
    let values = Array2::from_shape_fn((h * w, d), |_| standard_normal(&mut rng));
    QueryFeatureMap::new(h, w, d, values)
}

fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller; two uniform draws per sample keeps the stream deterministic.
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Position-free synthetic embedding of one token id; the row the trainable
/// lookup table is initialized from (the desk-scale stand-in for a
/// pretrained text tower).
pub fn synthetic_token_row(id: u32, d: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(&[id as u64, 0, d as u64]));
    (0..d)
        .map(|_| standard_normal(&mut rng) / (d as f64).sqrt())
        .collect()
}

/// Synthetic token embeddings: row `j` is a pure function of `(ids[j], j, d)`.
pub fn embed_tokens(
    seq: &TokenSequence,
    d: usize,
    vocab_size: usize,
) -> Result<TokenEmbeddingSequence> {
    if d == 0 {
        return Err(CoreError::Precondition("embedding dim must be positive".into()));
    }
    for &id in seq.ids() {
        if id as usize >= vocab_size {
            return Err(CoreError::Backend(format!(
                "token id {id} out of vocabulary range {vocab_size}"
            )));
        }
    }
    let m = seq.len();
    let mut values = Array2::zeros((m, d));
    for (j, &id) in seq.ids().iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(&[id as u64, j as u64, d as u64]));
        for k in 0..d {
            values[(j, k)] = standard_normal(&mut rng) / (d as f64).sqrt();
        }
    }
    Ok(TokenEmbeddingSequence { values })
}

/// RoIAlign with one bilinear sample per bin center, then average pooling
/// over the `out_size.0 * out_size.1` sampled vectors.
pub fn roi_align_pool(
    fm: &QueryFeatureMap,
    source_box: BoundingBox,
    out_size: (usize, usize),
) -> Result<InstanceFeature> {
    source_box.validate()?;
    if source_box.area() < 1e-6 {
        return Err(CoreError::Validation(format!(
            "degenerate box {source_box:?} (area {} < 1e-6)",
            source_box.area()
        )));
    }
    let (oh, ow) = out_size;
    if oh == 0 || ow == 0 {
        return Err(CoreError::Precondition("out_size must be >= (1,1)".into()));
    }
    let mut pooled = Array1::zeros(fm.dim);
    for i in 0..oh {
        for j in 0..ow {
            let y = source_box.y0 + (i as f64 + 0.5) * (source_box.y1 - source_box.y0) / oh as f64;
            let x = source_box.x0 + (j as f64 + 0.5) * (source_box.x1 - source_box.x0) / ow as f64;
            pooled += &bilinear_sample(fm, y, x);
        }
    }
    pooled /= (oh * ow) as f64;
    Ok(InstanceFeature {
        values: pooled,
        source_box,
    })
}

/// Bilinear interpolation at normalized (y, x); grid point `(r, c)` sits at
/// normalized ((r+0.5)/H, (c+0.5)/W), samples outside clamp to the edge.
fn bilinear_sample(fm: &QueryFeatureMap, y: f64, x: f64) -> Array1<f64> {
    let py = y * fm.height as f64 - 0.5;
    let px = x * fm.width as f64 - 0.5;
    let y0 = py.floor();
    let x0 = px.floor();
    let wy = py - y0;
    let wx = px - x0;
    let clamp_r = |r: f64| (r.max(0.0) as usize).min(fm.height - 1);
    let clamp_c = |c: f64| (c.max(0.0) as usize).min(fm.width - 1);
    let (r0, r1) = (clamp_r(y0), clamp_r(y0 + 1.0));
    let (c0, c1) = (clamp_c(x0), clamp_c(x0 + 1.0));
    let mut out = Array1::zeros(fm.dim);
    out.scaled_add((1.0 - wy) * (1.0 - wx), &fm.at(r0, c0));
    out.scaled_add((1.0 - wy) * wx, &fm.at(r0, c1));
    out.scaled_add(wy * (1.0 - wx), &fm.at(r1, c0));
    out.scaled_add(wy * wx, &fm.at(r1, c1));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_vocabulary, tokenize, RichTextEntry, Variant};

    fn full_box() -> BoundingBox {
        BoundingBox::new(0.0, 0.0, 1.0, 1.0).unwrap()
    }

    #[test]
    fn query_features_are_pure() {
        let a = extract_query_features(0, 2, 2, 4).unwrap();
        let b = extract_query_features(0, 2, 2, 4).unwrap();
        assert_eq!(a.values, b.values);
    }

    #[test]
    fn query_features_vary_with_seed() {
        let a = extract_query_features(0, 2, 2, 4).unwrap();
        let b = extract_query_features(1, 2, 2, 4).unwrap();
        assert_ne!(a.values, b.values);
    }

    #[test]
    fn zero_height_rejected() {
        assert!(extract_query_features(0, 0, 2, 4).is_err());
    }

    #[test]
    fn constant_map_pools_to_constant() {
        let values = Array2::from_elem((12, 3), 7.25);
        let fm = QueryFeatureMap::new(3, 4, 3, values).unwrap();
        for out in [(1, 1), (2, 3), (5, 5)] {
            let f = roi_align_pool(&fm, BoundingBox::new(0.1, 0.2, 0.8, 0.9).unwrap(), out)
                .unwrap();
            for v in f.values.iter() {
                assert!((v - 7.25).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn full_box_native_out_size_is_plain_mean() {
        let fm = extract_query_features(3, 4, 5, 6).unwrap();
        let pooled = roi_align_pool(&fm, full_box(), (4, 5)).unwrap();
        let mean = fm.values.mean_axis(ndarray::Axis(0)).unwrap();
        for (a, b) in pooled.values.iter().zip(mean.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn two_by_two_center_is_corner_average() {
        let mut values = Array2::zeros((4, 1));
        values[(0, 0)] = 1.0; // (0,0)
        values[(1, 0)] = 2.0; // (0,1)
        values[(2, 0)] = 3.0; // (1,0)
        values[(3, 0)] = 4.0; // (1,1)
        let fm = QueryFeatureMap::new(2, 2, 1, values).unwrap();
        let f = roi_align_pool(&fm, full_box(), (1, 1)).unwrap();
        assert!((f.values[0] - 2.5).abs() < 1e-12);
    }

    #[test]
    fn pooling_is_linear_in_the_map() {
        let f = extract_query_features(11, 4, 4, 5).unwrap();
        let g = extract_query_features(12, 4, 4, 5).unwrap();
        let (alpha, beta) = (0.7, -1.3);
        let combo = QueryFeatureMap::new(4, 4, 5, alpha * &f.values + beta * &g.values).unwrap();
        let b = BoundingBox::new(0.05, 0.1, 0.7, 0.95).unwrap();
        let pooled_combo = roi_align_pool(&combo, b, (3, 2)).unwrap();
        let pf = roi_align_pool(&f, b, (3, 2)).unwrap();
        let pg = roi_align_pool(&g, b, (3, 2)).unwrap();
        for i in 0..5 {
            let expect = alpha * pf.values[i] + beta * pg.values[i];
            assert!((pooled_combo.values[i] - expect).abs() < 1e-10);
        }
    }

    #[test]
    fn degenerate_box_rejected() {
        let fm = extract_query_features(0, 2, 2, 2).unwrap();
        let thin = BoundingBox {
            x0: 0.5,
            y0: 0.1,
            x1: 0.5 + 1e-7,
            y1: 0.9,
        };
        assert!(roi_align_pool(&fm, thin, (1, 1)).is_err());
    }

    fn seq(text: &str) -> TokenSequence {
        let e = RichTextEntry {
            dataset_id: "d".into(),
            category_name: "c".into(),
            variant: Variant::Manual,
            text: text.into(),
        };
        let v = build_vocabulary(std::slice::from_ref(&e), 1).unwrap();
        tokenize(text, &v)
    }

    #[test]
    fn embeddings_are_pure_and_positional() {
        let s = seq("one two three");
        let a = embed_tokens(&s, 8, 16).unwrap();
        let b = embed_tokens(&s, 8, 16).unwrap();
        assert_eq!(a.values, b.values);
        assert_eq!(a.values.dim(), (5, 8));

        let s1 = seq("alpha beta");
        let s2 = seq("gamma beta");
        // Both vocabularies assign id 4/5 by frequency+lex order; rows after
        // position 1 coincide only when (id, pos) pairs coincide.
        let e1 = embed_tokens(&s1, 6, 16).unwrap();
        let e2 = embed_tokens(&s2, 6, 16).unwrap();
        assert_eq!(e1.values.row(0), e2.values.row(0)); // BOS at 0
        assert_eq!(e1.values.row(3), e2.values.row(3)); // EOS at 3
    }

    #[test]
    fn embedding_rejects_out_of_range_ids() {
        let s = seq("one two");
        assert!(embed_tokens(&s, 4, 2).is_err());
    }

    #[test]
    fn external_backend_is_explicit_error() {
        let kind = BackendKind::External("clip".into());
        match resolve_backend(&kind, 10) {
            Err(CoreError::Backend(msg)) => assert!(msg.contains("clip")),
            Err(other) => panic!("unexpected error {other}"),
            Ok(_) => panic!("expected backend error"),
        }
    }
}
