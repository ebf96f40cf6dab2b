//! Meta-learning episodes: base/novel splits, n-way k-shot support sampling
//! (balanced instances or unbalanced images), query batches with attached
//! rich text, and the deterministic synthetic detection catalog that stands
//! in for real datasets.

use std::collections::BTreeSet;
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backends::{
    extract_query_features, mix, roi_align_pool, BoundingBox, QueryFeatureMap,
};
use crate::corpus::{tokenize, RichTextEntry, TokenSequence, Variant, Vocabulary};
use crate::detection::{build_position_targets, GroundTruthBox, PositionTargets};
use crate::error::{CoreError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Separability {
    VisionSeparable,
    TextOnlySeparable,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingStrategy {
    BalancedInstances,
    UnbalancedImages,
}

/// Which text attaches to each support category. `None` and `CategoryName`
/// are synthesized here; the rest select stored corpus variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextVariant {
    None,
    CategoryName,
    Manual,
    Extended,
    Llm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryInfo {
    pub name: String,
    /// Feature-space direction of this category's blobs.
    pub signature: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticImage {
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CatalogSample {
    pub image: SyntheticImage,
    pub boxes: Vec<BoundingBox>,
    pub labels: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureGeometry {
    pub height: usize,
    pub width: usize,
    pub dim: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticParams {
    pub noise_sigma: f64,
    pub blob_amplitude: f64,
    pub seed: u64,
}

/// Annotated samples grouped by category, plus the synthetic render recipe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryCatalog {
    pub categories: Vec<CategoryInfo>,
    pub samples: Vec<CatalogSample>,
    pub geometry: FeatureGeometry,
    pub params: SyntheticParams,
}

impl CategoryCatalog {
    pub fn category_index(&self, name: &str) -> Option<usize> {
        self.categories.iter().position(|c| c.name == name)
    }

    /// Indices of samples whose annotations include `category`.
    pub fn samples_of(&self, category: usize) -> Vec<usize> {
        self.samples
            .iter()
            .enumerate()
            .filter(|(_, s)| s.labels.contains(&category))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let raw = std::fs::read_to_string(path.as_ref())?;
        Ok(serde_json::from_str(&raw)?)
    }
}

/// Disjoint base/novel category split. Every catalog category must appear in
/// exactly one side.
pub fn split_base_novel(
    catalog: &CategoryCatalog,
    base: &[String],
    novel: &[String],
) -> Result<(Vec<usize>, Vec<usize>)> {
    let resolve = |names: &[String]| -> Result<Vec<usize>> {
        names
            .iter()
            .map(|n| {
                catalog
                    .category_index(n)
                    .ok_or_else(|| CoreError::Validation(format!("unknown category '{n}'")))
            })
            .collect()
    };
    let base_idx = resolve(base)?;
    let novel_idx = resolve(novel)?;
    let base_set: BTreeSet<usize> = base_idx.iter().copied().collect();
    let novel_set: BTreeSet<usize> = novel_idx.iter().copied().collect();
    if let Some(overlap) = base_set.intersection(&novel_set).next() {
        return Err(CoreError::Validation(format!(
            "category '{}' assigned to both base and novel",
            catalog.categories[*overlap].name
        )));
    }
    if base_set.len() + novel_set.len() != catalog.categories.len() {
        return Err(CoreError::Validation(format!(
            "split covers {} of {} categories",
            base_set.len() + novel_set.len(),
            catalog.categories.len()
        )));
    }
    Ok((base_idx, novel_idx))
}

// ---------------------------------------------------------------------------
// Synthetic catalog generation

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticCatalogSpec {
    pub n_categories: usize,
    pub images_per_category: usize,
    pub height: usize,
    pub width: usize,
    pub dim: usize,
    pub separability: Separability,
    pub seed: u64,
    pub noise_sigma: f64,
    pub blob_amplitude: f64,
    /// Within-pair signature offset for the text-only task.
    pub pair_delta: f64,
    pub two_instance_prob: f64,
    /// Box edge lengths are drawn uniformly from this range (normalized).
    pub box_min: f64,
    pub box_max: f64,
}

impl SyntheticCatalogSpec {
    pub fn new(
        n_categories: usize,
        images_per_category: usize,
        dim: usize,
        separability: Separability,
        seed: u64,
    ) -> Self {
        SyntheticCatalogSpec {
            n_categories,
            images_per_category,
            height: 8,
            width: 8,
            dim,
            separability,
            seed,
            noise_sigma: 0.25,
            blob_amplitude: 1.0,
            pair_delta: 0.08,
            two_instance_prob: 0.3,
            box_min: 0.3,
            box_max: 0.55,
        }
    }
}

fn category_name(i: usize) -> String {
    // cat_a, cat_b, ..., cat_z, cat_aa, ...
    let mut n = i;
    let mut suffix = String::new();
    loop {
        suffix.insert(0, (b'a' + (n % 26) as u8) as char);
        if n < 26 {
            break;
        }
        n = n / 26 - 1;
    }
    format!("cat_{suffix}")
}

fn random_unit(rng: &mut ChaCha8Rng, d: usize) -> Array1<f64> {
    let mut v = Array1::from_shape_fn(d, |_| rng.gen_range(-1.0f64..1.0));
    let norm = v.dot(&v).sqrt().max(1e-12);
    v /= norm;
    v
}

fn nonsense_word(rng: &mut ChaCha8Rng) -> String {
    const CONS: &[u8] = b"bdfgklmnprstvz";
    const VOW: &[u8] = b"aeiou";
    let syllables = rng.gen_range(2..=3);
    let mut w = String::new();
    for _ in 0..syllables {
        w.push(CONS[rng.gen_range(0..CONS.len())] as char);
        w.push(VOW[rng.gen_range(0..VOW.len())] as char);
    }
    w
}

fn random_box_sized(rng: &mut ChaCha8Rng, min: f64, max: f64) -> BoundingBox {
    let w = rng.gen_range(min..max);
    let h = rng.gen_range(min..max);
    let x0 = rng.gen_range(0.02..0.98 - w);
    let y0 = rng.gen_range(0.02..0.98 - h);
    BoundingBox {
        x0,
        y0,
        x1: x0 + w,
        y1: y0 + h,
    }
}

fn random_box(rng: &mut ChaCha8Rng) -> BoundingBox {
    random_box_sized(rng, 0.3, 0.55)
}

/// Generates an annotated synthetic catalog and a matching rich-text corpus.
///
/// `vision_separable` gives each category its own unit feature direction, so
/// raw instance features separate cleanly. `text_only_separable` pairs
/// categories on a shared base direction with only a `pair_delta`-scaled
/// offset between pair members, while their generated texts stay distinct;
/// vision alone then sits near chance within a pair.
pub fn generate_synthetic_catalog(
    spec: &SyntheticCatalogSpec,
) -> Result<(CategoryCatalog, Vec<RichTextEntry>)> {
    if spec.n_categories < 2 {
        return Err(CoreError::Precondition(
            "synthetic catalog needs at least 2 categories".into(),
        ));
    }
    if spec.dim == 0 || spec.height == 0 || spec.width == 0 {
        return Err(CoreError::Precondition("geometry must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix(&[spec.seed, 0xCA7A]));
    let names: Vec<String> = (0..spec.n_categories).map(category_name).collect();

    // Synthetic rich texts: shared filler vocabulary plus two anchor words
    // unique to each category, so texts are the disambiguating signal.
    let shared: Vec<String> = (0..6).map(|_| nonsense_word(&mut rng)).collect();
    let mut used: BTreeSet<String> = shared.iter().cloned().collect();
    let mut corpus = Vec::new();
    for name in &names {
        let mut anchor = || loop {
            let w = nonsense_word(&mut rng);
            if used.insert(w.clone()) {
                return w;
            }
        };
        let (a1, a2, a3) = (anchor(), anchor(), anchor());
        let manual = format!(
            "{} shows {a1} {a2} {a3} patterning with {} edges",
            name.replace('_', " "),
            shared[0]
        );
        let extended = format!("{manual} usually seen near {} zones", shared[1]);
        let llm = format!(
            "a {} specimen has {a1} {a2} {a3} surfaces and {} margins",
            name.replace('_', " "),
            shared[2]
        );
        for (variant, text) in [
            (Variant::Manual, manual),
            (Variant::Extended, extended),
            (Variant::Llm, llm),
        ] {
            corpus.push(RichTextEntry {
                dataset_id: "synthetic".into(),
                category_name: name.clone(),
                variant,
                text,
            });
        }
    }

    let mut categories = Vec::with_capacity(spec.n_categories);
    match spec.separability {
        Separability::VisionSeparable => {
            for name in &names {
                categories.push(CategoryInfo {
                    name: name.clone(),
                    signature: random_unit(&mut rng, spec.dim).to_vec(),
                });
            }
        }
        Separability::TextOnlySeparable => {
            // Pair members share a base direction; each member's offset is
            // derived from its own text's synthetic embedding, so the text
            // content carries the disambiguating signal the way pretrained
            // text features would.
            let text_direction = |name: &str| -> Array1<f64> {
                let vocab = crate::corpus::build_vocabulary(&corpus, 1).expect("vocab");
                let entry = corpus
                    .iter()
                    .find(|e| e.category_name == name && e.variant == Variant::Manual)
                    .expect("manual entry");
                let seq = tokenize(&entry.text, &vocab);
                let mut acc = Array1::<f64>::zeros(spec.dim);
                for &id in seq.ids() {
                    acc += &Array1::from_vec(crate::backends::synthetic_token_row(id, spec.dim));
                }
                acc / seq.len() as f64
            };
            let mut i = 0;
            while i < spec.n_categories {
                let base = random_unit(&mut rng, spec.dim);
                let members = if i + 1 < spec.n_categories { 2 } else { 1 };
                for m in 0..members {
                    let mut off = text_direction(&names[i + m]);
                    let norm = off.dot(&off).sqrt().max(1e-12);
                    off /= norm;
                    let dot = off.dot(&base);
                    off = &off - &(dot * &base);
                    let norm = off.dot(&off).sqrt().max(1e-12);
                    off /= norm;
                    let sig = &base + &(spec.pair_delta * &off);
                    categories.push(CategoryInfo {
                        name: names[i + m].clone(),
                        signature: sig.to_vec(),
                    });
                }
                i += members;
            }
        }
    }

    let mut samples = Vec::new();
    for cat in 0..spec.n_categories {
        for img in 0..spec.images_per_category {
            let image = SyntheticImage {
                seed: mix(&[spec.seed, cat as u64, img as u64, 0x1A6E]),
            };
            let n_inst = if rng.gen_bool(spec.two_instance_prob) { 2 } else { 1 };
            let mut boxes = Vec::with_capacity(n_inst);
            let mut labels = Vec::with_capacity(n_inst);
            for _ in 0..n_inst {
                boxes.push(random_box_sized(&mut rng, spec.box_min, spec.box_max));
                labels.push(cat);
            }
            samples.push(CatalogSample {
                image,
                boxes,
                labels,
            });
        }
    }

    Ok((
        CategoryCatalog {
            categories,
            samples,
            geometry: FeatureGeometry {
                height: spec.height,
                width: spec.width,
                dim: spec.dim,
            },
            params: SyntheticParams {
                noise_sigma: spec.noise_sigma,
                blob_amplitude: spec.blob_amplitude,
                seed: spec.seed,
            },
        },
        corpus,
    ))
}

/// Renders one catalog sample: a seeded noise floor plus each annotated box's
/// category signature added to every position whose cell center it covers.
pub fn render_query_features(
    catalog: &CategoryCatalog,
    sample_idx: usize,
) -> Result<QueryFeatureMap> {
    let g = catalog.geometry;
    let sample = catalog
        .samples
        .get(sample_idx)
        .ok_or_else(|| CoreError::Validation(format!("sample {sample_idx} out of range")))?;
    let noise = extract_query_features(sample.image.seed, g.height, g.width, g.dim)?;
    let mut values = noise.values * catalog.params.noise_sigma;
    for (b, &label) in sample.boxes.iter().zip(&sample.labels) {
        let sig = &catalog.categories[label].signature;
        for r in 0..g.height {
            for c in 0..g.width {
                let y = (r as f64 + 0.5) / g.height as f64;
                let x = (c as f64 + 0.5) / g.width as f64;
                if x >= b.x0 && x < b.x1 && y >= b.y0 && y < b.y1 {
                    let pos = r * g.width + c;
                    for j in 0..g.dim {
                        values[(pos, j)] += catalog.params.blob_amplitude * sig[j];
                    }
                }
            }
        }
    }
    QueryFeatureMap::new(g.height, g.width, g.dim, values)
}

// ---------------------------------------------------------------------------
// Episode sampling

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SupportInstanceRef {
    pub sample: usize,
    pub box_idx: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupportCategory {
    pub category: usize,
    pub instances: Vec<SupportInstanceRef>,
    pub text: String,
}

/// One meta-learning task. Slot order (the support list order) is the
/// episode's canonical category order for prototypes and targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub support: Vec<SupportCategory>,
    pub query: Vec<usize>,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct EpisodeSpec {
    pub n: usize,
    pub k: usize,
    pub strategy: SamplingStrategy,
    pub text_variant: TextVariant,
    /// Stop adding query images once this many instances are covered.
    pub query_instances: usize,
    pub allow_empty_query: bool,
    /// Restrict category sampling, e.g. to a novel split.
    pub restrict_to: Option<Vec<usize>>,
}

/// Resolves the text attached to a category under the requested variant.
pub fn text_for(
    corpus: &[RichTextEntry],
    category_name: &str,
    variant: TextVariant,
) -> Result<String> {
    let stored = |v: Variant| -> Result<String> {
        corpus
            .iter()
            .find(|e| e.category_name == category_name && e.variant == v)
            .map(|e| e.text.clone())
            .ok_or_else(|| {
                CoreError::Validation(format!(
                    "no {v} text for category '{category_name}'"
                ))
            })
    };
    match variant {
        TextVariant::None => Ok(String::new()),
        TextVariant::CategoryName => Ok(category_name.to_string()),
        TextVariant::Manual => stored(Variant::Manual),
        TextVariant::Extended => stored(Variant::Extended),
        TextVariant::Llm => stored(Variant::Llm),
    }
}

/// Samples one episode, deterministic in `(catalog, spec, seed)`. Support
/// categories are drawn in seeded-shuffled order, so slot indices are not
/// tied to fixed categories across episodes.
pub fn sample_episode(
    catalog: &CategoryCatalog,
    corpus: &[RichTextEntry],
    spec: &EpisodeSpec,
    seed: u64,
) -> Result<Episode> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(&[catalog.params.seed, seed, 0xE915]));
    let mut eligible: Vec<usize> = match &spec.restrict_to {
        Some(list) => list.clone(),
        None => (0..catalog.categories.len()).collect(),
    };
    if eligible.len() < spec.n {
        return Err(CoreError::Precondition(format!(
            "need {} categories, have {}",
            spec.n,
            eligible.len()
        )));
    }
    eligible.shuffle(&mut rng);
    let chosen: Vec<usize> = eligible[..spec.n].to_vec();

    let mut support = Vec::with_capacity(spec.n);
    let mut support_images: BTreeSet<usize> = BTreeSet::new();
    for &cat in &chosen {
        let name = &catalog.categories[cat].name;
        let mut images = catalog.samples_of(cat);
        images.shuffle(&mut rng);
        let instances = match spec.strategy {
            SamplingStrategy::BalancedInstances => {
                let mut pairs: Vec<SupportInstanceRef> = Vec::new();
                for &s in &images {
                    for (bi, &label) in catalog.samples[s].labels.iter().enumerate() {
                        if label == cat {
                            pairs.push(SupportInstanceRef {
                                sample: s,
                                box_idx: bi,
                            });
                        }
                    }
                }
                if pairs.len() < spec.k {
                    return Err(CoreError::InsufficientData {
                        category: name.clone(),
                        message: format!("{} instances available, need {}", pairs.len(), spec.k),
                    });
                }
                pairs.truncate(spec.k);
                pairs
            }
            SamplingStrategy::UnbalancedImages => {
                if images.len() < spec.k {
                    return Err(CoreError::InsufficientData {
                        category: name.clone(),
                        message: format!("{} images available, need {}", images.len(), spec.k),
                    });
                }
                let mut pairs = Vec::new();
                for &s in images.iter().take(spec.k) {
                    for (bi, &label) in catalog.samples[s].labels.iter().enumerate() {
                        if label == cat {
                            pairs.push(SupportInstanceRef {
                                sample: s,
                                box_idx: bi,
                            });
                        }
                    }
                }
                pairs
            }
        };
        support_images.extend(instances.iter().map(|i| i.sample));
        support.push(SupportCategory {
            category: cat,
            instances,
            text: text_for(corpus, name, spec.text_variant)?,
        });
    }

    // Query pool: images of the episode's categories not used for support.
    let chosen_set: BTreeSet<usize> = chosen.iter().copied().collect();
    let mut pool: Vec<usize> = catalog
        .samples
        .iter()
        .enumerate()
        .filter(|(i, s)| {
            !support_images.contains(i) && s.labels.iter().any(|l| chosen_set.contains(l))
        })
        .map(|(i, _)| i)
        .collect();
    pool.shuffle(&mut rng);
    let mut query = Vec::new();
    let mut covered = 0usize;
    for s in pool {
        if covered >= spec.query_instances {
            break;
        }
        covered += catalog.samples[s].boxes.len();
        query.push(s);
    }
    if query.is_empty() && !spec.allow_empty_query {
        return Err(CoreError::InsufficientData {
            category: "<query>".into(),
            message: "no images left for the query set".into(),
        });
    }
    Ok(Episode {
        support,
        query,
        seed,
    })
}

// ---------------------------------------------------------------------------
// Materialization into model inputs

#[derive(Debug, Clone)]
pub struct QueryTensors {
    pub sample_idx: usize,
    pub features: Array2<f64>,
    pub targets: PositionTargets,
    pub ground_truth: Vec<GroundTruthBox>,
}

#[derive(Debug, Clone)]
pub struct EpisodeTensors {
    /// Raw (pre-encoding) vision prototypes, `(n+1) x d`, background last.
    pub support_vision: Array2<f64>,
    /// Tokenized support texts, one per slot.
    pub token_sequences: Vec<TokenSequence>,
    pub queries: Vec<QueryTensors>,
    pub num_slots: usize,
}

pub const ROI_POOL_SIZE: (usize, usize) = (3, 3);
const BACKGROUND_PATCHES: usize = 4;

/// Renders an episode into matrices: pooled k-shot vision prototypes, a
/// noise-patch background prototype, tokenized texts, and per-query targets
/// keyed by episode slot.
pub fn materialize_episode(
    catalog: &CategoryCatalog,
    episode: &Episode,
    vocab: &Vocabulary,
) -> Result<EpisodeTensors> {
    let d = catalog.geometry.dim;
    let n = episode.support.len();
    let mut support_vision = Array2::zeros((n + 1, d));

    for (slot, sc) in episode.support.iter().enumerate() {
        let mut acc = Array1::<f64>::zeros(d);
        for inst in &sc.instances {
            let fm = render_query_features(catalog, inst.sample)?;
            let b = catalog.samples[inst.sample].boxes[inst.box_idx];
            let feat = roi_align_pool(&fm, b, ROI_POOL_SIZE)?;
            acc += &feat.values;
        }
        acc /= sc.instances.len() as f64;
        support_vision.row_mut(slot).assign(&acc);
    }

    // Background prototype: random non-foreground crops of support images.
    let mut rng = ChaCha8Rng::seed_from_u64(mix(&[catalog.params.seed, episode.seed, 0xB6]));
    let support_samples: Vec<usize> = episode
        .support
        .iter()
        .flat_map(|sc| sc.instances.iter().map(|i| i.sample))
        .collect();
    let mut bg = Array1::<f64>::zeros(d);
    for _ in 0..BACKGROUND_PATCHES {
        let s = support_samples[rng.gen_range(0..support_samples.len())];
        let sample = &catalog.samples[s];
        let mut patch = random_box(&mut rng);
        for _ in 0..10 {
            let clear = sample
                .boxes
                .iter()
                .all(|b| crate::detection::iou(&patch, b) < 0.05);
            if clear {
                break;
            }
            patch = random_box(&mut rng);
        }
        let fm = render_query_features(catalog, s)?;
        bg += &roi_align_pool(&fm, patch, ROI_POOL_SIZE)?.values;
    }
    bg /= BACKGROUND_PATCHES as f64;
    support_vision.row_mut(n).assign(&bg);

    let token_sequences: Vec<TokenSequence> = episode
        .support
        .iter()
        .map(|sc| tokenize(&sc.text, vocab))
        .collect();

    let slot_of = |category: usize| -> Option<usize> {
        episode.support.iter().position(|sc| sc.category == category)
    };
    let mut queries = Vec::with_capacity(episode.query.len());
    for (qi, &sample_idx) in episode.query.iter().enumerate() {
        let sample = &catalog.samples[sample_idx];
        let fm = render_query_features(catalog, sample_idx)?;
        let mut slot_boxes = Vec::new();
        let mut ground_truth = Vec::new();
        for (b, &label) in sample.boxes.iter().zip(&sample.labels) {
            if let Some(slot) = slot_of(label) {
                slot_boxes.push((*b, slot));
                ground_truth.push(GroundTruthBox {
                    image: qi,
                    bbox: *b,
                    category: slot,
                });
            }
        }
        let targets = build_position_targets(
            catalog.geometry.height,
            catalog.geometry.width,
            &slot_boxes,
            n,
        )?;
        queries.push(QueryTensors {
            sample_idx,
            features: fm.values,
            targets,
            ground_truth,
        });
    }

    Ok(EpisodeTensors {
        support_vision,
        token_sequences,
        queries,
        num_slots: n,
    })
}

/// Nearest-prototype accuracy on raw pooled instance features, with k-shot
/// prototypes in the few-shot sense: each draw samples k support instances
/// per category, averages them into prototypes, and classifies the held-out
/// instances by nearest prototype. Averaged over `draws` seeded draws.
pub fn nearest_prototype_accuracy(
    catalog: &CategoryCatalog,
    k: usize,
    draws: usize,
    seed: u64,
) -> Result<f64> {
    let d = catalog.geometry.dim;
    let n_cat = catalog.categories.len();
    // Pool every instance feature once.
    let mut per_category: Vec<Vec<Array1<f64>>> = vec![Vec::new(); n_cat];
    for (si, sample) in catalog.samples.iter().enumerate() {
        let fm = render_query_features(catalog, si)?;
        for (bi, &label) in sample.labels.iter().enumerate() {
            let feat = roi_align_pool(&fm, sample.boxes[bi], ROI_POOL_SIZE)?;
            per_category[label].push(feat.values);
        }
    }
    for (cat, feats) in per_category.iter().enumerate() {
        if feats.len() <= k {
            return Err(CoreError::InsufficientData {
                category: catalog.categories[cat].name.clone(),
                message: format!("{} instances, need more than k = {k}", feats.len()),
            });
        }
    }
    let mut correct = 0usize;
    let mut total = 0usize;
    for draw in 0..draws {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(&[catalog.params.seed, seed, draw as u64]));
        let mut prototypes = Array2::<f64>::zeros((n_cat, d));
        let mut support: Vec<BTreeSet<usize>> = Vec::with_capacity(n_cat);
        for cat in 0..n_cat {
            let mut order: Vec<usize> = (0..per_category[cat].len()).collect();
            order.shuffle(&mut rng);
            let chosen: BTreeSet<usize> = order[..k].iter().copied().collect();
            let mut proto = Array1::<f64>::zeros(d);
            for &i in &chosen {
                proto += &per_category[cat][i];
            }
            proto /= k as f64;
            prototypes.row_mut(cat).assign(&proto);
            support.push(chosen);
        }
        for cat in 0..n_cat {
            for (i, feat) in per_category[cat].iter().enumerate() {
                if support[cat].contains(&i) {
                    continue;
                }
                let mut best = 0usize;
                let mut best_d = f64::INFINITY;
                for c in 0..n_cat {
                    let diff = feat - &prototypes.row(c);
                    let dist = diff.dot(&diff);
                    if dist < best_d {
                        best_d = dist;
                        best = c;
                    }
                }
                if best == cat {
                    correct += 1;
                }
                total += 1;
            }
        }
    }
    Ok(correct as f64 / total as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vision_spec(seed: u64) -> SyntheticCatalogSpec {
        SyntheticCatalogSpec::new(3, 12, 16, Separability::VisionSeparable, seed)
    }

    fn episode_spec(n: usize, k: usize) -> EpisodeSpec {
        EpisodeSpec {
            n,
            k,
            strategy: SamplingStrategy::BalancedInstances,
            text_variant: TextVariant::Manual,
            query_instances: 2 * n * k,
            allow_empty_query: false,
            restrict_to: None,
        }
    }

    #[test]
    fn catalog_generation_is_deterministic() {
        let (a, ca) = generate_synthetic_catalog(&vision_spec(7)).unwrap();
        let (b, cb) = generate_synthetic_catalog(&vision_spec(7)).unwrap();
        assert_eq!(a, b);
        assert_eq!(ca, cb);
        let (c, _) = generate_synthetic_catalog(&vision_spec(8)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn split_examples() {
        let (cat, _) = generate_synthetic_catalog(&vision_spec(1)).unwrap();
        let names: Vec<String> = cat.categories.iter().map(|c| c.name.clone()).collect();
        // all base -> empty novel
        let (b, n) = split_base_novel(&cat, &names, &[]).unwrap();
        assert_eq!(b.len(), 3);
        assert!(n.is_empty());
        // overlap is an error
        assert!(split_base_novel(&cat, &names, &names[..1]).is_err());
        // unknown category is an error
        assert!(split_base_novel(&cat, &names[..2], &["nope".into()]).is_err());
        // 2/1 partition
        let (b, n) = split_base_novel(&cat, &names[..2], &names[2..]).unwrap();
        assert_eq!((b.len(), n.len()), (2, 1));
        assert!(b.iter().all(|i| !n.contains(i)));
    }

    #[test]
    fn pascal_style_split_over_twenty_categories() {
        let spec = SyntheticCatalogSpec::new(20, 2, 8, Separability::VisionSeparable, 3);
        let (cat, _) = generate_synthetic_catalog(&spec).unwrap();
        let names: Vec<String> = cat.categories.iter().map(|c| c.name.clone()).collect();
        let (b, n) = split_base_novel(&cat, &names[..15], &names[15..]).unwrap();
        assert_eq!((b.len(), n.len()), (15, 5));
    }

    #[test]
    fn episodes_are_seed_deterministic() {
        let (cat, corpus) = generate_synthetic_catalog(&vision_spec(2)).unwrap();
        let spec = episode_spec(3, 5);
        let a = sample_episode(&cat, &corpus, &spec, 42).unwrap();
        let b = sample_episode(&cat, &corpus, &spec, 42).unwrap();
        assert_eq!(a, b);
        let c = sample_episode(&cat, &corpus, &spec, 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn balanced_sampling_counts_and_disjointness() {
        let (cat, corpus) = generate_synthetic_catalog(&vision_spec(3)).unwrap();
        let spec = episode_spec(3, 5);
        for seed in 0..100 {
            let ep = sample_episode(&cat, &corpus, &spec, seed).unwrap();
            assert_eq!(ep.support.len(), 3);
            let total: usize = ep.support.iter().map(|s| s.instances.len()).sum();
            assert_eq!(total, 15);
            for sc in &ep.support {
                assert_eq!(sc.instances.len(), 5);
                for inst in &sc.instances {
                    assert!(!ep.query.contains(&inst.sample));
                }
            }
            let cats: BTreeSet<usize> = ep.support.iter().map(|s| s.category).collect();
            assert_eq!(cats.len(), 3);
        }
    }

    #[test]
    fn unbalanced_sampling_takes_k_images_with_all_instances() {
        let (cat, corpus) = generate_synthetic_catalog(&vision_spec(4)).unwrap();
        let mut spec = episode_spec(2, 3);
        spec.strategy = SamplingStrategy::UnbalancedImages;
        let ep = sample_episode(&cat, &corpus, &spec, 1).unwrap();
        for sc in &ep.support {
            let images: BTreeSet<usize> = sc.instances.iter().map(|i| i.sample).collect();
            assert_eq!(images.len(), 3);
            // every instance of each chosen image is kept
            for &img in &images {
                let expected = cat.samples[img]
                    .labels
                    .iter()
                    .filter(|&&l| l == sc.category)
                    .count();
                let got = sc.instances.iter().filter(|i| i.sample == img).count();
                assert_eq!(got, expected);
            }
        }
    }

    #[test]
    fn insufficient_data_names_category() {
        let spec = SyntheticCatalogSpec::new(2, 2, 8, Separability::VisionSeparable, 5);
        let (cat, corpus) = generate_synthetic_catalog(&spec).unwrap();
        let err = sample_episode(&cat, &corpus, &episode_spec(2, 50), 0).unwrap_err();
        match err {
            CoreError::InsufficientData { category, .. } => {
                assert!(category.starts_with("cat_"));
            }
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn minimal_episode_needs_empty_query_flag() {
        let spec = SyntheticCatalogSpec {
            two_instance_prob: 0.0,
            ..SyntheticCatalogSpec::new(2, 1, 8, Separability::VisionSeparable, 6)
        };
        let (cat, corpus) = generate_synthetic_catalog(&spec).unwrap();
        let mut espec = episode_spec(1, 1);
        assert!(sample_episode(&cat, &corpus, &espec, 0).is_err());
        espec.allow_empty_query = true;
        let ep = sample_episode(&cat, &corpus, &espec, 0).unwrap();
        assert_eq!(ep.support[0].instances.len(), 1);
        assert!(ep.query.is_empty());
    }

    #[test]
    fn vision_separable_is_nearest_prototype_solvable() {
        let (cat, _) = generate_synthetic_catalog(&SyntheticCatalogSpec::new(
            2,
            20,
            16,
            Separability::VisionSeparable,
            9,
        ))
        .unwrap();
        let acc = nearest_prototype_accuracy(&cat, 5, 8, 0).unwrap();
        assert!(acc > 0.95, "vision-separable NC accuracy {acc}");
    }

    #[test]
    fn text_only_is_near_chance_on_vision() {
        // Default-parameter catalog.
        let (cat, _) = generate_synthetic_catalog(&SyntheticCatalogSpec::new(
            2,
            40,
            16,
            Separability::TextOnlySeparable,
            10,
        ))
        .unwrap();
        let acc = nearest_prototype_accuracy(&cat, 5, 8, 0).unwrap();
        assert!((0.35..=0.65).contains(&acc), "text-only NC accuracy {acc}");
    }

    #[test]
    fn text_variants_resolve() {
        let (cat, corpus) = generate_synthetic_catalog(&vision_spec(11)).unwrap();
        let name = &cat.categories[0].name;
        assert_eq!(text_for(&corpus, name, TextVariant::None).unwrap(), "");
        assert_eq!(
            text_for(&corpus, name, TextVariant::CategoryName).unwrap(),
            *name
        );
        let manual = text_for(&corpus, name, TextVariant::Manual).unwrap();
        let extended = text_for(&corpus, name, TextVariant::Extended).unwrap();
        assert!(extended.starts_with(&manual));
        assert!(text_for(&corpus, "missing", TextVariant::Llm).is_err());
    }

    #[test]
    fn materialization_produces_consistent_shapes() {
        let (cat, corpus) = generate_synthetic_catalog(&vision_spec(12)).unwrap();
        let vocab = crate::corpus::build_vocabulary(&corpus, 1).unwrap();
        let ep = sample_episode(&cat, &corpus, &episode_spec(3, 2), 5).unwrap();
        let tensors = materialize_episode(&cat, &ep, &vocab).unwrap();
        assert_eq!(tensors.support_vision.dim(), (4, 16));
        assert_eq!(tensors.token_sequences.len(), 3);
        assert!(!tensors.queries.is_empty());
        for q in &tensors.queries {
            assert_eq!(q.features.dim(), (64, 16));
            assert_eq!(q.targets.labels.len(), 64);
            assert!(!q.ground_truth.is_empty());
        }
    }

    #[test]
    fn catalog_roundtrips_through_disk() {
        let (cat, _) = generate_synthetic_catalog(&vision_spec(13)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("catalog.json");
        cat.save(&path).unwrap();
        let back = CategoryCatalog::load(&path).unwrap();
        assert_eq!(cat, back);
    }
}
