//! Deterministic image/text embedder over a synthetic visual world.
//!
//! The world is a fixed vocabulary of (object, color) facts. Each fact owns
//! one vector of an orthonormal latent basis, images embed as the normalized
//! sum of their facts' basis vectors plus seeded noise, and text embeds as
//! the sum of what it mentions. Mentioning an object contributes that
//! object's marginal direction (sum over its possible colors), a color its
//! marginal, and an (object, color) pair the joint basis vector, so a
//! question about a present object correlates with the image while the same
//! question about an absent object does not. That geometry is the entire
//! training signal downstream; everything else in the pipeline is learned.
//!
//! A loader for externally computed embeddings (line-delimited JSON) lets
//! real encoder exports replace the synthetic world without code changes.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Result, UpdError};
use crate::numerics::matrix::{dot, l2_norm};
use crate::numerics::random::{derive_seed, gaussian_vec, rng_from_seed};

/// Unit-norm embedding, except the null-text embedding which is exactly zero.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    values: Vec<f64>,
}

const UNIT_NORM_TOLERANCE: f64 = 1e-6;
/// External exports are usually float32; their norms round accordingly.
const FILE_NORM_TOLERANCE: f64 = 1e-3;

impl EmbeddingVector {
    /// Wraps a vector that is already unit-norm (within 1e-6) or exactly zero.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        let norm = l2_norm(&values);
        if norm != 0.0 && (norm - 1.0).abs() > UNIT_NORM_TOLERANCE {
            return Err(UpdError::contract(format!(
                "embedding norm {norm} is neither unit nor zero"
            )));
        }
        Ok(EmbeddingVector { values })
    }

    /// The null-text embedding: exactly zero, used to pad unused option slots.
    pub fn null(dim: usize) -> Self {
        EmbeddingVector {
            values: vec![0.0; dim],
        }
    }

    /// Normalizes arbitrary values to unit norm; zero input stays zero.
    pub fn normalized(mut values: Vec<f64>) -> Self {
        let norm = l2_norm(&values);
        if norm > 1e-12 {
            for v in &mut values {
                *v /= norm;
            }
        } else {
            values.iter_mut().for_each(|v| *v = 0.0);
        }
        EmbeddingVector { values }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn is_null(&self) -> bool {
        self.values.iter().all(|v| *v == 0.0)
    }

    pub fn cosine(&self, other: &EmbeddingVector) -> f64 {
        let denom = l2_norm(&self.values) * l2_norm(&other.values);
        if denom == 0.0 {
            return 0.0;
        }
        dot(&self.values, &other.values) / denom
    }
}

/// An image stand-in: a set of (object, color) facts under a stable id.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub id: String,
    /// (object, color) pairs; order does not affect the embedding basis sum.
    pub facts: Vec<(String, String)>,
}

impl Scene {
    pub fn new(id: impl Into<String>, facts: Vec<(String, String)>) -> Self {
        Scene {
            id: id.into(),
            facts,
        }
    }

    pub fn contains_object(&self, object: &str) -> bool {
        self.facts.iter().any(|(o, _)| o == object)
    }

    pub fn contains_color(&self, color: &str) -> bool {
        self.facts.iter().any(|(_, c)| c == color)
    }

    /// Color of the given object, if the scene shows it.
    pub fn color_of(&self, object: &str) -> Option<&str> {
        self.facts
            .iter()
            .find(|(o, _)| o == object)
            .map(|(_, c)| c.as_str())
    }

    /// Object carrying the given color, if any.
    pub fn object_with(&self, color: &str) -> Option<&str> {
        self.facts
            .iter()
            .find(|(_, c)| c == color)
            .map(|(o, _)| o.as_str())
    }
}

pub const DEFAULT_EMBEDDING_DIM: usize = 64;
pub const DEFAULT_NOISE_SCALE: f64 = 0.1;
/// Norm each non-vocabulary token contributes to a text embedding.
const TOKEN_HASH_SCALE: f64 = 0.2;

fn default_objects() -> Vec<String> {
    ["dress", "car", "ball", "cat", "dog", "chair", "flower", "book", "shoe", "cup"]
        .iter()
        .map(|s| s.to_string())
        .collect()
}

fn default_colors() -> Vec<String> {
    ["white", "blue", "red", "green", "yellow", "black"]
        .iter()
        .map(|s| s.to_string())
        .collect()
}

/// Deterministic embedder over the synthetic fact vocabulary.
#[derive(Clone, Debug)]
pub struct SyntheticWorld {
    seed: u64,
    dim: usize,
    noise_scale: f64,
    objects: Vec<String>,
    colors: Vec<String>,
    /// Orthonormal rows, one per (object, color) fact.
    basis: Vec<Vec<f64>>,
}

impl SyntheticWorld {
    pub fn new(seed: u64, dim: usize, noise_scale: f64) -> Result<Self> {
        Self::with_vocabulary(seed, dim, noise_scale, default_objects(), default_colors())
    }

    pub fn with_vocabulary(
        seed: u64,
        dim: usize,
        noise_scale: f64,
        objects: Vec<String>,
        colors: Vec<String>,
    ) -> Result<Self> {
        let pairs = objects.len() * colors.len();
        if pairs == 0 {
            return Err(UpdError::Config(
                "world needs at least one object and one color".to_string(),
            ));
        }
        if pairs > dim {
            return Err(UpdError::Config(format!(
                "{} object-color pairs cannot be pairwise orthogonal in {} dimensions",
                pairs, dim
            )));
        }
        if noise_scale < 0.0 {
            return Err(UpdError::Config("negative noise scale".to_string()));
        }
        let basis = orthonormal_basis(derive_seed(seed, "fact-basis"), pairs, dim)?;
        Ok(SyntheticWorld {
            seed,
            dim,
            noise_scale,
            objects,
            colors,
            basis,
        })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn objects(&self) -> &[String] {
        &self.objects
    }

    pub fn colors(&self) -> &[String] {
        &self.colors
    }

    pub fn is_object(&self, word: &str) -> bool {
        self.objects.iter().any(|o| o == word)
    }

    pub fn is_color(&self, word: &str) -> bool {
        self.colors.iter().any(|c| c == word)
    }

    fn fact_row(&self, object: &str, color: &str) -> Result<&[f64]> {
        let o = self
            .objects
            .iter()
            .position(|x| x == object)
            .ok_or_else(|| UpdError::contract(format!("unknown object {object:?}")))?;
        let c = self
            .colors
            .iter()
            .position(|x| x == color)
            .ok_or_else(|| UpdError::contract(format!("unknown color {color:?}")))?;
        Ok(&self.basis[o * self.colors.len() + c])
    }

    /// Basis vector shared by an (object, color) fact; unit norm.
    pub fn fact_vector(&self, object: &str, color: &str) -> Result<EmbeddingVector> {
        Ok(EmbeddingVector::normalized(
            self.fact_row(object, color)?.to_vec(),
        ))
    }

    /// Normalized basis sum of the scene's facts plus seeded noise.
    /// Deterministic per (world, scene); an empty scene is an error.
    pub fn embed_image(&self, scene: &Scene) -> Result<EmbeddingVector> {
        if scene.facts.is_empty() {
            return Err(UpdError::contract(format!(
                "scene {:?} has no facts to embed",
                scene.id
            )));
        }
        let mut v = vec![0.0; self.dim];
        for (object, color) in &scene.facts {
            let row = self.fact_row(object, color)?;
            for (x, b) in v.iter_mut().zip(row) {
                *x += b;
            }
        }
        let noise_seed = derive_seed(self.seed, &format!("image-noise:{}", scene.id));
        let mut rng = rng_from_seed(noise_seed);
        let noise = gaussian_vec(&mut rng, self.dim, self.noise_scale / (self.dim as f64).sqrt());
        for (x, n) in v.iter_mut().zip(&noise) {
            *x += n;
        }
        Ok(EmbeddingVector::normalized(v))
    }

    /// Embeds text from what it mentions: object words add the object's
    /// marginal direction, color words the color's marginal, co-occurring
    /// (object, color) pairs the joint fact vector, and every token a small
    /// seeded hash vector. Empty or token-free text is the null embedding.
    pub fn embed_text(&self, text: &str) -> EmbeddingVector {
        let tokens = tokenize(text);
        if tokens.is_empty() {
            return EmbeddingVector::null(self.dim);
        }
        let mut object_hits = BTreeSet::new();
        let mut color_hits = BTreeSet::new();
        for t in &tokens {
            if let Some(o) = self.objects.iter().position(|x| x == t) {
                object_hits.insert(o);
            }
            if let Some(c) = self.colors.iter().position(|x| x == t) {
                color_hits.insert(c);
            }
        }

        let n_colors = self.colors.len() as f64;
        let n_objects = self.objects.len() as f64;
        let mut v = vec![0.0; self.dim];
        for &o in &object_hits {
            // marginal over colors, unit norm because the basis is orthonormal
            let scale = 1.0 / n_colors.sqrt();
            for c in 0..self.colors.len() {
                let row = &self.basis[o * self.colors.len() + c];
                for (x, b) in v.iter_mut().zip(row) {
                    *x += scale * b;
                }
            }
        }
        for &c in &color_hits {
            let scale = 1.0 / n_objects.sqrt();
            for o in 0..self.objects.len() {
                let row = &self.basis[o * self.colors.len() + c];
                for (x, b) in v.iter_mut().zip(row) {
                    *x += scale * b;
                }
            }
        }
        for &o in &object_hits {
            for &c in &color_hits {
                let row = &self.basis[o * self.colors.len() + c];
                for (x, b) in v.iter_mut().zip(row) {
                    *x += b;
                }
            }
        }
        for t in &tokens {
            let seed = derive_seed(self.seed, &format!("token:{t}"));
            let mut rng = rng_from_seed(seed);
            let hash_vec = gaussian_vec(&mut rng, self.dim, 1.0 / (self.dim as f64).sqrt());
            for (x, h) in v.iter_mut().zip(&hash_vec) {
                *x += TOKEN_HASH_SCALE * h;
            }
        }
        EmbeddingVector::normalized(v)
    }

    /// Null-text embedding used for unused option slots.
    pub fn null_text(&self) -> EmbeddingVector {
        EmbeddingVector::null(self.dim)
    }
}

/// Lowercased alphanumeric tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|s| !s.is_empty())
        .map(|s| s.to_string())
        .collect()
}

/// Modified Gram-Schmidt over seeded Gaussian rows.
fn orthonormal_basis(seed: u64, count: usize, dim: usize) -> Result<Vec<Vec<f64>>> {
    let mut rng = rng_from_seed(seed);
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(count);
    for _ in 0..count {
        let mut candidate = gaussian_vec(&mut rng, dim, 1.0);
        for prev in &rows {
            let proj = dot(&candidate, prev);
            for (c, p) in candidate.iter_mut().zip(prev) {
                *c -= proj * p;
            }
        }
        let norm = l2_norm(&candidate);
        if norm < 1e-8 {
            return Err(UpdError::contract(
                "degenerate draw while orthonormalizing fact basis".to_string(),
            ));
        }
        for c in &mut candidate {
            *c /= norm;
        }
        rows.push(candidate);
    }
    Ok(rows)
}

/// One line of the external embedding interchange format.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EmbeddingRecord {
    pub id: String,
    /// "image" or "text".
    pub kind: String,
    pub dim: usize,
    pub values: Vec<f64>,
}

/// Externally computed embeddings, keyed by id within each kind. Image ids
/// are scene ids; text ids are the exact text that was embedded.
#[derive(Debug, Clone)]
pub struct EmbeddingStore {
    dim: usize,
    images: BTreeMap<String, EmbeddingVector>,
    texts: BTreeMap<String, EmbeddingVector>,
}

impl EmbeddingStore {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.images.len() + self.texts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty() && self.texts.is_empty()
    }

    pub fn image(&self, id: &str) -> Result<&EmbeddingVector> {
        self.images
            .get(id)
            .ok_or_else(|| UpdError::MissingArtifact(format!("image embedding {id:?}")))
    }

    pub fn text(&self, id: &str) -> Result<&EmbeddingVector> {
        self.texts
            .get(id)
            .ok_or_else(|| UpdError::MissingArtifact(format!("text embedding {id:?}")))
    }

    /// Reads line-delimited JSON records. Validation: uniform dimension,
    /// known kind, unique id per kind, unit norm within 1e-3 (exactly-zero
    /// vectors pass as null-text embeddings). Vectors are re-normalized to
    /// unit length on load so float32 exports round-trip cleanly.
    pub fn load(path: &std::path::Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| UpdError::io(path.display().to_string(), e))?;
        let reader = std::io::BufReader::new(file);
        let mut dim: Option<usize> = None;
        let mut images = BTreeMap::new();
        let mut texts = BTreeMap::new();
        for (lineno, line) in reader.lines().enumerate() {
            let line = line.map_err(|e| UpdError::io(path.display().to_string(), e))?;
            if line.trim().is_empty() {
                continue;
            }
            let record: EmbeddingRecord =
                serde_json::from_str(&line).map_err(|e| UpdError::MalformedData {
                    path: path.display().to_string(),
                    detail: format!("line {}: {}", lineno + 1, e),
                })?;
            if record.values.len() != record.dim {
                return Err(UpdError::MalformedData {
                    path: path.display().to_string(),
                    detail: format!(
                        "line {}: declared dim {} but {} values",
                        lineno + 1,
                        record.dim,
                        record.values.len()
                    ),
                });
            }
            match dim {
                None => dim = Some(record.dim),
                Some(d) if d != record.dim => {
                    return Err(UpdError::MalformedData {
                        path: path.display().to_string(),
                        detail: format!(
                            "line {}: dimension {} conflicts with earlier {}",
                            lineno + 1,
                            record.dim,
                            d
                        ),
                    });
                }
                _ => {}
            }
            let norm = l2_norm(&record.values);
            let vector = if norm == 0.0 {
                EmbeddingVector::null(record.dim)
            } else {
                if (norm - 1.0).abs() > FILE_NORM_TOLERANCE {
                    return Err(UpdError::MalformedData {
                        path: path.display().to_string(),
                        detail: format!(
                            "line {}: embedding {:?} has norm {}, expected unit",
                            lineno + 1,
                            record.id,
                            norm
                        ),
                    });
                }
                EmbeddingVector::normalized(record.values)
            };
            let target = match record.kind.as_str() {
                "image" => &mut images,
                "text" => &mut texts,
                other => {
                    return Err(UpdError::MalformedData {
                        path: path.display().to_string(),
                        detail: format!("line {}: unknown kind {other:?}", lineno + 1),
                    });
                }
            };
            if target.insert(record.id.clone(), vector).is_some() {
                return Err(UpdError::MalformedData {
                    path: path.display().to_string(),
                    detail: format!("line {}: duplicate id {:?}", lineno + 1, record.id),
                });
            }
        }
        let dim = dim.ok_or_else(|| UpdError::MalformedData {
            path: path.display().to_string(),
            detail: "no records".to_string(),
        })?;
        Ok(EmbeddingStore { dim, images, texts })
    }

    pub fn save(path: &std::path::Path, records: &[EmbeddingRecord]) -> Result<()> {
        let mut file = std::fs::File::create(path).map_err(|e| UpdError::io(path.display().to_string(), e))?;
        for record in records {
            let line = serde_json::to_string(record)?;
            writeln!(file, "{line}").map_err(|e| UpdError::io(path.display().to_string(), e))?;
        }
        Ok(())
    }
}

/// Where embeddings come from: the synthetic world or a loaded export.
#[derive(Debug, Clone)]
pub enum EmbeddingProvider {
    Synthetic(SyntheticWorld),
    Store(EmbeddingStore),
}

impl EmbeddingProvider {
    pub fn dim(&self) -> usize {
        match self {
            EmbeddingProvider::Synthetic(w) => w.dim(),
            EmbeddingProvider::Store(s) => s.dim(),
        }
    }

    pub fn embed_image(&self, scene: &Scene) -> Result<EmbeddingVector> {
        match self {
            EmbeddingProvider::Synthetic(w) => w.embed_image(scene),
            EmbeddingProvider::Store(s) => s.image(&scene.id).cloned(),
        }
    }

    /// Text embedding; stores key texts by their exact string. The empty
    /// string is always the null embedding and never hits the store.
    pub fn embed_text(&self, text: &str) -> Result<EmbeddingVector> {
        if text.is_empty() {
            return Ok(EmbeddingVector::null(self.dim()));
        }
        match self {
            EmbeddingProvider::Synthetic(w) => Ok(w.embed_text(text)),
            EmbeddingProvider::Store(s) => s.text(text).cloned(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn world() -> SyntheticWorld {
        SyntheticWorld::new(0, DEFAULT_EMBEDDING_DIM, DEFAULT_NOISE_SCALE).unwrap()
    }

    #[test]
    fn basis_rows_are_pairwise_orthonormal() {
        let w = world();
        for (i, a) in w.basis.iter().enumerate() {
            assert!((l2_norm(a) - 1.0).abs() < 1e-10, "row {i} not unit");
            for b in w.basis.iter().skip(i + 1) {
                assert!(dot(a, b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn too_many_pairs_for_dimension_is_config_error() {
        let err = SyntheticWorld::with_vocabulary(
            0,
            4,
            0.1,
            vec!["a".into(), "b".into(), "c".into()],
            vec!["x".into(), "y".into()],
        )
        .unwrap_err();
        assert!(matches!(err, UpdError::Config(_)));
    }

    #[test]
    fn image_embedding_is_deterministic_and_unit_norm() {
        let w = world();
        let scene = Scene::new("s1", vec![("dress".into(), "white".into())]);
        let a = w.embed_image(&scene).unwrap();
        let b = w.embed_image(&scene).unwrap();
        assert_eq!(a, b);
        assert!((l2_norm(a.values()) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn empty_scene_is_error() {
        let w = world();
        let scene = Scene::new("empty", vec![]);
        assert!(w.embed_image(&scene).is_err());
    }

    #[test]
    fn matching_text_beats_mismatching_text() {
        let w = world();
        let scene = Scene::new("s2", vec![("dress".into(), "white".into())]);
        let img = w.embed_image(&scene).unwrap();
        let matching = w.embed_text("What color is the dress? White");
        let mismatching = w.embed_text("What color is the dress? Blue");
        assert!(img.cosine(&matching) > 0.5);
        assert!(img.cosine(&matching) > img.cosine(&mismatching));
    }

    #[test]
    fn alignment_holds_across_seeded_trials() {
        // 1000 trials over random facts and noise draws; at least 99% must
        // rank the matching option above a mismatching one.
        let w = world();
        let mut rng = rng_from_seed(123);
        let mut wins = 0;
        let trials = 1000;
        for t in 0..trials {
            use rand::Rng;
            let o = &w.objects()[rng.gen_range(0..w.objects().len())];
            let c_idx = rng.gen_range(0..w.colors().len());
            let c = &w.colors()[c_idx];
            let wrong = &w.colors()[(c_idx + 1 + rng.gen_range(0..w.colors().len() - 1))
                % w.colors().len()];
            let scene = Scene::new(format!("trial-{t}"), vec![(o.clone(), c.clone())]);
            let img = w.embed_image(&scene).unwrap();
            let good = w.embed_text(&format!("What color is the {o}? {c}"));
            let bad = w.embed_text(&format!("What color is the {o}? {wrong}"));
            if img.cosine(&good) > img.cosine(&bad) {
                wins += 1;
            }
        }
        assert!(wins >= 990, "only {wins}/{trials} trials aligned");
    }

    #[test]
    fn question_about_present_object_correlates_more_than_absent() {
        let w = world();
        let scene = Scene::new("s3", vec![("cat".into(), "black".into())]);
        let img = w.embed_image(&scene).unwrap();
        let present = w.embed_text("What color is the cat?");
        let absent = w.embed_text("What color is the dress?");
        assert!(img.cosine(&present) > img.cosine(&absent) + 0.2);
    }

    #[test]
    fn null_text_is_zero_vector() {
        let w = world();
        assert!(w.embed_text("").is_null());
        assert!(w.embed_text("  ?!  ").is_null());
        assert!(w.null_text().is_null());
    }

    #[test]
    fn text_embeddings_are_unit_norm() {
        let w = world();
        let e = w.embed_text("Describe this image");
        assert!((l2_norm(e.values()) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn store_round_trip_and_lookup() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.jsonl");
        let inv_sqrt2 = 1.0 / 2.0_f64.sqrt();
        let records = vec![
            EmbeddingRecord {
                id: "scene-1".into(),
                kind: "image".into(),
                dim: 2,
                values: vec![inv_sqrt2, inv_sqrt2],
            },
            EmbeddingRecord {
                id: "What color is the dress?".into(),
                kind: "text".into(),
                dim: 2,
                values: vec![1.0, 0.0],
            },
            EmbeddingRecord {
                id: "null".into(),
                kind: "text".into(),
                dim: 2,
                values: vec![0.0, 0.0],
            },
        ];
        EmbeddingStore::save(&path, &records).unwrap();
        let store = EmbeddingStore::load(&path).unwrap();
        assert_eq!(store.dim(), 2);
        assert!(store.image("scene-1").is_ok());
        assert!(store.text("What color is the dress?").is_ok());
        assert!(store.text("null").unwrap().is_null());
        assert!(store.image("missing").is_err());
    }

    #[test]
    fn store_rejects_dimension_conflicts_and_bad_norms() {
        let dir = tempfile::tempdir().unwrap();

        let path = dir.path().join("dims.jsonl");
        std::fs::write(
            &path,
            concat!(
                "{\"id\":\"a\",\"kind\":\"image\",\"dim\":2,\"values\":[1.0,0.0]}\n",
                "{\"id\":\"b\",\"kind\":\"image\",\"dim\":3,\"values\":[1.0,0.0,0.0]}\n"
            ),
        )
        .unwrap();
        assert!(matches!(
            EmbeddingStore::load(&path),
            Err(UpdError::MalformedData { .. })
        ));

        let path = dir.path().join("norm.jsonl");
        std::fs::write(
            &path,
            "{\"id\":\"a\",\"kind\":\"image\",\"dim\":2,\"values\":[3.0,4.0]}\n",
        )
        .unwrap();
        assert!(matches!(
            EmbeddingStore::load(&path),
            Err(UpdError::MalformedData { .. })
        ));

        let path = dir.path().join("dup.jsonl");
        std::fs::write(
            &path,
            concat!(
                "{\"id\":\"a\",\"kind\":\"text\",\"dim\":2,\"values\":[1.0,0.0]}\n",
                "{\"id\":\"a\",\"kind\":\"text\",\"dim\":2,\"values\":[0.0,1.0]}\n"
            ),
        )
        .unwrap();
        assert!(matches!(
            EmbeddingStore::load(&path),
            Err(UpdError::MalformedData { .. })
        ));
    }
}
