//! Seeded synthetic datasets with a built-in modality gap.
//!
//! Gallery items are unit-normalized Gaussian perturbations of random unit
//! class centroids. Text queries are the class centroid plus one global
//! offset vector shared by every query (the modality gap) plus noise,
//! renormalized. Relevance is class membership.
//!
//! Each gallery record also carries a short text and attribute slots, some
//! of them blanked out, along with a fixture provider under which the true
//! attribute text is strictly the nearest candidate to the item's image.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::augment::{AttributeVocabulary, SEPARATOR};
use crate::error::{Error, Result};
use crate::eval::Qrels;
use crate::similarity::dot;
use crate::store::{
    save_embeddings, save_manifest, write_atomic, EmbeddingMatrix, Manifest, SampleRecord,
};

/// Shape of a generated dataset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FixtureParams {
    pub classes: usize,
    pub per_class: usize,
    pub queries_per_class: usize,
    pub dim: usize,
    /// Per-coordinate standard deviation of gallery noise.
    pub sigma: f64,
    /// Per-coordinate standard deviation of query noise.
    pub query_sigma: f64,
    /// Norm of the global offset added to every query.
    pub gap: f64,
    /// Probability that an attribute slot is blanked out.
    pub holdout: f64,
    pub seed: u64,
}

impl Default for FixtureParams {
    fn default() -> Self {
        FixtureParams {
            classes: 10,
            per_class: 20,
            queries_per_class: 2,
            dim: 64,
            sigma: 0.15,
            query_sigma: 0.15,
            gap: 0.9,
            holdout: 0.5,
            seed: 0,
        }
    }
}

impl FixtureParams {
    pub fn with_seed(seed: u64) -> Self {
        FixtureParams {
            seed,
            ..Default::default()
        }
    }
}

/// A generated dataset.
#[derive(Debug, Clone)]
pub struct Fixture {
    pub gallery: EmbeddingMatrix,
    /// Gallery records with some attribute slots blanked out.
    pub gallery_manifest: Manifest,
    /// Gallery records with every slot filled and the text they would get
    /// from a perfect greedy augmentation.
    pub gallery_truth: Manifest,
    pub queries: EmbeddingMatrix,
    pub query_manifest: Manifest,
    pub qrels: Qrels,
    pub vocab: AttributeVocabulary,
    /// Text embeddings for every candidate text along the greedy path.
    pub provider_matrix: EmbeddingMatrix,
    pub provider_lookup: Vec<(String, usize)>,
}

const COLORS: [&str; 11] = [
    "black", "white", "silver", "gray", "red", "blue", "green", "yellow", "brown", "orange",
    "purple",
];
const TYPES: [&str; 6] = ["sedan", "suv", "truck", "bus", "van", "hatchback"];
const BRAND_COUNT: usize = 65;

/// The vocabulary used by generated fixtures: 11 colors, 65 brands, 6 types.
pub fn vehicle_vocabulary() -> AttributeVocabulary {
    let values = [
        (
            "color".to_string(),
            COLORS.iter().map(|s| s.to_string()).collect(),
        ),
        (
            "brand".to_string(),
            (1..=BRAND_COUNT).map(|i| format!("brand{i:02}")).collect(),
        ),
        (
            "type".to_string(),
            TYPES.iter().map(|s| s.to_string()).collect(),
        ),
    ];
    AttributeVocabulary::new(
        vec!["color".into(), "brand".into(), "type".into()],
        values.into_iter().collect(),
    )
    .expect("built-in vocabulary is valid")
}

fn gaussian(rng: &mut ChaCha8Rng, dim: usize, sigma: f64) -> Vec<f64> {
    (0..dim)
        .map(|_| sigma * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

fn unit(mut v: Vec<f64>) -> Vec<f64> {
    let n = dot(&v, &v).sqrt();
    v.iter_mut().for_each(|x| *x /= n);
    v
}

fn to_f32(v: &[f64]) -> Vec<f32> {
    v.iter().map(|&x| x as f32).collect()
}

/// Generates a dataset from `params`. The same params always yields the same
/// dataset.
pub fn generate(params: &FixtureParams) -> Result<Fixture> {
    if params.classes == 0 || params.per_class == 0 || params.dim == 0 {
        return Err(Error::Config(
            "fixture needs classes, items and dimensions".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let centroids: Vec<Vec<f64>> = (0..params.classes)
        .map(|_| unit(gaussian(&mut rng, params.dim, 1.0)))
        .collect();
    let offset: Vec<f64> = unit(gaussian(&mut rng, params.dim, 1.0))
        .into_iter()
        .map(|x| x * params.gap)
        .collect();

    let vocab = vehicle_vocabulary();
    let mut gallery_rows = Vec::new();
    let mut gallery_records = Vec::new();
    let mut truth_records = Vec::new();
    let mut provider_rows: Vec<Vec<f32>> = Vec::new();
    let mut provider_lookup = Vec::new();

    for (c, centroid) in centroids.iter().enumerate() {
        for j in 0..params.per_class {
            let noise = gaussian(&mut rng, params.dim, params.sigma);
            let image = unit(centroid.iter().zip(&noise).map(|(a, b)| a + b).collect());
            let image32 = to_f32(&image);

            let id = format!("g{c:02}_{j:02}");
            let mut record = SampleRecord::new(&id);
            record.label = Some(format!("class{c:02}"));
            record.image = Some(format!("images/{id}.jpg"));
            record.text = Some(format!("a photo of vehicle {id}"));
            let mut truth = record.clone();
            let mut text = record.text.clone().unwrap();
            for slot in vocab.slots() {
                let values = vocab.values(slot).unwrap();
                let true_value = &values[rng.random_range(0..values.len())];
                let held_out = rng.random_bool(params.holdout);
                truth
                    .attributes
                    .insert(slot.clone(), Some(true_value.clone()));
                if !held_out {
                    record
                        .attributes
                        .insert(slot.clone(), Some(true_value.clone()));
                    continue;
                }
                record.attributes.insert(slot.clone(), None);
                // Candidate texts along the greedy path: the true one embeds
                // exactly at the image, the rest at random directions.
                for v in values {
                    let candidate = format!("{text}{SEPARATOR}{v}");
                    let row = if v == true_value {
                        image32.clone()
                    } else {
                        loop {
                            let r = unit(gaussian(&mut rng, params.dim, 1.0));
                            if dot(&r, &image) < 0.9 {
                                break to_f32(&r);
                            }
                        }
                    };
                    provider_lookup.push((candidate, provider_rows.len()));
                    provider_rows.push(row);
                }
                text = format!("{text}{SEPARATOR}{true_value}");
            }
            truth.text = Some(text);
            gallery_rows.push(image32);
            gallery_records.push(record);
            truth_records.push(truth);
        }
    }

    let mut query_rows = Vec::new();
    let mut query_records = Vec::new();
    for (c, centroid) in centroids.iter().enumerate() {
        for j in 0..params.queries_per_class {
            let noise = gaussian(&mut rng, params.dim, params.query_sigma);
            let q: Vec<f64> = centroid
                .iter()
                .zip(&offset)
                .zip(&noise)
                .map(|((a, b), n)| a + b + n)
                .collect();
            query_rows.push(to_f32(&unit(q)));
            let mut r = SampleRecord::new(format!("q{c:02}_{j:02}"));
            r.label = Some(format!("class{c:02}"));
            r.text = Some(format!("query for class {c:02}"));
            query_records.push(r);
        }
    }

    let gallery_manifest = Manifest::new(gallery_records)?;
    let query_manifest = Manifest::new(query_records)?;
    let qrels = Qrels::from_labels(&query_manifest, &gallery_manifest)?;
    let provider_matrix = if provider_rows.is_empty() {
        EmbeddingMatrix::empty(params.dim)?
    } else {
        EmbeddingMatrix::from_rows(&provider_rows)?
    };
    Ok(Fixture {
        gallery: EmbeddingMatrix::from_rows(&gallery_rows)?,
        gallery_manifest,
        gallery_truth: Manifest::new(truth_records)?,
        queries: if query_rows.is_empty() {
            EmbeddingMatrix::empty(params.dim)?
        } else {
            EmbeddingMatrix::from_rows(&query_rows)?
        },
        query_manifest,
        qrels,
        vocab,
        provider_matrix,
        provider_lookup,
    })
}

/// Files written by [`Fixture::write`], relative to the output directory.
pub mod files {
    pub const GALLERY_EMB: &str = "gallery.emb";
    pub const GALLERY_MANIFEST: &str = "gallery.jsonl";
    pub const GALLERY_TRUTH: &str = "gallery_truth.jsonl";
    pub const QUERY_EMB: &str = "query.emb";
    pub const QUERY_MANIFEST: &str = "query.jsonl";
    pub const QRELS: &str = "qrels.jsonl";
    pub const VOCAB: &str = "vocab.json";
    pub const PROVIDER_EMB: &str = "provider.emb";
    pub const PROVIDER_LOOKUP: &str = "provider.jsonl";
}

impl Fixture {
    /// Provider answering from this fixture's candidate-text embeddings.
    pub fn provider(&self) -> Result<crate::provider::FixtureProvider> {
        let lookup: HashMap<String, usize> = self.provider_lookup.iter().cloned().collect();
        crate::provider::FixtureProvider::new(self.provider_matrix.clone(), lookup)
    }

    /// Writes every part of the fixture into `dir`, creating it if needed.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        save_embeddings(&self.gallery, dir.join(files::GALLERY_EMB))?;
        save_manifest(&self.gallery_manifest, dir.join(files::GALLERY_MANIFEST))?;
        save_manifest(&self.gallery_truth, dir.join(files::GALLERY_TRUTH))?;
        save_embeddings(&self.queries, dir.join(files::QUERY_EMB))?;
        save_manifest(&self.query_manifest, dir.join(files::QUERY_MANIFEST))?;

        let mut qrels = String::new();
        for r in self.query_manifest.records() {
            let relevant = self.qrels.get(&r.id).expect("every query is judged");
            let line = serde_json::json!({ "query_id": r.id, "relevant": relevant });
            qrels.push_str(&line.to_string());
            qrels.push('\n');
        }
        write_atomic(&dir.join(files::QRELS), qrels.as_bytes())?;

        let vocab =
            serde_json::to_string_pretty(&self.vocab).expect("vocabulary serializes") + "\n";
        write_atomic(&dir.join(files::VOCAB), vocab.as_bytes())?;

        save_embeddings(&self.provider_matrix, dir.join(files::PROVIDER_EMB))?;
        let mut lookup = String::new();
        for (text, row) in &self.provider_lookup {
            lookup.push_str(&serde_json::json!({ "text": text, "row": row }).to_string());
            lookup.push('\n');
        }
        write_atomic(&dir.join(files::PROVIDER_LOOKUP), lookup.as_bytes())?;
        Ok(())
    }
}
