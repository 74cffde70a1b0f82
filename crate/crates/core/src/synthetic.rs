//! Seeded toy datasets for tests, examples and smoke runs.

use std::collections::BTreeMap;

use nalgebra::DVector;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::embedstore::{EmbeddingDataset, ExampleRecord, Task};

/// Two isotropic unit-variance Gaussian clusters in `dim` dimensions whose
/// means lie `separation` standard deviations apart along a random
/// direction. Half the records are labeled `yes`, in shuffled order.
///
/// Records carry HaluEval-QA style fields so the whole pipeline, prompts
/// included, can run on them.
pub fn two_gaussians(n: usize, dim: usize, separation: f64, seed: u64) -> EmbeddingDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let direction = loop {
        let v = DVector::<f64>::from_fn(dim, |_, _| StandardNormal.sample(&mut rng));
        if v.norm() > 1e-9 {
            break v.normalize();
        }
    };
    let offset = 0.5 * separation;
    let mut classes: Vec<usize> = (0..n).map(|i| usize::from(i >= n / 2)).collect();
    classes.shuffle(&mut rng);
    let labels = Task::HaluevalQa.labels();
    let records = classes
        .iter()
        .enumerate()
        .map(|(id, &class)| {
            let sign = if class == 0 { 1.0 } else { -1.0 };
            let vector = (0..dim)
                .map(|j| {
                    let noise: f64 = StandardNormal.sample(&mut rng);
                    (sign * offset * direction[j] + noise) as f32
                })
                .collect();
            let mut fields = BTreeMap::new();
            fields.insert("knowledge".to_string(), format!("Fact sheet {id}."));
            fields.insert("question".to_string(), format!("What does sheet {id} say?"));
            fields.insert(
                "answer".to_string(),
                format!("Sheet {id} says {}.", if class == 0 { "something else" } else { "what it says" }),
            );
            let consolidated_text = format!(
                "Knowledge: {}\nQuestion: {}\nAnswer: {}",
                fields["knowledge"], fields["question"], fields["answer"]
            );
            ExampleRecord {
                id,
                fields,
                consolidated_text,
                label: labels[class].to_string(),
                vector,
                perplexity_score: Some(2.0 + (id % 17) as f64 * 0.25),
            }
        })
        .collect();
    EmbeddingDataset::new(Task::HaluevalQa, dim, records)
        .expect("generated records are valid")
        .with_text_template("Knowledge: {knowledge}\nQuestion: {question}\nAnswer: {answer}")
}
