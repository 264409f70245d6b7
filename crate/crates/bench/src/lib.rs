//! Deterministic fixtures for the benchmarks.

use codistill::synthdata::generate;
use codistill::training::{architecture_for, SplitData};
use codistill::{ConceptPool, GeneratorConfig, Matrix, Modality, ModelParams, Split, SyntheticDataset, TrainConfig};

/// A dense matrix filled with a smooth non-repeating pattern.
pub fn pattern(rows: usize, cols: usize, phase: f64) -> Matrix {
    let data = (0..rows * cols).map(|i| (i as f64 * 0.7548 + phase).sin()).collect();
    Matrix::new(rows, cols, data).expect("sized to fit")
}

/// The default synthetic dataset and pool.
pub fn default_data() -> (SyntheticDataset, ConceptPool) {
    generate(&GeneratorConfig::default()).expect("default generator config is valid")
}

/// First `n` training rows of one modality.
pub fn batch(ds: &SyntheticDataset, modality: Modality, n: usize) -> (Matrix, Vec<usize>) {
    let split = SplitData::new(ds, modality, Split::Train);
    let idx: Vec<usize> = (0..n.min(split.len())).collect();
    (
        split.features.select_rows(&idx),
        idx.iter().map(|&i| split.labels[i]).collect(),
    )
}

/// Freshly initialized model for `modality` on the default data.
pub fn model(ds: &SyntheticDataset, pool: &ConceptPool, modality: Modality) -> ModelParams {
    let arch = architecture_for(&TrainConfig::synthetic(), ds, pool);
    ModelParams::init(&arch, modality, 0).expect("valid architecture")
}
