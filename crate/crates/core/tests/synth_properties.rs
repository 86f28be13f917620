use mmsel_core::adapter::{fit_adapters, AdaptConfig, AdapterPair};
use mmsel_core::pipeline::{run_stages, PipelineConfig};
use mmsel_core::scoring::{score_all, semantic_alignment, ScoreConfig};
use mmsel_core::selector::{optimize_selection, SelectConfig};
use mmsel_core::synth::{generate, mask_metrics, random_mask, selection_metrics, SampleFlag, SynthSpec};

fn mean_over(values: &[f64], rows: impl Iterator<Item = usize>) -> f64 {
    let (s, c) = rows.fold((0.0, 0usize), |(s, c), i| (s + values[i], c + 1));
    s / c as f64
}

#[test]
fn flipped_labels_lower_alignment() {
    let w = generate(&SynthSpec { label_noise_rate: 0.2, seed: 4, ..Default::default() }).unwrap();
    assert_eq!(w.truth.count(SampleFlag::LabelFlipped), 200);
    let sas = semantic_alignment(&w.table, &w.bank, &AdapterPair::passthrough(32)).unwrap();
    let flags = &w.truth.flags;
    let clean = mean_over(&sas, (0..1000).filter(|&i| flags[i] == SampleFlag::Clean));
    let flipped = mean_over(&sas, (0..1000).filter(|&i| flags[i] == SampleFlag::LabelFlipped));
    assert!(flipped < clean - 0.3, "clean {clean}, flipped {flipped}");
}

#[test]
fn selection_rejects_flipped_labels() {
    let w = generate(&SynthSpec { label_noise_rate: 0.2, seed: 9, ..Default::default() }).unwrap();
    let run = run_stages(&w.table, &w.bank, &PipelineConfig { ratio: 0.3, ..Default::default() }).unwrap();
    let m = selection_metrics(&run.state, &w.truth, &run.scores, w.table.labels()).unwrap();
    assert_eq!(m.n_selected, 300);
    assert!(m.noisy_fraction < 0.02, "{}", m.noisy_fraction);
    assert!(m.selected_mean_sas.unwrap() > m.rejected_mean_sas.unwrap());
}

#[test]
fn selection_rejects_corrupted_embeddings() {
    let w = generate(&SynthSpec { corruption_rate: 0.1, seed: 5, ..Default::default() }).unwrap();
    assert_eq!(w.truth.count(SampleFlag::Corrupted), 100);
    let run = run_stages(&w.table, &w.bank, &PipelineConfig::default()).unwrap();
    let m = selection_metrics(&run.state, &w.truth, &run.scores, w.table.labels()).unwrap();
    assert!(m.corrupted_fraction < 0.05, "{}", m.corrupted_fraction);
}

#[test]
fn random_selection_matches_null_model() {
    let w = generate(&SynthSpec { label_noise_rate: 0.2, seed: 2, ..Default::default() }).unwrap();
    let scores = score_all(&w.table, &w.bank, &AdapterPair::passthrough(32), &ScoreConfig::default()).unwrap();
    let mut mean = 0.0;
    let reps = 200;
    for seed in 0..reps {
        let mask = random_mask(1000, 300, seed);
        assert_eq!(mask.iter().filter(|&&m| m).count(), 300);
        mean += mask_metrics(&mask, &w.truth, &scores, w.table.labels()).unwrap().noisy_fraction;
    }
    mean /= reps as f64;
    // Hypergeometric: sd of one draw is sqrt(.2*.8/300 * 700/999) ~ 0.0194.
    let se = 0.0194 / (reps as f64).sqrt();
    assert!((mean - 0.2).abs() < 3.0 * se + 1e-9, "{mean}");
}

#[test]
fn diversity_weight_favours_spread_out_samples() {
    let w = generate(&SynthSpec { seed: 6, ..Default::default() }).unwrap();
    let scores = score_all(&w.table, &w.bank, &AdapterPair::passthrough(32), &ScoreConfig::default()).unwrap();
    let plain = optimize_selection(&scores, 0.3, &SelectConfig { alpha: Some(0.0), ..Default::default() }).unwrap();
    let diverse = optimize_selection(&scores, 0.3, &SelectConfig { alpha: Some(5.0), ..Default::default() }).unwrap();
    let truth = &w.truth;
    let labels = w.table.labels();
    let a = selection_metrics(&plain, truth, &scores, labels).unwrap();
    let b = selection_metrics(&diverse, truth, &scores, labels).unwrap();
    assert!(b.selected_mean_sds.unwrap() > a.selected_mean_sds.unwrap());
    assert!(a.selected_mean_sas.unwrap() >= b.selected_mean_sas.unwrap());
}

#[test]
fn adapters_recover_from_rotated_images() {
    let w = generate(&SynthSpec { rotate_images: true, seed: 0, ..Default::default() }).unwrap();
    let (pair, _) = fit_adapters(&w.table, &w.bank, &AdaptConfig::default()).unwrap();
    let fitted = semantic_alignment(&w.table, &w.bank, &pair).unwrap();
    let base = semantic_alignment(&w.table, &w.bank, &AdapterPair::passthrough(32)).unwrap();
    let all = || 0..w.table.n();
    assert!(mean_over(&fitted, all()) > mean_over(&base, all()));
}

#[test]
fn generation_is_reproducible() {
    let spec = SynthSpec { label_noise_rate: 0.1, corruption_rate: 0.1, seed: 12, rotate_images: true, ..Default::default() };
    let a = generate(&spec).unwrap();
    let b = generate(&spec).unwrap();
    assert_eq!(a.table.embeddings(), b.table.embeddings());
    assert_eq!(a.table.labels(), b.table.labels());
    assert_eq!(a.truth, b.truth);
    let c = generate(&SynthSpec { seed: 13, ..spec }).unwrap();
    assert_ne!(a.table.embeddings(), c.table.embeddings());
}
