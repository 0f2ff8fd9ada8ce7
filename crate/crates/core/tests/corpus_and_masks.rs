//! Generator ground truth and sampled-missingness statistics.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use scar_core::corpus::{
    class_prompt, generate_corpus, generate_record, plan_record, CorpusConfig, EvidenceKind, Split,
};
use scar_core::missingness::{
    pretrain_augment, sample_random_mask, MaskConfig, MaskGeometry, MaskKind,
};

#[test]
fn default_train_split_has_balanced_classes() {
    let cfg = CorpusConfig::default();
    let corpus = generate_corpus(&cfg).unwrap();
    assert_eq!(corpus.train.len() + corpus.val.len() + corpus.test.len(), 2800);
    for k in 0..cfg.num_classes {
        let n = corpus.train.iter().filter(|r| r.labels[k] == 1).count();
        assert!((300..=900).contains(&n), "class {k}: {n} positives");
    }
}

#[test]
fn labels_are_recoverable_from_reports() {
    let cfg = CorpusConfig::default();
    for i in 0..500 {
        let rec = generate_record(&cfg, Split::Train, i);
        let recovered: Vec<u8> = (0..cfg.num_classes)
            .map(|k| u8::from(rec.report.iter().any(|t| cfg.class_tokens(k).contains(t))))
            .collect();
        assert_eq!(recovered, rec.labels, "record {}", rec.id);
        for k in rec.positives() {
            let own = rec.report.iter().filter(|t| cfg.class_tokens(k).contains(t)).count();
            assert!(own >= 2);
        }
    }
}

#[test]
fn noiseless_primary_cells_carry_the_most_motif_energy() {
    let cfg = CorpusConfig { noise_std: 0.0, ..CorpusConfig::default() };
    let (c, p) = (cfg.signal_length, cfg.patch_length);
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for _ in 0..200 {
        let plan = plan_record(&cfg, &mut rng);
        let raw = plan.render_raw(&cfg);
        let base = plan.render_baseline(&cfg);
        let energy = |lead: usize, patch: usize| -> f64 {
            let s = lead * c + patch * p;
            (s..s + p).map(|i| (raw[i] - base[i]).powi(2)).sum()
        };
        let primaries: Vec<(usize, usize)> = plan
            .evidence_map
            .iter()
            .map(|e| (e.primary().lead, e.primary().patch))
            .collect();
        for ev in &plan.evidence_map {
            let prim = ev.primary();
            let e_prim = energy(prim.lead, prim.patch);
            for lead in 0..cfg.num_leads {
                for patch in 0..cfg.num_patches() {
                    if !primaries.contains(&(lead, patch)) {
                        assert!(e_prim > energy(lead, patch));
                    }
                }
            }
            assert_eq!(ev.cells.iter().filter(|c| c.kind == EvidenceKind::Primary).count(), 1);
            assert!(ev.secondary().count() >= 2);
        }
    }
}

#[test]
fn class_prompts_use_disjoint_dedicated_tokens() {
    let cfg = CorpusConfig::default();
    let prompts: Vec<Vec<usize>> = (0..cfg.num_classes).map(|k| class_prompt(k, &cfg).unwrap()).collect();
    for (a, pa) in prompts.iter().enumerate() {
        assert_eq!(pa, &class_prompt(a, &cfg).unwrap());
        for pb in &prompts[a + 1..] {
            assert!(pa.iter().filter(|&&t| t != 0).all(|t| !pb.contains(t)));
        }
    }
}

const GEO: MaskGeometry = MaskGeometry { leads: 12, samples: 500, patch_length: 50 };

#[test]
fn eval_lead_drop_rate_matches_binomial_mean() {
    let draws = 10_000;
    let total: usize = (0..draws)
        .map(|s| {
            sample_random_mask(MaskKind::LeadOnly, &MaskConfig::EVAL, GEO, s)
                .unwrap()
                .dropped_leads
                .len()
        })
        .sum();
    let mean = total as f64 / draws as f64;
    assert!((1.13..=1.27).contains(&mean), "mean dropped leads {mean}");
}

#[test]
fn pretraining_augmentation_drops_about_two_point_four_leads() {
    let cfg = CorpusConfig::default();
    let rec = generate_record(&cfg, Split::Train, 0);
    let draws = 4_000;
    let total: usize = (0..draws)
        .map(|s| {
            let aug = pretrain_augment(&rec, &MaskConfig::PRETRAIN, cfg.patch_length, s).unwrap();
            let flags = aug.signal.missing.unwrap_or_default();
            (0..cfg.num_leads)
                .filter(|&l| !flags.is_empty() && flags[l * cfg.signal_length..(l + 1) * cfg.signal_length].iter().all(|&f| f))
                .count()
        })
        .sum();
    let mean = total as f64 / draws as f64;
    let sigma = (12.0 * 0.2 * 0.8 / draws as f64).sqrt();
    assert!((mean - 2.4).abs() <= 3.0 * sigma, "mean dropped leads {mean}");
}

#[test]
fn augmentation_is_seed_deterministic() {
    let cfg = CorpusConfig::default();
    let rec = generate_record(&cfg, Split::Train, 3);
    let a = pretrain_augment(&rec, &MaskConfig::PRETRAIN, cfg.patch_length, 42).unwrap();
    let b = pretrain_augment(&rec, &MaskConfig::PRETRAIN, cfg.patch_length, 42).unwrap();
    assert_eq!(a, b);
    let none = MaskConfig { lead_drop_prob: 0.0, span_ratio_range: (0.0, 0.0) };
    assert_eq!(pretrain_augment(&rec, &none, cfg.patch_length, 42).unwrap(), rec);
}
