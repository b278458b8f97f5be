use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::backbone::{BackboneConfig, PrefixVariant};
use crate::data::{class_tokens, Manifest, SplitCounts, Stream};

fn tiny() -> (Backbone, Stream, Vec<Vec<usize>>) {
    let cfg = BackboneConfig {
        dim: 16,
        heads: 2,
        vision_layers: 2,
        text_layers: 1,
        ..BackboneConfig::default()
    };
    let mut bb = Backbone::init(cfg.clone(), 3).unwrap();
    bb.freeze();
    let m = Manifest {
        classes: 3,
        base: SplitCounts {
            train_per_class: 2,
            test_per_class: 2,
        },
        domain_counts: SplitCounts {
            train_per_class: 4,
            test_per_class: 3,
        },
        ..Manifest::default()
    };
    let labels = class_tokens(3, cfg.label_tokens, cfg.vocab);
    (bb, m.materialize().unwrap(), labels)
}

fn small_cfgs() -> (PromptConfig, TrainConfig) {
    let p = PromptConfig {
        common_len: 2,
        image_len: 2,
        text_len: 2,
        layer_start: 0,
        layer_end: 1,
        ..PromptConfig::default()
    };
    let t = TrainConfig {
        epochs: 2,
        batch: 4,
        k: 2,
        ..TrainConfig::default()
    };
    (p, t)
}

#[test]
fn snapshots_are_frozen_and_untouched_by_later_domains() {
    let (bb, stream, labels) = tiny();
    let (p, t) = small_cfgs();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut bank = PromptBank::new(&p, bb.config.dim, &mut rng);
    let before_bb = bb.checksum();
    train_domain(
        1,
        &stream.domains[0].train,
        &mut bank,
        &bb,
        &labels,
        &p,
        &t,
        0,
        &mut rng,
    )
    .unwrap();
    assert_eq!(
        bank.snapshots().keys().copied().collect::<Vec<_>>(),
        vec![1]
    );
    assert!(bank.snapshot(1).unwrap().is_frozen());
    let first = bank.snapshot(1).unwrap().clone();
    assert_eq!(bank.evolving_common, first.common);
    let report = train_domain(
        2,
        &stream.domains[1].train,
        &mut bank,
        &bb,
        &labels,
        &p,
        &t,
        0,
        &mut rng,
    )
    .unwrap();
    assert_eq!(report.epoch_losses.len(), 2);
    assert_eq!(bank.snapshot(1).unwrap(), &first);
    assert_ne!(bank.snapshot(2).unwrap().common, first.common);
    assert_eq!(bb.checksum(), before_bb);
    assert!(train_domain(
        2,
        &stream.domains[1].train,
        &mut bank,
        &bb,
        &labels,
        &p,
        &t,
        0,
        &mut rng
    )
    .is_err());
}

#[test]
fn empty_domain_is_a_data_error() {
    let (bb, stream, labels) = tiny();
    let (p, t) = small_cfgs();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut bank = PromptBank::new(&p, bb.config.dim, &mut rng);
    let mut empty = stream.domains[0].train.clone();
    empty.labels.clear();
    empty.images.clear();
    let r = train_domain(1, &empty, &mut bank, &bb, &labels, &p, &t, 0, &mut rng);
    assert!(matches!(r, Err(Error::Data(_))));
    assert!(bank.snapshots().is_empty());
}

#[test]
fn bank_round_trips_through_bytes() {
    let (bb, stream, labels) = tiny();
    let (p, t) = small_cfgs();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut bank = PromptBank::new(&p, bb.config.dim, &mut rng);
    for s in 1..=2 {
        train_domain(
            s,
            &stream.domains[s - 1].train,
            &mut bank,
            &bb,
            &labels,
            &p,
            &t,
            4,
            &mut rng,
        )
        .unwrap();
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bank.cppm");
    bank.save(&path).unwrap();
    let back = PromptBank::load(&path).unwrap();
    assert_eq!(back.checksums(), bank.checksums());
    assert_eq!(back.evolving_common, bank.evolving_common);
    assert!(back.snapshots().values().all(DomainPromptSet::is_frozen));
}

#[test]
fn bank_rejects_non_increasing_ids() {
    let mut bank = PromptBank::new(
        &PromptConfig::default(),
        8,
        &mut ChaCha8Rng::seed_from_u64(0),
    );
    assert!(bank.append(0, DomainPromptSet::empty(8)).is_err());
    bank.append(2, DomainPromptSet::empty(8)).unwrap();
    assert!(bank.append(1, DomainPromptSet::empty(8)).is_err());
    assert!(bank.append(2, DomainPromptSet::empty(8)).is_err());
}

#[test]
fn fitting_lowers_the_training_loss() {
    let (bb, stream, labels) = tiny();
    let (p, mut t) = small_cfgs();
    t.epochs = 6;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let common = CommonPrompt::init(p.common_len, bb.config.dim, p.init_std, &mut rng);
    let mut set = DomainPromptSet::fresh(&p, bb.config.dim, common, &mut rng);
    let r = fit_prompts(
        &bb,
        &mut set,
        &stream.domains[0].train,
        &labels,
        &p,
        &t,
        1,
        &mut rng,
    )
    .unwrap();
    assert!(r.epoch_losses.iter().all(|l| l.is_finite()));
    assert!(r.epoch_losses.last().unwrap() < &r.epoch_losses[0]);
}

#[test]
fn infer_is_deterministic_and_honours_the_oracle() {
    let (bb, stream, labels) = tiny();
    let (p, t) = small_cfgs();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut bank = PromptBank::new(&p, bb.config.dim, &mut rng);
    let mut pool = FeaturePool::default();
    for s in 1..=2 {
        let d = &stream.domains[s - 1].train;
        train_domain(s, d, &mut bank, &bb, &labels, &p, &t, 2, &mut rng).unwrap();
        build_feature_pool(&mut pool, s, d, &bb, 2, 2).unwrap();
    }
    let img = stream.domains[1].test.image(0);
    let v = PrefixVariant::PrefixOne;
    let a = infer(img, &bank, &pool, &bb, &labels, Selection::Kmeans, v).unwrap();
    let b = infer(img, &bank, &pool, &bb, &labels, Selection::Kmeans, v).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.1, select_domain(img, &pool, &bb).unwrap());
    let (_, d) = infer(img, &bank, &pool, &bb, &labels, Selection::Oracle(1), v).unwrap();
    assert_eq!(d, 1);
    assert!(infer(img, &bank, &pool, &bb, &labels, Selection::Oracle(3), v).is_err());
}

#[test]
fn strategies_produce_full_matrices() {
    let (bb, stream, labels) = tiny();
    let (p, t) = small_cfgs();
    let feats = StreamFeatures::extract(&bb, &stream, t.selector_features).unwrap();
    let ctx = DilContext {
        backbone: &bb,
        stream: &stream,
        labels: &labels,
        features: &feats,
    };
    let s = stream.domains.len();
    for id in [
        StrategyId::CpPrompt,
        StrategyId::ZeroShot,
        StrategyId::SingleSharedContinual,
    ] {
        let out = run_strategy(ctx, id, &p, &t, 0).unwrap();
        assert_eq!(out.kmeans.domains(), s);
        assert_eq!(out.oracle.domains(), s);
        assert_eq!(out.backbone_checksum_before, out.backbone_checksum_after);
        match id {
            StrategyId::CpPrompt => {
                assert_eq!(out.bank.as_ref().unwrap().snapshots().len(), s);
                assert_eq!(out.selector_accuracy.len(), s);
                // Earlier snapshots keep their checksum through later domains.
                let last = out.snapshot_checksums.last().unwrap();
                for (step, sums) in out.snapshot_checksums.iter().enumerate() {
                    for (d, c) in sums {
                        assert_eq!(&last[d], c, "snapshot {d} changed after step {}", step + 1);
                    }
                }
                let row = final_row_with_k(ctx, &out, t.k, t.kmeans_iters).unwrap();
                assert_eq!(row.kmeans, out.kmeans.final_row());
            }
            StrategyId::ZeroShot => {
                assert_eq!(out.trainable_param_count, 0);
                assert_eq!(out.kmeans, out.oracle);
            }
            _ => assert!(out.shared.as_ref().unwrap().is_frozen()),
        }
    }
}
