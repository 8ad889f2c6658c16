//! Timing sanity for the throughput benchmark at a fast mid-size config:
//! full-keep pruning costs about the same as the dense path, and repeated
//! measurements agree.

use vitlab::harness::bench::bench_throughput;
use vitlab::model::{Model, ModelMode};
use vitlab::pruning::PruneSchedule;
use vitlab::rng::Rng;
use vitlab::vit::BackboneConfig;

fn mid_model() -> Model {
    let cfg = BackboneConfig {
        image_hw: (128, 128),
        patch_hw: (8, 8),
        depth: 6,
        dim: 96,
        heads: 2,
        mlp_ratio: 2.0,
        layer_scale_init: 1e-5,
    };
    Model::init(cfg, &[], &mut Rng::new(0, 0)).unwrap()
}

#[test]
fn full_keep_matches_dense_and_reruns_agree() {
    let model = mid_model();
    let mut rng = Rng::new(1, 0);
    let schedule = PruneSchedule::new(3, 3, 1.0, 6).unwrap();

    let dense = bench_throughput(&model, &ModelMode::Dense, (128, 128), 20, 200, "x", &mut rng)
        .unwrap();
    let full = bench_throughput(
        &model,
        &ModelMode::Prune(schedule),
        (128, 128),
        20,
        200,
        "x",
        &mut rng,
    )
    .unwrap();
    // Same computation up to predictor + gather dispatch overhead.
    let rel = (full.imgs_per_sec_mean - dense.imgs_per_sec_mean).abs() / dense.imgs_per_sec_mean;
    assert!(
        rel < 0.10,
        "full-keep vs dense imgs/sec differ by {:.1}%: {:.2} vs {:.2}",
        rel * 100.0,
        full.imgs_per_sec_mean,
        dense.imgs_per_sec_mean
    );

    // Reproducibility: two timed runs of the same config agree within 15%.
    let again = bench_throughput(&model, &ModelMode::Dense, (128, 128), 20, 200, "x", &mut rng)
        .unwrap();
    let rel = (again.imgs_per_sec_mean - dense.imgs_per_sec_mean).abs() / dense.imgs_per_sec_mean;
    assert!(
        rel < 0.15,
        "rerun imgs/sec differ by {:.1}%",
        rel * 100.0
    );
}
