//! Each block variant trains: loss is finite and decreases over 50 Adam
//! steps on a fixed 64-sample batch. A scaled-down DenseNet also trains end
//! to end through its transitions.

use bitgrad_core::arch::{
    build_block, build_network, ArchSpec, BlockKind, DownsamplingMode, Family, Geometry,
};
use bitgrad_core::binarize::BinarizeConfig;
use bitgrad_core::data::AugmentPolicy;
use bitgrad_core::kernels::ConvGeometry;
use bitgrad_core::nn::{Graph, GraphBuilder};
use bitgrad_core::train::{fit, synthetic_dataset, TrainConfig};

fn network_around(kind: BlockKind) -> Graph {
    let mut b = GraphBuilder::new(1, 8, 8);
    let input = b.input();
    // Full-precision stem lifts the single input channel to block width.
    let stem = b.conv(input, 16, ConvGeometry::new(3, 3, 1, 1), false);
    let bn = b.batch_norm(stem);
    let growth = match kind {
        BlockKind::DenseNetBottleneck | BlockKind::DenseNetPlain | BlockKind::DenseNetE => 8,
        _ => 16,
    };
    let block = build_block(&mut b, kind, bn, growth).unwrap();
    let pooled = b.global_avg_pool(block);
    let logits = b.dense(pooled, 4, true);
    b.finish(logits, BinarizeConfig::default())
}

#[test]
fn scaled_down_densenet_trains_through_transitions() {
    // 4 blocks, growth 8: the same graph structure as the full nets
    // (stem, concat blocks, reducing transitions, classifier) at toy width.
    for downsampling in [
        DownsamplingMode::BinaryLowReduction,
        DownsamplingMode::FullPrecisionHighReduction,
    ] {
        let spec = ArchSpec {
            family: Family::DenseNetE,
            geometry: Geometry::Cifar,
            blocks: 4,
            growth_rate: 8,
            reduction: downsampling.default_reduction(),
            downsampling,
            num_classes: 4,
        };
        let graph = build_network(&spec).unwrap();
        let data = synthetic_dataset(31, 4, 6, (3, 32, 32));
        let cfg = TrainConfig {
            lr_initial: 5e-3,
            lr_decay_epochs: vec![],
            lr_decay_factor: 0.1,
            epochs: 5,
            batch_size: 24,
            seed: 2,
            augment: AugmentPolicy::none(),
        };
        let (_, metrics) = fit(&graph, &data, &cfg, None, |_| {}).unwrap();
        let first = metrics.epochs.first().unwrap().train_loss;
        let last = metrics.epochs.last().unwrap().train_loss;
        assert!(
            last.is_finite() && last < first,
            "{downsampling:?}: densenet loss should decrease ({first} -> {last})"
        );
    }
}

#[test]
fn every_block_kind_reduces_overfit_loss() {
    let kinds = [
        BlockKind::ResNetBottleneck,
        BlockKind::ResNetPlain,
        BlockKind::ResNetE,
        BlockKind::DenseNetBottleneck,
        BlockKind::DenseNetPlain,
        BlockKind::DenseNetE,
    ];
    let data = synthetic_dataset(99, 4, 16, (1, 8, 8));
    for kind in kinds {
        let graph = network_around(kind);
        let cfg = TrainConfig {
            lr_initial: 1e-2,
            lr_decay_epochs: vec![],
            lr_decay_factor: 0.1,
            epochs: 50,
            batch_size: 64,
            seed: 7,
            augment: AugmentPolicy::none(),
        };
        let (_, metrics) = fit(&graph, &data, &cfg, None, |_| {}).unwrap();
        let first = metrics.epochs.first().unwrap().train_loss;
        let last = metrics.epochs.last().unwrap().train_loss;
        assert!(first.is_finite() && last.is_finite(), "{kind:?}: finite loss");
        assert!(
            last < first,
            "{kind:?}: loss should decrease over 50 steps ({first} -> {last})"
        );
    }
}
