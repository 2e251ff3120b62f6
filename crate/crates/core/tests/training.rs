use gaze_core::corrnet::{train_stage1, CorrNet, CorrNetConfig, Example, TransformerConfig};
use gaze_core::data::synth::{render_eye, ContrastSimulator};
use gaze_core::data::{EventStream, Frame, SyntheticSceneConfig};
use gaze_core::nn::OptimizerConfig;
use gaze_core::tokenizer::{TokenizedState, TokenizerConfig, VoxelGridSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn config() -> CorrNetConfig {
    CorrNetConfig {
        tokenizer: TokenizerConfig {
            frame_width: 16,
            frame_height: 16,
            patch: 4,
            voxel: VoxelGridSpec {
                cell_w: 4,
                cell_h: 4,
                cell_t_us: 2_000,
                top_k: 4,
            },
            dim: 16,
            standardize_frames: true,
        },
        transformer: TransformerConfig {
            depth: 1,
            heads: 2,
            ff_dim: 32,
            classes: 2,
            dropout: 0.0,
            head_channels: 8,
        },
    }
}

/// Two fixation targets, left and right of centre, with pixel jitter and
/// the events of a short approach movement.
fn toy_states(n: usize, seed: u64) -> (Vec<TokenizedState>, Vec<usize>) {
    let scene = SyntheticSceneConfig {
        width: 16,
        height: 16,
        pupil_radius_px: [1.8, 2.2],
        ..SyntheticSceneConfig::default()
    };
    let cfg = config();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut states = Vec::new();
    let mut labels = Vec::new();
    for k in 0..n {
        let label = k % 2;
        let target_x = if label == 0 { 5.5 } else { 10.5 };
        let jitter = |rng: &mut ChaCha8Rng| rng.random_range(-0.6..0.6);
        let (cx, cy) = (target_x + jitter(&mut rng), 8.0 + jitter(&mut rng));
        let r = rng.random_range(1.8..2.2);
        let start = render_eye(&scene, (8.0, 8.0), r);
        let mut sim = ContrastSimulator::new(&start, scene.contrast_threshold);
        let mut events = Vec::new();
        for step in 1..=8u64 {
            let a = step as f64 / 8.0;
            let img = render_eye(&scene, (8.0 + a * (cx - 8.0), 8.0 + a * (cy - 8.0)), r);
            events.extend(sim.step(&img, step * 1_000));
        }
        let stream = EventStream::new(events, 16, 16, 0, 10_000).unwrap();
        let frame = Frame::new(render_eye(&scene, (cx, cy), r), 9_000).unwrap();
        states.push(TokenizedState::new(&frame, &stream, &cfg.tokenizer).unwrap());
        labels.push(label);
    }
    (states, labels)
}

#[test]
fn two_cell_problem_is_learned_within_fifty_epochs() {
    let (mut states, labels) = toy_states(200, 3);
    let anchor_frame = Frame::new(
        render_eye(&SyntheticSceneConfig { width: 16, height: 16, ..Default::default() }, (8.0, 8.0), 2.0),
        0,
    )
    .unwrap();
    let anchor = TokenizedState::new(
        &anchor_frame,
        &EventStream::empty(16, 16, 0, 10_000),
        &config().tokenizer,
    )
    .unwrap();
    states.push(anchor.clone());
    let examples: Vec<Example> = labels
        .iter()
        .enumerate()
        .map(|(state, &label)| Example { state, anchor: 0, label })
        .collect();
    let (train, val) = examples.split_at(160);
    let mut net = CorrNet::new(config(), 5).unwrap();
    let opt = OptimizerConfig {
        learning_rate: 3e-3,
        epochs: 50,
        batch_size: 8,
        ..OptimizerConfig::default()
    };
    let log = train_stage1(&mut net, &states, &[anchor], train, val, &opt, 5).unwrap();
    let best = log.epochs.iter().map(|e| e.val_accuracy).fold(0.0, f64::max);
    assert!(best >= 0.95, "best validation accuracy {best}");
    assert!(log.epochs.first().unwrap().loss > log.final_loss());
}

#[test]
fn training_is_reproducible() {
    let (mut states, labels) = toy_states(24, 9);
    let anchor = states[0].clone();
    states.push(anchor.clone());
    let ex: Vec<Example> = labels
        .iter()
        .enumerate()
        .map(|(state, &label)| Example { state, anchor: 0, label })
        .collect();
    let opt = OptimizerConfig {
        learning_rate: 1e-3,
        epochs: 3,
        batch_size: 4,
        ..OptimizerConfig::default()
    };
    let run = || {
        let mut net = CorrNet::new(config(), 1).unwrap();
        let log = train_stage1(&mut net, &states, std::slice::from_ref(&anchor), &ex[..16], &ex[16..], &opt, 2).unwrap();
        let out = net.forward(&anchor, &states[20]).unwrap();
        (log, out.logits)
    };
    let (a, b) = (run(), run());
    assert_eq!(a.0, b.0);
    assert_eq!(
        a.1.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
        b.1.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
    );
}
