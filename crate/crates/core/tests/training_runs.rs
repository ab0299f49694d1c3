use hdnn::harness::data::{generate_synthetic, generate_utterances, DatasetSpec};
use hdnn::losses::ce_loss;
use hdnn::network::{backward, forward, init_params};
use hdnn::training::{
    adapt, evaluate, frame_error_rate, train, AdaptConfig, AdaptData, LabelSource, LabeledFrames, Objective,
    TrainConfig, TrainData,
};
use hdnn::{GateConfig, Matrix, ModelConfig, ParamGroup, ParamMask, Parameters};

fn spec(seed: u64) -> DatasetSpec {
    DatasetSpec {
        seed,
        ..Default::default()
    }
}

fn ce_trained(config: &ModelConfig, data: &LabeledFrames<f64>, seed: u64, epochs: usize) -> Parameters {
    let tcfg = TrainConfig {
        epochs,
        seed,
        ..Default::default()
    };
    train(
        init_params(config, seed).unwrap(),
        config,
        TrainData::Frames(data),
        &tcfg,
        None,
    )
    .unwrap()
    .params
}

#[test]
fn smbr_with_ce_smoothing_does_not_lose_expected_accuracy() {
    let s = DatasetSpec {
        separation: 2.0,
        ..spec(4)
    };
    let config = ModelConfig::highway(s.feature_dim, 8, 3, s.num_classes, GateConfig::BOTH);
    let start = ce_trained(&config, &generate_synthetic(&s).unwrap(), 4, 10);
    let utterances = generate_utterances(&s, 20, 10, 3).unwrap();
    let tcfg = TrainConfig {
        objective: Objective::SmbrCe,
        epochs: 4,
        learning_rate: 0.01,
        p: 0.2,
        ..Default::default()
    };
    let out = train(start, &config, TrainData::Sequences(&utterances), &tcfg, None).unwrap();
    let acc: Vec<f64> = out.metrics.iter().map(|m| m.expected_accuracy.unwrap()).collect();
    assert_eq!(acc.len(), 5);
    assert!(acc.windows(2).all(|w| w[1] >= w[0]), "{acc:?}");
}

#[test]
fn constant_predictor_is_at_chance() {
    let data = generate_synthetic(&DatasetSpec {
        frames_per_class: 250,
        ..spec(1)
    })
    .unwrap();
    let constant = Matrix::from_fn(data.len(), 4, |_, c| if c == 2 { 0.7 } else { 0.1 });
    assert!((frame_error_rate(&constant, &data.labels).unwrap() - 0.75).abs() < 1e-12);
}

#[test]
fn self_labelled_adaptation_takes_a_ce_step() {
    let s = spec(2);
    let data = generate_synthetic(&DatasetSpec {
        frames_per_class: 10,
        ..s.clone()
    })
    .unwrap();
    let config = ModelConfig::highway(s.feature_dim, 6, 3, s.num_classes, GateConfig::BOTH);
    let params: Parameters = init_params(&config, 3).unwrap();
    let n = data.len();
    let lr = 0.05;
    let one_step = AdaptConfig {
        learning_rate: lr,
        epochs: 1,
        batch_size: n,
        ..Default::default()
    };
    let out = adapt(
        &params,
        &config,
        &AdaptData::unlabeled(data.features.clone()),
        &one_step,
    )
    .unwrap();

    let trace = forward(&params, &config, &data.features, 1.0).unwrap();
    let self_labels = trace.posteriors.argmax_rows();
    assert_eq!(out.labels.as_deref(), Some(&self_labels[..]));
    let grads = backward(
        &params,
        &config,
        &trace,
        &ce_loss(&trace.posteriors, &self_labels, 1.0).unwrap().d_logits,
    )
    .unwrap();
    for (((group, after), (_, before)), (_, g)) in
        out.params.arrays().into_iter().zip(params.arrays()).zip(grads.arrays())
    {
        for i in 0..after.len() {
            let expected = if group == ParamGroup::Gate {
                before[i] - lr * g[i]
            } else {
                before[i]
            };
            assert!(
                (after[i] - expected).abs() <= 1e-14 * (1.0 + expected.abs()),
                "{group:?}[{i}]"
            );
        }
    }

    let longer = adapt(
        &params,
        &config,
        &AdaptData::unlabeled(data.features.clone()),
        &AdaptConfig::default(),
    )
    .unwrap();
    let t = &longer.loss_trajectory;
    assert_eq!(t.len(), 6);
    assert!(t.windows(2).all(|w| w[1] <= w[0]), "{t:?}");
}

#[test]
fn oracle_label_adaptation_helps_on_shifted_data() {
    let mut wins = 0;
    for seed in 0..5 {
        let s = DatasetSpec {
            frames_per_class: 150,
            ..spec(seed)
        };
        let config = ModelConfig::highway(s.feature_dim, 16, 4, s.num_classes, GateConfig::BOTH);
        let trained = ce_trained(&config, &generate_synthetic(&s).unwrap(), seed, 20);
        let shift: Vec<f64> = (0..s.feature_dim)
            .map(|i| if i % 2 == 0 { 0.75 } else { -0.75 })
            .collect();
        let shifted = s.with_shift(shift);
        let adapt_set = generate_synthetic(&DatasetSpec {
            frames_per_class: 250,
            ..shifted.with_split(1)
        })
        .unwrap();
        let test_set = generate_synthetic(&DatasetSpec {
            frames_per_class: 300,
            ..shifted.with_split(2)
        })
        .unwrap();
        let data = AdaptData {
            oracle_labels: Some(adapt_set.labels.clone()),
            ..AdaptData::unlabeled(adapt_set.features)
        };
        let acfg = AdaptConfig {
            label_source: LabelSource::OracleHard,
            mask: ParamMask::GATES_ONLY,
            seed,
            ..Default::default()
        };
        let adapted = adapt(&trained, &config, &data, &acfg).unwrap();
        let before = evaluate(&trained, &config, &test_set).unwrap().fer;
        let after = evaluate(&adapted.params, &config, &test_set).unwrap().fer;
        wins += (after <= before) as usize;
    }
    assert!(wins >= 4, "adapted FER no worse in {wins}/5 seeds");
}
