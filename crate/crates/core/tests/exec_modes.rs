use epan::data::synth::{generate_synthetic, Corruption, SynthSpec};
use epan::data::{AugConfig, ImageSet, Split};
use epan::eval::{self, Metric};
use epan::exec::Exec;
use epan::losses::LossConfig;
use epan::model::{EpanModel, ModelConfig};
use epan::trainer::{self, OptimConfig, TrainOptions};
use epan::Tensor;

fn train_once(exec: Exec) -> (String, EpanModel) {
    let ds = generate_synthetic(&SynthSpec {
        num_ids: 4,
        per_id: 6,
        height: 32,
        width: 32,
        corruption: Corruption::Mixed,
        ..SynthSpec::default()
    })
    .unwrap();
    let train = ImageSet::from_synth(&ds, Split::Train);
    let (_, classes) = train.class_labels();
    let cfg = ModelConfig {
        input_h: 32,
        input_w: 32,
        stage_channels: [4, 4, 8, 8],
        embed_dim: 8,
        grid_channels: 4,
        num_classes: classes,
        ibn_enabled: true,
        ..ModelConfig::default()
    };
    let mut model = EpanModel::new(cfg, 3).unwrap();
    let optim = OptimConfig {
        epochs: 2,
        p: 4,
        k: 2,
        ..OptimConfig::default()
    };
    let aug = AugConfig::default();
    let opts = TrainOptions {
        exec,
        record_wall_time: false,
    };
    let log = trainer::train(&mut model, &train, &LossConfig::default(), &optim, &aug, &opts, None).unwrap();
    (trainer::log_csv(&log), model)
}

#[test]
fn training_is_bitwise_identical_across_exec_modes() {
    let (log_s, model_s) = train_once(Exec::Sequential);
    let (log_p, model_p) = train_once(Exec::Parallel);
    assert_eq!(log_s, log_p);
    for (name, t) in &model_s.state.params {
        let other = &model_p.state.params[name];
        assert!(
            t.data().iter().zip(other.data()).all(|(a, b)| a.to_bits() == b.to_bits()),
            "{name}"
        );
    }
}

#[test]
fn evaluation_is_identical_across_exec_modes() {
    let q = Tensor::from_fn(&[30, 16], |i| ((i * 37) % 101) as f64 / 50.0 - 1.0);
    let g = Tensor::from_fn(&[200, 16], |i| ((i * 53) % 97) as f64 / 48.0 - 1.0);
    let qp: Vec<i64> = (0..30).map(|i| i % 10).collect();
    let gp: Vec<i64> = (0..200).map(|i| i % 10).collect();
    let (qc, gc) = (vec![1u32; 30], vec![2u32; 200]);
    let run = |exec| {
        let d = eval::distance_matrix(&q, &g, Metric::Cosine, exec).unwrap();
        let r = eval::evaluate(&d.matrix, &qp, &qc, &gp, &gc, 10, Metric::Cosine, exec).unwrap();
        (d.matrix.data().to_vec(), r.cmc, r.per_query_ap)
    };
    assert_eq!(run(Exec::Sequential), run(Exec::Parallel));
}
