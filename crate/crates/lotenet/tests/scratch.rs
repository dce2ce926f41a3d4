// temporary probe; deleted before finalization
use lotenet::data::{gen_synthetic, split, SyntheticKind};
use lotenet::metrics;
use lotenet::model::{LoTeNetConfig, LoTeNetModel, Phase};
use lotenet::train::{train, EarlyStopMetric, TrainConfig};

#[test]
#[ignore]
fn probe_init_loss_and_convergence() {
    let t0 = std::time::Instant::now();
    let ds = gen_synthetic::<f64>(SyntheticKind::Blobs2d, 2000, 32, 7).unwrap();
    let parts = split(&ds, &[0.6, 0.2, 0.2], 7).unwrap();
    let train_ds = ds.subset(&parts[0]).unwrap();
    let val_ds = ds.subset(&parts[1]).unwrap();
    println!("data: {:?} train {} val {}", t0.elapsed(), train_ds.len(), val_ds.len());

    let mut config = LoTeNetConfig::default_for(vec![32, 32, 1], 2, 2);
    config.seed = 7;
    let model = LoTeNetModel::<f64>::new(config).unwrap();
    println!("params: {}", model.count_parameters());

    // init loss, train phase
    let sub: Vec<usize> = (0..64).collect();
    let probe = train_ds.subset(&sub).unwrap();
    let fwd = model.forward_tracked(&probe.images, Phase::Train, false).unwrap();
    let logits = fwd.tape.value(fwd.logits).clone();
    let labels: Vec<usize> = (0..64).map(|i| i % 2).collect();
    let loss = metrics::cross_entropy_value(&logits, &labels);
    println!("init loss (train phase): {loss} vs ln2 {}", std::f64::consts::LN_2);

    let cfg = TrainConfig {
        batch_size: 512,
        patience: 10,
        max_epochs: 30,
        metric: EarlyStopMetric::Auc,
        record_timing: true,
        seed: 7,
        ..TrainConfig::default()
    };
    let t1 = std::time::Instant::now();
    let out = train(model, &train_ds, &val_ds, &cfg).unwrap();
    println!("trained in {:?}, best epoch {} best val AUC {}", t1.elapsed(), out.best_epoch, out.best_metric);
    for r in &out.history {
        println!("epoch {} loss {:.4} val {:.4} ({:.1}s)", r.epoch, r.train_loss, r.val_metric, r.elapsed_seconds);
    }
}
