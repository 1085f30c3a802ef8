use watt_core::data::synthetic::synthetic_dataset;
use watt_core::model::{ArchConfig, Model};
use watt_core::nn::{Ctx, Mode};
use watt_core::train::{
    combined_loss, evaluate, one_hot, train, LossConfig, RmsProp, RmsPropConfig, TrainConfig,
};
use watt_core::Tape;

#[test]
fn single_example_overfits_within_500_steps() {
    let cfg = ArchConfig::watt(1, 2).unwrap().with_input(16, 16);
    let mut model = Model::<f32>::build(&cfg, 5).unwrap();
    let data = synthetic_dataset(1, 16, 5);
    let (x, y) = data.batch(&[2]).unwrap();
    let t = one_hot::<f32>(&y, 5).unwrap();
    let loss_cfg = LossConfig::default();
    let mut opt = RmsProp::new(RmsPropConfig::default(), &model.store.params);
    let mut last = f64::INFINITY;
    for _ in 0..500 {
        let tape = Tape::new();
        let vars = model.store.bind(&tape);
        let ctx = Ctx::new(&tape, &vars, &model.store, Mode::Train);
        let out = model.forward(&ctx, tape.constant(x.clone())).unwrap();
        let loss = combined_loss(&loss_cfg, &out, &t, &model.store, &vars)
            .unwrap()
            .total;
        last = loss.value().data()[0] as f64;
        if last < 0.01 {
            break;
        }
        let g = tape.backward(loss).unwrap();
        let grads: Vec<_> = vars.iter().map(|v| g.wrt(*v).unwrap()).collect();
        drop(ctx);
        opt.step(&mut model.store.params, &grads).unwrap();
    }
    assert!(last < 0.01, "loss after 500 steps: {last}");
}

#[test]
fn smoke_training_fits_the_synthetic_set() {
    let data = synthetic_dataset(20, 32, 2);
    let cfg = ArchConfig::watt(1, 2).unwrap().with_input(32, 32);
    let model = Model::<f32>::build(&cfg, 2).unwrap();
    let tc = TrainConfig {
        epochs: 60,
        batch: 16,
        seed: 2,
        ..Default::default()
    };
    let out = train(model, &data, &data, &tc).unwrap();
    assert_eq!(out.history.len(), 60);
    assert!(out.aborted.is_none());
    let f1 = evaluate(&out.model, &data, 32).unwrap().macro_f1;
    assert!(f1 >= 95.0, "train macro F1 {f1}");
}
