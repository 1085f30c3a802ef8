//! Central finite-difference gradient checks shared by the gradient suite
//! and the acceptance target.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use watt_core::attention::Attention;
use watt_core::block::{BlockPolicy, SqueezeExcite, WattStage};
use watt_core::model::{ArchConfig, Model};
use watt_core::nn::{Ctx, Mode, ParamStore};
use watt_core::train::{combined_loss, one_hot, LossConfig};
use watt_core::{Padding, Result, Tape, Tensor, Var};

/// Step for single ops and layers.
pub const STEP: f64 = 1e-4;
/// Smaller step for the whole network: a BN parameter shifts every unit
/// behind it, and at 1e-4 some ReLU inputs cross zero inside the stencil.
pub const MODEL_STEP: f64 = 1e-5;

/// Fourth-order central difference `(-f(+2h) + 8f(+h) - 8f(-h) + f(-2h)) / 12h`.
fn central(h: f64, mut f: impl FnMut(f64) -> f64) -> f64 {
    (-f(2.0 * h) + 8.0 * f(h) - 8.0 * f(-h) + f(-2.0 * h)) / (12.0 * h)
}

/// Relative error with a floor on the denominator so entries whose true
/// gradient is ~0 are judged on absolute error.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3)
}

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::from_f64(shape, &v).unwrap()
}

/// Scalar `Σ out ⊙ R` with a fixed random `R`, so every output entry
/// contributes to the gradient with an O(1) weight.
fn project<'t>(out: Var<'t, f64>) -> Result<Var<'t, f64>> {
    if out.shape().is_empty() || out.value().numel() == 1 {
        return Ok(out.sum());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let r = rand_tensor(&mut rng, &out.shape(), -1.0, 1.0);
    out.mul(out.tape().constant(r)).map(|v| v.sum())
}

/// Max relative error of the tape gradient of `f(inputs)` against central
/// differences, over every entry of every input.
pub fn check_op<F>(inputs: &[Tensor<f64>], f: F) -> f64
where
    F: for<'t> Fn(&[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let eval = |xs: &[Tensor<f64>]| -> f64 {
        let tape = Tape::new();
        let vars: Vec<_> = xs.iter().map(|x| tape.leaf(x.clone())).collect();
        project(f(&vars).unwrap()).unwrap().value().data()[0]
    };
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
    let loss = project(f(&vars).unwrap()).unwrap();
    let grads = tape.backward(loss).unwrap();
    let mut worst = 0.0f64;
    for (i, v) in vars.iter().enumerate() {
        let g = grads.wrt(*v).unwrap().data().to_vec();
        for j in 0..inputs[i].numel() {
            let numeric = central(STEP, |h| {
                let mut xs = inputs.to_vec();
                xs[i].data_mut()[j] += h;
                eval(&xs)
            });
            worst = worst.max(rel_err(g[j], numeric));
        }
    }
    worst
}

/// Every primitive op as `(name, max relative error)`.
pub fn op_suite() -> Vec<(&'static str, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut r = |s: &[usize]| rand_tensor(&mut rng, s, -1.0, 1.0);
    let x4 = r(&[2, 3, 5, 4]);
    let mut out = Vec::new();
    out.push((
        "add (broadcast)",
        check_op(&[x4.clone(), r(&[1, 3, 1, 4])], |v| v[0].add(v[1])),
    ));
    out.push((
        "sub (broadcast)",
        check_op(&[x4.clone(), r(&[3, 1, 1])], |v| v[0].sub(v[1])),
    ));
    out.push((
        "mul (broadcast)",
        check_op(&[x4.clone(), r(&[2, 3, 1, 1])], |v| v[0].mul(v[1])),
    ));
    out.push((
        "scale",
        check_op(std::slice::from_ref(&x4), |v| Ok(v[0].scale(-2.5))),
    ));
    out.push((
        "matmul",
        check_op(&[r(&[3, 4]), r(&[4, 5])], |v| v[0].matmul(v[1])),
    ));
    out.push((
        "linear",
        check_op(&[r(&[3, 4]), r(&[2, 4]), r(&[2])], |v| {
            v[0].linear(v[1], Some(v[2]))
        }),
    ));
    out.push((
        "conv2d same stride 1",
        check_op(&[x4.clone(), r(&[4, 3, 3, 3]), r(&[4])], |v| {
            v[0].conv2d(v[1], Some(v[2]), 1, Padding::Same, 1)
        }),
    ));
    out.push((
        "conv2d same stride 2 (asymmetric pad)",
        check_op(&[x4.clone(), r(&[2, 3, 3, 3])], |v| {
            v[0].conv2d(v[1], None, 2, Padding::Same, 1)
        }),
    ));
    out.push((
        "conv2d valid",
        check_op(&[x4.clone(), r(&[2, 3, 2, 3])], |v| {
            v[0].conv2d(v[1], None, 1, Padding::Valid, 1)
        }),
    ));
    out.push((
        "conv2d grouped",
        check_op(&[r(&[1, 4, 4, 4]), r(&[6, 2, 3, 3])], |v| {
            v[0].conv2d(v[1], None, 1, Padding::Same, 2)
        }),
    ));
    out.push((
        "depthwise 5x5 stride 2",
        check_op(&[x4.clone(), r(&[3, 1, 5, 5]), r(&[3])], |v| {
            v[0].depthwise_conv2d(v[1], Some(v[2]), 2, Padding::Same)
        }),
    ));
    out.push((
        "global_avg_pool",
        check_op(std::slice::from_ref(&x4), |v| v[0].global_avg_pool()),
    ));
    out.push((
        "global_max_pool",
        check_op(std::slice::from_ref(&x4), |v| v[0].global_max_pool()),
    ));
    out.push((
        "avg_pool",
        check_op(&[r(&[1, 2, 4, 4])], |v| v[0].avg_pool(2)),
    ));
    out.push((
        "max_pool",
        check_op(&[r(&[1, 2, 4, 4])], |v| v[0].max_pool(2)),
    ));
    out.push((
        "channel_mean",
        check_op(std::slice::from_ref(&x4), |v| v[0].channel_mean()),
    ));
    out.push((
        "channel_max",
        check_op(std::slice::from_ref(&x4), |v| v[0].channel_max()),
    ));
    out.push((
        "concat",
        check_op(&[x4.clone(), r(&[2, 1, 5, 4])], |v| {
            Var::concat(&[v[0], v[1]], 1)
        }),
    ));
    out.push((
        "batch_norm train",
        check_op(&[x4.clone(), r(&[3]), r(&[3])], |v| {
            Ok(v[0].batch_norm_train(v[1], v[2], 1e-3)?.0)
        }),
    ));
    out.push((
        "batch_norm eval",
        check_op(&[x4.clone(), r(&[3]), r(&[3])], |v| {
            v[0].batch_norm_eval(v[1], v[2], &[0.1, -0.2, 0.3], &[0.5, 1.5, 2.0], 1e-3)
        }),
    ));
    out.push((
        "relu",
        check_op(std::slice::from_ref(&x4), |v| Ok(v[0].relu())),
    ));
    out.push((
        "sigmoid",
        check_op(std::slice::from_ref(&x4), |v| Ok(v[0].sigmoid())),
    ));
    out.push(("softmax", check_op(&[r(&[3, 5])], |v| v[0].softmax(1))));
    out.push((
        "reshape",
        check_op(std::slice::from_ref(&x4), |v| v[0].reshape(&[6, 20])),
    ));
    out.push((
        "mean",
        check_op(std::slice::from_ref(&x4), |v| Ok(v[0].mean())),
    ));
    out.push((
        "sum_squares",
        check_op(std::slice::from_ref(&x4), |v| Ok(v[0].sum_squares())),
    ));
    let t = one_hot::<f64>(&[1, 0, 4], 5).unwrap();
    let t2 = t.clone();
    out.push((
        "cross_entropy",
        check_op(&[r(&[3, 5])], move |v| v[0].softmax(1)?.cross_entropy(&t)),
    ));
    out.push((
        "cosine_loss",
        check_op(&[r(&[3, 5])], move |v| v[0].cosine_loss(&t2)),
    ));
    out
}

/// Compare tape gradients of a store-backed network against central
/// differences on the chosen `(param, entry)` pairs plus `input_entries`
/// entries of the input.
pub fn check_network<F>(
    store: &ParamStore<f64>,
    x: &Tensor<f64>,
    picks: &[(usize, usize)],
    input_entries: &[usize],
    step: f64,
    f: F,
) -> f64
where
    F: for<'a, 't> Fn(&Ctx<'a, 't, f64>, Var<'t, f64>) -> Result<Var<'t, f64>>,
{
    let eval = |s: &ParamStore<f64>, x: &Tensor<f64>| -> f64 {
        let tape = Tape::new();
        let vars = s.bind(&tape);
        let ctx = Ctx::new(&tape, &vars, s, Mode::Train);
        let y = f(&ctx, tape.leaf(x.clone())).unwrap();
        y.value().data()[0]
    };
    let tape = Tape::new();
    let vars = store.bind(&tape);
    let ctx = Ctx::new(&tape, &vars, store, Mode::Train);
    let xv = tape.leaf(x.clone());
    let loss = f(&ctx, xv).unwrap();
    let grads = tape.backward(loss).unwrap();
    let mut worst = 0.0f64;
    for &(p, j) in picks {
        let numeric = central(step, |h| {
            let mut s = store.clone();
            s.params[p].value.data_mut()[j] += h;
            eval(&s, x)
        });
        let g = grads.wrt(vars[p]).unwrap().data()[j];
        worst = worst.max(rel_err(g, numeric));
    }
    let gx = grads.wrt(xv).unwrap().data().to_vec();
    for &j in input_entries {
        let numeric = central(step, |h| {
            let mut xp = x.clone();
            xp.data_mut()[j] += h;
            eval(store, &xp)
        });
        worst = worst.max(rel_err(gx[j], numeric));
    }
    worst
}

fn every_param(store: &ParamStore<f64>) -> Vec<(usize, usize)> {
    store
        .params
        .iter()
        .enumerate()
        .flat_map(|(p, t)| (0..t.value.numel()).map(move |j| (p, j)))
        .collect()
}

fn scalar_head<'t>(y: Var<'t, f64>) -> Result<Var<'t, f64>> {
    project(y)
}

/// Layer-level checks over every parameter: SE, attention, a full stage.
pub fn layer_suite() -> Vec<(&'static str, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = rand_tensor(&mut rng, &[2, 8, 6, 6], -1.0, 1.0);
    let all_x: Vec<usize> = (0..x.numel()).collect();
    let mut out = Vec::new();

    let mut store = ParamStore::new();
    let se = SqueezeExcite::new(&mut store, &mut rng, "se", 8, 4, true).unwrap();
    out.push((
        "squeeze-excite",
        check_network(&store, &x, &every_param(&store), &all_x, STEP, |c, v| {
            scalar_head(se.forward(c, v)?)
        }),
    ));

    let mut store = ParamStore::new();
    let att = Attention::new(&mut store, &mut rng, "att", 8, 4, true, true).unwrap();
    out.push((
        "channel+spatial attention",
        check_network(&store, &x, &every_param(&store), &all_x, STEP, |c, v| {
            scalar_head(att.forward(c, v)?)
        }),
    ));

    let mut store = ParamStore::new();
    let stage = WattStage::new(
        &mut store,
        &mut rng,
        "stage",
        8,
        16,
        2,
        true,
        &BlockPolicy::default(),
    )
    .unwrap();
    out.push((
        "wide MBConv stage with attention",
        check_network(&store, &x, &every_param(&store), &all_x, STEP, |c, v| {
            scalar_head(stage.forward(c, v)?)
        }),
    ));
    out
}

/// Full WATT-EffNet-1-2 (16×16 input, batch 3) combined-loss gradient on 10
/// randomly chosen parameters.
pub fn full_model_check(seed: u64) -> f64 {
    let cfg = ArchConfig::watt(1, 2).unwrap().with_input(16, 16);
    let model = Model::<f64>::build(&cfg, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = rand_tensor(&mut rng, &[3, 3, 16, 16], 0.0, 1.0);
    let targets = one_hot::<f64>(&[0, 2, 4], 5).unwrap();
    let picks: Vec<(usize, usize)> = (0..10)
        .map(|_| {
            let p = rng.random_range(0..model.store.params.len());
            (p, rng.random_range(0..model.store.params[p].value.numel()))
        })
        .collect();
    let loss_cfg = LossConfig::default();
    check_network(&model.store, &x, &picks, &[], MODEL_STEP, |ctx, v| {
        let out = model.forward(ctx, v)?;
        Ok(combined_loss(&loss_cfg, &out, &targets, &model.store, ctx.vars)?.total)
    })
}
