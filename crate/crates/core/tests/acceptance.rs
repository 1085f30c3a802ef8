//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any
//! fails. Runs without the libtest harness so the lines always print.

mod common;

use std::process::ExitCode;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use watt_core::attention::Attention;
use watt_core::data::synthetic::write_synthetic_tree;
use watt_core::model::{
    calibrate_base_widths, reference_param_counts, ArchConfig, SearchSpace, PARAM_BUDGET,
};
use watt_core::nn::{Ctx, Mode, ParamStore};
use watt_core::run::{default_grid, run_train, RunConfig};
use watt_core::train::{one_hot, undersample, ConfusionMatrix, RmsProp, RmsPropConfig};
use watt_core::{Tape, Tensor};

// Pinned tolerances.
const PER_OP_TOL: f64 = 1e-6;
const FULL_MODEL_TOL: f64 = 1e-4;
const LOSS_TOL: f64 = 1e-9;
const RMSPROP_STEP: f64 = 0.0031623;
const RMSPROP_TOL: f64 = 1e-6;
const F1_ORACLE: f64 = 73.33;
const F1_TOL: f64 = 0.01;
const FALLBACK_REL_DEV: f64 = 0.01;
const SYNTH_F1_MIN: f64 = 90.0;
const ATTENTION_MARGIN: f64 = 2.0;
const TIME_LIMIT_S: f64 = 600.0;
const SYNTH_EPOCHS: usize = 60;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn params(d: usize, k: usize, attention: bool) -> usize {
    ArchConfig::watt(d, k)
        .unwrap()
        .with_attention(attention)
        .summary()
        .unwrap()
        .total_params
}

fn c1_parameter_counts() -> Verdict {
    let targets = reference_param_counts();
    let mut table = String::from("      variant      target        got    delta    rel\n");
    let mut exact = 0;
    let mut worst = 0.0f64;
    for (&(d, k), &want) in &targets {
        let got = params(d, k, true);
        let delta = got as i64 - want as i64;
        let rel = delta as f64 / want as f64;
        worst = worst.max(rel.abs());
        exact += usize::from(delta == 0);
        table.push_str(&format!(
            "      WATT-EffNet-{d}-{k} {want:>9} {got:>10} {delta:>+8} {:>+7.4}%\n",
            100.0 * rel
        ));
    }
    let mut second_ok = true;
    for (d, want) in [(1, 1024i64), (3, 30_976)] {
        let ks: Vec<usize> = targets
            .keys()
            .filter(|(dd, _)| *dd == d)
            .map(|&(_, k)| k)
            .collect();
        let p: Vec<i64> = ks.iter().map(|&k| params(d, k, true) as i64).collect();
        second_ok &= p.windows(3).all(|w| w[2] - 2 * w[1] + w[0] == want);
    }
    let search = calibrate_base_widths(&targets, &SearchSpace::default());
    if exact == targets.len() {
        return verdict(true, format!("all {exact} variants exact"));
    }
    let pass = second_ok && worst < FALLBACK_REL_DEV;
    verdict(
        pass,
        format!(
            "exact {exact}/{} (exhaustive search exact: {}); fallback gate: second differences 1024/30976 {}, \
             max deviation {:.4}% < 1%\n{table}",
            targets.len(),
            search.is_ok(),
            if second_ok { "hold" } else { "FAIL" },
            100.0 * worst
        ),
    )
}

fn c2_budget() -> Verdict {
    let mut worst = (0, 0, 0);
    for (d, k) in default_grid() {
        for att in [true, false] {
            let p = params(d, k, att);
            if p > worst.2 {
                worst = (d, k, p);
            }
        }
    }
    verdict(
        worst.2 < PARAM_BUDGET,
        format!(
            "28 variants, largest WATT-EffNet-{}-{} = {}",
            worst.0, worst.1, worst.2
        ),
    )
}

fn c3_gradients() -> Verdict {
    let ops = common::op_suite();
    let layers = common::layer_suite();
    let (op_name, op_err) =
        ops.iter().chain(&layers).fold(
            ("", 0.0f64),
            |acc, &(n, e)| if e > acc.1 { (n, e) } else { acc },
        );
    let model = common::full_model_check(0);
    verdict(
        op_err < PER_OP_TOL && model < FULL_MODEL_TOL,
        format!(
            "{} ops/layers, worst {op_name} {op_err:.2e} (< {PER_OP_TOL:e}); WATT-EffNet-1-2 on 10 params {model:.2e} (< {FULL_MODEL_TOL:e})",
            ops.len() + layers.len()
        ),
    )
}

fn c4_attention() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut store = ParamStore::<f64>::new();
    let att = Attention::new(&mut store, &mut rng, "att", 16, 4, true, true).unwrap();
    let (mut in_range, mut attenuates) = (true, true);
    for _ in 0..100 {
        let phi = common::rand_tensor(&mut rng, &[1, 16, 7, 7], -5.0, 5.0);
        let tape = Tape::new();
        let vars = store.bind_frozen(&tape);
        let ctx = Ctx::new(&tape, &vars, &store, Mode::Eval);
        let (out, mc, ms) = att.gates(&ctx, tape.constant(phi.clone())).unwrap();
        in_range &= mc
            .value()
            .data()
            .iter()
            .chain(ms.value().data())
            .all(|&g| g > 0.0 && g < 1.0);
        attenuates &= out
            .value()
            .data()
            .iter()
            .zip(phi.data())
            .all(|(o, p)| o.abs() <= p.abs());
    }
    let mut zero = store.clone();
    for p in &mut zero.params {
        p.value = Tensor::zeros(p.value.shape());
    }
    let phi = common::rand_tensor(&mut rng, &[2, 16, 7, 7], -5.0, 5.0);
    let tape = Tape::new();
    let vars = zero.bind_frozen(&tape);
    let ctx = Ctx::new(&tape, &vars, &zero, Mode::Eval);
    let out = att
        .forward(&ctx, tape.constant(phi.clone()))
        .unwrap()
        .value();
    let quarter = out
        .data()
        .iter()
        .zip(phi.data())
        .all(|(o, p)| *o == 0.25 * p);
    verdict(
        in_range && attenuates && quarter,
        format!("gates in (0,1): {in_range}; |out| <= |phi|: {attenuates}; zero weights give exactly 0.25 phi: {quarter}"),
    )
}

fn c5_loss_optimizer() -> Verdict {
    let tape = Tape::<f64>::new();
    let p = tape.constant(Tensor::full(&[1, 5], 0.2));
    let ce = p
        .cross_entropy(&one_hot(&[2], 5).unwrap())
        .unwrap()
        .value()
        .data()[0];
    let x = tape.constant(Tensor::from_f64(&[1, 2], &[0.0, 3.0]).unwrap());
    let cos = x
        .cosine_loss(&one_hot(&[0], 2).unwrap())
        .unwrap()
        .value()
        .data()[0];
    let mut params = vec![watt_core::nn::Param {
        name: "w".into(),
        kind: watt_core::nn::ParamKind::Kernel,
        value: Tensor::<f64>::zeros(&[1]),
    }];
    let mut opt = RmsProp::new(RmsPropConfig::default(), &params);
    opt.step(&mut params, &[&Tensor::full(&[1], 1.0)]).unwrap();
    let step = params[0].value.data()[0];
    let ok = (ce - 5f64.ln()).abs() < LOSS_TOL
        && (cos - 1.0).abs() < LOSS_TOL
        && (step.abs() - RMSPROP_STEP).abs() < RMSPROP_TOL;
    verdict(
        ok,
        format!("CE uniform-5 {ce:.12} (ln 5 {:.12}); cosine orthogonal {cos:.12}; first RMSprop step {step:.7}", 5f64.ln()),
    )
}

fn c6_undersampling() -> Verdict {
    let counts = [367usize, 249, 252, 232, 2107];
    let labels: Vec<usize> = counts
        .iter()
        .enumerate()
        .flat_map(|(c, &n)| std::iter::repeat_n(c, n))
        .collect();
    let keep = undersample(&labels, 5, 0).unwrap();
    let got: Vec<usize> = (0..5)
        .map(|c| keep.iter().filter(|&&i| labels[i] == c).count())
        .collect();
    verdict(
        got.iter().all(|&n| n == 232),
        format!("{counts:?} -> {got:?}"),
    )
}

fn c7_c8_training() -> (Verdict, Verdict) {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("synthetic");
    write_synthetic_tree(&data, 100, 32, 0).unwrap();
    let run = |attention: bool, out: &str| {
        let cfg = RunConfig {
            d: 1,
            k: 2,
            attention,
            data: Some(data.clone()),
            input_size: 32,
            seed: 0,
            epochs: SYNTH_EPOCHS,
            out: dir.path().join(out),
            ..Default::default()
        };
        let t = Instant::now();
        let art = run_train(&cfg).unwrap();
        (art, t.elapsed().as_secs_f64())
    };
    let (with, secs) = run(true, "attention");
    let (without, secs_no) = run(false, "no_attention");
    let (again, _) = run(true, "attention_again");
    let ok = with.test_f1 >= SYNTH_F1_MIN
        && secs < TIME_LIMIT_S
        && without.test_f1 - with.test_f1 <= ATTENTION_MARGIN
        && with.outcome.aborted.is_none()
        && without.outcome.aborted.is_none();
    let c7 = verdict(
        ok,
        format!(
            "500 images 32x32, {SYNTH_EPOCHS} epochs: held-out macro F1 with attention {:.2}% in {secs:.1}s, \
             without {:.2}% in {secs_no:.1}s (margin <= {ATTENTION_MARGIN} points)",
            with.test_f1, without.test_f1
        ),
    );
    let a = std::fs::read(&with.history).unwrap();
    let b = std::fs::read(&again.history).unwrap();
    let c8 = verdict(
        a == b,
        format!("history.csv {} bytes, identical: {}", a.len(), a == b),
    );
    (c7, c8)
}

fn c9_metric() -> Verdict {
    let f1 = ConfusionMatrix::from_rows(vec![vec![1, 1], vec![0, 2]])
        .unwrap()
        .macro_f1();
    verdict(
        (f1 - F1_ORACLE).abs() < F1_TOL,
        format!("[[1,1],[0,2]] -> macro F1 {f1:.4}%"),
    )
}

fn main() -> ExitCode {
    if std::env::args().any(|a| a == "--list") {
        return ExitCode::SUCCESS;
    }
    let (c7, c8) = c7_c8_training();
    let results = [
        ("C1 parameter counts", c1_parameter_counts()),
        ("C2 parameter budget", c2_budget()),
        ("C3 gradient checks", c3_gradients()),
        ("C4 attention properties", c4_attention()),
        ("C5 loss and optimizer oracles", c5_loss_optimizer()),
        ("C6 undersampling", c6_undersampling()),
        ("C7 synthetic training", c7),
        ("C8 determinism", c8),
        ("C9 macro F1 oracle", c9_metric()),
    ];
    let mut failed = 0;
    for (name, v) in &results {
        println!(
            "[{}] {name}: {}",
            if v.pass { "PASS" } else { "FAIL" },
            v.detail.trim_end()
        );
        failed += usize::from(!v.pass);
    }
    println!(
        "acceptance: {} passed, {failed} failed",
        results.len() - failed
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
