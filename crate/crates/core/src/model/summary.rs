//! Static analysis: exact parameter counts, MACs and per-layer output shapes.
//!
//! MAC convention: a convolution costs `H_out·W_out·C_out·(kh·kw·C_in/groups)`,
//! a dense layer `in·out`. Global and channel-wise pooling cost one MAC per
//! input element, and each gating product one per output element. Batch
//! norm, activations, residual additions and softmax are not counted.
//! FLOPs are reported as `2 × MACs`.

use std::fmt;

use serde::Serialize;

use super::{ArchConfig, Head, Model, STEM_KERNEL};
use crate::attention::SPATIAL_KERNEL;
use crate::block::DEPTHWISE_KERNEL;
use crate::error::Result;
use crate::tensor::Scalar;

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct LayerRow {
    pub layer: String,
    /// `[C, H, W]` for feature maps, `[features]` after pooling.
    pub out_shape: Vec<usize>,
    pub params: usize,
    pub macs: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ModelSummary {
    pub name: String,
    pub rows: Vec<LayerRow>,
    pub total_params: usize,
    pub total_macs: u64,
    pub attention_params: usize,
}

impl ModelSummary {
    pub fn total_flops(&self) -> u64 {
        2 * self.total_macs
    }

    pub fn mega_macs(&self) -> f64 {
        self.total_macs as f64 / 1e6
    }

    /// `layer,out_shape,params,macs` with `x`-joined shapes.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,out_shape,params,macs\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{}\n",
                r.layer,
                shape_str(&r.out_shape),
                r.params,
                r.macs
            ));
        }
        s
    }
}

fn shape_str(s: &[usize]) -> String {
    s.iter()
        .map(|d| d.to_string())
        .collect::<Vec<_>>()
        .join("x")
}

impl fmt::Display for ModelSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let w = self
            .rows
            .iter()
            .map(|r| r.layer.len())
            .max()
            .unwrap_or(5)
            .max(5);
        writeln!(f, "{}", self.name)?;
        writeln!(
            f,
            "{:<w$}  {:>14}  {:>10}  {:>14}",
            "layer", "out_shape", "params", "macs"
        )?;
        for r in &self.rows {
            writeln!(
                f,
                "{:<w$}  {:>14}  {:>10}  {:>14}",
                r.layer,
                shape_str(&r.out_shape),
                r.params,
                r.macs
            )?;
        }
        writeln!(f, "total params: {}", self.total_params)?;
        writeln!(f, "attention params: {}", self.attention_params)?;
        writeln!(
            f,
            "total MACs: {} ({:.3} M)",
            self.total_macs,
            self.mega_macs()
        )?;
        write!(f, "total FLOPs: {}", self.total_flops())
    }
}

struct Recorder {
    rows: Option<Vec<LayerRow>>,
    params: usize,
    macs: u64,
    attention: usize,
}

impl Recorder {
    fn row(&mut self, name: impl FnOnce() -> String, shape: &[usize], params: usize, macs: u64) {
        self.params += params;
        self.macs += macs;
        if let Some(rows) = &mut self.rows {
            rows.push(LayerRow {
                layer: name(),
                out_shape: shape.to_vec(),
                params,
                macs,
            });
        }
    }
}

fn ceil_div(a: usize, b: usize) -> usize {
    a.div_ceil(b)
}

/// Walk the architecture without allocating tensors. `None` if a reduction
/// ratio does not divide the width it applies to.
fn walk(cfg: &ArchConfig, h: usize, w: usize, keep_rows: bool) -> Option<Recorder> {
    let p = &cfg.policy;
    let cb = |c: usize| if p.conv_bias { c } else { 0 };
    let mut r = Recorder {
        rows: keep_rows.then(Vec::new),
        params: 0,
        macs: 0,
        attention: 0,
    };
    let c_in = cfg.input_shape[2];
    let s = cfg.stem_filters;
    let (mut h, mut w) = (ceil_div(h, 2), ceil_div(w, 2));
    let kk = STEM_KERNEL * STEM_KERNEL;
    r.row(
        || "stem".into(),
        &[s, h, w],
        kk * c_in * s + cb(s),
        (h * w * s * kk * c_in) as u64,
    );
    r.row(|| "stem_bn".into(), &[s, h, w], 2 * s, 0);
    let mut ch = s;
    for (i, &width) in cfg.base_widths.iter().enumerate() {
        let wd = width * cfg.k;
        let n = |suffix: &str| format!("stage{}/{suffix}", i + 1);
        let hw = h * w;
        r.row(
            || n("mbconv/expand"),
            &[wd, h, w],
            ch * wd + cb(wd),
            (hw * wd * ch) as u64,
        );
        r.row(|| n("mbconv/expand_bn"), &[wd, h, w], 2 * wd, 0);
        let stride = ArchConfig::stage_stride(i);
        let (h2, w2) = (ceil_div(h, stride), ceil_div(w, stride));
        let dk = DEPTHWISE_KERNEL * DEPTHWISE_KERNEL;
        r.row(
            || n("mbconv/depthwise"),
            &[wd, h2, w2],
            dk * wd + cb(wd),
            (h2 * w2 * wd * dk) as u64,
        );
        r.row(|| n("mbconv/depthwise_bn"), &[wd, h2, w2], 2 * wd, 0);
        if p.se_ratio == 0 || !wd.is_multiple_of(p.se_ratio) {
            return None;
        }
        let sh = wd / p.se_ratio;
        let se_params = 2 * wd * sh + if p.se_bias { sh + wd } else { 0 };
        let hw2 = (h2 * w2) as u64;
        r.row(
            || n("mbconv/se"),
            &[wd, h2, w2],
            se_params,
            2 * (wd * sh) as u64 + 2 * wd as u64 * hw2,
        );
        r.row(
            || n("mbconv/project"),
            &[wd, h2, w2],
            wd * wd + cb(wd),
            hw2 * (wd * wd) as u64,
        );
        r.row(|| n("mbconv/project_bn"), &[wd, h2, w2], 2 * wd, 0);
        if cfg.attention {
            let red = p.attention_reduction;
            if red == 0 || !wd.is_multiple_of(red) {
                return None;
            }
            let ah = wd / red;
            let mlp = 2 * wd * ah + if p.attention_bias { ah + wd } else { 0 };
            let sk = SPATIAL_KERNEL * SPATIAL_KERNEL;
            let sa = 2 * sk + usize::from(p.spatial_bias);
            let c = wd as u64;
            r.row(
                || n("attention/channel"),
                &[wd, 1, 1],
                mlp,
                4 * (wd * ah) as u64 + 2 * c * hw2 + c * hw2,
            );
            r.row(
                || n("attention/spatial"),
                &[1, h2, w2],
                sa,
                2 * c * hw2 + hw2 * (2 * sk) as u64 + c * hw2,
            );
            r.attention += mlp + sa;
        }
        if ch == wd && stride == 1 {
            r.row(|| n("skip"), &[wd, h2, w2], 0, 0);
        } else if p.projection_skip {
            r.row(
                || n("skip"),
                &[wd, h2, w2],
                ch * wd + cb(wd),
                hw2 * (ch * wd) as u64,
            );
            r.row(|| n("skip_bn"), &[wd, h2, w2], 2 * wd, 0);
        }
        ch = wd;
        (h, w) = (h2, w2);
    }
    r.row(|| "gap".into(), &[ch], 0, (h * w * ch) as u64);
    let nc = cfg.num_classes;
    if let Head::Hidden(hid) = cfg.head {
        r.row(
            || "head/hidden".into(),
            &[hid],
            ch * hid + hid,
            (ch * hid) as u64,
        );
        ch = hid;
    }
    r.row(
        || "head/classifier".into(),
        &[nc],
        ch * nc + nc,
        (ch * nc) as u64,
    );
    r.row(|| "softmax".into(), &[nc], 0, 0);
    Some(r)
}

/// Exact trainable-parameter total of `cfg`, or `None` if it is unbuildable.
pub(crate) fn total_params(cfg: &ArchConfig) -> Option<usize> {
    if cfg.base_widths.is_empty() && cfg.d != 0 {
        return None;
    }
    walk(cfg, cfg.input_shape[0], cfg.input_shape[1], false).map(|r| r.params)
}

fn summarize(cfg: &ArchConfig, h: usize, w: usize) -> Result<ModelSummary> {
    cfg.validate()?;
    let r = walk(cfg, h, w, true)
        .ok_or_else(|| crate::error::config("reduction ratio does not divide width"))?;
    Ok(ModelSummary {
        name: cfg.name(),
        rows: r.rows.unwrap_or_default(),
        total_params: r.params,
        total_macs: r.macs,
        attention_params: r.attention,
    })
}

impl ArchConfig {
    /// Summary at the configured input resolution, without building tensors.
    pub fn summary(&self) -> Result<ModelSummary> {
        summarize(self, self.input_shape[0], self.input_shape[1])
    }
}

/// Per-layer and total parameter counts of a built model.
pub fn count_params<T: Scalar>(model: &Model<T>) -> ModelSummary {
    let s = model
        .config
        .summary()
        .expect("built models have valid configs");
    debug_assert_eq!(s.total_params, model.store.count());
    s
}

/// Per-layer MACs for an `[H, W, C]` input (parameter columns unchanged).
pub fn count_flops<T: Scalar>(model: &Model<T>, input_shape: [usize; 3]) -> Result<ModelSummary> {
    let mut cfg = model.config.clone();
    cfg.input_shape = input_shape;
    summarize(&cfg, input_shape[0], input_shape[1])
}
