//! Closed-form operation counts for convolution and product layers, and
//! per-layer reports for whole denoisers.
//!
//! One multiply-accumulate counts as 2 FLOPs. Bias additions are not
//! counted for convolution, pointwise and product layers.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::nn::model::{Backbone, DenoiserConfig, Unet};

/// Operator category of a report row.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Conv,
    Product,
    Pointwise,
    Attention,
    Norm,
    Activation,
    Elementwise,
}

impl LayerKind {
    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::Conv => "conv",
            LayerKind::Product => "product",
            LayerKind::Pointwise => "pointwise",
            LayerKind::Attention => "attention",
            LayerKind::Norm => "norm",
            LayerKind::Activation => "activation",
            LayerKind::Elementwise => "elementwise",
        }
    }
}

/// FLOPs per element of SiLU (negate, exp, add, divide).
pub const SILU_FLOPS: usize = 4;
/// FLOPs per element of group normalization (mean, variance, normalize, affine).
pub const NORM_FLOPS: usize = 7;
/// FLOPs per element of `alpha a + beta b`.
pub const AXPBY_FLOPS: usize = 3;
/// FLOPs per attention score for the softmax (subtract max, exp, divide).
pub const ATTENTION_SOFTMAX_FLOPS: usize = 3;

/// `2 k^2 C_in C_out H W`.
pub fn conv_flops(c_in: u64, c_out: u64, h: u64, w: u64, k: u64) -> u64 {
    2 * k * k * c_in * c_out * h * w
}

/// `(4 / r) C^2 H W + C H W`, evaluated as `4 C (C / r) H W + C H W`.
pub fn product_flops(c: u64, h: u64, w: u64, ratio: u64) -> Result<u64> {
    if ratio == 0 || c % ratio != 0 {
        return Err(Error::Config(format!(
            "bottleneck ratio {ratio} does not divide {c} channels"
        )));
    }
    Ok(4 * c * (c / ratio) * h * w + c * h * w)
}

/// Per-layer reduction `18 C / ((4 / r) C + 1)` of a 3x3 convolution
/// (`C_in = C_out = C`) over a product layer.
pub fn reduction_ratio(c: f64, ratio: f64) -> f64 {
    18.0 * c / (4.0 / ratio * c + 1.0)
}

/// One line of a FLOPs report.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FlopRow {
    pub name: String,
    pub kind: LayerKind,
    pub c_in: usize,
    pub c_out: usize,
    pub h: usize,
    pub w: usize,
    pub flops: u64,
    /// True for the residual-block mixers, the only layers that differ
    /// between backbones.
    pub backbone_specific: bool,
}

/// Rows for one backbone.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BackboneReport {
    pub backbone: Backbone,
    pub rows: Vec<FlopRow>,
    pub total: u64,
    /// Sum over rows with `backbone_specific`.
    pub specific_total: u64,
    pub params: usize,
}

impl BackboneReport {
    fn new(backbone: Backbone, rows: Vec<FlopRow>, params: usize) -> Self {
        let total = rows.iter().map(|r| r.flops).sum();
        let specific_total = rows
            .iter()
            .filter(|r| r.backbone_specific)
            .map(|r| r.flops)
            .sum();
        Self {
            backbone,
            rows,
            total,
            specific_total,
            params,
        }
    }

    /// FLOPs summed per `(row name, kind)`.
    pub fn by_scope(&self) -> BTreeMap<(String, LayerKind), u64> {
        let mut out = BTreeMap::new();
        for r in &self.rows {
            *out.entry((r.name.clone(), r.kind)).or_insert(0) += r.flops;
        }
        out
    }
}

/// Both backbones at equal widths and resolution.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FlopsReport {
    pub height: usize,
    pub width: usize,
    pub product: BackboneReport,
    pub conv: BackboneReport,
}

impl FlopsReport {
    /// Product over conv FLOPs, restricted to backbone-specific layers.
    pub fn specific_ratio(&self) -> f64 {
        self.product.specific_total as f64 / self.conv.specific_total as f64
    }

    /// Product over conv FLOPs for the whole network.
    pub fn total_ratio(&self) -> f64 {
        self.product.total as f64 / self.conv.total as f64
    }

    /// CSV with one row per layer per backbone.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("backbone,name,kind,c_in,c_out,h,w,flops,backbone_specific\n");
        for rep in [&self.product, &self.conv] {
            for r in &rep.rows {
                let _ = writeln!(
                    s,
                    "{},{},{},{},{},{},{},{},{}",
                    rep.backbone.name(),
                    r.name,
                    r.kind.name(),
                    r.c_in,
                    r.c_out,
                    r.h,
                    r.w,
                    r.flops,
                    r.backbone_specific
                );
            }
        }
        s
    }

    /// Totals per kind for both backbones, as an aligned text table.
    pub fn to_table(&self) -> String {
        let kinds = [
            LayerKind::Conv,
            LayerKind::Product,
            LayerKind::Pointwise,
            LayerKind::Attention,
            LayerKind::Norm,
            LayerKind::Activation,
            LayerKind::Elementwise,
        ];
        let per_kind = |rep: &BackboneReport, k: LayerKind| -> u64 {
            rep.rows.iter().filter(|r| r.kind == k).map(|r| r.flops).sum()
        };
        let mut s = format!(
            "FLOPs at {}x{}\n{:<14}{:>18}{:>18}\n",
            self.height, self.width, "kind", "product", "conv"
        );
        for k in kinds {
            let (p, c) = (per_kind(&self.product, k), per_kind(&self.conv, k));
            if p + c > 0 {
                let _ = writeln!(s, "{:<14}{:>18}{:>18}", k.name(), p, c);
            }
        }
        let _ = writeln!(s, "{:<14}{:>18}{:>18}", "total", self.product.total, self.conv.total);
        let _ = writeln!(
            s,
            "{:<14}{:>18}{:>18}",
            "mixers", self.product.specific_total, self.conv.specific_total
        );
        let _ = writeln!(s, "{:<14}{:>18}{:>18}", "params", self.product.params, self.conv.params);
        let _ = writeln!(s, "mixer ratio product/conv = {:.5}", self.specific_ratio());
        s
    }
}

/// Layer-by-layer counts for `config` under both backbones.
pub fn model_report(config: &DenoiserConfig, height: usize, width: usize) -> Result<FlopsReport> {
    config.validate()?;
    config.check_input_size(height, width)?;
    let mut reports = Vec::new();
    for backbone in [Backbone::Product, Backbone::Conv] {
        let cfg = DenoiserConfig {
            backbone,
            ..config.clone()
        };
        let (net, params) = Unet::layout(&cfg)?;
        let mut rows = Vec::new();
        net.flop_rows(&cfg, height, width, &mut rows)?;
        reports.push(BackboneReport::new(backbone, rows, params));
    }
    let conv = reports.pop().unwrap();
    let product = reports.pop().unwrap();
    Ok(FlopsReport {
        height,
        width,
        product,
        conv,
    })
}
