//! Closed-form FLOP and parameter counts for dynamic upsamplers, and an
//! instrumented count of the multiply-adds the forward pass executes.
//!
//! One FLOP is one multiply-add. Counts are per decoder pixel (the
//! coefficient of `H * W`) for x2 upsampling.

use std::fmt::{self, Write as _};
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Result, SapaError};
use crate::similarity::{SapaParams, SimilarityKind};
use crate::tensor::{Real, Tensor};
use crate::upsample::{sapa_forward_counted, UpsamplerConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Operator {
    Carafe,
    IndexNetHin,
    IndexNetM2o,
    A2u,
    SapaI,
    SapaB,
    SapaG,
}

impl Operator {
    pub const ALL: [Operator; 7] = [
        Operator::Carafe,
        Operator::IndexNetHin,
        Operator::IndexNetM2o,
        Operator::A2u,
        Operator::SapaI,
        Operator::SapaB,
        Operator::SapaG,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Operator::Carafe => "CARAFE",
            Operator::IndexNetHin => "IndexNet-HIN",
            Operator::IndexNetM2o => "IndexNet-M2O",
            Operator::A2u => "A2U",
            Operator::SapaI => "SAPA-I",
            Operator::SapaB => "SAPA-B",
            Operator::SapaG => "SAPA-G",
        }
    }

    pub fn for_similarity(kind: SimilarityKind) -> Self {
        match kind {
            SimilarityKind::Inner => Operator::SapaI,
            SimilarityKind::Bilinear => Operator::SapaB,
            SimilarityKind::Gated => Operator::SapaG,
        }
    }
}

impl fmt::Display for Operator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Operator {
    type Err = SapaError;

    fn from_str(s: &str) -> Result<Self> {
        let key: String = s
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .collect::<String>()
            .to_ascii_lowercase();
        match key.as_str() {
            "carafe" => Ok(Operator::Carafe),
            "indexnethin" | "hin" => Ok(Operator::IndexNetHin),
            "indexnetm2o" | "m2o" => Ok(Operator::IndexNetM2o),
            "a2u" => Ok(Operator::A2u),
            "sapai" => Ok(Operator::SapaI),
            "sapab" => Ok(Operator::SapaB),
            "sapag" => Ok(Operator::SapaG),
            _ => Err(SapaError::config(format!("unknown operator '{s}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    KernelGeneration,
    Embedding,
    Gating,
    InnerProduct,
    Assembly,
}

impl Stage {
    pub fn name(&self) -> &'static str {
        match self {
            Stage::KernelGeneration => "kernel generation",
            Stage::Embedding => "feature embedding",
            Stage::Gating => "gated addition",
            Stage::InnerProduct => "inner product",
            Stage::Assembly => "feature assembly",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StageCost {
    pub stage: Stage,
    pub flops: u64,
    pub params: u64,
}

/// Published cost of one operator.
///
/// `flops` and `params` are the published totals and always equal the sum
/// of `stages`. The `implemented_*` fields describe this crate's operator,
/// which differs only for SAPA-G: the gate carries a bias and the mixing
/// step executes `C + 8d` multiply-adds (the published per-stage figure)
/// rather than the `C + 5d` that enters the published total.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CostReport {
    pub operator: Operator,
    pub channels: u64,
    pub embed_dim: u64,
    pub kernel_size: u64,
    pub stages: Vec<StageCost>,
    pub flops: u64,
    pub params: u64,
    pub implemented_flops: u64,
    pub implemented_params: u64,
}

/// Published per-pixel cost of `op` with `c` channels, embedding dim `d`
/// and kernel size `k`. `d` is ignored by operators without embeddings and
/// `k` by IndexNet.
pub fn cost(op: Operator, c: u64, d: u64, k: u64) -> Result<CostReport> {
    if c == 0 || d == 0 || k == 0 {
        return Err(SapaError::config("C, d and K must be positive"));
    }
    let k2 = k * k;
    let sc = |stage, flops, params| StageCost {
        stage,
        flops,
        params,
    };
    let stages = match op {
        Operator::Carafe => vec![
            sc(
                Stage::KernelGeneration,
                c * d + 36 * k2 * d,
                c * d + 36 * k2 * d,
            ),
            sc(Stage::Assembly, 4 * k2 * c, 0),
        ],
        Operator::IndexNetHin => vec![
            sc(
                Stage::KernelGeneration,
                32 * c * c + 8 * c,
                32 * c * c + 8 * c,
            ),
            sc(Stage::Assembly, 4 * c, 0),
        ],
        Operator::IndexNetM2o => vec![
            sc(Stage::KernelGeneration, 68 * c * c, 68 * c * c),
            sc(Stage::Assembly, 4 * c, 0),
        ],
        Operator::A2u => vec![
            sc(Stage::KernelGeneration, 73 * c + 4 * k2, 4 * k2 * c + 2 * c),
            sc(Stage::Assembly, 4 * k2 * c, 0),
        ],
        Operator::SapaI => vec![
            sc(Stage::InnerProduct, 4 * k2 * c, 0),
            sc(Stage::Assembly, 4 * k2 * c, 0),
        ],
        Operator::SapaB => vec![
            sc(Stage::Embedding, 5 * c * d, 2 * c * d),
            sc(Stage::InnerProduct, 4 * k2 * d, 0),
            sc(Stage::Assembly, 4 * k2 * c, 0),
        ],
        Operator::SapaG => vec![
            sc(Stage::Embedding, 5 * c * d, 2 * c * d),
            sc(Stage::Gating, c + 5 * d, c),
            sc(Stage::InnerProduct, 4 * k2 * d, 0),
            sc(Stage::Assembly, 4 * k2 * c, 0),
        ],
    };
    let flops = stages.iter().map(|s| s.flops).sum();
    let params = stages.iter().map(|s| s.params).sum();
    let (implemented_flops, implemented_params) = match op {
        Operator::SapaG => (flops + 3 * d, params + 1),
        _ => (flops, params),
    };
    Ok(CostReport {
        operator: op,
        channels: c,
        embed_dim: d,
        kernel_size: k,
        stages,
        flops,
        params,
        implemented_flops,
        implemented_params,
    })
}

/// Settings for the comparison operators, defaulting to their published
/// configurations.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BaselineSettings {
    pub carafe_embed_dim: u64,
    pub carafe_kernel: u64,
    pub a2u_kernel: u64,
}

impl Default for BaselineSettings {
    fn default() -> Self {
        BaselineSettings {
            carafe_embed_dim: 64,
            carafe_kernel: 5,
            a2u_kernel: 3,
        }
    }
}

/// One report per operator: baselines at their own settings, SAPA variants
/// at `(c, d, k)`.
pub fn cost_table(c: u64, d: u64, k: u64, baselines: BaselineSettings) -> Result<Vec<CostReport>> {
    Operator::ALL
        .iter()
        .map(|&op| match op {
            Operator::Carafe => cost(op, c, baselines.carafe_embed_dim, baselines.carafe_kernel),
            Operator::A2u => cost(op, c, d, baselines.a2u_kernel),
            _ => cost(op, c, d, k),
        })
        .collect()
}

fn uses_embedding(op: Operator) -> bool {
    matches!(op, Operator::Carafe | Operator::SapaB | Operator::SapaG)
}

fn uses_kernel(op: Operator) -> bool {
    !matches!(op, Operator::IndexNetHin | Operator::IndexNetM2o)
}

/// Human-readable table.
pub fn render_text(reports: &[CostReport]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<14} {:>5} {:>4} {:>3} {:>14} {:>12} {:>16} {:>14}",
        "operator", "C", "d", "K", "FLOPs/px", "params", "impl FLOPs/px", "impl params"
    );
    for r in reports {
        let d = if uses_embedding(r.operator) {
            r.embed_dim.to_string()
        } else {
            "-".into()
        };
        let k = if uses_kernel(r.operator) {
            r.kernel_size.to_string()
        } else {
            "-".into()
        };
        let _ = writeln!(
            s,
            "{:<14} {:>5} {:>4} {:>3} {:>14} {:>12} {:>16} {:>14}",
            r.operator.name(),
            r.channels,
            d,
            k,
            group_thousands(r.flops),
            group_thousands(r.params),
            group_thousands(r.implemented_flops),
            group_thousands(r.implemented_params)
        );
    }
    s
}

/// Comma-separated table with a header row.
pub fn render_csv(reports: &[CostReport]) -> String {
    let mut s = String::from(
        "operator,C,d,K,flops_per_pixel,params,implemented_flops_per_pixel,implemented_params\n",
    );
    for r in reports {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            r.operator.name(),
            r.channels,
            if uses_embedding(r.operator) {
                r.embed_dim
            } else {
                0
            },
            if uses_kernel(r.operator) {
                r.kernel_size
            } else {
                0
            },
            r.flops,
            r.params,
            r.implemented_flops,
            r.implemented_params
        );
    }
    s
}

pub fn group_thousands(v: u64) -> String {
    let digits = v.to_string();
    let mut out = String::new();
    for (i, ch) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i).is_multiple_of(3) {
            out.push(',');
        }
        out.push(ch);
    }
    out
}

/// Multiply-add tally, updated from worker threads.
#[derive(Debug, Default)]
pub struct OpCounter {
    embedding: AtomicU64,
    gating: AtomicU64,
    inner_product: AtomicU64,
    assembly: AtomicU64,
}

impl OpCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub(crate) fn add_embedding(&self, n: u64) {
        self.embedding.fetch_add(n, Ordering::Relaxed);
    }

    pub(crate) fn add_gating(&self, n: u64) {
        self.gating.fetch_add(n, Ordering::Relaxed);
    }

    pub(crate) fn add_inner_product(&self, n: u64) {
        self.inner_product.fetch_add(n, Ordering::Relaxed);
    }

    pub(crate) fn add_assembly(&self, n: u64) {
        self.assembly.fetch_add(n, Ordering::Relaxed);
    }

    pub fn snapshot(&self) -> OpCounts {
        OpCounts {
            embedding: self.embedding.load(Ordering::Relaxed),
            gating: self.gating.load(Ordering::Relaxed),
            inner_product: self.inner_product.load(Ordering::Relaxed),
            assembly: self.assembly.load(Ordering::Relaxed),
        }
    }
}

/// Multiply-adds executed by one forward pass, by stage.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct OpCounts {
    pub embedding: u64,
    pub gating: u64,
    pub inner_product: u64,
    pub assembly: u64,
}

impl OpCounts {
    pub fn total(&self) -> u64 {
        self.embedding + self.gating + self.inner_product + self.assembly
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Measurement {
    pub counts: OpCounts,
    /// Decoder pixels, `H * W`.
    pub decoder_pixels: u64,
}

impl Measurement {
    /// Total multiply-adds divided by `H * W`.
    pub fn per_pixel(&self) -> f64 {
        self.counts.total() as f64 / self.decoder_pixels as f64
    }
}

/// Runs the forward pass with instrumentation and returns the executed
/// multiply-add counts. LayerNorm and normalizer arithmetic are not counted.
pub fn measure_sapa<T: Real>(
    encoder: &Tensor<T>,
    decoder: &Tensor<T>,
    params: &SapaParams<T>,
    config: &UpsamplerConfig,
) -> Result<Measurement> {
    let counter = OpCounter::new();
    sapa_forward_counted(encoder, decoder, params, config, Some(&counter))?;
    Ok(Measurement {
        counts: counter.snapshot(),
        decoder_pixels: decoder.pixel_count() as u64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quoted_magnitudes_at_256_channels() {
        let b = BaselineSettings::default();
        assert_eq!(
            cost(Operator::Carafe, 256, b.carafe_embed_dim, 5)
                .unwrap()
                .flops,
            99_584
        );
        assert_eq!(
            cost(Operator::IndexNetHin, 256, 32, 5).unwrap().flops,
            2_100_224
        );
        assert_eq!(
            cost(Operator::A2u, 256, 32, b.a2u_kernel).unwrap().flops,
            27_940
        );
        let sb = cost(Operator::SapaB, 256, 32, 5).unwrap();
        assert_eq!((sb.flops, sb.params), (69_760, 16_384));
    }

    #[test]
    fn remaining_formulas() {
        let (c, d, k) = (64u64, 16u64, 3u64);
        let m2o = cost(Operator::IndexNetM2o, c, d, k).unwrap();
        assert_eq!((m2o.flops, m2o.params), (68 * c * c + 4 * c, 68 * c * c));
        let hin = cost(Operator::IndexNetHin, c, d, k).unwrap();
        assert_eq!(hin.params, 32 * c * c + 8 * c);
        let a2u = cost(Operator::A2u, c, d, k).unwrap();
        assert_eq!(a2u.params, 4 * 9 * c + 2 * c);
        let carafe = cost(Operator::Carafe, c, d, k).unwrap();
        assert_eq!(carafe.params, c * d + 36 * 9 * d);
        let si = cost(Operator::SapaI, c, d, k).unwrap();
        assert_eq!((si.flops, si.params), (8 * 9 * c, 0));
        let sg = cost(Operator::SapaG, c, d, k).unwrap();
        assert_eq!(sg.flops, 5 * c * d + 4 * 9 * d + 4 * 9 * c + c + 5 * d);
        assert_eq!(sg.params, 2 * c * d + c);
        assert_eq!(sg.implemented_params, 2 * c * d + c + 1);
    }

    #[test]
    fn totals_match_stages() {
        for op in Operator::ALL {
            let r = cost(op, 96, 24, 7).unwrap();
            assert_eq!(r.flops, r.stages.iter().map(|s| s.flops).sum::<u64>());
            assert_eq!(r.params, r.stages.iter().map(|s| s.params).sum::<u64>());
        }
    }

    #[test]
    fn gated_minus_bilinear() {
        for (c, d, k) in [(256, 32, 5), (17, 3, 1), (128, 64, 7)] {
            let b = cost(Operator::SapaB, c, d, k).unwrap();
            let g = cost(Operator::SapaG, c, d, k).unwrap();
            assert_eq!(g.flops - b.flops, c + 5 * d);
            assert_eq!(g.params - b.params, c);
            assert_eq!(cost(Operator::SapaI, c, d, k).unwrap().params, 0);
        }
    }

    #[test]
    fn parse_and_reject() {
        assert_eq!("sapa-b".parse::<Operator>().unwrap(), Operator::SapaB);
        assert_eq!(
            "IndexNet-HIN".parse::<Operator>().unwrap(),
            Operator::IndexNetHin
        );
        assert!("deconv".parse::<Operator>().is_err());
        assert!(cost(Operator::SapaB, 0, 1, 1).is_err());
    }

    #[test]
    fn table_renders_quoted_values() {
        let table = cost_table(256, 32, 5, BaselineSettings::default()).unwrap();
        let text = render_text(&table);
        for v in ["99,584", "2,100,224", "27,940", "69,760"] {
            assert!(text.contains(v), "{v} missing from\n{text}");
        }
        let csv = render_csv(&table);
        assert_eq!(csv.lines().count(), 8);
        assert!(csv.contains("SAPA-B,256,32,5,69760,16384,69760,16384"));
    }

    #[test]
    fn thousands() {
        assert_eq!(group_thousands(0), "0");
        assert_eq!(group_thousands(999), "999");
        assert_eq!(group_thousands(1000), "1,000");
        assert_eq!(group_thousands(2_100_224), "2,100,224");
    }
}
