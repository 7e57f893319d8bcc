//! Analytic parameter and FLOP counts. A multiply-accumulate is two FLOPs
//! and each bias adds one more input per output. Sparse blocks are costed at
//! a reference density: half as many active sites as events (capped at a
//! 34×34 sensor) and a quarter of the off-centre window positions active.

use super::{BlockKind, Fusion, ModelConfig};
use crate::error::Result;
use crate::numerics::{Activation, MlpSpec};

pub const REFERENCE_EVENTS: usize = 1024;
const REFERENCE_PIXELS: u64 = 34 * 34;
/// Elementwise work per attention pair and head channel: the query-key
/// difference, the pe sum, softmax (exp, sum, divide), `v + pe`, the product
/// and the accumulation.
const PAIR_FLOPS: u64 = 8;
const LAYER_NORM_FLOPS: u64 = 8;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModuleCost {
    pub name: String,
    pub params: u64,
    pub flops: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Complexity {
    pub events: usize,
    pub params: u64,
    pub flops: u64,
    pub modules: Vec<ModuleCost>,
}

#[derive(Default)]
struct Cost {
    params: u64,
    flops: u64,
}

impl Cost {
    fn mlp(&mut self, widths: &[usize], rows: u64) {
        let spec = MlpSpec::new(widths, Activation::Relu).expect("widths are positive");
        self.params += spec.num_params() as u64;
        self.flops += rows * spec.flops_per_row();
    }

    fn two_layer(&mut self, input: usize, output: usize, rows: u64) {
        self.mlp(&[input, output, output], rows);
    }

    fn attention(&mut self, pe_input: usize, head: usize, pairs: u64) {
        self.two_layer(pe_input, head, pairs);
        self.two_layer(head, head, pairs);
        self.flops += PAIR_FLOPS * pairs * head as u64;
    }
}

fn local(n: u64, c: usize, m: usize) -> Cost {
    let mut k = Cost::default();
    for _ in 0..3 {
        k.two_layer(c, c, n);
    }
    k.attention(4, c, n * m as u64);
    k.two_layer(c, c, n);
    k
}

fn sparse(n: u64, c: usize, head: usize, window: usize, kernel: usize) -> Cost {
    let sites = n.div_ceil(2).min(REFERENCE_PIXELS);
    let per_site = 1 + (window * window - 1) as u64 / 4;
    let cin = c + 2;
    let mut k = Cost::default();
    k.flops += n * c as u64;
    k.params += 2 * cin as u64;
    k.flops += LAYER_NORM_FLOPS * sites * cin as u64;
    for _ in 0..3 {
        k.mlp(&[kernel * kernel * cin, head], sites);
    }
    k.attention(3, head, sites * per_site);
    k.two_layer(head, c, sites);
    k.mlp(&[2 * c, c, c], n);
    k
}

fn global(n: u64, c: usize, rate: usize) -> Cost {
    let m = (n / rate as u64).max(1);
    let mut k = Cost::default();
    k.two_layer(c + 4, c, n);
    k.flops += n * c as u64;
    k.two_layer(c, c, m);
    k.two_layer(c, c, m);
    k.two_layer(c, c, n);
    k.attention(4, c, n * m);
    k.two_layer(c, c, n);
    k
}

pub fn count_params_flops(config: &ModelConfig, events: usize) -> Result<Complexity> {
    config.validate()?;
    let att = &config.attention;
    let widths = config.stage_channels();
    let mut modules = Vec::new();
    let mut push = |name: String, k: Cost| modules.push(ModuleCost { name, params: k.params, flops: k.flops });

    let mut n = events as u64;
    let mut embed = Cost::default();
    embed.two_layer(4, config.channels, n);
    push("embed".into(), embed);
    for (s, kinds) in config.structure.0.iter().enumerate() {
        let c = widths[s];
        if s > 0 {
            let out = n.div_ceil(config.downsample as u64);
            let mut k = Cost::default();
            k.mlp(&[widths[s - 1] + 4, c, c], n);
            k.flops += out * config.downsample as u64 * c as u64;
            push(format!("stage{s}.sample"), k);
            n = out;
        }
        for (j, kind) in kinds.iter().enumerate() {
            let k = match kind {
                BlockKind::Local => local(n, c, att.neighbors),
                BlockKind::Sparse => {
                    sparse(n, c, config.spconv_width(s), att.window, att.spconv_kernel)
                }
                BlockKind::Global => global(n, c, att.rate),
            };
            push(format!("stage{s}.{j}{}", kind.letter()), k);
            let fused = *kind == BlockKind::Local && kinds.get(j + 1) == Some(&BlockKind::Sparse);
            if fused && config.fusion == Fusion::Concat {
                let mut k = Cost::default();
                k.mlp(&[2 * c, c, c], n);
                push(format!("stage{s}.{j}mix"), k);
            }
        }
    }
    let mut head = Cost::default();
    let width = config.final_channels() + 4;
    head.flops += n * width as u64;
    let mut hw = vec![width];
    hw.extend(&config.head_widths);
    hw.push(config.num_classes);
    head.mlp(&hw, 1);
    push("head".into(), head);

    let params = modules.iter().map(|m| m.params).sum();
    let flops = modules.iter().map(|m| m.flops).sum();
    Ok(Complexity { events, params, flops, modules })
}
