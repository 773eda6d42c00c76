use std::fmt;

use serde::{Deserialize, Serialize};

use super::{ArchGraph, ModuleKind, ModuleSpec, NodeKind, OpNode, PoolOp, Stage, Style};
use crate::error::{Error, Result};
use crate::nn::MLP_DROPOUT;

/// Network families the builder knows.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum Family {
    Mlp12,
    Vgg31,
    Res31,
    /// CIFAR ResNet with basic blocks, depth `6n + 2`.
    ResnetBasic { depth: usize },
    /// Pre-activation CIFAR ResNet with basic blocks, depth `6n + 2`.
    PreactBasic { depth: usize },
    /// CIFAR ResNet with bottleneck blocks, depth `9n + 2`.
    ResnetBottleneck { depth: usize },
    /// Inception-v2 style CIFAR net with `modules` modules over three stages.
    InceptionCifar { modules: usize },
    /// Scalar-in scalar-out residual MLP with `depth` middle modules.
    ScalarNet { depth: usize, width: usize },
}

impl Family {
    pub const NAMES: &'static [&'static str] = &[
        "mlp12",
        "vgg31",
        "res31",
        "resnet_basic",
        "preact_basic",
        "resnet_bottleneck",
        "inception_cifar",
        "scalar_net",
    ];

    /// Resolve a family name plus optional depth (module count for
    /// `inception_cifar`) with the usual defaults.
    pub fn parse(name: &str, depth: Option<usize>) -> Result<Family> {
        let fixed = |f: Family, d: usize| match depth {
            Some(x) if x != d => Err(Error::Config(format!("{name} has fixed depth {d}, got {x}"))),
            _ => Ok(f),
        };
        let family = match name {
            "mlp12" => fixed(Family::Mlp12, 12)?,
            "vgg31" => fixed(Family::Vgg31, 31)?,
            "res31" => fixed(Family::Res31, 31)?,
            "resnet_basic" => Family::ResnetBasic { depth: depth.unwrap_or(20) },
            "preact_basic" => Family::PreactBasic { depth: depth.unwrap_or(20) },
            "resnet_bottleneck" => Family::ResnetBottleneck { depth: depth.unwrap_or(29) },
            "inception_cifar" => Family::InceptionCifar { modules: depth.unwrap_or(30) },
            "scalar_net" => Family::ScalarNet {
                depth: depth.unwrap_or(2),
                width: 200,
            },
            other => {
                return Err(Error::Config(format!(
                    "unknown family {other:?}; expected one of {}",
                    Family::NAMES.join(", ")
                )))
            }
        };
        family.check()?;
        Ok(family)
    }

    fn check(self) -> Result<()> {
        let bad = |formula: &str, got: usize| Err(Error::Config(format!("{self}: depth must be {formula}, got {got}")));
        match self {
            Family::ResnetBasic { depth } | Family::PreactBasic { depth } => {
                if depth < 8 || (depth - 2) % 6 != 0 {
                    return bad("6n + 2 with n >= 1", depth);
                }
            }
            Family::ResnetBottleneck { depth } => {
                if depth < 11 || (depth - 2) % 9 != 0 {
                    return bad("9n + 2 with n >= 1", depth);
                }
            }
            Family::InceptionCifar { modules } => {
                if modules == 0 || modules % 3 != 0 {
                    return bad("a positive multiple of 3 (modules over three stages)", modules);
                }
            }
            Family::ScalarNet { depth, width } => {
                if depth == 0 {
                    return bad("at least 1", depth);
                }
                if width < 2 {
                    return Err(Error::Config(format!("scalar_net width must be >= 2, got {width}")));
                }
            }
            Family::Mlp12 | Family::Vgg31 | Family::Res31 => {}
        }
        Ok(())
    }

    /// One representative of every family, as used by sweeps and tests.
    pub fn catalog() -> Vec<Family> {
        vec![
            Family::Mlp12,
            Family::Vgg31,
            Family::Res31,
            Family::ResnetBasic { depth: 20 },
            Family::PreactBasic { depth: 20 },
            Family::ResnetBottleneck { depth: 29 },
            Family::InceptionCifar { modules: 30 },
            Family::ScalarNet { depth: 3, width: 16 },
        ]
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Family::Mlp12 => write!(f, "mlp12"),
            Family::Vgg31 => write!(f, "vgg31"),
            Family::Res31 => write!(f, "res31"),
            Family::ResnetBasic { depth } => write!(f, "resnet_basic({depth})"),
            Family::PreactBasic { depth } => write!(f, "preact_basic({depth})"),
            Family::ResnetBottleneck { depth } => write!(f, "resnet_bottleneck({depth})"),
            Family::InceptionCifar { modules } => write!(f, "inception_cifar({modules})"),
            Family::ScalarNet { depth, width } => write!(f, "scalar_net({depth}, width={width})"),
        }
    }
}

/// Which activations are parametric.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
    /// Every ReLU becomes a PReLU.
    PreluAll,
    /// Only the ReLUs right after a shortcut addition become PReLUs.
    PreluSum,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BuildOptions {
    #[serde(default = "default_classes")]
    pub num_classes: usize,
    #[serde(default)]
    pub activation: Activation,
}

fn default_classes() -> usize {
    10
}

impl Default for BuildOptions {
    fn default() -> Self {
        Self {
            num_classes: default_classes(),
            activation: Activation::Relu,
        }
    }
}

const CIFAR_INPUT: [usize; 3] = [3, 32, 32];
const MNIST_INPUT: [usize; 3] = [1, 28, 28];
const STAGE_WIDTHS: [usize; 3] = [16, 32, 64];

struct Builder {
    activation: Activation,
    nodes: Vec<OpNode>,
    current: Vec<usize>,
    stem: Vec<usize>,
    modules: Vec<ModuleSpec>,
    stages: Vec<Stage>,
}

impl Builder {
    fn new(activation: Activation) -> Self {
        Self {
            activation,
            nodes: Vec::new(),
            current: Vec::new(),
            stem: Vec::new(),
            modules: Vec::new(),
            stages: Vec::new(),
        }
    }

    fn push(&mut self, kind: NodeKind, inputs: &[usize]) -> usize {
        let id = self.nodes.len();
        self.nodes.push(OpNode {
            id,
            kind,
            inputs: inputs.to_vec(),
            shortcut: false,
        });
        self.current.push(id);
        id
    }

    fn conv(&mut self, input: Option<usize>, out_channels: usize, kernel: usize, stride: usize) -> usize {
        let kind = NodeKind::Conv {
            out_channels,
            kernel,
            stride,
            pad: kernel / 2,
        };
        self.push(kind, input.as_slice())
    }

    fn unary(&mut self, kind: NodeKind, input: usize) -> usize {
        self.push(kind, &[input])
    }

    /// ReLU (or PReLU per the variant); `after_sum` marks activations that
    /// directly follow a shortcut addition.
    fn act(&mut self, input: usize, after_sum: bool) -> usize {
        let kind = match (self.activation, after_sum) {
            (Activation::PreluAll, _) | (Activation::PreluSum, true) => NodeKind::Prelu,
            _ => NodeKind::Relu,
        };
        self.unary(kind, input)
    }

    fn conv_bn_act(&mut self, input: Option<usize>, out_channels: usize, kernel: usize, stride: usize) -> usize {
        let c = self.conv(input, out_channels, kernel, stride);
        let b = self.unary(NodeKind::Bn, c);
        self.act(b, false)
    }

    /// 1x1 projection (conv + BN) when the shape changes, else identity.
    fn shortcut(&mut self, input: usize, in_channels: usize, out_channels: usize, stride: usize) -> usize {
        if in_channels == out_channels && stride == 1 {
            return input;
        }
        let c = self.conv(Some(input), out_channels, 1, stride);
        let b = self.unary(NodeKind::Bn, c);
        for id in [c, b] {
            self.nodes[id].shortcut = true;
        }
        b
    }

    fn add(&mut self, branch: usize, shortcut: usize) -> usize {
        self.push(NodeKind::AddShortcut, &[branch, shortcut])
    }

    fn finish_stem(&mut self) {
        self.stem = std::mem::take(&mut self.current);
    }

    fn finish_module(&mut self, kind: ModuleKind, tail: Vec<usize>) {
        let index = self.modules.len() + 1;
        self.modules.push(ModuleSpec {
            index,
            kind,
            nodes: std::mem::take(&mut self.current),
            tail_activation: tail,
            tail_erased: false,
        });
    }

    fn finish_stage(&mut self, first: usize, out_channels: usize, downsample: bool) {
        self.stages.push(Stage {
            modules: (first..=self.modules.len()).collect(),
            out_channels,
            downsample,
        });
    }

    #[allow(clippy::too_many_arguments)]
    fn finish(
        mut self,
        family: Family,
        style: Style,
        input_shape: &[usize],
        num_classes: usize,
        declared_depth: usize,
        classifier_in_depth: bool,
    ) -> ArchGraph {
        let head = std::mem::take(&mut self.current);
        ArchGraph {
            family: family.to_string(),
            style,
            input_shape: input_shape.to_vec(),
            num_classes,
            declared_depth,
            classifier_in_depth,
            stem: self.stem,
            stages: self.stages,
            modules: self.modules,
            head,
            nodes: self.nodes,
        }
    }

    fn pooled_classifier(&mut self, input: usize, num_classes: usize) {
        let p = self.unary(NodeKind::Pool { pool: PoolOp::GlobalAvg }, input);
        self.unary(NodeKind::Classifier { out_features: num_classes }, p);
    }

    /// Three stages at the CIFAR widths; `module` builds one module from
    /// `(input, in_channels, base_channels, stride)` and returns its output
    /// and output channel count.
    fn cifar_stages(
        &mut self,
        mut x: usize,
        mut channels: usize,
        per_stage: usize,
        mut module: impl FnMut(&mut Self, usize, usize, usize, usize) -> (usize, usize),
    ) -> usize {
        for (s, &width) in STAGE_WIDTHS.iter().enumerate() {
            let first = self.modules.len() + 1;
            let mut stage_out = channels;
            for m in 0..per_stage {
                let stride = if s > 0 && m == 0 { 2 } else { 1 };
                let (y, c) = module(self, x, channels, width, stride);
                x = y;
                channels = c;
                stage_out = c;
            }
            self.finish_stage(first, stage_out, s > 0);
        }
        x
    }
}

/// Build a network of `family`.
pub fn build_network(family: Family, opts: BuildOptions) -> Result<ArchGraph> {
    family.check()?;
    if opts.num_classes < 2 && !matches!(family, Family::ScalarNet { .. }) {
        return Err(Error::Config(format!("num_classes must be >= 2, got {}", opts.num_classes)));
    }
    let classes = opts.num_classes;
    let mut b = Builder::new(opts.activation);
    let graph = match family {
        Family::Mlp12 => {
            let mut x = b.push(NodeKind::Flatten, &[]);
            b.finish_stem();
            for _ in 0..11 {
                let l = b.unary(NodeKind::Linear { out_features: 1000 }, x);
                let n = b.unary(NodeKind::Bn, l);
                let r = b.act(n, false);
                x = b.unary(NodeKind::Dropout { rate: MLP_DROPOUT }, r);
                b.finish_module(ModuleKind::MlpBlock, vec![r]);
            }
            b.finish_stage(1, 1000, false);
            b.unary(NodeKind::Classifier { out_features: classes }, x);
            b.finish(family, Style::AfterActivation, &MNIST_INPUT, classes, 12, true)
        }
        Family::Vgg31 | Family::Res31 => {
            let x = b.conv_bn_act(None, 16, 3, 1);
            b.finish_stem();
            let residual = family == Family::Res31;
            let x = b.cifar_stages(x, 16, 10, |b, x, cin, width, stride| {
                let c = b.conv(Some(x), width, 3, stride);
                let n = b.unary(NodeKind::Bn, c);
                let (tail, kind) = if residual {
                    let s = b.shortcut(x, cin, width, stride);
                    let a = b.add(n, s);
                    (b.act(a, true), ModuleKind::ResBasic)
                } else {
                    (b.act(n, false), ModuleKind::VggBlock)
                };
                b.finish_module(kind, vec![tail]);
                (tail, width)
            });
            b.pooled_classifier(x, classes);
            b.finish(family, Style::AfterActivation, &CIFAR_INPUT, classes, 31, false)
        }
        Family::ResnetBasic { depth } => {
            let x = b.conv_bn_act(None, 16, 3, 1);
            b.finish_stem();
            let x = b.cifar_stages(x, 16, (depth - 2) / 6, |b, x, cin, width, stride| {
                let h = b.conv_bn_act(Some(x), width, 3, stride);
                let c = b.conv(Some(h), width, 3, 1);
                let n = b.unary(NodeKind::Bn, c);
                let s = b.shortcut(x, cin, width, stride);
                let a = b.add(n, s);
                let tail = b.act(a, true);
                b.finish_module(ModuleKind::ResBasic, vec![tail]);
                (tail, width)
            });
            b.pooled_classifier(x, classes);
            b.finish(family, Style::AfterActivation, &CIFAR_INPUT, classes, depth, true)
        }
        Family::ResnetBottleneck { depth } => {
            let x = b.conv_bn_act(None, 16, 3, 1);
            b.finish_stem();
            let x = b.cifar_stages(x, 16, (depth - 2) / 9, |b, x, cin, width, stride| {
                let out = 4 * width;
                let h = b.conv_bn_act(Some(x), width, 1, 1);
                let h = b.conv_bn_act(Some(h), width, 3, stride);
                let c = b.conv(Some(h), out, 1, 1);
                let n = b.unary(NodeKind::Bn, c);
                let s = b.shortcut(x, cin, out, stride);
                let a = b.add(n, s);
                let tail = b.act(a, true);
                b.finish_module(ModuleKind::ResBottleneck, vec![tail]);
                (tail, out)
            });
            b.pooled_classifier(x, classes);
            b.finish(family, Style::AfterActivation, &CIFAR_INPUT, classes, depth, true)
        }
        Family::PreactBasic { depth } => {
            let x = b.conv(None, 16, 3, 1);
            b.finish_stem();
            let x = b.cifar_stages(x, 16, (depth - 2) / 6, |b, x, cin, width, stride| {
                let n0 = b.unary(NodeKind::Bn, x);
                let r0 = b.act(n0, false);
                let c1 = b.conv(Some(r0), width, 3, stride);
                let n1 = b.unary(NodeKind::Bn, c1);
                let r1 = b.act(n1, false);
                let c2 = b.conv(Some(r1), width, 3, 1);
                let s = b.shortcut(x, cin, width, stride);
                let a = b.add(c2, s);
                b.finish_module(ModuleKind::PreactBasic, Vec::new());
                (a, width)
            });
            let n = b.unary(NodeKind::Bn, x);
            let r = b.act(n, false);
            b.pooled_classifier(r, classes);
            b.finish(family, Style::PreActivation, &CIFAR_INPUT, classes, depth, true)
        }
        Family::InceptionCifar { modules } => {
            let x = b.conv_bn_act(None, 64, 3, 1);
            b.finish_stem();
            let x = b.cifar_stages(x, 64, modules / 3, |b, x, _cin, base, stride| {
                let u = base / 4;
                let t1 = b.conv_bn_act(Some(x), u, 1, stride);
                let h = b.conv_bn_act(Some(x), 4 * u, 1, stride);
                let t2 = b.conv_bn_act(Some(h), 8 * u, 3, 1);
                let h = b.conv_bn_act(Some(x), u, 1, stride);
                let h = b.conv_bn_act(Some(h), 2 * u, 3, 1);
                let t3 = b.conv_bn_act(Some(h), 2 * u, 3, 1);
                let p = b.unary(
                    NodeKind::Pool {
                        pool: PoolOp::Max {
                            kernel: 3,
                            stride,
                            pad: 1,
                        },
                    },
                    x,
                );
                let t4 = b.conv_bn_act(Some(p), u, 1, 1);
                let cat = b.push(NodeKind::Concat, &[t1, t2, t3, t4]);
                b.finish_module(ModuleKind::InceptionV2, vec![t1, t2, t3, t4]);
                (cat, 12 * u)
            });
            b.pooled_classifier(x, classes);
            b.finish(family, Style::AfterActivation, &CIFAR_INPUT, classes, 1 + 7 * modules, false)
        }
        Family::ScalarNet { depth, width } => {
            let mut x = b.push(NodeKind::Linear { out_features: width }, &[]);
            b.finish_stem();
            for _ in 0..depth {
                let l1 = b.unary(NodeKind::Linear { out_features: width }, x);
                let n1 = b.unary(NodeKind::Ln, l1);
                let r1 = b.act(n1, false);
                let l2 = b.unary(NodeKind::Linear { out_features: width }, r1);
                let n2 = b.unary(NodeKind::Ln, l2);
                let a = b.add(n2, x);
                x = b.act(a, true);
                b.finish_module(ModuleKind::FcResidual, vec![x]);
            }
            b.finish_stage(1, width, false);
            b.unary(NodeKind::Classifier { out_features: 1 }, x);
            b.finish(family, Style::AfterActivation, &[1], 1, 2 + 2 * depth, true)
        }
    };
    Ok(graph)
}

/// The scalar analysis network: input FC `1 -> width`, `depth` residual
/// FC/LayerNorm modules, output FC `width -> 1`.
pub fn build_scalar_net(depth: usize, width: usize) -> Result<ArchGraph> {
    build_network(Family::ScalarNet { depth, width }, BuildOptions { num_classes: 1, ..Default::default() })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn invalid_depth_names_the_formula() {
        let err = Family::parse("resnet_basic", Some(21)).unwrap_err();
        assert!(err.to_string().contains("6n + 2"), "{err}");
        assert!(Family::parse("resnet_bottleneck", Some(21)).unwrap_err().to_string().contains("9n + 2"));
        assert!(Family::parse("vgg31", Some(30)).is_err());
        assert!(matches!(Family::parse("densenet", None), Err(Error::Config(_))));
    }

    #[test]
    fn vgg31_layout() {
        let g = build_network(Family::Vgg31, BuildOptions::default()).unwrap();
        assert_eq!(g.modules.len(), 30);
        let widths: Vec<usize> = g.stages.iter().map(|s| s.out_channels).collect();
        assert_eq!(widths, [16, 32, 64]);
        assert_eq!(g.stages.iter().map(|s| s.downsample).collect::<Vec<_>>(), [false, true, true]);
        assert_eq!(g.module_signature(1), ["conv", "bn", "relu"]);
    }

    #[test]
    fn mlp12_blocks_then_bare_classifier() {
        let g = build_network(Family::Mlp12, BuildOptions::default()).unwrap();
        assert_eq!(g.modules.len(), 11);
        for m in 1..=11 {
            assert_eq!(g.module_signature(m), ["linear", "bn", "relu", "dropout"]);
        }
        let last = g.node(*g.head.last().unwrap()).unwrap();
        assert_eq!(last.kind, NodeKind::Classifier { out_features: 10 });
        assert_eq!(g.head.len(), 1);
    }

    #[test]
    fn resnet_modules_and_projection_shortcuts() {
        let g = build_network(Family::ResnetBasic { depth: 20 }, BuildOptions::default()).unwrap();
        assert_eq!(g.modules.len(), 9);
        assert_eq!(g.module_signature(1), ["conv", "bn", "relu", "conv", "bn", "add_shortcut", "relu"]);
        assert_eq!(
            g.module_signature(4),
            ["conv", "bn", "relu", "conv", "bn", "conv", "bn", "add_shortcut", "relu"]
        );
        assert_eq!(g.nodes.iter().filter(|n| n.shortcut).count(), 4);
    }

    #[test]
    fn inception_tails_feed_the_concat() {
        let g = build_network(Family::InceptionCifar { modules: 3 }, BuildOptions::default()).unwrap();
        let m = &g.modules[0];
        assert_eq!(m.tail_activation.len(), 4);
        let concat = g.node(*m.nodes.last().unwrap()).unwrap();
        assert_eq!(concat.kind, NodeKind::Concat);
        assert_eq!(concat.inputs, m.tail_activation);
    }

    #[test]
    fn prelu_variants() {
        let opts = |activation| BuildOptions {
            activation,
            ..Default::default()
        };
        let fam = Family::ResnetBasic { depth: 20 };
        let all = build_network(fam, opts(Activation::PreluAll)).unwrap();
        assert_eq!((all.count_kind("relu"), all.count_kind("prelu")), (0, 19));
        let sum = build_network(fam, opts(Activation::PreluSum)).unwrap();
        assert_eq!((sum.count_kind("relu"), sum.count_kind("prelu")), (10, 9));
        for m in &sum.modules {
            assert_eq!(sum.node(m.tail_activation[0]).unwrap().kind, NodeKind::Prelu);
        }
    }

    #[test]
    fn scalar_net_relu_counts() {
        let g = build_scalar_net(5, 8).unwrap();
        assert_eq!(g.count_kind("relu"), 10);
        assert_eq!(g.count_kind("ln"), 10);
    }
}
